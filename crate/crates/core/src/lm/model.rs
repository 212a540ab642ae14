//! A small GPT-style causal transformer in f64 with hand-written backprop.
//!
//! Training and scoring run over a packed token trie: sequences that share a
//! prefix (the dialogue history, typically) share nodes, and every node
//! attends to its ancestors. A chain is the ordinary causal case.

use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::layout::{LMConfig, Layout, PositionEncoding, Span};
use super::optim::{OptimizerConfig, OptimizerState};
use super::vocab::{TokenId, Vocabulary, BOS};
use super::{LanguageModel, Objective, ObjectiveEval};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
const SINUSOID_SCALE: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct CausalLM {
    config: LMConfig,
    vocab: Vocabulary,
    layout: Layout,
    params: Vec<f64>,
    optimizer: OptimizerState,
    steps: usize,
    training: bool,
}

/// Per-layer key/value rows of already processed positions.
#[derive(Clone, Debug)]
pub struct KvCache {
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    len: usize,
}

/// Incremental decoding state: cached keys/values plus the distribution of
/// the next token.
#[derive(Clone, Debug)]
pub struct DecodeState {
    cache: KvCache,
    probs: Vec<f64>,
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

struct LayerActs {
    ln1: LnCache,
    h1: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Vec<f64>>,
    attn: Array2<f64>,
    ln2: LnCache,
    h2: Array2<f64>,
    fc: Array2<f64>,
    act: Array2<f64>,
}

struct Forward {
    layers: Vec<LayerActs>,
    lnf: LnCache,
    hf: Array2<f64>,
    /// Log-softmax rows for the requested positions.
    logprobs: Array2<f64>,
}

/// Sequences packed into a prefix trie.
struct Packed {
    tokens: Vec<TokenId>,
    positions: Vec<usize>,
    ancestors: Vec<Vec<u32>>,
    rows: Vec<usize>,
    /// (row index, target token, coefficient)
    terms: Vec<(usize, TokenId, f64)>,
    /// For every sequence, the term index of each target token.
    seq_terms: Vec<Vec<usize>>,
}

fn layer_norm(x: &Array2<f64>, g: ArrayView1<f64>, b: ArrayView1<f64>) -> (Array2<f64>, LnCache) {
    let (n, d) = x.dim();
    let mut xhat = Array2::zeros((n, d));
    let mut rstd = Array1::zeros(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for j in 0..d {
            xhat[[i, j]] = (row[j] - mean) * r;
        }
    }
    let y = &xhat * &g + b;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(dy: &Array2<f64>, cache: &LnCache, g: ArrayView1<f64>, dg: &mut [f64], db: &mut [f64]) -> Array2<f64> {
    let (n, d) = dy.dim();
    let mut dx = Array2::zeros((n, d));
    for i in 0..n {
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            let dyv = dy[[i, j]];
            let xh = cache.xhat[[i, j]];
            dg[j] += dyv * xh;
            db[j] += dyv;
            let dxh = dyv * g[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh;
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let r = cache.rstd[i];
        for j in 0..d {
            let xh = cache.xhat[[i, j]];
            dx[[i, j]] = r * (dy[[i, j]] * g[j] - mean_dxhat - xh * mean_dxhat_xhat);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn add_into(dst: &mut [f64], src: &Array2<f64>) {
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d += s;
    }
}

fn add_colsum(dst: &mut [f64], src: &Array2<f64>) {
    for row in src.rows() {
        for (d, s) in dst.iter_mut().zip(row.iter()) {
            *d += s;
        }
    }
}

fn log_softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

impl CausalLM {
    /// Randomly initialized model (N(0, 0.02) weights, unit LayerNorm gains).
    pub fn new(config: LMConfig, vocab: Vocabulary) -> Result<Self> {
        let mut model = Self::zeroed(config, vocab)?;
        let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let proj_std = INIT_STD / (2.0 * model.config.layers as f64).sqrt();
        let proj = Normal::new(0.0, proj_std).expect("valid std");
        let layout = model.layout.clone();
        let mut fill = |span: Span, dist: &Normal<f64>, params: &mut [f64]| {
            for p in &mut params[span.range()] {
                *p = dist.sample(&mut rng);
            }
        };
        fill(layout.tok_emb, &normal, &mut model.params);
        if model.config.positions == PositionEncoding::Learned {
            fill(layout.pos_emb, &normal, &mut model.params);
        }
        for l in &layout.layers {
            fill(l.w_qkv, &normal, &mut model.params);
            fill(l.w_o, &proj, &mut model.params);
            fill(l.w_fc, &normal, &mut model.params);
            fill(l.w_proj, &proj, &mut model.params);
        }
        Ok(model)
    }

    /// A model whose next-token distribution is exactly uniform everywhere:
    /// all trainable weights zero, LayerNorm gains one.
    pub fn uniform(config: LMConfig, vocab: Vocabulary) -> Result<Self> {
        Self::zeroed(config, vocab)
    }

    /// `sin`/`cos` table with geometric wavelengths, scaled to the token
    /// embedding magnitude.
    fn fill_sinusoidal(&mut self) {
        let d = self.config.model_dim;
        let span = self.layout.pos_emb;
        for pos in 0..span.rows {
            for i in 0..d / 2 {
                let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
                let a = pos as f64 * freq;
                self.params[span.off + pos * d + 2 * i] = SINUSOID_SCALE * a.sin();
                self.params[span.off + pos * d + 2 * i + 1] = SINUSOID_SCALE * a.cos();
            }
        }
    }

    fn zeroed(config: LMConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config, vocab.len());
        let mut params = vec![0.0; layout.total];
        let ones = |s: Span, p: &mut [f64]| p[s.range()].iter_mut().for_each(|v| *v = 1.0);
        for l in &layout.layers {
            ones(l.ln1_g, &mut params);
            ones(l.ln2_g, &mut params);
        }
        ones(layout.lnf_g, &mut params);
        let mut model = CausalLM {
            config,
            vocab,
            layout,
            params,
            optimizer: OptimizerState::new(OptimizerConfig::default()),
            steps: 0,
            training: true,
        };
        if model.config.positions == PositionEncoding::Sinusoidal {
            model.fill_sinusoidal();
        }
        Ok(model)
    }

    pub(crate) fn from_parts(config: LMConfig, vocab: Vocabulary, params: Vec<f64>) -> Result<Self> {
        let mut model = Self::zeroed(config, vocab)?;
        if params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                model.params.len(),
                params.len()
            )));
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &LMConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Names and shapes of the parameter tensors, in buffer order.
    pub fn tensor_shapes(&self) -> Vec<(String, [usize; 2])> {
        self.layout
            .names
            .iter()
            .map(|(n, s)| (n.clone(), [s.rows, s.cols]))
            .collect()
    }

    pub fn set_optimizer(&mut self, cfg: OptimizerConfig) {
        self.optimizer = OptimizerState::new(cfg);
    }

    pub fn optimizer_config(&self) -> &OptimizerConfig {
        self.optimizer.config()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Marks the model read-only; gradient steps are refused afterwards.
    pub fn freeze(&mut self) {
        self.training = false;
    }

    pub fn unfreeze(&mut self) {
        self.training = true;
    }

    fn view(&self, s: Span) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((s.rows, s.cols), &self.params[s.range()]).expect("span shape")
    }

    fn vec_view(&self, s: Span) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[s.range()])
    }

    /// Next-token distributions at every position of `[BOS] + tokens`.
    pub fn distributions(&self, tokens: &[TokenId]) -> Result<Vec<Vec<f64>>> {
        let mut seq = vec![BOS];
        seq.extend_from_slice(tokens);
        self.check_tokens(&seq)?;
        if seq.len() > self.config.context_length {
            return Err(Error::ContextOverflow {
                item: 0,
                needed: seq.len(),
                limit: self.config.context_length,
            });
        }
        let n = seq.len();
        let positions: Vec<usize> = (0..n).collect();
        let ancestors: Vec<Vec<u32>> = (0..n).map(|i| (0..=i as u32).collect()).collect();
        let rows: Vec<usize> = (0..n).collect();
        let fwd = self.forward(&seq, &positions, &ancestors, None, &rows);
        Ok(fwd.logprobs.rows().into_iter().map(|r| r.iter().map(|v| v.exp()).collect()).collect())
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        let v = self.vocab.len() as TokenId;
        match tokens.iter().find(|&&t| t >= v) {
            Some(t) => Err(Error::InvalidArgument(format!("token id {t} outside vocabulary of size {v}"))),
            None => Ok(()),
        }
    }

    fn pack(&self, obj: &Objective) -> Result<Packed> {
        let ctx = self.config.context_length;
        let mut tokens = Vec::new();
        let mut positions = Vec::new();
        let mut ancestors: Vec<Vec<u32>> = Vec::new();
        let mut children: HashMap<(u32, TokenId), u32> = HashMap::new();
        let mut rows = Vec::new();
        let mut row_of_node: HashMap<u32, usize> = HashMap::new();
        let mut terms: Vec<(usize, TokenId, f64)> = Vec::new();
        let mut term_index: HashMap<(usize, TokenId), usize> = HashMap::new();
        let mut seq_terms = Vec::with_capacity(obj.sequences.len());

        for (item, seq) in obj.sequences.iter().enumerate() {
            if seq.weights.len() != seq.target.len() {
                return Err(Error::InvalidArgument(format!("item {item}: one weight per target token required")));
            }
            let needed = 1 + seq.prefix.len() + seq.target.len();
            if needed > ctx {
                return Err(Error::ContextOverflow { item, needed, limit: ctx });
            }
            self.check_tokens(&seq.prefix)?;
            self.check_tokens(&seq.target)?;
            let full = std::iter::once(BOS).chain(seq.prefix.iter().copied()).chain(seq.target.iter().copied());
            let mut parent = u32::MAX;
            let mut path = Vec::with_capacity(needed);
            for (pos, tok) in full.enumerate() {
                let node = *children.entry((parent, tok)).or_insert_with(|| {
                    let id = tokens.len() as u32;
                    tokens.push(tok);
                    positions.push(pos);
                    let mut anc = if parent == u32::MAX {
                        Vec::with_capacity(1)
                    } else {
                        let mut a = Vec::with_capacity(pos + 1);
                        a.extend_from_slice(&ancestors[parent as usize]);
                        a
                    };
                    anc.push(id);
                    ancestors.push(anc);
                    id
                });
                path.push(node);
                parent = node;
            }
            let start = 1 + seq.prefix.len();
            let mut idx = Vec::with_capacity(seq.target.len());
            for (j, (&tok, &w)) in seq.target.iter().zip(&seq.weights).enumerate() {
                let pred_node = path[start + j - 1];
                let row = *row_of_node.entry(pred_node).or_insert_with(|| {
                    rows.push(pred_node as usize);
                    rows.len() - 1
                });
                let t = *term_index.entry((row, tok)).or_insert_with(|| {
                    terms.push((row, tok, 0.0));
                    terms.len() - 1
                });
                terms[t].2 += w;
                idx.push(t);
            }
            seq_terms.push(idx);
        }
        Ok(Packed {
            tokens,
            positions,
            ancestors,
            rows,
            terms,
            seq_terms,
        })
    }

    fn forward(
        &self,
        tokens: &[TokenId],
        positions: &[usize],
        ancestors: &[Vec<u32>],
        cache: Option<&KvCache>,
        rows: &[usize],
    ) -> Forward {
        let d = self.config.model_dim;
        let nh = self.config.heads;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let n = tokens.len();
        let c0 = cache.map_or(0, |c| c.len);
        let tok_emb = self.view(self.layout.tok_emb);
        let pos_emb = self.view(self.layout.pos_emb);

        let mut x = Array2::zeros((n, d));
        for i in 0..n {
            let mut row = x.row_mut(i);
            row += &tok_emb.row(tokens[i] as usize);
            row += &pos_emb.row(positions[i]);
        }

        let mut layers = Vec::with_capacity(self.config.layers);
        for (li, l) in self.layout.layers.iter().enumerate() {
            let (h1, ln1) = layer_norm(&x, self.vec_view(l.ln1_g), self.vec_view(l.ln1_b));
            let qkv = h1.dot(&self.view(l.w_qkv)) + self.vec_view(l.b_qkv);
            let qkv_s = qkv.as_slice().expect("standard layout");
            let mut attn = Array2::<f64>::zeros((n, d));
            let attn_s = attn.as_slice_mut().expect("standard layout");
            let mut probs = Vec::with_capacity(n * nh);
            let key = |g: usize, h: usize| -> &[f64] {
                if g < c0 {
                    &cache.expect("cached position").k[li][g * d + h * hd..g * d + (h + 1) * hd]
                } else {
                    let r = (g - c0) * 3 * d + d + h * hd;
                    &qkv_s[r..r + hd]
                }
            };
            let val = |g: usize, h: usize| -> &[f64] {
                if g < c0 {
                    &cache.expect("cached position").v[li][g * d + h * hd..g * d + (h + 1) * hd]
                } else {
                    let r = (g - c0) * 3 * d + 2 * d + h * hd;
                    &qkv_s[r..r + hd]
                }
            };
            for i in 0..n {
                let anc = &ancestors[i];
                for h in 0..nh {
                    let q = &qkv_s[i * 3 * d + h * hd..i * 3 * d + (h + 1) * hd];
                    let mut p: Vec<f64> = anc.iter().map(|&g| dot(q, key(g as usize, h)) * scale).collect();
                    let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for v in p.iter_mut() {
                        *v = (*v - max).exp();
                        sum += *v;
                    }
                    let out = &mut attn_s[i * d + h * hd..i * d + (h + 1) * hd];
                    for (pj, &g) in p.iter_mut().zip(anc) {
                        *pj /= sum;
                        axpy(*pj, val(g as usize, h), out);
                    }
                    probs.push(p);
                }
            }
            x = x + attn.dot(&self.view(l.w_o)) + self.vec_view(l.b_o);
            let (h2, ln2) = layer_norm(&x, self.vec_view(l.ln2_g), self.vec_view(l.ln2_b));
            let fc = h2.dot(&self.view(l.w_fc)) + self.vec_view(l.b_fc);
            let act = fc.mapv(gelu);
            x = x + act.dot(&self.view(l.w_proj)) + self.vec_view(l.b_proj);
            layers.push(LayerActs {
                ln1,
                h1,
                qkv,
                probs,
                attn,
                ln2,
                h2,
                fc,
                act,
            });
        }

        let (hf, lnf) = layer_norm(&x, self.vec_view(self.layout.lnf_g), self.vec_view(self.layout.lnf_b));
        let sel = hf.select(Axis(0), rows);
        let mut logprobs = sel.dot(&tok_emb.t()) + self.vec_view(self.layout.out_bias);
        for mut row in logprobs.rows_mut() {
            log_softmax_row(row.as_slice_mut().expect("standard layout"));
        }
        Forward {
            layers,
            lnf,
            hf,
            logprobs,
        }
    }

    /// Gradient of `-sum(coef * log p)` over all terms, into a flat buffer.
    fn backward(&self, packed: &Packed, fwd: &Forward) -> Vec<f64> {
        let d = self.config.model_dim;
        let nh = self.config.heads;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let n = packed.tokens.len();
        let v = self.vocab.len();
        let mut grads = vec![0.0; self.layout.total];
        let lay = &self.layout;

        // dlogits = sum_terms coef * (softmax - onehot)
        let r = packed.rows.len();
        let mut coef_sum = vec![0.0; r];
        for &(row, _, c) in &packed.terms {
            coef_sum[row] += c;
        }
        let mut dlogits = Array2::<f64>::zeros((r, v));
        for i in 0..r {
            if coef_sum[i] != 0.0 {
                for j in 0..v {
                    dlogits[[i, j]] = coef_sum[i] * fwd.logprobs[[i, j]].exp();
                }
            }
        }
        for &(row, tok, c) in &packed.terms {
            dlogits[[row, tok as usize]] -= c;
        }

        let tok_emb = self.view(lay.tok_emb);
        let sel = fwd.hf.select(Axis(0), &packed.rows);
        add_into(&mut grads[lay.tok_emb.range()], &dlogits.t().dot(&sel));
        add_colsum(&mut grads[lay.out_bias.range()], &dlogits);
        let dsel = dlogits.dot(&tok_emb);
        let mut dhf = Array2::<f64>::zeros((n, d));
        for (i, &node) in packed.rows.iter().enumerate() {
            let mut row = dhf.row_mut(node);
            row += &dsel.row(i);
        }
        let (dg, db) = grads_pair(&mut grads, lay.lnf_g, lay.lnf_b);
        let mut dx = layer_norm_backward(&dhf, &fwd.lnf, self.vec_view(lay.lnf_g), dg, db);

        for (li, l) in lay.layers.iter().enumerate().rev() {
            let acts = &fwd.layers[li];
            // MLP
            add_into(&mut grads[l.w_proj.range()], &acts.act.t().dot(&dx));
            add_colsum(&mut grads[l.b_proj.range()], &dx);
            let mut dfc = dx.dot(&self.view(l.w_proj).t());
            dfc.zip_mut_with(&acts.fc, |g, &f| *g *= gelu_grad(f));
            add_into(&mut grads[l.w_fc.range()], &acts.h2.t().dot(&dfc));
            add_colsum(&mut grads[l.b_fc.range()], &dfc);
            let dh2 = dfc.dot(&self.view(l.w_fc).t());
            let (dg, db) = grads_pair(&mut grads, l.ln2_g, l.ln2_b);
            dx = dx + layer_norm_backward(&dh2, &acts.ln2, self.vec_view(l.ln2_g), dg, db);

            // attention output projection
            add_into(&mut grads[l.w_o.range()], &acts.attn.t().dot(&dx));
            add_colsum(&mut grads[l.b_o.range()], &dx);
            let dattn = dx.dot(&self.view(l.w_o).t());
            let dattn_s = dattn.as_slice().expect("standard layout");
            let qkv_s = acts.qkv.as_slice().expect("standard layout");
            let mut dqkv = vec![0.0; n * 3 * d];
            for i in 0..n {
                let anc = &packed.ancestors[i];
                for h in 0..nh {
                    let p = &acts.probs[i * nh + h];
                    let dout = &dattn_s[i * d + h * hd..i * d + (h + 1) * hd];
                    let mut dp = Vec::with_capacity(anc.len());
                    for (&pj, &g) in p.iter().zip(anc) {
                        let vo = g as usize * 3 * d + 2 * d + h * hd;
                        dp.push(dot(dout, &qkv_s[vo..vo + hd]));
                        axpy(pj, dout, &mut dqkv[vo..vo + hd]);
                    }
                    let pdp: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    let qo = i * 3 * d + h * hd;
                    for ((&pj, &dpj), &g) in p.iter().zip(&dp).zip(anc) {
                        let ds = pj * (dpj - pdp) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let ko = g as usize * 3 * d + d + h * hd;
                        for t in 0..hd {
                            dqkv[qo + t] += ds * qkv_s[ko + t];
                            dqkv[ko + t] += ds * qkv_s[qo + t];
                        }
                    }
                }
            }
            let dqkv = Array2::from_shape_vec((n, 3 * d), dqkv).expect("shape");
            add_into(&mut grads[l.w_qkv.range()], &acts.h1.t().dot(&dqkv));
            add_colsum(&mut grads[l.b_qkv.range()], &dqkv);
            let dh1 = dqkv.dot(&self.view(l.w_qkv).t());
            let (dg, db) = grads_pair(&mut grads, l.ln1_g, l.ln1_b);
            dx = dx + layer_norm_backward(&dh1, &acts.ln1, self.vec_view(l.ln1_g), dg, db);
        }

        for i in 0..n {
            let row = dx.row(i);
            let t = lay.tok_emb.off + packed.tokens[i] as usize * d;
            let p = lay.pos_emb.off + packed.positions[i] * d;
            for j in 0..d {
                grads[t + j] += row[j];
                grads[p + j] += row[j];
            }
        }
        grads
    }

    fn eval_packed(&self, obj: &Objective) -> Result<(Packed, Forward, ObjectiveEval)> {
        let packed = self.pack(obj)?;
        let fwd = self.forward(&packed.tokens, &packed.positions, &packed.ancestors, None, &packed.rows);
        let term_lp: Vec<f64> = packed
            .terms
            .iter()
            .map(|&(row, tok, _)| fwd.logprobs[[row, tok as usize]])
            .collect();
        let loss = -packed.terms.iter().zip(&term_lp).map(|(t, lp)| t.2 * lp).sum::<f64>();
        let logprobs = packed
            .seq_terms
            .iter()
            .map(|idx| idx.iter().map(|&t| term_lp[t]).collect())
            .collect();
        Ok((packed, fwd, ObjectiveEval { loss, logprobs }))
    }

    /// Loss and flat gradient of a weighted objective.
    pub fn loss_and_grad(&self, obj: &Objective) -> Result<(ObjectiveEval, Vec<f64>)> {
        let (packed, fwd, eval) = self.eval_packed(obj)?;
        let grads = self.backward(&packed, &fwd);
        Ok((eval, grads))
    }

    /// Applies an externally computed gradient with the configured optimizer.
    pub fn apply_gradient(&mut self, grads: &mut [f64], lr: f64) -> Result<()> {
        if !self.training {
            return Err(Error::FrozenModified("gradient step on a frozen model".into()));
        }
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        if self.config.positions == PositionEncoding::Sinusoidal {
            grads[self.layout.pos_emb.range()].iter_mut().for_each(|g| *g = 0.0);
        }
        self.optimizer.update(&mut self.params, grads, lr);
        self.steps += 1;
        Ok(())
    }

    fn run_chain(&self, tokens: &[TokenId], cache: &mut KvCache) -> Vec<f64> {
        let c0 = cache.len;
        let n = tokens.len();
        let positions: Vec<usize> = (c0..c0 + n).collect();
        let ancestors: Vec<Vec<u32>> = (0..n).map(|i| (0..=(c0 + i) as u32).collect()).collect();
        let fwd = self.forward(tokens, &positions, &ancestors, Some(cache), &[n - 1]);
        let d = self.config.model_dim;
        for (li, acts) in fwd.layers.iter().enumerate() {
            for i in 0..n {
                let row = acts.qkv.row(i);
                let row = row.as_slice().expect("standard layout");
                cache.k[li].extend_from_slice(&row[d..2 * d]);
                cache.v[li].extend_from_slice(&row[2 * d..3 * d]);
            }
        }
        cache.len += n;
        fwd.logprobs.row(0).iter().map(|v| v.exp()).collect()
    }
}

fn grads_pair(grads: &mut [f64], g: Span, b: Span) -> (&mut [f64], &mut [f64]) {
    debug_assert_eq!(g.off + g.len(), b.off);
    let (left, right) = grads.split_at_mut(b.off);
    (&mut left[g.range()], &mut right[..b.len()])
}

impl DecodeState {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Number of positions consumed, including BOS.
    pub fn len(&self) -> usize {
        self.cache.len
    }

    pub fn is_empty(&self) -> bool {
        self.cache.len == 0
    }
}

impl LanguageModel for CausalLM {
    type State = DecodeState;

    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn context_length(&self) -> usize {
        self.config.context_length
    }

    fn evaluate(&self, obj: &Objective) -> Result<ObjectiveEval> {
        Ok(self.eval_packed(obj)?.2)
    }

    fn step(&mut self, obj: &Objective, lr: f64) -> Result<ObjectiveEval> {
        if !self.training {
            return Err(Error::FrozenModified("gradient step on a frozen model".into()));
        }
        let (eval, mut grads) = self.loss_and_grad(obj)?;
        if !eval.loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                loss: eval.loss,
                step: self.steps,
            });
        }
        self.apply_gradient(&mut grads, lr)?;
        Ok(eval)
    }

    fn start_decode(&self, prefix: &[TokenId]) -> Result<DecodeState> {
        let needed = prefix.len() + 1;
        if needed > self.config.context_length {
            return Err(Error::ContextOverflow {
                item: 0,
                needed,
                limit: self.config.context_length,
            });
        }
        self.check_tokens(prefix)?;
        let mut cache = KvCache {
            k: vec![Vec::new(); self.config.layers],
            v: vec![Vec::new(); self.config.layers],
            len: 0,
        };
        let mut seq = Vec::with_capacity(needed);
        seq.push(BOS);
        seq.extend_from_slice(prefix);
        let probs = self.run_chain(&seq, &mut cache);
        Ok(DecodeState { cache, probs })
    }

    fn extend(&self, state: &mut DecodeState, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Ok(());
        }
        let needed = state.cache.len + tokens.len();
        if needed > self.config.context_length {
            return Err(Error::ContextOverflow {
                item: 0,
                needed,
                limit: self.config.context_length,
            });
        }
        self.check_tokens(tokens)?;
        state.probs = self.run_chain(tokens, &mut state.cache);
        Ok(())
    }

    fn next_distribution<'a>(&self, state: &'a DecodeState) -> &'a [f64] {
        &state.probs
    }

    fn decoded_len(&self, state: &DecodeState) -> usize {
        state.cache.len
    }

    fn is_frozen(&self) -> bool {
        !self.training
    }
}
