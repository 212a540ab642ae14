use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionEncoding {
    /// Trainable position embeddings.
    Learned,
    /// Fixed sinusoidal table, never updated.
    #[default]
    Sinusoidal,
}

/// Architecture hyperparameters of the built-in causal language model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LMConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub context_length: usize,
    pub seed: u64,
    #[serde(default)]
    pub positions: PositionEncoding,
}

impl Default for LMConfig {
    fn default() -> Self {
        LMConfig {
            layers: 2,
            model_dim: 128,
            heads: 4,
            context_length: 256,
            seed: 0,
            positions: PositionEncoding::default(),
        }
    }
}

impl LMConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("model config: {m}")));
        if self.layers == 0 || self.layers > 64 {
            return bad("layers must be in 1..=64");
        }
        if self.heads == 0 || self.model_dim == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return bad("model_dim must be a positive multiple of heads");
        }
        if self.model_dim > 4096 {
            return bad("model_dim too large");
        }
        if self.context_length < 2 || self.context_length > 1 << 16 {
            return bad("context_length must be in 2..=65536");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Span {
    pub off: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.off..self.off + self.len()
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerLayout {
    pub ln1_g: Span,
    pub ln1_b: Span,
    pub w_qkv: Span,
    pub b_qkv: Span,
    pub w_o: Span,
    pub b_o: Span,
    pub ln2_g: Span,
    pub ln2_b: Span,
    pub w_fc: Span,
    pub b_fc: Span,
    pub w_proj: Span,
    pub b_proj: Span,
}

/// Offsets of every tensor inside the flat parameter buffer.
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub tok_emb: Span,
    pub pos_emb: Span,
    pub layers: Vec<LayerLayout>,
    pub lnf_g: Span,
    pub lnf_b: Span,
    pub out_bias: Span,
    pub total: usize,
    pub names: Vec<(String, Span)>,
}

impl Layout {
    pub fn new(cfg: &LMConfig, vocab: usize) -> Self {
        let d = cfg.model_dim;
        let mut off = 0usize;
        let mut names = Vec::new();
        let mut take = |name: String, rows: usize, cols: usize| {
            let s = Span { off, rows, cols };
            off += rows * cols;
            names.push((name, s));
            s
        };
        let tok_emb = take("tok_emb".into(), vocab, d);
        let pos_emb = take("pos_emb".into(), cfg.context_length, d);
        let layers = (0..cfg.layers)
            .map(|l| LayerLayout {
                ln1_g: take(format!("h{l}.ln1.g"), 1, d),
                ln1_b: take(format!("h{l}.ln1.b"), 1, d),
                w_qkv: take(format!("h{l}.attn.w_qkv"), d, 3 * d),
                b_qkv: take(format!("h{l}.attn.b_qkv"), 1, 3 * d),
                w_o: take(format!("h{l}.attn.w_o"), d, d),
                b_o: take(format!("h{l}.attn.b_o"), 1, d),
                ln2_g: take(format!("h{l}.ln2.g"), 1, d),
                ln2_b: take(format!("h{l}.ln2.b"), 1, d),
                w_fc: take(format!("h{l}.mlp.w_fc"), d, 4 * d),
                b_fc: take(format!("h{l}.mlp.b_fc"), 1, 4 * d),
                w_proj: take(format!("h{l}.mlp.w_proj"), 4 * d, d),
                b_proj: take(format!("h{l}.mlp.b_proj"), 1, d),
            })
            .collect();
        let lnf_g = take("ln_f.g".into(), 1, d);
        let lnf_b = take("ln_f.b".into(), 1, d);
        let out_bias = take("out_bias".into(), 1, vocab);
        Layout {
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            out_bias,
            total: off,
            names,
        }
    }

    /// Parameter count without materializing the layout.
    pub fn count(cfg: &LMConfig, vocab: usize) -> usize {
        let d = cfg.model_dim;
        let per_layer = 2 * d + d * 3 * d + 3 * d + d * d + d + 2 * d + d * 4 * d + 4 * d + 4 * d * d + d;
        vocab * d + cfg.context_length * d + cfg.layers * per_layer + 2 * d + vocab
    }
}
