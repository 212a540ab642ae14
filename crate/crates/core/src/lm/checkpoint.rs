//! Binary checkpoint container.
//!
//! Layout: `CLMCKPT\0`, u32 version, u64 header length, JSON header,
//! little-endian f64 parameters, 32-byte SHA-256 of everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layout::{LMConfig, Layout};
use super::model::CausalLM;
use super::optim::OptimizerConfig;
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CLMCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
struct Header {
    config: LMConfig,
    vocab: Vocabulary,
    optimizer: OptimizerConfig,
    tensors: Vec<TensorInfo>,
}

#[derive(Serialize, Deserialize, PartialEq)]
struct TensorInfo {
    name: String,
    shape: [usize; 2],
}

pub fn encode_checkpoint(model: &CausalLM) -> Result<Vec<u8>> {
    let header = Header {
        config: model.config().clone(),
        vocab: super::LanguageModel::vocab(model).clone(),
        optimizer: model.optimizer_config().clone(),
        tensors: model
            .tensor_shapes()
            .into_iter()
            .map(|(name, shape)| TensorInfo { name, shape })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let params = model.params();
    let mut out = Vec::with_capacity(8 + 4 + 8 + json.len() + params.len() * 8 + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<CausalLM> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 8 + 4 + 8 + DIGEST_LEN {
        return Err(bad("truncated"));
    }
    if &bytes[..8] != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch"));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes"));
    let rest = &body[20..];
    if header_len > rest.len() as u64 {
        return Err(bad("header length exceeds file"));
    }
    let (json, data) = rest.split_at(header_len as usize);
    let header: Header = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    header.config.validate()?;
    if header.vocab.is_empty() {
        return Err(bad("empty vocabulary"));
    }
    let count = Layout::count(&header.config, header.vocab.len());
    if count.checked_mul(8) != Some(data.len()) {
        return Err(Error::Checkpoint(format!(
            "expected {count} parameters, found {} bytes",
            data.len()
        )));
    }
    let params: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut model = CausalLM::from_parts(header.config, header.vocab, params)?;
    let expected: Vec<TensorInfo> = model
        .tensor_shapes()
        .into_iter()
        .map(|(name, shape)| TensorInfo { name, shape })
        .collect();
    if expected != header.tensors {
        return Err(bad("tensor table does not match config"));
    }
    model.set_optimizer(header.optimizer);
    Ok(model)
}

pub fn save_checkpoint(model: &CausalLM, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<CausalLM> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::LanguageModel;

    fn small() -> CausalLM {
        let vocab = Vocabulary::build(["a b c d"]);
        let cfg = LMConfig {
            layers: 1,
            model_dim: 8,
            heads: 2,
            context_length: 16,
            seed: 3,
            positions: Default::default(),
        };
        CausalLM::new(cfg, vocab).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = small();
        let bytes = encode_checkpoint(&m).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(m.params(), back.params());
        let p = m.vocab().encode("a b");
        assert_eq!(m.generate(&p, 5).unwrap(), back.generate(&p, 5).unwrap());
    }

    #[test]
    fn corruption_is_detected() {
        let m = small();
        let mut bytes = encode_checkpoint(&m).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Checkpoint(_))));
        assert!(decode_checkpoint(&bytes[..10]).is_err());
        assert!(decode_checkpoint(b"").is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m/ckpt.bin");
        let m = small();
        save_checkpoint(&m, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap().params(), m.params());
    }
}
