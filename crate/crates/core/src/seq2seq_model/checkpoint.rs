//! Binary checkpoint layout:
//!
//! ```text
//! magic "L2CMCKPT" | u32 version | u64 header length | header JSON
//! | parameter tensors as little-endian f64 | SHA-256 of all preceding bytes
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{Hyperparams, ModelParams, Seq2SeqModel, PARAM_NAMES};
use super::vocab::Vocab;
use crate::error::{Error, Result};
use crate::tensor_core::Tensor;

pub const MAGIC: &[u8; 8] = b"L2CMCKPT";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
struct Header {
    src_vocab: Vocab,
    tgt_vocab: Vocab,
    hyper: Hyperparams,
    tensors: Vec<(String, Vec<usize>)>,
}

pub fn to_bytes(model: &Seq2SeqModel) -> Result<Vec<u8>> {
    let header = Header {
        src_vocab: model.src_vocab.clone(),
        tgt_vocab: model.tgt_vocab.clone(),
        hyper: model.hyper.clone(),
        tensors: PARAM_NAMES
            .iter()
            .zip(model.params.tensors())
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::json("checkpoint header", e))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Seq2SeqModel> {
    let prefix = MAGIC.len() + 4 + 8;
    if bytes.len() < prefix + DIGEST_LEN {
        return Err(Error::Integrity(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Integrity("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Integrity("checksum mismatch (truncated or corrupted file)".into()));
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    let hend = prefix
        .checked_add(hlen)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| Error::Integrity("header length past end of file".into()))?;
    let header: Header =
        serde_json::from_slice(&body[prefix..hend]).map_err(|e| Error::json("checkpoint header", e))?;
    header.hyper.validate()?;
    if header.tensors.len() != PARAM_NAMES.len() {
        return Err(Error::Integrity("wrong number of tensors".into()));
    }
    let mut params = ModelParams::zeros(header.src_vocab.len(), header.tgt_vocab.len(), &header.hyper);
    let mut pos = hend;
    for ((name, shape), slot) in header.tensors.iter().zip(params.tensors_mut()) {
        let n: usize = shape.iter().product();
        let end = pos + 8 * n;
        if end > body.len() {
            return Err(Error::Integrity(format!("tensor {name} past end of file")));
        }
        let data = body[pos..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *slot = Tensor::from_vec(shape, data)?;
        pos = end;
    }
    if pos != body.len() {
        return Err(Error::Integrity("trailing bytes after tensors".into()));
    }
    params.check(header.src_vocab.len(), header.tgt_vocab.len(), &header.hyper)?;
    Ok(Seq2SeqModel {
        src_vocab: header.src_vocab,
        tgt_vocab: header.tgt_vocab,
        hyper: header.hyper,
        params,
    })
}

impl Seq2SeqModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, to_bytes(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        from_bytes(&bytes)
    }
}
