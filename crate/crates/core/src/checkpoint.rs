//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `CAPSTXT1`, then records of
//! `[name length u32][UTF-8 name][rank u32][dims u32 × rank][f32 × Π dims]`,
//! all little-endian. A model checkpoint additionally carries its
//! architecture text in `__config__` and its vocabulary (newline-joined) in
//! `__vocab__`, both stored one byte per float.

use std::fs;
use std::path::Path;

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{CapsNet, ModelConfig};
use crate::real::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CAPSTXT1";
const MAGIC_FAMILY: &[u8; 7] = b"CAPSTXT";
pub const CONFIG_TENSOR: &str = "__config__";
pub const VOCAB_TENSOR: &str = "__vocab__";

pub fn encode_tensors<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    if bytes.len() < MAGIC.len() || &bytes[..7] != MAGIC_FAMILY {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version `{}`",
            String::from_utf8_lossy(&bytes[..8])
        )));
    }
    let mut c = Cursor { bytes, pos: 8 };
    let mut out = Vec::new();
    while c.pos < bytes.len() {
        let len = c.u32("name length")?;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32("rank")?;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(c.u32("dimension")?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("`{name}` is too large")))?;
        let raw = c.take(count.saturating_mul(4), &format!("data of `{name}`"))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
        if out.iter().any(|(n, _): &(String, _)| *n == name) {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
        out.push((name, t));
    }
    Ok(out)
}

pub fn save_tensors(path: &Path, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    let bytes = encode_tensors(tensors.iter().map(|(n, t)| (n.as_str(), t)));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensors(&bytes)
}

fn text_tensor(text: &str) -> Result<Tensor<f32>> {
    let data: Vec<f32> = text.bytes().map(f32::from).collect();
    Tensor::new(&[data.len()], data)
}

fn tensor_text(t: &Tensor<f32>, what: &str) -> Result<String> {
    let bytes = t
        .data()
        .iter()
        .map(|&x| {
            if (0.0..=255.0).contains(&x) && x.fract() == 0.0 {
                Ok(x as u8)
            } else {
                Err(Error::Checkpoint(format!("`{what}` holds a non-byte value {x}")))
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    String::from_utf8(bytes).map_err(|_| Error::Checkpoint(format!("`{what}` is not UTF-8")))
}

/// A trained model with the vocabulary it was trained on.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_model<T: Real>(net: &CapsNet<T>, vocab: &Vocabulary) -> Self {
        Self {
            config: net.config().clone(),
            vocab: vocab.clone(),
            tensors: net.named_tensors().map(|(n, t)| (n.to_string(), t.cast())).collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let cfg = text_tensor(&self.config.to_kv().to_text())?;
        let vocab = text_tensor(&self.vocab.tokens().join("\n"))?;
        let all = [(CONFIG_TENSOR, &cfg), (VOCAB_TENSOR, &vocab)]
            .into_iter()
            .chain(self.tensors.iter().map(|(n, t)| (n.as_str(), t)));
        Ok(encode_tensors(all))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut config = None;
        let mut vocab = None;
        let mut tensors = Vec::new();
        for (name, t) in decode_tensors(bytes)? {
            match name.as_str() {
                CONFIG_TENSOR => config = Some(ModelConfig::from_text(&tensor_text(&t, CONFIG_TENSOR)?)?),
                VOCAB_TENSOR => {
                    let text = tensor_text(&t, VOCAB_TENSOR)?;
                    vocab = Some(Vocabulary::from_tokens(text.split('\n').map(String::from).collect())?);
                }
                _ => tensors.push((name, t)),
            }
        }
        let config = config.ok_or_else(|| Error::Checkpoint(format!("missing `{CONFIG_TENSOR}`")))?;
        let vocab = vocab.ok_or_else(|| Error::Checkpoint(format!("missing `{VOCAB_TENSOR}`")))?;
        if vocab.len() != config.vocab_size {
            return Err(Error::Checkpoint(format!(
                "vocabulary has {} entries, model expects {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        Ok(Self { config, vocab, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn model<T: Real>(&self) -> Result<CapsNet<T>> {
        CapsNet::from_named(
            self.config.clone(),
            self.tensors.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        )
    }
}
