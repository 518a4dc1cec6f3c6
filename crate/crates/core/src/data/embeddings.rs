use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::network::EMBED_INIT_RANGE;
use crate::tensor::Tensor;

use super::vocab::{Vocabulary, PAD_ID};

/// Where an embedding row came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowSource {
    Pretrained,
    Random,
    Pad,
}

/// `|V| × e` table with per-row provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub table: Tensor<f32>,
    pub sources: Vec<RowSource>,
}

impl EmbeddingMatrix {
    /// Number of rows taken from the pretrained file.
    pub fn coverage(&self) -> usize {
        self.sources.iter().filter(|&&s| s == RowSource::Pretrained).count()
    }

    pub fn dim(&self) -> usize {
        self.table.dim(1)
    }
}

fn random_row<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> impl Iterator<Item = f32> + '_ {
    let r = EMBED_INIT_RANGE as f32;
    (0..dim).map(move |_| rng.gen_range(-r..=r))
}

/// Uniform `[−0.25, 0.25]` rows for every token, zero pad row.
pub fn random_embeddings<R: Rng + ?Sized>(vocab: &Vocabulary, dim: usize, rng: &mut R) -> Result<EmbeddingMatrix> {
    if dim == 0 {
        return Err(Error::Config("embedding dimension must be positive".into()));
    }
    let mut data = Vec::with_capacity(vocab.len() * dim);
    let mut sources = Vec::with_capacity(vocab.len());
    for id in 0..vocab.len() {
        if id == PAD_ID {
            data.extend(std::iter::repeat_n(0.0, dim));
            sources.push(RowSource::Pad);
        } else {
            data.extend(random_row(dim, rng));
            sources.push(RowSource::Random);
        }
    }
    Ok(EmbeddingMatrix {
        table: Tensor::new(&[vocab.len(), dim], data)?,
        sources,
    })
}

/// Reads a `token v1 … ve` text file. Vocabulary tokens found in the file
/// take its vectors (first occurrence wins); the rest are drawn uniformly
/// from `[−0.25, 0.25]` in vocabulary order. The width is taken from `dim`
/// or, when absent, from the first line.
pub fn load_pretrained_vectors<R: Rng + ?Sized>(
    path: &Path,
    vocab: &Vocabulary,
    dim: Option<usize>,
    rng: &mut R,
) -> Result<EmbeddingMatrix> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut width = dim;
    let mut found: HashMap<usize, Vec<f32>> = HashMap::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line_no = n + 1;
        let fmt = |msg: String| Error::Format {
            path: path.to_path_buf(),
            line: line_no,
            msg,
        };
        let mut fields = line.split(' ').filter(|f| !f.is_empty());
        let Some(token) = fields.next() else { continue };
        let values: Vec<&str> = fields.collect();
        let w = *width.get_or_insert(values.len());
        if values.len() != w || w == 0 {
            return Err(fmt(format!("expected {w} values, found {}", values.len())));
        }
        let Some(id) = vocab.id(token) else { continue };
        if id == PAD_ID || found.contains_key(&id) {
            continue;
        }
        let row = values
            .iter()
            .map(|v| v.parse::<f32>().map_err(|_| fmt(format!("bad number `{v}`"))))
            .collect::<Result<Vec<_>>>()?;
        found.insert(id, row);
    }
    let dim = width.ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        line: 0,
        msg: "empty vector file and no dimension given".into(),
    })?;

    let mut data = Vec::with_capacity(vocab.len() * dim);
    let mut sources = Vec::with_capacity(vocab.len());
    for id in 0..vocab.len() {
        if id == PAD_ID {
            data.extend(std::iter::repeat_n(0.0, dim));
            sources.push(RowSource::Pad);
        } else if let Some(row) = found.get(&id) {
            data.extend_from_slice(row);
            sources.push(RowSource::Pretrained);
        } else {
            data.extend(random_row(dim, rng));
            sources.push(RowSource::Random);
        }
    }
    Ok(EmbeddingMatrix {
        table: Tensor::new(&[vocab.len(), dim], data)?,
        sources,
    })
}
