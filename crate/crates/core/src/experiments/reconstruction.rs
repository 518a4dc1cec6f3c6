use std::fmt::Write as _;

use crate::data::{pad_sequence, Vocabulary, PAD_ID};
use crate::error::{Error, Result};
use crate::model::{capsule_dim_perturb, classify, CapsNet};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseRow {
    /// 0-based capsule dimension.
    pub dim: usize,
    pub noise: f64,
    pub class: usize,
    /// Exactly `max_len` tokens.
    pub tokens: Vec<String>,
}

/// Maps every row of an `l×e` matrix to the vocabulary word with the
/// highest cosine similarity. All-zero rows decode to `<pad>`; zero
/// vocabulary rows are never chosen; ties go to the lower index.
pub fn decode_to_words<T: Real>(decoded: &Tensor<T>, table: &Tensor<T>, vocab: &Vocabulary) -> Result<Vec<String>> {
    decoded.expect_rank(2, "decoded matrix")?;
    table.expect_rank(2, "embedding table")?;
    if decoded.dim(1) != table.dim(1) || table.dim(0) != vocab.len() {
        return Err(Error::Shape(
            "decoded width or vocabulary does not match the embedding table".into(),
        ));
    }
    let f = |x: T| x.to_f64();
    let norms: Vec<f64> = table
        .rows()
        .map(|r| r.iter().map(|&x| f(x) * f(x)).sum::<f64>().sqrt())
        .collect();
    decoded
        .rows()
        .map(|row| {
            let rn = row.iter().map(|&x| f(x) * f(x)).sum::<f64>().sqrt();
            if rn == 0.0 {
                return Ok(vocab.token(PAD_ID).unwrap_or_default().to_string());
            }
            let mut best: Option<(usize, f64)> = None;
            for (i, w) in table.rows().enumerate() {
                if norms[i] == 0.0 {
                    continue;
                }
                let cos = row.iter().zip(w).map(|(&a, &b)| f(a) * f(b)).sum::<f64>() / (rn * norms[i]);
                if best.is_none_or(|(_, s)| cos > s) {
                    best = Some((i, cos));
                }
            }
            let (i, _) = best.ok_or_else(|| Error::Contract("embedding table has no non-zero rows".into()))?;
            Ok(vocab.token(i).unwrap_or_default().to_string())
        })
        .collect()
}

/// Adds each noise value to each dimension of the predicted class capsule,
/// decodes the result and maps it back to words.
pub fn run_reconstruction_noise<T: Real>(
    net: &CapsNet<T>,
    vocab: &Vocabulary,
    tokens: &[String],
    dims: &[usize],
    noises: &[f64],
) -> Result<Vec<NoiseRow>> {
    if !net.has_decoder() {
        return Err(Error::Config(
            "model was trained without a reconstruction decoder".into(),
        ));
    }
    if vocab.len() != net.config().vocab_size {
        return Err(Error::Config("vocabulary does not match the model".into()));
    }
    let ids = pad_sequence(&vocab.encode(tokens), net.config().max_len);
    let caps = net.class_capsules(&ids)?;
    let class = classify(&caps);
    let table = net.embeddings();
    let mut rows = Vec::with_capacity(dims.len() * noises.len());
    for &dim in dims {
        for &noise in noises {
            let v = capsule_dim_perturb(&caps, class, dim, T::lit(noise))?;
            let decoded = net.reconstruct(&v, class)?;
            rows.push(NoiseRow {
                dim,
                noise,
                class,
                tokens: decode_to_words(&decoded, table, vocab)?,
            });
        }
    }
    Ok(rows)
}

/// `dim` is printed 1-based.
pub fn noise_rows_to_tsv(rows: &[NoiseRow]) -> String {
    let mut out = String::from("dim\tnoise\tclass\tsentence\n");
    for r in rows {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", r.dim + 1, r.noise, r.class, r.tokens.join(" "));
    }
    out
}
