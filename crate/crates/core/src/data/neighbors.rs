use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

use super::vocab::Vocabulary;

/// The `top_k` tokens closest to `query` by cosine similarity, best first.
/// The query itself and all-zero rows are skipped; ties go to the lower index.
pub fn nearest_words<T: Real>(
    table: &Tensor<T>,
    vocab: &Vocabulary,
    query: &str,
    top_k: usize,
) -> Result<Vec<(String, f64)>> {
    table.expect_rank(2, "embedding table")?;
    if table.dim(0) != vocab.len() {
        return Err(Error::Shape(format!(
            "embedding table has {} rows, vocabulary has {}",
            table.dim(0),
            vocab.len()
        )));
    }
    if top_k == 0 {
        return Err(Error::Config("top_k must be at least 1".into()));
    }
    let q = vocab
        .id(query)
        .ok_or_else(|| Error::Lookup(format!("`{query}` is not in the vocabulary")))?;
    let norm = |row: &[T]| row.iter().map(|x| Real::to_f64(*x).powi(2)).sum::<f64>().sqrt();
    let qrow = table.row(q);
    let qn = norm(qrow);
    if qn == 0.0 {
        return Err(Error::Contract(format!(
            "`{query}` has a zero vector; cosine is undefined"
        )));
    }
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(vocab.len());
    for (i, row) in table.rows().enumerate() {
        let n = norm(row);
        if i == q || n == 0.0 {
            continue;
        }
        let dot: f64 = row
            .iter()
            .zip(qrow)
            .map(|(a, b)| Real::to_f64(*a) * Real::to_f64(*b))
            .sum();
        scored.push((i, dot / (n * qn)));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored
        .into_iter()
        .take(top_k)
        .map(|(i, s)| (vocab.token(i).unwrap_or_default().to_string(), s))
        .collect())
}
