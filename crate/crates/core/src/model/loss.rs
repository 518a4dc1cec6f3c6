//! Margin loss on capsule lengths.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Margin-loss constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Margins {
    pub upper: f64,
    pub lower: f64,
    /// Down-weighting of absent-class terms.
    pub lambda: f64,
}

impl Default for Margins {
    fn default() -> Self {
        Self {
            upper: 0.9,
            lower: 0.1,
            lambda: 0.5,
        }
    }
}

fn check_label<T: Real>(v: &Tensor<T>, label: usize) -> Result<usize> {
    v.expect_rank(2, "class capsules")?;
    let k = v.dim(0);
    if label >= k {
        return Err(Error::Index(format!("label {label} with {k} classes")));
    }
    Ok(k)
}

/// `Σ_j T_j·max(0, m⁺ − |v_j|)² + λ(1 − T_j)·max(0, |v_j| − m⁻)²`
pub fn margin_loss_value<T: Real>(v: &Tensor<T>, label: usize, m: &Margins) -> Result<T> {
    check_label(v, label)?;
    let (up, lo, lambda) = (T::lit(m.upper), T::lit(m.lower), T::lit(m.lambda));
    let mut loss = T::zero();
    for (j, row) in v.rows().enumerate() {
        let len = row_norm(row);
        if j == label {
            let gap = (up - len).max(T::zero());
            loss += gap * gap;
        } else {
            let gap = (len - lo).max(T::zero());
            loss += lambda * gap * gap;
        }
    }
    Ok(loss)
}

/// Accumulates `upstream · dL/dv` into `dv`. Zero-length capsules get no gradient.
pub fn margin_loss_backward<T: Real>(v: &Tensor<T>, label: usize, m: &Margins, upstream: T, dv: &mut [T]) {
    let (up, lo, lambda) = (T::lit(m.upper), T::lit(m.lower), T::lit(m.lambda));
    let two = T::lit(2.0);
    let width = v.dim(1);
    for (j, row) in v.rows().enumerate() {
        let len = row_norm(row);
        if len == T::zero() {
            continue;
        }
        let dlen = if j == label {
            -two * (up - len).max(T::zero())
        } else {
            two * lambda * (len - lo).max(T::zero())
        };
        if dlen == T::zero() {
            continue;
        }
        let k = upstream * dlen / len;
        for (d, &x) in dv[j * width..(j + 1) * width].iter_mut().zip(row) {
            *d += k * x;
        }
    }
}

pub(crate) fn row_norm<T: Real>(row: &[T]) -> T {
    row.iter().map(|&x| x * x).sum::<T>().sqrt()
}
