//! Adam, per-epoch learning-rate decay, grouped L2 regularisation and dropout.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Gradients, ParamStore};
use crate::tensor::Tensor;

/// Multiplicative learning-rate decay applied once per epoch.
pub const LR_DECAY: f64 = 0.99;

/// `lr0 · 0.99^epoch`
pub fn lr_schedule(lr0: f64, epoch: usize) -> f64 {
    lr0 * LR_DECAY.powi(epoch as i32)
}

/// Per-parameter Adam moments.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub u: Vec<Tensor<T>>,
    /// Completed steps.
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, _, v)| Tensor::zeros(v.shape())).collect();
        Self {
            m: zeros(),
            u: zeros(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Non-finite gradients abort the step
/// before anything is modified.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract("optimizer state does not match the parameters".into()));
    }
    grads.check_finite(params)?;
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::lit(state.beta1), T::lit(state.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - state.beta1), T::lit(1.0 - state.beta2));
    let corr1 = T::lit(1.0 - state.beta1.powi(t));
    let corr2 = T::lit(1.0 - state.beta2.powi(t));
    let eps = T::lit(state.eps);
    let lr = T::lit(lr);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let i = id.index();
        let g = grads.get(id).data();
        let m = state.m[i].data_mut();
        let u = state.u[i].data_mut();
        let p = params.get_mut(id).data_mut();
        for j in 0..p.len() {
            m[j] = b1 * m[j] + one_b1 * g[j];
            u[j] = b2 * u[j] + one_b2 * g[j] * g[j];
            let m_hat = m[j] / corr1;
            let u_hat = u[j] / corr2;
            p[j] -= lr * m_hat / (u_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// L2 constants keyed by parameter group.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct L2Constants {
    by_group: BTreeMap<String, f64>,
}

impl L2Constants {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, group: &str, lambda: f64) -> Self {
        self.by_group.insert(group.to_string(), lambda);
        self
    }

    pub fn get(&self, group: &str) -> Option<f64> {
        self.by_group.get(group).copied()
    }

    fn lambda(&self, group: &str, name: &str) -> Result<f64> {
        self.get(group).ok_or_else(|| {
            Error::Config(format!(
                "parameter `{name}` is in group `{group}`, which has no L2 constant"
            ))
        })
    }
}

/// `Σ_g λ_g · Σ_{W ∈ g} |W|²`, biases excluded.
pub fn l2_penalty<T: Real>(params: &ParamStore<T>, constants: &L2Constants) -> Result<T> {
    let mut total = 0.0;
    for (_, info, value) in params.iter() {
        let lambda = constants.lambda(&info.group, &info.name)?;
        if !info.is_bias && lambda != 0.0 {
            total += lambda * value.sum_squares().to_f64();
        }
    }
    Ok(T::lit(total))
}

/// Adds `2λW` for every non-bias parameter to `grads`.
pub fn l2_accumulate_grad<T: Real>(
    params: &ParamStore<T>,
    constants: &L2Constants,
    grads: &mut Gradients<T>,
) -> Result<()> {
    for (id, info, value) in params.iter() {
        let lambda = constants.lambda(&info.group, &info.name)?;
        if info.is_bias || lambda == 0.0 {
            continue;
        }
        let k = T::lit(2.0 * lambda);
        for (g, &w) in grads.get_mut(id).data_mut().iter_mut().zip(value.data()) {
            *g += k * w;
        }
    }
    Ok(())
}

/// Inverted-dropout mask: each entry is 0 with probability `p`, else `1/(1−p)`.
///
/// Inference uses no mask at all (equivalently, all ones).
pub fn dropout_mask<T: Real, R: Rng + ?Sized>(shape: &[usize], p: f64, rng: &mut R) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
    }
    let keep = T::lit(1.0 / (1.0 - p));
    Ok(Tensor::from_fn(shape, |_| {
        if rng.gen::<f64>() < p {
            T::zero()
        } else {
            keep
        }
    }))
}
