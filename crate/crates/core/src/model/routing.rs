//! Routing from convolutional capsules to class capsules.
//!
//! Both schemes consume prediction vectors `ĥ[i, j] = h_i · W_ij`. Dynamic
//! routing weights them by coupling coefficients refined through agreement;
//! static routing sums them directly. Both finish with a squash.

use crate::error::{Error, Result};
use crate::ops;
use crate::real::Real;
use crate::tensor::Tensor;

use super::loss::row_norm;

/// Routing logits and coupling coefficients, both `a×k`.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingState<T> {
    pub logits: Tensor<T>,
    pub coupling: Tensor<T>,
    /// Completed iterations.
    pub iteration: usize,
}

/// Final `k×N` text capsules.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassCapsules<T> {
    pub v: Tensor<T>,
}

impl<T: Real> ClassCapsules<T> {
    pub fn new(v: Tensor<T>) -> Result<Self> {
        v.expect_rank(2, "class capsules")?;
        Ok(Self { v })
    }

    pub fn num_classes(&self) -> usize {
        self.v.dim(0)
    }

    pub fn dim(&self) -> usize {
        self.v.dim(1)
    }

    pub fn lengths(&self) -> Vec<T> {
        self.v.rows().map(row_norm).collect()
    }
}

/// Routing scheme between the capsule layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Routing {
    Static,
    Dynamic { iterations: usize },
}

impl Routing {
    pub fn name(&self) -> &'static str {
        match self {
            Routing::Static => "static",
            Routing::Dynamic { .. } => "dynamic",
        }
    }
}

/// Dynamic routing with logits initialised to zero.
pub fn dynamic_route<T: Real>(h_hat: &Tensor<T>, iterations: usize) -> Result<(ClassCapsules<T>, RoutingState<T>)> {
    dynamic_route_observed(h_hat, iterations, |_| {})
}

/// As [`dynamic_route`], calling `observe` with the state after each iteration.
///
/// Every iteration computes `c = softmax(b)`, `s_j = Σ_i c_ij ĥ_{j|i}`,
/// `v_j = squash(s_j)` and then `b_ij += v_j · ĥ_{j|i}`.
pub fn dynamic_route_observed<T: Real>(
    h_hat: &Tensor<T>,
    iterations: usize,
    mut observe: impl FnMut(&RoutingState<T>),
) -> Result<(ClassCapsules<T>, RoutingState<T>)> {
    if iterations == 0 {
        return Err(Error::Config("dynamic routing needs at least one iteration".into()));
    }
    h_hat.expect_rank(3, "prediction vectors")?;
    let (a, k) = (h_hat.dim(0), h_hat.dim(1));
    let mut state = RoutingState {
        logits: Tensor::zeros(&[a, k]),
        coupling: Tensor::zeros(&[a, k]),
        iteration: 0,
    };
    let mut v = Tensor::zeros(&[k, h_hat.dim(2)]);
    for _ in 0..iterations {
        state.coupling = ops::softmax_rows(&state.logits)?;
        let s = ops::route_sum(&state.coupling, h_hat)?;
        v = ops::squash(&s)?;
        let agree = ops::agreement(&v, h_hat)?;
        state.logits.add_assign(&agree)?;
        state.iteration += 1;
        observe(&state);
    }
    Ok((ClassCapsules { v }, state))
}

/// Static routing: `v_j = squash(Σ_i W_ij h_i)` with no coupling coefficients.
pub fn static_route<T: Real>(h: &Tensor<T>, w_route: &Tensor<T>) -> Result<ClassCapsules<T>> {
    let h_hat = ops::predict_upper(h, w_route)?;
    let s = ops::sum_lower(&h_hat)?;
    Ok(ClassCapsules { v: ops::squash(&s)? })
}

/// Index of the longest capsule; ties go to the lowest index.
pub fn classify<T: Real>(v: &ClassCapsules<T>) -> usize {
    argmax_first(&v.lengths())
}

pub(crate) fn argmax_first<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Copy of `v` with `noise` added to entry `dim` of capsule `class`.
pub fn capsule_dim_perturb<T: Real>(
    v: &ClassCapsules<T>,
    class: usize,
    dim: usize,
    noise: T,
) -> Result<ClassCapsules<T>> {
    if class >= v.num_classes() || dim >= v.dim() {
        return Err(Error::Index(format!(
            "capsule ({class}, {dim}) outside {}×{}",
            v.num_classes(),
            v.dim()
        )));
    }
    let mut out = v.clone();
    out.v.row_mut(class)[dim] += noise;
    Ok(out)
}
