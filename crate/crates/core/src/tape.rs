//! Reverse-mode differentiation over a recorded list of tensor operations.
//!
//! A [`Tape`] borrows a [`ParamStore`] for the duration of one forward pass.
//! Each recorded operation becomes a node; [`Tape::backward`] walks the nodes
//! in exact reverse order of recording and accumulates dLoss/dParam into a
//! [`Gradients`] buffer whose slots are parallel to the store.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model::loss::{margin_loss_backward, margin_loss_value, Margins};
use crate::ops;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    /// Regularisation group, e.g. `gate` or `capsule`.
    pub group: String,
    pub is_bias: bool,
}

/// Named trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    infos: Vec<ParamInfo>,
    values: Vec<Tensor<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            infos: Vec::new(),
            values: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, group: &str, is_bias: bool, value: Tensor<T>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Contract(format!("parameter `{name}` registered twice")));
        }
        let id = ParamId(self.values.len());
        self.infos.push(ParamInfo {
            name: name.to_string(),
            group: group.to_string(),
            is_bias,
        });
        self.values.push(value);
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn info(&self, id: ParamId) -> &ParamInfo {
        &self.infos[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamInfo, &Tensor<T>)> {
        self.infos
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (info, v))| (ParamId(i), info, v))
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        value.expect_shape(self.values[id.0].shape(), &self.infos[id.0].name)?;
        self.values[id.0] = value;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            infos: self.infos.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Gradient slots parallel to a [`ParamStore`]; slot shapes equal parameter shapes.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    slots: Vec<Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(params: &ParamStore<T>) -> Self {
        Self {
            slots: params.values.iter().map(|v| Tensor::zeros(v.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.slots[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.slots[id.0]
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn zero(&mut self) {
        self.slots.iter_mut().for_each(|s| s.fill(T::zero()));
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.slots.len() != other.slots.len() {
            return Err(Error::Contract("gradient buffers of different models".into()));
        }
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: T) {
        for s in &mut self.slots {
            s.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }

    /// Errors naming the first parameter whose gradient is NaN or infinite.
    pub fn check_finite(&self, params: &ParamStore<T>) -> Result<()> {
        for (slot, info) in self.slots.iter().zip(&params.infos) {
            slot.check_finite(&format!("gradient of `{}`", info.name))?;
        }
        Ok(())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(ParamId),
    Embed {
        table: ParamId,
        ids: Vec<usize>,
        pad: Option<usize>,
    },
    Conv1d {
        input: Var,
        kernel: Var,
        bias: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulConst(Var, Tensor<T>),
    Elu(Var),
    Softmax(Var),
    Squash(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Crop(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    PredictUpper {
        h: Var,
        w: Var,
    },
    RouteSum {
        c: Var,
        h_hat: Var,
    },
    SumLower(Var),
    Agreement {
        v: Var,
        h_hat: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    MarginLoss {
        v: Var,
        label: usize,
        margins: Margins,
    },
    Mse {
        x: Var,
        target: Tensor<T>,
    },
    SumSquares(Var),
}

struct Node<T> {
    /// `None` for parameter nodes, whose value lives in the store.
    value: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Single-owner record of one forward computation.
pub struct Tape<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without a value"),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = self.op_requires_grad(&op);
        self.nodes.push(Node {
            value: Some(value),
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn op_requires_grad(&self, op: &Op<T>) -> bool {
        match op {
            Op::Leaf => false,
            Op::Param(_) | Op::Embed { .. } => true,
            Op::Conv1d { input, kernel, bias } => self.rg(*input) || self.rg(*kernel) || self.rg(*bias),
            Op::Add(a, b) | Op::Mul(a, b) => self.rg(*a) || self.rg(*b),
            Op::Scale(x, _)
            | Op::MulConst(x, _)
            | Op::Elu(x)
            | Op::Softmax(x)
            | Op::Squash(x)
            | Op::Reshape(x)
            | Op::Crop(x)
            | Op::SumLower(x)
            | Op::SumSquares(x)
            | Op::MaxPool { input: x, .. }
            | Op::MarginLoss { v: x, .. }
            | Op::Mse { x, .. } => self.rg(*x),
            Op::Concat(parts) => parts.iter().any(|p| self.rg(*p)),
            Op::PredictUpper { h: a, w: b } | Op::RouteSum { c: a, h_hat: b } | Op::Agreement { v: a, h_hat: b } => {
                self.rg(*a) || self.rg(*b)
            }
            Op::Linear { x, w, b } => self.rg(*x) || self.rg(*w) || self.rg(*b),
        }
    }

    /// Records a constant (no gradient flows into it).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            requires_grad: true,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// Gathers rows of an embedding table; `pad` rows read as zeros and receive no gradient.
    pub fn embed(&mut self, table: ParamId, ids: &[usize], pad: Option<usize>) -> Result<Var> {
        let t = self.params.get(table);
        t.expect_rank(2, "embedding table")?;
        if ids.is_empty() {
            return Err(Error::Shape("embedding lookup of an empty sequence".into()));
        }
        let (vocab, e) = (t.dim(0), t.dim(1));
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index(format!("token id {id} >= vocabulary size {vocab}")));
            }
            if Some(id) == pad {
                data.extend(std::iter::repeat_n(T::zero(), e));
            } else {
                data.extend_from_slice(t.row(id));
            }
        }
        let value = Tensor::new(&[ids.len(), e], data)?;
        Ok(self.push(
            value,
            Op::Embed {
                table,
                ids: ids.to_vec(),
                pad,
            },
        ))
    }

    pub fn conv1d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let y = ops::conv1d_valid(self.value(input), self.value(kernel), self.value(bias))?;
        Ok(self.push(y, Op::Conv1d { input, kernel, bias }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).mul(self.value(b))?;
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let y = self.value(x).scale(k);
        self.push(y, Op::Scale(x, k))
    }

    /// Elementwise product with a fixed tensor (dropout and decoder masks).
    pub fn mul_const(&mut self, x: Var, mask: Tensor<T>) -> Result<Var> {
        let y = self.value(x).mul(&mask)?;
        Ok(self.push(y, Op::MulConst(x, mask)))
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let y = ops::elu(self.value(x));
        self.push(y, Op::Elu(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let y = ops::softmax_rows(self.value(x))?;
        Ok(self.push(y, Op::Softmax(x)))
    }

    pub fn squash(&mut self, x: Var) -> Result<Var> {
        let y = ops::squash(self.value(x))?;
        Ok(self.push(y, Op::Squash(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape(x)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = ops::concat_cols(&values)?;
        Ok(self.push(y, Op::Concat(parts.to_vec())))
    }

    pub fn crop_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let y = ops::crop_rows(self.value(x), rows)?;
        Ok(self.push(y, Op::Crop(x)))
    }

    pub fn maxpool_rows(&mut self, x: Var, k: usize) -> Result<Var> {
        let (y, argmax) = ops::maxpool_rows(self.value(x), k)?;
        Ok(self.push(y, Op::MaxPool { input: x, argmax }))
    }

    pub fn predict_upper(&mut self, h: Var, w: Var) -> Result<Var> {
        let y = ops::predict_upper(self.value(h), self.value(w))?;
        Ok(self.push(y, Op::PredictUpper { h, w }))
    }

    pub fn route_sum(&mut self, c: Var, h_hat: Var) -> Result<Var> {
        let y = ops::route_sum(self.value(c), self.value(h_hat))?;
        Ok(self.push(y, Op::RouteSum { c, h_hat }))
    }

    pub fn sum_lower(&mut self, h_hat: Var) -> Result<Var> {
        let y = ops::sum_lower(self.value(h_hat))?;
        Ok(self.push(y, Op::SumLower(h_hat)))
    }

    pub fn agreement(&mut self, v: Var, h_hat: Var) -> Result<Var> {
        let y = ops::agreement(self.value(v), self.value(h_hat))?;
        Ok(self.push(y, Op::Agreement { v, h_hat }))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = ops::linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    pub fn margin_loss(&mut self, v: Var, label: usize, margins: Margins) -> Result<Var> {
        let loss = margin_loss_value(self.value(v), label, &margins)?;
        Ok(self.push(Tensor::scalar(loss), Op::MarginLoss { v, label, margins }))
    }

    /// Mean squared error against a fixed target.
    pub fn mse(&mut self, x: Var, target: Tensor<T>) -> Result<Var> {
        let loss = ops::mse(self.value(x), &target)?;
        Ok(self.push(Tensor::scalar(loss), Op::Mse { x, target }))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum_squares());
        self.push(y, Op::SumSquares(x))
    }

    /// Accumulates dLoss/dParam into `grads` for every parameter on the tape.
    ///
    /// Parameters that do not influence the loss keep whatever `grads` held.
    pub fn backward(&self, loss: Var, grads: &mut Gradients<T>) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if grads.len() != self.params.len() {
            return Err(Error::Contract(
                "gradient buffer does not match the parameter store".into(),
            ));
        }
        let mut node_grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        node_grads[loss.0] = Some(Tensor::filled(lv.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = node_grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let mut sink = Sink {
                tape: self,
                node_grads: &mut node_grads,
                grads: &mut *grads,
            };
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::Embed { table, ids, pad } => {
                    let slot = sink.grads.get_mut(*table);
                    for (t, &id) in ids.iter().enumerate() {
                        if Some(id) == *pad {
                            continue;
                        }
                        for (d, &gv) in slot.row_mut(id).iter_mut().zip(g.row(t)) {
                            *d += gv;
                        }
                    }
                }
                Op::Conv1d { input, kernel, bias } => {
                    let kv = self.value(*kernel);
                    if let Some(dx) = sink.get(*input) {
                        ops::conv1d_backward_input(&g, kv, dx);
                    }
                    let xv = self.value(*input);
                    if let Some(dk) = sink.get(*kernel) {
                        ops::conv1d_backward_params(&g, xv, kv.dim(0), Some(dk), None);
                    }
                    if let Some(db) = sink.get(*bias) {
                        ops::conv1d_backward_params(&g, xv, kv.dim(0), None, Some(db));
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if let Some(d) = sink.get(v) {
                            add_into(d, g.data());
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if let Some(d) = sink.get(*a) {
                        fma_into(d, g.data(), self.value(*b).data());
                    }
                    if let Some(d) = sink.get(*b) {
                        fma_into(d, g.data(), self.value(*a).data());
                    }
                }
                Op::Scale(x, k) => {
                    if let Some(d) = sink.get(*x) {
                        ops::axpy(*k, g.data(), d);
                    }
                }
                Op::MulConst(x, mask) => {
                    if let Some(d) = sink.get(*x) {
                        fma_into(d, g.data(), mask.data());
                    }
                }
                Op::Elu(x) => {
                    let xv = self.value(*x);
                    if let Some(d) = sink.get(*x) {
                        for ((o, &gv), &xi) in d.iter_mut().zip(g.data()).zip(xv.data()) {
                            *o += gv * ops::elu_grad_scalar(xi);
                        }
                    }
                }
                Op::Softmax(x) => {
                    let y = node.value.as_ref().expect("softmax output");
                    if let Some(d) = sink.get(*x) {
                        ops::softmax_rows_backward(y, &g, d);
                    }
                }
                Op::Squash(x) => {
                    let s = self.value(*x);
                    if let Some(d) = sink.get(*x) {
                        ops::squash_backward(s, &g, d);
                    }
                }
                Op::Reshape(x) => {
                    if let Some(d) = sink.get(*x) {
                        add_into(d, g.data());
                    }
                }
                Op::Concat(parts) => {
                    let rows = g.dim(0);
                    let total = g.dim(1);
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.value(p).dim(1);
                        if let Some(d) = sink.get(p) {
                            for r in 0..rows {
                                add_into(
                                    &mut d[r * cols..(r + 1) * cols],
                                    &g.data()[r * total + offset..r * total + offset + cols],
                                );
                            }
                        }
                        offset += cols;
                    }
                }
                Op::Crop(x) => {
                    if let Some(d) = sink.get(*x) {
                        add_into(&mut d[..g.len()], g.data());
                    }
                }
                Op::MaxPool { input, argmax } => {
                    let cols = g.dim(1);
                    if let Some(d) = sink.get(*input) {
                        for (idx, (&src, &gv)) in argmax.iter().zip(g.data()).enumerate() {
                            d[src * cols + idx % cols] += gv;
                        }
                    }
                }
                Op::PredictUpper { h, w } => {
                    let wv = self.value(*w);
                    if let Some(d) = sink.get(*h) {
                        ops::predict_upper_backward_h(wv, &g, d);
                    }
                    let hv = self.value(*h);
                    if let Some(d) = sink.get(*w) {
                        ops::predict_upper_backward_w(hv, &g, wv.dim(1), d);
                    }
                }
                Op::RouteSum { c, h_hat } => {
                    let hv = self.value(*h_hat);
                    if let Some(d) = sink.get(*c) {
                        ops::route_sum_backward_c(hv, &g, d);
                    }
                    let cv = self.value(*c);
                    if let Some(d) = sink.get(*h_hat) {
                        ops::route_sum_backward_h_hat(cv, &g, d);
                    }
                }
                Op::SumLower(h_hat) => {
                    let kn = g.len();
                    if let Some(d) = sink.get(*h_hat) {
                        for chunk in d.chunks_exact_mut(kn) {
                            add_into(chunk, g.data());
                        }
                    }
                }
                Op::Agreement { v, h_hat } => {
                    let hv = self.value(*h_hat);
                    if let Some(d) = sink.get(*v) {
                        ops::agreement_backward_v(hv, &g, d);
                    }
                    let vv = self.value(*v);
                    if let Some(d) = sink.get(*h_hat) {
                        ops::agreement_backward_h_hat(vv, &g, d);
                    }
                }
                Op::Linear { x, w, b } => {
                    let wv = self.value(*w);
                    if let Some(d) = sink.get(*x) {
                        ops::linear_backward_x(wv, &g, d);
                    }
                    let xv = self.value(*x);
                    if let Some(d) = sink.get(*w) {
                        ops::linear_backward_w(xv, &g, d);
                    }
                    if let Some(d) = sink.get(*b) {
                        add_into(d, g.data());
                    }
                }
                Op::MarginLoss { v, label, margins } => {
                    let upstream = g.data()[0];
                    let vv = self.value(*v);
                    if let Some(d) = sink.get(*v) {
                        margin_loss_backward(vv, *label, margins, upstream, d);
                    }
                }
                Op::Mse { x, target } => {
                    let upstream = g.data()[0];
                    let xv = self.value(*x);
                    let k = T::lit(2.0) * upstream / T::from_usize(xv.len());
                    if let Some(d) = sink.get(*x) {
                        for ((o, &a), &t) in d.iter_mut().zip(xv.data()).zip(target.data()) {
                            *o += k * (a - t);
                        }
                    }
                }
                Op::SumSquares(x) => {
                    let upstream = g.data()[0];
                    let xv = self.value(*x);
                    if let Some(d) = sink.get(*x) {
                        ops::axpy(T::lit(2.0) * upstream, xv.data(), d);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Routes a node's incoming gradient either to a parameter slot or to an
/// intermediate buffer.
struct Sink<'a, 'p, T: Real> {
    tape: &'a Tape<'p, T>,
    node_grads: &'a mut [Option<Tensor<T>>],
    grads: &'a mut Gradients<T>,
}

impl<T: Real> Sink<'_, '_, T> {
    fn get(&mut self, v: Var) -> Option<&mut [T]> {
        let node = &self.tape.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        match node.op {
            Op::Param(id) => Some(self.grads.get_mut(id).data_mut()),
            _ => {
                let slot = &mut self.node_grads[v.0];
                let buf = slot.get_or_insert_with(|| Tensor::zeros(self.tape.value(v).shape()));
                Some(buf.data_mut())
            }
        }
    }
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[inline]
fn fma_into<T: Real>(dst: &mut [T], a: &[T], b: &[T]) {
    for ((d, &x), &y) in dst.iter_mut().zip(a).zip(b) {
        *d += x * y;
    }
}
