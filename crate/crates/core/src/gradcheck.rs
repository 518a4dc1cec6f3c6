//! Central-difference verification of tape gradients (64-bit only).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::layers::class_mask;
use crate::model::{CapsNet, Margins, ModelConfig, Routing};
use crate::tape::{Gradients, ParamInfo, ParamStore, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / (|analytic| + |numeric| + 1e-12)` over all coordinates.
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Analytic and central-difference derivative at the worst coordinate.
    pub worst_values: (f64, f64),
    pub coordinates: usize,
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences over every coordinate of every parameter. The numeric
/// derivative combines steps `eps` and `eps/2` by Richardson extrapolation.
pub fn grad_check<F>(params: &ParamStore<f64>, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    grad_check_where(params, eps, |_| true, f)
}

/// [`grad_check`] restricted to the parameters accepted by `include`.
pub fn grad_check_where<F, P>(params: &ParamStore<f64>, eps: f64, include: P, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
    P: Fn(&ParamInfo) -> bool,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("grad_check step {eps} outside [1e-6, 1e-3]")));
    }
    let mut analytic = Gradients::zeros_like(params);
    {
        let mut tape = Tape::new(params);
        let loss = f(&mut tape)?;
        tape.backward(loss, &mut analytic)?;
    }
    analytic.check_finite(params)?;

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        let v = tape.value(loss).item()?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("grad_check loss".into()))
        }
    };

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        coordinates: 0,
    };
    let ids: Vec<_> = params.ids().filter(|&id| include(params.info(id))).collect();
    for id in ids {
        for j in 0..params.get(id).len() {
            let orig = params.get(id).data()[j];
            let mut central = |h: f64| -> Result<f64> {
                probe.get_mut(id).data_mut()[j] = orig + h;
                let up = eval(&probe)?;
                probe.get_mut(id).data_mut()[j] = orig - h;
                let down = eval(&probe)?;
                probe.get_mut(id).data_mut()[j] = orig;
                Ok((up - down) / (2.0 * h))
            };
            let (coarse, fine) = (central(eps)?, central(eps / 2.0)?);
            let numeric = (4.0 * fine - coarse) / 3.0;
            let a = analytic.get(id).data()[j];
            if numeric.is_nan() || a.is_nan() {
                return Err(Error::NonFinite(format!("gradient of `{}`[{j}]", params.info(id).name)));
            }
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            report.coordinates += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((params.info(id).name.clone(), j));
                report.worst_values = (a, numeric);
            }
        }
    }
    Ok(report)
}

/// Step used by [`layer_suite`].
pub const SUITE_STEP: f64 = 3e-4;

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    let d = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape, |_| d.sample(rng))
}

fn weighted_sum_squares(t: &mut Tape<'_, f64>, x: Var, weights: &Tensor<f64>) -> Result<Var> {
    let y = t.mul_const(x, weights.clone())?;
    Ok(t.sum_squares(y))
}

/// Small network with weights drawn at a scale where every layer is
/// responsive, and margins `1`/`0` so that no hinge is flat.
fn scaled_network(seed: u64, routing: Routing, reconstruction: bool) -> Result<(CapsNet<f64>, Vec<usize>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = ModelConfig::small(12, 8, 3);
    cfg.embed_dim = 6;
    cfg.filters = 6;
    cfg.capsules = 3;
    cfg.capsule_dim = 3;
    cfg.class_dim = 3;
    cfg.routing = routing;
    cfg.reconstruction = reconstruction;
    cfg.decoder_hidden = [6, 5];
    cfg.recon_weight = 1.0;
    let mut net = CapsNet::<f64>::new(cfg, seed)?;
    net.set_margins(Margins {
        upper: 1.0,
        lower: 0.0,
        lambda: 0.5,
    });
    let ids: Vec<_> = net.params().ids().collect();
    for id in ids {
        let shape = net.params().get(id).shape().to_vec();
        let info = net.params().info(id).clone();
        let value = if info.name == "embedding" {
            let mut t = Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0));
            t.row_mut(0).fill(0.0);
            t
        } else {
            normal(&mut rng, &shape, if info.is_bias { 0.2 } else { 0.4 })
        };
        net.params_mut().set(id, value)?;
    }
    let tokens = (0..8).map(|i| if i < 2 { 0 } else { rng.gen_range(1..12) }).collect();
    let label = rng.gen_range(0..3);
    Ok((net, tokens, label))
}

/// Gradient checks of every layer on one random instance per call:
/// the ELU gate, convolutional capsules, margin loss, decoder and the
/// whole network under static and dynamic routing.
pub fn layer_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let mut s = ParamStore::new();
    let d = s.register("input", "x", false, normal(&mut rng, &[10, 8], 1.0))?;
    let w = s.register("w", "g", false, normal(&mut rng, &[3, 8, 4], 0.3))?;
    let v = s.register("v", "g", false, normal(&mut rng, &[3, 8, 4], 0.3))?;
    let b = s.register("b", "g", true, normal(&mut rng, &[4], 0.3))?;
    let c = s.register("c", "g", true, normal(&mut rng, &[4], 0.3))?;
    let r = normal(&mut rng, &[8, 4], 1.0);
    let rep = grad_check(&s, SUITE_STEP, |t| {
        let (d, w, v, b, c) = (t.param(d), t.param(w), t.param(v), t.param(b), t.param(c));
        let lin = t.conv1d(d, w, b)?;
        let pre = t.conv1d(d, v, c)?;
        let gate = t.elu(pre);
        let y = t.mul(lin, gate)?;
        weighted_sum_squares(t, y, &r)
    })?;
    out.push(("elu_gate", rep));

    let mut s = ParamStore::new();
    let f = s.register("features", "x", false, normal(&mut rng, &[6, 5], 1.0))?;
    let k = s.register("kernel", "c", false, normal(&mut rng, &[6, 5, 12], 0.3))?;
    let b = s.register("bias", "c", true, normal(&mut rng, &[12], 0.3))?;
    let r = normal(&mut rng, &[3, 4], 1.0);
    let rep = grad_check(&s, SUITE_STEP, |t| {
        let (f, k, b) = (t.param(f), t.param(k), t.param(b));
        let y = t.conv1d(f, k, b)?;
        let y = t.reshape(y, &[3, 4])?;
        let y = t.squash(y)?;
        weighted_sum_squares(t, y, &r)
    })?;
    out.push(("primary_capsules", rep));

    let mut s = ParamStore::new();
    let dir = normal(&mut rng, &[4, 5], 1.0);
    let mut caps = Tensor::zeros(&[4, 5]);
    for j in 0..4 {
        let len = rng.gen_range(0.2..0.8);
        let n = dir.row(j).iter().map(|x| x * x).sum::<f64>().sqrt();
        for (o, x) in caps.row_mut(j).iter_mut().zip(dir.row(j)) {
            *o = x / n * len;
        }
    }
    let vid = s.register("v", "c", false, caps)?;
    let label = rng.gen_range(0..4);
    let rep = grad_check(&s, SUITE_STEP, |t| {
        let v = t.param(vid);
        t.margin_loss(v, label, Margins::default())
    })?;
    out.push(("margin_loss", rep));

    let mut s = ParamStore::new();
    let vid = s.register("v", "c", false, normal(&mut rng, &[3, 4], 0.5))?;
    let sizes = [(12, 6), (6, 5), (5, 8)];
    let mut layers = Vec::new();
    for (i, (din, dout)) in sizes.into_iter().enumerate() {
        layers.push((
            s.register(&format!("w{i}"), "d", false, normal(&mut rng, &[din, dout], 0.5))?,
            s.register(&format!("b{i}"), "d", true, normal(&mut rng, &[dout], 0.2))?,
        ));
    }
    let target = normal(&mut rng, &[8], 1.0);
    let class = rng.gen_range(0..3);
    let rep = grad_check(&s, SUITE_STEP, |t| {
        let v = t.param(vid);
        let masked = t.mul_const(v, class_mask(3, 4, class))?;
        let mut x = t.reshape(masked, &[12])?;
        for (i, &(w, b)) in layers.iter().enumerate() {
            let (w, b) = (t.param(w), t.param(b));
            x = t.linear(x, w, b)?;
            if i < 2 {
                x = t.elu(x);
            }
        }
        t.mse(x, target.clone())
    })?;
    out.push(("decoder", rep));

    // The reconstruction target is the embedded input with its gradient
    // stopped, so the decoder-enabled case leaves the embedding out.
    let cases = [
        ("static_end_to_end", Routing::Static, false),
        ("dynamic_end_to_end", Routing::Dynamic { iterations: 3 }, false),
        ("reconstruction_end_to_end", Routing::Static, true),
    ];
    for (name, routing, recon) in cases {
        let (net, ids, label) = scaled_network(rng.gen(), routing, recon)?;
        let include = |info: &ParamInfo| !(recon && info.name == "embedding");
        let rep = grad_check_where(net.params(), SUITE_STEP, include, |t| {
            let fwd = net.forward(t, &ids, None)?;
            Ok(net.loss(t, &fwd, label)?.total)
        })?;
        out.push((name, rep));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_is_exact() {
        let mut s = ParamStore::new();
        let id = s
            .register("p", "g", false, Tensor::new(&[3], vec![0.3, -1.2, 2.0]).unwrap())
            .unwrap();
        let r = grad_check(&s, 1e-5, |t| {
            let p = t.param(id);
            Ok(t.sum_squares(p))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.coordinates, 3);
    }

    #[test]
    fn constant_mask_chain_rule() {
        let mut s = ParamStore::new();
        let id = s
            .register("p", "g", false, Tensor::new(&[1], vec![1.0]).unwrap())
            .unwrap();
        let r = grad_check(&s, 1e-5, |t| {
            let p = t.param(id);
            let m = t.mul_const(p, Tensor::new(&[1], vec![3.0]).unwrap())?;
            // value = (3p)^2 = 9p^2 → d/dp = 18p
            Ok(t.sum_squares(m))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn rejects_bad_step() {
        let s = ParamStore::<f64>::new();
        assert!(grad_check(&s, 1e-1, |t| Ok(t.constant(Tensor::scalar(0.0)))).is_err());
    }

    #[test]
    fn suite_passes_on_one_seed() {
        for (name, rep) in layer_suite(7).unwrap() {
            assert!(rep.max_rel_error < 1e-4, "{name}: {rep:?}");
        }
    }
}
