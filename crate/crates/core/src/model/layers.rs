//! Tape-free forward passes of the individual layers.
//!
//! [`CapsNet`](super::CapsNet) records the same computations on a tape for
//! training; these functions are the plain-tensor reference for each layer.

use crate::error::{Error, Result};
use crate::ops;
use crate::real::Real;
use crate::tensor::Tensor;

use super::routing::ClassCapsules;

/// Weights of the ELU-gate convolution: `W`, `V` are `f×e×n`; `b`, `c` are `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateConvParams<T> {
    pub w: Tensor<T>,
    pub v: Tensor<T>,
    pub b: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Real> GateConvParams<T> {
    pub fn filters(&self) -> usize {
        self.w.dim(2)
    }

    fn validate(&self) -> Result<()> {
        self.w.expect_rank(3, "gate W")?;
        self.v.expect_shape(self.w.shape(), "gate V")?;
        let n = self.filters();
        self.b.expect_shape(&[n], "gate b")?;
        self.c.expect_shape(&[n], "gate c")
    }
}

/// `(D∗W + b) ⊗ elu(D∗V + c)`.
pub fn elu_gate_forward<T: Real>(d: &Tensor<T>, p: &GateConvParams<T>) -> Result<Tensor<T>> {
    p.validate()?;
    let linear = ops::conv1d_valid(d, &p.w, &p.b)?;
    let gate = ops::elu(&ops::conv1d_valid(d, &p.v, &p.c)?);
    linear.mul(&gate)
}

/// Front-end weights for each ablation variant.
#[derive(Clone, Debug, PartialEq)]
pub enum FrontendWeights<T> {
    EluGate(GateConvParams<T>),
    ConvPlain {
        w: Tensor<T>,
        b: Tensor<T>,
    },
    MultiFilter {
        /// One `(kernel, bias)` pair per filter height.
        banks: Vec<(Tensor<T>, Tensor<T>)>,
        /// Max-pooling window, if pooled.
        pool: Option<usize>,
    },
}

pub fn frontend_forward<T: Real>(d: &Tensor<T>, weights: &FrontendWeights<T>) -> Result<Tensor<T>> {
    match weights {
        FrontendWeights::EluGate(p) => elu_gate_forward(d, p),
        FrontendWeights::ConvPlain { w, b } => Ok(ops::elu(&ops::conv1d_valid(d, w, b)?)),
        FrontendWeights::MultiFilter { banks, pool } => {
            let fmax = banks
                .iter()
                .map(|(k, _)| k.dim(0))
                .max()
                .ok_or_else(|| Error::Config("multi-filter front-end without filters".into()))?;
            if d.dim(0) < fmax {
                return Err(Error::Shape(format!(
                    "input length {} is shorter than filter height {fmax}",
                    d.dim(0)
                )));
            }
            let rows = d.dim(0) - fmax + 1;
            let maps = banks
                .iter()
                .map(|(k, b)| ops::crop_rows(&ops::elu(&ops::conv1d_valid(d, k, b)?), rows))
                .collect::<Result<Vec<_>>>()?;
            let joined = ops::concat_cols(&maps.iter().collect::<Vec<_>>())?;
            match pool {
                Some(k) => Ok(ops::maxpool_rows(&joined, *k)?.0),
                None => Ok(joined),
            }
        }
    }
}

/// Convolutional capsule layer.
///
/// `kernel` is `rows×channels×(a·M)`: its height spans the whole feature map,
/// so the convolution collapses to a single position. (The unit-width axis of
/// a `rows×1` kernel is implicit.)
#[derive(Clone, Debug, PartialEq)]
pub struct PrimaryCapsuleParams<T> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub capsules: usize,
    pub dim: usize,
}

/// Full-height convolution, reshaped to `a×M` and squashed per capsule.
pub fn primary_capsules_forward<T: Real>(features: &Tensor<T>, p: &PrimaryCapsuleParams<T>) -> Result<Tensor<T>> {
    features.expect_rank(2, "feature map")?;
    if p.kernel.rank() != 3 || p.kernel.dim(0) != features.dim(0) {
        return Err(Error::Shape(format!(
            "capsule kernel {:?} does not span a feature map of height {}",
            p.kernel.shape(),
            features.dim(0)
        )));
    }
    if p.kernel.dim(2) != p.capsules * p.dim {
        return Err(Error::Shape(format!(
            "capsule kernel has {} outputs, expected {}×{}",
            p.kernel.dim(2),
            p.capsules,
            p.dim
        )));
    }
    let flat = ops::conv1d_valid(features, &p.kernel, &p.bias)?;
    ops::squash(&flat.reshape(&[p.capsules, p.dim])?)
}

/// Three affine layers `k·N → h1 → h2 → l·e` with ELU after the first two.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams<T> {
    pub layers: [(Tensor<T>, Tensor<T>); 3],
}

/// Ones on row `class` of a `k×n` matrix, zeros elsewhere.
pub fn class_mask<T: Real>(k: usize, n: usize, class: usize) -> Tensor<T> {
    Tensor::from_fn(&[k, n], |i| if i / n == class { T::one() } else { T::zero() })
}

/// Decodes the capsule of `class` (all other capsules masked) to an `l×e` matrix.
pub fn reconstruct_forward<T: Real>(
    v: &ClassCapsules<T>,
    class: usize,
    d: &DecoderParams<T>,
    out_shape: (usize, usize),
) -> Result<Tensor<T>> {
    let (k, n) = (v.num_classes(), v.dim());
    if class >= k {
        return Err(Error::Index(format!("class {class} with {k} capsules")));
    }
    let (l, e) = out_shape;
    let out_dim = d.layers[2].0.dim(1);
    if out_dim != l * e {
        return Err(Error::Shape(format!(
            "decoder emits {out_dim} values, {l}×{e} needs {}",
            l * e
        )));
    }
    let masked = v.v.mul(&class_mask(k, n, class))?;
    let mut x = masked.reshape(&[k * n])?;
    for (idx, (w, b)) in d.layers.iter().enumerate() {
        x = ops::linear(&x, w, b)?;
        if idx < 2 {
            x = ops::elu(&x);
        }
    }
    x.reshape(&[l, e])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_gate_path_switches_everything_off() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = random(&[6, 4], &mut rng);
        let p = GateConvParams {
            w: random(&[3, 4, 5], &mut rng),
            v: Tensor::zeros(&[3, 4, 5]),
            b: random(&[5], &mut rng),
            c: Tensor::zeros(&[5]),
        };
        let y = elu_gate_forward(&d, &p).unwrap();
        assert_eq!(y.shape(), &[4, 5]);
        assert!(y.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gate_multiplies_paths() {
        // W path yields 2, V path yields 1 -> 2 * elu(1) = 2
        let d = Tensor::new(&[1, 1], vec![1.0f64]).unwrap();
        let p = GateConvParams {
            w: Tensor::new(&[1, 1, 1], vec![2.0]).unwrap(),
            v: Tensor::new(&[1, 1, 1], vec![1.0]).unwrap(),
            b: Tensor::zeros(&[1]),
            c: Tensor::zeros(&[1]),
        };
        assert_eq!(elu_gate_forward(&d, &p).unwrap().data(), &[2.0]);
    }

    #[test]
    fn gate_matches_composition_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = random(&[9, 3], &mut rng);
        let p = GateConvParams {
            w: random(&[2, 3, 4], &mut rng),
            v: random(&[2, 3, 4], &mut rng),
            b: random(&[4], &mut rng),
            c: random(&[4], &mut rng),
        };
        let y = elu_gate_forward(&d, &p).unwrap();
        let a = ops::conv1d_valid(&d, &p.w, &p.b).unwrap();
        let g = ops::conv1d_valid(&d, &p.v, &p.c).unwrap();
        for i in 0..y.len() {
            let gv = g.data()[i];
            let want = a.data()[i] * if gv > 0.0 { gv } else { gv.exp() - 1.0 };
            assert!((y.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_shape_mismatch() {
        let p = GateConvParams {
            w: Tensor::<f64>::zeros(&[2, 3, 4]),
            v: Tensor::zeros(&[2, 3, 5]),
            b: Tensor::zeros(&[4]),
            c: Tensor::zeros(&[4]),
        };
        assert!(elu_gate_forward(&Tensor::zeros(&[5, 3]), &p).is_err());
    }

    #[test]
    fn multi_filter_has_one_channel_per_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e = 6;
        let d = random(&[12, e], &mut rng);
        let banks: Vec<_> = [3, 4, 5]
            .iter()
            .map(|&f| (random(&[f, e, 100], &mut rng), random(&[100], &mut rng)))
            .collect();
        let plain = frontend_forward(
            &d,
            &FrontendWeights::MultiFilter {
                banks: banks.clone(),
                pool: None,
            },
        )
        .unwrap();
        assert_eq!(plain.shape(), &[8, 300]);
        let pooled = frontend_forward(&d, &FrontendWeights::MultiFilter { banks, pool: Some(2) }).unwrap();
        assert_eq!(pooled.shape(), &[4, 300]);
        for r in 0..4 {
            for c in 0..300 {
                let want = plain.row(2 * r)[c].max(plain.row(2 * r + 1)[c]);
                assert_eq!(pooled.row(r)[c], want);
            }
        }
    }

    #[test]
    fn primary_capsules_are_short_and_zero_for_zero_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = PrimaryCapsuleParams {
            kernel: random(&[5, 7, 6 * 10], &mut rng).scale(3.0),
            bias: Tensor::zeros(&[60]),
            capsules: 6,
            dim: 10,
        };
        let h = primary_capsules_forward(&random(&[5, 7], &mut rng), &p).unwrap();
        assert_eq!(h.shape(), &[6, 10]);
        assert!(h.rows().all(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt() < 1.0));
        let z = primary_capsules_forward(&Tensor::zeros(&[5, 7]), &p).unwrap();
        assert!(z.data().iter().all(|&x| x == 0.0));
        assert!(primary_capsules_forward(&Tensor::zeros(&[4, 7]), &p).is_err());
    }

    #[test]
    fn zero_input_decodes_to_bias_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = DecoderParams {
            layers: [
                (random(&[6, 5], &mut rng), random(&[5], &mut rng)),
                (random(&[5, 4], &mut rng), random(&[4], &mut rng)),
                (random(&[4, 6], &mut rng), random(&[6], &mut rng)),
            ],
        };
        let v = ClassCapsules::new(Tensor::zeros(&[2, 3])).unwrap();
        let y = reconstruct_forward(&v, 1, &d, (3, 2)).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        let h1 = ops::elu(&d.layers[0].1);
        let h2 = ops::elu(&ops::linear(&h1, &d.layers[1].0, &d.layers[1].1).unwrap());
        let want = ops::linear(&h2, &d.layers[2].0, &d.layers[2].1).unwrap();
        assert!(y.clone().reshape(&[6]).unwrap().max_abs_diff(&want).unwrap() < 1e-12);
        assert!(reconstruct_forward(&v, 1, &d, (2, 2)).is_err());
        assert!(reconstruct_forward(&v, 2, &d, (3, 2)).is_err());
    }
}
