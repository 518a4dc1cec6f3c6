//! Pure tensor kernels and their backward passes.
//!
//! Forward functions never mutate their inputs. Backward helpers accumulate
//! (`+=`) into caller-provided gradient buffers so the tape can write
//! straight into parameter gradient slots.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Stabiliser in the squash denominator: `s / (|s| + SQUASH_EPS)`.
pub const SQUASH_EPS: f64 = 1e-8;

// ---------------------------------------------------------------------------
// 1-D valid convolution
// ---------------------------------------------------------------------------

/// Checks conv shapes and returns `(l, e, f, n)`.
fn conv_dims<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    input.expect_rank(2, "conv1d input")?;
    kernel.expect_rank(3, "conv1d kernel")?;
    let (l, e) = (input.dim(0), input.dim(1));
    let (f, ke, n) = (kernel.dim(0), kernel.dim(1), kernel.dim(2));
    if ke != e {
        return Err(Error::Shape(format!(
            "conv1d: kernel width {ke} does not match input width {e}"
        )));
    }
    if l < f {
        return Err(Error::Shape(format!(
            "conv1d: input length {l} is shorter than kernel height {f}"
        )));
    }
    bias.expect_shape(&[n], "conv1d bias")?;
    Ok((l, e, f, n))
}

/// Stride-1 valid convolution of an `l×e` input with an `f×e×n` kernel.
///
/// `out[t, o] = bias[o] + Σ_{i<f, j<e} input[t+i, j] · kernel[i, j, o]`
pub fn conv1d_valid<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (l, e, f, n) = conv_dims(input, kernel, bias)?;
    let rows = l - f + 1;
    let x = input.data();
    let k = kernel.data();
    let mut out = Vec::with_capacity(rows * n);
    for _ in 0..rows {
        out.extend_from_slice(bias.data());
    }
    for t in 0..rows {
        let acc = &mut out[t * n..(t + 1) * n];
        // The f×e input window starting at row t is contiguous.
        let window = &x[t * e..(t + f) * e];
        for (p, &xv) in window.iter().enumerate() {
            if xv == T::zero() {
                continue;
            }
            axpy(xv, &k[p * n..(p + 1) * n], acc);
        }
    }
    Tensor::new(&[rows, n], out)
}

/// Accumulates dL/dinput for [`conv1d_valid`].
pub fn conv1d_backward_input<T: Real>(grad_out: &Tensor<T>, kernel: &Tensor<T>, grad_input: &mut [T]) {
    let (f, e, n) = (kernel.dim(0), kernel.dim(1), kernel.dim(2));
    let rows = grad_out.dim(0);
    let k = kernel.data();
    for t in 0..rows {
        let g = grad_out.row(t);
        let window = &mut grad_input[t * e..(t + f) * e];
        for (p, dx) in window.iter_mut().enumerate() {
            *dx += dot(&k[p * n..(p + 1) * n], g);
        }
    }
}

/// Accumulates dL/dkernel and dL/dbias for [`conv1d_valid`].
pub fn conv1d_backward_params<T: Real>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    kernel_height: usize,
    grad_kernel: Option<&mut [T]>,
    grad_bias: Option<&mut [T]>,
) {
    let e = input.dim(1);
    let rows = grad_out.dim(0);
    let n = grad_out.dim(1);
    let x = input.data();
    if let Some(gk) = grad_kernel {
        for t in 0..rows {
            let g = grad_out.row(t);
            let window = &x[t * e..(t + kernel_height) * e];
            for (p, &xv) in window.iter().enumerate() {
                if xv == T::zero() {
                    continue;
                }
                axpy(xv, g, &mut gk[p * n..(p + 1) * n]);
            }
        }
    }
    if let Some(gb) = grad_bias {
        for t in 0..rows {
            for (b, &g) in gb.iter_mut().zip(grad_out.row(t)) {
                *b += g;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities
// ---------------------------------------------------------------------------

/// ELU with α = 1: `x` for `x > 0`, else `e^x − 1`.
#[inline]
pub fn elu_scalar<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x.exp_m1()
    }
}

/// ELU derivative; the value at exactly 0 is taken as 1.
#[inline]
pub fn elu_grad_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one()
    } else {
        x.exp()
    }
}

pub fn elu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(elu_scalar)
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

/// Row-wise softmax over the last axis of a rank-2 tensor.
pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    logits.expect_rank(2, "softmax_rows")?;
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(logits.dim(1)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Ok(out)
}

/// Accumulates dL/dlogits given the softmax output `y` and upstream `dy`.
pub fn softmax_rows_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>, dx: &mut [T]) {
    let k = y.dim(1);
    for ((yr, gr), xr) in y
        .data()
        .chunks_exact(k)
        .zip(dy.data().chunks_exact(k))
        .zip(dx.chunks_exact_mut(k))
    {
        let inner = dot(yr, gr);
        for ((x, &yv), &g) in xr.iter_mut().zip(yr).zip(gr) {
            *x += yv * (g - inner);
        }
    }
}

// ---------------------------------------------------------------------------
// Squash
// ---------------------------------------------------------------------------

/// Squashes every capsule vector along the last axis:
/// `v = (|s|² / (1 + |s|²)) · s / (|s| + ε)`.
pub fn squash<T: Real>(s: &Tensor<T>) -> Result<Tensor<T>> {
    if s.rank() == 0 {
        return Err(Error::Shape("squash needs at least one axis".into()));
    }
    let d = s.dim(s.rank() - 1);
    let eps = T::lit(SQUASH_EPS);
    let mut out = s.clone();
    for cap in out.data_mut().chunks_exact_mut(d) {
        let q: T = cap.iter().map(|&x| x * x).sum();
        let n = q.sqrt();
        let factor = q / ((T::one() + q) * (n + eps));
        cap.iter_mut().for_each(|x| *x *= factor);
    }
    Ok(out)
}

/// Accumulates dL/ds for [`squash`].
pub fn squash_backward<T: Real>(s: &Tensor<T>, dv: &Tensor<T>, ds: &mut [T]) {
    let d = s.dim(s.rank() - 1);
    let eps = T::lit(SQUASH_EPS);
    let one = T::one();
    let two = T::lit(2.0);
    for ((sc, gc), dc) in s
        .data()
        .chunks_exact(d)
        .zip(dv.data().chunks_exact(d))
        .zip(ds.chunks_exact_mut(d))
    {
        let q: T = sc.iter().map(|&x| x * x).sum();
        let n = q.sqrt();
        let denom = (one + q) * (n + eps);
        let factor = q / denom;
        // factor'(n) / n, finite at n = 0
        let radial = two / (denom * (one + q)) - n / (denom * (n + eps));
        let proj = dot(sc, gc) * radial;
        for ((o, &si), &gi) in dc.iter_mut().zip(sc).zip(gc) {
            *o += factor * gi + proj * si;
        }
    }
}

// ---------------------------------------------------------------------------
// Pooling, concatenation, cropping
// ---------------------------------------------------------------------------

/// Max-pooling along rows with a `k×1` window and stride `k`.
///
/// Returns the pooled tensor and the source row of every output element.
/// Trailing rows that do not fill a window are dropped; ties keep the first row.
pub fn maxpool_rows<T: Real>(x: &Tensor<T>, k: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    x.expect_rank(2, "maxpool_rows")?;
    let (rows, cols) = (x.dim(0), x.dim(1));
    let out_rows = rows / k;
    if k == 0 || out_rows == 0 {
        return Err(Error::Shape(format!(
            "maxpool_rows: {rows} rows cannot be pooled with window {k}"
        )));
    }
    let mut out = Vec::with_capacity(out_rows * cols);
    let mut arg = Vec::with_capacity(out_rows * cols);
    for r in 0..out_rows {
        for c in 0..cols {
            let mut best = r * k;
            for src in r * k + 1..(r + 1) * k {
                if x.data()[src * cols + c] > x.data()[best * cols + c] {
                    best = src;
                }
            }
            out.push(x.data()[best * cols + c]);
            arg.push(best);
        }
    }
    Ok((Tensor::new(&[out_rows, cols], out)?, arg))
}

/// Concatenates rank-2 tensors with equal row counts along the column axis.
pub fn concat_cols<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let rows = parts
        .first()
        .ok_or_else(|| Error::Shape("concat_cols of nothing".into()))?
        .dim(0);
    let mut cols = 0;
    for p in parts {
        p.expect_rank(2, "concat_cols")?;
        if p.dim(0) != rows {
            return Err(Error::Shape(format!(
                "concat_cols: row counts differ ({} vs {rows})",
                p.dim(0)
            )));
        }
        cols += p.dim(1);
    }
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    Tensor::new(&[rows, cols], data)
}

/// Keeps the first `rows` rows.
pub fn crop_rows<T: Real>(x: &Tensor<T>, rows: usize) -> Result<Tensor<T>> {
    if rows == 0 || rows > x.dim(0) {
        return Err(Error::Shape(format!(
            "crop_rows: cannot keep {rows} of {} rows",
            x.dim(0)
        )));
    }
    let mut shape = x.shape().to_vec();
    shape[0] = rows;
    Tensor::new(&shape, x.data()[..rows * x.row_len()].to_vec())
}

// ---------------------------------------------------------------------------
// Capsule transforms
// ---------------------------------------------------------------------------

fn capsule_dims<T: Real>(h: &Tensor<T>, w: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    h.expect_rank(2, "lower capsules")?;
    w.expect_rank(4, "routing weights")?;
    let (a, m) = (h.dim(0), h.dim(1));
    let (wa, k, wm, n) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
    if wa != a || wm != m {
        return Err(Error::Shape(format!(
            "routing weights {:?} do not fit {a} capsules of dimension {m}",
            w.shape()
        )));
    }
    Ok((a, k, m, n))
}

/// Prediction vectors `ĥ[i, j, :] = h[i, :] · W[i, j]` for every lower/upper pair.
///
/// `h` is `a×M`, `w` is `a×k×M×N`, the result is `a×k×N`.
pub fn predict_upper<T: Real>(h: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (a, k, m, n) = capsule_dims(h, w)?;
    let wd = w.data();
    let mut out = vec![T::zero(); a * k * n];
    for i in 0..a {
        let hi = h.row(i);
        for j in 0..k {
            let acc = &mut out[(i * k + j) * n..(i * k + j + 1) * n];
            let wij = &wd[(i * k + j) * m * n..(i * k + j + 1) * m * n];
            for (mm, &hv) in hi.iter().enumerate() {
                axpy(hv, &wij[mm * n..(mm + 1) * n], acc);
            }
        }
    }
    Tensor::new(&[a, k, n], out)
}

pub fn predict_upper_backward_h<T: Real>(w: &Tensor<T>, dy: &Tensor<T>, dh: &mut [T]) {
    let (a, k, m, n) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
    let wd = w.data();
    let g = dy.data();
    for i in 0..a {
        for j in 0..k {
            let gij = &g[(i * k + j) * n..(i * k + j + 1) * n];
            let wij = &wd[(i * k + j) * m * n..(i * k + j + 1) * m * n];
            for mm in 0..m {
                dh[i * m + mm] += dot(&wij[mm * n..(mm + 1) * n], gij);
            }
        }
    }
}

pub fn predict_upper_backward_w<T: Real>(h: &Tensor<T>, dy: &Tensor<T>, k: usize, dw: &mut [T]) {
    let (a, m) = (h.dim(0), h.dim(1));
    let n = dy.dim(2);
    let g = dy.data();
    for i in 0..a {
        let hi = h.row(i);
        for j in 0..k {
            let gij = &g[(i * k + j) * n..(i * k + j + 1) * n];
            let base = (i * k + j) * m * n;
            for (mm, &hv) in hi.iter().enumerate() {
                axpy(hv, gij, &mut dw[base + mm * n..base + (mm + 1) * n]);
            }
        }
    }
}

/// `s[j, :] = Σ_i c[i, j] · ĥ[i, j, :]`; `c` is `a×k`, `ĥ` is `a×k×N`.
pub fn route_sum<T: Real>(c: &Tensor<T>, h_hat: &Tensor<T>) -> Result<Tensor<T>> {
    h_hat.expect_rank(3, "prediction vectors")?;
    let (a, k, n) = (h_hat.dim(0), h_hat.dim(1), h_hat.dim(2));
    c.expect_shape(&[a, k], "coupling coefficients")?;
    let mut out = vec![T::zero(); k * n];
    for i in 0..a {
        for j in 0..k {
            let cij = c.data()[i * k + j];
            let src = &h_hat.data()[(i * k + j) * n..(i * k + j + 1) * n];
            axpy(cij, src, &mut out[j * n..(j + 1) * n]);
        }
    }
    Tensor::new(&[k, n], out)
}

pub fn route_sum_backward_c<T: Real>(h_hat: &Tensor<T>, ds: &Tensor<T>, dc: &mut [T]) {
    let (a, k, n) = (h_hat.dim(0), h_hat.dim(1), h_hat.dim(2));
    for i in 0..a {
        for j in 0..k {
            let src = &h_hat.data()[(i * k + j) * n..(i * k + j + 1) * n];
            dc[i * k + j] += dot(src, ds.row(j));
        }
    }
}

pub fn route_sum_backward_h_hat<T: Real>(c: &Tensor<T>, ds: &Tensor<T>, dh: &mut [T]) {
    let (a, k) = (c.dim(0), c.dim(1));
    let n = ds.dim(1);
    for i in 0..a {
        for j in 0..k {
            let cij = c.data()[i * k + j];
            axpy(cij, ds.row(j), &mut dh[(i * k + j) * n..(i * k + j + 1) * n]);
        }
    }
}

/// Unweighted sum over lower capsules: `s[j, :] = Σ_i ĥ[i, j, :]`.
pub fn sum_lower<T: Real>(h_hat: &Tensor<T>) -> Result<Tensor<T>> {
    h_hat.expect_rank(3, "prediction vectors")?;
    let (a, k, n) = (h_hat.dim(0), h_hat.dim(1), h_hat.dim(2));
    let mut out = vec![T::zero(); k * n];
    for i in 0..a {
        for (o, &v) in out.iter_mut().zip(&h_hat.data()[i * k * n..(i + 1) * k * n]) {
            *o += v;
        }
    }
    Tensor::new(&[k, n], out)
}

/// Agreement logits `b[i, j] = v[j, :] · ĥ[i, j, :]`.
pub fn agreement<T: Real>(v: &Tensor<T>, h_hat: &Tensor<T>) -> Result<Tensor<T>> {
    h_hat.expect_rank(3, "prediction vectors")?;
    let (a, k, n) = (h_hat.dim(0), h_hat.dim(1), h_hat.dim(2));
    v.expect_shape(&[k, n], "upper capsules")?;
    let mut out = Vec::with_capacity(a * k);
    for i in 0..a {
        for j in 0..k {
            out.push(dot(v.row(j), &h_hat.data()[(i * k + j) * n..(i * k + j + 1) * n]));
        }
    }
    Tensor::new(&[a, k], out)
}

pub fn agreement_backward_v<T: Real>(h_hat: &Tensor<T>, db: &Tensor<T>, dv: &mut [T]) {
    let (a, k, n) = (h_hat.dim(0), h_hat.dim(1), h_hat.dim(2));
    for i in 0..a {
        for j in 0..k {
            let src = &h_hat.data()[(i * k + j) * n..(i * k + j + 1) * n];
            axpy(db.data()[i * k + j], src, &mut dv[j * n..(j + 1) * n]);
        }
    }
}

pub fn agreement_backward_h_hat<T: Real>(v: &Tensor<T>, db: &Tensor<T>, dh: &mut [T]) {
    let (k, n) = (v.dim(0), v.dim(1));
    let a = db.dim(0);
    for i in 0..a {
        for j in 0..k {
            axpy(
                db.data()[i * k + j],
                v.row(j),
                &mut dh[(i * k + j) * n..(i * k + j + 1) * n],
            );
        }
    }
}

// ---------------------------------------------------------------------------
// Dense layers and losses
// ---------------------------------------------------------------------------

/// Affine map of the flattened input: `y = x · W + b` with `W` of shape `din×dout`.
pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    w.expect_rank(2, "linear weight")?;
    let (din, dout) = (w.dim(0), w.dim(1));
    if x.len() != din {
        return Err(Error::Shape(format!(
            "linear: input has {} elements, weight expects {din}",
            x.len()
        )));
    }
    b.expect_shape(&[dout], "linear bias")?;
    let mut out = b.data().to_vec();
    for (r, &xv) in x.data().iter().enumerate() {
        if xv != T::zero() {
            axpy(xv, w.row(r), &mut out);
        }
    }
    Tensor::new(&[dout], out)
}

pub fn linear_backward_x<T: Real>(w: &Tensor<T>, dy: &Tensor<T>, dx: &mut [T]) {
    for (r, d) in dx.iter_mut().enumerate() {
        *d += dot(w.row(r), dy.data());
    }
}

pub fn linear_backward_w<T: Real>(x: &Tensor<T>, dy: &Tensor<T>, dw: &mut [T]) {
    let dout = dy.len();
    for (r, &xv) in x.data().iter().enumerate() {
        if xv != T::zero() {
            axpy(xv, dy.data(), &mut dw[r * dout..(r + 1) * dout]);
        }
    }
}

/// Mean squared error between two tensors of equal shape.
pub fn mse<T: Real>(x: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    x.expect_shape(target.shape(), "mse")?;
    let total: T = x
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok(total / T::from_usize(x.len()))
}

// ---------------------------------------------------------------------------
// Small BLAS-1 helpers
// ---------------------------------------------------------------------------

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct transcription of the convolution sum, used as the oracle.
    fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>) -> Vec<Vec<f64>> {
        let (l, e) = (x.dim(0), x.dim(1));
        let (f, n) = (k.dim(0), k.dim(2));
        let mut out = vec![vec![0.0; n]; l - f + 1];
        for (t, row) in out.iter_mut().enumerate() {
            for (o, cell) in row.iter_mut().enumerate() {
                let mut acc = b.data()[o];
                for i in 0..f {
                    for j in 0..e {
                        acc += x.data()[(t + i) * e + j] * k.data()[(i * e + j) * n + o];
                    }
                }
                *cell = acc;
            }
        }
        out
    }

    #[test]
    fn conv_hand_sum() {
        let x = Tensor::new(&[4, 1], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::ones(&[2, 1, 1]);
        let b = Tensor::zeros(&[1]);
        let y = conv1d_valid(&x, &k, &b).unwrap();
        assert_eq!(y.shape(), &[3, 1]);
        assert_eq!(y.data(), &[3.0, 5.0, 7.0]);
    }

    #[test]
    fn conv_zero_kernel_gives_zero_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[6, 3], &mut rng);
        let y = conv1d_valid(&x, &Tensor::zeros(&[2, 3, 4]), &Tensor::zeros(&[4])).unwrap();
        assert_eq!(y.shape(), &[5, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[7, 5], &mut rng);
        let k = random(&[3, 5, 2], &mut rng);
        let b = random(&[2], &mut rng);
        let y = conv1d_valid(&x, &k, &b).unwrap();
        let want = conv_oracle(&x, &k, &b);
        for (t, row) in want.iter().enumerate() {
            for (o, &v) in row.iter().enumerate() {
                assert!((y.row(t)[o] - v).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn conv_rejects_short_input() {
        let x = Tensor::<f32>::zeros(&[2, 3]);
        let err = conv1d_valid(&x, &Tensor::zeros(&[3, 3, 1]), &Tensor::zeros(&[1])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('2') && msg.contains('3'), "{msg}");
        assert!(conv1d_valid(&x, &Tensor::zeros(&[1, 4, 1]), &Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn softmax_examples() {
        let t = Tensor::from_rows(&[vec![0.0f64, 0.0, 0.0]]).unwrap();
        let y = softmax_rows(&t).unwrap();
        assert!(y.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));

        let t = Tensor::from_rows(&[vec![2f64.ln(), 0.0]]).unwrap();
        let y = softmax_rows(&t).unwrap();
        assert!((y.data()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((y.data()[1] - 1.0 / 3.0).abs() < 1e-12);

        let t = Tensor::from_rows(&[vec![1000.0f32, 0.0]]).unwrap();
        let y = softmax_rows(&t).unwrap();
        assert!(y.is_finite());
        assert!((y.data()[0] - 1.0).abs() < 1e-6 && y.data()[1] < 1e-6);
    }

    #[test]
    fn elu_examples() {
        assert_eq!(elu_scalar(0.0f64), 0.0);
        assert_eq!(elu_scalar(1.0f64), 1.0);
        assert!((elu_scalar(-1.0f64) - (-1f64).exp_m1()).abs() < 1e-15);
        assert!((elu_scalar(-1.0f64) + 0.6321).abs() < 1e-4);
        assert_eq!(elu_grad_scalar(0.0f64), 1.0);
    }

    #[test]
    fn squash_examples() {
        let s = Tensor::new(&[1, 2], vec![0.6f64, 0.8]).unwrap();
        let v = squash(&s).unwrap();
        assert!((v.norm() - 0.5).abs() < 1e-7);
        assert!((v.data()[0] / v.data()[1] - 0.75).abs() < 1e-12);

        let s = Tensor::new(&[3], vec![3.0f64, 0.0, 0.0]).unwrap();
        assert!((squash(&s).unwrap().norm() - 0.9).abs() < 1e-7);

        let z = squash(&Tensor::<f64>::zeros(&[2, 4])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn maxpool_hand_case() {
        let x = Tensor::new(&[4, 1], vec![1.0f32, 3.0, 2.0, 0.0]).unwrap();
        let (y, arg) = maxpool_rows(&x, 2).unwrap();
        assert_eq!(y.data(), &[3.0, 2.0]);
        assert_eq!(arg, vec![1, 2]);
        let x = Tensor::new(&[1, 1], vec![1.0f32]).unwrap();
        assert!(maxpool_rows(&x, 2).is_err());
    }

    #[test]
    fn predict_upper_identity_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = random(&[3, 4], &mut rng);
        let mut w = Tensor::<f64>::zeros(&[3, 2, 4, 4]);
        for i in 0..3 {
            for j in 0..2 {
                for d in 0..4 {
                    w.data_mut()[((i * 2 + j) * 4 + d) * 4 + d] = 1.0;
                }
            }
        }
        let y = predict_upper(&h, &w).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert_eq!(&y.data()[(i * 2 + j) * 4..(i * 2 + j + 1) * 4], h.row(i));
            }
        }

        let w = random(&[3, 2, 4, 5], &mut rng);
        let y = predict_upper(&h, &w).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                for nn in 0..5 {
                    let mut acc = 0.0;
                    for m in 0..4 {
                        acc += w.data()[((i * 2 + j) * 4 + m) * 5 + nn] * h.data()[i * 4 + m];
                    }
                    assert!((y.data()[(i * 2 + j) * 5 + nn] - acc).abs() < 1e-12);
                }
            }
        }

        let zero = predict_upper(&Tensor::zeros(&[3, 4]), &w).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[2, 3], &mut rng);
        let w = random(&[6, 4], &mut rng);
        let b = random(&[4], &mut rng);
        let y = linear(&x, &w, &b).unwrap();
        for o in 0..4 {
            let want: f64 = b.data()[o] + (0..6).map(|r| x.data()[r] * w.data()[r * 4 + o]).sum::<f64>();
            assert!((y.data()[o] - want).abs() < 1e-12);
        }
        assert!(linear(&Tensor::zeros(&[5]), &w, &b).is_err());
    }
}
