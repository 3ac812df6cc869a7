//! Numeric kernels shared by the eager API and the recorded graph.

use rand::Rng;

use super::real::Real;
use super::tensor::Tensor;

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GeLU, `x * Phi(x)` with `Phi` the standard normal CDF.
pub fn gelu_scalar<R: Real>(x: R) -> R {
    let half = R::from_f64(0.5);
    half * x * (R::ONE + (x * R::from_f64(FRAC_1_SQRT_2)).erf())
}

/// d/dx of `x * Phi(x)`: `Phi(x) + x * phi(x)`.
pub fn gelu_grad_scalar<R: Real>(x: R) -> R {
    let half = R::from_f64(0.5);
    let cdf = half * (R::ONE + (x * R::from_f64(FRAC_1_SQRT_2)).erf());
    let pdf = R::from_f64(FRAC_1_SQRT_2PI) * (-(half * x * x)).exp();
    cdf + x * pdf
}

pub fn gelu<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    x.map(gelu_scalar)
}

pub fn sigmoid<R: Real>(z: R) -> R {
    if z >= R::ZERO {
        R::ONE / (R::ONE + (-z).exp())
    } else {
        let e = z.exp();
        e / (R::ONE + e)
    }
}

/// Binary cross-entropy of `sigmoid(z)` against `y`, evaluated without
/// forming the probability.
pub fn bce_with_logit<R: Real>(z: R, y: R) -> R {
    z.max(R::ZERO) - z * y + (-z.abs()).exp().ln_1p()
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place<R: Real>(row: &mut [R]) {
    let mut max = row[0];
    for &x in row.iter() {
        max = max.max(x);
    }
    let mut total = R::ZERO;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

pub fn softmax_rows<R: Real>(m: &Tensor<R>) -> Tensor<R> {
    let mut out = m.clone();
    let c = out.cols();
    for row in out.data_mut().chunks_mut(c) {
        softmax_in_place(row);
    }
    out
}

/// Backward of row softmax given its output `p` and upstream `dp`.
pub fn softmax_backward_row<R: Real>(p: &[R], dp: &[R], ds: &mut [R]) {
    let dot: R = p.iter().zip(dp).map(|(&a, &b)| a * b).sum();
    for ((d, &pi), &gi) in ds.iter_mut().zip(p).zip(dp) {
        *d = pi * (gi - dot);
    }
}

/// Cached statistics of a layer norm forward.
pub struct LayerNormCache<R> {
    pub xhat: Vec<R>,
    pub rstd: Vec<R>,
}

pub fn layer_norm_forward<R: Real>(
    x: &Tensor<R>,
    gamma: &[R],
    beta: &[R],
    eps: R,
) -> (Tensor<R>, LayerNormCache<R>) {
    let c = x.cols();
    assert_eq!(gamma.len(), c, "layer_norm gamma does not match last dimension");
    assert_eq!(beta.len(), c, "layer_norm beta does not match last dimension");
    let n = R::from_usize(c);
    let mut out = vec![R::ZERO; x.numel()];
    let mut xhat = vec![R::ZERO; x.numel()];
    let mut rstd = Vec::with_capacity(x.rows());
    for (r, row) in x.data().chunks(c).enumerate() {
        let mean = row.iter().copied().sum::<R>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / n;
        let rs = R::ONE / (var + eps).sqrt();
        rstd.push(rs);
        for j in 0..c {
            let h = (row[j] - mean) * rs;
            xhat[r * c + j] = h;
            out[r * c + j] = gamma[j] * h + beta[j];
        }
    }
    (Tensor::new(x.shape().to_vec(), out), LayerNormCache { xhat, rstd })
}

/// Layer normalisation over the last dimension.
///
/// A constant row has zero variance; with `eps = 0` this divides by zero,
/// so callers pass a positive `eps` for such inputs.
pub fn layer_norm<R: Real>(x: &Tensor<R>, gamma: &Tensor<R>, beta: &Tensor<R>, eps: R) -> Tensor<R> {
    layer_norm_forward(x, gamma.data(), beta.data(), eps).0
}

/// Inverted-dropout keep mask: zeros with probability `p`, survivors `1/(1-p)`.
pub fn dropout_mask<R: Real>(n: usize, p: f64, rng: &mut impl Rng) -> Vec<R> {
    assert!((0.0..1.0).contains(&p), "dropout probability must be in [0, 1)");
    let keep = R::from_f64(1.0 / (1.0 - p));
    (0..n)
        .map(|_| if rng.gen::<f64>() < p { R::ZERO } else { keep })
        .collect()
}

/// Whether dropout layers are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Eager inverted dropout; identity in eval mode or with `p = 0`.
pub fn dropout<R: Real>(x: &Tensor<R>, p: f64, mode: Mode, rng: &mut impl Rng) -> Tensor<R> {
    if mode == Mode::Eval || p == 0.0 {
        return x.clone();
    }
    let mask = dropout_mask::<R>(x.numel(), p, rng);
    Tensor::new(
        x.shape().to_vec(),
        x.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect(),
    )
}
