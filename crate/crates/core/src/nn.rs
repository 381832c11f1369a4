//! Shared numeric kernels for the encoder and baseline models.
//!
//! Everything runs in f64; gradients here are the exact derivatives of the
//! forward formulas, which the tests verify against finite differences.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Additive attention bias at padded key positions.
pub(crate) const MASK_BIAS: f64 = -1e9;

pub(crate) const LN_EPS: f64 = 1e-12;

/// Fills a slice with truncated normal samples: values are redrawn until
/// they land within two standard deviations.
pub(crate) fn trunc_normal_fill(data: &mut [f64], std: f64, rng: &mut ChaCha8Rng) {
    for x in data {
        loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                *x = z * std;
                break;
            }
        }
    }
}

/// `x W + b` with `b` broadcast over rows.
pub(crate) fn linear(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut y = x.dot(w);
    y += b;
    y
}

/// Backward of [`linear`]: returns `dx` and accumulates `dw`, `db`.
pub(crate) fn linear_backward(
    x: &Array2<f64>,
    w: &Array2<f64>,
    dy: &Array2<f64>,
    dw: &mut Array2<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    *dw += &x.t().dot(dy);
    *db += &dy.sum_axis(Axis(0));
    dy.dot(&w.t())
}

pub(crate) fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Tanh-form gelu: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub(crate) fn gelu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(gelu_scalar)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Elementwise activation gradient given the pre-activation input.
pub(crate) fn activation_backward(
    pre: &Array2<f64>,
    dy: &Array2<f64>,
    gelu_active: bool,
) -> Array2<f64> {
    if gelu_active {
        let mut dx = pre.mapv(gelu_grad_scalar);
        dx *= dy;
        dx
    } else {
        let mut dx = pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        dx *= dy;
        dx
    }
}

/// Numerically stable row-wise softmax, in place.
pub(crate) fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Backward of row-wise softmax: `ds = (dy - sum(dy * y)) * y` per row.
pub(crate) fn softmax_backward_rows(y: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut ds = dy.clone();
    for (mut ds_row, y_row) in ds.rows_mut().into_iter().zip(y.rows()) {
        let dot: f64 = ds_row.iter().zip(y_row.iter()).map(|(a, b)| a * b).sum();
        for (d, &yv) in ds_row.iter_mut().zip(y_row.iter()) {
            *d = (*d - dot) * yv;
        }
    }
    ds
}

/// Per-row layer normalization with gain and bias. Returns the output; the
/// normalized rows and reciprocal standard deviations are written to the
/// provided buffers for the backward pass.
pub(crate) fn layer_norm(
    x: &Array2<f64>,
    gain: &Array1<f64>,
    bias: &Array1<f64>,
    norm_out: &mut Array2<f64>,
    rstd_out: &mut Vec<f64>,
) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut y = Array2::zeros(x.raw_dim());
    rstd_out.clear();
    for (i, row) in x.rows().into_iter().enumerate() {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        rstd_out.push(rstd);
        for (j, &v) in row.iter().enumerate() {
            let n = (v - mean) * rstd;
            norm_out[[i, j]] = n;
            y[[i, j]] = n * gain[j] + bias[j];
        }
    }
    y
}

/// Backward of [`layer_norm`]. Returns `dx`; accumulates `dgain`, `dbias`.
pub(crate) fn layer_norm_backward(
    dy: &Array2<f64>,
    norm: &Array2<f64>,
    rstd: &[f64],
    gain: &Array1<f64>,
    dgain: &mut Array1<f64>,
    dbias: &mut Array1<f64>,
) -> Array2<f64> {
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let mut sum_dn = 0.0;
        let mut sum_dn_n = 0.0;
        for j in 0..dy.ncols() {
            let dyv = dy[[i, j]];
            let n = norm[[i, j]];
            dgain[j] += dyv * n;
            dbias[j] += dyv;
            let dn = dyv * gain[j];
            sum_dn += dn;
            sum_dn_n += dn * n;
        }
        for j in 0..dy.ncols() {
            let dn = dy[[i, j]] * gain[j];
            dx[[i, j]] = rstd[i] * (dn - sum_dn / d - norm[[i, j]] * sum_dn_n / d);
        }
    }
    dx
}

/// Inverted-dropout mask: kept entries carry `1/(1-rate)`, dropped entries 0.
pub(crate) fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    Array2::from_shape_fn((rows, cols), |_| {
        if rng.gen::<f64>() < keep {
            scale
        } else {
            0.0
        }
    })
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
