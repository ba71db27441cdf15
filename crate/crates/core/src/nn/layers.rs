//! Batch normalization, ReLU, global average pooling and the linear head.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayBase, Axis, Data, Ix1, Ix2};

/// What batch-norm backward needs from the forward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Array4<f64>,
    pub inv_std: Array1<f64>,
}

/// Training-mode batch norm: normalizes with the batch statistics.
///
/// Returns the output, the backward cache, and the biased batch mean and
/// variance so the caller can fold them into the running statistics.
pub fn bn_forward_train<Sg, Sb>(
    x: &Array4<f64>,
    gamma: &ArrayBase<Sg, Ix1>,
    beta: &ArrayBase<Sb, Ix1>,
    eps: f64,
) -> (Array4<f64>, BnCache, Array1<f64>, Array1<f64>)
where
    Sg: Data<Elem = f64>,
    Sb: Data<Elem = f64>,
{
    let (batch, channels, h, w) = x.dim();
    let m = (batch * h * w) as f64;

    let mut mean = Array1::<f64>::zeros(channels);
    let mut var = Array1::<f64>::zeros(channels);
    for c in 0..channels {
        let plane = x.index_axis(Axis(1), c);
        let mu = plane.sum() / m;
        let v = plane.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / m;
        mean[c] = mu;
        var[c] = v;
    }
    let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());

    let mut xhat = x.clone();
    for c in 0..channels {
        let (mu, is) = (mean[c], inv_std[c]);
        xhat.index_axis_mut(Axis(1), c).mapv_inplace(|v| (v - mu) * is);
    }
    let mut y = xhat.clone();
    for c in 0..channels {
        let (g, b) = (gamma[c], beta[c]);
        y.index_axis_mut(Axis(1), c).mapv_inplace(|v| g * v + b);
    }
    (y, BnCache { xhat, inv_std }, mean, var)
}

/// Inference-mode batch norm: normalizes with the running statistics.
pub fn bn_forward_eval<S1, S2, S3, S4>(
    x: &Array4<f64>,
    gamma: &ArrayBase<S1, Ix1>,
    beta: &ArrayBase<S2, Ix1>,
    running_mean: &ArrayBase<S3, Ix1>,
    running_var: &ArrayBase<S4, Ix1>,
    eps: f64,
) -> Array4<f64>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    S3: Data<Elem = f64>,
    S4: Data<Elem = f64>,
{
    let channels = x.dim().1;
    let mut y = x.clone();
    for c in 0..channels {
        let scale = gamma[c] / (running_var[c] + eps).sqrt();
        let shift = beta[c] - running_mean[c] * scale;
        y.index_axis_mut(Axis(1), c).mapv_inplace(|v| v * scale + shift);
    }
    y
}

/// Backward through training-mode batch norm: returns (dx, dgamma, dbeta).
pub fn bn_backward<Sg>(
    dy: &Array4<f64>,
    cache: &BnCache,
    gamma: &ArrayBase<Sg, Ix1>,
) -> (Array4<f64>, Array1<f64>, Array1<f64>)
where
    Sg: Data<Elem = f64>,
{
    let (batch, channels, h, w) = dy.dim();
    let m = (batch * h * w) as f64;

    let mut dgamma = Array1::<f64>::zeros(channels);
    let mut dbeta = Array1::<f64>::zeros(channels);
    for c in 0..channels {
        let dy_c = dy.index_axis(Axis(1), c);
        let xhat_c = cache.xhat.index_axis(Axis(1), c);
        dbeta[c] = dy_c.sum();
        dgamma[c] = dy_c.iter().zip(xhat_c.iter()).map(|(&d, &x)| d * x).sum();
    }

    let mut dx = dy.clone();
    for c in 0..channels {
        let k = gamma[c] * cache.inv_std[c] / m;
        let (db, dg) = (dbeta[c], dgamma[c]);
        let xhat_c = cache.xhat.index_axis(Axis(1), c).to_owned();
        let mut dx_c = dx.index_axis_mut(Axis(1), c);
        dx_c.zip_mut_with(&xhat_c, |d, &x| {
            *d = k * (m * *d - db - x * dg);
        });
    }
    (dx, dgamma, dbeta)
}

/// ReLU, consuming its input buffer.
pub fn relu_forward(mut x: Array4<f64>) -> Array4<f64> {
    x.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
    x
}

/// Backward through ReLU given its output.
pub fn relu_backward(dy: &Array4<f64>, y: &Array4<f64>) -> Array4<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &out| {
        if out <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

/// Spatial mean per channel: NCHW -> N×C.
pub fn global_avg_pool_forward(x: &Array4<f64>) -> Array2<f64> {
    let (batch, channels, h, w) = x.dim();
    let m = (h * w) as f64;
    let mut y = Array2::<f64>::zeros((batch, channels));
    for s in 0..batch {
        for c in 0..channels {
            y[[s, c]] = x.index_axis(Axis(0), s).index_axis(Axis(0), c).sum() / m;
        }
    }
    y
}

pub fn global_avg_pool_backward(dy: &Array2<f64>, (h, w): (usize, usize)) -> Array4<f64> {
    let (batch, channels) = dy.dim();
    let m = (h * w) as f64;
    let mut dx = Array4::<f64>::zeros((batch, channels, h, w));
    for s in 0..batch {
        for c in 0..channels {
            dx.index_axis_mut(Axis(0), s)
                .index_axis_mut(Axis(0), c)
                .fill(dy[[s, c]] / m);
        }
    }
    dx
}

/// Fully connected head: y = x·W + b with x: B×M, W: M×K.
pub fn linear_forward<Sw, Sb>(
    x: &Array2<f64>,
    weight: &ArrayBase<Sw, Ix2>,
    bias: &ArrayBase<Sb, Ix1>,
) -> Array2<f64>
where
    Sw: Data<Elem = f64>,
    Sb: Data<Elem = f64>,
{
    let (batch, _) = x.dim();
    let k = weight.dim().1;
    let mut y = Array2::<f64>::zeros((batch, k));
    general_mat_mul(1.0, x, weight, 0.0, &mut y);
    for mut row in y.rows_mut() {
        row.zip_mut_with(bias, |v, &b| *v += b);
    }
    y
}

/// Gradients of the linear head: returns (dx, dweight, dbias).
pub fn linear_backward<Sw>(
    dy: &Array2<f64>,
    x: &Array2<f64>,
    weight: &ArrayBase<Sw, Ix2>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>)
where
    Sw: Data<Elem = f64>,
{
    let mut dx = Array2::<f64>::zeros(x.raw_dim());
    general_mat_mul(1.0, dy, &weight.t(), 0.0, &mut dx);
    let mut dw = Array2::<f64>::zeros(weight.raw_dim());
    general_mat_mul(1.0, &x.t(), dy, 0.0, &mut dw);
    let db = dy.sum_axis(Axis(0));
    (dx, dw, db)
}
