//! Batch normalization kernels (training and eval modes).

use ndarray::{Array1, Array4, ArrayView1, ArrayView4, Axis};

type BnFwd = (Array4<f64>, Vec<f64>, Vec<f64>, Vec<f64>);

/// Training-mode forward: normalize with batch statistics.
/// Returns (y, mean, biased variance, invstd) per channel.
pub(crate) fn bn_train_fwd(
    x: &ArrayView4<f64>,
    gamma: &ArrayView1<f64>,
    beta: &ArrayView1<f64>,
    eps: f64,
) -> BnFwd {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let count = (n * h * w) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ci in 0..c {
        let mut s = 0.0;
        for ni in 0..n {
            s += x.index_axis(Axis(0), ni).index_axis(Axis(0), ci).sum();
        }
        mean[ci] = s / count;
        let mut sq = 0.0;
        for ni in 0..n {
            let plane = x.index_axis(Axis(0), ni);
            let plane = plane.index_axis(Axis(0), ci);
            for &v in plane.iter() {
                let d = v - mean[ci];
                sq += d * d;
            }
        }
        var[ci] = sq / count;
    }
    let invstd: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();

    let mut y = Array4::<f64>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let g = gamma[ci];
            let b = beta[ci];
            let m = mean[ci];
            let is = invstd[ci];
            let xp = x.index_axis(Axis(0), ni);
            let xp = xp.index_axis(Axis(0), ci);
            let mut yp = y.index_axis_mut(Axis(0), ni);
            let mut yp = yp.index_axis_mut(Axis(0), ci);
            yp.zip_mut_with(&xp, |yo, &xi| *yo = g * (xi - m) * is + b);
        }
    }
    (y, mean, var, invstd)
}

/// Training-mode backward. Standard batch-norm gradient with batch statistics
/// treated as functions of the input.
pub(crate) fn bn_train_bwd(
    x: &ArrayView4<f64>,
    gamma: &ArrayView1<f64>,
    mean: &[f64],
    invstd: &[f64],
    dy: &ArrayView4<f64>,
) -> (Array4<f64>, Array1<f64>, Array1<f64>) {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let count = (n * h * w) as f64;
    let mut dgamma = Array1::<f64>::zeros(c);
    let mut dbeta = Array1::<f64>::zeros(c);
    let mut dx = Array4::<f64>::zeros((n, c, h, w));

    for ci in 0..c {
        let m = mean[ci];
        let is = invstd[ci];
        // First pass: sum(dy) and sum(dy * xhat).
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for ni in 0..n {
            let xp = x.index_axis(Axis(0), ni);
            let xp = xp.index_axis(Axis(0), ci);
            let dp = dy.index_axis(Axis(0), ni);
            let dp = dp.index_axis(Axis(0), ci);
            for (&xi, &di) in xp.iter().zip(dp.iter()) {
                let xhat = (xi - m) * is;
                sum_dy += di;
                sum_dy_xhat += di * xhat;
            }
        }
        dgamma[ci] = sum_dy_xhat;
        dbeta[ci] = sum_dy;

        let gscale = gamma[ci] * is / count;
        for ni in 0..n {
            let xp = x.index_axis(Axis(0), ni);
            let xp = xp.index_axis(Axis(0), ci);
            let dp = dy.index_axis(Axis(0), ni);
            let dp = dp.index_axis(Axis(0), ci);
            let mut op = dx.index_axis_mut(Axis(0), ni);
            let mut op = op.index_axis_mut(Axis(0), ci);
            ndarray::Zip::from(&mut op).and(&xp).and(&dp).for_each(|o, &xi, &di| {
                let xhat = (xi - m) * is;
                *o = gscale * (count * di - sum_dy - xhat * sum_dy_xhat);
            });
        }
    }
    (dx, dgamma, dbeta)
}

/// Eval-mode forward: affine transform with fixed running statistics.
/// Returns (y, per-channel scale) where scale = gamma * invstd.
pub(crate) fn bn_eval_fwd(
    x: &ArrayView4<f64>,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> (Array4<f64>, Vec<f64>) {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut scale = vec![0.0; c];
    let mut shift = vec![0.0; c];
    for ci in 0..c {
        let is = 1.0 / (running_var[ci] + eps).sqrt();
        scale[ci] = gamma[ci] * is;
        shift[ci] = beta[ci] - running_mean[ci] * scale[ci];
    }
    let mut y = Array4::<f64>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let xp = x.index_axis(Axis(0), ni);
            let xp = xp.index_axis(Axis(0), ci);
            let mut yp = y.index_axis_mut(Axis(0), ni);
            let mut yp = yp.index_axis_mut(Axis(0), ci);
            let (k, b) = (scale[ci], shift[ci]);
            yp.zip_mut_with(&xp, |yo, &xi| *yo = k * xi + b);
        }
    }
    (y, scale)
}

pub(crate) fn bn_eval_bwd(scale: &[f64], dy: &ArrayView4<f64>) -> Array4<f64> {
    let (n, c, h, w) = (dy.shape()[0], dy.shape()[1], dy.shape()[2], dy.shape()[3]);
    let mut dx = Array4::<f64>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let dp = dy.index_axis(Axis(0), ni);
            let dp = dp.index_axis(Axis(0), ci);
            let mut op = dx.index_axis_mut(Axis(0), ni);
            let mut op = op.index_axis_mut(Axis(0), ci);
            let k = scale[ci];
            op.zip_mut_with(&dp, |o, &di| *o = k * di);
        }
    }
    dx
}
