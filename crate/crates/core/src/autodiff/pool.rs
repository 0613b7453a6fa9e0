//! 2x2 stride-2 pooling kernels.

use ndarray::{Array4, ArrayView4};

pub(crate) fn avg_pool2_fwd(x: &ArrayView4<f64>) -> Array4<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2: odd spatial dims {h}x{w}");
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array4::<f64>::zeros((n, c, oh, ow));
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let (iy, ix) = (oy * 2, ox * 2);
                    y[[ni, ci, oy, ox]] = 0.25
                        * (x[[ni, ci, iy, ix]]
                            + x[[ni, ci, iy, ix + 1]]
                            + x[[ni, ci, iy + 1, ix]]
                            + x[[ni, ci, iy + 1, ix + 1]]);
                }
            }
        }
    }
    y
}

pub(crate) fn avg_pool2_bwd(dy: &ArrayView4<f64>) -> Array4<f64> {
    let (n, c, oh, ow) = (dy.shape()[0], dy.shape()[1], dy.shape()[2], dy.shape()[3]);
    let mut dx = Array4::<f64>::zeros((n, c, oh * 2, ow * 2));
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let d = dy[[ni, ci, oy, ox]] * 0.25;
                    let (iy, ix) = (oy * 2, ox * 2);
                    dx[[ni, ci, iy, ix]] += d;
                    dx[[ni, ci, iy, ix + 1]] += d;
                    dx[[ni, ci, iy + 1, ix]] += d;
                    dx[[ni, ci, iy + 1, ix + 1]] += d;
                }
            }
        }
    }
    dx
}

/// Max pooling; the returned argmax holds the 2x2 window offset (0..4) of
/// the maximum, first match winning on ties.
pub(crate) fn max_pool2_fwd(x: &ArrayView4<f64>) -> (Array4<f64>, Vec<u8>) {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    assert!(h % 2 == 0 && w % 2 == 0, "max_pool2: odd spatial dims {h}x{w}");
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array4::<f64>::zeros((n, c, oh, ow));
    let mut argmax = vec![0u8; n * c * oh * ow];
    let mut flat = 0usize;
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let (iy, ix) = (oy * 2, ox * 2);
                    let vals = [
                        x[[ni, ci, iy, ix]],
                        x[[ni, ci, iy, ix + 1]],
                        x[[ni, ci, iy + 1, ix]],
                        x[[ni, ci, iy + 1, ix + 1]],
                    ];
                    let mut best = 0usize;
                    for k in 1..4 {
                        if vals[k] > vals[best] {
                            best = k;
                        }
                    }
                    y[[ni, ci, oy, ox]] = vals[best];
                    argmax[flat] = best as u8;
                    flat += 1;
                }
            }
        }
    }
    (y, argmax)
}

pub(crate) fn max_pool2_bwd(dy: &ArrayView4<f64>, argmax: &[u8]) -> Array4<f64> {
    let (n, c, oh, ow) = (dy.shape()[0], dy.shape()[1], dy.shape()[2], dy.shape()[3]);
    let mut dx = Array4::<f64>::zeros((n, c, oh * 2, ow * 2));
    let mut flat = 0usize;
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let k = argmax[flat] as usize;
                    flat += 1;
                    let (iy, ix) = (oy * 2 + k / 2, ox * 2 + k % 2);
                    dx[[ni, ci, iy, ix]] += dy[[ni, ci, oy, ox]];
                }
            }
        }
    }
    dx
}
