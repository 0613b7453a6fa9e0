//! Bilinear 2x upsampling (half-pixel convention, clamped edges).

use ndarray::{Array4, ArrayView4};

/// Tap indices and blend weight for one output coordinate at scale 2.
/// Source coordinate u = (i + 0.5) / 2 - 0.5; result = (1-w)*src[i0] + w*src[i1].
fn taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|i| {
            let u = (i as f64 + 0.5) / 2.0 - 0.5;
            let i0f = u.floor();
            let w = u - i0f;
            let i0 = (i0f as isize).clamp(0, in_len as isize - 1) as usize;
            let i1 = ((i0f as isize) + 1).clamp(0, in_len as isize - 1) as usize;
            (i0, i1, w)
        })
        .collect()
}

pub(crate) fn upsample2_fwd(x: &ArrayView4<f64>) -> Array4<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (h * 2, w * 2);
    let ty = taps(oh, h);
    let tx = taps(ow, w);
    let mut y = Array4::<f64>::zeros((n, c, oh, ow));
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                let (y0, y1, wy) = ty[oy];
                for ox in 0..ow {
                    let (x0, x1, wx) = tx[ox];
                    let v00 = x[[ni, ci, y0, x0]];
                    let v01 = x[[ni, ci, y0, x1]];
                    let v10 = x[[ni, ci, y1, x0]];
                    let v11 = x[[ni, ci, y1, x1]];
                    let top = v00 * (1.0 - wx) + v01 * wx;
                    let bot = v10 * (1.0 - wx) + v11 * wx;
                    y[[ni, ci, oy, ox]] = top * (1.0 - wy) + bot * wy;
                }
            }
        }
    }
    y
}

pub(crate) fn upsample2_bwd(dy: &ArrayView4<f64>) -> Array4<f64> {
    let (n, c, oh, ow) = (dy.shape()[0], dy.shape()[1], dy.shape()[2], dy.shape()[3]);
    let (h, w) = (oh / 2, ow / 2);
    let ty = taps(oh, h);
    let tx = taps(ow, w);
    let mut dx = Array4::<f64>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                let (y0, y1, wy) = ty[oy];
                for ox in 0..ow {
                    let (x0, x1, wx) = tx[ox];
                    let d = dy[[ni, ci, oy, ox]];
                    dx[[ni, ci, y0, x0]] += d * (1.0 - wy) * (1.0 - wx);
                    dx[[ni, ci, y0, x1]] += d * (1.0 - wy) * wx;
                    dx[[ni, ci, y1, x0]] += d * wy * (1.0 - wx);
                    dx[[ni, ci, y1, x1]] += d * wy * wx;
                }
            }
        }
    }
    dx
}
