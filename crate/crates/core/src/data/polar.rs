//! Polar resampling of disc-centered patches.
//!
//! A square patch is mapped onto a (radius, angle) grid of the same pixel
//! dimensions: row `ir` samples radius `(ir + 0.5) * R / rows` and column
//! `ia` samples angle `ia * 2*pi / cols`. The inverse resamples back to
//! Cartesian, with everything beyond the radius set to zero.

use ndarray::{Array3, ArrayView2, ArrayView3};

use crate::error::{Error, Result};

fn square_side(shape: &[usize]) -> Result<usize> {
    if shape[1] != shape[2] {
        return Err(Error::Shape(format!(
            "polar transform requires a square patch, got {}x{}",
            shape[1], shape[2]
        )));
    }
    Ok(shape[1])
}

fn resolve(center: Option<(f64, f64)>, radius: Option<f64>, side: usize) -> ((f64, f64), f64) {
    let c = center.unwrap_or(((side as f64 - 1.0) / 2.0, (side as f64 - 1.0) / 2.0));
    let r = radius.unwrap_or(side as f64 / 2.0);
    (c, r)
}

// Difference form v0 + w*(v1 - v0): constant inputs reproduce exactly.
fn bilinear_at(img: &ArrayView2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = (img.shape()[0] as isize, img.shape()[1] as isize);
    let y0 = y.floor() as isize;
    let x0 = x.floor() as isize;
    let wy = y - y0 as f64;
    let wx = x - x0 as f64;
    let cy0 = y0.clamp(0, h - 1) as usize;
    let cy1 = (y0 + 1).clamp(0, h - 1) as usize;
    let cx0 = x0.clamp(0, w - 1) as usize;
    let cx1 = (x0 + 1).clamp(0, w - 1) as usize;
    let top = img[[cy0, cx0]] + wx * (img[[cy0, cx1]] - img[[cy0, cx0]]);
    let bot = img[[cy1, cx0]] + wx * (img[[cy1, cx1]] - img[[cy1, cx0]]);
    top + wy * (bot - top)
}

/// Cartesian-to-polar resampling with bilinear interpolation.
///
/// `center` is (cx, cy) in pixel coordinates and defaults to the patch
/// center; `radius` defaults to half the side.
pub fn polar_transform(
    patch: &ArrayView3<f64>,
    center: Option<(f64, f64)>,
    radius: Option<f64>,
) -> Result<Array3<f64>> {
    let side = square_side(patch.shape())?;
    let ((cx, cy), r_max) = resolve(center, radius, side);
    let (rows, cols) = (side, side);
    let mut out = Array3::<f64>::zeros((patch.shape()[0], rows, cols));
    for c in 0..patch.shape()[0] {
        let plane = patch.index_axis(ndarray::Axis(0), c);
        for ir in 0..rows {
            let r = (ir as f64 + 0.5) * r_max / rows as f64;
            for ia in 0..cols {
                let theta = ia as f64 * std::f64::consts::TAU / cols as f64;
                let y = cy + r * theta.sin();
                let x = cx + r * theta.cos();
                out[[c, ir, ia]] = bilinear_at(&plane, y, x);
            }
        }
    }
    Ok(out)
}

/// Polar-to-Cartesian resampling; the angular axis interpolates with
/// wraparound and pixels outside the radius become zero.
pub fn inverse_polar(
    polar_img: &ArrayView3<f64>,
    center: Option<(f64, f64)>,
    radius: Option<f64>,
) -> Result<Array3<f64>> {
    let side = square_side(polar_img.shape())?;
    let ((cx, cy), r_max) = resolve(center, radius, side);
    let (rows, cols) = (side, side);
    let mut out = Array3::<f64>::zeros((polar_img.shape()[0], side, side));
    for c in 0..polar_img.shape()[0] {
        let plane = polar_img.index_axis(ndarray::Axis(0), c);
        for y in 0..side {
            for x in 0..side {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                let r = (dy * dy + dx * dx).sqrt();
                if r > r_max {
                    continue;
                }
                let theta = dy.atan2(dx).rem_euclid(std::f64::consts::TAU);
                let fr = (r * rows as f64 / r_max - 0.5).clamp(0.0, rows as f64 - 1.0);
                let fa = theta * cols as f64 / std::f64::consts::TAU;
                // Radial: clamped bilinear; angular: wraparound bilinear.
                let r0 = fr.floor() as usize;
                let r1 = (r0 + 1).min(rows - 1);
                let wr = fr - r0 as f64;
                let a0 = fa.floor() as usize % cols;
                let a1 = (a0 + 1) % cols;
                let wa = fa - fa.floor();
                let lo = plane[[r0, a0]] + wa * (plane[[r0, a1]] - plane[[r0, a0]]);
                let hi = plane[[r1, a0]] + wa * (plane[[r1, a1]] - plane[[r1, a0]]);
                out[[c, y, x]] = lo + wr * (hi - lo);
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbor polar resampling for label maps.
pub fn polar_transform_nearest(
    mask: &ArrayView3<u8>,
    center: Option<(f64, f64)>,
    radius: Option<f64>,
) -> Result<Array3<u8>> {
    let side = square_side(mask.shape())?;
    let ((cx, cy), r_max) = resolve(center, radius, side);
    let (rows, cols) = (side, side);
    let (h, w) = (side as isize, side as isize);
    let mut out = Array3::<u8>::zeros((mask.shape()[0], rows, cols));
    for c in 0..mask.shape()[0] {
        for ir in 0..rows {
            let r = (ir as f64 + 0.5) * r_max / rows as f64;
            for ia in 0..cols {
                let theta = ia as f64 * std::f64::consts::TAU / cols as f64;
                let y = (cy + r * theta.sin()).round() as isize;
                let x = (cx + r * theta.cos()).round() as isize;
                let y = y.clamp(0, h - 1) as usize;
                let x = x.clamp(0, w - 1) as usize;
                out[[c, ir, ia]] = mask[[c, y, x]];
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbor inverse for predicted label maps.
pub fn inverse_polar_nearest(
    polar_mask: &ArrayView3<u8>,
    center: Option<(f64, f64)>,
    radius: Option<f64>,
) -> Result<Array3<u8>> {
    let side = square_side(polar_mask.shape())?;
    let ((cx, cy), r_max) = resolve(center, radius, side);
    let (rows, cols) = (side, side);
    let mut out = Array3::<u8>::zeros((polar_mask.shape()[0], side, side));
    for c in 0..polar_mask.shape()[0] {
        for y in 0..side {
            for x in 0..side {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                let r = (dy * dy + dx * dx).sqrt();
                if r > r_max {
                    continue;
                }
                let theta = dy.atan2(dx).rem_euclid(std::f64::consts::TAU);
                let ir = ((r * rows as f64 / r_max - 0.5).round() as isize)
                    .clamp(0, rows as isize - 1) as usize;
                let ia = (theta * cols as f64 / std::f64::consts::TAU).round() as usize % cols;
                out[[c, y, x]] = polar_mask[[c, ir, ia]];
            }
        }
    }
    Ok(out)
}

/// Peak signal-to-noise ratio between two images over a pixel predicate.
pub fn psnr_within<F: Fn(usize, usize) -> bool>(
    a: &ArrayView3<f64>,
    b: &ArrayView3<f64>,
    peak: f64,
    keep: F,
) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let mut sq = 0.0;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if !keep(y, x) {
                continue;
            }
            for ci in 0..c {
                let d = a[[ci, y, x]] - b[[ci, y, x]];
                sq += d * d;
                n += 1;
            }
        }
    }
    if n == 0 || sq == 0.0 {
        return f64::INFINITY;
    }
    let mse = sq / n as f64;
    10.0 * (peak * peak / mse).log10()
}
