//! Flip / right-angle-rotation augmentation, applied identically to the
//! image, the mask and the FOV so pixel alignment is preserved.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Sample;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentOps {
    pub hflip: bool,
    pub vflip: bool,
    /// Quarter turns, counterclockwise. Only drawn for square samples.
    pub rot90: u8,
}

impl AugmentOps {
    pub fn identity() -> Self {
        AugmentOps {
            hflip: false,
            vflip: false,
            rot90: 0,
        }
    }

    pub fn sample(rng: &mut ChaCha8Rng, square: bool) -> Self {
        AugmentOps {
            hflip: rng.gen::<bool>(),
            vflip: rng.gen::<bool>(),
            rot90: if square { rng.gen_range(0..4) } else { 0 },
        }
    }

    /// Map source coordinates through the op (for landmark tracking).
    pub fn map_coord(&self, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
        let (mut y, mut x) = (y, x);
        if self.hflip {
            x = w - 1 - x;
        }
        if self.vflip {
            y = h - 1 - y;
        }
        let (mut hh, mut ww) = (h, w);
        for _ in 0..self.rot90 {
            let (ny, nx) = (ww - 1 - x, y);
            y = ny;
            x = nx;
            std::mem::swap(&mut hh, &mut ww);
        }
        (y, x)
    }
}

fn apply_plane_f64(src: &Array2<f64>, ops: AugmentOps) -> Array2<f64> {
    let (h, w) = (src.shape()[0], src.shape()[1]);
    let (oh, ow) = if ops.rot90 % 2 == 1 { (w, h) } else { (h, w) };
    let mut out = Array2::<f64>::zeros((oh, ow));
    for y in 0..h {
        for x in 0..w {
            let (ny, nx) = ops.map_coord(y, x, h, w);
            out[[ny, nx]] = src[[y, x]];
        }
    }
    out
}

fn apply_plane_u8(src: &Array2<u8>, ops: AugmentOps) -> Array2<u8> {
    let (h, w) = (src.shape()[0], src.shape()[1]);
    let (oh, ow) = if ops.rot90 % 2 == 1 { (w, h) } else { (h, w) };
    let mut out = Array2::<u8>::zeros((oh, ow));
    for y in 0..h {
        for x in 0..w {
            let (ny, nx) = ops.map_coord(y, x, h, w);
            out[[ny, nx]] = src[[y, x]];
        }
    }
    out
}

fn apply3_f64(src: &Array3<f64>, ops: AugmentOps) -> Array3<f64> {
    let planes: Vec<Array2<f64>> = src
        .outer_iter()
        .map(|p| apply_plane_f64(&p.to_owned(), ops))
        .collect();
    let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
    ndarray::stack(ndarray::Axis(0), &views).unwrap()
}

fn apply3_u8(src: &Array3<u8>, ops: AugmentOps) -> Array3<u8> {
    let planes: Vec<Array2<u8>> = src
        .outer_iter()
        .map(|p| apply_plane_u8(&p.to_owned(), ops))
        .collect();
    let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
    ndarray::stack(ndarray::Axis(0), &views).unwrap()
}

/// Apply `ops` consistently to every component of the sample.
pub fn apply(sample: &Sample, ops: AugmentOps) -> Sample {
    Sample {
        image: apply3_f64(&sample.image, ops),
        mask: apply3_u8(&sample.mask, ops),
        fov: sample.fov.as_ref().map(|f| apply_plane_u8(f, ops)),
        meta: sample.meta.clone(),
    }
}

/// Draw random flips/rotations and apply them.
pub fn augment(sample: &Sample, rng: &mut ChaCha8Rng) -> Sample {
    let square = sample.image.shape()[1] == sample.image.shape()[2];
    apply(sample, AugmentOps::sample(rng, square))
}
