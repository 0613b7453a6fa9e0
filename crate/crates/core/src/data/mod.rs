//! Dataset ingestion, geometric preprocessing and synthetic data.
//!
//! Supported on-disk layouts:
//!
//! - Vessel (DRIVE style): `<root>/{training,test}/{images,1st_manual,mask}/`
//!   with index-matched filenames (the leading integer pairs the files).
//! - Disc/cup: `<root>/{images,masks}/` plus a `centers.csv` of
//!   `filename,cx,cy[,radius]`. Masks are trimaps: 0 background, 128 disc
//!   rim, 255 cup (the disc region is everything >= 128).
//!
//! The synthetic generator materializes to the same layouts, so every
//! downstream code path is format-identical with real data.

pub mod augment;
pub mod loader;
pub mod polar;
pub mod synth;

use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};


use crate::error::{Error, Result};

/// Crop rectangle in the source frame (row, col origin plus size).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CropRect {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

/// Provenance and geometry attached to a sample.
#[derive(Debug, Clone, Default)]
pub struct SampleMeta {
    pub id: String,
    /// (height, width) before any resizing.
    pub original_size: (usize, usize),
    /// Disc center (cx, cy) in original coordinates, when known.
    pub disc_center: Option<(f64, f64)>,
    pub disc_radius: Option<f64>,
    /// Set when the sample is a crop of a larger frame.
    pub crop: Option<CropRect>,
}

/// One image with its labels.
///
/// `image` is (C, H, W) in [0, 1] on the reconstruction grid; `mask` is
/// (K, H, W) binary; `fov` restricts evaluation when present.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Array3<f64>,
    pub mask: Array3<u8>,
    pub fov: Option<Array2<u8>>,
    pub meta: SampleMeta,
}

impl Sample {
    /// Check the container invariants: value ranges, binarity, alignment.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.image.shape()[1], self.image.shape()[2]);
        if self.mask.shape()[1] != h || self.mask.shape()[2] != w {
            return Err(Error::Data(format!(
                "sample {}: mask {:?} not aligned with image {:?}",
                self.meta.id,
                self.mask.shape(),
                self.image.shape()
            )));
        }
        if let Some(fov) = &self.fov {
            if fov.shape() != [h, w] {
                return Err(Error::Data(format!(
                    "sample {}: fov {:?} not aligned with image {:?}",
                    self.meta.id,
                    fov.shape(),
                    self.image.shape()
                )));
            }
            if !fov.iter().all(|&v| v <= 1) {
                return Err(Error::Data(format!("sample {}: fov not binary", self.meta.id)));
            }
        }
        if !self.image.iter().all(|&v| (0.0..=1.0).contains(&v)) {
            return Err(Error::Data(format!(
                "sample {}: image values outside [0,1]",
                self.meta.id
            )));
        }
        if !self.mask.iter().all(|&v| v <= 1) {
            return Err(Error::Data(format!("sample {}: mask not binary", self.meta.id)));
        }
        Ok(())
    }
}

/// Bilinear resize of a (C, H, W) tensor (half-pixel convention).
pub fn resize_bilinear(src: &ArrayView3<f64>, oh: usize, ow: usize) -> Array3<f64> {
    let (c, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
    let mut out = Array3::<f64>::zeros((c, oh, ow));
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for oy in 0..oh {
        let v = (oy as f64 + 0.5) * sy - 0.5;
        let y0f = v.floor();
        let wy = v - y0f;
        let y0 = (y0f as isize).clamp(0, h as isize - 1) as usize;
        let y1 = (y0f as isize + 1).clamp(0, h as isize - 1) as usize;
        for ox in 0..ow {
            let u = (ox as f64 + 0.5) * sx - 0.5;
            let x0f = u.floor();
            let wx = u - x0f;
            let x0 = (x0f as isize).clamp(0, w as isize - 1) as usize;
            let x1 = (x0f as isize + 1).clamp(0, w as isize - 1) as usize;
            for ci in 0..c {
                let top = src[[ci, y0, x0]] + wx * (src[[ci, y0, x1]] - src[[ci, y0, x0]]);
                let bot = src[[ci, y1, x0]] + wx * (src[[ci, y1, x1]] - src[[ci, y1, x0]]);
                out[[ci, oy, ox]] = top + wy * (bot - top);
            }
        }
    }
    out
}

/// Nearest-neighbor resize for label maps (no fractional labels).
pub fn resize_nearest_u8_2d(src: &ArrayView2<u8>, oh: usize, ow: usize) -> Array2<u8> {
    let (h, w) = (src.shape()[0], src.shape()[1]);
    let mut out = Array2::<u8>::zeros((oh, ow));
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for oy in 0..oh {
        let y = (((oy as f64 + 0.5) * sy - 0.5).round() as isize).clamp(0, h as isize - 1) as usize;
        for ox in 0..ow {
            let x =
                (((ox as f64 + 0.5) * sx - 0.5).round() as isize).clamp(0, w as isize - 1) as usize;
            out[[oy, ox]] = src[[y, x]];
        }
    }
    out
}

pub fn resize_nearest_u8_3d(src: &ArrayView3<u8>, oh: usize, ow: usize) -> Array3<u8> {
    let k = src.shape()[0];
    let mut out = Array3::<u8>::zeros((k, oh, ow));
    for ki in 0..k {
        let plane = src.index_axis(ndarray::Axis(0), ki);
        out.index_axis_mut(ndarray::Axis(0), ki)
            .assign(&resize_nearest_u8_2d(&plane, oh, ow));
    }
    out
}

/// Clamp to [0, 1] and snap onto the reconstruction grid.
pub fn normalize_image(img: &mut Array3<f64>) {
    use crate::demixer::RECON_GRID;
    img.mapv_inplace(|v| (v.clamp(0.0, 1.0) * RECON_GRID).round() / RECON_GRID);
}

/// Decode an image file into (3, H, W) RGB in [0, 1].
pub fn load_image_rgb(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let mut out = Array3::<f64>::zeros((3, h as usize, w as usize));
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = p.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Decode a mask file into {0,1}, re-binarizing gray values at 0.5.
pub fn load_mask_binary(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    let mut out = Array2::<u8>::zeros((h as usize, w as usize));
    for (x, y, p) in gray.enumerate_pixels() {
        out[[y as usize, x as usize]] = u8::from(p.0[0] >= 128);
    }
    Ok(out)
}

/// Decode a disc/cup trimap into a two-channel mask (0 = disc, 1 = cup).
pub fn load_mask_trimap(path: &Path) -> Result<Array3<u8>> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    let mut out = Array3::<u8>::zeros((2, h as usize, w as usize));
    for (x, y, p) in gray.enumerate_pixels() {
        let v = p.0[0];
        out[[0, y as usize, x as usize]] = u8::from(v >= 64);
        out[[1, y as usize, x as usize]] = u8::from(v >= 192);
    }
    Ok(out)
}

/// Write a grayscale [0,1] image as an 8-bit PNG.
pub fn save_gray_png(path: &Path, img: &ArrayView2<f64>) -> Result<()> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for (x, y, p) in buf.enumerate_pixels_mut() {
        let v = img[[y as usize, x as usize]].clamp(0.0, 1.0);
        p.0[0] = (v * 255.0).round() as u8;
    }
    buf.save(path).map_err(|e| Error::image(path, e))
}

/// Write an RGB (3, H, W) [0,1] image as an 8-bit PNG.
pub fn save_rgb_png(path: &Path, img: &ArrayView3<f64>) -> Result<()> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, p) in buf.enumerate_pixels_mut() {
        for c in 0..3 {
            let v = img[[c, y as usize, x as usize]].clamp(0.0, 1.0);
            p.0[c] = (v * 255.0).round() as u8;
        }
    }
    buf.save(path).map_err(|e| Error::image(path, e))
}

/// Write a binary mask as a 0/255 PNG.
pub fn save_mask_png(path: &Path, mask: &ArrayView2<u8>) -> Result<()> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for (x, y, p) in buf.enumerate_pixels_mut() {
        p.0[0] = if mask[[y as usize, x as usize]] > 0 { 255 } else { 0 };
    }
    buf.save(path).map_err(|e| Error::image(path, e))
}

/// Write a disc/cup two-channel mask as a 0/128/255 trimap PNG.
pub fn save_trimap_png(path: &Path, mask: &ArrayView3<u8>) -> Result<()> {
    let (h, w) = (mask.shape()[1], mask.shape()[2]);
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for (x, y, p) in buf.enumerate_pixels_mut() {
        let disc = mask[[0, y as usize, x as usize]] > 0;
        let cup = mask[[1, y as usize, x as usize]] > 0;
        p.0[0] = if cup {
            255
        } else if disc {
            128
        } else {
            0
        };
    }
    buf.save(path).map_err(|e| Error::image(path, e))
}

#[cfg(test)]
mod tests;
