//! Directory scanning and sample loading for the supported layouts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Axis};

use super::synth::Split;
use super::{
    load_image_rgb, load_mask_binary, load_mask_trimap, normalize_image, resize_bilinear,
    resize_nearest_u8_2d, resize_nearest_u8_3d, CropRect, Sample, SampleMeta,
};
use crate::error::{Error, Result};

/// File triplet of one vessel sample.
#[derive(Debug, Clone)]
pub struct VesselPaths {
    pub index: u32,
    pub image: PathBuf,
    pub annotation: PathBuf,
    pub fov: Option<PathBuf>,
}

fn leading_index(path: &Path) -> Option<u32> {
    let stem = path.file_stem()?.to_str()?;
    let digits: String = stem.chars().take_while(|c| c.is_ascii_digit()).collect();
    digits.parse().ok()
}

fn scan_indexed(dir: &Path) -> Result<BTreeMap<u32, PathBuf>> {
    let mut map = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if !path.is_file() {
            continue;
        }
        if let Some(idx) = leading_index(&path) {
            map.insert(idx, path);
        }
    }
    Ok(map)
}

/// Scan a DRIVE-style split directory, pairing files by their leading index.
pub fn scan_vessel_layout(root: &Path, split: Split) -> Result<Vec<VesselPaths>> {
    let base = root.join(split.dir_name());
    let images = scan_indexed(&base.join("images"))?;
    let manuals = scan_indexed(&base.join("1st_manual"))?;
    let fovs = if base.join("mask").is_dir() {
        scan_indexed(&base.join("mask"))?
    } else {
        BTreeMap::new()
    };
    if images.is_empty() {
        return Err(Error::Data(format!(
            "no images found under {}",
            base.join("images").display()
        )));
    }
    let mut out = Vec::new();
    for (idx, image) in images {
        let annotation = manuals.get(&idx).cloned().ok_or_else(|| {
            Error::Data(format!("image index {idx} has no matching manual annotation"))
        })?;
        out.push(VesselPaths {
            index: idx,
            image,
            annotation,
            fov: fovs.get(&idx).cloned(),
        });
    }
    Ok(out)
}

/// Load one vessel sample: image resized bilinearly to `target` squared,
/// annotation and FOV resized nearest-neighbor.
pub fn load_vessel_sample(paths: &VesselPaths, target: usize) -> Result<Sample> {
    let image = load_image_rgb(&paths.image)?;
    let mask = load_mask_binary(&paths.annotation)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if mask.shape() != [h, w] {
        return Err(Error::Data(format!(
            "{}: annotation size {:?} does not match image {h}x{w}",
            paths.annotation.display(),
            mask.shape()
        )));
    }
    let fov = match &paths.fov {
        Some(p) => {
            let f = load_mask_binary(p)?;
            if f.shape() != [h, w] {
                return Err(Error::Data(format!(
                    "{}: fov size {:?} does not match image {h}x{w}",
                    p.display(),
                    f.shape()
                )));
            }
            Some(f)
        }
        None => None,
    };

    let mut image = resize_bilinear(&image.view(), target, target);
    normalize_image(&mut image);
    let mask = resize_nearest_u8_2d(&mask.view(), target, target).insert_axis(Axis(0));
    let fov = fov.map(|f| resize_nearest_u8_2d(&f.view(), target, target));
    let sample = Sample {
        image,
        mask,
        fov,
        meta: SampleMeta {
            id: paths
                .image
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("sample")
                .to_string(),
            original_size: (h, w),
            ..Default::default()
        },
    };
    sample.validate()?;
    Ok(sample)
}

/// File pair plus disc geometry of one disc/cup sample.
#[derive(Debug, Clone)]
pub struct DiscPaths {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub center: (f64, f64),
    pub radius: Option<f64>,
}

/// Scan a disc/cup layout: `<root>/{images,masks}` and `centers.csv`.
pub fn scan_disc_layout(root: &Path) -> Result<Vec<DiscPaths>> {
    let csv_path = root.join("centers.csv");
    let text = std::fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 3 {
            return Err(Error::Data(format!(
                "centers.csv line {}: expected filename,cx,cy[,radius]",
                ln + 1
            )));
        }
        // Tolerate a header row.
        if ln == 0 && fields[1].parse::<f64>().is_err() {
            continue;
        }
        let cx: f64 = fields[1]
            .parse()
            .map_err(|_| Error::Data(format!("centers.csv line {}: bad cx", ln + 1)))?;
        let cy: f64 = fields[2]
            .parse()
            .map_err(|_| Error::Data(format!("centers.csv line {}: bad cy", ln + 1)))?;
        let radius = match fields.get(3) {
            Some(r) if !r.is_empty() => Some(
                r.parse::<f64>()
                    .map_err(|_| Error::Data(format!("centers.csv line {}: bad radius", ln + 1)))?,
            ),
            _ => None,
        };
        out.push(DiscPaths {
            image: root.join("images").join(fields[0]),
            mask: root.join("masks").join(fields[0]),
            center: (cx, cy),
            radius,
        });
    }
    if out.is_empty() {
        return Err(Error::Data(format!(
            "centers.csv at {} lists no samples",
            csv_path.display()
        )));
    }
    Ok(out)
}

/// Load one full-frame disc/cup sample (no crop yet).
pub fn load_disc_sample(paths: &DiscPaths) -> Result<Sample> {
    let mut image = load_image_rgb(&paths.image)?;
    let mask = load_mask_trimap(&paths.mask)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if mask.shape()[1..] != [h, w] {
        return Err(Error::Data(format!(
            "{}: mask size {:?} does not match image {h}x{w}",
            paths.mask.display(),
            mask.shape()
        )));
    }
    normalize_image(&mut image);
    let sample = Sample {
        image,
        mask,
        fov: None,
        meta: SampleMeta {
            id: paths
                .image
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("sample")
                .to_string(),
            original_size: (h, w),
            disc_center: Some(paths.center),
            disc_radius: paths.radius,
            ..Default::default()
        },
    };
    sample.validate()?;
    Ok(sample)
}

/// Where the disc bounding box comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropSource {
    /// Prefer the annotation bounding box, fall back to center + radius
    /// (training-time behavior).
    AnnotationOrCenter,
    /// Prefer the configured center + radius, fall back to the annotation
    /// (inference-time behavior: centers come from a supplied list).
    CenterOrAnnotation,
}

/// Crop the optic-disc region and resize to `out_size` squared.
///
/// The bounding box (from `source`) is expanded by `margin_px` on every
/// side and clamped to the image bounds (no padding).
pub fn crop_disc_region(sample: &Sample, margin_px: usize, out_size: usize) -> Result<Sample> {
    crop_disc_region_with(sample, margin_px, out_size, CropSource::AnnotationOrCenter)
}

fn annotation_bbox(sample: &Sample) -> Option<(usize, usize, usize, usize)> {
    let (h, w) = (sample.image.shape()[1], sample.image.shape()[2]);
    let disc = sample.mask.index_axis(Axis(0), 0);
    let mut bbox: Option<(usize, usize, usize, usize)> = None; // y0, y1, x0, x1 inclusive
    for y in 0..h {
        for x in 0..w {
            if disc[[y, x]] > 0 {
                let b = bbox.get_or_insert((y, y, x, x));
                b.0 = b.0.min(y);
                b.1 = b.1.max(y);
                b.2 = b.2.min(x);
                b.3 = b.3.max(x);
            }
        }
    }
    bbox
}

fn center_bbox(sample: &Sample) -> Result<Option<(usize, usize, usize, usize)>> {
    let (h, w) = (sample.image.shape()[1], sample.image.shape()[2]);
    let (Some((cx, cy)), Some(r)) = (sample.meta.disc_center, sample.meta.disc_radius) else {
        return Ok(None);
    };
    if cx < 0.0 || cy < 0.0 || cx >= w as f64 || cy >= h as f64 {
        return Err(Error::Data(format!(
            "sample {}: disc center ({cx}, {cy}) outside {h}x{w} image",
            sample.meta.id
        )));
    }
    Ok(Some((
        (cy - r).max(0.0) as usize,
        ((cy + r) as usize).min(h - 1),
        (cx - r).max(0.0) as usize,
        ((cx + r) as usize).min(w - 1),
    )))
}

pub fn crop_disc_region_with(
    sample: &Sample,
    margin_px: usize,
    out_size: usize,
    source: CropSource,
) -> Result<Sample> {
    let (h, w) = (sample.image.shape()[1], sample.image.shape()[2]);
    let bbox = match source {
        CropSource::AnnotationOrCenter => match annotation_bbox(sample) {
            Some(b) => Some(b),
            None => center_bbox(sample)?,
        },
        CropSource::CenterOrAnnotation => match center_bbox(sample)? {
            Some(b) => Some(b),
            None => annotation_bbox(sample),
        },
    };
    let bbox = bbox.ok_or_else(|| {
        Error::Data(format!(
            "sample {}: empty disc annotation and no configured center",
            sample.meta.id
        ))
    })?;

    let y0 = bbox.0.saturating_sub(margin_px);
    let y1 = (bbox.1 + margin_px).min(h - 1);
    let x0 = bbox.2.saturating_sub(margin_px);
    let x1 = (bbox.3 + margin_px).min(w - 1);
    let rect = CropRect {
        y0,
        x0,
        h: y1 - y0 + 1,
        w: x1 - x0 + 1,
    };

    let image_crop = sample
        .image
        .slice(ndarray::s![.., y0..=y1, x0..=x1])
        .to_owned();
    let mask_crop = sample
        .mask
        .slice(ndarray::s![.., y0..=y1, x0..=x1])
        .to_owned();
    let mut image = resize_bilinear(&image_crop.view(), out_size, out_size);
    normalize_image(&mut image);
    let mask = resize_nearest_u8_3d(&mask_crop.view(), out_size, out_size);

    let mut meta = sample.meta.clone();
    meta.crop = Some(rect);
    Ok(Sample {
        image,
        mask,
        fov: None,
        meta,
    })
}

/// Paste a cropped-frame mask back into the full frame described by `rect`.
pub fn paste_crop_mask(
    mask: &Array3<u8>,
    rect: CropRect,
    full_h: usize,
    full_w: usize,
) -> Array3<u8> {
    let k = mask.shape()[0];
    let restored = resize_nearest_u8_3d(&mask.view(), rect.h, rect.w);
    let mut out = Array3::<u8>::zeros((k, full_h, full_w));
    out.slice_mut(ndarray::s![
        ..,
        rect.y0..rect.y0 + rect.h,
        rect.x0..rect.x0 + rect.w
    ])
    .assign(&restored);
    out
}
