//! Seeded synthetic data: curvilinear "vessel" images and nested disc/cup
//! images, both overlaid with band-limited texture noise.
//!
//! The vessel family stresses exactly the failure mode the demixing loss
//! targets: thin dark structures whose local statistics resemble the
//! additive high-frequency gratings, on top of a smooth background. Masks
//! are the exact generative shapes, and every sample is a pure function of
//! (seed, split, index).

use std::fmt;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{normalize_image, save_mask_png, save_rgb_png, save_trimap_png, Sample, SampleMeta};
use crate::error::{Error, Result};
use crate::rng::indexed_rng;

/// Dataset split selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "training",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SynthFamily {
    Vessel,
    DiscCup,
}

impl std::str::FromStr for SynthFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vessel" => Ok(SynthFamily::Vessel),
            "disc_cup" => Ok(SynthFamily::DiscCup),
            other => Err(Error::Config(format!(
                "unknown synth family {other:?} (expected vessel|disc_cup)"
            ))),
        }
    }
}

/// Generator parameters. Lengths are pixels, radii are fractions of the
/// canvas side, frequencies are cycles per pixel.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    pub family: SynthFamily,
    pub canvas: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub vessel_count: (usize, usize),
    pub vessel_width: (f64, f64),
    pub vessel_contrast: (f64, f64),
    pub noise_amplitude: f64,
    pub noise_freq: (f64, f64),
    pub noise_gratings: usize,
    pub disc_radius: (f64, f64),
    pub cup_ratio: (f64, f64),
    /// FOV disc radius as a fraction of the half-side; <= 0 disables the FOV.
    pub fov_radius: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            family: SynthFamily::Vessel,
            canvas: 128,
            n_train: 200,
            n_test: 50,
            vessel_count: (4, 8),
            vessel_width: (1.6, 3.4),
            vessel_contrast: (0.28, 0.5),
            noise_amplitude: 0.22,
            noise_freq: (0.18, 0.42),
            noise_gratings: 24,
            disc_radius: (0.18, 0.28),
            cup_ratio: (0.45, 0.75),
            fov_radius: 0.95,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = |name: &str, lo: f64, hi: f64| {
            if lo > hi || lo < 0.0 {
                Err(Error::Invalid(format!(
                    "synth config: {name} range ({lo}, {hi}) invalid"
                )))
            } else {
                Ok(())
            }
        };
        if self.canvas < 32 {
            return Err(Error::Invalid(format!(
                "synth config: canvas {} too small",
                self.canvas
            )));
        }
        if self.vessel_count.0 > self.vessel_count.1 || self.vessel_count.0 == 0 {
            return Err(Error::Invalid(format!(
                "synth config: vessel count range {:?} invalid",
                self.vessel_count
            )));
        }
        ordered("vessel_width", self.vessel_width.0, self.vessel_width.1)?;
        ordered("vessel_contrast", self.vessel_contrast.0, self.vessel_contrast.1)?;
        ordered("noise_freq", self.noise_freq.0, self.noise_freq.1)?;
        ordered("disc_radius", self.disc_radius.0, self.disc_radius.1)?;
        ordered("cup_ratio", self.cup_ratio.0, self.cup_ratio.1)?;
        if self.cup_ratio.1 >= 1.0 {
            return Err(Error::Invalid(
                "synth config: cup radius must stay below the disc radius".to_string(),
            ));
        }
        if self.noise_amplitude < 0.0 {
            return Err(Error::Invalid(
                "synth config: negative noise amplitude".to_string(),
            ));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.gen_range(range.0..range.1)
    }
}

/// Sum of a few random low-frequency gratings around a mid level.
fn smooth_background(rng: &mut ChaCha8Rng, s: usize) -> Array2<f64> {
    let mut field = Array2::<f64>::from_elem((s, s), 0.55);
    for _ in 0..3 {
        let amp = rng.gen_range(0.04..0.09);
        let freq = rng.gen_range(0.004..0.015);
        let phi = rng.gen_range(0.0..std::f64::consts::TAU);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let (c, sn) = (phi.cos(), phi.sin());
        for y in 0..s {
            for x in 0..s {
                let t = std::f64::consts::TAU * freq * (x as f64 * c + y as f64 * sn) + phase;
                field[[y, x]] += amp * t.sin();
            }
        }
    }
    field
}

/// Band-limited gratings with random orientation, frequency and phase.
fn texture_noise(rng: &mut ChaCha8Rng, s: usize, cfg: &SynthConfig) -> Array2<f64> {
    let mut field = Array2::<f64>::zeros((s, s));
    if cfg.noise_amplitude == 0.0 || cfg.noise_gratings == 0 {
        return field;
    }
    let norm = cfg.noise_amplitude / (cfg.noise_gratings as f64).sqrt();
    for _ in 0..cfg.noise_gratings {
        let amp = norm * rng.gen_range(0.7..1.3);
        let freq = uniform(rng, cfg.noise_freq);
        let phi = rng.gen_range(0.0..std::f64::consts::TAU);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let (c, sn) = (phi.cos(), phi.sin());
        for y in 0..s {
            for x in 0..s {
                let t = std::f64::consts::TAU * freq * (x as f64 * c + y as f64 * sn) + phase;
                field[[y, x]] += amp * t.sin();
            }
        }
    }
    field
}

/// Per-pixel distance to a cubic Bezier curve, evaluated by dense sampling
/// and local stamping. Only pixels within `reach` of the curve get finite
/// distances.
fn curve_distance(s: usize, pts: [(f64, f64); 4], reach: f64) -> Array2<f64> {
    let mut dist = Array2::<f64>::from_elem((s, s), f64::INFINITY);
    let steps = 4 * s;
    let r = reach.ceil() as isize + 1;
    for k in 0..=steps {
        let t = k as f64 / steps as f64;
        let u = 1.0 - t;
        let bx = u * u * u * pts[0].0
            + 3.0 * u * u * t * pts[1].0
            + 3.0 * u * t * t * pts[2].0
            + t * t * t * pts[3].0;
        let by = u * u * u * pts[0].1
            + 3.0 * u * u * t * pts[1].1
            + 3.0 * u * t * t * pts[2].1
            + t * t * t * pts[3].1;
        let (cx, cy) = (bx.round() as isize, by.round() as isize);
        for dy in -r..=r {
            for dx in -r..=r {
                let (y, x) = (cy + dy, cx + dx);
                if y < 0 || x < 0 || y >= s as isize || x >= s as isize {
                    continue;
                }
                let d = ((y as f64 - by).powi(2) + (x as f64 - bx).powi(2)).sqrt();
                let cell = &mut dist[[y as usize, x as usize]];
                if d < *cell {
                    *cell = d;
                }
            }
        }
    }
    dist
}

fn vessel_sample(cfg: &SynthConfig, split: Split, idx: usize) -> Sample {
    let s = cfg.canvas;
    let mut rng = indexed_rng(cfg.seed, &format!("synth.vessel.{split}"), idx as u64);

    let background = smooth_background(&mut rng, s);
    let mut channels = [
        background.mapv(|v| v + 0.12),
        background.clone(),
        background.mapv(|v| v - 0.18),
    ];

    let mut mask = Array2::<u8>::zeros((s, s));
    let n_vessels = rng.gen_range(cfg.vessel_count.0..=cfg.vessel_count.1);
    for _ in 0..n_vessels {
        let width = uniform(&mut rng, cfg.vessel_width);
        let contrast = uniform(&mut rng, cfg.vessel_contrast);
        let lo = -0.1 * s as f64;
        let hi = 1.1 * s as f64;
        let pts: [(f64, f64); 4] = std::array::from_fn(|_| {
            (rng.gen_range(lo..hi), rng.gen_range(lo..hi))
        });
        let dist = curve_distance(s, pts, width / 2.0 + 1.5);
        for y in 0..s {
            for x in 0..s {
                let d = dist[[y, x]];
                if !d.is_finite() {
                    continue;
                }
                // 1 px anti-aliased edge for the image, hard edge for the mask.
                let alpha = (width / 2.0 + 0.5 - d).clamp(0.0, 1.0);
                if alpha > 0.0 {
                    for ch in &mut channels {
                        ch[[y, x]] *= 1.0 - contrast * alpha;
                    }
                }
                if d <= width / 2.0 {
                    mask[[y, x]] = 1;
                }
            }
        }
    }

    for ch in &mut channels {
        let noise = texture_noise(&mut rng, s, cfg);
        *ch += &noise;
    }

    let fov = (cfg.fov_radius > 0.0).then(|| {
        let c = (s as f64 - 1.0) / 2.0;
        let r = cfg.fov_radius * s as f64 / 2.0;
        let mut fov = Array2::<u8>::zeros((s, s));
        for y in 0..s {
            for x in 0..s {
                let d = ((y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt();
                fov[[y, x]] = u8::from(d <= r);
            }
        }
        fov
    });

    // Fundus-style: black out and unlabel everything beyond the FOV.
    if let Some(fov) = &fov {
        for y in 0..s {
            for x in 0..s {
                if fov[[y, x]] == 0 {
                    for ch in &mut channels {
                        ch[[y, x]] *= 0.05;
                    }
                    mask[[y, x]] = 0;
                }
            }
        }
    }

    let mut image = Array3::<f64>::zeros((3, s, s));
    for (c, ch) in channels.iter().enumerate() {
        image.index_axis_mut(ndarray::Axis(0), c).assign(ch);
    }
    normalize_image(&mut image);

    Sample {
        image,
        mask: mask.insert_axis(ndarray::Axis(0)),
        fov,
        meta: SampleMeta {
            id: format!("{split}_{idx:03}"),
            original_size: (s, s),
            ..Default::default()
        },
    }
}

fn disc_cup_sample(cfg: &SynthConfig, split: Split, idx: usize) -> Sample {
    let s = cfg.canvas;
    let mut rng = indexed_rng(cfg.seed, &format!("synth.disc.{split}"), idx as u64);

    let background = smooth_background(&mut rng, s);
    let mut channels = [
        background.mapv(|v| v + 0.10),
        background.clone(),
        background.mapv(|v| v - 0.20),
    ];

    let jitter = s as f64 / 16.0;
    let cx = s as f64 / 2.0 + rng.gen_range(-jitter..jitter);
    let cy = s as f64 / 2.0 + rng.gen_range(-jitter..jitter);
    let r_disc = uniform(&mut rng, cfg.disc_radius) * s as f64;
    let r_cup = uniform(&mut rng, cfg.cup_ratio) * r_disc;
    let off_max = 0.5 * (r_disc - r_cup);
    let off = rng.gen_range(0.0..off_max.max(1e-9));
    let ang = rng.gen_range(0.0..std::f64::consts::TAU);
    let (ccx, ccy) = (cx + off * ang.cos(), cy + off * ang.sin());

    let mut mask = Array3::<u8>::zeros((2, s, s));
    for y in 0..s {
        for x in 0..s {
            let dd = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
            let dc = ((y as f64 - ccy).powi(2) + (x as f64 - ccx).powi(2)).sqrt();
            let disc_soft = (r_disc + 1.0 - dd).clamp(0.0, 2.0) / 2.0;
            let cup_soft = (r_cup + 1.0 - dc).clamp(0.0, 2.0) / 2.0;
            if disc_soft > 0.0 {
                for ch in &mut channels {
                    ch[[y, x]] += 0.20 * disc_soft;
                }
            }
            if cup_soft > 0.0 {
                for ch in &mut channels {
                    ch[[y, x]] += 0.14 * cup_soft;
                }
            }
            mask[[0, y, x]] = u8::from(dd <= r_disc);
            mask[[1, y, x]] = u8::from(dc <= r_cup);
        }
    }

    for ch in &mut channels {
        let noise = texture_noise(&mut rng, s, cfg);
        *ch += &noise;
    }

    let mut image = Array3::<f64>::zeros((3, s, s));
    for (c, ch) in channels.iter().enumerate() {
        image.index_axis_mut(ndarray::Axis(0), c).assign(ch);
    }
    normalize_image(&mut image);

    Sample {
        image,
        mask,
        fov: None,
        meta: SampleMeta {
            id: format!("{split}_{idx:03}"),
            original_size: (s, s),
            disc_center: Some((cx, cy)),
            disc_radius: Some(r_disc),
            ..Default::default()
        },
    }
}

/// Generate `n` samples of the configured family; deterministic in
/// (seed, split, index).
pub fn synth_generate(cfg: &SynthConfig, split: Split, n: usize) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let samples = (0..n)
        .map(|i| match cfg.family {
            SynthFamily::Vessel => vessel_sample(cfg, split, i),
            SynthFamily::DiscCup => disc_cup_sample(cfg, split, i),
        })
        .collect::<Vec<_>>();
    for s in &samples {
        s.validate()?;
    }
    Ok(samples)
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Materialize both splits to disk in the real-data layouts.
pub fn materialize(cfg: &SynthConfig, root: &Path) -> Result<()> {
    cfg.validate()?;
    for (split, n) in [(Split::Train, cfg.n_train), (Split::Test, cfg.n_test)] {
        let samples = synth_generate(cfg, split, n)?;
        match cfg.family {
            SynthFamily::Vessel => {
                let base = root.join(split.dir_name());
                let images = base.join("images");
                let manual = base.join("1st_manual");
                let fovs = base.join("mask");
                ensure_dir(&images)?;
                ensure_dir(&manual)?;
                ensure_dir(&fovs)?;
                for (i, s) in samples.iter().enumerate() {
                    let tag = split.dir_name();
                    let idx = i + 1;
                    save_rgb_png(&images.join(format!("{idx:03}_{tag}.png")), &s.image.view())?;
                    save_mask_png(
                        &manual.join(format!("{idx:03}_manual1.png")),
                        &s.mask.index_axis(ndarray::Axis(0), 0),
                    )?;
                    let fov = s
                        .fov
                        .clone()
                        .unwrap_or_else(|| Array2::<u8>::ones((cfg.canvas, cfg.canvas)));
                    save_mask_png(
                        &fovs.join(format!("{idx:03}_{tag}_mask.png")),
                        &fov.view(),
                    )?;
                }
            }
            SynthFamily::DiscCup => {
                let base = root.join(split.dir_name());
                let images = base.join("images");
                let masks = base.join("masks");
                ensure_dir(&images)?;
                ensure_dir(&masks)?;
                let csv_path = base.join("centers.csv");
                let mut csv = String::from("filename,cx,cy,radius\n");
                for (i, s) in samples.iter().enumerate() {
                    let name = format!("{:03}.png", i + 1);
                    save_rgb_png(&images.join(&name), &s.image.view())?;
                    save_trimap_png(&masks.join(&name), &s.mask.view())?;
                    let (cx, cy) = s.meta.disc_center.expect("disc sample has a center");
                    let r = s.meta.disc_radius.expect("disc sample has a radius");
                    csv.push_str(&format!("{name},{cx:.3},{cy:.3},{r:.3}\n"));
                }
                std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
            }
        }
    }
    Ok(())
}
