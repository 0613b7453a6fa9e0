use ndarray::{Array2, Array3, Axis};
use tempfile::TempDir;

use super::augment::{apply, augment, AugmentOps};
use super::loader::*;
use super::polar::*;
use super::synth::*;
use super::*;
use crate::rng::stream_rng;

#[test]
fn synth_is_deterministic_per_seed() {
    let cfg = SynthConfig {
        canvas: 48,
        seed: 7,
        ..Default::default()
    };
    let a = synth_generate(&cfg, Split::Train, 3).unwrap();
    let b = synth_generate(&cfg, Split::Train, 3).unwrap();
    for (x, y) in a.iter().zip(b.iter()) {
        assert_eq!(x.image, y.image);
        assert_eq!(x.mask, y.mask);
        assert_eq!(x.fov, y.fov);
    }
    let c = synth_generate(&cfg, Split::Test, 3).unwrap();
    assert_ne!(a[0].image, c[0].image, "splits draw distinct streams");
}

#[test]
fn synth_disc_masks_are_nested() {
    let cfg = SynthConfig {
        family: SynthFamily::DiscCup,
        canvas: 64,
        ..Default::default()
    };
    for s in synth_generate(&cfg, Split::Train, 5).unwrap() {
        let disc = s.mask.index_axis(Axis(0), 0);
        let cup = s.mask.index_axis(Axis(0), 1);
        assert!(cup.iter().zip(disc.iter()).all(|(&c, &d)| c <= d));
        assert!(disc.iter().any(|&d| d > 0));
        assert!(cup.iter().any(|&c| c > 0));
    }
}

#[test]
fn synth_rejects_invalid_ranges() {
    let mut cfg = SynthConfig::default();
    cfg.cup_ratio = (0.8, 1.1);
    assert!(cfg.validate().is_err());

    let mut cfg = SynthConfig::default();
    cfg.vessel_width = (3.0, 1.0);
    assert!(cfg.validate().is_err());

    let mut cfg = SynthConfig::default();
    cfg.noise_amplitude = -0.1;
    assert!(cfg.validate().is_err());
}

#[test]
fn materialized_vessel_layout_loads_back() {
    let dir = TempDir::new().unwrap();
    let cfg = SynthConfig {
        canvas: 48,
        n_train: 2,
        n_test: 1,
        seed: 3,
        ..Default::default()
    };
    materialize(&cfg, dir.path()).unwrap();
    let paths = scan_vessel_layout(dir.path(), Split::Train).unwrap();
    assert_eq!(paths.len(), 2);
    let sample = load_vessel_sample(&paths[0], 48).unwrap();
    sample.validate().unwrap();
    assert_eq!(sample.image.shape(), &[3, 48, 48]);
    assert_eq!(sample.mask.shape(), &[1, 48, 48]);
    assert!(sample.fov.is_some());
    // The stored image is 8-bit; loading must reproduce the generated
    // labels exactly and the image to within quantization.
    let generated = synth_generate(&cfg, Split::Train, 2).unwrap();
    assert_eq!(sample.mask, generated[0].mask);
    let maxdiff = (&sample.image - &generated[0].image)
        .mapv(f64::abs)
        .iter()
        .cloned()
        .fold(0.0, f64::max);
    assert!(maxdiff <= 0.5 / 255.0 + 1e-9, "image deviates by {maxdiff}");
}

#[test]
fn vessel_loader_rejects_size_mismatch() {
    let dir = TempDir::new().unwrap();
    let base = dir.path().join("training");
    std::fs::create_dir_all(base.join("images")).unwrap();
    std::fs::create_dir_all(base.join("1st_manual")).unwrap();
    let img = Array3::<f64>::from_elem((3, 16, 16), 0.5);
    save_rgb_png(&base.join("images/01_training.png"), &img.view()).unwrap();
    let mask = Array2::<u8>::ones((8, 8));
    save_mask_png(&base.join("1st_manual/01_manual1.png"), &mask.view()).unwrap();
    let paths = scan_vessel_layout(dir.path(), Split::Train).unwrap();
    assert!(load_vessel_sample(&paths[0], 16).is_err());
}

#[test]
fn materialized_disc_layout_loads_back() {
    let dir = TempDir::new().unwrap();
    let cfg = SynthConfig {
        family: SynthFamily::DiscCup,
        canvas: 64,
        n_train: 2,
        n_test: 1,
        seed: 5,
        ..Default::default()
    };
    materialize(&cfg, dir.path()).unwrap();
    let entries = scan_disc_layout(&dir.path().join("training")).unwrap();
    assert_eq!(entries.len(), 2);
    let sample = load_disc_sample(&entries[0]).unwrap();
    assert_eq!(sample.mask.shape(), &[2, 64, 64]);
    assert!(sample.meta.disc_center.is_some());
    let generated = synth_generate(&cfg, Split::Train, 2).unwrap();
    assert_eq!(sample.mask, generated[0].mask);
}

#[test]
fn crop_disc_region_follows_margin_rule() {
    // Disc annotation exactly covering rows/cols 100..=200 of a 512 frame.
    let mut mask = Array3::<u8>::zeros((2, 512, 512));
    for y in 100..=200 {
        for x in 100..=200 {
            mask[[0, y, x]] = 1;
            mask[[1, y, x]] = u8::from((120..=180).contains(&y) && (120..=180).contains(&x));
        }
    }
    let sample = Sample {
        image: Array3::<f64>::from_elem((3, 512, 512), 0.4),
        mask,
        fov: None,
        meta: SampleMeta {
            id: "crop".into(),
            original_size: (512, 512),
            ..Default::default()
        },
    };
    let cropped = crop_disc_region(&sample, 50, 256).unwrap();
    let rect = cropped.meta.crop.unwrap();
    assert_eq!((rect.y0, rect.x0, rect.h, rect.w), (50, 50, 201, 201));
    assert_eq!(cropped.image.shape(), &[3, 256, 256]);
    assert_eq!(cropped.mask.shape(), &[2, 256, 256]);

    // Zero margin: the tight bounding box.
    let tight = crop_disc_region(&sample, 0, 256).unwrap();
    let rect = tight.meta.crop.unwrap();
    assert_eq!((rect.y0, rect.x0, rect.h, rect.w), (100, 100, 101, 101));

    // Nesting survives crop + nearest resize.
    let disc = tight.mask.index_axis(Axis(0), 0);
    let cup = tight.mask.index_axis(Axis(0), 1);
    assert!(cup.iter().zip(disc.iter()).all(|(&c, &d)| c <= d));
}

#[test]
fn crop_disc_region_clamps_at_edges() {
    let mut mask = Array3::<u8>::zeros((2, 64, 64));
    for y in 0..=20 {
        for x in 0..=20 {
            mask[[0, y, x]] = 1;
        }
    }
    let sample = Sample {
        image: Array3::<f64>::from_elem((3, 64, 64), 0.4),
        mask,
        fov: None,
        meta: SampleMeta::default(),
    };
    let cropped = crop_disc_region(&sample, 50, 64).unwrap();
    let rect = cropped.meta.crop.unwrap();
    // Clamped to the frame, no padding.
    assert_eq!((rect.y0, rect.x0), (0, 0));
    assert_eq!((rect.h, rect.w), (64, 64));
}

#[test]
fn crop_disc_region_needs_annotation_or_center() {
    let sample = Sample {
        image: Array3::<f64>::from_elem((3, 32, 32), 0.4),
        mask: Array3::<u8>::zeros((2, 32, 32)),
        fov: None,
        meta: SampleMeta::default(),
    };
    assert!(crop_disc_region(&sample, 10, 32).is_err());

    let mut with_center = sample.clone();
    with_center.meta.disc_center = Some((100.0, 100.0));
    with_center.meta.disc_radius = Some(5.0);
    assert!(crop_disc_region(&with_center, 10, 32).is_err(), "center outside");

    with_center.meta.disc_center = Some((16.0, 16.0));
    let ok = crop_disc_region(&with_center, 2, 32).unwrap();
    assert!(ok.meta.crop.is_some());
}

#[test]
fn polar_constant_maps_to_constant() {
    let img = Array3::<f64>::from_elem((1, 32, 32), 0.7);
    let polar = polar_transform(&img.view(), None, None).unwrap();
    assert!(polar.iter().all(|&v| (v - 0.7).abs() < 1e-12));
}

#[test]
fn polar_rings_become_bands() {
    // Concentric rings: value depends only on radius, so each polar row is
    // constant.
    let s = 64usize;
    let c = (s as f64 - 1.0) / 2.0;
    let mut img = Array3::<f64>::zeros((1, s, s));
    for y in 0..s {
        for x in 0..s {
            let r = ((y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt();
            img[[0, y, x]] = (r / 4.0).sin() * 0.5 + 0.5;
        }
    }
    let polar = polar_transform(&img.view(), None, None).unwrap();
    for ir in 0..s {
        let row = polar.slice(ndarray::s![0, ir, ..]);
        let mean = row.mean().unwrap();
        let spread = row
            .iter()
            .map(|v| (v - mean).abs())
            .fold(0.0f64, f64::max);
        assert!(spread < 0.02, "row {ir} spread {spread}");
    }
}

#[test]
fn inverse_of_bands_gives_rings() {
    let s = 64usize;
    let mut polar = Array3::<f64>::zeros((1, s, s));
    for ir in 0..s {
        let v = (ir as f64 / 6.0).sin() * 0.5 + 0.5;
        for ia in 0..s {
            polar[[0, ir, ia]] = v;
        }
    }
    let cart = inverse_polar(&polar.view(), None, None).unwrap();
    // Pixels at the same radius share a value.
    let c = (s as f64 - 1.0) / 2.0;
    let take = |y: usize, x: usize| cart[[0, y, x]];
    let r10_a = take((c as usize) + 10, c as usize);
    let r10_b = take(c as usize, (c as usize) + 10);
    assert!((r10_a - r10_b).abs() < 0.03, "{r10_a} vs {r10_b}");
}

#[test]
fn inverse_polar_zero_maps_to_zero() {
    let polar = Array3::<f64>::zeros((2, 24, 24));
    let cart = inverse_polar(&polar.view(), None, None).unwrap();
    assert!(cart.iter().all(|&v| v == 0.0));
}

#[test]
fn polar_rejects_non_square() {
    let img = Array3::<f64>::zeros((1, 16, 24));
    assert!(polar_transform(&img.view(), None, None).is_err());
    assert!(inverse_polar(&img.view(), None, None).is_err());
}

#[test]
fn polar_round_trip_reaches_30db_on_smooth_images() {
    // Smooth test image: heavily box-blurred noise.
    let s = 128usize;
    let mut rng = stream_rng(13, "polar.smooth");
    let mut img = crate::nn::rand_uniform(&mut rng, &[1, s, s])
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap();
    for _ in 0..6 {
        let mut blurred = img.clone();
        for y in 1..s - 1 {
            for x in 1..s - 1 {
                let mut acc = 0.0;
                for dy in 0..3 {
                    for dx in 0..3 {
                        acc += img[[0, y + dy - 1, x + dx - 1]];
                    }
                }
                blurred[[0, y, x]] = acc / 9.0;
            }
        }
        img = blurred;
    }

    let polar = polar_transform(&img.view(), None, None).unwrap();
    let back = inverse_polar(&polar.view(), None, None).unwrap();
    let c = (s as f64 - 1.0) / 2.0;
    let r_keep = 0.9 * s as f64 / 2.0;
    let psnr = psnr_within(&img.view(), &back.view(), 1.0, |y, x| {
        ((y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt() <= r_keep
    });
    assert!(psnr >= 30.0, "round-trip PSNR {psnr:.2} dB");
}

#[test]
fn augment_identity_and_involution() {
    let cfg = SynthConfig {
        canvas: 32,
        ..Default::default()
    };
    let sample = &synth_generate(&cfg, Split::Train, 1).unwrap()[0];

    let same = apply(sample, AugmentOps::identity());
    assert_eq!(same.image, sample.image);
    assert_eq!(same.mask, sample.mask);

    let h = AugmentOps {
        hflip: true,
        vflip: false,
        rot90: 0,
    };
    let twice = apply(&apply(sample, h), h);
    assert_eq!(twice.image, sample.image);
    assert_eq!(twice.mask, sample.mask);
}

#[test]
fn augment_keeps_image_and_mask_aligned() {
    // Landmark tracking: a single marked pixel moves identically in image
    // and mask for every sampled op.
    let mut image = Array3::<f64>::zeros((1, 8, 8));
    let mut mask = Array3::<u8>::zeros((1, 8, 8));
    image[[0, 2, 5]] = 1.0;
    mask[[0, 2, 5]] = 1;
    let sample = Sample {
        image,
        mask,
        fov: None,
        meta: SampleMeta::default(),
    };
    let mut rng = stream_rng(21, "aug");
    for _ in 0..16 {
        let out = augment(&sample, &mut rng);
        let img_pos: Vec<_> = out
            .image
            .indexed_iter()
            .filter(|(_, &v)| v > 0.5)
            .map(|(i, _)| i)
            .collect();
        let mask_pos: Vec<_> = out
            .mask
            .indexed_iter()
            .filter(|(_, &v)| v > 0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(img_pos, mask_pos);
        assert_eq!(img_pos.len(), 1);
    }
}

#[test]
fn resize_helpers_behave() {
    let img = Array3::<f64>::from_elem((2, 10, 14), 0.25);
    let out = resize_bilinear(&img.view(), 7, 9);
    assert_eq!(out.shape(), &[2, 7, 9]);
    assert!(out.iter().all(|&v| (v - 0.25).abs() < 1e-12));

    let mut m = Array2::<u8>::zeros((4, 4));
    m[[0, 0]] = 1;
    let up = resize_nearest_u8_2d(&m.view(), 8, 8);
    assert_eq!(up[[0, 0]], 1);
    assert_eq!(up[[1, 1]], 1);
    assert_eq!(up[[2, 2]], 0);
}
