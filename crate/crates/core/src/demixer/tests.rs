use ndarray::{arr2, Array4, Ix4};

use super::*;
use crate::autodiff::Tape;
use crate::losses::Reduction;
use crate::nn::{rand_uniform, randn};
use crate::rng::stream_rng;

fn extractor(width: usize) -> (ParamStore, TextureExtractor) {
    let mut store = ParamStore::new();
    let mut rng = stream_rng(1, "init.extractor");
    let ex = TextureExtractor::new(&mut store, &mut rng, "extractor", 3, width);
    (store, ex)
}

#[test]
fn extract_texture_preserves_shape() {
    let (mut store, ex) = extractor(6);
    let mut tape = Tape::new();
    let x = tape.leaf(rand_uniform(&mut stream_rng(2, "img"), &[2, 3, 12, 10]), false);
    let (t, feats) = ex.forward(&mut tape, &mut store, x).unwrap();
    assert_eq!(tape.value(t).shape(), &[2, 3, 12, 10]);
    assert_eq!(tape.value(feats).shape(), &[2, 6, 12, 10]);
    assert!(tape.value(t).iter().all(|v| v.is_finite()));
}

#[test]
fn extract_texture_rejects_tiny_input() {
    let (mut store, ex) = extractor(4);
    let mut tape = Tape::new();
    let x = tape.leaf(rand_uniform(&mut stream_rng(2, "img"), &[1, 3, 2, 8]), false);
    assert!(ex.forward(&mut tape, &mut store, x).is_err());
}

#[test]
fn zero_network_emits_zero_texture() {
    let (mut store, ex) = extractor(4);
    store.zero_all();
    let mut tape = Tape::new();
    let img = rand_uniform(&mut stream_rng(3, "img"), &[1, 3, 8, 8]);
    let x = tape.leaf(img.clone(), false);
    let (t, _) = ex.forward(&mut tape, &mut store, x).unwrap();
    assert!(tape.value(t).iter().all(|&v| v == 0.0));
    // S = I - T = I exactly.
    let s = compute_structure(
        &img.view().into_dimensionality::<Ix4>().unwrap(),
        &tape.value(t).view().into_dimensionality::<Ix4>().unwrap(),
    )
    .unwrap();
    assert_eq!(s.into_dyn(), img);
}

#[test]
fn compute_structure_cases() {
    let i = arr2(&[[1.0]]).into_shape_with_order((1, 1, 1, 1)).unwrap();
    let t = arr2(&[[0.3]]).into_shape_with_order((1, 1, 1, 1)).unwrap();
    let s = compute_structure(&i.view(), &t.view()).unwrap();
    assert_eq!(s[[0, 0, 0, 0]], 0.7);

    let bad = Array4::<f64>::zeros((1, 1, 2, 2));
    assert!(compute_structure(&i.view(), &bad.view()).is_err());
}

#[test]
fn reconstruction_is_exact_bitwise() {
    let (mut store, ex) = extractor(6);
    for trial in 0..10 {
        let mut img = rand_uniform(&mut stream_rng(trial, "recon"), &[1, 3, 9, 11]);
        quantize_to_grid(&mut img);
        let mut tape = Tape::new();
        let x = tape.leaf(img.clone(), false);
        let (t, _) = ex.forward(&mut tape, &mut store, x).unwrap();
        let s = tape.sub(x, t);
        let recon = tape.add(s, t);
        // (I - T) + T must reproduce I with zero ulp error.
        let diff = tape.value(recon) - &img;
        assert!(diff.iter().all(|&v| v == 0.0), "trial {trial}");
    }
}

#[test]
fn texture_block_zero_input_zero_bias() {
    let mut store = ParamStore::new();
    let mut rng = stream_rng(4, "init.block");
    let block = TextureBlock::new(&mut store, &mut rng, "texture_block", 5, 8);
    let mut tape = Tape::new();
    let feats = tape.leaf(Array4::<f64>::zeros((1, 5, 6, 6)).into_dyn(), false);
    let e = block.forward(&mut tape, &mut store, feats, true).unwrap();
    assert_eq!(tape.value(e).shape(), &[1, 1, 6, 6]);
    assert!(tape.value(e).iter().all(|&v| v == 0.0));
}

#[test]
fn texture_block_preserves_spatial_size() {
    let mut store = ParamStore::new();
    let mut rng = stream_rng(5, "init.block");
    let block = TextureBlock::new(&mut store, &mut rng, "texture_block", 4, 8);
    let mut tape = Tape::new();
    let feats = tape.leaf(randn(&mut stream_rng(6, "f"), &[2, 4, 13, 7]), false);
    let e = block.forward(&mut tape, &mut store, feats, true).unwrap();
    assert_eq!(tape.value(e).shape(), &[2, 1, 13, 7]);
}

#[test]
fn adaptive_norm_corner_cases() {
    let mut store = ParamStore::new();
    let norm = AdaptiveNorm::new(&mut store, "norm", 3);
    let x = randn(&mut stream_rng(7, "an"), &[2, 3, 4, 4]);

    let run = |store: &mut ParamStore, a: f64, b: f64, x: &ndarray::ArrayD<f64>| {
        store.value_mut(norm.a)[[0]] = a;
        store.value_mut(norm.b)[[0]] = b;
        let mut tape = Tape::new();
        store.begin_step();
        let xv = tape.leaf(x.clone(), false);
        let y = norm.forward(&mut tape, store, xv, true);
        tape.value(y).clone()
    };

    // a = 1, b = 0: identity.
    let ident = run(&mut store, 1.0, 0.0, &x);
    assert_eq!(ident, x);

    // a = 0, b = 1: plain batch normalization.
    let bn_only = run(&mut store, 0.0, 1.0, &x);
    let mean = x.mean().unwrap();
    assert!(bn_only.mean().unwrap().abs() < 1e-12 || mean.abs() > 0.0);

    // a = b = 0.5: the elementwise average of the two corners.
    let blend = run(&mut store, 0.5, 0.5, &x);
    let want = (&ident + &bn_only) * 0.5;
    let max = (&blend - &want).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
    assert!(max < 1e-12, "blend deviates by {max}");
}

#[test]
fn extractor_is_translation_equivariant_interior() {
    let (mut store, ex) = extractor(4);
    // Two 128x128 crops of one 136x136 image, offset by (8, 8). Points at
    // least 16 px inside BOTH crops see only shared pixels (receptive
    // radius 10 < 16), so the outputs must agree there.
    let big = rand_uniform(&mut stream_rng(8, "equiv"), &[1, 3, 136, 136]);
    let big4 = big.view().into_dimensionality::<Ix4>().unwrap();
    let crop_a = big4.slice(ndarray::s![.., .., 0..128, 0..128]).to_owned();
    let crop_b = big4.slice(ndarray::s![.., .., 8..136, 8..136]).to_owned();

    let mut tape = Tape::new();
    let xa = tape.leaf(crop_a.into_dyn(), false);
    let (ta, _) = ex.forward(&mut tape, &mut store, xa).unwrap();
    let ta = tape.value(ta).clone();
    let mut tape = Tape::new();
    let xb = tape.leaf(crop_b.into_dyn(), false);
    let (tb, _) = ex.forward(&mut tape, &mut store, xb).unwrap();
    let tb = tape.value(tb).clone();

    let m = 16usize;
    // Index i in crop-a coords maps to i-8 in crop-b coords; require both
    // to sit at least `m` from their own borders.
    for c in 0..3 {
        for i in (m + 8)..(128 - m) {
            for j in (m + 8)..(128 - m) {
                let va = ta[[0, c, i, j]];
                let vb = tb[[0, c, i - 8, j - 8]];
                assert!(
                    (va - vb).abs() < 1e-12,
                    "mismatch at ({c},{i},{j}): {va} vs {vb}"
                );
            }
        }
    }
}

#[test]
fn texture_block_is_translation_equivariant_in_eval() {
    let mut store = ParamStore::new();
    let mut rng = stream_rng(9, "init.block");
    let block = TextureBlock::new(&mut store, &mut rng, "texture_block", 3, 6);
    let big = randn(&mut stream_rng(10, "equivb"), &[1, 3, 64, 64]);
    let big4 = big.view().into_dimensionality::<Ix4>().unwrap();
    let crop_a = big4.slice(ndarray::s![.., .., 0..56, 0..56]).to_owned();
    let crop_b = big4.slice(ndarray::s![.., .., 8..64, 8..64]).to_owned();

    let mut tape = Tape::new();
    let xa = tape.leaf(crop_a.into_dyn(), false);
    let ea = block.forward(&mut tape, &mut store, xa, false).unwrap();
    let ea = tape.value(ea).clone();
    let mut tape = Tape::new();
    let xb = tape.leaf(crop_b.into_dyn(), false);
    let eb = block.forward(&mut tape, &mut store, xb, false).unwrap();
    let eb = tape.value(eb).clone();

    let m = 16usize;
    for i in (m + 8)..(56 - m) {
        for j in (m + 8)..(56 - m) {
            let va = ea[[0, 0, i, j]];
            let vb = eb[[0, 0, i - 8, j - 8]];
            assert!((va - vb).abs() < 1e-12, "mismatch at ({i},{j})");
        }
    }
}

#[test]
fn demixing_losses_reach_every_extractor_parameter() {
    let (mut store, ex) = extractor(4);
    let mut tape = Tape::new();
    store.begin_step();
    let img = rand_uniform(&mut stream_rng(11, "gf"), &[1, 3, 10, 10]);
    let x = tape.leaf(img, false);
    let (t, feats) = ex.forward(&mut tape, &mut store, x).unwrap();
    let s = tape.sub(x, t);
    let l_s = tape.tv_loss(s, Reduction::Sum);
    let l_t = tape.l1_loss(t, Reduction::Sum);
    let loss = tape.add(l_s, l_t);
    let _ = feats;
    let grads = tape.backward(loss);
    for (pid, var) in store.bound() {
        let g = grads
            .get(var)
            .unwrap_or_else(|| panic!("no grad for {}", store.name(pid)));
        let norm: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm > 0.0, "zero grad for {}", store.name(pid));
    }
}
