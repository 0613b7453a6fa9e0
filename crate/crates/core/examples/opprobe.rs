//! Per-op timing probe (dev tool).
use std::time::Instant;
use stdnet_core::autodiff::Tape;
use stdnet_core::nn::{rand_uniform, randn};
use stdnet_core::rng::stream_rng;

fn time<F: FnMut()>(name: &str, mut f: F) {
    let t0 = Instant::now();
    let reps = 20;
    for _ in 0..reps { f(); }
    println!("{name}: {:.2} ms", t0.elapsed().as_secs_f64() * 1e3 / reps as f64);
}

fn main() {
    let mut rng = stream_rng(1, "probe");
    let x = rand_uniform(&mut rng, &[2, 8, 128, 128]);
    let w = randn(&mut rng, &[8, 8, 3, 3]);
    let b = randn(&mut rng, &[8]);
    let g = ndarray::Array1::<f64>::ones(8).into_dyn();
    let be = ndarray::Array1::<f64>::zeros(8).into_dyn();

    time("conv fwd 8->8 @128^2 x2", || {
        let mut t = Tape::new();
        let xv = t.leaf(x.clone(), false);
        let wv = t.leaf(w.clone(), false);
        let bv = t.leaf(b.clone(), false);
        let _ = t.conv2d(xv, wv, Some(bv), 1);
    });
    time("conv fwd+bwd", || {
        let mut t = Tape::new();
        let xv = t.leaf(x.clone(), true);
        let wv = t.leaf(w.clone(), true);
        let bv = t.leaf(b.clone(), true);
        let y = t.conv2d(xv, wv, Some(bv), 1);
        let s = t.sum_all(y);
        let _ = t.backward(s);
    });
    time("bn train fwd+bwd", || {
        let mut t = Tape::new();
        let xv = t.leaf(x.clone(), true);
        let gv = t.leaf(g.clone(), true);
        let bv = t.leaf(be.clone(), true);
        let (y, _) = t.batch_norm_train(xv, gv, bv, 1e-5);
        let s = t.sum_all(y);
        let _ = t.backward(s);
    });
    time("relu fwd+bwd", || {
        let mut t = Tape::new();
        let xv = t.leaf(x.clone(), true);
        let y = t.leaky_relu(xv, 0.0);
        let s = t.sum_all(y);
        let _ = t.backward(s);
    });
    time("sigmoid fwd+bwd", || {
        let mut t = Tape::new();
        let xv = t.leaf(x.clone(), true);
        let y = t.sigmoid(xv);
        let s = t.sum_all(y);
        let _ = t.backward(s);
    });
    time("maxpool fwd+bwd", || {
        let mut t = Tape::new();
        let xv = t.leaf(x.clone(), true);
        let y = t.max_pool2(xv);
        let s = t.sum_all(y);
        let _ = t.backward(s);
    });
    time("avgpool fwd+bwd", || {
        let mut t = Tape::new();
        let xv = t.leaf(x.clone(), true);
        let y = t.avg_pool2(xv);
        let s = t.sum_all(y);
        let _ = t.backward(s);
    });
    let xs = rand_uniform(&mut rng, &[2, 8, 64, 64]);
    time("upsample2 fwd+bwd (64->128)", || {
        let mut t = Tape::new();
        let xv = t.leaf(xs.clone(), true);
        let y = t.upsample_bilinear2(xv);
        let s = t.sum_all(y);
        let _ = t.backward(s);
    });
    time("concat fwd+bwd", || {
        let mut t = Tape::new();
        let a = t.leaf(x.clone(), true);
        let b2 = t.leaf(x.clone(), true);
        let y = t.concat_channels(&[a, b2]);
        let s = t.sum_all(y);
        let _ = t.backward(s);
    });
    time("quantize fwd+bwd", || {
        let mut t = Tape::new();
        let a = t.leaf(x.clone(), true);
        let y = t.quantize(a, 4294967296.0);
        let s = t.sum_all(y);
        let _ = t.backward(s);
    });
    let x3 = rand_uniform(&mut rng, &[2, 3, 128, 128]);
    time("tv fwd+bwd @3ch", || {
        let mut t = Tape::new();
        let a = t.leaf(x3.clone(), true);
        let y = t.tv_loss(a, stdnet_core::losses::Reduction::Sum);
        let _ = t.backward(y);
    });
}
