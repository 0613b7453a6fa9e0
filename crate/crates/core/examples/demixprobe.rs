//! Demixing-quality probe on a trained checkpoint (dev tool).
use ndarray::{Array2, Axis};
use stdnet_core::data::synth::{synth_generate, Split, SynthConfig};
use stdnet_core::pipeline::{infer_decomposition, infer_e_map, load_model};

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b.iter()) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va.sqrt() * vb.sqrt()).max(1e-300)
}

fn boundary(mask: &ndarray::ArrayView2<u8>) -> Array2<f64> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let v = mask[[y, x]];
            let edge = (y > 0 && mask[[y - 1, x]] != v)
                || (y + 1 < h && mask[[y + 1, x]] != v)
                || (x > 0 && mask[[y, x - 1]] != v)
                || (x + 1 < w && mask[[y, x + 1]] != v);
            out[[y, x]] = f64::from(edge);
        }
    }
    out
}

fn main() {
    let ckpt = std::env::args().nth(1).expect("usage: demixprobe <ckpt>");
    let (mut model, _) = load_model(std::path::Path::new(&ckpt)).unwrap();
    let base = SynthConfig { canvas: 128, seed: 555, ..Default::default() };
    let smooth_cfg = SynthConfig { noise_amplitude: 0.0, ..base.clone() };
    let smooth = synth_generate(&smooth_cfg, Split::Test, 8).unwrap();
    let noisy = synth_generate(&base, Split::Test, 8).unwrap();

    let mean_abs_t = |model: &mut _, samples: &[stdnet_core::data::Sample]| {
        let mut acc = 0.0;
        let mut n = 0;
        for s in samples {
            let d = infer_decomposition(model, &s.image).unwrap();
            acc += d.texture.iter().map(|v| v.abs()).sum::<f64>();
            n += d.texture.len();
        }
        acc / n as f64
    };
    let ts = mean_abs_t(&mut model, &smooth);
    let tn = mean_abs_t(&mut model, &noisy);
    println!("mean |T| smooth: {ts:.5}  noisy: {tn:.5}  (smooth < noisy: {})", ts < tn);

    let (mut ce, mut ct) = (0.0, 0.0);
    for s in &noisy {
        let b = boundary(&s.mask.index_axis(Axis(0), 0));
        let d = infer_decomposition(&mut model, &s.image).unwrap();
        let e = infer_e_map(&mut model, &s.image).unwrap().unwrap();
        let w = b.shape()[1];
        let t_mag: Vec<f64> = (0..b.len())
            .map(|f| (0..3).map(|c| d.texture[[0, c, f / w, f % w]].abs()).sum())
            .collect();
        let e_mag: Vec<f64> = e.iter().map(|v| v.abs()).collect();
        let bv: Vec<f64> = b.iter().copied().collect();
        ce += pearson(&e_mag, &bv) / noisy.len() as f64;
        ct += pearson(&t_mag, &bv) / noisy.len() as f64;
    }
    println!("boundary corr: E {ce:.4}  |T| {ct:.4}  (E > T: {})", ce > ct);
}
