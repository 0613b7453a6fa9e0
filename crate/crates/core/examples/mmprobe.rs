//! Quick gemm throughput probe (dev tool).
use ndarray::Axis;
use rayon::prelude::*;
use std::time::Instant;

fn main() {
    println!("rayon threads: {}", rayon::current_num_threads());
    let (m, k, n) = (64usize, 576usize, 16384usize);
    let a = ndarray::Array2::<f64>::from_elem((m, k), 0.5);
    let b = ndarray::Array2::<f64>::from_elem((k, n), 0.25);
    let mut out = ndarray::Array2::<f64>::zeros((m, n));
    ndarray::linalg::general_mat_mul(1.0, &a.view(), &b.view(), 0.0, &mut out.view_mut());
    let t0 = Instant::now();
    for _ in 0..10 {
        ndarray::linalg::general_mat_mul(1.0, &a.view(), &b.view(), 0.0, &mut out.view_mut());
    }
    let serial = t0.elapsed().as_secs_f64() / 10.0;
    println!(
        "serial: {:.1} ms -> {:.2} GFLOP/s",
        serial * 1e3,
        2.0 * (m * k * n) as f64 / serial / 1e9
    );
    let chunk = n.div_ceil(4).max(32);
    let t0 = Instant::now();
    for _ in 0..10 {
        out.axis_chunks_iter_mut(Axis(1), chunk)
            .into_par_iter()
            .zip(b.axis_chunks_iter(Axis(1), chunk).into_par_iter())
            .for_each(|(mut oc, bc)| {
                ndarray::linalg::general_mat_mul(1.0, &a.view(), &bc, 0.0, &mut oc);
            });
    }
    let par = t0.elapsed().as_secs_f64() / 10.0;
    println!(
        "par: {:.1} ms -> {:.2} GFLOP/s (speedup {:.2}x)",
        par * 1e3,
        2.0 * (m * k * n) as f64 / par / 1e9,
        serial / par
    );
}
