//! Stride-1 convolution via im2col and a deterministic parallel matmul.

use ndarray::{s, Array1, Array2, Array4, ArrayView2, ArrayView3, ArrayView4, ArrayViewMut3, Axis};
use rayon::prelude::*;

/// Deterministic parallel `a (m x k) . b (k x n)`.
///
/// The output is split into fixed row or column blocks and each block is
/// computed independently, so the per-element accumulation order over `k`
/// never depends on thread scheduling.
pub(crate) fn par_matmul(a: &ArrayView2<f64>, b: &ArrayView2<f64>, out: &mut Array2<f64>) {
    let (m, k) = (a.nrows(), a.ncols());
    let n = b.ncols();
    debug_assert_eq!(k, b.nrows());
    debug_assert_eq!((m, n), (out.nrows(), out.ncols()));

    let work = m * k * n;
    const MIN_PAR_WORK: usize = 1 << 18;
    if work < MIN_PAR_WORK || (n < 64 && m < 64) {
        ndarray::linalg::general_mat_mul(1.0, a, b, 0.0, out);
        return;
    }

    if n >= m {
        let chunk = n.div_ceil(4).max(32);
        out.axis_chunks_iter_mut(Axis(1), chunk)
            .into_par_iter()
            .zip(b.axis_chunks_iter(Axis(1), chunk).into_par_iter())
            .for_each(|(mut oc, bc)| {
                ndarray::linalg::general_mat_mul(1.0, a, &bc, 0.0, &mut oc);
            });
    } else {
        let chunk = m.div_ceil(4).max(32);
        out.axis_chunks_iter_mut(Axis(0), chunk)
            .into_par_iter()
            .zip(a.axis_chunks_iter(Axis(0), chunk).into_par_iter())
            .for_each(|(mut oc, ac)| {
                ndarray::linalg::general_mat_mul(1.0, &ac, b, 0.0, &mut oc);
            });
    }
}

/// Output spatial size for stride-1 convolution with symmetric padding.
pub(crate) fn out_size(h: usize, w: usize, kh: usize, kw: usize, pad: usize) -> (usize, usize) {
    (h + 2 * pad + 1 - kh, w + 2 * pad + 1 - kw)
}

/// Unfold one image (Cin, H, W) into (Cin*KH*KW, OH*OW) patch columns.
fn im2col(
    x: &ArrayView3<f64>,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut col = Array2::<f64>::zeros((cin * kh * kw, oh * ow));
    let xs = x.as_slice().expect("im2col: input not contiguous");
    let cs = col.as_slice_mut().unwrap();
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                // Valid output x-range for this kernel tap.
                let ox_lo = pad.saturating_sub(kx);
                let ox_hi = (w + pad - kx).min(ow);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in 0..oh {
                    let iy = oy + ky;
                    if iy < pad || iy >= h + pad {
                        continue;
                    }
                    let iy = iy - pad;
                    let src = c * h * w + iy * w + (ox_lo + kx - pad);
                    let dst = row * oh * ow + oy * ow + ox_lo;
                    let len = ox_hi - ox_lo;
                    cs[dst..dst + len].copy_from_slice(&xs[src..src + len]);
                }
            }
        }
    }
    col
}

/// Fold patch-column gradients back onto the input (transpose of `im2col`).
#[allow(clippy::too_many_arguments)]
fn col2im(
    dcol: &ArrayView2<f64>,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut ArrayViewMut3<'_, f64>,
) {
    let dxs = dx.as_slice_mut().expect("col2im: dx not contiguous");
    let ds = dcol.as_slice().expect("col2im: dcol not contiguous");
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let ox_lo = pad.saturating_sub(kx);
                let ox_hi = (w + pad - kx).min(ow);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in 0..oh {
                    let iy = oy + ky;
                    if iy < pad || iy >= h + pad {
                        continue;
                    }
                    let iy = iy - pad;
                    let dst = c * h * w + iy * w + (ox_lo + kx - pad);
                    let src = row * oh * ow + oy * ow + ox_lo;
                    for t in 0..(ox_hi - ox_lo) {
                        dxs[dst + t] += ds[src + t];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_fwd(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    b: Option<&Array1<f64>>,
    pad: usize,
) -> Array4<f64> {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, wcin, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(cin, wcin, "conv2d: channel mismatch");
    assert!(
        h + 2 * pad >= kh && wd + 2 * pad >= kw,
        "conv2d: input {}x{} smaller than kernel {}x{}",
        h,
        wd,
        kh,
        kw
    );
    let (oh, ow) = out_size(h, wd, kh, kw, pad);
    let w2 = w
        .to_shape((cout, cin * kh * kw))
        .expect("conv2d: weight reshape");

    let mut y = Array4::<f64>::zeros((n, cout, oh, ow));
    let run_image = |xi: ndarray::ArrayView3<f64>, mut yn: ndarray::ArrayViewMut3<f64>| {
        let col = im2col(&xi, kh, kw, pad, oh, ow);
        let mut out2 = Array2::<f64>::zeros((cout, oh * ow));
        par_matmul(&w2.view(), &col.view(), &mut out2);
        if let Some(bias) = b {
            for (co, mut row) in out2.outer_iter_mut().enumerate() {
                let bv = bias[co];
                row.mapv_inplace(|t| t + bv);
            }
        }
        yn.assign(&out2.into_shape_with_order((cout, oh, ow)).unwrap());
    };
    if n > 1 {
        y.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(x.axis_iter(Axis(0)).into_par_iter())
            .for_each(|(yn, xi)| run_image(xi, yn));
    } else {
        run_image(x.index_axis(Axis(0), 0), y.index_axis_mut(Axis(0), 0));
    }
    y
}

#[allow(clippy::type_complexity)]
pub(crate) fn conv2d_bwd(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    dy: &ArrayView4<f64>,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Array4<f64>>, Option<Array4<f64>>, Array1<f64>) {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (dy.shape()[2], dy.shape()[3]);
    let w2 = w
        .to_shape((cout, cin * kh * kw))
        .expect("conv2d_bwd: weight reshape");

    let mut db = Array1::<f64>::zeros(cout);
    for co in 0..cout {
        db[co] = dy.slice(s![.., co, .., ..]).sum();
    }

    let mut dx = need_dx.then(|| Array4::<f64>::zeros((n, cin, h, wd)));

    // Per-image work: input gradient scatter plus a weight-gradient
    // partial; partials are summed in batch order afterwards so the
    // result never depends on scheduling.
    let run_image = |ni: usize, dxn: Option<ndarray::ArrayViewMut3<f64>>| -> Option<Array2<f64>> {
        let dyn2 = dy
            .index_axis(Axis(0), ni)
            .to_shape((cout, oh * ow))
            .unwrap()
            .to_owned();
        if let Some(mut dxn) = dxn {
            let mut dcol = Array2::<f64>::zeros((cin * kh * kw, oh * ow));
            par_matmul(&w2.t(), &dyn2.view(), &mut dcol);
            col2im(&dcol.view(), cin, h, wd, kh, kw, pad, oh, ow, &mut dxn);
        }
        need_dw.then(|| {
            let col = im2col(&x.index_axis(Axis(0), ni), kh, kw, pad, oh, ow);
            let mut dwn = Array2::<f64>::zeros((cout, cin * kh * kw));
            par_matmul(&dyn2.view(), &col.t(), &mut dwn);
            dwn
        })
    };

    let partials: Vec<Option<Array2<f64>>> = match dx.as_mut() {
        Some(dx) if n > 1 => dx
            .axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .map(|(ni, dxn)| run_image(ni, Some(dxn)))
            .collect(),
        Some(dx) => (0..n)
            .map(|ni| run_image(ni, Some(dx.index_axis_mut(Axis(0), ni))))
            .collect(),
        None => (0..n)
            .into_par_iter()
            .map(|ni| run_image(ni, None))
            .collect(),
    };

    let dw = need_dw.then(|| {
        let mut dw2 = Array2::<f64>::zeros((cout, cin * kh * kw));
        for p in partials.into_iter().flatten() {
            dw2 += &p;
        }
        dw2.into_shape_with_order((cout, cin, kh, kw))
            .expect("conv2d_bwd: dw reshape")
    });
    (dx, dw, db)
}
