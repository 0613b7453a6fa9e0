//! Demixing and segmentation loss functions.
//!
//! An image `I` is split into a structure component `S` and a texture
//! component `T` with `S = I - T`. The split is driven by two penalties:
//! total variation on `S` (structures are piecewise smooth, so their TV is
//! low while oscillating textures pay heavily) and the L1 norm on `T`
//! (textures are a sparse residual). The segmentation head is trained with
//! per-class binary cross-entropy averaged over every side output plus the
//! fused map. The combined objective is
//!
//! ```text
//! L_total = L_seg + mu * (L_t(T) + lambda * L_s(I - T))
//! ```
//!
//! TV and L1 use sum reduction by default so the published trade-off
//! weights keep their meaning at the native resolutions; a mean reduction
//! is available for resolution-independent tuning.

use ndarray::{Array3, Array4, ArrayD, ArrayView3, ArrayView4, ArrayViewD, Axis};

use crate::backbone::SegmentationOutput;
use crate::error::{Error, Result};

/// Probability clamp applied inside binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Batch-norm style epsilon is defined where normalization lives; this one
/// guards the TV norm denominator in the backward pass only.
const TV_GRAD_EPS: f64 = 0.0;

/// How TV / L1 losses reduce over elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

impl std::str::FromStr for Reduction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Reduction::Sum),
            "mean" => Ok(Reduction::Mean),
            other => Err(Error::Config(format!(
                "unknown loss_reduction {other:?} (expected sum|mean)"
            ))),
        }
    }
}

/// Trade-off weights of the demixing term.
///
/// `mu` weighs the whole demixing term against the segmentation loss and
/// `lambda_s` weighs the structure loss inside it.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub mu: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_s: 1.0,
            mu: 0.001,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_s: f64, mu: f64) -> Result<Self> {
        if !(lambda_s >= 0.0) || !(mu >= 0.0) {
            return Err(Error::Invalid(format!(
                "loss weights must be nonnegative, got lambda_s={lambda_s}, mu={mu}"
            )));
        }
        Ok(LossWeights { lambda_s, mu })
    }

    /// `L_seg + mu * (L_t + lambda_s * L_s)`.
    pub fn combine(&self, l_seg: f64, l_t: f64, l_s: f64) -> f64 {
        l_seg + self.mu * (l_t + self.lambda_s * l_s)
    }
}

/// Forward-difference spatial gradient with Neumann boundary (zero at the
/// trailing row/column).
#[derive(Debug, Clone)]
pub struct GradientField {
    pub dx: Array3<f64>,
    pub dy: Array3<f64>,
}

fn check_finite(name: &str, x: &ArrayViewD<f64>) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}

/// Forward differences of a (C, H, W) image: `dx[c,i,j] = S[c,i,j+1] - S[c,i,j]`,
/// `dy[c,i,j] = S[c,i+1,j] - S[c,i,j]`, zero at the trailing boundary.
pub fn spatial_gradient(s: &ArrayView3<f64>) -> Result<GradientField> {
    let (c, h, w) = (s.shape()[0], s.shape()[1], s.shape()[2]);
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Invalid(format!(
            "spatial_gradient: degenerate image shape {:?}",
            s.shape()
        )));
    }
    let mut dx = Array3::<f64>::zeros((c, h, w));
    let mut dy = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                if j + 1 < w {
                    dx[[ci, i, j]] = s[[ci, i, j + 1]] - s[[ci, i, j]];
                }
                if i + 1 < h {
                    dy[[ci, i, j]] = s[[ci, i + 1, j]] - s[[ci, i, j]];
                }
            }
        }
    }
    Ok(GradientField { dx, dy })
}

/// Per-pixel Euclidean norm of the forward-difference gradient, pooled over
/// both directions and all channels. Input is an NCHW batch; output (N, H, W).
pub(crate) fn tv_pixel_norms(x: &ArrayView4<f64>) -> Array3<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut norms = Array3::<f64>::zeros((n, h, w));
    for ni in 0..n {
        for i in 0..h {
            for j in 0..w {
                let mut sq = 0.0;
                for ci in 0..c {
                    let v = x[[ni, ci, i, j]];
                    if j + 1 < w {
                        let d = x[[ni, ci, i, j + 1]] - v;
                        sq += d * d;
                    }
                    if i + 1 < h {
                        let d = x[[ni, ci, i + 1, j]] - v;
                        sq += d * d;
                    }
                }
                norms[[ni, i, j]] = sq.sqrt();
            }
        }
    }
    norms
}

/// Gradient of `upstream * sum(norms)` with respect to the image batch.
/// Pixels at a kink (zero norm) take the zero subgradient.
pub(crate) fn tv_backward(
    x: &ArrayView4<f64>,
    norms: &ArrayViewD<f64>,
    upstream: f64,
) -> Array4<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut dx = Array4::<f64>::zeros((n, c, h, w));
    for ni in 0..n {
        for i in 0..h {
            for j in 0..w {
                let norm = norms[[ni, i, j]];
                if norm <= TV_GRAD_EPS {
                    continue;
                }
                let k = upstream / norm;
                for ci in 0..c {
                    let v = x[[ni, ci, i, j]];
                    if j + 1 < w {
                        let d = (x[[ni, ci, i, j + 1]] - v) * k;
                        dx[[ni, ci, i, j + 1]] += d;
                        dx[[ni, ci, i, j]] -= d;
                    }
                    if i + 1 < h {
                        let d = (x[[ni, ci, i + 1, j]] - v) * k;
                        dx[[ni, ci, i + 1, j]] += d;
                        dx[[ni, ci, i, j]] -= d;
                    }
                }
            }
        }
    }
    dx
}

/// Total-variation structure loss of a (C, H, W) image: the sum over pixels
/// of the gradient norm pooled across directions and channels.
pub fn tv_structure_loss(s: &ArrayView3<f64>) -> Result<f64> {
    check_finite("tv_structure_loss input", &s.view().into_dyn())?;
    if s.is_empty() {
        return Err(Error::Invalid(
            "tv_structure_loss: degenerate image".to_string(),
        ));
    }
    let b = s.view().insert_axis(Axis(0));
    Ok(tv_pixel_norms(&b).sum())
}

/// L1 texture loss of a (C, H, W) image: the sum of absolute values.
pub fn l1_texture_loss(t: &ArrayView3<f64>) -> Result<f64> {
    check_finite("l1_texture_loss input", &t.view().into_dyn())?;
    Ok(t.iter().map(|v| v.abs()).sum())
}

/// Mean clamped binary cross-entropy over all elements.
pub(crate) fn bce_mean_raw(p: &ArrayViewD<f64>, t: &ArrayViewD<f64>) -> f64 {
    let n = p.len() as f64;
    let mut acc = 0.0;
    for (&pi, &ti) in p.iter().zip(t.iter()) {
        let pc = pi.clamp(BCE_EPS, 1.0 - BCE_EPS);
        acc -= ti * pc.ln() + (1.0 - ti) * (1.0 - pc).ln();
    }
    acc / n
}

/// Gradient of `upstream * bce_mean_raw` with respect to `p`; clamped
/// probabilities take the zero subgradient outside the clamp range.
pub(crate) fn bce_backward(p: &ArrayD<f64>, t: &ArrayD<f64>, upstream: f64) -> ArrayD<f64> {
    let n = p.len() as f64;
    let mut dp = ArrayD::<f64>::zeros(p.raw_dim());
    ndarray::Zip::from(&mut dp).and(p).and(t).for_each(|d, &pi, &ti| {
        if (BCE_EPS..=1.0 - BCE_EPS).contains(&pi) {
            *d = upstream * (pi - ti) / (pi * (1.0 - pi)) / n;
        }
    });
    dp
}

fn validate_probs_and_labels(p: &ArrayView4<f64>, gt: &ArrayView4<f64>) -> Result<()> {
    if p.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "segmentation_loss: prediction {:?} vs ground truth {:?}",
            p.shape(),
            gt.shape()
        )));
    }
    if !p.iter().all(|&v| (0.0..=1.0).contains(&v)) {
        return Err(Error::Invalid(
            "segmentation_loss: probabilities outside [0, 1]".to_string(),
        ));
    }
    if !gt.iter().all(|&v| v == 0.0 || v == 1.0) {
        return Err(Error::Invalid(
            "segmentation_loss: labels must be binary".to_string(),
        ));
    }
    Ok(())
}

/// Segmentation loss: mean binary cross-entropy per class channel, averaged
/// uniformly over all decoder side outputs and the fused output.
pub fn segmentation_loss(output: &SegmentationOutput, gt: &ArrayView4<f64>) -> Result<f64> {
    validate_probs_and_labels(&output.fused.view(), gt)?;
    let mut acc = bce_mean_raw(&output.fused.view().into_dyn(), &gt.view().into_dyn());
    for side in &output.side_outputs {
        validate_probs_and_labels(&side.view(), gt)?;
        acc += bce_mean_raw(&side.view().into_dyn(), &gt.view().into_dyn());
    }
    Ok(acc / (output.side_outputs.len() + 1) as f64)
}

/// Component values of one total-loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub total: f64,
    pub l_seg: f64,
    pub l_t: f64,
    pub l_s: f64,
}

/// Full training objective evaluated from raw components: the segmentation
/// loss of `output` against `gt` plus the weighted demixing penalties of
/// `T` and `S = I - T`.
pub fn total_loss(
    i: &ArrayView4<f64>,
    t: &ArrayView4<f64>,
    output: &SegmentationOutput,
    gt: &ArrayView4<f64>,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    if i.shape() != t.shape() {
        return Err(Error::Shape(format!(
            "total_loss: image {:?} vs texture {:?}",
            i.shape(),
            t.shape()
        )));
    }
    check_finite("total_loss image", &i.view().into_dyn())?;
    check_finite("total_loss texture", &t.view().into_dyn())?;
    let s = i - t;
    let l_s = tv_pixel_norms(&s.view()).sum();
    let l_t = t.iter().map(|v| v.abs()).sum();
    let l_seg = segmentation_loss(output, gt)?;
    Ok(LossBreakdown {
        total: w.combine(l_seg, l_t, l_s),
        l_seg,
        l_t,
        l_s,
    })
}
