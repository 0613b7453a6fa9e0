//! Trainable structure-texture demixing.
//!
//! The texture extractor is a stride-1, shape-preserving stack of ten 3x3
//! convolutions with leaky ReLU after all but the last, whose linear output
//! is the (signed) texture component `T`. The structure component is the
//! exact complement `S = I - T`, so reconstruction is an identity by
//! construction. The activation after the ninth layer is exposed as texture
//! features and feeds the texture block, a deliberately shallow
//! conv / adaptive-norm / leaky-ReLU / conv stack that recovers boundary
//! structures misassigned to the texture component ("E-structures").

use ndarray::{Array4, ArrayD, ArrayView4, IxDyn};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{leaky_gain, BatchNorm2d, Conv2d, ParamId, ParamStore};

/// Leaky ReLU slope used across the demixer.
pub const DEMIX_SLOPE: f64 = 0.2;
/// Depth of the texture extractor.
pub const EXTRACTOR_LAYERS: usize = 10;

/// Reciprocal grid spacing shared by images and texture components.
///
/// `S + T == I` cannot hold bitwise for arbitrary doubles: rounding the
/// subtraction `I - T` loses low bits whenever the magnitudes differ. Images
/// and textures therefore live on multiples of 2^-32 (~2.3e-10, nine orders
/// of magnitude below the 1/255 data resolution). On that grid both the
/// subtraction and the reconstruction sum are exact for |T| up to 2^19, so
/// the decomposition identity holds with zero ulp error.
pub const RECON_GRID: f64 = 4294967296.0;

/// Snap an array onto the reconstruction grid in place.
pub fn quantize_to_grid(a: &mut ArrayD<f64>) {
    a.mapv_inplace(|v| (v * RECON_GRID).round() / RECON_GRID);
}

/// Paired structure and texture components of one batch.
///
/// `structure + texture` reproduces the input with zero ulp error: both the
/// input image and the texture live on the [`RECON_GRID`] grid and the
/// structure is their exact difference.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub structure: Array4<f64>,
    pub texture: Array4<f64>,
    pub texture_features: Array4<f64>,
}

/// Ten-layer convolutional texture extractor.
pub struct TextureExtractor {
    convs: Vec<Conv2d>,
    pub width: usize,
    pub in_channels: usize,
}

impl TextureExtractor {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_channels: usize,
        width: usize,
    ) -> Self {
        let mut convs = Vec::with_capacity(EXTRACTOR_LAYERS);
        for l in 0..EXTRACTOR_LAYERS {
            let cin = if l == 0 { in_channels } else { width };
            let last = l == EXTRACTOR_LAYERS - 1;
            let cout = if last { in_channels } else { width };
            let gain = if last { 1.0 } else { leaky_gain(DEMIX_SLOPE) };
            convs.push(Conv2d::new(
                store,
                rng,
                &format!("{prefix}.conv{}", l + 1),
                cin,
                cout,
                3,
                gain,
            ));
        }
        TextureExtractor {
            convs,
            width,
            in_channels,
        }
    }

    /// Returns the texture component `T` (same shape as the input) and the
    /// texture features (activation after layer 9). `T` is snapped onto the
    /// reconstruction grid (identity gradient), which keeps `S = I - T`
    /// exact for grid-aligned inputs; see [`RECON_GRID`].
    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: Var) -> Result<(Var, Var)> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::Shape(format!(
                "extract_texture: expected NCHW with {} channels, got {shape:?}",
                self.in_channels
            )));
        }
        if shape[2] < 3 || shape[3] < 3 {
            return Err(Error::Shape(format!(
                "extract_texture: spatial size {}x{} smaller than one 3x3 kernel",
                shape[2], shape[3]
            )));
        }
        let mut h = x;
        let mut features = x;
        for (l, conv) in self.convs.iter().enumerate() {
            h = conv.forward(tape, store, h);
            if l < EXTRACTOR_LAYERS - 1 {
                h = tape.leaky_relu(h, DEMIX_SLOPE);
            }
            if l == EXTRACTOR_LAYERS - 2 {
                features = h;
            }
        }
        let t = tape.quantize(h, RECON_GRID);
        Ok((t, features))
    }
}

/// Exact structure complement `S = I - T` (element-wise).
pub fn compute_structure(i: &ArrayView4<f64>, t: &ArrayView4<f64>) -> Result<Array4<f64>> {
    if i.shape() != t.shape() {
        return Err(Error::Shape(format!(
            "compute_structure: image {:?} vs texture {:?}",
            i.shape(),
            t.shape()
        )));
    }
    Ok(i - t)
}

/// Adaptive normalization: learnable blend `y = a*x + b*BN(x)`, initialized
/// to the identity (a = 1, b = 0).
pub struct AdaptiveNorm {
    pub a: ParamId,
    pub b: ParamId,
    pub bn: BatchNorm2d,
}

impl AdaptiveNorm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        let a = store.register(&format!("{name}.a"), ArrayD::from_elem(IxDyn(&[1]), 1.0), true);
        let b = store.register(&format!("{name}.b"), ArrayD::from_elem(IxDyn(&[1]), 0.0), true);
        let bn = BatchNorm2d::new(store, &format!("{name}.bn"), c);
        AdaptiveNorm { a, b, bn }
    }

    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: Var, training: bool) -> Var {
        let a = store.bind(tape, self.a);
        let b = store.bind(tape, self.b);
        let normed = self.bn.forward(tape, store, x, training);
        let ax = tape.mul_scalar_var(x, a);
        let bn = tape.mul_scalar_var(normed, b);
        tape.add(ax, bn)
    }
}

/// Shallow texture block: conv -> adaptive norm -> leaky ReLU -> conv,
/// producing a single-channel E-structure map at input resolution.
pub struct TextureBlock {
    conv1: Conv2d,
    norm: AdaptiveNorm,
    conv2: Conv2d,
    pub in_channels: usize,
    pub hidden: usize,
}

impl TextureBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_channels: usize,
        hidden: usize,
    ) -> Self {
        TextureBlock {
            conv1: Conv2d::new(
                store,
                rng,
                &format!("{prefix}.conv1"),
                in_channels,
                hidden,
                3,
                leaky_gain(DEMIX_SLOPE),
            ),
            norm: AdaptiveNorm::new(store, &format!("{prefix}.norm"), hidden),
            conv2: Conv2d::new(store, rng, &format!("{prefix}.conv2"), hidden, 1, 3, 1.0),
            in_channels,
            hidden,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        features: Var,
        training: bool,
    ) -> Result<Var> {
        let shape = tape.value(features).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::Shape(format!(
                "texture_block: expected {} feature channels, got {shape:?}",
                self.in_channels
            )));
        }
        let h = self.conv1.forward(tape, store, features);
        let h = self.norm.forward(tape, store, h, training);
        let h = tape.leaky_relu(h, DEMIX_SLOPE);
        Ok(self.conv2.forward(tape, store, h))
    }
}

#[cfg(test)]
mod tests;
