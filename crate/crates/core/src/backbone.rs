//! Multi-scale, deeply supervised encoder-decoder segmenter.
//!
//! The network is U-shaped with `depth` scales. A pyramid of the structure
//! input is fed to every encoder stage (multi-input), and every decoder
//! scale plus the bottleneck emits a sigmoid side output that is upsampled
//! to full resolution and supervised (multi-output). The fused prediction
//! is the mean of the side-output probability maps. The E-structure map
//! recovered from the texture component joins the structure input by
//! channel concatenation at the first encoder stage.

use ndarray::{Array3, Array4, ArrayView3, Ix4};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{leaky_gain, BatchNorm2d, Conv2d, ParamStore};

/// Probability maps produced by one forward pass: the fused map and the
/// per-scale side outputs, all at input resolution, shape (N, K, H, W).
#[derive(Debug, Clone)]
pub struct SegmentationOutput {
    pub fused: Array4<f64>,
    pub side_outputs: Vec<Array4<f64>>,
}

/// Tape handles of the same outputs, for building the training loss.
pub struct SegmentationVars {
    pub fused: Var,
    pub side_outputs: Vec<Var>,
}

impl SegmentationOutput {
    pub fn from_tape(tape: &Tape, vars: &SegmentationVars) -> Self {
        let fused = tape
            .value(vars.fused)
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .to_owned();
        let side_outputs = vars
            .side_outputs
            .iter()
            .map(|&v| {
                tape.value(v)
                    .view()
                    .into_dimensionality::<Ix4>()
                    .unwrap()
                    .to_owned()
            })
            .collect();
        SegmentationOutput { fused, side_outputs }
    }
}

/// Architecture hyperparameters of the segmenter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MNetConfig {
    /// Number of scales (>= 2); spatial dims must divide 2^(depth-1).
    pub depth: usize,
    /// Channels at the top scale; scale k uses `base << k`.
    pub base: usize,
    /// Channels of the structure input (3 for RGB).
    pub in_channels: usize,
    /// Channels of the E-structure input concatenated at the first stage.
    pub extra_channels: usize,
    /// Output class channels (1 vessel, 2 disc/cup).
    pub classes: usize,
}

impl Default for MNetConfig {
    fn default() -> Self {
        MNetConfig {
            depth: 4,
            base: 32,
            in_channels: 3,
            extra_channels: 1,
            classes: 1,
        }
    }
}

struct ConvBlock {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBlock {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Self {
        ConvBlock {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), cin, cout, 3, leaky_gain(0.0)),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: Var, training: bool) -> Var {
        let c = self.conv.forward(tape, store, x);
        let n = self.bn.forward(tape, store, c, training);
        tape.relu(n)
    }
}

struct Stage {
    block1: ConvBlock,
    block2: ConvBlock,
}

impl Stage {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Self {
        Stage {
            block1: ConvBlock::new(store, rng, &format!("{name}.block1"), cin, cout),
            block2: ConvBlock::new(store, rng, &format!("{name}.block2"), cout, cout),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: Var, training: bool) -> Var {
        let h = self.block1.forward(tape, store, x, training);
        self.block2.forward(tape, store, h, training)
    }
}

/// The segmenter network; owns layer handles into a [`ParamStore`].
pub struct MNet {
    pub cfg: MNetConfig,
    enc: Vec<Stage>,
    dec: Vec<Stage>,
    side: Vec<Conv2d>,
}

impl MNet {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cfg: MNetConfig) -> Self {
        assert!(cfg.depth >= 2, "mnet depth must be >= 2");
        let ch = |k: usize| cfg.base << k;
        let mut enc = Vec::new();
        for k in 0..cfg.depth {
            let cin = if k == 0 {
                cfg.in_channels + cfg.extra_channels
            } else {
                ch(k - 1) + cfg.in_channels
            };
            enc.push(Stage::new(store, rng, &format!("{prefix}.enc{k}"), cin, ch(k)));
        }
        let mut dec = Vec::new();
        for k in 0..cfg.depth - 1 {
            let cin = ch(k + 1) + ch(k);
            dec.push(Stage::new(store, rng, &format!("{prefix}.dec{k}"), cin, ch(k)));
        }
        let mut side = Vec::new();
        for k in 0..cfg.depth {
            side.push(Conv2d::new(
                store,
                rng,
                &format!("{prefix}.side{k}"),
                ch(k),
                cfg.classes,
                1,
                1.0,
            ));
        }
        MNet { cfg, enc, dec, side }
    }

    /// Forward pass on the structure input `s` (N, in_channels, H, W) and the
    /// E-structure map `e` (N, extra_channels, H, W).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        s: Var,
        e: Var,
        training: bool,
    ) -> Result<SegmentationVars> {
        let sshape = tape.value(s).shape().to_vec();
        let eshape = tape.value(e).shape().to_vec();
        if sshape.len() != 4 || eshape.len() != 4 {
            return Err(Error::Shape("mnet_forward: inputs must be NCHW".into()));
        }
        if sshape[1] != self.cfg.in_channels || eshape[1] != self.cfg.extra_channels {
            return Err(Error::Shape(format!(
                "mnet_forward: channels {}+{} do not match configured {}+{}",
                sshape[1], eshape[1], self.cfg.in_channels, self.cfg.extra_channels
            )));
        }
        if sshape[0] != eshape[0] || sshape[2..] != eshape[2..] {
            return Err(Error::Shape(format!(
                "mnet_forward: structure {sshape:?} and E-structure {eshape:?} misaligned"
            )));
        }
        let div = 1 << (self.cfg.depth - 1);
        if sshape[2] % div != 0 || sshape[3] % div != 0 {
            return Err(Error::Shape(format!(
                "mnet_forward: spatial dims {}x{} not divisible by {div}",
                sshape[2], sshape[3]
            )));
        }

        // Multi-scale input pyramid of the structure component.
        let mut pyr = vec![s];
        for _ in 1..self.cfg.depth {
            let prev = *pyr.last().unwrap();
            pyr.push(tape.avg_pool2(prev));
        }

        // Encoder with per-scale image inputs.
        let mut feats: Vec<Var> = Vec::new();
        for k in 0..self.cfg.depth {
            let x = if k == 0 {
                tape.concat_channels(&[s, e])
            } else {
                let pooled = tape.max_pool2(feats[k - 1]);
                tape.concat_channels(&[pooled, pyr[k]])
            };
            feats.push(self.enc[k].forward(tape, store, x, training));
        }

        // Decoder with skip concatenation.
        let mut up = feats[self.cfg.depth - 1];
        let mut dec_out = vec![None; self.cfg.depth - 1];
        for k in (0..self.cfg.depth - 1).rev() {
            let upsampled = tape.upsample_bilinear2(up);
            let x = tape.concat_channels(&[upsampled, feats[k]]);
            let out = self.dec[k].forward(tape, store, x, training);
            dec_out[k] = Some(out);
            up = out;
        }

        // Deeply supervised side outputs, coarsest (bottleneck) included.
        let mut sides = Vec::new();
        for k in 0..self.cfg.depth {
            let src = if k == self.cfg.depth - 1 {
                feats[k]
            } else {
                dec_out[k].unwrap()
            };
            let logits = self.side[k].forward(tape, store, src);
            let mut p = tape.sigmoid(logits);
            for _ in 0..k {
                p = tape.upsample_bilinear2(p);
            }
            sides.push(p);
        }
        let fused = tape.mean_of(&sides);
        Ok(SegmentationVars {
            fused,
            side_outputs: sides,
        })
    }
}

/// Average-pooled image pyramid of `depth` levels; level k is downsampled by
/// a factor of 2^k. Input is one (C, H, W) image.
pub fn build_multiscale_inputs(s: &ArrayView3<f64>, depth: usize) -> Result<Vec<Array3<f64>>> {
    if depth < 2 {
        return Err(Error::Invalid(format!("pyramid depth {depth} < 2")));
    }
    let (c, h, w) = (s.shape()[0], s.shape()[1], s.shape()[2]);
    let div = 1 << (depth - 1);
    if h % div != 0 || w % div != 0 {
        return Err(Error::Shape(format!(
            "pyramid: {h}x{w} not divisible by {div}"
        )));
    }
    let mut levels = vec![s.to_owned()];
    for k in 1..depth {
        let prev = &levels[k - 1];
        let (ph, pw) = (prev.shape()[1] / 2, prev.shape()[2] / 2);
        let mut next = Array3::<f64>::zeros((c, ph, pw));
        for ci in 0..c {
            for i in 0..ph {
                for j in 0..pw {
                    next[[ci, i, j]] = 0.25
                        * (prev[[ci, 2 * i, 2 * j]]
                            + prev[[ci, 2 * i, 2 * j + 1]]
                            + prev[[ci, 2 * i + 1, 2 * j]]
                            + prev[[ci, 2 * i + 1, 2 * j + 1]]);
                }
            }
        }
        levels.push(next);
    }
    Ok(levels)
}

/// Threshold probability maps into binary masks. For the two-class disc/cup
/// task (channel 0 = disc, channel 1 = cup) the cup mask is intersected with
/// the disc mask so the nesting holds.
pub fn binarize(output: &SegmentationOutput, threshold: f64) -> Result<Array4<u8>> {
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(Error::Invalid(format!(
            "binarize: threshold {threshold} outside (0, 1)"
        )));
    }
    let f = &output.fused;
    let (n, k, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2], f.shape()[3]);
    let mut mask = Array4::<u8>::zeros((n, k, h, w));
    ndarray::Zip::from(&mut mask).and(f).for_each(|m, &p| {
        *m = u8::from(p >= threshold);
    });
    if k == 2 {
        for ni in 0..n {
            for i in 0..h {
                for j in 0..w {
                    mask[[ni, 1, i, j]] &= mask[[ni, 0, i, j]];
                }
            }
        }
    }
    Ok(mask)
}
