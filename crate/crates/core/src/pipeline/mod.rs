//! Training, evaluation, decomposition rendering and the ablation runner.
//!
//! A run is fully determined by its [`TrainConfig`]: every random source
//! (init, shuffling, augmentation, synthetic data) derives from the config
//! seed, all kernels are deterministic, and checkpoints round-trip
//! bit-exactly, so repeated runs produce identical artifacts.

pub mod config;

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4, Axis, Ix4};
use rand::seq::SliceRandom;

use crate::autodiff::{Tape, Var};
use crate::backbone::{binarize, MNet, MNetConfig, SegmentationOutput, SegmentationVars};
use crate::checkpoint;
use crate::data::loader::{
    crop_disc_region_with, load_disc_sample, load_vessel_sample, paste_crop_mask,
    scan_disc_layout, scan_vessel_layout, CropSource,
};
use crate::data::polar::{inverse_polar, polar_transform, polar_transform_nearest};
use crate::data::synth::{synth_generate, Split, SynthConfig, SynthFamily};
use crate::data::{augment::augment, Sample};
use crate::demixer::{TextureBlock, TextureExtractor};
use crate::error::{Error, Result};
use crate::losses::{LossWeights, Reduction};
use crate::metrics::{
    self, auc, confusion, disc_cup_overlap, largest_component, rates, Aggregation, ConfusionCounts,
    MetricsReport,
};
use crate::nn::{Adam, ParamStore};
use crate::rng::{indexed_rng, stream_rng};

/// Segmentation task kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Task {
    Vessel,
    DiscCup,
}

impl Task {
    pub fn classes(self) -> usize {
        match self {
            Task::Vessel => 1,
            Task::DiscCup => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Vessel => "vessel",
            Task::DiscCup => "disc_cup",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vessel" => Ok(Task::Vessel),
            "disc_cup" => Ok(Task::DiscCup),
            other => Err(Error::Config(format!(
                "unknown task {other:?} (expected vessel|disc_cup)"
            ))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Ablation variant. The variant decides which modules and loss terms are
/// live: disabled terms are never added to the objective (bit-zero
/// contribution) and disabled modules are never constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Variant {
    /// Plain backbone on the raw image: no demixing, no texture block.
    Bl,
    /// Demixing with the structure loss only.
    BlLs,
    /// Demixing with the texture loss only.
    BlLt,
    /// Demixing with both losses, no texture block.
    Blst,
    /// Full model: both losses plus the texture block.
    Std,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Bl,
        Variant::BlLs,
        Variant::BlLt,
        Variant::Blst,
        Variant::Std,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Bl => "BL",
            Variant::BlLs => "BL+Ls",
            Variant::BlLt => "BL+Lt",
            Variant::Blst => "BLST",
            Variant::Std => "STD",
        }
    }

    /// Directory-safe name.
    pub fn slug(self) -> &'static str {
        match self {
            Variant::Bl => "bl",
            Variant::BlLs => "bl_ls",
            Variant::BlLt => "bl_lt",
            Variant::Blst => "blst",
            Variant::Std => "std",
        }
    }

    pub fn uses_extractor(self) -> bool {
        !matches!(self, Variant::Bl)
    }

    pub fn uses_texture_block(self) -> bool {
        matches!(self, Variant::Std)
    }

    pub fn uses_structure_loss(self) -> bool {
        matches!(self, Variant::BlLs | Variant::Blst | Variant::Std)
    }

    pub fn uses_texture_loss(self) -> bool {
        matches!(self, Variant::BlLt | Variant::Blst | Variant::Std)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "BL" | "bl" => Ok(Variant::Bl),
            "BL+Ls" | "bl_ls" | "bl+ls" => Ok(Variant::BlLs),
            "BL+Lt" | "bl_lt" | "bl+lt" => Ok(Variant::BlLt),
            "BLST" | "blst" => Ok(Variant::Blst),
            "STD" | "std" | "STD-Net" => Ok(Variant::Std),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected BL|BL+Ls|BL+Lt|BLST|STD)"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Network width/depth knobs (checkpointed so evaluation can rebuild the
/// exact architecture).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ArchConfig {
    pub std_channels: usize,
    pub tblock_channels: usize,
    pub mnet_base: usize,
    pub mnet_depth: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            std_channels: 64,
            tblock_channels: 32,
            mnet_base: 32,
            mnet_depth: 4,
        }
    }
}

/// Full training-run description.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub task: Task,
    pub variant: Variant,
    /// Dataset root in one of the supported layouts; when absent, `synth`
    /// generates an in-memory dataset.
    pub data_root: Option<PathBuf>,
    pub synth: Option<SynthConfig>,
    /// Vessel loader resize target.
    pub image_size: usize,
    /// Disc crop margin in pixels and crop output size.
    pub crop_margin: usize,
    pub crop_size: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optimizer-step budget; overrides `epochs` when set.
    pub max_steps: Option<usize>,
    pub weights: LossWeights,
    pub reduction: Reduction,
    pub seed: u64,
    pub augment: bool,
    pub threshold: f64,
    pub aggregation: Aggregation,
    pub arch: ArchConfig,
    pub out_dir: PathBuf,
    pub log_interval: usize,
    /// Save a checkpoint every n steps (0 = final only).
    pub checkpoint_interval: usize,
    /// Stop once mean training IOU reaches this value (checked every
    /// `early_stop_check_every` steps).
    pub early_stop_train_iou: Option<f64>,
    pub early_stop_check_every: usize,
    pub strict_determinism: bool,
    pub device: String,
}

impl TrainConfig {
    pub fn new(task: Task, variant: Variant, out_dir: PathBuf) -> Self {
        TrainConfig {
            task,
            variant,
            data_root: None,
            synth: None,
            image_size: 512,
            crop_margin: 50,
            crop_size: 256,
            lr: 0.001,
            batch_size: 2,
            epochs: 300,
            max_steps: None,
            weights: LossWeights::default(),
            reduction: Reduction::Sum,
            seed: 0,
            augment: true,
            threshold: 0.5,
            aggregation: Aggregation::PerImageMean,
            arch: ArchConfig::default(),
            out_dir,
            log_interval: 50,
            checkpoint_interval: 0,
            early_stop_train_iou: None,
            early_stop_check_every: 50,
            strict_determinism: false,
            device: "cpu".to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.device != "cpu" {
            return Err(Error::Config(format!(
                "device {:?} unavailable: this build is CPU-only",
                self.device
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if !(0.0 < self.threshold && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold {} outside (0, 1)",
                self.threshold
            )));
        }
        if self.data_root.is_none() && self.synth.is_none() {
            return Err(Error::Config(
                "either data_root or synth.* settings are required".into(),
            ));
        }
        if let Some(s) = &self.synth {
            s.validate()?;
            let family_task = match s.family {
                SynthFamily::Vessel => Task::Vessel,
                SynthFamily::DiscCup => Task::DiscCup,
            };
            if family_task != self.task {
                return Err(Error::Config(format!(
                    "synth family {:?} does not match task {}",
                    s.family, self.task
                )));
            }
        }
        LossWeights::new(self.weights.lambda_s, self.weights.mu)?;
        Ok(())
    }
}

/// The assembled model: optional texture extractor and texture block around
/// the segmenter backbone.
pub struct StdNet {
    pub store: ParamStore,
    pub task: Task,
    pub variant: Variant,
    pub arch: ArchConfig,
    extractor: Option<TextureExtractor>,
    tblock: Option<TextureBlock>,
    mnet: MNet,
}

/// Handles into one recorded forward pass.
pub struct ForwardPass {
    pub input: Var,
    pub texture: Option<Var>,
    pub structure: Var,
    pub e_map: Var,
    pub seg: SegmentationVars,
}

impl StdNet {
    pub fn new(task: Task, variant: Variant, arch: ArchConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = stream_rng(seed, "init");
        let extractor = variant
            .uses_extractor()
            .then(|| TextureExtractor::new(&mut store, &mut rng, "extractor", 3, arch.std_channels));
        let tblock = variant.uses_texture_block().then(|| {
            TextureBlock::new(
                &mut store,
                &mut rng,
                "texture_block",
                arch.std_channels,
                arch.tblock_channels,
            )
        });
        let mnet = MNet::new(
            &mut store,
            &mut rng,
            "mnet",
            MNetConfig {
                depth: arch.mnet_depth,
                base: arch.mnet_base,
                in_channels: 3,
                extra_channels: 1,
                classes: task.classes(),
            },
        );
        StdNet {
            store,
            task,
            variant,
            arch,
            extractor,
            tblock,
            mnet,
        }
    }

    /// Record one forward pass over an NCHW image batch.
    ///
    /// For the BL variant the structure handle is the input leaf itself
    /// (texture forced to zero) and the E-map is a zero leaf, so the
    /// backbone consumes the image unchanged.
    pub fn forward(&mut self, tape: &mut Tape, images: Array4<f64>, training: bool) -> Result<ForwardPass> {
        let (n, _c, h, w) = (
            images.shape()[0],
            images.shape()[1],
            images.shape()[2],
            images.shape()[3],
        );
        self.store.begin_step();
        let input = tape.leaf(images.into_dyn(), false);

        let (texture, structure, feats) = match &self.extractor {
            Some(ex) => {
                let (t, feats) = ex.forward(tape, &mut self.store, input)?;
                let s = tape.sub(input, t);
                (Some(t), s, Some(feats))
            }
            None => (None, input, None),
        };

        let e_map = match (&self.tblock, feats) {
            (Some(block), Some(feats)) => block.forward(tape, &mut self.store, feats, training)?,
            _ => tape.leaf(Array4::<f64>::zeros((n, 1, h, w)).into_dyn(), false),
        };

        let seg = self
            .mnet
            .forward(tape, &mut self.store, structure, e_map, training)?;
        Ok(ForwardPass {
            input,
            texture,
            structure,
            e_map,
            seg,
        })
    }

    fn manifest(&self, cfg: &TrainConfig, step: usize) -> serde_json::Value {
        serde_json::json!({
            "format": "stdnet-checkpoint",
            "task": self.task.as_str(),
            "variant": self.variant.as_str(),
            "arch": self.arch,
            "seed": cfg.seed,
            "step": step,
            "lambda_s": cfg.weights.lambda_s,
            "mu": cfg.weights.mu,
            "loss_reduction": cfg.reduction,
        })
    }
}

/// Rebuild a model from a checkpoint archive.
pub fn load_model(path: &Path) -> Result<(StdNet, serde_json::Value)> {
    let (manifest, tensors) = checkpoint::load(path)?;
    let task: Task = manifest["task"]
        .as_str()
        .ok_or_else(|| Error::Checkpoint("manifest missing task".into()))?
        .parse()?;
    let variant: Variant = manifest["variant"]
        .as_str()
        .ok_or_else(|| Error::Checkpoint("manifest missing variant".into()))?
        .parse()?;
    let arch: ArchConfig = serde_json::from_value(manifest["arch"].clone())
        .map_err(|e| Error::Checkpoint(format!("bad arch in manifest: {e}")))?;
    let mut model = StdNet::new(task, variant, arch, 0);
    checkpoint::restore(&mut model.store, tensors)?;
    Ok((model, manifest))
}

/// Scalar loss components of one step (inactive terms are `None`).
#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub total: f64,
    pub l_seg: f64,
    pub l_t: Option<f64>,
    pub l_s: Option<f64>,
}

/// Build the variant-gated objective on the tape.
///
/// Disabled terms are simply never added, so they contribute bit-zero and
/// receive no gradient.
pub fn compose_loss(
    tape: &mut Tape,
    fwd: &ForwardPass,
    gt: &ndarray::ArrayD<f64>,
    variant: Variant,
    weights: &LossWeights,
    reduction: Reduction,
) -> (Var, StepLosses) {
    // Mean BCE over every side output plus the fused map, equal weight.
    let mut terms: Vec<Var> = Vec::with_capacity(fwd.seg.side_outputs.len() + 1);
    terms.push(tape.bce_mean(fwd.seg.fused, gt));
    for &side in &fwd.seg.side_outputs {
        terms.push(tape.bce_mean(side, gt));
    }
    let mut l_seg = terms[0];
    for &t in &terms[1..] {
        l_seg = tape.add(l_seg, t);
    }
    let l_seg = tape.scale(l_seg, 1.0 / terms.len() as f64);

    let mut total = l_seg;
    let mut l_t_val = None;
    let mut l_s_val = None;
    if let Some(t) = fwd.texture {
        if variant.uses_texture_loss() {
            let l_t = tape.l1_loss(t, reduction);
            l_t_val = Some(tape.scalar(l_t));
            let weighted = tape.scale(l_t, weights.mu);
            total = tape.add(total, weighted);
        }
        if variant.uses_structure_loss() {
            let l_s = tape.tv_loss(fwd.structure, reduction);
            l_s_val = Some(tape.scalar(l_s));
            let weighted = tape.scale(l_s, weights.mu * weights.lambda_s);
            total = tape.add(total, weighted);
        }
    }
    let losses = StepLosses {
        total: tape.scalar(total),
        l_seg: tape.scalar(l_seg),
        l_t: l_t_val,
        l_s: l_s_val,
    };
    (total, losses)
}

/// Load the training-ready samples for a config (network-input space).
pub fn load_training_samples(cfg: &TrainConfig) -> Result<Vec<Sample>> {
    let raw: Vec<Sample> = match (&cfg.data_root, &cfg.synth) {
        (Some(root), _) => match cfg.task {
            Task::Vessel => scan_vessel_layout(root, Split::Train)?
                .iter()
                .map(|p| load_vessel_sample(p, cfg.image_size))
                .collect::<Result<_>>()?,
            Task::DiscCup => scan_disc_layout(&root.join(Split::Train.dir_name()))?
                .iter()
                .map(load_disc_sample)
                .collect::<Result<_>>()?,
        },
        (None, Some(synth)) => synth_generate(synth, Split::Train, synth.n_train)?,
        (None, None) => unreachable!("validated"),
    };
    if raw.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    match cfg.task {
        Task::Vessel => Ok(raw),
        Task::DiscCup => raw
            .iter()
            .map(|s| to_polar_training_sample(s, cfg))
            .collect(),
    }
}

/// Disc/cup training happens in polar space: crop around the disc, resample
/// image (bilinear) and mask (nearest) onto the polar grid.
fn to_polar_training_sample(sample: &Sample, cfg: &TrainConfig) -> Result<Sample> {
    let cropped = crop_disc_region_with(
        sample,
        cfg.crop_margin,
        cfg.crop_size,
        CropSource::AnnotationOrCenter,
    )?;
    let image = polar_transform(&cropped.image.view(), None, None)?;
    let mask = polar_transform_nearest(&cropped.mask.view(), None, None)?;
    let mut out = cropped;
    let mut image = image;
    crate::data::normalize_image(&mut image);
    out.image = image;
    out.mask = mask;
    Ok(out)
}

fn batch_tensors(samples: &[&Sample]) -> (Array4<f64>, ndarray::ArrayD<f64>) {
    let n = samples.len();
    let (c, h, w) = (
        samples[0].image.shape()[0],
        samples[0].image.shape()[1],
        samples[0].image.shape()[2],
    );
    let k = samples[0].mask.shape()[0];
    let mut images = Array4::<f64>::zeros((n, c, h, w));
    let mut gt = Array4::<f64>::zeros((n, k, h, w));
    for (i, s) in samples.iter().enumerate() {
        images
            .index_axis_mut(Axis(0), i)
            .assign(&s.image);
        gt.index_axis_mut(Axis(0), i)
            .zip_mut_with(&s.mask, |g, &m| *g = m as f64);
    }
    (images, gt.into_dyn())
}

/// Result paths and summary of one training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub steps: usize,
    pub final_losses: StepLosses,
    /// Mean training IOU at the last early-stop check, when enabled.
    pub train_iou: Option<f64>,
}

/// Run one training job to completion.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let samples = load_training_samples(cfg)?;
    let mut model = StdNet::new(cfg.task, cfg.variant, cfg.arch, cfg.seed);
    let mut adam = Adam::new(cfg.lr, model.store.len());

    let steps_per_epoch = samples.len().div_ceil(cfg.batch_size);
    let total_steps = cfg
        .max_steps
        .unwrap_or_else(|| cfg.epochs.saturating_mul(steps_per_epoch));
    if total_steps == 0 {
        return Err(Error::Config("step budget is zero".into()));
    }

    let log_path = cfg.out_dir.join("training_log.csv");
    let mut log = std::io::BufWriter::new(
        std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?,
    );
    let mut header = String::from("step,total,l_seg");
    if cfg.variant.uses_texture_loss() {
        header.push_str(",l_t");
    }
    if cfg.variant.uses_structure_loss() {
        header.push_str(",l_s");
    }
    writeln!(log, "{header}").map_err(|e| Error::io(&log_path, e))?;

    let ckpt_path = cfg.out_dir.join("checkpoint.stdck");
    let mut step = 0usize;
    let mut last_losses = StepLosses {
        total: f64::NAN,
        l_seg: f64::NAN,
        l_t: None,
        l_s: None,
    };
    let mut train_iou = None;
    let mut order_rng = stream_rng(cfg.seed, "data.order");

    'training: for epoch in 0.. {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        let mut rng = indexed_rng(
                            cfg.seed,
                            "augment",
                            (epoch * samples.len() + i) as u64,
                        );
                        augment(&samples[i], &mut rng)
                    } else {
                        samples[i].clone()
                    }
                })
                .collect();
            let refs: Vec<&Sample> = batch.iter().collect();
            let (images, gt) = batch_tensors(&refs);

            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, images, true)?;
            let (total, losses) = compose_loss(
                &mut tape,
                &fwd,
                &gt,
                cfg.variant,
                &cfg.weights,
                cfg.reduction,
            );
            if !losses.total.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!(
                        "l_seg={}, l_t={:?}, l_s={:?}",
                        losses.l_seg, losses.l_t, losses.l_s
                    ),
                });
            }
            let grads = tape.backward(total);
            adam.step(&mut model.store, &grads);
            step += 1;
            last_losses = losses;

            let mut line = format!("{step},{:.9},{:.9}", losses.total, losses.l_seg);
            if let Some(v) = losses.l_t {
                line.push_str(&format!(",{v:.9}"));
            }
            if let Some(v) = losses.l_s {
                line.push_str(&format!(",{v:.9}"));
            }
            writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
            if cfg.log_interval > 0 && step % cfg.log_interval == 0 {
                println!(
                    "[{} {} seed {}] step {step}/{total_steps} total {:.5} seg {:.5}",
                    cfg.variant, cfg.task, cfg.seed, losses.total, losses.l_seg
                );
            }

            if cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0 {
                checkpoint::save(&ckpt_path, &model.manifest(cfg, step), &model.store)?;
            }

            if let Some(target) = cfg.early_stop_train_iou {
                if step % cfg.early_stop_check_every.max(1) == 0 {
                    let iou = mean_train_iou(&mut model, &samples, cfg.threshold)?;
                    train_iou = Some(iou);
                    if iou >= target {
                        break 'training;
                    }
                }
            }

            if step >= total_steps {
                break 'training;
            }
        }
    }

    log.flush().map_err(|e| Error::io(&log_path, e))?;
    checkpoint::save(&ckpt_path, &model.manifest(cfg, step), &model.store)?;
    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        log: log_path,
        steps: step,
        final_losses: last_losses,
        train_iou,
    })
}

/// Mean foreground IOU over the training samples (eval mode, pooled
/// counts per image, averaged over images and classes).
pub fn mean_train_iou(model: &mut StdNet, samples: &[Sample], threshold: f64) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in samples {
        let seg = infer(model, s)?;
        let mask = binarize(&seg, threshold)?;
        for k in 0..mask.shape()[1] {
            let pred2 = mask.index_axis(Axis(0), 0);
            let pred2 = pred2.index_axis(Axis(0), k);
            let gt2 = s.mask.index_axis(Axis(0), k);
            let c = confusion(&pred2, &gt2, None)?;
            if let Some(iou) = rates(&c)?.iou {
                sum += iou;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyRegion);
    }
    Ok(sum / n as f64)
}

/// Eval-mode forward over one sample, returning probability maps.
pub fn infer(model: &mut StdNet, sample: &Sample) -> Result<SegmentationOutput> {
    let (c, h, w) = (
        sample.image.shape()[0],
        sample.image.shape()[1],
        sample.image.shape()[2],
    );
    let mut images = Array4::<f64>::zeros((1, c, h, w));
    images.index_axis_mut(Axis(0), 0).assign(&sample.image);
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, images, false)?;
    Ok(SegmentationOutput::from_tape(&tape, &fwd.seg))
}

/// Demixer outputs for one sample (eval mode).
pub fn infer_decomposition(model: &mut StdNet, image: &Array3<f64>) -> Result<crate::demixer::Decomposition> {
    let ex = model
        .extractor
        .as_ref()
        .ok_or_else(|| Error::Invalid(format!(
            "variant {} has no demixer (texture forced to zero)",
            model.variant
        )))?;
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut images = Array4::<f64>::zeros((1, c, h, w));
    images.index_axis_mut(Axis(0), 0).assign(image);
    let mut tape = Tape::new();
    model.store.begin_step();
    let input = tape.leaf(images.into_dyn(), false);
    let (t, feats) = ex.forward(&mut tape, &mut model.store, input)?;
    let s = tape.sub(input, t);
    let to4 = |v: Var, tape: &Tape| {
        tape.value(v)
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .to_owned()
    };
    let texture_features = to4(feats, &tape);
    let structure = to4(s, &tape);
    let texture = to4(t, &tape);
    Ok(crate::demixer::Decomposition {
        structure,
        texture,
        texture_features,
    })
}

/// Texture-block output for one sample, when the model has one.
pub fn infer_e_map(model: &mut StdNet, image: &Array3<f64>) -> Result<Option<Array2<f64>>> {
    if model.tblock.is_none() {
        return Ok(None);
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut images = Array4::<f64>::zeros((1, c, h, w));
    images.index_axis_mut(Axis(0), 0).assign(image);
    let mut tape = Tape::new();
    model.store.begin_step();
    let input = tape.leaf(images.into_dyn(), false);
    let ex = model.extractor.as_ref().expect("texture block implies extractor");
    let (_t, feats) = ex.forward(&mut tape, &mut model.store, input)?;
    let block = model.tblock.as_ref().unwrap();
    let e = block.forward(&mut tape, &mut model.store, feats, false)?;
    let e4 = tape
        .value(e)
        .view()
        .into_dimensionality::<Ix4>()
        .unwrap()
        .to_owned();
    Ok(Some(e4.index_axis(Axis(0), 0).index_axis(Axis(0), 0).to_owned()))
}

/// Evaluation settings.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub threshold: f64,
    pub aggregation: Aggregation,
    pub split: Split,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            threshold: 0.5,
            aggregation: Aggregation::PerImageMean,
            split: Split::Test,
        }
    }
}

fn mean_of(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Evaluate a model on the vessel test split.
fn evaluate_vessel(
    model: &mut StdNet,
    samples: &[Sample],
    opts: &EvalOptions,
) -> Result<Vec<(String, Option<f64>)>> {
    let mut per_image: Vec<(ConfusionCounts, RResult)> = Vec::new();
    struct RResult {
        acc: Option<f64>,
        sen: Option<f64>,
        spe: Option<f64>,
        iou: Option<f64>,
        auc: Option<f64>,
    }
    let mut pooled = ConfusionCounts::default();
    let mut pooled_scores: Vec<(Array2<f64>, Array2<u8>, Option<Array2<u8>>)> = Vec::new();

    for s in samples {
        let seg = infer(model, s)?;
        let probs = seg.fused.index_axis(Axis(0), 0);
        let probs2 = probs.index_axis(Axis(0), 0).to_owned();
        let mask = binarize(&seg, opts.threshold)?;
        let pred2 = mask.index_axis(Axis(0), 0);
        let pred2 = pred2.index_axis(Axis(0), 0).to_owned();
        let gt2 = s.mask.index_axis(Axis(0), 0);
        let fov = s.fov.as_ref().map(|f| f.view());
        let c = confusion(&pred2.view(), &gt2, fov.as_ref())?;
        let r = rates(&c)?;
        let a = auc(&probs2.view(), &gt2, fov.as_ref())?;
        pooled.add(&c);
        per_image.push((
            c,
            RResult {
                acc: r.acc,
                sen: r.sen,
                spe: r.spe,
                iou: r.iou,
                auc: a,
            },
        ));
        if opts.aggregation == Aggregation::Pooled {
            pooled_scores.push((probs2, gt2.to_owned(), s.fov.clone()));
        }
    }

    let metrics = match opts.aggregation {
        Aggregation::PerImageMean => {
            let acc = mean_of(&per_image.iter().map(|(_, r)| r.acc).collect::<Vec<_>>());
            let auc_m = mean_of(&per_image.iter().map(|(_, r)| r.auc).collect::<Vec<_>>());
            let sen = mean_of(&per_image.iter().map(|(_, r)| r.sen).collect::<Vec<_>>());
            let spe = mean_of(&per_image.iter().map(|(_, r)| r.spe).collect::<Vec<_>>());
            let iou = mean_of(&per_image.iter().map(|(_, r)| r.iou).collect::<Vec<_>>());
            vec![
                ("Acc".to_string(), acc),
                ("AUC".to_string(), auc_m),
                ("Sen".to_string(), sen),
                ("Spe".to_string(), spe),
                ("IOU".to_string(), iou),
            ]
        }
        Aggregation::Pooled => {
            let r = rates(&pooled)?;
            // Pool every pixel for a single rank statistic.
            let total: usize = pooled_scores
                .iter()
                .map(|(p, _, _)| p.len())
                .sum();
            let mut probs = Array2::<f64>::zeros((1, total));
            let mut gts = Array2::<u8>::zeros((1, total));
            let mut fovs = Array2::<u8>::zeros((1, total));
            let mut at = 0usize;
            for (p, g, f) in &pooled_scores {
                for ((&pv, &gv), fv) in p.iter().zip(g.iter()).zip(
                    f.as_ref()
                        .map(|f| f.iter().copied().collect::<Vec<u8>>())
                        .unwrap_or_else(|| vec![1u8; p.len()]),
                ) {
                    probs[[0, at]] = pv;
                    gts[[0, at]] = gv;
                    fovs[[0, at]] = fv;
                    at += 1;
                }
            }
            let a = auc(&probs.view(), &gts.view(), Some(&fovs.view()))?;
            vec![
                ("Acc".to_string(), r.acc),
                ("AUC".to_string(), a),
                ("Sen".to_string(), r.sen),
                ("Spe".to_string(), r.spe),
                ("IOU".to_string(), r.iou),
            ]
        }
    };
    Ok(metrics)
}

/// Evaluate a model on the disc/cup test split: polar inference, inverse
/// transform, threshold, largest component, nesting, then overlap errors in
/// the full Cartesian frame.
fn evaluate_disc(
    model: &mut StdNet,
    samples: &[Sample],
    cfg_margin: usize,
    crop_size: usize,
    opts: &EvalOptions,
) -> Result<Vec<(String, Option<f64>)>> {
    let mut oe_disc = Vec::new();
    let mut oe_cup = Vec::new();
    let mut oe_total = Vec::new();
    for s in samples {
        let cropped = crop_disc_region_with(s, cfg_margin, crop_size, CropSource::CenterOrAnnotation)?;
        let polar_img = {
            let mut p = polar_transform(&cropped.image.view(), None, None)?;
            crate::data::normalize_image(&mut p);
            let mut c = cropped.clone();
            c.image = p;
            c
        };
        let seg = infer(model, &polar_img)?;
        // Inverse-map fused probabilities to the Cartesian crop.
        let fused = seg.fused.index_axis(Axis(0), 0).to_owned();
        let cart = inverse_polar(&fused.view(), None, None)?;
        let mut mask = Array3::<u8>::zeros((2, crop_size, crop_size));
        for k in 0..2 {
            let plane = cart.index_axis(Axis(0), k);
            let bin = plane.mapv(|p| u8::from(p >= opts.threshold));
            let largest = largest_component(&bin.view());
            mask.index_axis_mut(Axis(0), k).assign(&largest);
        }
        // Enforce the nesting at binarization.
        for y in 0..crop_size {
            for x in 0..crop_size {
                mask[[1, y, x]] &= mask[[0, y, x]];
            }
        }
        let rect = cropped.meta.crop.expect("crop rect recorded");
        let (h, w) = (s.image.shape()[1], s.image.shape()[2]);
        let full = paste_crop_mask(&mask, rect, h, w);
        let (d, c) = disc_cup_overlap(&full.view(), &s.mask.view())?;
        oe_disc.push(d);
        oe_cup.push(c);
        oe_total.push(match (d, c) {
            (Some(a), Some(b)) => Some(a + b),
            _ => None,
        });
    }
    Ok(vec![
        ("OE_disc".to_string(), mean_of(&oe_disc)),
        ("OE_cup".to_string(), mean_of(&oe_cup)),
        ("OE_total".to_string(), mean_of(&oe_total)),
    ])
}

/// Load the evaluation samples (full frames for disc/cup).
pub fn load_eval_samples(task: Task, cfg: &TrainConfig, split: Split) -> Result<Vec<Sample>> {
    match (&cfg.data_root, &cfg.synth) {
        (Some(root), _) => match task {
            Task::Vessel => scan_vessel_layout(root, split)?
                .iter()
                .map(|p| load_vessel_sample(p, cfg.image_size))
                .collect(),
            Task::DiscCup => scan_disc_layout(&root.join(split.dir_name()))?
                .iter()
                .map(load_disc_sample)
                .collect(),
        },
        (None, Some(synth)) => {
            let n = match split {
                Split::Train => synth.n_train,
                Split::Test => synth.n_test,
            };
            synth_generate(synth, split, n)
        }
        (None, None) => Err(Error::Config("no dataset configured".into())),
    }
}

/// Evaluate a checkpoint against a dataset and write `metrics.json` /
/// `metrics.csv` when an output directory is given.
pub fn evaluate(
    ckpt: &Path,
    data_root: &Path,
    image_size: usize,
    crop_margin: usize,
    crop_size: usize,
    opts: &EvalOptions,
    out_dir: Option<&Path>,
) -> Result<MetricsReport> {
    let (mut model, manifest) = load_model(ckpt)?;
    let samples: Vec<Sample> = match model.task {
        Task::Vessel => scan_vessel_layout(data_root, opts.split)?
            .iter()
            .map(|p| load_vessel_sample(p, image_size))
            .collect::<Result<_>>()?,
        Task::DiscCup => scan_disc_layout(&data_root.join(opts.split.dir_name()))?
            .iter()
            .map(load_disc_sample)
            .collect::<Result<_>>()?,
    };
    if samples.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let metrics = match model.task {
        Task::Vessel => evaluate_vessel(&mut model, &samples, opts)?,
        Task::DiscCup => evaluate_disc(&mut model, &samples, crop_margin, crop_size, opts)?,
    };
    let report = MetricsReport {
        dataset: format!("{}:{}", data_root.display(), opts.split),
        checkpoint: format!(
            "{} (step {})",
            ckpt.display(),
            manifest["step"].as_u64().unwrap_or(0)
        ),
        threshold: opts.threshold,
        images: samples.len(),
        metrics,
    };
    if let Some(dir) = out_dir {
        report.write(dir)?;
    }
    Ok(report)
}

/// Evaluate an in-memory model over in-memory samples (ablation runner and
/// tests share this path).
pub fn evaluate_samples(
    model: &mut StdNet,
    samples: &[Sample],
    crop_margin: usize,
    crop_size: usize,
    opts: &EvalOptions,
) -> Result<Vec<(String, Option<f64>)>> {
    match model.task {
        Task::Vessel => evaluate_vessel(model, samples, opts),
        Task::DiscCup => evaluate_disc(model, samples, crop_margin, crop_size, opts),
    }
}

/// Write Fig-3-style green-channel renderings of the decomposition:
/// `S.png`, `T.png` (signed, mapped 0.5 + T/2) and `E.png` when the
/// checkpoint has a texture block.
pub fn decompose(ckpt: &Path, image_path: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let (mut model, _) = load_model(ckpt)?;
    let mut image = crate::data::load_image_rgb(image_path)?;
    crate::data::normalize_image(&mut image);
    let dec = infer_decomposition(&mut model, &image)?;

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let green = 1usize;
    let t_g = dec.texture.index_axis(Axis(0), 0);
    let t_g = t_g.index_axis(Axis(0), green);
    let i_g = image.index_axis(Axis(0), green);

    // Quantize T first, then store S against the quantized T so that
    // S.png + (T.png inverted) rebuilds the input within one gray level.
    let mut t_png = image::GrayImage::new(w as u32, h as u32);
    let mut s_png = image::GrayImage::new(w as u32, h as u32);
    let mut e_png = None;
    for y in 0..h {
        for x in 0..w {
            let t_render = (0.5 + t_g[[y, x]] / 2.0).clamp(0.0, 1.0);
            let t_byte = (t_render * 255.0).round() as u8;
            t_png.put_pixel(x as u32, y as u32, image::Luma([t_byte]));
            let t_q = 2.0 * (t_byte as f64 / 255.0 - 0.5);
            let s_resid = (i_g[[y, x]] - t_q).clamp(0.0, 1.0);
            let s_byte = (s_resid * 255.0).round() as u8;
            s_png.put_pixel(x as u32, y as u32, image::Luma([s_byte]));
        }
    }
    if let Some(e) = infer_e_map(&mut model, &image)? {
        let mut img = image::GrayImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let v = (0.5 + e[[y, x]] / 2.0).clamp(0.0, 1.0);
                img.put_pixel(x as u32, y as u32, image::Luma([(v * 255.0).round() as u8]));
            }
        }
        e_png = Some(img);
    }

    let mut written = Vec::new();
    let s_path = out_dir.join("S.png");
    s_png.save(&s_path).map_err(|e| Error::image(&s_path, e))?;
    written.push(s_path);
    let t_path = out_dir.join("T.png");
    t_png.save(&t_path).map_err(|e| Error::image(&t_path, e))?;
    written.push(t_path);
    if let Some(img) = e_png {
        let e_path = out_dir.join("E.png");
        img.save(&e_path).map_err(|e| Error::image(&e_path, e))?;
        written.push(e_path);
    }
    Ok(written)
}

/// One ablation table row: a variant with its per-seed reports averaged.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub metrics: Vec<(String, Option<f64>)>,
}

/// Ablation study results over a shared dataset and seed set.
#[derive(Debug, Clone)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn get(&self, variant: Variant, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.variant == variant)
            .and_then(|r| r.metrics.iter().find(|(n, _)| n == metric))
            .and_then(|(_, v)| *v)
    }

    pub fn to_csv(&self) -> String {
        let mut rows: Vec<Vec<String>> = Vec::new();
        if let Some(first) = self.rows.first() {
            let mut header = vec!["variant".to_string(), "seeds".to_string()];
            header.extend(first.metrics.iter().map(|(n, _)| n.clone()));
            rows.push(header);
        }
        for row in &self.rows {
            let mut cells = vec![
                row.variant.as_str().to_string(),
                row.seeds
                    .iter()
                    .map(|s| s.to_string())
                    .collect::<Vec<_>>()
                    .join(";"),
            ];
            cells.extend(row.metrics.iter().map(|(_, v)| match v {
                Some(v) => format!("{v:.4}"),
                None => "-".to_string(),
            }));
            rows.push(cells);
        }
        metrics::align_csv(&rows)
    }
}

/// Train and evaluate every (variant, seed) pair over one shared dataset,
/// then average per variant. Writes `ablation.csv` under the base out_dir.
pub fn ablate(base: &TrainConfig, variants: &[Variant], seeds: &[u64]) -> Result<AblationTable> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs variants and seeds".into()));
    }
    base.validate()?;
    std::fs::create_dir_all(&base.out_dir).map_err(|e| Error::io(&base.out_dir, e))?;

    // Materialize the synthetic dataset once so all runs share it through
    // the regular loaders.
    let mut shared = base.clone();
    if shared.data_root.is_none() {
        let synth = shared.synth.clone().expect("validated");
        let root = shared.out_dir.join("dataset");
        if !root.join(Split::Train.dir_name()).exists() {
            crate::data::synth::materialize(&synth, &root)?;
        }
        shared.data_root = Some(root);
        if let Task::Vessel = shared.task {
            shared.image_size = synth.canvas;
        }
    }

    let opts = EvalOptions {
        threshold: shared.threshold,
        aggregation: shared.aggregation,
        split: Split::Test,
    };
    let mut rows = Vec::new();
    for &variant in variants {
        let mut reports: Vec<Vec<(String, Option<f64>)>> = Vec::new();
        for &seed in seeds {
            let mut cfg = shared.clone();
            cfg.variant = variant;
            cfg.seed = seed;
            cfg.out_dir = shared.out_dir.join(format!("{}_s{}", variant.slug(), seed));
            let outcome = train(&cfg)?;
            let report = evaluate(
                &outcome.checkpoint,
                cfg.data_root.as_ref().expect("dataset root set"),
                cfg.image_size,
                cfg.crop_margin,
                cfg.crop_size,
                &opts,
                Some(&cfg.out_dir),
            )?;
            println!(
                "[ablate] {} seed {} -> {}",
                variant,
                seed,
                report
                    .metrics
                    .iter()
                    .map(|(n, v)| format!("{n}={}", v.map(|v| format!("{v:.4}")).unwrap_or("-".into())))
                    .collect::<Vec<_>>()
                    .join(" ")
            );
            reports.push(report.metrics);
        }
        // Average each metric across seeds.
        let names: Vec<String> = reports[0].iter().map(|(n, _)| n.clone()).collect();
        let metrics = names
            .iter()
            .map(|name| {
                let vals: Vec<Option<f64>> = reports
                    .iter()
                    .map(|r| r.iter().find(|(n, _)| n == name).and_then(|(_, v)| *v))
                    .collect();
                (name.clone(), mean_of(&vals))
            })
            .collect();
        rows.push(AblationRow {
            variant,
            seeds: seeds.to_vec(),
            metrics,
        });
    }
    let table = AblationTable { rows };
    let csv_path = base.out_dir.join("ablation.csv");
    std::fs::write(&csv_path, table.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
    Ok(table)
}
