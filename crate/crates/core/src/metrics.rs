//! Evaluation metrics: confusion-based rates, rank AUC and region overlap
//! error, plus report serialization.
//!
//! Rates with an undefined denominator come back as `None` rather than NaN.
//! When a field-of-view mask is present, only pixels inside it count.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{ArrayView2, ArrayView3};

use crate::error::{Error, Result};

/// Pixel confusion counts over the evaluated region.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }
}

/// Threshold-free rates derived from confusion counts.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Rates {
    pub acc: Option<f64>,
    pub sen: Option<f64>,
    pub spe: Option<f64>,
    pub iou: Option<f64>,
}

fn check_binary(name: &str, m: &ArrayView2<u8>) -> Result<()> {
    if m.iter().all(|&v| v <= 1) {
        Ok(())
    } else {
        Err(Error::Invalid(format!("{name}: non-binary values")))
    }
}

/// Count confusion entries of `pred` against `gt`, restricted to `fov == 1`
/// when a FOV mask is given.
pub fn confusion(
    pred: &ArrayView2<u8>,
    gt: &ArrayView2<u8>,
    fov: Option<&ArrayView2<u8>>,
) -> Result<ConfusionCounts> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "confusion: pred {:?} vs gt {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    if let Some(f) = fov {
        if f.shape() != pred.shape() {
            return Err(Error::Shape(format!(
                "confusion: fov {:?} vs pred {:?}",
                f.shape(),
                pred.shape()
            )));
        }
        check_binary("fov", f)?;
    }
    check_binary("pred", pred)?;
    check_binary("gt", gt)?;

    let mut c = ConfusionCounts::default();
    for ((idx, &p), &g) in pred.indexed_iter().zip(gt.iter()) {
        if let Some(f) = fov {
            if f[idx] == 0 {
                continue;
            }
        }
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 0) => c.tn += 1,
            (0, 1) => c.fn_ += 1,
            _ => unreachable!(),
        }
    }
    Ok(c)
}

/// Accuracy, sensitivity, specificity and IoU from counts. Undefined
/// denominators yield `None`.
pub fn rates(c: &ConfusionCounts) -> Result<Rates> {
    let total = c.total();
    if total == 0 {
        return Err(Error::EmptyRegion);
    }
    let div = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
    Ok(Rates {
        acc: Some((c.tp + c.tn) as f64 / total as f64),
        sen: div(c.tp, c.tp + c.fn_),
        spe: div(c.tn, c.tn + c.fp),
        iou: div(c.tp, c.tp + c.fp + c.fn_),
    })
}

/// Area under the ROC curve via the rank (Mann-Whitney) statistic, ties
/// counted one half. `None` when only one class is present.
pub fn auc(
    probs: &ArrayView2<f64>,
    gt: &ArrayView2<u8>,
    fov: Option<&ArrayView2<u8>>,
) -> Result<Option<f64>> {
    if probs.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "auc: probs {:?} vs gt {:?}",
            probs.shape(),
            gt.shape()
        )));
    }
    check_binary("gt", gt)?;
    if !probs.iter().all(|&p| (0.0..=1.0).contains(&p)) {
        return Err(Error::Invalid("auc: probabilities outside [0,1]".into()));
    }
    let mut scored: Vec<(f64, u8)> = Vec::new();
    for ((idx, &p), &g) in probs.indexed_iter().zip(gt.iter()) {
        if let Some(f) = fov {
            if f[idx] == 0 {
                continue;
            }
        }
        scored.push((p, g));
    }
    let n_pos = scored.iter().filter(|(_, g)| *g == 1).count() as f64;
    let n_neg = scored.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return Ok(None);
    }
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    // Average ranks over tie groups, then the Mann-Whitney U statistic.
    let mut rank_sum_pos = 0.0;
    let mut i = 0usize;
    while i < scored.len() {
        let mut j = i;
        while j + 1 < scored.len() && scored[j + 1].0 == scored[i].0 {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0; // ranks are 1-based
        let pos_in_group = scored[i..=j].iter().filter(|(_, g)| *g == 1).count() as f64;
        rank_sum_pos += avg_rank * pos_in_group;
        i = j + 1;
    }
    let u = rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0;
    Ok(Some(u / (n_pos * n_neg)))
}

/// Overlap error `1 - |A and B| / |A or B|`; `None` when both regions are
/// empty.
pub fn overlap_error(pred: &ArrayView2<u8>, gt: &ArrayView2<u8>) -> Result<Option<f64>> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "overlap_error: pred {:?} vs gt {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    check_binary("pred", pred)?;
    check_binary("gt", gt)?;
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        if p == 1 && g == 1 {
            inter += 1;
        }
        if p == 1 || g == 1 {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(None);
    }
    Ok(Some(1.0 - inter as f64 / union as f64))
}

/// Keep only the largest 4-connected component of a binary mask.
pub fn largest_component(mask: &ArrayView2<u8>) -> ndarray::Array2<u8> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let mut label = vec![0u32; h * w];
    let mut best: (u32, usize) = (0, 0); // (label, size)
    let mut next = 0u32;
    let mut stack = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            if mask[[sy, sx]] == 0 || label[sy * w + sx] != 0 {
                continue;
            }
            next += 1;
            let mut size = 0usize;
            stack.push((sy, sx));
            label[sy * w + sx] = next;
            while let Some((y, x)) = stack.pop() {
                size += 1;
                let mut visit = |ny: usize, nx: usize| {
                    if mask[[ny, nx]] == 1 && label[ny * w + nx] == 0 {
                        label[ny * w + nx] = next;
                        stack.push((ny, nx));
                    }
                };
                if y > 0 {
                    visit(y - 1, x);
                }
                if y + 1 < h {
                    visit(y + 1, x);
                }
                if x > 0 {
                    visit(y, x - 1);
                }
                if x + 1 < w {
                    visit(y, x + 1);
                }
            }
            if size > best.1 {
                best = (next, size);
            }
        }
    }
    let mut out = ndarray::Array2::<u8>::zeros((h, w));
    if best.1 > 0 {
        for y in 0..h {
            for x in 0..w {
                out[[y, x]] = u8::from(label[y * w + x] == best.0);
            }
        }
    }
    out
}

/// How per-image metrics combine into a dataset report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum Aggregation {
    /// Mean of per-image metric values (images with undefined metrics are
    /// skipped for that metric).
    #[default]
    PerImageMean,
    /// Rates computed once on summed confusion counts (AUC over pooled
    /// pixels).
    Pooled,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_image" => Ok(Aggregation::PerImageMean),
            "pooled" => Ok(Aggregation::Pooled),
            other => Err(Error::Config(format!(
                "unknown metric_aggregation {other:?} (expected per_image|pooled)"
            ))),
        }
    }
}

/// Named metric values with provenance.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub checkpoint: String,
    pub threshold: f64,
    /// Number of evaluated images.
    pub images: usize,
    /// Metric values in presentation order; `None` marks an undefined value.
    pub metrics: Vec<(String, Option<f64>)>,
}

impl MetricsReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, v)| *v)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut map = serde_json::Map::new();
        map.insert("dataset".into(), self.dataset.clone().into());
        map.insert("checkpoint".into(), self.checkpoint.clone().into());
        map.insert("threshold".into(), self.threshold.into());
        map.insert("images".into(), (self.images as u64).into());
        let mut metric_map = serde_json::Map::new();
        for (name, value) in &self.metrics {
            metric_map.insert(
                name.clone(),
                value.map(serde_json::Value::from).unwrap_or(serde_json::Value::Null),
            );
        }
        map.insert("metrics".into(), metric_map.into());
        Ok(serde_json::to_string_pretty(&serde_json::Value::Object(map))? + "\n")
    }

    /// Aligned-column CSV: one header row plus one value row.
    pub fn to_csv(&self) -> String {
        let mut names = vec!["dataset".to_string(), "checkpoint".to_string()];
        let mut values = vec![self.dataset.clone(), self.checkpoint.clone()];
        for (name, value) in &self.metrics {
            names.push(name.clone());
            values.push(match value {
                Some(v) => format!("{v:.4}"),
                None => "-".to_string(),
            });
        }
        align_csv(&[names, values])
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json_path = dir.join("metrics.json");
        std::fs::write(&json_path, self.to_json()?).map_err(|e| Error::io(&json_path, e))?;
        let csv_path = dir.join("metrics.csv");
        std::fs::write(&csv_path, self.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
        Ok(())
    }
}

/// Pad every column to its widest cell so the CSV reads as a table.
pub fn align_csv(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut widths = vec![0usize; cols];
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            let sep = if i + 1 == row.len() { "\n" } else { ", " };
            let _ = write!(out, "{cell:<width$}{sep}", width = widths[i]);
        }
    }
    out
}


/// Overlap errors of a two-channel disc/cup prediction; callers sum
/// `oe_disc + oe_cup` into `oe_total`.
pub fn disc_cup_overlap(
    pred: &ArrayView3<u8>,
    gt: &ArrayView3<u8>,
) -> Result<(Option<f64>, Option<f64>)> {
    if pred.shape() != gt.shape() || pred.shape()[0] != 2 {
        return Err(Error::Shape(format!(
            "disc_cup_overlap: pred {:?} vs gt {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let oe_disc = overlap_error(
        &pred.index_axis(ndarray::Axis(0), 0),
        &gt.index_axis(ndarray::Axis(0), 0),
    )?;
    let oe_cup = overlap_error(
        &pred.index_axis(ndarray::Axis(0), 1),
        &gt.index_axis(ndarray::Axis(0), 1),
    )?;
    Ok((oe_disc, oe_cup))
}
