//! Precision, normalized precision and success curves, plus the
//! per-frame maximum variants used by dual-annotation benchmarks.

use super::attributes::AttributeFlags;
use super::bbox::{center_error, iou, norm_center_error, BoundingBox};
use crate::{Error, Result};

/// Tracker output and annotations for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRecord {
    pub name: String,
    pub predicted: Vec<BoundingBox>,
    pub gt_visible: Vec<BoundingBox>,
    pub gt_thermal: Option<Vec<BoundingBox>>,
    pub attributes: Option<AttributeFlags>,
}

impl SequenceRecord {
    pub fn new(name: impl Into<String>, predicted: Vec<BoundingBox>, gt_visible: Vec<BoundingBox>) -> Self {
        Self { name: name.into(), predicted, gt_visible, gt_thermal: None, attributes: None }
    }

    pub fn with_thermal(mut self, gt: Vec<BoundingBox>) -> Self {
        self.gt_thermal = Some(gt);
        self
    }

    pub fn with_attributes(mut self, flags: AttributeFlags) -> Self {
        self.attributes = Some(flags);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.predicted.len();
        let mut bad = Vec::new();
        if self.gt_visible.len() != n {
            bad.push(format!("visible gt has {} frames", self.gt_visible.len()));
        }
        if let Some(t) = &self.gt_thermal {
            if t.len() != n {
                bad.push(format!("thermal gt has {} frames", t.len()));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Input(format!("sequence {}: {n} predictions but {}", self.name, bad.join(", "))))
        }
    }
}

/// Evenly spaced thresholds `i · max / steps` for `i = 0..=steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdGrid {
    pub max: f64,
    pub steps: usize,
}

impl ThresholdGrid {
    pub fn thresholds(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| i as f64 * self.max / self.steps as f64).collect()
    }
}

/// Which annotation PR/NPR/SR score against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GtReference {
    Visible,
    /// Per-frame best of visible and thermal annotations.
    Max,
}

/// How frames from different sequences are pooled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    /// Every valid frame counts once.
    Frames,
    /// Per-sequence curves averaged with equal weight.
    Sequences,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub precision: ThresholdGrid,
    pub precision_at: f64,
    pub norm_precision: ThresholdGrid,
    pub norm_precision_at: f64,
    pub success: ThresholdGrid,
    pub reference: GtReference,
    pub aggregation: Aggregation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            precision: ThresholdGrid { max: 50.0, steps: 50 },
            precision_at: 20.0,
            norm_precision: ThresholdGrid { max: 0.5, steps: 50 },
            norm_precision_at: 0.2,
            success: ThresholdGrid { max: 1.0, steps: 20 },
            reference: GtReference::Visible,
            aggregation: Aggregation::Frames,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricCurve {
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
    pub representative: f64,
    /// Frames that contributed after excluding absent-target frames.
    pub frames: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Measure {
    CenterError,
    NormCenterError,
    Overlap,
}

impl Measure {
    fn score(self, pred: &BoundingBox, gt: &BoundingBox) -> Option<f64> {
        match self {
            Measure::CenterError => center_error(pred, gt),
            Measure::NormCenterError => norm_center_error(pred, gt),
            Measure::Overlap => (!gt.is_absent()).then(|| iou(pred, gt)),
        }
    }

    /// Whether a frame with score `s` passes threshold `t`.
    fn passes(self, s: f64, t: f64) -> bool {
        match self {
            Measure::Overlap => s > t,
            _ => s <= t,
        }
    }

    fn better(self, a: f64, b: f64) -> f64 {
        match self {
            Measure::Overlap => a.max(b),
            _ => a.min(b),
        }
    }
}

/// Per-frame scores of one sequence. Frames whose visible annotation is
/// absent are dropped for every reference, so max-fused curves share the
/// frame set of the visible-only ones.
fn frame_scores(rec: &SequenceRecord, measure: Measure, reference: GtReference) -> Vec<f64> {
    let thermal = match reference {
        GtReference::Max => rec.gt_thermal.as_deref(),
        GtReference::Visible => None,
    };
    rec.predicted
        .iter()
        .enumerate()
        .filter_map(|(i, pred)| {
            let v = measure.score(pred, rec.gt_visible.get(i)?)?;
            match thermal.and_then(|t| t.get(i)).and_then(|gt| measure.score(pred, gt)) {
                Some(t) => Some(measure.better(v, t)),
                None => Some(v),
            }
        })
        .collect()
}

fn fraction_passing(scores: &[f64], measure: Measure, t: f64) -> f64 {
    scores.iter().filter(|&&s| measure.passes(s, t)).count() as f64 / scores.len() as f64
}

fn curve(
    records: &[SequenceRecord],
    measure: Measure,
    reference: GtReference,
    grid: ThresholdGrid,
    at: Option<f64>,
    aggregation: Aggregation,
) -> Result<MetricCurve> {
    for r in records {
        r.validate()?;
    }
    let thresholds = grid.thresholds();
    let per_seq: Vec<Vec<f64>> =
        records.iter().map(|r| frame_scores(r, measure, reference)).filter(|s| !s.is_empty()).collect();
    let frames: usize = per_seq.iter().map(Vec::len).sum();
    if frames == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let eval_at = |t: f64| -> f64 {
        match aggregation {
            Aggregation::Frames => {
                let passing: usize = per_seq.iter().map(|s| s.iter().filter(|&&v| measure.passes(v, t)).count()).sum();
                passing as f64 / frames as f64
            }
            Aggregation::Sequences => {
                per_seq.iter().map(|s| fraction_passing(s, measure, t)).sum::<f64>() / per_seq.len() as f64
            }
        }
    };
    let values: Vec<f64> = thresholds.iter().map(|&t| eval_at(t)).collect();
    let representative = match at {
        Some(t) => eval_at(t),
        None => values.iter().sum::<f64>() / values.len() as f64,
    };
    Ok(MetricCurve { thresholds, values, representative, frames })
}

/// PR: fraction of frames whose center error is at most each threshold.
pub fn precision_curve(records: &[SequenceRecord], cfg: &EvalConfig) -> Result<MetricCurve> {
    curve(records, Measure::CenterError, cfg.reference, cfg.precision, Some(cfg.precision_at), cfg.aggregation)
}

/// NPR: precision on size-normalized center error.
pub fn norm_precision_curve(records: &[SequenceRecord], cfg: &EvalConfig) -> Result<MetricCurve> {
    curve(
        records,
        Measure::NormCenterError,
        cfg.reference,
        cfg.norm_precision,
        Some(cfg.norm_precision_at),
        cfg.aggregation,
    )
}

/// SR: fraction of frames with IoU strictly above each threshold; the
/// representative value is the mean over the grid (AUC).
pub fn success_curve(records: &[SequenceRecord], cfg: &EvalConfig) -> Result<MetricCurve> {
    curve(records, Measure::Overlap, cfg.reference, cfg.success, None, cfg.aggregation)
}

/// MPR and MSR curves.
#[derive(Clone, Debug, PartialEq)]
pub struct MaxFused {
    pub mpr: MetricCurve,
    pub msr: MetricCurve,
    /// Set when some sequence lacked thermal annotations and was scored
    /// against the visible annotation alone.
    pub fallback: bool,
}

/// Scores each frame against both annotations and keeps the better one
/// before thresholding.
pub fn max_fuse(records: &[SequenceRecord], cfg: &EvalConfig) -> Result<MaxFused> {
    let fallback = records.iter().any(|r| r.gt_thermal.is_none());
    let mpr =
        curve(records, Measure::CenterError, GtReference::Max, cfg.precision, Some(cfg.precision_at), cfg.aggregation)?;
    let msr = curve(records, Measure::Overlap, GtReference::Max, cfg.success, None, cfg.aggregation)?;
    Ok(MaxFused { mpr, msr, fallback })
}

/// All curves for one set of sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub pr: MetricCurve,
    pub npr: MetricCurve,
    pub sr: MetricCurve,
    pub max: MaxFused,
}

pub fn evaluate(records: &[SequenceRecord], cfg: &EvalConfig) -> Result<Evaluation> {
    Ok(Evaluation {
        pr: precision_curve(records, cfg)?,
        npr: norm_precision_curve(records, cfg)?,
        sr: success_curve(records, cfg)?,
        max: max_fuse(records, cfg)?,
    })
}
