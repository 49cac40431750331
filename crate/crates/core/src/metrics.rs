//! Segmentation losses, confusion-count metrics and throughput.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::imgproc::BinaryMask;
use crate::{Error, Result};

/// Lower clamp applied to `p_t` before taking its logarithm.
pub const LOG_CLAMP: f64 = 1e-7;
/// Smoothing term added to the Dice numerator and denominator.
pub const DICE_EPS: f64 = 1e-6;
pub const DEFAULT_GAMMA: f64 = 4.0;
pub const DEFAULT_LAMBDA_DICE: f64 = 0.8;
pub const DEFAULT_LAMBDA_FOCAL: f64 = 0.2;

fn check_len(p: &[f64], y: &[f64]) -> Result<()> {
    if p.len() != y.len() {
        return Err(Error::Shape(format!("prediction has {} values, target {}", p.len(), y.len())));
    }
    if p.is_empty() {
        return Err(Error::InvalidArgument("loss over an empty map".into()));
    }
    Ok(())
}

/// Mean focal loss `−(1 − p_t)^γ · ln p_t` with `p_t = p` where the target
/// is 1 and `1 − p` elsewhere.
pub fn focal_loss(p: &[f64], y: &[f64], gamma: f64) -> Result<f64> {
    check_len(p, y)?;
    let total: f64 = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let pt = if y >= 0.5 { p } else { 1.0 - p };
            -(1.0 - pt).powf(gamma) * pt.max(LOG_CLAMP).ln()
        })
        .sum();
    Ok(total / p.len() as f64)
}

/// `1 − (2Σpg + ε) / (Σp² + Σg² + ε)`.
pub fn dice_loss(p: &[f64], g: &[f64]) -> Result<f64> {
    check_len(p, g)?;
    let (mut pg, mut pp, mut gg) = (0.0, 0.0, 0.0);
    for (&p, &g) in p.iter().zip(g) {
        pg += p * g;
        pp += p * p;
        gg += g * g;
    }
    Ok(1.0 - (2.0 * pg + DICE_EPS) / (pp + gg + DICE_EPS))
}

/// `λ_dice · dice_loss + λ_focal · focal_loss`.
pub fn dice_focal_loss(p: &[f64], y: &[f64], lambda_dice: f64, lambda_focal: f64, gamma: f64) -> Result<f64> {
    Ok(lambda_dice * dice_loss(p, y)? + lambda_focal * focal_loss(p, y, gamma)?)
}

/// Mask values as `f64` for the loss functions.
pub fn mask_values(m: &BinaryMask) -> Vec<f64> {
    m.data().iter().map(|&v| v as f64).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
    pub dice: f64,
    pub counts: ConfusionCounts,
}

fn ratio(num: u64, den: u64, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

impl MetricReport {
    /// Precision and recall are 0 when their denominators vanish; IoU and
    /// Dice of two empty masks are 1.
    pub fn from_counts(counts: ConfusionCounts) -> Self {
        let ConfusionCounts { tp, fp, fn_, .. } = counts;
        Self {
            precision: ratio(tp, tp + fp, 0.0),
            recall: ratio(tp, tp + fn_, 0.0),
            iou: ratio(tp, tp + fp + fn_, 1.0),
            dice: ratio(2 * tp, 2 * tp + fp + fn_, 1.0),
            counts,
        }
    }
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    pred.ensure_same_dims(gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn evaluate_mask(pred: &BinaryMask, gt: &BinaryMask) -> Result<MetricReport> {
    Ok(MetricReport::from_counts(confusion(pred, gt)?))
}

/// How per-image metrics combine into dataset figures.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Unweighted mean of per-image metrics.
    #[default]
    ImageMean,
    /// Metrics of the summed confusion counts.
    PixelPooled,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image-mean" => Ok(Aggregation::ImageMean),
            "pixel-pooled" => Ok(Aggregation::PixelPooled),
            other => Err(Error::Config(format!("unknown aggregation '{other}'"))),
        }
    }
}

pub fn aggregate(reports: &[MetricReport], mode: Aggregation) -> Option<MetricReport> {
    if reports.is_empty() {
        return None;
    }
    let mut counts = ConfusionCounts::default();
    for r in reports {
        counts.merge(&r.counts);
    }
    Some(match mode {
        Aggregation::PixelPooled => MetricReport::from_counts(counts),
        Aggregation::ImageMean => {
            let n = reports.len() as f64;
            let mean = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
            MetricReport {
                precision: mean(|r| r.precision),
                recall: mean(|r| r.recall),
                iou: mean(|r| r.iou),
                dice: mean(|r| r.dice),
                counts,
            }
        }
    })
}

pub fn fps(frames: usize, elapsed: Duration) -> Result<f64> {
    if frames == 0 {
        return Err(Error::InvalidArgument("no completed frames".into()));
    }
    let secs = elapsed.as_secs_f64();
    if secs <= 0.0 {
        return Err(Error::InvalidArgument("zero elapsed time".into()));
    }
    Ok(frames as f64 / secs)
}

/// Accumulates per-stage and end-to-end wall time over a run.
#[derive(Clone, Debug, Default)]
pub struct FpsMeter {
    frames: usize,
    total: Duration,
    stages: BTreeMap<String, Duration>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub frames: usize,
    pub total_seconds: f64,
    pub total_fps: f64,
    pub stage_seconds: BTreeMap<String, f64>,
    pub stage_fps: BTreeMap<String, f64>,
}

impl FpsMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_stage(&mut self, stage: &str, elapsed: Duration) {
        *self.stages.entry(stage.to_string()).or_default() += elapsed;
    }

    pub fn finish_frame(&mut self, elapsed: Duration) {
        self.frames += 1;
        self.total += elapsed;
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn report(&self) -> Result<ThroughputReport> {
        let total_fps = fps(self.frames, self.total)?;
        let stage_seconds = self.stages.iter().map(|(k, v)| (k.clone(), v.as_secs_f64())).collect();
        let stage_fps = self
            .stages
            .iter()
            .map(|(k, v)| {
                // a stage too fast to register gets an infinite rate; clamp to
                // something JSON can carry
                let f = fps(self.frames, *v).unwrap_or(f64::MAX);
                (k.clone(), f)
            })
            .collect();
        Ok(ThroughputReport {
            frames: self.frames,
            total_seconds: self.total.as_secs_f64(),
            total_fps,
            stage_seconds,
            stage_fps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_values() {
        let v = focal_loss(&[0.5], &[1.0], 4.0).unwrap();
        assert!((v - 0.0625 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((v - 0.0433217).abs() < 1e-6);
        assert_eq!(focal_loss(&[1.0, 0.0], &[1.0, 0.0], 4.0).unwrap(), 0.0);
        let ce = focal_loss(&[0.8, 0.3], &[1.0, 0.0], 0.0).unwrap();
        assert!((ce - (-(0.8f64.ln()) - 0.7f64.ln()) / 2.0).abs() < 1e-12);
        // log clamp keeps a confident miss finite
        assert!(focal_loss(&[0.0], &[1.0], 4.0).unwrap().is_finite());
    }

    #[test]
    fn focal_decreases_with_gamma_on_easy_pixels() {
        let lo = focal_loss(&[0.8], &[1.0], 1.0).unwrap();
        let hi = focal_loss(&[0.8], &[1.0], 4.0).unwrap();
        assert!(hi < lo);
    }

    #[test]
    fn dice_values() {
        assert!((dice_loss(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - 1.0 / 3.0).abs() < 1e-6);
        assert!(dice_loss(&[1.0, 1.0, 0.0], &[1.0, 1.0, 0.0]).unwrap().abs() < 1e-6);
        assert!((dice_loss(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(dice_loss(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert!(dice_loss(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn dice_focal_combination() {
        let p = [0.5];
        let y = [1.0];
        let combined = dice_focal_loss(&p, &y, 0.8, 0.2, 4.0).unwrap();
        let expected = 0.8 * dice_loss(&p, &y).unwrap() + 0.2 * focal_loss(&p, &y, 4.0).unwrap();
        assert_eq!(combined, expected);
        assert_eq!(dice_focal_loss(&p, &y, 1.0, 0.0, 4.0).unwrap(), dice_loss(&p, &y).unwrap());
        assert!(dice_focal_loss(&[1.0, 0.0], &[1.0, 0.0], 0.8, 0.2, 4.0).unwrap().abs() < 1e-6);
    }

    #[test]
    fn metric_cases() {
        let gt = BinaryMask::from_fn(4, 4, |x, _| x < 2);
        let perfect = evaluate_mask(&gt, &gt).unwrap();
        assert_eq!((perfect.precision, perfect.recall, perfect.iou, perfect.dice), (1.0, 1.0, 1.0, 1.0));

        let empty = evaluate_mask(&BinaryMask::new(4, 4), &gt).unwrap();
        assert_eq!((empty.precision, empty.recall, empty.iou, empty.dice), (0.0, 0.0, 0.0, 0.0));

        let half = BinaryMask::from_fn(4, 4, |x, _| x == 0);
        let r = evaluate_mask(&half, &gt).unwrap();
        assert_eq!(r.precision, 1.0);
        assert_eq!(r.recall, 0.5);
        assert_eq!(r.iou, 0.5);
        assert!((r.dice - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.counts.total(), 16);
    }

    #[test]
    fn aggregation_modes() {
        let gt = BinaryMask::from_fn(4, 1, |x, _| x < 2);
        let a = evaluate_mask(&gt, &gt).unwrap();
        let b = evaluate_mask(&BinaryMask::new(4, 1), &gt).unwrap();
        let mean = aggregate(&[a.clone(), b.clone()], Aggregation::ImageMean).unwrap();
        assert_eq!(mean.dice, 0.5);
        let pooled = aggregate(&[a, b], Aggregation::PixelPooled).unwrap();
        assert_eq!(pooled.counts.tp, 2);
        assert!((pooled.dice - 4.0 / 6.0).abs() < 1e-12);
        assert!(aggregate(&[], Aggregation::ImageMean).is_none());
    }

    #[test]
    fn fps_values() {
        assert_eq!(fps(10, Duration::from_secs(2)).unwrap(), 5.0);
        assert_eq!(fps(1, Duration::from_millis(500)).unwrap(), 2.0);
        assert!(fps(0, Duration::from_secs(1)).is_err());
        assert!(FpsMeter::new().report().is_err());
    }
}
