//! Segmentation metrics (Dice, IoU, accuracy, precision, recall, Hausdorff
//! distance, relative area difference) and class-balanced loss weights.
//!
//! Degenerate-case conventions, chosen so every metric is total:
//! - a class absent from both masks scores dice = iou = 1;
//! - Hausdorff with an empty foreground on either side returns the image
//!   diagonal and sets the `flagged` bit;
//! - RAD with an empty reference foreground is undefined: the report carries
//!   `rad_defined = false` and a value of 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense label mask, row-major, class indices in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMask {
    pub h: usize,
    pub w: usize,
    pub labels: Vec<u32>,
}

impl SegmentationMask {
    pub fn new(h: usize, w: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != h * w {
            return Err(Error::ShapeMismatch(format!(
                "mask has {} labels for {}x{}",
                labels.len(),
                h,
                w
            )));
        }
        Ok(Self { h, w, labels })
    }

    pub fn validate_classes(&self, num_classes: usize) -> Result<()> {
        if let Some(&bad) = self.labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {} outside [0, {})",
                bad, num_classes
            )));
        }
        Ok(())
    }

    fn foreground(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != 0)
            .map(move |(p, _)| (p / self.w, p % self.w))
    }
}

/// One-vs-rest confusion counts for a single class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClassStats {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

pub fn confusion_stats(
    pred: &SegmentationMask,
    reference: &SegmentationMask,
    num_classes: usize,
) -> Result<Vec<ClassStats>> {
    if (pred.h, pred.w) != (reference.h, reference.w) {
        return Err(Error::ShapeMismatch(format!(
            "pred {}x{} vs reference {}x{}",
            pred.h, pred.w, reference.h, reference.w
        )));
    }
    pred.validate_classes(num_classes)?;
    reference.validate_classes(num_classes)?;
    let mut stats = vec![ClassStats::default(); num_classes];
    for (&p, &r) in pred.labels.iter().zip(&reference.labels) {
        for (c, s) in stats.iter_mut().enumerate() {
            let c = c as u32;
            match (p == c, r == c) {
                (true, true) => s.tp += 1,
                (true, false) => s.fp += 1,
                (false, true) => s.fn_ += 1,
                (false, false) => s.tn += 1,
            }
        }
    }
    Ok(stats)
}

/// `2TP / (2TP + FP + FN)`; 1 when the class is absent from both masks.
/// Computed as `2j / (1 + j)` from the Jaccard index so the identity between
/// the two overlap scores holds bit-for-bit, not just up to rounding.
pub fn dice(s: ClassStats) -> f64 {
    let j = iou(s);
    2.0 * j / (1.0 + j)
}

/// `TP / (TP + FP + FN)`; 1 when the class is absent from both masks.
pub fn iou(s: ClassStats) -> f64 {
    let denom = s.tp + s.fp + s.fn_;
    if denom == 0 {
        1.0
    } else {
        s.tp as f64 / denom as f64
    }
}

pub fn precision(s: ClassStats) -> f64 {
    let denom = s.tp + s.fp;
    if denom == 0 {
        1.0
    } else {
        s.tp as f64 / denom as f64
    }
}

pub fn recall(s: ClassStats) -> f64 {
    let denom = s.tp + s.fn_;
    if denom == 0 {
        1.0
    } else {
        s.tp as f64 / denom as f64
    }
}

pub fn accuracy(pred: &SegmentationMask, reference: &SegmentationMask) -> Result<f64> {
    if (pred.h, pred.w) != (reference.h, reference.w) {
        return Err(Error::ShapeMismatch("accuracy over unequal mask extents".into()));
    }
    if pred.labels.is_empty() {
        return Ok(1.0);
    }
    let correct = pred.labels.iter().zip(&reference.labels).filter(|(a, b)| a == b).count();
    Ok(correct as f64 / pred.labels.len() as f64)
}

/// Foreground boundary pixels: nonzero label with at least one of the four
/// neighbours outside the foreground (the image border counts as background).
pub fn boundary_pixels(mask: &SegmentationMask) -> Vec<(usize, usize)> {
    let fg = |i: isize, j: isize| -> bool {
        i >= 0
            && j >= 0
            && (i as usize) < mask.h
            && (j as usize) < mask.w
            && mask.labels[i as usize * mask.w + j as usize] != 0
    };
    mask.foreground()
        .filter(|&(i, j)| {
            let (i, j) = (i as isize, j as isize);
            !(fg(i - 1, j) && fg(i + 1, j) && fg(i, j - 1) && fg(i, j + 1))
        })
        .collect()
}

fn directed_hausdorff(from: &[(usize, usize)], to: &[(usize, usize)]) -> f64 {
    from.iter()
        .map(|&(ai, aj)| {
            to.iter()
                .map(|&(bi, bj)| {
                    let di = ai as f64 - bi as f64;
                    let dj = aj as f64 - bj as f64;
                    di * di + dj * dj
                })
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
        .sqrt()
}

/// Symmetric Hausdorff distance between the two boundary sets, in pixels.
/// Returns `(distance, flagged)`; an empty foreground on either side yields
/// the image diagonal with the flag set.
pub fn hausdorff(pred: &SegmentationMask, reference: &SegmentationMask) -> Result<(f64, bool)> {
    if (pred.h, pred.w) != (reference.h, reference.w) {
        return Err(Error::ShapeMismatch("hausdorff over unequal mask extents".into()));
    }
    let a = boundary_pixels(pred);
    let b = boundary_pixels(reference);
    if a.is_empty() || b.is_empty() {
        let diag = ((pred.h * pred.h + pred.w * pred.w) as f64).sqrt();
        return Ok((diag, true));
    }
    Ok((directed_hausdorff(&a, &b).max(directed_hausdorff(&b, &a)), false))
}

/// Relative area difference in percent: `100 (area_pred - area_ref) / area_ref`.
/// Negative values mean under-segmentation. Returns `(value, defined)`;
/// undefined (0, false) when the reference foreground is empty.
pub fn rad(pred: &SegmentationMask, reference: &SegmentationMask) -> Result<(f64, bool)> {
    if (pred.h, pred.w) != (reference.h, reference.w) {
        return Err(Error::ShapeMismatch("rad over unequal mask extents".into()));
    }
    let area = |m: &SegmentationMask| m.labels.iter().filter(|&&l| l != 0).count() as f64;
    let ra = area(reference);
    if ra == 0.0 {
        return Ok((0.0, false));
    }
    Ok((100.0 * (area(pred) - ra) / ra, true))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub dice_per_class: Vec<f64>,
    pub iou_per_class: Vec<f64>,
    pub mean_dice: f64,
    pub mean_iou: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    /// Pixels at evaluation resolution.
    pub hausdorff: f64,
    /// Set when either foreground was empty and the diagonal sentinel applies.
    pub hausdorff_flagged: bool,
    /// Percent, signed.
    pub rad: f64,
    pub rad_defined: bool,
}

/// Full metric suite for one mask pair. With `foreground_only`, mDice/mIoU
/// average over classes 1.. instead of all classes.
pub fn evaluate_pair(
    pred: &SegmentationMask,
    reference: &SegmentationMask,
    num_classes: usize,
    foreground_only: bool,
) -> Result<MetricsReport> {
    let stats = confusion_stats(pred, reference, num_classes)?;
    let dice_per_class: Vec<f64> = stats.iter().map(|&s| dice(s)).collect();
    let iou_per_class: Vec<f64> = stats.iter().map(|&s| iou(s)).collect();
    let start = if foreground_only { 1 } else { 0 };
    let mean = |v: &[f64]| v[start..].iter().sum::<f64>() / (v.len() - start) as f64;
    // precision/recall over foreground classes (the foreground class itself
    // in the binary case)
    let fg = &stats[1..];
    let precision = fg.iter().map(|&s| self::precision(s)).sum::<f64>() / fg.len() as f64;
    let recall = fg.iter().map(|&s| self::recall(s)).sum::<f64>() / fg.len() as f64;
    let (hd, hd_flagged) = hausdorff(pred, reference)?;
    let (rad_v, rad_defined) = rad(pred, reference)?;
    Ok(MetricsReport {
        mean_dice: mean(&dice_per_class),
        mean_iou: mean(&iou_per_class),
        dice_per_class,
        iou_per_class,
        accuracy: accuracy(pred, reference)?,
        precision,
        recall,
        hausdorff: hd,
        hausdorff_flagged: hd_flagged,
        rad: rad_v,
        rad_defined,
    })
}

/// Elementwise mean of per-image reports, in input order.
pub fn mean_reports(reports: &[MetricsReport]) -> Result<MetricsReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::InvalidArgument("mean over zero metric reports".into()))?;
    let k = first.dice_per_class.len();
    let n = reports.len() as f64;
    let mut out = MetricsReport {
        dice_per_class: vec![0.0; k],
        iou_per_class: vec![0.0; k],
        mean_dice: 0.0,
        mean_iou: 0.0,
        accuracy: 0.0,
        precision: 0.0,
        recall: 0.0,
        hausdorff: 0.0,
        hausdorff_flagged: false,
        rad: 0.0,
        rad_defined: true,
    };
    for r in reports {
        if r.dice_per_class.len() != k {
            return Err(Error::ShapeMismatch("metric reports disagree on class count".into()));
        }
        for c in 0..k {
            out.dice_per_class[c] += r.dice_per_class[c] / n;
            out.iou_per_class[c] += r.iou_per_class[c] / n;
        }
        out.mean_dice += r.mean_dice / n;
        out.mean_iou += r.mean_iou / n;
        out.accuracy += r.accuracy / n;
        out.precision += r.precision / n;
        out.recall += r.recall / n;
        out.hausdorff += r.hausdorff / n;
        out.hausdorff_flagged |= r.hausdorff_flagged;
        out.rad += r.rad / n;
        out.rad_defined &= r.rad_defined;
    }
    Ok(out)
}

/// Effective-number class weights `w_c = (1 - beta) / (1 - beta^{n_c})`,
/// normalized to mean 1 over the classes that occur. Classes with zero
/// pixels are dropped from weighting (weight 0).
pub fn class_weights(pixel_counts: &[u64], beta: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!("beta must be in [0, 1), got {}", beta)));
    }
    if pixel_counts.is_empty() {
        return Err(Error::InvalidArgument("class_weights over zero classes".into()));
    }
    let raw: Vec<f64> = pixel_counts
        .iter()
        .map(|&n| {
            if n == 0 {
                0.0
            } else if beta == 0.0 {
                1.0
            } else {
                (1.0 - beta) / (1.0 - beta.powi(n.min(i32::MAX as u64) as i32))
            }
        })
        .collect();
    let present = raw.iter().filter(|&&w| w > 0.0).count();
    if present == 0 {
        return Err(Error::InvalidArgument("every class has zero pixels".into()));
    }
    let mean = raw.iter().sum::<f64>() / present as f64;
    Ok(raw.iter().map(|&w| w / mean).collect())
}
