//! Overlap metrics, average precision and annotation averaging.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resample::{resample_trilinear, threshold, THRESHOLD};
use crate::volume::{Dims, MaskVolume, Volume};

/// Voxel confusion counts of a crisp prediction against crisp ground truth.
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

    pub fn predicted(&self) -> u64 {
        self.tp + self.fp
    }

    pub fn actual(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn jaccard(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    pub fn dice(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn avd(&self) -> u64 {
        self.predicted().abs_diff(self.actual())
    }
}

/// `num / den`, or 1 when the denominator (and so the error set) is empty.
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

fn same_dims(a: Dims, b: Dims) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("dims mismatch: prediction {a} vs ground truth {b}")));
    }
    Ok(())
}

fn crisp(m: &MaskVolume, what: &str) -> Result<()> {
    if !m.is_crisp() {
        return Err(Error::Shape(format!("{what} mask is not binary")));
    }
    Ok(())
}

pub fn confusion(pred: &MaskVolume, gt: &MaskVolume) -> Result<ConfusionCounts> {
    same_dims(pred.dims(), gt.dims())?;
    crisp(pred, "prediction")?;
    crisp(gt, "ground truth")?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.voxels().iter().zip(gt.voxels()) {
        match (p == 1.0, g == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Intersection over union; 1 when both masks are empty.
pub fn jaccard(pred: &MaskVolume, gt: &MaskVolume) -> Result<f64> {
    Ok(confusion(pred, gt)?.jaccard())
}

pub fn dice(pred: &MaskVolume, gt: &MaskVolume) -> Result<f64> {
    Ok(confusion(pred, gt)?.dice())
}

pub fn precision_recall(pred: &MaskVolume, gt: &MaskVolume) -> Result<(f64, f64)> {
    let c = confusion(pred, gt)?;
    Ok((c.precision(), c.recall()))
}

/// `| |pred| − |gt| |` in voxels.
pub fn absolute_volume_difference(pred: &MaskVolume, gt: &MaskVolume) -> Result<u64> {
    Ok(confusion(pred, gt)?.avd())
}

/// Step-wise average precision `Σ (R_n − R_{n−1})·P_n`, with operating
/// points at every distinct score taken in descending order.
pub fn average_precision(prob: &Volume, gt: &MaskVolume) -> Result<f64> {
    same_dims(prob.dims(), gt.dims())?;
    crisp(gt, "ground truth")?;
    average_precision_raw(prob.voxels(), gt.voxels())
}

pub(crate) fn average_precision_raw(scores: &[f32], truth: &[f32]) -> Result<f64> {
    let positives = truth.iter().filter(|&&g| g == 1.0).count();
    if positives == 0 {
        return Err(Error::Undefined("average precision needs at least one positive voxel".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if truth[order[i]] == 1.0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Voxelwise mean of one or more annotations.
pub fn average_annotations(masks: &[MaskVolume]) -> Result<MaskVolume> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Config("average_annotations needs at least one mask".into()))?;
    let mut acc = vec![0.0f64; first.dims().len()];
    for m in masks {
        same_dims(m.dims(), first.dims())?;
        for (a, &v) in acc.iter_mut().zip(m.voxels()) {
            *a += v as f64;
        }
    }
    let n = masks.len() as f64;
    MaskVolume::new(first.dims(), acc.into_iter().map(|a| (a / n) as f32).collect())
}

/// Metrics of one prediction against one ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub jaccard: f64,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub absolute_volume_difference: u64,
    pub average_precision: f64,
    pub counts: ConfusionCounts,
}

impl MetricsReport {
    pub fn from_counts(counts: ConfusionCounts, average_precision: f64) -> Self {
        MetricsReport {
            jaccard: counts.jaccard(),
            dice: counts.dice(),
            precision: counts.precision(),
            recall: counts.recall(),
            absolute_volume_difference: counts.avd(),
            average_precision,
            counts,
        }
    }

    pub const CSV_HEADER: &'static str = "jaccard,dice,precision,recall,avd,ap";

    /// `jaccard,dice,precision,recall,avd,ap` at six decimals.
    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.jaccard,
            self.dice,
            self.precision,
            self.recall,
            self.absolute_volume_difference as f64,
            self.average_precision
        )
    }
}

/// Upsamples a network-resolution probability map to the ground truth's
/// grid, then scores it: AP on the upsampled probabilities, crisp metrics
/// after thresholding at 0.5.
pub fn evaluate_full(prob_small: &Volume, gt_full: &MaskVolume, full_dims: Dims) -> Result<MetricsReport> {
    same_dims(gt_full.dims(), full_dims)?;
    let prob = resample_trilinear(prob_small, full_dims);
    let ap = average_precision(&prob, gt_full)?;
    let counts = confusion(&threshold(&prob, THRESHOLD), gt_full)?;
    Ok(MetricsReport::from_counts(counts, ap))
}
