//! IoU-threshold label assignment and minibatch sampling.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geom::{encode, iou, BBox, Delta};

/// Annotated object. Class 0 is reserved for background.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(rename = "class")]
    pub class_id: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// Candidate box with its feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(rename = "feat")]
    pub features: Vec<f64>,
}

impl AsRef<BBox> for Proposal {
    fn as_ref(&self) -> &BBox {
        &self.bbox
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledSample {
    pub proposal_index: usize,
    /// 0 for background, otherwise the matched object's class.
    pub label: usize,
    pub matched_gt: Option<usize>,
    /// Raw (unnormalized) delta to the matched object; positives only.
    pub regression_target: Option<Delta>,
    /// Best IoU against any ground truth.
    pub matched_iou: f64,
}

impl LabeledSample {
    pub fn is_positive(&self) -> bool {
        self.label > 0
    }
}

/// Index and IoU of the best-overlapping ground truth. Ties go to the lowest
/// index.
pub fn best_match(b: &BBox, gts: &[GroundTruth]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (j, g) in gts.iter().enumerate() {
        let v = iou(b, &g.bbox);
        if best.is_none_or(|(_, bv)| v > bv) {
            best = Some((j, v));
        }
    }
    best
}

/// Labels every box against the ground truth at threshold `u`.
pub fn assign_labels<B: AsRef<BBox>>(boxes: &[B], gts: &[GroundTruth], u: f64) -> Vec<LabeledSample> {
    boxes
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let b = b.as_ref();
            match best_match(b, gts) {
                Some((j, v)) if v >= u => LabeledSample {
                    proposal_index: i,
                    label: gts[j].class_id,
                    matched_gt: Some(j),
                    regression_target: Some(encode(b, &gts[j].bbox)),
                    matched_iou: v,
                },
                other => LabeledSample {
                    proposal_index: i,
                    label: 0,
                    matched_gt: None,
                    regression_target: None,
                    matched_iou: other.map_or(0.0, |(_, v)| v),
                },
            }
        })
        .collect()
}

/// Samples that pass the threshold; everything else is an outlier for
/// regression.
pub fn select_regression_set(labeled: &[LabeledSample]) -> Vec<LabeledSample> {
    labeled.iter().filter(|s| s.is_positive()).copied().collect()
}

/// Draws at most `size` samples with positives capped at
/// `ceil(size * pos_fraction)`. The output keeps input order.
pub fn sample_minibatch<R: Rng + ?Sized>(labeled: &[LabeledSample], size: usize, pos_fraction: f64, rng: &mut R) -> Vec<LabeledSample> {
    if labeled.len() <= size {
        return labeled.to_vec();
    }
    let mut pos: Vec<usize> = (0..labeled.len()).filter(|&i| labeled[i].is_positive()).collect();
    let mut neg: Vec<usize> = (0..labeled.len()).filter(|&i| !labeled[i].is_positive()).collect();
    let pos_cap = (size as f64 * pos_fraction).ceil() as usize;
    let n_pos = pos.len().min(pos_cap);
    pos.shuffle(rng);
    neg.shuffle(rng);
    let n_neg = neg.len().min(size - n_pos);
    let mut take: Vec<usize> = pos[..n_pos].iter().chain(&neg[..n_neg]).copied().collect();
    // Not enough negatives: top up with the remaining positives.
    if take.len() < size {
        let extra = (size - take.len()).min(pos.len() - n_pos);
        take.extend_from_slice(&pos[n_pos..n_pos + extra]);
    }
    take.sort_unstable();
    take.into_iter().map(|i| labeled[i]).collect()
}
