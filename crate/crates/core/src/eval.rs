//! COCO-style evaluation: NMS, greedy matching, 101-point interpolated AP over
//! IoU thresholds 0.50:0.05:0.95, and average recall.

use std::collections::BTreeMap;

use serde::{Serialize, Serializer};

use crate::assign::GroundTruth;
use crate::cascade::Detection;
use crate::geom::{iou, BBox};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

pub const RECALL_POINTS: usize = 101;

pub const MAX_DETECTIONS: usize = 100;

/// Greedy class-wise NMS. Sorting is stable, so equal scores keep input
/// order.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = &dets[i];
        if kept.iter().all(|k| k.class_id != d.class_id || iou(&k.bbox, &d.bbox) < iou_thresh) {
            kept.push(*d);
        }
    }
    kept
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// Matched ground-truth index per detection.
    pub det_matches: Vec<Option<usize>>,
    pub gt_matched: Vec<bool>,
    /// Detections excluded from scoring (area-range evaluation only).
    pub det_ignored: Vec<bool>,
}

/// Greedily matches detections (sorted by score, descending) to ground
/// truth of the same class.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f64) -> MatchResult {
    match_with_ignore(dets, gts, iou_thresh, &vec![false; gts.len()], |_| false)
}

/// Matching where `gt_ignore[j]` GTs absorb detections without counting, and
/// unmatched detections for which `det_out_of_range` holds are ignored.
fn match_with_ignore(
    dets: &[Detection],
    gts: &[GroundTruth],
    iou_thresh: f64,
    gt_ignore: &[bool],
    det_out_of_range: impl Fn(&BBox) -> bool,
) -> MatchResult {
    let mut gt_matched = vec![false; gts.len()];
    let mut det_matches = vec![None; dets.len()];
    let mut det_ignored = vec![false; dets.len()];
    for (d, det) in dets.iter().enumerate() {
        // Non-ignored GTs are preferred over ignored ones.
        let mut best: Option<(usize, f64, bool)> = None;
        for (j, g) in gts.iter().enumerate() {
            if gt_matched[j] || g.class_id != det.class_id {
                continue;
            }
            let v = iou(&det.bbox, &g.bbox);
            if v < iou_thresh {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, bv, bign)) => (bign && !gt_ignore[j]) || (bign == gt_ignore[j] && v > bv),
            };
            if better {
                best = Some((j, v, gt_ignore[j]));
            }
        }
        match best {
            Some((j, _, ign)) => {
                gt_matched[j] = true;
                det_matches[d] = Some(j);
                det_ignored[d] = ign;
            }
            None => det_ignored[d] = det_out_of_range(&det.bbox),
        }
    }
    MatchResult { det_matches, gt_matched, det_ignored }
}

/// One scored detection in a dataset-wide ranking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedDetection {
    pub score: f64,
    pub true_positive: bool,
    pub scene: usize,
    pub index: usize,
}

/// 101-point interpolated AP. Ties in score are ordered by `(scene, index)`.
/// Returns `None` when there is no ground truth.
pub fn average_precision(ranked: &[RankedDetection], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut order: Vec<&RankedDetection> = ranked.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.scene.cmp(&b.scene)).then(a.index.cmp(&b.index)));
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for d in order {
        if d.true_positive {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut total = 0.0;
    for r in 0..RECALL_POINTS {
        let thr = r as f64 / (RECALL_POINTS - 1) as f64;
        let at = recall.partition_point(|&v| v < thr);
        if at < precision.len() {
            total += precision[at];
        }
    }
    Some(total / RECALL_POINTS as f64)
}

fn ser_opt<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(x) => s.serialize_f64(*x),
        None => s.serialize_none(),
    }
}

/// Evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApReport {
    /// AP at each of [`iou_thresholds`].
    pub ap_per_threshold: Vec<Option<f64>>,
    #[serde(serialize_with = "ser_opt")]
    pub mean_ap: Option<f64>,
    /// Class id -> AP at each threshold.
    pub per_class: BTreeMap<usize, Vec<Option<f64>>>,
    /// Detection AR at 1, 10 and 100 detections per scene.
    pub ar_at_k: BTreeMap<usize, f64>,
    /// Mean AP for small, medium and large objects.
    pub by_size: Option<[Option<f64>; 3]>,
}

impl ApReport {
    pub fn ap_at(&self, thr: f64) -> Option<f64> {
        let i = ((thr - 0.5) / 0.05).round();
        if !(0.0..10.0).contains(&i) {
            return None;
        }
        self.ap_per_threshold[i as usize]
    }

    pub fn mean(&self) -> f64 {
        self.mean_ap.unwrap_or(0.0)
    }

    /// `AP, AP50, AP60, AP70, AP80, AP90`, as fractions (0 when undefined).
    pub fn table_row(&self) -> [f64; 6] {
        let g = |t| self.ap_at(t).unwrap_or(0.0);
        [self.mean(), g(0.5), g(0.6), g(0.7), g(0.8), g(0.9)]
    }

    /// Named summary for JSON output.
    pub fn summary(&self) -> BTreeMap<String, Option<f64>> {
        let mut m = BTreeMap::new();
        m.insert("AP".to_string(), self.mean_ap);
        for t in [50, 60, 70, 75, 80, 90] {
            m.insert(format!("AP{t}"), self.ap_at(t as f64 / 100.0));
        }
        if let Some([s, md, l]) = self.by_size {
            m.insert("AP_S".into(), s);
            m.insert("AP_M".into(), md);
            m.insert("AP_L".into(), l);
        }
        m
    }
}

pub const TABLE_HEADER: [&str; 6] = ["AP", "AP50", "AP60", "AP70", "AP80", "AP90"];

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Side-length cutoffs `(small/medium, medium/large)` for the size
    /// breakdown, as `sqrt(area)`.
    pub size_cutoffs: Option<(f64, f64)>,
}

impl EvalOptions {
    /// Cutoffs splitting `[min_size, max_size]` into thirds.
    pub fn terciles(min_size: f64, max_size: f64) -> Self {
        let step = (max_size - min_size) / 3.0;
        Self { size_cutoffs: Some((min_size + step, min_size + 2.0 * step)) }
    }
}

fn sorted_top(dets: &[Detection], k: usize) -> Vec<Detection> {
    let mut v = dets.to_vec();
    v.sort_by(|a, b| b.score.total_cmp(&a.score));
    v.truncate(k);
    v
}

/// Per-class AP at one threshold, with optional area range.
fn class_aps(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    thr: f64,
    range: Option<(f64, f64)>,
    classes: &[usize],
) -> BTreeMap<usize, Option<f64>> {
    let in_range = |b: &BBox| range.is_none_or(|(lo, hi)| b.area() >= lo * lo && b.area() < hi * hi);
    let mut ranked: BTreeMap<usize, Vec<RankedDetection>> = BTreeMap::new();
    let mut npos: BTreeMap<usize, usize> = BTreeMap::new();
    for (s, (d, g)) in dets.iter().zip(gts).enumerate() {
        let ignore: Vec<bool> = g.iter().map(|x| !in_range(&x.bbox)).collect();
        for (x, ign) in g.iter().zip(&ignore) {
            if !ign {
                *npos.entry(x.class_id).or_default() += 1;
            }
        }
        let m = match_with_ignore(d, g, thr, &ignore, |b| !in_range(b));
        for (i, det) in d.iter().enumerate() {
            if m.det_ignored[i] {
                continue;
            }
            ranked.entry(det.class_id).or_default().push(RankedDetection {
                score: det.score,
                true_positive: m.det_matches[i].is_some(),
                scene: s,
                index: i,
            });
        }
    }
    classes
        .iter()
        .map(|c| {
            let r = ranked.get(c).map(Vec::as_slice).unwrap_or(&[]);
            (*c, average_precision(r, npos.get(c).copied().unwrap_or(0)))
        })
        .collect()
}

fn mean_defined(vals: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = vals.into_iter().flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// COCO-style mean AP over the ten IoU thresholds. Each scene keeps its top
/// [`MAX_DETECTIONS`] detections.
pub fn coco_map(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], opts: &EvalOptions) -> ApReport {
    assert_eq!(dets.len(), gts.len(), "one detection list per scene");
    let dets: Vec<Vec<Detection>> = dets.iter().map(|d| sorted_top(d, MAX_DETECTIONS)).collect();
    let mut classes: Vec<usize> = gts.iter().flatten().map(|g| g.class_id).chain(dets.iter().flatten().map(|d| d.class_id)).collect();
    classes.sort_unstable();
    classes.dedup();

    let thresholds = iou_thresholds();
    let mut per_class: BTreeMap<usize, Vec<Option<f64>>> = classes.iter().map(|c| (*c, Vec::new())).collect();
    let mut ap_per_threshold = Vec::with_capacity(thresholds.len());
    for &thr in &thresholds {
        let aps = class_aps(&dets, gts, thr, None, &classes);
        ap_per_threshold.push(mean_defined(aps.values().copied()));
        for (c, v) in aps {
            per_class.get_mut(&c).expect("known class").push(v);
        }
    }
    let mean_ap = if ap_per_threshold.iter().all(Option::is_some) { mean_defined(ap_per_threshold.iter().copied()) } else { None };

    let by_size = opts.size_cutoffs.map(|(a, b)| {
        let ranges = [(0.0, a), (a, b), (b, f64::INFINITY)];
        ranges.map(|r| {
            let per_thr: Vec<Option<f64>> =
                thresholds.iter().map(|&t| mean_defined(class_aps(&dets, gts, t, Some(r), &classes).into_values())).collect();
            if per_thr.iter().all(Option::is_some) {
                mean_defined(per_thr)
            } else {
                None
            }
        })
    });

    let ar_at_k = [1usize, 10, 100].into_iter().map(|k| (k, detection_recall(&dets, gts, k, &classes))).collect();
    ApReport { ap_per_threshold, mean_ap, per_class, ar_at_k, by_size }
}

/// Recall with the top-`k` detections per scene, averaged over thresholds and
/// classes.
fn detection_recall(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], k: usize, classes: &[usize]) -> f64 {
    let mut per_thr = Vec::new();
    for thr in iou_thresholds() {
        let mut found: BTreeMap<usize, usize> = BTreeMap::new();
        let mut total: BTreeMap<usize, usize> = BTreeMap::new();
        for (d, g) in dets.iter().zip(gts) {
            let top = &d[..d.len().min(k)];
            let m = match_detections(top, g, thr);
            for (x, hit) in g.iter().zip(&m.gt_matched) {
                *total.entry(x.class_id).or_default() += 1;
                *found.entry(x.class_id).or_default() += usize::from(*hit);
            }
        }
        let recalls: Vec<Option<f64>> =
            classes.iter().map(|c| total.get(c).map(|n| found.get(c).copied().unwrap_or(0) as f64 / *n as f64)).collect();
        per_thr.push(mean_defined(recalls).unwrap_or(0.0));
    }
    per_thr.iter().sum::<f64>() / per_thr.len() as f64
}

/// Average recall of the first `k` proposals of each scene, averaged over
/// IoU thresholds 0.50:0.05:0.95 and over all ground truth.
pub fn average_recall(proposals: &[Vec<BBox>], gts: &[Vec<GroundTruth>], k: usize) -> f64 {
    assert!(k > 0, "k must be positive");
    let best: Vec<f64> = proposals
        .iter()
        .zip(gts)
        .flat_map(|(p, g)| {
            let top = &p[..p.len().min(k)];
            g.iter().map(move |x| top.iter().map(|b| iou(b, &x.bbox)).fold(0.0, f64::max))
        })
        .collect();
    if best.is_empty() {
        return 0.0;
    }
    let thresholds = iou_thresholds();
    let hits: usize = thresholds.iter().map(|&t| best.iter().filter(|&&v| v >= t).count()).sum();
    hits as f64 / (best.len() * thresholds.len()) as f64
}
