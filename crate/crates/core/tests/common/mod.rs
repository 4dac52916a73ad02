//! Helpers shared by the integration tests.
#![allow(dead_code)]

use cascade_core::assign::GroundTruth;
use cascade_core::cascade::Detection;
use cascade_core::geom::{iou, BBox};
use rand::Rng;

pub const THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

/// Straightforward COCO-style evaluator written without any of the library's
/// matching or precision-envelope code. Returns AP per threshold (None when
/// no class has ground truth) and the mean.
pub fn brute_force_map(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>]) -> (Vec<Option<f64>>, Option<f64>) {
    let mut classes: Vec<usize> = gts.iter().flatten().map(|g| g.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    // Top 100 per scene, highest score first, original order among ties.
    let kept: Vec<Vec<Detection>> = dets
        .iter()
        .map(|d| {
            let mut idx: Vec<usize> = (0..d.len()).collect();
            idx.sort_by(|&a, &b| d[b].score.partial_cmp(&d[a].score).unwrap().then(a.cmp(&b)));
            idx.into_iter().take(100).map(|i| d[i]).collect()
        })
        .collect();

    let mut per_thr = Vec::new();
    for &thr in &THRESHOLDS {
        let mut aps = Vec::new();
        for &c in &classes {
            let num_gt = gts.iter().flatten().filter(|g| g.class_id == c).count();
            // (score, scene, rank within scene, is true positive)
            let mut flags = Vec::new();
            for (s, (d, g)) in kept.iter().zip(gts).enumerate() {
                let mut taken = vec![false; g.len()];
                for (r, det) in d.iter().enumerate().filter(|(_, x)| x.class_id == c) {
                    let mut best: Option<(usize, f64)> = None;
                    for (j, gt) in g.iter().enumerate() {
                        if taken[j] || gt.class_id != c {
                            continue;
                        }
                        let v = iou(&det.bbox, &gt.bbox);
                        if v >= thr && best.is_none_or(|(_, b)| v > b) {
                            best = Some((j, v));
                        }
                    }
                    if let Some((j, _)) = best {
                        taken[j] = true;
                    }
                    flags.push((det.score, s, r, best.is_some()));
                }
            }
            flags.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut points = Vec::new();
            let mut tp = 0;
            for (n, f) in flags.iter().enumerate() {
                tp += usize::from(f.3);
                points.push((tp as f64 / num_gt as f64, tp as f64 / (n + 1) as f64));
            }
            let mut sum = 0.0;
            for r in 0..101 {
                let level = r as f64 / 100.0;
                sum += points.iter().filter(|p| p.0 >= level).map(|p| p.1).fold(0.0, f64::max);
            }
            aps.push(sum / 101.0);
        }
        per_thr.push((!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64));
    }
    let mean = per_thr.iter().all(Option::is_some).then(|| per_thr.iter().flatten().sum::<f64>() / per_thr.len() as f64);
    (per_thr, mean)
}

fn int_box<R: Rng>(rng: &mut R, near: Option<&BBox>) -> BBox {
    let (x, y, w, h) = match near {
        Some(b) => (
            b.x1 + rng.gen_range(-3..=3) as f64,
            b.y1 + rng.gen_range(-3..=3) as f64,
            (b.width() + rng.gen_range(-3..=3) as f64).max(1.0),
            (b.height() + rng.gen_range(-3..=3) as f64).max(1.0),
        ),
        None => (rng.gen_range(0..40) as f64, rng.gen_range(0..40) as f64, rng.gen_range(4..16) as f64, rng.gen_range(4..16) as f64),
    };
    BBox::new(x, y, x + w, y + h).unwrap()
}

/// A few scenes with up to five objects and ten detections each; most
/// detections sit near an object so every IoU threshold is exercised.
pub fn random_instance<R: Rng>(rng: &mut R) -> (Vec<Vec<Detection>>, Vec<Vec<GroundTruth>>) {
    let scenes = rng.gen_range(1..=3);
    let mut all_dets = Vec::new();
    let mut all_gts = Vec::new();
    for _ in 0..scenes {
        let gts: Vec<GroundTruth> =
            (0..rng.gen_range(0..=5)).map(|_| GroundTruth { class_id: rng.gen_range(1..=2), bbox: int_box(rng, None) }).collect();
        let dets: Vec<Detection> = (0..rng.gen_range(0..=10))
            .map(|_| {
                let near = (!gts.is_empty() && rng.gen_bool(0.7)).then(|| &gts[rng.gen_range(0..gts.len())]);
                let class_id = near.filter(|_| rng.gen_bool(0.85)).map_or_else(|| rng.gen_range(1..=2), |g| g.class_id);
                Detection { bbox: int_box(rng, near.map(|g| &g.bbox)), class_id, score: rng.gen::<f64>() }
            })
            .collect();
        all_dets.push(dets);
        all_gts.push(gts);
    }
    (all_dets, all_gts)
}

pub fn majority(votes: &[bool]) -> bool {
    2 * votes.iter().filter(|v| **v).count() > votes.len()
}
