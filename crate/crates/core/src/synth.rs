//! Synthetic scenes and proposals standing in for an image plus a proposal
//! network.
//!
//! A scene is a set of annotated boxes on a canvas. Proposals are jittered
//! copies of each object plus uniformly placed background boxes. The proposal
//! jitter is tuned so that only a few percent of proposals reach IoU 0.7,
//! which is the low-quality regime that motivates cascading.
//!
//! Features replace pooled CNN activations. A proposal's feature vector is
//!
//! * `[0..4)`: the delta to its best-matching object plus Gaussian noise
//!   (noise only when the best IoU is below [`FEATURE_MATCH_IOU`]),
//! * `[4..4+M)`: IoU-scaled one-hot class evidence plus noise,
//! * `[4+M..4+M+3)`: `(ln w, ln h, ln w/h)` of the box, noise free.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::assign::{best_match, GroundTruth, Proposal};
use crate::error::{Error, Result};
use crate::geom::{clip, encode, iou, BBox};
use crate::rng::{self, Stream};

/// Below this IoU a proposal's features carry no object signal.
pub const FEATURE_MATCH_IOU: f64 = 0.3;

/// Background proposals must overlap every object less than this.
pub const BACKGROUND_MAX_IOU: f64 = 0.3;

pub const MAX_BACKGROUND_TRIES: usize = 1000;

/// Jitter scale placing ~2.9% of proposals at IoU >= 0.7 (and ~23% at
/// IoU >= 0.5) under the default scene layout (see `calibrate_jitter`).
pub const DEFAULT_JITTER_SCALE: f64 = 0.29;

/// Feature noise; keeps the delta block's correlation with the true offset
/// near 0.84 on positives.
pub const DEFAULT_FEATURE_NOISE: f64 = 0.085;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub canvas_w: f64,
    pub canvas_h: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub num_classes: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub proposals_per_gt: usize,
    pub background_proposals: usize,
    pub jitter_scale: f64,
    pub feature_noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            canvas_w: 1000.0,
            canvas_h: 1000.0,
            min_objects: 8,
            max_objects: 8,
            num_classes: 3,
            min_size: 40.0,
            max_size: 300.0,
            proposals_per_gt: 24,
            background_proposals: 64,
            jitter_scale: DEFAULT_JITTER_SCALE,
            feature_noise: DEFAULT_FEATURE_NOISE,
        }
    }
}

impl SceneConfig {
    pub fn feature_dim(&self) -> usize {
        4 + self.num_classes + 3
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.canvas_w > 0.0 && self.canvas_h > 0.0) {
            return bad(format!("canvas must be positive, got {}x{}", self.canvas_w, self.canvas_h));
        }
        if self.min_objects > self.max_objects || self.max_objects == 0 {
            return bad(format!("bad object count range [{}, {}]", self.min_objects, self.max_objects));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1".into());
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size) {
            return bad(format!("bad size range [{}, {}]", self.min_size, self.max_size));
        }
        if self.max_size > self.canvas_w.min(self.canvas_h) {
            return bad("max_size exceeds the canvas".into());
        }
        if !(self.jitter_scale >= 0.0 && self.jitter_scale.is_finite()) {
            return bad(format!("jitter_scale must be >= 0, got {}", self.jitter_scale));
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return bad(format!("feature_noise must be >= 0, got {}", self.feature_noise));
        }
        Ok(())
    }
}

/// One image analog: objects plus proposals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub gts: Vec<GroundTruth>,
    pub proposals: Vec<Proposal>,
}

impl Scene {
    pub fn boxes(&self) -> Vec<BBox> {
        self.proposals.iter().map(|p| p.bbox).collect()
    }
}

/// Scene plus bookkeeping from generation.
#[derive(Debug, Clone)]
pub struct Generated {
    pub scene: Scene,
    /// Background proposals abandoned after hitting the rejection cap.
    pub background_shortfall: usize,
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

fn jitter<R: Rng + ?Sized>(g: &BBox, scale: f64, rng: &mut R) -> BBox {
    let (cx, cy) = g.center();
    let (w, h) = (g.width(), g.height());
    let ncx = cx + normal(rng) * scale * w;
    let ncy = cy + normal(rng) * scale * h;
    let nw = w * (normal(rng) * scale).exp();
    let nh = h * (normal(rng) * scale).exp();
    BBox { x1: ncx - 0.5 * nw, y1: ncy - 0.5 * nh, x2: ncx + 0.5 * nw, y2: ncy + 0.5 * nh }
}

fn uniform_box<R: Rng + ?Sized>(cfg: &SceneConfig, rng: &mut R) -> BBox {
    let w = rng.gen_range(cfg.min_size..=cfg.max_size);
    let h = rng.gen_range(cfg.min_size..=cfg.max_size);
    let x1 = rng.gen_range(0.0..=cfg.canvas_w - w);
    let y1 = rng.gen_range(0.0..=cfg.canvas_h - h);
    BBox { x1, y1, x2: x1 + w, y2: y1 + h }
}

/// Generates one scene. Proposal order is shuffled so that "first k" is an
/// unbiased subset.
pub fn gen_scene<R: Rng + ?Sized>(cfg: &SceneConfig, rng: &mut R) -> Generated {
    let n_obj = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let gts: Vec<GroundTruth> =
        (0..n_obj).map(|_| GroundTruth { class_id: rng.gen_range(1..=cfg.num_classes), bbox: uniform_box(cfg, rng) }).collect();

    let mut boxes = Vec::with_capacity(n_obj * cfg.proposals_per_gt + cfg.background_proposals);
    for g in &gts {
        let mut made = 0;
        while made < cfg.proposals_per_gt {
            if let Some(b) = clip(&jitter(&g.bbox, cfg.jitter_scale, rng), cfg.canvas_w, cfg.canvas_h) {
                boxes.push(b);
                made += 1;
            }
        }
    }

    let mut shortfall = 0;
    for _ in 0..cfg.background_proposals {
        let found = (0..MAX_BACKGROUND_TRIES).find_map(|_| {
            let b = uniform_box(cfg, rng);
            gts.iter().all(|g| iou(&b, &g.bbox) < BACKGROUND_MAX_IOU).then_some(b)
        });
        match found {
            Some(b) => boxes.push(b),
            None => shortfall += 1,
        }
    }
    if shortfall > 0 {
        log::warn!("scene emitted {shortfall} fewer background proposals (rejection cap)");
    }

    boxes.shuffle(rng);
    let proposals = boxes.into_iter().map(|b| Proposal { features: encode_features(&b, &gts, cfg, rng), bbox: b }).collect();
    Generated { scene: Scene { gts, proposals }, background_shortfall: shortfall }
}

/// Synthetic RoI features for `b` in a scene with objects `gts`.
pub fn encode_features<R: Rng + ?Sized>(b: &BBox, gts: &[GroundTruth], cfg: &SceneConfig, rng: &mut R) -> Vec<f64> {
    let m = cfg.num_classes;
    let noise = cfg.feature_noise;
    let mut f = vec![0.0; cfg.feature_dim()];
    let best = best_match(b, gts).filter(|(_, s)| *s >= FEATURE_MATCH_IOU);

    let delta = best.map(|(j, _)| encode(b, &gts[j].bbox).to_array()).unwrap_or([0.0; 4]);
    for (i, d) in delta.iter().enumerate() {
        f[i] = d + noise * normal(rng);
    }
    for k in 0..m {
        f[4 + k] = noise * normal(rng);
    }
    if let Some((j, s)) = best {
        f[4 + gts[j].class_id - 1] += s;
    }
    let (w, h) = (b.width(), b.height());
    f[4 + m] = w.ln();
    f[4 + m + 1] = h.ln();
    f[4 + m + 2] = (w / h).ln();
    f
}

/// Re-encodes features for a set of boxes, one rng draw sequence per call.
pub fn encode_all<R: Rng + ?Sized>(boxes: &[BBox], gts: &[GroundTruth], cfg: &SceneConfig, rng: &mut R) -> Vec<Vec<f64>> {
    boxes.iter().map(|b| encode_features(b, gts, cfg, rng)).collect()
}

pub fn gen_dataset(cfg: &SceneConfig, seed: u64, which: Stream, count: usize) -> Vec<Scene> {
    use rayon::prelude::*;
    (0..count).into_par_iter().map(|i| gen_scene(cfg, &mut rng::stream(seed, which, i as u64)).scene).collect()
}

/// Appends every object box as an extra proposal.
pub fn inject_ground_truth(scene: &Scene, cfg: &SceneConfig, seed: u64, scene_index: u64) -> Scene {
    let mut rng = rng::stream(seed, Stream::Injection, scene_index);
    let mut out = scene.clone();
    for g in &scene.gts {
        out.proposals.push(Proposal { bbox: g.bbox, features: encode_features(&g.bbox, &scene.gts, cfg, &mut rng) });
    }
    out
}

/// Best IoU of every proposal in `scenes`.
pub fn proposal_ious(scenes: &[Scene]) -> Vec<f64> {
    scenes.iter().flat_map(|s| s.proposals.iter().map(|p| best_match(&p.bbox, &s.gts).map_or(0.0, |(_, v)| v))).collect()
}

/// Fraction of values at or above `u`.
pub fn fraction_at_least(values: &[f64], u: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|&&v| v >= u).count() as f64 / values.len() as f64
}

/// Bisects `jitter_scale` so that `fraction(IoU >= u)` hits `target`, using
/// `scenes` Monte Carlo scenes per probe.
pub fn calibrate_jitter(base: &SceneConfig, u: f64, target: f64, scenes: usize, seed: u64) -> f64 {
    let measure = |j: f64| {
        let cfg = SceneConfig { jitter_scale: j, ..base.clone() };
        fraction_at_least(&proposal_ious(&gen_dataset(&cfg, seed, Stream::TrainScenes, scenes)), u)
    };
    // The fraction falls as the jitter grows.
    let (mut lo, mut hi) = (0.01, 2.0);
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        if measure(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
