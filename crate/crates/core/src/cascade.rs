//! Multi-stage cascades: construction, training with stage-wise resampling,
//! and inference with optional classifier ensembles.
//!
//! Stage `t` is trained on the boxes produced by stage `t - 1`'s regressor,
//! labeled at its own (higher) IoU threshold. Regressed boxes are re-encoded
//! from the synthetic scene before the next stage sees them, which is the
//! analog of re-pooling RoI features.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::assign::{assign_labels, sample_minibatch, select_regression_set, GroundTruth, LabeledSample};
use crate::error::{Error, Result};
use crate::eval::nms;
use crate::geom::{clip, decode, max_decoded_size, BBox, Decoded, Delta};
use crate::losses::{denormalize, normalize, softmax, NormStats};
use crate::model::{
    self, backbone_step, sgd_step, HeadParams, InputNorm, LossSpec, ModelFile, SharedBackbone, StageRecord, TrainSample, Variant,
    FORMAT_VERSION,
};
use crate::rng::{self, sub_index, Stream};
use crate::synth::{encode_all, Scene, SceneConfig};

/// First-stage regression spread; stage `t` uses this divided by `t`.
pub const BASE_SIGMA: [f64; 4] = [0.1, 0.1, 0.2, 0.2];

/// Lower bound on empirically estimated spreads.
pub const SIGMA_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// `w_t = 1 / 2^(t-1)`
    Decay,
    /// `w_t = 1 / T`
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Joint,
    Sequential,
}

/// How per-stage regression statistics are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    /// Zero mean, `BASE_SIGMA / t` at stage `t`.
    Fixed,
    /// First-stage statistics at every stage.
    Shared,
    /// Estimated from each stage's positives after outlier removal.
    Empirical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub u: f64,
    pub norm_stats: NormStats,
    pub loss_weight: f64,
    pub lambda: f64,
}

/// Training configuration shared by the cascade and the baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CascadeConfig {
    pub thresholds: Vec<f64>,
    pub weighting: Weighting,
    pub schedule: Schedule,
    pub norm_mode: NormMode,
    pub shared_backbone: bool,
    /// Hidden width of every head; 0 gives linear heads.
    pub hidden: usize,
    pub iterations: usize,
    pub lr: f64,
    /// Fraction of iterations after which the rate drops by 10x.
    pub lr_drop_at: f64,
    pub scenes_per_iteration: usize,
    pub batch_size: usize,
    pub pos_fraction: f64,
    pub lambda: f64,
    pub log_every: usize,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![0.5, 0.6, 0.7],
            weighting: Weighting::Decay,
            schedule: Schedule::Joint,
            norm_mode: NormMode::Fixed,
            shared_backbone: true,
            hidden: 32,
            iterations: 3000,
            lr: 0.02,
            lr_drop_at: 2.0 / 3.0,
            scenes_per_iteration: 2,
            batch_size: 64,
            pos_fraction: 0.25,
            lambda: 1.0,
            log_every: 100,
        }
    }
}

impl CascadeConfig {
    pub fn num_stages(&self) -> usize {
        self.thresholds.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.thresholds.is_empty() {
            return bad("at least one stage threshold is required".into());
        }
        if self.thresholds.iter().any(|u| !(*u > 0.0 && *u < 1.0)) {
            return bad(format!("thresholds must lie in (0, 1), got {:?}", self.thresholds));
        }
        if self.thresholds.windows(2).any(|w| w[1] <= w[0]) {
            return bad(format!("thresholds must strictly increase, got {:?}", self.thresholds));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.lr_drop_at) {
            return bad(format!("lr_drop_at must lie in [0, 1], got {}", self.lr_drop_at));
        }
        if !(self.pos_fraction > 0.0 && self.pos_fraction < 1.0) {
            return bad(format!("pos_fraction must lie in (0, 1), got {}", self.pos_fraction));
        }
        if self.iterations == 0 || self.batch_size == 0 || self.scenes_per_iteration == 0 {
            return bad("iterations, batch_size and scenes_per_iteration must be positive".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        Ok(())
    }

    pub fn stage_weights(&self) -> Vec<f64> {
        let t = self.num_stages();
        (0..t)
            .map(|i| match self.weighting {
                Weighting::Decay => 1.0 / 2f64.powi(i as i32),
                Weighting::Avg => 1.0 / t as f64,
            })
            .collect()
    }

    /// Stage configs with the starting normalization statistics.
    pub fn stages(&self) -> Vec<StageConfig> {
        let stats = match self.norm_mode {
            NormMode::Shared => vec![default_norm_stats(1)[0]; self.num_stages()],
            _ => default_norm_stats(self.num_stages()),
        };
        self.thresholds
            .iter()
            .zip(self.stage_weights())
            .zip(stats)
            .map(|((&u, w), s)| StageConfig { u, norm_stats: s, loss_weight: w, lambda: self.lambda })
            .collect()
    }
}

/// Zero-mean statistics with spread `BASE_SIGMA / t` for stages `t = 1..=T`.
pub fn default_norm_stats(num_stages: usize) -> Vec<NormStats> {
    if num_stages > 4 {
        log::warn!("no reference statistics beyond 4 stages; extending with sigma / t");
    }
    (1..=num_stages).map(|t| NormStats { mu: [0.0; 4], sigma: BASE_SIGMA.map(|s| s / t as f64) }).collect()
}

/// Mean and spread of raw regression targets, spreads floored at
/// [`SIGMA_FLOOR`]. Falls back to `fallback` when `deltas` is empty.
pub fn empirical_norm_stats(deltas: &[Delta], fallback: NormStats) -> NormStats {
    if deltas.is_empty() {
        return fallback;
    }
    let n = deltas.len() as f64;
    let mut mu = [0.0; 4];
    for d in deltas {
        for (m, v) in mu.iter_mut().zip(d.to_array()) {
            *m += v / n;
        }
    }
    let mut var = [0.0; 4];
    for d in deltas {
        for ((s, v), m) in var.iter_mut().zip(d.to_array()).zip(mu) {
            *s += (v - m) * (v - m) / n;
        }
    }
    NormStats { mu, sigma: var.map(|v| v.sqrt().max(SIGMA_FLOOR)) }
}

/// Trained cascade.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeModel {
    pub backbone: SharedBackbone,
    pub heads: Vec<HeadParams>,
    pub configs: Vec<StageConfig>,
    pub num_classes: usize,
}

impl CascadeModel {
    pub fn num_stages(&self) -> usize {
        self.heads.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.dim()
    }

    pub fn to_file(&self, variant: Variant, config: serde_json::Value) -> ModelFile {
        ModelFile {
            format_version: FORMAT_VERSION,
            variant,
            num_classes: self.num_classes,
            feature_dim: self.feature_dim(),
            iterations: None,
            config,
            backbone: self.backbone.clone(),
            stages: self
                .heads
                .iter()
                .zip(&self.configs)
                .map(|(h, c)| StageRecord {
                    u: c.u,
                    norm_stats: c.norm_stats,
                    loss_weight: c.loss_weight,
                    lambda: c.lambda,
                    head: h.clone(),
                })
                .collect(),
            integral: None,
        }
    }

    pub fn from_file(file: &ModelFile) -> Result<Self> {
        file.validate()?;
        Ok(Self {
            backbone: file.backbone.clone(),
            heads: file.stages.iter().map(|s| s.head.clone()).collect(),
            configs: file
                .stages
                .iter()
                .map(|s| StageConfig { u: s.u, norm_stats: s.norm_stats, loss_weight: s.loss_weight, lambda: s.lambda })
                .collect(),
            num_classes: file.num_classes,
        })
    }
}

/// Detector output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(rename = "class")]
    pub class_id: usize,
    pub score: f64,
}

/// Which classifier(s) score the final boxes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestStage {
    /// Classifier of stage `t` (1-based).
    Stage(usize),
    /// Mean probability of the classifiers of stages `1..=k`.
    Ensemble(usize),
}

impl std::fmt::Display for TestStage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TestStage::Stage(t) => write!(f, "{t}"),
            TestStage::Ensemble(k) => write!(f, "1~{k}"),
        }
    }
}

impl std::str::FromStr for TestStage {
    type Err = Error;

    /// Accepts `3`, `1~3`, `1-3` or `ens3`.
    fn from_str(s: &str) -> Result<Self> {
        let err = || Error::Config(format!("bad test stage `{s}`"));
        let num = |v: &str| v.trim().parse::<usize>().ok().filter(|n| *n >= 1);
        if let Some(k) = s.strip_prefix("ens") {
            return num(k).map(TestStage::Ensemble).ok_or_else(err);
        }
        if let Some((a, b)) = s.split_once(['~', '-']) {
            return match (num(a), num(b)) {
                (Some(1), Some(k)) => Ok(TestStage::Ensemble(k)),
                _ => Err(err()),
            };
        }
        num(s).map(TestStage::Stage).ok_or_else(err)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferOptions {
    pub test_stage: TestStage,
    pub nms_iou: f64,
    pub max_detections: usize,
    pub score_threshold: f64,
}

impl InferOptions {
    pub fn ensemble(k: usize) -> Self {
        Self { test_stage: TestStage::Ensemble(k), ..Default::default() }
    }
}

impl Default for InferOptions {
    fn default() -> Self {
        Self { test_stage: TestStage::Ensemble(1), nms_iou: 0.5, max_detections: 100, score_threshold: 1e-3 }
    }
}

/// Source of re-encoded features during inference.
#[derive(Debug, Clone, Copy)]
pub struct FeatureSource<'a> {
    pub scene_cfg: &'a SceneConfig,
    pub seed: u64,
    pub scene_index: u64,
}

impl FeatureSource<'_> {
    /// Features for the boxes entering propagation step `step` (>= 1).
    pub fn encode(&self, boxes: &[BBox], gts: &[GroundTruth], step: usize) -> Vec<Vec<f64>> {
        let mut r = rng::stream(self.seed, Stream::EvalFeatures, sub_index(self.scene_index, step as u64));
        encode_all(boxes, gts, self.scene_cfg, &mut r)
    }
}

/// Applies one regressor to a box.
pub fn regress(head: &HeadParams, backbone: &SharedBackbone, stats: &NormStats, b: &BBox, x: &[f64], max_size: f64) -> Decoded {
    let out = model::forward(head, backbone, x);
    decode(b, &denormalize(&out.delta_norm, stats), max_size)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Resampled {
    pub boxes: Vec<BBox>,
    pub features: Vec<Vec<f64>>,
    /// Index of each output box in the input.
    pub source: Vec<usize>,
}

/// Regresses every box with `head`, clips to the canvas, drops degenerate
/// results and re-encodes features on the survivors.
pub fn resample_stage<F>(
    boxes: &[BBox],
    features: &[Vec<f64>],
    head: &HeadParams,
    backbone: &SharedBackbone,
    stats: &NormStats,
    canvas: (f64, f64),
    mut features_fn: F,
) -> Resampled
where
    F: FnMut(&[BBox]) -> Vec<Vec<f64>>,
{
    let max_size = max_decoded_size(canvas.0, canvas.1);
    let mut out = Resampled::default();
    for (i, (b, x)) in boxes.iter().zip(features).enumerate() {
        let d = regress(head, backbone, stats, b, x, max_size);
        if d.saturated {
            continue;
        }
        if let Some(c) = clip(&d.bbox, canvas.0, canvas.1) {
            out.boxes.push(c);
            out.source.push(i);
        }
    }
    if !out.boxes.is_empty() {
        out.features = features_fn(&out.boxes);
    }
    out
}

/// Boxes and features entering each stage, plus the final regressed boxes.
#[derive(Debug, Clone)]
pub struct Propagation {
    /// `inputs[t]` are the boxes entering regressor `t` (0-based).
    pub inputs: Vec<Vec<BBox>>,
    pub features: Vec<Vec<Vec<f64>>>,
    /// `sources[k][j]` is the index in `inputs[k]` of box `j` of
    /// `inputs[k + 1]`.
    pub sources: Vec<Vec<usize>>,
    /// Final boxes with the index of the last-stage input they came from.
    pub outputs: Vec<(usize, BBox)>,
}

/// Runs boxes through a chain of regressors. `heads[k]` is applied at step
/// `k` with `stats[k]`.
pub fn propagate(backbone: &SharedBackbone, heads: &[&HeadParams], stats: &[NormStats], scene: &Scene, src: &FeatureSource) -> Propagation {
    let canvas = (src.scene_cfg.canvas_w, src.scene_cfg.canvas_h);
    let mut boxes = scene.boxes();
    let mut feats: Vec<Vec<f64>> = scene.proposals.iter().map(|p| p.features.clone()).collect();
    let mut inputs = Vec::with_capacity(heads.len());
    let mut features = Vec::with_capacity(heads.len());
    let mut sources = Vec::with_capacity(heads.len());
    for (k, head) in heads.iter().enumerate() {
        if k + 1 == heads.len() {
            break;
        }
        let r = resample_stage(&boxes, &feats, head, backbone, &stats[k], canvas, |b| src.encode(b, &scene.gts, k + 1));
        inputs.push(std::mem::replace(&mut boxes, r.boxes));
        features.push(std::mem::replace(&mut feats, r.features));
        sources.push(r.source);
    }
    let max_size = max_decoded_size(canvas.0, canvas.1);
    let last = heads.len() - 1;
    let outputs = boxes
        .iter()
        .zip(&feats)
        .enumerate()
        .filter_map(|(i, (b, x))| {
            let d = regress(heads[last], backbone, &stats[last], b, x, max_size);
            if d.saturated {
                return None;
            }
            clip(&d.bbox, canvas.0, canvas.1).map(|c| (i, c))
        })
        .collect();
    inputs.push(boxes);
    features.push(feats);
    Propagation { inputs, features, sources, outputs }
}

/// Class probabilities averaged over `classifiers`, all evaluated on `x`.
pub fn mean_probabilities(backbone: &SharedBackbone, heads: &[&HeadParams], x: &[f64]) -> Vec<f64> {
    let mut acc: Vec<f64> = Vec::new();
    for h in heads {
        let p = softmax(&model::forward(h, backbone, x).logits);
        if acc.is_empty() {
            acc = p;
        } else {
            acc.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        }
    }
    let n = heads.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Turns boxes with class probabilities into detections: one per foreground
/// class above the score threshold, class-wise NMS, then the top scores.
pub fn finalize_detections(boxes: &[BBox], probs: &[Vec<f64>], opts: &InferOptions) -> Vec<Detection> {
    let mut dets = Vec::new();
    for (b, p) in boxes.iter().zip(probs) {
        for (c, &s) in p.iter().enumerate().skip(1) {
            if s >= opts.score_threshold {
                dets.push(Detection { bbox: *b, class_id: c, score: s });
            }
        }
    }
    let mut kept = nms(&dets, opts.nms_iou);
    kept.sort_by(|a, b| b.score.total_cmp(&a.score));
    kept.truncate(opts.max_detections);
    kept
}

/// Runs the cascade on a scene.
pub fn infer(model: &CascadeModel, scene: &Scene, opts: &InferOptions, src: &FeatureSource) -> Result<Vec<Detection>> {
    let t = model.num_stages();
    let scorers: Vec<&HeadParams> = match opts.test_stage {
        TestStage::Stage(s) if (1..=t).contains(&s) => vec![&model.heads[s - 1]],
        TestStage::Ensemble(k) if (1..=t).contains(&k) => model.heads[..k].iter().collect(),
        other => return Err(Error::Config(format!("test stage {other} is not available in a {t}-stage model"))),
    };
    if scene.proposals.is_empty() {
        return Ok(Vec::new());
    }
    let heads: Vec<&HeadParams> = model.heads.iter().collect();
    let stats: Vec<NormStats> = model.configs.iter().map(|c| c.norm_stats).collect();
    let prop = propagate(&model.backbone, &heads, &stats, scene, src);
    let last_feats = prop.features.last().expect("at least one stage");
    let (boxes, probs): (Vec<BBox>, Vec<Vec<f64>>) =
        prop.outputs.iter().map(|(i, b)| (*b, mean_probabilities(&model.backbone, &scorers, &last_feats[*i]))).unzip();
    Ok(finalize_detections(&boxes, &probs, opts))
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub iteration: usize,
    pub stage: usize,
    pub loss: f64,
    pub cls_loss: f64,
    pub loc_loss: f64,
    pub positives: usize,
    pub samples: usize,
}

/// Per-stage sample counts accumulated over training.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StageCounts {
    pub samples: usize,
    pub positives: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: CascadeModel,
    pub log: Vec<LogRow>,
    pub counts: Vec<StageCounts>,
}

pub(crate) fn fit_input_norm(dataset: &[Scene], dim: usize) -> InputNorm {
    InputNorm::fit(dim, dataset.iter().flat_map(|s| s.proposals.iter().map(|p| p.features.as_slice())))
}

pub(crate) fn to_samples(labeled: &[LabeledSample], feats: &[Vec<f64>], stats: &NormStats) -> Vec<TrainSample> {
    labeled
        .iter()
        .map(|s| TrainSample {
            features: feats[s.proposal_index].clone(),
            label: s.label,
            target: s.regression_target.map(|d| normalize(&d, stats)),
        })
        .collect()
}

pub(crate) fn check_dataset(dataset: &[Scene], dim: usize) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    for (i, s) in dataset.iter().enumerate() {
        if let Some(p) = s.proposals.iter().find(|p| p.features.len() != dim) {
            return Err(Error::Shape(format!("scene {i}: feature length {} != {dim}", p.features.len())));
        }
    }
    Ok(())
}

/// Learning rate at `it` under the step schedule.
pub(crate) fn rate_at(cfg: &CascadeConfig, it: usize) -> f64 {
    if (it as f64) >= cfg.lr_drop_at * cfg.iterations as f64 {
        cfg.lr * 0.1
    } else {
        cfg.lr
    }
}

/// Cycles through scenes, reshuffling every epoch.
pub(crate) struct SceneCycle {
    order: Vec<usize>,
    pos: usize,
}

impl SceneCycle {
    pub(crate) fn new(n: usize) -> Self {
        Self { order: (0..n).collect(), pos: n }
    }

    /// Next scene index and whether it starts a new epoch.
    pub(crate) fn next<R: Rng + ?Sized>(&mut self, rng: &mut R) -> (usize, bool) {
        let fresh = self.pos == self.order.len();
        if fresh {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        (self.order[self.pos - 1], fresh)
    }
}

/// Running per-stage log accumulator.
pub(crate) struct LogAcc {
    pub(crate) loss: f64,
    pub(crate) cls: f64,
    pub(crate) loc: f64,
    pub(crate) positives: usize,
    pub(crate) samples: usize,
    pub(crate) n: usize,
}

impl LogAcc {
    pub(crate) fn new() -> Self {
        Self { loss: 0.0, cls: 0.0, loc: 0.0, positives: 0, samples: 0, n: 0 }
    }
}

struct StageBatch {
    boxes: Vec<BBox>,
    feats: Vec<Vec<f64>>,
}

/// Trains a cascade on `dataset`. Deterministic given `seed`.
pub fn train_cascade(dataset: &[Scene], scene_cfg: &SceneConfig, cfg: &CascadeConfig, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    scene_cfg.validate()?;
    let dim = scene_cfg.feature_dim();
    check_dataset(dataset, dim)?;

    let mut init = rng::stream(seed, Stream::Init, 0);
    let backbone = SharedBackbone::new(fit_input_norm(dataset, dim), cfg.shared_backbone, &mut init);
    let heads: Vec<HeadParams> =
        (0..cfg.num_stages()).map(|_| HeadParams::new(dim, scene_cfg.num_classes, cfg.hidden, &mut init)).collect();
    let mut model = CascadeModel { backbone, heads, configs: cfg.stages(), num_classes: scene_cfg.num_classes };
    if cfg.norm_mode == NormMode::Empirical {
        let deltas: Vec<Delta> = dataset
            .iter()
            .flat_map(|s| select_regression_set(&assign_labels(&s.proposals, &s.gts, cfg.thresholds[0])))
            .filter_map(|s| s.regression_target)
            .collect();
        model.configs[0].norm_stats = empirical_norm_stats(&deltas, model.configs[0].norm_stats);
    }

    match cfg.schedule {
        Schedule::Joint => train_joint(&mut model, dataset, scene_cfg, cfg, seed),
        Schedule::Sequential => train_sequential(&mut model, dataset, scene_cfg, cfg, seed),
    }
}

fn train_joint(
    model: &mut CascadeModel,
    dataset: &[Scene],
    scene_cfg: &SceneConfig,
    cfg: &CascadeConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let t_count = cfg.num_stages();
    let canvas = (scene_cfg.canvas_w, scene_cfg.canvas_h);
    let spec = LossSpec { lambda: cfg.lambda };
    let mut sampler = rng::stream(seed, Stream::Sampling, 0);
    let mut cycle = SceneCycle::new(dataset.len());
    let mut counts = vec![StageCounts::default(); t_count];
    let mut epoch_pos = vec![0usize; t_count];
    let mut epoch_deltas: Vec<Vec<Delta>> = vec![Vec::new(); t_count];
    let mut log = Vec::new();
    let mut acc: Vec<LogAcc> = (0..t_count).map(|_| LogAcc::new()).collect();
    let mut epoch = 0usize;

    for it in 0..cfg.iterations {
        let lr = rate_at(cfg, it);
        let mut head_grads: Vec<HeadParams> = model.heads.iter().map(HeadParams::zeros_like).collect();
        let mut bb_grad = model.backbone.zeros_like();

        for k in 0..cfg.scenes_per_iteration {
            let (si, fresh) = cycle.next(&mut sampler);
            if fresh && it + k > 0 {
                end_epoch(model, cfg, &mut epoch_pos, &mut epoch_deltas, epoch);
                epoch += 1;
            }
            let scene = &dataset[si];
            let labeled = assign_labels(&scene.proposals, &scene.gts, model.configs[0].u);
            let picked = sample_minibatch(&labeled, cfg.batch_size, cfg.pos_fraction, &mut sampler);
            let mut batch = StageBatch {
                boxes: picked.iter().map(|s| scene.proposals[s.proposal_index].bbox).collect(),
                feats: picked.iter().map(|s| scene.proposals[s.proposal_index].features.clone()).collect(),
            };
            for t in 0..t_count {
                let stage = model.configs[t];
                let labeled = assign_labels(&batch.boxes, &scene.gts, stage.u);
                let samples = to_samples(&labeled, &batch.feats, &stage.norm_stats);
                let res = model::backward(&model.heads[t], &model.backbone, &samples, &spec);
                if !res.loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "stage {} loss at iteration {it} (cls {}, loc {})",
                        t + 1,
                        res.cls_loss,
                        res.loc_loss
                    )));
                }
                let w = stage.loss_weight;
                head_grads[t].axpy(w / cfg.scenes_per_iteration as f64, &res.grads.head);
                if let (Some(acc_bb), Some(g)) = (bb_grad.as_mut(), res.grads.backbone.as_ref()) {
                    acc_bb.axpy(w / cfg.scenes_per_iteration as f64, g);
                }
                counts[t].samples += samples.len();
                counts[t].positives += res.positives;
                epoch_pos[t] += res.positives;
                if cfg.norm_mode == NormMode::Empirical {
                    epoch_deltas[t].extend(labeled.iter().filter_map(|s| s.regression_target));
                }
                let a = &mut acc[t];
                a.loss += res.loss;
                a.cls += res.cls_loss;
                a.loc += res.loc_loss;
                a.positives += res.positives;
                a.samples += samples.len();
                a.n += 1;

                if t + 1 < t_count && !batch.boxes.is_empty() {
                    let feature_seed = sub_index((it * cfg.scenes_per_iteration + k) as u64, (t + 1) as u64);
                    let r = resample_stage(&batch.boxes, &batch.feats, &model.heads[t], &model.backbone, &stage.norm_stats, canvas, |b| {
                        encode_all(b, &scene.gts, scene_cfg, &mut rng::stream(seed, Stream::TrainFeatures, feature_seed))
                    });
                    batch = StageBatch { boxes: r.boxes, feats: r.features };
                }
            }
        }

        for (t, (head, g)) in model.heads.iter_mut().zip(&head_grads).enumerate() {
            sgd_step(head, g, lr, model.configs[t].loss_weight)
                .map_err(|e| Error::NonFinite(format!("stage {} at iteration {it}: {e}", t + 1)))?;
        }
        if let Some(g) = &bb_grad {
            backbone_step(&mut model.backbone, g, lr).map_err(|e| Error::NonFinite(format!("iteration {it}: {e}")))?;
        }
        flush_log(&mut log, &mut acc, it, cfg);
    }
    Ok(TrainOutcome { model: model.clone(), log, counts })
}

fn end_epoch(model: &mut CascadeModel, cfg: &CascadeConfig, pos: &mut [usize], deltas: &mut [Vec<Delta>], epoch: usize) {
    for (t, p) in pos.iter_mut().enumerate() {
        if *p == 0 {
            log::warn!(
                "stage {} (u = {}) saw no positives during epoch {epoch}; thresholds may be miscalibrated",
                t + 1,
                model.configs[t].u
            );
        }
        *p = 0;
    }
    if cfg.norm_mode == NormMode::Empirical {
        for (t, d) in deltas.iter_mut().enumerate().skip(1) {
            model.configs[t].norm_stats = empirical_norm_stats(d, model.configs[t].norm_stats);
            d.clear();
        }
    }
}

pub(crate) fn flush_log(log: &mut Vec<LogRow>, acc: &mut [LogAcc], it: usize, cfg: &CascadeConfig) {
    if !(it + 1).is_multiple_of(cfg.log_every.max(1)) && it + 1 != cfg.iterations {
        return;
    }
    for (t, a) in acc.iter_mut().enumerate() {
        let n = a.n.max(1) as f64;
        log.push(LogRow {
            iteration: it + 1,
            stage: t + 1,
            loss: a.loss / n,
            cls_loss: a.cls / n,
            loc_loss: a.loc / n,
            positives: a.positives,
            samples: a.samples,
        });
        *a = LogAcc::new();
    }
}

/// Scenes as seen by one stage in sequential training.
struct StageData {
    gts: Vec<GroundTruth>,
    boxes: Vec<BBox>,
    feats: Vec<Vec<f64>>,
}

fn train_sequential(
    model: &mut CascadeModel,
    dataset: &[Scene],
    scene_cfg: &SceneConfig,
    cfg: &CascadeConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let t_count = cfg.num_stages();
    let canvas = (scene_cfg.canvas_w, scene_cfg.canvas_h);
    let spec = LossSpec { lambda: cfg.lambda };
    let mut sampler = rng::stream(seed, Stream::Sampling, 0);
    let mut data: Vec<StageData> = dataset
        .iter()
        .map(|s| StageData { gts: s.gts.clone(), boxes: s.boxes(), feats: s.proposals.iter().map(|p| p.features.clone()).collect() })
        .collect();
    let mut counts = vec![StageCounts::default(); t_count];
    let mut log = Vec::new();

    #[allow(clippy::needless_range_loop)]
    for t in 0..t_count {
        if t > 0 && cfg.norm_mode == NormMode::Empirical {
            let deltas: Vec<Delta> = data
                .iter()
                .flat_map(|d| select_regression_set(&assign_labels(&d.boxes, &d.gts, cfg.thresholds[t])))
                .filter_map(|s| s.regression_target)
                .collect();
            model.configs[t].norm_stats = empirical_norm_stats(&deltas, model.configs[t].norm_stats);
        }
        let stage = model.configs[t];
        let mut cycle = SceneCycle::new(data.len());
        let mut acc = [LogAcc::new()];
        let mut epoch_pos = 0usize;
        for it in 0..cfg.iterations {
            let lr = rate_at(cfg, it);
            let mut head_grad = model.heads[t].zeros_like();
            let mut bb_grad = if t == 0 { model.backbone.zeros_like() } else { None };
            for _ in 0..cfg.scenes_per_iteration {
                let (si, fresh) = cycle.next(&mut sampler);
                if fresh && it > 0 {
                    if epoch_pos == 0 {
                        log::warn!("stage {} (u = {}) saw no positives during an epoch", t + 1, stage.u);
                    }
                    epoch_pos = 0;
                }
                let d = &data[si];
                let labeled = assign_labels(&d.boxes, &d.gts, stage.u);
                let picked = sample_minibatch(&labeled, cfg.batch_size, cfg.pos_fraction, &mut sampler);
                let samples = to_samples(&picked, &d.feats, &stage.norm_stats);
                let res = model::backward(&model.heads[t], &model.backbone, &samples, &spec);
                if !res.loss.is_finite() {
                    return Err(Error::NonFinite(format!("stage {} loss at iteration {it}", t + 1)));
                }
                let scale = 1.0 / cfg.scenes_per_iteration as f64;
                head_grad.axpy(scale, &res.grads.head);
                if let (Some(acc_bb), Some(g)) = (bb_grad.as_mut(), res.grads.backbone.as_ref()) {
                    acc_bb.axpy(scale, g);
                }
                counts[t].samples += samples.len();
                counts[t].positives += res.positives;
                epoch_pos += res.positives;
                let a = &mut acc[0];
                a.loss += res.loss;
                a.cls += res.cls_loss;
                a.loc += res.loc_loss;
                a.positives += res.positives;
                a.samples += samples.len();
                a.n += 1;
            }
            // Stages train one at a time here, so no loss weighting applies.
            sgd_step(&mut model.heads[t], &head_grad, lr, 1.0)?;
            if let Some(g) = &bb_grad {
                backbone_step(&mut model.backbone, g, lr)?;
            }
            if (it + 1) % cfg.log_every.max(1) == 0 || it + 1 == cfg.iterations {
                let a = &acc[0];
                let n = a.n.max(1) as f64;
                log.push(LogRow {
                    iteration: it + 1,
                    stage: t + 1,
                    loss: a.loss / n,
                    cls_loss: a.cls / n,
                    loc_loss: a.loc / n,
                    positives: a.positives,
                    samples: a.samples,
                });
                acc[0] = LogAcc::new();
            }
        }
        if t + 1 < t_count {
            for (si, d) in data.iter_mut().enumerate() {
                let feature_seed = sub_index((1u64 << 40) + si as u64, (t + 1) as u64);
                let gts = d.gts.clone();
                let r = resample_stage(&d.boxes, &d.feats, &model.heads[t], &model.backbone, &stage.norm_stats, canvas, |b| {
                    encode_all(b, &gts, scene_cfg, &mut rng::stream(seed, Stream::TrainFeatures, feature_seed))
                });
                d.boxes = r.boxes;
                d.feats = r.features;
            }
        }
    }
    Ok(TrainOutcome { model: model.clone(), log, counts })
}

/// Convenience: detections for every scene, in scene order.
pub fn infer_all(
    model: &CascadeModel,
    scenes: &[Scene],
    opts: &InferOptions,
    scene_cfg: &SceneConfig,
    seed: u64,
) -> Result<Vec<Vec<Detection>>> {
    use rayon::prelude::*;
    scenes.par_iter().enumerate().map(|(i, s)| infer(model, s, opts, &FeatureSource { scene_cfg, seed, scene_index: i as u64 })).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assign::Proposal;
    use crate::geom::iou;
    use crate::model::Dense;
    use crate::synth::gen_dataset;
    use approx::assert_abs_diff_eq;

    #[test]
    fn default_stats_follow_sigma_over_t() {
        let s = default_norm_stats(3);
        assert_eq!(s[0].sigma, [0.1, 0.1, 0.2, 0.2]);
        assert_eq!(s[1].sigma, [0.05, 0.05, 0.1, 0.1]);
        for (a, b) in s[2].sigma.iter().zip([0.1 / 3.0, 0.1 / 3.0, 0.2 / 3.0, 0.2 / 3.0]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        assert!(s.iter().all(|x| x.mu == [0.0; 4]));
        assert_eq!(default_norm_stats(1)[0].sigma, [0.1, 0.1, 0.2, 0.2]);
        assert_eq!(default_norm_stats(5)[4].sigma, [0.02, 0.02, 0.04, 0.04]);
    }

    #[test]
    fn empirical_stats_floor_at_exact_proposals() {
        let s = empirical_norm_stats(&[Delta::ZERO; 50], NormStats::identity());
        assert_eq!(s.sigma, [SIGMA_FLOOR; 4]);
        assert_eq!(s.mu, [0.0; 4]);

        // Monte Carlo estimate from noise-free data with every proposal on its object.
        let cfg = SceneConfig { jitter_scale: 0.0, feature_noise: 0.0, background_proposals: 0, ..Default::default() };
        let scenes = gen_dataset(&cfg, 1, Stream::TrainScenes, 5);
        let deltas: Vec<Delta> = scenes
            .iter()
            .flat_map(|s| select_regression_set(&assign_labels(&s.proposals, &s.gts, 0.5)))
            .filter_map(|s| s.regression_target)
            .collect();
        assert!(!deltas.is_empty());
        assert_eq!(empirical_norm_stats(&deltas, NormStats::identity()).sigma, [SIGMA_FLOOR; 4]);
    }

    #[test]
    fn stage_weights() {
        let c = CascadeConfig::default();
        assert_eq!(c.stage_weights(), vec![1.0, 0.5, 0.25]);
        let c = CascadeConfig { weighting: Weighting::Avg, ..Default::default() };
        assert_eq!(c.stage_weights(), vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn thresholds_must_increase() {
        let c = CascadeConfig { thresholds: vec![0.5, 0.5], ..Default::default() };
        assert!(c.validate().is_err());
        let c = CascadeConfig { thresholds: vec![0.6, 0.5], ..Default::default() };
        assert!(c.validate().is_err());
        let c = CascadeConfig { thresholds: vec![1.0], ..Default::default() };
        assert!(c.validate().is_err());
        assert!(CascadeConfig::default().validate().is_ok());
    }

    #[test]
    fn test_stage_parsing() {
        assert_eq!("2".parse::<TestStage>().unwrap(), TestStage::Stage(2));
        assert_eq!("1~3".parse::<TestStage>().unwrap(), TestStage::Ensemble(3));
        assert_eq!("1-2".parse::<TestStage>().unwrap(), TestStage::Ensemble(2));
        assert_eq!("ens3".parse::<TestStage>().unwrap(), TestStage::Ensemble(3));
        assert!("0".parse::<TestStage>().is_err());
        assert!("2~3".parse::<TestStage>().is_err());
    }

    fn zero_model(dim: usize, m: usize, stages: usize) -> CascadeModel {
        let cfg = CascadeConfig { thresholds: [0.5, 0.6, 0.7][..stages].to_vec(), ..Default::default() };
        CascadeModel {
            backbone: SharedBackbone { input_norm: InputNorm::identity(dim), layer: None },
            heads: (0..stages).map(|_| HeadParams::zeros(dim, m, 4)).collect(),
            configs: cfg.stages(),
            num_classes: m,
        }
    }

    #[test]
    fn zero_regressor_keeps_boxes() {
        let cfg = SceneConfig::default();
        let scene = gen_dataset(&cfg, 3, Stream::TestScenes, 1).remove(0);
        let m = zero_model(cfg.feature_dim(), 3, 2);
        let feats: Vec<Vec<f64>> = scene.proposals.iter().map(|p| p.features.clone()).collect();
        let r = resample_stage(&scene.boxes(), &feats, &m.heads[0], &m.backbone, &m.configs[0].norm_stats, (1000.0, 1000.0), |b| {
            vec![vec![0.0; 10]; b.len()]
        });
        assert_eq!(r.boxes.len(), scene.proposals.len());
        for (a, b) in r.boxes.iter().zip(scene.boxes()) {
            for (x, y) in a.to_array().iter().zip(b.to_array()) {
                assert!((x - y).abs() < 1e-9, "{a:?} vs {b:?}");
            }
        }
        assert_eq!(r.source, (0..scene.proposals.len()).collect::<Vec<_>>());
    }

    #[test]
    fn single_stage_propagation_never_resamples() {
        let cfg = SceneConfig::default();
        let scene = gen_dataset(&cfg, 3, Stream::TestScenes, 1).remove(0);
        let m = zero_model(cfg.feature_dim(), 3, 1);
        let src = FeatureSource { scene_cfg: &cfg, seed: 0, scene_index: 0 };
        let p = propagate(&m.backbone, &[&m.heads[0]], &[m.configs[0].norm_stats], &scene, &src);
        assert_eq!(p.inputs.len(), 1);
        assert_eq!(p.inputs[0], scene.boxes());
        assert_eq!(p.features[0][0], scene.proposals[0].features);
    }

    #[test]
    fn all_degenerate_boxes_give_empty_stage() {
        let m = zero_model(10, 3, 2);
        let mut head = m.heads[0].clone();
        head.reg.bias = vec![0.0, 0.0, -1e4, 0.0];
        let b = vec![BBox::new(1.0, 1.0, 5.0, 5.0).unwrap()];
        let r =
            resample_stage(&b, &[vec![0.0; 10]], &head, &m.backbone, &NormStats::identity(), (10.0, 10.0), |_| panic!("nothing to encode"));
        assert!(r.boxes.is_empty());
    }

    #[test]
    fn empty_scene_gives_no_detections() {
        let cfg = SceneConfig::default();
        let m = zero_model(cfg.feature_dim(), 3, 3);
        let scene = Scene { gts: vec![], proposals: vec![] };
        let src = FeatureSource { scene_cfg: &cfg, seed: 0, scene_index: 0 };
        assert!(infer(&m, &scene, &InferOptions::ensemble(3), &src).unwrap().is_empty());
        assert!(infer(&m, &scene, &InferOptions::ensemble(4), &src).is_err());
    }

    #[test]
    fn detections_follow_class_probabilities() {
        let cfg = SceneConfig { feature_noise: 0.0, ..Default::default() };
        let mut m = zero_model(cfg.feature_dim(), 3, 3);
        // Logit 2 reads the class-2 evidence coordinate.
        for h in &mut m.heads {
            h.hidden = None;
            h.cls = Dense::zeros(4, cfg.feature_dim());
            h.reg = Dense::zeros(4, cfg.feature_dim());
            h.cls.weight[2 * cfg.feature_dim() + 5] = 20.0;
        }
        let g = GroundTruth { class_id: 2, bbox: BBox::new(100.0, 100.0, 200.0, 220.0).unwrap() };
        let mut rng = rng::stream(0, Stream::Injection, 0);
        let features = crate::synth::encode_features(&g.bbox, &[g], &cfg, &mut rng);
        let scene = Scene { gts: vec![g], proposals: vec![Proposal { bbox: g.bbox, features }] };
        let src = FeatureSource { scene_cfg: &cfg, seed: 0, scene_index: 0 };
        let dets = infer(&m, &scene, &InferOptions::ensemble(3), &src).unwrap();
        assert_eq!(dets[0].class_id, 2);
        assert!(dets[0].score > 0.99);
        assert_abs_diff_eq!(iou(&dets[0].bbox, &g.bbox), 1.0, epsilon = 1e-12);
    }
}
