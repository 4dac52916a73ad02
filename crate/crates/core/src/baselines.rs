//! Comparison detectors: a single-stage head, iterative box refinement with
//! one repeated regressor, and a head trained with an integral loss over
//! several IoU thresholds.

use serde::Serialize;

use crate::assign::{assign_labels, sample_minibatch, select_regression_set};
use crate::cascade::{
    self, empirical_norm_stats, finalize_detections, propagate, rate_at, to_samples, CascadeConfig, CascadeModel, Detection, FeatureSource,
    InferOptions, LogAcc, LogRow, NormMode, StageConfig, StageCounts, TestStage, TrainOutcome,
};
use crate::error::{Error, Result};
use crate::geom::{BBox, Delta};
use crate::losses::{softmax, softmax_xent, NormStats};
use crate::model::{
    self, backbone_step, sgd_step, trunk_backward, trunk_forward, Dense, HeadParams, IntegralRecord, LossSpec, ModelFile, SharedBackbone,
    Variant, OUTPUT_INIT_STD,
};
use crate::rng::{self, Stream};
use crate::synth::{Scene, SceneConfig};

/// Trains a one-stage detector at threshold `u` with the cascade machinery.
pub fn train_single(dataset: &[Scene], scene_cfg: &SceneConfig, u: f64, cfg: &CascadeConfig, seed: u64) -> Result<TrainOutcome> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::Config(format!("threshold {u} must lie in (0, 1)")));
    }
    let cfg = CascadeConfig { thresholds: vec![u], ..cfg.clone() };
    cascade::train_cascade(dataset, scene_cfg, &cfg, seed)
}

/// Applies the single regressor of `model` `iterations` times, re-encoding
/// features in between, and scores the final boxes once.
pub fn iterative_bbox_infer(
    model: &CascadeModel,
    scene: &Scene,
    iterations: usize,
    opts: &InferOptions,
    src: &FeatureSource,
) -> Result<Vec<Detection>> {
    if model.num_stages() != 1 {
        return Err(Error::Config(format!("iterative inference needs a single-stage model, got {} stages", model.num_stages())));
    }
    if iterations == 0 {
        return Err(Error::Config("iterations must be at least 1".into()));
    }
    if scene.proposals.is_empty() {
        return Ok(Vec::new());
    }
    let head = &model.heads[0];
    let heads = vec![head; iterations];
    let stats = vec![model.configs[0].norm_stats; iterations];
    let prop = propagate(&model.backbone, &heads, &stats, scene, src);
    let last = prop.features.last().expect("at least one step");
    let (boxes, probs): (Vec<BBox>, Vec<Vec<f64>>) =
        prop.outputs.iter().map(|(i, b)| (*b, cascade::mean_probabilities(&model.backbone, &[head], &last[*i]))).unzip();
    Ok(finalize_detections(&boxes, &probs, opts))
}

/// Head with one classifier per threshold on a shared trunk and a single
/// regressor trained at the lowest threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegralLossModel {
    pub backbone: SharedBackbone,
    /// Trunk, classifier for `thresholds[0]` and the regressor.
    pub head: HeadParams,
    /// Classifiers for `thresholds[1..]`.
    pub extra_classifiers: Vec<Dense>,
    pub thresholds: Vec<f64>,
    pub norm_stats: NormStats,
    pub lambda: f64,
    pub num_classes: usize,
}

impl IntegralLossModel {
    pub fn to_file(&self, config: serde_json::Value) -> ModelFile {
        let single = CascadeModel {
            backbone: self.backbone.clone(),
            heads: vec![self.head.clone()],
            configs: vec![StageConfig { u: self.thresholds[0], norm_stats: self.norm_stats, loss_weight: 1.0, lambda: self.lambda }],
            num_classes: self.num_classes,
        };
        let mut file = single.to_file(Variant::Integral, config);
        file.integral = Some(IntegralRecord { thresholds: self.thresholds.clone(), extra_classifiers: self.extra_classifiers.clone() });
        file
    }

    pub fn from_file(file: &ModelFile) -> Result<Self> {
        let base = CascadeModel::from_file(file)?;
        let rec = file.integral.as_ref().ok_or_else(|| Error::Format("integral model lacks classifier record".into()))?;
        if base.num_stages() != 1 {
            return Err(Error::Format("integral model must have exactly one regressor".into()));
        }
        Ok(Self {
            backbone: base.backbone,
            head: base.heads[0].clone(),
            extra_classifiers: rec.extra_classifiers.clone(),
            thresholds: rec.thresholds.clone(),
            norm_stats: base.configs[0].norm_stats,
            lambda: base.configs[0].lambda,
            num_classes: base.num_classes,
        })
    }

    /// Mean class probabilities over all classifiers for features `x`.
    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        let mut acc = softmax(&model::forward(&self.head, &self.backbone, x).logits);
        if !self.extra_classifiers.is_empty() {
            let h = trunk_forward(&self.backbone, self.head.hidden.as_ref(), x).h;
            for c in &self.extra_classifiers {
                acc.iter_mut().zip(softmax(&c.forward(&h))).for_each(|(a, p)| *a += p);
            }
        }
        let n = (1 + self.extra_classifiers.len()) as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}

#[derive(Debug, Clone)]
pub struct IntegralOutcome {
    pub model: IntegralLossModel,
    pub log: Vec<LogRow>,
    /// Samples and positives seen per threshold.
    pub counts: Vec<StageCounts>,
}

fn check_thresholds(u: &[f64]) -> Result<()> {
    if u.is_empty() {
        return Err(Error::Config("integral loss needs at least one threshold".into()));
    }
    if u.iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
        return Err(Error::Config(format!("thresholds {u:?} must lie in (0, 1)")));
    }
    if u.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(format!("thresholds {u:?} must be strictly increasing")));
    }
    Ok(())
}

/// Cross-entropy of one extra classifier, backpropagated into its weights
/// and the trunk. Returns the mean loss.
fn classifier_backward(
    backbone: &SharedBackbone,
    hidden: Option<&Dense>,
    cls: &Dense,
    batch: &[(&[f64], usize)],
    g_cls: &mut Dense,
    mut g_hidden: Option<&mut Dense>,
    mut g_backbone: Option<&mut Dense>,
) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let inv_n = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for (x, label) in batch {
        let t = trunk_forward(backbone, hidden, x);
        let (xent, mut dlogits) = softmax_xent(&cls.forward(&t.h), *label);
        total += xent;
        dlogits.iter_mut().for_each(|g| *g *= inv_n);
        let dh = cls.backward(&t.h, &dlogits, g_cls);
        trunk_backward(backbone, hidden, &t, &dh, g_backbone.as_deref_mut(), g_hidden.as_deref_mut());
    }
    total * inv_n
}

/// Trains with the summed classification loss over `thresholds` on the same
/// (unresampled) minibatches. With one threshold this is the single-stage
/// detector.
pub fn train_integral_loss(
    dataset: &[Scene],
    scene_cfg: &SceneConfig,
    thresholds: &[f64],
    cfg: &CascadeConfig,
    seed: u64,
) -> Result<IntegralOutcome> {
    check_thresholds(thresholds)?;
    let single_cfg = CascadeConfig { thresholds: vec![thresholds[0]], ..cfg.clone() };
    single_cfg.validate()?;
    scene_cfg.validate()?;
    let dim = scene_cfg.feature_dim();
    cascade::check_dataset(dataset, dim)?;

    let mut init = rng::stream(seed, Stream::Init, 0);
    let backbone = SharedBackbone::new(cascade::fit_input_norm(dataset, dim), cfg.shared_backbone, &mut init);
    let mut head = HeadParams::new(dim, scene_cfg.num_classes, cfg.hidden, &mut init);
    let trunk_dim = head.cls.cols;
    let mut extra: Vec<Dense> =
        (1..thresholds.len()).map(|_| Dense::gaussian(scene_cfg.num_classes + 1, trunk_dim, OUTPUT_INIT_STD, &mut init)).collect();
    let mut stats = single_cfg.stages()[0].norm_stats;
    if cfg.norm_mode == NormMode::Empirical {
        let deltas: Vec<Delta> = dataset
            .iter()
            .flat_map(|s| select_regression_set(&assign_labels(&s.proposals, &s.gts, thresholds[0])))
            .filter_map(|s| s.regression_target)
            .collect();
        stats = empirical_norm_stats(&deltas, stats);
    }
    let mut backbone = backbone;
    let spec = LossSpec { lambda: cfg.lambda };
    let mut sampler = rng::stream(seed, Stream::Sampling, 0);
    let mut cycle = cascade::SceneCycle::new(dataset.len());
    let mut counts = vec![StageCounts::default(); thresholds.len()];
    let mut acc: Vec<LogAcc> = thresholds.iter().map(|_| LogAcc::new()).collect();
    let mut log = Vec::new();
    let mut epoch_pos = 0usize;
    let scale = 1.0 / cfg.scenes_per_iteration as f64;

    for it in 0..cfg.iterations {
        let lr = rate_at(&single_cfg, it);
        let mut head_grad = head.zeros_like();
        let mut extra_grad: Vec<Dense> = extra.iter().map(Dense::zeros_like).collect();
        let mut bb_grad = backbone.zeros_like();
        for k in 0..cfg.scenes_per_iteration {
            let (si, fresh) = cycle.next(&mut sampler);
            if fresh && it + k > 0 {
                if epoch_pos == 0 {
                    log::warn!("threshold {} saw no positives during an epoch", thresholds[0]);
                }
                epoch_pos = 0;
            }
            let scene = &dataset[si];
            let labeled = assign_labels(&scene.proposals, &scene.gts, thresholds[0]);
            let picked = sample_minibatch(&labeled, cfg.batch_size, cfg.pos_fraction, &mut sampler);
            let boxes: Vec<BBox> = picked.iter().map(|s| scene.proposals[s.proposal_index].bbox).collect();
            let feats: Vec<Vec<f64>> = picked.iter().map(|s| scene.proposals[s.proposal_index].features.clone()).collect();

            let labeled0 = assign_labels(&boxes, &scene.gts, thresholds[0]);
            let samples = to_samples(&labeled0, &feats, &stats);
            let res = model::backward(&head, &backbone, &samples, &spec);
            if !res.loss.is_finite() {
                return Err(Error::NonFinite(format!("integral loss at iteration {it}")));
            }
            head_grad.axpy(scale, &res.grads.head);
            if let (Some(a), Some(g)) = (bb_grad.as_mut(), res.grads.backbone.as_ref()) {
                a.axpy(scale, g);
            }
            epoch_pos += res.positives;
            counts[0].samples += samples.len();
            counts[0].positives += res.positives;
            let a = &mut acc[0];
            a.loss += res.loss;
            a.cls += res.cls_loss;
            a.loc += res.loc_loss;
            a.positives += res.positives;
            a.samples += samples.len();
            a.n += 1;

            for (j, u) in thresholds.iter().enumerate().skip(1) {
                let labels = assign_labels(&boxes, &scene.gts, *u);
                let batch: Vec<(&[f64], usize)> = labels.iter().map(|s| (feats[s.proposal_index].as_slice(), s.label)).collect();
                let mut g_cls = extra[j - 1].zeros_like();
                let mut g_hidden = head.hidden.as_ref().map(Dense::zeros_like);
                let mut g_bb = backbone.zeros_like();
                let loss = classifier_backward(
                    &backbone,
                    head.hidden.as_ref(),
                    &extra[j - 1],
                    &batch,
                    &mut g_cls,
                    g_hidden.as_mut(),
                    g_bb.as_mut(),
                );
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!("integral classifier {} at iteration {it}", j + 1)));
                }
                extra_grad[j - 1].axpy(scale, &g_cls);
                if let (Some(a), Some(g)) = (head_grad.hidden.as_mut(), g_hidden.as_ref()) {
                    a.axpy(scale, g);
                }
                if let (Some(a), Some(g)) = (bb_grad.as_mut(), g_bb.as_ref()) {
                    a.axpy(scale, g);
                }
                let pos = labels.iter().filter(|s| s.is_positive()).count();
                counts[j].samples += labels.len();
                counts[j].positives += pos;
                let a = &mut acc[j];
                a.loss += loss;
                a.cls += loss;
                a.positives += pos;
                a.samples += labels.len();
                a.n += 1;
            }
        }
        sgd_step(&mut head, &head_grad, lr, 1.0).map_err(|e| Error::NonFinite(format!("iteration {it}: {e}")))?;
        for (c, g) in extra.iter_mut().zip(&extra_grad) {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("integral classifier gradient at iteration {it}")));
            }
            c.axpy(-lr, g);
        }
        if let Some(g) = &bb_grad {
            backbone_step(&mut backbone, g, lr).map_err(|e| Error::NonFinite(format!("iteration {it}: {e}")))?;
        }
        cascade::flush_log(&mut log, &mut acc, it, cfg);
    }
    let model = IntegralLossModel {
        backbone,
        head,
        extra_classifiers: extra,
        thresholds: thresholds.to_vec(),
        norm_stats: stats,
        lambda: cfg.lambda,
        num_classes: scene_cfg.num_classes,
    };
    Ok(IntegralOutcome { model, log, counts })
}

/// Regresses the proposals once and scores them with the averaged
/// classifiers, all on the proposals' own features.
pub fn integral_infer(model: &IntegralLossModel, scene: &Scene, opts: &InferOptions, src: &FeatureSource) -> Result<Vec<Detection>> {
    if scene.proposals.is_empty() {
        return Ok(Vec::new());
    }
    let prop = propagate(&model.backbone, &[&model.head], &[model.norm_stats], scene, src);
    let (boxes, probs): (Vec<BBox>, Vec<Vec<f64>>) =
        prop.outputs.iter().map(|(i, b)| (*b, model.probabilities(&scene.proposals[*i].features))).unzip();
    Ok(finalize_detections(&boxes, &probs, opts))
}

/// Any trained detector.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Detector {
    Single(CascadeModel),
    Iterative { model: CascadeModel, iterations: usize },
    Integral(IntegralLossModel),
    Cascade(CascadeModel),
}

impl Detector {
    pub fn variant(&self) -> Variant {
        match self {
            Detector::Single(_) => Variant::Single,
            Detector::Iterative { .. } => Variant::Iterative,
            Detector::Integral(_) => Variant::Integral,
            Detector::Cascade(_) => Variant::Cascade,
        }
    }

    /// Number of classifier stages that `TestStage` may address.
    pub fn num_stages(&self) -> usize {
        match self {
            Detector::Cascade(m) => m.num_stages(),
            _ => 1,
        }
    }

    pub fn detect(&self, scene: &Scene, opts: &InferOptions, src: &FeatureSource) -> Result<Vec<Detection>> {
        if !matches!(self, Detector::Cascade(_)) && !matches!(opts.test_stage, TestStage::Stage(1) | TestStage::Ensemble(1)) {
            return Err(Error::Config(format!("test stage {} needs a cascade model", opts.test_stage)));
        }
        match self {
            Detector::Single(m) | Detector::Cascade(m) => cascade::infer(m, scene, opts, src),
            Detector::Iterative { model, iterations } => iterative_bbox_infer(model, scene, *iterations, opts, src),
            Detector::Integral(m) => integral_infer(m, scene, opts, src),
        }
    }

    /// Detections for every scene, in scene order.
    pub fn detect_all(&self, scenes: &[Scene], opts: &InferOptions, scene_cfg: &SceneConfig, seed: u64) -> Result<Vec<Vec<Detection>>> {
        use rayon::prelude::*;
        scenes
            .par_iter()
            .enumerate()
            .map(|(i, s)| self.detect(s, opts, &FeatureSource { scene_cfg, seed, scene_index: i as u64 }))
            .collect()
    }

    pub fn to_file(&self, config: serde_json::Value) -> ModelFile {
        match self {
            Detector::Single(m) => m.to_file(Variant::Single, config),
            Detector::Cascade(m) => m.to_file(Variant::Cascade, config),
            Detector::Iterative { model, iterations } => {
                let mut f = model.to_file(Variant::Iterative, config);
                f.iterations = Some(*iterations);
                f
            }
            Detector::Integral(m) => m.to_file(config),
        }
    }

    pub fn from_file(file: &ModelFile) -> Result<Self> {
        let single = |m: CascadeModel| {
            if m.num_stages() == 1 {
                Ok(m)
            } else {
                Err(Error::Format(format!("{} model must have one stage", file.variant)))
            }
        };
        Ok(match file.variant {
            Variant::Cascade => Detector::Cascade(CascadeModel::from_file(file)?),
            Variant::Single => Detector::Single(single(CascadeModel::from_file(file)?)?),
            Variant::Iterative => Detector::Iterative {
                model: single(CascadeModel::from_file(file)?)?,
                iterations: file
                    .iterations
                    .filter(|n| *n >= 1)
                    .ok_or_else(|| Error::Format("iterative model needs iterations >= 1".into()))?,
            },
            Variant::Integral => Detector::Integral(IntegralLossModel::from_file(file)?),
        })
    }
}

/// Mean IoU to the best-matching object after each application of a
/// single-stage regressor, over proposals with IoU >= `min_iou` to start.
#[derive(Debug, Clone, Serialize)]
pub struct IterationGain {
    /// `mean_iou[0]` is the input; entry `k` follows `k` applications.
    pub mean_iou: Vec<f64>,
    pub count: usize,
}

/// Tracks positives through `iterations` applications of one regressor.
pub fn iteration_gain(
    model: &CascadeModel,
    scenes: &[Scene],
    iterations: usize,
    min_iou: f64,
    scene_cfg: &SceneConfig,
    seed: u64,
) -> IterationGain {
    let head = &model.heads[0];
    let heads = vec![head; iterations];
    let stats = vec![model.configs[0].norm_stats; iterations];
    let mut sums = vec![0.0; iterations + 1];
    let mut count = 0usize;
    for (si, scene) in scenes.iter().enumerate() {
        let src = FeatureSource { scene_cfg, seed, scene_index: si as u64 };
        if scene.proposals.is_empty() {
            continue;
        }
        let prop = propagate(&model.backbone, &heads, &stats, scene, &src);
        let best = |b: &BBox| crate::assign::best_match(b, &scene.gts).map_or(0.0, |(_, v)| v);
        // Follow each proposal through the steps via the surviving indices.
        let mut chains: Vec<Vec<f64>> = Vec::new();
        let mut index_at: Vec<Option<usize>> = Vec::new();
        for (i, b) in prop.inputs[0].iter().enumerate() {
            let v = best(b);
            if v >= min_iou {
                chains.push(vec![v]);
                index_at.push(Some(i));
            }
        }
        for step in 1..=iterations {
            let next: Vec<BBox> = if step < iterations { prop.inputs[step].clone() } else { Vec::new() };
            // Map from previous-step index to this-step index.
            let map = survivors(&prop, step);
            for (chain, idx) in chains.iter_mut().zip(index_at.iter_mut()) {
                *idx = idx.and_then(|i| map.get(&i).copied());
                match *idx {
                    Some(j) => {
                        let b = if step < iterations { next[j] } else { prop.outputs[j].1 };
                        chain.push(best(&b));
                    }
                    None => chain.clear(),
                }
            }
        }
        for c in chains.iter().filter(|c| c.len() == iterations + 1) {
            sums.iter_mut().zip(c).for_each(|(s, v)| *s += v);
            count += 1;
        }
    }
    let n = count.max(1) as f64;
    IterationGain { mean_iou: sums.iter().map(|s| s / n).collect(), count }
}

/// For step `step` (1-based), maps each surviving input index of step
/// `step - 1` to its index among the outputs of that step.
fn survivors(prop: &cascade::Propagation, step: usize) -> std::collections::HashMap<usize, usize> {
    if step < prop.inputs.len() {
        prop.sources[step - 1].iter().enumerate().map(|(j, &i)| (i, j)).collect()
    } else {
        prop.outputs.iter().enumerate().map(|(j, (i, _))| (*i, j)).collect()
    }
}
