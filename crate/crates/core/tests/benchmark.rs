//! Properties of detectors trained on the default benchmark.

use std::sync::OnceLock;

use cascade_core::assign::{GroundTruth, Proposal};
use cascade_core::baselines::{self, Detector, IntegralLossModel};
use cascade_core::cascade::{self, CascadeConfig, CascadeModel, FeatureSource, InferOptions, Schedule, TestStage, Weighting};
use cascade_core::config::ExperimentConfig;
use cascade_core::eval::ApReport;
use cascade_core::experiment::{evaluate, quality_trace, Benchmark};
use cascade_core::geom::{iou, BBox};
use cascade_core::rng::Stream;
use cascade_core::synth::{encode_features, gen_dataset, Scene, SceneConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Trained {
    cfg: ExperimentConfig,
    bench: Benchmark,
    cascade: CascadeModel,
    single: CascadeModel,
    integral: IntegralLossModel,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = ExperimentConfig::default();
        let bench = Benchmark::new(&cfg);
        let cascade = cascade::train_cascade(&bench.train, &cfg.scene, &cfg.cascade, cfg.seed).unwrap().model;
        let single = baselines::train_single(&bench.train, &cfg.scene, 0.5, &cfg.cascade, cfg.seed).unwrap().model;
        let integral =
            baselines::train_integral_loss(&bench.train, &cfg.scene, &cfg.integral_thresholds, &cfg.cascade, cfg.seed).unwrap().model;
        Trained { cfg, bench, cascade, single, integral }
    })
}

fn eval(det: &Detector, stage: TestStage) -> ApReport {
    let t = trained();
    let opts = InferOptions { test_stage: stage, ..Default::default() };
    evaluate(det, &t.bench.test, &opts, &t.cfg.scene, t.cfg.seed).unwrap()
}

#[test]
fn ensemble_is_no_worse_than_the_best_stage() {
    let det = Detector::Cascade(trained().cascade.clone());
    let best = (1..=3).map(|t| eval(&det, TestStage::Stage(t)).mean()).fold(0.0, f64::max);
    let ens = eval(&det, TestStage::Ensemble(3)).mean();
    assert!(ens >= best - 0.005, "ensemble {ens} vs best stage {best}");
}

#[test]
fn score_source_leaves_boxes_alone() {
    let t = trained();
    let scene = &t.bench.test[0];
    let src = FeatureSource { scene_cfg: &t.cfg.scene, seed: t.cfg.seed, scene_index: 0 };
    let raw = |stage| {
        // Keep everything so both runs see the same candidate set.
        let opts = InferOptions { test_stage: stage, score_threshold: 0.0, max_detections: usize::MAX, nms_iou: 1.0 - 1e-12 };
        cascade::infer(&t.cascade, scene, &opts, &src).unwrap()
    };
    let mut a: Vec<_> = raw(TestStage::Stage(1)).iter().map(|d| (d.bbox.to_array().map(f64::to_bits), d.class_id)).collect();
    let mut b: Vec<_> = raw(TestStage::Ensemble(3)).iter().map(|d| (d.bbox.to_array().map(f64::to_bits), d.class_id)).collect();
    a.sort_unstable();
    b.sort_unstable();
    assert_eq!(a, b);
    let sa: f64 = raw(TestStage::Stage(1)).iter().map(|d| d.score).sum();
    let sb: f64 = raw(TestStage::Ensemble(3)).iter().map(|d| d.score).sum();
    assert_ne!(sa, sb);
}

#[test]
fn clean_proposal_gives_one_detection() {
    let t = trained();
    let g = GroundTruth { class_id: 2, bbox: BBox::new(300.0, 300.0, 420.0, 380.0).unwrap() };
    let noiseless = SceneConfig { feature_noise: 0.0, ..t.cfg.scene.clone() };
    let features = encode_features(&g.bbox, std::slice::from_ref(&g), &noiseless, &mut ChaCha8Rng::seed_from_u64(0));
    let scene = Scene { gts: vec![g], proposals: vec![Proposal { bbox: g.bbox, features }] };
    let src = FeatureSource { scene_cfg: &noiseless, seed: 1, scene_index: 0 };
    for k in 1..=3 {
        let opts = InferOptions { score_threshold: 0.3, ..InferOptions::ensemble(k) };
        let dets = cascade::infer(&t.cascade, &scene, &opts, &src).unwrap();
        assert_eq!(dets.len(), 1, "ensemble {k}: {dets:?}");
        assert_eq!(dets[0].class_id, 2);
        assert!(iou(&dets[0].bbox, &g.bbox) > 0.95);
    }
}

#[test]
fn resampled_positives_gain_quality() {
    let t = trained();
    let trace = quality_trace(&t.cascade, &t.bench.test, &t.cfg.scene, t.cfg.seed);
    let pos: Vec<(f64, f64)> = trace.first.pairs.iter().filter(|(i, _)| *i >= 0.5).filter_map(|(i, o)| o.map(|o| (*i, o))).collect();
    let n = pos.len() as f64;
    let mean_in = pos.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_out = pos.iter().map(|p| p.1).sum::<f64>() / n;
    assert!(mean_out > mean_in, "{mean_out} vs {mean_in}");
}

#[test]
fn repeated_regression_saturates() {
    let t = trained();
    let g = baselines::iteration_gain(&t.single, &t.bench.test, 3, 0.5, &t.cfg.scene, t.cfg.seed);
    let m = &g.mean_iou;
    assert!(m[1] > m[0]);
    assert!(m[3] - m[2] < m[2] - m[1], "{m:?}");
}

fn integral_and_cascade_rows() -> ([f64; 6], [f64; 6]) {
    let t = trained();
    let cas = eval(&Detector::Cascade(t.cascade.clone()), TestStage::Ensemble(3)).table_row();
    let int = eval(&Detector::Integral(t.integral.clone()), TestStage::Ensemble(1)).table_row();
    (cas, int)
}

#[test]
fn integral_loss_trails_cascade() {
    let (cas, int) = integral_and_cascade_rows();
    assert!(int[0] < cas[0], "{} vs {}", int[0], cas[0]);
}

#[test]
fn integral_loss_gap_is_largest_at_ap90() {
    let (cas, int) = integral_and_cascade_rows();
    let gaps: Vec<f64> = cas.iter().zip(&int).skip(1).map(|(c, i)| c - i).collect();
    let ap90 = *gaps.last().unwrap();
    assert!(gaps[..gaps.len() - 1].iter().all(|g| *g < ap90), "gaps at AP50..AP90: {gaps:?}");
}

#[test]
fn other_schedules_train_finite_models() {
    let scene = SceneConfig::default();
    let data = gen_dataset(&scene, 3, Stream::TrainScenes, 80);
    for (weighting, schedule) in [(Weighting::Avg, Schedule::Joint), (Weighting::Decay, Schedule::Sequential)] {
        let cfg = CascadeConfig { weighting, schedule, iterations: 300, ..Default::default() };
        let m = cascade::train_cascade(&data, &scene, &cfg, 3).unwrap().model;
        assert_eq!(m.num_stages(), 3);
        assert!(m.heads.iter().all(|h| h.is_finite()));
    }
}

#[test]
fn noise_free_features_suffice_for_a_linear_regressor() {
    let scene = SceneConfig { feature_noise: 0.0, ..Default::default() };
    let train = gen_dataset(&scene, 5, Stream::TrainScenes, 400);
    let test = gen_dataset(&scene, 5, Stream::TestScenes, 100);
    let cfg = CascadeConfig { thresholds: vec![0.5], hidden: 0, shared_backbone: false, ..Default::default() };
    let model = cascade::train_cascade(&train, &scene, &cfg, 5).unwrap().model;
    let trace = quality_trace(&model, &test, &scene, 5);
    let out: Vec<f64> = trace.first.pairs.iter().filter(|(i, _)| *i >= 0.5).filter_map(|(_, o)| *o).collect();
    let mean = out.iter().sum::<f64>() / out.len() as f64;
    assert!(mean > 0.95, "{mean}");
}
