//! End-to-end acceptance suite. Prints one verdict line per criterion and
//! fails if any criterion fails.
//!
//! Lines go straight to the process stderr so they show up without
//! `--nocapture`.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use cascade_core::config::ExperimentConfig;
use cascade_core::eval::{coco_map, EvalOptions};
use cascade_core::experiment::{run_preset, Preset, Report};
use cascade_core::geom::{decode, encode, iou, BBox, Delta};
use cascade_core::losses::{loc_loss, softmax_xent};
use cascade_core::model::{backward, Dense, HeadParams, InputNorm, LossSpec, SharedBackbone, TrainSample};
use cascade_core::rng::Stream;
use cascade_core::synth::{fraction_at_least, gen_dataset, proposal_ious, SceneConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use common::{brute_force_map, majority, random_instance};

const SEEDS: [u64; 3] = [7, 8, 9];

struct Verdict {
    id: usize,
    title: &'static str,
    passed: bool,
    detail: String,
}

fn say(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Central difference with a kink guard: probes whose one-sided slopes
/// disagree straddle a rectifier or smooth-L1 corner and are skipped.
fn central<F: FnMut(f64) -> f64>(mut f: F, x: f64, h: f64) -> Option<f64> {
    let (up, mid, dn) = (f(x + h), f(x), f(x - h));
    let (fwd, bwd) = ((up - mid) / h, (mid - dn) / h);
    ((fwd - bwd).abs() <= 1e-3 * fwd.abs().max(bwd.abs()).max(1e-6)).then_some((up - dn) / (2.0 * h))
}

fn randomize<R: Rng>(d: &mut Dense, rng: &mut R) {
    d.weight.iter_mut().chain(d.bias.iter_mut()).for_each(|v| *v = rng.gen_range(-0.6..0.6));
}

fn layers_mut<'a>(bb: &'a mut SharedBackbone, h: &'a mut HeadParams) -> Vec<&'a mut Dense> {
    let mut v: Vec<&mut Dense> = bb.layer.iter_mut().collect();
    v.extend(h.hidden.iter_mut());
    v.push(&mut h.cls);
    v.push(&mut h.reg);
    v
}

fn flat(layers: &[&Dense]) -> Vec<f64> {
    layers.iter().flat_map(|d| d.weight.iter().chain(&d.bias).copied()).collect()
}

fn set_param(bb: &mut SharedBackbone, h: &mut HeadParams, mut k: usize, v: f64) {
    for d in layers_mut(bb, h) {
        let n = d.weight.len() + d.bias.len();
        if k < n {
            if k < d.weight.len() {
                d.weight[k] = v;
            } else {
                d.bias[k - d.weight.len()] = v;
            }
            return;
        }
        k -= n;
    }
    panic!("parameter index out of range");
}

fn kernels() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = 1e-6;

    let mut worst_loc: f64 = 0.0;
    let mut n_loc = 0;
    while n_loc < 100 {
        let p: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-3.0..3.0));
        let t = Delta::from_array(std::array::from_fn(|_| rng.gen_range(-3.0..3.0)));
        let k = rng.gen_range(0..4);
        let g = loc_loss(&Delta::from_array(p), &t).1.to_array()[k];
        let f = |x: f64| {
            let mut q = p;
            q[k] = x;
            loc_loss(&Delta::from_array(q), &t).0
        };
        if let Some(fd) = central(f, p[k], h) {
            worst_loc = worst_loc.max(rel_err(g, fd));
            n_loc += 1;
        }
    }

    let mut worst_xent: f64 = 0.0;
    for _ in 0..100 {
        let logits: Vec<f64> = (0..4).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let label = rng.gen_range(0..4);
        let k = rng.gen_range(0..4);
        let g = softmax_xent(&logits, label).1[k];
        let f = |x: f64| {
            let mut l = logits.clone();
            l[k] = x;
            softmax_xent(&l, label).0
        };
        let fd = central(f, logits[k], h).expect("softmax cross-entropy is smooth");
        worst_xent = worst_xent.max(rel_err(g, fd));
    }

    let mut worst_model: f64 = 0.0;
    let mut n_model = 0;
    let spec = LossSpec::default();
    while n_model < 100 {
        let dim = 5;
        let norm = InputNorm {
            mean: (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            std: (0..dim).map(|_| rng.gen_range(0.5..2.0)).collect(),
        };
        let mut bb = SharedBackbone::new(norm, true, &mut rng);
        let mut head = HeadParams::new(dim, 2, 4, &mut rng);
        for d in layers_mut(&mut bb, &mut head) {
            randomize(d, &mut rng);
        }
        let batch: Vec<TrainSample> = (0..4)
            .map(|_| {
                let label = rng.gen_range(0..3);
                let target = (label >= 1).then(|| Delta::from_array(std::array::from_fn(|_| rng.gen_range(-2.0..2.0))));
                TrainSample { features: (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect(), label, target }
            })
            .collect();
        let res = backward(&head, &bb, &batch, &spec);
        let mut grad_layers: Vec<&Dense> = res.grads.backbone.iter().collect();
        grad_layers.extend(res.grads.head.hidden.iter());
        grad_layers.push(&res.grads.head.cls);
        grad_layers.push(&res.grads.head.reg);
        let analytic = flat(&grad_layers);
        let k = rng.gen_range(0..analytic.len());
        let x0 = {
            let mut layers: Vec<&Dense> = bb.layer.iter().collect();
            layers.extend(head.hidden.iter());
            layers.push(&head.cls);
            layers.push(&head.reg);
            flat(&layers)[k]
        };
        let f = |x: f64| {
            let (mut b2, mut h2) = (bb.clone(), head.clone());
            set_param(&mut b2, &mut h2, k, x);
            backward(&h2, &b2, &batch, &spec).loss
        };
        let Some(fd) = central(f, x0, h) else { continue };
        if analytic[k].abs() < 1e-7 && fd.abs() < 1e-7 {
            continue;
        }
        worst_model = worst_model.max(rel_err(analytic[k], fd));
        n_model += 1;
    }

    let mut worst_round: f64 = 0.0;
    for _ in 0..1000 {
        let mk = |rng: &mut ChaCha8Rng| {
            let (x, y) = (rng.gen_range(0.0..900.0), rng.gen_range(0.0..900.0));
            BBox::new(x, y, x + rng.gen_range(2.0..300.0), y + rng.gen_range(2.0..300.0)).unwrap()
        };
        let (b, g) = (mk(&mut rng), mk(&mut rng));
        let back = decode(&b, &encode(&b, &g), 1e6).bbox;
        for (p, q) in back.to_array().iter().zip(g.to_array()) {
            worst_round = worst_round.max((p - q).abs());
        }
    }

    let mut grid_mismatch = 0;
    for _ in 0..1000 {
        let mk = |rng: &mut ChaCha8Rng| {
            let (x, y) = (rng.gen_range(0..20i64), rng.gen_range(0..20i64));
            (x, y, x + rng.gen_range(1..12i64), y + rng.gen_range(1..12i64))
        };
        let (a, b) = (mk(&mut rng), mk(&mut rng));
        let (mut inter, mut union) = (0u32, 0u32);
        for i in 0..32 {
            for j in 0..32 {
                let ia = i >= a.0 && i < a.2 && j >= a.1 && j < a.3;
                let ib = i >= b.0 && i < b.2 && j >= b.1 && j < b.3;
                inter += u32::from(ia && ib);
                union += u32::from(ia || ib);
            }
        }
        let to = |r: (i64, i64, i64, i64)| BBox::new(r.0 as f64, r.1 as f64, r.2 as f64, r.3 as f64).unwrap();
        if iou(&to(a), &to(b)) != inter as f64 / union as f64 {
            grid_mismatch += 1;
        }
    }

    let passed = worst_loc < 1e-4 && worst_xent < 1e-4 && worst_model < 1e-4 && worst_round < 1e-9 && grid_mismatch == 0;
    Verdict {
        id: 1,
        title: "numerical kernels",
        passed,
        detail: format!(
            "max rel err loc {worst_loc:.1e}, xent {worst_xent:.1e}, model {worst_model:.1e}; round trip {worst_round:.1e}; grid IoU mismatches {grid_mismatch}/1000"
        ),
    }
}

fn evaluator() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut disagreements = 0;
    for _ in 0..1000 {
        let (dets, gts) = random_instance(&mut rng);
        let r = coco_map(&dets, &gts, &EvalOptions::default());
        match (r.mean_ap, brute_force_map(&dets, &gts).1) {
            (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
            (None, None) => {}
            _ => disagreements += 1,
        }
    }
    use cascade_core::assign::GroundTruth;
    use cascade_core::cascade::Detection;
    let g = GroundTruth { class_id: 1, bbox: BBox::new(0.0, 0.0, 10.0, 10.0).unwrap() };
    let hit = Detection { bbox: g.bbox, class_id: 1, score: 0.9 };
    let fp = Detection { bbox: BBox::new(40.0, 40.0, 50.0, 50.0).unwrap(), class_id: 1, score: 0.8 };
    let opts = EvalOptions::default();
    let perfect = coco_map(&[vec![hit]], &[vec![g]], &opts).mean_ap == Some(1.0);
    let empty = coco_map(&[vec![]], &[vec![g]], &opts).mean_ap == Some(0.0);
    let tp_fp = coco_map(&[vec![hit, fp]], &[vec![g]], &opts).mean_ap == Some(1.0);
    Verdict {
        id: 2,
        title: "evaluator correctness",
        passed: worst < 1e-9 && disagreements == 0 && perfect && empty && tp_fp,
        detail: format!("max |diff| vs brute force {worst:.1e} over 1000 instances; hand cases {perfect}/{empty}/{tp_fp}"),
    }
}

fn calibration() -> Verdict {
    let ious = proposal_ious(&gen_dataset(&SceneConfig::default(), 7, Stream::TrainScenes, 50));
    let (hi, mid) = (fraction_at_least(&ious, 0.7), fraction_at_least(&ious, 0.5));
    Verdict {
        id: 3,
        title: "proposal calibration",
        passed: ious.len() >= 10_000 && (0.01..=0.06).contains(&hi) && (0.15..=0.35).contains(&mid),
        detail: format!("{} proposals: {:.2}% at IoU >= 0.7, {:.2}% at IoU >= 0.5", ious.len(), 100.0 * hi, 100.0 * mid),
    }
}

/// Every preset run under one seed.
struct SeedRun {
    seed: u64,
    reports: BTreeMap<&'static str, Report>,
    compare_secs: f64,
}

impl SeedRun {
    fn check(&self, preset: &str, name: &str) -> (bool, String) {
        let c = self.reports[preset].check(name).unwrap_or_else(|| panic!("missing check {preset}/{name}"));
        (c.passed, c.detail.clone())
    }
}

fn run_seed(seed: u64) -> SeedRun {
    let cfg = ExperimentConfig { seed, ..Default::default() };
    let mut reports = BTreeMap::new();
    let mut compare_secs = 0.0;
    for preset in Preset::ALL {
        let start = Instant::now();
        let r = run_preset(preset, &cfg).expect("preset runs");
        if preset == Preset::Compare {
            compare_secs = start.elapsed().as_secs_f64();
        }
        reports.insert(preset.name(), r);
    }
    SeedRun { seed, reports, compare_secs }
}

/// Majority vote of `names` (all must hold within a seed).
fn vote(runs: &[SeedRun], id: usize, title: &'static str, checks: &[(&str, &str)]) -> Verdict {
    let mut votes = Vec::new();
    let mut details = Vec::new();
    for run in runs {
        let results: Vec<(bool, String)> = checks.iter().map(|(p, n)| run.check(p, n)).collect();
        let ok = results.iter().all(|r| r.0);
        votes.push(ok);
        let failed: Vec<&str> = checks.iter().zip(&results).filter(|(_, r)| !r.0).map(|((_, n), _)| *n).collect();
        details.push(if ok { format!("seed {} ok", run.seed) } else { format!("seed {} failed {}", run.seed, failed.join(",")) });
    }
    Verdict { id, title, passed: majority(&votes), detail: details.join("; ") }
}

fn first_detail(runs: &[SeedRun], preset: &str, name: &str) -> String {
    runs.iter().map(|r| format!("seed {}: {}", r.seed, r.check(preset, name).1)).collect::<Vec<_>>().join(" | ")
}

fn files_under(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Verdict {
    let bin = env!("CARGO_BIN_EXE_cascade");
    let tmp = tempfile::tempdir().unwrap();
    let runs: Vec<BTreeMap<String, Vec<u8>>> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = tmp.path().join(name);
            let status = Command::new(bin).args(["experiment", "compare", "--seed", "7", "--out"]).arg(&out).output().unwrap();
            assert!(status.status.code().is_some_and(|c| c == 0 || c == 2), "{}", String::from_utf8_lossy(&status.stderr));
            files_under(&out)
        })
        .collect();
    let has_json = runs[0].keys().any(|k| k.ends_with(".json"));
    let has_csv = runs[0].keys().any(|k| k.ends_with(".csv"));
    Verdict {
        id: 10,
        title: "determinism",
        passed: has_json && has_csv && runs[0] == runs[1],
        detail: format!("{} files compared byte for byte", runs[0].len()),
    }
}

#[test]
fn acceptance() {
    let mut verdicts = vec![kernels(), evaluator(), calibration()];

    let runs: Vec<SeedRun> = SEEDS.par_iter().map(|&s| run_seed(s)).collect();
    verdicts.push(vote(&runs, 4, "regressor improvement", &[("histograms", "stage1_improves_positives")]));
    verdicts.push(vote(
        &runs,
        5,
        "histogram shift",
        &[
            ("histograms", "stage1_shifts_quality"),
            ("histograms", "stage2_shifts_quality"),
            ("histograms", "stage2_positive_count"),
            ("histograms", "stage3_positive_count"),
        ],
    ));
    let mut paradox = vote(
        &runs,
        6,
        "paradox reproduction",
        &[
            ("paradox", "high_threshold_degrades_ap"),
            ("mismatch", "highest_threshold_wins_ap80"),
            ("mismatch", "highest_threshold_wins_ap90"),
        ],
    );
    paradox.detail = format!("{}; {}", paradox.detail, first_detail(&runs, "paradox", "high_threshold_degrades_ap"));
    verdicts.push(paradox);
    let mut ordering = vote(
        &runs,
        7,
        "method ordering",
        &[
            ("compare", "cascade_beats_iterative"),
            ("compare", "cascade_beats_integral"),
            ("compare", "cascade_beats_baseline"),
            ("compare", "gain_grows_with_quality"),
        ],
    );
    let slowest = runs.iter().map(|r| r.compare_secs).fold(0.0, f64::max);
    ordering.passed &= slowest <= 180.0;
    ordering.detail = format!("{}; slowest compare run {slowest:.1}s", ordering.detail);
    verdicts.push(ordering);
    let mut stages = vote(&runs, 8, "stage ablation", &[("stages", "two_stages_beat_one")]);
    stages.detail = format!("{}; reported: {}", stages.detail, first_detail(&runs, "stages", "three_stages_hold_up"));
    verdicts.push(stages);
    let mut recall = vote(&runs, 9, "proposal recall", &[("recall", "stage2_recall_gain")]);
    recall.detail = format!("{}; {}", recall.detail, first_detail(&runs, "recall", "stage2_recall_gain"));
    verdicts.push(recall);
    verdicts.push(determinism());

    for v in &verdicts {
        say(&format!("[{}] criterion {:>2} {}: {}", if v.passed { "PASS" } else { "FAIL" }, v.id, v.title, v.detail));
    }
    let failed: Vec<usize> = verdicts.iter().filter(|v| !v.passed).map(|v| v.id).collect();
    assert!(failed.is_empty(), "criteria failed: {failed:?}");
}
