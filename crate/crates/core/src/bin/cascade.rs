use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use cascade_core::baselines::Detector;
use cascade_core::cascade::{InferOptions, LogRow, TestStage};
use cascade_core::config::ExperimentConfig;
use cascade_core::experiment::{self, ap_table, push_ap_row, stage_sweep, Preset};
use cascade_core::io::{self, DatasetHeader, Table, DATASET_FORMAT_VERSION};
use cascade_core::model::{self, Variant};
use cascade_core::rng::Stream;
use cascade_core::synth::{fraction_at_least, gen_dataset, proposal_ious, Scene, SceneConfig};

#[derive(Parser)]
#[command(name = "cascade", version, about = "Cascaded detection heads on a synthetic proposal benchmark")]
struct Cli {
    /// Worker threads for scene-level parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration; defaults are used for anything missing.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (overrides the configuration).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset as JSON Lines.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "train")]
        split: Split,
        /// Number of scenes (defaults to the configured split size).
        #[arg(long)]
        count: Option<usize>,
        /// Output file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a detector; writes model.json and train_log.csv.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training dataset (generated from the configuration if omitted).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        variant: Option<Variant>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a trained model; writes metrics.json and CSV tables.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Test dataset (generated from the configuration if omitted).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Scoring classifier(s): `3`, `1~3`, ...
        #[arg(long)]
        test_stage: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a reproduction preset.
    Experiment {
        #[command(flatten)]
        common: Common,
        /// paradox | mismatch | histograms | compare | stages | recall
        #[arg(value_name = "PRESET")]
        name: Option<String>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a dataset or model file.
    Inspect { path: PathBuf },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Split {
    Train,
    Test,
}

impl Split {
    fn stream(self) -> Stream {
        match self {
            Split::Train => Stream::TrainScenes,
            Split::Test => Stream::TestScenes,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

fn load_config(c: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Loads `path`, or generates the split from the configuration.
fn dataset(path: Option<&Path>, cfg: &ExperimentConfig, split: Split) -> anyhow::Result<(SceneConfig, Vec<Scene>)> {
    match path {
        Some(p) => {
            let (h, scenes) = io::read_dataset(p)?;
            if h.scene_config != cfg.scene {
                log::info!("using the scene configuration stored in {}", p.display());
            }
            Ok((h.scene_config, scenes))
        }
        None => {
            let n = match split {
                Split::Train => cfg.train_scenes,
                Split::Test => cfg.test_scenes,
            };
            Ok((cfg.scene.clone(), gen_dataset(&cfg.scene, cfg.seed, split.stream(), n)))
        }
    }
}

fn log_table(log: &[LogRow]) -> Table {
    let mut t = Table::new(&["iteration", "stage", "loss", "cls_loss", "loc_loss", "positives", "samples"]);
    for r in log {
        t.push(&[
            r.iteration.to_string(),
            r.stage.to_string(),
            r.loss.to_string(),
            r.cls_loss.to_string(),
            r.loc_loss.to_string(),
            r.positives.to_string(),
            r.samples.to_string(),
        ]);
    }
    t
}

fn cmd_gen(common: &Common, split: Split, count: Option<usize>, out: Option<PathBuf>) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let n = count.unwrap_or(match split {
        Split::Train => cfg.train_scenes,
        Split::Test => cfg.test_scenes,
    });
    let path = out.unwrap_or_else(|| cfg.out_dir.join(format!("{}.jsonl", split.name())));
    let scenes = gen_dataset(&cfg.scene, cfg.seed, split.stream(), n);
    let header = DatasetHeader {
        format_version: DATASET_FORMAT_VERSION,
        scene_config: cfg.scene.clone(),
        seed: cfg.seed,
        split: Some(split.name().into()),
    };
    io::write_dataset(&path, &header, &scenes)?;
    println!("wrote {n} scenes to {}", path.display());
    Ok(())
}

fn cmd_train(common: &Common, data: Option<PathBuf>, variant: Option<Variant>, out: Option<PathBuf>) -> anyhow::Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(v) = variant {
        cfg.variant = v;
    }
    let (scene, train) = dataset(data.as_deref(), &cfg, Split::Train)?;
    cfg.scene = scene;
    cfg.validate()?;
    let dir = out.unwrap_or_else(|| cfg.out_dir.clone());
    let (det, log) = experiment::train_detector(&cfg, &train).context("training failed")?;
    let file = det.to_file(json!({"config_digest": cfg.digest(), "seed": cfg.seed, "config": cfg.to_json()}));
    io::write_bytes(&dir.join("model.json"), &model::serialize(&file)?)?;
    log_table(&log).write(&dir.join("train_log.csv"))?;
    println!("trained {} model; wrote {}", cfg.variant, dir.join("model.json").display());
    Ok(())
}

fn cmd_eval(
    common: &Common,
    model_path: &Path,
    data: Option<PathBuf>,
    test_stage: Option<String>,
    out: Option<PathBuf>,
) -> anyhow::Result<()> {
    let mut cfg = load_config(common)?;
    if test_stage.is_some() {
        cfg.eval.test_stage = test_stage;
    }
    let bytes = std::fs::read(model_path).with_context(|| format!("reading {}", model_path.display()))?;
    let det = Detector::from_file(&model::deserialize(&bytes)?)?;
    let (scene, test) = dataset(data.as_deref(), &cfg, Split::Test)?;
    cfg.scene = scene;
    cfg.validate()?;
    let opts = experiment::default_options(&cfg, &det)?;
    let main = experiment::evaluate(&det, &test, &opts, &cfg.scene, cfg.seed)?;

    let mut per_stage = Vec::new();
    let mut table = ap_table("test_stage");
    let sweep: Vec<TestStage> = if det.num_stages() > 1 { stage_sweep(det.num_stages()) } else { vec![opts.test_stage] };
    for s in sweep {
        let r = if s == opts.test_stage {
            main.clone()
        } else {
            experiment::evaluate(&det, &test, &InferOptions { test_stage: s, ..opts }, &cfg.scene, cfg.seed)?
        };
        push_ap_row(&mut table, &s.to_string(), &r);
        per_stage.push((s, r));
    }
    let dir = out.unwrap_or_else(|| cfg.out_dir.clone());
    let doc = experiment::metrics_json(&cfg, det.variant(), opts.test_stage, &main, &per_stage);
    io::write_json(&dir.join("metrics.json"), &doc)?;
    let mut main_table = ap_table("test_stage");
    push_ap_row(&mut main_table, &opts.test_stage.to_string(), &main);
    main_table.write(&dir.join("metrics.csv"))?;
    table.write(&dir.join("per_stage.csv"))?;
    println!("{}", String::from_utf8(main_table.to_csv()?)?.trim_end());
    Ok(())
}

fn cmd_experiment(common: &Common, name: Option<String>, preset: Option<String>, out: Option<PathBuf>) -> anyhow::Result<bool> {
    let name = match (name, preset) {
        (Some(a), Some(b)) if a != b => bail!("conflicting presets `{a}` and `{b}`"),
        (Some(a), _) | (None, Some(a)) => a,
        (None, None) => bail!("no preset given"),
    };
    let preset: Preset = name.parse()?;
    let cfg = load_config(common)?;
    let dir = out.unwrap_or_else(|| cfg.out_dir.join(preset.name()));
    let report = experiment::run_preset(preset, &cfg).with_context(|| format!("preset {} failed", preset.name()))?;
    report.write(&cfg, &dir)?;
    for c in &report.checks {
        let tag = match (c.passed, c.informational) {
            (true, _) => "PASS",
            (false, true) => "INFO",
            (false, false) => "FAIL",
        };
        println!("[{tag}] {}: {}", c.name, c.detail);
    }
    println!("wrote {}", dir.display());
    Ok(report.passed())
}

fn cmd_inspect(path: &Path) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap_or_default())
        .or_else(|_| serde_json::from_str(&text))
        .context("not a dataset or model file")?;
    let summary = if first.get("scene_config").is_some() {
        let (h, scenes) = io::read_dataset(path)?;
        let ious = proposal_ious(&scenes);
        json!({
            "kind": "dataset",
            "seed": h.seed,
            "split": h.split,
            "scenes": scenes.len(),
            "objects": scenes.iter().map(|s| s.gts.len()).sum::<usize>(),
            "proposals": ious.len(),
            "fraction_iou_ge_0.5": fraction_at_least(&ious, 0.5),
            "fraction_iou_ge_0.7": fraction_at_least(&ious, 0.7),
            "feature_dim": h.scene_config.feature_dim(),
        })
    } else {
        let m = model::deserialize(text.as_bytes())?;
        json!({
            "kind": "model",
            "variant": m.variant,
            "num_classes": m.num_classes,
            "feature_dim": m.feature_dim,
            "thresholds": m.stages.iter().map(|s| s.u).collect::<Vec<_>>(),
            "iterations": m.iterations,
            "integral_thresholds": m.integral.as_ref().map(|i| i.thresholds.clone()),
            "shared_backbone": m.backbone.layer.is_some(),
        })
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring thread pool")?;
    }
    match cli.command {
        Command::Gen { common, split, count, out } => cmd_gen(&common, split, count, out).map(|_| true),
        Command::Train { common, data, variant, out } => cmd_train(&common, data, variant, out).map(|_| true),
        Command::Eval { common, model, data, test_stage, out } => cmd_eval(&common, &model, data, test_stage, out).map(|_| true),
        Command::Experiment { common, name, preset, out } => cmd_experiment(&common, name, preset, out),
        Command::Inspect { path } => cmd_inspect(&path).map(|_| true),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: one or more checks failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
