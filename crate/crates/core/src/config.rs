//! Experiment configuration, read from TOML. Every field has a default, so an
//! empty file is a valid configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cascade::{CascadeConfig, InferOptions, TestStage};
use crate::error::{Error, Result};
use crate::model::Variant;
use crate::synth::SceneConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// `"3"`, `"1~3"`, ... Defaults to the mean of all classifiers for
    /// cascades and to the only classifier otherwise.
    pub test_stage: Option<String>,
    pub nms_iou: f64,
    pub max_detections: usize,
    pub score_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let d = InferOptions::default();
        Self { test_stage: None, nms_iou: d.nms_iou, max_detections: d.max_detections, score_threshold: d.score_threshold }
    }
}

impl EvalConfig {
    pub fn options(&self, num_stages: usize) -> Result<InferOptions> {
        let test_stage = match &self.test_stage {
            Some(s) => s.parse()?,
            None => TestStage::Ensemble(num_stages),
        };
        Ok(InferOptions { test_stage, nms_iou: self.nms_iou, max_detections: self.max_detections, score_threshold: self.score_threshold })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub variant: Variant,
    /// Training threshold of the single-stage and iterative detectors.
    pub single_threshold: f64,
    /// Regressor applications for iterative inference.
    pub iterative_steps: usize,
    pub integral_thresholds: Vec<f64>,
    pub out_dir: PathBuf,
    pub scene: SceneConfig,
    pub cascade: CascadeConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            train_scenes: 2000,
            test_scenes: 500,
            variant: Variant::Cascade,
            single_threshold: 0.5,
            iterative_steps: 3,
            integral_thresholds: vec![0.5, 0.6, 0.7],
            out_dir: PathBuf::from("out"),
            scene: SceneConfig::default(),
            cascade: CascadeConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.cascade.validate()?;
        if self.train_scenes == 0 || self.test_scenes == 0 {
            return Err(Error::Config("scene counts must be positive".into()));
        }
        if !(self.single_threshold > 0.0 && self.single_threshold < 1.0) {
            return Err(Error::Config(format!("single_threshold {} must lie in (0, 1)", self.single_threshold)));
        }
        if self.iterative_steps == 0 {
            return Err(Error::Config("iterative_steps must be at least 1".into()));
        }
        let u = &self.integral_thresholds;
        if u.is_empty() || u.windows(2).any(|w| w[1] <= w[0]) || u.iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
            return Err(Error::Config(format!("integral_thresholds {u:?} must be increasing values in (0, 1)")));
        }
        if let Some(s) = &self.eval.test_stage {
            s.parse::<TestStage>()?;
        }
        if !(self.eval.nms_iou > 0.0 && self.eval.nms_iou < 1.0) {
            return Err(Error::Config(format!("eval.nms_iou {} must lie in (0, 1)", self.eval.nms_iou)));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON form, ignoring the output
    /// directory.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        format!("{:x}", Sha256::digest(&bytes))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
