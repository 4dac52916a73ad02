//! Trainable heads with manual backpropagation.
//!
//! A forward pass runs `x -> standardize -> backbone -> [hidden] -> {cls, reg}`.
//! The backbone is a residual rectified block `y = z + relu(W z + b)` shared by
//! every head of a model; each head owns an optional rectified hidden layer, a
//! `(M+1)`-way classifier and a class-agnostic 4-output box regressor whose
//! output lives in normalized delta space.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Delta;
use crate::losses::{loc_loss, softmax_xent, NormStats};

pub const FORMAT_VERSION: u32 = 1;

pub const OUTPUT_INIT_STD: f64 = 0.01;

/// Fully connected layer, row-major `rows x cols` weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, weight: vec![0.0; rows * cols], bias: vec![0.0; rows] }
    }

    pub fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let weight = (0..rows * cols).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        Self { rows, cols, weight, bias: vec![0.0; rows] }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.rows, self.cols)
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.weight.chunks_exact(self.cols).zip(&self.bias).map(|(row, b)| row.iter().zip(x).fold(*b, |acc, (w, v)| acc + w * v)).collect()
    }

    /// Accumulates `dy x^T` into `grad` and returns `W^T dy`.
    pub(crate) fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Dense) -> Vec<f64> {
        let mut dx = vec![0.0; self.cols];
        for (r, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[r] += g;
            let row = &self.weight[r * self.cols..(r + 1) * self.cols];
            let grow = &mut grad.weight[r * self.cols..(r + 1) * self.cols];
            for c in 0..self.cols {
                grow[c] += g * x[c];
                dx[c] += g * row[c];
            }
        }
        dx
    }

    pub fn axpy(&mut self, alpha: f64, other: &Dense) {
        for (w, g) in self.weight.iter_mut().zip(&other.weight) {
            *w += alpha * g;
        }
        for (b, g) in self.bias.iter_mut().zip(&other.bias) {
            *b += alpha * g;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.weight.iter_mut().chain(self.bias.iter_mut()).for_each(|v| *v *= alpha);
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    fn check(&self, name: &str, rows: usize, cols: usize) -> Result<()> {
        if self.rows != rows || self.cols != cols || self.weight.len() != rows * cols || self.bias.len() != rows {
            return Err(Error::Shape(format!(
                "{name}: expected {rows}x{cols}, found {}x{} with {} weights and {} biases",
                self.rows,
                self.cols,
                self.weight.len(),
                self.bias.len()
            )));
        }
        if !self.is_finite() {
            return Err(Error::NonFinite(format!("{name} has non-finite parameters")));
        }
        Ok(())
    }
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.max(0.0)).collect()
}

/// Fixed per-feature standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputNorm {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    /// Mean and standard deviation of each feature column, with the spread
    /// floored at 1e-6.
    pub fn fit<'a, I: IntoIterator<Item = &'a [f64]>>(dim: usize, rows: I) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for r in rows {
            n += 1;
            for i in 0..dim {
                sum[i] += r[i];
                sq[i] += r[i] * r[i];
            }
        }
        if n == 0 {
            return Self::identity(dim);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt().max(1e-6)).collect();
        Self { mean, std }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }
}

/// Residual rectified block shared by every head; identity when `layer` is
/// `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedBackbone {
    pub input_norm: InputNorm,
    pub layer: Option<Dense>,
}

impl SharedBackbone {
    pub fn new<R: Rng + ?Sized>(input_norm: InputNorm, enabled: bool, rng: &mut R) -> Self {
        let d = input_norm.mean.len();
        let layer = enabled.then(|| Dense::gaussian(d, d, OUTPUT_INIT_STD, rng));
        Self { input_norm, layer }
    }

    pub fn dim(&self) -> usize {
        self.input_norm.mean.len()
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.input_norm.mean.len() != dim || self.input_norm.std.len() != dim {
            return Err(Error::Shape(format!("input normalization must have {dim} entries")));
        }
        if self.input_norm.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::NonFinite("input normalization spread must be positive".into()));
        }
        if let Some(l) = &self.layer {
            l.check("backbone", dim, dim)?;
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Option<Dense> {
        self.layer.as_ref().map(Dense::zeros_like)
    }
}

/// One stage's classifier and regressor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub hidden: Option<Dense>,
    pub cls: Dense,
    pub reg: Dense,
}

impl HeadParams {
    /// Hidden layers get a fan-in scaled init; output layers N(0, 0.01).
    pub fn new<R: Rng + ?Sized>(feature_dim: usize, num_classes: usize, hidden: usize, rng: &mut R) -> Self {
        let hidden_layer = (hidden > 0).then(|| Dense::gaussian(hidden, feature_dim, (2.0 / feature_dim as f64).sqrt(), rng));
        let d = if hidden > 0 { hidden } else { feature_dim };
        Self {
            hidden: hidden_layer,
            cls: Dense::gaussian(num_classes + 1, d, OUTPUT_INIT_STD, rng),
            reg: Dense::gaussian(4, d, OUTPUT_INIT_STD, rng),
        }
    }

    pub fn zeros(feature_dim: usize, num_classes: usize, hidden: usize) -> Self {
        let d = if hidden > 0 { hidden } else { feature_dim };
        Self {
            hidden: (hidden > 0).then(|| Dense::zeros(hidden, feature_dim)),
            cls: Dense::zeros(num_classes + 1, d),
            reg: Dense::zeros(4, d),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self { hidden: self.hidden.as_ref().map(Dense::zeros_like), cls: self.cls.zeros_like(), reg: self.reg.zeros_like() }
    }

    pub fn num_classes(&self) -> usize {
        self.cls.rows - 1
    }

    pub fn validate(&self, feature_dim: usize, num_classes: usize) -> Result<()> {
        let d = match &self.hidden {
            Some(h) => {
                h.check("hidden", h.rows, feature_dim)?;
                h.rows
            }
            None => feature_dim,
        };
        self.cls.check("classifier", num_classes + 1, d)?;
        self.reg.check("regressor", 4, d)
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.hidden.iter().chain([&self.cls, &self.reg])
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.hidden.iter_mut().chain([&mut self.cls, &mut self.reg])
    }

    pub fn is_finite(&self) -> bool {
        self.layers().all(Dense::is_finite)
    }

    pub fn axpy(&mut self, alpha: f64, other: &HeadParams) {
        for (a, b) in self.layers_mut().zip(other.layers()) {
            a.axpy(alpha, b);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.layers_mut().for_each(|l| l.scale(alpha));
    }
}

/// Gradients for one head plus the shared backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub backbone: Option<Dense>,
    pub head: HeadParams,
}

impl GradientSet {
    pub fn zeros(backbone: &SharedBackbone, head: &HeadParams) -> Self {
        Self { backbone: backbone.zeros_like(), head: head.zeros_like() }
    }

    pub fn is_finite(&self) -> bool {
        self.head.is_finite() && self.backbone.as_ref().is_none_or(Dense::is_finite)
    }
}

/// Activations kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Trace {
    z: Vec<f64>,
    bb_pre: Vec<f64>,
    y: Vec<f64>,
    hid_pre: Vec<f64>,
    /// Input to the output layers.
    pub h: Vec<f64>,
}

/// Runs standardization, backbone and the optional hidden layer.
pub fn trunk_forward(backbone: &SharedBackbone, hidden: Option<&Dense>, x: &[f64]) -> Trace {
    let z = backbone.input_norm.apply(x);
    let (bb_pre, y) = match &backbone.layer {
        Some(l) => {
            let pre = l.forward(&z);
            let y = z.iter().zip(&pre).map(|(a, p)| a + p.max(0.0)).collect();
            (pre, y)
        }
        None => (Vec::new(), z.clone()),
    };
    let (hid_pre, h) = match hidden {
        Some(l) => {
            let pre = l.forward(&y);
            let h = relu(&pre);
            (pre, h)
        }
        None => (Vec::new(), y.clone()),
    };
    Trace { z, bb_pre, y, hid_pre, h }
}

/// Backpropagates `dh` through the hidden layer and backbone.
pub fn trunk_backward(
    backbone: &SharedBackbone,
    hidden: Option<&Dense>,
    trace: &Trace,
    dh: &[f64],
    g_backbone: Option<&mut Dense>,
    g_hidden: Option<&mut Dense>,
) {
    let dy = match (hidden, g_hidden) {
        (Some(l), Some(g)) => {
            let dpre: Vec<f64> = dh.iter().zip(&trace.hid_pre).map(|(d, p)| if *p > 0.0 { *d } else { 0.0 }).collect();
            l.backward(&trace.y, &dpre, g)
        }
        _ => dh.to_vec(),
    };
    if let (Some(l), Some(g)) = (&backbone.layer, g_backbone) {
        let dpre: Vec<f64> = dy.iter().zip(&trace.bb_pre).map(|(d, p)| if *p > 0.0 { *d } else { 0.0 }).collect();
        l.backward(&trace.z, &dpre, g);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub logits: Vec<f64>,
    /// Regressor output in normalized delta space.
    pub delta_norm: Delta,
}

pub fn forward(params: &HeadParams, backbone: &SharedBackbone, x: &[f64]) -> HeadOutput {
    let t = trunk_forward(backbone, params.hidden.as_ref(), x);
    output_layers(params, &t)
}

fn output_layers(params: &HeadParams, t: &Trace) -> HeadOutput {
    let r = params.reg.forward(&t.h);
    HeadOutput { logits: params.cls.forward(&t.h), delta_norm: Delta::new(r[0], r[1], r[2], r[3]) }
}

/// One training example for a stage.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub features: Vec<f64>,
    pub label: usize,
    /// Normalized regression target, present for positives.
    pub target: Option<Delta>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    /// Weight of the localization term.
    pub lambda: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self { lambda: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct BackwardResult {
    /// Mean of `xent + lambda [y >= 1] loc` over the batch.
    pub loss: f64,
    pub cls_loss: f64,
    pub loc_loss: f64,
    pub grads: GradientSet,
    pub positives: usize,
    /// Set when the batch was empty; loss and gradients are zero.
    pub empty: bool,
}

/// Batch loss and exact gradients for one head.
pub fn backward(params: &HeadParams, backbone: &SharedBackbone, batch: &[TrainSample], spec: &LossSpec) -> BackwardResult {
    let mut grads = GradientSet::zeros(backbone, params);
    if batch.is_empty() {
        return BackwardResult { loss: 0.0, cls_loss: 0.0, loc_loss: 0.0, grads, positives: 0, empty: true };
    }
    let inv_n = 1.0 / batch.len() as f64;
    let (mut cls_total, mut loc_total, mut positives) = (0.0, 0.0, 0);
    for s in batch {
        let t = trunk_forward(backbone, params.hidden.as_ref(), &s.features);
        let out = output_layers(params, &t);
        let (xent, mut dlogits) = softmax_xent(&out.logits, s.label);
        cls_total += xent;
        dlogits.iter_mut().for_each(|g| *g *= inv_n);
        let mut dh = params.cls.backward(&t.h, &dlogits, &mut grads.head.cls);
        if let (true, Some(target)) = (s.label >= 1, s.target) {
            positives += 1;
            let (loc, dpred) = loc_loss(&out.delta_norm, &target);
            loc_total += loc;
            let dreg: Vec<f64> = dpred.to_array().iter().map(|g| g * spec.lambda * inv_n).collect();
            let dh_reg = params.reg.backward(&t.h, &dreg, &mut grads.head.reg);
            dh.iter_mut().zip(dh_reg).for_each(|(a, b)| *a += b);
        }
        trunk_backward(backbone, params.hidden.as_ref(), &t, &dh, grads.backbone.as_mut(), grads.head.hidden.as_mut());
    }
    let cls_loss = cls_total * inv_n;
    let loc_loss = loc_total * inv_n;
    BackwardResult { loss: cls_loss + spec.lambda * loc_loss, cls_loss, loc_loss, grads, positives, empty: false }
}

/// Applies one SGD step to a head.
///
/// `grads` are gradients of the weighted stage loss `w_t L_t`; the learning
/// rate is rescaled by `1 / w_t` so every stage trains at rate `lr`.
pub fn sgd_step(params: &mut HeadParams, grads: &HeadParams, lr: f64, stage_weight: f64) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::NonFinite("head gradient".into()));
    }
    params.axpy(-lr / stage_weight, grads);
    Ok(())
}

/// Backbone step with already stage-weighted, summed gradients.
pub fn backbone_step(backbone: &mut SharedBackbone, grads: &Dense, lr: f64) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::NonFinite("backbone gradient".into()));
    }
    if let Some(l) = backbone.layer.as_mut() {
        l.axpy(-lr, grads);
    }
    Ok(())
}

/// Detector family recorded in a model file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Single,
    Iterative,
    Integral,
    Cascade,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Single => "single",
            Variant::Iterative => "iterative",
            Variant::Integral => "integral",
            Variant::Cascade => "cascade",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Variant::Single),
            "iterative" => Ok(Variant::Iterative),
            "integral" => Ok(Variant::Integral),
            "cascade" => Ok(Variant::Cascade),
            _ => Err(Error::Config(format!("unknown variant `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub u: f64,
    pub norm_stats: NormStats,
    pub loss_weight: f64,
    pub lambda: f64,
    pub head: HeadParams,
}

/// Extra classifiers of an integral-loss model, sharing stage 0's trunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegralRecord {
    pub thresholds: Vec<f64>,
    pub extra_classifiers: Vec<Dense>,
}

/// On-disk model container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format_version: u32,
    pub variant: Variant,
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Regressor applications at inference for the iterative variant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    pub config: serde_json::Value,
    pub backbone: SharedBackbone,
    pub stages: Vec<StageRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub integral: Option<IntegralRecord>,
}

impl ModelFile {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "model format version {} is not supported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.stages.is_empty() {
            return Err(Error::Format("model has no stages".into()));
        }
        self.backbone.validate(self.feature_dim)?;
        for (t, s) in self.stages.iter().enumerate() {
            s.head.validate(self.feature_dim, self.num_classes).map_err(|e| Error::Format(format!("stage {}: {e}", t + 1)))?;
            s.norm_stats.validate()?;
        }
        if let Some(ig) = &self.integral {
            if ig.extra_classifiers.len() + 1 != ig.thresholds.len() {
                return Err(Error::Format("integral model needs one classifier per threshold".into()));
            }
            let d = self.stages[0].head.cls.cols;
            for (k, c) in ig.extra_classifiers.iter().enumerate() {
                c.check(&format!("integral classifier {}", k + 2), self.num_classes + 1, d)?;
            }
        }
        Ok(())
    }
}

pub fn serialize(model: &ModelFile) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(model)?;
    out.push(b'\n');
    Ok(out)
}

pub fn deserialize(bytes: &[u8]) -> Result<ModelFile> {
    let value: serde_json::Value =
        serde_json::from_slice(bytes).map_err(|e| Error::Format(format!("model file is not valid JSON: {e}")))?;
    match value.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(FORMAT_VERSION) => {}
        Some(v) => return Err(Error::Format(format!("model format version {v} is not supported (expected {FORMAT_VERSION})"))),
        None => return Err(Error::Format("model file lacks format_version".into())),
    }
    let model: ModelFile = serde_json::from_value(value).map_err(|e| Error::Format(format!("malformed model file: {e}")))?;
    model.validate()?;
    Ok(model)
}
