//! C interface to `cascade-core`.
//!
//! Every object crosses the boundary as an opaque handle created by a
//! `*_new`/`*_load`/`*_train` call and released with the matching `*_free`.
//! Fallible calls return a [`CascadeStatus`]; on failure a description is
//! available from [`cascade_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use cascade_core::baselines::Detector;
use cascade_core::cascade::{FeatureSource, InferOptions, TestStage};
use cascade_core::config::ExperimentConfig;
use cascade_core::eval::ApReport;
use cascade_core::experiment;
use cascade_core::geom::{iou, BBox};
use cascade_core::io::{read_dataset, write_dataset, DatasetHeader, DATASET_FORMAT_VERSION};
use cascade_core::model;
use cascade_core::rng::Stream;
use cascade_core::synth::{gen_dataset, Scene};
use cascade_core::Error;

/// Result of a fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CascadeStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    InvalidArgument = 2,
    Config = 3,
    /// Malformed dataset or model file.
    Format = 4,
    Io = 5,
    /// Training diverged or produced non-finite values.
    Numeric = 6,
    /// The output buffer is too small; the needed length was written.
    BufferTooSmall = 7,
    /// Internal failure, including a caught panic.
    Internal = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CascadeSplit {
    Train = 0,
    Test = 1,
}

/// One detection, corners in canvas pixels.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CascadeDetection {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub class_id: u32,
    pub score: f64,
}

/// Scenes plus the header they were generated from.
pub struct CascadeDataset {
    header: DatasetHeader,
    scenes: Vec<Scene>,
}

pub struct CascadeDetector {
    detector: Detector,
    config: ExperimentConfig,
}

pub struct CascadeReport {
    report: ApReport,
    json: CString,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(CascadeStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidBox(_) => CascadeStatus::InvalidArgument,
            Error::Config(_) => CascadeStatus::Config,
            Error::Shape(_) | Error::Format(_) | Error::Json(_) => CascadeStatus::Format,
            Error::NonFinite(_) => CascadeStatus::Numeric,
            Error::Io(_) => CascadeStatus::Io,
            Error::Check(_) => CascadeStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: CascadeStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Runs `f`, translating errors and panics into a status code.
fn guard<F: FnOnce() -> Result<(), Failure>>(f: F) -> CascadeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CascadeStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal error: {msg}"));
            CascadeStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(CascadeStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(CascadeStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, what).map(Some)
    }
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| fail(CascadeStatus::NullArgument, format!("{what} is null")))
}

fn out_arg<T>(p: *mut T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(fail(CascadeStatus::NullArgument, format!("{what} is null")))
    } else {
        Ok(())
    }
}

fn config_from(toml: Option<&str>) -> Result<ExperimentConfig, Failure> {
    Ok(match toml {
        Some(t) => ExperimentConfig::from_toml(t)?,
        None => ExperimentConfig::default(),
    })
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn cascade_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn cascade_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// IoU of two `[x1, y1, x2, y2]` boxes.
///
/// # Safety
/// `a` and `b` must point to four doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cascade_iou(a: *const f64, b: *const f64, out: *mut f64) -> CascadeStatus {
    guard(|| {
        if a.is_null() || b.is_null() {
            return Err(fail(CascadeStatus::NullArgument, "box is null"));
        }
        out_arg(out, "out")?;
        let read = |p: *const f64| {
            let v = std::slice::from_raw_parts(p, 4);
            BBox::new(v[0], v[1], v[2], v[3])
        };
        *out = iou(&read(a)?, &read(b)?);
        Ok(())
    })
}

/// Generates `count` scenes of `split` (0 means the configured count).
/// `config_toml` may be null for defaults.
///
/// # Safety
/// `config_toml` must be null or a NUL-terminated string; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn cascade_dataset_generate(
    config_toml: *const c_char,
    seed: u64,
    split: CascadeSplit,
    count: usize,
    out: *mut *mut CascadeDataset,
) -> CascadeStatus {
    guard(|| {
        out_arg(out, "out")?;
        let cfg = config_from(opt_str_arg(config_toml, "config")?)?;
        let (stream, name, default_n) = match split {
            CascadeSplit::Train => (Stream::TrainScenes, "train", cfg.train_scenes),
            CascadeSplit::Test => (Stream::TestScenes, "test", cfg.test_scenes),
        };
        let n = if count == 0 { default_n } else { count };
        let scenes = gen_dataset(&cfg.scene, seed, stream, n);
        let header = DatasetHeader { format_version: DATASET_FORMAT_VERSION, scene_config: cfg.scene, seed, split: Some(name.into()) };
        *out = Box::into_raw(Box::new(CascadeDataset { header, scenes }));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cascade_dataset_load(path: *const c_char, out: *mut *mut CascadeDataset) -> CascadeStatus {
    guard(|| {
        out_arg(out, "out")?;
        let (header, scenes) = read_dataset(&PathBuf::from(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(CascadeDataset { header, scenes }));
        Ok(())
    })
}

/// # Safety
/// `ds` must be a live dataset handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cascade_dataset_save(ds: *const CascadeDataset, path: *const c_char) -> CascadeStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        write_dataset(&PathBuf::from(str_arg(path, "path")?), &ds.header, &ds.scenes)?;
        Ok(())
    })
}

/// Number of scenes, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn cascade_dataset_num_scenes(ds: *const CascadeDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.scenes.len())
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cascade_dataset_free(ds: *mut CascadeDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Trains the configured variant on `ds`. The dataset's scene layout
/// overrides the one in `config_toml`, which may be null.
///
/// # Safety
/// `ds` must be a live dataset handle; `config_toml` null or a
/// NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cascade_detector_train(
    ds: *const CascadeDataset,
    config_toml: *const c_char,
    out: *mut *mut CascadeDetector,
) -> CascadeStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        out_arg(out, "out")?;
        let mut config = config_from(opt_str_arg(config_toml, "config")?)?;
        config.scene = ds.header.scene_config.clone();
        config.validate()?;
        let (detector, _) = experiment::train_detector(&config, &ds.scenes)?;
        *out = Box::into_raw(Box::new(CascadeDetector { detector, config }));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cascade_detector_load(path: *const c_char, out: *mut *mut CascadeDetector) -> CascadeStatus {
    guard(|| {
        out_arg(out, "out")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        let bytes = std::fs::read(&path).map_err(|e| fail(CascadeStatus::Io, format!("{}: {e}", path.display())))?;
        let file = model::deserialize(&bytes)?;
        let detector = Detector::from_file(&file)?;
        // Models written by this library or the CLI carry their configuration.
        let config = file.config.get("config").and_then(|c| serde_json::from_value(c.clone()).ok()).unwrap_or_default();
        *out = Box::into_raw(Box::new(CascadeDetector { detector, config }));
        Ok(())
    })
}

/// # Safety
/// `det` must be a live detector handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cascade_detector_save(det: *const CascadeDetector, path: *const c_char) -> CascadeStatus {
    guard(|| {
        let det = handle(det, "detector")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        let meta = serde_json::json!({"config_digest": det.config.digest(), "seed": det.config.seed, "config": det.config.to_json()});
        let bytes = model::serialize(&det.detector.to_file(meta))?;
        cascade_core::io::write_bytes(&path, &bytes)?;
        Ok(())
    })
}

/// Number of stages, or 0 for a null handle.
///
/// # Safety
/// `det` must be null or a live detector handle.
#[no_mangle]
pub unsafe extern "C" fn cascade_detector_num_stages(det: *const CascadeDetector) -> usize {
    det.as_ref().map_or(0, |d| d.detector.num_stages())
}

/// # Safety
/// `det` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cascade_detector_free(det: *mut CascadeDetector) {
    if !det.is_null() {
        drop(Box::from_raw(det));
    }
}

fn options(det: &CascadeDetector, test_stage: Option<&str>) -> Result<InferOptions, Failure> {
    let mut eval = det.config.eval.clone();
    if let Some(s) = test_stage {
        eval.test_stage = Some(s.to_string());
    }
    let opts = eval.options(det.detector.num_stages())?;
    let k = match opts.test_stage {
        TestStage::Stage(k) | TestStage::Ensemble(k) => k,
    };
    if k > det.detector.num_stages() {
        return Err(fail(
            CascadeStatus::InvalidArgument,
            format!("test stage {} exceeds {} stages", opts.test_stage, det.detector.num_stages()),
        ));
    }
    Ok(opts)
}

/// Detects objects in scene `scene_index` of `ds`. `*written` receives the
/// number of detections; when it exceeds `capacity` nothing is copied and
/// `CASCADE_STATUS_BUFFER_TOO_SMALL` is returned. `test_stage` is null for
/// the default or a selector such as `"2"` or `"1~3"`.
///
/// # Safety
/// Handles must be live; `buf` must hold `capacity` elements (it may be null
/// when `capacity` is 0); `written` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cascade_detect(
    det: *const CascadeDetector,
    ds: *const CascadeDataset,
    scene_index: usize,
    test_stage: *const c_char,
    buf: *mut CascadeDetection,
    capacity: usize,
    written: *mut usize,
) -> CascadeStatus {
    guard(|| {
        let det = handle(det, "detector")?;
        let ds = handle(ds, "dataset")?;
        out_arg(written, "written")?;
        let scene = ds.scenes.get(scene_index).ok_or_else(|| {
            fail(CascadeStatus::InvalidArgument, format!("scene {scene_index} out of range ({} scenes)", ds.scenes.len()))
        })?;
        let opts = options(det, opt_str_arg(test_stage, "test_stage")?)?;
        let src = FeatureSource { scene_cfg: &ds.header.scene_config, seed: ds.header.seed, scene_index: scene_index as u64 };
        let dets = det.detector.detect(scene, &opts, &src)?;
        *written = dets.len();
        if dets.len() > capacity {
            return Err(fail(CascadeStatus::BufferTooSmall, format!("{} detections, buffer holds {capacity}", dets.len())));
        }
        if !dets.is_empty() {
            out_arg(buf, "buf")?;
            let dst = std::slice::from_raw_parts_mut(buf, dets.len());
            for (d, s) in dst.iter_mut().zip(&dets) {
                *d = CascadeDetection {
                    x1: s.bbox.x1,
                    y1: s.bbox.y1,
                    x2: s.bbox.x2,
                    y2: s.bbox.y2,
                    class_id: s.class_id as u32,
                    score: s.score,
                };
            }
        }
        Ok(())
    })
}

/// Evaluates `det` on every scene of `ds`.
///
/// # Safety
/// Handles must be live; `test_stage` null or a NUL-terminated string;
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cascade_evaluate(
    det: *const CascadeDetector,
    ds: *const CascadeDataset,
    test_stage: *const c_char,
    out: *mut *mut CascadeReport,
) -> CascadeStatus {
    guard(|| {
        let det = handle(det, "detector")?;
        let ds = handle(ds, "dataset")?;
        out_arg(out, "out")?;
        let opts = options(det, opt_str_arg(test_stage, "test_stage")?)?;
        let report = experiment::evaluate(&det.detector, &ds.scenes, &opts, &ds.header.scene_config, ds.header.seed)?;
        let cfg = ExperimentConfig { seed: ds.header.seed, scene: ds.header.scene_config.clone(), ..det.config.clone() };
        let doc = experiment::metrics_json(&cfg, det.detector.variant(), opts.test_stage, &report, &[]);
        let json = CString::new(serde_json::to_string(&doc).map_err(|e| fail(CascadeStatus::Internal, e.to_string()))?)
            .map_err(|e| fail(CascadeStatus::Internal, e.to_string()))?;
        *out = Box::into_raw(Box::new(CascadeReport { report, json }));
        Ok(())
    })
}

/// Mean AP over IoU thresholds 0.50:0.05:0.95.
///
/// # Safety
/// `r` must be a live report handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cascade_report_mean_ap(r: *const CascadeReport, out: *mut f64) -> CascadeStatus {
    guard(|| {
        let r = handle(r, "report")?;
        out_arg(out, "out")?;
        *out = r.report.mean_ap.ok_or_else(|| fail(CascadeStatus::InvalidArgument, "no ground truth to evaluate against"))?;
        Ok(())
    })
}

/// AP at one of the thresholds 0.50, 0.55, ..., 0.95.
///
/// # Safety
/// `r` must be a live report handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cascade_report_ap_at(r: *const CascadeReport, iou_threshold: f64, out: *mut f64) -> CascadeStatus {
    guard(|| {
        let r = handle(r, "report")?;
        out_arg(out, "out")?;
        *out =
            r.report.ap_at(iou_threshold).ok_or_else(|| fail(CascadeStatus::InvalidArgument, format!("no AP at IoU {iou_threshold}")))?;
        Ok(())
    })
}

/// The report as JSON. Owned by the report; valid until it is freed.
///
/// # Safety
/// `r` must be null or a live report handle.
#[no_mangle]
pub unsafe extern "C" fn cascade_report_json(r: *const CascadeReport) -> *const c_char {
    r.as_ref().map_or(ptr::null(), |r| r.json.as_ptr())
}

/// # Safety
/// `r` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cascade_report_free(r: *mut CascadeReport) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}
