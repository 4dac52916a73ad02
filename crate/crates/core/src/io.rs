//! File formats: JSON Lines datasets, pretty JSON reports and CSV tables.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{Scene, SceneConfig};

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// First line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub scene_config: SceneConfig,
    pub seed: u64,
    /// Which scene stream the file holds (`train`, `test`, ...).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Format(format!("{}: {e}", dir.display())))?;
    }
    let f = File::create(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(BufWriter::new(f))
}

pub fn write_dataset(path: &Path, header: &DatasetHeader, scenes: &[Scene]) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n")?;
    for s in scenes {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<Scene>)> {
    let f = File::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut lines = BufReader::new(f).lines();
    let first = lines.next().ok_or_else(|| Error::Format(format!("{}: empty dataset file", path.display())))??;
    let header: DatasetHeader = serde_json::from_str(&first).map_err(|e| Error::Format(format!("{}: bad header: {e}", path.display())))?;
    if header.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: dataset format version {} is not supported (expected {DATASET_FORMAT_VERSION})",
            path.display(),
            header.format_version
        )));
    }
    header.scene_config.validate()?;
    let dim = header.scene_config.feature_dim();
    let mut scenes = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Scene = serde_json::from_str(&line).map_err(|e| Error::Format(format!("{}: line {}: {e}", path.display(), i + 2)))?;
        if let Some(p) = s.proposals.iter().find(|p| p.features.len() != dim) {
            return Err(Error::Shape(format!("{}: line {}: feature length {} != {dim}", path.display(), i + 2, p.features.len())));
        }
        scenes.push(s);
    }
    Ok((header, scenes))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(bytes)?;
    w.flush()?;
    Ok(())
}

/// A CSV table held in memory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: ToString>(header: &[S]) -> Self {
        Self { header: header.iter().map(ToString::to_string).collect(), rows: Vec::new() }
    }

    pub fn push<S: ToString>(&mut self, row: &[S]) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row.iter().map(ToString::to_string).collect());
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).map_err(|e| Error::Format(e.to_string()))?;
        for r in &self.rows {
            w.write_record(r).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.into_inner().map_err(|e| Error::Format(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_csv()?)
    }
}

/// Fixed-precision rendering for report tables.
pub fn fmt_pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}
