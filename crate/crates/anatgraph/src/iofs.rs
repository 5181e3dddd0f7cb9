//! File IO: binary artifacts through the core codecs, the cohort manifest,
//! the JSONL metrics sink, and the CSV feature/label formats.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anatgraph_core::error::{Error, Result};
use anatgraph_core::formats::{ckpt, rtfm, rvol};
use anatgraph_core::tensor::Tensor;
use anatgraph_core::trainer::{MetricRecord, TrainSink};
use anatgraph_core::transform::SpatialTransform;
use anatgraph_core::volume::{hu_to_unit, Volume};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

fn read_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::format(format!("{}: {e}", path.display()))
}

fn write_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Sink { detail: format!("{}: {e}", path.display()) }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| read_err(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| write_err(path, e))?;
    }
    fs::write(path, bytes).map_err(|e| write_err(path, e))
}

/// Load a volume; with `hu_window` set the stored voxels are raw Hounsfield
/// units and are windowed onto [-1, 1] on the way in.
pub fn read_volume(path: &Path, hu_window: bool) -> Result<Volume> {
    let mut vol = rvol::decode(&read_bytes(path)?)?;
    if hu_window {
        for v in vol.voxels.iter_mut() {
            *v = hu_to_unit(*v);
        }
    }
    vol.ensure_unit_range().map_err(|e| {
        Error::format(format!("{}: intensities not in [-1, 1] (set data.hu_window for raw HU files): {e}", path.display()))
    })?;
    Ok(vol)
}

pub fn write_volume(path: &Path, vol: &Volume) -> Result<()> {
    write_bytes(path, &rvol::encode(vol))
}

pub fn read_transform(path: &Path, source_extent_mm: [f32; 3]) -> Result<SpatialTransform> {
    rtfm::decode(&read_bytes(path)?, source_extent_mm)
}

pub fn write_transform(path: &Path, t: &SpatialTransform) -> Result<()> {
    write_bytes(path, &rtfm::encode(t)?)
}

pub fn read_checkpoint(path: &Path) -> Result<std::collections::BTreeMap<String, Tensor>> {
    ckpt::decode(&read_bytes(path)?)
}

// ---------------------------------------------------------------------------
// Cohort manifest
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub config: ManifestConfig,
    pub subjects: Vec<ManifestSubject>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestConfig {
    pub tool_version: String,
    pub config_hash: String,
    pub atlas: String,
    pub mask: String,
    pub run: RunConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestSubject {
    pub id: String,
    pub volume: String,
    pub transform: String,
    pub label: usize,
    pub severity: f32,
    pub lesion_nodes: Vec<usize>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| read_err(&path, e))?;
        serde_json::from_str(&text).map_err(|e| read_err(&path, e))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Sink { detail: format!("manifest: {e}") })?;
        write_bytes(&path, text.as_bytes())
    }

    pub fn subject(&self, id: &str) -> Result<&ManifestSubject> {
        self.subjects
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::config(format!("subject {id} not in manifest")))
    }
}

/// Load a manifest subject's volume and transform.
pub fn load_subject(
    dir: &Path,
    subject: &ManifestSubject,
    hu_window: bool,
) -> Result<(Volume, SpatialTransform)> {
    let vol = read_volume(&dir.join(&subject.volume), hu_window)?;
    let extent = vol.extent_mm();
    let tfm = read_transform(&dir.join(&subject.transform), extent)?;
    Ok((vol, tfm))
}

// ---------------------------------------------------------------------------
// Training sink: JSONL metrics plus a rolling checkpoint file
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct MetricsHeader<'a> {
    tool_version: &'a str,
    config_hash: &'a str,
}

#[derive(Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub outer: u64,
    pub phase: String,
    pub loss: f32,
    pub lr: f32,
}

pub struct FileSink {
    metrics: std::io::BufWriter<fs::File>,
    metrics_path: PathBuf,
    checkpoint_path: PathBuf,
}

impl FileSink {
    pub fn create(out_dir: &Path, config_hash: &str) -> Result<Self> {
        fs::create_dir_all(out_dir).map_err(|e| write_err(out_dir, e))?;
        let metrics_path = out_dir.join("metrics.jsonl");
        let file = fs::File::create(&metrics_path).map_err(|e| write_err(&metrics_path, e))?;
        let mut metrics = std::io::BufWriter::new(file);
        let header = MetricsHeader { tool_version: crate::TOOL_VERSION, config_hash };
        writeln!(metrics, "{}", serde_json::to_string(&header).expect("header"))
            .map_err(|e| write_err(&metrics_path, e))?;
        Ok(FileSink { metrics, metrics_path, checkpoint_path: out_dir.join("model.ckpt") })
    }

    pub fn finish(mut self) -> Result<()> {
        self.metrics.flush().map_err(|e| write_err(&self.metrics_path, e))
    }
}

impl TrainSink for FileSink {
    fn metrics(&mut self, rec: &MetricRecord) -> Result<()> {
        let row = MetricsRow {
            step: rec.global_step,
            outer: rec.outer_step,
            phase: rec.phase.as_str().to_string(),
            loss: rec.loss,
            lr: rec.lr,
        };
        writeln!(self.metrics, "{}", serde_json::to_string(&row).expect("row"))
            .map_err(|e| write_err(&self.metrics_path, e))
    }

    fn checkpoint(&mut self, _outer_step: u64, bytes: &[u8]) -> Result<()> {
        write_bytes(&self.checkpoint_path, bytes)
    }
}

// ---------------------------------------------------------------------------
// CSV features and labels
// ---------------------------------------------------------------------------

/// Write pooled features: one row per subject, `subject_id,f0..f{F-1}`.
pub fn write_features_csv(
    path: &Path,
    config_hash: &str,
    rows: &[(String, Vec<f32>)],
) -> Result<()> {
    let f = rows.first().map(|(_, v)| v.len()).unwrap_or(0);
    let mut text = format!("# anatgraph {} config_hash={config_hash}\n", crate::TOOL_VERSION);
    text.push_str("subject_id");
    for j in 0..f {
        text.push_str(&format!(",f{j}"));
    }
    text.push('\n');
    for (id, feats) in rows {
        text.push_str(id);
        for v in feats {
            text.push_str(&format!(",{v}"));
        }
        text.push('\n');
    }
    write_bytes(path, text.as_bytes())
}

/// Write per-node features: `subject_id,node,f0..`.
pub fn write_node_features_csv(
    path: &Path,
    config_hash: &str,
    rows: &[(String, Vec<Vec<f32>>)],
) -> Result<()> {
    let f = rows.first().and_then(|(_, nodes)| nodes.first()).map(Vec::len).unwrap_or(0);
    let mut text = format!("# anatgraph {} config_hash={config_hash}\n", crate::TOOL_VERSION);
    text.push_str("subject_id,node");
    for j in 0..f {
        text.push_str(&format!(",f{j}"));
    }
    text.push('\n');
    for (id, nodes) in rows {
        for (j, feats) in nodes.iter().enumerate() {
            text.push_str(&format!("{id},{j}"));
            for v in feats {
                text.push_str(&format!(",{v}"));
            }
            text.push('\n');
        }
    }
    write_bytes(path, text.as_bytes())
}

/// Read a features CSV back: `subject_id,f0..`. Comment lines start with '#'.
pub fn read_features_csv(path: &Path) -> Result<Vec<(String, Vec<f32>)>> {
    let text = fs::read_to_string(path).map_err(|e| read_err(path, e))?;
    let mut rows = Vec::new();
    let mut width = None;
    for (lineno, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() || line.starts_with("subject_id") {
            continue;
        }
        let mut parts = line.split(',');
        let id = parts
            .next()
            .ok_or_else(|| Error::format(format!("{}:{lineno}: empty row", path.display())))?;
        let feats: Vec<f32> = parts
            .map(|p| {
                p.trim().parse::<f32>().map_err(|e| {
                    Error::format(format!("{}:{lineno}: bad number {p:?}: {e}", path.display()))
                })
            })
            .collect::<Result<_>>()?;
        if feats.is_empty() {
            return Err(Error::format(format!("{}:{lineno}: no features", path.display())));
        }
        if *width.get_or_insert(feats.len()) != feats.len() {
            return Err(Error::format(format!("{}:{lineno}: ragged feature row", path.display())));
        }
        rows.push((id.to_string(), feats));
    }
    if rows.is_empty() {
        return Err(Error::format(format!("{}: no feature rows", path.display())));
    }
    Ok(rows)
}

/// Labels CSV: `subject_id,target` with a header line.
pub fn write_labels_csv(path: &Path, rows: &[(String, f64)]) -> Result<()> {
    let mut text = String::from("subject_id,target\n");
    for (id, v) in rows {
        text.push_str(&format!("{id},{v}\n"));
    }
    write_bytes(path, text.as_bytes())
}

pub fn read_labels_csv(path: &Path) -> Result<Vec<(String, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| read_err(path, e))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() || line.starts_with("subject_id") {
            continue;
        }
        let (id, value) = line.split_once(',').ok_or_else(|| {
            Error::format(format!("{}:{lineno}: expected subject_id,target", path.display()))
        })?;
        let v = value.trim().parse::<f64>().map_err(|e| {
            Error::format(format!("{}:{lineno}: bad target {value:?}: {e}", path.display()))
        })?;
        rows.push((id.to_string(), v));
    }
    if rows.is_empty() {
        return Err(Error::format(format!("{}: no label rows", path.display())));
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Probe / explanation / graph exports
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeOutput {
    pub tool_version: String,
    pub config_hash: String,
    pub metric: String,
    pub k: usize,
    pub seed: u64,
    pub lambda: f64,
    pub per_fold: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub full_model: FullModel,
}

/// The refit-on-all-data model in raw feature space; explanation consumes it.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FullModel {
    Linear { weights: Vec<f64>, intercept: f64 },
    Logistic { weights: Vec<Vec<f64>>, biases: Vec<f64> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExplainOutput {
    pub subject_id: String,
    pub beta: f64,
    pub scores_raw: Vec<f64>,
    pub scores_norm: Vec<f64>,
    pub logit_check: f64,
    pub config_hash: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GraphExport {
    pub subject_id: String,
    pub n: usize,
    pub centers_mm: Vec<[f32; 3]>,
    /// Edge list with j < k.
    pub edges: Vec<[usize; 2]>,
    pub rho_mm: f32,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Sink { detail: format!("{}: {e}", path.display()) })?;
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| read_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| read_err(path, e))
}
