//! Raw + JSON sidecar grid files, landmark files, step-log CSV and report
//! JSON.
//!
//! A grid written to `stem` produces `stem.json` (header) and `stem.raw`
//! (little-endian scalars, component-major for fields).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{voxel_count, Dims, DisplacementField, Volume};
use crate::metrics::{LabelMap, LandmarkSet, MetricsReport};
use crate::moo::{GpConfig, StepLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: Dims,
    pub spacing: [f64; 3],
    pub dtype: Dtype,
    pub components: usize,
    pub byte_order: String,
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn header_path(stem: &Path) -> PathBuf {
    with_ext(stem, "json")
}

pub fn raw_path(stem: &Path) -> PathBuf {
    with_ext(stem, "raw")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn write_grid(stem: &Path, header: &VolumeHeader, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * header.dtype.size());
    for &v in values {
        match header.dtype {
            Dtype::F32 => bytes.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => bytes.extend_from_slice(&v.to_le_bytes()),
        }
    }
    let json = serde_json::to_string_pretty(header).expect("header serializes");
    write_file(&header_path(stem), json.as_bytes())?;
    write_file(&raw_path(stem), &bytes)
}

fn read_grid(stem: &Path) -> Result<(VolumeHeader, Vec<f64>)> {
    let hp = header_path(stem);
    let text = fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
    let header: VolumeHeader =
        serde_json::from_str(&text).map_err(|e| format_err(&hp, e.to_string()))?;
    if header.byte_order != "little" {
        return Err(format_err(&hp, format!("unsupported byte order {:?}", header.byte_order)));
    }
    if header.components != 1 && header.components != 3 {
        return Err(format_err(&hp, format!("unsupported component count {}", header.components)));
    }
    let rp = raw_path(stem);
    let bytes = fs::read(&rp).map_err(|e| Error::io(&rp, e))?;
    let count = voxel_count(header.dims) * header.components;
    let expected = count * header.dtype.size();
    if bytes.len() != expected {
        return Err(format_err(
            &rp,
            format!("payload has {} bytes, header implies {expected}", bytes.len()),
        ));
    }
    let values = match header.dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok((header, values))
}

pub fn write_volume(stem: &Path, vol: &Volume, dtype: Dtype) -> Result<()> {
    let header = VolumeHeader {
        dims: vol.dims(),
        spacing: vol.spacing(),
        dtype,
        components: 1,
        byte_order: "little".into(),
    };
    write_grid(stem, &header, vol.data())
}

pub fn write_field(stem: &Path, field: &DisplacementField, dtype: Dtype) -> Result<()> {
    let header = VolumeHeader {
        dims: field.dims(),
        spacing: field.spacing(),
        dtype,
        components: 3,
        byte_order: "little".into(),
    };
    write_grid(stem, &header, field.data())
}

/// Labels are stored as single-component `f32` grids.
pub fn write_labels(stem: &Path, labels: &LabelMap) -> Result<()> {
    let header = VolumeHeader {
        dims: labels.dims(),
        spacing: labels.spacing(),
        dtype: Dtype::F32,
        components: 1,
        byte_order: "little".into(),
    };
    let values: Vec<f64> = labels.data().iter().map(|&l| l as f64).collect();
    write_grid(stem, &header, &values)
}

pub fn read_volume(stem: &Path) -> Result<Volume> {
    let (h, values) = read_grid(stem)?;
    if h.components != 1 {
        return Err(format_err(&header_path(stem), "expected a scalar volume"));
    }
    Volume::new(h.dims, h.spacing, values)
}

pub fn read_field(stem: &Path) -> Result<DisplacementField> {
    let (h, values) = read_grid(stem)?;
    if h.components != 3 {
        return Err(format_err(&header_path(stem), "expected a 3-component field"));
    }
    DisplacementField::new(h.dims, h.spacing, values)
}

pub fn read_labels(stem: &Path) -> Result<LabelMap> {
    let (h, values) = read_grid(stem)?;
    if h.components != 1 {
        return Err(format_err(&header_path(stem), "expected a scalar label map"));
    }
    let mut data = Vec::with_capacity(values.len());
    for v in values {
        if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
            return Err(format_err(&raw_path(stem), format!("invalid label value {v}")));
        }
        data.push(v as u32);
    }
    LabelMap::new(h.dims, h.spacing, data)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))
}

pub fn write_landmarks(path: &Path, set: &LandmarkSet) -> Result<()> {
    write_json(path, set)
}

pub fn read_landmarks(path: &Path) -> Result<LandmarkSet> {
    let raw: LandmarkSet = read_json(path)?;
    LandmarkSet::new(raw.ids, raw.points)
}

pub const STEP_LOG_HEADER: &str =
    "step,sim_fwd,sim_bwd,reg,total,g_sim_norm,g_reg_norm,inner_product,cosine,conflict,victim,update_norm";

pub fn write_step_logs_csv(path: &Path, logs: &[StepLog]) -> Result<()> {
    if logs.is_empty() {
        return Err(Error::invalid("no step logs to write"));
    }
    let mut out = Vec::new();
    writeln!(out, "{STEP_LOG_HEADER}").unwrap();
    for l in logs {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            l.step,
            l.sim_fwd,
            l.sim_bwd,
            l.reg,
            l.total,
            l.g_sim_norm,
            l.g_reg_norm,
            l.inner_product,
            l.cosine,
            u8::from(l.conflict),
            l.victim.as_str(),
            l.update_norm
        )
        .unwrap();
    }
    write_file(path, &out)
}

/// Metrics plus the configuration that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub metrics: MetricsReport,
    pub config: Option<GpConfig>,
    pub seed: Option<u64>,
    pub conflict_rate: Option<f64>,
}

pub fn write_report_json(path: &Path, report: &RunReport) -> Result<()> {
    write_json(path, report)
}

pub fn read_report_json(path: &Path) -> Result<RunReport> {
    read_json(path)
}
