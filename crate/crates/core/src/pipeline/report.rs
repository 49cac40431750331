use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PipelineConfig;
use crate::cmrm::MapKernels;
use crate::imgproc::BoundingBox;
use crate::metrics::{aggregate, Aggregation, MetricReport, ThroughputReport};
use crate::prompts::PointPrompt;
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Per-box refinement record; prompts are in full-image coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxRow {
    pub detection: BoundingBox,
    pub confidence: f64,
    pub roi: BoundingBox,
    pub prompts: Vec<PointPrompt>,
    pub kernels: MapKernels,
    pub fallback: bool,
}

/// Wall time per stage, in seconds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub detect: f64,
    pub encode: f64,
    pub decode: f64,
    pub cmrm: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub id: String,
    pub no_detections: bool,
    pub boxes: Vec<BoxRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial: Option<MetricReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refined: Option<MetricReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dice_delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timings: Option<StageTimings>,
}

impl ImageRow {
    pub fn failed(id: impl Into<String>, err: &Error) -> Self {
        Self {
            id: id.into(),
            no_detections: false,
            boxes: Vec::new(),
            initial: None,
            refined: None,
            dice_delta: None,
            error: Some(err.to_string()),
            timings: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub mode: Aggregation,
    pub images: usize,
    pub failed: usize,
    pub initial: MetricReport,
    pub refined: MetricReport,
    pub dice_delta: f64,
    pub iou_delta: f64,
}

impl Aggregates {
    /// Aggregates over the rows carrying both metric sets.
    pub fn from_rows(rows: &[ImageRow], mode: Aggregation) -> Option<Self> {
        let scored: Vec<&ImageRow> = rows.iter().filter(|r| r.initial.is_some() && r.refined.is_some()).collect();
        let initial: Vec<MetricReport> = scored.iter().filter_map(|r| r.initial.clone()).collect();
        let refined: Vec<MetricReport> = scored.iter().filter_map(|r| r.refined.clone()).collect();
        let initial = aggregate(&initial, mode)?;
        let refined = aggregate(&refined, mode)?;
        Some(Self {
            mode,
            images: scored.len(),
            failed: rows.iter().filter(|r| r.error.is_some()).count(),
            dice_delta: refined.dice - initial.dice,
            iou_delta: refined.iou - initial.iou,
            initial,
            refined,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub config: PipelineConfig,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unmatched: Vec<String>,
    pub aggregates: Option<Aggregates>,
    pub rows: Vec<ImageRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub throughput: Option<ThroughputReport>,
}

impl RunReport {
    pub fn new(config: PipelineConfig, rows: Vec<ImageRow>, unmatched: Vec<String>) -> Self {
        let aggregates = Aggregates::from_rows(&rows, config.aggregation);
        Self { schema_version: SCHEMA_VERSION, config, unmatched, aggregates, rows, throughput: None }
    }

    /// Pretty JSON; without timings the output depends only on inputs,
    /// configuration and seed.
    pub fn to_json(&self, include_timings: bool) -> Result<String> {
        if include_timings {
            return Ok(serde_json::to_string_pretty(self)?);
        }
        let mut stripped = self.clone();
        stripped.throughput = None;
        for row in &mut stripped.rows {
            row.timings = None;
        }
        Ok(serde_json::to_string_pretty(&stripped)?)
    }

    pub fn write(&self, path: impl AsRef<Path>, include_timings: bool) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json(include_timings)?)
            .map_err(|source| Error::Io { path: path.to_path_buf(), source })
    }
}
