//! End-to-end runs: detection, initial segmentation, per-box refinement,
//! overlay, dataset evaluation and throughput measurement.
//!
//! For each image the detector's boxes prompt one segmentation of the whole
//! (backend-scaled) image, giving the initial mask. Each box is then grown
//! by the expansion factor, the crop and the matching part of the initial
//! mask go through [`cmrm::refine`], and the refined crops are OR-merged
//! into a full-resolution canvas.

mod dataset;
mod report;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{
    BoxDetector, Concurrency, Detection, EncodeView, GtBoxDetector, LearnedSelector, NeuralBackend, NeuralDetector,
    SegmentationBackend, SyntheticOracle,
};
use crate::cmrm::{self, CropInput, RefinementConfig, RefinementOutcome};
use crate::imgproc::{self, expand_box, BinaryMask, BoundingBox, Image, DEFAULT_COLOR};
use crate::kernel::{
    FixedSelector, HeuristicSelector, KernelCandidates, KernelMode, KernelSelector, OracleSelector, TrainingRow,
};
use crate::metrics::{evaluate_mask, Aggregation, FpsMeter, ThroughputReport};
use crate::prompts::PointPrompt;
use crate::{Error, ErrorKind, Result};

pub use dataset::{DatasetEntry, DatasetIndex};
pub use report::{Aggregates, BoxRow, ImageRow, RunReport, StageTimings, SCHEMA_VERSION};

/// Stage names used in throughput reports.
pub const STAGES: [&str; 4] = ["detect", "encode", "decode", "cmrm"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum BackendSpec {
    Synthetic(PathBuf),
    Neural(PathBuf),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum DetectorSpec {
    /// Tight boxes of the ground-truth components.
    #[default]
    Gt,
    Neural(PathBuf),
}

fn split_spec<'a>(s: &'a str, what: &str) -> Result<(&'a str, Option<&'a str>)> {
    match s.split_once(':') {
        Some((kind, path)) if !path.is_empty() => Ok((kind, Some(path))),
        Some(_) => Err(Error::Config(format!("{what} '{s}' has an empty path"))),
        None => Ok((s, None)),
    }
}

impl FromStr for BackendSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match split_spec(s, "backend")? {
            ("synthetic", Some(p)) => Ok(BackendSpec::Synthetic(p.into())),
            ("neural", Some(p)) => Ok(BackendSpec::Neural(p.into())),
            _ => Err(Error::Config(format!("backend '{s}' is not synthetic:SPEC.json or neural:MANIFEST.json"))),
        }
    }
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendSpec::Synthetic(p) => write!(f, "synthetic:{}", p.display()),
            BackendSpec::Neural(p) => write!(f, "neural:{}", p.display()),
        }
    }
}

impl FromStr for DetectorSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match split_spec(s, "detector")? {
            ("gt", None) => Ok(DetectorSpec::Gt),
            ("neural", Some(p)) => Ok(DetectorSpec::Neural(p.into())),
            _ => Err(Error::Config(format!("detector '{s}' is not gt or neural:MANIFEST.json"))),
        }
    }
}

impl fmt::Display for DetectorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DetectorSpec::Gt => f.write_str("gt"),
            DetectorSpec::Neural(p) => write!(f, "neural:{}", p.display()),
        }
    }
}

macro_rules! string_serde {
    ($t:ty) => {
        impl From<$t> for String {
            fn from(v: $t) -> String {
                v.to_string()
            }
        }

        impl TryFrom<String> for $t {
            type Error = Error;

            fn try_from(s: String) -> Result<Self> {
                s.parse()
            }
        }
    };
}

string_serde!(BackendSpec);
string_serde!(DetectorSpec);

/// How a crop is brought to the backend's input size.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResizePolicy {
    /// Scale each axis independently.
    #[default]
    Stretch,
    /// Pad the crop right / bottom to the input aspect ratio first.
    Letterbox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub refinement: RefinementConfig,
    pub backend: BackendSpec,
    #[serde(default)]
    pub detector: DetectorSpec,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub resize: ResizePolicy,
}

impl PipelineConfig {
    pub fn new(backend: BackendSpec) -> Self {
        Self {
            refinement: RefinementConfig::default(),
            backend,
            detector: DetectorSpec::Gt,
            aggregation: Aggregation::ImageMean,
            output_dir: None,
            resize: ResizePolicy::Stretch,
        }
    }

    /// Total prompt budget: 2, 4 or 6, split evenly between the two maps.
    pub fn set_points_total(&mut self, total: usize) -> Result<()> {
        if !matches!(total, 2 | 4 | 6) {
            return Err(Error::Config(format!("--points must be 2, 4 or 6, got {total}")));
        }
        self.refinement.points_per_map = total / 2;
        Ok(())
    }

    pub fn points_total(&self) -> usize {
        2 * self.refinement.points_per_map
    }
}

/// Builds the selector for a kernel mode over the default candidates.
pub fn make_selector(mode: &KernelMode) -> Result<Box<dyn KernelSelector>> {
    let candidates = KernelCandidates::default();
    Ok(match mode {
        KernelMode::Fixed(k) => Box::new(FixedSelector::new(*k, candidates)?),
        KernelMode::Oracle => Box::new(OracleSelector::new(candidates)),
        KernelMode::Heuristic => Box::new(HeuristicSelector::new(candidates)),
        KernelMode::Learned(p) => Box::new(LearnedSelector::load(p, candidates).map_err(as_config)?),
    })
}

/// Failures while loading models or specs are configuration problems.
fn as_config(e: Error) -> Error {
    match e.kind() {
        ErrorKind::Config => e,
        _ => Error::Config(e.to_string()),
    }
}

pub struct Frame<'a> {
    /// Source id handed to the backend (the file stem for datasets).
    pub id: &'a str,
    pub image: &'a Image,
    pub ground_truth: Option<&'a BinaryMask>,
}

pub struct FrameOutput {
    pub initial: BinaryMask,
    pub refined: BinaryMask,
    pub overlay: Image,
    pub row: ImageRow,
}

pub struct Pipeline {
    cfg: PipelineConfig,
    backend: Box<dyn SegmentationBackend>,
    detector: Option<Box<dyn BoxDetector>>,
    selector: Box<dyn KernelSelector>,
}

fn pad_image(img: &Image, w: usize, h: usize) -> Result<Image> {
    let c = img.channels();
    let mut data = vec![0u8; w * h * c];
    let row = img.width() * c;
    for y in 0..img.height() {
        data[y * w * c..y * w * c + row].copy_from_slice(&img.data()[y * row..(y + 1) * row]);
    }
    Image::new(w, h, c, data)
}

fn pad_mask(m: &BinaryMask, w: usize, h: usize) -> BinaryMask {
    let mut out = BinaryMask::new(w, h);
    out.paste_or(m, 0, 0);
    out
}

/// Smallest extension of `crop` matching the `input` aspect ratio.
fn letterbox_dims(crop: (usize, usize), input: (usize, usize)) -> (usize, usize) {
    let (cw, ch) = crop;
    let (iw, ih) = input;
    if cw * ih >= ch * iw {
        (cw, (cw * ih).div_ceil(iw).max(ch))
    } else {
        ((ch * iw).div_ceil(ih).max(cw), ch)
    }
}

impl Pipeline {
    pub fn from_config(cfg: PipelineConfig) -> Result<Self> {
        let backend: Box<dyn SegmentationBackend> = match &cfg.backend {
            BackendSpec::Synthetic(p) => Box::new(SyntheticOracle::from_spec_file(p).map_err(as_config)?),
            BackendSpec::Neural(p) => Box::new(NeuralBackend::load(p).map_err(as_config)?),
        };
        Self::with_backend(cfg, backend)
    }

    /// Uses an already constructed backend; `cfg.backend` is only echoed.
    pub fn with_backend(cfg: PipelineConfig, backend: Box<dyn SegmentationBackend>) -> Result<Self> {
        cfg.refinement.validate()?;
        let caps = backend.capabilities();
        if !caps.box_prompts || !caps.point_prompts {
            return Err(Error::Config(format!(
                "backend '{}' must accept box and point prompts (box: {}, point: {})",
                backend.id(),
                caps.box_prompts,
                caps.point_prompts
            )));
        }
        let detector: Option<Box<dyn BoxDetector>> = match &cfg.detector {
            DetectorSpec::Gt => None,
            DetectorSpec::Neural(p) => Some(Box::new(NeuralDetector::load(p).map_err(as_config)?)),
        };
        let selector = make_selector(&cfg.refinement.kernel_mode)?;
        Ok(Self { cfg, backend, detector, selector })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn backend(&self) -> &dyn SegmentationBackend {
        self.backend.as_ref()
    }

    fn detect(&self, frame: &Frame<'_>) -> Result<Vec<Detection>> {
        let (w, h) = frame.image.dims();
        let raw = match &self.detector {
            None => {
                let gt = frame
                    .ground_truth
                    .ok_or_else(|| Error::Config("the gt detector needs a ground-truth mask".into()))?;
                GtBoxDetector::boxes(gt)
            }
            Some(d) => d.detect(frame.image).map_err(|e| e.at_stage("detect"))?,
        };
        Ok(raw
            .into_iter()
            .map(|d| Detection { bbox: d.bbox.clamp_to(w, h), confidence: d.confidence.clamp(0.0, 1.0) })
            .filter(|d| !d.bbox.is_empty())
            .collect())
    }

    fn refine_roi(
        &self,
        frame: &Frame<'_>,
        roi: &BoundingBox,
        detection: &BoundingBox,
        mask: &BinaryMask,
        selector: &dyn KernelSelector,
        seed: u64,
    ) -> Result<RefinementOutcome> {
        let crop = frame.image.crop(roi)?;
        let gt = frame.ground_truth.map(|g| g.crop(roi)).transpose()?;
        let boxes = [detection.relative_to(roi)];
        let cfg = RefinementConfig { rng_seed: seed, ..self.cfg.refinement.clone() };
        let view = |window| EncodeView { source_id: frame.id.to_string(), source_dims: frame.image.dims(), window };
        match self.cfg.resize {
            ResizePolicy::Stretch => {
                let input =
                    CropInput { image: &crop, view: view(*roi), boxes: &boxes, mask, ground_truth: gt.as_ref() };
                cmrm::refine(self.backend.as_ref(), &input, &cfg, selector)
            }
            ResizePolicy::Letterbox => {
                let (pw, ph) = letterbox_dims((roi.w, roi.h), self.backend.input_size());
                let image = pad_image(&crop, pw, ph)?;
                let padded = pad_mask(mask, pw, ph);
                let gt = gt.map(|g| pad_mask(&g, pw, ph));
                let input = CropInput {
                    image: &image,
                    view: view(BoundingBox::new(roi.x, roi.y, pw, ph)),
                    boxes: &boxes,
                    mask: &padded,
                    ground_truth: gt.as_ref(),
                };
                let out = cmrm::refine(self.backend.as_ref(), &input, &cfg, selector)?;
                let back = BoundingBox::full(roi.w, roi.h);
                Ok(RefinementOutcome {
                    refined: if out.fallback { mask.clone() } else { out.refined.crop(&back)? },
                    initial: out.initial.crop(&back)?,
                    diff_map: out.diff_map.crop(&back)?,
                    inter_map: out.inter_map.crop(&back)?,
                    ..out
                })
            }
        }
    }

    fn run_with(&self, frame: &Frame<'_>, selector: &dyn KernelSelector) -> Result<FrameOutput> {
        let start = Instant::now();
        let dims = frame.image.dims();
        if let Some(gt) = frame.ground_truth {
            if gt.dims() != dims {
                return Err(Error::DimensionMismatch { left: dims, right: gt.dims() });
            }
        }
        let mut timings = StageTimings::default();
        let t = Instant::now();
        let detections = self.detect(frame)?;
        timings.detect = t.elapsed().as_secs_f64();

        let mut initial = BinaryMask::new(dims.0, dims.1);
        let mut refined = BinaryMask::new(dims.0, dims.1);
        let mut boxes = Vec::with_capacity(detections.len());
        if !detections.is_empty() {
            let input = self.backend.input_size();
            let t = Instant::now();
            let embedding = self
                .backend
                .encode(frame.image, &EncodeView::whole(frame.id, frame.image))
                .map_err(|e| e.at_stage("encode"))?;
            timings.encode = t.elapsed().as_secs_f64();

            let t = Instant::now();
            let prompts: Vec<BoundingBox> = detections.iter().map(|d| d.bbox.rescale(dims, input)).collect();
            let scaled = self
                .backend
                .decode(&embedding, &prompts, &[])
                .map_err(|e| e.at_stage("decode"))?
                .resize(dims.0, dims.1)?;
            timings.decode = t.elapsed().as_secs_f64();

            let t = Instant::now();
            for (i, det) in detections.iter().enumerate() {
                let roi = expand_box(&det.bbox, self.cfg.refinement.expand_factor, dims);
                let m = scaled.crop(&roi)?;
                initial.paste_or(&m, roi.x, roi.y);
                let seed = self.cfg.refinement.rng_seed.wrapping_add(i as u64);
                let out = self.refine_roi(frame, &roi, &det.bbox, &m, selector, seed)?;
                refined.paste_or(&out.refined, roi.x, roi.y);
                boxes.push(BoxRow {
                    detection: det.bbox,
                    confidence: det.confidence,
                    roi,
                    prompts: out.prompts.iter().map(|p| PointPrompt::new(p.x + roi.x, p.y + roi.y, p.label)).collect(),
                    kernels: out.kernels,
                    fallback: out.fallback,
                });
            }
            timings.cmrm = t.elapsed().as_secs_f64();
        }
        let overlay = imgproc::overlay(frame.image, &refined, self.cfg.refinement.fusion_alpha, DEFAULT_COLOR)?;
        let (m_initial, m_refined) = match frame.ground_truth {
            Some(gt) => (Some(evaluate_mask(&initial, gt)?), Some(evaluate_mask(&refined, gt)?)),
            None => (None, None),
        };
        timings.total = start.elapsed().as_secs_f64();
        let dice_delta = m_initial.as_ref().zip(m_refined.as_ref()).map(|(a, b)| b.dice - a.dice);
        Ok(FrameOutput {
            initial,
            refined,
            overlay,
            row: ImageRow {
                id: frame.id.to_string(),
                no_detections: detections.is_empty(),
                boxes,
                initial: m_initial,
                refined: m_refined,
                dice_delta,
                error: None,
                timings: Some(timings),
            },
        })
    }

    /// Detect, segment, refine every box and overlay one image.
    pub fn run_single(&self, frame: &Frame<'_>) -> Result<FrameOutput> {
        self.run_with(frame, self.selector.as_ref())
    }

    /// Refinement alone on a whole image with caller-supplied mask and boxes.
    pub fn refine_image(
        &self,
        id: &str,
        image: &Image,
        mask: &BinaryMask,
        boxes: &[BoundingBox],
        ground_truth: Option<&BinaryMask>,
    ) -> Result<RefinementOutcome> {
        let input = CropInput { image, view: EncodeView::whole(id, image), boxes, mask, ground_truth };
        cmrm::refine(self.backend.as_ref(), &input, &self.cfg.refinement, self.selector.as_ref())
    }

    fn load_entry(entry: &DatasetEntry) -> Result<(Image, BinaryMask)> {
        let image = imgproc::load_image(&entry.image)?;
        let mask_path = entry
            .mask
            .as_ref()
            .ok_or_else(|| Error::Data(format!("{}: no ground-truth mask", entry.image.display())))?;
        let gt = imgproc::load_mask(mask_path)?;
        if gt.dims() != image.dims() {
            return Err(Error::DimensionMismatch { left: image.dims(), right: gt.dims() });
        }
        Ok((image, gt))
    }

    fn evaluate_entry(&self, entry: &DatasetEntry, selector: &dyn KernelSelector) -> Result<ImageRow> {
        let (image, gt) = Self::load_entry(entry)?;
        let out = self.run_with(&Frame { id: &entry.stem, image: &image, ground_truth: Some(&gt) }, selector)?;
        if let Some(dir) = &self.cfg.output_dir {
            imgproc::save_mask(&out.refined, dir.join(format!("{}.mask.png", entry.stem)))?;
            imgproc::save_image(&out.overlay, dir.join(format!("{}.overlay.png", entry.stem)))?;
        }
        Ok(out.row)
    }

    fn rows(&self, index: &DatasetIndex, selector: &dyn KernelSelector) -> Result<Vec<ImageRow>> {
        if index.is_empty() {
            return Err(Error::Data("dataset has no images".into()));
        }
        if let Some(dir) = &self.cfg.output_dir {
            std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.clone(), source })?;
        }
        // data problems stay with their row; configuration and backend
        // failures abort the run
        let run = |e: &DatasetEntry| match self.evaluate_entry(e, selector) {
            Ok(row) => Ok(row),
            Err(err) if err.kind() == ErrorKind::Data => {
                log::warn!("{}: {err}", e.stem);
                Ok(ImageRow::failed(&e.stem, &err))
            }
            Err(err) => Err(err),
        };
        match self.backend.concurrency() {
            Concurrency::Concurrent => index.entries().par_iter().map(run).collect(),
            Concurrency::Exclusive => index.entries().iter().map(run).collect(),
        }
    }

    /// Runs every dataset image; rows keep the index order.
    pub fn evaluate(&self, index: &DatasetIndex) -> Result<RunReport> {
        let rows = self.rows(index, self.selector.as_ref())?;
        Ok(RunReport::new(self.cfg.clone(), rows, index.unmatched().to_vec()))
    }

    /// Oracle kernel targets for every refined map of every image, as
    /// `<stem>/<box>/diff` and `<stem>/<box>/inter` rows.
    pub fn kernel_targets(&self, index: &DatasetIndex) -> Result<Vec<TrainingRow>> {
        let oracle = OracleSelector::default();
        let mut out = Vec::new();
        for row in self.rows(index, &oracle)? {
            if let Some(err) = &row.error {
                return Err(Error::Data(format!("{}: {err}", row.id)));
            }
            for (i, b) in row.boxes.iter().enumerate() {
                let maps = [("diff", Some(&b.kernels.difference)), ("inter", b.kernels.intersection.as_ref())];
                for (name, choice) in maps {
                    if let Some(scores) = choice.and_then(|c| c.scores.as_ref().map(|s| (c.kernel, s))) {
                        out.push(TrainingRow {
                            fixture_id: format!("{}/{i}/{name}", row.id),
                            target: scores.0,
                            scores: scores.1.scores.clone(),
                        });
                    }
                }
            }
        }
        Ok(out)
    }

    /// Sequential throughput over `frames` images cycling through the
    /// dataset, after `warmup` untimed frames. Images are loaded up front.
    pub fn bench(&self, index: &DatasetIndex, warmup: usize, frames: usize) -> Result<ThroughputReport> {
        if index.is_empty() {
            return Err(Error::Data("dataset has no images".into()));
        }
        if frames == 0 {
            return Err(Error::Config("bench needs at least one timed frame".into()));
        }
        let loaded = index
            .entries()
            .iter()
            .map(|e| Self::load_entry(e).map(|(i, g)| (e.stem.as_str(), i, g)))
            .collect::<Result<Vec<_>>>()?;
        let mut meter = FpsMeter::new();
        for n in 0..warmup + frames {
            let (id, image, gt) = &loaded[n % loaded.len()];
            let out = self.run_single(&Frame { id, image, ground_truth: Some(gt) })?;
            if n < warmup {
                continue;
            }
            let t = out.row.timings.expect("run_single records timings");
            for (stage, secs) in STAGES.iter().zip([t.detect, t.encode, t.decode, t.cmrm]) {
                meter.add_stage(stage, Duration::from_secs_f64(secs));
            }
            meter.finish_frame(Duration::from_secs_f64(t.total));
        }
        meter.report()
    }
}
