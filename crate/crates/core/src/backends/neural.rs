//! Backend that executes exported operator graphs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::graph::{resize_nearest, Graph};
use super::{
    check_embedding, resize_for_input, Capabilities, Concurrency, EmbeddingPayload, EncodeView, ImageEmbedding,
    SegmentationBackend,
};
use crate::convlora::Tensor4;
use crate::imgproc::{BinaryMask, BoundingBox, Image};
use crate::kernel::{KernelCandidates, KernelChoice, KernelMode, KernelSelector, SelectionRequest};
use crate::prompts::{PointPrompt, PromptLabel};
use crate::{Error, Result};

/// Per-channel `(v / 255 - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self { mean: [0.0; 3], std: [1.0; 3] }
    }
}

impl Normalization {
    /// `1×3×H×W` tensor of `img`; gray images are replicated to three channels.
    pub fn tensor(&self, img: &Image) -> Result<Tensor4> {
        for s in self.std {
            if s == 0.0 {
                return Err(Error::Config("normalization std must be non-zero".into()));
            }
        }
        let rgb = img.to_rgb();
        let (w, h) = rgb.dims();
        Ok(Tensor4::from_fn([1, 3, h, w], |[_, c, y, x]| {
            let v = rgb.pixel(x, y)[c] as f64 / 255.0;
            (v - self.mean[c]) / self.std[c]
        }))
    }
}

fn default_radius() -> usize {
    2
}

fn yes() -> bool {
    true
}

/// Model description shared with the export tooling.
///
/// The decoder receives the encoder output as `embedding` and a `1×3×H×W`
/// `prompt` raster at the input size: channel 0 is the union of the boxes,
/// channels 1 and 2 are discs of `point_radius` around positive and negative
/// points. Its first output holds mask logits; pixels above `mask_threshold`
/// are foreground.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub input_size: (usize, usize),
    pub capabilities: Capabilities,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default)]
    pub mask_threshold: f64,
    #[serde(default = "default_radius")]
    pub point_radius: usize,
    pub encoder: PathBuf,
    pub decoder: PathBuf,
    #[serde(default = "yes")]
    pub concurrent_decode: bool,
    /// Source checkpoint hashes recorded at export; carried, not checked.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub hashes: BTreeMap<String, String>,
}

impl ModelManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub(crate) fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub struct NeuralBackend {
    id: String,
    manifest: ModelManifest,
    encoder: Graph,
    decoder: Graph,
}

impl NeuralBackend {
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let path = manifest_path.as_ref();
        let manifest = ModelManifest::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_manifest(manifest, base, format!("neural:{}", path.display()))
    }

    pub fn from_manifest(manifest: ModelManifest, base: &Path, id: String) -> Result<Self> {
        if manifest.input_size.0 == 0 || manifest.input_size.1 == 0 {
            return Err(Error::Config("manifest input size must be non-zero".into()));
        }
        let encoder = Graph::load(resolve(base, &manifest.encoder))?;
        let decoder = Graph::load(resolve(base, &manifest.decoder))?;
        if encoder.outputs().is_empty() || decoder.outputs().is_empty() {
            return Err(Error::Config("encoder and decoder graphs need an output".into()));
        }
        Ok(Self { id, manifest, encoder, decoder })
    }

    pub fn manifest(&self) -> &ModelManifest {
        &self.manifest
    }

    fn prompt_raster(&self, boxes: &[BoundingBox], points: &[PointPrompt]) -> Tensor4 {
        let (w, h) = self.manifest.input_size;
        let r2 = (self.manifest.point_radius * self.manifest.point_radius) as isize;
        let near = |p: &PointPrompt, x: usize, y: usize| {
            let (dx, dy) = (x as isize - p.x as isize, y as isize - p.y as isize);
            dx * dx + dy * dy <= r2
        };
        Tensor4::from_fn([1, 3, h, w], |[_, c, y, x]| {
            let on = match c {
                0 => boxes.iter().any(|b| b.contains(x, y)),
                1 => points.iter().any(|p| p.label == PromptLabel::Positive && near(p, x, y)),
                _ => points.iter().any(|p| p.label == PromptLabel::Negative && near(p, x, y)),
            };
            on as u8 as f64
        })
    }
}

impl SegmentationBackend for NeuralBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn input_size(&self) -> (usize, usize) {
        self.manifest.input_size
    }

    fn capabilities(&self) -> Capabilities {
        self.manifest.capabilities
    }

    fn concurrency(&self) -> Concurrency {
        if self.manifest.concurrent_decode {
            Concurrency::Concurrent
        } else {
            Concurrency::Exclusive
        }
    }

    fn encode(&self, image: &Image, _view: &EncodeView) -> Result<ImageEmbedding> {
        let (input, auto_resized) = resize_for_input(image, self.manifest.input_size)?;
        let x = self.manifest.normalization.tensor(&input)?;
        let name = self.encoder.inputs().first().map_or("image", String::as_str);
        let features = self.encoder.run(&[(name, x)]).map_err(|e| e.at_stage("encode"))?.remove(0);
        Ok(ImageEmbedding {
            backend_id: self.id.clone(),
            image_dims: self.manifest.input_size,
            auto_resized,
            payload: EmbeddingPayload::Tensor(features),
        })
    }

    fn decode(&self, embedding: &ImageEmbedding, boxes: &[BoundingBox], points: &[PointPrompt]) -> Result<BinaryMask> {
        check_embedding(embedding, &self.id)?;
        let EmbeddingPayload::Tensor(features) = &embedding.payload else {
            return Err(Error::backend("decode", "foreign embedding payload"));
        };
        let caps = self.manifest.capabilities;
        if !boxes.is_empty() && !caps.box_prompts {
            return Err(Error::backend("decode", "model does not accept box prompts"));
        }
        if !points.is_empty() && !caps.point_prompts {
            return Err(Error::backend("decode", "model does not accept point prompts"));
        }
        let (w, h) = self.manifest.input_size;
        let logits = self
            .decoder
            .run(&[("embedding", features.clone()), ("prompt", self.prompt_raster(boxes, points))])
            .map_err(|e| e.at_stage("decode"))?
            .remove(0);
        let [_, _, lh, lw] = logits.dims;
        let logits =
            if (lw, lh) == (w, h) { logits } else { resize_nearest(&logits, [logits.dims[0], logits.dims[1], h, w]) };
        let t = self.manifest.mask_threshold;
        Ok(BinaryMask::from_fn(w, h, |x, y| logits.at([0, 0, y, x]) > t))
    }
}

/// Learned kernel regressor: a graph mapping a `1×1×H×W` map raster to a
/// scalar kernel size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectorManifest {
    pub graph: PathBuf,
    pub input_size: (usize, usize),
}

pub struct LearnedSelector {
    path: PathBuf,
    manifest: SelectorManifest,
    graph: Graph,
    candidates: KernelCandidates,
}

impl LearnedSelector {
    pub fn load(path: impl AsRef<Path>, candidates: KernelCandidates) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        let manifest: SelectorManifest = serde_json::from_str(&text)?;
        if manifest.input_size.0 == 0 || manifest.input_size.1 == 0 {
            return Err(Error::Config("selector input size must be non-zero".into()));
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let graph = Graph::load(resolve(base, &manifest.graph))?;
        Ok(Self { path: path.to_path_buf(), manifest, graph, candidates })
    }

    /// Raw regressor output for `map`.
    pub fn predict(&self, map: &BinaryMask) -> Result<f64> {
        let (w, h) = self.manifest.input_size;
        let m = map.resize(w, h)?;
        let x = Tensor4::from_fn([1, 1, h, w], |[_, _, y, x]| m.get(x, y) as u8 as f64);
        let name = self.graph.inputs().first().map_or("map", String::as_str);
        let out = self.graph.run(&[(name, x)]).map_err(|e| e.at_stage("kernel-selection"))?.remove(0);
        let v = *out.data.first().ok_or_else(|| Error::backend("kernel-selection", "selector produced no output"))?;
        if !v.is_finite() {
            return Err(Error::backend("kernel-selection", "selector output is not finite"));
        }
        Ok(v)
    }
}

impl KernelSelector for LearnedSelector {
    fn mode(&self) -> KernelMode {
        KernelMode::Learned(self.path.clone())
    }

    fn candidates(&self) -> &KernelCandidates {
        &self.candidates
    }

    fn select(&self, request: SelectionRequest<'_>) -> Result<KernelChoice> {
        let v = self.predict(request.map)?;
        Ok(KernelChoice::plain(self.candidates.nearest(v)))
    }
}
