//! Segmentation and detection backends.
//!
//! A [`SegmentationBackend`] splits work the way promptable segmenters do:
//! [`encode`](SegmentationBackend::encode) computes a reusable
//! [`ImageEmbedding`] once per image, and
//! [`decode`](SegmentationBackend::decode) turns that embedding plus box and
//! point prompts into a mask at the backend's input size. Any number of
//! decodes may share one embedding.

mod detector;
pub mod graph;
mod neural;
mod synthetic;

use serde::{Deserialize, Serialize};

use crate::convlora::Tensor4;
use crate::imgproc::{BinaryMask, BoundingBox, Image};
use crate::prompts::PointPrompt;
use crate::Result;

pub use detector::{BoxDetector, Detection, DetectorManifest, GtBoxDetector, NeuralDetector};
pub use neural::{LearnedSelector, ModelManifest, NeuralBackend, Normalization, SelectorManifest};
pub use synthetic::{
    corruption_family, Blob, BlobKind, FamilyParams, SyntheticFixture, SyntheticOracle, SyntheticPass,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub box_prompts: bool,
    pub point_prompts: bool,
}

/// Whether decodes may run concurrently on one backend instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Concurrency {
    Concurrent,
    Exclusive,
}

/// Where an encoded image came from: a window of a named source raster.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodeView {
    pub source_id: String,
    pub source_dims: (usize, usize),
    pub window: BoundingBox,
}

impl EncodeView {
    /// View covering all of `image`.
    pub fn whole(source_id: impl Into<String>, image: &Image) -> Self {
        Self {
            source_id: source_id.into(),
            source_dims: image.dims(),
            window: BoundingBox::full(image.width(), image.height()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum EmbeddingPayload {
    /// The synthetic oracle only needs to know what it is looking at.
    Synthetic {
        fixture: String,
        view: EncodeView,
        pass: SyntheticPass,
    },
    Tensor(Tensor4),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEmbedding {
    pub backend_id: String,
    /// Dimensions of the image the embedding was computed from (the
    /// backend's input size).
    pub image_dims: (usize, usize),
    /// Set when encode had to resize the image to the input size.
    pub auto_resized: bool,
    pub payload: EmbeddingPayload,
}

impl ImageEmbedding {
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("embedding serializes")
    }
}

pub trait SegmentationBackend: Send + Sync {
    fn id(&self) -> &str;

    /// `(width, height)` of the rasters the model consumes and produces.
    fn input_size(&self) -> (usize, usize);

    fn capabilities(&self) -> Capabilities;

    fn concurrency(&self) -> Concurrency;

    /// Encodes `image`, resizing it to [`input_size`](Self::input_size) if
    /// needed.
    fn encode(&self, image: &Image, view: &EncodeView) -> Result<ImageEmbedding>;

    /// Decodes a mask at the input size; boxes and points are in input
    /// coordinates.
    fn decode(&self, embedding: &ImageEmbedding, boxes: &[BoundingBox], points: &[PointPrompt]) -> Result<BinaryMask>;
}

pub(crate) fn resize_for_input(image: &Image, input: (usize, usize)) -> Result<(Image, bool)> {
    if image.dims() == input {
        Ok((image.clone(), false))
    } else {
        Ok((image.resize(input.0, input.1)?, true))
    }
}

pub(crate) fn check_embedding(embedding: &ImageEmbedding, backend_id: &str) -> Result<()> {
    if embedding.backend_id != backend_id {
        return Err(crate::Error::backend(
            "decode",
            format!("embedding produced by '{}' passed to '{backend_id}'", embedding.backend_id),
        ));
    }
    Ok(())
}
