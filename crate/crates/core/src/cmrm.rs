//! Crack mask refinement.
//!
//! Given a crop, its boxes and an initial mask `M`, the crop is segmented
//! again to get `M'`. Pixels in `M ∖ M'` are doubtful and seed negative
//! prompts; pixels in `M ∩ M'` are confirmed and seed positive prompts. Each
//! map is eroded with its own kernel, regions larger than the area threshold
//! are sampled for candidate points, a few spread-out prompts are drawn per
//! map, and the crop is decoded once more with boxes plus points. Without any
//! prompt the input mask is returned unchanged.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{EncodeView, ImageEmbedding, SegmentationBackend};
use crate::imgproc::{
    erode, find_contours, make_elliptical_kernel, mask_difference, mask_intersection, BinaryMask, BoundingBox, Image,
};
use crate::kernel::{KernelChoice, KernelMode, KernelSelector, ScoreReference, SelectionRequest};
use crate::prompts::{extract_region_points, select_prompts, PointPrompt, PromptLabel, DEFAULT_SEGMENTS};
use crate::{Error, Result};

pub use crate::kernel::auto_kernel_size;

pub const DEFAULT_AREA_THRESHOLD: usize = 50;
pub const DEFAULT_EXPAND: f64 = 0.2;
pub const DEFAULT_POINTS_PER_MAP: usize = 2;

const DIFF_STREAM: u64 = 0;
const INTER_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinementConfig {
    /// Prompts drawn per map (1–3); twice this many prompts at most.
    pub points_per_map: usize,
    /// Regions must be strictly larger than this many pixels.
    pub area_threshold: usize,
    pub n_segments: usize,
    pub expand_factor: f64,
    pub kernel_mode: KernelMode,
    pub fusion_alpha: f64,
    pub rng_seed: u64,
    pub erode_intersection: bool,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            points_per_map: DEFAULT_POINTS_PER_MAP,
            area_threshold: DEFAULT_AREA_THRESHOLD,
            n_segments: DEFAULT_SEGMENTS,
            expand_factor: DEFAULT_EXPAND,
            kernel_mode: KernelMode::Heuristic,
            fusion_alpha: crate::imgproc::DEFAULT_ALPHA,
            rng_seed: 0,
            erode_intersection: true,
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.points_per_map) {
            return Err(Error::Config(format!(
                "points per map must be 1, 2 or 3 (total 2, 4 or 6), got {}",
                self.points_per_map
            )));
        }
        if self.n_segments < 2 {
            return Err(Error::Config("n_segments must be at least 2".into()));
        }
        if !(self.expand_factor >= 0.0 && self.expand_factor.is_finite()) {
            return Err(Error::Config(format!("expand factor {} must be >= 0", self.expand_factor)));
        }
        if !(0.0..=1.0).contains(&self.fusion_alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.fusion_alpha)));
        }
        if let KernelMode::Fixed(k) = self.kernel_mode {
            if k % 2 == 0 || k < 3 {
                return Err(Error::Config(format!("fixed kernel {k} must be odd and >= 3")));
            }
        }
        Ok(())
    }
}

/// Kernel sizes used for the two maps; `intersection` is `None` when the
/// intersection map is not eroded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapKernels {
    pub difference: KernelChoice,
    pub intersection: Option<KernelChoice>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinementOutcome {
    pub refined: BinaryMask,
    /// Re-segmentation `M'` of the crop.
    pub initial: BinaryMask,
    /// `M ∖ M'` after erosion.
    pub diff_map: BinaryMask,
    /// `M ∩ M'` after erosion (when enabled).
    pub inter_map: BinaryMask,
    /// Prompts in crop coordinates, negatives first.
    pub prompts: Vec<PointPrompt>,
    pub kernels: MapKernels,
    pub fallback: bool,
}

/// One crop to refine.
pub struct CropInput<'a> {
    pub image: &'a Image,
    /// Identifies the crop's source for the backend.
    pub view: EncodeView,
    /// Boxes in crop coordinates.
    pub boxes: &'a [BoundingBox],
    /// Initial mask `M`, crop-sized.
    pub mask: &'a BinaryMask,
    /// Ground truth used by probing selectors; `M` is used without it.
    pub ground_truth: Option<&'a BinaryMask>,
}

/// Maps a crop pixel to the input raster by its center.
fn scale_coord(v: usize, from: usize, to: usize) -> usize {
    (((v as f64 + 0.5) * to as f64 / from as f64).floor() as usize).min(to - 1)
}

struct Session<'a> {
    backend: &'a dyn SegmentationBackend,
    cfg: &'a RefinementConfig,
    embedding: ImageEmbedding,
    crop_dims: (usize, usize),
    boxes_in: Vec<BoundingBox>,
    fallback_mask: &'a BinaryMask,
}

impl Session<'_> {
    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.rng_seed);
        rng.set_stream(stream);
        rng
    }

    /// Eroded map and its prompts for kernel `k` (`None`: no erosion).
    fn prompts_for(
        &self,
        map: &BinaryMask,
        k: Option<usize>,
        label: PromptLabel,
        stream: u64,
    ) -> Result<(BinaryMask, Vec<PointPrompt>)> {
        let eroded = match k {
            Some(k) => erode(map, &make_elliptical_kernel(k)?),
            None => map.clone(),
        };
        let mut candidates = Vec::new();
        for (i, region) in find_contours(&eroded).iter().enumerate() {
            if region.area() > self.cfg.area_threshold {
                candidates.push(extract_region_points(&eroded, &region.bbox(), self.cfg.n_segments, i)?);
            }
        }
        let prompts = select_prompts(&candidates, self.cfg.points_per_map, label, &mut self.rng(stream))?;
        Ok((eroded, prompts))
    }

    /// Final decode for a prompt set, crop-sized; `M` itself when empty.
    fn decode(&self, prompts: &[PointPrompt]) -> Result<BinaryMask> {
        if prompts.is_empty() {
            return Ok(self.fallback_mask.clone());
        }
        let (cw, ch) = self.crop_dims;
        let (iw, ih) = self.backend.input_size();
        let scaled: Vec<PointPrompt> = prompts
            .iter()
            .map(|p| PointPrompt::new(scale_coord(p.x, cw, iw), scale_coord(p.y, ch, ih), p.label))
            .collect();
        self.backend
            .decode(&self.embedding, &self.boxes_in, &scaled)
            .map_err(|e| e.at_stage("cmrm/decode"))?
            .resize(cw, ch)
    }

    fn choose(
        &self,
        selector: &dyn KernelSelector,
        map: &BinaryMask,
        reference: (&BinaryMask, ScoreReference),
        mut probe: impl FnMut(&BinaryMask, usize) -> Result<BinaryMask>,
    ) -> Result<KernelChoice> {
        let mut request = SelectionRequest::new(map);
        if selector.needs_probe() {
            request.probe = Some(&mut probe);
            request.reference = Some(reference);
        }
        auto_kernel_size(request, selector)
    }
}

/// Refines `input.mask` with prompts synthesized from the re-segmentation.
pub fn refine(
    backend: &dyn SegmentationBackend,
    input: &CropInput<'_>,
    cfg: &RefinementConfig,
    selector: &dyn KernelSelector,
) -> Result<RefinementOutcome> {
    cfg.validate()?;
    let crop_dims = input.image.dims();
    if input.mask.dims() != crop_dims {
        return Err(Error::DimensionMismatch { left: input.mask.dims(), right: crop_dims });
    }
    if let Some(gt) = input.ground_truth {
        if gt.dims() != crop_dims {
            return Err(Error::DimensionMismatch { left: gt.dims(), right: crop_dims });
        }
    }
    if let Some(b) = input.boxes.iter().find(|b| b.is_empty() || !b.fits(crop_dims.0, crop_dims.1)) {
        return Err(Error::InvalidArgument(format!("box {b:?} outside crop {crop_dims:?}")));
    }
    let input_dims = backend.input_size();
    let embedding = backend.encode(input.image, &input.view).map_err(|e| e.at_stage("cmrm/encode"))?;
    let boxes_in: Vec<BoundingBox> = input.boxes.iter().map(|b| b.rescale(crop_dims, input_dims)).collect();
    let session = Session { backend, cfg, embedding, crop_dims, boxes_in, fallback_mask: input.mask };
    let m_prime = backend
        .decode(&session.embedding, &session.boxes_in, &[])
        .map_err(|e| e.at_stage("cmrm/decode"))?
        .resize(crop_dims.0, crop_dims.1)?;

    let diff = mask_difference(input.mask, &m_prime)?;
    let inter = mask_intersection(input.mask, &m_prime)?;
    let reference = match input.ground_truth {
        Some(gt) => (gt, ScoreReference::GroundTruth),
        None => (input.mask, ScoreReference::InputMask),
    };

    // difference map, probed with the intersection branch left out
    let diff_choice = session.choose(selector, &diff, reference, |m, k| {
        let (_, p) = session.prompts_for(m, Some(k), PromptLabel::Negative, DIFF_STREAM)?;
        session.decode(&p)
    })?;
    let (diff_map, negatives) =
        session.prompts_for(&diff, Some(diff_choice.kernel), PromptLabel::Negative, DIFF_STREAM)?;

    // intersection map, probed with the chosen negatives fixed
    let (inter_choice, (inter_map, positives)) = if cfg.erode_intersection {
        let choice = session.choose(selector, &inter, reference, |m, k| {
            let (_, p) = session.prompts_for(m, Some(k), PromptLabel::Positive, INTER_STREAM)?;
            session.decode(&[negatives.as_slice(), &p].concat())
        })?;
        let r = session.prompts_for(&inter, Some(choice.kernel), PromptLabel::Positive, INTER_STREAM)?;
        (Some(choice), r)
    } else {
        (None, session.prompts_for(&inter, None, PromptLabel::Positive, INTER_STREAM)?)
    };

    let prompts = [negatives, positives].concat();
    let fallback = prompts.is_empty();
    let refined = session.decode(&prompts)?;
    Ok(RefinementOutcome {
        refined,
        initial: m_prime,
        diff_map,
        inter_map,
        prompts,
        kernels: MapKernels { difference: diff_choice, intersection: inter_choice },
        fallback,
    })
}
