//! Deterministic stand-in for a promptable segmenter.
//!
//! A fixture holds a hidden truth mask and a list of elliptical corruption
//! blobs. Additive blobs paint false positives, removal blobs erase truth.
//! Every decode renders the fixture into the requested window:
//!
//! - without points the mask is `(truth ∪ add ∖ remove) ∩ boxes`;
//! - a negative point inside an additive blob's footprint drops that blob;
//! - a positive point on a truth pixel restores the whole 8-connected truth
//!   component containing it (removal blobs no longer apply there);
//! - points anywhere else change nothing.
//!
//! Blobs render at full size when the window is sampled coarsely (fewer
//! input pixels than source pixels, i.e. the downscaled full frame) and at
//! `refine_scale` of their size when sampled at or above `fine_density`
//! input pixels per source pixel (a zoomed-in crop). Point membership is
//! always tested against the full footprint.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    check_embedding, Capabilities, Concurrency, EmbeddingPayload, EncodeView, ImageEmbedding, SegmentationBackend,
};
use crate::imgproc::{self, BinaryMask, BoundingBox, Image};
use crate::prompts::{PointPrompt, PromptLabel};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlobKind {
    Add,
    Remove,
}

/// Filled ellipse in source-pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub kind: BlobKind,
    pub center: (f64, f64),
    pub radii: (f64, f64),
    /// Size factor applied in fine passes; 0 makes the blob vanish there.
    #[serde(default = "unit_scale")]
    pub refine_scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

impl Blob {
    pub fn covers(&self, x: usize, y: usize, scale: f64) -> bool {
        if scale <= 0.0 || self.radii.0 <= 0.0 || self.radii.1 <= 0.0 {
            return false;
        }
        let dx = (x as f64 - self.center.0) / (self.radii.0 * scale);
        let dy = (y as f64 - self.center.1) / (self.radii.1 * scale);
        dx * dx + dy * dy <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticFixture {
    pub id: String,
    pub truth: BinaryMask,
    pub blobs: Vec<Blob>,
}

impl SyntheticFixture {
    /// Gray image of the fixture: dark crack pixels on a lightly textured
    /// background.
    pub fn render_image(&self, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = self.truth.dims();
        let data = (0..w * h)
            .map(|i| {
                let noise: i16 = rng.random_range(-12..=12);
                let base: i16 = if self.truth.data()[i] == 1 { 55 } else { 170 };
                (base + noise) as u8
            })
            .collect();
        Image::new(w, h, 1, data).expect("fixture dims are non-zero")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticPass {
    Coarse,
    Fine,
}

#[derive(Deserialize)]
struct FixtureFile {
    #[serde(default)]
    id: Option<String>,
    truth: PathBuf,
    #[serde(default)]
    blobs: Vec<Blob>,
}

#[derive(Deserialize)]
struct SpecFile {
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    input_size: Option<(usize, usize)>,
    #[serde(default)]
    fine_density: Option<f64>,
    #[serde(default)]
    fixtures: Vec<FixtureFile>,
    #[serde(flatten)]
    single: Option<FixtureFile>,
}

/// Serialized form written by [`SyntheticOracle::write_dataset`].
#[derive(Serialize)]
struct SpecOut<'a> {
    seed: u64,
    input_size: (usize, usize),
    fine_density: f64,
    fixtures: Vec<FixtureOut<'a>>,
}

#[derive(Serialize)]
struct FixtureOut<'a> {
    id: &'a str,
    truth: String,
    blobs: &'a [Blob],
}

type LayerKey = (String, BoundingBox, SyntheticPass, (usize, usize));

struct Layers {
    truth: BinaryMask,
    labels: Vec<u32>,
    // full footprint per blob, used for point membership
    full: Vec<BinaryMask>,
    // footprint as rendered in this pass
    rendered: Vec<BinaryMask>,
}

const CACHE_LIMIT: usize = 256;

pub struct SyntheticOracle {
    id: String,
    seed: u64,
    input_size: (usize, usize),
    fine_density: f64,
    fixtures: BTreeMap<String, SyntheticFixture>,
    cache: Mutex<HashMap<LayerKey, Arc<Layers>>>,
}

impl SyntheticOracle {
    pub const DEFAULT_INPUT: (usize, usize) = (256, 256);

    pub fn new(fixtures: Vec<SyntheticFixture>, input_size: (usize, usize), seed: u64) -> Result<Self> {
        if input_size.0 == 0 || input_size.1 == 0 {
            return Err(Error::Config("synthetic input size must be non-zero".into()));
        }
        let mut map = BTreeMap::new();
        for f in fixtures {
            if map.insert(f.id.clone(), f).is_some() {
                return Err(Error::Config("duplicate synthetic fixture id".into()));
            }
        }
        Ok(Self {
            id: format!("synthetic:{seed}"),
            seed,
            input_size,
            fine_density: 1.0,
            fixtures: map,
            cache: Mutex::new(HashMap::new()),
        })
    }

    /// Input pixels per source pixel at or above which a pass counts as fine.
    pub fn with_fine_density(mut self, density: f64) -> Self {
        self.fine_density = density;
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn fixture(&self, id: &str) -> Option<&SyntheticFixture> {
        self.fixtures.get(id)
    }

    pub fn fixtures(&self) -> impl Iterator<Item = &SyntheticFixture> {
        self.fixtures.values()
    }

    /// Loads a JSON spec. Either a `fixtures` list or a single top-level
    /// fixture (`truth`, `blobs`); truth paths resolve against the spec's
    /// directory and fixture ids default to the truth file stem.
    pub fn from_spec_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        let spec: SpecFile = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut files = spec.fixtures;
        files.extend(spec.single);
        if files.is_empty() {
            return Err(Error::Config(format!("{}: no fixtures", path.display())));
        }
        let fixtures = files
            .into_iter()
            .map(|f| {
                let truth_path = base.join(&f.truth);
                let id = f.id.unwrap_or_else(|| {
                    truth_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
                });
                Ok(SyntheticFixture { id, truth: imgproc::load_mask(&truth_path)?, blobs: f.blobs })
            })
            .collect::<Result<Vec<_>>>()?;
        let oracle = Self::new(fixtures, spec.input_size.unwrap_or(Self::DEFAULT_INPUT), spec.seed)?;
        Ok(match spec.fine_density {
            Some(d) => oracle.with_fine_density(d),
            None => oracle,
        })
    }

    /// Writes `images/<id>.png`, `masks/<id>.png` and `spec.json` under `dir`,
    /// returning the spec path.
    pub fn write_dataset(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        let io_err = |p: &Path| {
            let p = p.to_path_buf();
            move |source| Error::Io { path: p, source }
        };
        for sub in ["images", "masks"] {
            let d = dir.join(sub);
            std::fs::create_dir_all(&d).map_err(io_err(&d))?;
        }
        let mut out = Vec::new();
        for (i, f) in self.fixtures.values().enumerate() {
            imgproc::save_image(
                &f.render_image(self.seed.wrapping_add(i as u64)),
                dir.join(format!("images/{}.png", f.id)),
            )?;
            imgproc::save_mask(&f.truth, dir.join(format!("masks/{}.png", f.id)))?;
            out.push(FixtureOut { id: &f.id, truth: format!("masks/{}.png", f.id), blobs: &f.blobs });
        }
        let spec =
            SpecOut { seed: self.seed, input_size: self.input_size, fine_density: self.fine_density, fixtures: out };
        let path = dir.join("spec.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&spec)?).map_err(io_err(&path))?;
        Ok(path)
    }

    fn lookup(&self, source_id: &str) -> Result<&SyntheticFixture> {
        if let Some(f) = self.fixtures.get(source_id) {
            return Ok(f);
        }
        if self.fixtures.len() == 1 {
            return Ok(self.fixtures.values().next().expect("one fixture"));
        }
        Err(Error::backend("encode", format!("no synthetic fixture for '{source_id}'")))
    }

    fn pass_for(&self, window: &BoundingBox, out: (usize, usize)) -> SyntheticPass {
        let density = (out.0 as f64 / window.w as f64).min(out.1 as f64 / window.h as f64);
        if density + 1e-9 >= self.fine_density {
            SyntheticPass::Fine
        } else {
            SyntheticPass::Coarse
        }
    }

    fn layers(
        &self,
        fixture: &SyntheticFixture,
        window: &BoundingBox,
        pass: SyntheticPass,
        out: (usize, usize),
    ) -> Result<Arc<Layers>> {
        let key = (fixture.id.clone(), *window, pass, out);
        if let Some(l) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(Arc::clone(l));
        }
        let (sw, sh) = fixture.truth.dims();
        // windows may run past the right / bottom edge (letterboxed crops);
        // pixels out there are background
        if window.is_empty() || window.x >= sw || window.y >= sh {
            return Err(Error::backend(
                "encode",
                format!("window {window:?} outside fixture '{}' ({sw}x{sh})", fixture.id),
            ));
        }
        let xs = imgproc::nearest_index_map(window.w, out.0);
        let ys = imgproc::nearest_index_map(window.h, out.1);
        let src = |u: usize, v: usize| (window.x + xs[u], window.y + ys[v]);
        let truth = BinaryMask::from_fn(out.0, out.1, |u, v| {
            let (x, y) = src(u, v);
            x < sw && y < sh && fixture.truth.get(x, y)
        });
        let (labels, _) = imgproc::label_map(&truth);
        let mut full = Vec::with_capacity(fixture.blobs.len());
        let mut rendered = Vec::with_capacity(fixture.blobs.len());
        for blob in &fixture.blobs {
            let f = BinaryMask::from_fn(out.0, out.1, |u, v| {
                let (x, y) = src(u, v);
                x < sw && y < sh && blob.covers(x, y, 1.0)
            });
            let r = match pass {
                SyntheticPass::Coarse => f.clone(),
                SyntheticPass::Fine => BinaryMask::from_fn(out.0, out.1, |u, v| {
                    let (x, y) = src(u, v);
                    x < sw && y < sh && blob.covers(x, y, blob.refine_scale)
                }),
            };
            full.push(f);
            rendered.push(r);
        }
        let layers = Arc::new(Layers { truth, labels, full, rendered });
        let mut cache = self.cache.lock().expect("cache lock");
        if cache.len() >= CACHE_LIMIT {
            cache.clear();
        }
        cache.insert(key, Arc::clone(&layers));
        Ok(layers)
    }

    /// Renders a fixture window at `out` size with the given prompts.
    pub fn render(
        &self,
        fixture_id: &str,
        window: &BoundingBox,
        pass: SyntheticPass,
        out: (usize, usize),
        boxes: &[BoundingBox],
        points: &[PointPrompt],
    ) -> Result<BinaryMask> {
        let fixture = self.lookup(fixture_id)?;
        let layers = self.layers(fixture, window, pass, out)?;
        let (w, h) = out;
        for p in points {
            if p.x >= w || p.y >= h {
                return Err(Error::backend("decode", format!("point ({}, {}) outside {w}x{h}", p.x, p.y)));
            }
        }
        let dropped: Vec<bool> = fixture
            .blobs
            .iter()
            .zip(&layers.full)
            .map(|(blob, full)| {
                blob.kind == BlobKind::Add
                    && points.iter().any(|p| p.label == PromptLabel::Negative && full.get(p.x, p.y))
            })
            .collect();
        let restored: HashSet<u32> = points
            .iter()
            .filter(|p| p.label == PromptLabel::Positive && layers.truth.get(p.x, p.y))
            .map(|p| layers.labels[p.y * w + p.x])
            .collect();
        let mut mask = BinaryMask::from_fn(w, h, |x, y| {
            let added = fixture
                .blobs
                .iter()
                .enumerate()
                .any(|(i, b)| b.kind == BlobKind::Add && !dropped[i] && layers.rendered[i].get(x, y));
            if added {
                return true;
            }
            if !layers.truth.get(x, y) {
                return false;
            }
            if restored.contains(&layers.labels[y * w + x]) {
                return true;
            }
            !fixture.blobs.iter().enumerate().any(|(i, b)| b.kind == BlobKind::Remove && layers.rendered[i].get(x, y))
        });
        if !boxes.is_empty() {
            let region = BinaryMask::from_fn(w, h, |x, y| boxes.iter().any(|b| b.contains(x, y)));
            mask = imgproc::mask_intersection(&mask, &region)?;
        }
        Ok(mask)
    }
}

impl SegmentationBackend for SyntheticOracle {
    fn id(&self) -> &str {
        &self.id
    }

    fn input_size(&self) -> (usize, usize) {
        self.input_size
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { box_prompts: true, point_prompts: true }
    }

    fn concurrency(&self) -> Concurrency {
        Concurrency::Concurrent
    }

    fn encode(&self, image: &Image, view: &EncodeView) -> Result<ImageEmbedding> {
        let fixture = self.lookup(&view.source_id)?;
        if fixture.truth.dims() != view.source_dims {
            return Err(Error::backend(
                "encode",
                format!(
                    "source dims {:?} do not match fixture '{}' {:?}",
                    view.source_dims,
                    fixture.id,
                    fixture.truth.dims()
                ),
            ));
        }
        let pass = self.pass_for(&view.window, self.input_size);
        Ok(ImageEmbedding {
            backend_id: self.id.clone(),
            image_dims: self.input_size,
            auto_resized: image.dims() != self.input_size,
            payload: EmbeddingPayload::Synthetic { fixture: fixture.id.clone(), view: view.clone(), pass },
        })
    }

    fn decode(&self, embedding: &ImageEmbedding, boxes: &[BoundingBox], points: &[PointPrompt]) -> Result<BinaryMask> {
        check_embedding(embedding, &self.id)?;
        let EmbeddingPayload::Synthetic { fixture, view, pass } = &embedding.payload else {
            return Err(Error::backend("decode", "foreign embedding payload"));
        };
        self.render(fixture, &view.window, *pass, embedding.image_dims, boxes, points)
    }
}

/// Shape parameters of the generated corruption fixtures.
#[derive(Clone, Debug, PartialEq)]
pub struct FamilyParams {
    pub size: (usize, usize),
    /// Fraction of each side kept free of crack endpoints.
    pub margin: f64,
    pub cracks: (usize, usize),
    pub thickness: (f64, f64),
    pub add_blobs: (usize, usize),
    pub remove_blobs: (usize, usize),
}

impl Default for FamilyParams {
    fn default() -> Self {
        Self {
            size: (128, 128),
            margin: 0.15,
            cracks: (1, 2),
            thickness: (6.0, 10.0),
            add_blobs: (1, 3),
            remove_blobs: (1, 2),
        }
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Segment endpoints and stroke thickness.
type Stroke = ((f64, f64), (f64, f64), f64);

fn random_crack(rng: &mut ChaCha8Rng, size: (usize, usize), margin: f64, thickness: f64) -> Vec<Stroke> {
    let (w, h) = (size.0 as f64, size.1 as f64);
    let (lo, hi) = (margin.max(0.0), (1.0 - margin).min(1.0));
    let horizontal = rng.random_bool(0.5);
    let steps = rng.random_range(3..=5);
    let mut pts = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        let t = lo + (hi - lo) * i as f64 / steps as f64;
        let j = lo + (hi - lo) * rng.random_range(0.1..0.9);
        pts.push(if horizontal { (t * w, j * h) } else { (j * w, t * h) });
    }
    // smooth the walk so consecutive control points stay close
    for i in 1..pts.len() {
        let prev = pts[i - 1];
        let cur = &mut pts[i];
        if horizontal {
            cur.1 = prev.1 + (cur.1 - prev.1) * 0.5;
        } else {
            cur.0 = prev.0 + (cur.0 - prev.0) * 0.5;
        }
    }
    pts.windows(2).map(|s| (s[0], s[1], thickness)).collect()
}

/// Generates `count` fixtures of thick crack polylines with additive blobs
/// beside the cracks (half vanish in fine passes, half persist at roughly
/// half size) and removal blobs cutting into them (persisting at 70–100 %).
pub fn corruption_family(count: usize, seed: u64, params: &FamilyParams) -> Vec<SyntheticFixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = params.size;
    (0..count)
        .map(|i| {
            let n_cracks = rng.random_range(params.cracks.0..=params.cracks.1);
            let mut segments = Vec::new();
            for _ in 0..n_cracks {
                let t = rng.random_range(params.thickness.0..=params.thickness.1);
                segments.extend(random_crack(&mut rng, params.size, params.margin, t));
            }
            let truth = BinaryMask::from_fn(w, h, |x, y| {
                let p = (x as f64, y as f64);
                segments.iter().any(|&(a, b, t)| segment_distance(p, a, b) <= t / 2.0)
            });
            let crack_pixels: Vec<(usize, usize)> = truth.ones().collect();
            let mut blobs = Vec::new();
            if !crack_pixels.is_empty() {
                for _ in 0..rng.random_range(params.add_blobs.0..=params.add_blobs.1) {
                    let (cx, cy) = crack_pixels[rng.random_range(0..crack_pixels.len())];
                    let r: (f64, f64) = (rng.random_range(7.0..14.0), rng.random_range(7.0..14.0));
                    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    let offset = r.0.max(r.1) + 4.0;
                    let center = (
                        (cx as f64 + angle.cos() * offset).clamp(0.0, (w - 1) as f64),
                        (cy as f64 + angle.sin() * offset).clamp(0.0, (h - 1) as f64),
                    );
                    let refine_scale = if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.4..0.6) };
                    blobs.push(Blob { kind: BlobKind::Add, center, radii: r, refine_scale });
                }
                for _ in 0..rng.random_range(params.remove_blobs.0..=params.remove_blobs.1) {
                    let (cx, cy) = crack_pixels[rng.random_range(0..crack_pixels.len())];
                    let r = rng.random_range(5.0..9.0);
                    blobs.push(Blob {
                        kind: BlobKind::Remove,
                        center: (cx as f64, cy as f64),
                        radii: (r, r),
                        refine_scale: rng.random_range(0.7..1.0),
                    });
                }
            }
            SyntheticFixture { id: format!("fixture_{i:04}"), truth, blobs }
        })
        .collect()
}
