//! Box detectors that seed the segmentation prompts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::graph::Graph;
use super::neural::{resolve, Normalization};
use crate::imgproc::{find_contours, BinaryMask, BoundingBox, Image};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub confidence: f64,
}

pub trait BoxDetector: Send + Sync {
    /// Boxes in `image` coordinates, each inside the image.
    fn detect(&self, image: &Image) -> Result<Vec<Detection>>;
}

/// Tight rectangles around each 8-connected component of a ground-truth
/// mask, confidence 1.
pub struct GtBoxDetector {
    mask: BinaryMask,
}

impl GtBoxDetector {
    pub fn new(mask: BinaryMask) -> Self {
        Self { mask }
    }

    pub fn boxes(mask: &BinaryMask) -> Vec<Detection> {
        find_contours(mask).iter().map(|r| Detection { bbox: r.bbox(), confidence: 1.0 }).collect()
    }
}

impl BoxDetector for GtBoxDetector {
    fn detect(&self, image: &Image) -> Result<Vec<Detection>> {
        if image.dims() != self.mask.dims() {
            return Err(Error::DimensionMismatch { left: image.dims(), right: self.mask.dims() });
        }
        Ok(Self::boxes(&self.mask))
    }
}

fn half() -> f64 {
    0.5
}

/// Heatmap detector: the graph maps a normalized `1×3×H×W` image to
/// `1×1×h×w` objectness logits; each connected component of
/// `sigmoid(logit) ≥ threshold` becomes a box scored by its peak probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorManifest {
    pub input_size: (usize, usize),
    pub graph: PathBuf,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default = "half")]
    pub threshold: f64,
}

pub struct NeuralDetector {
    manifest: DetectorManifest,
    graph: Graph,
}

impl NeuralDetector {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        let manifest: DetectorManifest = serde_json::from_str(&text)?;
        if manifest.input_size.0 == 0 || manifest.input_size.1 == 0 {
            return Err(Error::Config("detector input size must be non-zero".into()));
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let graph = Graph::load(resolve(base, &manifest.graph))?;
        Ok(Self { manifest, graph })
    }
}

impl BoxDetector for NeuralDetector {
    fn detect(&self, image: &Image) -> Result<Vec<Detection>> {
        let (iw, ih) = self.manifest.input_size;
        let input = if image.dims() == (iw, ih) { image.clone() } else { image.resize(iw, ih)? };
        let x = self.manifest.normalization.tensor(&input)?;
        let name = self.graph.inputs().first().map_or("image", String::as_str);
        let heat = self.graph.run(&[(name, x)]).map_err(|e| e.at_stage("detect"))?.remove(0);
        let [_, _, hh, hw] = heat.dims;
        let prob: Vec<f64> = heat.data[..hh * hw].iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        let fg = BinaryMask::from_fn(hw, hh, |x, y| prob[y * hw + x] >= self.manifest.threshold);
        Ok(find_contours(&fg)
            .iter()
            .map(|r| Detection {
                bbox: r.bbox().rescale((hw, hh), image.dims()),
                confidence: r.pixels().iter().map(|&(x, y)| prob[y * hw + x]).fold(0.0, f64::max),
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::super::graph::{GraphFile, GraphTensor, Node, Op};
    use super::*;

    #[test]
    fn gt_boxes_are_tight_per_component() {
        let m =
            BinaryMask::from_fn(20, 20, |x, y| (x == 2 && y < 5) || ((10..13).contains(&x) && (8..10).contains(&y)));
        let d = GtBoxDetector::boxes(&m);
        assert_eq!(d.len(), 2);
        assert_eq!(d[0].bbox, BoundingBox::new(2, 0, 1, 5));
        assert_eq!(d[1].bbox, BoundingBox::new(10, 8, 3, 2));
        assert!(d.iter().all(|d| d.confidence == 1.0));
        assert!(GtBoxDetector::boxes(&BinaryMask::new(4, 4)).is_empty());
        let det = GtBoxDetector::new(m);
        assert!(det.detect(&Image::filled(5, 5, 1, 0).unwrap()).is_err());
    }

    #[test]
    fn heatmap_detector_boxes_dark_pixels() {
        // logit = -20·v + 5 on the normalized first channel: dark pixels fire
        let dir = tempfile::tempdir().unwrap();
        let g = GraphFile {
            inputs: vec!["image".into()],
            outputs: vec!["heat".into()],
            tensors: BTreeMap::from([
                ("w".to_string(), GraphTensor { dims: vec![1, 3, 1, 1], data: vec![-20.0, 0.0, 0.0] }),
                ("b".to_string(), GraphTensor { dims: vec![1], data: vec![5.0] }),
            ]),
            nodes: vec![Node {
                op: Op::Conv2d {
                    weight: Some("w".into()),
                    bias: Some("b".into()),
                    adapter: None,
                    stride: 1,
                    padding: 0,
                    groups: 1,
                },
                inputs: vec!["image".into()],
                output: "heat".into(),
            }],
        };
        std::fs::write(dir.path().join("g.json"), serde_json::to_vec(&g).unwrap()).unwrap();
        let path = dir.path().join("det.json");
        std::fs::write(&path, r#"{"input_size": [16, 16], "graph": "g.json"}"#).unwrap();
        let det = NeuralDetector::load(&path).unwrap();
        let img = Image::new(
            32,
            32,
            1,
            (0..32 * 32)
                .map(|i| {
                    let (x, y) = (i % 32, i / 32);
                    if (8..16).contains(&x) && (4..12).contains(&y) {
                        0
                    } else {
                        255
                    }
                })
                .collect(),
        )
        .unwrap();
        let d = det.detect(&img).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].bbox, BoundingBox::new(8, 4, 8, 8));
        assert!(d[0].confidence > 0.99 && d[0].confidence <= 1.0);
    }
}
