//! File formats shared with the export tooling, driven end to end.

use std::path::Path;

use crackseg::backends::{EncodeView, NeuralBackend, SegmentationBackend};
use crackseg::convlora::{AdapterBundle, Conv2dParams, Tensor4};
use crackseg::imgproc::{BinaryMask, BoundingBox, Image};
use crackseg::pipeline::{BackendSpec, Frame, Pipeline, PipelineConfig};
use crackseg::prompts::{PointPrompt, PromptLabel};

/// Decoder logits are `2·box + 4·pos − 4·neg − 1`; the `box` weight comes
/// from the adapter update, the rest from the frozen weight.
fn write_model(dir: &Path) -> std::path::PathBuf {
    let bundle = AdapterBundle {
        rank: 1,
        params: Conv2dParams::default(),
        w0: Tensor4::new([2, 5, 1, 1], vec![0.0, 0.0, 1.0, 4.0, -4.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap(),
        bias: None,
        w_x: Tensor4::new([1, 5, 1, 1], vec![0.0, 0.0, 1.0, 0.0, 0.0]).unwrap(),
        w_y: Tensor4::new([2, 1, 1, 1], vec![1.0, 0.0]).unwrap(),
    };
    bundle.save(dir.join("adapter.json")).unwrap();
    std::fs::write(
        dir.join("encoder.json"),
        r#"{
          "inputs": ["image"], "outputs": ["features"],
          "tensors": {"w": {"dims": [2, 3, 1, 1], "data": [0, 0, 0, 0, 0, 0]}},
          "nodes": [{"op": "conv2d", "inputs": ["image"], "output": "features", "weight": "w"}]
        }"#,
    )
    .unwrap();
    std::fs::write(
        dir.join("decoder.json"),
        r#"{
          "inputs": ["embedding", "prompt"], "outputs": ["logits"],
          "tensors": {
            "mix": {"dims": [1, 2, 1, 1], "data": [1, 0]},
            "b": {"dims": [1], "data": [-1]}
          },
          "nodes": [
            {"op": "concat", "inputs": ["embedding", "prompt"], "output": "cat"},
            {"op": "conv2d", "inputs": ["cat"], "output": "h", "adapter": "adapter.json"},
            {"op": "conv2d", "inputs": ["h"], "output": "logits", "weight": "mix", "bias": "b"}
          ]
        }"#,
    )
    .unwrap();
    let manifest = dir.join("model.json");
    std::fs::write(
        &manifest,
        r#"{
          "input_size": [32, 32],
          "capabilities": {"box_prompts": true, "point_prompts": true},
          "point_radius": 1,
          "encoder": "encoder.json",
          "decoder": "decoder.json"
        }"#,
    )
    .unwrap();
    manifest
}

#[test]
fn adapter_merged_into_decoder() {
    let dir = tempfile::tempdir().unwrap();
    let backend = NeuralBackend::load(write_model(dir.path())).unwrap();
    let img = Image::filled(32, 32, 3, 128).unwrap();
    let emb = backend.encode(&img, &EncodeView::whole("x", &img)).unwrap();
    let bx = BoundingBox::new(4, 6, 20, 8);
    // the box weight of 2 only exists once the adapter update is merged
    assert_eq!(backend.decode(&emb, &[bx], &[]).unwrap(), BinaryMask::from_box(32, 32, &bx));
    let neg = PointPrompt::new(10, 10, PromptLabel::Negative);
    let pos = PointPrompt::new(28, 28, PromptLabel::Positive);
    let m = backend.decode(&emb, &[bx], &[neg, pos]).unwrap();
    assert!(!m.get(10, 10) && !m.get(11, 10));
    assert!(m.get(28, 28) && m.get(27, 28));
    assert!(m.get(5, 7));
}

#[test]
fn exported_model_runs_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_model(dir.path());
    let cfg = PipelineConfig::new(BackendSpec::Neural(manifest));
    let pipeline = Pipeline::from_config(cfg).unwrap();
    let img = Image::filled(64, 48, 3, 90).unwrap();
    let gt = BinaryMask::from_fn(64, 48, |x, y| (10..50).contains(&x) && (20..26).contains(&y));
    let frame = Frame { id: "frame", image: &img, ground_truth: Some(&gt) };
    let a = pipeline.run_single(&frame).unwrap();
    let b = pipeline.run_single(&frame).unwrap();
    assert_eq!(a.refined, b.refined);
    assert_eq!(a.refined.dims(), (64, 48));
    assert_eq!(a.row.boxes.len(), 1);
    assert!(a.row.refined.as_ref().unwrap().dice > 0.9);
}
