//! Acceptance criteria, one line each. Run with `cargo test --test acceptance`.

use std::collections::VecDeque;
use std::process::ExitCode;
use std::time::Instant;

use crackseg::backends::{corruption_family, EncodeView, FamilyParams, GtBoxDetector, SyntheticOracle, SyntheticPass};
use crackseg::cmrm::{refine, CropInput, RefinementConfig};
use crackseg::convlora::{param_budget, Conv2dParams, ConvLoraAdapter, LayerSpec, Tensor4};
use crackseg::imgproc::{
    erode, find_contours, make_elliptical_kernel, mask_difference, mask_intersection, mask_union, BinaryMask,
    BoundingBox,
};
use crackseg::kernel::{
    auto_kernel_size, huber_loss, KernelCandidates, KernelMode, KernelSelector, OracleSelector, ScoreReference,
    SelectionRequest, HUBER_DELTA,
};
use crackseg::metrics::{dice_focal_loss, dice_loss, evaluate_mask, focal_loss};
use crackseg::pipeline::{BackendSpec, DatasetIndex, Pipeline, PipelineConfig, STAGES};
use crackseg::prompts::{extract_region_points, find_centers, select_prompts, PointPrompt, PromptLabel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Check = fn() -> Outcome;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize, density: f64) -> BinaryMask {
    // blocky noise so regions have some size
    let cell = rng.random_range(1..=4);
    let cols = w.div_ceil(cell);
    let cells: Vec<bool> = (0..cols * h.div_ceil(cell)).map(|_| rng.random_bool(density)).collect();
    BinaryMask::from_fn(w, h, |x, y| cells[(y / cell) * cols + x / cell])
}

fn loss_numerics() -> Outcome {
    let f = focal_loss(&[0.5], &[1.0], 4.0).map_err(|e| e.to_string())?;
    ensure!((f - 0.0433217).abs() <= 1e-6, "focal(0.5, 1, 4) = {f}");
    let d = dice_loss(&[1.0, 0.0], &[1.0, 1.0]).map_err(|e| e.to_string())?;
    ensure!((d - 1.0 / 3.0).abs() <= 1e-6, "dice([1,0],[1,1]) = {d}");
    let below = huber_loss(0.0, HUBER_DELTA, HUBER_DELTA);
    let above_branch = HUBER_DELTA * HUBER_DELTA - 0.5 * HUBER_DELTA * HUBER_DELTA;
    ensure!(below == 0.045 && above_branch == 0.045, "huber at delta: {below} / {above_branch}");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let n = rng.random_range(1..40);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_bool(0.4) as u8 as f64).collect();
        let dice_only = dice_focal_loss(&p, &y, 1.0, 0.0, 4.0).unwrap();
        let focal_only = dice_focal_loss(&p, &y, 0.0, 1.0, 4.0).unwrap();
        ensure!(dice_only == dice_loss(&p, &y).unwrap(), "DiceFocal(1, 0) != Dice");
        ensure!(focal_only == focal_loss(&p, &y, 4.0).unwrap(), "DiceFocal(0, 1) != focal");
        ensure!(dice_focal_loss(&p, &y, 0.0, 0.0, 4.0).unwrap() == 0.0, "DiceFocal(0, 0) != 0");
    }
    Ok(format!("focal {f:.7}, dice {d:.7}, huber 0.045"))
}

fn convlora() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // zero-init identity
    let w0 = Tensor4::random_normal([12, 10, 3, 3], 1.0, &mut rng);
    let a = ConvLoraAdapter::new(w0.clone(), Some(vec![0.5; 12]), 4, Conv2dParams::same(3), &mut rng).unwrap();
    let x = Tensor4::random_normal([1, 10, 7, 6], 1.0, &mut rng);
    ensure!(a.merge() == w0, "zero-init merge changed W0");
    ensure!(a.forward(&x).unwrap() == a.base_forward(&x).unwrap(), "zero-init forward differs from base");

    let mut worst: f64 = 0.0;
    for rank in [2, 4, 8, 16] {
        for _ in 0..20 {
            let cin = rng.random_range(rank + 1..rank + 8);
            let cout = rng.random_range(rank + 1..rank + 8);
            let k = [1, 3, 5][rng.random_range(0..3)];
            let params = Conv2dParams { stride: rng.random_range(1..=2), padding: k / 2, groups: 1 };
            let w0 = Tensor4::random_normal([cout, cin, k, k], 0.5, &mut rng);
            let mut a = ConvLoraAdapter::new(w0, None, rank, params, &mut rng).unwrap();
            *a.up_mut() = Tensor4::random_normal([cout, rank, 1, 1], 0.5, &mut rng);
            let x = Tensor4::random_normal([1, cin, 9, 8], 1.0, &mut rng);
            let rel = a.merged_forward(&x).unwrap().relative_error(&a.forward(&x).unwrap()).unwrap();
            worst = worst.max(rel);
        }
    }
    ensure!(worst <= 1e-5, "merge parity relative error {worst:e}");

    // finite differences on small fixtures
    let mut worst_grad: f64 = 0.0;
    for trial in 0..6 {
        let (cin, cout, rank, k) =
            [(1, 1, 1, 1), (2, 3, 1, 3), (3, 2, 2, 3), (2, 2, 1, 1), (3, 4, 2, 3), (1, 2, 1, 3)][trial];
        let params = Conv2dParams::same(k);
        let w0 = Tensor4::random_normal([cout, cin, k, k], 0.5, &mut rng);
        let w_x = Tensor4::random_normal([rank, cin, k, k], 0.5, &mut rng);
        let w_y = Tensor4::random_normal([cout, rank, 1, 1], 0.5, &mut rng);
        let a = ConvLoraAdapter::from_parts(w0, None, w_x, w_y, params).unwrap();
        let x = Tensor4::random_normal([1, cin, 4, 4], 1.0, &mut rng);
        let up = Tensor4::random_normal(a.forward(&x).unwrap().dims, 1.0, &mut rng);
        let loss = |a: &ConvLoraAdapter| -> f64 {
            let h = a.forward(&x).unwrap();
            h.data.iter().zip(&up.data).map(|(h, u)| h * u).sum()
        };
        let grads = a.backward(&x, &up).unwrap();
        let h = 1e-6;
        for which in 0..2 {
            let n = if which == 0 { a.down().len() } else { a.up().len() };
            for i in 0..n {
                let mut plus = a.clone();
                let mut minus = a.clone();
                if which == 0 {
                    plus.down_mut().data[i] += h;
                    minus.down_mut().data[i] -= h;
                } else {
                    plus.up_mut().data[i] += h;
                    minus.up_mut().data[i] -= h;
                }
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let an = if which == 0 { grads.w_x.data[i] } else { grads.w_y.data[i] };
                let rel = (fd - an).abs() / an.abs().max(1e-3);
                worst_grad = worst_grad.max(rel);
            }
        }
    }
    ensure!(worst_grad <= 1e-4, "gradient check relative error {worst_grad:e}");

    // four stages, frozen 3×3 mixer plus adapted 1×1 channel mixer each
    let layers: Vec<LayerSpec> = [64, 128, 256, 512]
        .iter()
        .flat_map(|&c| {
            [
                LayerSpec { c_in: c, c_out: c, kernel: 3, groups: 1, adapter_rank: None },
                LayerSpec { c_in: c, c_out: c, kernel: 1, groups: 1, adapter_rank: Some(8) },
            ]
        })
        .collect();
    let ratio = param_budget(&layers).ratio();
    ensure!(ratio < 0.02, "trainable ratio {ratio}");
    Ok(format!("merge rel err {worst:.1e}, grad rel err {worst_grad:.1e}, trainable {:.3}%", ratio * 100.0))
}

fn point_extraction() -> Outcome {
    ensure!(find_centers(&[0, 1, 1, 1, 0, 0, 1, 0]) == vec![2, 6], "find_centers trace");
    ensure!(find_centers(&[1, 1, 0, 1, 1, 1, 1]) == vec![1, 5], "find_centers trace");
    let map = BinaryMask::from_fn(20, 10, |x, y| (5..13).contains(&x) && (3..5).contains(&y));
    let set = extract_region_points(&map, &BoundingBox::new(5, 3, 8, 2), 4, 0).unwrap();
    ensure!(set.points == vec![(7, 4), (9, 4), (11, 4)], "wide region trace {:?}", set.points);
    let map = BinaryMask::from_fn(10, 20, |x, y| (3..5).contains(&x) && (5..13).contains(&y));
    let set = extract_region_points(&map, &BoundingBox::new(3, 5, 2, 8), 4, 0).unwrap();
    ensure!(set.points == vec![(4, 7), (4, 9), (4, 11)], "tall region trace {:?}", set.points);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut total = 0;
    for _ in 0..1000 {
        let (w, h) = (rng.random_range(4..48), rng.random_range(4..48));
        let density = rng.random_range(0.2..0.8);
        let m = random_mask(&mut rng, w, h, density);
        for (i, region) in find_contours(&m).iter().enumerate() {
            // points must fall on this region's own pixels
            let mut only = BinaryMask::new(w, h);
            region.paint(&mut only, true);
            let set = extract_region_points(&only, &region.bbox(), 4, i).unwrap();
            ensure!(set.points.len() <= 3, "{} points from one region", set.points.len());
            for &(x, y) in &set.points {
                ensure!(only.get(x, y), "point ({x}, {y}) off the region");
            }
            total += set.points.len();
        }
    }
    Ok(format!("{total} points checked"))
}

/// Refinement probe over the synthetic oracle: erode `map` with `k`, sample
/// prompts, decode. Mirrors the refinement steps with fixed extra prompts.
struct Probe<'a> {
    oracle: &'a SyntheticOracle,
    id: &'a str,
    dims: (usize, usize),
    boxes: &'a [BoundingBox],
    fallback: &'a BinaryMask,
    extra: Vec<PointPrompt>,
    label: PromptLabel,
    stream: u64,
}

impl Probe<'_> {
    fn prompts(&self, map: &BinaryMask, k: usize) -> Vec<PointPrompt> {
        let eroded = erode(map, &make_elliptical_kernel(k).unwrap());
        let sets: Vec<_> = find_contours(&eroded)
            .iter()
            .enumerate()
            .filter(|(_, r)| r.area() > 50)
            .map(|(i, r)| extract_region_points(&eroded, &r.bbox(), 4, i).unwrap())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        rng.set_stream(self.stream);
        select_prompts(&sets, 2, self.label, &mut rng).unwrap()
    }

    fn run(&self, map: &BinaryMask, k: usize) -> BinaryMask {
        let mut points = self.extra.clone();
        points.extend(self.prompts(map, k));
        if points.is_empty() {
            return self.fallback.clone();
        }
        let full = BoundingBox::full(self.dims.0, self.dims.1);
        self.oracle.render(self.id, &full, SyntheticPass::Fine, self.dims, self.boxes, &points).unwrap()
    }
}

fn iou_by_counting(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x & y) as usize;
        union += (x | y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn kernel_oracle() -> Outcome {
    let fixtures = corruption_family(50, 4, &FamilyParams::default());
    let oracle = SyntheticOracle::new(fixtures.clone(), (128, 128), 4).unwrap();
    let selector = OracleSelector::default();
    let candidates = KernelCandidates::default();
    let mut checked = 0;
    for f in &fixtures {
        let dims = f.truth.dims();
        let full = BoundingBox::full(dims.0, dims.1);
        let boxes: Vec<BoundingBox> = GtBoxDetector::boxes(&f.truth).iter().map(|d| d.bbox).collect();
        let m = oracle.render(&f.id, &full, SyntheticPass::Coarse, dims, &boxes, &[]).unwrap();
        let m_prime = oracle.render(&f.id, &full, SyntheticPass::Fine, dims, &boxes, &[]).unwrap();
        let maps = [
            (mask_difference(&m, &m_prime).unwrap(), PromptLabel::Negative, 0),
            (mask_intersection(&m, &m_prime).unwrap(), PromptLabel::Positive, 1),
        ];
        for (map, label, stream) in maps {
            let probe = Probe {
                oracle: &oracle,
                id: &f.id,
                dims,
                boxes: &boxes,
                fallback: &m,
                extra: Vec::new(),
                label,
                stream,
            };
            let mut call = |mp: &BinaryMask, k: usize| Ok(probe.run(mp, k));
            let mut req = SelectionRequest::new(&map);
            req.probe = Some(&mut call);
            req.reference = Some((&f.truth, ScoreReference::GroundTruth));
            let k = auto_kernel_size(req, &selector).map_err(|e| e.to_string())?.kernel;
            ensure!(k % 2 == 1 && (3..=31).contains(&k), "kernel {k} out of range");
            if map.is_empty() {
                continue;
            }
            let chosen = iou_by_counting(&probe.run(&map, k), &f.truth);
            for &other in candidates.values() {
                let iou = iou_by_counting(&probe.run(&map, other), &f.truth);
                ensure!(chosen >= iou, "{}: k={k} IoU {chosen} < k={other} IoU {iou}", f.id);
            }
            checked += 1;
        }
    }
    ensure!(selector.mode() == KernelMode::Oracle, "mode tag");
    Ok(format!("{checked} maps re-scanned over {} candidates", candidates.len()))
}

fn cmrm_family() -> Outcome {
    let fixtures = corruption_family(120, 5, &FamilyParams::default());
    let oracle = SyntheticOracle::new(fixtures.clone(), (128, 128), 5).unwrap();
    let cfg = RefinementConfig { kernel_mode: KernelMode::Oracle, ..Default::default() };
    let selector = OracleSelector::default();
    let (mut not_worse, mut gain, mut fallbacks, mut exact_four) = (0, 0.0, 0, 0);
    for f in &fixtures {
        let dims = f.truth.dims();
        let boxes: Vec<BoundingBox> = GtBoxDetector::boxes(&f.truth).iter().map(|d| d.bbox).collect();
        let m =
            oracle.render(&f.id, &BoundingBox::full(dims.0, dims.1), SyntheticPass::Coarse, dims, &boxes, &[]).unwrap();
        let image = f.render_image(0);
        let input = CropInput {
            image: &image,
            view: EncodeView::whole(f.id.as_str(), &image),
            boxes: &boxes,
            mask: &m,
            ground_truth: Some(&f.truth),
        };
        let out = refine(&oracle, &input, &cfg, &selector).map_err(|e| e.to_string())?;
        let before = evaluate_mask(&m, &f.truth).unwrap().dice;
        let after = evaluate_mask(&out.refined, &f.truth).unwrap().dice;
        if after >= before {
            not_worse += 1;
        }
        gain += after - before;
        if out.fallback {
            fallbacks += 1;
            ensure!(out.refined == m, "{}: fallback mask differs from input", f.id);
        }
        let negatives = out.prompts.iter().filter(|p| p.label == PromptLabel::Negative).count();
        let positives = out.prompts.len() - negatives;
        ensure!(negatives <= 2 && positives <= 2, "{}: {negatives} negative / {positives} positive", f.id);
        if negatives == 2 && positives == 2 {
            exact_four += 1;
        }
        for p in &out.prompts {
            let src = if p.label == PromptLabel::Negative { &out.diff_map } else { &out.inter_map };
            ensure!(src.get(p.x, p.y), "{}: prompt off its map", f.id);
        }
    }
    let n = fixtures.len() as f64;
    let share = not_worse as f64 / n;
    let mean_gain = gain / n * 100.0;
    ensure!(share >= 0.9, "refined >= initial on only {:.1}% of fixtures", share * 100.0);
    ensure!(mean_gain >= 3.0, "mean Dice gain {mean_gain:.2} points");
    ensure!(exact_four > 0, "no fixture produced the {{0, 0, 1, 1}} label multiset");
    Ok(format!(
        "{not_worse}/{} not worse, mean gain {mean_gain:.2} Dice points, {exact_four} with labels {{0,0,1,1}}, {fallbacks} fallbacks",
        fixtures.len()
    ))
}

fn flood_fill_areas(m: &BinaryMask) -> Vec<usize> {
    let (w, h) = m.dims();
    let mut seen = vec![false; w * h];
    let mut areas = Vec::new();
    for start in 0..w * h {
        if seen[start] || m.data()[start] == 0 {
            continue;
        }
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        let mut area = 0;
        while let Some(i) = queue.pop_front() {
            area += 1;
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if !seen[j] && m.data()[j] == 1 {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        areas.push(area);
    }
    areas.sort_unstable();
    areas
}

fn morphology_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..200 {
        let (w, h) = (rng.random_range(8..40), rng.random_range(8..40));
        let density = rng.random_range(0.3..0.9);
        let m = random_mask(&mut rng, w, h, density);
        let mut previous = m.clone();
        for k in (3..=15).step_by(2) {
            let e = erode(&m, &make_elliptical_kernel(k).unwrap());
            ensure!(e.is_subset_of(&m), "erosion with k={k} not anti-extensive");
            ensure!(e.is_subset_of(&previous), "erosion not monotone at k={k}");
            previous = e;
        }
        let other = random_mask(&mut rng, w, h, density);
        let diff = mask_difference(&m, &other).unwrap();
        let inter = mask_intersection(&m, &other).unwrap();
        ensure!(mask_union(&diff, &inter).unwrap() == m, "diff ∪ inter != M");
        ensure!(mask_intersection(&diff, &inter).unwrap().is_empty(), "diff ∩ inter not empty");
        let r = evaluate_mask(&m, &other).unwrap();
        ensure!((r.dice - 2.0 * r.iou / (1.0 + r.iou)).abs() <= 1e-12, "dice/iou identity");
        let mut areas: Vec<usize> = find_contours(&m).iter().map(|r| r.area()).collect();
        areas.sort_unstable();
        ensure!(areas == flood_fill_areas(&m), "contour areas differ from flood fill");
    }
    Ok("200 masks".into())
}

fn pipeline_determinism() -> Outcome {
    let params = FamilyParams { margin: 0.25, ..Default::default() };
    let fixtures = corruption_family(6, 7, &params);
    // full frames are seen coarsely (96 < 128), crops finely
    let oracle = SyntheticOracle::new(fixtures, (96, 96), 7).unwrap().with_fine_density(1.0);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = oracle.write_dataset(dir.path()).map_err(|e| e.to_string())?;
    let mut cfg = PipelineConfig::new(BackendSpec::Synthetic(spec));
    cfg.refinement.kernel_mode = KernelMode::Oracle;
    cfg.refinement.rng_seed = 99;
    let index = DatasetIndex::discover(dir.path()).map_err(|e| e.to_string())?;
    let run = || -> Result<String, String> {
        let p = Pipeline::from_config(cfg.clone()).map_err(|e| e.to_string())?;
        p.evaluate(&index).and_then(|r| r.to_json(false)).map_err(|e| e.to_string())
    };
    let (a, b) = (run()?, run()?);
    ensure!(a == b, "reports differ between runs");
    let p = Pipeline::from_config(cfg.clone()).map_err(|e| e.to_string())?;
    ensure!(p.backend().input_size() == (96, 96), "input size");
    let t = p.bench(&index, 2, 12).map_err(|e| e.to_string())?;
    for s in STAGES {
        ensure!(t.stage_seconds.contains_key(s) && t.stage_fps.contains_key(s), "missing stage {s}");
    }
    ensure!(t.total_seconds > 0.0 && t.total_fps > 0.0, "missing total timing");
    Ok(format!("{} byte report identical; bench {:.1} FPS total", a.len(), t.total_fps))
}

fn main() -> ExitCode {
    let criteria: [(&str, Check); 7] = [
        ("loss numerics", loss_numerics),
        ("convlora parity, gradients and budget", convlora),
        ("point extraction", point_extraction),
        ("kernel oracle optimality", kernel_oracle),
        ("cmrm on the corruption family", cmrm_family),
        ("morphology and metric properties", morphology_metrics),
        ("pipeline determinism and bench stages", pipeline_determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.2}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name} ({secs:.2}s): {why}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
