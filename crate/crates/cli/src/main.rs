use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crackseg::backends::GtBoxDetector;
use crackseg::imgproc::{self, BoundingBox};
use crackseg::kernel::{write_training_csv, KernelCandidates, KernelMode};
use crackseg::metrics::Aggregation;
use crackseg::pipeline::{BackendSpec, DatasetIndex, DetectorSpec, Frame, Pipeline, PipelineConfig, ResizePolicy};
use crackseg::{Error, ErrorKind, Result};

#[derive(Parser)]
#[command(name = "crackseg", version, about = "Self-prompting crack segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment and refine a single image.
    Segment {
        #[command(flatten)]
        opts: PipelineOpts,
        #[arg(long)]
        image: PathBuf,
        /// Ground-truth mask; required by the gt detector, enables metrics.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Directory receiving <stem>.mask.png, <stem>.initial.png and <stem>.overlay.png.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run a dataset and write the JSON report.
    Evaluate {
        #[command(flatten)]
        opts: PipelineOpts,
        /// Dataset root (images/ + masks/, or an image dir with a sibling masks/).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Keep per-image stage timings in the report.
        #[arg(long)]
        timings: bool,
        /// Also write refined masks and overlays here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Refine a given mask; boxes default to the mask's components.
    Refine {
        #[command(flatten)]
        opts: PipelineOpts,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Box prompt as x,y,w,h; repeatable.
        #[arg(long = "box", value_name = "X,Y,W,H")]
        boxes: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export oracle kernel targets for every map as CSV.
    KernelOracle {
        #[command(flatten)]
        opts: PipelineOpts,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-stage throughput over a dataset.
    Bench {
        #[command(flatten)]
        opts: PipelineOpts,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long, default_value_t = 20)]
        frames: usize,
        /// Write the throughput JSON here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Args)]
struct PipelineOpts {
    /// synthetic:SPEC.json or neural:MANIFEST.json
    #[arg(long)]
    backend: String,
    /// gt or neural:MANIFEST.json
    #[arg(long, default_value = "gt")]
    detector: String,
    /// Total point prompts: 2, 4 or 6.
    #[arg(long, default_value_t = 4)]
    points: usize,
    #[arg(long, default_value_t = crackseg::cmrm::DEFAULT_AREA_THRESHOLD)]
    area_threshold: usize,
    /// fixed:K, oracle, heuristic or learned:SELECTOR.json
    #[arg(long, default_value = "heuristic")]
    kernel: String,
    #[arg(long, default_value_t = crackseg::cmrm::DEFAULT_EXPAND)]
    expand: f64,
    /// Overlay opacity.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// image-mean or pixel-pooled
    #[arg(long, default_value = "image-mean")]
    agg: String,
    /// Pad crops to the backend aspect ratio instead of stretching.
    #[arg(long)]
    letterbox: bool,
    /// Sample positives from the raw intersection map, without erosion.
    #[arg(long)]
    no_erode_intersection: bool,
}

impl PipelineOpts {
    fn config(&self) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::new(self.backend.parse::<BackendSpec>()?);
        cfg.detector = self.detector.parse::<DetectorSpec>()?;
        cfg.aggregation = self.agg.parse::<Aggregation>()?;
        cfg.set_points_total(self.points)?;
        let r = &mut cfg.refinement;
        r.area_threshold = self.area_threshold;
        r.kernel_mode = self.kernel.parse::<KernelMode>()?;
        r.expand_factor = self.expand;
        if let Some(a) = self.alpha {
            r.fusion_alpha = a;
        }
        r.rng_seed = self.seed;
        r.erode_intersection = !self.no_erode_intersection;
        if self.letterbox {
            cfg.resize = ResizePolicy::Letterbox;
        }
        Ok(cfg)
    }

    fn pipeline(&self) -> Result<Pipeline> {
        Pipeline::from_config(self.config()?)
    }
}

fn parse_box(s: &str) -> Result<BoundingBox> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("box '{s}' is not x,y,w,h")))?;
    match parts[..] {
        [x, y, w, h] if w > 0 && h > 0 => Ok(BoundingBox::new(x, y, w, h)),
        _ => Err(Error::Config(format!("box '{s}' is not x,y,w,h with a non-empty extent"))),
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    writeln!(io::stdout(), "{text}").map_err(|source| Error::Io { path: "<stdout>".into(), source })
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Segment { opts, image, gt, out_dir } => {
            let pipeline = opts.pipeline()?;
            let img = imgproc::load_image(&image)?;
            let gt = gt.map(imgproc::load_mask).transpose()?;
            let id = stem(&image);
            let out = pipeline.run_single(&Frame { id: &id, image: &img, ground_truth: gt.as_ref() })?;
            create_dir(&out_dir)?;
            imgproc::save_mask(&out.refined, out_dir.join(format!("{id}.mask.png")))?;
            imgproc::save_mask(&out.initial, out_dir.join(format!("{id}.initial.png")))?;
            imgproc::save_image(&out.overlay, out_dir.join(format!("{id}.overlay.png")))?;
            print_json(&out.row)
        }
        Command::Evaluate { opts, data, report, timings, out_dir } => {
            let mut cfg = opts.config()?;
            cfg.output_dir = out_dir;
            let pipeline = Pipeline::from_config(cfg)?;
            let index = DatasetIndex::discover(&data)?;
            let result = pipeline.evaluate(&index)?;
            result.write(&report, timings)?;
            if let Some(a) = &result.aggregates {
                log::info!(
                    "{} images, {} failed: Dice {:.4} -> {:.4}",
                    a.images,
                    a.failed,
                    a.initial.dice,
                    a.refined.dice
                );
            }
            Ok(())
        }
        Command::Refine { opts, image, mask, gt, boxes, out } => {
            let pipeline = opts.pipeline()?;
            let img = imgproc::load_image(&image)?;
            let m = imgproc::load_mask(&mask)?;
            let gt = gt.map(imgproc::load_mask).transpose()?;
            let boxes = if boxes.is_empty() {
                GtBoxDetector::boxes(&m).into_iter().map(|d| d.bbox).collect()
            } else {
                boxes.iter().map(|b| parse_box(b)).collect::<Result<Vec<_>>>()?
            };
            if boxes.is_empty() {
                return Err(Error::Data(format!("{}: mask is empty and no --box given", mask.display())));
            }
            let outcome = pipeline.refine_image(&stem(&image), &img, &m, &boxes, gt.as_ref())?;
            imgproc::save_mask(&outcome.refined, &out)?;
            print_json(&serde_json::json!({
                "prompts": outcome.prompts,
                "kernels": outcome.kernels,
                "fallback": outcome.fallback,
            }))
        }
        Command::KernelOracle { opts, data, out } => {
            let pipeline = opts.pipeline()?;
            let index = DatasetIndex::discover(&data)?;
            let rows = pipeline.kernel_targets(&index)?;
            write_training_csv(create_file(&out)?, &KernelCandidates::default(), &rows)?;
            log::info!("{} rows written to {}", rows.len(), out.display());
            Ok(())
        }
        Command::Bench { opts, data, warmup, frames, report } => {
            let pipeline = opts.pipeline()?;
            let index = DatasetIndex::discover(&data)?;
            let t = pipeline.bench(&index, warmup, frames)?;
            match report {
                Some(path) => {
                    let mut w = create_file(&path)?;
                    serde_json::to_writer_pretty(&mut w, &t)?;
                    w.flush().map_err(|source| Error::Io { path, source })
                }
                None => print_json(&t),
            }
        }
    }
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 1,
        ErrorKind::Data => 2,
        ErrorKind::Backend => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage errors count as configuration errors
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
