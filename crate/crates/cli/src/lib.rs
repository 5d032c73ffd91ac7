//! Subcommands of the `stitchforge` binary, callable in-process.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};
use stitchforge::checkpoint::load_checkpoint;
use stitchforge::dataset::{load_corpus, read_dataset, synthesize_dataset, write_dataset, SynthesisConfig};
use stitchforge::deformation_net::{warp_pair, DeformationNet};
use stitchforge::evaluation::{evaluate_model, overlap_rate, EvalReport};
use stitchforge::homography_net::{infer_homography, HomographyNet};
use stitchforge::training::{train_deformation, train_homography, RunOptions, Stage, TrainConfig};
use stitchforge::{CanvasSpec, CornerOffsets, ImagePlane};

/// Synthesis parameters saved next to a generated manifest.
pub const SYNTHESIS_FILE: &str = "synthesis.json";

#[derive(Debug, Parser)]
#[command(name = "stitchforge", version, about = "Learned two-stage image stitching")]
pub struct Cli {
    /// Flat TOML config file (synthesis keys for `synth`, training keys for `train`).
    #[arg(long, global = true, env = "STITCHFORGE_CONFIG")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic quadruple dataset from a folder of images.
    Synth(SynthArgs),
    /// Train the homography or deformation stage.
    Train(TrainArgs),
    /// Stitch two images with trained checkpoints.
    Stitch(StitchArgs),
    /// Score a homography checkpoint on a dataset.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthMode {
    /// Translation plus per-vertex perturbation.
    Stitched,
    /// Per-vertex perturbation only.
    Warped,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    pub corpus_dir: PathBuf,
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, value_enum, default_value_t = SynthMode::Stitched)]
    pub mode: SynthMode,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Homography,
    Deformation,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(value_enum)]
    pub stage: StageArg,
    pub dataset_dir: PathBuf,
    /// Directory receiving `<stage>.ckpt` and `<stage>.metrics.jsonl`.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Train with this many pyramid levels.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=3))]
    pub ablate_pyramid: Option<u64>,
    /// Feed concatenated features to the regression heads instead of correlation volumes.
    #[arg(long)]
    pub no_correlation: bool,
    #[arg(long)]
    pub no_edge_branch: bool,
    /// Frozen homography checkpoint aligning the deformation stage's inputs.
    #[arg(long)]
    pub homography: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct StitchArgs {
    pub ref_path: PathBuf,
    pub tgt_path: PathBuf,
    pub homography_ckpt: PathBuf,
    pub deformation_ckpt: PathBuf,
    pub out_path: PathBuf,
    /// Inputs are downscaled (aspect kept) so neither side exceeds this.
    #[arg(long, default_value_t = 512)]
    pub max_side: usize,
    /// Also write the warped inputs and predicted edges next to the output.
    #[arg(long)]
    pub debug: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    pub dataset_dir: PathBuf,
    pub ckpt: PathBuf,
    pub report_path: PathBuf,
    /// Print the percentile-split table.
    #[arg(long)]
    pub splits: bool,
    /// Write an SVG of mean error against overlap rate.
    #[arg(long)]
    pub overlap_curve: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub buckets: usize,
}

pub fn run(cli: Cli) -> Result<()> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Synth(a) => {
            let s = cmd_synth(&a, config)?;
            println!("{}", s.render());
        }
        Command::Train(a) => {
            let s = cmd_train(&a, config)?;
            println!(
                "trained {} steps ({} skipped), final loss {}; checkpoint {}",
                s.steps,
                s.skipped,
                s.final_loss.map_or("n/a".into(), |v| format!("{v:.6}")),
                s.checkpoint.display()
            );
        }
        Command::Stitch(a) => {
            let s = cmd_stitch(&a)?;
            println!(
                "stitched {}x{} canvas from {}x{} inputs into {}",
                s.canvas.width,
                s.canvas.height,
                s.input_size.0,
                s.input_size.1,
                a.out_path.display()
            );
        }
        Command::Eval(a) => {
            let r = cmd_eval(&a)?;
            if a.splits {
                print!("{}", r.render_table());
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSummary {
    pub count: usize,
    pub manifest: PathBuf,
    /// Smallest and largest offset along u, then v.
    pub offset_bounds: Option<[(f64, f64); 2]>,
    /// Counts over ten equal overlap-rate bins.
    pub overlap_histogram: [usize; 10],
}

impl SynthSummary {
    pub fn render(&self) -> String {
        let mut s = format!("{} records -> {}\n", self.count, self.manifest.display());
        if let Some([u, v]) = self.offset_bounds {
            s += &format!("offset u in [{:.2}, {:.2}], v in [{:.2}, {:.2}]\n", u.0, u.1, v.0, v.1);
        }
        s += "overlap rate histogram:\n";
        for (k, c) in self.overlap_histogram.iter().enumerate() {
            s += &format!("  {:.1}-{:.1}: {c}\n", k as f64 / 10.0, (k + 1) as f64 / 10.0);
        }
        s
    }
}

fn read_synthesis_config(path: Option<&Path>) -> Result<SynthesisConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(SynthesisConfig::default()),
    }
}

pub fn cmd_synth(args: &SynthArgs, config: Option<&Path>) -> Result<SynthSummary> {
    let mut cfg = read_synthesis_config(config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.mode == SynthMode::Warped {
        cfg = cfg.warped();
    }
    cfg.validate()?;
    let corpus = load_corpus(&args.corpus_dir).with_context(|| format!("loading corpus {}", args.corpus_dir.display()))?;
    if corpus.is_empty() {
        bail!("corpus {} contains no images", args.corpus_dir.display());
    }
    let records = synthesize_dataset(&corpus, &cfg, args.count)?;
    fs::create_dir_all(&args.out_dir)?;
    let manifest = write_dataset(&records, &args.out_dir)?;
    fs::write(args.out_dir.join(SYNTHESIS_FILE), serde_json::to_vec_pretty(&cfg)?)?;
    let written = read_dataset(&args.out_dir)?;
    if written.records().len() != records.len() {
        bail!("manifest holds {} records, expected {}", written.records().len(), records.len());
    }

    let mut bounds: Option<[(f64, f64); 2]> = None;
    let mut hist = [0usize; 10];
    for q in &records {
        for [u, v] in q.offsets.0 {
            let b = bounds.get_or_insert([(u, u), (v, v)]);
            b[0] = (b[0].0.min(u), b[0].1.max(u));
            b[1] = (b[1].0.min(v), b[1].1.max(v));
        }
        let (w, h) = (q.reference.width() as f64, q.reference.height() as f64);
        let rate = overlap_rate(&q.offsets.displaced(w, h), w, h);
        hist[((rate * 10.0) as usize).min(9)] += 1;
    }
    Ok(SynthSummary { count: records.len(), manifest, offset_bounds: bounds, overlap_histogram: hist })
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub steps: usize,
    pub skipped: usize,
    pub final_loss: Option<f64>,
}

/// Training configuration after applying the config file and flags.
pub fn train_config(args: &TrainArgs, config: Option<&Path>) -> Result<TrainConfig> {
    let mut cfg = match config {
        Some(p) => TrainConfig::from_toml_file(p)?,
        None => TrainConfig::default(),
    };
    cfg.stage = match args.stage {
        StageArg::Homography => Stage::Homography,
        StageArg::Deformation => Stage::Deformation,
    };
    if let Some(n) = args.ablate_pyramid {
        cfg.pyramid_levels = n as usize;
    }
    if args.no_correlation {
        cfg.use_correlation = false;
    }
    if args.no_edge_branch {
        cfg.use_edge_branch = false;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(s) = args.max_steps {
        cfg.max_steps = Some(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(args: &TrainArgs, config: Option<&Path>) -> Result<TrainSummary> {
    let cfg = train_config(args, config)?;
    let data = read_dataset(&args.dataset_dir).with_context(|| format!("opening dataset {}", args.dataset_dir.display()))?;
    let synthesis = fs::read(args.dataset_dir.join(SYNTHESIS_FILE))
        .ok()
        .and_then(|b| serde_json::from_slice::<SynthesisConfig>(&b).ok());
    fs::create_dir_all(&args.out)?;
    let name = match cfg.stage {
        Stage::Homography => "homography",
        Stage::Deformation => "deformation",
    };
    let checkpoint = args.out.join(format!("{name}.ckpt"));
    let metrics = args.out.join(format!("{name}.metrics.jsonl"));
    let resume = args
        .resume
        .as_deref()
        .map(load_checkpoint)
        .transpose()
        .context("loading the checkpoint to resume")?;
    let opts = RunOptions { checkpoint: Some(checkpoint.clone()), metrics: Some(metrics.clone()), resume, synthesis };
    info!("training the {name} stage on {} records", data.records().len());
    let (steps, skipped, final_loss) = match cfg.stage {
        Stage::Homography => {
            let t = train_homography(&data, &cfg, &opts)?;
            (t.log.len(), t.skipped, t.final_loss())
        }
        Stage::Deformation => {
            let hnet = args
                .homography
                .as_deref()
                .map(|p| -> Result<HomographyNet<f32>> { Ok(HomographyNet::from_checkpoint(&load_checkpoint(p)?)?) })
                .transpose()
                .context("loading the homography checkpoint")?;
            let t = train_deformation(&data, &cfg, hnet.as_ref(), &opts)?;
            (t.log.len(), t.skipped, t.final_loss())
        }
    };
    load_checkpoint(&checkpoint).with_context(|| format!("validating {}", checkpoint.display()))?;
    Ok(TrainSummary { checkpoint, metrics, steps, skipped, final_loss })
}

#[derive(Debug, Clone)]
pub struct StitchSummary {
    /// Size the networks saw, after the max-side limit.
    pub input_size: (usize, usize),
    pub offsets: CornerOffsets,
    pub canvas: CanvasSpec,
    /// Correlation cells allocated by the homography network.
    pub correlation_cells: u64,
}

/// Downscales so neither side exceeds `max_side`, keeping the aspect ratio.
pub fn limit_size(img: &ImagePlane, max_side: usize) -> ImagePlane {
    let (w, h) = (img.width(), img.height());
    let longest = w.max(h);
    if longest <= max_side {
        return img.clone();
    }
    let s = max_side as f64 / longest as f64;
    let nw = ((w as f64 * s).round() as usize).clamp(1, max_side);
    let nh = ((h as f64 * s).round() as usize).clamp(1, max_side);
    img.resize(nw, nh)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("stitched");
    path.with_file_name(format!("{stem}_{suffix}.png"))
}

pub fn cmd_stitch(args: &StitchArgs) -> Result<StitchSummary> {
    if args.max_side < 32 {
        bail!("--max-side must be at least 32");
    }
    let reference = ImagePlane::load(&args.ref_path).with_context(|| format!("reading {}", args.ref_path.display()))?;
    let target = ImagePlane::load(&args.tgt_path).with_context(|| format!("reading {}", args.tgt_path.display()))?;
    if (reference.width(), reference.height()) != (target.width(), target.height()) {
        bail!(
            "inputs must share a size, got {}x{} and {}x{}",
            reference.width(),
            reference.height(),
            target.width(),
            target.height()
        );
    }
    let reference = limit_size(&reference, args.max_side);
    let target = limit_size(&target, args.max_side);
    let hnet = HomographyNet::<f32>::from_checkpoint(&load_checkpoint(&args.homography_ckpt)?)?;
    let dnet = DeformationNet::<f32>::from_checkpoint(&load_checkpoint(&args.deformation_ckpt)?)?;

    let inf = infer_homography(&reference, &target, &hnet)?;
    let (w, h) = (reference.width(), reference.height());
    let canvas = CanvasSpec::enclosing(w, h, &inf.offsets.displaced(w as f64, h as f64));
    let inputs = warp_pair(&reference, &target, &inf.homography, &canvas)?;
    let out = dnet.stitch(&inputs)?;
    out.image.save(&args.out_path)?;
    if args.debug {
        inputs.warped_reference.save(sibling(&args.out_path, "ref_warped"))?;
        inputs.warped_target.save(sibling(&args.out_path, "tgt_warped"))?;
        if let Some(e) = &out.edges {
            e.save(sibling(&args.out_path, "edges"))?;
        }
    }
    ImagePlane::load(&args.out_path).with_context(|| format!("validating {}", args.out_path.display()))?;
    Ok(StitchSummary { input_size: (w, h), offsets: inf.offsets, canvas, correlation_cells: inf.correlation_cells })
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let data = read_dataset(&args.dataset_dir).with_context(|| format!("opening dataset {}", args.dataset_dir.display()))?;
    let net = HomographyNet::<f32>::from_checkpoint(&load_checkpoint(&args.ckpt)?)?;
    let buckets = if args.overlap_curve.is_some() { args.buckets.max(1) } else { args.buckets };
    let report = evaluate_model(&net, &data, buckets)?;
    report.write_json(&args.report_path)?;
    if let Some(p) = &args.overlap_curve {
        fs::write(p, report.overlap_curve_svg())?;
    }
    EvalReport::read_json(&args.report_path).with_context(|| format!("validating {}", args.report_path.display()))?;
    Ok(report)
}
