//! Command-line interface for the anomaly detection toolkit.
//!
//! Exit codes: 0 success, 2 configuration/usage error, 3 file or I/O error,
//! 4 numeric failure. Every command that writes outputs also writes a
//! `.manifest` file (flat `key=value`) next to its primary output.

use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use uadkit::config::FlatConfig;
use uadkit::error::UadError;
use uadkit::manifest::RunManifest;
use uadkit::model::VaeModel;
use uadkit::phantom::{generate_phantom, PhantomSpec};
use uadkit::pipeline::{
    aggregate, calibrate_threshold, evaluate_split, prepare_case, segment_map, threshold_grid,
    CalibrationCase, InferenceMode,
};
use uadkit::train::{train, TrainConfig};
use uadkit::verify::{model_suite, primitive_suite};
use uadkit::volume::Volume;

const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(
    name = "uadkit",
    version,
    about = "Unsupervised anomaly detection in volumetric images with VAEs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset of .uadv volumes.
    Synth(SynthArgs),
    /// Train a VAE from a flat key=value config file.
    Train(TrainArgs),
    /// Pick the segmentation threshold by exhaustive search on a labeled split.
    Calibrate(CalibrateArgs),
    /// Segment a single volume at a fixed threshold.
    Segment(SegmentArgs),
    /// Evaluate a model over a labeled test set and write a per-case report.
    Eval(EvalArgs),
    /// Run the gradient verification suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Number of healthy volumes.
    #[arg(long, default_value_t = 20)]
    healthy: usize,
    /// Number of lesioned volumes (with ground-truth masks).
    #[arg(long, default_value_t = 20)]
    lesioned: usize,
    /// Volume shape as DxHxW.
    #[arg(long, default_value = "64x64x64")]
    shape: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Flat key=value training config; see `TrainConfig` keys.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct InferenceArgs {
    /// Reconstruct through a sampled latent with this seed instead of the
    /// posterior mean.
    #[arg(long)]
    sampled: Option<u64>,
}

impl InferenceArgs {
    fn mode(&self) -> InferenceMode {
        match self.sampled {
            None => InferenceMode::Mean,
            Some(seed) => InferenceMode::Sampled(seed),
        }
    }

    fn describe(&self) -> String {
        match self.sampled {
            None => "mean".to_string(),
            Some(seed) => format!("sampled:{seed}"),
        }
    }
}

#[derive(Args)]
struct CalibrateArgs {
    /// Trained model checkpoint (.uadm).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of labeled .uadv volumes to calibrate on.
    #[arg(long)]
    dataset: PathBuf,
    /// Output file for the chosen threshold (flat key=value).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    inference: InferenceArgs,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input volume (.uadv).
    #[arg(long)]
    input: PathBuf,
    /// Binarization threshold for the anomaly map.
    #[arg(long)]
    threshold: f64,
    /// Output segmentation volume (.uadv; voxels are 0/1).
    #[arg(long)]
    out: PathBuf,
    /// Also write a PGM panel (input|reconstruction|map|mask) of one slice.
    #[arg(long)]
    panel: Option<PathBuf>,
    /// Axial slice index for the panel (default: central slice).
    #[arg(long)]
    slice: Option<usize>,
    #[command(flatten)]
    inference: InferenceArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of labeled .uadv volumes to evaluate.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    threshold: f64,
    /// Output CSV report path.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    inference: InferenceArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sampled parameter coordinates per tensor in the whole-model checks.
    #[arg(long, default_value_t = 4)]
    coords: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Segment(args) => cmd_segment(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn exit_code_for(err: &UadError) -> u8 {
    match err {
        // An unreadable config file is an I/O failure; only its content is a
        // configuration problem.
        UadError::Config(uadkit::error::ConfigError::Io { .. }) => EXIT_IO,
        UadError::Config(_) | UadError::Usage(_) => EXIT_CONFIG,
        UadError::Format(_) | UadError::Io { .. } => EXIT_IO,
        UadError::Tensor(_) | UadError::Numeric(_) => EXIT_NUMERIC,
    }
}

fn parse_shape(text: &str) -> Result<[usize; 3], UadError> {
    let parts: Vec<usize> = text
        .split('x')
        .map(|p| p.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|e| UadError::Usage(format!("bad shape `{text}`: {e}")))?;
    match parts.as_slice() {
        [d, h, w] => Ok([*d, *h, *w]),
        _ => Err(UadError::Usage(format!(
            "shape must have three extents DxHxW, got `{text}`"
        ))),
    }
}

fn create_dir(path: &Path) -> Result<(), UadError> {
    std::fs::create_dir_all(path).map_err(|source| UadError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn cmd_synth(args: SynthArgs) -> Result<ExitCode, UadError> {
    let shape = parse_shape(&args.shape)?;
    let spec = PhantomSpec {
        shape,
        seed: args.seed,
        ..PhantomSpec::default()
    };
    spec.validate()?;
    create_dir(&args.out)?;
    let mut manifest = RunManifest::new("synth");
    manifest.set("seed", args.seed);
    manifest.set("shape", &args.shape);
    manifest.set("healthy", args.healthy);
    manifest.set("lesioned", args.lesioned);
    manifest.set("out", args.out.display());
    let mut written = 0usize;
    for (lesioned, count) in [(false, args.healthy), (true, args.lesioned)] {
        for index in 0..count as u64 {
            let v = generate_phantom(&spec, lesioned, index)?;
            v.write(&args.out.join(format!("{}.uadv", v.id)))?;
            written += 1;
        }
    }
    manifest.set("volumes_written", written);
    manifest.finish(&args.out.join("synth.manifest"))?;
    println!("wrote {written} volumes to {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode, UadError> {
    let flat = FlatConfig::load(&args.config)?;
    let config = TrainConfig::from_flat(&flat)?;
    let outcome = train(&config)?;
    let last = outcome
        .log
        .last()
        .expect("training ran at least one iteration");
    let final_diag = outcome.collapse.last().expect("at least one epoch");
    println!(
        "trained {} iterations; final loss {:.6} (raw recon {:.6}, kl {:.6})",
        outcome.log.len(),
        last.components.total,
        last.components.raw_recon,
        last.components.kl
    );
    println!(
        "latent activity: {}/{} units active (per-unit KL >= {})",
        final_diag.active_units(),
        final_diag.per_unit_kl.len(),
        uadkit::train::ACTIVITY_THRESHOLD
    );
    if let Some(checkpoint) = &config.checkpoint_path {
        let mut manifest = RunManifest::new("train");
        for (k, v) in flat.pairs() {
            manifest.set(&format!("config.{k}"), v);
        }
        manifest.set("iterations", outcome.log.len());
        manifest.set("final_total", last.components.total);
        manifest.set("final_raw_recon", last.components.raw_recon);
        manifest.set("final_kl", last.components.kl);
        manifest.set("active_units", final_diag.active_units());
        manifest.set("checkpoint", checkpoint.display());
        if let Some(log) = &config.log_path {
            manifest.set("log", log.display());
        }
        manifest.finish(&checkpoint.with_extension("manifest"))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn load_labeled(dir: &Path) -> Result<Vec<Volume>, UadError> {
    let volumes = uadkit::train::load_volumes(dir)?;
    let labeled: Vec<Volume> = volumes
        .into_iter()
        .filter(|v| v.lesion_mask.is_some())
        .collect();
    if labeled.is_empty() {
        return Err(UadError::Usage(format!(
            "no volumes with ground-truth lesion masks in {}",
            dir.display()
        )));
    }
    Ok(labeled)
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<ExitCode, UadError> {
    let model = VaeModel::load(&args.checkpoint)?;
    let volumes = load_labeled(&args.dataset)?;
    let mode = args.inference.mode();
    let mut cases = Vec::new();
    for v in &volumes {
        let prepared = prepare_case(&model, v, mode)?;
        if let Some(case) = CalibrationCase::from_prepared(&prepared) {
            cases.push(case);
        }
    }
    let calibration = calibrate_threshold(&cases)?;
    let mut pairs: Vec<(String, String)> = vec![
        ("threshold".to_string(), format!("{}", calibration.chosen())),
        (
            "mean_dice".to_string(),
            format!("{}", calibration.mean_dice[calibration.chosen_index]),
        ),
    ];
    for (tau, dice) in calibration.candidates.iter().zip(&calibration.mean_dice) {
        pairs.push((format!("dice_at_{tau:.4}"), format!("{dice}")));
    }
    std::fs::write(&args.out, uadkit::config::to_flat_string(&pairs)).map_err(|source| {
        UadError::Io {
            path: args.out.clone(),
            source,
        }
    })?;
    let mut manifest = RunManifest::new("calibrate");
    manifest.set("checkpoint", args.checkpoint.display());
    manifest.set("dataset", args.dataset.display());
    manifest.set("cases", cases.len());
    manifest.set("inference", args.inference.describe());
    manifest.set("candidates", threshold_grid().len());
    manifest.set("threshold", calibration.chosen());
    manifest.set("out", args.out.display());
    manifest.finish(&args.out.with_extension("manifest"))?;
    println!(
        "calibrated threshold {} (mean Dice {:.4} over {} cases)",
        calibration.chosen(),
        calibration.mean_dice[calibration.chosen_index],
        cases.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_segment(args: SegmentArgs) -> Result<ExitCode, UadError> {
    let model = VaeModel::load(&args.checkpoint)?;
    let volume = Volume::read(&args.input)?;
    let mode = args.inference.mode();
    let case = prepare_case(&model, &volume, mode)?;
    let seg = segment_map(&case.map, &case.volume.brain_mask, args.threshold);
    let mut out = Volume::new(
        seg.shape,
        seg.mask.iter().map(|&b| b as u8 as f32).collect(),
        case.volume.brain_mask.clone(),
    );
    out.id = format!("{}_seg", case.volume.id);
    out.metadata = format!(
        "segmentation threshold={} inference={} source={}",
        args.threshold,
        args.inference.describe(),
        args.input.display()
    );
    out.write(&args.out)?;
    if let Some(panel_path) = &args.panel {
        let z = args.slice.unwrap_or(seg.shape[0] / 2);
        if z >= seg.shape[0] {
            return Err(UadError::Usage(format!(
                "slice {z} out of range for depth {}",
                seg.shape[0]
            )));
        }
        uadkit::pipeline::write_panel_pgm(panel_path, &case, &seg, z)?;
    }
    let mut manifest = RunManifest::new("segment");
    manifest.set("checkpoint", args.checkpoint.display());
    manifest.set("input", args.input.display());
    manifest.set("threshold", args.threshold);
    manifest.set("inference", args.inference.describe());
    manifest.set(
        "predicted_voxels",
        seg.mask.iter().filter(|&&b| b).count(),
    );
    manifest.set("out", args.out.display());
    manifest.finish(&args.out.with_extension("manifest"))?;
    println!(
        "segmented {}: {} voxels above {} after post-processing",
        volume.id,
        seg.mask.iter().filter(|&&b| b).count(),
        args.threshold
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode, UadError> {
    let model = VaeModel::load(&args.checkpoint)?;
    let volumes = load_labeled(&args.dataset)?;
    let mode = args.inference.mode();
    let (reports, _) = evaluate_split(&model, &volumes, args.threshold, mode)?;
    uadkit::pipeline::write_report(&args.out, &reports)?;
    let agg = aggregate(&reports);
    println!(
        "evaluated {} cases: Dice {:.3} +/- {:.3}, Spe {:.3}, Sen {:.3}, MAE {:.4}",
        agg.cases, agg.mean_dice, agg.std_dice, agg.mean_specificity, agg.mean_sensitivity, agg.mean_mae
    );
    let mut manifest = RunManifest::new("eval");
    manifest.set("checkpoint", args.checkpoint.display());
    manifest.set("dataset", args.dataset.display());
    manifest.set("threshold", args.threshold);
    manifest.set("inference", args.inference.describe());
    manifest.set("cases", agg.cases);
    manifest.set("mean_dice", agg.mean_dice);
    manifest.set("std_dice", agg.std_dice);
    manifest.set("mean_specificity", agg.mean_specificity);
    manifest.set("mean_sensitivity", agg.mean_sensitivity);
    manifest.set("mean_mae", agg.mean_mae);
    manifest.set("out", args.out.display());
    manifest.finish(&args.out.with_extension("manifest"))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<ExitCode, UadError> {
    let primitives = primitive_suite(args.seed);
    let models = model_suite(args.seed, args.coords);
    let mut all_passed = true;
    for (label, report) in [("primitive", &primitives), ("model", &models)] {
        for e in &report.entries {
            let ok = e.passed(report.tol);
            all_passed &= ok;
            println!(
                "{} {label} {}: max rel error {:.3e} over {} coords (tol {:.0e})",
                if ok { "PASS" } else { "FAIL" },
                e.name,
                e.max_rel_error,
                e.coords_checked,
                report.tol
            );
        }
    }
    if all_passed {
        println!("all gradient checks passed");
        Ok(ExitCode::SUCCESS)
    } else {
        Err(UadError::Numeric(
            "gradient verification failed; see report above".into(),
        ))
    }
}
