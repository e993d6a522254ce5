//! Command-line surface for the temporal cardiac segmentation pipeline.
//!
//! Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.
//! Every command writes a reproducibility manifest (`run_manifest.json`)
//! into its output directory: effective config hash, seed, and versions.

use clap::{Args, Parser, Subcommand};
use sscardiac::metrics::{records_from_csv, records_to_csv, summarize, MetricRecord};
use sscardiac::phantom::{corpus_spec, export_study, generate};
use sscardiac::pipeline::{
    infer_bidirectional, infer_single, load_study, load_studies, run_all_interval_schemes,
    train_motion, train_segmentation, Direction, MotionNet, Precision, SegNet, TrainConfig,
};
use sscardiac::volume::{load_mask, save_mask};
use sscardiac::Error;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "sscardiac",
    version,
    about = "Temporal cardiac segmentation: motion estimation, motion-guided segmentation, phantom generation and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic 4D phantom studies with analytic ground truth
    PhantomGen(PhantomGenArgs),
    /// Train the motion estimator on adjacent phase pairs (unsupervised)
    TrainMotion(TrainArgs),
    /// Train the segmentation network on a frozen motion checkpoint
    TrainSeg(TrainSegArgs),
    /// Segment study phases (single-directional or bi-directional fusion)
    Infer(InferArgs),
    /// Score predicted masks against a study's ground truth
    Eval(EvalArgs),
    /// Run the D0/D1/D3/D5 time-interval ablation on one study
    AblateIntervals(AblateArgs),
    /// Aggregate a metrics CSV into a JSON summary
    Report(ReportArgs),
}

#[derive(Args)]
struct PhantomGenArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of studies to generate (study_00, study_01, ...)
    #[arg(long, default_value_t = 1)]
    studies: usize,
    /// Cubic volume extent in voxels
    #[arg(long, default_value_t = 48)]
    dims: usize,
    #[arg(long, default_value_t = 10)]
    time_points: usize,
    /// Vary cardiac geometry per study (deterministic in the seed)
    #[arg(long, default_value_t = false)]
    jitter: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON training configuration
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Override the config's seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's precision (f32 or f64)
    #[arg(long)]
    precision: Option<String>,
}

#[derive(Args)]
struct TrainSegArgs {
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    motion_ckpt: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    motion_ckpt: PathBuf,
    #[arg(long)]
    seg_ckpt: PathBuf,
    /// Study directory or manifest path
    #[arg(long)]
    study: PathBuf,
    /// Phase index; omit to segment every phase
    #[arg(long)]
    phase: Option<usize>,
    /// both (bi-directional fusion), past, or future
    #[arg(long, default_value = "both")]
    direction: String,
    #[arg(long)]
    out_dir: PathBuf,
    /// Optional config override (defaults to the one in the checkpoint)
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Study with ground-truth masks
    #[arg(long)]
    study: PathBuf,
    /// Directory holding predicted masks named t{k}.mask.json
    #[arg(long)]
    pred_dir: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    motion_ckpt: PathBuf,
    #[arg(long)]
    seg_ckpt: PathBuf,
    #[arg(long)]
    study: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Metrics CSV produced by eval/ablate
    #[arg(long)]
    metrics: PathBuf,
    /// Output JSON path; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage problems (including unknown subcommands) exit 1; the
            // --help/--version pseudo-errors exit 0.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn write_run_manifest(
    out_dir: &Path,
    command: &str,
    config_json: &serde_json::Value,
    seed: u64,
) -> Result<(), Error> {
    std::fs::create_dir_all(out_dir).map_err(|source| Error::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let canonical = serde_json::to_string(config_json).expect("config serializes");
    let manifest = serde_json::json!({
        "command": command,
        "config_hash": format!("{:016x}", fnv1a(canonical.as_bytes())),
        "seed": seed,
        "crate_version": env!("CARGO_PKG_VERSION"),
        "format": "sscardiac-run-manifest-v1",
    });
    let path = out_dir.join("run_manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap())
        .map_err(|source| Error::Io { path, source })
}

fn apply_overrides(cfg: &mut TrainConfig, args: &TrainArgs) -> Result<(), Error> {
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(p) = &args.precision {
        cfg.precision = match p.as_str() {
            "f32" => Precision::F32,
            "f64" => Precision::F64,
            other => {
                return Err(Error::Invalid(format!(
                    "precision must be f32 or f64, got {other}"
                )))
            }
        };
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::PhantomGen(args) => phantom_gen(args),
        Command::TrainMotion(args) => cmd_train_motion(args),
        Command::TrainSeg(args) => cmd_train_seg(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Eval(args) => cmd_eval(args),
        Command::AblateIntervals(args) => cmd_ablate(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn phantom_gen(args: PhantomGenArgs) -> Result<(), Error> {
    if args.studies == 0 {
        return Err(Error::Invalid("need at least one study".into()));
    }
    let dims = [args.dims, args.dims, args.dims];
    for i in 0..args.studies {
        let spec = corpus_spec(dims, args.time_points, args.seed, i, args.jitter);
        let seq = generate(&spec)?;
        let dir = args.out_dir.join(format!("study_{i:02}"));
        let manifest = export_study(&seq, &dir)?;
        println!(
            "study_{i:02}: {} phases, cavity {}..{} voxels ({})",
            manifest.volumes.len(),
            seq.cavity_volumes().iter().min().unwrap(),
            seq.cavity_volumes().iter().max().unwrap(),
            manifest.study_id
        );
    }
    let config = serde_json::json!({
        "dims": dims, "time_points": args.time_points,
        "studies": args.studies, "jitter": args.jitter,
    });
    write_run_manifest(&args.out_dir, "phantom-gen", &config, args.seed)
}

fn cmd_train_motion(args: TrainArgs) -> Result<(), Error> {
    let mut cfg = TrainConfig::load(&args.config)?;
    apply_overrides(&mut cfg, &args)?;
    let studies = load_studies(&cfg)?;
    write_run_manifest(
        &args.out_dir,
        "train-motion",
        &serde_json::to_value(&cfg).unwrap(),
        cfg.seed,
    )?;
    let outcome = train_motion(&cfg, &studies, &args.out_dir)?;
    println!(
        "motion training done: best epoch {} (loss {:.6}), checkpoint {}",
        outcome.best_epoch,
        outcome.best_loss,
        outcome.checkpoint.display()
    );
    Ok(())
}

fn cmd_train_seg(args: TrainSegArgs) -> Result<(), Error> {
    let mut cfg = TrainConfig::load(&args.train.config)?;
    apply_overrides(&mut cfg, &args.train)?;
    let (motion, _) = MotionNet::load(&args.motion_ckpt)?;
    let studies = load_studies(&cfg)?;
    write_run_manifest(
        &args.train.out_dir,
        "train-seg",
        &serde_json::to_value(&cfg).unwrap(),
        cfg.seed,
    )?;
    let outcome = train_segmentation(&cfg, &motion, &studies, &args.train.out_dir)?;
    println!(
        "segmentation training done: best epoch {} (loss {:.6}), checkpoint {}",
        outcome.best_epoch,
        outcome.best_loss,
        outcome.checkpoint.display()
    );
    Ok(())
}

fn effective_config(
    override_path: &Option<PathBuf>,
    from_ckpt: TrainConfig,
) -> Result<TrainConfig, Error> {
    match override_path {
        Some(p) => TrainConfig::load(p),
        None => Ok(from_ckpt),
    }
}

fn cmd_infer(args: InferArgs) -> Result<(), Error> {
    let (motion, _) = MotionNet::load(&args.motion_ckpt)?;
    let (seg, ckpt_cfg) = SegNet::load(&args.seg_ckpt)?;
    let cfg = effective_config(&args.config, ckpt_cfg)?;
    let study = load_study(&args.study, &cfg)?;
    let phases: Vec<usize> = match args.phase {
        Some(t) => vec![t],
        None => (0..study.time_points()).collect(),
    };
    std::fs::create_dir_all(&args.out_dir).map_err(|source| Error::Io {
        path: args.out_dir.clone(),
        source,
    })?;
    for &t in &phases {
        let outcome = match args.direction.as_str() {
            "both" => infer_bidirectional(&motion, &seg, &study, t, &cfg)?,
            "past" => infer_single(&motion, &seg, &study, t, Direction::Past, &cfg)?,
            "future" => infer_single(&motion, &seg, &study, t, Direction::Future, &cfg)?,
            other => {
                return Err(Error::Invalid(format!(
                    "direction must be both, past or future, got {other}"
                )))
            }
        };
        let path = args.out_dir.join(format!("t{t}.mask.json"));
        save_mask(&outcome.mask, &path)?;
        println!(
            "phase {t}: {} cavity voxels -> {}",
            outcome.mask.count(1),
            path.display()
        );
    }
    write_run_manifest(
        &args.out_dir,
        "infer",
        &serde_json::to_value(&cfg).unwrap(),
        cfg.seed,
    )
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let cfg = TrainConfig::default();
    let study = load_study(&args.study, &cfg)?;
    let truths = study
        .masks
        .as_ref()
        .ok_or_else(|| Error::Invalid("study has no ground-truth masks".into()))?;
    let mut predictions = Vec::with_capacity(truths.len());
    for t in 0..truths.len() {
        let path = args.pred_dir.join(format!("t{t}.mask.json"));
        predictions.push(load_mask(&path)?);
    }
    let records = sscardiac::metrics::per_phase_report(study.study_id(), &predictions, truths)?;
    write_metric_outputs(&args.out_dir, &records)?;
    let config = serde_json::json!({
        "study": args.study.to_string_lossy(),
        "pred_dir": args.pred_dir.to_string_lossy(),
    });
    write_run_manifest(&args.out_dir, "eval", &config, 0)
}

fn write_metric_outputs(out_dir: &Path, records: &[MetricRecord]) -> Result<(), Error> {
    std::fs::create_dir_all(out_dir).map_err(|source| Error::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let csv_path = out_dir.join("metrics.csv");
    std::fs::write(&csv_path, records_to_csv(records)).map_err(|source| Error::Io {
        path: csv_path.clone(),
        source,
    })?;
    let summary = summarize(records);
    let json_path = out_dir.join("summary.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&summary).unwrap()).map_err(
        |source| Error::Io {
            path: json_path.clone(),
            source,
        },
    )?;
    for s in &summary {
        println!(
            "class {}: dice {:.4} ± {:.4}, jaccard {:.4} ± {:.4}, hausdorff {} ({} records{})",
            s.class_id,
            s.dice_mean,
            s.dice_std,
            s.jaccard_mean,
            s.jaccard_std,
            s.hausdorff_mean
                .map(|m| format!("{m:.3} mm ± {:.3}", s.hausdorff_std.unwrap_or(0.0)))
                .unwrap_or_else(|| "undefined".into()),
            s.records,
            if s.hausdorff_skipped > 0 {
                format!(", {} hausdorff-skipped", s.hausdorff_skipped)
            } else {
                String::new()
            }
        );
    }
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<(), Error> {
    let (motion, _) = MotionNet::load(&args.motion_ckpt)?;
    let (seg, ckpt_cfg) = SegNet::load(&args.seg_ckpt)?;
    let cfg = effective_config(&args.config, ckpt_cfg)?;
    let study = load_study(&args.study, &cfg)?;
    let outcomes = run_all_interval_schemes(&motion, &seg, &study, &cfg)?;
    let mut records = Vec::new();
    let mut summary = serde_json::Map::new();
    for o in &outcomes {
        println!(
            "{}: dice ED {:.4}, ES {:.4}",
            o.scheme.name(),
            o.dice_ed,
            o.dice_es
        );
        summary.insert(
            o.scheme.name().to_string(),
            serde_json::json!({ "dice_ed": o.dice_ed, "dice_es": o.dice_es }),
        );
        records.extend(o.records.iter().cloned());
    }
    std::fs::create_dir_all(&args.out_dir).map_err(|source| Error::Io {
        path: args.out_dir.clone(),
        source,
    })?;
    let csv_path = args.out_dir.join("ablation.csv");
    std::fs::write(&csv_path, records_to_csv(&records)).map_err(|source| Error::Io {
        path: csv_path.clone(),
        source,
    })?;
    let json_path = args.out_dir.join("ablation_summary.json");
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(&serde_json::Value::Object(summary)).unwrap(),
    )
    .map_err(|source| Error::Io {
        path: json_path.clone(),
        source,
    })?;
    write_run_manifest(
        &args.out_dir,
        "ablate-intervals",
        &serde_json::to_value(&cfg).unwrap(),
        cfg.seed,
    )
}

fn cmd_report(args: ReportArgs) -> Result<(), Error> {
    let text = std::fs::read_to_string(&args.metrics).map_err(|source| Error::Io {
        path: args.metrics.clone(),
        source,
    })?;
    let records = records_from_csv(&text)?;
    let summary = summarize(&records);
    let json = serde_json::to_string_pretty(&summary).unwrap();
    match &args.out {
        Some(path) => std::fs::write(path, json).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?,
        None => println!("{json}"),
    }
    Ok(())
}
