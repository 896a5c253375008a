//! Command-line front end for the lesion-tracking pipeline.
//!
//! Every subcommand is a thin wrapper over [`lesiontrack::pipeline`]; all
//! behavior lives in the library. Exit codes: 0 success, 1 usage error,
//! 2 data/format error, 3 numeric failure.

use clap::{Args, Parser, Subcommand};
use lesiontrack::error::{Error, Result};
use lesiontrack::phantom::Tier;
use lesiontrack::pipeline::{
    self, BoneSource, CaseManifest, PipelineConfig, SplitName, ThresholdMode,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(
    name = "lesiontrack",
    version,
    about = "Automated lesion tracking between baseline and follow-up CT/PET scan pairs",
    disable_help_subcommand = true
)]
struct Cli {
    /// Pipeline configuration file (TOML). Defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override the dataset directory from the config.
    #[arg(long, global = true, value_name = "DIR")]
    volumes: Option<PathBuf>,
    /// Override the output directory from the config.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic phantom dataset and its case manifest.
    PhantomGen(PhantomGenArgs),
    /// Segment lesions in a PET volume within a bone mask.
    Segment(SegmentArgs),
    /// Recover the affine transform between baseline and follow-up CT.
    Register(RegisterArgs),
    /// Extract labeled candidate patch pairs into per-split archives.
    Extract(ExtractArgs),
    /// Train the Siamese classifier, one model per seed.
    Train(TrainArgs),
    /// Track lesions across a split with a trained model.
    Track(TrackArgs),
    /// Evaluate a trained model on the test split.
    Evaluate(SeedArgs),
    /// Aggregate per-seed evaluations into a mean ± std report.
    Report,
}

#[derive(Debug, Args)]
struct PhantomGenArgs {
    /// Number of cases to generate (overrides `phantom.cases`).
    #[arg(long)]
    cases: Option<usize>,
    /// Master seed (overrides `phantom.master_seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Lesion crowding tier: easy | hard (overrides `phantom.tier`).
    #[arg(long)]
    tier: Option<String>,
}

#[derive(Debug, Args)]
struct SegmentArgs {
    /// PET volume to segment.
    #[arg(long, value_name = "VOLUME")]
    pet: PathBuf,
    /// Existing binary bone mask volume.
    #[arg(long, value_name = "VOLUME", conflicts_with = "ct")]
    bone_mask: Option<PathBuf>,
    /// CT volume to derive the bone mask from (`segmentation.bone_hu_threshold`).
    #[arg(long, value_name = "VOLUME")]
    ct: Option<PathBuf>,
    /// Where to write the labeled lesion mask.
    #[arg(long, value_name = "VOLUME")]
    out_mask: PathBuf,
    /// PET foreground threshold (overrides `segmentation.suv_threshold`).
    #[arg(long)]
    suv_threshold: Option<f64>,
}

#[derive(Debug, Args)]
struct RegisterArgs {
    /// Register a single named case instead of the whole manifest.
    #[arg(long, value_name = "NAME")]
    case: Option<String>,
    /// File mode: fixed (baseline) CT volume.
    #[arg(long, value_name = "VOLUME", requires = "moving", requires = "out_transform")]
    fixed: Option<PathBuf>,
    /// File mode: moving (follow-up) CT volume.
    #[arg(long, value_name = "VOLUME", requires = "fixed")]
    moving: Option<PathBuf>,
    /// File mode: where to write the transform JSON.
    #[arg(long, value_name = "FILE", requires = "fixed")]
    out_transform: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExtractArgs {
    /// Extract only this split: train | validation | test.
    #[arg(long)]
    split: Option<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Train only this seed (overrides the config's `seeds` list).
    #[arg(long)]
    seed: Option<u64>,
    /// Number of epochs (overrides `train.epochs`).
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Args)]
struct TrackArgs {
    /// Track only this seed (overrides the config's `seeds` list).
    #[arg(long)]
    seed: Option<u64>,
    /// Split to track: train | validation | test (default test).
    #[arg(long, default_value = "test")]
    split: String,
    /// Decision threshold: "gmean" for the validation optimum, or a number.
    #[arg(long)]
    threshold: Option<String>,
}

#[derive(Debug, Args)]
struct SeedArgs {
    /// Process only this seed (overrides the config's `seeds` list).
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help / --version are not failures.
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    let stage = stage_name(&cli.command);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lesiontrack {stage}: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn stage_name(command: &Command) -> &'static str {
    match command {
        Command::PhantomGen(_) => "phantom-gen",
        Command::Segment(_) => "segment",
        Command::Register(_) => "register",
        Command::Extract(_) => "extract",
        Command::Train(_) => "train",
        Command::Track(_) => "track",
        Command::Evaluate(_) => "evaluate",
        Command::Report => "report",
    }
}

fn run(cli: Cli) -> Result<()> {
    pipeline::init_threads()?;
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(volumes) = cli.volumes {
        cfg.paths.volumes = volumes;
    }
    if let Some(out) = cli.out {
        cfg.paths.out = out;
    }
    cfg.validate()?;

    match cli.command {
        Command::PhantomGen(args) => phantom_gen(cfg, args),
        Command::Segment(args) => segment(cfg, args),
        Command::Register(args) => register(cfg, args),
        Command::Extract(args) => extract(cfg, args),
        Command::Train(args) => train(cfg, args),
        Command::Track(args) => track(cfg, args),
        Command::Evaluate(args) => evaluate(cfg, args),
        Command::Report => report(cfg),
    }
}

fn seeds_to_run(cfg: &PipelineConfig, only: Option<u64>) -> Vec<u64> {
    match only {
        Some(seed) => vec![seed],
        None => cfg.seeds.clone(),
    }
}

fn parse_tier(raw: &str) -> Result<Tier> {
    match raw {
        "easy" => Ok(Tier::Easy),
        "hard" => Ok(Tier::Hard),
        other => Err(Error::Usage(format!(
            "unknown tier {other:?}; expected easy or hard"
        ))),
    }
}

fn phantom_gen(mut cfg: PipelineConfig, args: PhantomGenArgs) -> Result<()> {
    if let Some(cases) = args.cases {
        cfg.phantom.cases = cases;
    }
    if let Some(seed) = args.seed {
        cfg.phantom.master_seed = seed;
    }
    if let Some(tier) = &args.tier {
        cfg.phantom.tier = parse_tier(tier)?;
    }
    cfg.validate()?;
    let manifest = pipeline::generate_dataset(&cfg)?;
    let lesions: usize = manifest
        .cases
        .iter()
        .map(|c| c.baseline_lesions + c.followup_lesions)
        .sum();
    println!(
        "generated {} cases ({} lesions) under {} — split {}/{}/{} (train/validation/test)",
        manifest.cases.len(),
        lesions,
        cfg.paths.volumes.display(),
        manifest.train.len(),
        manifest.validation.len(),
        manifest.test.len()
    );
    Ok(())
}

fn segment(cfg: PipelineConfig, args: SegmentArgs) -> Result<()> {
    let bone = match (&args.bone_mask, &args.ct) {
        (Some(mask), None) => BoneSource::MaskFile(mask),
        (None, Some(ct)) => BoneSource::FromCt {
            ct,
            hu_threshold: cfg.segmentation.bone_hu_threshold,
        },
        _ => {
            return Err(Error::Usage(
                "segment needs exactly one bone source: --bone-mask or --ct".into(),
            ))
        }
    };
    let threshold = args
        .suv_threshold
        .unwrap_or(cfg.segmentation.suv_threshold);
    let lesions = pipeline::run_segment(&args.pet, bone, threshold, &args.out_mask)?;
    println!(
        "segmented {lesions} lesions from {} into {}",
        args.pet.display(),
        args.out_mask.display()
    );
    Ok(())
}

fn register(cfg: PipelineConfig, args: RegisterArgs) -> Result<()> {
    if let (Some(fixed), Some(moving), Some(out)) =
        (&args.fixed, &args.moving, &args.out_transform)
    {
        let result =
            pipeline::register_files(fixed, moving, &cfg.registration.to_config(), out)?;
        println!(
            "registered {} -> {} (metric {:.6} -> {:.6}), transform written to {}",
            fixed.display(),
            moving.display(),
            result.initial_metric,
            result.final_metric,
            out.display()
        );
        return Ok(());
    }
    let manifest = CaseManifest::load(&cfg.paths.volumes)?;
    let names: Vec<String> = match &args.case {
        Some(name) => vec![name.clone()],
        None => manifest.all_names().map(str::to_owned).collect(),
    };
    for name in &names {
        let result = pipeline::register_case(&cfg, name)?;
        println!(
            "{name}: metric {:.6} -> {:.6}, transform written to {}",
            result.initial_metric,
            result.final_metric,
            cfg.transform_path(name).display()
        );
    }
    Ok(())
}

fn extract(cfg: PipelineConfig, args: ExtractArgs) -> Result<()> {
    let manifest = CaseManifest::load(&cfg.paths.volumes)?;
    let splits: Vec<SplitName> = match &args.split {
        Some(raw) => vec![raw.parse()?],
        None => SplitName::ALL.to_vec(),
    };
    for split in splits {
        let summary = pipeline::extract_split(&cfg, &manifest, split)?;
        println!(
            "{split}: {} cases -> {} pairs ({} true / {} false) in {}",
            summary.cases,
            summary.pairs,
            summary.true_pairs,
            summary.false_pairs,
            cfg.patches_base(split).display()
        );
    }
    Ok(())
}

fn train(mut cfg: PipelineConfig, args: TrainArgs) -> Result<()> {
    if let Some(epochs) = args.epochs {
        cfg.train.epochs = epochs;
    }
    cfg.validate()?;
    for seed in seeds_to_run(&cfg, args.seed) {
        let summary = pipeline::train_seed(&cfg, seed)?;
        let threshold = match &summary.threshold {
            Some(m) => format!("validation G-mean optimum {:.4}", m.threshold),
            None => "no validation threshold (single-class validation split)".into(),
        };
        println!(
            "seed {seed}: trained on {} balanced pairs, best epoch {} (val loss {:.4}), {threshold}; checkpoint {}",
            summary.train_pairs,
            summary.best_epoch,
            summary.best_val_loss,
            cfg.checkpoint_path(seed).display()
        );
    }
    Ok(())
}

fn track(mut cfg: PipelineConfig, args: TrackArgs) -> Result<()> {
    if let Some(raw) = &args.threshold {
        cfg.tracking.threshold = match raw.as_str() {
            "gmean" | "gmean_opt" => ThresholdMode::GmeanOpt,
            number => match number.parse::<f64>() {
                Ok(value) => ThresholdMode::Fixed { value },
                Err(_) => {
                    return Err(Error::Usage(format!(
                        "--threshold takes \"gmean\" or a number, got {raw:?}"
                    )))
                }
            },
        };
    }
    cfg.validate()?;
    let split: SplitName = args.split.parse()?;
    let manifest = CaseManifest::load(&cfg.paths.volumes)?;
    for seed in seeds_to_run(&cfg, args.seed) {
        let threshold = pipeline::resolve_threshold(&cfg, seed)?;
        let reports = pipeline::track_split(&cfg, &manifest, split, seed)?;
        let edges: usize = reports.iter().map(|(_, r)| r.edges.len()).sum();
        let accepted: usize = reports
            .iter()
            .map(|(_, r)| r.edges.iter().filter(|e| e.decided).count())
            .sum();
        println!(
            "seed {seed}: tracked {} {split} cases at threshold {threshold:.4} — {accepted}/{edges} candidate pairs accepted",
            reports.len()
        );
    }
    Ok(())
}

fn evaluate(cfg: PipelineConfig, args: SeedArgs) -> Result<()> {
    let manifest = CaseManifest::load(&cfg.paths.volumes)?;
    for seed in seeds_to_run(&cfg, args.seed) {
        let summary = pipeline::evaluate_seed(&cfg, &manifest, seed)?;
        println!(
            "seed {seed}: {} test pairs — accuracy {:.4}, AUC {:.4} (reference {:.4}), re-identified {}/{} remaining lesions",
            summary.pairs,
            summary.metrics.accuracy,
            summary.auc_model,
            summary.auc_reference,
            summary.tallies.remaining_overall.correct,
            summary.tallies.remaining_overall.total
        );
    }
    Ok(())
}

fn report(cfg: PipelineConfig) -> Result<()> {
    let report = pipeline::report_runs(&cfg)?;
    println!(
        "aggregated {} seed(s) for {} patches -> {}",
        report.seeds.len(),
        report.patch,
        cfg.report_path().display()
    );
    for (name, stat) in &report.metrics {
        println!("  {name}: {}", stat.formatted());
    }
    Ok(())
}
