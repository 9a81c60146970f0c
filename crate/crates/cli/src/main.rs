//! Command-line surface over the registration library: synthetic dataset
//! generation, training, single-pair registration, held-out evaluation, the
//! gradient-check suite, and latency/parameter benchmarks. Every report is
//! versioned JSON; volumes travel as VOL1 files.
//!
//! Exit codes: 0 on success, 1 on any validation or I/O error, 2 on an
//! internal assertion (a bug, not bad input).

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ldreg::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use ldreg::data::{gen_dataset, load_dataset, make_pair, FieldSpec, PhantomSpec, TeacherProvider};
use ldreg::deform::folding_count;
use ldreg::gradcheck::run_gradient_suite;
use ldreg::loss::LossWeights;
use ldreg::metrics::{evaluate, latency_benchmark};
use ldreg::net::{cascade_forward, init_student, ParamSet, StudentConfig};
use ldreg::rng::SplitMix64;
use ldreg::train::{resume_observed, train_observed, IterationLosses, TrainConfig, TrainMode};
use ldreg::volio::{read_volume, write_field, write_volume};

#[derive(Parser)]
#[command(
    name = "ldreg",
    about = "Light-weight cascaded deformable registration, trained against distilled teacher deformations",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic paired dataset with ground-truth deformations.
    GenData(GenDataArgs),
    /// Train a model on a generated dataset.
    Train(Box<TrainArgs>),
    /// Register one moving/fixed volume pair with a trained model.
    Register(RegisterArgs),
    /// Evaluate a trained model on a dataset and write a metrics report.
    Evaluate(EvaluateArgs),
    /// Run the finite-difference gradient suite; nonzero exit on failure.
    Gradcheck(GradcheckArgs),
    /// Measure registration latency and parameter counts per cascade depth.
    Bench(BenchArgs),
}

#[derive(clap::Args)]
struct GenDataArgs {
    /// Directory the volumes and manifest are written into.
    #[arg(long)]
    out_dir: PathBuf,
    /// Number of moving/fixed pairs.
    #[arg(long)]
    count: usize,
    /// Dataset seed; every record derives from it deterministically.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cubic volume extent (power of two, ≥ 16).
    #[arg(long)]
    extent: Option<usize>,
    /// Gaussian intensity blobs per phantom.
    #[arg(long)]
    blob_count: Option<usize>,
    /// Blob peak amplitude range.
    #[arg(long, value_names = ["LO", "HI"], num_args = 2)]
    blob_amp: Option<Vec<f64>>,
    /// Blob width range in voxels.
    #[arg(long, value_names = ["LO", "HI"], num_args = 2)]
    blob_sigma: Option<Vec<f64>>,
    /// Organ ellipsoid semi-axis range in voxels.
    #[arg(long, value_names = ["LO", "HI"], num_args = 2)]
    organ_axes: Option<Vec<f64>>,
    /// Control-grid extent of the random deformations.
    #[arg(long)]
    control_extent: Option<usize>,
    /// Peak displacement amplitude in voxels.
    #[arg(long)]
    amplitude: Option<f64>,
    /// Spatial derivative cap keeping deformations fold-free.
    #[arg(long)]
    derivative_bound: Option<f64>,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Dataset manifest to train on.
    #[arg(long)]
    manifest: PathBuf,
    /// Where the final checkpoint is written.
    #[arg(long)]
    checkpoint_out: PathBuf,
    /// Optional JSON log of per-iteration losses.
    #[arg(long)]
    loss_log_out: Option<PathBuf>,
    /// Teacher deformation source.
    #[arg(long, value_enum, default_value_t = TeacherArg::GroundTruth)]
    teacher: TeacherArg,
    /// Directory of replacement teacher fields (with --teacher files).
    #[arg(long, required_if_eq("teacher", "files"))]
    teacher_dir: Option<PathBuf>,
    /// Baseline configuration as JSON; individual flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Resume from this checkpoint instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Outer iterations to add to a resumed run.
    #[arg(long, requires = "resume")]
    additional: Option<u64>,
    /// Outer iterations for a fresh run.
    #[arg(long)]
    iterations: Option<usize>,
    /// Pairs per batch.
    #[arg(long)]
    batch: Option<usize>,
    /// Generator phases per outer iteration.
    #[arg(long)]
    n_gen: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f32>,
    /// Run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Cascade count.
    #[arg(long)]
    cascades: Option<usize>,
    /// Volume extent the model is built for.
    #[arg(long)]
    extent: Option<usize>,
    /// Training mode.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Reconstruction/discrimination trade-off γ.
    #[arg(long)]
    gamma: Option<f32>,
    /// Teacher share β of the joint field the penalty is taken at.
    #[arg(long)]
    beta: Option<f32>,
    /// Gradient-penalty strength λ.
    #[arg(long)]
    lambda: Option<f32>,
    /// Whether the student objective includes the penalty term.
    #[arg(long)]
    penalty_to_student: Option<bool>,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum TeacherArg {
    GroundTruth,
    Files,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    RecOnly,
    Adversarial,
}

#[derive(clap::Args)]
struct RegisterArgs {
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Moving volume (VOL1).
    #[arg(long)]
    moving: PathBuf,
    /// Fixed volume (VOL1).
    #[arg(long)]
    fixed: PathBuf,
    /// Where the composed displacement field is written.
    #[arg(long)]
    field_out: PathBuf,
    /// Where the warped moving volume is written.
    #[arg(long)]
    warped_out: PathBuf,
}

#[derive(clap::Args)]
struct EvaluateArgs {
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset manifest to evaluate on.
    #[arg(long)]
    manifest: PathBuf,
    /// Where the metrics report is written.
    #[arg(long)]
    report_out: PathBuf,
    /// Evaluate only the first N pairs.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(clap::Args)]
struct GradcheckArgs {
    /// Seeds per check.
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    /// Optional copy of the JSON report.
    #[arg(long)]
    report_out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct BenchArgs {
    /// Volume extent to benchmark at.
    #[arg(long, default_value_t = 32)]
    extent: usize,
    /// Cascade depths to measure.
    #[arg(long, num_args = 1.., default_values_t = [1usize, 2, 3])]
    cascades: Vec<usize>,
    /// Timed repetitions per depth (after one warm-up).
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// Seed for the probe volumes and weights.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                clap::error::ErrorKind::DisplayHelp
                | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
            let _ = err.print();
            return code;
        }
    };
    match panic::catch_unwind(AssertUnwindSafe(|| run(cli))) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(err)) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            eprintln!("internal assertion: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::GenData(args) => cmd_gen_data(args),
        Cmd::Train(args) => cmd_train(*args),
        Cmd::Register(args) => cmd_register(args),
        Cmd::Evaluate(args) => cmd_evaluate(args),
        Cmd::Gradcheck(args) => cmd_gradcheck(args),
        Cmd::Bench(args) => cmd_bench(args),
    }
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_pairs(manifest: &Path, provider: &TeacherProvider) -> Result<Vec<ldreg::data::LoadedPair>> {
    load_dataset(manifest, provider)
        .with_context(|| format!("loading dataset {}", manifest.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn pair(range: &Option<Vec<f64>>) -> Option<(f64, f64)> {
    range.as_ref().map(|v| (v[0], v[1]))
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let mut phantom = PhantomSpec::default();
    if let Some(extent) = args.extent {
        phantom.extent = extent;
    }
    if let Some(blob_count) = args.blob_count {
        phantom.blob_count = blob_count;
    }
    if let Some(amp) = pair(&args.blob_amp) {
        phantom.blob_amp = amp;
    }
    if let Some(sigma) = pair(&args.blob_sigma) {
        phantom.blob_sigma = sigma;
    }
    if let Some(axes) = pair(&args.organ_axes) {
        phantom.organ_axes = axes;
    }
    let mut field = FieldSpec::default();
    if let Some(control_extent) = args.control_extent {
        field.control_extent = control_extent;
    }
    if let Some(amplitude) = args.amplitude {
        field.amplitude = amplitude;
    }
    if let Some(bound) = args.derivative_bound {
        field.derivative_bound = bound;
    }

    let manifest = gen_dataset(&args.out_dir, args.count, &phantom, &field, args.seed)?;

    #[derive(Serialize)]
    struct Summary {
        schema: u32,
        manifest: PathBuf,
        records: usize,
        seed: u64,
    }
    print_json(&Summary {
        schema: 1,
        manifest: args.out_dir.join(ldreg::data::MANIFEST_NAME),
        records: manifest.records.len(),
        seed: args.seed,
    })
}

/// JSON shape of a saved loss log.
#[derive(Serialize)]
struct LossLog<'a> {
    schema: u32,
    losses: &'a [IterationLosses],
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let provider = match args.teacher {
        TeacherArg::GroundTruth => TeacherProvider::GroundTruth,
        TeacherArg::Files => TeacherProvider::FromFiles {
            dir: args.teacher_dir.clone().expect("clap enforces --teacher-dir"),
        },
    };
    let pairs = load_pairs(&args.manifest, &provider)?;

    let mut progress = |l: &IterationLosses| {
        let dis = l.l_dis.map(|v| format!("  l_dis {v:.6}")).unwrap_or_default();
        let critic = l.critic.map(|v| format!("  critic {v:.6}")).unwrap_or_default();
        eprintln!("iter {}  l_rec {:.6}  l_adv {:.6}{dis}{critic}", l.iteration, l.l_rec, l.l_adv);
    };

    let (ckpt, log) = if let Some(resume_path) = &args.resume {
        if args.config.is_some() || config_flags_present(&args) {
            bail!("--resume takes its configuration from the checkpoint; drop the config flags");
        }
        let additional =
            args.additional.context("--resume requires --additional iterations")?;
        let ckpt = load_ckpt(resume_path)?;
        resume_observed(ckpt, &pairs, additional, &mut progress)?
    } else {
        let cfg = build_config(&args)?;
        train_observed(&cfg, &pairs, &mut progress)?
    };

    save_checkpoint(&args.checkpoint_out, &ckpt)?;
    if let Some(log_path) = &args.loss_log_out {
        write_json(log_path, &LossLog { schema: 1, losses: &log })?;
    }

    #[derive(Serialize)]
    struct Summary {
        schema: u32,
        iterations: u64,
        final_l_rec: Option<f32>,
        checkpoint: PathBuf,
    }
    print_json(&Summary {
        schema: 1,
        iterations: ckpt.iteration,
        final_l_rec: log.last().map(|l| l.l_rec),
        checkpoint: args.checkpoint_out.clone(),
    })
}

fn config_flags_present(args: &TrainArgs) -> bool {
    args.iterations.is_some()
        || args.batch.is_some()
        || args.n_gen.is_some()
        || args.lr.is_some()
        || args.seed.is_some()
        || args.cascades.is_some()
        || args.extent.is_some()
        || args.mode.is_some()
        || args.gamma.is_some()
        || args.beta.is_some()
        || args.lambda.is_some()
        || args.penalty_to_student.is_some()
}

fn build_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(iterations) = args.iterations {
        cfg.iterations = iterations;
    }
    if let Some(batch) = args.batch {
        cfg.batch = batch;
    }
    if let Some(n_gen) = args.n_gen {
        cfg.n_gen = n_gen;
    }
    if let Some(lr) = args.lr {
        cfg.lr = lr;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(cascades) = args.cascades {
        cfg.cascades = cascades;
    }
    if let Some(extent) = args.extent {
        cfg.extent = extent;
    }
    if let Some(mode) = args.mode {
        cfg.mode = match mode {
            ModeArg::RecOnly => TrainMode::RecOnly,
            ModeArg::Adversarial => TrainMode::Adversarial,
        };
    }
    let LossWeights { gamma, beta, lambda } = cfg.weights;
    cfg.weights = LossWeights {
        gamma: args.gamma.unwrap_or(gamma),
        beta: args.beta.unwrap_or(beta),
        lambda: args.lambda.unwrap_or(lambda),
    };
    if let Some(flag) = args.penalty_to_student {
        cfg.penalty_to_student = flag;
    }
    Ok(cfg)
}

fn checkpoint_stages(ckpt: &Checkpoint) -> (Vec<ParamSet>, StudentConfig) {
    (ckpt.student.clone(), ckpt.config.student_config())
}

fn cmd_register(args: RegisterArgs) -> Result<()> {
    let ckpt = load_ckpt(&args.checkpoint)?;
    ckpt.config.validate()?;
    let moving = read_volume(&args.moving)
        .with_context(|| format!("loading {}", args.moving.display()))?;
    let fixed = read_volume(&args.fixed)
        .with_context(|| format!("loading {}", args.fixed.display()))?;
    let (stages, scfg) = checkpoint_stages(&ckpt);
    let (_, total, warped) = cascade_forward(&moving, &fixed, &stages, &scfg)?;
    let folds = folding_count(&total)?;
    write_field(&args.field_out, &total)?;
    write_volume(&args.warped_out, &warped)?;

    #[derive(Serialize)]
    struct Summary {
        schema: u32,
        extent: [usize; 3],
        folding_count: usize,
        field: PathBuf,
        warped: PathBuf,
    }
    print_json(&Summary {
        schema: 1,
        extent: moving.extents(),
        folding_count: folds,
        field: args.field_out.clone(),
        warped: args.warped_out.clone(),
    })
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let ckpt = load_ckpt(&args.checkpoint)?;
    let pairs = load_pairs(&args.manifest, &TeacherProvider::GroundTruth)?;
    let report = evaluate(&ckpt, &pairs, args.limit)?;
    write_json(&args.report_out, &report)?;
    print_json(&report)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let report = run_gradient_suite(args.seeds)?;
    for check in &report.checks {
        let verdict = if check.passed { "ok" } else { "FAIL" };
        eprintln!(
            "{verdict:4} {:<18} max rel err {:.2e} (tol {:.0e})",
            check.name, check.max_rel_err, check.tolerance
        );
    }
    if let Some(path) = &args.report_out {
        write_json(path, &report)?;
    }
    print_json(&report)?;
    if !report.passed {
        bail!("gradient suite failed");
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    if args.cascades.is_empty() {
        bail!("--cascades needs at least one depth");
    }
    // Scale the probe's organ to the requested extent so any valid extent
    // benchmarks without tuning phantom flags.
    let phantom = PhantomSpec {
        extent: args.extent,
        organ_axes: (args.extent as f64 / 8.0, args.extent as f64 / 4.0),
        ..Default::default()
    };
    let probe = make_pair(&phantom, &FieldSpec::default(), args.seed)?;

    #[derive(Serialize)]
    struct Entry {
        cascades: usize,
        param_count: usize,
        latency_seconds: f64,
    }
    #[derive(Serialize)]
    struct Report {
        schema: u32,
        extent: usize,
        reps: usize,
        entries: Vec<Entry>,
    }

    let mut entries = Vec::with_capacity(args.cascades.len());
    for &depth in &args.cascades {
        let scfg = StudentConfig { cascades: depth, ..Default::default() };
        let stages = (0..depth)
            .map(|k| {
                init_student(&scfg, SplitMix64::stream(args.seed, 7000 + k as u64).next_u64())
            })
            .collect::<ldreg::Result<Vec<_>>>()?;
        let latency =
            latency_benchmark(&probe.moving, &probe.fixed, &stages, &scfg, args.reps)?;
        entries.push(Entry {
            cascades: depth,
            param_count: stages.iter().map(ParamSet::param_count).sum(),
            latency_seconds: latency,
        });
    }
    print_json(&Report { schema: 1, extent: args.extent, reps: args.reps, entries })
}
