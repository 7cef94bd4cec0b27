use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use graphsh::config::RunConfig;
use graphsh::data::{Normalizer, PoseDataset, JOINTS};
use graphsh::evaluation::{evaluate, evaluate_poses, predict_mm, EvalReport, Pose};
use graphsh::layers::ConvKind;
use graphsh::model_io::{load_model, save_model};
use graphsh::network::{Architecture, Model};
use graphsh::skeleton::{validate_skeleton, SkeletonConfig, SkeletonSpec};
use graphsh::suites::{self, MODULES, TOLERANCE};
use graphsh::synth::{synth_generate, Camera};
use graphsh::training::{train, TrainOptions};
use graphsh::Error;

/// Lift 2D joint positions to 3D with graph stacked hourglass networks.
#[derive(Parser)]
#[command(name = "graphsh", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (`.csv` extension writes CSV, anything else GSHP).
    Synth(SynthArgs),
    /// Train a model and write the best checkpoint's weights.
    Train(TrainArgs),
    /// Report MPJPE overall and per action.
    Eval(EvalArgs),
    /// Write millimeter 3D predictions as CSV.
    Predict(PredictArgs),
    /// Run finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
    /// Print the trainable parameter count of a configuration.
    Params(ParamsArgs),
    /// Check a skeleton file and list every violation.
    ValidateSkeleton(ValidateSkeletonArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1145.0)]
    fx: f64,
    #[arg(long, default_value_t = 1145.0)]
    fy: f64,
    #[arg(long, default_value_t = 512.0)]
    cx: f64,
    #[arg(long, default_value_t = 515.0)]
    cy: f64,
}

/// Flags that override `[network]` values.
#[derive(Args, Default)]
struct NetworkOverrides {
    #[arg(long)]
    architecture: Option<Architecture>,
    #[arg(long)]
    stacks: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    conv_kind: Option<ConvKind>,
    #[arg(long)]
    dropout: Option<f64>,
}

/// Flags that override `[train]` values.
#[derive(Args)]
struct TrainOverrides {
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_iterations: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_every: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Full training state, rewritten whenever validation MPJPE improves.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Tab-separated training log; defaults to standard output.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    network: NetworkOverrides,
    #[command(flatten)]
    train_overrides: TrainOverrides,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stub {
    /// Predicts `(x, y, 0)` from each input joint.
    Identity,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Tsv,
    Json,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "stub", conflicts_with = "stub")]
    model: Option<PathBuf>,
    #[arg(long)]
    stub: Option<Stub>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "tsv")]
    format: Format,
    /// Write the report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Reject models trained on a different topology.
    #[arg(long)]
    skeleton: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    skeleton: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(MODULES))]
    module: Option<String>,
    #[arg(long, default_value_t = 10)]
    seeds: u64,
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    network: NetworkOverrides,
}

#[derive(Args)]
struct ValidateSkeletonArgs {
    #[arg(long)]
    config: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Params(a) => params(a),
        Command::ValidateSkeleton(a) => validate(a),
    }
}

fn load_config(path: Option<&Path>, net: &NetworkOverrides) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let n = &mut cfg.network;
    n.architecture = net.architecture.unwrap_or(n.architecture);
    n.stacks = net.stacks.unwrap_or(n.stacks);
    n.channels = net.channels.unwrap_or(n.channels);
    n.conv_kind = net.conv_kind.unwrap_or(n.conv_kind);
    n.dropout = net.dropout.unwrap_or(n.dropout);
    Ok(cfg)
}

fn load_data(path: &Path) -> Result<PoseDataset> {
    PoseDataset::load_any(path).with_context(|| format!("reading {}", path.display()))
}

fn expected_skeleton(path: Option<&Path>) -> Result<Option<SkeletonSpec>> {
    path.map(|p| SkeletonSpec::load(p).with_context(|| format!("reading {}", p.display())))
        .transpose()
}

fn synth(a: SynthArgs) -> Result<ExitCode> {
    let camera = Camera {
        fx: a.fx,
        fy: a.fy,
        cx: a.cx,
        cy: a.cy,
    };
    let out = synth_generate(a.n, a.seed, camera)?;
    out.dataset.save_any(&a.out)?;
    eprintln!("wrote {} samples to {}", a.n, a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn train_cmd(a: TrainArgs) -> Result<ExitCode> {
    let mut cfg = load_config(a.config.as_deref(), &a.network)?;
    let t = &a.train_overrides;
    let tc = &mut cfg.train;
    tc.learning_rate = t.learning_rate.unwrap_or(tc.learning_rate);
    tc.batch_size = t.batch_size.unwrap_or(tc.batch_size);
    tc.max_iterations = t.max_iterations.unwrap_or(tc.max_iterations);
    tc.seed = t.seed.unwrap_or(tc.seed);
    tc.eval_every = t.eval_every.unwrap_or(tc.eval_every);
    cfg.train.validate()?;

    let skeleton = cfg.skeleton_spec()?;
    let train_set = load_data(&a.train)?;
    let val_set = load_data(&a.val)?;
    let normalizer = Normalizer::fit(&train_set)?;
    let model = Model::new(cfg.network.clone(), skeleton, cfg.train.seed)?;
    eprintln!(
        "training {:?} with {} parameters on {} samples",
        cfg.network.architecture,
        model.count_params(),
        train_set.len()
    );

    let mut log: Box<dyn Write> = match &a.log {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    };
    let options = TrainOptions {
        checkpoint_path: a.checkpoint.clone(),
        log: Some(log.as_mut()),
    };
    let outcome = train(
        model,
        &train_set,
        &val_set,
        &normalizer,
        &cfg.train,
        options,
    )?;
    log.flush()?;
    let best = &outcome.best;
    save_model(&a.out, &best.saved.model, best.saved.normalizer.as_ref())?;
    eprintln!(
        "best validation MPJPE {:.3} mm at iteration {}; wrote {}",
        best.best_val_mpjpe,
        best.iteration,
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn identity_poses(data: &PoseDataset) -> Vec<Pose> {
    data.samples
        .iter()
        .map(|s| s.input2d.map(|[x, y]| [x, y, 0.0]))
        .collect()
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let data = load_data(&a.data)?;
    let report: EvalReport = match (&a.model, a.stub) {
        (Some(path), _) => {
            let expected = expected_skeleton(a.skeleton.as_deref())?;
            let saved = load_model(path, expected.as_ref())?;
            evaluate(&saved.model, &data, saved.normalizer.as_ref())?
        }
        (None, Some(Stub::Identity)) => evaluate_poses(&identity_poses(&data), &data)?,
        (None, None) => bail!("either --model or --stub is required"),
    };
    let text = match a.format {
        Format::Tsv => report.to_tsv(),
        Format::Json => report.to_json() + "\n",
    };
    match &a.out {
        Some(p) => std::fs::write(p, text)?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(ExitCode::SUCCESS)
}

fn predict(a: PredictArgs) -> Result<ExitCode> {
    let expected = expected_skeleton(a.skeleton.as_deref())?;
    let saved = load_model(&a.model, expected.as_ref())?;
    let normalizer = saved
        .normalizer
        .as_ref()
        .ok_or_else(|| Error::Config("model file has no normalizer".into()))?;
    let data = load_data(&a.data)?;
    let poses = predict_mm(&saved.model, &data, normalizer)?;

    let mut w = BufWriter::new(File::create(&a.out)?);
    let header: Vec<String> = (0..JOINTS)
        .flat_map(|j| ["X", "Y", "Z"].map(|c| format!("{c}{j}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for p in &poses {
        let row: Vec<String> = p.iter().flatten().map(|v| v.to_string()).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    eprintln!("wrote {} predictions to {}", poses.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    if a.seeds == 0 {
        bail!("--seeds must be positive");
    }
    let modules: Vec<&str> = match &a.module {
        Some(m) => vec![m.as_str()],
        None => MODULES.to_vec(),
    };
    let mut out = io::stdout().lock();
    writeln!(out, "module\tsuite\tmax_rel_error\tchecked")?;
    let mut failures = 0;
    for module in modules {
        let mut worst: Vec<(String, f64, usize)> = Vec::new();
        for seed in 0..a.seeds {
            for (i, r) in suites::run_module(module, seed)?.into_iter().enumerate() {
                if seed == 0 {
                    worst.push((r.name, r.report.max_rel_error, r.report.checked));
                } else {
                    let w = &mut worst[i];
                    w.1 = w.1.max(r.report.max_rel_error);
                    w.2 += r.report.checked;
                }
            }
        }
        for (name, err, checked) in worst {
            if err.is_nan() || err >= TOLERANCE {
                failures += 1;
            }
            writeln!(out, "{module}\t{name}\t{err:.3e}\t{checked}")?;
        }
    }
    if failures > 0 {
        eprintln!("{failures} suite(s) at or above {TOLERANCE:e}");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn params(a: ParamsArgs) -> Result<ExitCode> {
    let cfg = load_config(a.config.as_deref(), &a.network)?;
    let skeleton = cfg.skeleton_spec()?;
    let model = Model::new(cfg.network, skeleton, 0)?;
    println!("{}", model.count_params());
    Ok(ExitCode::SUCCESS)
}

fn validate(a: ValidateSkeletonArgs) -> Result<ExitCode> {
    let cfg = SkeletonConfig::load(&a.config)?;
    match cfg.build() {
        Ok(spec) => {
            validate_skeleton(&spec).expect("build validates");
            println!("ok");
            Ok(ExitCode::SUCCESS)
        }
        Err(Error::InvalidSkeleton(violations)) => {
            for v in violations {
                println!("{v}");
            }
            Ok(ExitCode::from(1))
        }
        Err(e) => Err(e.into()),
    }
}
