//! `cxtrack`: generate synthetic data, train, track, evaluate and run the
//! self-check suites.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cxtrack::checkpoint::CheckpointError;
use cxtrack::config::{load_model, save_model, ConfigError, RunConfig};
use cxtrack::geometry::{iou3d, success_precision, Metrics};
use cxtrack::pipeline::{
    evaluate, pairs_from_sequences, track_clouds, train, Evaluation, Model, ModelPredictor, OraclePredictor,
    PipelineError, Predictor, TrackOptions,
};
use cxtrack::synth::{load_box_file, load_cloud, load_manifest, read_dataset_dir, write_box_file, write_sequence_dir, DataError};
use cxtrack::verify::{gradient_suite, verify_suite, CheckOutcome};

#[derive(Parser, Debug)]
#[command(name = "cxtrack", version, about = "Point-cloud single-object tracker")]
struct Cli {
    /// Worker threads for evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic sequences from the [data] section of a run config.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write the checkpoint with its config alongside.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Track through the clouds of a manifest and write one box per frame.
    Track {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Ground-truth box file; prints Success/Precision when given.
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Evaluate on every sequence directory under DATA.
    Eval {
        #[arg(long, required_unless_present = "oracle")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Output for both curves and the summary metrics.
        #[arg(long, default_value = "curves.csv")]
        csv: PathBuf,
        /// Score the ground truth itself instead of a model.
        #[arg(long, conflicts_with = "ckpt")]
        oracle: bool,
        /// Feed ground-truth previous boxes instead of predictions.
        #[arg(long)]
        teacher_forcing: bool,
    },
    /// Finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Equivalence and invariant suites.
    Verify,
}

enum CliError {
    /// Bad input or a failed check: exit 1.
    Invalid(String),
    /// Everything else: exit 2.
    Runtime(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Self::Runtime(e.to_string()),
            _ => Self::Invalid(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } => Self::Runtime(e.to_string()),
            _ => Self::Invalid(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Data(d) => d.into(),
            PipelineError::Checkpoint(CheckpointError::Io { .. }) => Self::Runtime(e.to_string()),
            PipelineError::Config(_)
            | PipelineError::Mismatch(_)
            | PipelineError::Checkpoint(_)
            | PipelineError::NoPairs
            | PipelineError::NoSequences
            | PipelineError::ShortSequence(_) => Self::Invalid(e.to_string()),
            _ => Self::Runtime(e.to_string()),
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

fn load_run(path: &Path) -> Result<RunConfig, CliError> {
    let mut run = RunConfig::load(path)?;
    run.apply_env()?;
    Ok(run)
}

fn format_metrics(m: &Metrics) -> (String, String) {
    (format!("{:.1}", m.success), format!("{:.1}", m.precision))
}

fn gen(spec: &Path, out: &Path) -> Result<(), CliError> {
    let run = load_run(spec)?;
    let seqs = run.data.generate()?;
    fs::create_dir_all(out).map_err(io(out))?;
    for (i, s) in seqs.iter().enumerate() {
        write_sequence_dir(&out.join(format!("seq_{i:04}")), s)?;
    }
    println!("wrote {} sequences to {}", seqs.len(), out.display());
    Ok(())
}

fn train_cmd(config: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    let run = load_run(config)?;
    let seqs = read_dataset_dir(data)?;
    let pairs = pairs_from_sequences(&seqs);
    let mut model = Model::init(&run.model(), run.train.seed)?;
    let every = (run.train.steps / 20).max(1);
    let report = train(&mut model, &pairs, &run.loss, &run.train, |step, r| {
        if (step + 1) % every == 0 {
            eprintln!("step {:>6}  loss {:.6}", step + 1, r.total);
        }
    })?;
    save_model(out, &model, &run)?;
    let last = report.history.last().copied().unwrap_or(f64::NAN);
    println!("trained {} steps on {} pairs, final loss {last:.6}", report.history.len(), pairs.len());
    Ok(())
}

fn track(ckpt: &Path, manifest: &Path, out: &Path, gt: Option<&Path>) -> Result<(), CliError> {
    let (model, run) = load_model(ckpt, None)?;
    let m = load_manifest(manifest)?;
    let clouds = m.clouds.iter().map(|p| load_cloud(p)).collect::<Result<Vec<_>, _>>()?;
    let boxes = track_clouds(&model, &clouds, m.init_box, run.train.context)?;
    write_box_file(out, &boxes)?;
    if let Some(gt) = gt {
        let truth = load_box_file(gt)?;
        if truth.len() != boxes.len() {
            return Err(CliError::Invalid(format!(
                "{}: {} boxes for {} frames",
                gt.display(),
                truth.len(),
                boxes.len()
            )));
        }
        let ious: Vec<f64> = boxes[1..].iter().zip(&truth[1..]).map(|(b, t)| iou3d(b, t)).collect();
        let errs: Vec<f64> = boxes[1..].iter().zip(&truth[1..]).map(|(b, t)| b.center_distance(t)).collect();
        let (s, p) = format_metrics(&success_precision(&ious, &errs).map_err(|e| CliError::Invalid(e.to_string()))?);
        println!("Success {s} Precision {p}");
    }
    Ok(())
}

fn curves_csv(ev: &Evaluation) -> String {
    let (s, p) = format_metrics(&ev.aggregate);
    let mut out = String::from("curve,threshold,fraction\n");
    writeln!(out, "summary,success,{s}").unwrap();
    writeln!(out, "summary,precision,{p}").unwrap();
    for (t, f) in &ev.success_curve {
        writeln!(out, "success,{t:.4},{f:.6}").unwrap();
    }
    for (t, f) in &ev.precision_curve {
        writeln!(out, "precision,{t:.4},{f:.6}").unwrap();
    }
    out
}

fn eval(ckpt: Option<&Path>, data: &Path, csv: &Path, oracle: bool, teacher_forcing: bool) -> Result<(), CliError> {
    let seqs = read_dataset_dir(data)?;
    let loaded = match ckpt {
        Some(c) if !oracle => Some(load_model(c, None)?),
        _ => None,
    };
    let model_pred;
    let pred: &dyn Predictor = match &loaded {
        Some((model, run)) => {
            model_pred = ModelPredictor {
                model,
                context: run.train.context,
            };
            &model_pred
        }
        None => &OraclePredictor,
    };
    let ev = evaluate(&seqs, pred, TrackOptions { teacher_forcing })?;
    fs::write(csv, curves_csv(&ev)).map_err(io(csv))?;
    let (s, p) = format_metrics(&ev.aggregate);
    println!("Success {s} Precision {p}");
    Ok(())
}

fn report(outcomes: &[CheckOutcome]) -> bool {
    for c in outcomes {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        println!("{tag}  {:<48} worst {:.3e}  tolerance {:.0e}", c.name, c.worst, c.tolerance);
        if !c.detail.is_empty() {
            println!("      {}", c.detail);
        }
    }
    outcomes.iter().all(|c| c.passed)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Invalid("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    match cli.command {
        Command::Gen { spec, out } => gen(&spec, &out),
        Command::Train { config, data, out } => train_cmd(&config, &data, &out),
        Command::Track { ckpt, manifest, out, gt } => track(&ckpt, &manifest, &out, gt.as_deref()),
        Command::Eval {
            ckpt,
            data,
            csv,
            oracle,
            teacher_forcing,
        } => eval(ckpt.as_deref(), &data, &csv, oracle, teacher_forcing),
        Command::Gradcheck { instances } => {
            let outcomes = gradient_suite(instances)?;
            let worst = outcomes.iter().map(|c| c.worst).fold(0.0, f64::max);
            let ok = report(&outcomes);
            println!("worst relative error {worst:.3e}");
            ok.then_some(()).ok_or_else(|| CliError::Invalid("gradient check failed".into()))
        }
        Command::Verify => {
            let ok = report(&verify_suite()?);
            ok.then_some(()).ok_or_else(|| CliError::Invalid("verification failed".into()))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
