//! `mmcert`: certify, attack and train min-max affine models from the shell.
//!
//! Exit codes: 0 certified robust (or success), 1 falsified, 2 indeterminate,
//! 3 usage or I/O error.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use minmax_cert::Norm;

use crate::manifest::RunManifest;

#[derive(Parser, Debug)]
#[command(name = "mmcert", version, about = "Exact robustness certificates for min-max affine models")]
struct Cli {
    /// Worker threads for parallel sweeps (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Evaluate a model at points.
    Eval(EvalArgs),
    /// Certify min over the attack set >= 0, or falsify with an attack.
    Certify(CertifyArgs),
    /// Worst-case (exact) or PGD attack.
    Attack(AttackArgs),
    /// Largest certified radius around points.
    Radius(RadiusArgs),
    /// Certified accuracy curve over a dataset.
    Accuracy(AccuracyArgs),
    /// Drop affine pieces that are never active.
    Prune(PruneArgs),
    /// Strict-feasibility check of the dual program.
    Slater(SlaterArgs),
    /// Convert a one-hidden-layer ReLU network to a min-max model.
    Convert(ConvertArgs),
    /// Train a model on a CSV dataset.
    Train(TrainArgs),
    /// Intersection braking demo: train, certify and sweep.
    DemoControl(DemoControlArgs),
    /// Digit classification demo: adversarial training and accuracy curve.
    DemoMnist(DemoMnistArgs),
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum NormArg {
    L1,
    L2,
    Linf,
}

impl From<NormArg> for Norm {
    fn from(n: NormArg) -> Norm {
        match n {
            NormArg::L1 => Norm::L1,
            NormArg::L2 => Norm::L2,
            NormArg::Linf => Norm::LInf,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum AttackMethod {
    Exact,
    Pgd,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum LossArg {
    Mse,
    Logistic,
}

/// Shared solver tolerances.
#[derive(Args, Debug, Clone)]
pub struct TolArgs {
    /// Relative primal/dual agreement required for a verdict.
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    /// Tightening used by the Slater check.
    #[arg(long, default_value_t = 1e-6)]
    pub slater_eps: f64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Comma-separated coordinates; repeatable.
    #[arg(long, value_parser = parse_vec, allow_hyphen_values = true)]
    pub point: Vec<Coords>,
    /// CSV of points, one per row.
    #[arg(long)]
    pub points: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CertifyArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub attack_set: PathBuf,
    #[command(flatten)]
    pub tol: TolArgs,
    /// Certificate JSON (includes the attack).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AttackArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value_t = AttackMethod::Exact)]
    pub method: AttackMethod,
    /// Attack set (exact method).
    #[arg(long)]
    pub attack_set: Option<PathBuf>,
    /// Ball center (PGD).
    #[arg(long, value_parser = parse_vec, allow_hyphen_values = true)]
    pub center: Option<Coords>,
    /// L-infinity radius (PGD).
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    /// Step size; defaults to eps / 4.
    #[arg(long)]
    pub step_size: Option<f64>,
    #[command(flatten)]
    pub tol: TolArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RadiusArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_parser = parse_vec, allow_hyphen_values = true)]
    pub center: Option<Coords>,
    /// CSV dataset `x_1,...,x_d,target`; radii for rows with positive target.
    #[arg(long)]
    pub points: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = NormArg::Linf)]
    pub norm: NormArg,
    #[arg(long, default_value_t = 1.0)]
    pub epsilon_max: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub radius_tol: f64,
    #[command(flatten)]
    pub tol: TolArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AccuracyArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// CSV dataset `x_1,...,x_d,target`; positive targets are the sensitive class.
    #[arg(long)]
    pub data: PathBuf,
    /// Ascending comma-separated radii.
    #[arg(long, value_parser = parse_vec, default_value = "0")]
    pub eps: Coords,
    #[arg(long, value_enum, default_value_t = NormArg::Linf)]
    pub norm: NormArg,
    /// Also write the curve as CSV `eps,certified_accuracy`.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub tol: TolArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PruneArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Pruned model JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SlaterArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub attack_set: PathBuf,
    #[arg(long, default_value_t = 1e-6)]
    pub slater_eps: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    /// Network JSON `{"d","h","W1","b1","w2","b2"}`.
    #[arg(long)]
    pub net: PathBuf,
    /// Largest number of same-sign hidden units accepted.
    #[arg(long, default_value_t = minmax_cert::convert::DEFAULT_CAP)]
    pub cap: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// CSV dataset `x_1,...,x_d,target`.
    #[arg(long)]
    pub data: PathBuf,
    /// Training configuration JSON; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Initial model; otherwise a random one of size m x n.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub m: usize,
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    /// Per-epoch losses as CSV `epoch,loss`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Trained model JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DemoControlArgs {
    #[arg(long, default_value_t = minmax_cert::control::DEMO_SEED)]
    pub seed: u64,
    #[arg(long, default_value_t = minmax_cert::control::DEMO_BATCH)]
    pub batch_size: usize,
    /// Sweep points per axis.
    #[arg(long, default_value_t = 20)]
    pub grid: usize,
    /// Receives policy.json, sweep.csv and report.json.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub tol: TolArgs,
}

#[derive(Args, Debug)]
pub struct DemoMnistArgs {
    /// Directory with the four standard IDX files; synthetic digits otherwise.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Mean-pooling factor.
    #[arg(long, default_value_t = 4)]
    pub downsample: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Training samples per class.
    #[arg(long, default_value_t = 300)]
    pub train_per_class: usize,
    /// Sensitive test points on the accuracy curve.
    #[arg(long, default_value_t = 20)]
    pub eval_points: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    /// Final adversarial training radius.
    #[arg(long, default_value_t = 0.05)]
    pub train_eps: f64,
    /// Ascending comma-separated radii of the curve.
    #[arg(long, value_parser = parse_vec, default_value = "0,0.01,0.02,0.03,0.04,0.05,0.06,0.07,0.08,0.09,0.1")]
    pub eps: Coords,
    /// Receives model.json, accuracy.csv and report.json.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub tol: TolArgs,
}

/// Comma-separated list of numbers, e.g. `0.5,-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Coords(pub Vec<f64>);

fn parse_vec(s: &str) -> Result<Coords, String> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| format!("`{t}` is not a number")))
        .collect::<Result<Vec<_>, _>>()
        .map(Coords)
}

/// How a run ended, mapped onto the exit-code contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    Falsified,
    Indeterminate,
}

impl Outcome {
    fn code(self) -> u8 {
        match self {
            Outcome::Success => 0,
            Outcome::Falsified => 1,
            Outcome::Indeterminate => 2,
        }
    }
}

/// Result of a subcommand: its primary JSON document plus side files.
pub struct Output {
    pub json: String,
    pub outcome: Outcome,
    pub files: Vec<(PathBuf, String)>,
    pub inputs: Vec<(&'static str, PathBuf)>,
    pub options: Vec<(&'static str, String)>,
    pub seed: Option<u64>,
    /// Where the primary JSON goes; stdout when `None`.
    pub out: Option<PathBuf>,
    pub manifest_path: Option<PathBuf>,
}

pub const EXIT_ERROR: u8 = 3;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_ERROR),
            };
        }
    };
    if let Some(j) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global() {
            eprintln!("error: --jobs: {e}");
            return ExitCode::from(EXIT_ERROR);
        }
    }
    let start = Instant::now();
    let name = subcommand_name(&cli.command);
    let result = match cli.command {
        Command::Eval(a) => commands::eval(a),
        Command::Certify(a) => commands::certify(a),
        Command::Attack(a) => commands::attack(a),
        Command::Radius(a) => commands::radius(a),
        Command::Accuracy(a) => commands::accuracy(a),
        Command::Prune(a) => commands::prune(a),
        Command::Slater(a) => commands::slater(a),
        Command::Convert(a) => commands::convert(a),
        Command::Train(a) => commands::train(a),
        Command::DemoControl(a) => commands::demo_control(a),
        Command::DemoMnist(a) => commands::demo_mnist(a),
    };
    match result.and_then(|out| emit(name, out, start)) {
        Ok(outcome) => ExitCode::from(outcome.code()),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}

fn subcommand_name(c: &Command) -> &'static str {
    match c {
        Command::Eval(_) => "eval",
        Command::Certify(_) => "certify",
        Command::Attack(_) => "attack",
        Command::Radius(_) => "radius",
        Command::Accuracy(_) => "accuracy",
        Command::Prune(_) => "prune",
        Command::Slater(_) => "slater",
        Command::Convert(_) => "convert",
        Command::Train(_) => "train",
        Command::DemoControl(_) => "demo-control",
        Command::DemoMnist(_) => "demo-mnist",
    }
}

fn emit(name: &'static str, out: Output, start: Instant) -> Result<Outcome, commands::CliError> {
    for (path, text) in &out.files {
        std::fs::write(path, text).map_err(|e| commands::CliError::io(path, e))?;
    }
    match &out.out {
        Some(path) => std::fs::write(path, &out.json).map_err(|e| commands::CliError::io(path, e))?,
        None => print!("{}", out.json),
    }
    let manifest = RunManifest::new(name, &out, start.elapsed().as_secs_f64());
    let text = manifest.to_json();
    let target = out
        .manifest_path
        .clone()
        .or_else(|| out.out.as_ref().map(|p| manifest::sibling(p)));
    match target {
        Some(path) => std::fs::write(&path, text).map_err(|e| commands::CliError::io(&path, e))?,
        None => eprint!("{text}"),
    }
    Ok(out.outcome)
}
