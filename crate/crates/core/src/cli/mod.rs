//! The `icnet` command line.
//!
//! Exit codes: 0 success, 1 property violation, 2 usage or configuration
//! error, 3 numeric failure.

mod run;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::experiments::{train_xor, xor_experiment, xor_neuron, xor_spec};
use crate::geometry::{
    default_sweep_grid, region_map, rotation_sweep, TwoInputNeuron, REGION_BOUNDS, REGION_RESOLUTION,
};
use crate::train::{MetricsRecord, TrainConfig, TrainHooks};
use crate::verify::{self, CheckOutcome, SuiteOptions};
use crate::zoo::{comparison_table, cost_report, paired_variants, CostReport, ModelSpec, Overhead, Variant};

pub use run::{execute, load_data, train_to_dir, AugmentSpec, DataKind, FileDigest, RunManifest, RunOutput, RunSummary};

pub const EXIT_OK: u8 = 0;
pub const EXIT_PROPERTY: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::PropertyViolation { .. } => EXIT_PROPERTY,
        Error::Numeric(_) | Error::NonFiniteLoss { .. } => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

#[derive(Debug, Parser)]
#[command(name = "icnet", version, about = "Train, verify and analyze networks with inter-layer collision units")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write manifest.json, metrics.csv, summary.json, params.bin
    Train(TrainArgs),
    /// Run the property checks and print a pass/fail table
    Verify(VerifyArgs),
    /// Train single standard and IC neurons on XOR
    Xor(XorArgs),
    /// Parameter and MAC comparison of a spec's variants, hyperplane sweeps, region maps
    Analyze(AnalyzeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum IcChoice {
    None,
    Layer,
    Block,
}

impl From<IcChoice> for Variant {
    fn from(c: IcChoice) -> Variant {
        match c {
            IcChoice::None => Variant::Baseline,
            IcChoice::Layer => Variant::IcLayer,
            IcChoice::Block => Variant::IcBlock,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// model spec JSON; defaults to the built-in XOR networks for --data xor
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// rerun from a manifest.json; other run flags are then ignored
    #[arg(long, conflicts_with = "model")]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "none")]
    pub ic: IcChoice,
    #[arg(long, value_enum, default_value = "mnist")]
    pub data: DataKind,
    #[arg(long, env = "DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    /// divide the learning rate every this many epochs
    #[arg(long, default_value_t = 30)]
    pub lr_drop_every: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr_drop_factor: f64,
    /// no weight decay on batch-norm affine parameters and w'
    #[arg(long)]
    pub exempt_decay: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// first N training and N/5 test samples; 0 uses the full splits
    #[arg(long, default_value_t = 10_000)]
    pub subset: usize,
    /// disable the CIFAR-10 crop and flip augmentation
    #[arg(long)]
    pub no_augment: bool,
    /// record elapsed time in metrics.csv (breaks bitwise reproducibility)
    #[arg(long)]
    pub wall_clock: bool,
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// run only these checks (repeatable)
    #[arg(long = "check", value_parser = clap::builder::PossibleValuesParser::new(verify::CHECK_NAMES))]
    pub checks: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// trial count (random cases, specs or XOR seeds) for the selected checks
    #[arg(long)]
    pub trials: Option<usize>,
    /// dimension for the hyperplane check
    #[arg(long)]
    pub dim: Option<usize>,
    /// kernel size for the overhead check; needs --cin and --cout
    #[arg(long, requires_all = ["cin", "cout"])]
    pub k: Option<usize>,
    #[arg(long, requires = "k")]
    pub cin: Option<usize>,
    #[arg(long, requires = "k")]
    pub cout: Option<usize>,
    /// also write verify.json here
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct XorArgs {
    /// number of seeds, starting from 0
    #[arg(long, default_value_t = 10)]
    pub seeds: usize,
    #[arg(long, default_value_t = 5000)]
    pub steps: usize,
    /// write the trained IC neuron's 512×512 region labels as CSV
    #[arg(long)]
    pub dump_regions: Option<PathBuf>,
    /// also write xor.json here
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum NeuronChoice {
    /// σ(x1 − x2)
    Relu,
    /// σ(x1 − x2 + σ(−2·x2))
    Collision,
    /// the hand-set XOR solution
    XorSolution,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// comma-separated weight vector for a cos θ sweep over w'
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub weights: Option<Vec<f64>>,
    /// region map of a fixed two-input neuron
    #[arg(long, value_enum)]
    pub regions: Option<NeuronChoice>,
    /// print the cost reports as JSON instead of a table
    #[arg(long)]
    pub json: bool,
    /// write analysis.json, sweep.csv or regions.csv here
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parse `args` and run; returns the exit status.
pub fn run_from<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Train(a) => cmd_train(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Xor(a) => cmd_xor(a),
        Command::Analyze(a) => cmd_analyze(a),
    }
}

struct Progress {
    quiet: bool,
    epochs: usize,
}

impl TrainHooks for Progress {
    fn on_epoch(&mut self, r: &MetricsRecord) {
        if !self.quiet {
            eprintln!(
                "epoch {}/{}  lr {}  train loss {:.4} acc {:.4}  eval loss {:.4} acc {:.4}",
                r.epoch, self.epochs, r.lr, r.train_loss, r.train_acc, r.eval_loss, r.eval_acc
            );
        }
    }
}

/// The manifest described by `train` flags.
pub fn manifest_from_args(a: &TrainArgs) -> Result<RunManifest> {
    if let Some(dir) = &a.data_dir {
        if a.data != DataKind::Xor && !dir.is_dir() {
            return Err(Error::contract(format!("data directory {} does not exist", dir.display())));
        }
    }
    let model = match (&a.model, a.data) {
        (Some(path), _) => ModelSpec::load(path)?,
        (None, DataKind::Xor) => xor_spec(false),
        (None, _) => return Err(Error::contract("--model is required unless --data xor")),
    };
    let train = TrainConfig {
        lr0: a.lr,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        epochs: a.epochs,
        batch_size: a.batch,
        lr_drop_every: a.lr_drop_every,
        lr_drop_factor: a.lr_drop_factor,
        seed: a.seed,
        exempt_decay: a.exempt_decay,
        wall_clock: a.wall_clock,
    };
    train.validate()?;
    let augment = (a.data == DataKind::Cifar10 && !a.no_augment).then_some(AugmentSpec {
        pad: 4,
        flip_prob: 0.5,
    });
    Ok(RunManifest {
        icnet_version: env!("CARGO_PKG_VERSION").into(),
        model_path: a.model.clone(),
        model,
        variant: a.ic.into(),
        data: a.data,
        data_dir: a.data_dir.clone(),
        subset: a.subset,
        augment,
        train,
        data_files: Vec::new(),
    })
}

fn cmd_train(a: TrainArgs) -> Result<u8> {
    let manifest = match &a.manifest {
        Some(path) => RunManifest::load(path)?,
        None => manifest_from_args(&a)?,
    };
    let mut progress = Progress {
        quiet: a.quiet,
        epochs: manifest.train.epochs,
    };
    let run = train_to_dir(&manifest, &a.out, &mut progress)?;
    if let Some(last) = &run.summary.last {
        println!(
            "{} ({} params): eval acc {:.4}, eval loss {:.4} after {} epochs; artifacts in {}",
            run.summary.model,
            run.summary.params,
            last.eval_acc,
            last.eval_loss,
            run.summary.epochs,
            a.out.display()
        );
    }
    Ok(EXIT_OK)
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> Result<u8> {
    let opts = SuiteOptions {
        checks: a.checks.clone(),
        seed: a.seed,
        trials: a.trials,
        dim: a.dim,
        conv: a.k.zip(a.cin).zip(a.cout).map(|((k, i), o)| (k, i, o)),
    };
    let outcomes = verify::run_suite(&opts)?;
    let mut stdout = std::io::stdout().lock();
    for o in &outcomes {
        writeln!(stdout, "{o}")?;
    }
    let failed: Vec<&CheckOutcome> = outcomes.iter().filter(|o| !o.passed).collect();
    writeln!(stdout, "{} of {} checks passed", outcomes.len() - failed.len(), outcomes.len())?;
    if let Some(dir) = &a.out {
        write_json(dir, "verify.json", &outcomes)?;
    }
    match failed.first() {
        Some(first) => {
            let names: Vec<&str> = failed.iter().map(|o| o.check.as_str()).collect();
            eprintln!("failed: {}", names.join(", "));
            Err(Error::PropertyViolation {
                check: first.check.clone(),
                detail: first.detail.clone(),
            })
        }
        None => Ok(EXIT_OK),
    }
}

fn cmd_xor(a: XorArgs) -> Result<u8> {
    if a.seeds == 0 {
        return Err(Error::contract("--seeds must be at least 1"));
    }
    let seeds: Vec<u64> = (0..a.seeds as u64).collect();
    let report = xor_experiment(&seeds, a.steps)?;
    for r in &report.runs {
        println!(
            "seed {:>3}  IC accuracy {:.2} (loss {:.4})  standard accuracy {:.2} (loss {:.4})",
            r.seed, r.ic_accuracy, r.ic_final_loss, r.relu_accuracy, r.relu_final_loss
        );
    }
    println!(
        "IC solved {}/{}; standard solved {}/{}, best standard accuracy {}",
        report.ic_successes,
        seeds.len(),
        report.relu_successes,
        seeds.len(),
        report.relu_max_accuracy
    );
    if let Some(path) = &a.dump_regions {
        let seed = report
            .runs
            .iter()
            .find(|r| r.ic_accuracy == 1.0)
            .map_or(0, |r| r.seed);
        let (net, _, _) = train_xor(true, seed, a.steps)?;
        let neuron = xor_neuron(&net)?;
        let map = region_map(|x1, x2| neuron.branches(x1, x2), REGION_BOUNDS, REGION_RESOLUTION)?;
        write_file(path, &map.to_csv())?;
        println!(
            "regions of the seed-{seed} IC neuron ({} distinct labels) written to {}",
            map.distinct,
            path.display()
        );
    }
    if let Some(dir) = &a.out {
        write_json(dir, "xor.json", &report)?;
    }
    Ok(EXIT_OK)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}

#[derive(Serialize)]
struct Analysis {
    reports: Vec<CostReport>,
    overheads: Vec<Overhead>,
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<u8> {
    if a.model.is_none() && a.weights.is_none() && a.regions.is_none() {
        return Err(Error::contract("analyze needs --model, --weights or --regions"));
    }
    if let Some(path) = &a.model {
        let spec = ModelSpec::load(path)?;
        let (base, layer, block) = paired_variants(&spec)?;
        let reports = vec![cost_report(&base)?, cost_report(&layer)?, cost_report(&block)?];
        let overheads = vec![reports[1].overhead_vs(&reports[0]), reports[2].overhead_vs(&reports[0])];
        let analysis = Analysis { reports, overheads };
        if a.json {
            println!("{}", serde_json::to_string_pretty(&analysis)?);
        } else {
            print!("{}", comparison_table(&analysis.reports));
            for (r, o) in analysis.reports[1..].iter().zip(&analysis.overheads) {
                println!(
                    "{}: +{} params ({:+.2}%), +{} MACs ({:+.2}%)",
                    r.model,
                    o.added_params,
                    100.0 * o.param_ratio,
                    o.added_macs,
                    100.0 * o.mac_ratio
                );
            }
        }
        if let Some(dir) = &a.out {
            write_json(dir, "analysis.json", &analysis)?;
        }
    }
    if let Some(w) = &a.weights {
        let report = rotation_sweep(w, &default_sweep_grid(w))?;
        println!(
            "cos θ over {} values of w' in [{}, {}]: strictly decreasing, range ({}, {}), zero at w' = {}",
            report.points.len(),
            report.points[0].0,
            report.points[report.points.len() - 1].0,
            report.min,
            report.max,
            report.zero_crossing
        );
        if let Some(dir) = &a.out {
            write_file(&dir.join("sweep.csv"), &report.to_csv())?;
        }
    }
    if let Some(choice) = a.regions {
        let neuron = match choice {
            NeuronChoice::Relu => TwoInputNeuron::plain_relu(),
            NeuronChoice::Collision => TwoInputNeuron::collision_unit(),
            NeuronChoice::XorSolution => TwoInputNeuron::xor_solution(),
        };
        let map = region_map(|x1, x2| neuron.branches(x1, x2), REGION_BOUNDS, REGION_RESOLUTION)?;
        println!("{choice:?} neuron: {} distinct region labels", map.distinct);
        if let Some(dir) = &a.out {
            write_file(&dir.join("regions.csv"), &map.to_csv())?;
        }
    }
    Ok(EXIT_OK)
}
