//! Config files, the `uota` command line, output files and run manifests.

mod config;
mod manifest;

pub use config::{load_config, parse_config, Config, EvalConfig, MseLabConfig, SweepConfig};
pub use manifest::{module_versions, write_atomic, RunManifest, RunStatus, MANIFEST_FILE};

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::Utc;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::Error;
use crate::evalsuite::{
    probe_encoder, quantile_group_separability, sweep, weight_ood_auroc, write_auroc_csv, write_probe_csv,
    CleanPool, SweepAxis,
};
use crate::mselab::paired_mse_comparison;
use crate::rng;
use crate::synthworld::{eval_instances, generate, ToyWorldSpec, TrainingSet};
use crate::trainer::{dataset_weights, fit_with_monitor, EncoderState, TrainConfig, Weighting};

/// Environment variable naming the base directory for run outputs.
pub const OUTPUT_DIR_ENV: &str = "UOTA_OUTPUT_DIR";

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// 1 usage, 2 validation, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) | HarnessError::Io(_) => 1,
            HarnessError::Config(_) => 2,
            HarnessError::Core(e) => match e {
                Error::Numerical { .. }
                | Error::NonFinite(_)
                | Error::NotPositiveDefinite { .. }
                | Error::Unfactorized(_) => 3,
                _ => 2,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "uota", version, about = "Outlier-arbitrated weighting of augmented views")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML config file.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory. Defaults to `$UOTA_OUTPUT_DIR/<command>-seed<seed>`, or `runs/...`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an encoder and write its history, weights and parameters.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory written by `gen-data`; generated from the config otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Linear-probe accuracy of UOTA and uniform encoders, or of a saved encoder.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Weight-vs-flag AUROC and quantile-group separability.
    OodEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Paired UOTA/uniform runs over one config axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// nuisance_scale, views_per_instance, tau or ood_rate (short: nuisance, views, ood).
        #[arg(long)]
        axis: Option<String>,
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Paired Monte Carlo MSE comparison of two toy estimators.
    MseLab {
        #[command(flatten)]
        common: Common,
    },
    /// Write a synthetic view dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Probe { .. } => "probe",
            Command::OodEval { .. } => "ood-eval",
            Command::Sweep { .. } => "sweep",
            Command::MseLab { .. } => "mse-lab",
            Command::GenData { .. } => "gen-data",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Train { common, .. }
            | Command::Probe { common, .. }
            | Command::OodEval { common, .. }
            | Command::Sweep { common, .. }
            | Command::MseLab { common }
            | Command::GenData { common } => common,
        }
    }
}

/// Parse `args` (program name first), run, and return the process exit code.
pub fn run_command<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(dir) => {
            println!("{}: outputs in {}", cli.command.name(), dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Resolve the output directory for a run.
pub fn output_dir(explicit: Option<&Path>, command: &str, seed: u64) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    let base = std::env::var_os(OUTPUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    base.join(format!("{command}-seed{seed}"))
}

/// Run one command and write its manifest, returning the output directory.
pub fn execute(command: &Command) -> Result<PathBuf, HarnessError> {
    let common = command.common();
    let mut config = load_config(&common.config)?;
    if let Some(s) = common.seed {
        config.seed = s;
    }
    if let Command::Sweep { axis, grid, seeds, .. } = command {
        if let Some(a) = axis {
            config.sweep.axis = a.parse::<SweepAxis>()?;
        }
        if let Some(g) = grid {
            config.sweep.grid = g.clone();
        }
        if let Some(k) = seeds {
            config.sweep.seeds = *k;
        }
    }
    config.validate()?;
    let dir = output_dir(common.out.as_deref(), command.name(), config.seed);
    fs::create_dir_all(&dir)?;
    let started = Utc::now();
    let mut out = Outputs { dir: &dir, files: Vec::new() };
    let result = out
        .write("config.toml", config.to_toml()?.as_bytes())
        .and_then(|_| dispatch(command, &config, &mut out));
    let manifest = RunManifest {
        command: command.name().to_string(),
        seed: config.seed,
        config: config.clone(),
        started_at: manifest::timestamp(started),
        finished_at: manifest::timestamp(Utc::now()),
        versions: module_versions(),
        outputs: out.files,
        status: if result.is_ok() { RunStatus::Completed } else { RunStatus::Failed },
        error: result.as_ref().err().map(|e| e.to_string()),
    };
    manifest.save(&dir)?;
    result.map(|_| dir)
}

struct Outputs<'a> {
    dir: &'a Path,
    files: Vec<PathBuf>,
}

impl Outputs<'_> {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), HarnessError> {
        write_atomic(&self.dir.join(name), bytes)?;
        self.files.push(PathBuf::from(name));
        Ok(())
    }

    fn csv<F>(&mut self, name: &str, fill: F) -> Result<(), HarnessError>
    where
        F: FnOnce(&mut Vec<u8>) -> crate::Result<()>,
    {
        let mut buf = Vec::new();
        fill(&mut buf)?;
        self.write(name, &buf)
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), HarnessError> {
        let mut text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }
}

fn dispatch(command: &Command, config: &Config, out: &mut Outputs<'_>) -> Result<(), HarnessError> {
    match command {
        Command::Train { data, .. } => train(config, data.as_deref(), out),
        Command::Probe { encoder, .. } => probe(config, encoder.as_deref(), out),
        Command::OodEval { encoder, .. } => ood_eval(config, encoder.as_deref(), out),
        Command::Sweep { .. } => run_sweep(config, out),
        Command::MseLab { .. } => mse_lab(config, out),
        Command::GenData { .. } => gen_data(config, out),
    }
}

fn load_encoder(path: &Path) -> Result<EncoderState, HarnessError> {
    let text = fs::read_to_string(path)
        .map_err(|e| HarnessError::Usage(format!("cannot read encoder {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("encoder {}: {e}", path.display())))
}

fn check_input_dim(encoder: &EncoderState, dim: usize) -> Result<(), HarnessError> {
    if encoder.input_dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: encoder.input_dim(),
        }
        .into());
    }
    Ok(())
}

fn train(config: &Config, data: Option<&Path>, out: &mut Outputs<'_>) -> Result<(), HarnessError> {
    let spec = ToyWorldSpec::new(config.world.clone(), config.seed)?;
    let set = match data {
        Some(dir) => TrainingSet::load(dir)?,
        None => generate(&spec, config.seed)?.training_set(),
    };
    let eval = match config.eval.every {
        Some(_) => Some(eval_instances(&spec, config.eval.instances, config.seed)?),
        None => None,
    };
    let (encoder, history) = fit_with_monitor(&config.train, &set, config.seed, |epoch, state| {
        let every = config.eval.every?;
        let eval = eval.as_ref()?;
        ((epoch + 1) % every == 0)
            .then(|| probe_encoder(state, eval, &config.probe, config.seed).ok().map(|p| p.test_accuracy))
            .flatten()
    })?;
    let weights = dataset_weights(&encoder, &set, &config.train.weights)?;
    out.csv("history.csv", |b| history.write_csv(b))?;
    out.csv("weights.csv", |b| weights.write_csv(b))?;
    out.json("encoder.json", &encoder)
}

fn trained_encoder(config: &Config, weighting: Weighting) -> Result<EncoderState, HarnessError> {
    let spec = ToyWorldSpec::new(config.world.clone(), config.seed)?;
    let set = generate(&spec, config.seed)?.training_set();
    let train = TrainConfig {
        weighting,
        ..config.train.clone()
    };
    Ok(fit_with_monitor(&train, &set, config.seed, |_, _| None)?.0)
}

#[derive(Serialize)]
struct ProbeRow {
    seed: u64,
    method: String,
    train_acc: f64,
    test_acc: f64,
}

fn probe(config: &Config, encoder: Option<&Path>, out: &mut Outputs<'_>) -> Result<(), HarnessError> {
    let spec = ToyWorldSpec::new(config.world.clone(), config.seed)?;
    let eval = eval_instances(&spec, config.eval.instances, config.seed)?;
    let encoders = match encoder {
        Some(p) => vec![("loaded".to_string(), load_encoder(p)?)],
        None => [Weighting::Uota, Weighting::Uniform]
            .into_iter()
            .map(|w| Ok((w.name().to_string(), trained_encoder(config, w)?)))
            .collect::<Result<_, HarnessError>>()?,
    };
    let mut rows = Vec::new();
    for (method, enc) in encoders {
        check_input_dim(&enc, config.world.input_dim)?;
        let r = probe_encoder(&enc, &eval, &config.probe, config.seed)?;
        rows.push(ProbeRow {
            seed: config.seed,
            method,
            train_acc: r.train_accuracy,
            test_acc: r.test_accuracy,
        });
    }
    out.csv("probe.csv", |b| {
        let mut w = csv::Writer::from_writer(b);
        for r in &rows {
            w.serialize(r).map_err(|e| Error::arg("csv", e.to_string()))?;
        }
        w.flush().map_err(|e| Error::arg("csv", e.to_string()))
    })
}

fn ood_eval(config: &Config, encoder: Option<&Path>, out: &mut Outputs<'_>) -> Result<(), HarnessError> {
    let spec = ToyWorldSpec::new(config.world.clone(), config.seed)?;
    let dataset = generate(&spec, config.seed)?;
    let (method, enc) = match encoder {
        Some(p) => ("loaded".to_string(), load_encoder(p)?),
        None => (
            config.train.weighting.name().to_string(),
            trained_encoder(config, config.train.weighting)?,
        ),
    };
    check_input_dim(&enc, config.world.input_dim)?;
    let set = dataset.training_set();
    let weights = dataset_weights(&enc, &set, &config.train.weights)?;
    let flagged = dataset.flagged_count();
    let auroc = if flagged > 0 && flagged < dataset.num_views() {
        Some(weight_ood_auroc(&weights, dataset.ood_flags())?)
    } else {
        None
    };
    let features = enc.encode(set.views.view())?;
    let groups = quantile_group_separability(
        features.view(),
        weights.normalized(),
        CleanPool::Unflagged(dataset.ood_flags()),
        config.eval.groups,
        &config.probe,
        &mut rng::substream(config.seed, rng::EVAL, 2),
    )?;
    out.csv("weights.csv", |b| weights.write_csv(b))?;
    out.csv("auroc.csv", |b| {
        let mut w = csv::Writer::from_writer(b);
        let err = |e: csv::Error| Error::arg("csv", e.to_string());
        w.write_record(["seed", "method", "auroc"]).map_err(err)?;
        w.write_record([config.seed.to_string(), method, auroc.map_or_else(String::new, |a| a.to_string())])
            .map_err(err)?;
        w.flush().map_err(|e| Error::arg("csv", e.to_string()))
    })?;
    out.csv("groups.csv", |b| groups.write_csv(b))
}

fn run_sweep(config: &Config, out: &mut Outputs<'_>) -> Result<(), HarnessError> {
    let s = &config.sweep;
    let rows = sweep(s.axis, &s.grid, &config.pipeline(), s.seeds, config.seed)?;
    out.csv("probe.csv", |b| write_probe_csv(&rows, b))?;
    out.csv("auroc.csv", |b| write_auroc_csv(&rows, b))
}

#[derive(Serialize)]
struct MseSummary<'a> {
    baseline: &'a str,
    candidate: &'a str,
    seeds: usize,
    trials_per_seed: usize,
    wins: usize,
    losses: usize,
    ties: usize,
    win_fraction: f64,
    sign_test_p: f64,
    mean_mse_baseline: f64,
    mean_mse_candidate: f64,
}

fn mse_lab(config: &Config, out: &mut Outputs<'_>) -> Result<(), HarnessError> {
    let (b, c) = config.mselab.specs();
    let report = paired_mse_comparison(&b, &c, config.mselab.seeds, config.seed)?;
    out.csv("comparison.csv", |buf| report.write_csv(buf))?;
    out.json(
        "summary.json",
        &MseSummary {
            baseline: &report.baseline,
            candidate: &report.candidate,
            seeds: report.seeds.len(),
            trials_per_seed: b.trials,
            wins: report.wins,
            losses: report.losses,
            ties: report.ties,
            win_fraction: report.win_fraction,
            sign_test_p: report.sign_test_p,
            mean_mse_baseline: report.mean_mse_baseline,
            mean_mse_candidate: report.mean_mse_candidate,
        },
    )
}

fn gen_data(config: &Config, out: &mut Outputs<'_>) -> Result<(), HarnessError> {
    let spec = ToyWorldSpec::new(config.world.clone(), config.seed)?;
    let dataset = generate(&spec, config.seed)?;
    for path in dataset.save(out.dir, &spec, config.seed)? {
        let name = path.strip_prefix(out.dir).unwrap_or(&path).to_path_buf();
        out.files.push(name);
    }
    Ok(())
}
