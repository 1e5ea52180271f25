//! Command-line front end.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::biaslab::{
    self, bias_experiment_stopping_time, bias_experiment_value_iteration, gradient_variance_experiment,
    lattice_price, ExerciseStyle, LatticeModel, LatticePayoff, NoisyExpectationOracle, ThreeDateProblem,
    VarianceConfig,
};
use crate::bounds::{self, BoundEstimate, Region};
use crate::config::{self, ConfigError, ExperimentConfig, ModelKind, VERSION};
use crate::market::{simulate, write_dump};
use crate::neural::Checkpoint;
use crate::payoff::PayoffKind;
use crate::problem::Problem;
use crate::rng::{RandomSpec, Stream};
use crate::trainer::{self, Objective};

#[derive(Debug, Parser)]
#[command(name = "bsde-stopping", version, about = "Deep primal-dual BSDE bounds for Bermudan optimal stopping")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML config file (may name a `preset` to inherit from).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Named preset, used when no config file is given.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Use the reduced desk-top scale.
    #[arg(long, global = true)]
    pub reduced: bool,
    /// Training seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Seed of the bound-estimation streams.
    #[arg(long, global = true)]
    pub bound_seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Sample count for bound estimation (or path count for `simulate`).
    #[arg(long, global = true)]
    pub paths: Option<usize>,
    /// Fine substeps `J` for the upper bound.
    #[arg(long = "fine-grid", global = true)]
    pub fine_grid: Option<usize>,
    /// Checkpoint directory (defaults to `<out>/checkpoint`).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate training paths and write a binary dump.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Train all step networks; writes a checkpoint and a training report.
    Train {
        #[command(flatten)]
        common: Common,
        /// Fit one-step values instead of realized rewards.
        #[arg(long)]
        value_iteration: bool,
    },
    /// Lower bound from a trained checkpoint.
    BoundLower {
        #[command(flatten)]
        common: Common,
    },
    /// Dual upper bound from a trained checkpoint.
    BoundUpper {
        #[command(flatten)]
        common: Common,
    },
    /// Projected deltas at one exercise date.
    Delta {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        step: usize,
    },
    /// Bias and gradient-variance experiments on exact lattice oracles.
    Biaslab {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100_000)]
        replications: usize,
        #[arg(long, default_value_t = 1_000_000)]
        variance_samples: usize,
    },
    /// Binomial-tree reference price of a geometric basket call.
    Reference {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8000)]
        tree_steps: usize,
    },
    /// Train, then estimate both bounds.
    RunExperiment {
        /// Preset name (alternative to --preset or --config).
        name: Option<String>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("checkpoint missing: {0}")]
    CheckpointMissing(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::CheckpointMissing(_) => "checkpoint-missing",
            CliError::Runtime(_) => "runtime",
        }
    }

    /// Machine-readable description for stderr.
    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.to_string(), "exit_code": self.exit_code() })
            .to_string()
    }
}

fn rt<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

impl Common {
    pub fn load(&self, positional: Option<&str>) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match (&self.config, positional.or(self.preset.as_deref())) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(name)) => config::preset(name)?,
            (None, None) => {
                return Err(ConfigError::Validation(vec!["give --config, --preset or a preset name".into()]).into())
            }
        };
        if self.reduced {
            cfg = cfg.reduced();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = self.bound_seed {
            cfg.bound_seed = s;
        }
        if let Some(n) = self.paths {
            cfg.lower_paths = n;
            cfg.upper_paths = n;
        }
        if let Some(j) = self.fine_grid {
            cfg.substeps = j;
            cfg.refine_levels.retain(|&l| j.is_multiple_of(l));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn checkpoint_dir(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("checkpoint"))
    }

    fn install_threads(&self) {
        if let Some(n) = self.threads {
            // a second call fails harmlessly when the pool already exists
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
}

/// Parses `args` and runs the command.
pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
            print!("{e}");
            CliError::Runtime(String::new())
        }
        _ => CliError::Config(ConfigError::Validation(vec![e.to_string()])),
    });
    let cli = match cli {
        Ok(c) => c,
        Err(CliError::Runtime(m)) if m.is_empty() => return Ok(()),
        Err(e) => return Err(e),
    };
    dispatch(cli.command)
}

pub fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Simulate { common } => cmd_simulate(&common),
        Command::Train { common, value_iteration } => {
            let objective = if value_iteration { Objective::ValueIteration } else { Objective::Bsde };
            cmd_train(&common, objective).map(|_| ())
        }
        Command::BoundLower { common } => cmd_lower(&common).map(|_| ()),
        Command::BoundUpper { common } => cmd_upper(&common).map(|_| ()),
        Command::Delta { common, step } => cmd_delta(&common, step),
        Command::Biaslab { common, replications, variance_samples } => cmd_biaslab(&common, replications, variance_samples),
        Command::Reference { common, tree_steps } => cmd_reference(&common, tree_steps),
        Command::RunExperiment { name, common } => cmd_run_experiment(&common, name.as_deref()),
    }
}

fn problem_of(cfg: &ExperimentConfig) -> Result<Problem, CliError> {
    cfg.problem().map_err(|e| CliError::Config(ConfigError::Validation(vec![e])))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(rt)
}

fn provenance(cfg: &ExperimentConfig) -> Vec<(&'static str, String)> {
    vec![("config_hash", cfg.hash()), ("version", VERSION.to_string())]
}

fn write_config(cfg: &ExperimentConfig, dir: &Path) -> Result<(), CliError> {
    let text = format!("# config_hash = {}\n# {}\n{}", cfg.hash(), VERSION, cfg.to_toml());
    std::fs::write(dir.join("config.toml"), text).map_err(rt)
}

fn cmd_simulate(common: &Common) -> Result<(), CliError> {
    common.install_threads();
    let cfg = common.load(None)?;
    let problem = problem_of(&cfg)?;
    ensure_dir(&common.out)?;
    let count = common.paths.unwrap_or(cfg.batch * cfg.steps_per_epoch);
    let fine = common.fine_grid.is_some();
    let paths = simulate(&problem.model, &problem.grid, count, RandomSpec::new(cfg.seed, Stream::Train), fine);
    let file = common.out.join("paths.bin");
    write_dump(&file, &paths).map_err(rt)?;
    write_config(&cfg, &common.out)?;
    println!("wrote {} paths to {}", count, file.display());
    Ok(())
}

fn cmd_train(common: &Common, objective: Objective) -> Result<Checkpoint, CliError> {
    common.install_threads();
    let cfg = common.load(None)?;
    train_into(&cfg, &common.out, &common.checkpoint_dir(), objective)
}

fn train_into(cfg: &ExperimentConfig, out: &Path, ck_dir: &Path, objective: Objective) -> Result<Checkpoint, CliError> {
    let problem = problem_of(cfg)?;
    ensure_dir(out)?;
    let (checkpoint, report) = trainer::train_all(&problem, &cfg.train_plan(), objective).map_err(rt)?;
    checkpoint.save(ck_dir).map_err(rt)?;
    let mut extra = provenance(cfg);
    extra.push(("seed", cfg.seed.to_string()));
    report.write_csv(&out.join("training_report.csv"), &extra).map_err(rt)?;
    write_config(cfg, out)?;
    if let Some(note) = &report.note {
        println!("{note}");
    }
    println!(
        "trained {} step networks in {:.1} s; checkpoint at {}",
        checkpoint.len(),
        report.wall_ms as f64 / 1000.0,
        ck_dir.display()
    );
    Ok(checkpoint)
}

fn load_checkpoint(dir: &Path, cfg: &ExperimentConfig) -> Result<Checkpoint, CliError> {
    if !dir.join("manifest.json").exists() {
        return Err(CliError::CheckpointMissing(dir.display().to_string()));
    }
    let ck = Checkpoint::load(dir).map_err(rt)?;
    if ck.meta.config_hash != cfg.training_hash() {
        eprintln!(
            "warning: checkpoint was trained with config {} but the current config is {}",
            ck.meta.config_hash,
            cfg.training_hash()
        );
    }
    Ok(ck)
}

/// One row of the results CSV.
#[derive(Debug, Clone, Serialize)]
pub struct ResultRow {
    pub preset: String,
    pub kind: String,
    pub estimate: f64,
    pub std: f64,
    pub halfwidth: f64,
    pub n: usize,
    #[serde(rename = "J")]
    pub substeps: usize,
    pub train_seed: u64,
    pub bound_seed: u64,
    pub wall_ms: u64,
    pub config_hash: String,
    pub version: String,
}

impl ResultRow {
    fn new(cfg: &ExperimentConfig, b: &BoundEstimate, wall_ms: u64) -> Self {
        Self {
            preset: cfg.name.clone(),
            kind: b.kind.label().into(),
            estimate: b.estimate,
            std: b.std,
            halfwidth: b.halfwidth,
            n: b.n,
            substeps: b.substeps,
            train_seed: cfg.seed,
            bound_seed: cfg.bound_seed,
            wall_ms,
            config_hash: cfg.hash(),
            version: VERSION.into(),
        }
    }
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(rt)?;
    for r in rows {
        w.serialize(r).map_err(rt)?;
    }
    w.flush().map_err(rt)
}

fn cmd_lower(common: &Common) -> Result<Vec<ResultRow>, CliError> {
    common.install_threads();
    let cfg = common.load(None)?;
    let ck = load_checkpoint(&common.checkpoint_dir(), &cfg)?;
    let rows = lower_rows(&cfg, &ck)?;
    ensure_dir(&common.out)?;
    write_results(&common.out.join("lower.csv"), &rows)?;
    print_bound(&rows[0]);
    Ok(rows)
}

fn lower_rows(cfg: &ExperimentConfig, ck: &Checkpoint) -> Result<Vec<ResultRow>, CliError> {
    let problem = problem_of(cfg)?;
    let clock = Instant::now();
    let lb = bounds::lower_bound(ck, &problem, cfg.lower_paths, cfg.bound_seed).map_err(rt)?;
    Ok(vec![ResultRow::new(cfg, &lb.estimate, clock.elapsed().as_millis() as u64)])
}

fn upper_levels(cfg: &ExperimentConfig) -> Vec<usize> {
    let mut levels: Vec<usize> =
        cfg.refine_levels.iter().copied().filter(|l| cfg.substeps.is_multiple_of(*l)).chain([cfg.substeps]).collect();
    levels.sort_unstable();
    levels.dedup();
    levels
}

fn cmd_upper(common: &Common) -> Result<Vec<ResultRow>, CliError> {
    common.install_threads();
    let cfg = common.load(None)?;
    let ck = load_checkpoint(&common.checkpoint_dir(), &cfg)?;
    let rows = upper_rows(&cfg, &ck)?;
    ensure_dir(&common.out)?;
    write_results(&common.out.join("upper.csv"), &rows)?;
    rows.iter().for_each(print_bound);
    Ok(rows)
}

fn upper_rows(cfg: &ExperimentConfig, ck: &Checkpoint) -> Result<Vec<ResultRow>, CliError> {
    let problem = problem_of(cfg)?;
    let clock = Instant::now();
    let levels = upper_levels(cfg);
    let ests = bounds::upper_bound(ck, &problem, cfg.upper_paths, cfg.bound_seed, &levels).map_err(rt)?;
    let ms = clock.elapsed().as_millis() as u64;
    Ok(ests.iter().map(|b| ResultRow::new(cfg, b, ms)).collect())
}

fn print_bound(r: &ResultRow) {
    println!("{:<14} {:<6} J={:<3} {:.4} (+- {:.4})  n = {}", r.preset, r.kind, r.substeps, r.estimate, r.halfwidth, r.n);
}

fn cmd_delta(common: &Common, step: usize) -> Result<(), CliError> {
    common.install_threads();
    let cfg = common.load(None)?;
    let problem = problem_of(&cfg)?;
    let ck = load_checkpoint(&common.checkpoint_dir(), &cfg)?;
    if step == 0 || step >= problem.steps() {
        return Err(CliError::Runtime(format!("step must lie in 1..{}", problem.steps())));
    }
    let count = common.paths.unwrap_or(4096);
    let paths = simulate(&problem.model, &problem.grid, count, RandomSpec::new(cfg.bound_seed, Stream::Lower), false);
    let states = paths.states_at(step);
    let deltas = bounds::project_delta(&ck, &problem, step, states.view()).map_err(rt)?;
    ensure_dir(&common.out)?;
    let file = common.out.join(format!("delta_k{step}.csv"));
    let mut w = csv::Writer::from_path(&file).map_err(rt)?;
    w.write_record(["config_hash", "train_seed", "bound_seed", "basket", "projected_delta", "region"]).map_err(rt)?;
    for d in deltas {
        let region = match d.region {
            Region::Continuation => "continuation",
            Region::Stopping => "stopping",
        };
        w.write_record([cfg.hash(), cfg.seed.to_string(), cfg.bound_seed.to_string(), d.basket.to_string(), d.delta.to_string(), region.into()])
            .map_err(rt)?;
    }
    w.flush().map_err(rt)?;
    println!("wrote {}", file.display());
    Ok(())
}

fn cmd_biaslab(common: &Common, replications: usize, variance_samples: usize) -> Result<(), CliError> {
    common.install_threads();
    let seed = common.seed.unwrap_or(1);
    let random = RandomSpec::new(seed, Stream::BiasLab);
    let problem = ThreeDateProblem::standard_put(20).map_err(rt)?;
    let mut rows = Vec::new();
    for (i, eta) in [0.0, 0.1, 0.5, 1.0].into_iter().enumerate() {
        let oracle = NoisyExpectationOracle { eta };
        rows.push(bias_experiment_value_iteration(&problem, oracle, replications, random.derive(2 * i as u64)));
        rows.push(bias_experiment_stopping_time(&problem, oracle, replications, random.derive(2 * i as u64 + 1)));
    }
    for r in &rows {
        println!(
            "{:<16} eta = {:<4} bias = {:+.5} (+- {:.5})  p = {:.2e}",
            r.experiment, r.eta, r.mean_bias, r.halfwidth, r.sign_test_p
        );
    }
    ensure_dir(&common.out)?;
    let settings = format!("biaslab replications={replications} variance_samples={variance_samples} seed={seed}");
    let hash: String = Sha256::digest(settings.as_bytes()).iter().take(8).map(|b| format!("{b:02x}")).collect();
    let extra = vec![("config_hash", hash), ("seed", seed.to_string()), ("version", VERSION.to_string())];
    biaslab::write_bias_csv(&common.out.join("bias_report.csv"), &rows, &extra).map_err(rt)?;
    let v = gradient_variance_experiment(&VarianceConfig::standard_put(variance_samples, random.derive(99))).map_err(rt)?;
    println!(
        "gradient variance: least squares {:.4e}, martingale {:.4e}, ratio {:.2}",
        v.var_ls, v.var_bsde, v.ratio
    );
    Ok(())
}

fn cmd_reference(common: &Common, tree_steps: usize) -> Result<(), CliError> {
    let cfg = common.load(None)?;
    if cfg.payoff != PayoffKind::GeometricBasketCall || cfg.model != ModelKind::BlackScholes || !cfg.volatility_matrix.is_empty() {
        return Err(CliError::Runtime("the tree reference covers geometric basket calls with scalar volatility".into()));
    }
    let steps = tree_steps.div_ceil(cfg.steps) * cfg.steps;
    let model = LatticeModel::geometric_basket(cfg.x0, cfg.rate, cfg.dividend, cfg.sigma, cfg.rho, cfg.dim, cfg.horizon, steps)
        .map_err(rt)?;
    let payoff = LatticePayoff::Call { strike: cfg.strike };
    let berm = lattice_price(&model, payoff, ExerciseStyle::Bermudan(cfg.steps)).map_err(rt)?;
    let euro = lattice_price(&model, payoff, ExerciseStyle::European).map_err(rt)?;
    println!("{} tree reference ({steps} steps): bermudan {:.4}, european {:.4}", cfg.name, berm.price, euro.price);
    Ok(())
}

fn cmd_run_experiment(common: &Common, name: Option<&str>) -> Result<(), CliError> {
    common.install_threads();
    let cfg = common.load(name)?;
    let out = &common.out;
    let ck_dir = common.checkpoint_dir();
    let clock = Instant::now();
    let ck = train_into(&cfg, out, &ck_dir, Objective::Bsde)?;
    let train_ms = clock.elapsed().as_millis() as u64;
    let mut rows = lower_rows(&cfg, &ck)?;
    rows.extend(upper_rows(&cfg, &ck)?);
    write_results(&out.join("results.csv"), &rows)?;
    let lower = &rows[0];
    let upper = rows.iter().find(|r| r.kind == "upper" && r.substeps == cfg.substeps).expect("main level present");
    println!("| preset | lower (95% CI) | upper (95% CI) | J | training s |");
    println!(
        "| {} | {:.4} (+- {:.4}) | {:.4} (+- {:.4}) | {} | {:.1} |",
        cfg.name,
        lower.estimate,
        lower.halfwidth,
        upper.estimate,
        upper.halfwidth,
        cfg.substeps,
        train_ms as f64 / 1000.0
    );
    Ok(())
}
