//! Experiment configuration: a flat TOML table, optionally inheriting from a
//! named preset, plus the preset registry.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::market::{BlackScholes, Heston, MarketError, ModelSpec, TimeGrid};
use crate::payoff::{PayoffError, PayoffKind, PayoffSpec};
use crate::problem::Problem;
use crate::trainer::TrainPlan;

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid configuration: {}", .0.join("; "))]
    Validation(Vec<String>),
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    BlackScholes,
    Heston,
}

macro_rules! config_struct {
    ($( $(#[doc = $doc:literal])* $field:ident : $ty:ty, )*) => {
        /// Everything needed to train and evaluate one experiment.
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct ExperimentConfig {
            $( $(#[doc = $doc])* pub $field: $ty, )*
        }

        /// A config file: any subset of the fields, plus an optional preset.
        #[derive(Debug, Clone, Default, PartialEq, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct PartialConfig {
            pub preset: Option<String>,
            $( pub $field: Option<$ty>, )*
        }

        impl PartialConfig {
            /// Overrides the fields of `base` that are set here.
            pub fn apply(self, base: &mut ExperimentConfig) {
                $( if let Some(v) = self.$field { base.$field = v; } )*
            }

            /// A complete config from this file alone.
            fn complete(self) -> Result<ExperimentConfig, ConfigError> {
                let mut missing = Vec::new();
                $( if self.$field.is_none() { missing.push(format!("missing field `{}`", stringify!($field))); } )*
                if !missing.is_empty() {
                    return Err(ConfigError::Validation(missing));
                }
                Ok(ExperimentConfig { $( $field: self.$field.unwrap(), )* })
            }
        }
    };
}

config_struct! {
    /// Label written to result files.
    name: String,
    model: ModelKind,
    payoff: PayoffKind,
    dim: usize,
    /// Initial value of every asset; the Heston spot.
    x0: f64,
    strike: f64,
    rate: f64,
    dividend: f64,
    sigma: f64,
    rho: f64,
    /// Full volatility matrix `F` in `sigma(x) = diag(x) F`; empty to use
    /// `sigma` and `rho`.
    volatility_matrix: Vec<Vec<f64>>,
    kappa: f64,
    theta: f64,
    nu: f64,
    v0: f64,
    horizon: f64,
    steps: usize,
    /// Fine substeps `J` for the upper bound.
    substeps: usize,
    widths: Vec<usize>,
    input_norm: bool,
    batch: usize,
    steps_per_epoch: usize,
    /// Epochs for `k <= N-2`; doubled at `k = N-1`.
    epochs: usize,
    learning_rate: f64,
    last_learning_rate: f64,
    decay_horizon: f64,
    last_decay_horizon: f64,
    lower_paths: usize,
    upper_paths: usize,
    /// Seed of the training, initialization and shuffling streams.
    seed: u64,
    /// Seed of the lower- and upper-bound streams.
    bound_seed: u64,
    /// Fine levels reported by the upper-bound refinement study.
    refine_levels: Vec<usize>,
}

/// Reduced-scale sizes used for desk-top runs.
pub const REDUCED_BATCH: usize = 4096;
pub const REDUCED_STEPS_PER_EPOCH: usize = 150;
pub const REDUCED_LOWER_PATHS: usize = 1 << 17;
pub const REDUCED_UPPER_PATHS: usize = 1 << 13;
pub const REDUCED_SUBSTEPS: usize = 8;

const STRANGLE_MATRIX: [[f64; 5]; 5] = [
    [0.3024, 0.1354, 0.0722, 0.1367, 0.1641],
    [0.1354, 0.2270, 0.0613, 0.1264, 0.1610],
    [0.0722, 0.0613, 0.0717, 0.0884, 0.0699],
    [0.1367, 0.1264, 0.0884, 0.2937, 0.1394],
    [0.1641, 0.1610, 0.0699, 0.1394, 0.2535],
];

fn base(name: &str) -> ExperimentConfig {
    ExperimentConfig {
        name: name.into(),
        model: ModelKind::BlackScholes,
        payoff: PayoffKind::GeometricBasketCall,
        dim: 3,
        x0: 100.0,
        strike: 100.0,
        rate: 0.0,
        dividend: 0.0,
        sigma: 0.0,
        rho: 0.0,
        volatility_matrix: Vec::new(),
        kappa: 0.0,
        theta: 0.0,
        nu: 0.0,
        v0: 0.0,
        horizon: 1.0,
        steps: 50,
        substeps: 32,
        widths: vec![64, 64],
        input_norm: false,
        batch: 8192,
        steps_per_epoch: 400,
        epochs: 1,
        learning_rate: 0.01,
        last_learning_rate: 0.01,
        decay_horizon: 500.0,
        last_decay_horizon: 1000.0,
        lower_paths: 1 << 21,
        upper_paths: 1 << 15,
        seed: 1,
        bound_seed: 1001,
        refine_levels: vec![1, 8, 32],
    }
}

pub fn preset_names() -> Vec<String> {
    let mut names: Vec<String> = ["geobask-d3", "geobask-d20", "geobask-d100", "geobask-d200", "strangle-d5"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend(["heston-s9", "heston-s10", "heston-s11"].iter().map(|s| s.to_string()));
    for d in [2, 5, 10] {
        names.push(format!("maxcall-d{d}"));
        names.push(format!("maxcall-d{d}-x90"));
        names.push(format!("maxcall-d{d}-x110"));
    }
    names
}

/// Paper-scale preset.
pub fn preset(name: &str) -> Result<ExperimentConfig, ConfigError> {
    let unknown = || ConfigError::UnknownPreset(name.to_string());
    let mut c = base(name);
    if let Some(d) = name.strip_prefix("geobask-d") {
        let d: usize = d.parse().map_err(|_| unknown())?;
        let (width, batch, nsteps, epochs) = match d {
            3 => (32, 8192, 300, 1),
            20 => (64, 8192, 300, 1),
            100 => (128, 8192, 100, 3),
            200 => (128, 4096, 100, 4),
            _ => return Err(unknown()),
        };
        c.dim = d;
        c.dividend = 0.02;
        c.sigma = 0.25;
        c.rho = 0.75;
        c.horizon = 2.0;
        c.steps = 50;
        c.widths = vec![width, width];
        c.batch = batch;
        c.steps_per_epoch = nsteps;
        c.epochs = epochs;
    } else if name == "strangle-d5" {
        c.payoff = PayoffKind::StrangleSpread;
        c.dim = 5;
        c.rate = 0.05;
        c.volatility_matrix = STRANGLE_MATRIX.iter().map(|r| r.to_vec()).collect();
        c.horizon = 1.0;
        c.steps = 48;
        c.steps_per_epoch = 400;
    } else if let Some(s) = name.strip_prefix("heston-s") {
        let s0: f64 = match s {
            "9" => 9.0,
            "10" => 10.0,
            "11" => 11.0,
            _ => return Err(unknown()),
        };
        c.model = ModelKind::Heston;
        c.payoff = PayoffKind::HestonPut;
        c.dim = 2;
        c.x0 = s0;
        c.strike = 10.0;
        c.rate = 0.1;
        c.kappa = 5.0;
        c.theta = 0.16;
        c.nu = 0.9;
        c.rho = 0.1;
        c.v0 = 0.0625;
        c.horizon = 0.25;
        c.steps = 50;
        c.steps_per_epoch = 200;
        c.lower_paths = 1 << 22;
    } else if let Some(rest) = name.strip_prefix("maxcall-d") {
        let (d, x0) = match rest.split_once("-x") {
            Some((d, x)) => (d, x),
            None => (rest, "100"),
        };
        let d: usize = d.parse().map_err(|_| unknown())?;
        let x0: f64 = match x0 {
            "90" | "100" | "110" => x0.parse().unwrap(),
            _ => return Err(unknown()),
        };
        if ![2, 5, 10].contains(&d) {
            return Err(unknown());
        }
        c.payoff = PayoffKind::MaxCall;
        c.dim = d;
        c.x0 = x0;
        c.rate = 0.05;
        c.dividend = 0.1;
        c.sigma = 0.2;
        c.horizon = 3.0;
        c.steps = 100;
        c.steps_per_epoch = 400;
        if d == 10 {
            c.last_learning_rate = 0.1;
        }
    } else {
        return Err(unknown());
    }
    Ok(c)
}

impl ExperimentConfig {
    /// Switches to the reduced desk-top scale.
    pub fn reduced(mut self) -> Self {
        self.batch = REDUCED_BATCH;
        self.steps_per_epoch = REDUCED_STEPS_PER_EPOCH;
        self.lower_paths = REDUCED_LOWER_PATHS;
        self.upper_paths = REDUCED_UPPER_PATHS;
        self.substeps = REDUCED_SUBSTEPS;
        self.refine_levels = vec![1, REDUCED_SUBSTEPS];
        self
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let partial: PartialConfig = toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
            ConfigError::Parse { line, column, message: e.message().to_string() }
        })?;
        let cfg = match partial.preset.clone() {
            Some(name) => {
                let mut cfg = preset(&name)?;
                partial.apply(&mut cfg);
                cfg
            }
            None => partial.complete()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut v = Vec::new();
        let mut need = |ok: bool, msg: &str| {
            if !ok {
                v.push(msg.to_string());
            }
        };
        need(self.dim >= 1, "dim must be at least 1");
        need(self.steps >= 1, "steps must be at least 1");
        need(self.substeps >= 1, "substeps must be at least 1");
        need(self.horizon > 0.0 && self.horizon.is_finite(), "horizon must be positive");
        need(self.widths.len() == 2 && !self.widths.contains(&0), "widths must list two positive hidden widths");
        need(self.batch >= 2, "batch must be at least 2");
        need(self.steps_per_epoch >= 1 && self.epochs >= 1, "steps_per_epoch and epochs must be positive");
        need(self.learning_rate > 0.0 && self.last_learning_rate > 0.0, "learning rates must be positive");
        need(self.decay_horizon > 0.0 && self.last_decay_horizon > 0.0, "decay horizons must be positive");
        need(self.lower_paths >= 2 && self.upper_paths >= 2, "lower_paths and upper_paths must be at least 2");
        need(self.x0 > 0.0 && self.strike > 0.0, "x0 and strike must be positive");
        need(!self.refine_levels.contains(&0), "refine_levels must be positive");
        match self.model {
            ModelKind::BlackScholes => {
                need(self.payoff != PayoffKind::HestonPut, "heston-put needs the heston model");
                need(self.sigma >= 0.0, "sigma must be nonnegative");
                if !self.volatility_matrix.is_empty() {
                    need(
                        self.volatility_matrix.len() == self.dim && self.volatility_matrix.iter().all(|r| r.len() == self.dim),
                        "volatility_matrix must be dim x dim",
                    );
                }
            }
            ModelKind::Heston => {
                need(self.payoff == PayoffKind::HestonPut, "the heston model pairs with heston-put");
                need(self.dim == 2, "heston state has dim 2");
            }
        }
        if v.is_empty() {
            if let Err(e) = self.problem() {
                v.push(e.to_string());
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Validation(v))
        }
    }

    pub fn grid(&self) -> Result<TimeGrid, MarketError> {
        TimeGrid::new(self.horizon, self.steps, self.substeps)
    }

    pub fn model_spec(&self) -> Result<ModelSpec, MarketError> {
        match self.model {
            ModelKind::BlackScholes => {
                let x0 = vec![self.x0; self.dim];
                let bs = if self.volatility_matrix.is_empty() {
                    BlackScholes::uniform(self.rate, self.dividend, self.sigma, self.rho, x0)?
                } else {
                    let flat: Vec<f64> = self.volatility_matrix.iter().flatten().copied().collect();
                    let m = Array2::from_shape_vec((self.dim, self.dim), flat).map_err(|_| MarketError::Shape {
                        expected: self.dim,
                        rows: self.volatility_matrix.len(),
                        cols: self.volatility_matrix.first().map_or(0, |r| r.len()),
                    })?;
                    BlackScholes::with_volatility_matrix(self.rate, self.dividend, m, x0)?
                };
                Ok(ModelSpec::BlackScholes(bs))
            }
            ModelKind::Heston => Ok(ModelSpec::Heston(Heston::new(
                self.rate, self.kappa, self.theta, self.nu, self.rho, self.v0,
            )?)),
        }
    }

    pub fn payoff_spec(&self) -> Result<PayoffSpec, PayoffError> {
        let scale = if self.model == ModelKind::Heston { self.x0 } else { 1.0 };
        PayoffSpec::with_spot_scale(self.payoff, self.strike, self.rate, scale, self.dim)
    }

    pub fn problem(&self) -> Result<Problem, String> {
        let model = self.model_spec().map_err(|e| e.to_string())?;
        let payoff = self.payoff_spec().map_err(|e| e.to_string())?;
        let grid = self.grid().map_err(|e| e.to_string())?;
        Problem::new(model, payoff, grid).map_err(|e| e.to_string())
    }

    pub fn train_plan(&self) -> TrainPlan {
        TrainPlan {
            batch: self.batch,
            steps_per_epoch: self.steps_per_epoch,
            epochs: self.epochs,
            widths: self.widths.clone(),
            input_norm: self.input_norm,
            rate: self.learning_rate,
            last_rate: self.last_learning_rate,
            horizon: self.decay_horizon,
            last_horizon: self.last_decay_horizon,
            seed: self.seed,
            config_hash: self.training_hash(),
        }
    }

    /// Hash of the fields that determine the trained networks, so that a
    /// checkpoint is reusable across bound sample sizes and seeds.
    pub fn training_hash(&self) -> String {
        let mut c = self.clone();
        c.name = String::new();
        c.lower_paths = 0;
        c.upper_paths = 0;
        c.bound_seed = 0;
        c.substeps = 1;
        c.refine_levels = Vec::new();
        c.hash()
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_encode_the_hyperparameter_table() {
        let g = preset("geobask-d3").unwrap();
        assert_eq!((g.batch, g.widths.clone(), g.steps_per_epoch, g.epochs), (8192, vec![32, 32], 300, 1));
        assert_eq!(g.train_plan().epochs_at(49, 50), 2);
        let m = preset("maxcall-d5").unwrap();
        assert_eq!((m.batch, m.widths[0], m.steps_per_epoch, m.steps, m.horizon), (8192, 64, 400, 100, 3.0));
        assert_eq!(preset("maxcall-d10").unwrap().last_learning_rate, 0.1);
        assert_eq!(preset("geobask-d200").unwrap().batch, 4096);
        for name in preset_names() {
            preset(&name).unwrap().validate().unwrap();
        }
        assert!(matches!(preset("geobask-d7"), Err(ConfigError::UnknownPreset(_))));
    }

    #[test]
    fn empty_override_is_identity() {
        let c = ExperimentConfig::parse("preset = \"heston-s10\"\n").unwrap();
        assert_eq!(c, preset("heston-s10").unwrap());
    }

    #[test]
    fn round_trip() {
        let c = preset("strangle-d5").unwrap().reduced();
        let back = ExperimentConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn rejects_unknown_keys_with_position() {
        let err = ExperimentConfig::parse("preset = \"geobask-d3\"\nbatchsize = 3\n").unwrap_err();
        match err {
            ConfigError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn validation_lists_violations() {
        let err = ExperimentConfig::parse("preset = \"geobask-d3\"\nbatch = 1\nwidths = [4]\n").unwrap_err();
        match err {
            ConfigError::Validation(v) => assert_eq!(v.len(), 2, "{v:?}"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(ExperimentConfig::parse("dim = 3\n"), Err(ConfigError::Validation(_))));
    }
}
