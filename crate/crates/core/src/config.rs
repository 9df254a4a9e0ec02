//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Setting `example`
//! loads the defaults of a built-in experiment; other keys override them.
//!
//! | key | value |
//! |---|---|
//! | `example` | `lorenz-full`, `lorenz-partial`, `van-der-pol` |
//! | `physics` | `zero:<n>`, `linear:<row>;<row>` (rows comma separated), `lorenz:<sigma>,<rho>,<beta>`, `van-der-pol:<A>,<mu>,<omega>`, `forced-oscillator:<A>,<omega>` |
//! | `network` | `none`, `polynomial:<degree>`, `elu:<n0>-<n1>-...-<nL>` |
//! | `channels` | comma-separated channel names, in state order |
//! | `t_end` | horizon of generated data (examples only) |
//! | `noise_variance` | variance of generated noise (examples only) |
//! | `dt`, `wx`, `wy`, `mu_x`, `mu_a` | grid step and weights |
//! | `lambda0`, `rho1`, `rho2`, `sigma`, `max_iters`, `lambda_max` | solver settings |
//! | `batches` | number of batches or `auto` |
//! | `workers` | worker threads, `0` for all cores |
//! | `criterion` | `aic`, `bic`, `cost-limit:<kappa>`, `cross-validation[:<fraction>]` |
//! | `staged` | `true` or `false` |
//! | `max_rounds` | cap on pruning rounds or `none` |
//! | `seed` | seed for parameter initialization and generated noise |
//! | `data` | measurement CSV (relative to the config file) |
//! | `out` | output directory (relative to the config file) |

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::default_channel_names;
use crate::error::{Error, Result};
use crate::experiments::{Builtin, ExperimentSpec};
use crate::lm::LmConfig;
use crate::model::{Architecture, Physics, PhysicsSpec};
use crate::sparsify::Criterion;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub example: Option<Builtin>,
    pub physics: PhysicsSpec,
    pub network: Option<Architecture>,
    pub channels: Vec<String>,
    pub t_end: Option<f64>,
    pub noise_variance: Option<f64>,
    pub dt: f64,
    pub wx: f64,
    pub wy: f64,
    pub mu_x: f64,
    pub mu_a: f64,
    pub lm: LmConfig,
    pub batches: Option<usize>,
    pub workers: usize,
    pub criterion: Criterion,
    pub staged: bool,
    pub max_rounds: Option<usize>,
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub out: PathBuf,
}

const KEYS: &[&str] = &[
    "example",
    "physics",
    "network",
    "channels",
    "t_end",
    "noise_variance",
    "dt",
    "wx",
    "wy",
    "mu_x",
    "mu_a",
    "lambda0",
    "rho1",
    "rho2",
    "sigma",
    "max_iters",
    "lambda_max",
    "batches",
    "workers",
    "criterion",
    "staged",
    "max_rounds",
    "seed",
    "data",
    "out",
];

fn bad(key: &str, value: &str) -> Error {
    Error::Config(format!("invalid value `{value}` for `{key}`"))
}

fn number<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value))
}

fn numbers(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|v| number(key, v.trim())).collect()
}

fn fixed<const N: usize>(key: &str, value: &str) -> Result<[f64; N]> {
    numbers(key, value)?.try_into().map_err(|_| bad(key, value))
}

pub fn parse_physics(value: &str) -> Result<PhysicsSpec> {
    let key = "physics";
    let (kind, args) = value.split_once(':').unwrap_or((value, ""));
    Ok(match kind.trim() {
        "zero" => PhysicsSpec::Zero { n_x: number(key, args.trim())? },
        "linear" => {
            let matrix: Vec<Vec<f64>> = args.split(';').map(|r| numbers(key, r)).collect::<Result<_>>()?;
            if matrix.iter().any(|r| r.len() != matrix.len()) {
                return Err(Error::Config("linear physics needs a square matrix".into()));
            }
            PhysicsSpec::Linear { matrix }
        }
        "lorenz" => {
            let [sigma, rho, beta] = fixed(key, args)?;
            PhysicsSpec::Lorenz { sigma, rho, beta }
        }
        "van-der-pol" => {
            let [amplitude, mu, omega] = fixed(key, args)?;
            PhysicsSpec::VanDerPol { amplitude, mu, omega }
        }
        "forced-oscillator" => {
            let [amplitude, omega] = fixed(key, args)?;
            PhysicsSpec::ForcedOscillator { amplitude, omega }
        }
        _ => return Err(bad(key, value)),
    })
}

/// `n_x` fixes the input and output width of polynomial networks.
pub fn parse_network(value: &str, n_x: usize) -> Result<Option<Architecture>> {
    let key = "network";
    let (kind, args) = value.split_once(':').unwrap_or((value, ""));
    Ok(match kind.trim() {
        "none" => None,
        "polynomial" => Some(Architecture::Polynomial { n_in: n_x, n_out: n_x, degree: number(key, args.trim())? }),
        "elu" => Some(Architecture::FeedforwardElu { layers: args.split('-').map(|v| number(key, v.trim())).collect::<Result<_>>()? }),
        _ => return Err(bad(key, value)),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, value)),
    }
}

fn optional<T: std::str::FromStr>(key: &str, value: &str, none: &str) -> Result<Option<T>> {
    if value == none {
        Ok(None)
    } else {
        number(key, value).map(Some)
    }
}

impl RunConfig {
    fn from_example(which: Builtin) -> Self {
        let spec = ExperimentSpec::builtin(which);
        RunConfig {
            example: Some(which),
            channels: default_channel_names(spec.n_x()),
            physics: spec.physics,
            network: Some(spec.network),
            t_end: None,
            noise_variance: None,
            dt: spec.dt,
            wx: spec.wx,
            wy: spec.wy,
            mu_x: spec.mu_x,
            mu_a: spec.mu_a,
            lm: LmConfig::default(),
            batches: None,
            workers: 0,
            criterion: spec.criterion,
            staged: spec.staged,
            max_rounds: None,
            seed: 0,
            data: None,
            out: PathBuf::from("out"),
        }
    }

    fn custom(physics: PhysicsSpec) -> Self {
        RunConfig {
            example: None,
            channels: default_channel_names(physics.n_x()),
            network: None,
            physics,
            t_end: None,
            noise_variance: None,
            dt: 1e-2,
            wx: 1.0,
            wy: 1.0,
            mu_x: 0.0,
            mu_a: 1e-3,
            lm: LmConfig::default(),
            batches: None,
            workers: 0,
            criterion: Criterion::Aic,
            staged: false,
            max_rounds: None,
            seed: 0,
            data: None,
            out: PathBuf::from("out"),
        }
    }

    /// Parses the text of a config file. Relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(Error::Config(format!("line {}: unknown key `{k}`", n + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
        }
        let mut cfg = match (entries.remove("example"), entries.remove("physics")) {
            (Some(e), None) => Self::from_example(Builtin::parse(&e)?),
            (Some(e), Some(p)) => RunConfig { physics: parse_physics(&p)?, ..Self::from_example(Builtin::parse(&e)?) },
            (None, Some(p)) => Self::custom(parse_physics(&p)?),
            (None, None) => return Err(Error::Config("either `example` or `physics` is required".into())),
        };
        let n_x = cfg.physics.n_x();
        if cfg.channels.len() != n_x {
            cfg.channels = default_channel_names(n_x);
        }
        for (k, v) in &entries {
            let (k, v) = (k.as_str(), v.as_str());
            match k {
                "network" => cfg.network = parse_network(v, n_x)?,
                "channels" => cfg.channels = v.split(',').map(|c| c.trim().to_string()).collect(),
                "t_end" => cfg.t_end = Some(number(k, v)?),
                "noise_variance" => cfg.noise_variance = Some(number(k, v)?),
                "dt" => cfg.dt = number(k, v)?,
                "wx" => cfg.wx = number(k, v)?,
                "wy" => cfg.wy = number(k, v)?,
                "mu_x" => cfg.mu_x = number(k, v)?,
                "mu_a" => cfg.mu_a = number(k, v)?,
                "lambda0" => cfg.lm.lambda0 = number(k, v)?,
                "rho1" => cfg.lm.rho1 = number(k, v)?,
                "rho2" => cfg.lm.rho2 = number(k, v)?,
                "sigma" => cfg.lm.sigma = optional(k, v, "auto")?,
                "max_iters" => cfg.lm.max_iters = number(k, v)?,
                "lambda_max" => cfg.lm.lambda_max = number(k, v)?,
                "batches" => cfg.batches = optional(k, v, "auto")?,
                "workers" => cfg.workers = number(k, v)?,
                "criterion" => cfg.criterion = Criterion::parse(v)?,
                "staged" => cfg.staged = parse_bool(k, v)?,
                "max_rounds" => cfg.max_rounds = optional(k, v, "none")?,
                "seed" => cfg.seed = number(k, v)?,
                "data" => cfg.data = Some(base.join(v)),
                "out" => cfg.out = base.join(v),
                _ => unreachable!("keys are checked above"),
            }
        }
        if !entries.contains_key("out") {
            cfg.out = base.join(&cfg.out);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [("dt", self.dt), ("wx", self.wx), ("wy", self.wy)];
        for (k, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("`{k}` must be positive")));
            }
        }
        for (k, v) in [("mu_x", self.mu_x), ("mu_a", self.mu_a)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("`{k}` must be >= 0")));
            }
        }
        if let Some(t) = self.t_end {
            if !(t > 0.0) {
                return Err(Error::Config("`t_end` must be positive".into()));
            }
        }
        if let Some(v) = self.noise_variance {
            if !(v >= 0.0) {
                return Err(Error::Config("`noise_variance` must be >= 0".into()));
            }
        }
        if (self.t_end.is_some() || self.noise_variance.is_some()) && self.example.is_none() {
            return Err(Error::Config("`t_end` and `noise_variance` only apply to examples".into()));
        }
        if self.batches == Some(0) {
            return Err(Error::Config("`batches` must be >= 1".into()));
        }
        if self.max_rounds == Some(0) {
            return Err(Error::Config("`max_rounds` must be >= 1".into()));
        }
        if self.lm.max_iters == 0 {
            return Err(Error::Config("`max_iters` must be >= 1".into()));
        }
        self.lm.validate()?;
        self.criterion.validate()?;
        let n_x = self.physics.n_x();
        if n_x == 0 {
            return Err(Error::Config("the model needs at least one state".into()));
        }
        if self.channels.len() != n_x {
            return Err(Error::Config(format!("{} channel names for {n_x} states", self.channels.len())));
        }
        if let Some(Architecture::FeedforwardElu { layers }) = &self.network {
            if layers.len() < 2 || layers[0] != n_x || *layers.last().unwrap() != n_x || layers.contains(&0) {
                return Err(Error::Config(format!("network layers must start and end with {n_x} and be nonzero")));
            }
        }
        if self.data.is_none() && self.example.is_none() {
            return Err(Error::Config("`data` is required unless an example is selected".into()));
        }
        Ok(())
    }

    /// The experiment that generates data when no data file is given.
    pub fn experiment(&self) -> Option<ExperimentSpec> {
        let which = self.example?;
        let mut spec = ExperimentSpec::builtin(which);
        if let Some(t) = self.t_end {
            spec.t_end = t;
        }
        if let Some(v) = self.noise_variance {
            spec.noise_variance = v;
        }
        Some(spec)
    }
}
