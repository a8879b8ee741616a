//! Plain-text `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use proxflow::datasets::{load_mnist, Empirical, TargetKind, TargetSampler, MNIST_TRAIN_SUBSET};
use proxflow::divergence::{DivergenceConfig, FKind};
use proxflow::flow::{FlowConfig, Mode, StopRule};
use proxflow::nn::{Activation, AdamConfig};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const VERSION: &str = concat!("proxflow ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("missing required key `{0}`")]
    Missing(&'static str),
    #[error("bad value for `{key}`: {reason}")]
    BadValue { key: String, reason: String },
}

/// Every recognised key, in manifest order.
const KEYS: &[&str] = &[
    "mode",
    "lambda",
    "T",
    "K",
    "L",
    "f",
    "widths_U",
    "widths_phi",
    "activation_U",
    "activation_phi",
    "init_scale_U",
    "M",
    "N",
    "N_iter_U",
    "N_phi_iter",
    "lr",
    "lr_phi",
    "penalty_weight",
    "domain_margin",
    "blowup_threshold",
    "indicators",
    "stop_window",
    "stop_residual",
    "stop_terminal",
    "target.kind",
    "target.params",
    "seed",
    "out_dir",
    "code_version",
];

const REQUIRED: &[&str] = &["mode", "target.kind", "out_dir"];

/// Raw key-value pairs, later entries winning.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
    overridden: Vec<String>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut values = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let key = k.trim();
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey(key.to_owned()));
            }
            values.insert(key.to_owned(), v.trim().to_owned());
        }
        Ok(Self {
            values,
            overridden: Vec::new(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Applies a `key=value` override.
    pub fn set_override(&mut self, spec: &str) -> Result<(), ConfigError> {
        let (k, v) = spec.split_once('=').ok_or_else(|| ConfigError::BadValue {
            key: spec.to_owned(),
            reason: "override must be key=value".into(),
        })?;
        let key = k.trim();
        if !KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey(key.to_owned()));
        }
        self.values.insert(key.to_owned(), v.trim().to_owned());
        self.overridden.push(format!("{key}={}", v.trim()));
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            Some(v) => v.parse().map_err(|e: T::Err| ConfigError::BadValue {
                key: key.to_owned(),
                reason: e.to_string(),
            }),
            None => Ok(default),
        }
    }

    fn widths(&self, key: &str, default: &[usize]) -> Result<Vec<usize>, ConfigError> {
        match self.get(key) {
            Some(v) => v
                .split(',')
                .map(|w| {
                    w.trim().parse::<usize>().map_err(|e| ConfigError::BadValue {
                        key: key.to_owned(),
                        reason: e.to_string(),
                    })
                })
                .collect(),
            None => Ok(default.to_vec()),
        }
    }

    /// Fills in defaults and checks every value.
    pub fn resolve(&self) -> Result<RunConfig, ConfigError> {
        for key in REQUIRED {
            if self.get(key).is_none() {
                return Err(ConfigError::Missing(key));
            }
        }
        let base = FlowConfig::default();
        let div_base = DivergenceConfig::default();
        let lr = self.parsed("lr", base.adam.lr)?;
        let lr_phi = self.parsed("lr_phi", lr)?;
        let stop = match self.get("stop_window") {
            Some(_) => Some(StopRule {
                window: self.parsed("stop_window", 50)?,
                residual: self.parsed("stop_residual", StopRule::default().residual)?,
                terminal: self.parsed("stop_terminal", StopRule::default().terminal)?,
            }),
            None => None,
        };
        let flow = FlowConfig {
            lambda: self.parsed("lambda", base.lambda)?,
            horizon: self.parsed("T", base.horizon)?,
            steps: self.parsed("K", base.steps)?,
            mode: self.parsed::<Mode>("mode", base.mode)?,
            batch: self.parsed("M", base.batch)?,
            target_batch: self.parsed("N", self.parsed("M", base.target_batch)?)?,
            iterations: self.parsed("N_iter_U", base.iterations)?,
            seed: self.parsed("seed", base.seed)?,
            potential_widths: self.widths("widths_U", &base.potential_widths)?,
            potential_activation: self.parsed::<Activation>("activation_U", base.potential_activation)?,
            potential_init_scale: self.parsed("init_scale_U", base.potential_init_scale)?,
            discriminator_widths: self.widths("widths_phi", &base.discriminator_widths)?,
            discriminator_activation: self.parsed::<Activation>("activation_phi", base.discriminator_activation)?,
            adam: AdamConfig { lr, ..base.adam },
            blowup_threshold: self.parsed("blowup_threshold", base.blowup_threshold)?,
            indicators: self.parsed("indicators", base.indicators)?,
            stop,
        };
        flow.validate().map_err(|e| ConfigError::BadValue {
            key: "flow".into(),
            reason: e.to_string(),
        })?;
        let divergence = DivergenceConfig {
            f: self.parsed::<FKind>("f", div_base.f)?,
            lipschitz: self.parsed("L", div_base.lipschitz)?,
            penalty_weight: self.parsed("penalty_weight", div_base.penalty_weight)?,
            inner_iters: self.parsed("N_phi_iter", div_base.inner_iters)?,
            domain_margin: self.parsed("domain_margin", div_base.domain_margin)?,
            adam: AdamConfig { lr: lr_phi, ..div_base.adam },
        };
        if !(divergence.lipschitz > 0.0) {
            return Err(ConfigError::BadValue {
                key: "L".into(),
                reason: "must be positive".into(),
            });
        }
        if !(divergence.domain_margin > 0.0) {
            return Err(ConfigError::BadValue {
                key: "domain_margin".into(),
                reason: "must be positive".into(),
            });
        }
        let target = TargetSpec {
            kind: self.get("target.kind").unwrap_or_default().to_owned(),
            params: self.get("target.params").unwrap_or_default().to_owned(),
        };
        target.check()?;
        Ok(RunConfig {
            flow,
            divergence,
            target,
            out_dir: PathBuf::from(self.get("out_dir").unwrap_or_default()),
            overrides: self.overridden.clone(),
        })
    }
}

/// Target distribution as written in the configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSpec {
    pub kind: String,
    pub params: String,
}

/// A built target: a synthetic sampler or a fixed data set.
pub enum Target {
    Synthetic(TargetKind),
    Data(Empirical),
}

impl Target {
    pub fn sampler(&self) -> &dyn TargetSampler {
        match self {
            Target::Synthetic(k) => k,
            Target::Data(d) => d,
        }
    }

    pub fn draw(&self, n: usize, rng: &mut ChaCha8Rng) -> ndarray::Array2<f64> {
        self.sampler().draw(n, rng)
    }

    pub fn kind(&self) -> Option<&TargetKind> {
        match self {
            Target::Synthetic(k) => Some(k),
            Target::Data(_) => None,
        }
    }
}

impl TargetSpec {
    fn check(&self) -> Result<(), ConfigError> {
        if self.kind == "mnist" {
            self.mnist_params().map(|_| ())
        } else {
            TargetKind::parse(&self.kind, &self.params).map(|_| ()).map_err(|e| ConfigError::BadValue {
                key: "target".into(),
                reason: e.to_string(),
            })
        }
    }

    fn mnist_params(&self) -> Result<(PathBuf, usize), ConfigError> {
        let mut path = None;
        let mut n_train = MNIST_TRAIN_SUBSET;
        for part in self.params.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            match part.split_once('=').map(|(k, v)| (k.trim(), v.trim())) {
                Some(("path", v)) => path = Some(PathBuf::from(v)),
                Some(("n_train", v)) => {
                    n_train = v.parse().map_err(|e: std::num::ParseIntError| ConfigError::BadValue {
                        key: "target.params".into(),
                        reason: e.to_string(),
                    })?
                }
                _ => {
                    return Err(ConfigError::BadValue {
                        key: "target.params".into(),
                        reason: format!("unexpected `{part}` for mnist"),
                    })
                }
            }
        }
        let path = path.ok_or_else(|| ConfigError::BadValue {
            key: "target.params".into(),
            reason: "mnist needs path=<idx images file>".into(),
        })?;
        Ok((path, n_train))
    }

    /// Builds the sampler; data sets are loaded with `seed`.
    pub fn build(&self, seed: u64) -> anyhow::Result<Target> {
        if self.kind == "mnist" {
            let (path, n_train) = self.mnist_params()?;
            Ok(Target::Data(Empirical(load_mnist(path, n_train, seed)?)))
        } else {
            Ok(Target::Synthetic(TargetKind::parse(&self.kind, &self.params)?))
        }
    }
}

/// Fully resolved configuration of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub flow: FlowConfig,
    pub divergence: DivergenceConfig,
    pub target: TargetSpec,
    pub out_dir: PathBuf,
    pub overrides: Vec<String>,
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// The configuration as a file that [`RawConfig::parse`] reads back to
    /// the same run.
    pub fn manifest(&self) -> String {
        let f = &self.flow;
        let d = &self.divergence;
        let mut out = String::new();
        let _ = writeln!(out, "# resolved run configuration");
        for o in &self.overrides {
            let _ = writeln!(out, "# override: {o}");
        }
        let stop = f.stop.unwrap_or_default();
        let rows: Vec<(&str, String)> = vec![
            ("mode", f.mode.to_string()),
            ("lambda", f.lambda.to_string()),
            ("T", f.horizon.to_string()),
            ("K", f.steps.to_string()),
            ("L", d.lipschitz.to_string()),
            ("f", d.f.to_string()),
            ("widths_U", join(&f.potential_widths)),
            ("widths_phi", join(&f.discriminator_widths)),
            ("activation_U", f.potential_activation.to_string()),
            ("activation_phi", f.discriminator_activation.to_string()),
            ("init_scale_U", f.potential_init_scale.to_string()),
            ("M", f.batch.to_string()),
            ("N", f.target_batch.to_string()),
            ("N_iter_U", f.iterations.to_string()),
            ("N_phi_iter", d.inner_iters.to_string()),
            ("lr", f.adam.lr.to_string()),
            ("lr_phi", d.adam.lr.to_string()),
            ("penalty_weight", d.penalty_weight.to_string()),
            ("domain_margin", d.domain_margin.to_string()),
            ("blowup_threshold", f.blowup_threshold.to_string()),
            ("indicators", f.indicators.to_string()),
            ("target.kind", self.target.kind.clone()),
            ("target.params", self.target.params.clone()),
            ("seed", f.seed.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("code_version", VERSION.to_owned()),
        ];
        for (k, v) in rows {
            let _ = writeln!(out, "{k} = {v}");
        }
        if f.stop.is_some() {
            let _ = writeln!(out, "stop_window = {}", stop.window);
            let _ = writeln!(out, "stop_residual = {}", stop.residual);
            let _ = writeln!(out, "stop_terminal = {}", stop.terminal);
        }
        out
    }
}
