//! TOML experiment configuration with strict key checking.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{Schedule, SmoothingParams};
use crate::fluid_oracle::{DEFAULT_GAP_TOL, DEFAULT_MAX_ITERS};
use crate::rng::{stream, substream};
use crate::scheduler::SchedulerKind;
use crate::sim_engine::{AcceptanceProfile, EngineConfig, LatencyParams, LEVEL_MAX};
use crate::token_model::{TokenModelPair, MAX_VOCAB};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub clients: usize,
    pub capacity: u32,
    pub rounds: u64,
    #[serde(default = "default_scheduler")]
    pub scheduler: SchedulerKind,
    /// Schedulers run side by side by `compare`.
    #[serde(default)]
    pub compare: Vec<SchedulerKind>,
    #[serde(default)]
    pub utility: UtilityKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub smoothing: SmoothingParams,
    pub profile: ProfileConfig,
    #[serde(default)]
    pub latency: LatencyParams,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_scheduler() -> SchedulerKind {
    SchedulerKind::Goodspeed
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UtilityKind {
    #[default]
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceFormat {
    Csv,
    Jsonl,
}

impl TraceFormat {
    pub fn extension(self) -> &'static str {
        match self {
            TraceFormat::Csv => "csv",
            TraceFormat::Jsonl => "jsonl",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub dir: String,
    #[serde(default = "default_formats")]
    pub formats: Vec<TraceFormat>,
}

fn default_dir() -> String {
    "out".into()
}

fn default_formats() -> Vec<TraceFormat> {
    vec![TraceFormat::Csv]
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: default_dir(),
            formats: default_formats(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    #[serde(default = "default_max_iters")]
    pub max_iters: u64,
    #[serde(default = "default_gap_tol")]
    pub gap_tol: f64,
    /// Restarts of the enumeration cross-check.
    #[serde(default = "default_restarts")]
    pub restarts: usize,
}

fn default_max_iters() -> u64 {
    DEFAULT_MAX_ITERS
}

fn default_gap_tol() -> f64 {
    DEFAULT_GAP_TOL
}

fn default_restarts() -> usize {
    4
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            max_iters: default_max_iters(),
            gap_tol: default_gap_tol(),
            restarts: default_restarts(),
        }
    }
}

/// Per-client values, given either explicitly as `levels` or as a
/// `spread = [lo, hi]` range divided evenly over the clients.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Levels {
    pub levels: Option<Vec<f64>>,
    pub spread: Option<[f64; 2]>,
}

impl Levels {
    pub fn resolve(&self, clients: usize) -> Vec<f64> {
        match (&self.levels, self.spread) {
            (Some(l), _) => l.clone(),
            (None, Some([lo, hi])) => spread(lo, hi, clients),
            (None, None) => Vec::new(),
        }
    }

    fn check(&self, clients: usize) -> Result<()> {
        match (&self.levels, self.spread) {
            (Some(_), Some(_)) => Err(Error::config("profile.spread", "give `levels` or `spread`, not both")),
            (None, None) => Err(Error::config("profile.levels", "missing `levels` or `spread`")),
            (Some(l), None) if l.len() != clients => Err(Error::config(
                "profile.levels",
                format!("{} values for {clients} clients", l.len()),
            )),
            (None, Some([lo, hi])) if !(lo <= hi) => Err(Error::config(
                "profile.spread",
                format!("[{lo}, {hi}] is not an interval"),
            )),
            _ => Ok(()),
        }
    }
}

fn spread(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    // convex form hits both endpoints exactly
    (0..n)
        .map(|i| {
            let f = i as f64 / (n - 1) as f64;
            (1.0 - f) * lo + f * hi
        })
        .collect()
}

// Variants carrying `Levels` spell out its two keys so that unknown keys are
// still rejected; see `ProfileConfig::levels`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProfileConfig {
    Stationary {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        levels: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        spread: Option<[f64; 2]>,
    },
    Piecewise {
        levels: Vec<Vec<f64>>,
        switch_times: Vec<u64>,
    },
    /// `levels`/`spread` give the starting points.
    RandomWalk {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        levels: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        spread: Option<[f64; 2]>,
        step: f64,
        lower: f64,
        upper: f64,
    },
    /// Random draft/target pairs; `levels`/`spread` give per-client divergences.
    TokenMixture {
        vocab_size: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        levels: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        spread: Option<[f64; 2]>,
    },
    /// Pairs with the same acceptance rate in every context.
    TokenConstantRatio {
        vocab_size: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        levels: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        spread: Option<[f64; 2]>,
    },
}

impl ProfileConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            ProfileConfig::Stationary { .. } => "stationary",
            ProfileConfig::Piecewise { .. } => "piecewise",
            ProfileConfig::RandomWalk { .. } => "random_walk",
            ProfileConfig::TokenMixture { .. } => "token_mixture",
            ProfileConfig::TokenConstantRatio { .. } => "token_constant_ratio",
        }
    }

    fn levels(&self) -> Option<Levels> {
        match self {
            ProfileConfig::Stationary { levels, spread }
            | ProfileConfig::RandomWalk { levels, spread, .. }
            | ProfileConfig::TokenMixture { levels, spread, .. }
            | ProfileConfig::TokenConstantRatio { levels, spread, .. } => Some(Levels {
                levels: levels.clone(),
                spread: *spread,
            }),
            ProfileConfig::Piecewise { .. } => None,
        }
    }

    /// Builds the engine profile. Token-model pairs are drawn from per-client
    /// substreams of `seed`.
    pub fn build(&self, clients: usize, seed: u64) -> Result<AcceptanceProfile> {
        let bad = |e: Error| Error::config("profile", e.to_string());
        let values = self.levels().map(|l| l.resolve(clients)).unwrap_or_default();
        let profile = match self {
            ProfileConfig::Stationary { .. } => AcceptanceProfile::Stationary { levels: values },
            ProfileConfig::Piecewise { levels, switch_times } => AcceptanceProfile::Piecewise {
                levels: levels.clone(),
                switch_times: switch_times.clone(),
            },
            ProfileConfig::RandomWalk { step, lower, upper, .. } => AcceptanceProfile::RandomWalk {
                start: values,
                step: *step,
                lower: *lower,
                upper: *upper,
            },
            ProfileConfig::TokenMixture { vocab_size, .. } => {
                let pairs = values
                    .into_iter()
                    .enumerate()
                    .map(|(i, d)| {
                        let mut rng = substream(seed, stream::MODEL_BASE + i as u64);
                        TokenModelPair::random_mixture(*vocab_size, d, &mut rng)
                    })
                    .collect::<Result<Vec<_>>>()
                    .map_err(bad)?;
                AcceptanceProfile::TokenModel { pairs }
            }
            ProfileConfig::TokenConstantRatio { vocab_size, .. } => {
                let pairs = values
                    .into_iter()
                    .map(|a| TokenModelPair::constant_ratio(*vocab_size, a))
                    .collect::<Result<Vec<_>>>()
                    .map_err(bad)?;
                AcceptanceProfile::TokenModel { pairs }
            }
        };
        profile.validate().map_err(bad)?;
        Ok(profile)
    }

    fn validate(&self, clients: usize) -> Result<()> {
        let vocab = |v: usize, even: bool| {
            if !(2..=MAX_VOCAB).contains(&v) || (even && !v.is_multiple_of(2)) {
                let parity = if even { "an even" } else { "a" };
                return Err(Error::config(
                    "profile.vocab_size",
                    format!("{v} must be {parity} size in [2, {MAX_VOCAB}]"),
                ));
            }
            Ok(())
        };
        let in_range = |lo: f64, hi: f64, open: bool, what: &str| -> Result<()> {
            for v in self.levels().expect("levelled profile").resolve(clients) {
                let ok = if open { v > lo && v < hi } else { (lo..=hi).contains(&v) };
                if !ok {
                    return Err(Error::config("profile.levels", format!("{what} {v} out of range")));
                }
            }
            Ok(())
        };
        if let Some(l) = self.levels() {
            l.check(clients)?;
        }
        match self {
            ProfileConfig::Stationary { .. } => in_range(0.0, LEVEL_MAX, false, "level")?,
            ProfileConfig::Piecewise { levels, .. } => {
                if levels.len() != clients {
                    return Err(Error::config(
                        "profile.levels",
                        format!("{} rows for {clients} clients", levels.len()),
                    ));
                }
            }
            ProfileConfig::RandomWalk { .. } => {}
            ProfileConfig::TokenMixture { vocab_size, .. } => {
                vocab(*vocab_size, false)?;
                in_range(0.0, 1.0, false, "divergence")?;
            }
            ProfileConfig::TokenConstantRatio { vocab_size, .. } => {
                vocab(*vocab_size, true)?;
                in_range(0.0, 1.0, true, "acceptance rate")?;
            }
        }
        // remaining range checks live with the engine profile
        self.build(clients, 0).map(|_| ())
    }

    fn rescaled(&self) -> Result<Self> {
        match (self, self.levels()) {
            (_, Some(Levels { spread: Some(_), .. })) => Ok(self.clone()),
            _ => Err(Error::config(
                "clients",
                "sweeping clients needs a profile given by `spread`",
            )),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let key = e.message().split('`').nth(1).unwrap_or("<root>").to_string();
            Error::config(&key, e.to_string().trim_end().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config("name", "must be a non-empty file stem"));
        }
        if self.clients == 0 {
            return Err(Error::config("clients", "need at least one client"));
        }
        if self.capacity == 0 {
            return Err(Error::config("capacity", "need at least one slot"));
        }
        self.smoothing
            .eta
            .validate("eta")
            .map_err(|e| Error::config("smoothing.eta", e.to_string()))?;
        self.smoothing
            .beta
            .validate("beta")
            .map_err(|e| Error::config("smoothing.beta", e.to_string()))?;
        self.smoothing
            .validate()
            .map_err(|e| Error::config("smoothing", e.to_string()))?;
        self.latency
            .validate(self.clients)
            .map_err(|e| Error::config("latency", e.to_string()))?;
        self.profile.validate(self.clients)?;
        if self.oracle.max_iters == 0 {
            return Err(Error::config("oracle.max_iters", "must be positive"));
        }
        if !(self.oracle.gap_tol > 0.0) {
            return Err(Error::config("oracle.gap_tol", "must be positive"));
        }
        if self.output.formats.is_empty() {
            return Err(Error::config("output.formats", "list at least one format"));
        }
        Ok(())
    }

    pub fn profile(&self) -> Result<AcceptanceProfile> {
        self.profile.build(self.clients, self.seed)
    }

    pub fn engine(&self, scheduler: SchedulerKind) -> EngineConfig {
        EngineConfig {
            capacity: self.capacity,
            scheduler,
            smoothing: self.smoothing,
            latency: self.latency.clone(),
            seed: self.seed,
        }
    }

    /// The config after defaults, as embedded in every output file.
    pub fn resolved_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Applies a sweep value to a copy of this config.
    pub fn with_param(&self, param: SweepParam, value: f64) -> Result<Self> {
        let mut c = self.clone();
        let int = |v: f64| {
            if v >= 1.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                Ok(v as u32)
            } else {
                Err(Error::config(param.name(), format!("{v} is not a positive integer")))
            }
        };
        match param {
            SweepParam::Beta => c.smoothing.beta = Schedule::Constant(value),
            SweepParam::Eta => c.smoothing.eta = Schedule::Constant(value),
            SweepParam::Capacity => c.capacity = int(value)?,
            SweepParam::Clients => {
                c.clients = int(value)? as usize;
                c.profile = c.profile.rescaled()?;
            }
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Beta,
    Eta,
    Capacity,
    Clients,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Beta => "beta",
            SweepParam::Eta => "eta",
            SweepParam::Capacity => "capacity",
            SweepParam::Clients => "clients",
        }
    }
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(SweepParam::Beta),
            "eta" => Ok(SweepParam::Eta),
            "capacity" => Ok(SweepParam::Capacity),
            "clients" => Ok(SweepParam::Clients),
            other => Err(Error::Usage(format!(
                "unknown sweep parameter `{other}` (expected beta, eta, capacity or clients)"
            ))),
        }
    }
}
