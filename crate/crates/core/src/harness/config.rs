//! Flat `key = value` experiment configuration. Command-line flags use the
//! same keys, so a resolved config replays a run exactly.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::faultlab::{plan_failures, CorruptionModel, FailureEvent, FaultPlan, Trigger};
use crate::linalg::Poisson3DSpec;
use crate::runtime::RankId;
use crate::solver::{Detector, SolverConfig};

use super::HarnessError;

#[derive(Debug, Clone, PartialEq)]
pub enum Problem {
    Poisson3D(Poisson3DSpec),
    /// Matrix Market file with an all-ones right-hand side.
    MatrixMarket(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub enum FailureSpec {
    None,
    /// Exponential inter-arrival times with this mean, in inner iterations.
    Auto {
        mean: f64,
        count: usize,
    },
    List(Vec<(RankId, Trigger)>),
}

impl fmt::Display for FailureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FailureSpec::None => f.write_str("none"),
            FailureSpec::Auto { mean, count } => write!(f, "auto:{mean}:{count}"),
            FailureSpec::List(events) => {
                let items: Vec<String> = events.iter().map(|(r, t)| format!("{r}@{t}")).collect();
                write!(f, "list:{}", items.join(","))
            }
        }
    }
}

impl FromStr for FailureSpec {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, HarnessError> {
        let bad = || HarnessError::Usage(format!("invalid failure spec {s:?}"));
        if s == "none" {
            return Ok(FailureSpec::None);
        }
        if let Some(rest) = s.strip_prefix("auto:") {
            let (mean, count) = rest.split_once(':').ok_or_else(bad)?;
            let mean: f64 = mean.parse().map_err(|_| bad())?;
            if !(mean > 0.0 && mean.is_finite()) {
                return Err(bad());
            }
            return Ok(FailureSpec::Auto {
                mean,
                count: count.parse().map_err(|_| bad())?,
            });
        }
        if let Some(rest) = s.strip_prefix("list:") {
            let events = rest
                .split(',')
                .filter(|e| !e.is_empty())
                .map(|e| {
                    let (r, t) = e.split_once('@').ok_or_else(bad)?;
                    let r: usize = r.parse().map_err(|_| bad())?;
                    let t: Trigger = t.parse().map_err(|_| bad())?;
                    Ok((RankId(r), t))
                })
                .collect::<Result<Vec<_>, HarnessError>>()?;
            return Ok(FailureSpec::List(events));
        }
        Err(bad())
    }
}

impl FailureSpec {
    pub fn count(&self) -> usize {
        match self {
            FailureSpec::None => 0,
            FailureSpec::Auto { count, .. } => *count,
            FailureSpec::List(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Json,
    Csv,
}

impl FromStr for Format {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, HarnessError> {
        match s {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            _ => Err(HarnessError::Usage(format!("unknown format {s:?}"))),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Json => "json",
            Format::Csv => "csv",
        })
    }
}

/// `on`, `off`, or `auto` (on iff failures are planned).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Checkpointing {
    #[default]
    Auto,
    On,
    Off,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub problem: Problem,
    pub ranks: usize,
    pub spares: usize,
    pub solver: SolverConfig,
    pub checkpointing: Checkpointing,
    pub sdc_interval: Option<u64>,
    pub sdc_until: Option<u64>,
    pub sdc_model: CorruptionModel,
    pub failures: FailureSpec,
    pub seed: u64,
    pub reps: usize,
    pub out: Option<PathBuf>,
    pub format: Format,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            problem: Problem::Poisson3D(Poisson3DSpec::new(8, 8, 8)),
            ranks: 4,
            spares: 0,
            solver: SolverConfig::default(),
            checkpointing: Checkpointing::Auto,
            sdc_interval: None,
            sdc_until: None,
            sdc_model: CorruptionModel::default(),
            failures: FailureSpec::None,
            seed: 0,
            reps: 5,
            out: None,
            format: Format::Json,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, HarnessError> {
    value
        .parse()
        .map_err(|_| HarnessError::Usage(format!("invalid value {value:?} for {key}")))
}

fn parse_opt(key: &str, value: &str) -> Result<Option<u64>, HarnessError> {
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool, HarnessError> {
    match value {
        "on" | "true" | "yes" => Ok(true),
        "off" | "false" | "no" => Ok(false),
        _ => Err(HarnessError::Usage(format!(
            "invalid value {value:?} for {key}"
        ))),
    }
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

/// Keys that do not influence results and are left out of the hash.
const OUTPUT_KEYS: [&str; 2] = ["out", "format"];

impl ExperimentConfig {
    /// Applies one setting. Keys match the long command-line flags.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        let value = value.trim();
        fn grid<'a>(
            c: &'a mut ExperimentConfig,
            key: &str,
        ) -> Result<&'a mut Poisson3DSpec, HarnessError> {
            match &mut c.problem {
                Problem::Poisson3D(g) => Ok(g),
                Problem::MatrixMarket(_) => Err(HarnessError::Usage(format!(
                    "{key} applies to poisson3d only"
                ))),
            }
        }
        match key {
            "problem" => {
                self.problem = match value {
                    "poisson3d" => match self.problem {
                        Problem::Poisson3D(g) => Problem::Poisson3D(g),
                        Problem::MatrixMarket(_) => Problem::Poisson3D(Poisson3DSpec::new(8, 8, 8)),
                    },
                    v => match v.strip_prefix("mtx:") {
                        Some(path) if !path.is_empty() => {
                            Problem::MatrixMarket(PathBuf::from(path))
                        }
                        _ => return Err(HarnessError::Usage(format!("unknown problem {v:?}"))),
                    },
                }
            }
            "nx" => grid(self, key)?.nx = parse(key, value)?,
            "ny" => grid(self, key)?.ny = parse(key, value)?,
            "nz" => grid(self, key)?.nz = parse(key, value)?,
            "ranks" => self.ranks = parse(key, value)?,
            "spares" => self.spares = parse(key, value)?,
            "inner" => self.solver.inner_iters = parse(key, value)?,
            "outer" => self.solver.outer_iters = parse(key, value)?,
            "tol" => self.solver.tol = parse(key, value)?,
            "detector" => {
                self.solver.detector = value.parse::<Detector>().map_err(HarnessError::Usage)?
            }
            "bound-slack" => self.solver.bound_slack = parse(key, value)?,
            "mono-interval" => self.solver.mono_interval = parse(key, value)?,
            "checkpoint-basis" => self.solver.checkpoint_basis = parse_bool(key, value)?,
            "inner-early-exit" => self.solver.inner_early_exit = parse_bool(key, value)?,
            "max-inner-restarts" => self.solver.max_inner_restarts = parse(key, value)?,
            "checkpoint" => {
                self.checkpointing = match value {
                    "auto" => Checkpointing::Auto,
                    v => {
                        if parse_bool(key, v)? {
                            Checkpointing::On
                        } else {
                            Checkpointing::Off
                        }
                    }
                }
            }
            "sdc-interval" => self.sdc_interval = parse_opt(key, value)?,
            "sdc-until" => self.sdc_until = parse_opt(key, value)?,
            "sdc-model" => {
                self.sdc_model = value
                    .parse()
                    .map_err(|e| HarnessError::Usage(format!("{e}")))?
            }
            "failures" => self.failures = value.parse()?,
            "seed" => self.seed = parse(key, value)?,
            "reps" => self.reps = parse(key, value)?,
            "out" => {
                self.out = if value == "none" {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "format" => self.format = value.parse()?,
            _ => return Err(HarnessError::Usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn from_kv_str(text: &str) -> Result<Self, HarnessError> {
        let mut cfg = Self::default();
        cfg.apply_kv(text)?;
        Ok(cfg)
    }

    pub fn apply_kv(&mut self, text: &str) -> Result<(), HarnessError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                HarnessError::Usage(format!("config line {}: expected key = value", i + 1))
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Fully resolved settings in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let opt = |v: Option<u64>| v.map_or("none".to_string(), |v| v.to_string());
        let mut p = Vec::new();
        match &self.problem {
            Problem::Poisson3D(g) => {
                p.push(("problem", "poisson3d".to_string()));
                p.push(("nx", g.nx.to_string()));
                p.push(("ny", g.ny.to_string()));
                p.push(("nz", g.nz.to_string()));
            }
            Problem::MatrixMarket(path) => p.push(("problem", format!("mtx:{}", path.display()))),
        }
        let s = &self.solver;
        p.extend([
            ("ranks", self.ranks.to_string()),
            ("spares", self.spares.to_string()),
            ("inner", s.inner_iters.to_string()),
            ("outer", s.outer_iters.to_string()),
            ("tol", format!("{:e}", s.tol)),
            ("detector", s.detector.to_string()),
            ("bound-slack", format!("{}", s.bound_slack)),
            ("mono-interval", s.mono_interval.to_string()),
            (
                "checkpoint",
                on_off(self.checkpointing_enabled()).to_string(),
            ),
            ("checkpoint-basis", on_off(s.checkpoint_basis).to_string()),
            ("inner-early-exit", on_off(s.inner_early_exit).to_string()),
            ("max-inner-restarts", s.max_inner_restarts.to_string()),
            ("sdc-interval", opt(self.sdc_interval)),
            ("sdc-until", opt(self.sdc_until)),
            ("sdc-model", self.sdc_model.to_string()),
            ("failures", self.failures.to_string()),
            ("seed", self.seed.to_string()),
            ("reps", self.reps.to_string()),
            (
                "out",
                self.out
                    .as_ref()
                    .map_or("none".to_string(), |p| p.display().to_string()),
            ),
            ("format", self.format.to_string()),
        ]);
        p
    }

    pub fn to_kv_string(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// First 16 hex digits of SHA-256 over the result-relevant settings.
    pub fn config_hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self
            .to_pairs()
            .into_iter()
            .filter(|(k, _)| !OUTPUT_KEYS.contains(k))
        {
            h.update(format!("{k}={v}\n"));
        }
        h.finalize()
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn checkpointing_enabled(&self) -> bool {
        match self.checkpointing {
            Checkpointing::Auto => self.failures.count() > 0,
            Checkpointing::On => true,
            Checkpointing::Off => false,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let usage = |m: String| Err(HarnessError::Usage(m));
        if self.ranks == 0 {
            return usage("ranks must be at least 1".into());
        }
        if self.reps == 0 {
            return usage("reps must be at least 1".into());
        }
        if self.failures.count() > self.spares {
            return usage(format!(
                "{} planned failures but only {} spares",
                self.failures.count(),
                self.spares
            ));
        }
        if let FailureSpec::List(events) = &self.failures {
            if let Some((r, _)) = events.iter().find(|(r, _)| r.0 >= self.ranks) {
                return usage(format!("failure rank {r} outside 0..{}", self.ranks));
            }
        }
        if let Problem::Poisson3D(g) = &self.problem {
            g.order().map_err(|e| HarnessError::Usage(e.to_string()))?;
        }
        self.solver
            .validate()
            .map_err(|e| HarnessError::Usage(e.to_string()))?;
        self.sdc_model
            .validate()
            .map_err(|e| HarnessError::Usage(e.to_string()))?;
        if self.sdc_interval == Some(0) {
            return usage("sdc interval must be positive".into());
        }
        Ok(())
    }

    /// Solver settings with checkpointing resolved.
    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            checkpointing: self.checkpointing_enabled(),
            ..self.solver.clone()
        }
    }

    /// Fault plan of repetition `rep`, seeded with `seed + rep`.
    pub fn fault_plan(&self, rep: usize) -> FaultPlan {
        let seed = self.seed.wrapping_add(rep as u64);
        let failure_events = match &self.failures {
            FailureSpec::None => Vec::new(),
            FailureSpec::Auto { mean, count } => {
                let ranks: Vec<RankId> = (0..self.ranks).map(RankId).collect();
                plan_failures(*mean, *count, &ranks, seed)
            }
            FailureSpec::List(events) => events
                .iter()
                .map(|&(r, t)| FailureEvent::new(r, t))
                .collect(),
        };
        FaultPlan {
            sdc_interval: self.sdc_interval,
            sdc_until: self.sdc_until,
            model: self.sdc_model,
            failure_events,
            seed,
        }
    }
}
