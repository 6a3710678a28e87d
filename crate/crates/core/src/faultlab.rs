//! Seeded fault injection: periodic corruption of inner-solve SpMV outputs
//! and scheduled process kills.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use parking_lot::Mutex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::runtime::{KillSwitch, LogicalClock, RankId, WorldConfig};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FaultError {
    #[error("a fault plan is already armed on this world")]
    DoubleArm,
    #[error("invalid fault plan: {0}")]
    InvalidPlan(String),
    #[error("cannot parse {what} from {input:?}")]
    Parse { what: &'static str, input: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CorruptionModel {
    /// Flip one bit; `None` draws the bit uniformly from 0..64.
    BitFlip { bit: Option<u8> },
    /// Multiply the element by a factor.
    Scale(f64),
}

impl Default for CorruptionModel {
    fn default() -> Self {
        CorruptionModel::BitFlip { bit: None }
    }
}

impl fmt::Display for CorruptionModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CorruptionModel::BitFlip { bit: None } => write!(f, "bitflip"),
            CorruptionModel::BitFlip { bit: Some(b) } => write!(f, "bitflip:{b}"),
            CorruptionModel::Scale(s) => write!(f, "scale:{s:e}"),
        }
    }
}

impl FromStr for CorruptionModel {
    type Err = FaultError;
    fn from_str(s: &str) -> Result<Self, FaultError> {
        let err = || FaultError::Parse {
            what: "corruption model",
            input: s.to_string(),
        };
        let model = match s.split_once(':') {
            None if s == "bitflip" => CorruptionModel::BitFlip { bit: None },
            Some(("bitflip", b)) => CorruptionModel::BitFlip {
                bit: Some(b.parse().map_err(|_| err())?),
            },
            Some(("scale", f)) => CorruptionModel::Scale(f.parse().map_err(|_| err())?),
            _ => return Err(err()),
        };
        model.validate().map_err(|_| err())?;
        Ok(model)
    }
}

impl CorruptionModel {
    pub fn validate(&self) -> Result<(), FaultError> {
        match *self {
            CorruptionModel::BitFlip { bit: Some(b) } if b > 63 => Err(FaultError::InvalidPlan(
                format!("bit index {b} out of range"),
            )),
            CorruptionModel::Scale(f) if f == 1.0 || !f.is_finite() => Err(
                FaultError::InvalidPlan(format!("scale factor {f} does not corrupt")),
            ),
            _ => Ok(()),
        }
    }
}

/// Flips bit `bit` (0 = least significant mantissa bit, 63 = sign) of the
/// IEEE-754 representation.
pub fn flip_bit(value: f64, bit: u8) -> f64 {
    f64::from_bits(value.to_bits() ^ (1u64 << bit))
}

/// When a scheduled process failure fires.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Trigger {
    /// First runtime call once outer iteration `k` has started.
    Outer(u64),
    /// First runtime call once this many SpMVs have been started.
    Spmv(u64),
    /// First runtime call once this many inner iterations have been started.
    Iteration(u64),
    /// While storing the dynamic checkpoint of this epoch.
    Checkpoint(u64),
}

impl Trigger {
    fn armed(&self, clock: &LogicalClock) -> bool {
        match *self {
            Trigger::Outer(k) => clock.outer.is_some_and(|o| o >= k),
            Trigger::Spmv(n) => clock.spmv_total >= n,
            Trigger::Iteration(n) => clock.iterations >= n,
            Trigger::Checkpoint(e) => clock.checkpoint_epoch.is_some_and(|c| c >= e),
        }
    }

    fn value(&self) -> u64 {
        match *self {
            Trigger::Outer(v)
            | Trigger::Spmv(v)
            | Trigger::Iteration(v)
            | Trigger::Checkpoint(v) => v,
        }
    }
}

impl fmt::Display for Trigger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Trigger::Outer(k) => write!(f, "{k}"),
            Trigger::Spmv(n) => write!(f, "spmv:{n}"),
            Trigger::Iteration(n) => write!(f, "iter:{n}"),
            Trigger::Checkpoint(e) => write!(f, "ckpt:{e}"),
        }
    }
}

impl FromStr for Trigger {
    type Err = FaultError;
    fn from_str(s: &str) -> Result<Self, FaultError> {
        let err = || FaultError::Parse {
            what: "trigger",
            input: s.to_string(),
        };
        let num = |v: &str| v.parse::<u64>().map_err(|_| err());
        match s.split_once(':') {
            None => Ok(Trigger::Outer(num(s)?)),
            Some(("spmv", v)) => Ok(Trigger::Spmv(num(v)?)),
            Some(("iter", v)) => Ok(Trigger::Iteration(num(v)?)),
            Some(("ckpt", v)) => Ok(Trigger::Checkpoint(num(v)?)),
            _ => Err(err()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FailureEvent {
    pub rank: RankId,
    pub trigger: Trigger,
    pub fired: bool,
}

impl FailureEvent {
    pub fn new(rank: RankId, trigger: Trigger) -> Self {
        FailureEvent {
            rank,
            trigger,
            fired: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FaultPlan {
    /// Inner SpMVs between SDC injections; `None` disables SDC.
    pub sdc_interval: Option<u64>,
    /// No injections once the inner SpMV clock exceeds this value.
    pub sdc_until: Option<u64>,
    pub model: CorruptionModel,
    pub failure_events: Vec<FailureEvent>,
    pub seed: u64,
}

impl FaultPlan {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_null(&self) -> bool {
        self.sdc_interval.is_none() && self.failure_events.is_empty()
    }

    /// Triggers must be non-decreasing; equal triggers (simultaneous
    /// failures) must name distinct ranks.
    pub fn validate(&self) -> Result<(), FaultError> {
        if self.sdc_interval == Some(0) {
            return Err(FaultError::InvalidPlan(
                "sdc interval must be positive".into(),
            ));
        }
        self.model.validate()?;
        for w in self.failure_events.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            if std::mem::discriminant(&a.trigger) == std::mem::discriminant(&b.trigger) {
                if b.trigger.value() < a.trigger.value() {
                    return Err(FaultError::InvalidPlan(
                        "failure triggers must not decrease".into(),
                    ));
                }
                if a.trigger == b.trigger && a.rank == b.rank {
                    return Err(FaultError::InvalidPlan(format!(
                        "rank {} fails twice at {}",
                        a.rank, a.trigger
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn sdc_injector(&self) -> Option<SdcInjector> {
        self.sdc_interval.map(|interval| SdcInjector {
            interval,
            until: self.sdc_until,
            model: self.model,
            seed: self.seed,
        })
    }
}

/// One injection decision, identical on every rank.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Injection {
    pub clock: u64,
    pub rank: RankId,
    /// Local element index on the injecting rank; `None` when that rank
    /// owns no rows.
    pub element: Option<usize>,
    /// `(before, after)` on the injecting rank only.
    pub values: Option<(f64, f64)>,
}

/// Stateless SDC hook: decisions depend only on the seed and the SpMV
/// index, so every rank agrees without communication and replays after a
/// rollback reproduce the same corruption.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdcInjector {
    pub interval: u64,
    pub until: Option<u64>,
    pub model: CorruptionModel,
    pub seed: u64,
}

impl SdcInjector {
    pub fn fires_at(&self, spmv_index: u64) -> bool {
        spmv_index > 0
            && spmv_index.is_multiple_of(self.interval)
            && self.until.is_none_or(|u| spmv_index <= u)
    }

    fn rng_for(&self, spmv_index: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ spmv_index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    /// Applies the hook to one rank's SpMV output block.
    pub fn apply(
        &self,
        y_block: &mut [f64],
        spmv_index: u64,
        me: RankId,
        n_ranks: usize,
    ) -> Option<Injection> {
        if !self.fires_at(spmv_index) {
            return None;
        }
        let mut rng = self.rng_for(spmv_index);
        let rank = RankId(rng.gen_range(0..n_ranks));
        let pick: u64 = rng.gen();
        let bit: u8 = rng.gen_range(0..64);
        let mut inj = Injection {
            clock: spmv_index,
            rank,
            element: None,
            values: None,
        };
        if rank != me {
            return Some(inj);
        }
        if y_block.is_empty() {
            return Some(inj);
        }
        let idx = (pick % y_block.len() as u64) as usize;
        let before = y_block[idx];
        let after = match self.model {
            CorruptionModel::BitFlip { bit: fixed } => flip_bit(before, fixed.unwrap_or(bit)),
            CorruptionModel::Scale(f) => before * f,
        };
        y_block[idx] = after;
        inj.element = Some(idx);
        inj.values = Some((before, after));
        Some(inj)
    }
}

/// Failure times from given uniforms: gaps `ceil(-mean·ln u)` (at least 1)
/// accumulated into iteration triggers.
pub fn triggers_from_uniforms(mean_interval: f64, uniforms: &[f64]) -> Vec<u64> {
    let mut at = 0u64;
    uniforms
        .iter()
        .map(|&u| {
            let gap = (-mean_interval * u.ln()).ceil().max(1.0) as u64;
            at += gap;
            at
        })
        .collect()
}

/// Exponentially distributed failure schedule over distinct ranks.
pub fn plan_failures(
    mean_interval: f64,
    n_failures: usize,
    candidates: &[RankId],
    seed: u64,
) -> Vec<FailureEvent> {
    assert!(
        mean_interval > 0.0,
        "mean failure interval must be positive"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // (0, 1]: gen() is [0, 1).
    let uniforms: Vec<f64> = (0..n_failures).map(|_| 1.0 - rng.gen::<f64>()).collect();
    let triggers = triggers_from_uniforms(mean_interval, &uniforms);
    let mut pool = candidates.to_vec();
    pool.sort();
    pool.dedup();
    let picks: Vec<RankId> = pool
        .choose_multiple(&mut rng, n_failures.min(pool.len()))
        .copied()
        .collect();
    picks
        .into_iter()
        .zip(triggers)
        .map(|(rank, t)| FailureEvent::new(rank, Trigger::Iteration(t)))
        .collect()
}

/// Kill schedule consulted by the runtime at every call boundary.
#[derive(Debug)]
pub struct FailureSchedule {
    events: Mutex<Vec<FailureEvent>>,
}

impl FailureSchedule {
    pub fn new(events: Vec<FailureEvent>) -> Self {
        FailureSchedule {
            events: Mutex::new(events),
        }
    }

    pub fn fired(&self) -> usize {
        self.events.lock().iter().filter(|e| e.fired).count()
    }

    pub fn events(&self) -> Vec<FailureEvent> {
        self.events.lock().clone()
    }
}

impl KillSwitch for FailureSchedule {
    fn should_die(&self, rank: RankId, clock: &LogicalClock) -> bool {
        let mut events = self.events.lock();
        match events
            .iter_mut()
            .find(|e| !e.fired && e.rank == rank && e.trigger.armed(clock))
        {
            Some(e) => {
                e.fired = true;
                true
            }
            None => false,
        }
    }
}

/// A plan bound to a world.
#[derive(Debug, Clone)]
pub struct ArmedPlan {
    pub injector: Option<SdcInjector>,
    pub schedule: Arc<FailureSchedule>,
}

/// Installs the kill schedule on `world` and returns the SDC hook for the
/// solver's inner SpMV path.
pub fn arm(plan: &FaultPlan, world: &mut WorldConfig) -> Result<ArmedPlan, FaultError> {
    if world.kill_switch.is_some() {
        return Err(FaultError::DoubleArm);
    }
    plan.validate()?;
    let schedule = Arc::new(FailureSchedule::new(plan.failure_events.clone()));
    world.kill_switch = Some(schedule.clone());
    Ok(ArmedPlan {
        injector: plan.sdc_injector(),
        schedule,
    })
}
