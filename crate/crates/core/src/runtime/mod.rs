//! Deterministic simulated SPMD runtime with fail-stop processes.
//!
//! Every logical rank runs on its own host thread and talks to the others
//! only through [`Comm`]. Collectives are rendezvous points keyed by
//! `(epoch, sequence)`; their results are computed from contributions in
//! rank order, so results never depend on host scheduling.
//!
//! Process failures are injected through a [`KillSwitch`] that is consulted
//! at the entry of every runtime call. A killed rank unwinds out of its
//! program and never contributes again; peers observe the death as
//! [`CommErrorKind::ProcFailed`] at the next operation that needs it.
//! Recovery follows the ULFM recipe: [`Comm::revoke`], [`Comm::agree`],
//! then [`Comm::shrink_and_substitute`], which pulls warm spares out of
//! [`SpareHandle::wait_for_activation`].

mod comm;
mod world;

use std::collections::BTreeSet;
use std::fmt;

pub use comm::{AgreeOutcome, Comm, Repaired};
pub use world::{spawn_world, Role, SpareHandle, WorldConfig, WorldOutcome};

use thiserror::Error;

/// Logical rank identifier. Stable across repair: a spare adopts the id of
/// the rank it replaces.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize,
)]
pub struct RankId(pub usize);

impl fmt::Display for RankId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Host process slot. Active ranks start as pids `0..n_active`, spares
/// follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub(crate) struct Pid(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommErrorKind {
    ProcFailed,
    Revoked,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind:?} (failed ranks: {ranks:?})")]
pub struct CommError {
    pub kind: CommErrorKind,
    pub ranks: BTreeSet<RankId>,
}

impl CommError {
    pub fn proc_failed(ranks: impl IntoIterator<Item = RankId>) -> Self {
        let ranks: BTreeSet<_> = ranks.into_iter().collect();
        debug_assert!(!ranks.is_empty());
        CommError {
            kind: CommErrorKind::ProcFailed,
            ranks,
        }
    }

    pub fn revoked() -> Self {
        CommError {
            kind: CommErrorKind::Revoked,
            ranks: BTreeSet::new(),
        }
    }

    pub fn is_proc_failed(&self) -> bool {
        self.kind == CommErrorKind::ProcFailed
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RepairError {
    #[error("{failed} failed ranks but only {available} spares left")]
    InsufficientSpares { failed: usize, available: usize },
    #[error("communicator epoch {0} is stale")]
    StaleCommunicator(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WorldError {
    #[error("world needs at least one active rank")]
    NoActiveRanks,
    #[error("rank {rank:?} (process {pid}) panicked: {message}")]
    RankPanicked {
        rank: Option<RankId>,
        pid: usize,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Max,
    Min,
}

impl ReduceOp {
    fn combine(self, a: f64, b: f64) -> f64 {
        match self {
            ReduceOp::Sum => a + b,
            ReduceOp::Max => a.max(b),
            ReduceOp::Min => a.min(b),
        }
    }
}

/// Rank-local progress counters visible to the kill switch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LogicalClock {
    /// Index of the outer iteration currently executing.
    pub outer: Option<u64>,
    /// Every SpMV started on this rank, never rolled back.
    pub spmv_total: u64,
    /// Inner Arnoldi steps started, never rolled back.
    pub iterations: u64,
    /// Set while a dynamic checkpoint for this epoch is being stored.
    pub checkpoint_epoch: Option<u64>,
}

/// Decides whether a rank dies at its current runtime-call boundary.
pub trait KillSwitch: Send + Sync {
    fn should_die(&self, rank: RankId, clock: &LogicalClock) -> bool;
}

/// Unwind payload of a killed rank.
#[derive(Debug)]
pub(crate) struct Killed;

/// Unwind payload used to tear down the remaining ranks after a panic.
#[derive(Debug)]
pub(crate) struct Aborted;

/// Elementwise reduction over contributions in rank order using a fixed
/// pairwise tree: `((c0 ∘ c1) ∘ (c2 ∘ c3)) ∘ ...`.
pub fn tree_reduce(mut items: Vec<Vec<f64>>, op: ReduceOp) -> Vec<f64> {
    if items.is_empty() {
        return Vec::new();
    }
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(mut left) = it.next() {
            if let Some(right) = it.next() {
                for (l, r) in left.iter_mut().zip(right) {
                    *l = op.combine(*l, r);
                }
            }
            next.push(left);
        }
        items = next;
    }
    items.pop().unwrap_or_default()
}
