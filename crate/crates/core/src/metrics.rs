//! Overhead decomposition collected during a run.
//!
//! Counters are replicated across ranks by construction (every rank
//! executes the same collectives), so the report takes rank 0's copy.
//! Per-rank quantities such as checkpoint bytes are summed instead.
//! Times are wall-clock seconds and purely informational.

use std::collections::BTreeMap;
use std::time::Instant;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::runtime::RankId;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub t_sdc_d: f64,
    pub t_sdc_r: f64,
    pub t_pf_x: f64,
    pub t_pf_r: f64,
    pub t_check: f64,
    pub t_check_dynamic: f64,
    pub t_recompute: f64,
    pub total_time: f64,

    /// Inner iterations beyond the fault-free reference run.
    pub n_extra: i64,
    pub sdc_injected: u64,
    pub sdc_detected: u64,
    pub inner_restarts: u64,
    /// Inner solves given up after the restart cap.
    pub inner_abandoned: u64,
    pub outer_restarts: u64,
    pub checkpoints_taken: u64,
    pub bytes_checkpointed: u64,
    pub spmv_count: u64,
    /// SpMVs on the unreliable inner path (the SDC injection clock).
    pub inner_spmv: u64,
    /// Inner Arnoldi steps executed, including restarted attempts.
    pub iterations: u64,
    /// Outer iterations executed, including recomputed ones.
    pub outer_iterations: u64,
    /// Outer iterations rolled back by failure recovery.
    pub outer_recomputed: u64,
    pub recompute_spmv: u64,
    /// Inner SpMVs in recomputed outer iterations beyond the fixed inner
    /// budget; the SDC/rollback interaction term.
    pub recompute_sdc_excess_spmv: i64,
    pub sanitized_values: u64,
    pub resume_epochs: Vec<u32>,
    pub converged: bool,
    pub final_relative_residual: f64,
}

impl Metrics {
    pub fn t_check_dynamic_fraction(&self) -> f64 {
        if self.t_check > 0.0 {
            self.t_check_dynamic / self.t_check
        } else {
            0.0
        }
    }
}

/// What happened to one SDC injection.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SdcRecord {
    pub clock: u64,
    pub rank: usize,
    pub outer: Option<u64>,
    pub step: usize,
    pub before: Option<f64>,
    pub after: Option<f64>,
    /// Perturbation large enough that some projection of this Arnoldi
    /// column must exceed the Frobenius bound.
    pub feeding: Option<bool>,
    /// Detector verdict in the same Arnoldi step.
    pub detected_same_step: Option<bool>,
}

/// Per-rank metrics shared between the occupants of a rank id.
#[derive(Debug)]
pub struct MetricsBoard {
    ranks: Vec<Mutex<Metrics>>,
    sdc_log: Mutex<BTreeMap<u64, SdcRecord>>,
}

impl MetricsBoard {
    pub fn new(n_ranks: usize) -> Self {
        MetricsBoard {
            ranks: (0..n_ranks)
                .map(|_| Mutex::new(Metrics::default()))
                .collect(),
            sdc_log: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn rank(&self, r: RankId) -> Metrics {
        self.ranks[r.0].lock().clone()
    }

    /// Rank 0's counters with per-rank byte counts summed.
    pub fn report(&self) -> Metrics {
        let mut m = self.rank(RankId(0));
        m.bytes_checkpointed = self.ranks.iter().map(|r| r.lock().bytes_checkpointed).sum();
        m
    }

    pub fn sdc_log(&self) -> Vec<SdcRecord> {
        self.sdc_log.lock().values().cloned().collect()
    }
}

/// A rank's handle onto the board.
#[derive(Debug, Clone)]
pub struct MetricsSink {
    board: std::sync::Arc<MetricsBoard>,
    rank: RankId,
}

impl MetricsSink {
    pub fn new(board: std::sync::Arc<MetricsBoard>, rank: RankId) -> Self {
        MetricsSink { board, rank }
    }

    /// A sink writing to a private board, for standalone use.
    pub fn detached() -> Self {
        Self::new(std::sync::Arc::new(MetricsBoard::new(1)), RankId(0))
    }

    pub fn rank(&self) -> RankId {
        self.rank
    }

    pub fn update(&self, f: impl FnOnce(&mut Metrics)) {
        f(&mut self.board.ranks[self.rank.0].lock());
    }

    pub fn snapshot(&self) -> Metrics {
        self.board.rank(self.rank)
    }

    /// Runs `f` and adds its wall time to the field picked by `field`.
    pub fn timed<T>(&self, field: fn(&mut Metrics) -> &mut f64, f: impl FnOnce() -> T) -> T {
        let t0 = Instant::now();
        let out = f();
        let dt = t0.elapsed().as_secs_f64();
        self.update(|m| *field(m) += dt);
        out
    }

    pub fn record_sdc(&self, ordinal: u64, f: impl FnOnce(&mut SdcRecord)) {
        f(self.board.sdc_log.lock().entry(ordinal).or_default());
    }
}
