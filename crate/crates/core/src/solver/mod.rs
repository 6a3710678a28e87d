//! FT-GMRES with selective reliability.
//!
//! Inner GMRES solves run on the unreliable path: their SpMVs pass through
//! the SDC hook and their Arnoldi projections are checked by the configured
//! detector. The flexible outer iteration is reliable: it never sees
//! injected corruption, sanitizes whatever the inner solve returns, and is
//! checkpointed at every outer boundary so process failures roll back to
//! the last committed outer state.

mod inner;
mod outer;
mod state;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::runtime::{CommError, RepairError};

pub use inner::{bounded_check, gmres_inner, monotonicity_check, Hooks, InnerError, InnerOutput};
pub use outer::{
    ft_gmres, ft_gmres_substitute, initial_state, recover_sdc, InnerSnapshot, SolveOutcome,
};
pub use state::{DecodeError, DynamicState, StaticState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Detector {
    #[default]
    None,
    Bounded,
    Monotonicity,
}

impl fmt::Display for Detector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Detector::None => "none",
            Detector::Bounded => "bounded",
            Detector::Monotonicity => "monotonicity",
        })
    }
}

impl FromStr for Detector {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Detector::None),
            "bounded" => Ok(Detector::Bounded),
            "monotonicity" => Ok(Detector::Monotonicity),
            _ => Err(format!("unknown detector {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub inner_iters: usize,
    pub outer_iters: usize,
    pub tol: f64,
    pub detector: Detector,
    /// Multiplicative slack on the Frobenius bound.
    pub bound_slack: f64,
    /// Inner steps between explicit-residual checks.
    pub mono_interval: usize,
    /// Include the outer Krylov basis in dynamic checkpoints.
    pub checkpoint_basis: bool,
    /// Store static and dynamic checkpoints. Required for failure recovery.
    pub checkpointing: bool,
    /// Stop an inner solve once its residual estimate reaches `tol`.
    pub inner_early_exit: bool,
    /// Restarts of one inner solve before its partial result is used.
    pub max_inner_restarts: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            inner_iters: 25,
            outer_iters: 20,
            tol: 1e-8,
            detector: Detector::None,
            bound_slack: 1.0 + 1e-6,
            mono_interval: 5,
            checkpoint_basis: true,
            checkpointing: false,
            inner_early_exit: false,
            max_inner_restarts: 3,
        }
    }
}

impl SolverConfig {
    pub fn iteration_budget(&self) -> usize {
        self.inner_iters * self.outer_iters
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: &str| Err(SolverError::InvalidConfig(m.to_string()));
        if self.inner_iters == 0 || self.outer_iters == 0 {
            return bad("iteration counts must be positive");
        }
        if !(self.tol > 0.0) {
            return bad("tolerance must be positive");
        }
        if self.mono_interval == 0 {
            return bad("monotonicity interval must be positive");
        }
        if !(self.bound_slack >= 1.0) {
            return bad("bound slack must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdcSite {
    Projection,
    Residual,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdcDetail {
    pub value: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdcVerdict {
    pub detected: bool,
    pub site: SdcSite,
    /// Offending value and the bound it broke; set whenever `detected`.
    pub detail: Option<SdcDetail>,
}

impl SdcVerdict {
    pub fn clean(site: SdcSite) -> Self {
        SdcVerdict {
            detected: false,
            site,
            detail: None,
        }
    }

    pub fn fired(site: SdcSite, value: f64, bound: f64) -> Self {
        SdcVerdict {
            detected: true,
            site,
            detail: Some(SdcDetail { value, bound }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error(
        "no convergence within the iteration budget (relative residual {relative_residual:e})"
    )]
    BudgetExhausted { relative_residual: f64 },
    #[error("unrecoverable: {0}")]
    HolderDead(CheckpointError),
    #[error(transparent)]
    Repair(#[from] RepairError),
    #[error("checkpoint failure: {0}")]
    Checkpoint(CheckpointError),
    #[error("process failure without checkpoints to recover from: {0}")]
    Unprotected(CommError),
    #[error("static state failed verification on rank {0}")]
    StaticCorrupt(usize),
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("restored state: {0}")]
    Decode(#[from] DecodeError),
}

impl SolverError {
    /// Stable short name used in reports.
    pub fn code(&self) -> &'static str {
        match self {
            SolverError::BudgetExhausted { .. } => "BudgetExhausted",
            SolverError::HolderDead(_) => "HolderDead",
            SolverError::Repair(RepairError::InsufficientSpares { .. }) => "InsufficientSpares",
            SolverError::Repair(_) => "RepairFailed",
            SolverError::Checkpoint(_) => "CheckpointFailed",
            SolverError::Unprotected(_) => "Unprotected",
            SolverError::StaticCorrupt(_) => "StaticCorrupt",
            SolverError::InvalidConfig(_) => "InvalidConfig",
            SolverError::Decode(_) => "DecodeFailed",
        }
    }
}

/// Replaces NaN and ±Inf by 0.0, returning how many entries changed.
pub fn sanitize(v: &mut [f64]) -> usize {
    let mut n = 0;
    for x in v.iter_mut().filter(|x| !x.is_finite()) {
        *x = 0.0;
        n += 1;
    }
    n
}

/// Incremental Givens QR of an upper-Hessenberg least-squares problem
/// `min ‖β e₁ − H y‖`.
#[derive(Debug, Clone, Default)]
pub(crate) struct Givens {
    r: Vec<Vec<f64>>,
    cs: Vec<(f64, f64)>,
    g: Vec<f64>,
}

impl Givens {
    pub fn new(beta: f64) -> Self {
        Givens {
            r: Vec::new(),
            cs: Vec::new(),
            g: vec![beta],
        }
    }

    pub fn from_columns(beta: f64, cols: &[Vec<f64>]) -> Self {
        let mut g = Givens::new(beta);
        for c in cols {
            g.push_column(c);
        }
        g
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    /// Adds Hessenberg column `j` (length `j + 2`); returns the new
    /// residual norm `|g_{j+1}|`.
    pub fn push_column(&mut self, h: &[f64]) -> f64 {
        let j = self.r.len();
        debug_assert_eq!(h.len(), j + 2);
        let mut col = h.to_vec();
        for (i, &(c, s)) in self.cs.iter().enumerate() {
            let (a, b) = (col[i], col[i + 1]);
            col[i] = c * a + s * b;
            col[i + 1] = -s * a + c * b;
        }
        let (a, b) = (col[j], col[j + 1]);
        let d = a.hypot(b);
        let (c, s) = if d == 0.0 { (1.0, 0.0) } else { (a / d, b / d) };
        col[j] = d;
        col[j + 1] = 0.0;
        self.cs.push((c, s));
        let gj = self.g[j];
        self.g[j] = c * gj;
        self.g.push(-s * gj);
        col.truncate(j + 1);
        self.r.push(col);
        self.g[j + 1].abs()
    }

    pub fn residual(&self) -> f64 {
        self.g.last().copied().unwrap_or(0.0).abs()
    }

    /// Least-squares solution using only the first `m` columns.
    pub fn solve_leading(&self, m: usize) -> Vec<f64> {
        let mut y = vec![0.0; m];
        for i in (0..m).rev() {
            let mut acc = self.g[i];
            for (l, yl) in y.iter().enumerate().skip(i + 1) {
                acc -= self.r[l][i] * yl;
            }
            let d = self.r[i][i];
            y[i] = if d != 0.0 { acc / d } else { 0.0 };
        }
        y
    }

    pub fn solve(&self) -> Vec<f64> {
        self.solve_leading(self.len())
    }
}

/// `Σ cols[i]·y[i]` over owned rows.
pub(crate) fn combine(cols: &[Vec<f64>], y: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (c, &yi) in cols.iter().zip(y) {
        crate::linalg::axpy_in_place(yi, c, &mut out);
    }
    out
}
