//! Experiment driver: builds the problem, runs FT-GMRES in a simulated
//! world under a fault plan, and collects counters into reports.

mod config;
mod report;

use std::fs::File;
use std::io::BufReader;
use std::sync::Arc;
use std::time::Instant;

use thiserror::Error;

pub use config::{Checkpointing, ExperimentConfig, FailureSpec, Format, Problem};
pub use report::{
    aggregate, compare_runs, emit, Comparison, Estimate, RepRecord, RunReport, Stat,
    AGGREGATE_COLUMNS, CSV_COLUMNS,
};

use crate::faultlab::{arm, FailureEvent, FaultError, FaultPlan};
use crate::linalg::{build_poisson3d, partition_rows, read_matrix_market, CsrMatrix, DenseVector};
use crate::metrics::{Metrics, MetricsBoard, MetricsSink, SdcRecord};
use crate::runtime::{spawn_world, Role, WorldConfig, WorldError};
use crate::solver::{
    ft_gmres, ft_gmres_substitute, Hooks, SolveOutcome, SolverConfig, SolverError, StaticState,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HarnessError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("problem setup: {0}")]
    Problem(String),
    #[error("reports disagree on {key}: {values:?}")]
    ConfigMismatch { key: String, values: Vec<String> },
    #[error(transparent)]
    Fault(#[from] FaultError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("serialization: {0}")]
    Serde(String),
}

impl HarnessError {
    /// 1 for usage errors, 2 for everything that aborted a run.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) | HarnessError::Fault(_) => 1,
            _ => 2,
        }
    }
}

impl From<serde_json::Error> for HarnessError {
    fn from(e: serde_json::Error) -> Self {
        HarnessError::Serde(e.to_string())
    }
}

impl From<csv::Error> for HarnessError {
    fn from(e: csv::Error) -> Self {
        HarnessError::Serde(e.to_string())
    }
}

/// Global operator and right-hand side.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemData {
    pub a: CsrMatrix,
    pub b: DenseVector,
}

impl ProblemData {
    pub fn build(problem: &Problem) -> Result<Self, HarnessError> {
        match problem {
            Problem::Poisson3D(spec) => {
                let (a, b) =
                    build_poisson3d(*spec).map_err(|e| HarnessError::Problem(e.to_string()))?;
                Ok(ProblemData { a, b })
            }
            Problem::MatrixMarket(path) => {
                let f = File::open(path)
                    .map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
                let a = read_matrix_market(BufReader::new(f))
                    .map_err(|e| HarnessError::Problem(e.to_string()))?;
                if a.n_rows() != a.n_cols() {
                    return Err(HarnessError::Problem("matrix is not square".into()));
                }
                let b = DenseVector::new(vec![1.0; a.n_rows()]);
                Ok(ProblemData { a, b })
            }
        }
    }
}

/// Everything observable about one world run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// Rank 0's replicated counters with per-rank bytes summed.
    pub metrics: Metrics,
    pub result: Result<SolveOutcome, SolverError>,
    /// Assembled global solution when every rank finished.
    pub x: Option<Vec<f64>>,
    pub sdc_log: Vec<SdcRecord>,
    pub final_epoch: u64,
    pub kills: usize,
    pub activations: Vec<(usize, crate::runtime::RankId, u64)>,
    pub fingerprints: Vec<u64>,
    pub failure_events: Vec<FailureEvent>,
    pub trace: Vec<String>,
}

impl RunOutcome {
    pub fn status(&self) -> &'static str {
        match &self.result {
            Ok(_) => "converged",
            Err(e) => e.code(),
        }
    }
}

/// Runs one FT-GMRES solve on `ranks` processes plus `spares` warm spares.
pub fn run_once(
    problem: &ProblemData,
    ranks: usize,
    spares: usize,
    solver: &SolverConfig,
    plan: &FaultPlan,
    trace: bool,
) -> Result<RunOutcome, HarnessError> {
    let n = problem.a.n_rows();
    let parts = partition_rows(n, ranks).map_err(|e| HarnessError::Problem(e.to_string()))?;
    let mut world = WorldConfig::new(ranks, spares).with_trace(trace);
    let armed = arm(plan, &mut world)?;
    let board = Arc::new(MetricsBoard::new(ranks));
    let injector = armed.injector;

    let t0 = Instant::now();
    let outcome = spawn_world(world, |mut comm, role| {
        let sink = MetricsSink::new(board.clone(), comm.rank());
        let hooks = Hooks::new(injector);
        match role {
            Role::Initial => {
                let rows = parts[comm.rank().0].clone();
                let a_local = problem.a.row_block(rows.clone());
                let b_local = DenseVector::block(problem.b[rows.clone()].to_vec(), rows.start);
                let st = match StaticState::setup(a_local, b_local, &mut comm) {
                    Ok(st) => st,
                    Err(e) => {
                        comm.revoke();
                        return Err(SolverError::Unprotected(e));
                    }
                };
                ft_gmres(st, solver, comm, hooks, sink)
            }
            Role::Substitute { .. } => ft_gmres_substitute(comm, solver, hooks, sink),
        }
    })?;
    let elapsed = t0.elapsed().as_secs_f64();

    let mut metrics = board.report();
    metrics.total_time = elapsed;
    let first = outcome.results.iter().flatten().next().cloned();
    let result = match first {
        Some(r) => r,
        None => Err(SolverError::Repair(
            crate::runtime::RepairError::InsufficientSpares {
                failed: outcome.kills,
                available: spares,
            },
        )),
    };
    let x = if outcome.results.iter().all(|r| matches!(r, Some(Ok(_)))) {
        let mut x = vec![0.0; n];
        for o in outcome.results.iter().flatten().flatten() {
            x[o.global_offset..o.global_offset + o.x_local.len()].copy_from_slice(&o.x_local);
        }
        Some(x)
    } else {
        None
    };
    if let Ok(o) = &result {
        metrics.converged = o.converged;
    }
    Ok(RunOutcome {
        metrics,
        result,
        x,
        sdc_log: board.sdc_log(),
        final_epoch: outcome.final_epoch,
        kills: outcome.kills,
        activations: outcome.activations,
        fingerprints: outcome.fingerprints,
        failure_events: armed.schedule.events(),
        trace: outcome.trace,
    })
}

/// Runs every repetition of `cfg` and a fault-free reference for N_extra.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport, HarnessError> {
    cfg.validate()?;
    let problem = ProblemData::build(&cfg.problem)?;
    if cfg.ranks > problem.a.n_rows() {
        return Err(HarnessError::Usage(format!(
            "{} ranks for {} rows",
            cfg.ranks,
            problem.a.n_rows()
        )));
    }
    let solver = cfg.solver_config();
    let reference_solver = SolverConfig {
        checkpointing: false,
        ..solver.clone()
    };
    let reference = run_once(
        &problem,
        cfg.ranks,
        0,
        &reference_solver,
        &FaultPlan::none(),
        false,
    )?;
    let reference_iterations = reference.metrics.iterations;

    let mut reps = Vec::with_capacity(cfg.reps);
    for rep in 0..cfg.reps {
        let plan = cfg.fault_plan(rep);
        let run = run_once(&problem, cfg.ranks, cfg.spares, &solver, &plan, false)?;
        let mut metrics = run.metrics.clone();
        // Extra iterations are only meaningful for a run that reached the tolerance.
        metrics.n_extra = if run.result.is_ok() {
            metrics.iterations as i64 - reference_iterations as i64
        } else {
            0
        };
        reps.push(RepRecord {
            rep,
            seed: plan.seed,
            status: run.status().to_string(),
            error: run.result.as_ref().err().map(|e| e.to_string()),
            final_epoch: run.final_epoch,
            kills: run.kills,
            metrics,
        });
    }
    let config = cfg
        .to_pairs()
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    Ok(RunReport::new(
        cfg.config_hash(),
        config,
        reference_iterations,
        reps,
    ))
}
