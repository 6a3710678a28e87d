//! Reliable flexible outer GMRES and the two recovery paths: inner restart
//! on SDC detection, and repair plus rollback on process failure.

use std::time::Instant;

use crate::checkpoint::{
    fetch_for_restore, store_dynamic, store_static, verify_static, CheckpointError,
    CheckpointStore, SnapshotSlot, SnapshotToken,
};
use crate::linalg::{axpy_in_place, dist_dot, dist_norm2, dist_spmv};
use crate::metrics::{Metrics, MetricsSink};
use crate::runtime::{Comm, CommError, RankId, ReduceOp};

use super::inner::{gmres_inner, Hooks, InnerError};
use super::{combine, sanitize, DynamicState, Givens, SolverConfig, SolverError, StaticState};

/// Outer `h_{j+1,j}` below this fraction of its column norm ends the cycle.
const OUTER_BREAKDOWN: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOutcome {
    pub x_local: Vec<f64>,
    pub global_offset: usize,
    pub converged: bool,
    /// Explicit `‖b − A·x‖ / ‖b‖`.
    pub relative_residual: f64,
    /// Completed outer iterations of the surviving trajectory.
    pub outer_iterations: usize,
}

/// Inputs of one inner solve, restored verbatim by [`recover_sdc`].
#[derive(Debug, Clone, PartialEq)]
pub struct InnerSnapshot {
    pub x_local: Vec<f64>,
    pub rhs: Vec<f64>,
}

/// Rolls an inner solve back to its entry state and counts the restart.
pub fn recover_sdc(
    slot: &SnapshotSlot<InnerSnapshot>,
    token: &SnapshotToken,
    metrics: &MetricsSink,
) -> Result<InnerSnapshot, CheckpointError> {
    let snap = slot.rollback(token)?;
    metrics.update(|m| m.inner_restarts += 1);
    Ok(snap)
}

/// Cycle start at `x = 0`: `r0 = b`, no communication.
pub fn initial_state(st: &StaticState) -> DynamicState {
    let n = st.b_local.len();
    let v0 = if st.b_norm > 0.0 {
        st.b_local.iter().map(|v| v / st.b_norm).collect()
    } else {
        vec![0.0; n]
    };
    DynamicState {
        k: 0,
        cycle_start: 0,
        x0_local: vec![0.0; n],
        x_local: vec![0.0; n],
        v_local: vec![v0],
        z_local: Vec::new(),
        h_outer: Vec::new(),
        r0_norm: st.b_norm,
        inner_spmv_clock: 0,
    }
}

enum Flow {
    Comm(CommError),
    Fatal(SolverError),
}

impl From<CommError> for Flow {
    fn from(e: CommError) -> Self {
        Flow::Comm(e)
    }
}

impl From<SolverError> for Flow {
    fn from(e: SolverError) -> Self {
        Flow::Fatal(e)
    }
}

fn checkpoint_flow(e: CheckpointError) -> Flow {
    match e {
        CheckpointError::Comm(c) => Flow::Comm(c),
        CheckpointError::HolderDead { .. } => Flow::Fatal(SolverError::HolderDead(e)),
        other => Flow::Fatal(SolverError::Checkpoint(other)),
    }
}

fn field_t_sdc_r(m: &mut Metrics) -> &mut f64 {
    &mut m.t_sdc_r
}

/// Solver context of one rank.
struct RankSolver {
    comm: Comm,
    cfg: SolverConfig,
    hooks: Hooks,
    metrics: MetricsSink,
    store: CheckpointStore,
    st: Option<StaticState>,
    state: DynamicState,
    /// Highest `k` reached; iterations below it after a rollback are
    /// recomputation.
    high_water: usize,
    snapshots: SnapshotSlot<InnerSnapshot>,
}

/// Runs FT-GMRES on an initial rank. `st` must be set up collectively.
pub fn ft_gmres(
    st: StaticState,
    cfg: &SolverConfig,
    comm: Comm,
    hooks: Hooks,
    metrics: MetricsSink,
) -> Result<SolveOutcome, SolverError> {
    cfg.validate()?;
    let state = initial_state(&st);
    let mut s = RankSolver::new(comm, cfg, hooks, metrics, Some(st), state);
    if cfg.checkpointing {
        let payload = s.st().to_bytes();
        let t0 = Instant::now();
        match store_static(&mut s.comm, &mut s.store, payload) {
            Ok(receipt) => s.metrics.update(|m| {
                m.t_check += t0.elapsed().as_secs_f64();
                m.checkpoints_taken += 1;
                m.bytes_checkpointed += receipt.bytes_sent as u64;
            }),
            Err(CheckpointError::Comm(e)) => {
                s.comm.revoke();
                return Err(SolverError::Unprotected(e));
            }
            Err(e) => return Err(SolverError::Checkpoint(e)),
        }
    }
    s.drive()
}

/// Entry point of a warm spare that adopted a failed rank: joins the
/// ongoing recovery, restores state from its neighbours and continues.
pub fn ft_gmres_substitute(
    comm: Comm,
    cfg: &SolverConfig,
    hooks: Hooks,
    metrics: MetricsSink,
) -> Result<SolveOutcome, SolverError> {
    cfg.validate()?;
    let pending = comm.replaced_in_last_repair().to_vec();
    let mut s = RankSolver::new(comm, cfg, hooks, metrics, None, DynamicState::default());
    s.recovery_loop(pending, 0, false)?;
    s.drive()
}

impl RankSolver {
    fn new(
        comm: Comm,
        cfg: &SolverConfig,
        hooks: Hooks,
        metrics: MetricsSink,
        st: Option<StaticState>,
        state: DynamicState,
    ) -> Self {
        RankSolver {
            comm,
            cfg: cfg.clone(),
            hooks,
            metrics,
            store: CheckpointStore::new(),
            st,
            state,
            high_water: 0,
            snapshots: SnapshotSlot::new(),
        }
    }

    fn st(&self) -> &StaticState {
        self.st.as_ref().expect("static state restored before use")
    }

    fn drive(&mut self) -> Result<SolveOutcome, SolverError> {
        loop {
            match self.advance() {
                Ok(Some(outcome)) => {
                    self.metrics.update(|m| {
                        m.converged = true;
                        m.final_relative_residual = outcome.relative_residual;
                    });
                    return Ok(outcome);
                }
                Ok(None) => {}
                Err(Flow::Fatal(e)) => {
                    if let SolverError::BudgetExhausted { relative_residual } = e {
                        self.metrics
                            .update(|m| m.final_relative_residual = relative_residual);
                    }
                    return Err(e);
                }
                Err(Flow::Comm(e)) => {
                    if !self.cfg.checkpointing {
                        self.comm.revoke();
                        return Err(SolverError::Unprotected(e));
                    }
                    let k = self.state.k;
                    self.recovery_loop(Vec::new(), k, true)?;
                }
            }
        }
    }

    fn estimate(&self) -> f64 {
        let g = Givens::from_columns(self.state.r0_norm, &self.state.h_outer);
        g.residual() / self.st().b_norm
    }

    /// `b − A·x` and its norm, on the reliable path.
    fn explicit_residual(&mut self) -> Result<(Vec<f64>, f64), CommError> {
        self.comm.clock_mut().spmv_total += 1;
        self.metrics.update(|m| m.spmv_count += 1);
        let st = self.st.as_ref().expect("static state");
        let ax = dist_spmv(&st.a_local, &self.state.x_local, &mut self.comm)?;
        let r: Vec<f64> = st.b_local.iter().zip(&ax).map(|(b, y)| b - y).collect();
        let norm = dist_norm2(&r, &mut self.comm)?;
        Ok((r, norm))
    }

    /// Starts a new Krylov cycle at the current `x`.
    fn restart_cycle(&mut self, r: Vec<f64>, r_norm: f64) {
        let s = &mut self.state;
        s.cycle_start = s.k;
        s.x0_local = s.x_local.clone();
        s.r0_norm = r_norm;
        let v0 = if r_norm > 0.0 {
            r.iter().map(|v| v / r_norm).collect()
        } else {
            r
        };
        s.v_local = vec![v0];
        s.z_local.clear();
        s.h_outer.clear();
    }

    fn outcome(&self, relative_residual: f64) -> SolveOutcome {
        SolveOutcome {
            x_local: self.state.x_local.clone(),
            global_offset: self.st().b_local.global_offset,
            converged: true,
            relative_residual,
            outer_iterations: self.state.k,
        }
    }

    /// Convergence test, then one outer iteration.
    fn advance(&mut self) -> Result<Option<SolveOutcome>, Flow> {
        if self.st().b_norm == 0.0 {
            self.state.x_local.iter_mut().for_each(|x| *x = 0.0);
            return Ok(Some(self.outcome(0.0)));
        }
        let tol = self.cfg.tol;
        if self.estimate() <= tol {
            let (r, r_norm) = self.explicit_residual()?;
            let rel = r_norm / self.st().b_norm;
            if rel <= tol {
                return Ok(Some(self.outcome(rel)));
            }
            self.restart_cycle(r, r_norm);
        }
        if self.state.k >= self.cfg.outer_iters {
            let (_, r_norm) = self.explicit_residual()?;
            return Err(Flow::Fatal(SolverError::BudgetExhausted {
                relative_residual: r_norm / self.st().b_norm,
            }));
        }
        self.iterate()?;
        Ok(None)
    }

    fn iterate(&mut self) -> Result<(), Flow> {
        let k = self.state.k;
        let j = self.state.cycle_len();
        self.comm.clock_mut().outer = Some(k as u64);
        let recompute = k < self.high_water;
        let t0 = Instant::now();
        let before = self.metrics.snapshot();

        let rhs = self.state.v_local[j].clone();
        let mut z = self.inner_solve(rhs.clone())?;
        let replaced = sanitize(&mut z);
        if replaced > 0 {
            self.metrics
                .update(|m| m.sanitized_values += replaced as u64);
        }
        let local_max = z.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let zmax = self.comm.allreduce_scalar(ReduceOp::Max, local_max)?;
        if zmax > 0.0 {
            z.iter_mut().for_each(|v| *v /= zmax);
        } else {
            z = rhs;
        }

        self.comm.clock_mut().spmv_total += 1;
        self.metrics.update(|m| m.spmv_count += 1);
        let st = self.st.as_ref().expect("static state");
        let mut w = dist_spmv(&st.a_local, &z, &mut self.comm)?;
        let mut col = Vec::with_capacity(j + 2);
        for v in &self.state.v_local {
            let h = dist_dot(&w, v, &mut self.comm)?;
            axpy_in_place(-h, v, &mut w);
            col.push(h);
        }
        let h_next = dist_norm2(&w, &mut self.comm)?;
        let col_norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        col.push(h_next);
        let breakdown = !(h_next > OUTER_BREAKDOWN * col_norm);

        let s = &mut self.state;
        s.z_local.push(z);
        s.h_outer.push(col);
        if !breakdown {
            s.v_local.push(w.iter().map(|v| v / h_next).collect());
        }
        s.k += 1;
        s.inner_spmv_clock = self.hooks.clock;
        let y = Givens::from_columns(s.r0_norm, &s.h_outer).solve();
        let mut x = s.x0_local.clone();
        axpy_in_place(1.0, &combine(&s.z_local, &y, x.len()), &mut x);
        s.x_local = x;
        self.high_water = self.high_water.max(s.k);

        let inner_iters = self.cfg.inner_iters as i64;
        self.metrics.update(|m| {
            m.outer_iterations += 1;
            if recompute {
                m.t_recompute += t0.elapsed().as_secs_f64();
                m.recompute_spmv += m.spmv_count - before.spmv_count;
                m.recompute_sdc_excess_spmv +=
                    (m.inner_spmv - before.inner_spmv) as i64 - inner_iters;
            }
        });

        if breakdown && self.estimate() > self.cfg.tol {
            let (r, r_norm) = self.explicit_residual()?;
            self.restart_cycle(r, r_norm);
        }
        self.checkpoint()
    }

    /// Inner solve with SDC restarts; gives up after the restart cap and
    /// returns the detector's partial iterate.
    fn inner_solve(&mut self, rhs: Vec<f64>) -> Result<Vec<f64>, Flow> {
        let entry = InnerSnapshot {
            x_local: self.state.x_local.clone(),
            rhs,
        };
        let token = self.snapshots.snapshot(&entry).map_err(checkpoint_flow)?;
        let mut input = entry;
        let mut restarts = 0;
        let result = loop {
            let st = self.st.as_ref().expect("static state");
            match gmres_inner(
                st,
                &input.rhs,
                &self.cfg,
                &mut self.comm,
                &mut self.hooks,
                &self.metrics,
            ) {
                Ok(out) => break Ok(out.z),
                Err(InnerError::Comm(e)) => break Err(Flow::Comm(e)),
                Err(InnerError::Sdc { partial, .. }) => {
                    self.metrics.update(|m| m.sdc_detected += 1);
                    if restarts == self.cfg.max_inner_restarts {
                        self.metrics.update(|m| m.inner_abandoned += 1);
                        break Ok(partial);
                    }
                    restarts += 1;
                    let (slot, metrics) = (&self.snapshots, &self.metrics);
                    match metrics.timed(field_t_sdc_r, || recover_sdc(slot, &token, metrics)) {
                        Ok(snap) => {
                            self.state.x_local = snap.x_local.clone();
                            input = snap;
                        }
                        Err(e) => break Err(checkpoint_flow(e)),
                    }
                }
            }
        };
        self.snapshots.commit(&token).map_err(checkpoint_flow)?;
        result
    }

    fn checkpoint(&mut self) -> Result<(), Flow> {
        if !self.cfg.checkpointing {
            return Ok(());
        }
        let payload = self.state.to_bytes(self.cfg.checkpoint_basis);
        let epoch = u32::try_from(self.state.k).expect("outer index fits in u32");
        let t0 = Instant::now();
        let receipt = store_dynamic(&mut self.comm, &mut self.store, payload, epoch)
            .map_err(checkpoint_flow)?;
        let dt = t0.elapsed().as_secs_f64();
        self.metrics.update(|m| {
            m.t_check += dt;
            m.t_check_dynamic += dt;
            m.checkpoints_taken += 1;
            m.bytes_checkpointed += receipt.bytes_sent as u64;
        });
        Ok(())
    }

    /// Repairs the communicator and rolls every rank back to the agreed
    /// epoch. Failures during recovery restart it; every replaced rank
    /// since the last successful restore stays pending.
    fn recovery_loop(
        &mut self,
        mut pending: Vec<RankId>,
        k_fail: usize,
        mut repair: bool,
    ) -> Result<(), SolverError> {
        loop {
            let t0 = Instant::now();
            if repair {
                self.comm.revoke();
                let _ = self.comm.agree(true);
                let repaired = self.comm.shrink_and_substitute()?;
                self.comm = repaired.comm;
                pending.extend(repaired.replaced);
            }
            repair = true;
            self.metrics.update(|m| {
                m.outer_restarts += 1;
                m.t_pf_x += t0.elapsed().as_secs_f64();
            });
            match self.rejoin(&pending, k_fail) {
                Ok(()) => return Ok(()),
                Err(Flow::Comm(_)) => continue,
                Err(Flow::Fatal(e)) => return Err(e),
            }
        }
    }

    /// Collective tail of recovery, shared by survivors and spares.
    fn rejoin(&mut self, pending: &[RankId], k_fail: usize) -> Result<(), Flow> {
        let t0 = Instant::now();
        let n = self.comm.size();
        let mut mask = vec![0.0; n];
        for r in pending {
            mask[r.0] = 1.0;
        }
        let mask = self.comm.allreduce(ReduceOp::Max, &mask)?;
        let replaced: Vec<RankId> = (0..n).filter(|&r| mask[r] != 0.0).map(RankId).collect();

        let bundle = fetch_for_restore(&mut self.comm, &mut self.store, &replaced)
            .map_err(checkpoint_flow)?;

        let clk = *self.comm.clock();
        let sync = self.comm.allreduce(
            ReduceOp::Max,
            &[
                clk.spmv_total as f64,
                clk.iterations as f64,
                k_fail as f64,
                self.high_water as f64,
            ],
        )?;
        let clk = self.comm.clock_mut();
        clk.spmv_total = sync[0] as u64;
        clk.iterations = sync[1] as u64;
        clk.outer = None;
        let k_fail = sync[2] as usize;
        self.high_water = sync[3] as usize;

        let mut st = self.st.take();
        if let Some(p) = &bundle.static_payload {
            st = StaticState::from_bytes(p).ok();
        }
        let st_ok = st.as_ref().is_some_and(verify_static);
        let restored = match (&st, &bundle.dynamic_payload) {
            (Some(s), None) => Some((initial_state(s), true)),
            (Some(_), Some(p)) => DynamicState::from_bytes(p).ok(),
            (None, _) => None,
        };
        let local_ok = st_ok
            && restored
                .as_ref()
                .is_some_and(|(d, _)| d.k == bundle.restore_epoch as usize);
        if !self.comm.all_true(local_ok)? {
            self.st = st;
            return Err(Flow::Fatal(SolverError::StaticCorrupt(self.comm.rank().0)));
        }
        self.st = st;
        let (state, with_basis) = restored.expect("checked above");
        self.state = state;
        self.hooks.clock = self.state.inner_spmv_clock;
        if !with_basis {
            let (r, r_norm) = self.explicit_residual()?;
            self.restart_cycle(r, r_norm);
        }

        let epoch = bundle.restore_epoch;
        self.metrics.update(|m| {
            m.t_pf_r += t0.elapsed().as_secs_f64();
            m.resume_epochs.push(epoch);
            m.outer_recomputed += k_fail.saturating_sub(epoch as usize) as u64;
        });
        Ok(())
    }
}
