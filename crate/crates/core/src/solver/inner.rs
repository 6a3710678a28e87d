//! Unreliable inner GMRES: MGS Arnoldi, Givens least squares and the SDC
//! detectors.

use crate::faultlab::SdcInjector;
use crate::linalg::{axpy_in_place, dist_dot, dist_norm2, dist_spmv};
use crate::metrics::{Metrics, MetricsSink};
use crate::runtime::{Comm, CommError};

use super::{combine, Detector, Givens, SdcSite, SdcVerdict, SolverConfig, StaticState};

/// Relative slack of the monotonicity comparison.
const MONO_SLACK: f64 = 1.0 + 1e-10;
/// `h_{j+1,j}` below this fraction of its column norm ends the Arnoldi
/// process (lucky breakdown).
const BREAKDOWN: f64 = 1e-12;

/// Fault interceptors on the inner SpMV path.
#[derive(Debug, Clone, Default)]
pub struct Hooks {
    pub injector: Option<SdcInjector>,
    /// Inner SpMVs issued so far; the injection index of the next SpMV is
    /// `clock + 1`.
    pub clock: u64,
}

impl Hooks {
    pub fn new(injector: Option<SdcInjector>) -> Self {
        Hooks { injector, clock: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerOutput {
    /// Owned rows of the inner least-squares solution.
    pub z: Vec<f64>,
    /// Givens residual estimates, starting with ‖rhs‖.
    pub residuals: Vec<f64>,
    /// Owned rows of the Arnoldi basis actually used.
    pub basis: Vec<Vec<f64>>,
    /// Hessenberg columns, column `j` has `j + 2` entries.
    pub h: Vec<Vec<f64>>,
}

impl InnerOutput {
    pub fn steps(&self) -> usize {
        self.h.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InnerError {
    /// The detector fired at Arnoldi step `step`; `partial` is the best
    /// uncontaminated iterate available.
    Sdc {
        verdict: SdcVerdict,
        partial: Vec<f64>,
        step: usize,
    },
    Comm(CommError),
}

impl From<CommError> for InnerError {
    fn from(e: CommError) -> Self {
        InnerError::Comm(e)
    }
}

/// Detected iff some entry is non-finite or exceeds `frob_norm·slack` in
/// magnitude. Entries are already replicated, so the check is local.
pub fn bounded_check(h: &[f64], frob_norm: f64, slack: f64) -> SdcVerdict {
    let bound = frob_norm * slack;
    match h.iter().find(|v| !(v.abs() <= bound)) {
        Some(&v) => SdcVerdict::fired(SdcSite::Projection, v, bound),
        None => SdcVerdict::clean(SdcSite::Projection),
    }
}

/// Explicit residual `‖rhs − A·x‖` compared against `prev`. Costs one
/// reliable SpMV. Without `prev` the call only records a baseline.
pub fn monotonicity_check(
    st: &StaticState,
    rhs: &[f64],
    x: &[f64],
    prev: Option<f64>,
    comm: &mut Comm,
) -> Result<(SdcVerdict, f64), CommError> {
    comm.clock_mut().spmv_total += 1;
    let ax = dist_spmv(&st.a_local, x, comm)?;
    let r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, y)| b - y).collect();
    let norm = dist_norm2(&r, comm)?;
    let verdict = match prev {
        Some(p) if !(norm <= p * MONO_SLACK) => {
            SdcVerdict::fired(SdcSite::Residual, norm, p * MONO_SLACK)
        }
        _ => SdcVerdict::clean(SdcSite::Residual),
    };
    Ok((verdict, norm))
}

/// One inner-path SpMV through the SDC hook.
fn hooked_spmv(
    st: &StaticState,
    q: &[f64],
    step: usize,
    comm: &mut Comm,
    hooks: &mut Hooks,
    metrics: &MetricsSink,
) -> Result<Vec<f64>, CommError> {
    let clk = comm.clock_mut();
    clk.spmv_total += 1;
    clk.iterations += 1;
    metrics.update(|m| {
        m.spmv_count += 1;
        m.inner_spmv += 1;
        m.iterations += 1;
    });
    let mut y = dist_spmv(&st.a_local, q, comm)?;
    hooks.clock += 1;
    let Some(inj) = hooks.injector else {
        return Ok(y);
    };
    if let Some(event) = inj.apply(&mut y, hooks.clock, comm.rank(), comm.size()) {
        metrics.update(|m| m.sdc_injected += 1);
        if let Some((before, after)) = event.values {
            let threshold = ((step as f64 + 2.0).sqrt() + 1.0) * st.frob_norm * (1.0 + 1e-6);
            let outer = comm.clock().outer;
            metrics.record_sdc(event.clock, |r| {
                r.clock = event.clock;
                r.rank = event.rank.0;
                r.outer = outer;
                r.step = step;
                r.before = Some(before);
                r.after = Some(after);
                r.feeding = Some(!after.is_finite() || (after - before).abs() > threshold);
            });
        }
    }
    Ok(y)
}

fn t_sdc_d(m: &mut Metrics) -> &mut f64 {
    &mut m.t_sdc_d
}

/// Runs up to `cfg.inner_iters` Arnoldi steps on `A z = rhs` from `z = 0`
/// and returns the least-squares iterate even when it has not converged.
pub fn gmres_inner(
    st: &StaticState,
    rhs: &[f64],
    cfg: &SolverConfig,
    comm: &mut Comm,
    hooks: &mut Hooks,
    metrics: &MetricsSink,
) -> Result<InnerOutput, InnerError> {
    let n = rhs.len();
    let beta = dist_norm2(rhs, comm)?;
    let mut out = InnerOutput {
        z: vec![0.0; n],
        residuals: vec![beta],
        basis: Vec::new(),
        h: Vec::new(),
    };
    if !(beta > 0.0 && beta.is_finite()) {
        return Ok(out);
    }
    out.basis.push(rhs.iter().map(|v| v / beta).collect());
    let mut givens = Givens::new(beta);
    let mut prev_explicit = Some(beta);
    let mut last_good = vec![0.0; n];

    for j in 0..cfg.inner_iters {
        let mut w = hooked_spmv(st, &out.basis[j], j, comm, hooks, metrics)?;
        let mut col = Vec::with_capacity(j + 2);
        for q in &out.basis {
            let h = dist_dot(&w, q, comm)?;
            axpy_in_place(-h, q, &mut w);
            col.push(h);
        }
        // Second pass keeps the basis orthonormal once the Krylov space
        // becomes numerically invariant. The corrections are rounding-sized
        // unless the column is corrupted.
        for (q, h) in out.basis.iter().zip(col.iter_mut()) {
            let c = dist_dot(&w, q, comm)?;
            axpy_in_place(-c, q, &mut w);
            *h += c;
        }
        let h_next = dist_norm2(&w, comm)?;
        col.push(h_next);

        if cfg.detector == Detector::Bounded {
            let verdict = metrics.timed(t_sdc_d, || {
                bounded_check(&col, st.frob_norm, cfg.bound_slack)
            });
            let clock = hooks.clock;
            if hooks.injector.is_some_and(|i| i.fires_at(clock)) {
                metrics.record_sdc(clock, |r| r.detected_same_step = Some(verdict.detected));
            }
            if verdict.detected {
                let partial = combine(&out.basis[..j], &givens.solve_leading(j), n);
                return Err(InnerError::Sdc {
                    verdict,
                    partial,
                    step: j,
                });
            }
        }

        let col_norm = col[..=j].iter().map(|v| v * v).sum::<f64>().sqrt();
        let res = givens.push_column(&col);
        out.residuals.push(res);
        out.h.push(col);
        let breakdown = !(h_next > BREAKDOWN * col_norm);
        let last = j + 1 == cfg.inner_iters
            || breakdown
            || (cfg.inner_early_exit && res <= cfg.tol * beta);

        if cfg.detector == Detector::Monotonicity && ((j + 1) % cfg.mono_interval == 0 || last) {
            let z = combine(&out.basis, &givens.solve(), n);
            let (verdict, r) = metrics.timed(t_sdc_d, || {
                monotonicity_check(st, rhs, &z, prev_explicit, comm)
            })?;
            metrics.update(|m| m.spmv_count += 1);
            if verdict.detected {
                return Err(InnerError::Sdc {
                    verdict,
                    partial: last_good,
                    step: j,
                });
            }
            prev_explicit = Some(r);
            last_good = z;
        }
        if last {
            break;
        }
        out.basis.push(w.iter().map(|v| v / h_next).collect());
    }
    out.z = combine(&out.basis, &givens.solve(), n);
    Ok(out)
}
