//! Inner and outer GMRES behaviour, detectors and recovery paths.

mod common;

use multires::checkpoint::SnapshotSlot;
use multires::faultlab::{CorruptionModel, FailureEvent, FaultPlan, SdcInjector, Trigger};
use multires::harness::{run_once, Problem, ProblemData};
use multires::linalg::{partition_rows, CsrMatrix, DenseVector, Poisson3DSpec};
use multires::metrics::MetricsSink;
use multires::runtime::{spawn_world, Comm, RankId, WorldConfig};
use multires::solver::{
    bounded_check, gmres_inner, monotonicity_check, recover_sdc, sanitize, Detector, Hooks,
    InnerError, InnerOutput, InnerSnapshot, SdcSite, SolverConfig, SolverError, StaticState,
};
use proptest::prelude::*;

/// Runs `f` on every rank with its share of `(a, b)` set up as static state.
fn on_ranks<T: Send>(
    a: &CsrMatrix,
    b: &[f64],
    ranks: usize,
    f: impl Fn(&StaticState, &mut Comm) -> T + Sync,
) -> Vec<T> {
    let parts = partition_rows(a.n_rows(), ranks).unwrap();
    let out = spawn_world(WorldConfig::new(ranks, 0), |mut comm, _| {
        let rows = parts[comm.rank().0].clone();
        let st = StaticState::setup(
            a.row_block(rows.clone()),
            DenseVector::block(b[rows.clone()].to_vec(), rows.start),
            &mut comm,
        )
        .unwrap();
        f(&st, &mut comm)
    })
    .unwrap();
    out.results.into_iter().map(Option::unwrap).collect()
}

fn inner(
    a: &CsrMatrix,
    rhs: &[f64],
    cfg: &SolverConfig,
    injector: Option<SdcInjector>,
) -> Result<InnerOutput, InnerError> {
    on_ranks(a, rhs, 1, |st, comm| {
        gmres_inner(
            st,
            &st.b_local,
            cfg,
            comm,
            &mut Hooks::new(injector),
            &MetricsSink::detached(),
        )
    })
    .remove(0)
}

fn poisson(n: usize) -> ProblemData {
    ProblemData::build(&Problem::Poisson3D(Poisson3DSpec::new(n, n, n))).unwrap()
}

/// Poisson operator with a right-hand side that excites every eigenvector,
/// so no inner solve ends in a lucky breakdown.
fn poisson_generic(n: usize) -> ProblemData {
    let mut p = poisson(n);
    for (i, v) in p.b.iter_mut().enumerate() {
        *v = ((i * 7919) % 101) as f64 / 50.0 - 1.0;
    }
    p
}

fn scale_plan(interval: u64, until: Option<u64>) -> FaultPlan {
    FaultPlan {
        sdc_interval: Some(interval),
        sdc_until: until,
        model: CorruptionModel::Scale(1e6),
        seed: 3,
        ..FaultPlan::none()
    }
}

#[test]
fn identity_inner_single_step() {
    let a = CsrMatrix::identity(4);
    let out = inner(&a, &[1.0, 0.0, 0.0, 0.0], &SolverConfig::default(), None).unwrap();
    assert_eq!(out.steps(), 1);
    assert_eq!(out.z, vec![1.0, 0.0, 0.0, 0.0]);
    assert_eq!(out.h, vec![vec![1.0, 0.0]]);
}

#[test]
fn diagonal_inner_exact_in_three_steps() {
    let a = CsrMatrix::diagonal(&[1.0, 2.0, 3.0]);
    let cfg = SolverConfig {
        inner_iters: 3,
        ..Default::default()
    };
    let out = inner(&a, &[1.0, 1.0, 1.0], &cfg, None).unwrap();
    for (z, want) in out.z.iter().zip([1.0, 0.5, 1.0 / 3.0]) {
        assert!((z - want).abs() <= 1e-12, "{z} vs {want}");
    }
}

#[test]
fn inner_basis_orthonormal_and_residual_monotone() {
    let p = poisson(5);
    let rhs: Vec<f64> = (0..p.a.n_rows())
        .map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0)
        .collect();
    let out = inner(&p.a, &rhs, &SolverConfig::default(), None).unwrap();
    let v = &out.basis;
    assert!(v.len() >= 20);
    let mut worst: f64 = 0.0;
    for i in 0..v.len() {
        for j in 0..v.len() {
            let d: f64 = v[i].iter().zip(&v[j]).map(|(a, b)| a * b).sum();
            worst = worst.max((d - if i == j { 1.0 } else { 0.0 }).abs());
        }
    }
    assert!(worst <= 1e-8, "orthogonality loss {worst}");
    for w in out.residuals.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-12));
    }
}

#[test]
fn inner_matches_across_rank_counts() {
    let p = poisson(4);
    let cfg = SolverConfig::default();
    let solve = |ranks| -> Vec<f64> {
        on_ranks(&p.a, &p.b, ranks, |st, comm| {
            gmres_inner(
                st,
                &st.b_local,
                &cfg,
                comm,
                &mut Hooks::default(),
                &MetricsSink::detached(),
            )
            .unwrap()
            .z
        })
        .concat()
    };
    let one = solve(1);
    let three = solve(3);
    assert!(common::rel_err(&three, &one) <= 1e-12);
}

#[test]
fn bounded_check_cases() {
    assert!(!bounded_check(&[0.0; 4], 5.0, 1.0 + 1e-6).detected);
    let hit = bounded_check(&[1.0, 5.1], 5.0, 1.0 + 1e-6);
    assert!(hit.detected);
    assert_eq!(hit.site, SdcSite::Projection);
    let d = hit.detail.unwrap();
    assert_eq!(d.value, 5.1);
    assert!(bounded_check(&[f64::NAN], 5.0, 1.0).detected);
    assert!(bounded_check(&[f64::NEG_INFINITY], 5.0, 1.0).detected);
    assert!(!bounded_check(&[-5.0], 5.0, 1.0).detected);
}

#[test]
fn scaled_element_detected_at_injection_step() {
    let n = 20;
    let a = CsrMatrix::diagonal(&(1..=n).map(|i| i as f64).collect::<Vec<_>>());
    let cfg = SolverConfig {
        detector: Detector::Bounded,
        ..Default::default()
    };
    for at in [1u64, 4, 9] {
        let inj = SdcInjector {
            interval: at,
            until: Some(at),
            model: CorruptionModel::Scale(1e6),
            seed: 11,
        };
        match inner(&a, &vec![1.0; n], &cfg, Some(inj)) {
            Err(InnerError::Sdc {
                verdict,
                step,
                partial,
            }) => {
                assert!(verdict.detected && verdict.detail.is_some());
                assert_eq!(step as u64, at - 1);
                assert!(partial.iter().all(|v| v.is_finite()));
            }
            other => panic!("injection at {at} not detected: {other:?}"),
        }
    }
}

#[test]
fn detectors_silent_without_faults() {
    let p = poisson(6);
    for detector in [Detector::Bounded, Detector::Monotonicity] {
        let cfg = SolverConfig {
            detector,
            ..Default::default()
        };
        let r = run_once(&p, 3, 0, &cfg, &FaultPlan::none(), false).unwrap();
        assert!(r.result.is_ok());
        assert_eq!(r.metrics.sdc_detected, 0, "{detector}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn bounded_check_no_false_positive_on_spd(
        n in 2usize..12,
        cells in proptest::collection::vec(-1.0..1.0f64, 144),
        rhs in proptest::collection::vec(-1.0..1.0f64, 12),
    ) {
        // M = BᵀB + I is symmetric positive definite.
        let b: Vec<Vec<f64>> = (0..n).map(|i| cells[i * 12..i * 12 + n].to_vec()).collect();
        let m: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| (0..n).map(|k| b[k][i] * b[k][j]).sum::<f64>() + if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let a = CsrMatrix::from_dense(&m);
        let cfg = SolverConfig { detector: Detector::Bounded, inner_iters: n, ..Default::default() };
        let rhs = &rhs[..n];
        prop_assume!(rhs.iter().any(|v| v.abs() > 1e-3));
        prop_assert!(inner(&a, rhs, &cfg, None).is_ok());
    }
}

#[test]
fn monotonicity_check_cases() {
    let a = CsrMatrix::diagonal(&[1.0, 2.0, 3.0]);
    let b = [1.0, 1.0, 1.0];
    let res = on_ranks(&a, &b, 1, |st, comm| {
        let first = monotonicity_check(st, &b, &[0.0; 3], None, comm).unwrap();
        // x = −A⁻¹b gives r = 2b.
        let doubled =
            monotonicity_check(st, &b, &[-1.0, -0.5, -1.0 / 3.0], Some(first.1), comm).unwrap();
        let exact =
            monotonicity_check(st, &b, &[1.0, 0.5, 1.0 / 3.0], Some(first.1), comm).unwrap();
        (first, doubled, exact, comm.clock().spmv_total)
    })
    .remove(0);
    let (first, doubled, exact, spmv) = res;
    assert!(!first.0.detected);
    assert!((first.1 - 3f64.sqrt()).abs() < 1e-15);
    assert!(doubled.0.detected);
    assert_eq!(doubled.0.site, SdcSite::Residual);
    assert!((doubled.1 - 2.0 * 3f64.sqrt()).abs() < 1e-14);
    assert!(!exact.0.detected);
    assert_eq!(spmv, 3);
}

#[test]
fn detector_spmv_cost() {
    let p = poisson_generic(6);
    let run = |detector| {
        let cfg = SolverConfig {
            detector,
            ..Default::default()
        };
        run_once(&p, 2, 0, &cfg, &FaultPlan::none(), false)
            .unwrap()
            .metrics
    };
    let none = run(Detector::None);
    let bounded = run(Detector::Bounded);
    let mono = run(Detector::Monotonicity);
    assert_eq!(bounded.spmv_count, none.spmv_count);
    assert_eq!(bounded.iterations, none.iterations);
    let per_solve = 25u64.div_ceil(5);
    assert!(mono.spmv_count - none.spmv_count >= per_solve * none.outer_iterations);
    assert!(none.iterations >= 25);
}

#[test]
fn sanitize_cases() {
    let mut v = vec![1.0, 2.0];
    assert_eq!(sanitize(&mut v), 0);
    assert_eq!(v, vec![1.0, 2.0]);
    let mut v = vec![1.0, f64::NAN, f64::INFINITY];
    assert_eq!(sanitize(&mut v), 2);
    assert_eq!(v, vec![1.0, 0.0, 0.0]);
    let mut v = vec![f64::NAN; 5];
    assert_eq!(sanitize(&mut v), 5);
    assert!(v.iter().all(|&x| x == 0.0));
}

#[test]
fn recover_sdc_restores_entry_state() {
    let metrics = MetricsSink::detached();
    let mut slot = SnapshotSlot::new();
    let entry = InnerSnapshot {
        x_local: vec![1.0, 2.0],
        rhs: vec![0.5, -0.5],
    };
    let token = slot.snapshot(&entry).unwrap();
    for _ in 0..2 {
        assert_eq!(recover_sdc(&slot, &token, &metrics).unwrap(), entry);
    }
    assert_eq!(metrics.snapshot().inner_restarts, 2);
    slot.commit(&token).unwrap();
    assert!(recover_sdc(&slot, &token, &metrics).is_err());
}

#[test]
fn two_detections_in_one_inner_solve() {
    let p = poisson(8);
    let cfg = SolverConfig {
        detector: Detector::Bounded,
        ..Default::default()
    };
    // Injections at inner SpMVs 20 and 40 land in the first and second attempt.
    let r = run_once(&p, 4, 0, &cfg, &scale_plan(20, Some(40)), false).unwrap();
    assert!(r.result.is_ok());
    assert_eq!(r.metrics.sdc_injected, 2);
    assert_eq!(r.metrics.sdc_detected, 2);
    assert_eq!(r.metrics.inner_restarts, 2);
    assert_eq!(r.metrics.inner_abandoned, 0);
    assert!(r.sdc_log.iter().all(|s| s.detected_same_step == Some(true)));
}

#[test]
fn detector_none_never_restarts() {
    let p = poisson(8);
    let r = run_once(
        &p,
        4,
        0,
        &SolverConfig::default(),
        &scale_plan(20, None),
        false,
    )
    .unwrap();
    assert!(r.metrics.sdc_injected > 0);
    assert_eq!(r.metrics.sdc_detected, 0);
    assert_eq!(r.metrics.inner_restarts, 0);
}

#[test]
fn injections_only_on_inner_path() {
    let p = poisson(8);
    let cfg = SolverConfig {
        inner_iters: 5,
        ..Default::default()
    };
    let r = run_once(&p, 4, 0, &cfg, &scale_plan(7, None), false).unwrap();
    let m = &r.metrics;
    assert!(m.spmv_count > m.inner_spmv);
    assert_eq!(m.sdc_injected, m.inner_spmv / 7);
    assert!(r
        .sdc_log
        .iter()
        .all(|s| s.clock % 7 == 0 && s.clock <= m.inner_spmv));
}

#[test]
fn identity_outer_one_iteration() {
    let a = CsrMatrix::identity(6);
    let b: Vec<f64> = (1..=6).map(f64::from).collect();
    let p = ProblemData {
        a,
        b: DenseVector::new(b.clone()),
    };
    let r = run_once(
        &p,
        2,
        0,
        &SolverConfig::default(),
        &FaultPlan::none(),
        false,
    )
    .unwrap();
    let o = r.result.unwrap();
    assert!(o.converged);
    assert_eq!(r.metrics.outer_iterations, 1);
    assert!(common::rel_err(r.x.as_ref().unwrap(), &b) <= 1e-15);
}

#[test]
fn poisson_matches_direct_solve() {
    let p = poisson(8);
    let r = run_once(
        &p,
        4,
        0,
        &SolverConfig::default(),
        &FaultPlan::none(),
        false,
    )
    .unwrap();
    let o = r.result.unwrap();
    assert!(o.relative_residual <= 1e-8);
    let x = r.x.unwrap();
    assert!(common::rel_residual(&p.a, &x, &p.b) <= 1e-8);
    assert!(common::rel_err(&x, &common::dense_solve(&p.a, &p.b)) <= 1e-6);
    assert!(r.metrics.iterations <= 500);
}

#[test]
fn budget_exhaustion_reported() {
    let p = poisson(8);
    let cfg = SolverConfig {
        inner_iters: 1,
        outer_iters: 3,
        ..Default::default()
    };
    let r = run_once(&p, 2, 0, &cfg, &FaultPlan::none(), false).unwrap();
    match r.result {
        Err(SolverError::BudgetExhausted { relative_residual }) => {
            assert!(relative_residual > 1e-8);
            assert_eq!(r.metrics.final_relative_residual, relative_residual);
        }
        other => panic!("expected budget exhaustion, got {other:?}"),
    }
}

fn failure_plan(events: &[(usize, Trigger)]) -> FaultPlan {
    FaultPlan {
        failure_events: events
            .iter()
            .map(|&(r, t)| FailureEvent::new(RankId(r), t))
            .collect(),
        ..FaultPlan::none()
    }
}

fn ckpt_cfg() -> SolverConfig {
    SolverConfig {
        inner_iters: 5,
        checkpointing: true,
        ..Default::default()
    }
}

#[test]
fn failure_resumes_at_its_outer_iteration() {
    let p = poisson(8);
    let reference = run_once(&p, 4, 0, &ckpt_cfg(), &FaultPlan::none(), false).unwrap();
    let r = run_once(
        &p,
        4,
        1,
        &ckpt_cfg(),
        &failure_plan(&[(1, Trigger::Outer(5))]),
        false,
    )
    .unwrap();
    let o = r.result.as_ref().unwrap();
    assert!(o.converged && o.relative_residual <= 1e-8);
    assert_eq!(r.metrics.resume_epochs, vec![5]);
    assert_eq!(r.metrics.outer_restarts, 1);
    assert_eq!(r.kills, 1);
    // Deterministic rollback replays the fault-free arithmetic.
    assert_eq!(
        o.relative_residual,
        reference.result.unwrap().relative_residual
    );
}

#[test]
fn failure_before_first_checkpoint_restarts_from_scratch() {
    let p = poisson(8);
    let r = run_once(
        &p,
        4,
        1,
        &ckpt_cfg(),
        &failure_plan(&[(3, Trigger::Outer(0))]),
        false,
    )
    .unwrap();
    assert!(r.result.as_ref().unwrap().converged);
    assert_eq!(r.metrics.resume_epochs, vec![0]);
}

#[test]
fn four_staggered_failures_four_spares() {
    let p = poisson(8);
    let events = [
        (0, Trigger::Outer(1)),
        (1, Trigger::Outer(2)),
        (2, Trigger::Outer(3)),
        (3, Trigger::Outer(4)),
    ];
    let r = run_once(&p, 4, 4, &ckpt_cfg(), &failure_plan(&events), false).unwrap();
    assert!(r.result.as_ref().unwrap().relative_residual <= 1e-8);
    assert_eq!(r.kills, 4);
    let epochs: Vec<u64> = r.activations.iter().map(|a| a.2).collect();
    assert_eq!(epochs.len(), 4);
    assert!(epochs.windows(2).all(|w| w[0] < w[1]));
    let pids: Vec<usize> = r.activations.iter().map(|a| a.0).collect();
    assert_eq!(pids, vec![4, 5, 6, 7]);
}

#[test]
fn too_few_spares_aborts() {
    let p = poisson(6);
    let events = [(0, Trigger::Outer(1)), (2, Trigger::Outer(2))];
    let r = run_once(&p, 4, 1, &ckpt_cfg(), &failure_plan(&events), false).unwrap();
    assert_eq!(r.status(), "InsufficientSpares");
}

#[test]
fn failure_without_checkpointing_is_unprotected() {
    let p = poisson(6);
    let cfg = SolverConfig {
        inner_iters: 5,
        ..Default::default()
    };
    let r = run_once(
        &p,
        4,
        1,
        &cfg,
        &failure_plan(&[(2, Trigger::Outer(1))]),
        false,
    )
    .unwrap();
    assert!(matches!(r.result, Err(SolverError::Unprotected(_))));
}
