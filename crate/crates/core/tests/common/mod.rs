//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::{Arc, Mutex};

use multires::linalg::CsrMatrix;
use multires::runtime::{KillSwitch, LogicalClock, RankId, WorldConfig};

/// Dense LU with partial pivoting.
#[allow(clippy::needless_range_loop)]
pub fn dense_solve(a: &CsrMatrix, b: &[f64]) -> Vec<f64> {
    let n = a.n_rows();
    let mut m = a.to_dense();
    let mut x = b.to_vec();
    for k in 0..n {
        let p = (k..n)
            .max_by(|&i, &j| m[i][k].abs().total_cmp(&m[j][k].abs()))
            .unwrap();
        m.swap(k, p);
        x.swap(k, p);
        let pivot = m[k][k];
        assert!(pivot != 0.0, "singular matrix");
        for i in k + 1..n {
            let f = m[i][k] / pivot;
            if f != 0.0 {
                for j in k..n {
                    m[i][j] -= f * m[k][j];
                }
                x[i] -= f * x[k];
            }
        }
    }
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|j| m[k][j] * x[j]).sum();
        x[k] = (x[k] - s) / m[k][k];
    }
    x
}

pub fn rel_err(x: &[f64], reference: &[f64]) -> f64 {
    let num: f64 = x
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let den: f64 = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
    num / den
}

/// ‖b − A x‖ / ‖b‖ computed densely.
pub fn rel_residual(a: &CsrMatrix, x: &[f64], b: &[f64]) -> f64 {
    let d = a.to_dense();
    let r: Vec<f64> = d
        .iter()
        .zip(b)
        .map(|(row, bi)| bi - row.iter().zip(x).map(|(a, x)| a * x).sum::<f64>())
        .collect();
    r.iter().map(|v| v * v).sum::<f64>().sqrt() / b.iter().map(|v| v * v).sum::<f64>().sqrt()
}

type Rule = dyn Fn(RankId, &LogicalClock) -> bool + Send + Sync;

/// Kills a rank the first time `rule` holds for it; later occupants of the
/// same rank id are spared.
pub struct KillOnce {
    fired: Mutex<BTreeSet<RankId>>,
    rule: Box<Rule>,
}

impl KillOnce {
    pub fn world(
        n: usize,
        spares: usize,
        rule: impl Fn(RankId, &LogicalClock) -> bool + Send + Sync + 'static,
    ) -> WorldConfig {
        let mut w = WorldConfig::new(n, spares);
        w.kill_switch = Some(Arc::new(KillOnce {
            fired: Mutex::new(BTreeSet::new()),
            rule: Box::new(rule),
        }));
        w
    }
}

impl KillSwitch for KillOnce {
    fn should_die(&self, rank: RankId, clock: &LogicalClock) -> bool {
        let mut fired = self.fired.lock().unwrap();
        if !fired.contains(&rank) && (self.rule)(rank, clock) {
            fired.insert(rank);
            return true;
        }
        false
    }
}
