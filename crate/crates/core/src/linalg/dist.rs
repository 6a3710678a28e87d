use crate::runtime::{Comm, CommError, ReduceOp};

use super::{local_frobenius_sq, CsrMatrix};

/// Owned rows of `A·x`. The full `x` is assembled with an allgather, which
/// doubles as the failure-detection point of every iteration.
#[track_caller]
pub fn dist_spmv(
    a_local: &CsrMatrix,
    x_local: &[f64],
    comm: &mut Comm,
) -> Result<Vec<f64>, CommError> {
    let x = comm.allgather(x_local)?;
    assert_eq!(
        x.len(),
        a_local.n_cols(),
        "distributed blocks do not tile the column space"
    );
    Ok((0..a_local.n_rows())
        .map(|r| a_local.row(r).fold(0.0, |acc, (c, v)| acc + v * x[c]))
        .collect())
}

#[track_caller]
pub fn dist_dot(u: &[f64], v: &[f64], comm: &mut Comm) -> Result<f64, CommError> {
    assert_eq!(u.len(), v.len());
    let local = u.iter().zip(v).fold(0.0, |acc, (a, b)| acc + a * b);
    comm.allreduce_scalar(ReduceOp::Sum, local)
}

#[track_caller]
pub fn dist_norm2(v: &[f64], comm: &mut Comm) -> Result<f64, CommError> {
    Ok(dist_dot(v, v, comm)?.sqrt())
}

#[track_caller]
pub fn dist_frobenius_norm(a_local: &CsrMatrix, comm: &mut Comm) -> Result<f64, CommError> {
    Ok(comm
        .allreduce_scalar(ReduceOp::Sum, local_frobenius_sq(a_local))?
        .sqrt())
}
