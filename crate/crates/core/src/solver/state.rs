//! Static and dynamic solver state and their checkpoint payload encoding
//! (little-endian `u64` counts and IEEE-754 doubles).

use crate::checkpoint::digest;
use crate::linalg::{dist_frobenius_norm, dist_norm2, CsrMatrix, DenseVector};
use crate::runtime::{Comm, CommError};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed state payload: {0}")]
pub struct DecodeError(pub &'static str);

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        for x in v {
            self.f64(*x);
        }
    }
    fn usizes(&mut self, v: &[usize]) {
        self.usize(v.len());
        for x in v {
            self.usize(*x);
        }
    }
    fn columns(&mut self, cols: &[Vec<f64>]) {
        self.usize(cols.len());
        for c in cols {
            self.f64s(c);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl Reader<'_> {
    fn take8(&mut self) -> Result<[u8; 8], DecodeError> {
        if self.buf.len() < 8 {
            return Err(DecodeError("truncated"));
        }
        let (head, rest) = self.buf.split_at(8);
        self.buf = rest;
        Ok(head.try_into().unwrap())
    }
    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take8()?))
    }
    fn usize(&mut self) -> Result<usize, DecodeError> {
        usize::try_from(self.u64()?).map_err(|_| DecodeError("count overflow"))
    }
    fn len(&mut self, elem: usize) -> Result<usize, DecodeError> {
        let n = self.usize()?;
        if n.checked_mul(elem).is_none_or(|b| b > self.buf.len()) {
            return Err(DecodeError("length exceeds payload"));
        }
        Ok(n)
    }
    fn f64(&mut self) -> Result<f64, DecodeError> {
        Ok(f64::from_le_bytes(self.take8()?))
    }
    fn f64s(&mut self) -> Result<Vec<f64>, DecodeError> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn usizes(&mut self) -> Result<Vec<usize>, DecodeError> {
        let n = self.len(8)?;
        (0..n).map(|_| self.usize()).collect()
    }
    fn columns(&mut self) -> Result<Vec<Vec<f64>>, DecodeError> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64s()).collect()
    }
    fn finish(self) -> Result<(), DecodeError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(DecodeError("trailing bytes"))
        }
    }
}

/// Operands `A` and `b` owned by one rank plus setup-time redundancy.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticState {
    pub a_local: CsrMatrix,
    pub b_local: DenseVector,
    pub frob_norm: f64,
    pub b_norm: f64,
    /// Digest of the operand bytes taken at setup.
    pub checksum: u64,
}

impl StaticState {
    /// Collective: computes the global Frobenius norm and ‖b‖.
    pub fn setup(
        a_local: CsrMatrix,
        b_local: DenseVector,
        comm: &mut Comm,
    ) -> Result<Self, CommError> {
        let frob_norm = dist_frobenius_norm(&a_local, comm)?;
        let b_norm = dist_norm2(&b_local, comm)?;
        Ok(Self::from_parts(a_local, b_local, frob_norm, b_norm))
    }

    pub fn from_parts(
        a_local: CsrMatrix,
        b_local: DenseVector,
        frob_norm: f64,
        b_norm: f64,
    ) -> Self {
        let mut s = StaticState {
            a_local,
            b_local,
            frob_norm,
            b_norm,
            checksum: 0,
        };
        s.reseal();
        s
    }

    fn operand_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        let a = &self.a_local;
        w.usize(a.n_rows());
        w.usize(a.n_cols());
        w.usizes(a.row_offsets());
        w.usizes(a.col_indices());
        w.f64s(a.values());
        w.usize(self.b_local.global_offset);
        w.f64s(&self.b_local);
        w.0
    }

    pub fn operand_digest(&self) -> u64 {
        digest(&self.operand_bytes())
    }

    /// Recomputes the checksum after a legitimate change of the operands.
    pub fn reseal(&mut self) {
        self.checksum = self.operand_digest();
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut bytes = self.operand_bytes();
        let mut w = Writer(std::mem::take(&mut bytes));
        w.f64(self.frob_norm);
        w.f64(self.b_norm);
        w.u64(self.checksum);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader { buf: bytes };
        let n_rows = r.usize()?;
        let n_cols = r.usize()?;
        let offsets = r.usizes()?;
        let cols = r.usizes()?;
        let vals = r.f64s()?;
        let global_offset = r.usize()?;
        let b = r.f64s()?;
        let frob_norm = r.f64()?;
        let b_norm = r.f64()?;
        let checksum = r.u64()?;
        r.finish()?;
        let a_local = CsrMatrix::new(n_rows, n_cols, offsets, cols, vals)
            .map_err(|_| DecodeError("invalid matrix"))?;
        Ok(StaticState {
            a_local,
            b_local: DenseVector::block(b, global_offset),
            frob_norm,
            b_norm,
            checksum,
        })
    }
}

/// Evolving state of the reliable outer iteration on one rank.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DynamicState {
    /// Completed outer iterations.
    pub k: usize,
    /// Outer iteration at which the current Krylov cycle started.
    pub cycle_start: usize,
    /// Initial guess of the current cycle.
    pub x0_local: Vec<f64>,
    /// Current solution estimate.
    pub x_local: Vec<f64>,
    /// Owned rows of the outer Arnoldi basis, `j + 1` columns.
    pub v_local: Vec<Vec<f64>>,
    /// Owned rows of the preconditioned directions, `j` columns.
    pub z_local: Vec<Vec<f64>>,
    /// Replicated outer Hessenberg, column `i` has `i + 2` entries.
    pub h_outer: Vec<Vec<f64>>,
    /// Residual norm at the start of the current cycle.
    pub r0_norm: f64,
    /// SDC injection clock, so a replay after rollback sees the same faults.
    pub inner_spmv_clock: u64,
}

impl DynamicState {
    /// Basis size of the current cycle.
    pub fn cycle_len(&self) -> usize {
        self.k - self.cycle_start
    }

    pub fn check_shape(&self) -> Result<(), DecodeError> {
        let j = self.cycle_len();
        if self.v_local.len() > j + 1
            || self.v_local.len() < j
            || self.z_local.len() != j
            || self.h_outer.len() != j
        {
            return Err(DecodeError("basis column counts disagree with k"));
        }
        if self
            .h_outer
            .iter()
            .enumerate()
            .any(|(i, c)| c.len() != i + 2)
        {
            return Err(DecodeError("Hessenberg column length"));
        }
        Ok(())
    }

    /// Full payload, or only `x` and counters when `with_basis` is false.
    pub fn to_bytes(&self, with_basis: bool) -> Vec<u8> {
        let mut w = Writer::default();
        w.u64(u64::from(with_basis));
        w.usize(self.k);
        w.u64(self.inner_spmv_clock);
        w.f64s(&self.x_local);
        if with_basis {
            w.usize(self.cycle_start);
            w.f64s(&self.x0_local);
            w.f64(self.r0_norm);
            w.columns(&self.v_local);
            w.columns(&self.z_local);
            w.columns(&self.h_outer);
        }
        w.0
    }

    /// Returns the decoded state and whether it carries the basis. Without
    /// the basis only `k`, `x` and the clock are meaningful.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, bool), DecodeError> {
        let mut r = Reader { buf: bytes };
        let with_basis = r.u64()? != 0;
        let k = r.usize()?;
        let inner_spmv_clock = r.u64()?;
        let x_local = r.f64s()?;
        let mut s = DynamicState {
            k,
            cycle_start: k,
            x0_local: x_local.clone(),
            x_local,
            v_local: Vec::new(),
            z_local: Vec::new(),
            h_outer: Vec::new(),
            r0_norm: 0.0,
            inner_spmv_clock,
        };
        if with_basis {
            s.cycle_start = r.usize()?;
            s.x0_local = r.f64s()?;
            s.r0_norm = r.f64()?;
            s.v_local = r.columns()?;
            s.z_local = r.columns()?;
            s.h_outer = r.columns()?;
            if s.cycle_start > s.k {
                return Err(DecodeError("cycle start after k"));
            }
            s.check_shape()?;
        }
        r.finish()?;
        Ok((s, with_basis))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{build_poisson3d, Poisson3DSpec};

    #[test]
    fn static_round_trip_and_seal() {
        let (a, b) = build_poisson3d(Poisson3DSpec::new(3, 2, 1)).unwrap();
        let s = StaticState::from_parts(
            a.row_block(2..5),
            DenseVector::block(b[2..5].to_vec(), 2),
            9.0,
            2.0,
        );
        let back = StaticState::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.operand_digest(), s.checksum);
        assert!(StaticState::from_bytes(&s.to_bytes()[..20]).is_err());
    }

    #[test]
    fn dynamic_round_trip() {
        let s = DynamicState {
            k: 2,
            cycle_start: 0,
            x0_local: vec![0.0; 2],
            x_local: vec![1.5, -2.0],
            v_local: vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]],
            z_local: vec![vec![2.0, 1.0], vec![3.0, 4.0]],
            h_outer: vec![vec![1.0, 2.0], vec![3.0, 4.0, 5.0]],
            r0_norm: 3.25,
            inner_spmv_clock: 50,
        };
        let (back, basis) = DynamicState::from_bytes(&s.to_bytes(true)).unwrap();
        assert!(basis);
        assert_eq!(back, s);
        let (xonly, basis) = DynamicState::from_bytes(&s.to_bytes(false)).unwrap();
        assert!(!basis);
        assert_eq!(xonly.x_local, s.x_local);
        assert_eq!(xonly.k, 2);
        assert_eq!(xonly.inner_spmv_clock, 50);
    }
}
