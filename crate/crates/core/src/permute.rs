//! Matrix-free permutations.
//!
//! A [`PermutationMap`] `pi` stands for the 0/1 matrix `Psi` with
//! `(Psi W)[i, :] = W[pi(i), :]`. The four products with `Psi` are realized
//! as gathers:
//!
//! | product      | gather                         |
//! |--------------|--------------------------------|
//! | `Psi W`      | row `i` from row `pi(i)`       |
//! | `Psi^T W`    | row `i` from row `pi^-1(i)`    |
//! | `W Psi`      | column `j` from col `pi^-1(j)` |
//! | `W Psi^T`    | column `j` from col `pi(j)`    |

use crate::dense::{Matrix, Rng};
use crate::error::{PoetError, Result};
use crate::scalar::Scalar;
use crate::tape::counters;

/// Which side of the pair `Psi` / `Psi^T` to apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// `Psi W` for rows, `W Psi` for columns.
    Forward,
    /// `Psi^T W` for rows, `W Psi^T` for columns.
    Inverse,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PermutationMap {
    forward: Vec<u32>,
    inverse: Vec<u32>,
}

impl PermutationMap {
    pub fn identity(n: usize) -> Self {
        let ids: Vec<u32> = (0..n as u32).collect();
        PermutationMap {
            forward: ids.clone(),
            inverse: ids,
        }
    }

    /// Validates that `forward` is a bijection on `0..n` and builds the inverse.
    pub fn from_forward(forward: Vec<u32>) -> Result<Self> {
        let n = forward.len();
        let mut inverse = vec![u32::MAX; n];
        for (i, &p) in forward.iter().enumerate() {
            let p = p as usize;
            if p >= n || inverse[p] != u32::MAX {
                return Err(PoetError::Format(format!("index array is not a permutation of 0..{n}")));
            }
            inverse[p] = i as u32;
        }
        Ok(PermutationMap { forward, inverse })
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn forward(&self) -> &[u32] {
        &self.forward
    }

    pub fn inverse(&self) -> &[u32] {
        &self.inverse
    }

    #[inline]
    fn source(&self, i: usize, rows_forward: bool) -> usize {
        if rows_forward {
            self.forward[i] as usize
        } else {
            self.inverse[i] as usize
        }
    }
}

/// Uniform random permutation (Fisher–Yates).
pub fn sample_permutation(n: usize, rng: &mut Rng) -> Result<PermutationMap> {
    if n == 0 {
        return Err(PoetError::Config("cannot sample a permutation of 0 elements".into()));
    }
    if n > i32::MAX as usize {
        return Err(PoetError::Config(format!("permutation size {n} exceeds 2^31")));
    }
    let mut fwd: Vec<u32> = (0..n as u32).collect();
    for i in (1..n).rev() {
        let j = rng.below(i + 1);
        fwd.swap(i, j);
    }
    PermutationMap::from_forward(fwd)
}

fn check_len(op: &'static str, pi: &PermutationMap, n: usize) -> Result<()> {
    if pi.len() != n {
        return Err(PoetError::shape(op, format!("permutation of {} on axis of {n}", pi.len())));
    }
    Ok(())
}

pub fn permute_rows<T: Scalar>(w: &Matrix<T>, pi: &PermutationMap, dir: Direction) -> Result<Matrix<T>> {
    check_len("permute_rows", pi, w.rows())?;
    let mut out = Matrix::zeros(w.rows(), w.cols());
    let fwd = dir == Direction::Forward;
    for i in 0..w.rows() {
        out.row_mut(i).copy_from_slice(w.row(pi.source(i, fwd)));
    }
    Ok(out)
}

pub fn permute_cols<T: Scalar>(w: &Matrix<T>, pi: &PermutationMap, dir: Direction) -> Result<Matrix<T>> {
    check_len("permute_cols", pi, w.cols())?;
    let mut out = Matrix::zeros(w.rows(), w.cols());
    // W Psi reads column pi^-1(j); W Psi^T reads column pi(j).
    let idx = match dir {
        Direction::Forward => pi.inverse(),
        Direction::Inverse => pi.forward(),
    };
    for r in 0..w.rows() {
        let src = w.row(r);
        for (o, &s) in out.row_mut(r).iter_mut().zip(idx) {
            *o = src[s as usize];
        }
    }
    Ok(out)
}

/// Gathers along the feature axis of a `batch x dim` activation matrix; same
/// index semantics as [`permute_cols`].
pub fn permute_vector_batch<T: Scalar>(x: &Matrix<T>, pi: &PermutationMap, dir: Direction) -> Result<Matrix<T>> {
    check_len("permute_vector_batch", pi, x.cols())?;
    permute_cols(x, pi, dir)
}

/// `Psi_in W Psi_out^T`: the fixed middle factor of the layer forward, so that
/// only two permutations remain live per step.
pub fn premerge_weight<T: Scalar>(
    w: &Matrix<T>,
    perm_in: &PermutationMap,
    perm_out: &PermutationMap,
) -> Result<Matrix<T>> {
    check_len("premerge_weight (rows)", perm_in, w.rows())?;
    check_len("premerge_weight (cols)", perm_out, w.cols())?;
    let mut out = Matrix::zeros(w.rows(), w.cols());
    let cols = perm_out.forward();
    for i in 0..w.rows() {
        let src = w.row(perm_in.forward()[i] as usize);
        for (o, &s) in out.row_mut(i).iter_mut().zip(cols) {
            *o = src[s as usize];
        }
    }
    Ok(out)
}

/// Explicit 0/1 matrix for `pi` (oracle and reference paths only).
pub fn permutation_matrix<T: Scalar>(pi: &PermutationMap) -> Matrix<T> {
    counters::record_permutation_matrix();
    let n = pi.len();
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        m.set(i, pi.forward()[i] as usize, T::one());
    }
    m
}
