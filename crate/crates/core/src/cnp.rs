//! Packed skew-symmetric parameters and the Cayley–Neumann orthogonalization.
//!
//! Each `b x b` block is driven by its strict upper triangle, stored row-major
//! over pairs `(0,1), (0,2), .., (0,b-1), (1,2), ..`. The orthogonal block is
//! the truncated Neumann approximation of the Cayley transform
//!
//! ```text
//! G = (I + Q)(I + Q + Q^2 + .. + Q^k)
//! ```
//!
//! For `k = 3` the forward pass is evaluated as `2(Q + Q^2 + Q^2 Q) + Q^2 Q^2 + I`
//! so that everything downstream depends only on `Q` and `Q^2`, and the
//! backward pass uses the matching closed form. Other orders fall back to
//! reverse-mode differentiation of the product form.

use crate::dense::{batched_matmul, BlockStack};
use crate::error::{PoetError, Result};
use crate::scalar::{c, Scalar};

/// Strict upper triangles of a stack of skew-symmetric blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct SkewParams<T> {
    num_blocks: usize,
    block_dim: usize,
    packed: Vec<T>,
}

/// Number of packed entries per `b x b` block.
pub const fn params_per_block(b: usize) -> usize {
    b * b.saturating_sub(1) / 2
}

impl<T: Scalar> SkewParams<T> {
    /// All-zero parameters, i.e. `G = I`.
    pub fn zeros(num_blocks: usize, block_dim: usize) -> Self {
        SkewParams {
            num_blocks,
            block_dim,
            packed: vec![T::zero(); num_blocks * params_per_block(block_dim)],
        }
    }

    pub fn from_vec(num_blocks: usize, block_dim: usize, packed: Vec<T>) -> Result<Self> {
        if packed.len() != num_blocks * params_per_block(block_dim) {
            return Err(PoetError::shape(
                "SkewParams::from_vec",
                format!(
                    "{} packed values for {num_blocks} blocks of size {block_dim}",
                    packed.len()
                ),
            ));
        }
        Ok(SkewParams {
            num_blocks,
            block_dim,
            packed,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    pub fn block_dim(&self) -> usize {
        self.block_dim
    }

    pub fn len(&self) -> usize {
        self.packed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packed.is_empty()
    }

    pub fn packed(&self) -> &[T] {
        &self.packed
    }

    pub fn packed_mut(&mut self) -> &mut [T] {
        &mut self.packed
    }

    pub fn reset(&mut self) {
        self.packed.iter_mut().for_each(|p| *p = T::zero());
    }
}

/// Bookkeeping shared by the forward and backward passes.
#[derive(Clone, Debug)]
pub struct CnpCache<T> {
    pub q: BlockStack<T>,
    pub q_sq: BlockStack<T>,
    pub order: NeumannOrder,
}

/// Truncation order of the Neumann series.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NeumannOrder(usize);

impl NeumannOrder {
    pub fn new(k: usize) -> Result<Self> {
        if k < 1 {
            return Err(PoetError::Config("Neumann order must be at least 1".into()));
        }
        Ok(NeumannOrder(k))
    }

    pub fn get(self) -> usize {
        self.0
    }
}

impl Default for NeumannOrder {
    fn default() -> Self {
        NeumannOrder(3)
    }
}

/// Expands packed parameters into explicit skew-symmetric blocks.
pub fn skew_from_packed<T: Scalar>(p: &SkewParams<T>) -> BlockStack<T> {
    let b = p.block_dim;
    let per = params_per_block(b);
    let mut q = BlockStack::zeros(p.num_blocks, b);
    for k in 0..p.num_blocks {
        let src = &p.packed[k * per..(k + 1) * per];
        let blk = q.block_mut(k);
        let mut idx = 0;
        for i in 0..b {
            for j in i + 1..b {
                blk[i * b + j] = src[idx];
                blk[j * b + i] = -src[idx];
                idx += 1;
            }
        }
    }
    q
}

/// Adjoint of [`skew_from_packed`]: entry `(i,j)` receives `dQ[i][j] - dQ[j][i]`.
pub fn packed_grad_from_skew_grad<T: Scalar>(dq: &BlockStack<T>) -> SkewParams<T> {
    let b = dq.block_dim();
    let per = params_per_block(b);
    let mut out = SkewParams::zeros(dq.num_blocks(), b);
    for k in 0..dq.num_blocks() {
        let blk = dq.block(k);
        let dst = &mut out.packed[k * per..(k + 1) * per];
        let mut idx = 0;
        for i in 0..b {
            for j in i + 1..b {
                dst[idx] = blk[i * b + j] - blk[j * b + i];
                idx += 1;
            }
        }
    }
    out
}

/// Approximately orthogonal blocks from skew-symmetric `q`.
pub fn cnp_forward<T: Scalar>(q: &BlockStack<T>, order: NeumannOrder) -> Result<(BlockStack<T>, CnpCache<T>)> {
    let k = order.get();
    if k < 1 {
        return Err(PoetError::Config("Neumann order must be at least 1".into()));
    }
    let two = c::<T>(2.0);
    let q_sq = batched_matmul(q, q)?;
    let g = if k == 3 {
        let q_cu = batched_matmul(&q_sq, q)?;
        let q_4 = batched_matmul(&q_sq, &q_sq)?;
        let mut g = q_4;
        for (((o, &a), &b2), &b3) in g
            .data_mut()
            .iter_mut()
            .zip(q.data())
            .zip(q_sq.data())
            .zip(q_cu.data())
        {
            *o += two * (a + b2 + b3);
        }
        g.add_identity(T::one());
        g
    } else {
        let series = neumann_series(q, &q_sq, k)?;
        let mut left = q.clone();
        left.add_identity(T::one());
        batched_matmul(&left, &series)?
    };
    Ok((
        g,
        CnpCache {
            q: q.clone(),
            q_sq,
            order,
        },
    ))
}

/// `I + Q + .. + Q^k`.
fn neumann_series<T: Scalar>(q: &BlockStack<T>, q_sq: &BlockStack<T>, k: usize) -> Result<BlockStack<T>> {
    let mut series = q.clone();
    series.add_identity(T::one());
    if k >= 2 {
        let mut acc = series.axpby(T::one(), q_sq, T::one())?;
        let mut power = q_sq.clone();
        for _ in 3..=k {
            power = batched_matmul(&power, q)?;
            acc = acc.axpby(T::one(), &power, T::one())?;
        }
        series = acc;
    }
    Ok(series)
}

/// Gradient with respect to the explicit skew blocks, given `dG`.
///
/// The result is the gradient for an unconstrained `Q`; pass it through
/// [`packed_grad_from_skew_grad`] to obtain packed-parameter gradients.
pub fn cnp_backward<T: Scalar>(cache: &CnpCache<T>, dg: &BlockStack<T>) -> Result<BlockStack<T>> {
    if !dg.same_geometry(&cache.q) {
        return Err(PoetError::shape(
            "cnp_backward",
            format!(
                "dG {}x{} vs cache {}x{}",
                dg.num_blocks(),
                dg.block_dim(),
                cache.q.num_blocks(),
                cache.q.block_dim()
            ),
        ));
    }
    if cache.order.get() != 3 {
        return generic_backward(cache, dg);
    }
    let two = c::<T>(2.0);
    let qt = cache.q.transpose_blocks();
    let q2t = cache.q_sq.transpose_blocks();
    // n2 = n1 Q^T + Q^T n1
    let n2 = batched_matmul(dg, &qt)?.axpby(T::one(), &batched_matmul(&qt, dg)?, T::one())?;
    // dQ = 2(n1 + n2) + (2Q^T + (Q^2)^T) n2 + (2 n1 + n2) (Q^2)^T
    let left = qt.axpby(two, &q2t, T::one())?;
    let right = dg.axpby(two, &n2, T::one())?;
    let t1 = batched_matmul(&left, &n2)?;
    let t2 = batched_matmul(&right, &q2t)?;
    let mut dq = dg.axpby(two, &n2, two)?;
    for ((o, &a), &b) in dq.data_mut().iter_mut().zip(t1.data()).zip(t2.data()) {
        *o += a + b;
    }
    Ok(dq)
}

/// Reverse-mode through `G = (I + Q) S`, `S = sum_{i=0..k} Q^i`.
fn generic_backward<T: Scalar>(cache: &CnpCache<T>, dg: &BlockStack<T>) -> Result<BlockStack<T>> {
    let k = cache.order.get();
    let q = &cache.q;
    let (nb, b) = (q.num_blocks(), q.block_dim());
    let mut powers = vec![BlockStack::identity(nb, b), q.clone()];
    for i in 2..=k {
        let next = if i == 2 {
            cache.q_sq.clone()
        } else {
            batched_matmul(&powers[i - 1], q)?
        };
        powers.push(next);
    }
    let mut series = BlockStack::zeros(nb, b);
    for p in &powers {
        series = series.axpby(T::one(), p, T::one())?;
    }
    let mut i_plus_q = q.clone();
    i_plus_q.add_identity(T::one());

    // Direct dependence through the (I + Q) factor.
    let mut dq = batched_matmul(dg, &series.transpose_blocks())?;
    let ds = batched_matmul(&i_plus_q.transpose_blocks(), dg)?;
    let qt = q.transpose_blocks();
    // Each power P_i = P_{i-1} Q receives ds plus what flows back from P_{i+1}.
    let mut upstream = ds.clone();
    for i in (1..=k).rev() {
        dq = dq.axpby(T::one(), &batched_matmul(&powers[i - 1].transpose_blocks(), &upstream)?, T::one())?;
        if i > 1 {
            upstream = ds.axpby(T::one(), &batched_matmul(&upstream, &qt)?, T::one())?;
        }
    }
    Ok(dq)
}

/// Exact Cayley transform `(I + Q)(I - Q)^{-1}` per block.
pub fn cayley_exact<T: Scalar>(q: &BlockStack<T>) -> Result<BlockStack<T>> {
    let b = q.block_dim();
    let mut out = BlockStack::zeros(q.num_blocks(), b);
    for k in 0..q.num_blocks() {
        let blk = q.block(k);
        let mut lhs: Vec<f64> = vec![0.0; b * b];
        let mut rhs: Vec<f64> = vec![0.0; b * b];
        for i in 0..b {
            for j in 0..b {
                let v = blk[i * b + j].as_f64();
                let id = if i == j { 1.0 } else { 0.0 };
                lhs[i * b + j] = id - v;
                rhs[i * b + j] = id + v;
            }
        }
        // (I - Q) and (I + Q) commute, so G solves (I - Q) G = I + Q.
        solve_in_place(&mut lhs, &mut rhs, b)?;
        for (o, v) in out.block_mut(k).iter_mut().zip(&rhs) {
            *o = T::from_f64(*v);
        }
    }
    Ok(out)
}

/// Gaussian elimination with partial pivoting; `rhs` is overwritten by the solution.
fn solve_in_place(a: &mut [f64], rhs: &mut [f64], n: usize) -> Result<()> {
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| a[x * n + col].abs().partial_cmp(&a[y * n + col].abs()).expect("finite"))
            .expect("non-empty");
        if a[pivot * n + col].abs() < 1e-300 {
            return Err(PoetError::Singular("cayley_exact"));
        }
        if pivot != col {
            for j in 0..n {
                a.swap(col * n + j, pivot * n + j);
                rhs.swap(col * n + j, pivot * n + j);
            }
        }
        let d = a[col * n + col];
        for r in col + 1..n {
            let f = a[r * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                a[r * n + j] -= f * a[col * n + j];
            }
            for j in 0..n {
                rhs[r * n + j] -= f * rhs[col * n + j];
            }
        }
    }
    for col in (0..n).rev() {
        let d = a[col * n + col];
        for j in 0..n {
            let mut s = rhs[col * n + j];
            for p in col + 1..n {
                s -= a[col * n + p] * rhs[p * n + j];
            }
            rhs[col * n + j] = s / d;
        }
    }
    Ok(())
}
