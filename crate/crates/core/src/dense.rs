//! Dense row-major matrices, stacks of small square blocks, the seeded
//! generator, and an audit-scale singular value routine.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{PoetError, Result};
use crate::par::{self, Schedule};
use crate::scalar::Scalar;
use crate::tape::counters;

/// Row-major dense matrix.
#[derive(Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Clone> Clone for Matrix<T> {
    fn clone(&self) -> Self {
        counters::record_alloc(self.rows, self.cols, std::mem::size_of_val(self.data.as_slice()));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.clone(),
        }
    }
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        counters::record_alloc(rows, cols, rows * cols * T::BYTES);
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(PoetError::shape(
                "Matrix::from_vec",
                format!("{} elements for {rows}x{cols}", data.len()),
            ));
        }
        counters::record_alloc(rows, cols, rows * cols * T::BYTES);
        Ok(Matrix { rows, cols, data })
    }

    /// Builds from nested rows; panics on ragged input (test convenience).
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        assert!(rows.iter().all(|x| x.len() == c), "ragged rows");
        let data = rows.iter().flatten().map(|&v| T::from_f64(v)).collect();
        Matrix::from_vec(r, c, data).expect("consistent shape")
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn transpose(&self) -> Self {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        let mut out = Matrix::zeros(self.rows, self.cols);
        for (o, &x) in out.data.iter_mut().zip(&self.data) {
            *o = f(x);
        }
        out
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    fn check_same(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(PoetError::shape(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same(other, "Matrix::add")?;
        let mut out = self.clone();
        for (o, &x) in out.data.iter_mut().zip(&other.data) {
            *o += x;
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same(other, "Matrix::sub")?;
        let mut out = self.clone();
        for (o, &x) in out.data.iter_mut().zip(&other.data) {
            *o -= x;
        }
        Ok(out)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.check_same(other, "Matrix::hadamard")?;
        let mut out = self.clone();
        for (o, &x) in out.data.iter_mut().zip(&other.data) {
            *o *= x;
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same(other, "Matrix::add_assign")?;
        for (o, &x) in self.data.iter_mut().zip(&other.data) {
            *o += x;
        }
        Ok(())
    }

    /// Sum of all elements, accumulated in `f64`.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64()).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.as_f64().abs()))
    }

    /// Largest elementwise absolute difference; `inf` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        if self.shape() != other.shape() {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a.as_f64() - b.as_f64()).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Element-type conversion (used to run `f64` oracles against `f32` state).
    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        let data = self.data.iter().map(|x| U::from_f64(x.as_f64())).collect();
        Matrix::from_vec(self.rows, self.cols, data).expect("same shape")
    }
}

/// Dense product `a * b`.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    matmul_with(a, b, par::default_schedule())
}

pub fn matmul_with<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, s: Schedule) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(PoetError::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    counters::record_dense_matmul();
    let (n, k) = (b.cols, a.cols);
    let mut out = Matrix::zeros(a.rows, n);
    if n == 0 {
        return Ok(out);
    }
    let work = a.rows * n * k;
    par::for_each_chunk_mut(s, &mut out.data, n, work, |i, orow| {
        let arow = &a.data[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    });
    Ok(out)
}

/// `a * b^T` without forming the transpose.
pub fn matmul_nt<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.cols {
        return Err(PoetError::shape(
            "matmul_nt",
            format!("{:?} x {:?}^T", a.shape(), b.shape()),
        ));
    }
    counters::record_dense_matmul();
    let (n, k) = (b.rows, a.cols);
    let mut out = Matrix::zeros(a.rows, n);
    if n == 0 {
        return Ok(out);
    }
    let work = a.rows * n * k;
    par::for_each_chunk_mut(par::default_schedule(), &mut out.data, n, work, |i, orow| {
        let arow = &a.data[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            *o = acc;
        }
    });
    Ok(out)
}

/// `a^T * b` without forming the transpose.
pub fn matmul_tn<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.rows != b.rows {
        return Err(PoetError::shape(
            "matmul_tn",
            format!("{:?}^T x {:?}", a.shape(), b.shape()),
        ));
    }
    counters::record_dense_matmul();
    let (m, n) = (a.cols, b.cols);
    let mut out = Matrix::zeros(m, n);
    if n == 0 {
        return Ok(out);
    }
    let work = a.rows * m * n;
    par::for_each_chunk_mut(par::default_schedule(), &mut out.data, n, work, |i, orow| {
        for r in 0..a.rows {
            let ari = a.data[r * m + i];
            let brow = &b.data[r * n..(r + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += ari * bv;
            }
        }
    });
    Ok(out)
}

/// Draws i.i.d. `N(0, std^2)` entries.
pub fn gaussian_matrix<T: Scalar>(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Result<Matrix<T>> {
    if !(std > 0.0 && std.is_finite()) {
        return Err(PoetError::Config(format!("gaussian std must be positive, got {std}")));
    }
    let data = (0..rows * cols).map(|_| T::from_f64(rng.normal() * std)).collect();
    Matrix::from_vec(rows, cols, data)
}

/// Contiguous stack of `num_blocks` square `block_dim x block_dim` matrices.
#[derive(Debug, PartialEq)]
pub struct BlockStack<T> {
    num_blocks: usize,
    block_dim: usize,
    data: Vec<T>,
}

impl<T: Clone> Clone for BlockStack<T> {
    fn clone(&self) -> Self {
        counters::record_alloc(
            self.num_blocks * self.block_dim,
            self.block_dim,
            std::mem::size_of_val(self.data.as_slice()),
        );
        BlockStack {
            num_blocks: self.num_blocks,
            block_dim: self.block_dim,
            data: self.data.clone(),
        }
    }
}

impl<T: Scalar> BlockStack<T> {
    pub fn zeros(num_blocks: usize, block_dim: usize) -> Self {
        let len = num_blocks * block_dim * block_dim;
        counters::record_alloc(num_blocks * block_dim, block_dim, len * T::BYTES);
        BlockStack {
            num_blocks,
            block_dim,
            data: vec![T::zero(); len],
        }
    }

    pub fn identity(num_blocks: usize, block_dim: usize) -> Self {
        let mut s = Self::zeros(num_blocks, block_dim);
        for k in 0..num_blocks {
            let blk = s.block_mut(k);
            for i in 0..block_dim {
                blk[i * block_dim + i] = T::one();
            }
        }
        s
    }

    pub fn from_vec(num_blocks: usize, block_dim: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != num_blocks * block_dim * block_dim {
            return Err(PoetError::shape(
                "BlockStack::from_vec",
                format!("{} elements for {num_blocks} blocks of {block_dim}x{block_dim}", data.len()),
            ));
        }
        counters::record_alloc(num_blocks * block_dim, block_dim, data.len() * T::BYTES);
        Ok(BlockStack {
            num_blocks,
            block_dim,
            data,
        })
    }

    pub fn from_blocks(blocks: &[Matrix<T>]) -> Result<Self> {
        let b = blocks.first().map_or(0, |m| m.rows());
        let mut data = Vec::with_capacity(blocks.len() * b * b);
        for m in blocks {
            if m.shape() != (b, b) {
                return Err(PoetError::shape("BlockStack::from_blocks", format!("{:?} vs {b}x{b}", m.shape())));
            }
            data.extend_from_slice(m.data());
        }
        Self::from_vec(blocks.len(), b, data)
    }

    #[inline]
    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    #[inline]
    pub fn block_dim(&self) -> usize {
        self.block_dim
    }

    /// Total feature dimension covered by the stack.
    pub fn dim(&self) -> usize {
        self.num_blocks * self.block_dim
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn block(&self, k: usize) -> &[T] {
        let bb = self.block_dim * self.block_dim;
        &self.data[k * bb..(k + 1) * bb]
    }

    #[inline]
    pub fn block_mut(&mut self, k: usize) -> &mut [T] {
        let bb = self.block_dim * self.block_dim;
        &mut self.data[k * bb..(k + 1) * bb]
    }

    pub fn block_matrix(&self, k: usize) -> Matrix<T> {
        Matrix::from_vec(self.block_dim, self.block_dim, self.block(k).to_vec()).expect("square block")
    }

    pub fn same_geometry(&self, other: &Self) -> bool {
        self.num_blocks == other.num_blocks && self.block_dim == other.block_dim
    }

    pub fn transpose_blocks(&self) -> Self {
        let b = self.block_dim;
        let mut out = Self::zeros(self.num_blocks, b);
        for k in 0..self.num_blocks {
            let src = self.block(k);
            let dst = out.block_mut(k);
            for i in 0..b {
                for j in 0..b {
                    dst[j * b + i] = src[i * b + j];
                }
            }
        }
        out
    }

    /// `self * alpha + other * beta`, elementwise.
    pub fn axpby(&self, alpha: T, other: &Self, beta: T) -> Result<Self> {
        if !self.same_geometry(other) {
            return Err(PoetError::shape("BlockStack::axpby", "geometry mismatch"));
        }
        let mut out = Self::zeros(self.num_blocks, self.block_dim);
        for ((o, &x), &y) in out.data.iter_mut().zip(&self.data).zip(&other.data) {
            *o = x * alpha + y * beta;
        }
        Ok(out)
    }

    pub fn add_identity(&mut self, scale: T) {
        let b = self.block_dim;
        for k in 0..self.num_blocks {
            let blk = self.block_mut(k);
            for i in 0..b {
                blk[i * b + i] += scale;
            }
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        if !self.same_geometry(other) {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a.as_f64() - b.as_f64()).abs()))
    }

    /// `||self - other||_F`; `inf` on geometry mismatch.
    pub fn frobenius_distance(&self, other: &Self) -> f64 {
        if !self.same_geometry(other) {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// `||G^T G - I||_F` over the whole stack.
    pub fn orthogonality_error(&self) -> f64 {
        let b = self.block_dim;
        let mut acc = 0.0;
        for k in 0..self.num_blocks {
            let g = self.block(k);
            for i in 0..b {
                for j in 0..b {
                    let mut dot = 0.0;
                    for r in 0..b {
                        dot += g[r * b + i].as_f64() * g[r * b + j].as_f64();
                    }
                    let target = if i == j { 1.0 } else { 0.0 };
                    acc += (dot - target).powi(2);
                }
            }
        }
        acc.sqrt()
    }

    pub fn cast<U: Scalar>(&self) -> BlockStack<U> {
        let data = self.data.iter().map(|x| U::from_f64(x.as_f64())).collect();
        BlockStack::from_vec(self.num_blocks, self.block_dim, data).expect("same geometry")
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Per-block products `a[k] * b[k]`.
pub fn batched_matmul<T: Scalar>(a: &BlockStack<T>, b: &BlockStack<T>) -> Result<BlockStack<T>> {
    batched_matmul_with(a, b, par::default_schedule())
}

pub fn batched_matmul_with<T: Scalar>(a: &BlockStack<T>, b: &BlockStack<T>, s: Schedule) -> Result<BlockStack<T>> {
    if !a.same_geometry(b) {
        return Err(PoetError::shape(
            "batched_matmul",
            format!(
                "{}x{}^2 vs {}x{}^2",
                a.num_blocks, a.block_dim, b.num_blocks, b.block_dim
            ),
        ));
    }
    counters::record_block_matmuls(a.num_blocks);
    let d = a.block_dim;
    let bb = d * d;
    let mut out = BlockStack::zeros(a.num_blocks, d);
    let work = a.num_blocks * bb * d;
    par::for_each_chunk_mut(s, &mut out.data, bb, work, |k, o| {
        block_gemm_acc(&a.data[k * bb..(k + 1) * bb], &b.data[k * bb..(k + 1) * bb], o, d);
    });
    Ok(out)
}

/// `out += a * b` for square `d x d` row-major slices.
#[inline]
pub(crate) fn block_gemm_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], d: usize) {
    for i in 0..d {
        let orow = &mut out[i * d..(i + 1) * d];
        for p in 0..d {
            let aip = a[i * d + p];
            let brow = &b[p * d..(p + 1) * d];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// Snapshot of an [`Rng`] sufficient to resume the exact stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

/// Seeded, platform-independent generator (ChaCha8).
#[derive(Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut r = Rng::new(state.seed);
        r.inner.set_word_pos(state.word_pos);
        r
    }

    /// Derives an independent generator for a sub-task.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.inner.gen())
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen()
    }
}

const SVD_TOL: f64 = 1e-10;
const SVD_MAX_SWEEPS: usize = 100;

/// Singular values in descending order via one-sided Jacobi (audit scale).
pub fn svd_singular_values<T: Scalar>(a: &Matrix<T>) -> Result<Vec<f64>> {
    if !a.is_finite() {
        return Err(PoetError::NonFinite("svd_singular_values input".into()));
    }
    let (m, n) = a.shape();
    if m.min(n) > 512 {
        return Err(PoetError::shape("svd_singular_values", format!("{m}x{n} exceeds audit scale")));
    }
    // Columns of the taller orientation.
    let (len, ncols) = if m >= n { (m, n) } else { (n, m) };
    let mut cols: Vec<Vec<f64>> = (0..ncols)
        .map(|j| {
            (0..len)
                .map(|i| if m >= n { a.get(i, j) } else { a.get(j, i) }.as_f64())
                .collect()
        })
        .collect();

    let mut converged = false;
    let mut residual = 0.0f64;
    for _ in 0..SVD_MAX_SWEEPS {
        residual = 0.0;
        let mut rotated = false;
        for p in 0..ncols {
            for q in p + 1..ncols {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut al = 0.0;
                    let mut be = 0.0;
                    let mut ga = 0.0;
                    for (x, y) in cp.iter().zip(cq) {
                        al += x * x;
                        be += y * y;
                        ga += x * y;
                    }
                    (al, be, ga)
                };
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let rel = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(rel);
                if rel <= SVD_TOL {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                let (lo, hi) = cols.split_at_mut(q);
                for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = cs * xp - sn * yq;
                    *y = sn * xp + cs * yq;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(PoetError::NonConvergence {
            op: "svd_singular_values",
            iterations: SVD_MAX_SWEEPS,
            residual,
        });
    }
    let mut sv: Vec<f64> = cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    sv.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    Ok(sv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_swap() {
        let mut rng = Rng::new(1);
        let a: Matrix<f64> = gaussian_matrix(3, 4, 1.0, &mut rng).unwrap();
        assert_eq!(matmul(&Matrix::identity(3), &a).unwrap(), a);
        let x = Matrix::<f64>::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let p = Matrix::<f64>::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let want = Matrix::<f64>::from_rows(&[vec![2.0, 1.0], vec![4.0, 3.0]]);
        assert_eq!(matmul(&x, &p).unwrap(), want);
    }

    #[test]
    fn matmul_matches_triple_loop_bitwise() {
        let mut rng = Rng::new(7);
        let a: Matrix<f64> = gaussian_matrix(5, 7, 1.0, &mut rng).unwrap();
        let b: Matrix<f64> = gaussian_matrix(7, 3, 1.0, &mut rng).unwrap();
        let got = matmul(&a, &b).unwrap();
        let want = naive(&a, &b);
        assert_eq!(got.data(), want.data());
    }

    #[test]
    fn transposed_products_match() {
        let mut rng = Rng::new(21);
        let a: Matrix<f64> = gaussian_matrix(4, 6, 1.0, &mut rng).unwrap();
        let b: Matrix<f64> = gaussian_matrix(5, 6, 1.0, &mut rng).unwrap();
        let c: Matrix<f64> = gaussian_matrix(4, 3, 1.0, &mut rng).unwrap();
        assert!(matmul_nt(&a, &b).unwrap().max_abs_diff(&naive(&a, &b.transpose())) < 1e-13);
        assert!(matmul_tn(&a, &c).unwrap().max_abs_diff(&naive(&a.transpose(), &c)) < 1e-13);
        assert!(matmul_nt(&a, &c).is_err());
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Matrix::<f64>::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(PoetError::Shape { .. })));
    }

    #[test]
    fn matmul_schedules_bitwise_equal() {
        let mut rng = Rng::new(3);
        let a: Matrix<f64> = gaussian_matrix(64, 80, 1.0, &mut rng).unwrap();
        let b: Matrix<f64> = gaussian_matrix(80, 70, 1.0, &mut rng).unwrap();
        let s = matmul_with(&a, &b, Schedule::Sequential).unwrap();
        let p = matmul_with(&a, &b, Schedule::Parallel).unwrap();
        assert_eq!(s.data(), p.data());
    }

    #[test]
    fn batched_matmul_is_per_block() {
        let mut rng = Rng::new(11);
        let blocks_a: Vec<Matrix<f64>> = (0..2).map(|_| gaussian_matrix(3, 3, 1.0, &mut rng).unwrap()).collect();
        let blocks_b: Vec<Matrix<f64>> = (0..2).map(|_| gaussian_matrix(3, 3, 1.0, &mut rng).unwrap()).collect();
        let a = BlockStack::from_blocks(&blocks_a).unwrap();
        let b = BlockStack::from_blocks(&blocks_b).unwrap();
        let c = batched_matmul(&a, &b).unwrap();
        for k in 0..2 {
            let want = matmul(&blocks_a[k], &blocks_b[k]).unwrap();
            assert_eq!(c.block(k), want.data());
        }
        let id = BlockStack::identity(2, 3);
        assert_eq!(batched_matmul(&id, &b).unwrap(), b);
        let bad = BlockStack::<f64>::identity(3, 3);
        assert!(batched_matmul(&a, &bad).is_err());
    }

    #[test]
    fn svd_diag_and_orthogonal() {
        let d = Matrix::<f64>::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]);
        let sv = svd_singular_values(&d).unwrap();
        assert!((sv[0] - 3.0).abs() < 1e-14 && (sv[1] - 1.0).abs() < 1e-14);
        let c = (0.3f64).cos();
        let s = (0.3f64).sin();
        let q = Matrix::<f64>::from_rows(&[vec![c, -s], vec![s, c]]);
        for v in svd_singular_values(&q).unwrap() {
            assert!((v - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn svd_wide_matrix_and_zero() {
        let mut rng = Rng::new(5);
        let a: Matrix<f64> = gaussian_matrix(3, 6, 1.0, &mut rng).unwrap();
        let s1 = svd_singular_values(&a).unwrap();
        let s2 = svd_singular_values(&a.transpose()).unwrap();
        assert_eq!(s1.len(), 3);
        for (x, y) in s1.iter().zip(&s2) {
            assert!((x - y).abs() < 1e-10);
        }
        let z = Matrix::<f64>::zeros(4, 4);
        assert_eq!(svd_singular_values(&z).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn gaussian_determinism_and_stats() {
        let a: Matrix<f64> = gaussian_matrix(100, 100, 1.0, &mut Rng::new(9)).unwrap();
        let b: Matrix<f64> = gaussian_matrix(100, 100, 1.0, &mut Rng::new(9)).unwrap();
        let c: Matrix<f64> = gaussian_matrix(100, 100, 1.0, &mut Rng::new(10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let n = a.data().len() as f64;
        let mean = a.sum() / n;
        let var = a.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.05, "std {}", var.sqrt());
        assert!(gaussian_matrix::<f64>(2, 2, 0.0, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut r = Rng::new(42);
        for _ in 0..17 {
            r.normal();
        }
        let st = r.state();
        let a: Vec<f64> = (0..5).map(|_| r.normal()).collect();
        let mut r2 = Rng::from_state(st);
        let b: Vec<f64> = (0..5).map(|_| r2.normal()).collect();
        assert_eq!(a, b);
    }
}
