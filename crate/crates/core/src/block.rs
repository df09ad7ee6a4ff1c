//! Block-diagonal orthogonal factors applied segment by segment.
//!
//! A factor of dimension `dim = num_blocks * b` acts on contiguous length-`b`
//! segments; the dense `dim x dim` matrix is never formed on these paths.
//! [`assemble_dense`] exists for oracles and audits.

use crate::dense::{BlockStack, Matrix};
use crate::error::{PoetError, Result};
use crate::par::{self, Schedule};
use crate::scalar::Scalar;
use crate::tape::counters;

#[derive(Clone, Debug, PartialEq)]
pub struct BlockDiagonalFactor<T> {
    blocks: BlockStack<T>,
}

impl<T: Scalar> BlockDiagonalFactor<T> {
    pub fn new(blocks: BlockStack<T>) -> Self {
        BlockDiagonalFactor { blocks }
    }

    pub fn identity(num_blocks: usize, b: usize) -> Self {
        BlockDiagonalFactor::new(BlockStack::identity(num_blocks, b))
    }

    pub fn blocks(&self) -> &BlockStack<T> {
        &self.blocks
    }

    pub fn into_blocks(self) -> BlockStack<T> {
        self.blocks
    }

    pub fn dim(&self) -> usize {
        self.blocks.dim()
    }

    pub fn block_dim(&self) -> usize {
        self.blocks.block_dim()
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.num_blocks()
    }
}

/// Returns the number of blocks for a dimension, rejecting ragged splits.
pub fn blocks_for(dim: usize, b: usize) -> Result<usize> {
    if b == 0 || dim % b != 0 {
        return Err(PoetError::Config(format!(
            "dimension {dim} is not divisible by block size {b}"
        )));
    }
    Ok(dim / b)
}

fn check_dim<T: Scalar>(op: &'static str, f: &BlockDiagonalFactor<T>, dim: usize) -> Result<()> {
    if f.block_dim() == 0 || dim % f.block_dim() != 0 {
        return Err(PoetError::Config(format!(
            "{op}: dimension {dim} is not divisible by block size {}",
            f.block_dim()
        )));
    }
    if dim != f.dim() {
        return Err(PoetError::shape(op, format!("factor dim {} vs operand dim {dim}", f.dim())));
    }
    Ok(())
}

/// Applies the factor to every feature vector (row) of `x`:
/// `transpose = false` gives `x G^T` (each vector mapped by `G`),
/// `transpose = true` gives `x G` (each vector mapped by `G^T`).
pub fn apply_to_features<T: Scalar>(f: &BlockDiagonalFactor<T>, x: &Matrix<T>, transpose: bool) -> Result<Matrix<T>> {
    apply_to_features_with(f, x, transpose, par::default_schedule())
}

pub fn apply_to_features_with<T: Scalar>(
    f: &BlockDiagonalFactor<T>,
    x: &Matrix<T>,
    transpose: bool,
    s: Schedule,
) -> Result<Matrix<T>> {
    check_dim("apply_to_features", f, x.cols())?;
    let mut out = Matrix::zeros(x.rows(), x.cols());
    apply_rows_into(f, x, transpose, &mut out, s);
    Ok(out)
}

/// Row-wise segment products shared by the feature and right-weight paths.
fn apply_rows_into<T: Scalar>(f: &BlockDiagonalFactor<T>, x: &Matrix<T>, transpose: bool, out: &mut Matrix<T>, s: Schedule) {
    let b = f.block_dim();
    let nb = f.num_blocks();
    counters::record_segment_matmuls(nb);
    let dim = x.cols();
    if dim == 0 {
        return;
    }
    let stack = &f.blocks;
    let work = x.rows() * dim * b;
    par::for_each_chunk_mut(s, out.data_mut(), dim, work, |r, orow| {
        let xr = x.row(r);
        for k in 0..nb {
            let g = stack.block(k);
            let xs = &xr[k * b..(k + 1) * b];
            let os = &mut orow[k * b..(k + 1) * b];
            if transpose {
                // o_i = sum_l x_l G[l][i]
                for (l, &xl) in xs.iter().enumerate() {
                    let grow = &g[l * b..(l + 1) * b];
                    for (o, &gv) in os.iter_mut().zip(grow) {
                        *o += xl * gv;
                    }
                }
            } else {
                // o_i = sum_l G[i][l] x_l
                for (i, o) in os.iter_mut().enumerate() {
                    let grow = &g[i * b..(i + 1) * b];
                    let mut acc = T::zero();
                    for (&gv, &xl) in grow.iter().zip(xs) {
                        acc += gv * xl;
                    }
                    *o = acc;
                }
            }
        }
    });
}

/// `G W` (or `G^T W` with `transpose`), blockwise over row segments.
pub fn apply_to_weight_rows<T: Scalar>(f: &BlockDiagonalFactor<T>, w: &Matrix<T>, transpose: bool) -> Result<Matrix<T>> {
    check_dim("apply_to_weight_rows", f, w.rows())?;
    let b = f.block_dim();
    let nb = f.num_blocks();
    let cols = w.cols();
    counters::record_segment_matmuls(nb);
    let mut out = Matrix::zeros(w.rows(), cols);
    if cols == 0 {
        return Ok(out);
    }
    let stack = &f.blocks;
    let work = w.rows() * cols * b;
    par::for_each_chunk_mut(par::default_schedule(), out.data_mut(), b * cols, work, |k, oblk| {
        let g = stack.block(k);
        for i in 0..b {
            let orow = &mut oblk[i * cols..(i + 1) * cols];
            for l in 0..b {
                let gv = if transpose { g[l * b + i] } else { g[i * b + l] };
                let wrow = w.row(k * b + l);
                for (o, &x) in orow.iter_mut().zip(wrow) {
                    *o += gv * x;
                }
            }
        }
    });
    Ok(out)
}

/// `W G` (or `W G^T` with `transpose`), blockwise over column segments.
pub fn apply_to_weight_cols<T: Scalar>(f: &BlockDiagonalFactor<T>, w: &Matrix<T>, transpose: bool) -> Result<Matrix<T>> {
    check_dim("apply_to_weight_cols", f, w.cols())?;
    let mut out = Matrix::zeros(w.rows(), w.cols());
    // W G maps each row by G^T, which is the feature path with transpose set.
    apply_rows_into(f, w, !transpose, &mut out, par::default_schedule());
    Ok(out)
}

/// Per-block gradient of `A = U G` (segment-wise) with respect to `G`:
/// `dG_k = sum_r U[r, seg k]^T dA[r, seg k]`.
pub fn segment_outer_grad<T: Scalar>(u: &Matrix<T>, da: &Matrix<T>, b: usize) -> Result<BlockStack<T>> {
    if u.shape() != da.shape() {
        return Err(PoetError::shape("segment_outer_grad", format!("{:?} vs {:?}", u.shape(), da.shape())));
    }
    let nb = blocks_for(u.cols(), b)?;
    counters::record_segment_matmuls(nb);
    let mut out = BlockStack::zeros(nb, b);
    let work = u.rows() * u.cols() * b;
    par::for_each_chunk_mut(par::default_schedule(), out.data_mut(), b * b, work, |k, blk| {
        for r in 0..u.rows() {
            let us = &u.row(r)[k * b..(k + 1) * b];
            let ds = &da.row(r)[k * b..(k + 1) * b];
            for (i, &ui) in us.iter().enumerate() {
                let brow = &mut blk[i * b..(i + 1) * b];
                for (o, &dj) in brow.iter_mut().zip(ds) {
                    *o += ui * dj;
                }
            }
        }
    });
    Ok(out)
}

/// The dense `dim x dim` block-diagonal matrix.
pub fn assemble_dense<T: Scalar>(f: &BlockDiagonalFactor<T>) -> Matrix<T> {
    let b = f.block_dim();
    let dim = f.dim();
    let mut m = Matrix::zeros(dim, dim);
    for k in 0..f.num_blocks() {
        let g = f.blocks.block(k);
        for i in 0..b {
            for j in 0..b {
                m.set(k * b + i, k * b + j, g[i * b + j]);
            }
        }
    }
    m
}
