//! Dense weight-centric paths used as oracles.
//!
//! These build `R`, `P` and the permutation matrices explicitly and apply
//! textbook matrix calculus. They are slow and allocate `dim x dim` buffers.

use crate::block::{assemble_dense, BlockDiagonalFactor};
use crate::cnp::{cnp_backward, cnp_forward, packed_grad_from_skew_grad, skew_from_packed};
use crate::dense::{matmul, BlockStack, Matrix};
use crate::error::Result;
use crate::permute::{permutation_matrix, permute_cols, permute_rows, permute_vector_batch, Direction};
use crate::scalar::Scalar;

use super::{LayerGrads, PoetLinearLayer};

/// Dense `R = Psi_m^T G_R Psi_m` and `P = Psi_n^T G_P Psi_n`.
pub fn dense_factors<T: Scalar>(layer: &PoetLinearLayer<T>) -> Result<(Matrix<T>, Matrix<T>)> {
    let (g_r, g_p) = layer.factors()?;
    let conj = |g: BlockStack<T>, pi| -> Result<Matrix<T>> {
        let psi = permutation_matrix::<T>(pi);
        matmul(&matmul(&psi.transpose(), &assemble_dense(&BlockDiagonalFactor::new(g)))?, &psi)
    };
    Ok((conj(g_r, layer.perm_in())?, conj(g_p, layer.perm_out())?))
}

/// `W_eff = R W P` from dense factors.
pub fn effective_weight<T: Scalar>(layer: &PoetLinearLayer<T>) -> Result<Matrix<T>> {
    let (r, p) = dense_factors(layer)?;
    matmul(&matmul(&r, &layer.weight().base_dense())?, &p)
}

/// `Z = X (R W P)`.
pub fn forward<T: Scalar>(layer: &PoetLinearLayer<T>, x: &Matrix<T>) -> Result<Matrix<T>> {
    matmul(x, &effective_weight(layer)?)
}

/// Gradients of `<dZ, X R W P>` by dense calculus.
pub fn backward<T: Scalar>(layer: &PoetLinearLayer<T>, x: &Matrix<T>, dz: &Matrix<T>) -> Result<LayerGrads<T>> {
    let (r, p) = dense_factors(layer)?;
    let w = layer.weight().base_dense();
    let w_eff = matmul(&matmul(&r, &w)?, &p)?;
    let dx = matmul(dz, &w_eff.transpose())?;
    let dw_eff = matmul(&x.transpose(), dz)?;
    let d_r = matmul(&dw_eff, &matmul(&w, &p)?.transpose())?;
    let d_p = matmul(&matmul(&r, &w)?.transpose(), &dw_eff)?;

    // dG = Psi dR Psi^T restricted to the diagonal blocks.
    let b = layer.block_size();
    let to_blocks = |d: &Matrix<T>, pi| -> Result<BlockStack<T>> {
        let psi = permutation_matrix::<T>(pi);
        let full = matmul(&matmul(&psi, d)?, &psi.transpose())?;
        let nb = full.rows() / b;
        let mut out = BlockStack::zeros(nb, b);
        for k in 0..nb {
            let blk = out.block_mut(k);
            for i in 0..b {
                for j in 0..b {
                    blk[i * b + j] = full.get(k * b + i, k * b + j);
                }
            }
        }
        Ok(out)
    };
    let dg_r = to_blocks(&d_r, layer.perm_in())?;
    let dg_p = to_blocks(&d_p, layer.perm_out())?;

    let (_, cache_r) = cnp_forward(&skew_from_packed(layer.q_r()), layer.neumann_order())?;
    let (_, cache_p) = cnp_forward(&skew_from_packed(layer.q_p()), layer.neumann_order())?;
    Ok(LayerGrads {
        q_r: packed_grad_from_skew_grad(&cnp_backward(&cache_r, &dg_r)?),
        q_p: packed_grad_from_skew_grad(&cnp_backward(&cache_p, &dg_p)?),
        dx,
    })
}

/// Input-centric forward with four live permutations (no premerged weight).
pub fn forward_four_permutations<T: Scalar>(layer: &PoetLinearLayer<T>, x: &Matrix<T>) -> Result<Matrix<T>> {
    let (g_r, g_p) = layer.factors()?;
    let g_r = BlockDiagonalFactor::new(g_r);
    let g_p = BlockDiagonalFactor::new(g_p);
    let w = layer.weight().base_dense();
    let u = permute_vector_batch(x, layer.perm_in(), Direction::Inverse)?;
    let a = crate::block::apply_to_features(&g_r, &u, true)?;
    let a = permute_vector_batch(&a, layer.perm_in(), Direction::Forward)?;
    let v = matmul(&a, &w)?;
    let v = permute_cols(&v, layer.perm_out(), Direction::Inverse)?;
    let y = crate::block::apply_to_features(&g_p, &v, true)?;
    permute_vector_batch(&y, layer.perm_out(), Direction::Forward)
}

/// Weight-centric merge formula `Psi_m^T G_R Psi_m W Psi_n^T G_P Psi_n`
/// evaluated with gathers on the base weight.
pub fn merged_weight_gathers<T: Scalar>(layer: &PoetLinearLayer<T>) -> Result<Matrix<T>> {
    let (g_r, g_p) = layer.factors()?;
    let w = layer.weight().base_dense();
    let t = permute_rows(&w, layer.perm_in(), Direction::Forward)?;
    let t = crate::block::apply_to_weight_rows(&BlockDiagonalFactor::new(g_r), &t, false)?;
    let t = permute_rows(&t, layer.perm_in(), Direction::Inverse)?;
    let t = permute_cols(&t, layer.perm_out(), Direction::Inverse)?;
    let t = crate::block::apply_to_weight_cols(&BlockDiagonalFactor::new(g_p), &t, false)?;
    permute_cols(&t, layer.perm_out(), Direction::Forward)
}
