//! The reparameterized linear layer.
//!
//! Orientation is `Z = X W_eff` with `X: batch x m` and `W_eff = R W P`, where
//! `R = Psi_m^T G_R Psi_m` and `P = Psi_n^T G_P Psi_n`. The forward chain is
//!
//! ```text
//! u = X Psi_m^T          (gather)
//! a = u G_R              (mm1, blockwise)
//! v = a M,  M = Psi_m W Psi_n^T   (mm2, M precomputed at merge/reset)
//! w = v G_P              (mm3, blockwise)
//! Z = w Psi_n            (gather)
//! ```
//!
//! The backward pass of mm3 needs `v`. [`Variant::Fast`] keeps it from the
//! forward pass; [`Variant::Mem`] recomputes it from `X`.

pub mod quant;
pub mod reference;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::block::{apply_to_features, apply_to_weight_cols, apply_to_weight_rows, blocks_for, segment_outer_grad, BlockDiagonalFactor};
use crate::cnp::{cayley_exact, cnp_backward, cnp_forward, packed_grad_from_skew_grad, params_per_block, skew_from_packed, CnpCache, NeumannOrder, SkewParams};
use crate::dense::{gaussian_matrix, matmul, matmul_nt, svd_singular_values, BlockStack, Matrix, Rng};
use crate::error::{PoetError, Result};
use crate::permute::{permute_cols, permute_vector_batch, premerge_weight, sample_permutation, Direction, PermutationMap};
use crate::scalar::Scalar;

pub use quant::QuantizedMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Keeps the mm2 output for the backward pass.
    Fast,
    /// Recomputes the mm2 output during the backward pass.
    Mem,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Fast => "fast",
            Variant::Mem => "mem",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = PoetError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fast" => Ok(Variant::Fast),
            "mem" => Ok(Variant::Mem),
            other => Err(PoetError::Config(format!("unknown variant '{other}' (expected fast|mem)"))),
        }
    }
}

/// Which orthogonal factors are folded into the base weight at a merge.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MergeMode {
    /// The Cayley–Neumann factors used by the forward pass.
    Cnp,
    /// Exact Cayley factors of the current parameters (audit hook).
    ExactCayley,
}

#[derive(Clone, Copy, Debug)]
pub struct MergeOptions {
    pub mode: MergeMode,
    /// Compute singular values before and after (audit scale only).
    pub audit_spectrum: bool,
}

impl Default for MergeOptions {
    fn default() -> Self {
        MergeOptions {
            mode: MergeMode::Cnp,
            audit_spectrum: false,
        }
    }
}

/// What a merge did to the layer.
#[derive(Clone, Debug, Default)]
pub struct MergeAudit {
    pub orth_err_r: f64,
    pub orth_err_p: f64,
    /// Largest per-block spectral norm of the skew parameters at merge time.
    pub q_norm_r: f64,
    pub q_norm_p: f64,
    pub singular_before: Option<Vec<f64>>,
    pub singular_after: Option<Vec<f64>>,
    /// `max_i |s'_i - s_i| / s_i`.
    pub max_rel_drift: Option<f64>,
}

/// Frozen weight storage.
#[derive(Clone, Debug)]
pub enum BaseWeight<T> {
    Full { base: Matrix<T>, premerged: Matrix<T> },
    Int8 { base: QuantizedMatrix<T>, premerged: QuantizedMatrix<T> },
}

impl<T: Scalar> BaseWeight<T> {
    fn mm2(&self, a: &Matrix<T>) -> Result<Matrix<T>> {
        match self {
            BaseWeight::Full { premerged, .. } => matmul(a, premerged),
            BaseWeight::Int8 { premerged, .. } => premerged.left_mul(a),
        }
    }

    fn mm2_adjoint(&self, dv: &Matrix<T>) -> Result<Matrix<T>> {
        match self {
            BaseWeight::Full { premerged, .. } => matmul_nt(dv, premerged),
            BaseWeight::Int8 { premerged, .. } => premerged.right_mul_transposed(dv),
        }
    }

    /// Dense base weight (dequantized if needed).
    pub fn base_dense(&self) -> Matrix<T> {
        match self {
            BaseWeight::Full { base, .. } => base.clone(),
            BaseWeight::Int8 { base, .. } => base.dequantize(),
        }
    }

    pub fn premerged_dense(&self) -> Matrix<T> {
        match self {
            BaseWeight::Full { premerged, .. } => premerged.clone(),
            BaseWeight::Int8 { premerged, .. } => premerged.dequantize(),
        }
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self, BaseWeight::Int8 { .. })
    }

    /// Bytes held for the frozen base (excluding the derived premerged copy).
    pub fn base_bytes(&self) -> usize {
        match self {
            BaseWeight::Full { base, .. } => base.data().len() * T::BYTES,
            BaseWeight::Int8 { base, .. } => base.bytes(),
        }
    }
}

static NEXT_LAYER_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Debug)]
pub struct PoetLinearLayer<T> {
    id: u64,
    generation: u64,
    m: usize,
    n: usize,
    b: usize,
    weight: BaseWeight<T>,
    q_r: SkewParams<T>,
    q_p: SkewParams<T>,
    perm_in: PermutationMap,
    perm_out: PermutationMap,
    variant: Variant,
    neumann_k: NeumannOrder,
}

/// Saved state for one backward pass. Consumed by [`PoetLinearLayer::backward`].
#[derive(Debug)]
pub struct LayerForwardCache<T> {
    layer_id: u64,
    generation: u64,
    x: Arc<Matrix<T>>,
    saved_b: Option<Matrix<T>>,
    g_r: BlockDiagonalFactor<T>,
    g_p: BlockDiagonalFactor<T>,
    cnp_r: CnpCache<T>,
    cnp_p: CnpCache<T>,
}

impl<T: Scalar> LayerForwardCache<T> {
    /// Bytes of activations held beyond the input.
    pub fn saved_activation_bytes(&self) -> usize {
        self.saved_b.as_ref().map_or(0, |b| b.data().len() * T::BYTES)
    }

    pub fn saved_b(&self) -> Option<&Matrix<T>> {
        self.saved_b.as_ref()
    }

    pub fn input(&self) -> &Arc<Matrix<T>> {
        &self.x
    }

    pub fn g_r(&self) -> &BlockStack<T> {
        self.g_r.blocks()
    }

    pub fn g_p(&self) -> &BlockStack<T> {
        self.g_p.blocks()
    }
}

/// Gradients produced by one backward pass.
#[derive(Clone, Debug)]
pub struct LayerGrads<T> {
    pub q_r: SkewParams<T>,
    pub q_p: SkewParams<T>,
    pub dx: Matrix<T>,
}

/// Builds a fresh layer: Gaussian base weight, identity factors, fresh permutations.
pub fn init_layer<T: Scalar>(
    m: usize,
    n: usize,
    b: usize,
    variant: Variant,
    neumann_k: NeumannOrder,
    weight_std: Option<f64>,
    rng: &mut Rng,
) -> Result<PoetLinearLayer<T>> {
    blocks_for(m, b)?;
    blocks_for(n, b)?;
    let std = weight_std.unwrap_or(1.0 / (m as f64).sqrt());
    if !(std > 0.0 && std.is_finite()) {
        return Err(PoetError::Config(format!("weight_std must be positive, got {std}")));
    }
    let base = gaussian_matrix(m, n, std, rng)?;
    let perm_in = sample_permutation(m, rng)?;
    let perm_out = sample_permutation(n, rng)?;
    PoetLinearLayer::from_parts(
        base,
        SkewParams::zeros(m / b, b),
        SkewParams::zeros(n / b, b),
        perm_in,
        perm_out,
        b,
        variant,
        neumann_k,
    )
}

impl<T: Scalar> PoetLinearLayer<T> {
    /// Assembles a layer from explicit state, recomputing the premerged weight.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        base: Matrix<T>,
        q_r: SkewParams<T>,
        q_p: SkewParams<T>,
        perm_in: PermutationMap,
        perm_out: PermutationMap,
        b: usize,
        variant: Variant,
        neumann_k: NeumannOrder,
    ) -> Result<Self> {
        let (m, n) = base.shape();
        Self::validate_geometry(m, n, b, &q_r, &q_p, &perm_in, &perm_out)?;
        if !base.is_finite() {
            return Err(PoetError::NonFinite("base weight".into()));
        }
        let premerged = premerge_weight(&base, &perm_in, &perm_out)?;
        Ok(Self::assemble(BaseWeight::Full { base, premerged }, m, n, b, q_r, q_p, perm_in, perm_out, variant, neumann_k))
    }

    /// Like [`from_parts`](Self::from_parts) with an int8 base.
    #[allow(clippy::too_many_arguments)]
    pub fn from_quantized_parts(
        base: QuantizedMatrix<T>,
        q_r: SkewParams<T>,
        q_p: SkewParams<T>,
        perm_in: PermutationMap,
        perm_out: PermutationMap,
        b: usize,
        variant: Variant,
        neumann_k: NeumannOrder,
    ) -> Result<Self> {
        let (m, n) = base.shape();
        Self::validate_geometry(m, n, b, &q_r, &q_p, &perm_in, &perm_out)?;
        if variant != Variant::Mem {
            return Err(PoetError::Config("an int8 base weight requires variant=mem".into()));
        }
        let premerged = base.premerged(&perm_in, &perm_out)?;
        Ok(Self::assemble(BaseWeight::Int8 { base, premerged }, m, n, b, q_r, q_p, perm_in, perm_out, variant, neumann_k))
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        weight: BaseWeight<T>,
        m: usize,
        n: usize,
        b: usize,
        q_r: SkewParams<T>,
        q_p: SkewParams<T>,
        perm_in: PermutationMap,
        perm_out: PermutationMap,
        variant: Variant,
        neumann_k: NeumannOrder,
    ) -> Self {
        if b == 1 {
            log::warn!("block size 1 gives 1x1 skew blocks: the {m}x{n} layer has no trainable parameters");
        }
        PoetLinearLayer {
            id: NEXT_LAYER_ID.fetch_add(1, Ordering::Relaxed),
            generation: 0,
            m,
            n,
            b,
            weight,
            q_r,
            q_p,
            perm_in,
            perm_out,
            variant,
            neumann_k,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn validate_geometry(
        m: usize,
        n: usize,
        b: usize,
        q_r: &SkewParams<T>,
        q_p: &SkewParams<T>,
        perm_in: &PermutationMap,
        perm_out: &PermutationMap,
    ) -> Result<()> {
        let rb = blocks_for(m, b)?;
        let pb = blocks_for(n, b)?;
        if q_r.num_blocks() != rb || q_r.block_dim() != b || q_p.num_blocks() != pb || q_p.block_dim() != b {
            return Err(PoetError::shape("PoetLinearLayer", "skew parameter geometry does not match dims"));
        }
        if perm_in.len() != m || perm_out.len() != n {
            return Err(PoetError::shape("PoetLinearLayer", "permutation sizes do not match dims"));
        }
        Ok(())
    }

    pub fn in_dim(&self) -> usize {
        self.m
    }

    pub fn out_dim(&self) -> usize {
        self.n
    }

    pub fn block_size(&self) -> usize {
        self.b
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    /// Switches between saving and recomputing the mm2 output.
    pub fn set_variant(&mut self, variant: Variant) -> Result<()> {
        if variant == Variant::Fast && self.weight.is_quantized() {
            return Err(PoetError::Config("an int8 base weight requires variant=mem".into()));
        }
        self.variant = variant;
        Ok(())
    }

    pub fn neumann_order(&self) -> NeumannOrder {
        self.neumann_k
    }

    pub fn weight(&self) -> &BaseWeight<T> {
        &self.weight
    }

    pub fn q_r(&self) -> &SkewParams<T> {
        &self.q_r
    }

    pub fn q_p(&self) -> &SkewParams<T> {
        &self.q_p
    }

    pub fn q_r_mut(&mut self) -> &mut SkewParams<T> {
        &mut self.q_r
    }

    pub fn q_p_mut(&mut self) -> &mut SkewParams<T> {
        &mut self.q_p
    }

    pub fn skew_params_mut(&mut self) -> (&mut SkewParams<T>, &mut SkewParams<T>) {
        (&mut self.q_r, &mut self.q_p)
    }

    pub fn perm_in(&self) -> &PermutationMap {
        &self.perm_in
    }

    pub fn perm_out(&self) -> &PermutationMap {
        &self.perm_out
    }

    /// Incremented on every merge; stale forward caches are rejected.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn trainable_param_count(&self) -> usize {
        (self.m / self.b + self.n / self.b) * params_per_block(self.b)
    }

    /// Current (approximately) orthogonal blocks for both sides.
    pub fn factors(&self) -> Result<(BlockStack<T>, BlockStack<T>)> {
        let (g_r, _) = cnp_forward(&skew_from_packed(&self.q_r), self.neumann_k)?;
        let (g_p, _) = cnp_forward(&skew_from_packed(&self.q_p), self.neumann_k)?;
        Ok((g_r, g_p))
    }

    /// `||G^T G - I||_F` for the current R-side and P-side blocks.
    pub fn orthogonality_errors(&self) -> Result<(f64, f64)> {
        let (g_r, g_p) = self.factors()?;
        Ok((g_r.orthogonality_error(), g_p.orthogonality_error()))
    }

    pub fn forward(&self, x: &Arc<Matrix<T>>) -> Result<(Matrix<T>, LayerForwardCache<T>)> {
        if x.cols() != self.m {
            return Err(PoetError::shape("PoetLinearLayer::forward", format!("input has {} features, layer expects {}", x.cols(), self.m)));
        }
        let (g_r, cnp_r) = cnp_forward(&skew_from_packed(&self.q_r), self.neumann_k)?;
        let (g_p, cnp_p) = cnp_forward(&skew_from_packed(&self.q_p), self.neumann_k)?;
        let g_r = BlockDiagonalFactor::new(g_r);
        let g_p = BlockDiagonalFactor::new(g_p);

        let v = self.mm2_output(x, &g_r)?;
        let w = apply_to_features(&g_p, &v, true)?;
        let z = permute_vector_batch(&w, &self.perm_out, Direction::Forward)?;
        let saved_b = match self.variant {
            Variant::Fast => Some(v),
            Variant::Mem => None,
        };
        Ok((
            z,
            LayerForwardCache {
                layer_id: self.id,
                generation: self.generation,
                x: Arc::clone(x),
                saved_b,
                g_r,
                g_p,
                cnp_r,
                cnp_p,
            },
        ))
    }

    /// mm1 and mm2 from the raw input.
    fn mm2_output(&self, x: &Matrix<T>, g_r: &BlockDiagonalFactor<T>) -> Result<Matrix<T>> {
        let u = permute_vector_batch(x, &self.perm_in, Direction::Inverse)?;
        let a = apply_to_features(g_r, &u, true)?;
        self.weight.mm2(&a)
    }

    /// The mm2 output as the mem variant rebuilds it during backward.
    pub fn recompute_mm2(&self, cache: &LayerForwardCache<T>) -> Result<Matrix<T>> {
        self.mm2_output(&cache.x, &cache.g_r)
    }

    pub fn backward(&self, cache: LayerForwardCache<T>, dz: &Matrix<T>) -> Result<LayerGrads<T>> {
        if cache.layer_id != self.id || cache.generation != self.generation {
            return Err(PoetError::CacheMismatch(format!(
                "cache from layer {} generation {}, layer is {} generation {}",
                cache.layer_id, cache.generation, self.id, self.generation
            )));
        }
        if dz.shape() != (cache.x.rows(), self.n) {
            return Err(PoetError::shape("PoetLinearLayer::backward", format!("dZ {:?} vs expected {:?}", dz.shape(), (cache.x.rows(), self.n))));
        }
        let LayerForwardCache { x, saved_b, g_r, g_p, cnp_r, cnp_p, .. } = cache;

        // mm3: w = v G_P
        let dw = permute_vector_batch(dz, &self.perm_out, Direction::Inverse)?;
        let v = match saved_b {
            Some(v) => v,
            None => self.mm2_output(&x, &g_r)?,
        };
        let dg_p = segment_outer_grad(&v, &dw, self.b)?;
        drop(v);
        let dv = apply_to_features(&g_p, &dw, false)?;
        // mm2: v = a M, M frozen
        let da = self.weight.mm2_adjoint(&dv)?;
        // mm1: a = u G_R, u is a gather of the input
        let u = permute_vector_batch(&x, &self.perm_in, Direction::Inverse)?;
        let dg_r = segment_outer_grad(&u, &da, self.b)?;
        let du = apply_to_features(&g_r, &da, false)?;
        let dx = permute_vector_batch(&du, &self.perm_in, Direction::Forward)?;

        let q_r = packed_grad_from_skew_grad(&cnp_backward(&cnp_r, &dg_r)?);
        let q_p = packed_grad_from_skew_grad(&cnp_backward(&cnp_p, &dg_p)?);
        Ok(LayerGrads { q_r, q_p, dx })
    }

    fn merge_factors(&self, mode: MergeMode) -> Result<(BlockDiagonalFactor<T>, BlockDiagonalFactor<T>)> {
        let q_r = skew_from_packed(&self.q_r);
        let q_p = skew_from_packed(&self.q_p);
        let (g_r, g_p) = match mode {
            MergeMode::Cnp => (cnp_forward(&q_r, self.neumann_k)?.0, cnp_forward(&q_p, self.neumann_k)?.0),
            MergeMode::ExactCayley => (cayley_exact(&q_r)?, cayley_exact(&q_p)?),
        };
        Ok((BlockDiagonalFactor::new(g_r), BlockDiagonalFactor::new(g_p)))
    }

    /// `R W P` from the premerged weight with blockwise products and gathers.
    fn effective_weight(&self, g_r: &BlockDiagonalFactor<T>, g_p: &BlockDiagonalFactor<T>) -> Result<Matrix<T>> {
        let mid = self.weight.premerged_dense();
        let mid = apply_to_weight_rows(g_r, &mid, false)?;
        let mid = apply_to_weight_cols(g_p, &mid, false)?;
        // Psi_m^T (.) Psi_n
        let rows = crate::permute::permute_rows(&mid, &self.perm_in, Direction::Inverse)?;
        permute_cols(&rows, &self.perm_out, Direction::Forward)
    }

    /// Dense effective weight such that `forward(X) = X * materialize_weight()`.
    pub fn materialize_weight(&self) -> Result<Matrix<T>> {
        let (g_r, g_p) = self.merge_factors(MergeMode::Cnp)?;
        self.effective_weight(&g_r, &g_p)
    }

    /// Folds the current factors into the base weight, resets the factors to
    /// identity and draws fresh permutations.
    pub fn merge_and_reinit(&mut self, rng: &mut Rng, opts: MergeOptions) -> Result<MergeAudit> {
        let (g_r, g_p) = self.merge_factors(opts.mode)?;
        let mut audit = MergeAudit {
            orth_err_r: g_r.blocks().orthogonality_error(),
            orth_err_p: g_p.blocks().orthogonality_error(),
            ..Default::default()
        };
        let new_base = self.effective_weight(&g_r, &g_p)?;
        if !new_base.is_finite() {
            return Err(PoetError::NonFinite("merged base weight".into()));
        }
        if opts.audit_spectrum {
            audit.q_norm_r = max_block_spectral_norm(&skew_from_packed(&self.q_r))?;
            audit.q_norm_p = max_block_spectral_norm(&skew_from_packed(&self.q_p))?;
            let before = svd_singular_values(&self.weight.base_dense())?;
            let after = svd_singular_values(&new_base)?;
            audit.max_rel_drift = Some(relative_drift(&before, &after));
            audit.singular_before = Some(before);
            audit.singular_after = Some(after);
        }

        self.q_r.reset();
        self.q_p.reset();
        self.perm_in = sample_permutation(self.m, rng)?;
        self.perm_out = sample_permutation(self.n, rng)?;
        self.weight = match &self.weight {
            BaseWeight::Full { .. } => {
                let premerged = premerge_weight(&new_base, &self.perm_in, &self.perm_out)?;
                BaseWeight::Full { base: new_base, premerged }
            }
            BaseWeight::Int8 { .. } => {
                let base = QuantizedMatrix::quantize(&new_base);
                let premerged = base.premerged(&self.perm_in, &self.perm_out)?;
                BaseWeight::Int8 { base, premerged }
            }
        };
        self.generation += 1;
        Ok(audit)
    }

    /// Replaces the base weight by per-row int8 codes. Only the recompute
    /// variant can run without a full-precision weight.
    pub fn quantize_base(&mut self) -> Result<()> {
        if self.variant != Variant::Mem {
            return Err(PoetError::Config(
                "quantized base weights require variant=mem: the fast variant saves an activation that needs the full-precision weight".into(),
            ));
        }
        if let BaseWeight::Full { base, .. } = &self.weight {
            let q = QuantizedMatrix::quantize(base);
            let premerged = q.premerged(&self.perm_in, &self.perm_out)?;
            self.weight = BaseWeight::Int8 { base: q, premerged };
        }
        Ok(())
    }
}

/// Largest spectral norm over the blocks of a stack.
pub fn max_block_spectral_norm<T: Scalar>(stack: &BlockStack<T>) -> Result<f64> {
    let mut best = 0.0f64;
    for k in 0..stack.num_blocks() {
        let s = svd_singular_values(&stack.block_matrix(k))?;
        best = best.max(s.first().copied().unwrap_or(0.0));
    }
    Ok(best)
}

/// `max_i |after_i - before_i| / before_i` over nonzero singular values.
pub fn relative_drift(before: &[f64], after: &[f64]) -> f64 {
    let top = before.first().copied().unwrap_or(0.0);
    before
        .iter()
        .zip(after)
        .filter(|(b, _)| **b > top * 1e-12)
        .map(|(b, a)| (a - b).abs() / b)
        .fold(0.0, f64::max)
}

/// Pairwise inverse-distance energy of the normalized neuron vectors
/// (the columns of `w`, one per output unit).
pub fn hyperspherical_energy<T: Scalar>(w: &Matrix<T>) -> f64 {
    let (m, n) = w.shape();
    let cols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let c: Vec<f64> = (0..m).map(|i| w.get(i, j).as_f64()).collect();
            let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            c.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    let mut e = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let d = cols[i].iter().zip(&cols[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            e += 1.0 / d.max(1e-300);
        }
    }
    e
}
