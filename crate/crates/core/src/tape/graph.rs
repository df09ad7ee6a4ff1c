//! A chain tape over the two model families the trainer builds.

use std::collections::HashSet;
use std::sync::Arc;

use crate::cnp::SkewParams;
use crate::dense::{matmul, matmul_nt, matmul_tn, Matrix};
use crate::error::{PoetError, Result};
use crate::layer::{LayerForwardCache, PoetLinearLayer};
use crate::scalar::{c, Scalar};

use super::counters::{measure, OpCounters};
use super::ledger::{ActivationLedger, LayerSaved};

/// A token embedding whose `context` lookups are concatenated per example.
#[derive(Clone, Debug)]
pub struct Embedding<T> {
    pub table: Matrix<T>,
    pub context: usize,
}

#[derive(Clone, Debug)]
pub enum Stage<T> {
    Embedding(Embedding<T>),
    Poet(PoetLinearLayer<T>),
    /// Bias-free dense layer, `Z = X W`.
    Dense(Matrix<T>),
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// Mean over all entries of `(z - y)^2`.
    Mse,
    /// Mean over examples of `-log softmax(z)[target]`.
    SoftmaxCrossEntropy,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub stages: Vec<Stage<T>>,
    pub loss: LossKind,
}

#[derive(Clone, Debug)]
pub enum Batch<T> {
    Regression { x: Arc<Matrix<T>>, y: Matrix<T> },
    /// `ids` holds `context` tokens per example, row-major.
    Tokens { ids: Vec<u32>, targets: Vec<u32> },
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        match self {
            Batch::Regression { y, .. } => y.rows(),
            Batch::Tokens { targets, .. } => targets.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    EmbeddingLookup,
    PoetLinear,
    DenseLinear,
    Nonlinearity,
    SoftmaxCrossEntropy,
    SquaredError,
}

#[derive(Debug)]
enum Saved<T> {
    Embedding { ids: Vec<u32> },
    Poet(LayerForwardCache<T>),
    Dense { x: Arc<Matrix<T>> },
    Tanh { y: Arc<Matrix<T>> },
    Softmax { probs: Matrix<T>, targets: Vec<u32> },
    Mse { diff: Matrix<T> },
}

#[derive(Debug)]
pub struct TapeNode<T> {
    pub kind: OpKind,
    /// Index of the owning stage; `None` for the loss node.
    pub stage: Option<usize>,
    saved: Saved<T>,
}

impl<T: Scalar> TapeNode<T> {
    /// Tensors this node retains, as (pointer identity, bytes). Shared inputs
    /// report the same identity so they are counted once.
    fn retained(&self) -> Vec<(usize, usize)> {
        let arc = |a: &Arc<Matrix<T>>| (Arc::as_ptr(a) as usize, a.data().len() * T::BYTES);
        let own = |m: &Matrix<T>| (m.data().as_ptr() as usize, m.data().len() * T::BYTES);
        match &self.saved {
            Saved::Embedding { .. } => vec![],
            Saved::Poet(cache) => {
                let mut v = vec![arc(cache.input())];
                if let Some(b) = cache.saved_b() {
                    v.push(own(b));
                }
                v
            }
            Saved::Dense { x } => vec![arc(x)],
            Saved::Tanh { y } => vec![arc(y)],
            Saved::Softmax { probs, .. } => vec![own(probs)],
            Saved::Mse { diff } => vec![own(diff)],
        }
    }
}

/// The record of one forward pass. Single use.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<TapeNode<T>>,
    batch_input: Option<usize>,
    saved_bytes: usize,
    consumed: bool,
}

impl<T: Scalar> Tape<T> {
    pub fn nodes(&self) -> &[TapeNode<T>] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Distinct activation tensors retained for backward (the batch itself excluded).
    pub fn saved_tensor_count(&self) -> usize {
        self.distinct_saved().len()
    }

    pub fn saved_bytes(&self) -> usize {
        self.saved_bytes
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn distinct_saved(&self) -> Vec<(usize, usize)> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for node in &self.nodes {
            for (id, bytes) in node.retained() {
                if Some(id) != self.batch_input && seen.insert(id) {
                    out.push((id, bytes));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StageGrad<T> {
    None,
    Poet { q_r: SkewParams<T>, q_p: SkewParams<T> },
    Dense(Matrix<T>),
    Embedding(Matrix<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub stages: Vec<StageGrad<T>>,
    /// Gradient with respect to the regression input, if any.
    pub input: Option<Matrix<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Flat views in the order of [`Model::param_groups_mut`].
    pub fn groups(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        for g in &self.stages {
            match g {
                StageGrad::None => {}
                StageGrad::Poet { q_r, q_p } => {
                    out.push(q_r.packed());
                    out.push(q_p.packed());
                }
                StageGrad::Dense(m) | StageGrad::Embedding(m) => out.push(m.data()),
            }
        }
        out
    }

    pub fn groups_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        for g in &mut self.stages {
            match g {
                StageGrad::None => {}
                StageGrad::Poet { q_r, q_p } => {
                    out.push(q_r.packed_mut());
                    out.push(q_p.packed_mut());
                }
                StageGrad::Dense(m) | StageGrad::Embedding(m) => out.push(m.data_mut()),
            }
        }
        out
    }

    pub fn global_norm(&self) -> f64 {
        self.groups().iter().flat_map(|g| g.iter()).map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Packed skew parameters of an orthogonal factor.
    Orthogonal,
    /// Ordinary weights (dense layers, embeddings).
    Plain,
}

pub struct ParamGroup<'a, T> {
    pub kind: ParamKind,
    pub values: &'a mut [T],
}

impl<T: Scalar> Model<T> {
    pub fn param_groups_mut(&mut self) -> Vec<ParamGroup<'_, T>> {
        let mut out = Vec::new();
        for s in &mut self.stages {
            match s {
                Stage::Poet(l) => {
                    let (r, p) = l.skew_params_mut();
                    out.push(ParamGroup { kind: ParamKind::Orthogonal, values: r.packed_mut() });
                    out.push(ParamGroup { kind: ParamKind::Orthogonal, values: p.packed_mut() });
                }
                Stage::Dense(w) => out.push(ParamGroup { kind: ParamKind::Plain, values: w.data_mut() }),
                Stage::Embedding(e) => out.push(ParamGroup { kind: ParamKind::Plain, values: e.table.data_mut() }),
                Stage::Tanh => {}
            }
        }
        out
    }

    /// Sizes of the parameter groups, same order as [`param_groups_mut`](Self::param_groups_mut).
    pub fn param_group_sizes(&self) -> Vec<(ParamKind, usize)> {
        let mut out = Vec::new();
        for s in &self.stages {
            match s {
                Stage::Poet(l) => {
                    out.push((ParamKind::Orthogonal, l.q_r().len()));
                    out.push((ParamKind::Orthogonal, l.q_p().len()));
                }
                Stage::Dense(w) => out.push((ParamKind::Plain, w.data().len())),
                Stage::Embedding(e) => out.push((ParamKind::Plain, e.table.data().len())),
                Stage::Tanh => {}
            }
        }
        out
    }

    pub fn trainable_param_count(&self) -> usize {
        self.param_group_sizes().iter().map(|(_, n)| n).sum()
    }

    /// Bytes of all stored weights, trainable and frozen.
    pub fn parameter_bytes(&self) -> usize {
        self.stages
            .iter()
            .map(|s| match s {
                Stage::Poet(l) => l.weight().base_bytes() + (l.q_r().len() + l.q_p().len()) * T::BYTES,
                Stage::Dense(w) => w.data().len() * T::BYTES,
                Stage::Embedding(e) => e.table.data().len() * T::BYTES,
                Stage::Tanh => 0,
            })
            .sum()
    }

    pub fn poet_layers(&self) -> impl Iterator<Item = &PoetLinearLayer<T>> {
        self.stages.iter().filter_map(|s| match s {
            Stage::Poet(l) => Some(l),
            _ => None,
        })
    }

    pub fn poet_layers_mut(&mut self) -> impl Iterator<Item = &mut PoetLinearLayer<T>> {
        self.stages.iter_mut().filter_map(|s| match s {
            Stage::Poet(l) => Some(l),
            _ => None,
        })
    }

    /// Output of the last stage (logits or predictions), without recording a tape.
    pub fn predict(&self, batch: &Batch<T>) -> Result<Matrix<T>> {
        let (_, tape, out) = self.run_forward(batch, false)?;
        drop(tape);
        Ok(out)
    }

    fn run_forward(&self, batch: &Batch<T>, with_loss: bool) -> Result<(f64, Tape<T>, Matrix<T>)> {
        let mut nodes = Vec::with_capacity(self.stages.len() + 1);
        let mut batch_input = None;
        let mut cur: Arc<Matrix<T>> = match batch {
            Batch::Regression { x, .. } => {
                batch_input = Some(Arc::as_ptr(x) as usize);
                Arc::clone(x)
            }
            Batch::Tokens { .. } => Arc::new(Matrix::zeros(0, 0)),
        };
        for (i, stage) in self.stages.iter().enumerate() {
            let (next, node) = match stage {
                Stage::Embedding(e) => {
                    let Batch::Tokens { ids, targets } = batch else {
                        return Err(PoetError::shape("forward_graph", "embedding stage needs a token batch"));
                    };
                    if i != 0 || ids.len() != targets.len() * e.context {
                        return Err(PoetError::shape("forward_graph", format!("{} ids for {} examples of context {}", ids.len(), targets.len(), e.context)));
                    }
                    let out = embed(e, ids)?;
                    (out, TapeNode { kind: OpKind::EmbeddingLookup, stage: Some(i), saved: Saved::Embedding { ids: ids.clone() } })
                }
                Stage::Poet(layer) => {
                    let (z, cache) = layer.forward(&cur)?;
                    (z, TapeNode { kind: OpKind::PoetLinear, stage: Some(i), saved: Saved::Poet(cache) })
                }
                Stage::Dense(w) => {
                    let z = matmul(&cur, w)?;
                    (z, TapeNode { kind: OpKind::DenseLinear, stage: Some(i), saved: Saved::Dense { x: Arc::clone(&cur) } })
                }
                Stage::Tanh => {
                    let y = Arc::new(cur.map(|v| v.tanh()));
                    cur = Arc::clone(&y);
                    nodes.push(TapeNode { kind: OpKind::Nonlinearity, stage: Some(i), saved: Saved::Tanh { y } });
                    continue;
                }
            };
            nodes.push(node);
            cur = Arc::new(next);
        }
        let out = Arc::try_unwrap(cur).unwrap_or_else(|a| (*a).clone());
        let mut loss = 0.0;
        if with_loss {
            let (l, node) = loss_node(self.loss, &out, batch)?;
            loss = l;
            nodes.push(node);
        }
        let mut tape = Tape { nodes, batch_input, saved_bytes: 0, consumed: false };
        tape.saved_bytes = tape.distinct_saved().iter().map(|(_, b)| b).sum();
        Ok((loss, tape, out))
    }
}

fn embed<T: Scalar>(e: &Embedding<T>, ids: &[u32]) -> Result<Matrix<T>> {
    let d = e.table.cols();
    let n = ids.len() / e.context;
    let mut out = Matrix::zeros(n, e.context * d);
    for r in 0..n {
        let row = out.row_mut(r);
        for k in 0..e.context {
            let id = ids[r * e.context + k] as usize;
            if id >= e.table.rows() {
                return Err(PoetError::shape("embedding", format!("token {id} outside vocabulary of {}", e.table.rows())));
            }
            row[k * d..(k + 1) * d].copy_from_slice(e.table.row(id));
        }
    }
    Ok(out)
}

fn loss_node<T: Scalar>(kind: LossKind, out: &Matrix<T>, batch: &Batch<T>) -> Result<(f64, TapeNode<T>)> {
    match (kind, batch) {
        (LossKind::Mse, Batch::Regression { y, .. }) => {
            let diff = out.sub(y)?;
            let loss = diff.data().iter().map(|d| d.as_f64().powi(2)).sum::<f64>() / diff.data().len() as f64;
            Ok((loss, TapeNode { kind: OpKind::SquaredError, stage: None, saved: Saved::Mse { diff } }))
        }
        (LossKind::SoftmaxCrossEntropy, Batch::Tokens { targets, .. }) => {
            let (loss, probs) = softmax_cross_entropy(out, targets)?;
            Ok((loss, TapeNode { kind: OpKind::SoftmaxCrossEntropy, stage: None, saved: Saved::Softmax { probs, targets: targets.clone() } }))
        }
        _ => Err(PoetError::shape("forward_graph", "loss kind does not match batch kind")),
    }
}

/// Mean cross-entropy (nats) and row-wise softmax probabilities.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Matrix<T>, targets: &[u32]) -> Result<(f64, Matrix<T>)> {
    if logits.rows() != targets.len() {
        return Err(PoetError::shape("softmax_cross_entropy", format!("{} rows vs {} targets", logits.rows(), targets.len())));
    }
    let mut probs = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let t = t as usize;
        if t >= logits.cols() {
            return Err(PoetError::shape("softmax_cross_entropy", format!("target {t} outside {} classes", logits.cols())));
        }
        let row = logits.row(r);
        let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let p = probs.row_mut(r);
        let mut z = T::zero();
        for (o, &v) in p.iter_mut().zip(row) {
            *o = (v - mx).exp();
            z += *o;
        }
        for o in p.iter_mut() {
            *o = *o / z;
        }
        total += (z.ln() - (row[t] - mx)).as_f64();
    }
    Ok((total / targets.len().max(1) as f64, probs))
}

/// Runs the model and records what the backward pass needs. The ledger's
/// saved-activation counter is raised by the bytes the tape retains.
pub fn forward_graph<T: Scalar>(model: &Model<T>, batch: &Batch<T>, ledger: &mut ActivationLedger) -> Result<(f64, Tape<T>)> {
    let (loss, tape, _) = model.run_forward(batch, true)?;
    if !loss.is_finite() {
        return Err(PoetError::NonFinite(format!("loss {loss}")));
    }
    let layers = tape
        .nodes
        .iter()
        .filter_map(|n| match &n.saved {
            Saved::Poet(cache) => Some(LayerSaved {
                stage: n.stage.unwrap_or(0),
                extra_bytes: cache.saved_activation_bytes(),
            }),
            _ => None,
        })
        .collect();
    ledger.record_forward(tape.saved_bytes, layers);
    Ok((loss, tape))
}

/// Reverse pass with unit seed on the loss.
pub fn backward_graph<T: Scalar>(model: &Model<T>, tape: &mut Tape<T>, ledger: &mut ActivationLedger) -> Result<Gradients<T>> {
    backward_graph_seeded(model, tape, ledger, 1.0)
}

/// Reverse pass with `seed = dL_outer / dL`.
pub fn backward_graph_seeded<T: Scalar>(model: &Model<T>, tape: &mut Tape<T>, ledger: &mut ActivationLedger, seed: f64) -> Result<Gradients<T>> {
    if tape.consumed {
        return Err(PoetError::TapeConsumed);
    }
    tape.consumed = true;
    let nodes = std::mem::take(&mut tape.nodes);
    let mut stages: Vec<StageGrad<T>> = vec![StageGrad::None; model.stages.len()];
    let mut grad: Option<Matrix<T>> = None;
    let mut peak = 0u64;
    let mut counts = OpCounters::default();
    let mut input = None;
    for node in nodes.into_iter().rev() {
        let stage = node.stage;
        let (res, c) = measure(|| backward_node(model, node, grad.take(), seed));
        peak = peak.max(c.allocated_bytes);
        counts.merge(&c);
        let (g_in, sg) = res?;
        if let (Some(i), Some(sg)) = (stage, sg) {
            stages[i] = sg;
        }
        grad = g_in;
    }
    if let Some(g) = grad {
        if g.rows() > 0 {
            input = Some(g);
        }
    }
    ledger.record_backward(tape.saved_bytes, peak as usize, counts);
    Ok(Gradients { stages, input })
}

type NodeOut<T> = (Option<Matrix<T>>, Option<StageGrad<T>>);

fn backward_node<T: Scalar>(model: &Model<T>, node: TapeNode<T>, upstream: Option<Matrix<T>>, seed: f64) -> Result<NodeOut<T>> {
    let stage = node.stage.map(|i| &model.stages[i]);
    match node.saved {
        Saved::Mse { diff } => {
            let s: T = c(2.0 * seed / diff.data().len() as f64);
            Ok((Some(diff.scale(s)), None))
        }
        Saved::Softmax { mut probs, targets } => {
            let s: T = c(seed / targets.len().max(1) as f64);
            for (r, &t) in targets.iter().enumerate() {
                let row = probs.row_mut(r);
                row[t as usize] -= T::one();
                for v in row.iter_mut() {
                    *v *= s;
                }
            }
            Ok((Some(probs), None))
        }
        Saved::Tanh { y } => {
            let dy = upstream.ok_or_else(|| PoetError::shape("backward", "missing upstream gradient"))?;
            let mut dx = dy;
            for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
                *d *= T::one() - v * v;
            }
            Ok((Some(dx), None))
        }
        Saved::Dense { x } => {
            let Some(Stage::Dense(w)) = stage else { unreachable!("dense node without dense stage") };
            let dz = upstream.ok_or_else(|| PoetError::shape("backward", "missing upstream gradient"))?;
            let dw = matmul_tn(&x, &dz)?;
            let dx = matmul_nt(&dz, w)?;
            Ok((Some(dx), Some(StageGrad::Dense(dw))))
        }
        Saved::Poet(cache) => {
            let Some(Stage::Poet(layer)) = stage else { unreachable!("poet node without poet stage") };
            let dz = upstream.ok_or_else(|| PoetError::shape("backward", "missing upstream gradient"))?;
            let g = layer.backward(cache, &dz)?;
            Ok((Some(g.dx), Some(StageGrad::Poet { q_r: g.q_r, q_p: g.q_p })))
        }
        Saved::Embedding { ids } => {
            let Some(Stage::Embedding(e)) = stage else { unreachable!("embedding node without embedding stage") };
            let dz = upstream.ok_or_else(|| PoetError::shape("backward", "missing upstream gradient"))?;
            let d = e.table.cols();
            let mut dt = Matrix::zeros(e.table.rows(), d);
            for r in 0..dz.rows() {
                let src = dz.row(r);
                for k in 0..e.context {
                    let id = ids[r * e.context + k] as usize;
                    for (o, &g) in dt.row_mut(id).iter_mut().zip(&src[k * d..(k + 1) * d]) {
                        *o += g;
                    }
                }
            }
            Ok((None, Some(StageGrad::Embedding(dt))))
        }
    }
}
