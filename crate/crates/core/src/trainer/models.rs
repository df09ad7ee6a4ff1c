//! The two model families and the regression teacher.

use crate::cnp::cayley_exact;
use crate::dense::{gaussian_matrix, matmul, BlockStack, Matrix, Rng};
use crate::error::Result;
use crate::layer::{init_layer, PoetLinearLayer};
use crate::scalar::Scalar;
use crate::tape::{Embedding, LossKind, Model, Stage};

use super::config::{OptimizerKind, Task, TrainConfig};
use super::data::VOCAB;

fn hidden_stage<T: Scalar>(cfg: &TrainConfig, m: usize, n: usize, rng: &mut Rng) -> Result<Stage<T>> {
    Ok(match cfg.optimizer {
        OptimizerKind::Poet => {
            let mut layer: PoetLinearLayer<T> = init_layer(m, n, cfg.block_size, cfg.variant, cfg.neumann_order()?, cfg.weight_std, rng)?;
            if cfg.quantized {
                layer.quantize_base()?;
            }
            Stage::Poet(layer)
        }
        OptimizerKind::DenseAdamw => {
            let std = cfg.weight_std.unwrap_or(1.0 / (m as f64).sqrt());
            Stage::Dense(gaussian_matrix(m, n, std, rng)?)
        }
    })
}

/// Builds the model for `cfg.task` from `rng`.
pub fn build_model<T: Scalar>(cfg: &TrainConfig, rng: &mut Rng) -> Result<Model<T>> {
    let tanh = cfg.activation_is_tanh();
    let mut stages = Vec::new();
    let loss = match cfg.task {
        Task::CharLm => {
            let table = gaussian_matrix(VOCAB, cfg.embed_dim, 1.0, rng)?;
            stages.push(Stage::Embedding(Embedding { table, context: cfg.context }));
            for (m, n) in cfg.hidden_layer_dims() {
                stages.push(hidden_stage(cfg, m, n, rng)?);
                if tanh {
                    stages.push(Stage::Tanh);
                }
            }
            let h = cfg.hidden_dim;
            stages.push(Stage::Dense(gaussian_matrix(h, VOCAB, 1.0 / (h as f64).sqrt(), rng)?));
            LossKind::SoftmaxCrossEntropy
        }
        _ => {
            let dims = cfg.hidden_layer_dims();
            let last = dims.len() - 1;
            for (i, (m, n)) in dims.into_iter().enumerate() {
                stages.push(hidden_stage(cfg, m, n, rng)?);
                if tanh && i < last {
                    stages.push(Stage::Tanh);
                }
            }
            LossKind::Mse
        }
    };
    Ok(Model { stages, loss })
}

/// Product of the effective weights of all linear stages (nonlinearities ignored).
pub fn linear_product<T: Scalar>(model: &Model<T>) -> Result<Matrix<T>> {
    let mut acc: Option<Matrix<T>> = None;
    for s in &model.stages {
        let w = match s {
            Stage::Poet(l) => l.materialize_weight()?,
            Stage::Dense(w) => w.clone(),
            _ => continue,
        };
        acc = Some(match acc {
            None => w,
            Some(a) => matmul(&a, &w)?,
        });
    }
    Ok(acc.expect("model has a linear stage"))
}

/// A rotation `(I + Q)(I - Q)^-1` of a dense random skew matrix whose
/// eigenvalues are of order `scale`.
pub fn random_rotation<T: Scalar>(dim: usize, scale: f64, rng: &mut Rng) -> Result<Matrix<T>> {
    let a: Matrix<f64> = gaussian_matrix(dim, dim, scale / (2.0 * dim as f64).sqrt(), rng)?;
    let q = a.sub(&a.transpose())?;
    let g = cayley_exact(&BlockStack::from_vec(1, dim, q.into_vec())?)?;
    Ok(g.block_matrix(0).cast())
}

/// Teacher `U S0 V`: the student's initial linear map rotated on both sides,
/// so the target shares its singular values.
pub fn regression_teacher<T: Scalar>(student: &Model<T>, cfg: &TrainConfig, rng: &mut Rng) -> Result<Matrix<T>> {
    let s0 = linear_product(student)?;
    let u = random_rotation(s0.rows(), cfg.teacher_rotation, rng)?;
    let v = random_rotation(s0.cols(), cfg.teacher_rotation, rng)?;
    matmul(&matmul(&u, &s0)?, &v)
}
