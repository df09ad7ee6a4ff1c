//! Singular-value audit of repeated merges on a single layer.

use std::sync::Arc;

use crate::cnp::skew_from_packed;
use crate::dense::{gaussian_matrix, matmul, svd_singular_values, Rng};
use crate::error::{PoetError, Result};
use crate::layer::{init_layer, max_block_spectral_norm, relative_drift, MergeMode, MergeOptions, PoetLinearLayer};
use crate::optim::{adamw_step, AdamWState};
use crate::tape::{backward_graph, forward_graph, ActivationLedger, Batch, LossKind, Model, Stage};

use super::config::{AuditMode, TrainConfig};
use super::models::random_rotation;

#[derive(Clone, Debug, PartialEq)]
pub struct AuditRow {
    pub mode: MergeMode,
    pub merge: usize,
    pub q_norm_r: f64,
    pub q_norm_p: f64,
    /// The skew parameters were scaled down to `audit_q_max` before merging.
    pub projected: bool,
    pub orth_err_r: f64,
    pub orth_err_p: f64,
    /// Drift against the singular values before this merge.
    pub step_drift: f64,
    /// Drift against the original singular values.
    pub cum_drift: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditReport {
    pub original: Vec<f64>,
    pub rows: Vec<AuditRow>,
}

impl AuditReport {
    pub fn max_cum_drift(&self, mode: MergeMode) -> f64 {
        self.rows.iter().filter(|r| r.mode == mode).map(|r| r.cum_drift).fold(0.0, f64::max)
    }

    pub fn max_step_drift(&self, mode: MergeMode) -> f64 {
        self.rows.iter().filter(|r| r.mode == mode).map(|r| r.step_drift).fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("mode,merge,q_norm_r,q_norm_p,projected,orth_err_r,orth_err_p,step_drift,cum_drift\n");
        for r in &self.rows {
            let mode = match r.mode {
                MergeMode::Cnp => "cnp",
                MergeMode::ExactCayley => "exact",
            };
            s.push_str(&format!(
                "{mode},{},{:e},{:e},{},{:e},{:e},{:e},{:e}\n",
                r.merge, r.q_norm_r, r.q_norm_p, r.projected, r.orth_err_r, r.orth_err_p, r.step_drift, r.cum_drift
            ));
        }
        s
    }
}

fn cap_norm(layer: &mut PoetLinearLayer<f64>, q_max: f64) -> Result<(f64, f64, bool)> {
    let nr = max_block_spectral_norm(&skew_from_packed(layer.q_r()))?;
    let np = max_block_spectral_norm(&skew_from_packed(layer.q_p()))?;
    let mut projected = false;
    let (r, p) = layer.skew_params_mut();
    for (q, norm) in [(r, nr), (p, np)] {
        if norm > q_max {
            let s = q_max / norm;
            q.packed_mut().iter_mut().for_each(|v| *v *= s);
            projected = true;
        }
    }
    Ok((nr.min(q_max), np.min(q_max), projected))
}

/// Trains one `audit_dim x audit_dim` layer toward a rotated copy of itself,
/// merging every `audit_steps_per_merge` steps, once per configured merge mode.
pub fn run_spectrum_audit(cfg: &TrainConfig) -> Result<AuditReport> {
    cfg.validate()?;
    let modes = match cfg.audit_mode {
        AuditMode::Cnp => vec![MergeMode::Cnp],
        AuditMode::Exact => vec![MergeMode::ExactCayley],
        AuditMode::Both => vec![MergeMode::Cnp, MergeMode::ExactCayley],
    };
    let d = cfg.audit_dim;
    let mut original = Vec::new();
    let mut rows = Vec::new();
    for mode in modes {
        let mut rng = Rng::new(cfg.seed);
        let layer: PoetLinearLayer<f64> = init_layer(d, d, cfg.block_size, cfg.variant, cfg.neumann_order()?, cfg.weight_std, &mut rng)?;
        let w0 = layer.weight().base_dense();
        original = svd_singular_values(&w0)?;
        let teacher = matmul(&random_rotation(d, cfg.teacher_rotation, &mut rng)?, &w0)?;
        let mut model = Model { stages: vec![Stage::Poet(layer)], loss: LossKind::Mse };
        let mut opt = [AdamWState::<f64>::new(model.param_group_sizes()[0].1), AdamWState::new(model.param_group_sizes()[1].1)];
        let mut ledger = ActivationLedger::new();
        let mut prev = original.clone();
        let lr = cfg.schedule.poet_lr_scale * cfg.schedule.base_lr;
        for merge in 1..=cfg.audit_merges {
            for _ in 0..cfg.audit_steps_per_merge {
                let x = gaussian_matrix(cfg.batch_size, d, 1.0, &mut rng)?;
                let y = matmul(&x, &teacher)?;
                let batch = Batch::Regression { x: Arc::new(x), y };
                let (_, mut tape) = forward_graph(&model, &batch, &mut ledger)?;
                let grads = backward_graph(&model, &mut tape, &mut ledger)?;
                for ((g, grad), st) in model.param_groups_mut().into_iter().zip(grads.groups()).zip(opt.iter_mut()) {
                    adamw_step(g.values, grad, st, lr, &cfg.adam)?;
                }
            }
            let Stage::Poet(layer) = &mut model.stages[0] else { unreachable!() };
            let (q_norm_r, q_norm_p, projected) = cap_norm(layer, cfg.audit_q_max)?;
            let audit = layer.merge_and_reinit(&mut rng, MergeOptions { mode, audit_spectrum: true })?;
            let after = audit.singular_after.ok_or_else(|| PoetError::Config("merge audit returned no spectrum".into()))?;
            rows.push(AuditRow {
                mode,
                merge,
                q_norm_r,
                q_norm_p,
                projected,
                orth_err_r: audit.orth_err_r,
                orth_err_p: audit.orth_err_p,
                step_drift: relative_drift(&prev, &after),
                cum_drift: relative_drift(&original, &after),
            });
            prev = after;
            opt.iter_mut().for_each(AdamWState::reset);
        }
    }
    let report = AuditReport { original, rows };
    std::fs::create_dir_all(&cfg.out).map_err(|e| PoetError::io(cfg.out.display().to_string(), e))?;
    let path = cfg.out.join("spectrum_audit.csv");
    std::fs::write(&path, report.to_csv()).map_err(|e| PoetError::io(path.display().to_string(), e))?;
    Ok(report)
}
