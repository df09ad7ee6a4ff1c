//! Op-count, allocation and timing comparison of the layer implementations.

use std::sync::Arc;
use std::time::Instant;

use crate::dense::{gaussian_matrix, Rng};
use crate::error::{PoetError, Result};
use crate::layer::{init_layer, reference, PoetLinearLayer, Variant};
use crate::scalar::Scalar;
use crate::tape::counters::{measure, OpCounters};
use crate::tape::{backward_graph, forward_graph, ActivationLedger, Batch, LossKind, Model, Stage};

use super::config::{Precision, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProfilePath {
    /// Dense `R W P` assembled from explicit factor matrices.
    WeightCentric,
    Fast,
    Mem,
    /// Plain dense layer.
    Dense,
}

impl ProfilePath {
    pub const ALL: [ProfilePath; 4] = [ProfilePath::WeightCentric, ProfilePath::Fast, ProfilePath::Mem, ProfilePath::Dense];

    pub fn name(self) -> &'static str {
        match self {
            ProfilePath::WeightCentric => "weight_centric",
            ProfilePath::Fast => "poet_fast",
            ProfilePath::Mem => "poet_mem",
            ProfilePath::Dense => "dense",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileRow {
    pub path: ProfilePath,
    /// Counters for one forward + backward.
    pub counters: OpCounters,
    /// Allocations with the weight's `m x n` shape.
    pub weight_shaped_allocs: u64,
    /// Saved activations beyond the batch (tape paths only).
    pub saved_act_bytes: Option<usize>,
    pub median_us: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileReport {
    pub m: usize,
    pub n: usize,
    pub batch: usize,
    pub rows: Vec<ProfileRow>,
}

impl ProfileReport {
    pub fn row(&self, path: ProfilePath) -> &ProfileRow {
        self.rows.iter().find(|r| r.path == path).expect("all paths profiled")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("path,dense_matmuls,block_matmuls,segment_matmuls,total_matmuls,allocations,allocated_bytes,weight_shaped_allocs,saved_act_bytes,median_us\n");
        for r in &self.rows {
            let c = &r.counters;
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{:.2}\n",
                r.path.name(),
                c.dense_matmuls,
                c.block_matmuls,
                c.segment_matmuls,
                c.total_matmuls(),
                c.allocations,
                c.allocated_bytes,
                r.weight_shaped_allocs,
                r.saved_act_bytes.map(|b| b.to_string()).unwrap_or_default(),
                r.median_us
            ));
        }
        s
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn time_reps(warmup: usize, reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    for _ in 0..warmup {
        f()?;
    }
    let mut t = Vec::with_capacity(reps);
    for _ in 0..reps {
        let s = Instant::now();
        f()?;
        t.push(s.elapsed().as_secs_f64() * 1e6);
    }
    Ok(median(t))
}

fn tape_step<T: Scalar>(model: &Model<T>, batch: &Batch<T>) -> Result<usize> {
    let mut ledger = ActivationLedger::new();
    let (_, mut tape) = forward_graph(model, batch, &mut ledger)?;
    let bytes = tape.saved_bytes();
    backward_graph(model, &mut tape, &mut ledger)?;
    Ok(bytes)
}

pub fn profile_typed<T: Scalar>(cfg: &TrainConfig) -> Result<ProfileReport> {
    let (m, n, batch) = (cfg.in_dim, cfg.out_dim, cfg.profile_batch);
    let mut rng = Rng::new(cfg.seed);
    let mut layer: PoetLinearLayer<T> = init_layer(m, n, cfg.block_size, Variant::Fast, cfg.neumann_order()?, cfg.weight_std, &mut rng)?;
    {
        let (r, p) = layer.skew_params_mut();
        for v in r.packed_mut().iter_mut().chain(p.packed_mut().iter_mut()) {
            *v = T::from_f64(0.01 * rng.normal());
        }
    }
    let x = Arc::new(gaussian_matrix::<T>(batch, m, 1.0, &mut rng)?);
    let y = gaussian_matrix::<T>(batch, n, 1.0, &mut rng)?;
    let dz = y.clone();
    let rb = Batch::Regression { x: Arc::clone(&x), y };

    let mut rows = Vec::new();
    for path in ProfilePath::ALL {
        let (counters, saved, us) = match path {
            ProfilePath::WeightCentric => {
                let step = || -> Result<()> {
                    reference::forward(&layer, &x)?;
                    reference::backward(&layer, &x, &dz)?;
                    Ok(())
                };
                let (r, c) = measure(step);
                r?;
                (c, None, time_reps(cfg.profile_warmup, cfg.profile_reps, step)?)
            }
            ProfilePath::Fast | ProfilePath::Mem | ProfilePath::Dense => {
                let stage = match path {
                    ProfilePath::Dense => Stage::Dense(layer.weight().base_dense()),
                    ProfilePath::Fast => Stage::Poet(layer.clone()),
                    _ => {
                        let mut l = layer.clone();
                        l.set_variant(Variant::Mem)?;
                        Stage::Poet(l)
                    }
                };
                let model = Model { stages: vec![stage], loss: LossKind::Mse };
                let (r, c) = measure(|| tape_step(&model, &rb));
                let saved = r?;
                (c, Some(saved), time_reps(cfg.profile_warmup, cfg.profile_reps, || tape_step(&model, &rb).map(|_| ()))?)
            }
        };
        rows.push(ProfileRow {
            path,
            weight_shaped_allocs: counters.allocs_of_shape(m, n),
            counters,
            saved_act_bytes: saved,
            median_us: us,
        });
    }
    Ok(ProfileReport { m, n, batch, rows })
}

/// Profiles all paths and writes `profile.csv` into `cfg.out`.
pub fn run_profile(cfg: &TrainConfig) -> Result<ProfileReport> {
    cfg.validate()?;
    if cfg.profile_batch == cfg.in_dim || cfg.profile_batch == cfg.out_dim {
        return Err(PoetError::Config(format!(
            "profile_batch ({}) must differ from in_dim and out_dim so weight-shaped allocations are unambiguous",
            cfg.profile_batch
        )));
    }
    let report = match cfg.precision {
        Precision::F32 => profile_typed::<f32>(cfg)?,
        Precision::F64 => profile_typed::<f64>(cfg)?,
    };
    std::fs::create_dir_all(&cfg.out).map_err(|e| PoetError::io(cfg.out.display().to_string(), e))?;
    let path = cfg.out.join("profile.csv");
    std::fs::write(&path, report.to_csv()).map_err(|e| PoetError::io(path.display().to_string(), e))?;
    Ok(report)
}
