//! The training loop, metrics and checkpoint round trip.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::dense::{Matrix, Rng, RngState};
use crate::error::{PoetError, Result};
use crate::layer::{MergeOptions, PoetLinearLayer, QuantizedMatrix, Variant};
use crate::cnp::{NeumannOrder, SkewParams};
use crate::optim::{adamw_step, clip_threshold_at, global_clip, lr_at, poet_lr_at, AdamWState};
use crate::permute::PermutationMap;
use crate::scalar::Scalar;
use crate::tape::{backward_graph, forward_graph, memory_report, softmax_cross_entropy, ActivationLedger, Batch, Embedding, Model, ParamKind, Stage};

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TensorData};
use super::config::{OptimizerKind, Task, TrainConfig};
use super::data::{eval_token_batch, load_text_corpus, regression_batch, sample_token_batch, unigram_entropy, Corpus};
use super::models::{build_model, regression_teacher};

pub const METRICS_HEADER: &str = "step,tokens,train_loss,val_loss,lr,grad_norm,orth_err_R,orth_err_P,sv_drift,act_bytes,elapsed_s";

const DATA_SALT: u64 = 0x5eed_da7a_0000_0001;
const VAL_SALT: u64 = 0x5eed_7a1d_0000_0002;

/// Everything that evolves during training.
#[derive(Debug)]
pub struct TrainState<T> {
    pub model: Model<T>,
    pub opt: Vec<AdamWState<T>>,
    pub teacher: Option<Matrix<T>>,
    pub step: u64,
    pub steps_since_merge: u64,
    pub tokens: u64,
    pub merges: u64,
    /// Sum over merges of the largest per-layer relative singular-value drift.
    pub sv_drift: f64,
    pub initial_val_loss: f64,
    pub model_rng: Rng,
    pub data_rng: Rng,
}

/// Fixed data for one run.
#[derive(Debug)]
pub enum DataSource<T> {
    Regression { val: Batch<T> },
    CharLm { corpus: Corpus, val: Batch<T>, unigram_entropy: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub clip: f64,
    pub merged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
    pub final_train_loss: f64,
    /// Entropy of the validation split's byte distribution (language model only).
    pub unigram_entropy: Option<f64>,
    pub merges: u64,
    pub sv_drift: f64,
    pub trainable_params: usize,
    pub metrics_path: PathBuf,
    pub final_checkpoint: PathBuf,
}

fn data_for<T: Scalar>(cfg: &TrainConfig, teacher: Option<&Matrix<T>>) -> Result<DataSource<T>> {
    match cfg.task {
        Task::CharLm => {
            let path = cfg.data.as_ref().ok_or_else(|| PoetError::Config("task=char-lm requires data=PATH".into()))?;
            let corpus = load_text_corpus(path)?;
            let val = eval_token_batch(&corpus.val, cfg.context, cfg.val_examples)?;
            let h = unigram_entropy(&corpus.val);
            Ok(DataSource::CharLm { corpus, val, unigram_entropy: h })
        }
        Task::Regression => {
            let teacher = teacher.ok_or_else(|| PoetError::Config("regression run has no teacher".into()))?;
            let val = regression_batch(teacher, cfg.val_examples, &mut Rng::new(cfg.seed ^ VAL_SALT))?;
            Ok(DataSource::Regression { val })
        }
        other => Err(PoetError::Config(format!("task={other} is not a training task"))),
    }
}

/// Fresh state and data for `cfg`.
pub fn init_training<T: Scalar>(cfg: &TrainConfig) -> Result<(TrainState<T>, DataSource<T>)> {
    cfg.validate()?;
    let mut model_rng = Rng::new(cfg.seed);
    let model = build_model::<T>(cfg, &mut model_rng)?;
    let teacher = match cfg.task {
        Task::Regression => Some(regression_teacher(&model, cfg, &mut model_rng.fork())?),
        _ => None,
    };
    let data = data_for(cfg, teacher.as_ref())?;
    let opt = model.param_group_sizes().iter().map(|&(_, n)| AdamWState::new(n)).collect();
    let mut state = TrainState {
        model,
        opt,
        teacher,
        step: 0,
        steps_since_merge: 0,
        tokens: 0,
        merges: 0,
        sv_drift: 0.0,
        initial_val_loss: 0.0,
        model_rng,
        data_rng: Rng::new(cfg.seed ^ DATA_SALT),
    };
    state.initial_val_loss = evaluate(&state, &data)?;
    Ok((state, data))
}

/// Loss of the current model on the fixed validation batch.
pub fn evaluate<T: Scalar>(state: &TrainState<T>, data: &DataSource<T>) -> Result<f64> {
    let (val, is_lm) = match data {
        DataSource::Regression { val } => (val, false),
        DataSource::CharLm { val, .. } => (val, true),
    };
    let out = state.model.predict(val)?;
    let loss = match (val, is_lm) {
        (Batch::Tokens { targets, .. }, true) => softmax_cross_entropy(&out, targets)?.0,
        (Batch::Regression { y, .. }, false) => {
            let d = out.sub(y)?;
            d.data().iter().map(|x| x.as_f64().powi(2)).sum::<f64>() / d.data().len() as f64
        }
        _ => unreachable!("validation batch matches task"),
    };
    if !loss.is_finite() {
        return Err(PoetError::NonFinite(format!("validation loss {loss}")));
    }
    Ok(loss)
}

fn next_batch<T: Scalar>(cfg: &TrainConfig, state: &mut TrainState<T>, data: &DataSource<T>) -> Result<Batch<T>> {
    match data {
        DataSource::Regression { .. } => {
            let teacher = state.teacher.as_ref().expect("regression teacher");
            regression_batch(teacher, cfg.batch_size, &mut state.data_rng)
        }
        DataSource::CharLm { corpus, .. } => sample_token_batch(&corpus.train, cfg.context, cfg.batch_size, &mut state.data_rng),
    }
}

/// One optimizer step, followed by a merge when the gap is reached.
pub fn train_step<T: Scalar>(cfg: &TrainConfig, state: &mut TrainState<T>, data: &DataSource<T>, ledger: &mut ActivationLedger) -> Result<StepReport> {
    let batch = next_batch(cfg, state, data)?;
    let (loss, mut tape) = forward_graph(&state.model, &batch, ledger)?;
    let mut grads = backward_graph(&state.model, &mut tape, ledger)?;
    let sched = &cfg.schedule;
    let poet = cfg.optimizer == OptimizerKind::Poet;
    let clip = if poet { clip_threshold_at(state.step, state.steps_since_merge, sched) } else { sched.clip_norm };
    let grad_norm = global_clip(&mut grads.groups_mut(), clip);
    if !grad_norm.is_finite() {
        return Err(PoetError::NonFinite(format!("gradient norm at step {}", state.step)));
    }
    let lr = lr_at(state.step, sched);
    let poet_lr = poet_lr_at(state.step, sched);
    let mut groups = state.model.param_groups_mut();
    for ((group, g), st) in groups.iter_mut().zip(grads.groups()).zip(state.opt.iter_mut()) {
        let group_lr = match group.kind {
            ParamKind::Orthogonal => poet_lr,
            ParamKind::Plain => lr,
        };
        adamw_step(group.values, g, st, group_lr, &cfg.adam)?;
    }
    drop(groups);
    state.step += 1;
    state.steps_since_merge += 1;
    state.tokens += batch.len() as u64;

    let mut merged = false;
    if poet && state.step % sched.merge_gap == 0 {
        merge_all(cfg, state)?;
        merged = true;
    }
    Ok(StepReport { loss, grad_norm, lr, clip, merged })
}

fn merge_all<T: Scalar>(cfg: &TrainConfig, state: &mut TrainState<T>) -> Result<()> {
    let opts = MergeOptions { mode: cfg.merge_mode, audit_spectrum: cfg.audit_spectrum };
    let mut worst = 0.0f64;
    for layer in state.model.poet_layers_mut() {
        let audit = layer.merge_and_reinit(&mut state.model_rng, opts)?;
        worst = worst.max(audit.max_rel_drift.unwrap_or(0.0));
        log::debug!(
            "merge at step {}: orth_err R {:.3e} P {:.3e}, drift {:?}",
            state.step,
            audit.orth_err_r,
            audit.orth_err_p,
            audit.max_rel_drift
        );
    }
    // Moments of the old skew coordinates do not carry over to the new
    // permutation frame.
    for (st, (kind, _)) in state.opt.iter_mut().zip(state.model.param_group_sizes()) {
        if kind == ParamKind::Orthogonal {
            st.reset();
        }
    }
    state.sv_drift += worst;
    state.merges += 1;
    state.steps_since_merge = 0;
    Ok(())
}

/// Largest `||G^T G - I||_F` over layers, per side.
pub fn orthogonality_errors<T: Scalar>(model: &Model<T>) -> Result<(f64, f64)> {
    let mut out = (0.0f64, 0.0f64);
    for l in model.poet_layers() {
        let (r, p) = l.orthogonality_errors()?;
        out = (out.0.max(r), out.1.max(p));
    }
    Ok(out)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PoetError + '_ {
    move |e| PoetError::io(path.display().to_string(), e)
}

/// Trains per `cfg` (or resumes from `cfg.resume`), writing `metrics.csv`,
/// `memory.csv`, periodic checkpoints and `final.pxk` into `cfg.out`.
pub fn run_train(cfg: &TrainConfig) -> Result<TrainSummary> {
    let precision = match &cfg.resume {
        Some(p) => resolved_config(cfg, &load_checkpoint(p)?)?.precision,
        None => cfg.precision,
    };
    match precision {
        super::config::Precision::F32 => run_train_typed::<f32>(cfg),
        super::config::Precision::F64 => run_train_typed::<f64>(cfg),
    }
}

/// The checkpoint's configuration with run-control keys taken from `cli`.
fn resolved_config(cli: &TrainConfig, ckpt: &Checkpoint) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::from_text(&ckpt.config)?;
    cfg.out = cli.out.clone();
    cfg.resume = cli.resume.clone();
    cfg.log_elapsed = cli.log_elapsed;
    cfg.checkpoint_every = cli.checkpoint_every;
    Ok(cfg)
}

pub fn run_train_typed<T: Scalar>(cli_cfg: &TrainConfig) -> Result<TrainSummary> {
    let (cfg, mut state, data) = match &cli_cfg.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let cfg = resolved_config(cli_cfg, &ckpt)?;
            cfg.validate()?;
            let state = state_from_checkpoint::<T>(&cfg, &ckpt)?;
            let data = data_for(&cfg, state.teacher.as_ref())?;
            (cfg, state, data)
        }
        None => {
            let (s, d) = init_training::<T>(cli_cfg)?;
            (cli_cfg.clone(), s, d)
        }
    };
    std::fs::create_dir_all(&cfg.out).map_err(io_err(&cfg.out))?;
    let metrics_path = cfg.out.join("metrics.csv");
    let mut metrics = BufWriter::new(File::create(&metrics_path).map_err(io_err(&metrics_path))?);
    writeln!(metrics, "{METRICS_HEADER}").map_err(io_err(&metrics_path))?;

    let mut ledger = ActivationLedger::new();
    ledger.account_model(&state.model, 2);
    let start = Instant::now();
    let total = cfg.schedule.total_steps;
    let mut last_loss = f64::NAN;
    let mut last_val = state.initial_val_loss;
    log::info!(
        "training {} ({} trainable parameters) for {} steps from step {}",
        cfg.task,
        state.model.trainable_param_count(),
        total,
        state.step
    );
    while state.step < total {
        let rep = train_step(&cfg, &mut state, &data, &mut ledger)?;
        last_loss = rep.loss;
        let s = state.step;
        if s % cfg.log_every == 0 || s == total {
            last_val = evaluate(&state, &data)?;
            let (er, ep) = orthogonality_errors(&state.model)?;
            let elapsed = if cfg.log_elapsed { start.elapsed().as_secs_f64() } else { 0.0 };
            writeln!(
                metrics,
                "{s},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{},{:.3}",
                state.tokens,
                rep.loss,
                last_val,
                rep.lr,
                rep.grad_norm,
                er,
                ep,
                state.sv_drift,
                ledger.saved_activations_peak(),
                elapsed
            )
            .map_err(io_err(&metrics_path))?;
            metrics.flush().map_err(io_err(&metrics_path))?;
            log::info!("step {s}: train {:.5} val {last_val:.5} lr {:.3e}", rep.loss, rep.lr);
        }
        if cfg.checkpoint_every > 0 && s % cfg.checkpoint_every == 0 && s < total {
            let p = cfg.out.join(format!("ckpt_{s:06}.pxk"));
            save_checkpoint(&p, &state_to_checkpoint(&cfg, &state))?;
        }
    }
    let final_checkpoint = cfg.out.join("final.pxk");
    save_checkpoint(&final_checkpoint, &state_to_checkpoint(&cfg, &state))?;
    let mem_path = cfg.out.join("memory.csv");
    std::fs::write(&mem_path, memory_report(&ledger).to_csv()).map_err(io_err(&mem_path))?;

    let unigram = match &data {
        DataSource::CharLm { unigram_entropy, .. } => Some(*unigram_entropy),
        _ => None,
    };
    Ok(TrainSummary {
        steps: state.step,
        initial_val_loss: state.initial_val_loss,
        final_val_loss: last_val,
        final_train_loss: last_loss,
        unigram_entropy: unigram,
        merges: state.merges,
        sv_drift: state.sv_drift,
        trainable_params: state.model.trainable_param_count(),
        metrics_path,
        final_checkpoint,
    })
}

fn rng_to_state(ckpt: &mut Checkpoint, name: &str, rng: &Rng) {
    let s = rng.state();
    ckpt.set_state(&format!("{name}_seed"), s.seed);
    ckpt.set_state(&format!("{name}_word_pos"), s.word_pos);
}

fn rng_from_state(ckpt: &Checkpoint, name: &str) -> Result<Rng> {
    Ok(Rng::from_state(RngState {
        seed: ckpt.state_parse(&format!("{name}_seed"))?,
        word_pos: ckpt.state_parse(&format!("{name}_word_pos"))?,
    }))
}

fn f64_bits(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn parse_f64_bits(ckpt: &Checkpoint, key: &str) -> Result<f64> {
    let v = ckpt.state_value(key)?;
    u64::from_str_radix(v, 16)
        .map(f64::from_bits)
        .map_err(|_| PoetError::Format(format!("checkpoint state '{key}' has bad value '{v}'")))
}

fn perm_u32(p: &PermutationMap) -> TensorData {
    TensorData::U32(p.forward().to_vec())
}

pub fn state_to_checkpoint<T: Scalar>(cfg: &TrainConfig, state: &TrainState<T>) -> Checkpoint {
    let mut c = Checkpoint { config: cfg.to_text(), ..Default::default() };
    c.set_state("step", state.step);
    c.set_state("steps_since_merge", state.steps_since_merge);
    c.set_state("tokens", state.tokens);
    c.set_state("merges", state.merges);
    c.set_state("sv_drift_bits", f64_bits(state.sv_drift));
    c.set_state("initial_val_loss_bits", f64_bits(state.initial_val_loss));
    c.set_state("dtype", T::NAME);
    rng_to_state(&mut c, "model_rng", &state.model_rng);
    rng_to_state(&mut c, "data_rng", &state.data_rng);

    for (i, stage) in state.model.stages.iter().enumerate() {
        let pre = format!("stage{i}");
        match stage {
            Stage::Poet(l) => {
                let (m, n) = (l.in_dim(), l.out_dim());
                let variant = match l.variant() {
                    Variant::Fast => 0,
                    Variant::Mem => 1,
                };
                let meta = vec![m as u32, n as u32, l.block_size() as u32, variant, l.neumann_order().get() as u32];
                c.push(format!("{pre}.meta"), &[5], TensorData::U32(meta));
                match l.weight() {
                    crate::layer::BaseWeight::Full { base, .. } => c.push_float(format!("{pre}.base"), &[m, n], base.data()),
                    crate::layer::BaseWeight::Int8 { base, .. } => {
                        c.push(format!("{pre}.base_codes"), &[m, n], TensorData::I8(base.codes().to_vec()));
                        c.push_float(format!("{pre}.base_scales"), &[m], base.scales());
                    }
                }
                c.push_float(format!("{pre}.q_r"), &[l.q_r().len()], l.q_r().packed());
                c.push_float(format!("{pre}.q_p"), &[l.q_p().len()], l.q_p().packed());
                c.push(format!("{pre}.perm_in"), &[m], perm_u32(l.perm_in()));
                c.push(format!("{pre}.perm_out"), &[n], perm_u32(l.perm_out()));
            }
            Stage::Dense(w) => c.push_float(format!("{pre}.weight"), &[w.rows(), w.cols()], w.data()),
            Stage::Embedding(e) => c.push_float(format!("{pre}.table"), &[e.table.rows(), e.table.cols()], e.table.data()),
            Stage::Tanh => {}
        }
    }
    let mut steps = Vec::with_capacity(2 * state.opt.len());
    for (g, st) in state.opt.iter().enumerate() {
        c.push_float(format!("opt.{g}.m"), &[st.len()], &st.m);
        c.push_float(format!("opt.{g}.v"), &[st.len()], &st.v);
        steps.push(st.step as u32);
        steps.push((st.step >> 32) as u32);
    }
    c.push("opt.steps", &[steps.len()], TensorData::U32(steps));
    if let Some(t) = &state.teacher {
        c.push_float("teacher", &[t.rows(), t.cols()], t.data());
    }
    c
}

fn matrix_from<T: Scalar>(ckpt: &Checkpoint, name: &str, rows: usize, cols: usize) -> Result<Matrix<T>> {
    let (dims, data) = ckpt.float::<T>(name)?;
    if dims != [rows, cols] {
        return Err(PoetError::Format(format!("tensor '{name}' has dims {dims:?}, expected [{rows}, {cols}]")));
    }
    Matrix::from_vec(rows, cols, data)
}

pub fn state_from_checkpoint<T: Scalar>(cfg: &TrainConfig, ckpt: &Checkpoint) -> Result<TrainState<T>> {
    let dtype = ckpt.state_value("dtype")?;
    if dtype != T::NAME {
        return Err(PoetError::Format(format!("checkpoint holds {dtype} tensors, run expects {}", T::NAME)));
    }
    // The stage layout comes from the config; the values from the container.
    let mut model = build_model::<T>(cfg, &mut Rng::new(cfg.seed))?;
    for (i, stage) in model.stages.iter_mut().enumerate() {
        let pre = format!("stage{i}");
        match stage {
            Stage::Poet(old) => {
                let meta = ckpt.u32s(&format!("{pre}.meta"))?;
                if meta.len() != 5 {
                    return Err(PoetError::Format(format!("{pre}.meta has {} entries", meta.len())));
                }
                let (m, n, b) = (meta[0] as usize, meta[1] as usize, meta[2] as usize);
                if (m, n, b) != (old.in_dim(), old.out_dim(), old.block_size()) {
                    return Err(PoetError::Format(format!("{pre} geometry {m}x{n}/b{b} does not match the configuration")));
                }
                let variant = if meta[3] == 0 { Variant::Fast } else { Variant::Mem };
                let k = NeumannOrder::new(meta[4] as usize).map_err(|_| PoetError::Format(format!("{pre} has Neumann order 0")))?;
                let q = |side: &str, nb: usize| -> Result<SkewParams<T>> {
                    let (_, v) = ckpt.float::<T>(&format!("{pre}.{side}"))?;
                    SkewParams::from_vec(nb, b, v)
                };
                let q_r = q("q_r", m / b)?;
                let q_p = q("q_p", n / b)?;
                let perm_in = PermutationMap::from_forward(ckpt.u32s(&format!("{pre}.perm_in"))?.to_vec())?;
                let perm_out = PermutationMap::from_forward(ckpt.u32s(&format!("{pre}.perm_out"))?.to_vec())?;
                let layer = if ckpt.tensor(&format!("{pre}.base_codes")).is_ok() {
                    let codes = ckpt.i8s(&format!("{pre}.base_codes"))?.to_vec();
                    let (_, scales) = ckpt.float::<T>(&format!("{pre}.base_scales"))?;
                    let base = QuantizedMatrix::from_parts(m, n, codes, scales)?;
                    PoetLinearLayer::from_quantized_parts(base, q_r, q_p, perm_in, perm_out, b, variant, k)?
                } else {
                    let base = matrix_from(ckpt, &format!("{pre}.base"), m, n)?;
                    PoetLinearLayer::from_parts(base, q_r, q_p, perm_in, perm_out, b, variant, k)?
                };
                *old = layer;
            }
            Stage::Dense(w) => *w = matrix_from(ckpt, &format!("{pre}.weight"), w.rows(), w.cols())?,
            Stage::Embedding(Embedding { table, .. }) => *table = matrix_from(ckpt, &format!("{pre}.table"), table.rows(), table.cols())?,
            Stage::Tanh => {}
        }
    }
    let steps = ckpt.u32s("opt.steps")?;
    let sizes = model.param_group_sizes();
    if steps.len() != 2 * sizes.len() {
        return Err(PoetError::Format(format!("optimizer state for {} groups, model has {}", steps.len() / 2, sizes.len())));
    }
    let mut opt = Vec::with_capacity(sizes.len());
    for (g, &(_, n)) in sizes.iter().enumerate() {
        let (_, m) = ckpt.float::<T>(&format!("opt.{g}.m"))?;
        let (_, v) = ckpt.float::<T>(&format!("opt.{g}.v"))?;
        if m.len() != n || v.len() != n {
            return Err(PoetError::Format(format!("optimizer group {g} has {} moments, expected {n}", m.len())));
        }
        let step = steps[2 * g] as u64 | ((steps[2 * g + 1] as u64) << 32);
        opt.push(AdamWState { m, v, step });
    }
    let teacher = match cfg.task {
        Task::Regression => {
            let t = ckpt.tensor("teacher")?;
            let (r, c) = (t.dims[0] as usize, t.dims.get(1).copied().unwrap_or(1) as usize);
            Some(matrix_from(ckpt, "teacher", r, c)?)
        }
        _ => None,
    };
    Ok(TrainState {
        model,
        opt,
        teacher,
        step: ckpt.state_parse("step")?,
        steps_since_merge: ckpt.state_parse("steps_since_merge")?,
        tokens: ckpt.state_parse("tokens")?,
        merges: ckpt.state_parse("merges")?,
        sv_drift: parse_f64_bits(ckpt, "sv_drift_bits")?,
        initial_val_loss: parse_f64_bits(ckpt, "initial_val_loss_bits")?,
        model_rng: rng_from_state(ckpt, "model_rng")?,
        data_rng: rng_from_state(ckpt, "data_rng")?,
    })
}
