//! Flat `key=value` run configuration.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cnp::NeumannOrder;
use crate::error::{PoetError, Result};
use crate::layer::{MergeMode, Variant};
use crate::optim::{AdamWConfig, ScheduleConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Regression,
    CharLm,
    Coverage,
    SpectrumAudit,
    Profile,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    /// Orthogonal factors trained with AdamW, periodic merges.
    Poet,
    /// Ordinary dense layers trained with AdamW.
    DenseAdamw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    /// Identity for regression, tanh for the language model.
    Auto,
    Identity,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoverageMode {
    Block,
    Fully,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuditMode {
    Cnp,
    Exact,
    Both,
}

macro_rules! str_enum {
    ($ty:ty, $($name:literal => $v:expr),+ $(,)?) => {
        impl FromStr for $ty {
            type Err = PoetError;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($v),)+
                    other => Err(PoetError::Config(format!(
                        "invalid value '{other}' (expected one of: {})",
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }

        impl Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                $(if *self == $v { return f.write_str($name); })+
                unreachable!()
            }
        }
    };
}

str_enum!(Task, "regression" => Task::Regression, "char-lm" => Task::CharLm, "coverage" => Task::Coverage,
    "spectrum-audit" => Task::SpectrumAudit, "profile" => Task::Profile);
str_enum!(OptimizerKind, "poet" => OptimizerKind::Poet, "dense-adamw" => OptimizerKind::DenseAdamw);
str_enum!(Activation, "auto" => Activation::Auto, "identity" => Activation::Identity, "tanh" => Activation::Tanh);
str_enum!(Precision, "32" => Precision::F32, "64" => Precision::F64);
str_enum!(CoverageMode, "block" => CoverageMode::Block, "fully" => CoverageMode::Fully, "both" => CoverageMode::Both);
str_enum!(AuditMode, "cnp" => AuditMode::Cnp, "exact" => AuditMode::Exact, "both" => AuditMode::Both);

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub task: Task,
    pub optimizer: OptimizerKind,

    // model
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    /// Number of reparameterized (or dense baseline) hidden layers.
    pub depth: usize,
    pub activation: Activation,
    pub block_size: usize,
    pub variant: Variant,
    pub quantized: bool,
    pub neumann_k: usize,
    pub merge_mode: MergeMode,
    pub weight_std: Option<f64>,
    pub teacher_rotation: f64,
    pub embed_dim: usize,
    pub context: usize,

    // optimization
    pub schedule: ScheduleConfig,
    pub adam: AdamWConfig,
    pub batch_size: usize,
    pub audit_spectrum: bool,

    // run control
    pub seed: u64,
    pub precision: Precision,
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub log_every: u64,
    pub val_examples: usize,
    pub checkpoint_every: u64,
    pub resume: Option<PathBuf>,
    pub log_elapsed: bool,

    // coverage
    pub coverage_dim: usize,
    pub coverage_block: usize,
    pub coverage_steps: u64,
    pub coverage_fraction: f64,
    pub coverage_mode: CoverageMode,

    // spectrum audit
    pub audit_dim: usize,
    pub audit_merges: usize,
    pub audit_steps_per_merge: u64,
    pub audit_mode: AuditMode,
    pub audit_q_max: f64,

    // profile
    pub profile_batch: usize,
    pub profile_reps: usize,
    pub profile_warmup: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: Task::Regression,
            optimizer: OptimizerKind::Poet,
            in_dim: 32,
            hidden_dim: 32,
            out_dim: 32,
            depth: 2,
            activation: Activation::Auto,
            block_size: 8,
            variant: Variant::Mem,
            quantized: false,
            neumann_k: 3,
            merge_mode: MergeMode::Cnp,
            weight_std: None,
            teacher_rotation: 1.0,
            embed_dim: 16,
            context: 8,
            schedule: ScheduleConfig::default(),
            adam: AdamWConfig::default(),
            batch_size: 64,
            audit_spectrum: true,
            seed: 0,
            precision: Precision::F32,
            data: None,
            out: PathBuf::from("runs/default"),
            log_every: 50,
            val_examples: 1024,
            checkpoint_every: 0,
            resume: None,
            log_elapsed: true,
            coverage_dim: 64,
            coverage_block: 8,
            coverage_steps: 100,
            coverage_fraction: 0.125,
            coverage_mode: CoverageMode::Both,
            audit_dim: 64,
            audit_merges: 10,
            audit_steps_per_merge: 20,
            audit_mode: AuditMode::Both,
            audit_q_max: 0.1,
            profile_batch: 48,
            profile_reps: 30,
            profile_warmup: 5,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: Display,
{
    value
        .parse()
        .map_err(|e| PoetError::Config(format!("{key}: cannot parse '{value}': {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(PoetError::Config(format!("{key}: expected true/false, got '{value}'"))),
    }
}

fn opt_path(v: &str) -> Option<PathBuf> {
    if v.is_empty() {
        None
    } else {
        Some(PathBuf::from(v))
    }
}

impl TrainConfig {
    /// Sets one key. Dashes in keys are read as underscores.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let v = value.trim();
        let k = key.as_str();
        let s = &mut self.schedule;
        match k {
            "task" => self.task = v.parse()?,
            "optimizer" => self.optimizer = v.parse()?,
            "in_dim" => self.in_dim = parse(k, v)?,
            "hidden_dim" => self.hidden_dim = parse(k, v)?,
            "out_dim" => self.out_dim = parse(k, v)?,
            "depth" => self.depth = parse(k, v)?,
            "activation" => self.activation = v.parse()?,
            "b" | "block_size" => self.block_size = parse(k, v)?,
            "variant" => self.variant = v.parse()?,
            "quantized" => self.quantized = parse_bool(k, v)?,
            "neumann_k" => self.neumann_k = parse(k, v)?,
            "merge_mode" => {
                self.merge_mode = match v {
                    "cnp" => MergeMode::Cnp,
                    "exact" => MergeMode::ExactCayley,
                    _ => return Err(PoetError::Config(format!("merge_mode: expected cnp|exact, got '{v}'"))),
                }
            }
            "weight_std" => self.weight_std = if v == "auto" { None } else { Some(parse(k, v)?) },
            "teacher_rotation" => self.teacher_rotation = parse(k, v)?,
            "embed_dim" => self.embed_dim = parse(k, v)?,
            "context" | "seq_len" => self.context = parse(k, v)?,
            "lr" => s.base_lr = parse(k, v)?,
            "poet_lr_scale" => s.poet_lr_scale = parse(k, v)?,
            "warmup_steps" => s.warmup_steps = parse(k, v)?,
            "steps" | "total_steps" => s.total_steps = parse(k, v)?,
            "min_lr_ratio" => s.min_lr_ratio = parse(k, v)?,
            "weight_decay" => {
                s.weight_decay = parse(k, v)?;
                self.adam.weight_decay = s.weight_decay;
            }
            "clip_norm" => s.clip_norm = parse(k, v)?,
            "post_merge_clip_start" => s.post_merge_clip_start = parse(k, v)?,
            "post_merge_ramp_steps" => s.post_merge_ramp_steps = parse(k, v)?,
            "post_merge_clip_active_steps" => s.post_merge_clip_active_steps = parse(k, v)?,
            "merge_gap" => s.merge_gap = parse(k, v)?,
            "beta1" => self.adam.beta1 = parse(k, v)?,
            "beta2" => self.adam.beta2 = parse(k, v)?,
            "eps" => self.adam.eps = parse(k, v)?,
            "batch_size" => self.batch_size = parse(k, v)?,
            "audit_spectrum" => self.audit_spectrum = parse_bool(k, v)?,
            "seed" => self.seed = parse(k, v)?,
            "precision" => self.precision = v.parse()?,
            "data" => self.data = opt_path(v),
            "out" => self.out = PathBuf::from(v),
            "log_every" => self.log_every = parse(k, v)?,
            "val_examples" => self.val_examples = parse(k, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(k, v)?,
            "resume" => self.resume = opt_path(v),
            "log_elapsed" => self.log_elapsed = parse_bool(k, v)?,
            "coverage_dim" => self.coverage_dim = parse(k, v)?,
            "coverage_block" => self.coverage_block = parse(k, v)?,
            "coverage_steps" => self.coverage_steps = parse(k, v)?,
            "coverage_fraction" => self.coverage_fraction = parse(k, v)?,
            "coverage_mode" => self.coverage_mode = v.parse()?,
            "audit_dim" => self.audit_dim = parse(k, v)?,
            "audit_merges" => self.audit_merges = parse(k, v)?,
            "audit_steps_per_merge" => self.audit_steps_per_merge = parse(k, v)?,
            "audit_mode" => self.audit_mode = v.parse()?,
            "audit_q_max" => self.audit_q_max = parse(k, v)?,
            "profile_batch" => self.profile_batch = parse(k, v)?,
            "profile_reps" => self.profile_reps = parse(k, v)?,
            "profile_warmup" => self.profile_warmup = parse(k, v)?,
            _ => return Err(PoetError::Config(format!("unknown configuration key '{key}'"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| PoetError::Config(format!("line {}: expected key=value, got '{line}'", n + 1)))?;
            self.set(k, v).map_err(|e| match e {
                PoetError::Config(m) => PoetError::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PoetError::io(path.display().to_string(), e))?;
        let mut cfg = TrainConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Every key with its current value, in a stable order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.schedule;
        let p = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        vec![
            ("task", self.task.to_string()),
            ("optimizer", self.optimizer.to_string()),
            ("in_dim", self.in_dim.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("out_dim", self.out_dim.to_string()),
            ("depth", self.depth.to_string()),
            ("activation", self.activation.to_string()),
            ("block_size", self.block_size.to_string()),
            ("variant", self.variant.as_str().to_string()),
            ("quantized", self.quantized.to_string()),
            ("neumann_k", self.neumann_k.to_string()),
            ("merge_mode", match self.merge_mode { MergeMode::Cnp => "cnp", MergeMode::ExactCayley => "exact" }.to_string()),
            ("weight_std", self.weight_std.map_or("auto".to_string(), |w| format!("{w:?}"))),
            ("teacher_rotation", format!("{:?}", self.teacher_rotation)),
            ("embed_dim", self.embed_dim.to_string()),
            ("context", self.context.to_string()),
            ("lr", format!("{:?}", s.base_lr)),
            ("poet_lr_scale", format!("{:?}", s.poet_lr_scale)),
            ("warmup_steps", s.warmup_steps.to_string()),
            ("steps", s.total_steps.to_string()),
            ("min_lr_ratio", format!("{:?}", s.min_lr_ratio)),
            ("weight_decay", format!("{:?}", s.weight_decay)),
            ("clip_norm", format!("{:?}", s.clip_norm)),
            ("post_merge_clip_start", format!("{:?}", s.post_merge_clip_start)),
            ("post_merge_ramp_steps", s.post_merge_ramp_steps.to_string()),
            ("post_merge_clip_active_steps", s.post_merge_clip_active_steps.to_string()),
            ("merge_gap", s.merge_gap.to_string()),
            ("beta1", format!("{:?}", self.adam.beta1)),
            ("beta2", format!("{:?}", self.adam.beta2)),
            ("eps", format!("{:?}", self.adam.eps)),
            ("batch_size", self.batch_size.to_string()),
            ("audit_spectrum", self.audit_spectrum.to_string()),
            ("seed", self.seed.to_string()),
            ("precision", self.precision.to_string()),
            ("data", p(&self.data)),
            ("out", self.out.display().to_string()),
            ("log_every", self.log_every.to_string()),
            ("val_examples", self.val_examples.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("resume", p(&self.resume)),
            ("log_elapsed", self.log_elapsed.to_string()),
            ("coverage_dim", self.coverage_dim.to_string()),
            ("coverage_block", self.coverage_block.to_string()),
            ("coverage_steps", self.coverage_steps.to_string()),
            ("coverage_fraction", format!("{:?}", self.coverage_fraction)),
            ("coverage_mode", self.coverage_mode.to_string()),
            ("audit_dim", self.audit_dim.to_string()),
            ("audit_merges", self.audit_merges.to_string()),
            ("audit_steps_per_merge", self.audit_steps_per_merge.to_string()),
            ("audit_mode", self.audit_mode.to_string()),
            ("audit_q_max", format!("{:?}", self.audit_q_max)),
            ("profile_batch", self.profile_batch.to_string()),
            ("profile_reps", self.profile_reps.to_string()),
            ("profile_warmup", self.profile_warmup.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn neumann_order(&self) -> Result<NeumannOrder> {
        NeumannOrder::new(self.neumann_k)
    }

    pub fn activation_is_tanh(&self) -> bool {
        match self.activation {
            Activation::Tanh => true,
            Activation::Identity => false,
            Activation::Auto => self.task == Task::CharLm,
        }
    }

    /// Input widths of the reparameterized layers, in order.
    pub fn hidden_layer_dims(&self) -> Vec<(usize, usize)> {
        let first_in = match self.task {
            Task::CharLm => self.context * self.embed_dim,
            _ => self.in_dim,
        };
        let last_out = match self.task {
            Task::Regression => self.out_dim,
            _ => self.hidden_dim,
        };
        (0..self.depth)
            .map(|i| {
                let m = if i == 0 { first_in } else { self.hidden_dim };
                let n = if i + 1 == self.depth { last_out } else { self.hidden_dim };
                (m, n)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PoetError::Config(m));
        self.neumann_order()?;
        if self.block_size == 0 {
            return bad("block_size must be >= 1".into());
        }
        if self.quantized && self.variant != Variant::Mem {
            return bad("quantized=true requires variant=mem".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if let Some(w) = self.weight_std {
            if !(w > 0.0) {
                return bad(format!("weight_std must be > 0, got {w}"));
            }
        }
        match self.task {
            Task::Regression | Task::CharLm => {
                self.schedule.validate()?;
                if self.depth == 0 || self.depth > 4 {
                    return bad(format!("depth must be in 1..=4, got {}", self.depth));
                }
                if self.optimizer == OptimizerKind::Poet {
                    for (m, n) in self.hidden_layer_dims() {
                        for d in [m, n] {
                            if d == 0 || d % self.block_size != 0 {
                                return bad(format!("layer dimension {d} is not divisible by block size {}", self.block_size));
                            }
                        }
                    }
                }
                if self.task == Task::CharLm {
                    if self.data.is_none() {
                        return bad("task=char-lm requires data=PATH".into());
                    }
                    if self.context == 0 || self.embed_dim == 0 {
                        return bad("context and embed_dim must be >= 1".into());
                    }
                }
                if self.log_every == 0 {
                    return bad("log_every must be >= 1".into());
                }
            }
            Task::Coverage => {
                if self.coverage_block == 0 || self.coverage_dim % self.coverage_block != 0 {
                    return bad(format!("coverage_dim {} is not divisible by coverage_block {}", self.coverage_dim, self.coverage_block));
                }
                if !(self.coverage_fraction > 0.0 && self.coverage_fraction <= 1.0) {
                    return bad("coverage_fraction must lie in (0, 1]".into());
                }
            }
            Task::SpectrumAudit => {
                if self.audit_dim == 0 || self.audit_dim > 256 || self.audit_dim % self.block_size != 0 {
                    return bad(format!("audit_dim must be <= 256 and divisible by block size {}", self.block_size));
                }
            }
            Task::Profile => {
                for d in [self.in_dim, self.out_dim] {
                    if d % self.block_size != 0 {
                        return bad(format!("profile dimension {d} is not divisible by block size {}", self.block_size));
                    }
                }
                if self.profile_reps == 0 {
                    return bad("profile_reps must be >= 1".into());
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_text() {
        let mut cfg = TrainConfig::default();
        cfg.set("task", "char-lm").unwrap();
        cfg.set("lr", "0.003").unwrap();
        cfg.set("weight_std", "0.25").unwrap();
        cfg.set("data", "/tmp/x.txt").unwrap();
        cfg.set("merge_mode", "exact").unwrap();
        let back = TrainConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = TrainConfig::from_text("lr=0.1\nbogus=3\n").unwrap_err();
        assert!(matches!(err, PoetError::Config(ref m) if m.contains("bogus") && m.contains("line 2")));
    }

    #[test]
    fn comments_and_dashes() {
        let cfg = TrainConfig::from_text("# header\nmerge-gap = 7 # trailing\n\n").unwrap();
        assert_eq!(cfg.schedule.merge_gap, 7);
    }

    #[test]
    fn validation() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.quantized = true;
        cfg.variant = Variant::Fast;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.in_dim = 30;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.task = Task::CharLm;
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::from_text("precision=16").is_err());
    }
}
