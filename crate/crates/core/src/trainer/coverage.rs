//! Update-coverage simulation for block-stochastic and fully-stochastic factors.
//!
//! Each step, a left factor updates every entry in the rows it touches and a
//! right factor every entry in the columns it touches; each side counts as
//! one update. The block-stochastic factor `Psi^T G Psi` (block size >= 2)
//! touches all rows whatever the permutation. The fully-stochastic mode
//! draws a random `fraction` of rows and of columns per step.

use std::path::Path;

use crate::dense::Rng;
use crate::error::{PoetError, Result};
use crate::permute::sample_permutation;

use super::config::{CoverageMode, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoverageKind {
    BlockStochastic,
    FullyStochastic,
}

impl CoverageKind {
    pub fn name(self) -> &'static str {
        match self {
            CoverageKind::BlockStochastic => "block",
            CoverageKind::FullyStochastic => "fully",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoverageResult {
    pub kind: CoverageKind,
    pub dim: usize,
    pub steps: u64,
    /// Row-major `dim x dim` update counts.
    pub counts: Vec<u32>,
}

impl CoverageResult {
    pub fn min(&self) -> u32 {
        self.counts.iter().copied().min().unwrap_or(0)
    }

    pub fn max(&self) -> u32 {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    pub fn mean(&self) -> f64 {
        self.counts.iter().map(|&c| c as f64).sum::<f64>() / self.counts.len() as f64
    }

    /// Population variance of the counts.
    pub fn variance(&self) -> f64 {
        let mu = self.mean();
        self.counts.iter().map(|&c| (c as f64 - mu).powi(2)).sum::<f64>() / self.counts.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,col,count\n");
        for r in 0..self.dim {
            for c in 0..self.dim {
                s.push_str(&format!("{r},{c},{}\n", self.counts[r * self.dim + c]));
            }
        }
        s
    }
}

/// Rows touched by one block-stochastic factor: the blocks of `G` laid over a
/// fresh permutation. Blocks of size 1 are identically 1 and touch nothing.
fn block_rows(dim: usize, b: usize, rng: &mut Rng) -> Result<Vec<bool>> {
    let pi = sample_permutation(dim, rng)?;
    let mut touched = vec![false; dim];
    if b >= 2 {
        for k in 0..dim / b {
            for t in 0..b {
                // row pi(i) of W sits at position i of the block-diagonal factor
                touched[pi.forward()[k * b + t] as usize] = true;
            }
        }
    }
    Ok(touched)
}

fn sampled_rows(dim: usize, fraction: f64, rng: &mut Rng) -> Result<Vec<bool>> {
    let k = ((dim as f64 * fraction).round() as usize).clamp(1, dim);
    let pi = sample_permutation(dim, rng)?;
    let mut touched = vec![false; dim];
    for &i in &pi.forward()[..k] {
        touched[i as usize] = true;
    }
    Ok(touched)
}

pub fn simulate_coverage(kind: CoverageKind, dim: usize, b: usize, steps: u64, fraction: f64, rng: &mut Rng) -> Result<CoverageResult> {
    if dim == 0 || b == 0 || dim % b != 0 {
        return Err(PoetError::Config(format!("coverage dim {dim} is not divisible by block size {b}")));
    }
    let mut counts = vec![0u32; dim * dim];
    for _ in 0..steps {
        let (rows, cols) = match kind {
            CoverageKind::BlockStochastic => (block_rows(dim, b, rng)?, block_rows(dim, b, rng)?),
            CoverageKind::FullyStochastic => (sampled_rows(dim, fraction, rng)?, sampled_rows(dim, fraction, rng)?),
        };
        for r in 0..dim {
            for c in 0..dim {
                counts[r * dim + c] += rows[r] as u32 + cols[c] as u32;
            }
        }
    }
    Ok(CoverageResult { kind, dim, steps, counts })
}

/// Runs the configured modes and writes `coverage_<mode>.csv` into `out`.
pub fn run_coverage(cfg: &TrainConfig) -> Result<Vec<CoverageResult>> {
    cfg.validate()?;
    let kinds = match cfg.coverage_mode {
        CoverageMode::Block => vec![CoverageKind::BlockStochastic],
        CoverageMode::Fully => vec![CoverageKind::FullyStochastic],
        CoverageMode::Both => vec![CoverageKind::BlockStochastic, CoverageKind::FullyStochastic],
    };
    std::fs::create_dir_all(&cfg.out).map_err(|e| PoetError::io(cfg.out.display().to_string(), e))?;
    let mut rng = Rng::new(cfg.seed);
    let mut out = Vec::new();
    for kind in kinds {
        let res = simulate_coverage(kind, cfg.coverage_dim, cfg.coverage_block, cfg.coverage_steps, cfg.coverage_fraction, &mut rng)?;
        let path = cfg.out.join(format!("coverage_{}.csv", kind.name()));
        write(&path, &res.to_csv())?;
        out.push(res);
    }
    Ok(out)
}

pub fn coverage_summary(results: &[CoverageResult], fraction: f64) -> String {
    let mut s = String::from("mode,dim,steps,min,max,mean,variance\n");
    for r in results {
        s.push_str(&format!("{},{},{},{},{},{:.4},{:.4}\n", r.kind.name(), r.dim, r.steps, r.min(), r.max(), r.mean(), r.variance()));
    }
    if results.iter().any(|r| r.kind == CoverageKind::FullyStochastic) {
        s.push_str(&format!("# fully-stochastic mode is a simulation: {fraction} of rows and of columns sampled per step\n"));
    }
    s
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| PoetError::io(path.display().to_string(), e))
}
