//! Byte-level corpus and synthetic regression data.

use std::path::Path;
use std::sync::Arc;

use crate::dense::{gaussian_matrix, matmul, Matrix, Rng};
use crate::error::{PoetError, Result};
use crate::scalar::Scalar;
use crate::tape::Batch;

pub const VOCAB: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub train: Vec<u8>,
    pub val: Vec<u8>,
}

/// Reads a file as bytes; the last 10% is the validation split.
pub fn load_text_corpus(path: &Path) -> Result<Corpus> {
    let bytes = std::fs::read(path).map_err(|e| PoetError::io(path.display().to_string(), e))?;
    if bytes.is_empty() {
        return Err(PoetError::Format(format!("corpus {} is empty", path.display())));
    }
    Ok(split_corpus(bytes))
}

pub fn split_corpus(mut bytes: Vec<u8>) -> Corpus {
    let cut = bytes.len() - bytes.len() / 10;
    let val = bytes.split_off(cut);
    Corpus { train: bytes, val }
}

/// Empirical entropy of the byte distribution, in nats.
pub fn unigram_entropy(tokens: &[u8]) -> f64 {
    let mut counts = [0u64; VOCAB];
    for &t in tokens {
        counts[t as usize] += 1;
    }
    let n = tokens.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Random windows of `context` bytes with the following byte as target.
pub fn sample_token_batch<T: Scalar>(tokens: &[u8], context: usize, batch: usize, rng: &mut Rng) -> Result<Batch<T>> {
    if tokens.len() <= context {
        return Err(PoetError::Format(format!("split of {} bytes is shorter than context {context} + 1", tokens.len())));
    }
    let starts: Vec<usize> = (0..batch).map(|_| rng.below(tokens.len() - context)).collect();
    Ok(windows(tokens, context, &starts))
}

/// Evenly spaced windows covering the split, for deterministic evaluation.
pub fn eval_token_batch<T: Scalar>(tokens: &[u8], context: usize, max_examples: usize) -> Result<Batch<T>> {
    if tokens.len() <= context {
        return Err(PoetError::Format(format!("split of {} bytes is shorter than context {context} + 1", tokens.len())));
    }
    let avail = tokens.len() - context;
    let n = avail.min(max_examples.max(1));
    let starts: Vec<usize> = (0..n).map(|i| i * avail / n).collect();
    Ok(windows(tokens, context, &starts))
}

fn windows<T: Scalar>(tokens: &[u8], context: usize, starts: &[usize]) -> Batch<T> {
    let mut ids = Vec::with_capacity(starts.len() * context);
    let mut targets = Vec::with_capacity(starts.len());
    for &s in starts {
        ids.extend(tokens[s..s + context].iter().map(|&t| t as u32));
        targets.push(tokens[s + context] as u32);
    }
    Batch::Tokens { ids, targets }
}

/// Gaussian inputs mapped through a fixed teacher matrix.
pub fn regression_batch<T: Scalar>(teacher: &Matrix<T>, batch: usize, rng: &mut Rng) -> Result<Batch<T>> {
    let x = gaussian_matrix(batch, teacher.rows(), 1.0, rng)?;
    let y = matmul(&x, teacher)?;
    Ok(Batch::Regression { x: Arc::new(x), y })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_ninety_ten() {
        let c = split_corpus(vec![7u8; 1000]);
        assert_eq!((c.train.len(), c.val.len()), (900, 100));
        let c = split_corpus(vec![1u8; 5]);
        assert_eq!(c.train.len() + c.val.len(), 5);
    }

    #[test]
    fn entropy_by_counting() {
        assert_eq!(unigram_entropy(b"aaaa"), 0.0);
        assert!((unigram_entropy(b"abab") - std::f64::consts::LN_2).abs() <= 1e-15);
        let h = unigram_entropy(b"aab");
        let want = -(2.0 / 3.0f64) * (2.0 / 3.0f64).ln() - (1.0 / 3.0f64) * (1.0 / 3.0f64).ln();
        assert!((h - want).abs() <= 1e-15);
    }

    #[test]
    fn batches_are_reproducible() {
        let text: Vec<u8> = (0..500u32).map(|i| (i * 7 % 251) as u8).collect();
        let a: Batch<f32> = sample_token_batch(&text, 4, 16, &mut Rng::new(3)).unwrap();
        let b: Batch<f32> = sample_token_batch(&text, 4, 16, &mut Rng::new(3)).unwrap();
        match (a, b) {
            (Batch::Tokens { ids: i1, targets: t1 }, Batch::Tokens { ids: i2, targets: t2 }) => {
                assert_eq!(i1, i2);
                assert_eq!(t1, t2);
                assert_eq!(i1.len(), 64);
                // target is the byte after each window
                for (w, t) in i1.chunks(4).zip(&t1) {
                    let start = text.windows(4).position(|x| x.iter().map(|&v| v as u32).eq(w.iter().copied())).unwrap();
                    assert_eq!(text[start + 4] as u32, *t);
                }
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn short_split_errors() {
        assert!(eval_token_batch::<f32>(b"abc", 3, 10).is_err());
        assert!(load_text_corpus(Path::new("/nonexistent/corpus.txt")).is_err());
    }
}
