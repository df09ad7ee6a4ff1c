//! Thread-local instrumentation counters.
//!
//! Kernels record on the calling thread before dispatching any parallel work,
//! so counts are exact and independent of the schedule. Recording is a no-op
//! unless a [`measure`] scope is active on the current thread.

use std::cell::RefCell;
use std::collections::BTreeMap;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OpCounters {
    /// Products of two full (non-block) matrices.
    pub dense_matmuls: u64,
    /// `b x b` times `b x b` products (block stacks, orthogonal parameterization).
    pub block_matmuls: u64,
    /// `batch x b` (or `b x cols`) times `b x b` products when a block-diagonal
    /// factor is applied without assembling it.
    pub segment_matmuls: u64,
    /// Explicit permutation matrices built (oracle and reference paths only).
    pub permutation_matrices: u64,
    pub allocations: u64,
    pub allocated_bytes: u64,
    pub max_alloc_elems: u64,
    /// Allocation count keyed by `(rows, cols)`.
    pub alloc_shapes: BTreeMap<(usize, usize), u64>,
}

impl OpCounters {
    pub fn total_matmuls(&self) -> u64 {
        self.dense_matmuls + self.block_matmuls + self.segment_matmuls
    }

    pub fn allocs_of_shape(&self, rows: usize, cols: usize) -> u64 {
        self.alloc_shapes.get(&(rows, cols)).copied().unwrap_or(0)
    }

    pub fn merge(&mut self, other: &OpCounters) {
        self.dense_matmuls += other.dense_matmuls;
        self.block_matmuls += other.block_matmuls;
        self.segment_matmuls += other.segment_matmuls;
        self.permutation_matrices += other.permutation_matrices;
        self.allocations += other.allocations;
        self.allocated_bytes += other.allocated_bytes;
        self.max_alloc_elems = self.max_alloc_elems.max(other.max_alloc_elems);
        for (k, v) in &other.alloc_shapes {
            *self.alloc_shapes.entry(*k).or_default() += v;
        }
    }
}

thread_local! {
    static FRAMES: RefCell<Vec<OpCounters>> = const { RefCell::new(Vec::new()) };
}

/// Runs `f` and returns what it recorded. Scopes nest; inner counts are also
/// credited to the enclosing scope.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, OpCounters) {
    FRAMES.with(|fr| fr.borrow_mut().push(OpCounters::default()));
    let out = f();
    let counts = FRAMES.with(|fr| {
        let mut frames = fr.borrow_mut();
        let top = frames.pop().expect("measure frame");
        if let Some(parent) = frames.last_mut() {
            parent.merge(&top);
        }
        top
    });
    (out, counts)
}

#[inline]
fn with_top(f: impl FnOnce(&mut OpCounters)) {
    FRAMES.with(|fr| {
        if let Some(top) = fr.borrow_mut().last_mut() {
            f(top);
        }
    });
}

pub(crate) fn record_dense_matmul() {
    with_top(|c| c.dense_matmuls += 1);
}

pub(crate) fn record_block_matmuls(n: usize) {
    with_top(|c| c.block_matmuls += n as u64);
}

pub(crate) fn record_segment_matmuls(n: usize) {
    with_top(|c| c.segment_matmuls += n as u64);
}

pub(crate) fn record_permutation_matrix() {
    with_top(|c| c.permutation_matrices += 1);
}

pub(crate) fn record_alloc(rows: usize, cols: usize, bytes: usize) {
    with_top(|c| {
        c.allocations += 1;
        c.allocated_bytes += bytes as u64;
        c.max_alloc_elems = c.max_alloc_elems.max((rows * cols) as u64);
        *c.alloc_shapes.entry((rows, cols)).or_default() += 1;
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_scopes_credit_parent() {
        let ((_, inner), outer) = measure(|| {
            record_dense_matmul();
            measure(|| {
                record_block_matmuls(3);
                record_alloc(2, 3, 48);
            })
        });
        assert_eq!(inner.block_matmuls, 3);
        assert_eq!(inner.dense_matmuls, 0);
        assert_eq!(outer.dense_matmuls, 1);
        assert_eq!(outer.block_matmuls, 3);
        assert_eq!(outer.allocs_of_shape(2, 3), 1);
    }

    #[test]
    fn recording_outside_scope_is_noop() {
        record_dense_matmul();
        let (_, c) = measure(|| ());
        assert_eq!(c, OpCounters::default());
    }
}
