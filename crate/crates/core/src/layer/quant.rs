//! Per-row symmetric int8 storage for the frozen base weight.

use crate::dense::Matrix;
use crate::error::{PoetError, Result};
use crate::par;
use crate::permute::PermutationMap;
use crate::scalar::Scalar;
use crate::tape::counters;

/// `value = code * scale[row]`, `|code| <= 127`, zero point fixed at 0.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedMatrix<T> {
    rows: usize,
    cols: usize,
    codes: Vec<i8>,
    scales: Vec<T>,
}

impl<T: Scalar> QuantizedMatrix<T> {
    /// Absmax quantization per row; an all-zero row gets scale 1.
    pub fn quantize(w: &Matrix<T>) -> Self {
        let (rows, cols) = w.shape();
        let mut codes = vec![0i8; rows * cols];
        let mut scales = vec![T::one(); rows];
        let limit = T::from_f64(127.0);
        for r in 0..rows {
            let row = w.row(r);
            let absmax = row.iter().fold(T::zero(), |m, &x| m.max(x.abs()));
            if absmax == T::zero() {
                continue;
            }
            let scale = absmax / limit;
            scales[r] = scale;
            for (c, &x) in codes[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                let q = (x / scale).round().max(-limit).min(limit);
                *c = q.as_f64() as i8;
            }
        }
        QuantizedMatrix {
            rows,
            cols,
            codes,
            scales,
        }
    }

    pub fn from_parts(rows: usize, cols: usize, codes: Vec<i8>, scales: Vec<T>) -> Result<Self> {
        if codes.len() != rows * cols || scales.len() != rows {
            return Err(PoetError::shape("QuantizedMatrix::from_parts", format!("{rows}x{cols}")));
        }
        if codes.contains(&i8::MIN) {
            return Err(PoetError::Format("int8 code -128 is outside the symmetric range".into()));
        }
        Ok(QuantizedMatrix {
            rows,
            cols,
            codes,
            scales,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    pub fn scales(&self) -> &[T] {
        &self.scales
    }

    #[inline]
    pub fn value(&self, r: usize, c: usize) -> T {
        T::from_f64(self.codes[r * self.cols + c] as f64) * self.scales[r]
    }

    /// Full-precision copy (merge and audit paths only).
    pub fn dequantize(&self) -> Matrix<T> {
        let mut out = Matrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let s = self.scales[r];
            for (o, &c) in out.row_mut(r).iter_mut().zip(&self.codes[r * self.cols..(r + 1) * self.cols]) {
                *o = T::from_f64(c as f64) * s;
            }
        }
        out
    }

    /// Storage footprint in bytes.
    pub fn bytes(&self) -> usize {
        self.codes.len() + self.scales.len() * T::BYTES
    }

    /// Row/column gather of the codes; row scales move with their rows.
    pub fn premerged(&self, perm_in: &PermutationMap, perm_out: &PermutationMap) -> Result<Self> {
        if perm_in.len() != self.rows || perm_out.len() != self.cols {
            return Err(PoetError::shape("QuantizedMatrix::premerged", "permutation size"));
        }
        let mut codes = vec![0i8; self.codes.len()];
        let mut scales = vec![T::one(); self.rows];
        for i in 0..self.rows {
            let src = perm_in.forward()[i] as usize;
            scales[i] = self.scales[src];
            let srow = &self.codes[src * self.cols..(src + 1) * self.cols];
            for (o, &j) in codes[i * self.cols..(i + 1) * self.cols].iter_mut().zip(perm_out.forward()) {
                *o = srow[j as usize];
            }
        }
        Ok(QuantizedMatrix {
            rows: self.rows,
            cols: self.cols,
            codes,
            scales,
        })
    }

    /// `a * self`, dequantizing each weight element as it is consumed.
    pub fn left_mul(&self, a: &Matrix<T>) -> Result<Matrix<T>> {
        if a.cols() != self.rows {
            return Err(PoetError::shape("QuantizedMatrix::left_mul", format!("{:?} x {:?}", a.shape(), self.shape())));
        }
        counters::record_dense_matmul();
        let (k, n) = (self.rows, self.cols);
        let mut out = Matrix::zeros(a.rows(), n);
        if n == 0 {
            return Ok(out);
        }
        par::for_each_chunk_mut(par::default_schedule(), out.data_mut(), n, a.rows() * k * n, |r, orow| {
            let arow = a.row(r);
            for (p, &ap) in arow.iter().enumerate() {
                let s = self.scales[p];
                for (o, &code) in orow.iter_mut().zip(&self.codes[p * n..(p + 1) * n]) {
                    *o += ap * (T::from_f64(code as f64) * s);
                }
            }
        });
        Ok(out)
    }

    /// `d * self^T`, dequantizing on the fly.
    pub fn right_mul_transposed(&self, d: &Matrix<T>) -> Result<Matrix<T>> {
        if d.cols() != self.cols {
            return Err(PoetError::shape(
                "QuantizedMatrix::right_mul_transposed",
                format!("{:?} x {:?}^T", d.shape(), self.shape()),
            ));
        }
        counters::record_dense_matmul();
        let (k, n) = (self.rows, self.cols);
        let mut out = Matrix::zeros(d.rows(), k);
        if k == 0 {
            return Ok(out);
        }
        par::for_each_chunk_mut(par::default_schedule(), out.data_mut(), k, d.rows() * k * n, |r, orow| {
            let drow = d.row(r);
            for (p, o) in orow.iter_mut().enumerate() {
                let s = self.scales[p];
                let mut acc = T::zero();
                for (&dv, &code) in drow.iter().zip(&self.codes[p * n..(p + 1) * n]) {
                    acc += dv * (T::from_f64(code as f64) * s);
                }
                *o = acc;
            }
        });
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::{gaussian_matrix, matmul, matmul_nt, Rng};
    use crate::permute::{premerge_weight, sample_permutation};
    use crate::tape::counters::measure;

    #[test]
    fn zero_matrix_quantizes_exactly() {
        let z = Matrix::<f64>::zeros(3, 4);
        let q = QuantizedMatrix::quantize(&z);
        assert!(q.codes().iter().all(|&c| c == 0));
        assert!(q.scales().iter().all(|&s| s == 1.0));
        assert_eq!(q.dequantize(), z);
    }

    #[test]
    fn absmax_error_bound_per_row() {
        let w: Matrix<f64> = gaussian_matrix(16, 24, 1.0, &mut Rng::new(3)).unwrap();
        let q = QuantizedMatrix::quantize(&w);
        let d = q.dequantize();
        for r in 0..16 {
            let absmax = w.row(r).iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let err = w.row(r).iter().zip(d.row(r)).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err <= absmax / 127.0);
            assert!(err <= absmax / 254.0 * (1.0 + 1e-12));
            assert!(q.codes()[r * 24..(r + 1) * 24].iter().all(|&c| c != i8::MIN));
        }
    }

    #[test]
    fn products_match_dequantized_dense() {
        let mut rng = Rng::new(4);
        let w: Matrix<f64> = gaussian_matrix(8, 12, 1.0, &mut rng).unwrap();
        let q = QuantizedMatrix::quantize(&w);
        let d = q.dequantize();
        let a: Matrix<f64> = gaussian_matrix(5, 8, 1.0, &mut rng).unwrap();
        assert_eq!(q.left_mul(&a).unwrap(), matmul(&a, &d).unwrap());
        let g: Matrix<f64> = gaussian_matrix(5, 12, 1.0, &mut rng).unwrap();
        assert_eq!(q.right_mul_transposed(&g).unwrap(), matmul_nt(&g, &d).unwrap());
    }

    #[test]
    fn products_never_allocate_full_precision_weight() {
        let mut rng = Rng::new(5);
        let w: Matrix<f64> = gaussian_matrix(8, 12, 1.0, &mut rng).unwrap();
        let q = QuantizedMatrix::quantize(&w);
        let a: Matrix<f64> = gaussian_matrix(5, 8, 1.0, &mut rng).unwrap();
        let (v, c) = measure(|| q.left_mul(&a).unwrap());
        let (_, c2) = measure(|| q.right_mul_transposed(&v).unwrap());
        assert_eq!(c.allocs_of_shape(8, 12) + c2.allocs_of_shape(8, 12), 0);
        assert_eq!(c.allocations + c2.allocations, 2);
    }

    #[test]
    fn premerged_codes_match_premerged_weight() {
        let mut rng = Rng::new(6);
        let w: Matrix<f64> = gaussian_matrix(8, 12, 1.0, &mut rng).unwrap();
        let pi = sample_permutation(8, &mut rng).unwrap();
        let po = sample_permutation(12, &mut rng).unwrap();
        let q = QuantizedMatrix::quantize(&w);
        let direct = QuantizedMatrix::quantize(&premerge_weight(&w, &pi, &po).unwrap());
        assert_eq!(q.premerged(&pi, &po).unwrap(), direct);
    }
}
