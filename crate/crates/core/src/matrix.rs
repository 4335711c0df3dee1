//! Dense row-major f32 matrices and the handful of kernels everything else
//! is built from. Reductions (dot products, row sums) accumulate in f64 with
//! a fixed summation order, so identical inputs give bit-identical outputs.

use crate::flops;
use crate::rng;
use crate::{Error, Result};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "matrix data length {} != {rows}x{cols}",
            data.len()
        );
        Matrix { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(rows: usize, cols: usize, std: f32, rng: &mut ChaCha8Rng) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(rng::normal(rng) * std);
        }
        Matrix { rows, cols, data }
    }

    /// Kaiming-style init: N(0, 1/sqrt(fan_in)) for a fan_in x fan_out matrix.
    pub fn kaiming(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::randn(fan_in, fan_out, 1.0 / (fan_in as f32).sqrt(), rng)
    }

    pub fn filled(rows: usize, cols: usize, v: f32) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn scale(&self, c: f32) -> Matrix {
        let mut out = self.clone();
        for v in &mut out.data {
            *v *= c;
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        let mut out = self.clone();
        for (o, &v) in out.data.iter_mut().zip(&other.data) {
            *o += v;
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "sub",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        let mut out = self.clone();
        for (o, &v) in out.data.iter_mut().zip(&other.data) {
            *o -= v;
        }
        Ok(out)
    }

    /// Standard product, f64 accumulation per output element.
    pub fn matmul(&self, b: &Matrix) -> Result<Matrix> {
        if self.cols != b.rows {
            return Err(Error::shape(
                "matmul",
                format!(
                    "{}x{} times {}x{}",
                    self.rows, self.cols, b.rows, b.cols
                ),
            ));
        }
        flops::add_matmul(self.rows, b.cols, self.cols);
        let n = b.cols;
        let mut out = vec![0.0f32; self.rows * n];
        let mut acc = vec![0.0f64; n];
        for i in 0..self.rows {
            acc.iter_mut().for_each(|v| *v = 0.0);
            let arow = self.row(i);
            for (p, &ap) in arow.iter().enumerate() {
                let av = ap as f64;
                let brow = &b.data[p * n..(p + 1) * n];
                for (accv, &bv) in acc.iter_mut().zip(brow) {
                    *accv += av * bv as f64;
                }
            }
            for (o, &s) in out[i * n..(i + 1) * n].iter_mut().zip(acc.iter()) {
                *o = s as f32;
            }
        }
        Ok(Matrix {
            rows: self.rows,
            cols: n,
            data: out,
        })
    }

    /// self * other^T. Both operands are read along contiguous rows.
    pub fn matmul_nt(&self, b: &Matrix) -> Result<Matrix> {
        if self.cols != b.cols {
            return Err(Error::shape(
                "matmul_nt",
                format!(
                    "{}x{} times ({}x{})^T",
                    self.rows, self.cols, b.rows, b.cols
                ),
            ));
        }
        flops::add_matmul(self.rows, b.rows, self.cols);
        let mut out = vec![0.0f32; self.rows * b.rows];
        for i in 0..self.rows {
            let arow = self.row(i);
            for j in 0..b.rows {
                out[i * b.rows + j] = dot_f64(arow, b.row(j)) as f32;
            }
        }
        Ok(Matrix {
            rows: self.rows,
            cols: b.rows,
            data: out,
        })
    }

    /// self^T * other, accumulated in f64 scratch.
    pub fn matmul_tn(&self, b: &Matrix) -> Result<Matrix> {
        if self.rows != b.rows {
            return Err(Error::shape(
                "matmul_tn",
                format!(
                    "({}x{})^T times {}x{}",
                    self.rows, self.cols, b.rows, b.cols
                ),
            ));
        }
        flops::add_matmul(self.cols, b.cols, self.rows);
        let (k, n) = (self.cols, b.cols);
        let mut acc = vec![0.0f64; k * n];
        for i in 0..self.rows {
            let arow = self.row(i);
            let brow = b.row(i);
            for (p, &ap) in arow.iter().enumerate() {
                let av = ap as f64;
                let accrow = &mut acc[p * n..(p + 1) * n];
                for (a, &bv) in accrow.iter_mut().zip(brow) {
                    *a += av * bv as f64;
                }
            }
        }
        Ok(Matrix {
            rows: k,
            cols: n,
            data: acc.iter().map(|&v| v as f32).collect(),
        })
    }
}

/// Dot product with f64 accumulation, fixed left-to-right order.
pub fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        s += x as f64 * y as f64;
    }
    s
}

/// y += c * x
pub fn axpy(y: &mut [f32], c: f32, x: &[f32]) {
    debug_assert_eq!(y.len(), x.len());
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += c * xv;
    }
}

/// Max |a-b| over all elements, normalized by the largest magnitude present.
/// Returns 0 for two all-zero inputs.
pub fn max_rel_err(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "max_rel_err length mismatch");
    let mut scale = 0.0f64;
    let mut diff = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        scale = scale.max(x.abs() as f64).max(y.abs() as f64);
        diff = diff.max((x as f64 - y as f64).abs());
    }
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Batch of equally long sequences of feature vectors, row-major
/// [batch, length, dim].
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceTensor {
    batch: usize,
    length: usize,
    dim: usize,
    data: Vec<f32>,
}

impl SequenceTensor {
    pub fn zeros(batch: usize, length: usize, dim: usize) -> Self {
        SequenceTensor {
            batch,
            length,
            dim,
            data: vec![0.0; batch * length * dim],
        }
    }

    pub fn from_vec(batch: usize, length: usize, dim: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), batch * length * dim);
        SequenceTensor {
            batch,
            length,
            dim,
            data,
        }
    }

    pub fn randn(
        batch: usize,
        length: usize,
        dim: usize,
        std: f32,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let data = (0..batch * length * dim)
            .map(|_| rng::normal(rng) * std)
            .collect();
        SequenceTensor {
            batch,
            length,
            dim,
            data,
        }
    }

    /// Wrap a single sequence (batch of one).
    pub fn single(m: &Matrix) -> Self {
        SequenceTensor {
            batch: 1,
            length: m.rows(),
            dim: m.cols(),
            data: m.data().to_vec(),
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn seq(&self, b: usize) -> Matrix {
        let stride = self.length * self.dim;
        Matrix::from_vec(
            self.length,
            self.dim,
            self.data[b * stride..(b + 1) * stride].to_vec(),
        )
    }

    pub fn set_seq(&mut self, b: usize, m: &Matrix) {
        assert_eq!((m.rows(), m.cols()), (self.length, self.dim));
        let stride = self.length * self.dim;
        self.data[b * stride..(b + 1) * stride].copy_from_slice(m.data());
    }

    pub fn from_seqs(seqs: &[Matrix]) -> Self {
        assert!(!seqs.is_empty());
        let (length, dim) = seqs[0].shape();
        let mut out = SequenceTensor::zeros(seqs.len(), length, dim);
        for (b, s) in seqs.iter().enumerate() {
            out.set_seq(b, s);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, Stream};

    #[test]
    fn matmul_identity() {
        let i2 = Matrix::from_fn(2, 2, |r, c| if r == c { 1.0 } else { 0.0 });
        let m = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let p = i2.matmul(&m).unwrap();
        assert_eq!(p.data(), m.data());
    }

    #[test]
    fn matmul_unit_selector() {
        let a = Matrix::from_vec(1, 2, vec![1.0, 0.0]);
        let b = Matrix::from_vec(2, 1, vec![2.0, 3.0]);
        let p = a.matmul(&b).unwrap();
        assert_eq!(p.data(), &[2.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = seeded(11, Stream::WeightInit);
        let a = Matrix::randn(3, 4, 1.0, &mut rng);
        let b = Matrix::randn(4, 2, 1.0, &mut rng);
        let p = a.matmul(&b).unwrap();
        // independent brute-force oracle in f64
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0f64;
                for k in 0..4 {
                    s += a.get(i, k) as f64 * b.get(k, j) as f64;
                }
                let got = p.get(i, j) as f64;
                let rel = (got - s).abs() / s.abs().max(1e-12);
                assert!(rel < 1e-6, "({i},{j}): got {got}, oracle {s}");
            }
        }
    }

    #[test]
    fn matmul_dimension_mismatch_errors() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn matmul_variants_agree_with_explicit_transpose() {
        let mut rng = seeded(5, Stream::WeightInit);
        let a = Matrix::randn(4, 6, 1.0, &mut rng);
        let b = Matrix::randn(3, 6, 1.0, &mut rng);
        let nt = a.matmul_nt(&b).unwrap();
        let via_t = a.matmul(&b.transpose()).unwrap();
        assert!(max_rel_err(nt.data(), via_t.data()) < 1e-6);

        let c = Matrix::randn(4, 5, 1.0, &mut rng);
        let tn = a.matmul_tn(&c).unwrap();
        let via_t2 = a.transpose().matmul(&c).unwrap();
        assert!(max_rel_err(tn.data(), via_t2.data()) < 1e-6);
    }

    #[test]
    fn matmul_associativity_on_random_triples() {
        let mut rng = seeded(17, Stream::WeightInit);
        for _ in 0..20 {
            let a = Matrix::randn(5, 4, 1.0, &mut rng);
            let b = Matrix::randn(4, 6, 1.0, &mut rng);
            let c = Matrix::randn(6, 3, 1.0, &mut rng);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            assert!(
                max_rel_err(left.data(), right.data()) < 1e-4,
                "associativity violated"
            );
        }
    }

    #[test]
    fn sequence_tensor_roundtrip() {
        let mut rng = seeded(2, Stream::WeightInit);
        let t = SequenceTensor::randn(3, 4, 5, 1.0, &mut rng);
        let s1 = t.seq(1);
        let mut t2 = t.clone();
        t2.set_seq(1, &s1);
        assert_eq!(t, t2);
    }

    #[test]
    fn flop_counter_reports_matmul_cost() {
        crate::flops::reset();
        crate::flops::set_enabled(true);
        let a = Matrix::zeros(3, 4);
        let b = Matrix::zeros(4, 2);
        let _ = a.matmul(&b).unwrap();
        crate::flops::set_enabled(false);
        assert_eq!(crate::flops::total(), 2 * 3 * 2 * 4);
    }
}
