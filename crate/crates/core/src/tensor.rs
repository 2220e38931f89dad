//! Dense row-major matrices and 4-D kernel tensors.
//!
//! Everything is computed in `f64`. Chain products multiply several weight
//! matrices in a row and lose too much precision in single precision; the
//! archive layer stores `f32` and widens on read.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// A dense `rows x cols` matrix stored row-major.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(6) {
            write!(f, "\n  {:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "\n]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major data. Rejects length mismatches and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Shape(format!(
                "non-finite entry {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    /// Uniform entries in `[-scale, scale]`.
    pub fn random_uniform<R: Rng + ?Sized>(
        rows: usize,
        cols: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-scale..=scale))
            .collect();
        Matrix { rows, cols, data }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
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

    /// Standard matrix product `self * other` (i-k-j loop order).
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * self^T`, computed on the upper triangle and mirrored so the
    /// result is exactly symmetric.
    pub fn gram(&self) -> Matrix {
        let n = self.rows;
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            let ri = self.row(i);
            for j in i..n {
                let dot: f64 = ri.iter().zip(self.row(j)).map(|(a, b)| a * b).sum();
                out.data[i * n + j] = dot;
                out.data[j * n + i] = dot;
            }
        }
        out
    }

    /// Row-major reinterpretation with a new shape; the flat data is untouched.
    pub fn reshape(self, rows: usize, cols: usize) -> Result<Matrix> {
        if rows * cols != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {}x{} ({} values) into {rows}x{cols}",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Ok(Matrix {
            rows,
            cols,
            data: self.data,
        })
    }

    /// Row-major reinterpretation as a 4-D tensor.
    pub fn reshape_to_tensor(self, dims: [usize; 4]) -> Result<Tensor4> {
        Tensor4::new(dims, self.data)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "cannot subtract {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Largest absolute elementwise difference; `None` if shapes differ.
    pub fn max_abs_diff(&self, other: &Matrix) -> Option<f64> {
        if self.shape() != other.shape() {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        )
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        assert!(
            r < self.rows && c < self.cols,
            "index ({r},{c}) out of bounds"
        );
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        assert!(
            r < self.rows && c < self.cols,
            "index ({r},{c}) out of bounds"
        );
        &mut self.data[r * self.cols + c]
    }
}

/// A convolution kernel tensor with dims `(c_in, c_out, h, w)`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let count: usize = dims.iter().product();
        if data.len() != count {
            return Err(Error::Shape(format!(
                "tensor {dims:?} needs {count} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("non-finite tensor entry".into()));
        }
        Ok(Tensor4 { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Tensor4 {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn random_uniform<R: Rng + ?Sized>(dims: [usize; 4], scale: f64, rng: &mut R) -> Self {
        let data = (0..dims.iter().product::<usize>())
            .map(|_| rng.gen_range(-scale..=scale))
            .collect();
        Tensor4 { dims, data }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn c_in(&self) -> usize {
        self.dims[0]
    }

    pub fn c_out(&self) -> usize {
        self.dims[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.dims[2], self.dims[3])
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn offset(&self, i: usize, j: usize, a: usize, b: usize) -> usize {
        ((i * self.dims[1] + j) * self.dims[2] + a) * self.dims[3] + b
    }

    pub fn get(&self, i: usize, j: usize, a: usize, b: usize) -> f64 {
        self.data[self.offset(i, j, a, b)]
    }

    /// Row-major reinterpretation as a matrix.
    pub fn reshape(self, rows: usize, cols: usize) -> Result<Matrix> {
        if rows * cols != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape tensor {:?} into {rows}x{cols}",
                self.dims
            )));
        }
        Matrix::new(rows, cols, self.data)
    }

    /// Patch layout `(c_in*h*w) x c_out`: row `(i, a, b)`, column `j`.
    /// This is the matrix a stride-equals-kernel convolution applies to each
    /// flattened input patch.
    pub fn to_patch_matrix(&self) -> Matrix {
        let [ci, co, h, w] = self.dims;
        let mut out = Matrix::zeros(ci * h * w, co);
        for i in 0..ci {
            for j in 0..co {
                for a in 0..h {
                    for b in 0..w {
                        out.data[((i * h + a) * w + b) * co + j] = self.get(i, j, a, b);
                    }
                }
            }
        }
        out
    }

    /// Inverse of [`Tensor4::to_patch_matrix`].
    pub fn from_patch_matrix(m: &Matrix, dims: [usize; 4]) -> Result<Tensor4> {
        let [ci, co, h, w] = dims;
        if m.shape() != (ci * h * w, co) {
            return Err(Error::Shape(format!(
                "patch matrix {}x{} does not match tensor {dims:?}",
                m.rows, m.cols
            )));
        }
        let mut out = Tensor4::zeros(dims);
        for i in 0..ci {
            for j in 0..co {
                for a in 0..h {
                    for b in 0..w {
                        let off = out.offset(i, j, a, b);
                        out.data[off] = m.data[((i * h + a) * w + b) * co + j];
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Which axis of a matrix a permutation reorders.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Columns,
    Rows,
}

/// A permutation of `0..size`. As a matrix, `Q[perm[j], j] = 1`, so
/// `M * Q` takes column `perm[j]` of `M` into column `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PermutationMatrix {
    perm: Vec<usize>,
}

impl PermutationMatrix {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; perm.len()];
        for &p in &perm {
            if p >= perm.len() || seen[p] {
                return Err(Error::Shape(format!("{perm:?} is not a permutation")));
            }
            seen[p] = true;
        }
        Ok(PermutationMatrix { perm })
    }

    pub fn identity(n: usize) -> Self {
        PermutationMatrix {
            perm: (0..n).collect(),
        }
    }

    pub fn swap(n: usize, a: usize, b: usize) -> Self {
        let mut p = PermutationMatrix::identity(n);
        p.perm.swap(a, b);
        p
    }

    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        PermutationMatrix { perm }
    }

    pub fn size(&self) -> usize {
        self.perm.len()
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn is_identity(&self) -> bool {
        self.perm.iter().enumerate().all(|(i, &p)| i == p)
    }

    pub fn as_matrix(&self) -> Matrix {
        let n = self.perm.len();
        let mut m = Matrix::zeros(n, n);
        for (j, &p) in self.perm.iter().enumerate() {
            m.data[p * n + j] = 1.0;
        }
        m
    }
}

/// Reorders columns (`m * Q`) or rows (`Q^T * m`) of `m`.
pub fn apply_permutation(m: &Matrix, q: &PermutationMatrix, side: Side) -> Result<Matrix> {
    let dim = match side {
        Side::Columns => m.cols,
        Side::Rows => m.rows,
    };
    if q.size() != dim {
        return Err(Error::Shape(format!(
            "permutation of size {} cannot reorder {side:?} of a {}x{} matrix",
            q.size(),
            m.rows,
            m.cols
        )));
    }
    let mut out = Matrix::zeros(m.rows, m.cols);
    match side {
        Side::Columns => {
            for r in 0..m.rows {
                let src = m.row(r);
                for (dst, &p) in out.row_mut(r).iter_mut().zip(&q.perm) {
                    *dst = src[p];
                }
            }
        }
        Side::Rows => {
            for (r, &p) in q.perm.iter().enumerate() {
                out.row_mut(r).copy_from_slice(m.row(p));
            }
        }
    }
    Ok(out)
}

/// Reorders axis 1 (`c_out`) or axis 0 (`c_in`) of a kernel tensor, the conv
/// counterpart of [`apply_permutation`].
pub fn permute_channels(t: &Tensor4, q: &PermutationMatrix, side: Side) -> Result<Tensor4> {
    let [ci, co, h, w] = t.dims;
    let dim = match side {
        Side::Columns => co,
        Side::Rows => ci,
    };
    if q.size() != dim {
        return Err(Error::Shape(format!(
            "permutation of size {} cannot reorder channels of {:?}",
            q.size(),
            t.dims
        )));
    }
    let mut out = Tensor4::zeros(t.dims);
    for i in 0..ci {
        for j in 0..co {
            let (si, sj) = match side {
                Side::Columns => (i, q.perm[j]),
                Side::Rows => (q.perm[i], j),
            };
            for a in 0..h {
                for b in 0..w {
                    let off = out.offset(i, j, a, b);
                    out.data[off] = t.get(si, sj, a, b);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Vec<f64> {
        let mut out = vec![0.0; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a[(i, k)] * b[(k, j)];
                }
                out[i * b.cols() + j] = s;
            }
        }
        out
    }

    #[test]
    fn identity_times_a_is_a() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Matrix::random_uniform(3, 3, 1.0, &mut rng);
        assert_eq!(Matrix::identity(3).matmul(&a).unwrap(), a);
    }

    #[test]
    fn column_swap_by_permutation() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let q = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let expected = Matrix::from_rows(&[vec![2.0, 1.0], vec![4.0, 3.0]]).unwrap();
        assert_eq!(a.matmul(&q).unwrap(), expected);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Matrix::random_uniform(5, 7, 2.0, &mut rng);
        let b = Matrix::random_uniform(7, 3, 2.0, &mut rng);
        let got = a.matmul(&b).unwrap();
        for (g, e) in got.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((g - e).abs() <= 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = Matrix::zeros(2, 3)
            .matmul(&Matrix::zeros(4, 2))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("4x2"), "{msg}");
    }

    #[test]
    fn new_rejects_nan_and_bad_length() {
        assert!(Matrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn identity_permutation_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Matrix::random_uniform(4, 5, 1.0, &mut rng);
        let q = PermutationMatrix::identity(5);
        assert_eq!(apply_permutation(&m, &q, Side::Columns).unwrap(), m);
        let q = PermutationMatrix::identity(4);
        assert_eq!(apply_permutation(&m, &q, Side::Rows).unwrap(), m);
    }

    #[test]
    fn figure_one_column_swap() {
        let w1 = Matrix::from_rows(&[vec![0.8, 0.1, 0.8], vec![0.9, 0.7, 0.2]]).unwrap();
        let swapped =
            apply_permutation(&w1, &PermutationMatrix::swap(3, 0, 1), Side::Columns).unwrap();
        let expected = Matrix::from_rows(&[vec![0.1, 0.8, 0.8], vec![0.7, 0.9, 0.2]]).unwrap();
        assert_eq!(swapped, expected);
    }

    #[test]
    fn permutation_equals_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 1..8 {
            let m = Matrix::random_uniform(3, n, 1.0, &mut rng);
            let q = PermutationMatrix::random(n, &mut rng);
            assert_eq!(
                apply_permutation(&m, &q, Side::Columns).unwrap(),
                m.matmul(&q.as_matrix()).unwrap()
            );
            let r = Matrix::random_uniform(n, 3, 1.0, &mut rng);
            assert_eq!(
                apply_permutation(&r, &q, Side::Rows).unwrap(),
                q.as_matrix().transpose().matmul(&r).unwrap()
            );
        }
    }

    #[test]
    fn permutation_size_mismatch() {
        let m = Matrix::zeros(2, 3);
        assert!(apply_permutation(&m, &PermutationMatrix::identity(2), Side::Columns).is_err());
        assert!(apply_permutation(&m, &PermutationMatrix::identity(3), Side::Rows).is_err());
        assert!(PermutationMatrix::new(vec![0, 0, 1]).is_err());
    }

    #[test]
    fn reshape_collapses_unit_kernel() {
        let data: Vec<f64> = (0..6).map(f64::from).collect();
        let t = Tensor4::new([2, 3, 1, 1], data.clone()).unwrap();
        let m = t.reshape(2, 3).unwrap();
        assert_eq!(m.shape(), (2, 3));
        assert_eq!(m.data(), &data[..]);
    }

    #[test]
    fn reshape_conv_kernel_to_patch_rows() {
        let t = Tensor4::new([2, 4, 3, 3], (0..72).map(f64::from).collect()).unwrap();
        let m = t.clone().reshape(18, 4).unwrap();
        assert_eq!(m.shape(), (18, 4));
        let back = m.reshape_to_tensor([2, 4, 3, 3]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn reshape_count_mismatch() {
        assert!(Tensor4::zeros([2, 2, 2, 2]).reshape(3, 5).is_err());
        assert!(Matrix::zeros(2, 3).reshape(4, 2).is_err());
    }

    #[test]
    fn patch_matrix_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = Tensor4::random_uniform([3, 2, 2, 3], 1.0, &mut rng);
        let p = t.to_patch_matrix();
        assert_eq!(p.shape(), (18, 2));
        assert_eq!(p[((2 + 1) * 3 + 2, 1)], t.get(1, 1, 1, 2));
        assert_eq!(Tensor4::from_patch_matrix(&p, t.dims()).unwrap(), t);
    }

    #[test]
    fn gram_is_exactly_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = Matrix::random_uniform(6, 4, 3.0, &mut rng);
        let g = b.gram();
        assert_eq!(g, g.transpose());
        let reference = b.matmul(&b.transpose()).unwrap();
        assert!(g.max_abs_diff(&reference).unwrap() < 1e-12);
    }
}
