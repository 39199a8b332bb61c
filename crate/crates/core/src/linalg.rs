//! Dense `f64` matrix and vector kernel.
//!
//! Storage is row-major. Constructors reject NaN and infinite entries; results
//! of arithmetic are not re-validated, callers that can diverge check
//! [`DenseVector::is_finite`] themselves.
//!
//! The pseudoinverse goes through a singular value decomposition. Singular
//! values `σ_i <= max(rows, cols) * ε * σ_max` are treated as zero.

use std::fmt;
use std::ops::{Index, Range};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Iteration cap handed to the SVD; exceeding it is reported as non-convergence.
const SVD_MAX_ITERATIONS: usize = 10_000;

#[derive(Clone, PartialEq)]
pub struct DenseVector {
    data: Vec<f64>,
}

impl DenseVector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if let Some(index) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: "DenseVector",
                index,
            });
        }
        Ok(Self { data })
    }

    /// Wraps results of internal arithmetic without the finiteness scan.
    pub(crate) fn from_vec_unchecked(data: Vec<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![0.0; len],
        }
    }

    pub fn ones(len: usize) -> Self {
        Self {
            data: vec![1.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn dot(&self, other: &DenseVector) -> f64 {
        assert_eq!(self.len(), other.len(), "dot: length mismatch");
        dot(&self.data, &other.data)
    }

    pub fn norm_squared(&self) -> f64 {
        dot(&self.data, &self.data)
    }

    pub fn norm(&self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn sub(&self, other: &DenseVector) -> DenseVector {
        assert_eq!(self.len(), other.len(), "sub: length mismatch");
        Self::from_vec_unchecked(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        )
    }

    pub fn add(&self, other: &DenseVector) -> DenseVector {
        assert_eq!(self.len(), other.len(), "add: length mismatch");
        Self::from_vec_unchecked(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        )
    }

    pub fn scaled(&self, factor: f64) -> DenseVector {
        Self::from_vec_unchecked(self.data.iter().map(|x| x * factor).collect())
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &DenseVector) {
        assert_eq!(self.len(), x.len(), "axpy: length mismatch");
        for (s, xi) in self.data.iter_mut().zip(&x.data) {
            *s += alpha * xi;
        }
    }

    /// Copy of the entries in `range`.
    pub fn segment(&self, range: Range<usize>) -> DenseVector {
        Self::from_vec_unchecked(self.data[range].to_vec())
    }

    /// Concatenates vectors end to end.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a DenseVector>) -> DenseVector {
        let mut data = Vec::new();
        for part in parts {
            data.extend_from_slice(&part.data);
        }
        Self::from_vec_unchecked(data)
    }
}

impl Index<usize> for DenseVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl fmt::Debug for DenseVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(&self.data).finish()
    }
}

#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims(
                "DenseMatrix::new",
                format!("{} entries", rows * cols),
                format!("{} entries", data.len()),
            ));
        }
        if let Some(index) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: "DenseMatrix",
                index,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::dims("DenseMatrix::from_rows", cols, bad.len()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_vec_unchecked(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
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

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Self::from_vec_unchecked(self.cols, self.rows, out)
    }

    pub fn mul_vec(&self, x: &DenseVector) -> Result<DenseVector> {
        if x.len() != self.cols {
            return Err(Error::dims("mul_vec", self.cols, x.len()));
        }
        let mut out = vec![0.0; self.rows];
        self.mul_slice_into(x.as_slice(), &mut out);
        Ok(DenseVector::from_vec_unchecked(out))
    }

    /// `out = self * x` on raw slices; lengths are the caller's responsibility.
    pub(crate) fn mul_slice_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(i), x);
        }
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        matmul(self, other)
    }

    /// Copy of the columns in `range`.
    pub fn columns(&self, range: Range<usize>) -> Result<DenseMatrix> {
        if range.start > range.end || range.end > self.cols {
            return Err(Error::dims(
                "columns",
                format!("range within 0..{}", self.cols),
                format!("{range:?}"),
            ));
        }
        let width = range.len();
        let mut out = Vec::with_capacity(self.rows * width);
        for i in 0..self.rows {
            out.extend_from_slice(&self.row(i)[range.clone()]);
        }
        Ok(Self::from_vec_unchecked(self.rows, width, out))
    }

    /// Places matrices side by side.
    pub fn hstack(blocks: &[DenseMatrix]) -> Result<DenseMatrix> {
        let rows = blocks.first().map_or(0, |b| b.rows);
        if let Some(bad) = blocks.iter().find(|b| b.rows != rows) {
            return Err(Error::dims("hstack", format!("{rows} rows"), bad.rows));
        }
        let cols = blocks.iter().map(|b| b.cols).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for b in blocks {
                out.extend_from_slice(b.row(i));
            }
        }
        Ok(Self::from_vec_unchecked(rows, cols, out))
    }

    /// Stacks matrices on top of each other.
    pub fn vstack(blocks: &[DenseMatrix]) -> Result<DenseMatrix> {
        let cols = blocks.first().map_or(0, |b| b.cols);
        if let Some(bad) = blocks.iter().find(|b| b.cols != cols) {
            return Err(Error::dims("vstack", format!("{cols} cols"), bad.cols));
        }
        let rows = blocks.iter().map(|b| b.rows).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for b in blocks {
            out.extend_from_slice(&b.data);
        }
        Ok(Self::from_vec_unchecked(rows, cols, out))
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.shape() != other.shape() {
            return Err(Error::dims(
                "sub",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Self::from_vec_unchecked(self.rows, self.cols, data))
    }

    pub fn scaled(&self, factor: f64) -> DenseMatrix {
        let data = self.data.iter().map(|x| x * factor).collect();
        Self::from_vec_unchecked(self.rows, self.cols, data)
    }

    pub fn frobenius_norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

/// Sequential dot product; the fixed summation order keeps results reproducible.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::dims(
            "matmul",
            format!("lhs cols == rhs rows ({})", a.cols),
            b.rows,
        ));
    }
    let mut out = vec![0.0; a.rows * b.cols];
    for i in 0..a.rows {
        let out_row = &mut out[i * b.cols..(i + 1) * b.cols];
        for (l, &a_il) in a.row(i).iter().enumerate() {
            if a_il == 0.0 {
                continue;
            }
            for (o, b_lj) in out_row.iter_mut().zip(b.row(l)) {
                *o += a_il * b_lj;
            }
        }
    }
    Ok(DenseMatrix::from_vec_unchecked(a.rows, b.cols, out))
}

/// Thin SVD with the truncation rule applied: `inv_sigma[i]` is `1/σ_i` for
/// retained values and zero otherwise.
struct TruncatedSvd {
    u: DMatrix<f64>,
    v_t: DMatrix<f64>,
    inv_sigma: Vec<f64>,
    rank: usize,
}

fn truncated_svd(m: &DenseMatrix) -> Result<TruncatedSvd> {
    let (rows, cols) = m.shape();
    let svd = nalgebra::linalg::SVD::try_new(
        m.to_nalgebra(),
        true,
        true,
        f64::EPSILON,
        SVD_MAX_ITERATIONS,
    )
    .ok_or(Error::SvdNoConvergence { rows, cols })?;

    let sigma_max = svd.singular_values.iter().fold(0.0_f64, |a, &s| a.max(s));
    let threshold = rows.max(cols) as f64 * f64::EPSILON * sigma_max;
    let inv_sigma: Vec<f64> = svd
        .singular_values
        .iter()
        .map(|&s| if s > threshold { 1.0 / s } else { 0.0 })
        .collect();
    let rank = inv_sigma.iter().filter(|&&s| s != 0.0).count();

    Ok(TruncatedSvd {
        u: svd.u.ok_or(Error::SvdNoConvergence { rows, cols })?,
        v_t: svd.v_t.ok_or(Error::SvdNoConvergence { rows, cols })?,
        inv_sigma,
        rank,
    })
}

/// Moore-Penrose pseudoinverse together with the numerical rank of `m`.
pub fn pinv_with_rank(m: &DenseMatrix) -> Result<(DenseMatrix, usize)> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Ok((DenseMatrix::zeros(cols, rows), 0));
    }
    let svd = truncated_svd(m)?;
    // M⁺ = V Σ⁺ Uᵀ, entry (r, c) = Σ_i V[r,i] σ_i⁺ U[c,i]
    let mut out = vec![0.0; cols * rows];
    for r in 0..cols {
        for c in 0..rows {
            let mut acc = 0.0;
            for (i, &s) in svd.inv_sigma.iter().enumerate() {
                if s != 0.0 {
                    acc += svd.v_t[(i, r)] * s * svd.u[(c, i)];
                }
            }
            out[r * rows + c] = acc;
        }
    }
    Ok((DenseMatrix::from_vec_unchecked(cols, rows, out), svd.rank))
}

pub fn pinv(m: &DenseMatrix) -> Result<DenseMatrix> {
    pinv_with_rank(m).map(|(p, _)| p)
}

/// Minimum-norm least-squares solution `A⁺ y`, accumulated one singular
/// triplet at a time without forming the pseudoinverse.
pub fn min_norm_solve(a: &DenseMatrix, y: &DenseVector) -> Result<DenseVector> {
    if a.rows != y.len() {
        return Err(Error::dims("min_norm_solve", a.rows, y.len()));
    }
    if a.rows == 0 || a.cols == 0 {
        return Ok(DenseVector::zeros(a.cols));
    }
    let svd = truncated_svd(a)?;
    let mut x = vec![0.0; a.cols];
    for (i, &s) in svd.inv_sigma.iter().enumerate() {
        if s == 0.0 {
            continue;
        }
        let coef = (0..a.rows).fold(0.0, |acc, r| acc + svd.u[(r, i)] * y[r]) * s;
        for (j, xj) in x.iter_mut().enumerate() {
            *xj += coef * svd.v_t[(i, j)];
        }
    }
    Ok(DenseVector::from_vec_unchecked(x))
}
