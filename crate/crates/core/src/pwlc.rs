//! Piecewise-linear convex functions in matrix form.
//!
//! A [`PwlcFunction`] is an `r x d` matrix whose rows are linear functionals;
//! the represented function is `f(z) = max_i (row_i . z)`. States are
//! augmented with a leading constant coordinate equal to one, so each row is
//! an affine map of the remaining coordinates.
//!
//! The row-rearrangement operator maps a matrix to the `m`-row matrix whose
//! `i`-th row is the maximizing row at grid point `i`. Subgradient envelopes,
//! pointwise maxima, sums and compositions with linear maps all reduce to
//! rearrangements of suitably assembled matrices.

use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Dense `d x d` matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("matrix dimension must be positive".into()));
        }
        check_dim(dim * dim, data.len())?;
        Ok(Self { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        let mut data = Vec::with_capacity(dim * dim);
        for r in rows {
            check_dim(dim, r.len())?;
            data.extend_from_slice(r);
        }
        Self::new(dim, data)
    }

    pub fn identity(dim: usize) -> Self {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        Self { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.dim + col]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// `W z`
    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.apply_into(z, &mut out);
        out
    }

    #[inline]
    pub fn apply_into(&self, z: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(&self.data[r * d..(r + 1) * d], z);
        }
    }

    /// `row W`, accumulated as `out += scale * (row W)`.
    #[inline]
    pub fn accumulate_row_product(&self, row: &[f64], scale: f64, out: &mut [f64]) {
        let d = self.dim;
        for (c, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for l in 0..d {
                s += row[l] * self.data[l * d + c];
            }
            *o += scale * s;
        }
    }

    /// True when the first row is `(1, 0, ..., 0)`.
    pub fn preserves_constant(&self) -> bool {
        self.data[0] == 1.0 && self.data[1..self.dim].iter().all(|&x| x == 0.0)
    }
}

/// Finite point set in the augmented state space.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dim: usize,
    points: Vec<f64>,
}

impl Grid {
    /// Builds a grid from row-major coordinates. Every point must have a
    /// leading coordinate of exactly one and points must be distinct.
    pub fn new(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidGrid("dimension must be positive".into()));
        }
        if points.is_empty() || !points.len().is_multiple_of(dim) {
            return Err(Error::InvalidGrid(format!(
                "{} coordinates do not form points of dimension {dim}",
                points.len()
            )));
        }
        for (i, p) in points.chunks(dim).enumerate() {
            if p[0] != 1.0 {
                return Err(Error::InvalidGrid(format!(
                    "point {i} has constant coordinate {} (expected 1)",
                    p[0]
                )));
            }
            if p.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidGrid(format!("point {i} is not finite")));
            }
        }
        let grid = Self { dim, points };
        if let Some((a, b)) = grid.find_duplicate() {
            return Err(Error::InvalidGrid(format!("points {a} and {b} coincide")));
        }
        Ok(grid)
    }

    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let dim = points.first().map(|p| p.len()).unwrap_or(0);
        let mut flat = Vec::with_capacity(points.len() * dim);
        for p in points {
            check_dim(dim, p.len())?;
            flat.extend_from_slice(p);
        }
        Self::new(dim, flat)
    }

    fn find_duplicate(&self) -> Option<(usize, usize)> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            self.point(a)
                .iter()
                .zip(self.point(b))
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        order
            .windows(2)
            .find(|w| self.point(w[0]) == self.point(w[1]))
            .map(|w| (w[0].min(w[1]), w[0].max(w[1])))
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.points.chunks(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.points
    }
}

/// Matrix representative of a piecewise-linear convex function.
#[derive(Debug, Clone, PartialEq)]
pub struct PwlcFunction {
    dim: usize,
    coeffs: Vec<f64>,
}

impl PwlcFunction {
    pub fn new(dim: usize, coeffs: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("dimension must be positive".into()));
        }
        if coeffs.is_empty() || !coeffs.len().is_multiple_of(dim) {
            return Err(Error::InvalidParameter(format!(
                "{} coefficients do not form rows of length {dim}",
                coeffs.len()
            )));
        }
        Ok(Self { dim, coeffs })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut coeffs = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            check_dim(dim, r.len())?;
            coeffs.extend_from_slice(r);
        }
        Self::new(dim, coeffs)
    }

    /// The zero function as a single zero row.
    pub fn zero(dim: usize) -> Self {
        Self { dim, coeffs: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_rows(&self) -> usize {
        self.coeffs.len() / self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.coeffs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.coeffs.chunks(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    /// `max(F z)`.
    pub fn evaluate(&self, z: &[f64]) -> Result<f64> {
        check_dim(self.dim, z.len())?;
        Ok(self.evaluate_unchecked(z))
    }

    #[inline]
    pub(crate) fn evaluate_unchecked(&self, z: &[f64]) -> f64 {
        self.rows().map(|r| dot(r, z)).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index of a maximizing row; the lowest index wins ties.
    pub fn argmax_row(&self, z: &[f64]) -> Result<usize> {
        check_dim(self.dim, z.len())?;
        Ok(self.argmax_unchecked(z))
    }

    #[inline]
    pub(crate) fn argmax_unchecked(&self, z: &[f64]) -> usize {
        let mut best = 0;
        let mut best_val = f64::NEG_INFINITY;
        for (i, r) in self.rows().enumerate() {
            let v = dot(r, z);
            if v > best_val {
                best_val = v;
                best = i;
            }
        }
        best
    }

    /// Row-rearrangement on `grid`: row `i` of the result is the maximizing
    /// row of `self` at grid point `i`.
    pub fn row_rearrange(&self, grid: &Grid) -> Result<PwlcFunction> {
        check_dim(self.dim, grid.dim())?;
        let picks: Vec<usize> = (0..grid.len())
            .into_par_iter()
            .map(|i| self.argmax_unchecked(grid.point(i)))
            .collect();
        let mut coeffs = Vec::with_capacity(picks.len() * self.dim);
        for j in picks {
            coeffs.extend_from_slice(self.row(j));
        }
        Ok(PwlcFunction { dim: self.dim, coeffs })
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn bind_rows(&self, other: &PwlcFunction) -> Result<PwlcFunction> {
        check_dim(self.dim, other.dim)?;
        let mut coeffs = self.coeffs.clone();
        coeffs.extend_from_slice(&other.coeffs);
        Ok(PwlcFunction { dim: self.dim, coeffs })
    }

    /// `F W`: every row multiplied by `w` from the right.
    pub fn times_matrix(&self, w: &SquareMatrix) -> Result<PwlcFunction> {
        check_dim(self.dim, w.dim())?;
        let mut coeffs = vec![0.0; self.coeffs.len()];
        for (r, out) in self.rows().zip(coeffs.chunks_mut(self.dim)) {
            w.accumulate_row_product(r, 1.0, out);
        }
        Ok(PwlcFunction { dim: self.dim, coeffs })
    }
}

/// Rearranged pointwise maximum of two functions.
pub fn max_of(f1: &PwlcFunction, f2: &PwlcFunction, grid: &Grid) -> Result<PwlcFunction> {
    f1.bind_rows(f2)?.row_rearrange(grid)
}

/// Sum of the two rearranged matrices.
pub fn add(f1: &PwlcFunction, f2: &PwlcFunction, grid: &Grid) -> Result<PwlcFunction> {
    check_dim(f1.dim, f2.dim)?;
    let mut a = f1.row_rearrange(grid)?;
    let b = f2.row_rearrange(grid)?;
    for (x, y) in a.coeffs.iter_mut().zip(&b.coeffs) {
        *x += y;
    }
    Ok(a)
}

/// Rearrangement of `F W`, representing `z -> f(W z)` on the grid.
pub fn compose_linear(f: &PwlcFunction, w: &SquareMatrix, grid: &Grid) -> Result<PwlcFunction> {
    f.times_matrix(w)?.row_rearrange(grid)
}

/// Pointwise maximum of matrices that are already aligned with `grid`
/// (row `i` attains the maximum at point `i`). Row `i` of the result is
/// taken from the input with the largest value at point `i`; the earliest
/// input wins ties.
pub fn max_aligned(fs: &[&PwlcFunction], grid: &Grid) -> Result<PwlcFunction> {
    let first = fs
        .first()
        .ok_or_else(|| Error::InvalidParameter("no functions to combine".into()))?;
    let d = first.dim;
    check_dim(d, grid.dim())?;
    for f in fs {
        check_dim(d, f.dim)?;
        check_dim(grid.len(), f.n_rows())?;
    }
    let mut coeffs = Vec::with_capacity(grid.len() * d);
    for i in 0..grid.len() {
        let g = grid.point(i);
        let mut best = 0;
        let mut best_val = f64::NEG_INFINITY;
        for (k, f) in fs.iter().enumerate() {
            let v = dot(f.row(i), g);
            if v > best_val {
                best_val = v;
                best = k;
            }
        }
        coeffs.extend_from_slice(fs[best].row(i));
    }
    Ok(PwlcFunction { dim: d, coeffs })
}

/// A convex function on the slice `z[0] = 1` together with a subgradient.
pub trait ConvexHandle: Sync {
    fn dim(&self) -> usize;

    fn value(&self, z: &[f64]) -> f64;

    /// Subgradient with respect to the non-constant coordinates
    /// (length `dim - 1`).
    fn subgradient(&self, z: &[f64]) -> Vec<f64>;

    /// Tangent at `z` as a row: the constant coordinate carries the
    /// intercept `value(z) - s . z[1..]`.
    fn tangent(&self, z: &[f64]) -> Vec<f64> {
        let s = self.subgradient(z);
        let mut row = Vec::with_capacity(self.dim());
        row.push(self.value(z) - dot(&s, &z[1..]));
        row.extend_from_slice(&s);
        row
    }
}

/// Handle for the linear map `z -> a . z`.
#[derive(Debug, Clone)]
pub struct AffineHandle(pub Vec<f64>);

impl ConvexHandle for AffineHandle {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn value(&self, z: &[f64]) -> f64 {
        dot(&self.0, z)
    }

    fn subgradient(&self, _z: &[f64]) -> Vec<f64> {
        self.0[1..].to_vec()
    }

    fn tangent(&self, _z: &[f64]) -> Vec<f64> {
        self.0.clone()
    }
}

/// Subgradient envelope on `grid`: one tangent per grid point, in grid
/// order.
pub fn envelope(h: &dyn ConvexHandle, grid: &Grid) -> Result<PwlcFunction> {
    check_dim(h.dim(), grid.dim())?;
    let d = grid.dim();
    let mut coeffs = Vec::with_capacity(grid.len() * d);
    for g in grid.points() {
        let t = h.tangent(g);
        check_dim(d, t.len())?;
        coeffs.extend_from_slice(&t);
    }
    Ok(PwlcFunction { dim: d, coeffs })
}
