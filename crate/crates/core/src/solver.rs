//! Backward induction over matrix representatives.
//!
//! Value functions of all positions at one time step are stored together in
//! a slab laid out as `[grid row][position][coordinate]`, so a grid row of
//! every position sits in one contiguous block.
//!
//! The continuation value at grid point `g_i` is
//! `sum_k nu_k * (row maximizing V at W_k g_i) * W_k`. The exact mode scans
//! every row; the nearest-neighbour mode only scans the rows of the grid
//! points closest to `W_k g_i`. With a single neighbour the map from rows of
//! `V` to rows of the continuation value does not depend on `V`, so it is
//! assembled once as a sparse operator and reused at every time step.

use std::io::{Read, Write};
use std::ops::Deref;

use rayon::prelude::*;

use crate::disturbances::DisturbanceSampling;
use crate::error::{check_dim, Error, Result};
use crate::model::{Action, Mode, Position, ResourceModel, SwitchingProblem};
use crate::neighbors::NeighborIndex;
use crate::pwlc::{dot, Grid, PwlcFunction};

/// How continuation values are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expectation {
    /// Every row is a candidate maximizer.
    Exact,
    /// Only rows of the given number of nearest grid points are candidates.
    Nearest(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SolverOptions {
    pub expectation: Expectation,
}

impl SolverOptions {
    pub fn exact() -> Self {
        Self { expectation: Expectation::Exact }
    }

    pub fn fast(neighbors: usize) -> Self {
        Self { expectation: Expectation::Nearest(neighbors) }
    }
}

/// Per-time-step slabs of matrix representatives for all positions.
#[derive(Debug, Clone)]
pub struct SlabSeries {
    grid: Grid,
    n_positions: usize,
    first: usize,
    slabs: Vec<Vec<f64>>,
}

impl SlabSeries {
    fn empty(grid: &Grid, n_positions: usize, first: usize, last: usize) -> Self {
        Self { grid: grid.clone(), n_positions, first, slabs: vec![Vec::new(); last + 1 - first] }
    }

    fn put(&mut self, t: usize, slab: Vec<f64>) -> Result<()> {
        if t < self.first || t >= self.first + self.slabs.len() {
            return Err(Error::TimeOutOfRange { t, horizon: self.last() });
        }
        check_dim(self.slab_len(), slab.len())?;
        self.slabs[t - self.first] = slab;
        Ok(())
    }

    fn slab_len(&self) -> usize {
        self.grid.len() * self.n_positions * self.grid.dim()
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn n_rows(&self) -> usize {
        self.grid.len()
    }

    pub fn n_positions(&self) -> usize {
        self.n_positions
    }

    /// First and last stored time step.
    pub fn time_range(&self) -> (usize, usize) {
        (self.first, self.last())
    }

    fn last(&self) -> usize {
        self.first + self.slabs.len() - 1
    }

    pub fn is_complete(&self) -> bool {
        self.slabs.iter().all(|s| !s.is_empty())
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < self.first || t > self.last() {
            return Err(Error::TimeOutOfRange { t, horizon: self.last() });
        }
        Ok(())
    }

    /// Raw slab at `t`, laid out `[row][position][coordinate]`.
    #[inline]
    pub fn slab(&self, t: usize) -> &[f64] {
        &self.slabs[t - self.first]
    }

    #[inline]
    pub fn row(&self, t: usize, j: usize, p: usize) -> &[f64] {
        let d = self.dim();
        let off = (j * self.n_positions + p) * d;
        &self.slab(t)[off..off + d]
    }

    /// Matrix representative of position `p` at time `t`.
    pub fn function(&self, t: usize, p: usize) -> Result<PwlcFunction> {
        self.check_t(t)?;
        if p >= self.n_positions {
            return Err(Error::InvalidParameter(format!("position {p} out of range")));
        }
        let mut coeffs = Vec::with_capacity(self.slab_len() / self.n_positions);
        for j in 0..self.n_rows() {
            coeffs.extend_from_slice(self.row(t, j, p));
        }
        PwlcFunction::new(self.dim(), coeffs)
    }

    /// `max_j row_j . z` over all rows.
    pub fn evaluate(&self, t: usize, p: usize, z: &[f64]) -> Result<f64> {
        self.check_t(t)?;
        check_dim(self.dim(), z.len())?;
        Ok((0..self.n_rows()).map(|j| dot(self.row(t, j, p), z)).fold(f64::NEG_INFINITY, f64::max))
    }

    /// Values of all positions at `z`, maximizing over the given rows only.
    pub fn evaluate_all(&self, t: usize, z: &[f64], rows: &[usize], out: &mut [f64]) {
        let d = self.dim();
        let np = self.n_positions;
        let slab = self.slab(t);
        out.fill(f64::NEG_INFINITY);
        for &j in rows {
            let block = &slab[j * np * d..(j + 1) * np * d];
            for (o, r) in out.iter_mut().zip(block.chunks_exact(d)) {
                let v = dot(r, z);
                if v > *o {
                    *o = v;
                }
            }
        }
    }
}

/// Value functions `V_t(p)` for `t = 0..=T`.
#[derive(Debug, Clone)]
pub struct ValueFunctions(SlabSeries);

/// Continuation values `V~_t(p)` for `t = 1..=T`.
#[derive(Debug, Clone)]
pub struct ContinuationValues(SlabSeries);

impl Deref for ValueFunctions {
    type Target = SlabSeries;
    fn deref(&self) -> &SlabSeries {
        &self.0
    }
}

impl Deref for ContinuationValues {
    type Target = SlabSeries;
    fn deref(&self) -> &SlabSeries {
        &self.0
    }
}

impl ValueFunctions {
    pub fn horizon(&self) -> usize {
        self.0.last()
    }
}

impl ContinuationValues {
    pub fn horizon(&self) -> usize {
        self.0.last()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlabKind {
    Value,
    Continuation,
}

/// Receives slabs as the induction produces them (from `T` down to `0`).
pub trait SlabSink {
    fn put(&mut self, kind: SlabKind, t: usize, slab: Vec<f64>) -> Result<()>;
}

/// Keeps every slab in memory.
pub struct MemorySink {
    values: SlabSeries,
    continuation: SlabSeries,
}

impl MemorySink {
    pub fn new(grid: &Grid, n_positions: usize, horizon: usize) -> Self {
        Self {
            values: SlabSeries::empty(grid, n_positions, 0, horizon),
            continuation: SlabSeries::empty(grid, n_positions, 1, horizon),
        }
    }

    pub fn finish(self) -> Result<(ValueFunctions, ContinuationValues)> {
        if !(self.values.is_complete() && self.continuation.is_complete()) {
            return Err(Error::Format("incomplete solution".into()));
        }
        Ok((ValueFunctions(self.values), ContinuationValues(self.continuation)))
    }
}

impl SlabSink for MemorySink {
    fn put(&mut self, kind: SlabKind, t: usize, slab: Vec<f64>) -> Result<()> {
        match kind {
            SlabKind::Value => self.values.put(t, slab),
            SlabKind::Continuation => self.continuation.put(t, slab),
        }
    }
}

const MAGIC: &[u8; 8] = b"CSWSOL01";

/// Streams slabs to a binary dump readable by [`read_solution`].
pub struct DumpSink<W: Write> {
    out: W,
}

impl<W: Write> DumpSink<W> {
    pub fn new(mut out: W, grid: &Grid, n_positions: usize, horizon: usize) -> Result<Self> {
        out.write_all(MAGIC)?;
        for x in [grid.dim(), grid.len(), n_positions, horizon] {
            out.write_all(&(x as u64).to_le_bytes())?;
        }
        write_f64s(&mut out, grid.as_slice())?;
        Ok(Self { out })
    }

    pub fn into_inner(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

impl<W: Write> SlabSink for DumpSink<W> {
    fn put(&mut self, kind: SlabKind, t: usize, slab: Vec<f64>) -> Result<()> {
        let tag = match kind {
            SlabKind::Value => 0u8,
            SlabKind::Continuation => 1u8,
        };
        self.out.write_all(&[tag])?;
        self.out.write_all(&(t as u64).to_le_bytes())?;
        write_f64s(&mut self.out, &slab)
    }
}

fn write_f64s<W: Write>(out: &mut W, xs: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(8 * 4096);
    for chunk in xs.chunks(4096) {
        buf.clear();
        for x in chunk {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect())
}

/// Writes a solved problem in the dump format.
pub fn write_solution<W: Write>(values: &ValueFunctions, cont: &ContinuationValues, out: W) -> Result<W> {
    let horizon = values.horizon();
    let mut sink = DumpSink::new(out, values.grid(), values.n_positions(), horizon)?;
    for t in (0..=horizon).rev() {
        sink.put(SlabKind::Value, t, values.slab(t).to_vec())?;
        if t >= 1 {
            sink.put(SlabKind::Continuation, t, cont.slab(t).to_vec())?;
        }
    }
    sink.into_inner()
}

pub fn read_solution<R: Read>(mut input: R) -> Result<(ValueFunctions, ContinuationValues)> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a value dump".into()));
    }
    let dim = read_u64(&mut input)? as usize;
    let m = read_u64(&mut input)? as usize;
    let np = read_u64(&mut input)? as usize;
    let horizon = read_u64(&mut input)? as usize;
    if dim == 0 || m == 0 || np == 0 || horizon == 0 || m.saturating_mul(np).saturating_mul(dim) > 1 << 34 {
        return Err(Error::Format("corrupt dump header".into()));
    }
    let grid = Grid::new(dim, read_f64s(&mut input, m * dim)?)?;
    let mut sink = MemorySink::new(&grid, np, horizon);
    let len = m * np * dim;
    for _ in 0..(2 * horizon + 1) {
        let mut tag = [0u8; 1];
        input.read_exact(&mut tag)?;
        let t = read_u64(&mut input)? as usize;
        let kind = match tag[0] {
            0 => SlabKind::Value,
            1 => SlabKind::Continuation,
            _ => return Err(Error::Format("corrupt slab tag".into())),
        };
        sink.put(kind, t, read_f64s(&mut input, len)?)?;
    }
    sink.finish()
}

/// Sparse operator `row i <- sum_j V_j C_ij` for single-neighbour
/// expectations. Only coordinates `(r, c)` that are nonzero in some
/// disturbance matrix are stored.
struct AggregatedOperator {
    dim: usize,
    pattern: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    targets: Vec<u32>,
    coeffs: Vec<f64>,
}

impl AggregatedOperator {
    fn build(grid: &Grid, sampling: &DisturbanceSampling, index: &NeighborIndex) -> Self {
        let d = grid.dim();
        let pattern: Vec<(usize, usize)> = (0..d)
            .flat_map(|r| (0..d).map(move |c| (r, c)))
            .filter(|&(r, c)| sampling.matrices().iter().any(|w| w.get(r, c) != 0.0))
            .collect();
        let np = pattern.len();
        let m = grid.len();
        let rows: Vec<(Vec<u32>, Vec<f64>)> = (0..m)
            .into_par_iter()
            .map_init(
                || (vec![0.0; m * np], vec![false; m], vec![0.0; d]),
                |(acc, seen, y), i| {
                    let g = grid.point(i);
                    let mut touched: Vec<u32> = Vec::new();
                    for (nu, w) in sampling.atoms() {
                        w.apply_into(g, y);
                        let j = index.nearest_state(y);
                        if !seen[j] {
                            seen[j] = true;
                            touched.push(j as u32);
                        }
                        let a = &mut acc[j * np..(j + 1) * np];
                        for (e, &(r, c)) in pattern.iter().enumerate() {
                            a[e] += nu * w.get(r, c);
                        }
                    }
                    touched.sort_unstable();
                    let mut coeffs = Vec::with_capacity(touched.len() * np);
                    for &j in &touched {
                        let j = j as usize;
                        coeffs.extend_from_slice(&acc[j * np..(j + 1) * np]);
                        acc[j * np..(j + 1) * np].fill(0.0);
                        seen[j] = false;
                    }
                    (touched, coeffs)
                },
            )
            .collect();
        let mut offsets = Vec::with_capacity(m + 1);
        offsets.push(0);
        let mut targets = Vec::new();
        let mut coeffs = Vec::new();
        for (t, c) in rows {
            targets.extend(t);
            coeffs.extend(c);
            offsets.push(targets.len());
        }
        Self { dim: d, pattern, offsets, targets, coeffs }
    }

    fn apply(&self, v: &[f64], n_positions: usize, out: &mut [f64]) {
        let diagonal = self.pattern.len() == self.dim && self.pattern.iter().all(|&(r, c)| r == c);
        match (self.dim, diagonal) {
            (2, true) => self.apply_diagonal::<2>(v, n_positions, out),
            (4, true) => self.apply_diagonal::<4>(v, n_positions, out),
            (2, false) => self.apply_dense::<2>(v, n_positions, out),
            (3, false) => self.apply_dense::<3>(v, n_positions, out),
            (4, false) => self.apply_dense::<4>(v, n_positions, out),
            _ => self.apply_sparse(v, n_positions, out),
        }
    }

    fn apply_diagonal<const D: usize>(&self, v: &[f64], n_positions: usize, out: &mut [f64]) {
        let block = n_positions * D;
        out.par_chunks_mut(block).enumerate().for_each(|(i, out_i)| {
            out_i.fill(0.0);
            for e in self.offsets[i]..self.offsets[i + 1] {
                let j = self.targets[e] as usize;
                let c: [f64; D] = self.coeffs[e * D..(e + 1) * D].try_into().unwrap();
                let vj = &v[j * block..(j + 1) * block];
                for (o, x) in out_i.chunks_exact_mut(D).zip(vj.chunks_exact(D)) {
                    for l in 0..D {
                        o[l] += x[l] * c[l];
                    }
                }
            }
        });
    }

    /// Expands the stored pattern to a dense `D x D` block per entry.
    fn apply_dense<const D: usize>(&self, v: &[f64], n_positions: usize, out: &mut [f64]) {
        let block = n_positions * D;
        let np = self.pattern.len();
        out.par_chunks_mut(block).enumerate().for_each(|(i, out_i)| {
            out_i.fill(0.0);
            for e in self.offsets[i]..self.offsets[i + 1] {
                let j = self.targets[e] as usize;
                let mut c = [[0.0; D]; D];
                for (&(r, col), &w) in self.pattern.iter().zip(&self.coeffs[e * np..(e + 1) * np]) {
                    c[r][col] = w;
                }
                let vj = &v[j * block..(j + 1) * block];
                for (o, x) in out_i.chunks_exact_mut(D).zip(vj.chunks_exact(D)) {
                    for r in 0..D {
                        for col in 0..D {
                            o[col] += x[r] * c[r][col];
                        }
                    }
                }
            }
        });
    }

    fn apply_sparse(&self, v: &[f64], n_positions: usize, out: &mut [f64]) {
        let d = self.dim;
        let block = n_positions * d;
        let np = self.pattern.len();
        out.par_chunks_mut(block).enumerate().for_each(|(i, out_i)| {
            out_i.fill(0.0);
            for e in self.offsets[i]..self.offsets[i + 1] {
                let j = self.targets[e] as usize;
                let c = &self.coeffs[e * np..(e + 1) * np];
                let vj = &v[j * block..(j + 1) * block];
                for (o, x) in out_i.chunks_exact_mut(d).zip(vj.chunks_exact(d)) {
                    for (&(r, col), &w) in self.pattern.iter().zip(c) {
                        o[col] += x[r] * w;
                    }
                }
            }
        });
    }
}

/// Continuation slab for a slab `v` of `rows` rows per position.
/// `candidates` restricts the argmax search to rows of nearest grid points.
fn expect_generic(
    v: &[f64],
    rows: usize,
    n_positions: usize,
    grid: &Grid,
    sampling: &DisturbanceSampling,
    candidates: Option<(&NeighborIndex, usize)>,
) -> Vec<f64> {
    let d = grid.dim();
    let block = n_positions * d;
    let mut out = vec![0.0; grid.len() * block];
    out.par_chunks_mut(block).enumerate().for_each_init(
        || (vec![0.0; d], Vec::new()),
        |(y, cand), (i, out_i)| {
            let g = grid.point(i);
            for (nu, w) in sampling.atoms() {
                w.apply_into(g, y);
                match candidates {
                    Some((index, q)) => {
                        index.nearest_n(&y[1..], q, cand);
                        cand.sort_unstable();
                    }
                    None => {
                        cand.clear();
                        cand.extend(0..rows);
                    }
                }
                for p in 0..n_positions {
                    let mut best = cand[0];
                    let mut best_val = f64::NEG_INFINITY;
                    for &j in cand.iter() {
                        let val = dot(&v[(j * n_positions + p) * d..(j * n_positions + p + 1) * d], y);
                        if val > best_val {
                            best_val = val;
                            best = j;
                        }
                    }
                    let row = &v[(best * n_positions + p) * d..(best * n_positions + p + 1) * d];
                    w.accumulate_row_product(row, nu, &mut out_i[p * d..(p + 1) * d]);
                }
            }
        },
    );
    out
}

fn check_sampling(grid: &Grid, sampling: &DisturbanceSampling) -> Result<()> {
    check_dim(grid.dim(), sampling.dim())
}

/// `sum_k nu_k * rearrange(V W_k)` with every row a candidate maximizer.
pub fn expected_matrix(v: &PwlcFunction, sampling: &DisturbanceSampling, grid: &Grid) -> Result<PwlcFunction> {
    check_dim(grid.dim(), v.dim())?;
    check_sampling(grid, sampling)?;
    let out = expect_generic(v.as_slice(), v.n_rows(), 1, grid, sampling, None);
    PwlcFunction::new(grid.dim(), out)
}

/// As [`expected_matrix`], searching only rows of the `neighbors` grid
/// points nearest to each image `W_k g_i`. `v` must have one row per grid
/// point.
pub fn expected_matrix_fast(
    v: &PwlcFunction,
    sampling: &DisturbanceSampling,
    grid: &Grid,
    neighbors: usize,
) -> Result<PwlcFunction> {
    check_dim(grid.dim(), v.dim())?;
    check_dim(grid.len(), v.n_rows())?;
    check_sampling(grid, sampling)?;
    if neighbors == 0 {
        return Err(Error::InvalidParameter("neighbors must be at least 1".into()));
    }
    let index = NeighborIndex::from_grid(grid);
    let out = expect_generic(v.as_slice(), v.n_rows(), 1, grid, sampling, Some((&index, neighbors)));
    PwlcFunction::new(grid.dim(), out)
}

enum Expector {
    Generic(Option<(NeighborIndex, usize)>),
    Aggregated(AggregatedOperator),
}

impl Expector {
    fn new(grid: &Grid, sampling: &DisturbanceSampling, expectation: Expectation) -> Result<Self> {
        Ok(match expectation {
            Expectation::Exact => Expector::Generic(None),
            Expectation::Nearest(0) => {
                return Err(Error::InvalidParameter("neighbors must be at least 1".into()))
            }
            Expectation::Nearest(q) if q >= grid.len() => Expector::Generic(None),
            Expectation::Nearest(1) => {
                let index = NeighborIndex::from_grid(grid);
                Expector::Aggregated(AggregatedOperator::build(grid, sampling, &index))
            }
            Expectation::Nearest(q) => Expector::Generic(Some((NeighborIndex::from_grid(grid), q))),
        })
    }

    fn expect(&self, v: &[f64], n_positions: usize, grid: &Grid, sampling: &DisturbanceSampling) -> Vec<f64> {
        match self {
            Expector::Generic(c) => expect_generic(
                v,
                grid.len(),
                n_positions,
                grid,
                sampling,
                c.as_ref().map(|(idx, q)| (idx, *q)),
            ),
            Expector::Aggregated(op) => {
                let mut out = vec![0.0; v.len()];
                op.apply(v, n_positions, &mut out);
                out
            }
        }
    }
}

/// One Bellman step on the grid: row `i` of `V_t(p)` is the reward tangent
/// plus expected continuation of the action that is best at `g_i`.
fn bellman_slab<M: SwitchingProblem + ?Sized>(
    model: &M,
    t: usize,
    grid: &Grid,
    cont: Option<&[f64]>,
) -> Vec<f64> {
    let d = grid.dim();
    let np = model.n_positions();
    let block = np * d;
    let mut out = vec![0.0; grid.len() * block];
    out.par_chunks_mut(block).enumerate().for_each_init(
        || (vec![0.0; d], vec![0.0; d]),
        |(row, best), (i, out_i)| {
            let g = grid.point(i);
            let cont_i = cont.map(|c| &c[i * block..(i + 1) * block]);
            for p in 0..np {
                let mut best_val = f64::NEG_INFINITY;
                for a in 0..model.n_actions() {
                    model.reward_tangent(t, p, a, g, row);
                    if let Some(c) = cont_i {
                        for &(q, pr) in model.transitions(p, a) {
                            for (x, y) in row.iter_mut().zip(&c[q * d..(q + 1) * d]) {
                                *x += pr * y;
                            }
                        }
                    }
                    let val = dot(row, g);
                    if val > best_val {
                        best_val = val;
                        best.copy_from_slice(row);
                    }
                }
                if let Some(q) = model.dominated(p) {
                    let fallback = &out_i[q * d..(q + 1) * d];
                    if dot(fallback, g) > best_val {
                        best.copy_from_slice(fallback);
                    }
                }
                out_i[p * d..(p + 1) * d].copy_from_slice(best);
            }
        },
    );
    out
}

/// Runs the induction, handing each slab to `sink` as soon as it is no
/// longer needed.
pub fn backward_induction_into<M: SwitchingProblem + ?Sized>(
    model: &M,
    grid: &Grid,
    sampling: &DisturbanceSampling,
    options: &SolverOptions,
    sink: &mut dyn SlabSink,
) -> Result<()> {
    check_dim(model.dim(), grid.dim())?;
    check_sampling(grid, sampling)?;
    let horizon = model.horizon();
    if horizon == 0 {
        return Err(Error::InvalidParameter("horizon must be at least 1".into()));
    }
    let np = model.n_positions();
    let expector = Expector::new(grid, sampling, options.expectation)?;
    let mut v = bellman_slab(model, horizon, grid, None);
    for t in (0..horizon).rev() {
        let cont = expector.expect(&v, np, grid, sampling);
        sink.put(SlabKind::Value, t + 1, v)?;
        v = bellman_slab(model, t, grid, Some(&cont));
        sink.put(SlabKind::Continuation, t + 1, cont)?;
    }
    sink.put(SlabKind::Value, 0, v)
}

pub fn backward_induction_with<M: SwitchingProblem + ?Sized>(
    model: &M,
    grid: &Grid,
    sampling: &DisturbanceSampling,
    options: &SolverOptions,
) -> Result<(ValueFunctions, ContinuationValues)> {
    let mut sink = MemorySink::new(grid, model.n_positions(), model.horizon());
    backward_induction_into(model, grid, sampling, options, &mut sink)?;
    sink.finish()
}

/// Exact induction, or single-neighbour acceleration when `fast` is set.
pub fn backward_induction<M: SwitchingProblem + ?Sized>(
    model: &M,
    grid: &Grid,
    sampling: &DisturbanceSampling,
    fast: bool,
) -> Result<(ValueFunctions, ContinuationValues)> {
    let options = if fast { SolverOptions::fast(1) } else { SolverOptions::exact() };
    backward_induction_with(model, grid, sampling, &options)
}

/// Action values `r_t(p, z, a) + sum_p' alpha * V~_{t+1}(p')(z)` given the
/// continuation values of all positions at `z`.
pub fn action_values<M: SwitchingProblem + ?Sized>(
    model: &M,
    t: usize,
    p: usize,
    z: &[f64],
    cont_at_z: &[f64],
    out: &mut [f64],
) {
    for (a, o) in out.iter_mut().enumerate().take(model.n_actions()) {
        let mut v = model.reward(t, p, a, z);
        for &(q, pr) in model.transitions(p, a) {
            v += pr * cont_at_z[q];
        }
        *o = v;
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Greedy action with respect to the continuation values, by index.
pub fn policy_action_index<M: SwitchingProblem + ?Sized>(
    t: usize,
    p: usize,
    z: &[f64],
    model: &M,
    cont: &ContinuationValues,
) -> Result<usize> {
    if t >= model.horizon() {
        return Err(Error::TimeOutOfRange { t, horizon: model.horizon() });
    }
    check_dim(cont.dim(), z.len())?;
    let rows: Vec<usize> = (0..cont.n_rows()).collect();
    let mut at_z = vec![0.0; cont.n_positions()];
    cont.evaluate_all(t + 1, z, &rows, &mut at_z);
    let mut q = vec![0.0; model.n_actions()];
    action_values(model, t, p, z, &at_z, &mut q);
    Ok(argmax_first(&q))
}

pub fn policy_action(
    t: usize,
    p: Position,
    z: &[f64],
    model: &ResourceModel,
    cont: &ContinuationValues,
) -> Result<Action> {
    policy_action_index(t, p.index(), z, model, cont).map(Action::from_index)
}

/// A change of the greedy action along an increasing price scan.
#[derive(Debug, Clone, PartialEq)]
pub struct Switch {
    /// First scanned price at which `to` is chosen.
    pub price: f64,
    pub from: Action,
    pub to: Action,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReserveBoundary {
    pub reserve: usize,
    pub switches: Vec<Switch>,
}

/// For each reserve level, the prices along `prices` (increasing) where the
/// greedy action changes.
pub fn policy_boundaries(
    t: usize,
    mode: Mode,
    model: &ResourceModel,
    cont: &ContinuationValues,
    prices: &[f64],
) -> Result<Vec<ReserveBoundary>> {
    if t >= model.horizon() {
        return Err(Error::TimeOutOfRange { t, horizon: model.horizon() });
    }
    let price_model = model.price_model();
    let rows: Vec<usize> = (0..cont.n_rows()).collect();
    let states: Vec<Vec<f64>> = prices.iter().map(|&x| price_model.initial_state(x)).collect();
    let at: Vec<Vec<f64>> = states
        .par_iter()
        .map(|z| {
            let mut out = vec![0.0; cont.n_positions()];
            cont.evaluate_all(t + 1, z, &rows, &mut out);
            out
        })
        .collect();
    let mut result = Vec::with_capacity(model.reserve_units() + 1);
    let mut q = vec![0.0; 3];
    for reserve in 0..=model.reserve_units() {
        let p = Position::new(reserve, mode).index();
        let mut switches = Vec::new();
        let mut prev: Option<Action> = None;
        for ((&price, z), at_z) in prices.iter().zip(&states).zip(&at) {
            action_values(model, t, p, z, at_z, &mut q);
            let a = Action::from_index(argmax_first(&q));
            if let Some(b) = prev {
                if a != b {
                    switches.push(Switch { price, from: b, to: a });
                }
            }
            prev = Some(a);
        }
        result.push(ReserveBoundary { reserve, switches });
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::disturbances::{GbmParams, PriceModel};
    use crate::grids::equidistant_grid;
    use crate::model::EconomicParams;
    use crate::pwlc::SquareMatrix;

    fn gbm_sampling(n: usize) -> DisturbanceSampling {
        PriceModel::Gbm(GbmParams { mu: 0.09, sigma2: 0.08, delta: 0.25 }).sampling(n).unwrap()
    }

    fn small_model(reserve: usize, years: f64) -> ResourceModel {
        let econ = EconomicParams { reserve_units: reserve, horizon_years: years, ..Default::default() };
        ResourceModel::new(econ, PriceModel::Gbm(GbmParams { mu: 0.09, sigma2: 0.08, delta: 0.25 })).unwrap()
    }

    #[test]
    fn identity_sampling_rearranges() {
        let grid = equidistant_grid(0.0, 4.0, 5).unwrap();
        let v = PwlcFunction::from_rows(&[vec![0.0, 1.0], vec![2.0, 0.0], vec![-1.0, 1.5]]).unwrap();
        let s = DisturbanceSampling::deterministic(SquareMatrix::identity(2)).unwrap();
        let e = expected_matrix(&v, &s, &grid).unwrap();
        assert_eq!(e.as_slice(), v.row_rearrange(&grid).unwrap().as_slice());
    }

    #[test]
    fn two_atoms_affine_average() {
        let grid = equidistant_grid(0.0, 1.0, 3).unwrap();
        let v = PwlcFunction::from_rows(&[vec![0.5, 2.0]]).unwrap();
        let s = gbm_sampling(2);
        let e = expected_matrix(&v, &s, &grid).unwrap();
        let f: Vec<f64> = s.matrices().iter().map(|w| w.get(1, 1)).collect();
        let want = [0.5, 2.0 * (f[0] + f[1]) / 2.0];
        for r in e.rows() {
            assert!((r[0] - want[0]).abs() < 1e-15 && (r[1] - want[1]).abs() < 1e-15);
        }
    }

    #[test]
    fn grid_point_identity() {
        let grid = equidistant_grid(0.0, 3.0, 13).unwrap();
        let v = PwlcFunction::from_rows(&[vec![0.0, 0.3], vec![-1.0, 1.0], vec![-4.0, 2.5], vec![1.0, -0.5]]).unwrap();
        let s = gbm_sampling(7);
        let e = expected_matrix(&v, &s, &grid).unwrap();
        for (i, g) in grid.points().enumerate() {
            let want: f64 = s.atoms().map(|(nu, w)| nu * v.evaluate(&w.apply(g)).unwrap()).sum();
            assert!((dot(e.row(i), g) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn full_neighbourhood_is_bit_identical() {
        let grid = equidistant_grid(0.0, 3.0, 17).unwrap();
        let h: Vec<Vec<f64>> = grid.points().map(|g| vec![-g[1] * g[1] / 2.0, g[1]]).collect();
        let v = PwlcFunction::from_rows(&h).unwrap();
        let s = gbm_sampling(9);
        let exact = expected_matrix(&v, &s, &grid).unwrap();
        let fast = expected_matrix_fast(&v, &s, &grid, grid.len()).unwrap();
        assert_eq!(exact.as_slice(), fast.as_slice());
        let more = expected_matrix_fast(&v, &s, &grid, grid.len() + 3).unwrap();
        assert_eq!(exact.as_slice(), more.as_slice());
    }

    #[test]
    fn aggregated_operator_matches_single_neighbour() {
        let grid = equidistant_grid(0.0, 5.0, 41).unwrap();
        let s = gbm_sampling(31);
        let slab: Vec<f64> = grid
            .points()
            .flat_map(|g| {
                let x = g[1];
                [-x * x / 2.0, x, 1.0 - x * x, 2.0 * x, 0.0, 0.0]
            })
            .collect();
        let index = NeighborIndex::from_grid(&grid);
        let generic = expect_generic(&slab, grid.len(), 3, &grid, &s, Some((&index, 1)));
        let op = AggregatedOperator::build(&grid, &s, &index);
        let mut agg = vec![0.0; slab.len()];
        op.apply(&slab, 3, &mut agg);
        for (a, b) in generic.iter().zip(&agg) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn trivial_zero_problem() {
        struct Zero;
        impl SwitchingProblem for Zero {
            fn dim(&self) -> usize {
                2
            }
            fn horizon(&self) -> usize {
                1
            }
            fn n_positions(&self) -> usize {
                1
            }
            fn n_actions(&self) -> usize {
                1
            }
            fn transitions(&self, _p: usize, _a: usize) -> &[(usize, f64)] {
                &[(0, 1.0)]
            }
            fn reward(&self, _t: usize, _p: usize, _a: usize, _z: &[f64]) -> f64 {
                0.0
            }
            fn reward_tangent(&self, _t: usize, _p: usize, _a: usize, _z: &[f64], row: &mut [f64]) {
                row.fill(0.0);
            }
        }
        let grid = equidistant_grid(0.0, 1.0, 4).unwrap();
        let (v, c) = backward_induction(&Zero, &grid, &gbm_sampling(3), false).unwrap();
        for t in 0..=1 {
            assert!(v.slab(t).iter().all(|&x| x == 0.0));
        }
        assert!(c.slab(1).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn terminal_is_scrap_envelope_and_values_are_nonnegative() {
        let model = small_model(4, 3.0);
        let grid = equidistant_grid(0.0, 4.0, 21).unwrap();
        let (v, _) = backward_induction(&model, &grid, &gbm_sampling(15), false).unwrap();
        let horizon = model.horizon();
        for p in 0..model.n_positions() {
            for (i, g) in grid.points().enumerate() {
                let scrap = SwitchingProblem::scrap(&model, p, g);
                assert!((dot(v.row(horizon, i, p), g) - scrap).abs() < 1e-12);
                for t in 0..=horizon {
                    assert!(dot(v.row(t, i, p), g) >= -1e-12);
                }
            }
        }
    }

    #[test]
    fn fast_solver_with_all_neighbours_is_exact() {
        let model = small_model(3, 2.0);
        let grid = equidistant_grid(0.0, 3.0, 15).unwrap();
        let s = gbm_sampling(8);
        let (ve, ce) = backward_induction(&model, &grid, &s, false).unwrap();
        let (vf, cf) = backward_induction_with(&model, &grid, &s, &SolverOptions::fast(grid.len())).unwrap();
        for t in 0..=model.horizon() {
            assert_eq!(ve.slab(t), vf.slab(t));
            if t > 0 {
                assert_eq!(ce.slab(t), cf.slab(t));
            }
        }
    }

    #[test]
    fn dump_round_trip() {
        let model = small_model(2, 1.0);
        let grid = equidistant_grid(0.0, 2.0, 6).unwrap();
        let (v, c) = backward_induction(&model, &grid, &gbm_sampling(4), true).unwrap();
        let buf = write_solution(&v, &c, Vec::new()).unwrap();
        let (v2, c2) = read_solution(buf.as_slice()).unwrap();
        for t in 0..=model.horizon() {
            assert_eq!(v.slab(t), v2.slab(t));
            if t > 0 {
                assert_eq!(c.slab(t), c2.slab(t));
            }
        }
        assert!(read_solution(&buf[..buf.len() - 3]).is_err());
    }

    #[test]
    fn policy_examples() {
        let model = small_model(8, 4.0);
        let grid = equidistant_grid(0.0, 4.0, 81).unwrap();
        let (_, c) = backward_induction(&model, &grid, &gbm_sampling(50), true).unwrap();
        let z = [1.0, 1.0];
        assert_eq!(policy_action(0, Position::new(0, Mode::Opened), &z, &model, &c).unwrap(), Action::Abandon);
        assert_eq!(policy_action(0, Position::new(8, Mode::Opened), &z, &model, &c).unwrap(), Action::Open);
        assert_eq!(
            policy_action(0, Position::new(8, Mode::Opened), &[1.0, 0.0], &model, &c).unwrap(),
            Action::Abandon
        );
        assert!(policy_action(model.horizon(), Position::new(1, Mode::Opened), &z, &model, &c).is_err());
        let prices: Vec<f64> = (0..=100).map(|i| i as f64 * 0.02).collect();
        let b = policy_boundaries(0, Mode::Opened, &model, &c, &prices).unwrap();
        assert!(b[0].switches.is_empty());
        let top = &b[8].switches;
        assert!(!top.is_empty());
        assert_eq!(top.last().unwrap().to, Action::Open);
    }
}
