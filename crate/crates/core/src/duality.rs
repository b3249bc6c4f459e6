//! Pathwise primal and dual Monte Carlo bounds.
//!
//! Along each simulated trajectory two recursions run backwards from the
//! scrap value: a lower one following the greedy policy and an upper one
//! maximizing over actions. Both add the same control variates, built from
//! sub-simulated one-step images of the state. Their sample means estimate
//! a lower and an upper bound of the value.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::disturbances::{keyed_rng, DisturbanceLaw, StreamRng, STREAM_PATH, STREAM_SUBSIM};
use crate::error::{check_dim, Error, Result};
use crate::model::SwitchingProblem;
use crate::neighbors::NeighborIndex;
use crate::pwlc::Grid;
use crate::solver::{action_values, argmax_first, ContinuationValues, SlabSeries, ValueFunctions};

/// Which rows are searched when a solved function is evaluated off the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "neighbors")]
pub enum Locate {
    /// All rows.
    Exact,
    /// Rows of nearby grid points: the two bracketing points for scalar
    /// states, otherwise the given number of nearest points.
    Local(usize),
}

pub struct Locator {
    mode: Locate,
    m: usize,
    index: NeighborIndex,
}

impl Locator {
    pub fn new(grid: &Grid, mode: Locate) -> Result<Self> {
        if mode == Locate::Local(0) {
            return Err(Error::InvalidParameter("locator needs at least one neighbour".into()));
        }
        Ok(Self { mode, m: grid.len(), index: NeighborIndex::from_grid(grid) })
    }

    /// Candidate rows for state `z`.
    pub fn rows(&self, z: &[f64], out: &mut Vec<usize>) {
        out.clear();
        match self.mode {
            Locate::Exact => out.extend(0..self.m),
            Locate::Local(q) => {
                if let Some((lo, hi)) = self.index.bracket(z[1]) {
                    out.push(lo);
                    if hi != lo {
                        out.push(hi);
                    }
                } else {
                    self.index.nearest_n(&z[1..], q, out);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundEstimate {
    pub lower_mean: f64,
    pub upper_mean: f64,
    pub lower_se: f64,
    pub upper_se: f64,
    pub paths: usize,
    pub subsims: usize,
    pub seed: u64,
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    // Deviations from the first sample: identical samples give exactly zero.
    let shift = xs[0];
    let d_mean = xs.iter().map(|x| x - shift).sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - shift - d_mean) * (x - shift - d_mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

impl BoundEstimate {
    pub fn from_samples(sample: &PathwiseSample, subsims: usize, seed: u64) -> Self {
        let (lower_mean, lower_se) = mean_se(&sample.lower);
        let (upper_mean, upper_se) = mean_se(&sample.upper);
        Self { lower_mean, upper_mean, lower_se, upper_se, paths: sample.lower.len(), subsims, seed }
    }

    pub fn gap(&self) -> f64 {
        self.upper_mean - self.lower_mean
    }
}

pub const CSV_HEADER: &str = "model,z0,mode,primal,primal_se,dual,dual_se,K,I,seed";

/// `x` with six significant digits.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let digits = x.abs().log10().floor() as i32 + 1;
    let decimals = (6 - digits).max(0) as usize;
    let s = format!("{x:.decimals$}");
    if s.starts_with("-0") && s.trim_start_matches(['-', '0', '.']).is_empty() {
        s[1..].to_string()
    } else {
        s
    }
}

pub fn csv_row(model: &str, z0: f64, mode: &str, b: &BoundEstimate) -> String {
    format!(
        "{model},{z0},{mode},{},{:.4},{},{:.4},{},{},{}",
        format_sig6(b.lower_mean),
        b.lower_se,
        format_sig6(b.upper_mean),
        b.upper_se,
        b.paths,
        b.subsims,
        b.seed
    )
}

/// Per-path lower and upper values.
#[derive(Debug, Clone, Default)]
pub struct PathwiseSample {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Scratch space for one trajectory.
struct Work {
    rows: Vec<usize>,
    at: Vec<f64>,
    sum: Vec<f64>,
    diff: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    next_lower: Vec<f64>,
    next_upper: Vec<f64>,
    q: Vec<f64>,
}

impl Work {
    fn new(n_positions: usize, horizon: usize, n_actions: usize) -> Self {
        Self {
            rows: Vec::new(),
            at: vec![0.0; n_positions],
            sum: vec![0.0; n_positions],
            diff: vec![0.0; horizon * n_positions],
            lower: vec![0.0; n_positions],
            upper: vec![0.0; n_positions],
            next_lower: vec![0.0; n_positions],
            next_upper: vec![0.0; n_positions],
            q: vec![0.0; n_actions],
        }
    }
}

fn evaluate_located(series: &SlabSeries, locator: &Locator, t: usize, z: &[f64], rows: &mut Vec<usize>, out: &mut [f64]) {
    locator.rows(z, rows);
    series.evaluate_all(t, z, rows, out);
}

/// `D_t(p') = mean_i v_t(p', y_i) - v_t(p', z_t)` for all positions.
fn control_differences(
    values: &ValueFunctions,
    locator: &Locator,
    t: usize,
    images: &[f64],
    z_t: &[f64],
    w: &mut Work,
    out: &mut [f64],
) {
    let d = values.dim();
    let n = images.len() / d;
    w.sum.fill(0.0);
    for y in images.chunks_exact(d) {
        evaluate_located(values, locator, t, y, &mut w.rows, &mut w.at);
        for (s, a) in w.sum.iter_mut().zip(&w.at) {
            *s += a;
        }
    }
    evaluate_located(values, locator, t, z_t, &mut w.rows, &mut w.at);
    for ((o, s), a) in out.iter_mut().zip(&w.sum).zip(&w.at) {
        *o = s / n as f64 - a;
    }
}

/// Control variate `phi_t(p, z, a)`: the transition-weighted difference
/// between the sub-simulated mean of `v_t` over `images` (one-step images
/// of `z`) and `v_t` at the realized successor `z_next`.
#[allow(clippy::too_many_arguments)]
pub fn control_variate<M: SwitchingProblem + ?Sized>(
    model: &M,
    values: &ValueFunctions,
    locator: &Locator,
    t: usize,
    p: usize,
    a: usize,
    images: &[f64],
    z_next: &[f64],
) -> Result<f64> {
    let d = values.dim();
    check_dim(d, z_next.len())?;
    if images.is_empty() || !images.len().is_multiple_of(d) {
        return Err(Error::InvalidParameter("need at least one sub-simulated image".into()));
    }
    if t == 0 || t > values.horizon() {
        return Err(Error::TimeOutOfRange { t, horizon: values.horizon() });
    }
    let mut w = Work::new(values.n_positions(), 1, model.n_actions());
    let mut diff = vec![0.0; values.n_positions()];
    control_differences(values, locator, t, images, z_next, &mut w, &mut diff);
    Ok(model.transitions(p, a).iter().map(|&(q, pr)| pr * diff[q]).sum())
}

/// Both recursions along one trajectory. `states` holds `z_0..z_T`;
/// `images` holds, for each step `t = 1..T`, the sub-simulated images of
/// `z_{t-1}`, all blocks of equal size.
pub fn path_bounds<M: SwitchingProblem + ?Sized>(
    model: &M,
    values: &ValueFunctions,
    cont: &ContinuationValues,
    locator: &Locator,
    p0: usize,
    states: &[f64],
    images: &[f64],
) -> Result<(f64, f64)> {
    let d = values.dim();
    let horizon = model.horizon();
    check_dim((horizon + 1) * d, states.len())?;
    if images.is_empty() || !images.len().is_multiple_of(horizon * d) {
        return Err(Error::InvalidParameter("sub-simulation blocks must be non-empty and equal".into()));
    }
    let mut w = Work::new(model.n_positions(), horizon, model.n_actions());
    Ok(run_path(model, values, cont, locator, p0, states, images, &mut w))
}

#[allow(clippy::too_many_arguments)]
fn run_path<M: SwitchingProblem + ?Sized>(
    model: &M,
    values: &ValueFunctions,
    cont: &ContinuationValues,
    locator: &Locator,
    p0: usize,
    states: &[f64],
    images: &[f64],
    w: &mut Work,
) -> (f64, f64) {
    let d = values.dim();
    let horizon = model.horizon();
    let np = model.n_positions();
    let block = images.len() / horizon;
    let mut diff = std::mem::take(&mut w.diff);
    for t in 1..=horizon {
        control_differences(
            values,
            locator,
            t,
            &images[(t - 1) * block..t * block],
            &states[t * d..(t + 1) * d],
            w,
            &mut diff[(t - 1) * np..t * np],
        );
    }
    let z_end = &states[horizon * d..];
    for p in 0..np {
        let s = model.scrap(p, z_end);
        w.next_lower[p] = s;
        w.next_upper[p] = s;
    }
    for t in (0..horizon).rev() {
        let z = &states[t * d..(t + 1) * d];
        let dt = &diff[t * np..(t + 1) * np];
        evaluate_located(cont, locator, t + 1, z, &mut w.rows, &mut w.at);
        for p in 0..np {
            action_values(model, t, p, z, &w.at, &mut w.q);
            let pi = argmax_first(&w.q);
            let mut best = f64::NEG_INFINITY;
            for a in 0..model.n_actions() {
                let r = model.reward(t, p, a, z);
                let mut up = r;
                let mut low = r;
                for &(q, pr) in model.transitions(p, a) {
                    up += pr * (w.next_upper[q] + dt[q]);
                    low += pr * (w.next_lower[q] + dt[q]);
                }
                if up > best {
                    best = up;
                }
                if a == pi {
                    w.lower[p] = low;
                }
            }
            w.upper[p] = best;
        }
        std::mem::swap(&mut w.lower, &mut w.next_lower);
        std::mem::swap(&mut w.upper, &mut w.next_upper);
    }
    w.diff = diff;
    (w.next_lower[p0], w.next_upper[p0])
}

/// How the sub-simulated disturbances of one step are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subsampling {
    /// `I` independent draws from the disturbance law.
    Independent,
    /// One independent draw from each of the `I` equiprobable quantile
    /// strata: draw `i` uses level `(i + U_i) / I`. The sub-simulated mean
    /// stays unbiased, with far smaller variance.
    Stratified,
}

/// Simulation settings for [`pathwise_bounds`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundsConfig {
    pub paths: usize,
    pub subsims: usize,
    pub seed: u64,
    pub locate: Locate,
    pub subsampling: Subsampling,
}

#[allow(clippy::too_many_arguments)]
fn fill_path(
    law: &dyn DisturbanceLaw,
    z0: &[f64],
    horizon: usize,
    cfg: &BoundsConfig,
    k: usize,
    states: &mut [f64],
    images: &mut [f64],
) {
    let d = z0.len();
    let n = cfg.subsims;
    let mut rng: StreamRng = keyed_rng(cfg.seed, &[STREAM_PATH, k as u64]);
    states[..d].copy_from_slice(z0);
    for t in 1..=horizon {
        let (prev, next) = states.split_at_mut(t * d);
        law.draw_image(&mut rng, &prev[(t - 1) * d..], &mut next[..d]);
    }
    for t in 1..=horizon {
        let mut sub = keyed_rng(cfg.seed, &[STREAM_SUBSIM, k as u64, t as u64]);
        let z = &states[(t - 1) * d..t * d];
        let block = &mut images[(t - 1) * n * d..t * n * d];
        for (i, y) in block.chunks_exact_mut(d).enumerate() {
            match cfg.subsampling {
                Subsampling::Independent => law.draw_image(&mut sub, z, y),
                Subsampling::Stratified => {
                    let u: f64 = sub.random();
                    let level = ((i as f64 + u) / n as f64).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
                    law.image_at_level(level, z, y);
                }
            }
        }
    }
}

/// Per-path lower and upper values for `cfg.paths` simulated trajectories.
#[allow(clippy::too_many_arguments)]
pub fn pathwise_sample<M: SwitchingProblem + ?Sized>(
    model: &M,
    law: &dyn DisturbanceLaw,
    values: &ValueFunctions,
    cont: &ContinuationValues,
    p0: usize,
    z0: &[f64],
    cfg: &BoundsConfig,
) -> Result<PathwiseSample> {
    let d = values.dim();
    check_dim(d, z0.len())?;
    check_dim(d, law.dim())?;
    if cfg.paths == 0 || cfg.subsims == 0 {
        return Err(Error::InvalidParameter("paths and sub-simulations must be at least 1".into()));
    }
    if p0 >= model.n_positions() {
        return Err(Error::InvalidParameter(format!("position {p0} out of range")));
    }
    let horizon = model.horizon();
    if values.horizon() != horizon || cont.horizon() != horizon || values.n_positions() != model.n_positions() {
        return Err(Error::InvalidParameter("solution does not match the model".into()));
    }
    let locator = Locator::new(values.grid(), cfg.locate)?;
    let results: Vec<(f64, f64)> = (0..cfg.paths)
        .into_par_iter()
        .map_init(
            || {
                (
                    Work::new(model.n_positions(), horizon, model.n_actions()),
                    vec![0.0; (horizon + 1) * d],
                    vec![0.0; horizon * cfg.subsims * d],
                )
            },
            |(w, states, images), k| {
                fill_path(law, z0, horizon, cfg, k, states, images);
                run_path(model, values, cont, &locator, p0, states, images, w)
            },
        )
        .collect();
    let (lower, upper) = results.into_iter().unzip();
    Ok(PathwiseSample { lower, upper })
}

/// Primal and dual estimates with standard errors.
pub fn pathwise_bounds<M: SwitchingProblem + ?Sized>(
    model: &M,
    law: &dyn DisturbanceLaw,
    values: &ValueFunctions,
    cont: &ContinuationValues,
    p0: usize,
    z0: &[f64],
    cfg: &BoundsConfig,
) -> Result<BoundEstimate> {
    let sample = pathwise_sample(model, law, values, cont, p0, z0, cfg)?;
    Ok(BoundEstimate::from_samples(&sample, cfg.subsims, cfg.seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::disturbances::{GbmParams, PriceModel};
    use crate::grids::equidistant_grid;
    use crate::model::{EconomicParams, Mode, Position, ResourceModel};
    use crate::solver::backward_induction;

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(34.16671), "34.1667");
        assert_eq!(format_sig6(1.2198), "1.21980");
        assert_eq!(format_sig6(0.0), "0");
        assert_eq!(format_sig6(1234567.4), "1234567");
        assert_eq!(format_sig6(-0.000000001), "-0.00000000100000");
        let b = BoundEstimate {
            lower_mean: 34.1667,
            upper_mean: 34.1681,
            lower_se: 0.00621,
            upper_se: 0.0062,
            paths: 1000,
            subsims: 1000,
            seed: 7,
        };
        assert_eq!(csv_row("gbm", 1.0, "opened", &b), "gbm,1,opened,34.1667,0.0062,34.1681,0.0062,1000,1000,7");
    }

    #[test]
    fn single_path_has_zero_se() {
        let s = PathwiseSample { lower: vec![3.0], upper: vec![4.0] };
        let b = BoundEstimate::from_samples(&s, 5, 1);
        assert_eq!((b.lower_mean, b.lower_se, b.upper_se), (3.0, 0.0, 0.0));
    }

    fn solved(reserve: usize, years: f64) -> (ResourceModel, PriceModel, ValueFunctions, ContinuationValues) {
        let pm = PriceModel::Gbm(GbmParams { mu: 0.09, sigma2: 0.08, delta: 0.25 });
        let econ = EconomicParams { reserve_units: reserve, horizon_years: years, ..Default::default() };
        let model = ResourceModel::new(econ, pm).unwrap();
        let grid = equidistant_grid(0.0, 4.0, 161).unwrap();
        let (v, c) = backward_induction(&model, &grid, &pm.sampling(100).unwrap(), true).unwrap();
        (model, pm, v, c)
    }

    #[test]
    fn lower_never_exceeds_upper_and_is_reproducible() {
        let (model, pm, v, c) = solved(6, 3.0);
        let cfg = BoundsConfig { paths: 40, subsims: 20, seed: 11, locate: Locate::Local(1), subsampling: Subsampling::Stratified };
        let p0 = Position::new(6, Mode::Opened).index();
        let s = pathwise_sample(&model, &pm, &v, &c, p0, &[1.0, 0.8], &cfg).unwrap();
        for (l, u) in s.lower.iter().zip(&s.upper) {
            assert!(l <= &(u + 1e-9));
        }
        let again = pathwise_sample(&model, &pm, &v, &c, p0, &[1.0, 0.8], &cfg).unwrap();
        assert_eq!(s.lower, again.lower);
        assert_eq!(s.upper, again.upper);
        let b = BoundEstimate::from_samples(&s, cfg.subsims, cfg.seed);
        assert!(b.lower_mean <= b.upper_mean + 3.0 * (b.lower_se + b.upper_se));
        assert!(b.lower_mean > 0.0);
    }

    #[test]
    fn exhausted_position_gives_zero() {
        let (model, pm, v, c) = solved(3, 2.0);
        let cfg = BoundsConfig { paths: 5, subsims: 3, seed: 2, locate: Locate::Local(1), subsampling: Subsampling::Stratified };
        let p0 = Position::new(0, Mode::Opened).index();
        let b = pathwise_bounds(&model, &pm, &v, &c, p0, &[1.0, 1.0], &cfg).unwrap();
        assert_eq!((b.lower_mean, b.upper_mean, b.lower_se, b.upper_se), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn control_variate_vanishes_for_constant_values() {
        let (model, _, v, _) = solved(2, 1.0);
        let locator = Locator::new(v.grid(), Locate::Exact).unwrap();
        let p = Position::new(0, Mode::Closed).index();
        let images = [1.0, 0.5, 1.0, 2.0];
        for a in 0..3 {
            assert_eq!(control_variate(&model, &v, &locator, 1, p, a, &images, &[1.0, 1.3]).unwrap(), 0.0);
        }
    }

    #[test]
    fn bracketing_matches_exact_on_convex_values() {
        let (_, _, v, _) = solved(4, 2.0);
        let exact = Locator::new(v.grid(), Locate::Exact).unwrap();
        let local = Locator::new(v.grid(), Locate::Local(1)).unwrap();
        let (mut r1, mut r2) = (Vec::new(), Vec::new());
        let mut a = vec![0.0; v.n_positions()];
        let mut b = vec![0.0; v.n_positions()];
        for x in [0.013, 0.5, 1.7777, 3.99, 5.0] {
            let z = [1.0, x];
            exact.rows(&z, &mut r1);
            local.rows(&z, &mut r2);
            v.evaluate_all(1, &z, &r1, &mut a);
            v.evaluate_all(1, &z, &r2, &mut b);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()), "{x} vs {y}");
            }
        }
    }
}
