//! Price dynamics as random linear maps `Z_{t+1} = W_{t+1} Z_t`.
//!
//! Each price model maps one standard normal draw to a disturbance matrix.
//! The solver works with a finite weighted sampling built from equidistant
//! normal quantiles; path simulation draws from the continuous law.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{check_dim, Error, Result};
use crate::pwlc::SquareMatrix;

pub type StreamRng = ChaCha8Rng;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Random stream keyed by `(seed, key...)`; independent of evaluation order.
pub fn keyed_rng(seed: u64, key: &[u64]) -> StreamRng {
    let mut h = 0x5851_F42D_4C95_7F2Du64;
    for &k in key {
        h = splitmix(h ^ k);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng
}

/// Leading stream ids for [`keyed_rng`].
pub const STREAM_PATH: u64 = 1;
pub const STREAM_SUBSIM: u64 = 2;
pub const STREAM_GRID: u64 = 3;

/// `Phi^{-1}((k - 0.5) / n)` for `k = 1..=n`; each atom carries weight `1/n`.
pub fn normal_quantile_sampling(n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidParameter("sampling size must be at least 1".into()));
    }
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    let mut q = vec![0.0; n];
    for k in 0..n / 2 {
        let x = std.inverse_cdf((k as f64 + 0.5) / n as f64);
        q[k] = x;
        q[n - 1 - k] = -x;
    }
    Ok(q)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GbmParams {
    pub mu: f64,
    pub sigma2: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ar1Params {
    pub mu: f64,
    pub sigma2: f64,
    pub delta: f64,
    pub phi: f64,
}

/// Linearized GARCH(1,1)-type dynamics on the state
/// `(1, sigma_t^2, Y_t^2, log price)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GarchParams {
    pub kappa: f64,
    pub phi: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Long-run variance parameter.
    pub sigma2: f64,
    pub delta: f64,
    pub initial_sigma2: f64,
    pub initial_y2: f64,
}

impl GarchParams {
    pub fn beta(&self) -> f64 {
        1.0 - self.beta1 - self.beta2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PriceModel {
    Gbm(GbmParams),
    Ar1(Ar1Params),
    Garch(GarchParams),
}

fn positive(name: &str, x: f64) -> Result<()> {
    if !(x.is_finite() && x > 0.0) {
        return Err(Error::InvalidParameter(format!("{name} must be finite and > 0, got {x}")));
    }
    Ok(())
}

fn finite(name: &str, x: f64) -> Result<()> {
    if !x.is_finite() {
        return Err(Error::InvalidParameter(format!("{name} must be finite, got {x}")));
    }
    Ok(())
}

fn unit_interval(name: &str, x: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::InvalidParameter(format!("{name} must lie in [0, 1], got {x}")));
    }
    Ok(())
}

impl PriceModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            PriceModel::Gbm(p) => {
                finite("mu", p.mu)?;
                positive("sigma2", p.sigma2)?;
                positive("delta", p.delta)
            }
            PriceModel::Ar1(p) => {
                finite("mu", p.mu)?;
                positive("sigma2", p.sigma2)?;
                positive("delta", p.delta)?;
                unit_interval("phi", p.phi)
            }
            PriceModel::Garch(p) => {
                finite("kappa", p.kappa)?;
                positive("sigma2", p.sigma2)?;
                positive("delta", p.delta)?;
                unit_interval("phi", p.phi)?;
                if p.beta1 < 0.0 || p.beta2 < 0.0 {
                    return Err(Error::InvalidParameter("beta1 and beta2 must be >= 0".into()));
                }
                unit_interval("beta1 + beta2", p.beta1 + p.beta2)?;
                positive("initial_sigma2", p.initial_sigma2)?;
                if !(p.initial_y2.is_finite() && p.initial_y2 >= 0.0) {
                    return Err(Error::InvalidParameter("initial_y2 must be >= 0".into()));
                }
                Ok(())
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PriceModel::Gbm(_) => "gbm",
            PriceModel::Ar1(_) => "ar1",
            PriceModel::Garch(_) => "garch",
        }
    }

    /// Dimension of the augmented state.
    pub fn dim(&self) -> usize {
        match self {
            PriceModel::Gbm(_) | PriceModel::Ar1(_) => 2,
            PriceModel::Garch(_) => 4,
        }
    }

    /// Coordinate holding the price (GBM) or log price (others).
    pub fn price_coordinate(&self) -> usize {
        match self {
            PriceModel::Gbm(_) | PriceModel::Ar1(_) => 1,
            PriceModel::Garch(_) => 3,
        }
    }

    pub fn log_price(&self) -> bool {
        !matches!(self, PriceModel::Gbm(_))
    }

    /// Spot price carried by state `z`.
    #[inline]
    pub fn price(&self, z: &[f64]) -> f64 {
        let x = z[self.price_coordinate()];
        if self.log_price() {
            x.exp()
        } else {
            x
        }
    }

    /// Augmented state for a given spot price; GARCH uses its initial
    /// variance terms.
    pub fn initial_state(&self, price: f64) -> Vec<f64> {
        match self {
            PriceModel::Gbm(_) => vec![1.0, price],
            PriceModel::Ar1(_) => vec![1.0, price.ln()],
            PriceModel::Garch(p) => vec![1.0, p.initial_sigma2, p.initial_y2, price.ln()],
        }
    }

    /// Disturbance matrix for one standard normal draw `n`.
    pub fn disturbance(&self, n: f64) -> SquareMatrix {
        match self {
            PriceModel::Gbm(p) => {
                let f = ((p.mu - 0.5 * p.sigma2) * p.delta + p.sigma2.sqrt() * p.delta.sqrt() * n).exp();
                SquareMatrix::new(2, vec![1.0, 0.0, 0.0, f]).unwrap()
            }
            PriceModel::Ar1(p) => {
                let c = (p.mu - 0.5 * p.sigma2) * p.delta + p.sigma2.sqrt() * p.delta.sqrt() * n;
                SquareMatrix::new(2, vec![1.0, 0.0, c, p.phi]).unwrap()
            }
            PriceModel::Garch(p) => {
                let sb = p.sigma2 * p.beta();
                let n2 = n * n;
                let sd = p.delta.sqrt() * n;
                #[rustfmt::skip]
                let data = vec![
                    1.0, 0.0, 0.0, 0.0,
                    sb, p.beta1, p.beta2, 0.0,
                    sb * n2, p.beta1 * n2, p.beta2 * n2, 0.0,
                    p.kappa * p.delta + sb * sd, p.beta1 * sd, p.beta2 * sd, p.phi,
                ];
                SquareMatrix::new(4, data).unwrap()
            }
        }
    }

    /// Finite sampling from equidistant normal quantiles.
    pub fn sampling(&self, n: usize) -> Result<DisturbanceSampling> {
        self.validate()?;
        let q = normal_quantile_sampling(n)?;
        let matrices = q.iter().map(|&x| self.disturbance(x)).collect();
        DisturbanceSampling::new(matrices, vec![1.0 / n as f64; n])
    }
}

pub fn gbm_sampling(params: GbmParams, n: usize) -> Result<DisturbanceSampling> {
    PriceModel::Gbm(params).sampling(n)
}

pub fn ar1_sampling(params: Ar1Params, n: usize) -> Result<DisturbanceSampling> {
    PriceModel::Ar1(params).sampling(n)
}

pub fn garch_sampling(params: GarchParams, n: usize) -> Result<DisturbanceSampling> {
    PriceModel::Garch(params).sampling(n)
}

/// Law of the disturbance matrices used for path simulation.
pub trait DisturbanceLaw: Sync {
    fn dim(&self) -> usize;

    fn draw(&self, rng: &mut StreamRng) -> SquareMatrix;

    /// Draws `W` and writes `W z` to `out`.
    fn draw_image(&self, rng: &mut StreamRng, z: &[f64], out: &mut [f64]) {
        self.draw(rng).apply_into(z, out);
    }

    /// Writes `W z` for the disturbance at probability level `u` in `(0, 1)`
    /// (inverse transform of the driving noise).
    fn image_at_level(&self, u: f64, z: &[f64], out: &mut [f64]);
}

impl DisturbanceLaw for PriceModel {
    fn dim(&self) -> usize {
        PriceModel::dim(self)
    }

    fn draw(&self, rng: &mut StreamRng) -> SquareMatrix {
        self.disturbance(rng.sample(StandardNormal))
    }

    fn draw_image(&self, rng: &mut StreamRng, z: &[f64], out: &mut [f64]) {
        self.image_for_normal(rng.sample(StandardNormal), z, out);
    }

    fn image_at_level(&self, u: f64, z: &[f64], out: &mut [f64]) {
        let std = Normal::new(0.0, 1.0).expect("standard normal");
        self.image_for_normal(std.inverse_cdf(u), z, out);
    }
}

impl PriceModel {
    /// `W z` for the disturbance driven by the normal draw `n`.
    #[inline]
    pub fn image_for_normal(&self, n: f64, z: &[f64], out: &mut [f64]) {
        match self {
            PriceModel::Gbm(p) => {
                let f = ((p.mu - 0.5 * p.sigma2) * p.delta + p.sigma2.sqrt() * p.delta.sqrt() * n).exp();
                out[0] = z[0];
                out[1] = f * z[1];
            }
            PriceModel::Ar1(p) => {
                let c = (p.mu - 0.5 * p.sigma2) * p.delta + p.sigma2.sqrt() * p.delta.sqrt() * n;
                out[0] = z[0];
                out[1] = c * z[0] + p.phi * z[1];
            }
            PriceModel::Garch(_) => self.disturbance(n).apply_into(z, out),
        }
    }
}

/// Weighted finite set of disturbance matrices.
#[derive(Debug, Clone)]
pub struct DisturbanceSampling {
    matrices: Vec<SquareMatrix>,
    weights: Vec<f64>,
    cumulative: Vec<f64>,
}

impl DisturbanceSampling {
    pub fn new(matrices: Vec<SquareMatrix>, weights: Vec<f64>) -> Result<Self> {
        if matrices.is_empty() {
            return Err(Error::InvalidParameter("sampling needs at least one atom".into()));
        }
        check_dim(matrices.len(), weights.len())?;
        let d = matrices[0].dim();
        for (k, w) in matrices.iter().enumerate() {
            check_dim(d, w.dim())?;
            if !w.preserves_constant() {
                return Err(Error::InvalidParameter(format!(
                    "atom {k} does not preserve the constant coordinate"
                )));
            }
        }
        if weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidParameter("weights must be finite and >= 0".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!("weights sum to {total}, expected 1")));
        }
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        Ok(Self { matrices, weights, cumulative })
    }

    /// A single deterministic atom.
    pub fn deterministic(w: SquareMatrix) -> Result<Self> {
        Self::new(vec![w], vec![1.0])
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrices[0].dim()
    }

    pub fn matrices(&self) -> &[SquareMatrix] {
        &self.matrices
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn atoms(&self) -> impl Iterator<Item = (f64, &SquareMatrix)> {
        self.weights.iter().copied().zip(&self.matrices)
    }

    /// Atom selected by the inverse transform at level `u` in `[0, 1)`.
    fn atom_at_level(&self, u: f64) -> usize {
        let u = u * self.cumulative[self.cumulative.len() - 1];
        self.cumulative.partition_point(|&c| c <= u).min(self.len() - 1)
    }
}

/// The sampling viewed as a discrete law.
impl DisturbanceLaw for DisturbanceSampling {
    fn dim(&self) -> usize {
        DisturbanceSampling::dim(self)
    }

    fn draw(&self, rng: &mut StreamRng) -> SquareMatrix {
        self.matrices[self.atom_at_level(rng.random::<f64>())].clone()
    }

    fn image_at_level(&self, u: f64, z: &[f64], out: &mut [f64]) {
        self.matrices[self.atom_at_level(u)].apply_into(z, out);
    }
}

/// Simulated trajectories together with the disturbances that drove them.
#[derive(Debug, Clone)]
pub struct PathSet {
    dim: usize,
    horizon: usize,
    seed: u64,
    states: Vec<f64>,
    disturbances: Vec<f64>,
}

impl PathSet {
    /// Builds a path set from explicit disturbance realizations,
    /// `disturbances[k][t]` driving the step `t -> t + 1` of path `k`.
    pub fn from_disturbances(z0: &[f64], disturbances: &[Vec<SquareMatrix>], seed: u64) -> Result<Self> {
        let dim = z0.len();
        let horizon = disturbances.first().map(|d| d.len()).unwrap_or(0);
        let mut states = Vec::with_capacity(disturbances.len() * (horizon + 1) * dim);
        let mut flat = Vec::with_capacity(disturbances.len() * horizon * dim * dim);
        for path in disturbances {
            check_dim(horizon, path.len())?;
            let mut z = z0.to_vec();
            states.extend_from_slice(&z);
            for w in path {
                check_dim(dim, w.dim())?;
                z = w.apply(&z);
                states.extend_from_slice(&z);
                flat.extend_from_slice(w.as_slice());
            }
        }
        Ok(Self { dim, horizon, seed, states, disturbances: flat })
    }

    pub fn n_paths(&self) -> usize {
        self.states.len() / ((self.horizon + 1) * self.dim)
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    #[inline]
    pub fn state(&self, k: usize, t: usize) -> &[f64] {
        let off = (k * (self.horizon + 1) + t) * self.dim;
        &self.states[off..off + self.dim]
    }

    /// The disturbance driving path `k` from `t - 1` to `t` (`t >= 1`).
    pub fn disturbance(&self, k: usize, t: usize) -> SquareMatrix {
        let dd = self.dim * self.dim;
        let off = (k * self.horizon + t - 1) * dd;
        SquareMatrix::new(self.dim, self.disturbances[off..off + dd].to_vec()).unwrap()
    }

    /// All states of all paths, path-major.
    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "path,t")?;
        for i in 0..self.dim {
            write!(out, ",z{i}")?;
        }
        writeln!(out)?;
        for k in 0..self.n_paths() {
            for t in 0..=self.horizon {
                write!(out, "{k},{t}")?;
                for x in self.state(k, t) {
                    write!(out, ",{x:e}")?;
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }
}

/// Simulates `n_paths` trajectories of length `horizon` from `z0`. Path `k`
/// uses its own stream keyed by `(seed, k)`.
pub fn simulate_paths(
    law: &dyn DisturbanceLaw,
    z0: &[f64],
    horizon: usize,
    n_paths: usize,
    seed: u64,
) -> Result<PathSet> {
    use rayon::prelude::*;
    let d = law.dim();
    check_dim(d, z0.len())?;
    let per_path: Vec<(Vec<f64>, Vec<f64>)> = (0..n_paths)
        .into_par_iter()
        .map(|k| {
            let mut rng = keyed_rng(seed, &[STREAM_PATH, k as u64]);
            let mut states = Vec::with_capacity((horizon + 1) * d);
            let mut ws = Vec::with_capacity(horizon * d * d);
            let mut z = z0.to_vec();
            let mut next = vec![0.0; d];
            states.extend_from_slice(&z);
            for _ in 0..horizon {
                let w = law.draw(&mut rng);
                w.apply_into(&z, &mut next);
                std::mem::swap(&mut z, &mut next);
                states.extend_from_slice(&z);
                ws.extend_from_slice(w.as_slice());
            }
            (states, ws)
        })
        .collect();
    let mut states = Vec::with_capacity(n_paths * (horizon + 1) * d);
    let mut disturbances = Vec::with_capacity(n_paths * horizon * d * d);
    for (s, w) in per_path {
        states.extend(s);
        disturbances.extend(w);
    }
    Ok(PathSet { dim: d, horizon, seed, states, disturbances })
}

#[cfg(test)]
mod tests {
    use super::*;

    const GBM: GbmParams = GbmParams { mu: 0.09, sigma2: 0.08, delta: 0.25 };

    #[test]
    fn quantile_examples() {
        assert_eq!(normal_quantile_sampling(1).unwrap(), vec![0.0]);
        let two = normal_quantile_sampling(2).unwrap();
        assert!((two[0] + 0.674_489_750_196_081_7).abs() < 1e-9);
        assert_eq!(two[1], -two[0]);
        for n in [3, 10, 101, 1000] {
            let q = normal_quantile_sampling(n).unwrap();
            for k in 0..n {
                assert_eq!(q[k], -q[n - 1 - k]);
            }
            assert!(q.windows(2).all(|w| w[0] < w[1]));
            assert!(q.iter().sum::<f64>().abs() < 1e-12);
        }
        assert!(normal_quantile_sampling(0).is_err());
    }

    #[test]
    fn gbm_factor_at_zero_noise() {
        let w = PriceModel::Gbm(GBM).disturbance(0.0);
        assert!((w.get(1, 1) - 0.0125f64.exp()).abs() < 1e-15);
        assert!((w.get(1, 1) - 1.012_578).abs() < 1e-6);
    }

    #[test]
    fn gbm_degenerate_noise_is_deterministic() {
        let p = GbmParams { sigma2: 1e-300, ..GBM };
        let s = gbm_sampling(p, 7).unwrap();
        for w in s.matrices() {
            assert!((w.get(1, 1) - (0.09f64 * 0.25).exp()).abs() < 1e-14);
        }
    }

    #[test]
    fn gbm_sampling_mean_factor() {
        let s = gbm_sampling(GBM, 10_000).unwrap();
        let mean: f64 = s.atoms().map(|(nu, w)| nu * w.get(1, 1)).sum();
        let target = (0.09f64 * 0.25).exp();
        assert!((mean / target - 1.0).abs() < 1e-4, "{mean} vs {target}");
    }

    #[test]
    fn ar1_examples() {
        let p = Ar1Params { mu: 0.09, sigma2: 0.08, delta: 0.25, phi: 0.6 };
        let w = PriceModel::Ar1(p).disturbance(0.0);
        let next = w.apply(&[1.0, 0.5]);
        assert!((next[1] - 0.3125).abs() < 1e-15);

        // phi = 1 reproduces the GBM log increments
        let p1 = Ar1Params { phi: 1.0, ..p };
        for n in [-1.3, 0.0, 0.4, 2.2] {
            let log_step = PriceModel::Ar1(p1).disturbance(n).apply(&[1.0, 0.7])[1] - 0.7;
            let gbm = PriceModel::Gbm(GBM).disturbance(n).get(1, 1).ln();
            assert!((log_step - gbm).abs() < 1e-14);
        }
        // phi = 0 forgets the current log price
        let p0 = Ar1Params { phi: 0.0, ..p };
        let w0 = PriceModel::Ar1(p0).disturbance(0.3);
        assert_eq!(w0.apply(&[1.0, -2.0])[1], w0.apply(&[1.0, 3.0])[1]);
    }

    #[test]
    fn garch_rows() {
        let p = GarchParams {
            kappa: 0.05,
            phi: 0.6,
            beta1: 0.8,
            beta2: 0.1,
            sigma2: 0.08f64.sqrt(),
            delta: 0.25,
            initial_sigma2: 0.08f64.sqrt(),
            initial_y2: 1.0,
        };
        let z = [1.0, 0.3, 0.7, -0.2];
        let w = PriceModel::Garch(p).disturbance(0.0);
        let next = w.apply(&z);
        let vol = p.sigma2 * 0.1 + 0.8 * 0.3 + 0.1 * 0.7;
        assert!((next[1] - vol).abs() < 1e-15);
        assert_eq!(next[2], 0.0);
        assert!((next[3] - (0.05 * 0.25 + 0.6 * -0.2)).abs() < 1e-15);

        let n = 1.7;
        let next = PriceModel::Garch(p).disturbance(n).apply(&z);
        assert!((next[2] - vol * n * n).abs() < 1e-14);
        assert!((next[3] - (0.0125 - 0.12 + vol * 0.5 * n)).abs() < 1e-14);

        let flat = GarchParams { beta1: 0.0, beta2: 0.0, ..p };
        let w = PriceModel::Garch(flat).disturbance(0.9);
        assert_eq!(w.apply(&z)[1], flat.sigma2);
        assert_eq!(w.apply(&[1.0, 5.0, 9.0, 0.0])[1], flat.sigma2);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(PriceModel::Gbm(GbmParams { sigma2: 0.0, ..GBM }).sampling(3).is_err());
        let bad = Ar1Params { mu: 0.09, sigma2: 0.08, delta: 0.25, phi: 1.5 };
        assert!(PriceModel::Ar1(bad).validate().is_err());
    }

    #[test]
    fn weights_must_sum_to_one() {
        let w = SquareMatrix::identity(2);
        assert!(DisturbanceSampling::new(vec![w.clone(), w.clone()], vec![0.5, 0.6]).is_err());
        let bad = SquareMatrix::new(2, vec![1.0, 0.1, 0.0, 1.0]).unwrap();
        assert!(DisturbanceSampling::new(vec![bad], vec![1.0]).is_err());
    }

    #[test]
    fn paths_are_reproducible_and_recursive() {
        let m = PriceModel::Gbm(GBM);
        let a = simulate_paths(&m, &[1.0, 1.0], 8, 5, 42).unwrap();
        let b = simulate_paths(&m, &[1.0, 1.0], 8, 5, 42).unwrap();
        assert_eq!(a.states(), b.states());
        for k in 0..5 {
            for t in 1..=8 {
                let z = a.disturbance(k, t).apply(a.state(k, t - 1));
                assert_eq!(z.as_slice(), a.state(k, t));
                assert_eq!(a.state(k, t)[0], 1.0);
            }
        }
    }

    #[test]
    fn deterministic_path_without_noise() {
        let m = PriceModel::Gbm(GbmParams { sigma2: 1e-300, ..GBM });
        let p = simulate_paths(&m, &[1.0, 2.0], 4, 1, 3).unwrap();
        for t in 0..=4 {
            let expect = 2.0 * (0.09 * 0.25 * t as f64).exp();
            assert!((p.state(0, t)[1] / expect - 1.0).abs() < 1e-14);
        }
    }
}
