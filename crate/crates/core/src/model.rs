//! Commodity extraction as a switching problem.
//!
//! Positions pair the remaining reserve with the operational mode. Rewards
//! are affine in the spot price, so in log-price models they are convex
//! exponentials of the state; the delivery penalty can make the price
//! coefficient negative.

use serde::{Deserialize, Serialize};

use crate::disturbances::PriceModel;
use crate::error::{Error, Result};
use crate::pwlc::ConvexHandle;

/// A finite-horizon switching problem with linear state dynamics.
///
/// Rewards are defined for `t = 0..=horizon`; at the horizon the scrap value
/// is the maximum of the per-action rewards.
pub trait SwitchingProblem: Sync {
    fn dim(&self) -> usize;
    fn horizon(&self) -> usize;
    fn n_positions(&self) -> usize;
    fn n_actions(&self) -> usize;
    /// Successor positions and probabilities under action `a`.
    fn transitions(&self, p: usize, a: usize) -> &[(usize, f64)];
    fn reward(&self, t: usize, p: usize, a: usize, z: &[f64]) -> f64;
    /// Tangent row of `z -> reward(t, p, a, z)` at `z`.
    fn reward_tangent(&self, t: usize, p: usize, a: usize, z: &[f64], row: &mut [f64]);

    /// A position `q < p` whose value never exceeds that of `p`. The solver
    /// lets `p` fall back on the row of `q` at grid points where it is
    /// higher, which keeps this ordering exact on the grid.
    fn dominated(&self, _p: usize) -> Option<usize> {
        None
    }

    fn scrap(&self, p: usize, z: &[f64]) -> f64 {
        let t = self.horizon();
        (0..self.n_actions())
            .map(|a| self.reward(t, p, a, z))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Closed = 1,
    Opened = 2,
}

impl Mode {
    pub fn code(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Position {
    pub reserve: usize,
    pub mode: Mode,
}

impl Position {
    pub fn new(reserve: usize, mode: Mode) -> Self {
        Self { reserve, mode }
    }

    pub fn index(self) -> usize {
        self.reserve * 2 + self.mode.code() - 1
    }

    pub fn from_index(idx: usize) -> Self {
        let mode = if idx.is_multiple_of(2) { Mode::Closed } else { Mode::Opened };
        Self { reserve: idx / 2, mode }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Abandon = 0,
    Close = 1,
    Open = 2,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::Abandon, Action::Close, Action::Open];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Abandon => "abandon",
            Action::Close => "close",
            Action::Open => "open",
        }
    }
}

/// Costs, rates and contract terms of the extraction problem. Rates are per
/// year and money is in millions of dollars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EconomicParams {
    /// Years between decisions.
    pub delta: f64,
    pub horizon_years: f64,
    pub interest: f64,
    pub inflation: f64,
    pub property_tax: f64,
    /// Maintenance cost per year while closed.
    pub maintenance: f64,
    /// Cost of one switch between open and closed.
    pub switching: f64,
    pub revenue_slope: f64,
    pub revenue_intercept: f64,
    /// Reserve units, one unit extracted per open period.
    pub reserve_units: usize,
    /// Probability of wasting one extra unit per open period.
    #[serde(default)]
    pub wastage: f64,
    /// Penalty proportion on the market value of a delivery shortfall.
    #[serde(default)]
    pub penalty: f64,
    /// Reserve level the delivery schedule is measured from; defaults to
    /// `reserve_units`.
    #[serde(default)]
    pub initial_reserve: Option<usize>,
    /// Explicit `(t, target)` pairs replacing the built-in delivery schedule.
    #[serde(default)]
    pub delivery_schedule: Option<Vec<(usize, f64)>>,
}

impl Default for EconomicParams {
    fn default() -> Self {
        Self {
            delta: 0.25,
            horizon_years: 30.0,
            interest: 0.1,
            inflation: 0.08,
            property_tax: 0.02,
            maintenance: 0.5,
            switching: 0.2,
            revenue_slope: 5.0,
            revenue_intercept: 2.5,
            reserve_units: 60,
            wastage: 0.0,
            penalty: 0.0,
            initial_reserve: None,
            delivery_schedule: None,
        }
    }
}

impl EconomicParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            ("delta", self.delta),
            ("horizon_years", self.horizon_years),
            ("interest", self.interest),
            ("inflation", self.inflation),
            ("property_tax", self.property_tax),
            ("maintenance", self.maintenance),
            ("switching", self.switching),
            ("revenue_slope", self.revenue_slope),
            ("revenue_intercept", self.revenue_intercept),
        ];
        for (name, x) in finite {
            if !x.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be finite")));
            }
        }
        if self.delta <= 0.0 {
            return Err(Error::InvalidParameter("delta must be > 0".into()));
        }
        if self.horizon_steps() < 1 {
            return Err(Error::InvalidParameter("horizon must span at least one period".into()));
        }
        if !(0.0..=1.0).contains(&self.wastage) {
            return Err(Error::InvalidParameter("wastage must lie in [0, 1]".into()));
        }
        if !(self.penalty >= 0.0 && self.penalty.is_finite()) {
            return Err(Error::InvalidParameter("penalty must be finite and >= 0".into()));
        }
        if let Some(r) = self.initial_reserve {
            if r > self.reserve_units {
                return Err(Error::InvalidParameter("initial_reserve exceeds reserve_units".into()));
            }
        }
        Ok(())
    }

    /// Number of decision periods `T`; the scrap value is collected at `T`.
    pub fn horizon_steps(&self) -> usize {
        (self.horizon_years / self.delta).round() as usize
    }

    fn growth(&self) -> f64 {
        self.inflation - self.interest - self.property_tax
    }
}

/// `reward = alpha + beta * price`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardCoefficients {
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone)]
pub struct ResourceModel {
    econ: EconomicParams,
    price: PriceModel,
    transitions: Vec<Vec<(usize, f64)>>,
}

impl ResourceModel {
    pub fn new(econ: EconomicParams, price: PriceModel) -> Result<Self> {
        econ.validate()?;
        price.validate()?;
        let n = 2 * (econ.reserve_units + 1);
        let mut transitions = Vec::with_capacity(n * 3);
        for idx in 0..n {
            let p = Position::from_index(idx);
            for a in Action::ALL {
                transitions.push(
                    Self::transition_table(p, a, econ.wastage)
                        .into_iter()
                        .map(|(q, pr)| (q.index(), pr))
                        .collect(),
                );
            }
        }
        Ok(Self { econ, price, transitions })
    }

    pub fn economics(&self) -> &EconomicParams {
        &self.econ
    }

    pub fn price_model(&self) -> &PriceModel {
        &self.price
    }

    pub fn reserve_units(&self) -> usize {
        self.econ.reserve_units
    }

    fn transition_table(p: Position, a: Action, w: f64) -> Vec<(Position, f64)> {
        
        match a {
            Action::Open => {
                let one = Position::new(p.reserve.saturating_sub(1), Mode::Opened);
                let two = Position::new(p.reserve.saturating_sub(2), Mode::Opened);
                if w == 0.0 {
                    vec![(one, 1.0)]
                } else if w == 1.0 {
                    vec![(two, 1.0)]
                } else if one == two {
                    vec![(one, 1.0)]
                } else {
                    vec![(two, w), (one, 1.0 - w)]
                }
            }
            Action::Close => vec![(Position::new(p.reserve, Mode::Closed), 1.0)],
            Action::Abandon => vec![(Position::new(0, p.mode), 1.0)],
        }
    }

    /// Successor positions and probabilities.
    pub fn transition_probs(&self, p: Position, a: Action) -> Vec<(Position, f64)> {
        self.transitions[p.index() * 3 + a.index()]
            .iter()
            .map(|&(q, pr)| (Position::from_index(q), pr))
            .collect()
    }

    /// Maintenance cost `m_t` of a closed period.
    pub fn maintenance_cost(&self, t: usize) -> f64 {
        let e = &self.econ;
        e.maintenance * e.delta * (e.growth() * t as f64 * e.delta).exp()
    }

    /// Cost `c_t` of a switch between open and closed.
    pub fn switching_cost(&self, t: usize) -> f64 {
        let e = &self.econ;
        e.switching * (e.growth() * t as f64 * e.delta).exp()
    }

    fn revenue_coefficients(&self, t: usize) -> (f64, f64) {
        let e = &self.econ;
        let td = t as f64 * e.delta;
        let slope = e.revenue_slope * e.delta * (-(e.interest + e.property_tax) * td).exp();
        let cost = e.revenue_intercept * e.delta * (e.growth() * td).exp();
        (slope, cost)
    }

    /// Cash flow `h_t(z)` of an open period.
    pub fn revenue(&self, t: usize, z: &[f64]) -> f64 {
        let (slope, cost) = self.revenue_coefficients(t);
        slope * self.price.price(z) - cost
    }

    /// Contracted reserve level `p*_t`.
    pub fn delivery_target(&self, t: usize) -> f64 {
        let p0 = self.econ.initial_reserve.unwrap_or(self.econ.reserve_units) as f64;
        if let Some(schedule) = &self.econ.delivery_schedule {
            return schedule.iter().find(|(s, _)| *s == t).map(|&(_, x)| x).unwrap_or(p0);
        }
        if (5..=41).contains(&t) && (t - 1).is_multiple_of(4) {
            p0 - 0.75 * (t as f64 - 1.0)
        } else {
            p0
        }
    }

    fn penalty_coefficient(&self, t: usize, p: Position) -> f64 {
        if self.econ.penalty == 0.0 {
            return 0.0;
        }
        let excess = p.reserve as f64 - self.delivery_target(t);
        if excess > 0.0 {
            self.econ.penalty * excess
        } else {
            0.0
        }
    }

    /// Delivery penalty `psi_t`.
    pub fn penalty(&self, t: usize, p: Position, z: &[f64]) -> f64 {
        let b = self.penalty_coefficient(t, p);
        if b == 0.0 {
            0.0
        } else {
            b * self.price.price(z)
        }
    }

    /// Reward as `alpha + beta * price`. Maintenance, switching and the
    /// penalty are paid, i.e. enter with a negative sign.
    pub fn reward_coefficients(&self, t: usize, p: Position, a: Action) -> RewardCoefficients {
        if p.reserve == 0 {
            return RewardCoefficients { alpha: 0.0, beta: 0.0 };
        }
        let switch = match a {
            Action::Abandon => 0.0,
            _ => {
                if p.mode.code() != a.index() {
                    self.switching_cost(t)
                } else {
                    0.0
                }
            }
        };
        let (alpha, beta) = match a {
            Action::Open => {
                let (slope, cost) = self.revenue_coefficients(t);
                (-cost - switch, slope)
            }
            Action::Close => (-self.maintenance_cost(t) - switch, 0.0),
            Action::Abandon => (0.0, 0.0),
        };
        RewardCoefficients { alpha, beta: beta - self.penalty_coefficient(t, p) }
    }

    /// Reward of action `a` at decision time `t < T`.
    pub fn reward(&self, t: usize, p: Position, z: &[f64], a: Action) -> Result<f64> {
        let horizon = self.econ.horizon_steps();
        if t >= horizon {
            return Err(Error::TimeOutOfRange { t, horizon });
        }
        Ok(self.reward_at(t, p, z, a))
    }

    fn reward_at(&self, t: usize, p: Position, z: &[f64], a: Action) -> f64 {
        let c = self.reward_coefficients(t, p, a);
        if c.beta == 0.0 {
            c.alpha
        } else {
            c.alpha + c.beta * self.price.price(z)
        }
    }

    /// Scrap value: the best terminal action reward.
    pub fn scrap(&self, p: Position, z: &[f64]) -> f64 {
        let t = self.econ.horizon_steps();
        Action::ALL
            .iter()
            .map(|&a| self.reward_at(t, p, z, a))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn reward_handle(&self, t: usize, p: Position, a: Action) -> RewardHandle<'_> {
        RewardHandle { model: self, coeffs: self.reward_coefficients(t, p, a) }
    }

    fn tangent_into(&self, c: RewardCoefficients, z: &[f64], row: &mut [f64]) {
        row.fill(0.0);
        let k = self.price.price_coordinate();
        if c.beta == 0.0 {
            row[0] = c.alpha;
        } else if self.price.log_price() {
            let x = z[k];
            let slope = c.beta * x.exp();
            row[0] = c.alpha + slope - slope * x;
            row[k] = slope;
        } else {
            row[0] = c.alpha;
            row[k] = c.beta;
        }
    }
}

impl SwitchingProblem for ResourceModel {
    fn dim(&self) -> usize {
        self.price.dim()
    }

    fn horizon(&self) -> usize {
        self.econ.horizon_steps()
    }

    fn n_positions(&self) -> usize {
        2 * (self.econ.reserve_units + 1)
    }

    fn n_actions(&self) -> usize {
        3
    }

    #[inline]
    fn transitions(&self, p: usize, a: usize) -> &[(usize, f64)] {
        &self.transitions[p * 3 + a]
    }

    #[inline]
    fn reward(&self, t: usize, p: usize, a: usize, z: &[f64]) -> f64 {
        self.reward_at(t, Position::from_index(p), z, Action::from_index(a))
    }

    fn reward_tangent(&self, t: usize, p: usize, a: usize, z: &[f64], row: &mut [f64]) {
        let c = self.reward_coefficients(t, Position::from_index(p), Action::from_index(a));
        self.tangent_into(c, z, row);
    }

    fn scrap(&self, p: usize, z: &[f64]) -> f64 {
        ResourceModel::scrap(self, Position::from_index(p), z)
    }

    /// One unit less in the same mode: the larger reserve can follow the
    /// smaller one's policy and abandon when that one runs out. Not so
    /// under a delivery penalty, which grows with the reserve.
    fn dominated(&self, p: usize) -> Option<usize> {
        let pos = Position::from_index(p);
        (self.econ.penalty == 0.0 && pos.reserve > 0).then(|| Position::new(pos.reserve - 1, pos.mode).index())
    }
}

/// Value and subgradient of one reward function.
pub struct RewardHandle<'a> {
    model: &'a ResourceModel,
    coeffs: RewardCoefficients,
}

impl RewardHandle<'_> {
    pub fn coefficients(&self) -> RewardCoefficients {
        self.coeffs
    }
}

impl ConvexHandle for RewardHandle<'_> {
    fn dim(&self) -> usize {
        self.model.price.dim()
    }

    fn value(&self, z: &[f64]) -> f64 {
        self.coeffs.alpha + self.coeffs.beta * self.model.price.price(z)
    }

    fn subgradient(&self, z: &[f64]) -> Vec<f64> {
        let mut row = vec![0.0; self.dim()];
        self.model.tangent_into(self.coeffs, z, &mut row);
        row.remove(0);
        row
    }

    fn tangent(&self, z: &[f64]) -> Vec<f64> {
        let mut row = vec![0.0; self.dim()];
        self.model.tangent_into(self.coeffs, z, &mut row);
        row
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::disturbances::{Ar1Params, GbmParams};
    use crate::pwlc::ConvexHandle;

    fn gbm() -> PriceModel {
        PriceModel::Gbm(GbmParams { mu: 0.09, sigma2: 0.08, delta: 0.25 })
    }

    fn ar1(phi: f64) -> PriceModel {
        PriceModel::Ar1(Ar1Params { mu: 0.09, sigma2: 0.08, delta: 0.25, phi })
    }

    fn model(econ: EconomicParams, price: PriceModel) -> ResourceModel {
        ResourceModel::new(econ, price).unwrap()
    }

    #[test]
    fn transitions_examples() {
        let m = model(EconomicParams::default(), gbm());
        assert_eq!(
            m.transition_probs(Position::new(10, Mode::Closed), Action::Open),
            vec![(Position::new(9, Mode::Opened), 1.0)]
        );
        for p in [Position::new(7, Mode::Opened), Position::new(3, Mode::Closed)] {
            assert_eq!(m.transition_probs(p, Action::Abandon), vec![(Position::new(0, p.mode), 1.0)]);
            assert_eq!(
                m.transition_probs(p, Action::Close),
                vec![(Position::new(p.reserve, Mode::Closed), 1.0)]
            );
        }
        let w = model(EconomicParams { wastage: 0.5, ..Default::default() }, gbm());
        assert_eq!(
            w.transition_probs(Position::new(1, Mode::Opened), Action::Open),
            vec![(Position::new(0, Mode::Opened), 1.0)]
        );
        assert_eq!(
            w.transition_probs(Position::new(5, Mode::Closed), Action::Open),
            vec![(Position::new(3, Mode::Opened), 0.5), (Position::new(4, Mode::Opened), 0.5)]
        );
    }

    #[test]
    fn costs_follow_formulas() {
        let m = model(EconomicParams::default(), gbm());
        assert!((m.maintenance_cost(0) - 0.125).abs() < 1e-15);
        assert_eq!(m.switching_cost(0), 0.2);
        assert!((m.maintenance_cost(4) - 0.125 * (-0.04f64).exp()).abs() < 1e-15);
        assert!(m.maintenance_cost(10) < m.maintenance_cost(9));
        assert!(m.switching_cost(10) < m.switching_cost(9));
    }

    #[test]
    fn revenue_examples() {
        let m = model(EconomicParams::default(), gbm());
        assert!(m.revenue(0, &[1.0, 0.5]).abs() < 1e-15);
        let a = model(EconomicParams::default(), ar1(0.6));
        assert!((a.revenue(0, &[1.0, 0.0]) - 0.625).abs() < 1e-15);
        let r1 = m.revenue(3, &[1.0, 1.0]) - m.revenue(3, &[1.0, 0.0]);
        let r2 = m.revenue(3, &[1.0, 2.0]) - m.revenue(3, &[1.0, 1.0]);
        assert!((r1 - r2).abs() < 1e-15);
    }

    #[test]
    fn delivery_schedule() {
        let m = model(EconomicParams { penalty: 1.0, ..Default::default() }, ar1(1.0));
        assert_eq!(m.delivery_target(5), 57.0);
        assert_eq!(m.delivery_target(4), 60.0);
        assert_eq!(m.delivery_target(41), 30.0);
        assert_eq!(m.delivery_target(42), 60.0);
        let custom = EconomicParams { delivery_schedule: Some(vec![(2, 58.0)]), ..Default::default() };
        let m = model(custom, ar1(1.0));
        assert_eq!(m.delivery_target(2), 58.0);
        assert_eq!(m.delivery_target(5), 60.0);
    }

    #[test]
    fn penalty_examples() {
        let z = [1.0, 0.0];
        let none = model(EconomicParams::default(), ar1(1.0));
        assert_eq!(none.penalty(5, Position::new(60, Mode::Opened), &z), 0.0);
        let b = model(EconomicParams { penalty: 1.0, ..Default::default() }, ar1(1.0));
        assert_eq!(b.penalty(5, Position::new(57, Mode::Opened), &z), 0.0);
        assert_eq!(b.penalty(5, Position::new(59, Mode::Opened), &z), 2.0);
    }

    #[test]
    fn reward_examples() {
        let m = model(EconomicParams::default(), gbm());
        let z = [1.0, 0.5];
        for a in Action::ALL {
            assert_eq!(m.reward(0, Position::new(0, Mode::Opened), &z, a).unwrap(), 0.0);
        }
        assert!(m.reward(0, Position::new(10, Mode::Opened), &z, Action::Open).unwrap().abs() < 1e-15);
        let close = m.reward(0, Position::new(10, Mode::Opened), &z, Action::Close).unwrap();
        assert!((close - (-0.125 - 0.2)).abs() < 1e-15);
        let open_from_closed = m.reward(0, Position::new(10, Mode::Closed), &z, Action::Open).unwrap();
        assert!((open_from_closed + 0.2).abs() < 1e-15);
        assert_eq!(m.reward(0, Position::new(10, Mode::Closed), &z, Action::Abandon).unwrap(), 0.0);
        assert!(matches!(
            m.reward(120, Position::new(1, Mode::Opened), &z, Action::Open),
            Err(Error::TimeOutOfRange { .. })
        ));
    }

    #[test]
    fn scrap_examples() {
        let m = model(EconomicParams::default(), gbm());
        assert_eq!(m.scrap(Position::new(0, Mode::Opened), &[1.0, 5.0]), 0.0);
        let p = Position::new(10, Mode::Opened);
        assert_eq!(m.scrap(p, &[1.0, 0.01]), 0.0);
        let z = [1.0, 40.0];
        assert_eq!(m.scrap(p, &z), m.revenue(120, &z));
    }

    #[test]
    fn handle_slopes() {
        let m = model(EconomicParams::default(), gbm());
        let h = m.reward_handle(8, Position::new(4, Mode::Opened), Action::Open);
        let slope = 5.0 * 0.25 * (-(0.12f64) * 2.0).exp();
        assert!((h.subgradient(&[1.0, 3.0])[0] - slope).abs() < 1e-15);
        let c = m.reward_handle(8, Position::new(4, Mode::Opened), Action::Close);
        assert_eq!(c.subgradient(&[1.0, 3.0]), vec![0.0]);

        let a = model(EconomicParams::default(), ar1(0.6));
        let h = a.reward_handle(0, Position::new(4, Mode::Opened), Action::Open);
        assert!((h.subgradient(&[1.0, 0.3])[0] - 1.25 * 0.3f64.exp()).abs() < 1e-14);
    }

    #[test]
    fn zero_wastage_and_penalty_match_base_model() {
        let base = model(EconomicParams::default(), ar1(1.0));
        let w0 = model(EconomicParams { wastage: 0.0, ..Default::default() }, ar1(1.0));
        let b0 = model(EconomicParams { penalty: 0.0, ..Default::default() }, ar1(1.0));
        for p in 0..base.n_positions() {
            for a in 0..3 {
                assert_eq!(base.transitions(p, a), w0.transitions(p, a));
                for t in [0, 5, 17, 120] {
                    let z = [1.0, -0.3];
                    let r = SwitchingProblem::reward(&base, t, p, a, &z).to_bits();
                    assert_eq!(r, SwitchingProblem::reward(&w0, t, p, a, &z).to_bits());
                    assert_eq!(r, SwitchingProblem::reward(&b0, t, p, a, &z).to_bits());
                }
            }
        }
    }

    #[test]
    fn reserve_fallback_only_without_penalty() {
        let m = model(EconomicParams::default(), gbm());
        assert_eq!(m.dominated(Position::new(3, Mode::Closed).index()), Some(Position::new(2, Mode::Closed).index()));
        assert_eq!(m.dominated(Position::new(0, Mode::Opened).index()), None);
        let b = model(EconomicParams { penalty: 1.0, ..Default::default() }, gbm());
        assert_eq!(b.dominated(Position::new(3, Mode::Closed).index()), None);
    }
}
