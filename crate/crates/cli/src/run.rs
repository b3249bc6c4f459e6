//! Experiment pipeline shared by the subcommands.

use std::fmt::Write as _;

use rand::Rng;

use cswitch::disturbances::{keyed_rng, simulate_paths, DisturbanceSampling, PathSet, PriceModel, STREAM_GRID};
use cswitch::duality::{csv_row, pathwise_bounds, BoundEstimate, BoundsConfig, CSV_HEADER};
use cswitch::grids::{equidistant_grid, read_grid_csv, stochastic_grid};
use cswitch::model::{Mode, Position, ResourceModel};
use cswitch::pwlc::Grid;
use cswitch::solver::{
    backward_induction_with, policy_boundaries, ContinuationValues, SolverOptions, ValueFunctions,
};

use crate::config::{Config, GridKind};

pub struct Experiment {
    pub cfg: Config,
    pub price: PriceModel,
    pub model: ResourceModel,
}

pub struct Solution {
    pub values: ValueFunctions,
    pub cont: ContinuationValues,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundRow {
    pub z0: f64,
    pub mode: Mode,
    pub estimate: BoundEstimate,
}

pub fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Opened => "opened",
        Mode::Closed => "closed",
    }
}

impl Experiment {
    pub fn new(cfg: Config) -> cswitch::Result<Self> {
        let price = cfg.price_model();
        let model = ResourceModel::new(cfg.economics.clone(), price)?;
        Ok(Self { cfg, price, model })
    }

    pub fn horizon(&self) -> usize {
        self.cfg.economics.horizon_steps()
    }

    /// Pooled states of all time steps of the clustering paths.
    pub fn cloud(&self) -> cswitch::Result<PathSet> {
        let g = &self.cfg.grid;
        // Own stream, so the cloud never coincides with diagnostic paths.
        let seed = keyed_rng(self.cfg.seed, &[STREAM_GRID, 1]).random::<u64>();
        simulate_paths(&self.price, &self.price.initial_state(g.cloud_z0), self.horizon(), g.cloud_paths, seed)
    }

    pub fn grid(&self) -> cswitch::Result<Grid> {
        let g = &self.cfg.grid;
        let grid = match g.kind {
            GridKind::Equidistant => equidistant_grid(g.lo, g.hi, g.points)?,
            GridKind::Stochastic => {
                let cloud = self.cloud()?;
                stochastic_grid(cloud.states(), self.price.dim(), g.points, self.cfg.seed)?
            }
            GridKind::File => {
                let path = g.file.as_deref().unwrap_or_default();
                let f = std::fs::File::open(path)?;
                read_grid_csv(std::io::BufReader::new(f))?
            }
        };
        if grid.dim() != self.price.dim() {
            return Err(cswitch::Error::DimensionMismatch { expected: self.price.dim(), found: grid.dim() });
        }
        Ok(grid)
    }

    pub fn sampling(&self) -> cswitch::Result<DisturbanceSampling> {
        self.price.sampling(self.cfg.sampling.size)
    }

    pub fn solver_options(&self) -> SolverOptions {
        if self.cfg.solver.fast {
            SolverOptions::fast(self.cfg.solver.neighbors)
        } else {
            SolverOptions::exact()
        }
    }

    pub fn solve_on(&self, grid: &Grid) -> cswitch::Result<Solution> {
        let sampling = self.sampling()?;
        let (values, cont) = backward_induction_with(&self.model, grid, &sampling, &self.solver_options())?;
        Ok(Solution { values, cont })
    }

    pub fn solve(&self) -> cswitch::Result<Solution> {
        self.solve_on(&self.grid()?)
    }

    pub fn initial_position(&self, mode: Mode) -> Position {
        let e = &self.cfg.economics;
        Position::new(e.initial_reserve.unwrap_or(e.reserve_units), mode)
    }

    pub fn bounds_config(&self) -> BoundsConfig {
        let d = &self.cfg.diagnostics;
        BoundsConfig {
            paths: d.paths,
            subsims: d.subsims,
            seed: self.cfg.seed,
            locate: d.locate,
            subsampling: d.subsampling,
        }
    }

    pub fn bound(&self, sol: &Solution, z0: f64, mode: Mode) -> cswitch::Result<BoundEstimate> {
        let z = self.price.initial_state(z0);
        let p0 = self.initial_position(mode).index();
        pathwise_bounds(&self.model, &self.price, &sol.values, &sol.cont, p0, &z, &self.bounds_config())
    }

    /// One estimate per configured `(z0, mode)`, prices outermost.
    pub fn bounds(&self, sol: &Solution) -> cswitch::Result<Vec<BoundRow>> {
        let d = &self.cfg.diagnostics;
        let mut rows = Vec::with_capacity(d.z0.len() * d.modes.len());
        for &z0 in &d.z0 {
            for &mode in &d.modes {
                rows.push(BoundRow { z0, mode, estimate: self.bound(sol, z0, mode)? });
            }
        }
        Ok(rows)
    }

    pub fn policy_csv(&self, cont: &ContinuationValues) -> cswitch::Result<String> {
        let p = &self.cfg.diagnostics.policy;
        let step = (p.hi - p.lo) / (p.points - 1) as f64;
        let prices: Vec<f64> =
            (0..p.points).map(|i| if i == p.points - 1 { p.hi } else { p.lo + step * i as f64 }).collect();
        let mut out = String::from("t,mode,reserve,from,to,price\n");
        for &mode in &self.cfg.diagnostics.modes {
            for b in policy_boundaries(p.t, mode, &self.model, cont, &prices)? {
                for s in b.switches {
                    writeln!(out, "{},{},{},{},{},{}", p.t, mode_name(mode), b.reserve, s.from.name(), s.to.name(), s.price)
                        .unwrap();
                }
            }
        }
        Ok(out)
    }

    /// Diagnostic-law paths from the first configured price.
    pub fn paths(&self) -> cswitch::Result<PathSet> {
        self.paths_from(self.cfg.diagnostics.z0.first().copied().unwrap_or(1.0))
    }

    /// The trajectories driving the bounds estimate started at `z0`.
    pub fn paths_from(&self, z0: f64) -> cswitch::Result<PathSet> {
        simulate_paths(&self.price, &self.price.initial_state(z0), self.horizon(), self.cfg.diagnostics.paths, self.cfg.seed)
    }
}

pub fn bounds_csv(name: &str, rows: &[BoundRow], header: bool) -> String {
    let mut out = String::new();
    if header {
        out.push_str(CSV_HEADER);
        out.push('\n');
    }
    for r in rows {
        out.push_str(&csv_row(name, r.z0, mode_name(r.mode), &r.estimate));
        out.push('\n');
    }
    out
}

/// The experiment variants behind each results table, labelled for CSV rows.
pub fn table_variants(table: u8, base: &Config) -> Vec<Config> {
    let with = |label: String, f: &dyn Fn(&mut Config)| {
        let mut c = base.clone();
        f(&mut c);
        c.name = label;
        c
    };
    let set_phi = |c: &mut Config, phi: f64| {
        if let Some(p) = c.model.phi_mut() {
            *p = phi;
        }
    };
    match table {
        1 => vec![base.clone()],
        2 => [1.0, 0.8, 0.6].iter().map(|&phi| with(format!("ar1-phi{phi}"), &|c| set_phi(c, phi))).collect(),
        3 => [1.0, 0.6]
            .iter()
            .flat_map(|&phi| {
                [0.0, 0.5].map(|w| {
                    with(format!("wastage-phi{phi}-w{w}"), &|c| {
                        set_phi(c, phi);
                        c.economics.wastage = w;
                    })
                })
            })
            .collect(),
        4 => [1.0, 0.6]
            .iter()
            .flat_map(|&phi| {
                [0.0, 1.0].map(|b| {
                    with(format!("delivery-phi{phi}-b{b}"), &|c| {
                        set_phi(c, phi);
                        c.economics.wastage = 0.0;
                        c.economics.penalty = b;
                    })
                })
            })
            .collect(),
        5 => [1.0, 0.8, 0.6].iter().map(|&phi| with(format!("garch-phi{phi}"), &|c| set_phi(c, phi))).collect(),
        _ => Vec::new(),
    }
}

pub fn table_preset(table: u8) -> Option<&'static str> {
    Some(match table {
        1 => "gbm-bs",
        2 => "ar1",
        3 => "wastage",
        4 => "delivery",
        5 => "garch",
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset;

    fn tiny() -> Config {
        let mut c = preset("gbm-bs").unwrap();
        c.economics.horizon_years = 1.0;
        c.economics.reserve_units = 3;
        c.grid.hi = 4.0;
        c.grid.points = 41;
        c.sampling.size = 50;
        c.diagnostics.paths = 3;
        c.diagnostics.subsims = 4;
        c.diagnostics.z0 = vec![0.5, 1.0];
        c.diagnostics.policy.points = 21;
        c
    }

    #[test]
    fn bounds_rows_follow_config_order() {
        let e = Experiment::new(tiny()).unwrap();
        let sol = e.solve().unwrap();
        let rows = e.bounds(&sol).unwrap();
        let keys: Vec<(f64, Mode)> = rows.iter().map(|r| (r.z0, r.mode)).collect();
        assert_eq!(keys, vec![(0.5, Mode::Opened), (0.5, Mode::Closed), (1.0, Mode::Opened), (1.0, Mode::Closed)]);
        let csv = bounds_csv("gbm", &rows, true);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().nth(1).unwrap().starts_with("gbm,0.5,opened,"));
        assert!(rows.iter().all(|r| r.estimate.lower_mean <= r.estimate.upper_mean + 1e-9));
    }

    #[test]
    fn zero_reward_model_has_no_thresholds() {
        let mut c = tiny();
        c.economics.revenue_slope = 0.0;
        c.economics.revenue_intercept = 0.0;
        c.economics.maintenance = 0.0;
        c.economics.switching = 0.0;
        let e = Experiment::new(c).unwrap();
        let sol = e.solve().unwrap();
        assert_eq!(e.policy_csv(&sol.cont).unwrap(), "t,mode,reserve,from,to,price\n");
    }

    #[test]
    fn table_variants_cover_the_grid_of_settings() {
        let n: Vec<usize> = (1..=5).map(|t| table_variants(t, &preset(table_preset(t).unwrap()).unwrap()).len()).collect();
        assert_eq!(n, vec![1, 3, 4, 4, 3]);
        let v = table_variants(4, &preset("delivery").unwrap());
        assert_eq!(v[1].name, "delivery-phi1-b1");
        assert_eq!(v[1].economics.penalty, 1.0);
        assert!(table_variants(9, &preset("ar1").unwrap()).is_empty());
    }
}
