//! Grid construction: equidistant grids for scalar states and k-means
//! grids for clouds of simulated multi-dimensional states.

use std::io::{BufRead, Write};

use rand::Rng;
use rayon::prelude::*;

use crate::disturbances::{keyed_rng, STREAM_GRID};
use crate::error::{Error, Result};
use crate::neighbors::NeighborIndex;
use crate::pwlc::Grid;

const KMEANS_MAX_ITER: usize = 100;
const KMEANS_TOL: f64 = 1e-6;

/// `m` evenly spaced points `(1, x)` with `x` from `lo` to `hi` inclusive.
pub fn equidistant_grid(lo: f64, hi: f64, m: usize) -> Result<Grid> {
    if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
        return Err(Error::InvalidGrid(format!("need finite lo < hi, got [{lo}, {hi}]")));
    }
    if m < 2 {
        return Err(Error::InvalidGrid(format!("need at least 2 points, got {m}")));
    }
    let step = (hi - lo) / (m - 1) as f64;
    let mut pts = Vec::with_capacity(2 * m);
    for i in 0..m {
        let x = if i == m - 1 { hi } else { lo + step * i as f64 };
        pts.push(1.0);
        pts.push(x);
    }
    Grid::new(2, pts)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn distinct_count(pts: &[f64], d: usize) -> usize {
    let mut rows: Vec<&[f64]> = pts.chunks(d).collect();
    rows.sort_by(|a, b| {
        a.iter().zip(*b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
    });
    rows.dedup();
    rows.len()
}

/// k-means++ seeding followed by Lloyd iterations on the non-constant
/// coordinates of `cloud` (row-major, `dim` columns, leading 1s).
pub fn stochastic_grid(cloud: &[f64], dim: usize, k: usize, seed: u64) -> Result<Grid> {
    if dim < 2 || !cloud.len().is_multiple_of(dim) {
        return Err(Error::InvalidGrid("cloud must be row-major with dim >= 2".into()));
    }
    if k == 0 {
        return Err(Error::InvalidGrid("k must be at least 1".into()));
    }
    if cloud.chunks(dim).any(|z| z[0] != 1.0) {
        return Err(Error::InvalidGrid("cloud points must have constant coordinate 1".into()));
    }
    let d = dim - 1;
    let pts: Vec<f64> = cloud.chunks(dim).flat_map(|z| z[1..].iter().copied()).collect();
    let n = pts.len() / d;
    let distinct = distinct_count(&pts, d);
    if distinct < k {
        return Err(Error::NotEnoughPoints { needed: k, found: distinct });
    }
    let point = |i: usize| &pts[i * d..(i + 1) * d];

    let mut rng = keyed_rng(seed, &[STREAM_GRID]);
    let mut centers: Vec<f64> = Vec::with_capacity(k * d);
    let first = rng.random_range(0..n);
    centers.extend_from_slice(point(first));
    let mut best: Vec<f64> = (0..n).into_par_iter().map(|i| sq_dist(point(i), point(first))).collect();
    for _ in 1..k {
        let total: f64 = best.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, &w) in best.iter().enumerate() {
            if w > 0.0 {
                pick = Some(i);
                if u < w {
                    break;
                }
                u -= w;
            }
        }
        let c = pick.expect("a point at positive distance exists");
        let cp = point(c).to_vec();
        centers.extend_from_slice(&cp);
        best.par_iter_mut().enumerate().for_each(|(i, b)| {
            let s = sq_dist(point(i), &cp);
            if s < *b {
                *b = s;
            }
        });
    }

    let mut assign = vec![0usize; n];
    for _ in 0..KMEANS_MAX_ITER {
        let index = NeighborIndex::from_coords(d, centers.clone());
        assign.par_iter_mut().enumerate().for_each(|(i, a)| *a = index.nearest(point(i)));
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, x) in sums[a * d..(a + 1) * d].iter_mut().zip(point(i)) {
                *s += x;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let old = &mut centers[c * d..(c + 1) * d];
            let scale = old.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
            let mut moved = 0.0;
            for (o, s) in old.iter_mut().zip(&sums[c * d..(c + 1) * d]) {
                let new = s / counts[c] as f64;
                moved += (new - *o) * (new - *o);
                *o = new;
            }
            shift = shift.max(moved.sqrt() / scale);
        }
        if shift < KMEANS_TOL {
            break;
        }
    }

    separate_duplicates(&mut centers, d);
    let mut out = Vec::with_capacity(k * dim);
    for c in centers.chunks(d) {
        out.push(1.0);
        out.extend_from_slice(c);
    }
    Grid::new(dim, out)
}

fn separate_duplicates(centers: &mut [f64], d: usize) {
    let k = centers.len() / d;
    let mut seen: std::collections::HashSet<Vec<u64>> = std::collections::HashSet::new();
    for c in 0..k {
        loop {
            let key: Vec<u64> = centers[c * d..(c + 1) * d].iter().map(|x| x.to_bits()).collect();
            if seen.insert(key) {
                break;
            }
            let x = &mut centers[c * d];
            *x = x.next_up();
        }
    }
}

/// One point per line, constant coordinate included.
pub fn write_grid_csv<W: Write>(grid: &Grid, mut out: W) -> Result<()> {
    let header: Vec<String> = (0..grid.dim()).map(|i| format!("z{i}")).collect();
    writeln!(out, "{}", header.join(","))?;
    for g in grid.points() {
        let row: Vec<String> = g.iter().map(|x| format!("{x:e}")).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn read_grid_csv<R: BufRead>(input: R) -> Result<Grid> {
    let mut rows = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.starts_with('z')) {
            continue;
        }
        let row = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::Format(format!("grid line {}: {e}", n + 1)))?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::InvalidGrid("empty grid file".into()));
    }
    Grid::from_points(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::StandardNormal;

    #[test]
    fn equidistant_examples() {
        let g = equidistant_grid(0.0, 20.0, 4001).unwrap();
        assert_eq!(g.len(), 4001);
        assert_eq!(g.point(0), &[1.0, 0.0]);
        assert_eq!(g.point(4000), &[1.0, 20.0]);
        for i in 1..4001 {
            assert!((g.point(i)[1] - g.point(i - 1)[1] - 0.005).abs() < 1e-12);
        }
        let a = equidistant_grid(-5.0, 5.0, 2000).unwrap();
        assert_eq!(a.point(0)[1], -5.0);
        assert_eq!(a.point(1999)[1], 5.0);
        let t = equidistant_grid(0.0, 1.0, 2).unwrap();
        assert_eq!(t.as_slice(), &[1.0, 0.0, 1.0, 1.0]);
        assert!(equidistant_grid(1.0, 1.0, 5).is_err());
        assert!(equidistant_grid(0.0, 1.0, 1).is_err());
    }

    #[test]
    fn kmeans_on_exact_k_points_returns_them() {
        let cloud = vec![1.0, 0.0, 0.0, 1.0, 1.0, 2.0, 1.0, 5.0, -1.0, 1.0, 3.0, 3.0];
        let g = stochastic_grid(&cloud, 3, 4, 9).unwrap();
        let mut got: Vec<Vec<f64>> = g.points().map(|p| p.to_vec()).collect();
        let mut want: Vec<Vec<f64>> = cloud.chunks(3).map(|p| p.to_vec()).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
    }

    #[test]
    fn kmeans_separates_blobs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 500;
        let sigma = 0.1;
        let mut cloud = Vec::new();
        let mut means = [[0.0; 2]; 2];
        for (b, centre) in [[0.0, 0.0], [10.0, 10.0]].iter().enumerate() {
            for _ in 0..n {
                cloud.push(1.0);
                for j in 0..2 {
                    let x = centre[j] + sigma * rng.sample::<f64, _>(StandardNormal);
                    means[b][j] += x / n as f64;
                    cloud.push(x);
                }
            }
        }
        let g = stochastic_grid(&cloud, 3, 2, 1).unwrap();
        for mean in means {
            let close = g.points().any(|p| {
                (p[1] - mean[0]).abs() < 3.0 * sigma / (n as f64).sqrt()
                    && (p[2] - mean[1]).abs() < 3.0 * sigma / (n as f64).sqrt()
            });
            assert!(close, "no centroid near {mean:?}");
        }
    }

    #[test]
    fn kmeans_is_deterministic_and_checks_input() {
        let cloud: Vec<f64> = (0..200).flat_map(|i| [1.0, (i as f64 * 0.37).sin(), (i % 7) as f64]).collect();
        let a = stochastic_grid(&cloud, 3, 20, 5).unwrap();
        let b = stochastic_grid(&cloud, 3, 20, 5).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
        assert!(a.points().all(|p| p[0] == 1.0));
        let dup = vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        assert!(matches!(stochastic_grid(&dup, 2, 3, 0), Err(Error::NotEnoughPoints { .. })));
    }

    #[test]
    fn csv_round_trip() {
        let g = equidistant_grid(-1.0, 2.0, 7).unwrap();
        let mut buf = Vec::new();
        write_grid_csv(&g, &mut buf).unwrap();
        let back = read_grid_csv(buf.as_slice()).unwrap();
        assert_eq!(back.as_slice(), g.as_slice());
    }
}
