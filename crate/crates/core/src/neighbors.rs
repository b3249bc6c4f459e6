//! Nearest-neighbour lookup over point sets in the non-constant coordinates.
//!
//! One-dimensional sets use a sorted array; higher dimensions use a k-d tree.
//! Equal distances are resolved towards the lower point index.

use std::num::NonZero;

use kiddo::{ImmutableKdTree, SquaredEuclidean};

use crate::pwlc::Grid;

enum Tree {
    D2(ImmutableKdTree<f64, 2>),
    D3(ImmutableKdTree<f64, 3>),
    D4(ImmutableKdTree<f64, 4>),
    D5(ImmutableKdTree<f64, 5>),
}

enum Inner {
    Line { xs: Vec<f64>, order: Vec<usize> },
    Tree(Tree),
    Brute,
}

pub struct NeighborIndex {
    dim: usize,
    coords: Vec<f64>,
    inner: Inner,
}

fn to_arrays<const K: usize>(coords: &[f64]) -> Vec<[f64; K]> {
    coords
        .chunks(K)
        .map(|c| {
            let mut a = [0.0; K];
            a.copy_from_slice(c);
            a
        })
        .collect()
}

macro_rules! tree_query {
    ($tree:expr, $k:literal, $y:expr, $n:expr) => {{
        let mut q = [0.0; $k];
        q.copy_from_slice($y);
        $tree
            .nearest_n::<SquaredEuclidean>(&q, NonZero::new($n).unwrap())
            .into_iter()
            .map(|nn| (nn.distance, nn.item as usize))
            .collect::<Vec<_>>()
    }};
}

impl NeighborIndex {
    /// Index over the non-constant coordinates of a grid.
    pub fn from_grid(grid: &Grid) -> Self {
        let d = grid.dim() - 1;
        let mut coords = Vec::with_capacity(grid.len() * d);
        for g in grid.points() {
            coords.extend_from_slice(&g[1..]);
        }
        Self::from_coords(d, coords)
    }

    /// Index over raw points of dimension `dim` (row-major).
    pub fn from_coords(dim: usize, coords: Vec<f64>) -> Self {
        let inner = match dim {
            0 => Inner::Brute,
            1 => {
                let mut order: Vec<usize> = (0..coords.len()).collect();
                order.sort_by(|&a, &b| coords[a].total_cmp(&coords[b]).then(a.cmp(&b)));
                let xs = order.iter().map(|&i| coords[i]).collect();
                Inner::Line { xs, order }
            }
            2 => Inner::Tree(Tree::D2(ImmutableKdTree::new_from_slice(&to_arrays::<2>(&coords)))),
            3 => Inner::Tree(Tree::D3(ImmutableKdTree::new_from_slice(&to_arrays::<3>(&coords)))),
            4 => Inner::Tree(Tree::D4(ImmutableKdTree::new_from_slice(&to_arrays::<4>(&coords)))),
            5 => Inner::Tree(Tree::D5(ImmutableKdTree::new_from_slice(&to_arrays::<5>(&coords)))),
            _ => Inner::Brute,
        };
        Self { dim, coords, inner }
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            return 1;
        }
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn sq_dist(&self, i: usize, y: &[f64]) -> f64 {
        let p = &self.coords[i * self.dim..(i + 1) * self.dim];
        p.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    /// Index of the nearest point to `y` (non-constant coordinates).
    pub fn nearest(&self, y: &[f64]) -> usize {
        match &self.inner {
            Inner::Line { xs, order } => {
                let x = y[0];
                let pos = xs.partition_point(|&v| v < x);
                if pos == 0 {
                    return order[0];
                }
                if pos == xs.len() {
                    return order[xs.len() - 1];
                }
                let dl = x - xs[pos - 1];
                let dr = xs[pos] - x;
                if dl < dr || (dl == dr && order[pos - 1] < order[pos]) {
                    order[pos - 1]
                } else {
                    order[pos]
                }
            }
            _ => {
                let mut out = Vec::with_capacity(1);
                self.nearest_n(y, 1, &mut out);
                out[0]
            }
        }
    }

    /// Nearest point to an augmented state `z` (leading constant dropped).
    #[inline]
    pub fn nearest_state(&self, z: &[f64]) -> usize {
        self.nearest(&z[1..])
    }

    /// The `n` nearest points in order of increasing distance.
    pub fn nearest_n(&self, y: &[f64], n: usize, out: &mut Vec<usize>) {
        out.clear();
        let total = self.len();
        let n = n.min(total);
        if n == 0 {
            return;
        }
        if n == total {
            let mut all: Vec<(f64, usize)> = (0..total).map(|i| (self.sq_dist(i, y), i)).collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            out.extend(all.into_iter().map(|(_, i)| i));
            return;
        }
        match &self.inner {
            Inner::Line { xs, order } => {
                let x = y[0];
                let pos = xs.partition_point(|&v| v < x);
                let (mut l, mut r) = (pos as isize - 1, pos);
                while out.len() < n {
                    let take_left = if l < 0 {
                        false
                    } else if r >= xs.len() {
                        true
                    } else {
                        let dl = x - xs[l as usize];
                        let dr = xs[r] - x;
                        dl < dr || (dl == dr && order[l as usize] < order[r])
                    };
                    if take_left {
                        out.push(order[l as usize]);
                        l -= 1;
                    } else {
                        out.push(order[r]);
                        r += 1;
                    }
                }
            }
            Inner::Tree(tree) => {
                let mut found = match tree {
                    Tree::D2(t) => tree_query!(t, 2, y, n),
                    Tree::D3(t) => tree_query!(t, 3, y, n),
                    Tree::D4(t) => tree_query!(t, 4, y, n),
                    Tree::D5(t) => tree_query!(t, 5, y, n),
                };
                found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                out.extend(found.into_iter().map(|(_, i)| i));
            }
            Inner::Brute => {
                let mut all: Vec<(f64, usize)> = (0..total).map(|i| (self.sq_dist(i, y), i)).collect();
                all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                out.extend(all.into_iter().take(n).map(|(_, i)| i));
            }
        }
    }

    /// For one-dimensional sets: the indices of the points immediately
    /// below and above `x` (both equal to the extreme point outside the
    /// range). `None` for higher dimensions.
    pub fn bracket(&self, x: f64) -> Option<(usize, usize)> {
        match &self.inner {
            Inner::Line { xs, order } => {
                let pos = xs.partition_point(|&v| v < x);
                Some(if pos == 0 {
                    (order[0], order[0])
                } else if pos == xs.len() {
                    (order[pos - 1], order[pos - 1])
                } else {
                    (order[pos - 1], order[pos])
                })
            }
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(coords: &[f64], dim: usize, y: &[f64], n: usize) -> Vec<usize> {
        let mut all: Vec<(f64, usize)> = coords
            .chunks(dim)
            .enumerate()
            .map(|(i, p)| (p.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum(), i))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.into_iter().take(n).map(|(_, i)| i).collect()
    }

    #[test]
    fn line_nearest_and_ties() {
        let idx = NeighborIndex::from_coords(1, vec![2.0, 0.0, 1.0, 3.0]);
        assert_eq!(idx.nearest(&[0.4]), 1);
        assert_eq!(idx.nearest(&[-5.0]), 1);
        assert_eq!(idx.nearest(&[9.0]), 3);
        // halfway between 1.0 (index 2) and 2.0 (index 0): lower index wins
        assert_eq!(idx.nearest(&[1.5]), 0);
        let mut out = Vec::new();
        idx.nearest_n(&[1.4], 3, &mut out);
        assert_eq!(out, vec![2, 0, 1]);
        assert_eq!(idx.bracket(1.4), Some((2, 0)));
        assert_eq!(idx.bracket(-1.0), Some((1, 1)));
        assert_eq!(idx.bracket(7.0), Some((3, 3)));
    }

    #[test]
    fn tree_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for dim in 2..=3 {
            let coords: Vec<f64> = (0..300 * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let idx = NeighborIndex::from_coords(dim, coords.clone());
            let mut out = Vec::new();
            for _ in 0..50 {
                let y: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.2..1.2)).collect();
                idx.nearest_n(&y, 5, &mut out);
                assert_eq!(out, brute(&coords, dim, &y, 5));
                assert_eq!(idx.nearest(&y), out[0]);
            }
        }
    }
}
