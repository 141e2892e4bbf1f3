//! Farthest point sampling, exact k-nearest-neighbour search and the
//! normalized Gaussian kernel that weights anchors.

use crate::error::{Error, Result};
use crate::math::{self, Vec3};
use crate::par;

/// Above this many reference points KNN switches to a uniform grid.
pub const GRID_THRESHOLD: usize = 5000;

/// The anchors driving one Gaussian and their normalized weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorNeighborhood {
    pub gaussian: usize,
    pub anchors: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Deterministic farthest point sampling. Starts at the lexicographically
/// smallest point; every later pick maximizes the distance to the set
/// picked so far. Ties go to the smaller index.
///
/// `_seed` is accepted for interface stability; the rule is deterministic.
pub fn farthest_point_sample(points: &[Vec3], m: usize, _seed: u64) -> Result<Vec<usize>> {
    if points.is_empty() {
        return Err(Error::invalid("farthest point sampling needs at least one point"));
    }
    if m > points.len() {
        return Err(Error::invalid(format!(
            "cannot sample {m} of {} points",
            points.len()
        )));
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let mut start = 0;
    for (i, p) in points.iter().enumerate().skip(1) {
        if lex_less(p, &points[start]) {
            start = i;
        }
    }
    let mut picked = vec![false; points.len()];
    let mut min_d2: Vec<f64> = points
        .iter()
        .map(|p| math::norm_sq(math::sub(*p, points[start])))
        .collect();
    picked[start] = true;
    let mut out = Vec::with_capacity(m);
    out.push(start);
    while out.len() < m {
        let mut best: Option<usize> = None;
        for i in 0..points.len() {
            if picked[i] {
                continue;
            }
            match best {
                Some(b) if min_d2[i] <= min_d2[b] => {}
                _ => best = Some(i),
            }
        }
        let b = best.expect("m <= points.len() leaves an unpicked point");
        picked[b] = true;
        out.push(b);
        for (i, p) in points.iter().enumerate() {
            let d2 = math::norm_sq(math::sub(*p, points[b]));
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
        }
    }
    Ok(out)
}

fn lex_less(a: &Vec3, b: &Vec3) -> bool {
    for c in 0..3 {
        if a[c] < b[c] {
            return true;
        }
        if a[c] > b[c] {
            return false;
        }
    }
    false
}

/// Exact k nearest neighbours of every query, sorted by distance with ties
/// broken by the smaller reference index.
pub fn knn(queries: &[Vec3], refs: &[Vec3], k: usize) -> Result<Vec<Vec<usize>>> {
    if k > refs.len() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds the {} reference points",
            refs.len()
        )));
    }
    if k == 0 {
        return Ok(vec![Vec::new(); queries.len()]);
    }
    if refs.len() > GRID_THRESHOLD {
        let grid = Grid::new(refs);
        Ok(par::map_slice(queries, |q| grid.knn(refs, *q, k)))
    } else {
        Ok(par::map_slice(queries, |q| knn_scan(refs, *q, k)))
    }
}

fn knn_scan(refs: &[Vec3], q: Vec3, k: usize) -> Vec<usize> {
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for (i, r) in refs.iter().enumerate() {
        insert_candidate(&mut best, k, math::norm_sq(math::sub(*r, q)), i);
    }
    best.into_iter().map(|(_, i)| i).collect()
}

/// Keeps `best` sorted by (distance, index) and at most `k` long.
fn insert_candidate(best: &mut Vec<(f64, usize)>, k: usize, d2: f64, i: usize) {
    if best.len() == k {
        let last = best[k - 1];
        if (d2, i) >= last {
            return;
        }
    }
    let pos = best.partition_point(|&c| c < (d2, i));
    best.insert(pos, (d2, i));
    best.truncate(k);
}

struct Grid {
    origin: Vec3,
    cell: f64,
    dims: [usize; 3],
    cells: Vec<Vec<usize>>,
}

impl Grid {
    fn new(refs: &[Vec3]) -> Self {
        let mut lo = refs[0];
        let mut hi = refs[0];
        for p in refs {
            for c in 0..3 {
                lo[c] = lo[c].min(p[c]);
                hi[c] = hi[c].max(p[c]);
            }
        }
        let ext = math::sub(hi, lo);
        let volume = ext.iter().map(|e| e.max(1e-9)).product::<f64>();
        let cell = (4.0 * volume / refs.len() as f64).cbrt().max(1e-9);
        let dims = ext.map(|e| ((e / cell).floor() as usize + 1).min(1 << 10));
        let mut cells = vec![Vec::new(); dims[0] * dims[1] * dims[2]];
        let mut grid = Self {
            origin: lo,
            cell,
            dims,
            cells: Vec::new(),
        };
        for (i, p) in refs.iter().enumerate() {
            let c = grid.cell_of(*p);
            cells[grid.flat(c)].push(i);
        }
        grid.cells = cells;
        grid
    }

    fn cell_of(&self, p: Vec3) -> [usize; 3] {
        let mut out = [0; 3];
        for c in 0..3 {
            let f = ((p[c] - self.origin[c]) / self.cell).floor();
            out[c] = (f.max(0.0) as usize).min(self.dims[c] - 1);
        }
        out
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    fn knn(&self, refs: &[Vec3], q: Vec3, k: usize) -> Vec<usize> {
        let center = self.cell_of(q);
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        let max_ring = *self.dims.iter().max().unwrap();
        for ring in 0..=max_ring {
            let lo: Vec<i64> = (0..3).map(|c| center[c] as i64 - ring as i64).collect();
            let hi: Vec<i64> = (0..3).map(|c| center[c] as i64 + ring as i64).collect();
            for z in lo[2]..=hi[2] {
                for y in lo[1]..=hi[1] {
                    for x in lo[0]..=hi[0] {
                        let on_shell = x == lo[0] || x == hi[0] || y == lo[1] || y == hi[1] || z == lo[2] || z == hi[2];
                        if !on_shell || x < 0 || y < 0 || z < 0 {
                            continue;
                        }
                        let c = [x as usize, y as usize, z as usize];
                        if c[0] >= self.dims[0] || c[1] >= self.dims[1] || c[2] >= self.dims[2] {
                            continue;
                        }
                        for &i in &self.cells[self.flat(c)] {
                            insert_candidate(&mut best, k, math::norm_sq(math::sub(refs[i], q)), i);
                        }
                    }
                }
            }
            let covers_all = (0..3).all(|c| lo[c] <= 0 && hi[c] >= self.dims[c] as i64 - 1);
            if covers_all {
                break;
            }
            if best.len() == k {
                // Distance from q to the outside of the searched cell block.
                let mut clearance = f64::INFINITY;
                for c in 0..3 {
                    if lo[c] > 0 {
                        clearance = clearance.min(q[c] - (self.origin[c] + lo[c] as f64 * self.cell));
                    }
                    if hi[c] < self.dims[c] as i64 - 1 {
                        clearance = clearance.min(self.origin[c] + (hi[c] + 1) as f64 * self.cell - q[c]);
                    }
                }
                let clearance = clearance.max(0.0);
                // Strict: a point exactly at the clearance could still win a tie.
                if best[k - 1].0 < clearance * clearance {
                    break;
                }
            }
        }
        best.into_iter().map(|(_, i)| i).collect()
    }
}

/// Normalized Gaussian kernel weights `exp(−‖μ−x_i‖²/ρ_i²)` over one
/// neighbourhood, evaluated with max-subtraction.
pub fn influence_weights(mu: Vec3, neighbors: &[(Vec3, f64)]) -> Vec<f64> {
    let logits: Vec<f64> = neighbors
        .iter()
        .map(|(x, rho)| -math::norm_sq(math::sub(mu, *x)) / (rho * rho))
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Builds the neighbourhood of every Gaussian over one anchor set.
pub fn neighborhoods(
    gaussians: &[Vec3],
    anchors: &[Vec3],
    rhos: &[f64],
    k: usize,
) -> Result<Vec<AnchorNeighborhood>> {
    let idx = knn(gaussians, anchors, k.min(anchors.len()))?;
    Ok(idx
        .into_iter()
        .enumerate()
        .map(|(j, anchors_j)| {
            let nb: Vec<(Vec3, f64)> = anchors_j.iter().map(|&i| (anchors[i], rhos[i])).collect();
            let weights = influence_weights(gaussians[j], &nb);
            AnchorNeighborhood {
                gaussian: j,
                anchors: anchors_j,
                weights,
            }
        })
        .collect())
}

/// Initial influence scale per anchor: mean distance to its three nearest
/// other anchors.
pub fn initial_rho(anchors: &[Vec3]) -> Vec<f64> {
    if anchors.len() < 2 {
        return vec![1.0; anchors.len()];
    }
    let k = 4.min(anchors.len());
    let nn = knn(anchors, anchors, k).expect("k bounded by anchor count");
    nn.iter()
        .enumerate()
        .map(|(i, list)| {
            let others: Vec<f64> = list
                .iter()
                .filter(|&&j| j != i)
                .take(3)
                .map(|&j| math::norm(math::sub(anchors[i], anchors[j])))
                .collect();
            let mean = others.iter().sum::<f64>() / others.len() as f64;
            if mean > 0.0 {
                mean
            } else {
                1.0
            }
        })
        .collect()
}
