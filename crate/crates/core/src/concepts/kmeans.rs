//! Lloyd's k-means with k-means++ seeding.

use rand::Rng;

use crate::error::{Result, VccError};
use crate::rng::rng_for;

/// Row-major point matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Points {
    dim: usize,
    data: Vec<f32>,
}

impl Points {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(VccError::InvalidInput(format!(
                "{} values do not form rows of dimension {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != dim) {
            return Err(VccError::InvalidInput("rows have differing dimensions".into()));
        }
        Self::new(dim, rows.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub max_iter: usize,
    /// Stop once no centroid moves farther than this (Euclidean).
    pub tol: f64,
    /// Independent k-means++ restarts; the lowest objective wins.
    pub restarts: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-6,
            restarts: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// `k` rows of dimension `dim`.
    pub centroids: Vec<Vec<f32>>,
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squared distances.
    pub inertia: f64,
    /// Objective after each assignment step of the winning restart.
    pub objective_trace: Vec<f64>,
}

impl KMeansResult {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.centroids.len()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &c)| {
            let d = x as f64 - c;
            d * d
        })
        .sum()
}

pub fn kmeans(points: &Points, k: usize, seed: u64) -> Result<KMeansResult> {
    kmeans_with(points, k, seed, &KMeansConfig::default())
}

pub fn kmeans_with(points: &Points, k: usize, seed: u64, cfg: &KMeansConfig) -> Result<KMeansResult> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(VccError::InvalidK { k, n });
    }
    let mut best: Option<KMeansResult> = None;
    for restart in 0..cfg.restarts.max(1) {
        let run = lloyd(points, k, seed, restart as u64, cfg);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn plus_plus_init(points: &Points, k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let to_f64 = |i: usize| points.row(i).iter().map(|&v| v as f64).collect::<Vec<f64>>();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![to_f64(first)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            // Rounding can run past the end; fall back to the last positive weight.
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&d| d > 0.0).expect("positive total");
            }
            pick
        } else {
            // All remaining mass is zero: pick uniformly among unchosen points.
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[next] = true;
        let c = to_f64(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), &c));
        }
        centroids.push(c);
    }
    centroids
}

fn assign(points: &Points, centroids: &[Vec<f64>], assignments: &mut [usize]) -> f64 {
    let mut objective = 0.0;
    for (i, a) in assignments.iter_mut().enumerate() {
        let row = points.row(i);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, centroid) in centroids.iter().enumerate() {
            let d = sq_dist(row, centroid);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        *a = best;
        objective += best_d;
    }
    objective
}

/// Moves the point farthest from its centroid into each empty cluster.
fn repair_empty(points: &Points, centroids: &mut [Vec<f64>], assignments: &mut [usize]) {
    let k = centroids.len();
    loop {
        let mut sizes = vec![0usize; k];
        for &a in assignments.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let mut far = None;
        let mut far_d = -1.0;
        for (i, &a) in assignments.iter().enumerate() {
            if sizes[a] < 2 {
                continue;
            }
            let d = sq_dist(points.row(i), &centroids[a]);
            if d > far_d {
                far_d = d;
                far = Some(i);
            }
        }
        let i = far.expect("k <= n guarantees a donor cluster");
        assignments[i] = empty;
        centroids[empty] = points.row(i).iter().map(|&v| v as f64).collect();
    }
}

fn update(points: &Points, k: usize, assignments: &[usize]) -> Vec<Vec<f64>> {
    let dim = points.dim();
    let mut sums = vec![vec![0.0f64; dim]; k];
    let mut counts = vec![0usize; k];
    for (i, &a) in assignments.iter().enumerate() {
        counts[a] += 1;
        for (s, &v) in sums[a].iter_mut().zip(points.row(i)) {
            *s += v as f64;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        for v in s.iter_mut() {
            *v /= c as f64;
        }
    }
    sums
}

/// Single-point moves that strictly lower the objective, each with its
/// centroids updated exactly. A partition with no such move is also a Lloyd
/// fixed point. Returns whether anything moved.
fn hartigan_pass(points: &Points, centroids: &mut [Vec<f64>], assignments: &mut [usize], max_sweeps: usize) -> bool {
    let k = centroids.len();
    let mut sizes = vec![0usize; k];
    for &a in assignments.iter() {
        sizes[a] += 1;
    }
    let mut moved_any = false;
    for _ in 0..max_sweeps.max(1) {
        let mut moved = false;
        for i in 0..points.len() {
            let from = assignments[i];
            if sizes[from] < 2 {
                continue;
            }
            let row = points.row(i);
            let na = sizes[from] as f64;
            let removal = na / (na - 1.0) * sq_dist(row, &centroids[from]);
            let mut best = None;
            let mut best_gain = 1e-12 * (1.0 + removal);
            for (to, c) in centroids.iter().enumerate() {
                if to == from {
                    continue;
                }
                let nb = sizes[to] as f64;
                let gain = removal - nb / (nb + 1.0) * sq_dist(row, c);
                if gain > best_gain {
                    best_gain = gain;
                    best = Some(to);
                }
            }
            if let Some(to) = best {
                let (na, nb) = (sizes[from] as f64, sizes[to] as f64);
                for (d, &v) in row.iter().enumerate() {
                    let v = v as f64;
                    centroids[from][d] = (centroids[from][d] * na - v) / (na - 1.0);
                    centroids[to][d] = (centroids[to][d] * nb + v) / (nb + 1.0);
                }
                sizes[from] -= 1;
                sizes[to] += 1;
                assignments[i] = to;
                moved = true;
            }
        }
        if !moved {
            break;
        }
        moved_any = true;
    }
    if moved_any {
        // Recompute exactly to shed incremental rounding.
        let exact = update(points, k, assignments);
        centroids.clone_from_slice(&exact);
    }
    moved_any
}

fn lloyd(points: &Points, k: usize, seed: u64, restart: u64, cfg: &KMeansConfig) -> KMeansResult {
    let mut rng = rng_for(seed, &[crate::rng::tag("kmeans"), restart]);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let mut assignments = vec![0usize; points.len()];
    let mut trace = Vec::new();
    for _ in 0..cfg.max_iter.max(1) {
        assign(points, &centroids, &mut assignments);
        repair_empty(points, &mut centroids, &mut assignments);
        let updated = update(points, k, &assignments);
        let shift = centroids
            .iter()
            .zip(&updated)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        trace.push(objective(points, &centroids, &assignments));
        if shift < cfg.tol {
            break;
        }
    }
    // Final assignment against the converged centroids keeps the two consistent.
    let before = assignments.clone();
    assign(points, &centroids, &mut assignments);
    repair_empty(points, &mut centroids, &mut assignments);
    if assignments != before {
        centroids = update(points, k, &assignments);
        trace.push(objective(points, &centroids, &assignments));
    }
    if hartigan_pass(points, &mut centroids, &mut assignments, cfg.max_iter) {
        trace.push(objective(points, &centroids, &assignments));
    }
    let inertia = objective(points, &centroids, &assignments);
    KMeansResult {
        centroids: centroids
            .into_iter()
            .map(|c| c.into_iter().map(|v| v as f32).collect())
            .collect(),
        assignments,
        inertia,
        objective_trace: trace,
    }
}

fn objective(points: &Points, centroids: &[Vec<f64>], assignments: &[usize]) -> f64 {
    assignments
        .iter()
        .enumerate()
        .map(|(i, &a)| sq_dist(points.row(i), &centroids[a]))
        .sum()
}
