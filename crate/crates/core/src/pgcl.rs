//! Pseudo-label guided contrastive learning.
//!
//! Fused encodings `R = (r + r') / 2` are clustered with k-means. Each sample
//! gets the confidence `exp(-|R_i - c_p|^2)` with respect to its centroid,
//! the most confident fraction of every cluster forms the contrastive sets,
//! and the loss pulls same-cluster cross-view encodings together while
//! pushing the high-confidence centroids apart in angle.

use std::cmp::Ordering;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TfecError};

/// Added to the cosine denominator so zero-norm centroids stay finite.
pub const COSINE_EPS: f64 = 1e-12;

pub fn fuse_views(r: ArrayView2<'_, f64>, r_prime: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if r.dim() != r_prime.dim() {
        return Err(TfecError::Shape(format!(
            "view encodings {:?} vs {:?}",
            r.dim(),
            r_prime.dim()
        )));
    }
    Ok((&r + &r_prime) * 0.5)
}

/// `exp(-|R_i - c_p|^2)`.
pub fn confidence(point: ArrayView1<'_, f64>, centroid: ArrayView1<'_, f64>) -> f64 {
    (-squared_distance(point, centroid)).exp()
}

fn squared_distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iter: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            max_iter: 100,
            restarts: 10,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    /// `K x D`.
    pub centroids: Array2<f64>,
    pub assignments: Vec<usize>,
    pub confidences: Vec<f64>,
    /// Per cluster, the indices kept as high-confidence members.
    pub highconf: Vec<Vec<usize>>,
    /// Mean fused encoding of each high-confidence set (`K x D`).
    pub highconf_centroids: Array2<f64>,
    pub wcss: f64,
    /// WCSS after every assignment step of the winning run.
    pub wcss_trace: Vec<f64>,
}

impl ClusterState {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

/// Lexicographic row order, used so results do not depend on input order.
fn canonical_order(points: ArrayView2<'_, f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.nrows()).collect();
    order.sort_by(|&a, &b| {
        points
            .row(a)
            .iter()
            .zip(points.row(b).iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

fn assign(points: ArrayView2<'_, f64>, centroids: ArrayView2<'_, f64>) -> Vec<usize> {
    points
        .axis_iter(Axis(0))
        .map(|p| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.axis_iter(Axis(0)).enumerate() {
                let d = squared_distance(p, centroid);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            best
        })
        .collect()
}

fn wcss(points: ArrayView2<'_, f64>, centroids: ArrayView2<'_, f64>, assignments: &[usize]) -> f64 {
    points
        .axis_iter(Axis(0))
        .zip(assignments)
        .map(|(p, &a)| squared_distance(p, centroids.row(a)))
        .sum()
}

fn means(points: ArrayView2<'_, f64>, assignments: &[usize], k: usize) -> (Array2<f64>, Vec<usize>) {
    let mut sums = Array2::zeros((k, points.ncols()));
    let mut counts = vec![0usize; k];
    for (p, &a) in points.axis_iter(Axis(0)).zip(assignments) {
        let mut row = sums.row_mut(a);
        row += &p;
        counts[a] += 1;
    }
    for (mut row, &c) in sums.axis_iter_mut(Axis(0)).zip(&counts) {
        if c > 0 {
            row /= c as f64;
        }
    }
    (sums, counts)
}

/// Centroid update with empty-cluster repair: each empty cluster takes the
/// point farthest from its own centroid (among clusters with several members).
fn update_centroids(
    points: ArrayView2<'_, f64>,
    centroids: ArrayView2<'_, f64>,
    assignments: &mut [usize],
    k: usize,
) -> Array2<f64> {
    let (_, mut counts) = means(points, assignments, k);
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let donor = (0..points.nrows())
            .filter(|&i| counts[assignments[i]] > 1)
            .map(|i| (i, squared_distance(points.row(i), centroids.row(assignments[i]))))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((i, _)) = donor {
            counts[assignments[i]] -= 1;
            assignments[i] = empty;
            counts[empty] = 1;
        }
    }
    let (mut updated, counts) = means(points, assignments, k);
    for c in 0..k {
        if counts[c] == 0 {
            updated.row_mut(c).assign(&centroids.row(c));
        }
    }
    updated
}

struct LloydRun {
    centroids: Array2<f64>,
    assignments: Vec<usize>,
    trace: Vec<f64>,
}

fn lloyd(points: ArrayView2<'_, f64>, init: Array2<f64>, max_iter: usize) -> LloydRun {
    let k = init.nrows();
    let mut centroids = init;
    let mut assignments = assign(points, centroids.view());
    let mut trace = vec![wcss(points, centroids.view(), &assignments)];
    for _ in 0..max_iter {
        centroids = update_centroids(points, centroids.view(), &mut assignments, k);
        let next = assign(points, centroids.view());
        trace.push(wcss(points, centroids.view(), &next));
        if next == assignments {
            break;
        }
        assignments = next;
    }
    LloydRun {
        centroids,
        assignments,
        trace,
    }
}

fn plus_plus_init<R: Rng + ?Sized>(points: ArrayView2<'_, f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let n = points.nrows();
    let mut centroids = Array2::zeros((k, points.ncols()));
    centroids.row_mut(0).assign(&points.row(rng.random_range(0..n)));
    let mut nearest: Vec<f64> = (0..n)
        .map(|i| squared_distance(points.row(i), centroids.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&points.row(pick));
        for i in 0..n {
            nearest[i] = nearest[i].min(squared_distance(points.row(i), centroids.row(c)));
        }
    }
    centroids
}

fn finish(points: ArrayView2<'_, f64>, order: &[usize], run: LloydRun) -> ClusterState {
    let n = order.len();
    let mut assignments = vec![0; n];
    for (sorted_pos, &original) in order.iter().enumerate() {
        assignments[original] = run.assignments[sorted_pos];
    }
    let confidences = (0..n)
        .map(|i| confidence(points.row(i), run.centroids.row(assignments[i])))
        .collect();
    let wcss = *run.trace.last().expect("at least one assignment step");
    ClusterState {
        highconf_centroids: run.centroids.clone(),
        centroids: run.centroids,
        highconf: Vec::new(),
        assignments,
        confidences,
        wcss,
        wcss_trace: run.trace,
    }
}

/// k-means++ seeding and Lloyd iterations, best of `restarts` runs by WCSS.
///
/// Points are processed in a canonical row order, so relabelling the input
/// permutes the assignments the same way.
pub fn kmeans(points: ArrayView2<'_, f64>, cfg: &KMeansConfig) -> Result<ClusterState> {
    let n = points.nrows();
    if cfg.k == 0 || cfg.k > n {
        return Err(TfecError::config(format!(
            "k = {} clusters for {n} points",
            cfg.k
        )));
    }
    let order = canonical_order(points);
    let sorted = points.select(Axis(0), &order);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<LloydRun> = None;
    for _ in 0..cfg.restarts.max(1) {
        let init = plus_plus_init(sorted.view(), cfg.k, &mut rng);
        let run = lloyd(sorted.view(), init, cfg.max_iter);
        let better = match &best {
            None => true,
            Some(b) => run.trace.last() < b.trace.last(),
        };
        if better {
            best = Some(run);
        }
    }
    Ok(finish(points, &order, best.expect("at least one restart")))
}

/// Lloyd iterations started from given centroids; cluster indices stay
/// aligned with the rows of `init`.
pub fn kmeans_warm(
    points: ArrayView2<'_, f64>,
    init: ArrayView2<'_, f64>,
    max_iter: usize,
) -> Result<ClusterState> {
    if init.ncols() != points.ncols() {
        return Err(TfecError::Shape(format!(
            "centroid dimension {} vs point dimension {}",
            init.ncols(),
            points.ncols()
        )));
    }
    if init.nrows() == 0 || init.nrows() > points.nrows() {
        return Err(TfecError::config(format!(
            "k = {} clusters for {} points",
            init.nrows(),
            points.nrows()
        )));
    }
    let order = canonical_order(points);
    let sorted = points.select(Axis(0), &order);
    let run = lloyd(sorted.view(), init.to_owned(), max_iter);
    Ok(finish(points, &order, run))
}

/// Keeps, per cluster, the `ceil(q * n_p)` most confident members (ties to the
/// lower index) and sets each high-confidence centroid to their mean.
pub fn select_high_confidence(
    state: &mut ClusterState,
    points: ArrayView2<'_, f64>,
    q: f64,
) -> Result<()> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(TfecError::config(format!("confidence fraction {q} must lie in (0, 1]")));
    }
    if points.nrows() != state.assignments.len() {
        return Err(TfecError::Shape("points do not match the cluster state".into()));
    }
    let k = state.k();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &a) in state.assignments.iter().enumerate() {
        members[a].push(i);
    }
    let mut centroids = state.centroids.clone();
    let mut highconf = Vec::with_capacity(k);
    for (p, mut cluster) in members.into_iter().enumerate() {
        cluster.sort_by(|&a, &b| {
            state.confidences[b]
                .total_cmp(&state.confidences[a])
                .then(a.cmp(&b))
        });
        let keep = (q * cluster.len() as f64).ceil() as usize;
        cluster.truncate(keep.min(cluster.len()));
        cluster.sort_unstable();
        if !cluster.is_empty() {
            let mut mean = Array1::zeros(points.ncols());
            for &i in &cluster {
                mean += &points.row(i);
            }
            mean /= cluster.len() as f64;
            centroids.row_mut(p).assign(&mean);
        }
        highconf.push(cluster);
    }
    state.highconf = highconf;
    state.highconf_centroids = centroids;
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ContrastivePairs {
    /// `(i, j)`: view-a encoding of `i` against view-b encoding of `j`.
    pub positives: Vec<(usize, usize)>,
    /// Unordered pairs of distinct clusters, `p < q`.
    pub negatives: Vec<(usize, usize)>,
}

/// Positives are every cross-view pair inside a high-confidence set, the self
/// pair included; negatives are every pair of clusters whose sets are non-empty.
pub fn build_pairs(highconf: &[Vec<usize>]) -> ContrastivePairs {
    let mut pairs = ContrastivePairs::default();
    for set in highconf {
        for &i in set {
            for &j in set {
                pairs.positives.push((i, j));
            }
        }
    }
    let live: Vec<usize> = (0..highconf.len())
        .filter(|&p| !highconf[p].is_empty())
        .collect();
    for (a, &p) in live.iter().enumerate() {
        for &q in &live[a + 1..] {
            pairs.negatives.push((p, q));
        }
    }
    pairs
}

#[derive(Debug, Clone)]
pub struct ContrastiveOutput {
    pub loss: f64,
    pub positive_term: f64,
    pub negative_term: f64,
    /// `d loss / d r`, `N x D`.
    pub grad_r: Array2<f64>,
    /// `d loss / d r'`, `N x D`.
    pub grad_r_prime: Array2<f64>,
}

/// Mean cross-view squared distance over positives plus `alpha` times the mean
/// cosine similarity between high-confidence centroids over negatives.
///
/// Centroids are recomputed here as means of the fused encodings of each
/// `highconf` set, so the repulsion term is differentiable in `r` and `r'`.
pub fn contrastive_loss(
    pairs: &ContrastivePairs,
    r: ArrayView2<'_, f64>,
    r_prime: ArrayView2<'_, f64>,
    highconf: &[Vec<usize>],
    alpha: f64,
) -> Result<ContrastiveOutput> {
    if r.dim() != r_prime.dim() {
        return Err(TfecError::Shape(format!(
            "view encodings {:?} vs {:?}",
            r.dim(),
            r_prime.dim()
        )));
    }
    let (n, d) = r.dim();
    let mut grad_r = Array2::zeros((n, d));
    let mut grad_rp = Array2::zeros((n, d));

    let mut positive_term = 0.0;
    if !pairs.positives.is_empty() {
        let scale = 1.0 / pairs.positives.len() as f64;
        for &(i, j) in &pairs.positives {
            let diff = &r.row(i) - &r_prime.row(j);
            positive_term += diff.dot(&diff);
            let g = diff * (2.0 * scale);
            let mut gi = grad_r.row_mut(i);
            gi += &g;
            let mut gj = grad_rp.row_mut(j);
            gj -= &g;
        }
        positive_term *= scale;
    }

    let mut negative_term = 0.0;
    if !pairs.negatives.is_empty() {
        let k = highconf.len();
        let mut centroids = Array2::zeros((k, d));
        for (p, set) in highconf.iter().enumerate() {
            if set.is_empty() {
                continue;
            }
            let mut row = centroids.row_mut(p);
            for &i in set {
                row += &r.row(i);
                row += &r_prime.row(i);
            }
            row /= 2.0 * set.len() as f64;
        }
        let mut grad_c: Array2<f64> = Array2::zeros((k, d));
        let scale = alpha / pairs.negatives.len() as f64;
        for &(p, q) in &pairs.negatives {
            let cp = centroids.row(p);
            let cq = centroids.row(q);
            let np = cp.dot(&cp).sqrt();
            let nq = cq.dot(&cq).sqrt();
            let denom = np * nq + COSINE_EPS;
            let dot = cp.dot(&cq);
            negative_term += dot / denom;
            // d cos / d c_p = c_q / denom - dot * nq * c_p / (np * denom^2)
            let coef = dot / (denom * denom);
            let gp = if np > 0.0 {
                &cq / denom - &(&cp * (coef * nq / np))
            } else {
                &cq / denom
            };
            let gq = if nq > 0.0 {
                &cp / denom - &(&cq * (coef * np / nq))
            } else {
                &cp / denom
            };
            let mut row = grad_c.row_mut(p);
            row.scaled_add(scale, &gp);
            let mut row = grad_c.row_mut(q);
            row.scaled_add(scale, &gq);
        }
        negative_term /= pairs.negatives.len() as f64;
        for (p, set) in highconf.iter().enumerate() {
            if set.is_empty() {
                continue;
            }
            let share = 1.0 / (2.0 * set.len() as f64);
            for &i in set {
                grad_r.row_mut(i).scaled_add(share, &grad_c.row(p));
                grad_rp.row_mut(i).scaled_add(share, &grad_c.row(p));
            }
        }
    }

    Ok(ContrastiveOutput {
        loss: positive_term + alpha * negative_term,
        positive_term,
        negative_term,
        grad_r,
        grad_r_prime: grad_rp,
    })
}
