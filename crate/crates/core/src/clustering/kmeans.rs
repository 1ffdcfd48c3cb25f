use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{sq_dist, ClusterModel};
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};

/// Points per reduction chunk. Fixed, so sums do not depend on the thread count.
const CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once no centroid moves farther than this.
    pub tol: f64,
    /// Use rayon for the per-point steps. The serial path produces identical bits.
    pub parallel: bool,
}

impl KMeansParams {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            seed: 0,
            max_iters: 100,
            tol: 1e-6,
            parallel: true,
        }
    }
}

/// k-means++ seeding followed by Lloyd iterations.
///
/// Clusters that end up empty after an assignment step are re-seeded from the point farthest
/// from its own centroid (taken from a cluster that keeps at least one member), so every
/// cluster in the result is non-empty. Centroids in the result are the means of their members.
pub fn kmeans(emb: &EmbeddingMatrix, params: &KMeansParams) -> Result<ClusterModel> {
    let n = emb.len();
    let k = params.k;
    if k < 1 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if k > n {
        return Err(Error::invalid(format!("k = {k} exceeds the number of points ({n})")));
    }
    if params.max_iters < 1 {
        return Err(Error::invalid("max_iters must be at least 1"));
    }
    if !(params.tol >= 0.0) {
        return Err(Error::invalid("tol must be non-negative"));
    }

    let dim = emb.dim();
    let mut centroids = init_plus_plus(emb, k, params.seed);
    let mut assignment: Vec<usize> = vec![usize::MAX; n];
    let mut history = Vec::new();

    for iter in 0..params.max_iters {
        let (new_assign, mut dist) = assign(emb, &centroids, params.parallel);
        let changed = new_assign != assignment;
        assignment = new_assign;
        reseed_empty(emb, k, &mut assignment, &mut dist);

        let (sums, counts) = accumulate(emb, &assignment, k, params.parallel);
        let mut shift: f64 = 0.0;
        for c in 0..k {
            let inv = 1.0 / counts[c] as f64;
            let next: Vec<f64> = sums[c * dim..(c + 1) * dim].iter().map(|s| s * inv).collect();
            shift = shift.max(sq_dist(&next, &centroids[c]).sqrt());
            centroids[c] = next;
        }
        let inertia = inertia_of(emb, &centroids, &assignment, params.parallel);
        history.push(inertia);
        log::trace!("kmeans iter {iter}: inertia {inertia:.6} shift {shift:.3e}");
        if !changed || shift < params.tol {
            break;
        }
    }

    Ok(ClusterModel {
        k,
        centroids,
        ids: emb.ids().to_vec(),
        assignment,
        inertia: *history.last().expect("at least one iteration"),
        inertia_history: history,
    })
}

fn init_plus_plus(emb: &EmbeddingMatrix, k: usize, seed: u64) -> Vec<Vec<f64>> {
    let n = emb.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![emb.row_at(first).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(emb.row_at(i), emb.row_at(first))).collect();

    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    acc += d;
                    pick = Some(i);
                    if acc > target {
                        break;
                    }
                }
            }
            pick.expect("positive total implies a positive entry")
        } else {
            // Remaining points coincide with chosen centers.
            chosen.iter().position(|c| !c).expect("k <= n")
        };
        chosen[pick] = true;
        let c = emb.row_at(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(emb.row_at(i), &c));
        }
        centroids.push(c);
    }
    centroids
}

fn nearest(row: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cent) in centroids.iter().enumerate() {
        let d = sq_dist(row, cent);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign(emb: &EmbeddingMatrix, centroids: &[Vec<f64>], parallel: bool) -> (Vec<usize>, Vec<f64>) {
    let pairs: Vec<(usize, f64)> = if parallel {
        (0..emb.len())
            .into_par_iter()
            .map(|i| nearest(emb.row_at(i), centroids))
            .collect()
    } else {
        (0..emb.len()).map(|i| nearest(emb.row_at(i), centroids)).collect()
    };
    pairs.into_iter().unzip()
}

fn reseed_empty(emb: &EmbeddingMatrix, k: usize, assignment: &mut [usize], dist: &mut [f64]) {
    let mut sizes = vec![0usize; k];
    for &c in assignment.iter() {
        sizes[c] += 1;
    }
    for c in 0..k {
        if sizes[c] > 0 {
            continue;
        }
        let mut best: Option<usize> = None;
        for i in 0..assignment.len() {
            if sizes[assignment[i]] < 2 {
                continue;
            }
            if best.is_none_or(|b| dist[i] > dist[b]) {
                best = Some(i);
            }
        }
        let p = best.expect("an empty cluster implies another holds two or more points");
        log::debug!("re-seeding empty cluster {c} from point {}", emb.ids()[p]);
        sizes[assignment[p]] -= 1;
        assignment[p] = c;
        sizes[c] = 1;
        dist[p] = 0.0;
    }
}

/// Per-cluster coordinate sums and member counts, reduced chunk by chunk in a fixed order.
fn accumulate(
    emb: &EmbeddingMatrix,
    assignment: &[usize],
    k: usize,
    parallel: bool,
) -> (Vec<f64>, Vec<usize>) {
    let dim = emb.dim();
    let partial = |chunk: usize| {
        let start = chunk * CHUNK;
        let end = (start + CHUNK).min(emb.len());
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for i in start..end {
            let c = assignment[i];
            counts[c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(emb.row_at(i)) {
                *s += v;
            }
        }
        (sums, counts)
    };
    let chunks = emb.len().div_ceil(CHUNK);
    let partials: Vec<(Vec<f64>, Vec<usize>)> = if parallel {
        (0..chunks).into_par_iter().map(partial).collect()
    } else {
        (0..chunks).map(partial).collect()
    };
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for (s, c) in partials {
        sums.iter_mut().zip(s).for_each(|(a, b)| *a += b);
        counts.iter_mut().zip(c).for_each(|(a, b)| *a += b);
    }
    (sums, counts)
}

fn inertia_of(emb: &EmbeddingMatrix, centroids: &[Vec<f64>], assignment: &[usize], parallel: bool) -> f64 {
    let partial = |chunk: usize| {
        let start = chunk * CHUNK;
        let end = (start + CHUNK).min(emb.len());
        (start..end)
            .map(|i| sq_dist(emb.row_at(i), &centroids[assignment[i]]))
            .sum::<f64>()
    };
    let chunks = emb.len().div_ceil(CHUNK);
    let partials: Vec<f64> = if parallel {
        (0..chunks).into_par_iter().map(partial).collect()
    } else {
        (0..chunks).map(partial).collect()
    };
    partials.into_iter().sum()
}
