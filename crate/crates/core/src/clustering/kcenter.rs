use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::sq_dist;
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};

/// Greedy k-center (farthest-first traversal).
///
/// The first pick is drawn uniformly with `seed`; each later pick maximizes the minimum
/// Euclidean distance to the points already chosen, ties going to the lowest id. Returns ids in
/// pick order.
pub fn kcenter_greedy(emb: &EmbeddingMatrix, count: usize, seed: u64) -> Result<Vec<u64>> {
    let n = emb.len();
    if count < 1 || count > n {
        return Err(Error::invalid(format!("count must be in [1, {n}], got {count}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.random_range(0..n);
    kcenter_from(emb, count, first)
}

/// Greedy k-center with a caller-chosen first point (by row index).
pub fn kcenter_from(emb: &EmbeddingMatrix, count: usize, first: usize) -> Result<Vec<u64>> {
    let n = emb.len();
    if count < 1 || count > n || first >= n {
        return Err(Error::invalid("count or first index out of range"));
    }
    let ids = emb.ids();
    let mut chosen = vec![false; n];
    let mut min_d: Vec<f64> = vec![f64::INFINITY; n];
    let mut picks = Vec::with_capacity(count);
    let mut current = first;
    loop {
        chosen[current] = true;
        picks.push(ids[current]);
        if picks.len() == count {
            break;
        }
        let center = emb.row_at(current);
        min_d
            .par_iter_mut()
            .enumerate()
            .for_each(|(i, d)| *d = d.min(sq_dist(emb.row_at(i), center)));
        // Rows are in ascending id order, so the first maximum is the lowest id.
        let mut best: Option<usize> = None;
        for i in 0..n {
            if chosen[i] {
                continue;
            }
            if best.is_none_or(|b| min_d[i] > min_d[b]) {
                best = Some(i);
            }
        }
        current = best.expect("count <= n leaves an unchosen point");
    }
    Ok(picks)
}
