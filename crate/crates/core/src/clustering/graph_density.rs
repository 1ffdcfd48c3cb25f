use rayon::prelude::*;

use super::sq_dist;
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GraphDensityParams {
    pub knn: usize,
    /// Kernel width: edge weight is `exp(-gamma * |xi - xj|^2)`.
    pub gamma: f64,
}

impl GraphDensityParams {
    /// `knn = 10`, `gamma = 1 / dim`.
    pub fn for_dim(dim: usize) -> Self {
        Self {
            knn: 10,
            gamma: 1.0 / dim as f64,
        }
    }
}

/// Weighted mutual-kNN adjacency: `adj[i]` lists `(j, w(i, j))`.
pub fn mutual_knn_graph(emb: &EmbeddingMatrix, params: &GraphDensityParams) -> Vec<Vec<(usize, f64)>> {
    let n = emb.len();
    let knn_lists: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let row = emb.row_at(i);
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (sq_dist(row, emb.row_at(j)), j))
                .collect();
            let by_dist = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if params.knn < cand.len() {
                cand.select_nth_unstable_by(params.knn - 1, by_dist);
                cand.truncate(params.knn);
            }
            let mut out: Vec<(usize, f64)> = cand.into_iter().map(|(d, j)| (j, d)).collect();
            out.sort_unstable_by_key(|e| e.0);
            out
        })
        .collect();
    (0..n)
        .map(|i| {
            knn_lists[i]
                .iter()
                .filter(|(j, _)| knn_lists[*j].binary_search_by_key(&i, |e| e.0).is_ok())
                .map(|&(j, d2)| (j, (-params.gamma * d2).exp()))
                .collect()
        })
        .collect()
}

/// Initial density of each node: the sum of its mutual-kNN edge weights.
pub fn graph_densities(emb: &EmbeddingMatrix, params: &GraphDensityParams) -> Result<Vec<f64>> {
    validate(emb.len(), 1, params)?;
    Ok(mutual_knn_graph(emb, params)
        .iter()
        .map(|adj| adj.iter().map(|e| e.1).sum())
        .collect())
}

fn validate(n: usize, count: usize, params: &GraphDensityParams) -> Result<()> {
    if count < 1 || count > n {
        return Err(Error::invalid(format!("count must be in [1, {n}], got {count}")));
    }
    if params.knn < 1 || params.knn >= n {
        return Err(Error::invalid(format!("knn must be in [1, {n}), got {}", params.knn)));
    }
    if !(params.gamma > 0.0) || !params.gamma.is_finite() {
        return Err(Error::invalid("gamma must be positive"));
    }
    Ok(())
}

/// Graph Density selection: repeatedly take the densest remaining node (ties to the lowest id),
/// then damp each neighbor's density by `1 - w(pick, neighbor)`.
pub fn graph_density_select(emb: &EmbeddingMatrix, count: usize, params: &GraphDensityParams) -> Result<Vec<u64>> {
    let n = emb.len();
    validate(n, count, params)?;
    let adj = mutual_knn_graph(emb, params);
    let mut density: Vec<f64> = adj.iter().map(|a| a.iter().map(|e| e.1).sum()).collect();
    let mut taken = vec![false; n];
    let mut picks = Vec::with_capacity(count);
    for _ in 0..count {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if !taken[i] && best.is_none_or(|b| density[i] > density[b]) {
                best = Some(i);
            }
        }
        let p = best.expect("count <= n");
        taken[p] = true;
        picks.push(emb.ids()[p]);
        for &(j, w) in &adj[p] {
            density[j] *= 1.0 - w;
        }
    }
    Ok(picks)
}
