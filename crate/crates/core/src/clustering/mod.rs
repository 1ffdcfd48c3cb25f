//! Partitioning embeddings (K-Means) and the two alternative diversity selectors used for
//! comparison: K-Center Greedy and Graph Density.

mod graph_density;
mod kcenter;
mod kmeans;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;

pub use graph_density::{graph_densities, graph_density_select, mutual_knn_graph, GraphDensityParams};
pub use kcenter::{kcenter_from, kcenter_greedy};
pub use kmeans::{kmeans, KMeansParams};

/// Squared Euclidean distance.
#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `max(2, round(sqrt(n / 2)))`, capped at `n`.
pub fn default_k(n: usize) -> usize {
    let k = ((n as f64 / 2.0).sqrt().round() as usize).max(2);
    k.min(n.max(1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    /// Sample ids, aligned with `assignment`.
    pub ids: Vec<u64>,
    pub assignment: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each Lloyd iteration.
    pub inertia_history: Vec<f64>,
}

impl ClusterModel {
    pub fn members(&self) -> Vec<Vec<u64>> {
        let mut out = vec![Vec::new(); self.k];
        for (&id, &c) in self.ids.iter().zip(&self.assignment) {
            out[c].push(id);
        }
        out
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut out = vec![0; self.k];
        for &c in &self.assignment {
            out[c] += 1;
        }
        out
    }

    pub fn cluster_of(&self) -> HashMap<u64, usize> {
        self.ids.iter().copied().zip(self.assignment.iter().copied()).collect()
    }

    /// Members whose id satisfies `keep`. Centroids and `k` are kept; inertia is not.
    pub fn filter(&self, keep: impl Fn(u64) -> bool) -> Self {
        let (ids, assignment) = self
            .ids
            .iter()
            .zip(&self.assignment)
            .filter(|(id, _)| keep(**id))
            .map(|(&id, &c)| (id, c))
            .unzip();
        Self {
            k: self.k,
            centroids: self.centroids.clone(),
            ids,
            assignment,
            inertia: 0.0,
            inertia_history: Vec::new(),
        }
    }

    /// Recomputes the within-cluster sum of squared distances against `rows`.
    pub fn recompute_inertia(&self, rows: &crate::embedding::EmbeddingMatrix) -> f64 {
        (0..rows.len())
            .map(|i| sq_dist(rows.row_at(i), &self.centroids[self.assignment[i]]))
            .sum()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct AssignmentRecord {
    id: u64,
    cluster: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CentroidRecord {
    cluster: usize,
    centroid: Vec<f64>,
}

pub fn write_clusters(assign_path: &Path, centroid_path: &Path, model: &ClusterModel) -> Result<()> {
    let assign: Vec<AssignmentRecord> = model
        .ids
        .iter()
        .zip(&model.assignment)
        .map(|(&id, &cluster)| AssignmentRecord { id, cluster })
        .collect();
    jsonl::write_plain(assign_path, &assign)?;
    let cents: Vec<CentroidRecord> = model
        .centroids
        .iter()
        .enumerate()
        .map(|(cluster, c)| CentroidRecord {
            cluster,
            centroid: c.clone(),
        })
        .collect();
    jsonl::write_plain(centroid_path, &cents)
}

/// Reads cluster assignments and centroids. The inertia is recomputed when `rows` is given and
/// left at zero otherwise.
pub fn load_clusters(
    assign_path: &Path,
    centroid_path: &Path,
    rows: Option<&crate::embedding::EmbeddingMatrix>,
) -> Result<ClusterModel> {
    let assign = jsonl::read_records::<AssignmentRecord>(assign_path)?;
    let cents = jsonl::read_records::<CentroidRecord>(centroid_path)?;
    let mut by_cluster: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (line, rec) in cents {
        if by_cluster.insert(rec.cluster, rec.centroid).is_some() {
            return Err(Error::parse(centroid_path, line, format!("duplicate cluster {}", rec.cluster)));
        }
    }
    let k = by_cluster.len();
    if k == 0 || by_cluster.keys().copied().ne(0..k) {
        return Err(Error::parse(centroid_path, 1, "clusters must be numbered 0..k"));
    }
    let centroids: Vec<Vec<f64>> = by_cluster.into_values().collect();
    let mut ids = Vec::with_capacity(assign.len());
    let mut assignment = Vec::with_capacity(assign.len());
    for (line, rec) in assign {
        if rec.cluster >= k {
            return Err(Error::parse(assign_path, line, format!("cluster {} out of range", rec.cluster)));
        }
        ids.push(rec.id);
        assignment.push(rec.cluster);
    }
    let mut model = ClusterModel {
        k,
        centroids,
        ids,
        assignment,
        inertia: 0.0,
        inertia_history: Vec::new(),
    };
    if let Some(rows) = rows {
        if rows.ids() != model.ids.as_slice() {
            return Err(Error::invalid("cluster assignments do not match embedding ids"));
        }
        model.inertia = model.recompute_inertia(rows);
    }
    Ok(model)
}
