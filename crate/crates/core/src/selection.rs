//! Subset selection strategies.
//!
//! CDAS partitions the data by embedding cluster, ranks each cluster by IFD and keeps the top
//! share of every cluster. The baselines are uniform random sampling, global top-IFD
//! (complexity only), per-cluster uniform sampling (diversity only), and the two coreset
//! selectors from [`crate::clustering`].
//!
//! Every strategy returns exactly `ceil(m * n / 100)` distinct ids. Per-cluster budgets come from
//! largest-remainder apportionment of that global target, so each cluster's share is within one
//! of exact proportionality.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{self, ClusterModel, GraphDensityParams};
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::jsonl;
use crate::scoring::ScoreTable;

pub const DEFAULT_M_PERCENT: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    #[default]
    Cdas,
    Random,
    Complexity,
    Diversity,
    Kcenter,
    GraphDensity,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Cdas,
        Strategy::Random,
        Strategy::Complexity,
        Strategy::Diversity,
        Strategy::Kcenter,
        Strategy::GraphDensity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Cdas => "cdas",
            Strategy::Random => "random",
            Strategy::Complexity => "complexity",
            Strategy::Diversity => "diversity",
            Strategy::Kcenter => "kcenter",
            Strategy::GraphDensity => "graph-density",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeans-cdas" => Ok(Strategy::Cdas),
            "k-center" | "kcenter-greedy" => Ok(Strategy::Kcenter),
            _ => Strategy::ALL
                .into_iter()
                .find(|st| st.name() == s)
                .ok_or_else(|| Error::invalid(format!("unknown selection strategy `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterCount {
    pub total: usize,
    pub selected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub strategy: Strategy,
    pub m_percent: f64,
    pub seed: Option<u64>,
    pub selected_ids: Vec<u64>,
    pub per_cluster_counts: BTreeMap<usize, ClusterCount>,
}

impl SelectionResult {
    /// Fills `per_cluster_counts` from `clusters`.
    pub fn with_cluster_counts(mut self, clusters: &ClusterModel) -> Self {
        let cluster_of = clusters.cluster_of();
        let mut counts: BTreeMap<usize, ClusterCount> = (0..clusters.k)
            .map(|c| (c, ClusterCount { total: 0, selected: 0 }))
            .collect();
        for &c in &clusters.assignment {
            counts.get_mut(&c).unwrap().total += 1;
        }
        for id in &self.selected_ids {
            if let Some(c) = cluster_of.get(id) {
                counts.get_mut(c).unwrap().selected += 1;
            }
        }
        self.per_cluster_counts = counts;
        self
    }
}

fn check_m(m_percent: f64) -> Result<()> {
    if !(m_percent > 0.0 && m_percent <= 100.0) {
        return Err(Error::invalid(format!("m_percent must be in (0, 100], got {m_percent}")));
    }
    Ok(())
}

/// `ceil(m * n / 100)`, clamped to `[1, n]` for non-empty inputs. Products within 1e-9 of an
/// integer are treated as exact so that, e.g., 40% of 1000 is 400.
pub fn target_size(n: usize, m_percent: f64) -> Result<usize> {
    check_m(m_percent)?;
    if n == 0 {
        return Ok(0);
    }
    let raw = m_percent * n as f64 / 100.0;
    let t = (raw - 1e-9).ceil().max(1.0) as usize;
    Ok(t.min(n))
}

/// Largest-remainder (Hamilton) apportionment of `target` seats over groups of `sizes`.
/// Remainders are compared exactly in integer arithmetic; ties go to the lower index.
pub fn apportion(sizes: &[usize], target: usize) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return vec![0; sizes.len()];
    }
    let target = target.min(n);
    let mut quotas = Vec::with_capacity(sizes.len());
    let mut remainders = Vec::with_capacity(sizes.len());
    for (i, &s) in sizes.iter().enumerate() {
        let num = target as u128 * s as u128;
        quotas.push((num / n as u128) as usize);
        remainders.push((num % n as u128, i));
    }
    let left = target - quotas.iter().sum::<usize>();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in remainders.iter().take(left) {
        quotas[i] += 1;
    }
    quotas
}

/// Members of each cluster ordered by IFD descending, ties to the lower id.
pub fn rank_clusters(clusters: &ClusterModel, scores: &ScoreTable) -> Result<Vec<Vec<u64>>> {
    let missing: Vec<u64> = clusters
        .ids
        .iter()
        .copied()
        .filter(|id| !scores.contains_key(id))
        .take(10)
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingIds(missing));
    }
    let mut members = clusters.members();
    for m in &mut members {
        sort_by_ifd(m, scores);
    }
    Ok(members)
}

fn sort_by_ifd(ids: &mut [u64], scores: &ScoreTable) {
    ids.sort_by(|a, b| scores[b].ifd.total_cmp(&scores[a].ifd).then(a.cmp(b)));
}

/// Complexity and diversity aware sampling: the top-IFD share of each cluster.
///
/// Picks are concatenated in ascending cluster index, each cluster's picks in IFD order.
pub fn cdas_select(clusters: &ClusterModel, scores: &ScoreTable, m_percent: f64) -> Result<SelectionResult> {
    let target = target_size(clusters.ids.len(), m_percent)?;
    let ranked = rank_clusters(clusters, scores)?;
    let sizes: Vec<usize> = ranked.iter().map(Vec::len).collect();
    let quotas = apportion(&sizes, target);
    let mut selected = Vec::with_capacity(target);
    let mut per_cluster = BTreeMap::new();
    for (c, (members, &q)) in ranked.iter().zip(&quotas).enumerate() {
        selected.extend_from_slice(&members[..q]);
        per_cluster.insert(
            c,
            ClusterCount {
                total: members.len(),
                selected: q,
            },
        );
    }
    Ok(SelectionResult {
        strategy: Strategy::Cdas,
        m_percent,
        seed: None,
        selected_ids: selected,
        per_cluster_counts: per_cluster,
    })
}

/// Partial Fisher-Yates: `take` distinct indices from `0..n`, uniformly.
fn sample_indices(rng: &mut ChaCha8Rng, n: usize, take: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..take {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(take);
    idx
}

/// Uniform sampling without replacement. Selected ids are returned in ascending order.
pub fn random_select(ids: &[u64], m_percent: f64, seed: u64) -> Result<SelectionResult> {
    let target = target_size(ids.len(), m_percent)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected: Vec<u64> = sample_indices(&mut rng, ids.len(), target)
        .into_iter()
        .map(|i| ids[i])
        .collect();
    selected.sort_unstable();
    Ok(SelectionResult {
        strategy: Strategy::Random,
        m_percent,
        seed: Some(seed),
        selected_ids: selected,
        per_cluster_counts: BTreeMap::new(),
    })
}

/// Global top-IFD selection over every scored id.
pub fn complexity_select(scores: &ScoreTable, m_percent: f64) -> Result<SelectionResult> {
    let target = target_size(scores.len(), m_percent)?;
    let mut ids: Vec<u64> = scores.keys().copied().collect();
    sort_by_ifd(&mut ids, scores);
    ids.truncate(target);
    Ok(SelectionResult {
        strategy: Strategy::Complexity,
        m_percent,
        seed: None,
        selected_ids: ids,
        per_cluster_counts: BTreeMap::new(),
    })
}

/// Uniform sampling inside each cluster with the same quotas as [`cdas_select`].
pub fn diversity_select(clusters: &ClusterModel, m_percent: f64, seed: u64) -> Result<SelectionResult> {
    let target = target_size(clusters.ids.len(), m_percent)?;
    let members = clusters.members();
    let sizes: Vec<usize> = members.iter().map(Vec::len).collect();
    let quotas = apportion(&sizes, target);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected = Vec::with_capacity(target);
    let mut per_cluster = BTreeMap::new();
    for (c, (ids, &q)) in members.iter().zip(&quotas).enumerate() {
        let mut picked: Vec<u64> = sample_indices(&mut rng, ids.len(), q)
            .into_iter()
            .map(|i| ids[i])
            .collect();
        picked.sort_unstable();
        selected.extend(picked);
        per_cluster.insert(
            c,
            ClusterCount {
                total: ids.len(),
                selected: q,
            },
        );
    }
    Ok(SelectionResult {
        strategy: Strategy::Diversity,
        m_percent,
        seed: Some(seed),
        selected_ids: selected,
        per_cluster_counts: per_cluster,
    })
}

/// K-Center Greedy over the embeddings, returning picks in greedy order.
pub fn kcenter_select(emb: &EmbeddingMatrix, m_percent: f64, seed: u64) -> Result<SelectionResult> {
    let target = target_size(emb.len(), m_percent)?;
    Ok(SelectionResult {
        strategy: Strategy::Kcenter,
        m_percent,
        seed: Some(seed),
        selected_ids: clustering::kcenter_greedy(emb, target, seed)?,
        per_cluster_counts: BTreeMap::new(),
    })
}

/// Graph Density over the embeddings, returning picks in selection order.
pub fn graph_density_select(
    emb: &EmbeddingMatrix,
    m_percent: f64,
    params: &GraphDensityParams,
) -> Result<SelectionResult> {
    let target = target_size(emb.len(), m_percent)?;
    Ok(SelectionResult {
        strategy: Strategy::GraphDensity,
        m_percent,
        seed: None,
        selected_ids: clustering::graph_density_select(emb, target, params)?,
        per_cluster_counts: BTreeMap::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionHeader {
    pub strategy: Strategy,
    pub m_percent: f64,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub id: u64,
    pub cluster: usize,
    pub ifd: f64,
    /// 0-based position of the sample in its cluster's IFD ranking.
    pub rank_in_cluster: usize,
}

pub fn selection_records(
    result: &SelectionResult,
    clusters: &ClusterModel,
    scores: &ScoreTable,
) -> Result<Vec<SelectionRecord>> {
    let ranked = rank_clusters(clusters, scores)?;
    let mut position: HashMap<u64, (usize, usize)> = HashMap::new();
    for (c, members) in ranked.iter().enumerate() {
        for (rank, &id) in members.iter().enumerate() {
            position.insert(id, (c, rank));
        }
    }
    result
        .selected_ids
        .iter()
        .map(|id| {
            let (cluster, rank_in_cluster) = *position
                .get(id)
                .ok_or_else(|| Error::Invariant(format!("selected id {id} has no cluster")))?;
            Ok(SelectionRecord {
                id: *id,
                cluster,
                ifd: scores[id].ifd,
                rank_in_cluster,
            })
        })
        .collect()
}

pub fn write_selection(
    path: &Path,
    result: &SelectionResult,
    clusters: &ClusterModel,
    scores: &ScoreTable,
) -> Result<()> {
    let header = SelectionHeader {
        strategy: result.strategy,
        m_percent: result.m_percent,
        seed: result.seed,
    };
    jsonl::write_records(path, Some(&header), &selection_records(result, clusters, scores)?)
}

pub fn load_selection(path: &Path) -> Result<(SelectionHeader, Vec<SelectionRecord>)> {
    jsonl::read_with_header(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::ScoreRecord;

    fn scores(ifds: &[f64]) -> ScoreTable {
        ifds.iter()
            .enumerate()
            .map(|(i, &v)| {
                let id = i as u64;
                (id, ScoreRecord::from_perplexities(id, v, 1.0).unwrap())
            })
            .collect()
    }

    pub(crate) fn model(assignment: Vec<usize>, k: usize) -> ClusterModel {
        ClusterModel {
            k,
            centroids: vec![vec![0.0]; k],
            ids: (0..assignment.len() as u64).collect(),
            assignment,
            inertia: 0.0,
            inertia_history: vec![],
        }
    }

    #[test]
    fn target_rounding() {
        assert_eq!(target_size(1000, 40.0).unwrap(), 400);
        assert_eq!(target_size(10, 25.0).unwrap(), 3);
        assert_eq!(target_size(3, 0.001).unwrap(), 1);
        assert_eq!(target_size(7, 100.0).unwrap(), 7);
        assert!(target_size(7, 0.0).is_err());
        assert!(target_size(7, 100.5).is_err());
        assert!(target_size(7, f64::NAN).is_err());
    }

    #[test]
    fn apportion_exact_and_remainders() {
        assert_eq!(apportion(&[10, 30], 16), vec![4, 12]);
        assert_eq!(apportion(&[1, 1, 1], 2), vec![1, 1, 0]);
        assert_eq!(apportion(&[6, 6, 2], 10), vec![4, 4, 2]);
        assert_eq!(apportion(&[5, 0, 5], 10), vec![5, 0, 5]);
    }

    #[test]
    fn cdas_single_cluster_top_half() {
        let s = scores(&[0.9, 0.7, 0.5, 0.3]);
        let r = cdas_select(&model(vec![0; 4], 1), &s, 50.0).unwrap();
        assert_eq!(r.selected_ids, vec![0, 1]);
    }

    #[test]
    fn cdas_quotas_follow_cluster_sizes() {
        let mut assign = vec![0; 10];
        assign.extend(vec![1; 30]);
        let s = scores(&(0..40).map(|i| 1.0 + i as f64).collect::<Vec<_>>());
        let r = cdas_select(&model(assign, 2), &s, 40.0).unwrap();
        assert_eq!(r.selected_ids.len(), 16);
        assert_eq!(r.per_cluster_counts[&0].selected, 4);
        assert_eq!(r.per_cluster_counts[&1].selected, 12);
        // Highest IFDs of each cluster, in IFD order.
        assert_eq!(&r.selected_ids[..4], &[9, 8, 7, 6]);
        assert_eq!(r.selected_ids[4], 39);
    }

    #[test]
    fn cdas_missing_score_is_error() {
        let s = scores(&[0.5, 0.4]);
        assert!(matches!(
            cdas_select(&model(vec![0, 0, 0], 1), &s, 50.0),
            Err(Error::MissingIds(ids)) if ids == vec![2]
        ));
    }

    #[test]
    fn complexity_top_and_ties() {
        let r = complexity_select(&scores(&[0.9, 0.7, 0.5, 0.3]), 25.0).unwrap();
        assert_eq!(r.selected_ids, vec![0]);
        let r = complexity_select(&scores(&[1.0; 10]), 30.0).unwrap();
        assert_eq!(r.selected_ids, vec![0, 1, 2]);
    }

    #[test]
    fn random_is_deterministic_and_exhaustive() {
        let ids: Vec<u64> = (0..50).collect();
        let a = random_select(&ids, 30.0, 9).unwrap();
        let b = random_select(&ids, 30.0, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.selected_ids.len(), 15);
        assert_eq!(random_select(&ids, 100.0, 1).unwrap().selected_ids, ids);
    }

    #[test]
    fn diversity_singletons_full() {
        let r = diversity_select(&model((0..6).collect(), 6), 100.0, 3).unwrap();
        let mut ids = r.selected_ids.clone();
        ids.sort();
        assert_eq!(ids, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn diversity_quotas_match_cdas() {
        let assign = vec![0, 1, 1, 2, 2, 2, 0, 1, 2, 2, 1, 0, 0, 2];
        let m = model(assign, 3);
        let s = scores(&(0..14).map(|i| 0.1 + (i * 7 % 5) as f64).collect::<Vec<_>>());
        let c = cdas_select(&m, &s, 45.0).unwrap();
        let d = diversity_select(&m, 45.0, 11).unwrap();
        assert_eq!(c.per_cluster_counts, d.per_cluster_counts);
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert_eq!("kmeans-cdas".parse::<Strategy>().unwrap(), Strategy::Cdas);
        assert!("bogus".parse::<Strategy>().is_err());
    }
}
