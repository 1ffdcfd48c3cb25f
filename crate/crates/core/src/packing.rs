//! Batch planning under three padding strategies, with token accounting.
//!
//! * traditional: one sample per sequence, every sequence padded to `max_len`;
//! * dynamic: one sample per sequence, padded to the longest sample of its batch;
//! * dynamic pack: each batch's samples are sorted by length and concatenated with
//!   first-fit-decreasing into as few sequences as fit, which are then padded to the longest
//!   packed sequence of the batch.
//!
//! Packed segments are separated by `separator_cost` boundary tokens. A bin holding samples
//! `l1..lc` has content `sum(l) + (c - 1) * separator_cost`, which is classic bin packing with item
//! sizes `l + separator_cost` and capacity `max_len + separator_cost`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::RenderedSample;
use crate::error::{Error, Result};
use crate::jsonl;

/// Largest instance [`optimal_pack`] accepts.
pub const OPTIMAL_PACK_LIMIT: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PackStrategy {
    Traditional,
    Dynamic,
    #[default]
    DynamicPack,
}

impl PackStrategy {
    pub const ALL: [PackStrategy; 3] = [
        PackStrategy::Traditional,
        PackStrategy::Dynamic,
        PackStrategy::DynamicPack,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PackStrategy::Traditional => "traditional",
            PackStrategy::Dynamic => "dynamic",
            PackStrategy::DynamicPack => "dynamic-pack",
        }
    }
}

impl fmt::Display for PackStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PackStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PackStrategy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown padding strategy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PackItem {
    pub id: u64,
    pub len: usize,
}

impl From<&RenderedSample> for PackItem {
    fn from(s: &RenderedSample) -> Self {
        PackItem {
            id: s.id,
            len: s.total_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub id: u64,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedSequence {
    pub segments: Vec<Segment>,
    pub pad: usize,
    pub seq_len: usize,
}

impl PackedSequence {
    /// Segment tokens plus separators between segments.
    pub fn content(&self) -> usize {
        self.seq_len - self.pad
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub sequences: Vec<PackedSequence>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackPlan {
    pub strategy: PackStrategy,
    pub max_len: usize,
    pub batch_size: usize,
    pub separator_cost: usize,
    /// Packed across the whole input before batching, instead of within each batch.
    pub global: bool,
    pub batches: Vec<Batch>,
}

impl PackPlan {
    pub fn sequences(&self) -> impl Iterator<Item = &PackedSequence> {
        self.batches.iter().flat_map(|b| b.sequences.iter())
    }

    pub fn items(&self) -> Vec<PackItem> {
        self.sequences()
            .flat_map(|s| s.segments.iter())
            .map(|seg| PackItem {
                id: seg.id,
                len: seg.len,
            })
            .collect()
    }

    /// Checks structural invariants; `items` is the planned input.
    pub fn validate(&self, items: &[PackItem]) -> Result<()> {
        let bad = |m: String| Err(Error::Invariant(format!("{} plan: {m}", self.strategy)));
        let mut planned = self.items();
        let mut expected = items.to_vec();
        planned.sort_unstable();
        expected.sort_unstable();
        if planned != expected {
            return bad("segments do not cover the input exactly once".into());
        }
        for (b, batch) in self.batches.iter().enumerate() {
            let batch_len = batch.sequences.iter().map(|s| s.seq_len).max().unwrap_or(0);
            for (q, seq) in batch.sequences.iter().enumerate() {
                let mut cursor = 0;
                for (i, seg) in seq.segments.iter().enumerate() {
                    if i > 0 {
                        cursor += self.separator_cost;
                    }
                    if seg.offset != cursor {
                        return bad(format!("batch {b} seq {q}: segment {} offset {} != {cursor}", seg.id, seg.offset));
                    }
                    cursor += seg.len;
                }
                if cursor + seq.pad != seq.seq_len {
                    return bad(format!("batch {b} seq {q}: content + pad != seq_len"));
                }
                if seq.seq_len > self.max_len {
                    return bad(format!("batch {b} seq {q}: seq_len exceeds max_len"));
                }
                let want = match self.strategy {
                    PackStrategy::Traditional => self.max_len,
                    _ => batch_len,
                };
                if seq.seq_len != want {
                    return bad(format!("batch {b} seq {q}: seq_len {} != {want}", seq.seq_len));
                }
                if self.strategy != PackStrategy::DynamicPack && seq.segments.len() != 1 {
                    return bad(format!("batch {b} seq {q}: unpacked strategy holds several samples"));
                }
            }
        }
        Ok(())
    }
}

fn check_inputs(items: &[PackItem], max_len: usize, batch_size: usize, separator_cost: usize) -> Result<()> {
    if batch_size < 1 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    if max_len < 1 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    let mut over: Vec<u64> = items
        .iter()
        .filter(|it| it.len + separator_cost > max_len)
        .map(|it| it.id)
        .collect();
    if !over.is_empty() {
        over.truncate(20);
        return Err(Error::Oversized { max_len, ids: over });
    }
    Ok(())
}

fn single(item: &PackItem, seq_len: usize) -> PackedSequence {
    PackedSequence {
        segments: vec![Segment {
            id: item.id,
            offset: 0,
            len: item.len,
        }],
        pad: seq_len - item.len,
        seq_len,
    }
}

/// One sample per sequence, padded to `max_len`; batches follow input order.
pub fn plan_traditional(items: &[PackItem], max_len: usize, batch_size: usize) -> Result<PackPlan> {
    check_inputs(items, max_len, batch_size, 0)?;
    Ok(PackPlan {
        strategy: PackStrategy::Traditional,
        max_len,
        batch_size,
        separator_cost: 0,
        global: false,
        batches: items
            .chunks(batch_size)
            .map(|chunk| Batch {
                sequences: chunk.iter().map(|it| single(it, max_len)).collect(),
            })
            .collect(),
    })
}

/// One sample per sequence, padded to the longest sample of its batch.
pub fn plan_dynamic(items: &[PackItem], max_len: usize, batch_size: usize) -> Result<PackPlan> {
    check_inputs(items, max_len, batch_size, 0)?;
    Ok(PackPlan {
        strategy: PackStrategy::Dynamic,
        max_len,
        batch_size,
        separator_cost: 0,
        global: false,
        batches: items
            .chunks(batch_size)
            .map(|chunk| {
                let longest = chunk.iter().map(|it| it.len).max().unwrap_or(0);
                Batch {
                    sequences: chunk.iter().map(|it| single(it, longest)).collect(),
                }
            })
            .collect(),
    })
}

/// First-fit bin search over a max segment tree of remaining capacity.
struct FirstFit {
    size: usize,
    tree: Vec<i64>,
    opened: usize,
}

impl FirstFit {
    fn new(max_bins: usize) -> Self {
        let size = max_bins.max(1).next_power_of_two();
        Self {
            size,
            tree: vec![i64::MIN; 2 * size],
            opened: 0,
        }
    }

    fn set(&mut self, bin: usize, remaining: i64) {
        let mut i = bin + self.size;
        self.tree[i] = remaining;
        while i > 1 {
            i /= 2;
            self.tree[i] = self.tree[2 * i].max(self.tree[2 * i + 1]);
        }
    }

    /// Lowest open bin with at least `need` remaining.
    fn find(&self, need: i64) -> Option<usize> {
        if self.tree[1] < need {
            return None;
        }
        let mut i = 1;
        while i < self.size {
            i = if self.tree[2 * i] >= need { 2 * i } else { 2 * i + 1 };
        }
        Some(i - self.size)
    }
}

/// First-fit-decreasing into bins whose content (with separators) is at most `capacity`.
///
/// Items are sorted by length descending, ties to the lower id, and each goes to the first
/// bin with room. Items longer than `capacity` get a bin of their own.
pub fn first_fit_decreasing(items: &[PackItem], capacity: usize, separator_cost: usize) -> Vec<Vec<PackItem>> {
    let mut sorted = items.to_vec();
    sorted.sort_by(|a, b| b.len.cmp(&a.len).then(a.id.cmp(&b.id)));
    // Classic form: sizes len + sep against capacity + sep.
    let cap = (capacity + separator_cost) as i64;
    let mut ff = FirstFit::new(sorted.len());
    let mut bins: Vec<Vec<PackItem>> = Vec::new();
    let mut used: Vec<i64> = Vec::new();
    for it in sorted {
        let w = (it.len + separator_cost) as i64;
        let bin = match ff.find(w) {
            Some(b) => b,
            None => {
                let b = ff.opened;
                ff.opened += 1;
                bins.push(Vec::new());
                used.push(0);
                b
            }
        };
        bins[bin].push(it);
        used[bin] += w;
        ff.set(bin, cap - used[bin]);
    }
    bins
}

fn bin_content(bin: &[PackItem], separator_cost: usize) -> usize {
    bin.iter().map(|it| it.len).sum::<usize>() + separator_cost * bin.len().saturating_sub(1)
}

fn to_sequence(bin: &[PackItem], separator_cost: usize, seq_len: usize) -> PackedSequence {
    let mut offset = 0;
    let segments = bin
        .iter()
        .enumerate()
        .map(|(i, it)| {
            if i > 0 {
                offset += separator_cost;
            }
            let seg = Segment {
                id: it.id,
                offset,
                len: it.len,
            };
            offset += it.len;
            seg
        })
        .collect();
    PackedSequence {
        segments,
        pad: seq_len - bin_content(bin, separator_cost),
        seq_len,
    }
}

/// Bin capacities tried for one batch: the longest sample, then doubling sample slots, then
/// `max_len`. Including the longest-sample capacity guarantees the packed batch never costs more
/// padded tokens than dynamic padding of the same batch.
fn capacity_ladder(longest: usize, max_len: usize, separator_cost: usize) -> Vec<usize> {
    let mut caps = Vec::new();
    let mut slots = 1usize;
    loop {
        let cap = (slots * longest + (slots - 1) * separator_cost).min(max_len);
        caps.push(cap);
        if cap >= max_len {
            break;
        }
        slots *= 2;
    }
    caps
}

fn pack_batch(chunk: &[PackItem], max_len: usize, separator_cost: usize) -> Batch {
    let longest = chunk.iter().map(|it| it.len).max().unwrap_or(0);
    let mut best: Option<((usize, usize, std::cmp::Reverse<usize>), Vec<Vec<PackItem>>)> = None;
    for cap in capacity_ladder(longest, max_len, separator_cost) {
        let bins = first_fit_decreasing(chunk, cap, separator_cost);
        let seq_len = bins.iter().map(|b| bin_content(b, separator_cost)).max().unwrap_or(0);
        // Fewest padded tokens, then fewest sequences, then the larger capacity.
        let key = (bins.len() * seq_len, bins.len(), std::cmp::Reverse(cap));
        if best.as_ref().is_none_or(|(k, _)| key < *k) {
            best = Some((key, bins));
        }
    }
    let bins = best.map(|(_, b)| b).unwrap_or_default();
    let seq_len = bins.iter().map(|b| bin_content(b, separator_cost)).max().unwrap_or(0);
    Batch {
        sequences: bins.iter().map(|b| to_sequence(b, separator_cost, seq_len)).collect(),
    }
}

/// Within-batch packing: batches of `batch_size` samples in input order, each packed with
/// first-fit-decreasing and padded to its longest packed sequence.
pub fn plan_dynamic_pack(
    items: &[PackItem],
    max_len: usize,
    batch_size: usize,
    separator_cost: usize,
) -> Result<PackPlan> {
    check_inputs(items, max_len, batch_size, separator_cost)?;
    let batches = items
        .par_chunks(batch_size)
        .map(|chunk| pack_batch(chunk, max_len, separator_cost))
        .collect();
    Ok(PackPlan {
        strategy: PackStrategy::DynamicPack,
        max_len,
        batch_size,
        separator_cost,
        global: false,
        batches,
    })
}

/// Packs the whole input with first-fit-decreasing at `max_len`, then groups the packed
/// sequences into batches of `batch_size`, each padded to its longest sequence.
pub fn plan_global_pack(
    items: &[PackItem],
    max_len: usize,
    batch_size: usize,
    separator_cost: usize,
) -> Result<PackPlan> {
    check_inputs(items, max_len, batch_size, separator_cost)?;
    let bins = first_fit_decreasing(items, max_len, separator_cost);
    let batches = bins
        .chunks(batch_size)
        .map(|group| {
            let seq_len = group.iter().map(|b| bin_content(b, separator_cost)).max().unwrap_or(0);
            Batch {
                sequences: group.iter().map(|b| to_sequence(b, separator_cost, seq_len)).collect(),
            }
        })
        .collect();
    Ok(PackPlan {
        strategy: PackStrategy::DynamicPack,
        max_len,
        batch_size,
        separator_cost,
        global: true,
        batches,
    })
}

/// Exact minimum bin count by branch and bound.
pub fn optimal_pack(lens: &[usize], capacity: usize, separator_cost: usize) -> Result<usize> {
    if lens.len() > OPTIMAL_PACK_LIMIT {
        return Err(Error::invalid(format!(
            "exact packing is limited to {OPTIMAL_PACK_LIMIT} samples, got {}",
            lens.len()
        )));
    }
    if let Some(l) = lens.iter().find(|&&l| l > capacity) {
        return Err(Error::invalid(format!("sample of length {l} exceeds capacity {capacity}")));
    }
    let cap = capacity + separator_cost;
    let mut sizes: Vec<usize> = lens.iter().map(|l| l + separator_cost).collect();
    sizes.sort_unstable_by(|a, b| b.cmp(a));

    fn search(i: usize, sizes: &[usize], cap: usize, loads: &mut Vec<usize>, best: &mut usize) {
        if loads.len() >= *best {
            return;
        }
        if i == sizes.len() {
            *best = loads.len();
            return;
        }
        let remaining: usize = sizes[i..].iter().sum();
        let free: usize = loads.iter().map(|l| cap - l).sum();
        let extra = remaining.saturating_sub(free).div_ceil(cap);
        if loads.len() + extra >= *best {
            return;
        }
        let mut tried = HashSet::new();
        for b in 0..loads.len() {
            if loads[b] + sizes[i] <= cap && tried.insert(loads[b]) {
                loads[b] += sizes[i];
                search(i + 1, sizes, cap, loads, best);
                loads[b] -= sizes[i];
            }
        }
        loads.push(sizes[i]);
        search(i + 1, sizes, cap, loads, best);
        loads.pop();
    }

    let mut best = sizes.len();
    search(0, &sizes, cap, &mut Vec::new(), &mut best);
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyEfficiency {
    pub strategy: PackStrategy,
    pub total_sequences: usize,
    pub content_tokens: u64,
    pub separator_tokens: u64,
    pub padding_tokens: u64,
    pub padded_total: u64,
    pub padding_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub strategies: Vec<StrategyEfficiency>,
    /// `1 - sequences(dynamic-pack) / sequences(dynamic)` when both plans are present.
    pub sequence_reduction: Option<f64>,
}

impl EfficiencyReport {
    pub fn get(&self, strategy: PackStrategy) -> Option<&StrategyEfficiency> {
        self.strategies.iter().find(|s| s.strategy == strategy)
    }
}

pub fn plan_efficiency(plan: &PackPlan) -> StrategyEfficiency {
    let mut e = StrategyEfficiency {
        strategy: plan.strategy,
        total_sequences: 0,
        content_tokens: 0,
        separator_tokens: 0,
        padding_tokens: 0,
        padded_total: 0,
        padding_ratio: 0.0,
    };
    for seq in plan.sequences() {
        e.total_sequences += 1;
        e.content_tokens += seq.segments.iter().map(|s| s.len as u64).sum::<u64>();
        e.separator_tokens += (plan.separator_cost * seq.segments.len().saturating_sub(1)) as u64;
        e.padding_tokens += seq.pad as u64;
        e.padded_total += seq.seq_len as u64;
    }
    if e.padded_total > 0 {
        e.padding_ratio = e.padding_tokens as f64 / e.padded_total as f64;
    }
    e
}

/// Token accounting for plans built from the same samples.
pub fn efficiency_report(plans: &[PackPlan]) -> Result<EfficiencyReport> {
    if let Some(first) = plans.first() {
        let mut reference = first.items();
        reference.sort_unstable();
        for p in &plans[1..] {
            let mut items = p.items();
            items.sort_unstable();
            if items != reference {
                return Err(Error::invalid(format!(
                    "{} and {} plans cover different samples",
                    first.strategy, p.strategy
                )));
            }
        }
    }
    let strategies: Vec<StrategyEfficiency> = plans.iter().map(plan_efficiency).collect();
    let seqs = |s: PackStrategy| strategies.iter().find(|e| e.strategy == s).map(|e| e.total_sequences);
    let sequence_reduction = match (seqs(PackStrategy::Dynamic), seqs(PackStrategy::DynamicPack)) {
        (Some(d), Some(p)) if d > 0 => Some(1.0 - p as f64 / d as f64),
        _ => None,
    };
    Ok(EfficiencyReport {
        strategies,
        sequence_reduction,
    })
}

/// Builds all three plans for `items`.
pub fn plan_all(
    items: &[PackItem],
    max_len: usize,
    batch_size: usize,
    separator_cost: usize,
    global: bool,
) -> Result<Vec<PackPlan>> {
    let packed = if global {
        plan_global_pack(items, max_len, batch_size, separator_cost)?
    } else {
        plan_dynamic_pack(items, max_len, batch_size, separator_cost)?
    };
    Ok(vec![
        plan_traditional(items, max_len, batch_size)?,
        plan_dynamic(items, max_len, batch_size)?,
        packed,
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub strategy: PackStrategy,
    pub max_len: usize,
    pub batch_size: usize,
    pub separator_cost: usize,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub global: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub batch: usize,
    pub seq: usize,
    pub segments: Vec<Segment>,
    pub pad: usize,
    pub seq_len: usize,
}

pub fn write_manifest(path: &Path, plan: &PackPlan) -> Result<()> {
    let header = ManifestHeader {
        strategy: plan.strategy,
        max_len: plan.max_len,
        batch_size: plan.batch_size,
        separator_cost: plan.separator_cost,
        global: plan.global,
    };
    let records: Vec<ManifestRecord> = plan
        .batches
        .iter()
        .enumerate()
        .flat_map(|(b, batch)| {
            batch.sequences.iter().enumerate().map(move |(q, s)| ManifestRecord {
                batch: b,
                seq: q,
                segments: s.segments.clone(),
                pad: s.pad,
                seq_len: s.seq_len,
            })
        })
        .collect();
    jsonl::write_records(path, Some(&header), &records)
}

pub fn load_manifest(path: &Path) -> Result<PackPlan> {
    let (header, records): (ManifestHeader, Vec<ManifestRecord>) = jsonl::read_with_header(path)?;
    let mut batches: BTreeMap<usize, BTreeMap<usize, PackedSequence>> = BTreeMap::new();
    for r in records {
        batches.entry(r.batch).or_default().insert(
            r.seq,
            PackedSequence {
                segments: r.segments,
                pad: r.pad,
                seq_len: r.seq_len,
            },
        );
    }
    Ok(PackPlan {
        strategy: header.strategy,
        max_len: header.max_len,
        batch_size: header.batch_size,
        separator_cost: header.separator_cost,
        global: header.global,
        batches: batches
            .into_values()
            .map(|seqs| Batch {
                sequences: seqs.into_values().collect(),
            })
            .collect(),
    })
}
