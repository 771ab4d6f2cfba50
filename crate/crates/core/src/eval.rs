//! Average precision, memory accounting and trade-off export.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{AmesError, Result};
use crate::record::{GlobalEncoding, LocalEncoding};

/// Relevance judgements for one query.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GroundTruth {
    pub positives: BTreeSet<u64>,
    /// Ids removed from the ranking before scoring.
    pub junk: BTreeSet<u64>,
}

impl GroundTruth {
    pub fn new(positives: impl IntoIterator<Item = u64>) -> Self {
        Self { positives: positives.into_iter().collect(), junk: BTreeSet::new() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ApMode {
    /// Mean of the precision at each positive's rank.
    Standard,
    /// Trapezoidal area under the precision-recall steps.
    Trapezoid,
}

impl ApMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "trapezoid" => Ok(Self::Trapezoid),
            _ => Err(AmesError::Config("AP mode must be standard or trapezoid")),
        }
    }
}

/// 0-based ranks of the positives in `ranked`, ascending.
fn positive_ranks(ranked: &[u64], positives: &BTreeSet<u64>) -> Vec<usize> {
    ranked.iter().enumerate().filter(|(_, id)| positives.contains(id)).map(|(r, _)| r).collect()
}

/// AP of one ranking. Positives missing from the ranking count as zero.
pub fn average_precision(ranked: &[u64], positives: &BTreeSet<u64>, mode: ApMode) -> Result<f64> {
    if positives.is_empty() {
        return Err(AmesError::Empty("positive set"));
    }
    let ranks = positive_ranks(ranked, positives);
    let n = positives.len() as f64;
    Ok(match mode {
        ApMode::Standard => ranks.iter().enumerate().map(|(j, &r)| (j + 1) as f64 / (r + 1) as f64).sum::<f64>() / n,
        ApMode::Trapezoid => {
            let mut ap = 0.0;
            for (j, &r) in ranks.iter().enumerate() {
                let p0 = if r == 0 { 1.0 } else { j as f64 / r as f64 };
                let p1 = (j + 1) as f64 / (r + 1) as f64;
                ap += (p0 + p1) / (2.0 * n);
            }
            ap
        }
    })
}

/// Drops junk ids, then scores.
pub fn average_precision_gt(ranked: &[u64], gt: &GroundTruth, mode: ApMode) -> Result<f64> {
    if gt.junk.is_empty() {
        return average_precision(ranked, &gt.positives, mode);
    }
    let kept: Vec<u64> = ranked.iter().copied().filter(|id| !gt.junk.contains(id)).collect();
    average_precision(&kept, &gt.positives, mode)
}

/// AP over the top `k` with denominator `min(|P|, k)`.
pub fn ap_at_k(ranked: &[u64], gt: &GroundTruth, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(AmesError::Config("k must be at least 1"));
    }
    if gt.positives.is_empty() {
        return Err(AmesError::Empty("positive set"));
    }
    let kept: Vec<u64> = ranked.iter().copied().filter(|id| !gt.junk.contains(id)).take(k).collect();
    let ranks = positive_ranks(&kept, &gt.positives);
    let denom = gt.positives.len().min(k) as f64;
    Ok(ranks.iter().enumerate().map(|(j, &r)| (j + 1) as f64 / (r + 1) as f64).sum::<f64>() / denom)
}

/// Per-query APs and their mean over queries that have positives.
#[derive(Clone, Debug, PartialEq)]
pub struct MapSummary {
    pub map: f64,
    /// `None` for queries without positives (excluded from the mean).
    pub per_query: Vec<Option<f64>>,
}

impl MapSummary {
    pub fn skipped(&self) -> usize {
        self.per_query.iter().filter(|a| a.is_none()).count()
    }
}

fn summarize(per_query: Vec<Option<f64>>) -> Result<MapSummary> {
    let scored: Vec<f64> = per_query.iter().flatten().copied().collect();
    if scored.is_empty() {
        return Err(AmesError::Empty("no query with positives"));
    }
    let skipped = per_query.len() - scored.len();
    if skipped > 0 {
        log::warn!("{skipped} queries without positives excluded");
    }
    Ok(MapSummary { map: scored.iter().sum::<f64>() / scored.len() as f64, per_query })
}

fn check_lengths(lists: usize, gts: usize) -> Result<()> {
    if lists != gts {
        return Err(AmesError::Shape { what: "ground-truth count", expected: lists, got: gts });
    }
    Ok(())
}

/// mAP over full rankings.
pub fn mean_average_precision<L: AsRef<[u64]>>(lists: &[L], gts: &[GroundTruth], mode: ApMode) -> Result<MapSummary> {
    check_lengths(lists.len(), gts.len())?;
    let per_query = lists
        .iter()
        .zip(gts)
        .map(|(l, g)| if g.positives.is_empty() { Ok(None) } else { average_precision_gt(l.as_ref(), g, mode).map(Some) })
        .collect::<Result<Vec<_>>>()?;
    summarize(per_query)
}

/// mAP@k.
pub fn map_at_k<L: AsRef<[u64]>>(lists: &[L], gts: &[GroundTruth], k: usize) -> Result<MapSummary> {
    check_lengths(lists.len(), gts.len())?;
    let per_query =
        lists.iter().zip(gts).map(|(l, g)| if g.positives.is_empty() { Ok(None) } else { ap_at_k(l.as_ref(), g, k).map(Some) }).collect::<Result<Vec<_>>>()?;
    summarize(per_query)
}

/// Area under the ROC curve of positive vs negative scores (ties count half).
pub fn pair_auc(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(AmesError::Empty("AUC needs positive and negative scores"));
    }
    let mut neg = negatives.to_vec();
    neg.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for &p in positives {
        let below = neg.partition_point(|&n| n < p);
        let upto = neg.partition_point(|&n| n <= p);
        wins += below as f64 + 0.5 * (upto - below) as f64;
    }
    Ok(wins / (positives.len() * negatives.len()) as f64)
}

/// Storage configuration whose per-image payload is accounted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemorySpec {
    pub global: GlobalEncoding,
    pub local: LocalEncoding,
    pub len_x: usize,
    pub dim: usize,
    pub global_dim: usize,
}

impl MemorySpec {
    /// Global bytes plus `len_x` local descriptors; ids, strengths and
    /// model parameters are not counted.
    pub fn payload_bytes(&self) -> Result<usize> {
        Ok(self.global.bytes(self.global_dim)? + self.len_x * self.local.bytes(self.dim)?)
    }

    /// Bytes an image occupies in a store holding `l_max` locals per record,
    /// including its id-table entry and fp16 strengths.
    pub fn stored_bytes(&self, l_max: usize) -> Result<usize> {
        Ok(16 + self.global.bytes(self.global_dim)? + l_max * (2 + self.local.bytes(self.dim)?))
    }
}

/// Per-image payload in KB (1 KB = 1024 bytes).
pub fn memory_per_image(spec: &MemorySpec) -> Result<f64> {
    Ok(spec.payload_bytes()? as f64 / 1024.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TradeoffRow {
    pub len_x: usize,
    pub kb: f64,
    pub metric: f64,
    pub variant: String,
}

pub const TRADEOFF_HEADER: &str = "l_x,kb,metric,variant";

/// CSV with rows sorted by `len_x` (stable for equal `len_x`).
pub fn export_tradeoff(rows: &[TradeoffRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(AmesError::Empty("trade-off rows"));
    }
    let mut sorted: Vec<&TradeoffRow> = rows.iter().collect();
    sorted.sort_by_key(|r| r.len_x);
    let mut out = String::from(TRADEOFF_HEADER);
    out.push('\n');
    for r in sorted {
        if r.variant.contains([',', '\n']) {
            return Err(AmesError::Encoding("variant names cannot contain commas or newlines"));
        }
        out.push_str(&format!("{},{},{},{}\n", r.len_x, r.kb, r.metric, r.variant));
    }
    Ok(out)
}

pub fn parse_tradeoff(csv: &str) -> Result<Vec<TradeoffRow>> {
    let mut lines = csv.lines();
    if lines.next() != Some(TRADEOFF_HEADER) {
        return Err(AmesError::Encoding("missing trade-off header"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(AmesError::Encoding("trade-off rows have four fields"));
            }
            let bad = |_| AmesError::Encoding("malformed trade-off number");
            Ok(TradeoffRow {
                len_x: f[0].parse().map_err(|_| AmesError::Encoding("malformed trade-off number"))?,
                kb: f[1].parse().map_err(bad)?,
                metric: f[2].parse().map_err(bad)?,
                variant: f[3].to_string(),
            })
        })
        .collect()
}
