//! Global ranking, ensemble re-ranking of the top-m and (λ, γ) tuning.

use alloc::vec::Vec;
use core::sync::atomic::{AtomicBool, Ordering};

use crate::error::{AmesError, Result};
use crate::eval::{map_at_k, GroundTruth};
use crate::exec::Executor;
use crate::model::{ames_forward, ames_score, AmesParams};
use crate::numerics::{dot, Matrix};

/// λ grid: 0.00 to 1.00 in steps of 0.05.
pub fn default_lambdas() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

/// γ grid: 1e-4 to 1e1 in decades.
pub fn default_gammas() -> Vec<f64> {
    alloc::vec![1e-4, 1e-3, 1e-2, 1e-1, 1e0, 1e1]
}

/// Candidates scored during tuning.
pub const TUNE_DEPTH: usize = 400;
/// Cut-off of the tuning metric.
pub const TUNE_METRIC_K: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnsembleConfig {
    pub lambda: f64,
    pub gamma: f64,
    /// Re-ranking depth.
    pub m: usize,
    pub len_x: usize,
    pub len_q: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self { lambda: 0.5, gamma: 1.0, m: 1600, len_x: 100, len_q: 600 }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(AmesError::Config("lambda must lie in [0, 1]"));
        }
        if !(self.gamma >= 0.0) {
            return Err(AmesError::Config("gamma must be non-negative"));
        }
        if self.len_x == 0 || self.len_q == 0 {
            return Err(AmesError::Config("test descriptor counts must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    pub query: u64,
    /// `(db id, score)`, scores non-increasing.
    pub entries: Vec<(u64, f64)>,
}

impl RankedList {
    pub fn ids(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.0).collect()
    }
}

/// Searchable image collection.
pub trait Database: Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn id(&self, index: usize) -> u64;
    /// Unit global descriptor.
    fn global(&self, index: usize) -> Result<Vec<f64>>;
    /// Number of stored local descriptors.
    fn local_count(&self, index: usize) -> usize;
    /// Model tokens of the `len` strongest locals.
    fn tokens(&self, index: usize, len: usize) -> Result<Matrix>;
}

/// Database held in memory as reals.
#[derive(Clone, Debug, Default)]
pub struct MemoryDatabase {
    pub ids: Vec<u64>,
    pub globals: Vec<Vec<f64>>,
    /// Strength-ordered model tokens.
    pub tokens: Vec<Matrix>,
}

impl MemoryDatabase {
    pub fn push(&mut self, id: u64, global: Vec<f64>, tokens: Matrix) {
        self.ids.push(id);
        self.globals.push(global);
        self.tokens.push(tokens);
    }
}

impl Database for MemoryDatabase {
    fn len(&self) -> usize {
        self.ids.len()
    }

    fn id(&self, index: usize) -> u64 {
        self.ids[index]
    }

    fn global(&self, index: usize) -> Result<Vec<f64>> {
        Ok(self.globals[index].clone())
    }

    fn local_count(&self, index: usize) -> usize {
        self.tokens[index].rows()
    }

    fn tokens(&self, index: usize, len: usize) -> Result<Matrix> {
        let t = &self.tokens[index];
        if len == 0 || len > t.rows() {
            return Err(AmesError::LengthOutOfRange { got: len, min: 1, max: t.rows() });
        }
        Ok(t.slice_rows(0, len))
    }
}

/// A query: global descriptor plus strength-ordered model tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub id: u64,
    pub global: Vec<f64>,
    pub tokens: Matrix,
    /// Leave out the database entry carrying the query's own id.
    pub exclude_self: bool,
}

/// `(db index, s_g)` for every database image, descending by similarity
/// with ties broken by ascending id.
pub fn global_order<D: Database + ?Sized>(query: &Query, db: &D) -> Result<Vec<(usize, f64)>> {
    if db.is_empty() {
        return Err(AmesError::Empty("database"));
    }
    let mut out = Vec::with_capacity(db.len());
    for i in 0..db.len() {
        if query.exclude_self && db.id(i) == query.id {
            continue;
        }
        let g = db.global(i)?;
        if g.len() != query.global.len() {
            return Err(AmesError::Shape { what: "global dim", expected: query.global.len(), got: g.len() });
        }
        out.push((i, dot(&g, &query.global)));
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(db.id(a.0).cmp(&db.id(b.0))));
    Ok(out)
}

/// Global-similarity ranking truncated to `top_k`.
pub fn global_rank<D: Database + ?Sized>(query: &Query, db: &D, top_k: usize) -> Result<RankedList> {
    let order = global_order(query, db)?;
    Ok(RankedList { query: query.id, entries: order.into_iter().take(top_k).map(|(i, s)| (db.id(i), s)).collect() })
}

/// `λ·s_g + (1−λ)·σ(γ·logit)`.
#[inline]
pub fn ensemble_score(global: f64, logit: f64, lambda: f64, gamma: f64) -> f64 {
    lambda * global + (1.0 - lambda) * ames_score(logit, gamma)
}

/// Model logits of the query against the given database entries, with the
/// database side capped at `len_x` and the query side at `len_q`.
pub fn candidate_logits<D: Database + ?Sized, E: Executor>(
    query: &Query,
    db: &D,
    params: &AmesParams,
    candidates: &[usize],
    len_x: usize,
    len_q: usize,
    exec: &E,
) -> Result<Vec<f64>> {
    if query.tokens.rows() == 0 {
        return Err(AmesError::EmptyDescriptorSet);
    }
    let q = query.tokens.slice_rows(0, len_q.min(query.tokens.rows()));
    exec.map(candidates.len(), |k| {
        let i = candidates[k];
        let x = db.tokens(i, len_x.min(db.local_count(i)))?;
        Ok(ames_forward(&x, &q, params)?.logit)
    })
    .into_iter()
    .collect()
}

/// Sorts `(index, score)` descending with ties by ascending id.
fn sort_block<D: Database + ?Sized>(block: &mut [(usize, f64)], db: &D) {
    block.sort_by(|a, b| b.1.total_cmp(&a.1).then(db.id(a.0).cmp(&db.id(b.0))));
}

/// Re-scores the global top-m with the ensemble; the rest keeps its global
/// order below the re-ranked block, with scores capped at the lowest
/// re-ranked score so the list stays non-increasing.
pub fn rerank<D: Database + ?Sized, E: Executor>(query: &Query, db: &D, params: &AmesParams, config: &EnsembleConfig, exec: &E) -> Result<RankedList> {
    config.validate()?;
    let mut order = global_order(query, db)?;
    let m = clamp_depth(config.m, order.len());
    if m > 0 && config.lambda < 1.0 {
        let idx: Vec<usize> = order[..m].iter().map(|e| e.0).collect();
        let logits = candidate_logits(query, db, params, &idx, config.len_x, config.len_q, exec)?;
        for (e, l) in order[..m].iter_mut().zip(logits) {
            e.1 = ensemble_score(e.1, l, config.lambda, config.gamma);
        }
        sort_block(&mut order[..m], db);
        let floor = order[m - 1].1;
        for e in order[m..].iter_mut() {
            e.1 = e.1.min(floor);
        }
    }
    Ok(RankedList { query: query.id, entries: order.into_iter().map(|(i, s)| (db.id(i), s)).collect() })
}

static DEPTH_WARNED: AtomicBool = AtomicBool::new(false);

/// Warns once per process, not once per query.
fn clamp_depth(m: usize, len: usize) -> usize {
    if m > len && !DEPTH_WARNED.swap(true, Ordering::Relaxed) {
        log::warn!("re-ranking depth {m} exceeds the {len} candidates; clamped");
    }
    m.min(len)
}

/// Outcome of the (λ, γ) grid search.
#[derive(Clone, Debug, PartialEq)]
pub struct TuneResult {
    pub lambda: f64,
    pub gamma: f64,
    pub best: f64,
    /// `grid[i][j]` is the metric at `lambdas[i]`, `gammas[j]`.
    pub grid: Vec<Vec<f64>>,
}

/// Global order and cached logits of one validation query.
#[derive(Clone, Debug)]
pub struct CachedQuery {
    pub order: Vec<(u64, f64)>,
    /// Logits of the first `m` entries of `order`.
    pub logits: Vec<f64>,
}

impl CachedQuery {
    pub fn build<D: Database + ?Sized, E: Executor>(
        query: &Query,
        db: &D,
        params: &AmesParams,
        m: usize,
        len_x: usize,
        len_q: usize,
        exec: &E,
    ) -> Result<Self> {
        let order = global_order(query, db)?;
        let m = clamp_depth(m, order.len());
        let idx: Vec<usize> = order[..m].iter().map(|e| e.0).collect();
        let logits = candidate_logits(query, db, params, &idx, len_x, len_q, exec)?;
        Ok(Self { order: order.into_iter().map(|(i, s)| (db.id(i), s)).collect(), logits })
    }

    /// Ranked ids under `(λ, γ)`, same rules as [`rerank`].
    pub fn ranking(&self, lambda: f64, gamma: f64) -> Vec<u64> {
        let m = self.logits.len();
        let mut head: Vec<(u64, f64)> = if lambda < 1.0 {
            self.order[..m].iter().zip(&self.logits).map(|(e, &l)| (e.0, ensemble_score(e.1, l, lambda, gamma))).collect()
        } else {
            self.order[..m].to_vec()
        };
        head.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        head.iter().map(|e| e.0).chain(self.order[m..].iter().map(|e| e.0)).collect()
    }
}

/// Grid search maximizing mAP@`metric_k` on validation queries, over cached
/// logits. Ties go to the smaller λ, then the smaller γ.
pub fn tune_cached(cache: &[CachedQuery], gts: &[GroundTruth], lambdas: &[f64], gammas: &[f64], metric_k: usize) -> Result<TuneResult> {
    if cache.is_empty() {
        return Err(AmesError::Empty("validation set"));
    }
    if lambdas.is_empty() || gammas.is_empty() {
        return Err(AmesError::Empty("tuning grid"));
    }
    let mut lam: Vec<f64> = lambdas.to_vec();
    lam.sort_by(f64::total_cmp);
    let mut gam: Vec<f64> = gammas.to_vec();
    gam.sort_by(f64::total_cmp);
    let mut grid = Vec::with_capacity(lam.len());
    let mut best = (f64::NEG_INFINITY, lam[0], gam[0]);
    for &l in &lam {
        let mut row = Vec::with_capacity(gam.len());
        for &g in &gam {
            let lists: Vec<Vec<u64>> = cache.iter().map(|c| c.ranking(l, g)).collect();
            let v = map_at_k(&lists, gts, metric_k)?.map;
            if v > best.0 {
                best = (v, l, g);
            }
            row.push(v);
        }
        grid.push(row);
    }
    Ok(TuneResult { lambda: best.1, gamma: best.2, best: best.0, grid })
}

/// Computes every logit once, then searches the grid.
#[allow(clippy::too_many_arguments)]
pub fn tune_ensemble<D: Database + ?Sized, E: Executor>(
    queries: &[Query],
    gts: &[GroundTruth],
    db: &D,
    params: &AmesParams,
    lambdas: &[f64],
    gammas: &[f64],
    m: usize,
    lengths: (usize, usize),
    exec: &E,
) -> Result<TuneResult> {
    if queries.is_empty() {
        return Err(AmesError::Empty("validation set"));
    }
    let cache = queries.iter().map(|q| CachedQuery::build(q, db, params, m, lengths.0, lengths.1, exec)).collect::<Result<Vec<_>>>()?;
    tune_cached(&cache, gts, lambdas, gammas, TUNE_METRIC_K)
}
