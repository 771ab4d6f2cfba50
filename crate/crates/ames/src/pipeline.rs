//! Glue between the synthetic data, training and retrieval evaluation.

use ames_core::eval::{mean_average_precision, pair_auc, ApMode, GroundTruth};
use ames_core::exec::Executor;
use ames_core::model::{ames_forward, AmesParams};
use ames_core::retrieval::{tune_cached, CachedQuery, MemoryDatabase, Query, TUNE_METRIC_K};
use ames_core::synth::{Split, SynthDataset, SynthImage};
use ames_core::training::sampling::NEIGHBORS;
use ames_core::training::{TrainImage, TrainSet};
use ames_core::{AmesError, Result};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn train_images<'a>(images: impl IntoIterator<Item = &'a SynthImage>) -> Vec<TrainImage> {
    images.into_iter().map(|im| TrainImage { id: im.id, class: im.class, locals: im.locals.clone(), global: im.global.clone() }).collect()
}

/// Training set over one split of a synthetic dataset.
pub fn train_set(ds: &SynthDataset, split: Split) -> Result<TrainSet> {
    TrainSet::new(train_images(ds.split(split)), NEIGHBORS)
}

/// Projected model tokens and globals of every image in `split`, plus one
/// query per class member with the rest of its class as positives.
pub struct Benchmark {
    pub db: MemoryDatabase,
    pub queries: Vec<Query>,
    pub gts: Vec<GroundTruth>,
    /// Class label of each database entry.
    pub classes: Vec<Option<u32>>,
}

impl Benchmark {
    pub fn new(ds: &SynthDataset, split: Split, params: &AmesParams) -> Result<Self> {
        let mut db = MemoryDatabase::default();
        let mut classes = Vec::new();
        for im in ds.split(split) {
            db.push(im.id, im.global.clone(), params.projection.project(&im.locals)?);
            classes.push(im.class);
        }
        let mut queries = Vec::new();
        let mut gts = Vec::new();
        for (i, c) in classes.iter().enumerate() {
            let Some(c) = c else { continue };
            queries.push(Query { id: db.ids[i], global: db.globals[i].clone(), tokens: db.tokens[i].clone(), exclude_self: true });
            gts.push(GroundTruth::new(classes.iter().enumerate().filter(|(j, k)| *j != i && **k == Some(*c)).map(|(j, _)| db.ids[j])));
        }
        if queries.is_empty() {
            return Err(AmesError::Empty("no class images in split"));
        }
        Ok(Self { db, queries, gts, classes })
    }

    /// mAP of the plain global ranking over the given queries.
    pub fn global_map(&self, which: &[usize]) -> Result<f64> {
        let lists: Vec<Vec<u64>> =
            which.iter().map(|&k| Ok(ames_core::retrieval::global_rank(&self.queries[k], &self.db, usize::MAX)?.ids())).collect::<Result<_>>()?;
        let gts: Vec<GroundTruth> = which.iter().map(|&k| self.gts[k].clone()).collect();
        Ok(mean_average_precision(&lists, &gts, ApMode::Standard)?.map)
    }

    /// Cached logits for the given queries against their whole candidate list.
    pub fn cache<E: Executor>(&self, params: &AmesParams, which: &[usize], lengths: (usize, usize), exec: &E) -> Result<Vec<CachedQuery>> {
        which.iter().map(|&k| CachedQuery::build(&self.queries[k], &self.db, params, usize::MAX, lengths.0, lengths.1, exec)).collect()
    }

    /// Pair AUC of the model logits: each query against all its positives
    /// and as many negatives drawn from the rest of the split.
    pub fn pair_auc<E: Executor>(&self, params: &AmesParams, lengths: (usize, usize), seed: u64, exec: &E) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pairs: Vec<(usize, usize, bool)> = Vec::new();
        for (qk, q) in self.queries.iter().enumerate() {
            let qi = self.db.ids.iter().position(|&id| id == q.id).expect("query in database");
            let pos: Vec<usize> = (0..self.db.ids.len()).filter(|j| self.gts[qk].positives.contains(&self.db.ids[*j])).collect();
            let neg: Vec<usize> = (0..self.db.ids.len()).filter(|&j| j != qi && !self.gts[qk].positives.contains(&self.db.ids[j])).collect();
            let take = pos.len().min(neg.len());
            pairs.extend(pos.iter().map(|&j| (qk, j, true)));
            pairs.extend(sample(&mut rng, neg.len(), take).into_iter().map(|k| (qk, neg[k], false)));
        }
        let logits = exec.map(pairs.len(), |p| {
            let (qk, j, _) = pairs[p];
            let q = &self.queries[qk].tokens;
            let x = &self.db.tokens[j];
            let q = q.slice_rows(0, lengths.1.min(q.rows()));
            let x = x.slice_rows(0, lengths.0.min(x.rows()));
            ames_forward(&x, &q, params).map(|o| o.logit)
        });
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        for (l, (_, _, y)) in logits.into_iter().zip(&pairs) {
            if *y {
                positives.push(l?)
            } else {
                negatives.push(l?)
            }
        }
        pair_auc(&positives, &negatives)
    }

    /// Pair AUC as in [`Benchmark::pair_auc`], reading logits from a cache
    /// built over every query with the full candidate list.
    pub fn pair_auc_cached(&self, cache: &[CachedQuery], seed: u64) -> Result<f64> {
        if cache.len() != self.queries.len() {
            return Err(AmesError::Shape { what: "cached queries", expected: self.queries.len(), got: cache.len() });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        for (qk, (q, c)) in self.queries.iter().zip(cache).enumerate() {
            let logit =
                |id: u64| c.order[..c.logits.len()].iter().position(|e| e.0 == id).map(|k| c.logits[k]).ok_or(AmesError::Empty("candidate missing from cache"));
            let pos: Vec<u64> = self.db.ids.iter().copied().filter(|id| self.gts[qk].positives.contains(id)).collect();
            let neg: Vec<u64> = self.db.ids.iter().copied().filter(|&id| id != q.id && !self.gts[qk].positives.contains(&id)).collect();
            let take = pos.len().min(neg.len());
            for id in pos {
                positives.push(logit(id)?);
            }
            for k in sample(&mut rng, neg.len(), take) {
                negatives.push(logit(neg[k])?);
            }
        }
        pair_auc(&positives, &negatives)
    }
}

/// Re-ranking against the global baseline on the same held-out queries.
#[derive(Clone, Debug, PartialEq)]
pub struct RerankReport {
    pub lambda: f64,
    pub gamma: f64,
    /// Tuning metric on the tuning queries.
    pub tune_metric: f64,
    pub global_map: f64,
    pub rerank_map: f64,
}

/// Tunes (λ, γ) on the even-indexed queries, then reports mAP of the full
/// re-ranked list and of the global ranking on the odd-indexed ones.
pub fn tuned_rerank<E: Executor>(
    bench: &Benchmark,
    params: &AmesParams,
    lengths: (usize, usize),
    lambdas: &[f64],
    gammas: &[f64],
    exec: &E,
) -> Result<RerankReport> {
    let all: Vec<usize> = (0..bench.queries.len()).collect();
    let cache = bench.cache(params, &all, lengths, exec)?;
    tuned_rerank_cached(bench, &cache, lambdas, gammas)
}

/// [`tuned_rerank`] over logits already cached for every query.
pub fn tuned_rerank_cached(bench: &Benchmark, cache: &[CachedQuery], lambdas: &[f64], gammas: &[f64]) -> Result<RerankReport> {
    if cache.len() != bench.queries.len() {
        return Err(AmesError::Shape { what: "cached queries", expected: bench.queries.len(), got: cache.len() });
    }
    let all: Vec<usize> = (0..bench.queries.len()).collect();
    let (tune, test): (Vec<usize>, Vec<usize>) = all.iter().partition(|&&k| k % 2 == 0);
    let tune_cache: Vec<CachedQuery> = tune.iter().map(|&k| cache[k].clone()).collect();
    let tune_gts: Vec<GroundTruth> = tune.iter().map(|&k| bench.gts[k].clone()).collect();
    let best = tune_cached(&tune_cache, &tune_gts, lambdas, gammas, TUNE_METRIC_K)?;
    let lists: Vec<Vec<u64>> = test.iter().map(|&k| cache[k].ranking(best.lambda, best.gamma)).collect();
    let test_gts: Vec<GroundTruth> = test.iter().map(|&k| bench.gts[k].clone()).collect();
    Ok(RerankReport {
        lambda: best.lambda,
        gamma: best.gamma,
        tune_metric: best.best,
        global_map: bench.global_map(&test)?,
        rerank_map: mean_average_precision(&lists, &test_gts, ApMode::Standard)?.map,
    })
}
