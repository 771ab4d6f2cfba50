use alloc::boxed::Box;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::grad::{loss_gradients, DistillationSetup, PairSpec};
use super::optim::{optimizer_step, AdamState, AdamWConfig};
use super::sampling::{epoch_anchors, sample_lengths, sample_triplet_batch, TrainSet};
use crate::codec::{itq_fit, BinaryCodec, FpProjection, Projection, DEFAULT_DELTA};
use crate::error::{AmesError, Result};
use crate::exec::Executor;
use crate::model::{AmesParams, ModelConfig};
use crate::numerics::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Triplets per batch; each yields a positive and a negative pair.
    pub batch_triplets: usize,
    pub lr0: f64,
    pub adam: AdamWConfig,
    /// Weight of the distillation loss.
    pub beta: f64,
    /// Inclusive range for the per-batch descriptor counts.
    pub length_range: (usize, usize),
    /// Teacher descriptor counts; defaults to the top of `length_range`.
    pub teacher_lengths: Option<(usize, usize)>,
    /// Overrides `epochs` when set.
    pub max_steps: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_triplets: 100,
            lr0: 2e-4,
            adam: AdamWConfig::default(),
            beta: 10.0,
            length_range: (10, 400),
            teacher_lengths: None,
            max_steps: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(AmesError::Config("lr0 must be positive"));
        }
        let (lo, hi) = self.length_range;
        if lo < 1 || lo > hi {
            return Err(AmesError::Config("length range must satisfy 1 <= min <= max"));
        }
        if self.batch_triplets == 0 {
            return Err(AmesError::Config("batch must hold at least one triplet"));
        }
        if self.beta < 0.0 {
            return Err(AmesError::Config("beta must be non-negative"));
        }
        Ok(())
    }
}

/// One optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss_bce: f64,
    pub loss_dis: f64,
    pub len_x: usize,
    pub len_q: usize,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub params: AmesParams,
    pub log: Vec<LogRecord>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FitError {
    #[error("training diverged at step {step}")]
    Diverged { step: usize, last_good: Box<AmesParams>, log: Vec<LogRecord> },
    #[error(transparent)]
    Ames(#[from] AmesError),
}

/// Number of optimizer steps `fit` will run.
pub fn total_steps(set: &TrainSet, config: &TrainConfig) -> usize {
    config.max_steps.unwrap_or_else(|| config.epochs * set.anchors().len().div_ceil(config.batch_triplets))
}

/// Supervised training, optionally guided by a frozen teacher.
pub fn fit<E: Executor>(
    set: &TrainSet,
    initial: AmesParams,
    config: &TrainConfig,
    distill: Option<&DistillationSetup>,
    exec: &E,
) -> core::result::Result<FitOutcome, FitError> {
    config.validate()?;
    if set.anchors().is_empty() {
        return Err(AmesError::Empty("no class with two or more images").into());
    }
    if let Some(setup) = distill {
        if setup.teacher.dim() != initial.dim() && setup.mode == super::DistillMode::Tokens {
            return Err(AmesError::Config("teacher and student token dims differ").into());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let total = total_steps(set, config);
    let mut params = initial;
    let mut state = AdamState::for_params(&params);
    let mut log = Vec::with_capacity(total);
    let (lo, hi) = config.length_range;
    let (tx, tq) = config.teacher_lengths.unwrap_or((hi, hi));
    let mut step = 0;
    let mut epoch = 0;
    while step < total {
        let anchors = epoch_anchors(set, &mut rng);
        for chunk in anchors.chunks(config.batch_triplets) {
            if step >= total {
                break;
            }
            let lengths = sample_lengths(lo, hi, &mut rng);
            let batch = sample_triplet_batch(set, chunk, lengths, &mut rng)?;
            let specs: Vec<PairSpec<'_>> = batch
                .iter()
                .map(|p| {
                    let x = &set.image(p.other).locals;
                    let q = &set.image(p.anchor).locals;
                    PairSpec {
                        x,
                        q,
                        len_x: p.len_x,
                        len_q: p.len_q,
                        teacher_len_x: tx.min(x.rows()).max(p.len_x),
                        teacher_len_q: tq.min(q.rows()).max(p.len_q),
                        label: p.label as f64,
                    }
                })
                .collect();
            let (loss, grads) = match loss_gradients(&params, &specs, distill, config.beta, exec) {
                Ok(v) => v,
                Err(AmesError::NonFiniteLoss { .. }) => {
                    return Err(FitError::Diverged { step, last_good: Box::new(params), log });
                }
                Err(e) => return Err(e.into()),
            };
            let before = params.clone();
            let lr = optimizer_step(&mut params, &grads, &mut state, step, total, config.lr0, &config.adam)?;
            if !params.is_finite() {
                return Err(FitError::Diverged { step, last_good: Box::new(before), log });
            }
            log.push(LogRecord { step, epoch, lr, loss_bce: loss.bce, loss_dis: loss.dis, len_x: lengths.0, len_q: lengths.1 });
            step += 1;
        }
        epoch += 1;
    }
    Ok(FitOutcome { params, log })
}

/// Which projection a freshly initialized model uses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CodecKind {
    Fp,
    /// Binary codec with the given erf smoothness; `W` starts from ITQ.
    Binary {
        delta: f64,
    },
}

impl CodecKind {
    pub fn binary() -> Self {
        CodecKind::Binary { delta: DEFAULT_DELTA }
    }
}

/// Descriptors sampled for ITQ initialization.
pub const ITQ_SAMPLES: usize = 100_000;
pub const ITQ_ITERATIONS: usize = 50;

/// Stacks (a deterministic sample of) the rows of every matrix.
pub fn sample_descriptors<'a>(locals: impl IntoIterator<Item = &'a Matrix>, limit: usize, seed: u64) -> Result<Matrix> {
    let rows: Vec<&[f64]> = locals.into_iter().flat_map(|m| (0..m.rows()).map(move |r| m.row(r))).collect();
    let dim = rows.first().map_or(0, |r| r.len());
    if rows.is_empty() || dim == 0 {
        return Err(AmesError::Empty("no descriptors to sample"));
    }
    let chosen: Vec<usize> = if rows.len() <= limit {
        (0..rows.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, rows.len(), limit).into_vec();
        idx.sort_unstable();
        idx
    };
    let mut data = Vec::with_capacity(chosen.len() * dim);
    for i in chosen {
        data.extend_from_slice(rows[i]);
    }
    Matrix::from_vec(data.len() / dim, dim, data)
}

/// Random model parameters; the binary variant initializes `W` with ITQ on
/// the training descriptors.
pub fn init_params(model: ModelConfig, kind: CodecKind, set: &TrainSet, seed: u64) -> Result<AmesParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let projection = match kind {
        CodecKind::Fp => Projection::Fp(FpProjection::init(model.input_dim, model.dim, &mut rng)),
        CodecKind::Binary { delta } => {
            let data = sample_descriptors(set.images().iter().map(|im| &im.locals), ITQ_SAMPLES, seed)?;
            let fit = itq_fit(&data, model.dim, ITQ_ITERATIONS, seed)?;
            Projection::Binary(BinaryCodec::new(fit.weight, delta)?)
        }
    };
    AmesParams::init(model, projection, &mut rng)
}
