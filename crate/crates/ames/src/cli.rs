//! The `ames` command line.
//!
//! Inputs are read from the paths given; outputs are written under
//! `--out-dir` (default `$AMES_OUT_DIR`, else the working directory).
//! A `--config` file of `key = value` lines supplies any long option not
//! given as a flag. Each command prints one `key=value` summary line.

use std::collections::{BTreeMap, HashMap};
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ames_core::codec::{itq_fit, pq_train, BinaryCodec, Projection};
use ames_core::eval::{export_tradeoff, map_at_k, mean_average_precision, memory_per_image, ApMode, GroundTruth, MemorySpec, TradeoffRow};
use ames_core::model::{AmesParams, ModelConfig};
use ames_core::numerics::Matrix;
use ames_core::record::{GlobalEncoding, LocalEncoding, RecordEncoder};
use ames_core::retrieval::{default_gammas, default_lambdas, rerank, tune_ensemble, Database, EnsembleConfig, Query, RankedList, TUNE_DEPTH, TUNE_METRIC_K};
use ames_core::synth::{generate_dataset, Split, SplitMode, SynthConfig};
use ames_core::training::fit::{sample_descriptors, ITQ_ITERATIONS, ITQ_SAMPLES};
use ames_core::training::sampling::NEIGHBORS;
use ames_core::training::{fit, init_params, AdamWConfig, CodecKind, DistillMode, DistillationSetup, FitError, TrainConfig, TrainImage, TrainSet};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::Rayon;
use crate::format::{load_codebook, load_codec, load_params, save_codebook, save_codec, save_params};
use crate::store::{write_store, Store, StoreDatabase, StoreLayout};
use crate::tables::{format_compact, format_labels, format_log, format_rankings, format_report, parse_labels, parse_rankings, KeyValues, Label, ReportRow};

#[derive(Parser, Debug)]
#[command(name = "ames", version, about = "Re-ranking image retrieval with asymmetric memory-efficient similarity")]
pub struct Cli {
    /// File of `key = value` settings; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory receiving every output file.
    #[arg(long, global = true, env = "AMES_OUT_DIR", default_value = ".")]
    pub out_dir: PathBuf,
    /// Worker threads, 0 for every core. Defaults to every core for rank and
    /// tune and to 1 otherwise.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset as a raw descriptor store plus labels.
    Synth(SynthArgs),
    /// Fit the ITQ binarization codec and optionally a PQ codebook.
    FitCodec(FitCodecArgs),
    /// Encode a raw store for a trained model.
    BuildStore(BuildStoreArgs),
    /// Train a model on the labelled images of a raw store.
    Train(TrainArgs),
    /// Train a binary student guided by a frozen full-precision teacher.
    Distill(DistillArgs),
    /// Grid-search the ensemble weights on validation queries.
    Tune(TuneArgs),
    /// Rank the database for each query.
    Rank(RankArgs),
    /// Score rankings against labels.
    Eval(EvalArgs),
    /// Memory per image for a sweep of database descriptor counts.
    Tradeoff(TradeoffArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitModeArg {
    Images,
    Classes,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CodecArg {
    Fp,
    Bin,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PqArg {
    Pq1,
    Pq4,
    Pq8,
}

impl PqArg {
    fn sub_dim(self) -> usize {
        match self {
            PqArg::Pq1 => 1,
            PqArg::Pq4 => 4,
            PqArg::Pq8 => 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GlobalArg {
    Fp16,
    Pq1,
    Pq4,
    Pq8,
}

impl From<GlobalArg> for GlobalEncoding {
    fn from(g: GlobalArg) -> Self {
        match g {
            GlobalArg::Fp16 => GlobalEncoding::Fp16,
            GlobalArg::Pq1 => GlobalEncoding::Pq(1),
            GlobalArg::Pq4 => GlobalEncoding::Pq(4),
            GlobalArg::Pq8 => GlobalEncoding::Pq(8),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LocalArg {
    Fp16,
    Bin,
}

impl From<LocalArg> for LocalEncoding {
    fn from(l: LocalArg) -> Self {
        match l {
            LocalArg::Fp16 => LocalEncoding::Fp16,
            LocalArg::Bin => LocalEncoding::Bin,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ApArg {
    Standard,
    Trapezoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DistillArg {
    Tokens,
    Scores,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    pub classes: usize,
    #[arg(long, default_value_t = 10)]
    pub images_per_class: usize,
    #[arg(long, default_value_t = 200)]
    pub distractors: usize,
    /// Raw descriptor dimension.
    #[arg(long, default_value_t = 64)]
    pub input_dim: usize,
    /// Local descriptors per image.
    #[arg(long, default_value_t = 50)]
    pub l_max: usize,
    /// Fraction of each image's descriptors copied from class prototypes.
    #[arg(long, default_value_t = 0.3)]
    pub planted_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.3)]
    pub val_fraction: f64,
    #[arg(long, value_enum, default_value_t = SplitModeArg::Images)]
    pub split_mode: SplitModeArg,
    /// Output store file name.
    #[arg(long, default_value = "synth.store")]
    pub output: String,
    /// Output labels file name.
    #[arg(long, default_value = "labels.tsv")]
    pub labels_output: String,
}

#[derive(Args, Debug)]
pub struct FitCodecArgs {
    /// Raw descriptor store.
    #[arg(long)]
    pub store: PathBuf,
    /// Restricts fitting to the `--split` images of this labels file.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    pub split: SplitArg,
    /// Code length d.
    #[arg(long, default_value_t = 128)]
    pub bits: usize,
    /// Width of the erf relaxation used in training.
    #[arg(long, default_value_t = 1e-3)]
    pub delta: f64,
    #[arg(long, default_value_t = ITQ_ITERATIONS)]
    pub iterations: usize,
    #[arg(long, default_value_t = ITQ_SAMPLES)]
    pub samples: usize,
    /// Also train a PQ codebook for the globals.
    #[arg(long, value_enum)]
    pub pq: Option<PqArg>,
    #[arg(long, default_value = "codec.bin")]
    pub output: String,
    #[arg(long, default_value = "codebook.bin")]
    pub codebook_output: String,
}

#[derive(Args, Debug)]
pub struct BuildStoreArgs {
    /// Raw descriptor store.
    #[arg(long)]
    pub store: PathBuf,
    /// Model checkpoint whose projection encodes the locals.
    #[arg(long)]
    pub params: PathBuf,
    /// PQ codebook; globals stay fp16 without one.
    #[arg(long)]
    pub codebook: Option<PathBuf>,
    /// Keeps only the `--split` images of this labels file.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    #[arg(long, default_value = "db.store")]
    pub output: String,
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    /// Token dimension d.
    #[arg(long, default_value_t = 128)]
    pub dim: usize,
    /// Number of blocks N.
    #[arg(long, default_value_t = 5)]
    pub depth: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Raw descriptor store.
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value_t = CodecArg::Fp)]
    pub codec: CodecArg,
    /// Fitted binarization codec; ITQ is fitted on the training set without one.
    #[arg(long)]
    pub codec_file: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-3)]
    pub delta: f64,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 15)]
    pub epochs: usize,
    /// Optimizer step budget, overriding the epoch count.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Triplets per batch.
    #[arg(long, default_value_t = 100)]
    pub batch: usize,
    #[arg(long, default_value_t = 2e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-2)]
    pub weight_decay: f64,
    /// Smallest sampled descriptor count.
    #[arg(long, default_value_t = 10)]
    pub lmin: usize,
    /// Largest sampled descriptor count.
    #[arg(long, default_value_t = 400)]
    pub lmax: usize,
    /// Checkpoint file name; the log goes next to it.
    #[arg(long, default_value = "model.ckpt")]
    pub output: String,
}

#[derive(Args, Debug)]
pub struct DistillArgs {
    /// Frozen full-precision teacher checkpoint.
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long, value_enum, default_value_t = DistillArg::Tokens)]
    pub mode: DistillArg,
    /// Distillation weight.
    #[arg(long, default_value_t = 10.0)]
    pub beta: f64,
    /// Teacher descriptor counts as `x,q`; the training maximum by default.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub teacher_lengths: Option<Vec<usize>>,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Args, Debug)]
pub struct EnsembleArgs {
    /// Database descriptor count L_x.
    #[arg(long, default_value_t = 100)]
    pub lx: usize,
    /// Query descriptor count L_q.
    #[arg(long, default_value_t = 600)]
    pub lq: usize,
}

#[derive(Args, Debug)]
pub struct TuneArgs {
    /// Encoded database store.
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub codebook: Option<PathBuf>,
    #[arg(long)]
    pub labels: PathBuf,
    /// Split providing the validation queries.
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    pub split: SplitArg,
    /// Store holding the queries; the database store by default.
    #[arg(long)]
    pub query: Option<PathBuf>,
    /// Re-ranking depth.
    #[arg(long, default_value_t = TUNE_DEPTH)]
    pub m: usize,
    #[command(flatten)]
    pub lengths: EnsembleArgs,
    #[arg(long, value_delimiter = ',', default_values_t = default_lambdas())]
    pub lambdas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = default_gammas())]
    pub gammas: Vec<f64>,
    /// Grid file name; the chosen weights go to `ensemble.conf`.
    #[arg(long, default_value = "tune.tsv")]
    pub output: String,
}

#[derive(Args, Debug)]
pub struct RankArgs {
    /// Encoded database store.
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub codebook: Option<PathBuf>,
    /// Store holding the queries.
    #[arg(long)]
    pub query: PathBuf,
    /// Query ids to rank; every record of the query store by default.
    #[arg(long, value_delimiter = ',')]
    pub query_ids: Vec<u64>,
    /// Leave each query's own id out of its ranking.
    #[arg(long)]
    pub exclude_self: bool,
    /// Re-ranking depth.
    #[arg(long, default_value_t = 1600)]
    pub m: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    #[command(flatten)]
    pub lengths: EnsembleArgs,
    /// Ranking file name; the compact form is written beside it.
    #[arg(long, default_value = "ranking.tsv")]
    pub output: String,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Ranking in either the tabular or the compact form.
    #[arg(long)]
    pub ranking: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// Counts as positives only the images of this split (the database side).
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    #[arg(long, value_enum, default_value_t = ApArg::Standard)]
    pub mode: ApArg,
    /// Truncate rankings to the top k (standard mode only).
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value = "synthetic")]
    pub dataset: String,
    #[arg(long, default_value = "report.tsv")]
    pub output: String,
}

#[derive(Args, Debug)]
pub struct TradeoffArgs {
    /// Database descriptor counts.
    #[arg(long, value_delimiter = ',', required = true)]
    pub lx: Vec<usize>,
    #[arg(long, value_enum, default_value_t = GlobalArg::Pq8)]
    pub global: GlobalArg,
    #[arg(long, value_enum, default_value_t = LocalArg::Bin)]
    pub local: LocalArg,
    /// Local descriptor dimension d.
    #[arg(long, default_value_t = 128)]
    pub dim: usize,
    /// Global descriptor dimension.
    #[arg(long, default_value_t = 2048)]
    pub global_dim: usize,
    /// Metric per L_x, in the same order.
    #[arg(long, value_delimiter = ',')]
    pub metrics: Vec<f64>,
    /// Curve label; `<global>+<local>` by default.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long, default_value = "tradeoff.csv")]
    pub output: String,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code: 0 on success, 1 on failure, 2 on usage errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match merge_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(&cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Appends `--key value` for every config entry whose flag is absent.
fn merge_config(mut args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut path = None;
    for (i, a) in args.iter().enumerate() {
        let s = a.to_string_lossy();
        if s == "--config" {
            path = args.get(i + 1).map(PathBuf::from);
        } else if let Some(p) = s.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        }
    }
    let Some(path) = path else { return Ok(args) };
    let kv = KeyValues::parse(&read_text(&path)?)?;
    for (key, value) in kv.0 {
        if key == "config" {
            return Err(Error::Input("a config file cannot name another config file".into()));
        }
        let flag = format!("--{key}");
        let given = args.iter().any(|a| {
            let s = a.to_string_lossy();
            s == flag || s.starts_with(&format!("{flag}="))
        });
        match value.as_str() {
            _ if given => {}
            "true" => args.push(flag.into()),
            "false" => {}
            v => args.push(format!("{flag}={v}").into()),
        }
    }
    Ok(args)
}

fn dispatch(cli: &Cli) -> Result<String> {
    let ctx = Context { out_dir: &cli.out_dir, seed: cli.seed, workers: cli.workers };
    match &cli.command {
        Command::Synth(a) => synth(&ctx, a),
        Command::FitCodec(a) => fit_codec(&ctx, a),
        Command::BuildStore(a) => build_store(&ctx, a),
        Command::Train(a) => train(&ctx, a, None),
        Command::Distill(a) => {
            let teacher = load_params(&a.teacher)?;
            let mode = match a.mode {
                DistillArg::Tokens => DistillMode::Tokens,
                DistillArg::Scores => DistillMode::Scores,
            };
            let lengths = a.teacher_lengths.as_ref().map(|v| (v[0], v[1]));
            train(&ctx, &a.train, Some((DistillationSetup::new(teacher, mode)?, a.beta, lengths)))
        }
        Command::Tune(a) => tune(&ctx, a),
        Command::Rank(a) => rank(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Tradeoff(a) => tradeoff(&ctx, a),
    }
}

struct Context<'a> {
    out_dir: &'a Path,
    seed: u64,
    workers: Option<usize>,
}

impl Context<'_> {
    fn output(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(self.out_dir).map_err(|e| Error::Path(self.out_dir.display().to_string(), e))?;
        Ok(self.out_dir.join(name))
    }

    fn executor(&self, parallel_default: bool) -> Result<Rayon> {
        let n = self.workers.unwrap_or(if parallel_default { 0 } else { 1 });
        Rayon::new(n).map_err(|e| Error::Input(format!("thread pool: {e}")))
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Path(path.display().to_string(), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Path(path.display().to_string(), e))
}

fn synth(ctx: &Context, a: &SynthArgs) -> Result<String> {
    let config = SynthConfig {
        classes: a.classes,
        images_per_class: a.images_per_class,
        distractors: a.distractors,
        dim: a.input_dim,
        l_max: a.l_max,
        planted_fraction: a.planted_fraction,
        noise: a.noise,
        val_fraction: a.val_fraction,
        split_mode: match a.split_mode {
            SplitModeArg::Images => SplitMode::Images,
            SplitModeArg::Classes => SplitMode::Classes,
        },
        seed: ctx.seed,
    };
    let ds = generate_dataset(&config)?;
    let enc = RecordEncoder { codebook: None, projection: None };
    let records = ds.images.iter().map(|im| enc.encode(im.id, &im.global, &im.locals, &im.strengths)).collect::<ames_core::Result<Vec<_>>>()?;
    let layout =
        StoreLayout { global_dim: a.input_dim, dim: a.input_dim, l_max: a.l_max, global: GlobalEncoding::Fp16, local: LocalEncoding::Fp16, projected: false };
    let store = ctx.output(&a.output)?;
    write_store(&store, &layout, &records)?;
    let labels: Vec<Label> = ds.images.iter().map(|im| Label { id: im.id, class: im.class, split: im.split }).collect();
    let labels_path = ctx.output(&a.labels_output)?;
    write_text(&labels_path, &format_labels(&labels))?;
    Ok(format!("synth images={} store={} labels={}", records.len(), store.display(), labels_path.display()))
}

fn load_labels(path: &Path) -> Result<Vec<Label>> {
    parse_labels(&read_text(path)?)
}

/// Store positions of the labelled images in `split`, or of every image.
fn select(store: &Store, labels: Option<&[Label]>, split: Option<Split>) -> Result<Vec<usize>> {
    match (labels, split) {
        (Some(labels), Some(split)) => labels
            .iter()
            .filter(|l| l.split == split)
            .map(|l| store.position(l.id).ok_or_else(|| Error::Input(format!("labelled id {} is not in the store", l.id))))
            .collect(),
        _ => Ok((0..store.len()).collect()),
    }
}

/// Raw locals and globals from a store that holds unprojected fp16 locals.
fn raw_images(store: &Store, positions: &[usize]) -> Result<Vec<(u64, Matrix, Vec<f64>)>> {
    let l = store.layout();
    if l.local != LocalEncoding::Fp16 || l.projected {
        return Err(Error::Input("expected a raw store (unprojected fp16 locals)".into()));
    }
    positions
        .iter()
        .map(|&k| {
            let r = store.record(k)?;
            if !matches!(l.global, GlobalEncoding::Fp16) {
                return Err(Error::Input("expected fp16 globals in the raw store".into()));
            }
            Ok((r.id, r.local_matrix(l.l_max)?, r.global_vector(None)?))
        })
        .collect()
}

fn fit_codec(ctx: &Context, a: &FitCodecArgs) -> Result<String> {
    let store = Store::open(&a.store)?;
    let labels = a.labels.as_deref().map(load_labels).transpose()?;
    let positions = select(&store, labels.as_deref(), labels.as_ref().map(|_| a.split.into()))?;
    let images = raw_images(&store, &positions)?;
    let data = sample_descriptors(images.iter().map(|im| &im.1), a.samples, ctx.seed)?;
    let fitted = itq_fit(&data, a.bits, a.iterations, ctx.seed)?;
    BinaryCodec::new(fitted.weight.clone(), a.delta)?;
    let codec = ctx.output(&a.output)?;
    save_codec(&codec, &fitted.weight, a.delta)?;
    let mut summary =
        format!("fit-codec bits={} samples={} itq_loss={} codec={}", a.bits, data.rows(), fitted.losses.last().copied().unwrap_or(f64::NAN), codec.display());
    if let Some(pq) = a.pq {
        let all: Vec<usize> = (0..store.len()).collect();
        let globals = raw_images(&store, &all)?;
        let dim = globals.first().map_or(0, |g| g.2.len());
        let flat: Vec<f64> = globals.iter().flat_map(|g| g.2.iter().copied()).collect();
        let cb = pq_train(&Matrix::from_vec(globals.len(), dim, flat)?, pq.sub_dim(), ctx.seed)?;
        let path = ctx.output(&a.codebook_output)?;
        save_codebook(&path, &cb)?;
        write!(summary, " codebook={}", path.display()).expect("string write");
    }
    Ok(summary)
}

fn build_store(ctx: &Context, a: &BuildStoreArgs) -> Result<String> {
    let raw = Store::open(&a.store)?;
    let params = load_params(&a.params)?;
    let codebook = a.codebook.as_deref().map(load_codebook).transpose()?;
    let labels = a.labels.as_deref().map(load_labels).transpose()?;
    if a.split.is_some() && labels.is_none() {
        return Err(Error::Input("--split needs --labels".into()));
    }
    let positions = select(&raw, labels.as_deref(), a.split.map(Into::into))?;
    let enc = RecordEncoder { codebook: codebook.as_ref(), projection: Some(&params.projection) };
    let mut records = Vec::with_capacity(positions.len());
    for &k in &positions {
        let r = raw.record(k)?;
        let l = raw.layout();
        if l.local != LocalEncoding::Fp16 || l.projected {
            return Err(Error::Input("expected a raw store (unprojected fp16 locals)".into()));
        }
        let strengths: Vec<f64> = r.strengths.iter().map(|s| s.to_f64()).collect();
        records.push(enc.encode(r.id, &r.global_vector(None)?, &r.local_matrix(l.l_max)?, &strengths)?);
    }
    let layout = StoreLayout {
        global_dim: raw.layout().global_dim,
        dim: params.projection.output_dim(),
        l_max: raw.layout().l_max,
        global: enc.global_encoding(),
        local: enc.local_encoding(),
        projected: !params.projection.is_binary(),
    };
    let out = ctx.output(&a.output)?;
    write_store(&out, &layout, &records)?;
    Ok(format!(
        "build-store images={} global={} local={} bytes={} store={}",
        records.len(),
        layout.global.name(),
        layout.local.name(),
        layout.file_bytes(records.len())?,
        out.display()
    ))
}

/// Teacher, beta and optional teacher lengths.
type Distill = (DistillationSetup, f64, Option<(usize, usize)>);

fn train(ctx: &Context, a: &TrainArgs, distill: Option<Distill>) -> Result<String> {
    let store = Store::open(&a.store)?;
    let labels = load_labels(&a.labels)?;
    let positions = select(&store, Some(&labels), Some(a.split.into()))?;
    let classes: HashMap<u64, Option<u32>> = labels.iter().map(|l| (l.id, l.class)).collect();
    let images: Vec<TrainImage> =
        raw_images(&store, &positions)?.into_iter().map(|(id, locals, global)| TrainImage { id, class: classes[&id], locals, global }).collect();
    let set = TrainSet::new(images, NEIGHBORS)?;
    let model = ModelConfig::new(store.layout().dim, a.model.dim, a.model.depth, a.model.heads);
    let kind = match (a.codec, distill.is_some()) {
        (CodecArg::Fp, false) => CodecKind::Fp,
        _ => CodecKind::Binary { delta: a.delta },
    };
    let initial = match (&a.codec_file, kind) {
        (Some(path), CodecKind::Binary { .. }) => {
            let (weight, delta) = load_codec(path)?;
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
            AmesParams::init(model, Projection::Binary(BinaryCodec::new(weight, delta)?), &mut rng)?
        }
        (Some(_), CodecKind::Fp) => return Err(Error::Input("--codec-file needs --codec bin".into())),
        (None, kind) => init_params(model, kind, &set, ctx.seed)?,
    };
    let (setup, beta, teacher_lengths) = match distill {
        Some((s, beta, lengths)) => (Some(s), beta, lengths),
        None => (None, 0.0, None),
    };
    let config = TrainConfig {
        epochs: a.epochs,
        batch_triplets: a.batch,
        lr0: a.lr,
        adam: AdamWConfig { weight_decay: a.weight_decay, ..Default::default() },
        beta,
        length_range: (a.lmin, a.lmax),
        teacher_lengths,
        max_steps: a.steps,
        seed: ctx.seed,
    };
    let exec = ctx.executor(false)?;
    let ckpt = ctx.output(&a.output)?;
    let stem = ckpt.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
    let log_path = ckpt.with_file_name(format!("{stem}.log.tsv"));
    let outcome = match fit(&set, initial, &config, setup.as_ref(), &exec) {
        Ok(o) => o,
        Err(FitError::Diverged { step, last_good, log }) => {
            save_params(&ckpt, &last_good)?;
            write_text(&log_path, &format_log(&log))?;
            return Err(Error::Fit(format!("non-finite loss at step {step}; last good parameters saved to {}", ckpt.display())));
        }
        Err(e) => return Err(e.into()),
    };
    save_params(&ckpt, &outcome.params)?;
    write_text(&log_path, &format_log(&outcome.log))?;
    let last = outcome.log.last();
    Ok(format!(
        "{} steps={} loss_bce={} loss_dis={} params={} log={}",
        if setup.is_some() { "distill" } else { "train" },
        outcome.log.len(),
        last.map_or(f64::NAN, |r| r.loss_bce),
        last.map_or(f64::NAN, |r| r.loss_dis),
        ckpt.display(),
        log_path.display()
    ))
}

/// A query built from record `k` of `store`.
fn query_from(db: &StoreDatabase, k: usize, len_q: usize, exclude_self: bool) -> Result<Query> {
    let rows = len_q.min(db.local_count(k));
    Ok(Query { id: db.id(k), global: db.global(k)?, tokens: db.tokens(k, rows)?, exclude_self })
}

fn tune(ctx: &Context, a: &TuneArgs) -> Result<String> {
    let store = Store::open(&a.store)?;
    let params = load_params(&a.params)?;
    let codebook = a.codebook.as_deref().map(load_codebook).transpose()?;
    let db = StoreDatabase::new(&store, &params.projection, codebook.as_ref())?;
    let qstore = a.query.as_deref().map(Store::open).transpose()?;
    let qdb = match &qstore {
        Some(s) => StoreDatabase::new(s, &params.projection, codebook.as_ref())?,
        None => StoreDatabase::new(&store, &params.projection, codebook.as_ref())?,
    };
    let labels = load_labels(&a.labels)?;
    let split: Split = a.split.into();
    let mut by_class: BTreeMap<u32, Vec<u64>> = BTreeMap::new();
    for l in &labels {
        if let (Some(c), true) = (l.class, store.position(l.id).is_some()) {
            by_class.entry(c).or_default().push(l.id);
        }
    }
    let mut queries = Vec::new();
    let mut gts = Vec::new();
    for l in labels.iter().filter(|l| l.split == split) {
        let (Some(c), Some(k)) = (l.class, qdb.store.position(l.id)) else { continue };
        let positives: Vec<u64> = by_class.get(&c).into_iter().flatten().copied().filter(|&id| id != l.id).collect();
        if positives.is_empty() {
            continue;
        }
        queries.push(query_from(&qdb, k, a.lengths.lq, true)?);
        gts.push(GroundTruth::new(positives));
    }
    if queries.is_empty() {
        return Err(Error::Input("no validation query has a positive in the database".into()));
    }
    let exec = ctx.executor(true)?;
    let result = tune_ensemble(&queries, &gts, &db, &params, &a.lambdas, &a.gammas, a.m, (a.lengths.lx, a.lengths.lq), &exec)?;
    let mut lam = a.lambdas.clone();
    lam.sort_by(f64::total_cmp);
    let mut gam = a.gammas.clone();
    gam.sort_by(f64::total_cmp);
    let mut grid = format!("lambda\tgamma\tmap@{TUNE_METRIC_K}\n");
    for (l, row) in lam.iter().zip(&result.grid) {
        for (g, v) in gam.iter().zip(row) {
            writeln!(grid, "{l}\t{g}\t{v}").expect("string write");
        }
    }
    let out = ctx.output(&a.output)?;
    write_text(&out, &grid)?;
    let conf = ctx.output("ensemble.conf")?;
    write_text(&conf, &format!("lambda = {}\ngamma = {}\n", result.lambda, result.gamma))?;
    Ok(format!(
        "tune queries={} cells={} lambda={} gamma={} map@{TUNE_METRIC_K}={} grid={} config={}",
        queries.len(),
        lam.len() * gam.len(),
        result.lambda,
        result.gamma,
        result.best,
        out.display(),
        conf.display()
    ))
}

fn rank(ctx: &Context, a: &RankArgs) -> Result<String> {
    let store = Store::open(&a.store)?;
    let params = load_params(&a.params)?;
    let codebook = a.codebook.as_deref().map(load_codebook).transpose()?;
    let db = StoreDatabase::new(&store, &params.projection, codebook.as_ref())?;
    let qstore = Store::open(&a.query)?;
    let qdb = StoreDatabase::new(&qstore, &params.projection, codebook.as_ref())?;
    let config = EnsembleConfig { lambda: a.lambda, gamma: a.gamma, m: a.m, len_x: a.lengths.lx, len_q: a.lengths.lq };
    config.validate()?;
    let ids: Vec<u64> = if a.query_ids.is_empty() { qstore.ids().to_vec() } else { a.query_ids.clone() };
    let exec = ctx.executor(true)?;
    let mut lists: Vec<RankedList> = Vec::with_capacity(ids.len());
    for id in ids {
        let k = qstore.position(id).ok_or_else(|| Error::Input(format!("query id {id} is not in the query store")))?;
        let q = query_from(&qdb, k, a.lengths.lq, a.exclude_self)?;
        lists.push(rerank(&q, &db, &params, &config, &exec)?);
    }
    let out = ctx.output(&a.output)?;
    write_text(&out, &format_rankings(&lists))?;
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "ranking".into());
    let compact = out.with_file_name(format!("{stem}.ids.txt"));
    write_text(&compact, &format_compact(&lists))?;
    Ok(format!("rank queries={} m={} ranking={} compact={}", lists.len(), a.m, out.display(), compact.display()))
}

fn eval(ctx: &Context, a: &EvalArgs) -> Result<String> {
    let rankings = parse_rankings(&read_text(&a.ranking)?)?;
    let labels = load_labels(&a.labels)?;
    let classes: HashMap<u64, Option<u32>> = labels.iter().map(|l| (l.id, l.class)).collect();
    let mut lists = Vec::with_capacity(rankings.len());
    let mut gts = Vec::with_capacity(rankings.len());
    for (q, ids) in rankings {
        let class = *classes.get(&q).ok_or_else(|| Error::Input(format!("query {q} has no label")))?;
        let split = a.split.map(Split::from);
        let positives = labels.iter().filter(|l| l.id != q && class.is_some() && l.class == class && split.is_none_or(|s| s == l.split)).map(|l| l.id);
        gts.push(GroundTruth::new(positives));
        lists.push(ids);
    }
    let mode = match a.mode {
        ApArg::Standard => ApMode::Standard,
        ApArg::Trapezoid => ApMode::Trapezoid,
    };
    let (metric, summary) = match (a.k, mode) {
        (Some(k), ApMode::Standard) => (format!("map@{k}"), map_at_k(&lists, &gts, k)?),
        (Some(_), ApMode::Trapezoid) => return Err(Error::Input("--k applies to standard mode only".into())),
        (None, ApMode::Standard) => ("map".to_string(), mean_average_precision(&lists, &gts, mode)?),
        (None, ApMode::Trapezoid) => ("map_trapezoid".to_string(), mean_average_precision(&lists, &gts, mode)?),
    };
    let mut settings = BTreeMap::new();
    settings.insert("ranking".to_string(), a.ranking.display().to_string());
    settings.insert("labels".to_string(), a.labels.display().to_string());
    settings.insert("metric".to_string(), metric.clone());
    if let Some(s) = a.split {
        settings.insert("split".to_string(), Split::from(s).name().to_string());
    }
    let hash = KeyValues(settings).hash();
    let row = ReportRow { dataset: a.dataset.clone(), metric: metric.clone(), value: summary.map, config_hash: hash.clone() };
    let out = ctx.output(&a.output)?;
    write_text(&out, &format_report(&[row]))?;
    Ok(format!("eval queries={} skipped={} {metric}={} config_hash={hash} report={}", lists.len(), summary.skipped(), summary.map, out.display()))
}

fn tradeoff(ctx: &Context, a: &TradeoffArgs) -> Result<String> {
    if !a.metrics.is_empty() && a.metrics.len() != a.lx.len() {
        return Err(Error::Input("--metrics needs one value per --lx".into()));
    }
    let (global, local): (GlobalEncoding, LocalEncoding) = (a.global.into(), a.local.into());
    let variant = a.variant.clone().unwrap_or_else(|| format!("{}+{}", global.name(), local.name()));
    let rows =
        a.lx.iter()
            .enumerate()
            .map(|(i, &len_x)| {
                let spec = MemorySpec { global, local, len_x, dim: a.dim, global_dim: a.global_dim };
                Ok(TradeoffRow { len_x, kb: memory_per_image(&spec)?, metric: a.metrics.get(i).copied().unwrap_or(f64::NAN), variant: variant.clone() })
            })
            .collect::<Result<Vec<_>>>()?;
    let csv = export_tradeoff(&rows)?;
    let out = ctx.output(&a.output)?;
    write_text(&out, &csv)?;
    let kbs: Vec<String> = rows.iter().map(|r| r.kb.to_string()).collect();
    Ok(format!("tradeoff rows={} kb={} csv={}", rows.len(), kbs.join(","), out.display()))
}
