//! Synthetic instance-retrieval data: each class owns a few prototype
//! descriptors that its images carry as noisy copies among random clutter.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{AmesError, Result};
use crate::numerics::{l2_normalize, Matrix};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub images_per_class: usize,
    pub distractors: usize,
    /// Raw descriptor dimension.
    pub dim: usize,
    /// Local descriptors per image.
    pub l_max: usize,
    /// Fraction of each image's descriptors copied from class prototypes.
    pub planted_fraction: f64,
    /// Norm of the noise added to each planted copy.
    pub noise: f64,
    /// Fraction of images (and distractors) held out for validation.
    pub val_fraction: f64,
    pub split_mode: SplitMode,
    pub seed: u64,
}

/// How class images are divided between training and validation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitMode {
    /// Every class contributes images to both splits.
    Images,
    /// Whole classes are held out.
    Classes,
}

impl SplitMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "images" => Ok(Self::Images),
            "classes" => Ok(Self::Classes),
            _ => Err(AmesError::Config("split mode must be images or classes")),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Images => "images",
            Self::Classes => "classes",
        }
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 20,
            images_per_class: 10,
            distractors: 200,
            dim: 64,
            l_max: 50,
            planted_fraction: 0.3,
            noise: 0.1,
            val_fraction: 0.3,
            split_mode: SplitMode::Images,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Prototypes per class, `ceil(f · L_max)`.
    pub fn planted(&self) -> usize {
        libm::ceil(self.planted_fraction * self.l_max as f64) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.l_max == 0 {
            return Err(AmesError::Config("dim and l_max must be positive"));
        }
        if !(self.planted_fraction > 0.0 && self.planted_fraction <= 1.0) {
            return Err(AmesError::Config("planted fraction must lie in (0, 1]"));
        }
        if self.planted() > self.l_max || self.planted_fraction * (self.l_max as f64) < 1.0 {
            return Err(AmesError::Config("planted fraction times l_max must lie in [1, l_max]"));
        }
        if !(self.noise >= 0.0) {
            return Err(AmesError::Config("noise must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(AmesError::Config("validation fraction must lie in [0, 1)"));
        }
        if self.classes == 0 || self.images_per_class == 0 {
            return Err(AmesError::Config("need at least one class with one image"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(AmesError::Config("split must be train or val")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthImage {
    pub id: u64,
    /// `None` for distractors.
    pub class: Option<u32>,
    pub split: Split,
    /// Unit local descriptors, strongest first.
    pub locals: Matrix,
    /// Non-increasing.
    pub strengths: Vec<f64>,
    /// Unit mean of the locals.
    pub global: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub images: Vec<SynthImage>,
}

impl SynthDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SynthImage> {
        self.images.iter().filter(move |im| im.split == split)
    }
}

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if v.iter().any(|x| *x != 0.0) {
            l2_normalize(&mut v);
            return v;
        }
    }
}

/// Builds the dataset, holding out `val_fraction` of the class images
/// (per class or as whole classes) and of the distractors for validation.
pub fn generate_dataset(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (dim, l_max, planted) = (config.dim, config.l_max, config.planted());
    let component = Normal::new(0.0, config.noise / libm::sqrt(dim as f64)).map_err(|_| AmesError::Config("noise"))?;
    let strength_noise = Normal::new(0.0, 0.2 + 2.0 * config.noise).map_err(|_| AmesError::Config("noise"))?;

    let ipc = config.images_per_class;
    let mut image_split = alloc::vec![Split::Train; config.classes * ipc];
    match config.split_mode {
        SplitMode::Classes => {
            let mut order: Vec<usize> = (0..config.classes).collect();
            order.shuffle(&mut rng);
            let held = libm::round(config.val_fraction * config.classes as f64) as usize;
            for &c in &order[..held] {
                image_split[c * ipc..(c + 1) * ipc].fill(Split::Val);
            }
        }
        SplitMode::Images => {
            let held = libm::round(config.val_fraction * ipc as f64) as usize;
            for c in 0..config.classes {
                let mut order: Vec<usize> = (0..ipc).collect();
                order.shuffle(&mut rng);
                for &k in &order[..held] {
                    image_split[c * ipc + k] = Split::Val;
                }
            }
        }
    }
    let val_distractors = libm::round(config.val_fraction * config.distractors as f64) as usize;

    let mut images = Vec::with_capacity(config.classes * config.images_per_class + config.distractors);
    let mut make = |class: Option<u32>, split: Split, protos: &[Vec<f64>], rng: &mut ChaCha8Rng| {
        let mut rows: Vec<(f64, Vec<f64>)> = Vec::with_capacity(l_max);
        for p in protos {
            let mut v: Vec<f64> = p.iter().map(|x| x + component.sample(rng)).collect();
            l2_normalize(&mut v);
            rows.push((1.0 + strength_noise.sample(rng), v));
        }
        while rows.len() < l_max {
            let v = unit_vector(dim, rng);
            rows.push((strength_noise.sample(rng), v));
        }
        rows.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut global = alloc::vec![0.0; dim];
        let mut data = Vec::with_capacity(l_max * dim);
        for (_, v) in &rows {
            for (g, x) in global.iter_mut().zip(v) {
                *g += x;
            }
            data.extend_from_slice(v);
        }
        l2_normalize(&mut global);
        images.push(SynthImage {
            id: images.len() as u64,
            class,
            split,
            locals: Matrix::from_vec(l_max, dim, data).expect("consistent shape"),
            strengths: rows.iter().map(|r| r.0).collect(),
            global,
        });
    };
    for c in 0..config.classes {
        let protos: Vec<Vec<f64>> = (0..planted).map(|_| unit_vector(dim, &mut rng)).collect();
        for k in 0..ipc {
            make(Some(c as u32), image_split[c * ipc + k], &protos, &mut rng);
        }
    }
    for k in 0..config.distractors {
        let split = if k < val_distractors { Split::Val } else { Split::Train };
        make(None, split, &[], &mut rng);
    }
    Ok(SynthDataset { config: config.clone(), images })
}
