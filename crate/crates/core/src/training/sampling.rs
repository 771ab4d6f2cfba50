//! Triplet batch construction and per-batch descriptor-set sizes.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{AmesError, Result};
use crate::numerics::{dot, Matrix};

/// Neighbors considered when drawing positives and negatives.
pub const NEIGHBORS: usize = 300;

/// One training image: strength-ordered raw local descriptors and a unit
/// global descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainImage {
    pub id: u64,
    /// `None` for distractors.
    pub class: Option<u32>,
    pub locals: Matrix,
    pub global: Vec<f64>,
}

/// A labelled image pair with the descriptor counts used for it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairExample {
    /// Index of the anchor (the `Q` side).
    pub anchor: usize,
    /// Index of the other image (the `X` side).
    pub other: usize,
    /// 1 for matching pairs.
    pub label: u8,
    pub len_x: usize,
    pub len_q: usize,
}

/// Training images with their global nearest-neighbor lists.
#[derive(Clone, Debug)]
pub struct TrainSet {
    images: Vec<TrainImage>,
    neighbors: Vec<Vec<(usize, f64)>>,
    classes: BTreeMap<u32, Vec<usize>>,
}

impl TrainSet {
    /// Builds the set and brute-force top-`k` global neighbor lists
    /// (descending similarity, ties by index, self excluded).
    pub fn new(images: Vec<TrainImage>, k: usize) -> Result<Self> {
        if images.is_empty() {
            return Err(AmesError::Empty("training set"));
        }
        let mut classes: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, im) in images.iter().enumerate() {
            if let Some(c) = im.class {
                classes.entry(c).or_default().push(i);
            }
        }
        let neighbors = (0..images.len())
            .map(|i| {
                let mut sims: Vec<(usize, f64)> = (0..images.len()).filter(|&j| j != i).map(|j| (j, dot(&images[i].global, &images[j].global))).collect();
                sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                sims.truncate(k);
                sims
            })
            .collect();
        Ok(Self { images, neighbors, classes })
    }

    pub fn images(&self) -> &[TrainImage] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &TrainImage {
        &self.images[i]
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.neighbors[i]
    }

    pub fn class_members(&self, class: u32) -> &[usize] {
        self.classes.get(&class).map_or(&[], |v| v.as_slice())
    }

    /// Images that can serve as anchors (class with at least two members).
    pub fn anchors(&self) -> Vec<usize> {
        (0..self.images.len()).filter(|&i| self.images[i].class.is_some_and(|c| self.class_members(c).len() >= 2)).collect()
    }

    /// Classes skipped because they have a single member.
    pub fn singleton_classes(&self) -> Vec<u32> {
        self.classes.iter().filter(|(_, m)| m.len() < 2).map(|(c, _)| *c).collect()
    }

    pub fn min_locals(&self) -> usize {
        self.images.iter().map(|im| im.locals.rows()).min().unwrap_or(0)
    }

    /// Draws a positive and a negative for `anchor`.
    pub fn sample_triplet<R: Rng + ?Sized>(&self, anchor: usize, rng: &mut R) -> Result<(usize, usize)> {
        let class = self.images[anchor].class.ok_or(AmesError::Config("anchor without class"))?;
        let members = self.class_members(class);
        if members.len() < 2 {
            return Err(AmesError::Config("anchor class has a single member"));
        }
        let nn = &self.neighbors[anchor];
        let (pos_c, pos_s): (Vec<usize>, Vec<f64>) = nn.iter().filter(|(j, _)| self.images[*j].class == Some(class)).cloned().unzip();
        let positive = match draw_weighted(&cube_weights(&pos_s), rng) {
            Some(k) => pos_c[k],
            None => {
                let others: Vec<usize> = members.iter().copied().filter(|&m| m != anchor).collect();
                others[rng.random_range(0..others.len())]
            }
        };
        let (neg_c, neg_s): (Vec<usize>, Vec<f64>) = nn.iter().filter(|(j, _)| self.images[*j].class != Some(class)).cloned().unzip();
        let negative = match draw_weighted(&cube_weights(&neg_s), rng) {
            Some(k) => neg_c[k],
            None => {
                let pool: Vec<usize> = (0..self.images.len()).filter(|&j| self.images[j].class != Some(class)).collect();
                if pool.is_empty() {
                    return Err(AmesError::Empty("no negatives in corpus"));
                }
                pool[rng.random_range(0..pool.len())]
            }
        };
        Ok((positive, negative))
    }
}

/// Normalized `max(s, 0)³` weights; all-zero input gives all-zero output.
pub fn cube_weights(sims: &[f64]) -> Vec<f64> {
    let cubes: Vec<f64> = sims.iter().map(|s| libm::pow(s.max(0.0), 3.0)).collect();
    let total: f64 = cubes.iter().sum();
    if total > 0.0 {
        cubes.into_iter().map(|c| c / total).collect()
    } else {
        cubes
    }
}

fn draw_weighted<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if weights.is_empty() || !(total > 0.0) {
        return None;
    }
    let mut target = rng.random::<f64>() * total;
    let mut last = None;
    for (i, w) in weights.iter().enumerate() {
        if *w <= 0.0 {
            continue;
        }
        last = Some(i);
        if target < *w {
            return Some(i);
        }
        target -= w;
    }
    last
}

/// Two independent uniform draws from `[min, max]`.
pub fn sample_lengths<R: Rng + ?Sized>(min: usize, max: usize, rng: &mut R) -> (usize, usize) {
    (rng.random_range(min..=max), rng.random_range(min..=max))
}

/// Shuffled anchor order for one epoch.
pub fn epoch_anchors<R: Rng + ?Sized>(set: &TrainSet, rng: &mut R) -> Vec<usize> {
    let mut a = set.anchors();
    a.shuffle(rng);
    a
}

/// One positive and one negative pair per anchor, all sharing the batch's
/// `(len_x, len_q)` (capped by each image's descriptor count).
pub fn sample_triplet_batch<R: Rng + ?Sized>(set: &TrainSet, anchors: &[usize], lengths: (usize, usize), rng: &mut R) -> Result<Vec<PairExample>> {
    let mut out = Vec::with_capacity(anchors.len() * 2);
    for &a in anchors {
        let (p, n) = set.sample_triplet(a, rng)?;
        for (other, label) in [(p, 1u8), (n, 0u8)] {
            out.push(PairExample {
                anchor: a,
                other,
                label,
                len_x: lengths.0.min(set.image(other).locals.rows()),
                len_q: lengths.1.min(set.image(a).locals.rows()),
            });
        }
    }
    Ok(out)
}
