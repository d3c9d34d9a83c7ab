//! Episode sampling.
//!
//! An episode draws a positive class uniformly, `K` of its examples
//! without replacement as supports, and a query that is, with probability
//! exactly ½, one more held-out example of that class (label 0) and
//! otherwise a uniform example of a uniformly chosen other class (label 1).
//! Two-way episodes add `K` negative supports drawn uniformly, without
//! replacement, from every example outside the positive class, excluding
//! the query.
//!
//! Randomness comes from ChaCha8 seeded with `seed_from_u64(run_seed)`.
//! Independent purposes use distinct ChaCha stream ids on the same seed:
//! [`STREAM_INIT`] for parameter initialization, [`STREAM_EVAL`] for
//! evaluation episodes and `STREAM_TRAIN_BASE + epoch` for the training
//! episodes of each epoch.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const STREAM_INIT: u64 = 1;
pub const STREAM_EVAL: u64 = 2;
pub const STREAM_LABEL_SHUFFLE: u64 = 3;
pub const STREAM_TRAIN_BASE: u64 = 1 << 32;

/// Stream id for the training episodes of `epoch`.
pub fn train_stream(epoch: usize) -> u64 {
    STREAM_TRAIN_BASE + epoch as u64
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassRecord {
    pub id: String,
    /// Enclosing group, e.g. the alphabet of an Omniglot character.
    pub group: Option<String>,
    /// Preprocessed examples, each `C·H·W` values.
    pub examples: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub name: String,
    pub split: Split,
    pub geometry: (usize, usize, usize),
    pub classes: Vec<ClassRecord>,
}

impl SplitDataset {
    pub fn num_examples(&self) -> usize {
        self.classes.iter().map(|c| c.examples.len()).sum()
    }

    fn image(&self, class: usize, example: usize) -> &[f64] {
        &self.classes[class].examples[example]
    }

    fn images(&self, picks: &[(usize, usize)]) -> Tensor {
        let (c, h, w) = self.geometry;
        let data: Vec<f64> = picks
            .iter()
            .flat_map(|&(cl, ex)| self.image(cl, ex).iter().copied())
            .collect();
        Tensor::new(vec![picks.len(), c, h, w], data).expect("consistent geometry")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WayMode {
    OneWay,
    TwoWay,
}

pub const POSITIVE: usize = 0;
pub const NEGATIVE: usize = 1;

/// Where every image of an episode came from, as `(class, example)`
/// indices into the dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpisodeMeta {
    pub pos_class: usize,
    pub pos_supports: Vec<usize>,
    pub query: (usize, usize),
    pub neg_supports: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// `[K, C, H, W]`.
    pub pos_supports: Tensor,
    /// `[K, C, H, W]`, two-way episodes only.
    pub neg_supports: Option<Tensor>,
    /// `[C, H, W]`.
    pub query: Tensor,
    /// [`POSITIVE`] or [`NEGATIVE`].
    pub label: usize,
    pub meta: EpisodeMeta,
}

impl Episode {
    pub fn shots(&self) -> usize {
        self.pos_supports.shape()[0]
    }

    pub fn support_count(&self) -> usize {
        self.shots() + self.neg_supports.as_ref().map_or(0, |n| n.shape()[0])
    }
}

pub fn sample_episode<R: Rng + ?Sized>(
    ds: &SplitDataset,
    mode: WayMode,
    shots: usize,
    rng: &mut R,
) -> Result<Episode> {
    let n = ds.classes.len();
    if n < 2 {
        return Err(Error::Dataset {
            name: ds.name.clone(),
            msg: format!("episodes need at least 2 classes, found {n}"),
        });
    }
    if shots == 0 {
        return Err(Error::config("shots", "must be at least 1"));
    }
    let pos = rng.random_range(0..n);
    let class = &ds.classes[pos];
    if class.examples.len() < shots + 1 {
        return Err(Error::ClassTooSmall {
            class: class.id.clone(),
            have: class.examples.len(),
            need: shots + 1,
        });
    }
    let picked = index::sample(rng, class.examples.len(), shots + 1).into_vec();
    let (supports, held_out) = (picked[..shots].to_vec(), picked[shots]);

    let label = if rng.random_bool(0.5) { POSITIVE } else { NEGATIVE };
    let query = if label == POSITIVE {
        (pos, held_out)
    } else {
        let mut other = rng.random_range(0..n - 1);
        if other >= pos {
            other += 1;
        }
        (other, rng.random_range(0..ds.classes[other].examples.len()))
    };

    let neg_supports = match mode {
        WayMode::OneWay => Vec::new(),
        WayMode::TwoWay => sample_negatives(ds, pos, query, shots, rng)?,
    };

    let pos_picks: Vec<(usize, usize)> = supports.iter().map(|&e| (pos, e)).collect();
    Ok(Episode {
        pos_supports: ds.images(&pos_picks),
        neg_supports: (!neg_supports.is_empty()).then(|| ds.images(&neg_supports)),
        query: ds.images(&[query]).reshape(&[ds.geometry.0, ds.geometry.1, ds.geometry.2])?,
        label,
        meta: EpisodeMeta {
            pos_class: pos,
            pos_supports: supports,
            query,
            neg_supports,
        },
    })
}

/// `shots` distinct examples, uniform over every example outside class
/// `pos` other than the query.
fn sample_negatives<R: Rng + ?Sized>(
    ds: &SplitDataset,
    pos: usize,
    query: (usize, usize),
    shots: usize,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    let pool: Vec<(usize, usize)> = ds
        .classes
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != pos)
        .flat_map(|(c, rec)| (0..rec.examples.len()).map(move |e| (c, e)))
        .filter(|&p| p != query)
        .collect();
    if pool.len() < shots {
        return Err(Error::Dataset {
            name: ds.name.clone(),
            msg: format!(
                "only {} negative examples available for {shots} negative supports",
                pool.len()
            ),
        });
    }
    Ok(index::sample(rng, pool.len(), shots)
        .into_iter()
        .map(|i| pool[i])
        .collect())
}

/// A finite, reproducible stream of episodes.
pub struct EpisodeStream<'a> {
    ds: &'a SplitDataset,
    mode: WayMode,
    shots: usize,
    remaining: usize,
    rng: ChaCha8Rng,
}

impl Iterator for EpisodeStream<'_> {
    type Item = Result<Episode>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        Some(sample_episode(self.ds, self.mode, self.shots, &mut self.rng))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}

pub fn episode_stream(
    ds: &SplitDataset,
    mode: WayMode,
    shots: usize,
    episodes: usize,
    seed: u64,
    stream: u64,
) -> EpisodeStream<'_> {
    EpisodeStream {
        ds,
        mode,
        shots,
        remaining: episodes,
        rng: rng_for(seed, stream),
    }
}
