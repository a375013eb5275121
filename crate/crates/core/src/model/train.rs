//! Minibatch training with labeled/secondary mixing and student noising.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Gradients, Sgd, TinyFcn};
use crate::augment::{sample_augmentation, AugmentationChoice, ContrastPolicy};
use crate::error::{Error, Result};
use crate::frame::{Frame, Mask, NEG, POS};
use crate::phantom::DatasetManifest;
use crate::pseudolabel::PseudoLabelSet;
use crate::rng::{stream_rng, Stream, StreamRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub crop_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Fraction of each minibatch drawn from the pixel-labeled set.
    pub mix_ratio_labeled: f64,
    #[serde(default, with = "crate::rng::seed_serde")]
    pub seed: u64,
    #[serde(default)]
    pub contrast: ContrastPolicy,
    /// When false, augmentation parameters are still drawn (keeping the
    /// random streams aligned) but not applied.
    #[serde(default = "default_true")]
    pub augment: bool,
}

fn default_true() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            crop_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            mix_ratio_labeled: 0.6,
            seed: 0,
            contrast: ContrastPolicy::All,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be >= 1"));
        }
        if self.crop_size == 0 {
            return Err(Error::param("crop_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param(format!(
                "learning_rate {} must be > 0",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::param(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if !(0.0..=1.0).contains(&self.mix_ratio_labeled) {
            return Err(Error::param(format!(
                "mix_ratio_labeled {} outside [0, 1]",
                self.mix_ratio_labeled
            )));
        }
        Ok(())
    }

    /// Labeled crops per minibatch, `round(batch_size * mix_ratio_labeled)`.
    pub fn labeled_per_batch(&self) -> usize {
        (self.batch_size as f64 * self.mix_ratio_labeled).round() as usize
    }
}

/// The non-labeled half of a training mixture.
#[derive(Debug, Clone, Default)]
pub enum SecondarySet {
    #[default]
    None,
    /// Frames with trinarized pseudo-label maps.
    Pseudo(Vec<(Frame, Mask)>),
    /// Frames with frame-level labels only.
    FrameLabels(Vec<(Frame, bool)>),
}

impl SecondarySet {
    pub fn len(&self) -> usize {
        match self {
            SecondarySet::None => 0,
            SecondarySet::Pseudo(v) => v.len(),
            SecondarySet::FrameLabels(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Frames holding a POS pixel, or labeled positive.
    pub fn positive_indices(&self) -> Vec<usize> {
        let flags: Vec<bool> = match self {
            SecondarySet::None => Vec::new(),
            SecondarySet::Pseudo(v) => v.iter().map(|(_, m)| m.has_positive()).collect(),
            SecondarySet::FrameLabels(v) => v.iter().map(|(_, y)| *y).collect(),
        };
        flags
            .iter()
            .enumerate()
            .filter(|(_, &f)| f)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainingSet {
    pub labeled: Vec<(Frame, Mask)>,
    pub secondary: SecondarySet,
}

impl TrainingSet {
    pub fn labeled_only(labeled: Vec<(Frame, Mask)>) -> Self {
        Self {
            labeled,
            secondary: SecondarySet::None,
        }
    }

    fn min_dims(&self) -> (usize, usize) {
        let dims = self
            .labeled
            .iter()
            .map(|(f, _)| f.dims())
            .chain(match &self.secondary {
                SecondarySet::None => Vec::new(),
                SecondarySet::Pseudo(v) => v.iter().map(|(f, _)| f.dims()).collect(),
                SecondarySet::FrameLabels(v) => v.iter().map(|(f, _)| f.dims()).collect(),
            });
        dims.fold((usize::MAX, usize::MAX), |(h, w), (fh, fw)| {
            (h.min(fh), w.min(fw))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Labeled,
    Secondary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Draw {
    pub source: Source,
    pub index: usize,
    /// Take a crop that contains a positive pixel.
    pub prefer_positive: bool,
}

/// Chooses which frames make up each minibatch.
///
/// Every batch holds exactly `round(B * ratio)` labeled draws followed by the
/// secondary draws. Each draw picks a positive frame (and later a
/// positive-covering crop) with probability 1/2 when its source has any.
/// Every draw consumes the same number of random values whatever the data,
/// so two runs differing only in their labels see aligned streams.
pub struct BatchSampler {
    batch_size: usize,
    labeled_per_batch: usize,
    labeled: Pool,
    secondary: Pool,
    rng: StreamRng,
}

struct Pool {
    len: usize,
    positive: Vec<usize>,
}

impl Pool {
    fn draw(&self, rng: &mut StreamRng, source: Source) -> Draw {
        let coin = rng.next_u64() >> 63 == 1;
        let any = scaled_index(rng.next_u64(), self.len);
        let pos = scaled_index(rng.next_u64(), self.positive.len());
        let prefer_positive = coin && !self.positive.is_empty();
        Draw {
            source,
            index: if prefer_positive {
                self.positive[pos]
            } else {
                any
            },
            prefer_positive,
        }
    }
}

/// Map a uniform `u64` onto `0..len` (multiply-shift; `len == 0` gives 0).
fn scaled_index(x: u64, len: usize) -> usize {
    ((x as u128 * len as u128) >> 64) as usize
}

impl BatchSampler {
    pub fn new(
        cfg: &TrainConfig,
        labeled_len: usize,
        labeled_positive: Vec<usize>,
        secondary_len: usize,
        secondary_positive: Vec<usize>,
    ) -> Result<Self> {
        cfg.validate()?;
        if labeled_len == 0 {
            return Err(Error::param("labeled set is empty"));
        }
        let in_range = |v: &[usize], len| v.iter().all(|&i| i < len);
        if !in_range(&labeled_positive, labeled_len)
            || !in_range(&secondary_positive, secondary_len)
        {
            return Err(Error::param("positive index out of range"));
        }
        let labeled_per_batch = if secondary_len == 0 {
            cfg.batch_size
        } else {
            cfg.labeled_per_batch()
        };
        Ok(Self {
            batch_size: cfg.batch_size,
            labeled_per_batch,
            labeled: Pool {
                len: labeled_len,
                positive: labeled_positive,
            },
            secondary: Pool {
                len: secondary_len,
                positive: secondary_positive,
            },
            rng: stream_rng(cfg.seed, Stream::Mixing),
        })
    }

    pub fn labeled_per_batch(&self) -> usize {
        self.labeled_per_batch
    }

    pub fn next_batch(&mut self) -> Vec<Draw> {
        let mut batch = Vec::with_capacity(self.batch_size);
        for _ in 0..self.labeled_per_batch {
            batch.push(self.labeled.draw(&mut self.rng, Source::Labeled));
        }
        for _ in self.labeled_per_batch..self.batch_size {
            batch.push(self.secondary.draw(&mut self.rng, Source::Secondary));
        }
        batch
    }
}

enum Sample {
    Pixels(Frame, Mask),
    FrameLabel(Frame, bool),
}

impl Sample {
    fn loss_and_grads(&self, model: &TinyFcn) -> Result<(f64, Gradients)> {
        match self {
            Sample::Pixels(f, m) => model.pixel_loss_and_grads(f, m),
            Sample::FrameLabel(f, y) => model.frame_loss_and_grads(f, *y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TinyFcn,
    /// Mean minibatch loss at every step, before that step's update.
    pub losses: Vec<f64>,
}

fn pick_crop(
    rng: &mut StreamRng,
    mask: &Mask,
    crop: usize,
    prefer_positive: bool,
) -> (usize, usize, usize, usize) {
    let (h, w) = mask.dims();
    let (ch, cw) = (crop.min(h), crop.min(w));
    if prefer_positive {
        let positives: Vec<usize> = mask
            .labels()
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == POS)
            .map(|(i, _)| i)
            .collect();
        if let Some(&p) = positives.choose(rng) {
            let (py, px) = (p / w, p % w);
            let top = rng.gen_range((py + 1).saturating_sub(ch)..=py.min(h - ch));
            let left = rng.gen_range((px + 1).saturating_sub(cw)..=px.min(w - cw));
            return (top, left, ch, cw);
        }
    }
    (rng.gen_range(0..=h - ch), rng.gen_range(0..=w - cw), ch, cw)
}

/// Train `model` on an in-memory mixture.
///
/// An epoch is `ceil(|labeled| / batch_size)` minibatches regardless of the
/// mixing ratio, so runs with and without a secondary set take the same
/// number of steps.
pub fn train_in_memory(
    model: TinyFcn,
    data: &TrainingSet,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.labeled.is_empty() {
        return Err(Error::param("labeled set is empty"));
    }
    let (min_h, min_w) = data.min_dims();
    if cfg.crop_size > min_h || cfg.crop_size > min_w {
        return Err(Error::param(format!(
            "crop_size {} exceeds smallest frame {min_h}x{min_w}",
            cfg.crop_size
        )));
    }
    let positives: Vec<usize> = data
        .labeled
        .iter()
        .enumerate()
        .filter(|(_, (_, m))| m.has_positive())
        .map(|(i, _)| i)
        .collect();
    let mut sampler = BatchSampler::new(
        cfg,
        data.labeled.len(),
        positives,
        data.secondary.len(),
        data.secondary.positive_indices(),
    )?;
    let mut crop_rng = stream_rng(cfg.seed, Stream::Crop);
    let mut aug_rng = stream_rng(cfg.seed, Stream::Augment);

    let steps_per_epoch = data.labeled.len().div_ceil(cfg.batch_size).max(1);
    let total = cfg.epochs * steps_per_epoch;
    let mut model = model;
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum);
    let mut losses = Vec::with_capacity(total);

    for step in 0..total {
        let batch = sampler.next_batch();
        let mut samples = Vec::with_capacity(batch.len());
        for draw in &batch {
            let drawn = sample_augmentation(&mut aug_rng).with_policy(cfg.contrast);
            let choice = if cfg.augment {
                drawn
            } else {
                AugmentationChoice::identity()
            };
            let sample = match (draw.source, &data.secondary) {
                (Source::Labeled, _) => {
                    let (f, m) = &data.labeled[draw.index];
                    let (f, m) = choice.apply(f, m)?;
                    let (t, l, h, w) =
                        pick_crop(&mut crop_rng, &m, cfg.crop_size, draw.prefer_positive);
                    Sample::Pixels(f.crop(t, l, h, w), m.crop(t, l, h, w))
                }
                (Source::Secondary, SecondarySet::Pseudo(v)) => {
                    let (f, m) = &v[draw.index];
                    let (f, m) = choice.apply(f, m)?;
                    let (t, l, h, w) =
                        pick_crop(&mut crop_rng, &m, cfg.crop_size, draw.prefer_positive);
                    Sample::Pixels(f.crop(t, l, h, w), m.crop(t, l, h, w))
                }
                (Source::Secondary, SecondarySet::FrameLabels(v)) => {
                    let (f, y) = &v[draw.index];
                    let blank = Mask::filled(f.height(), f.width(), NEG)?;
                    let (f, m) = choice.apply(f, &blank)?;
                    let (t, l, h, w) = pick_crop(&mut crop_rng, &m, cfg.crop_size, false);
                    Sample::FrameLabel(f.crop(t, l, h, w), *y)
                }
                (Source::Secondary, SecondarySet::None) => {
                    unreachable!("no secondary draws without a set")
                }
            };
            samples.push(sample);
        }

        let results: Vec<Result<(f64, Gradients)>> = samples
            .par_iter()
            .map(|s| s.loss_and_grads(&model))
            .collect();
        let mut grads = Gradients::zeros_like(&model);
        let mut loss = 0.0;
        for r in results {
            let (l, g) = r?;
            loss += l;
            grads.add_assign(&g);
        }
        let scale = 1.0 / samples.len() as f64;
        grads.scale(scale);
        loss *= scale;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {step}")));
        }
        losses.push(loss);
        opt.step(&mut model, &grads)?;
    }

    model.quantize_params();
    model.trained_with = Some(cfg.clone());
    Ok(TrainOutcome { model, losses })
}

fn load_pairs(manifest: &DatasetManifest) -> Result<Vec<(Frame, Mask)>> {
    Ok(manifest
        .load_all()?
        .into_iter()
        .flat_map(|s| s.frames)
        .collect())
}

/// Train on a labeled dataset, optionally mixed with pseudo-labeled frames.
pub fn train(
    model: TinyFcn,
    labeled: &DatasetManifest,
    pseudo: Option<&PseudoLabelSet>,
    cfg: &TrainConfig,
) -> Result<TinyFcn> {
    let secondary = match pseudo {
        Some(p) => SecondarySet::Pseudo(p.load_training_pairs()?),
        None => SecondarySet::None,
    };
    let data = TrainingSet {
        labeled: load_pairs(labeled)?,
        secondary,
    };
    Ok(train_in_memory(model, &data, cfg)?.model)
}

/// Train with the secondary corpus supervised only by frame-level labels
/// (derived here from its ground-truth masks).
pub fn train_frame_oracle(
    model: TinyFcn,
    labeled: &DatasetManifest,
    frame_labeled_corpus: &DatasetManifest,
    cfg: &TrainConfig,
) -> Result<TinyFcn> {
    let corpus = load_pairs(frame_labeled_corpus)?
        .into_iter()
        .map(|(f, m)| {
            let y = m.has_positive();
            (f, y)
        })
        .collect();
    let data = TrainingSet {
        labeled: load_pairs(labeled)?,
        secondary: SecondarySet::FrameLabels(corpus),
    };
    Ok(train_in_memory(model, &data, cfg)?.model)
}
