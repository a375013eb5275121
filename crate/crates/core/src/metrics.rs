//! Ranking metrics and model evaluation at pixel, frame, and stack level.

use std::cmp::Ordering;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{self, IGNORE, POS};
use crate::model::{frame_score, stack_score, TinyFcn};
use crate::phantom::DatasetManifest;

/// Average precision: mean over positives of the precision at that
/// positive's rank. Items are ranked by descending score, and within a tie
/// negatives come first.
pub fn average_precision(items: &[(f64, bool)]) -> Result<f64> {
    check_finite(items)?;
    let positives = items.iter().filter(|(_, y)| *y).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric(
            "average precision needs a positive".into(),
        ));
    }
    let mut ranked: Vec<(f64, bool)> = items.to_vec();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, (_, y)) in ranked.iter().enumerate() {
        if *y {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// Area under the ROC curve as the Mann-Whitney statistic: the fraction of
/// (positive, negative) pairs where the positive scores higher, ties
/// counting one half.
pub fn roc_auc(items: &[(f64, bool)]) -> Result<f64> {
    check_finite(items)?;
    let positives = items.iter().filter(|(_, y)| *y).count();
    let negatives = items.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric("ROC AUC needs both classes".into()));
    }
    let mut sorted: Vec<(f64, bool)> = items.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Walk tie groups in ascending score order.
    let mut negatives_below = 0u64;
    let mut twice_wins = 0u64;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        let (mut p, mut n) = (0u64, 0u64);
        while j < sorted.len() && sorted[j].0.total_cmp(&sorted[i].0) == Ordering::Equal {
            if sorted[j].1 {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        twice_wins += 2 * p * negatives_below + p * n;
        negatives_below += n;
        i = j;
    }
    Ok(twice_wins as f64 / (2 * positives as u64 * negatives as u64) as f64)
}

fn check_finite(items: &[(f64, bool)]) -> Result<()> {
    if items.iter().all(|(s, _)| s.is_finite()) {
        Ok(())
    } else {
        Err(Error::param("non-finite score"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub pixels: u64,
    pub positive_pixels: u64,
    pub frames: u64,
    pub positive_frames: u64,
    pub stacks: u64,
    pub positive_stacks: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model_id: String,
    pub dataset_id: String,
    pub pixel_ap: f64,
    pub frame_ap: f64,
    pub stack_ap: f64,
    pub stack_roc_auc: f64,
    /// Pixel AP pools every evaluation pixel into one ranking.
    pub pixel_ap_pooling: String,
    pub counts: Counts,
}

impl MetricsReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::config(path, e.to_string()))?;
        frame::write_file(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        toml::from_str(&text).map_err(|e| Error::config(path, e.to_string()))
    }
}

/// Per-frame predictions gathered for one dataset.
pub struct StackPredictions {
    /// `(pixel probabilities, mask labels)` per frame.
    pub frames: Vec<(Vec<f64>, Vec<u8>)>,
}

/// Metrics from precomputed per-pixel probabilities.
pub fn report_from_predictions(
    model_id: &str,
    dataset_id: &str,
    stacks: &[StackPredictions],
) -> Result<MetricsReport> {
    let mut pixels = Vec::new();
    let mut frames = Vec::new();
    let mut stack_items = Vec::new();
    for s in stacks {
        let mut scores = Vec::with_capacity(s.frames.len());
        let mut stack_positive = false;
        for (probs, labels) in &s.frames {
            let mut frame_positive = false;
            for (p, l) in probs.iter().zip(labels) {
                if *l == IGNORE {
                    continue;
                }
                frame_positive |= *l == POS;
                pixels.push((*p, *l == POS));
            }
            let score = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            frames.push((score, frame_positive));
            scores.push(score);
            stack_positive |= frame_positive;
        }
        stack_items.push((stack_score(&scores)?, stack_positive));
    }
    let level = |name: &str, r: Result<f64>| {
        r.map_err(|e| match e {
            Error::UndefinedMetric(msg) => Error::UndefinedMetric(format!("{name} level: {msg}")),
            e => e,
        })
    };
    let positives = |v: &[(f64, bool)]| v.iter().filter(|(_, y)| *y).count() as u64;
    Ok(MetricsReport {
        model_id: model_id.to_string(),
        dataset_id: dataset_id.to_string(),
        pixel_ap: level("pixel", average_precision(&pixels))?,
        frame_ap: level("frame", average_precision(&frames))?,
        stack_ap: level("stack", average_precision(&stack_items))?,
        stack_roc_auc: level("stack", roc_auc(&stack_items))?,
        pixel_ap_pooling: "global".to_string(),
        counts: Counts {
            pixels: pixels.len() as u64,
            positive_pixels: positives(&pixels),
            frames: frames.len() as u64,
            positive_frames: positives(&frames),
            stacks: stack_items.len() as u64,
            positive_stacks: positives(&stack_items),
        },
    })
}

pub fn evaluate_model(
    model: &TinyFcn,
    model_id: &str,
    dataset: &DatasetManifest,
) -> Result<MetricsReport> {
    let stacks = dataset.load_all()?;
    let predictions = stacks
        .par_iter()
        .map(|s| {
            let frames = s
                .frames
                .iter()
                .map(|(f, m)| {
                    let p = model.forward(f)?;
                    debug_assert!(frame_score(&p) < 1.0);
                    Ok((p.probs().to_vec(), m.labels().to_vec()))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(StackPredictions { frames })
        })
        .collect::<Result<Vec<_>>>()?;
    report_from_predictions(model_id, &dataset.dataset_id, &predictions)
}
