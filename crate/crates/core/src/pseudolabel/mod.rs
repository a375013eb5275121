//! Teacher inference, the percentile ranker, and pixel trinarization.
//!
//! The ranker orders every frame of the unlabeled corpus by its frame score
//! and keeps only the top `ceil(N * C / 100)` as positive. Negative frames get
//! all-negative label maps no matter what the teacher predicted; positive
//! frames are trinarized by pixel confidence into POS / NEG / IGNORE.

mod gallery;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{self, Frame, Mask, ProbMap, IGNORE, NEG, POS};
use crate::model::{frame_score, TinyFcn};
use crate::phantom::{DatasetManifest, MANIFEST_FILE};

pub use gallery::{gallery_file_name, render_gallery, select_gallery_frames, GalleryOutput};

pub const SCORED_FILE: &str = "scored.toml";
pub const PSEUDO_FILE: &str = "pseudo_labels.toml";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FrameRef {
    pub stack_id: String,
    pub frame_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredFrame {
    pub stack_id: String,
    pub frame_index: usize,
    pub score: f64,
    /// Relative to the directory holding the scored list.
    pub prob_map: String,
}

impl ScoredFrame {
    pub fn frame_ref(&self) -> FrameRef {
        FrameRef {
            stack_id: self.stack_id.clone(),
            frame_index: self.frame_index,
        }
    }
}

/// Teacher scores over a corpus, as written by [`infer_corpus`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCorpus {
    pub dataset_id: String,
    /// Manifest of the scored corpus.
    pub corpus: String,
    pub teacher_id: String,
    pub frames: Vec<ScoredFrame>,
    #[serde(skip)]
    root: PathBuf,
}

impl ScoredCorpus {
    /// Load from a directory containing `scored.toml`, or the file itself.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(SCORED_FILE)
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&file).map_err(|e| Error::storage(&file, e))?;
        let mut s: ScoredCorpus =
            toml::from_str(&text).map_err(|e| Error::config(&file, e.to_string()))?;
        s.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(s)
    }

    pub fn save(&self) -> Result<()> {
        let path = self.root.join(SCORED_FILE);
        let text = toml::to_string(self).map_err(|e| Error::config(&path, e.to_string()))?;
        frame::write_file(&path, text.as_bytes())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn load_prob_map(&self, frame: &ScoredFrame) -> Result<ProbMap> {
        ProbMap::load(&self.root.join(&frame.prob_map))
    }

    pub fn corpus_manifest(&self) -> Result<DatasetManifest> {
        DatasetManifest::load(Path::new(&self.corpus))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankerConfig {
    /// Percentage of frames marked positive.
    pub percentile_c: f64,
    /// Pixels above this confidence become POS in positive frames.
    pub k_pos: f64,
    /// Pixels below this confidence become NEG in positive frames.
    pub k_neg: f64,
}

impl Default for RankerConfig {
    fn default() -> Self {
        Self {
            percentile_c: 10.0,
            k_pos: 0.7,
            k_neg: 0.3,
        }
    }
}

impl RankerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.percentile_c) {
            return Err(Error::param(format!(
                "percentile_c {} outside [0, 100]",
                self.percentile_c
            )));
        }
        if !(0.0 < self.k_neg && self.k_neg < self.k_pos && self.k_pos < 1.0) {
            return Err(Error::param(format!(
                "need 0 < k_neg < k_pos < 1, got k_neg={} k_pos={}",
                self.k_neg, self.k_pos
            )));
        }
        Ok(())
    }
}

fn absolute(path: &Path) -> Result<PathBuf> {
    fs::canonicalize(path).map_err(|e| Error::storage(path, e))
}

/// Score every corpus frame with the teacher (no augmentation) and persist
/// each probability map under `out_dir/probmaps`, plus `out_dir/scored.toml`.
///
/// Maps are rounded to their stored `f32` precision before scoring so the
/// recorded score equals the score of the map on disk.
pub fn infer_corpus(
    teacher: &TinyFcn,
    teacher_id: &str,
    corpus: &DatasetManifest,
    out_dir: &Path,
) -> Result<ScoredCorpus> {
    fs::create_dir_all(out_dir).map_err(|e| Error::storage(out_dir, e))?;
    let jobs: Vec<(usize, usize)> = corpus
        .stacks
        .iter()
        .enumerate()
        .flat_map(|(s, e)| (0..e.frame_count).map(move |k| (s, k)))
        .collect();
    let frames = jobs
        .par_iter()
        .map(|&(s, k)| {
            let entry = &corpus.stacks[s];
            let frame = Frame::load(&corpus.root().join(&entry.frames[k]))?;
            let probs = teacher.forward(&frame)?.quantized();
            let rel = format!("probmaps/{}_{k:03}.nsp", entry.id);
            probs.save(&out_dir.join(&rel))?;
            Ok(ScoredFrame {
                stack_id: entry.id.clone(),
                frame_index: k,
                score: frame_score(&probs),
                prob_map: rel,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let scored = ScoredCorpus {
        dataset_id: corpus.dataset_id.clone(),
        corpus: absolute(&corpus.root().join(MANIFEST_FILE))?
            .to_string_lossy()
            .into_owned(),
        teacher_id: teacher_id.to_string(),
        frames,
        root: out_dir.to_path_buf(),
    };
    scored.save()?;
    Ok(scored)
}

/// `ceil(n * c / 100)`, clamped to `n`.
pub fn positive_count(n: usize, percentile_c: f64) -> usize {
    ((n as f64 * percentile_c / 100.0).ceil() as usize).min(n)
}

/// Indices of `scored` from highest to lowest score; ties broken by
/// `(stack_id, frame_index)` ascending.
pub fn rank_order(scored: &[ScoredFrame]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&scored[a], &scored[b]);
        y.score
            .total_cmp(&x.score)
            .then_with(|| x.stack_id.cmp(&y.stack_id))
            .then(x.frame_index.cmp(&y.frame_index))
    });
    order
}

/// Indices into the scored list, each side in rank order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
}

pub fn rank_and_threshold(scored: &[ScoredFrame], cfg: &RankerConfig) -> Result<Partition> {
    cfg.validate()?;
    if scored.is_empty() {
        return Err(Error::param("cannot rank an empty frame list"));
    }
    let mut order = rank_order(scored);
    let negative = order.split_off(positive_count(scored.len(), cfg.percentile_c));
    Ok(Partition {
        positive: order,
        negative,
    })
}

/// Trinarize a positive frame by confidence (strict inequalities on both
/// thresholds); a negative frame is all NEG.
pub fn pixel_pseudolabels(probs: &ProbMap, is_positive: bool, cfg: &RankerConfig) -> Mask {
    let (h, w) = probs.dims();
    if !is_positive {
        return Mask::from_raw(h, w, vec![NEG; h * w]);
    }
    let labels = probs
        .probs()
        .iter()
        .map(|&k| {
            if k > cfg.k_pos {
                POS
            } else if k < cfg.k_neg {
                NEG
            } else {
                IGNORE
            }
        })
        .collect();
    Mask::from_raw(h, w, labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoEntry {
    pub stack_id: String,
    pub frame_index: usize,
    pub positive: bool,
    /// Label map path, relative to the set's directory.
    pub labels: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub dataset_id: String,
    pub teacher_id: String,
    /// Manifest of the corpus the labels refer to.
    pub corpus: String,
    pub ranker: RankerConfig,
    /// False for the no-ranker ablation, where every frame is trinarized.
    pub ranker_applied: bool,
    pub positive_frames: usize,
    pub entries: Vec<PseudoEntry>,
    #[serde(skip)]
    root: PathBuf,
}

impl PseudoLabelSet {
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(PSEUDO_FILE)
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&file).map_err(|e| Error::storage(&file, e))?;
        let mut s: PseudoLabelSet =
            toml::from_str(&text).map_err(|e| Error::config(&file, e.to_string()))?;
        s.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(s)
    }

    pub fn save(&self) -> Result<()> {
        let path = self.root.join(PSEUDO_FILE);
        let text = toml::to_string(self).map_err(|e| Error::config(&path, e.to_string()))?;
        frame::write_file(&path, text.as_bytes())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn load_labels(&self, entry: &PseudoEntry) -> Result<Mask> {
        Mask::load(&self.root.join(&entry.labels))
    }

    /// Content id over entries and label bytes.
    pub fn id(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.teacher_id.as_bytes());
        for e in &self.entries {
            h.update(e.stack_id.as_bytes());
            h.update((e.frame_index as u64).to_le_bytes());
            h.update([e.positive as u8]);
            h.update(frame::read_file(&self.root.join(&e.labels))?);
        }
        Ok(h.finalize()[..8]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect())
    }

    /// Corpus frames paired with their pseudo-label maps, in entry order.
    pub fn load_training_pairs(&self) -> Result<Vec<(Frame, Mask)>> {
        let corpus = DatasetManifest::load(Path::new(&self.corpus))?;
        let by_id: HashMap<&str, usize> = corpus
            .stacks
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.as_str(), i))
            .collect();
        self.entries
            .par_iter()
            .map(|e| {
                let s = *by_id.get(e.stack_id.as_str()).ok_or_else(|| {
                    Error::param(format!(
                        "pseudo-label entry for unknown stack {}",
                        e.stack_id
                    ))
                })?;
                let entry = &corpus.stacks[s];
                let path = entry.frames.get(e.frame_index).ok_or_else(|| {
                    Error::param(format!(
                        "stack {} has no frame {}",
                        e.stack_id, e.frame_index
                    ))
                })?;
                let frame = Frame::load(&corpus.root().join(path))?;
                let labels = self.load_labels(e)?;
                if frame.dims() != labels.dims() {
                    return Err(Error::param(format!(
                        "pseudo labels for {} differ in size",
                        e.labels
                    )));
                }
                Ok((frame, labels))
            })
            .collect()
    }
}

/// Partition the scored frames and write one label map per frame plus
/// `pseudo_labels.toml` into `out_dir`. With `use_ranker == false` every
/// frame is treated as positive and trinarized.
pub fn build_pseudo_labels(
    scored: &ScoredCorpus,
    cfg: &RankerConfig,
    use_ranker: bool,
    out_dir: &Path,
) -> Result<PseudoLabelSet> {
    cfg.validate()?;
    let mut positive = vec![!use_ranker; scored.frames.len()];
    if use_ranker {
        for i in rank_and_threshold(&scored.frames, cfg)?.positive {
            positive[i] = true;
        }
    }
    let entries = scored
        .frames
        .par_iter()
        .zip(positive.par_iter())
        .map(|(sf, &is_pos)| {
            let probs = scored.load_prob_map(sf)?;
            let labels = pixel_pseudolabels(&probs, is_pos, cfg);
            let rel = format!("labels/{}_{:03}.nsm", sf.stack_id, sf.frame_index);
            labels.save(&out_dir.join(&rel))?;
            Ok(PseudoEntry {
                stack_id: sf.stack_id.clone(),
                frame_index: sf.frame_index,
                positive: is_pos,
                labels: rel,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let set = PseudoLabelSet {
        dataset_id: scored.dataset_id.clone(),
        teacher_id: scored.teacher_id.clone(),
        corpus: scored.corpus.clone(),
        ranker: *cfg,
        ranker_applied: use_ranker,
        positive_frames: positive.iter().filter(|p| **p).count(),
        entries,
        root: out_dir.to_path_buf(),
    };
    set.save()?;
    Ok(set)
}
