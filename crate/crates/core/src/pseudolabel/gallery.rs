//! Static calibration galleries for choosing the ranker cutoff.
//!
//! For each candidate percentile one P6 PPM grid is written. Its tiles are the
//! frames ranked just above and just below the cutoff, so a reviewer sees
//! whether false positives creep in near the boundary. Each tile shows the
//! frame in grayscale with the `k_pos` contour of the teacher's map in green;
//! the tile border is red above the cutoff and blue below it.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{positive_count, rank_order, ScoredCorpus, ScoredFrame};
use crate::error::{Error, Result};
use crate::frame::{self, Frame, ProbMap};
use crate::phantom::DatasetManifest;

const GAP: usize = 2;
const BACKGROUND: [u8; 3] = [24, 24, 24];
const ABOVE: [u8; 3] = [220, 40, 40];
const BELOW: [u8; 3] = [60, 90, 220];
const CONTOUR: [u8; 3] = [0, 255, 0];

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryOutput {
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

pub fn gallery_file_name(percent: f64) -> String {
    if percent.fract() == 0.0 {
        format!("gallery_C{}.ppm", percent as u64)
    } else {
        format!("gallery_C{percent}.ppm")
    }
}

/// Indices (rank order) of the `n` frames straddling the cutoff for
/// `percent`, and how many of them lie above it.
pub fn select_gallery_frames(
    scored: &[ScoredFrame],
    percent: f64,
    n: usize,
) -> (Vec<usize>, usize) {
    let order = rank_order(scored);
    let total = order.len();
    let n = n.min(total);
    let boundary = positive_count(total, percent);
    let start = boundary.saturating_sub(n / 2).min(total - n);
    let above = boundary.saturating_sub(start).min(n);
    (order[start..start + n].to_vec(), above)
}

pub fn render_gallery(
    scored: &ScoredCorpus,
    corpus: &DatasetManifest,
    thresholds: &[f64],
    n_per_threshold: usize,
    k_pos: f64,
    out_dir: &Path,
) -> Result<GalleryOutput> {
    if let Some(t) = thresholds.iter().find(|t| !(0.0..=100.0).contains(*t)) {
        return Err(Error::param(format!(
            "gallery threshold {t} outside [0, 100]"
        )));
    }
    if n_per_threshold == 0 {
        return Err(Error::param(
            "gallery needs at least one tile per threshold",
        ));
    }
    let mut warnings = Vec::new();
    if thresholds.is_empty() {
        return Ok(GalleryOutput {
            files: Vec::new(),
            warnings,
        });
    }
    if scored.frames.is_empty() {
        return Err(Error::param("no scored frames"));
    }
    if scored.frames.len() < n_per_threshold {
        let msg = format!(
            "corpus has {} frames, fewer than {n_per_threshold} per threshold; showing all",
            scored.frames.len()
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::storage(out_dir, e))?;

    let stacks: HashMap<&str, usize> = corpus
        .stacks
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.as_str(), i))
        .collect();
    let files = thresholds
        .par_iter()
        .map(|&c| {
            let (picked, above) = select_gallery_frames(&scored.frames, c, n_per_threshold);
            let tiles = picked
                .iter()
                .map(|&i| {
                    let sf = &scored.frames[i];
                    let s = *stacks.get(sf.stack_id.as_str()).ok_or_else(|| {
                        Error::param(format!("scored frame from unknown stack {}", sf.stack_id))
                    })?;
                    let frame =
                        Frame::load(&corpus.root().join(&corpus.stacks[s].frames[sf.frame_index]))?;
                    Ok((frame, scored.load_prob_map(sf)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let path = out_dir.join(gallery_file_name(c));
            frame::write_file(&path, &render_grid(&tiles, above, k_pos))?;
            Ok(path)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GalleryOutput { files, warnings })
}

fn render_grid(tiles: &[(Frame, ProbMap)], above: usize, k_pos: f64) -> Vec<u8> {
    let cols = (tiles.len() as f64).sqrt().ceil() as usize;
    let rows = tiles.len().div_ceil(cols);
    let th = tiles.iter().map(|(f, _)| f.height()).max().unwrap_or(0) + 2;
    let tw = tiles.iter().map(|(f, _)| f.width()).max().unwrap_or(0) + 2;
    let width = cols * (tw + GAP) + GAP;
    let height = rows * (th + GAP) + GAP;
    let mut px = vec![BACKGROUND; width * height];

    for (t, (frame, probs)) in tiles.iter().enumerate() {
        let oy = GAP + (t / cols) * (th + GAP);
        let ox = GAP + (t % cols) * (tw + GAP);
        let border = if t < above { ABOVE } else { BELOW };
        let (h, w) = frame.dims();
        for y in 0..h + 2 {
            for x in 0..w + 2 {
                px[(oy + y) * width + ox + x] = border;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v = (frame.get(y, x) * 255.0).round() as u8;
                let color = if on_contour(probs, y, x, k_pos) {
                    CONTOUR
                } else {
                    [v, v, v]
                };
                px[(oy + 1 + y) * width + ox + 1 + x] = color;
            }
        }
    }

    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for p in px {
        out.extend_from_slice(&p);
    }
    out
}

/// Inside the `> k_pos` region with a 4-neighbor (or the edge) outside it.
fn on_contour(probs: &ProbMap, y: usize, x: usize, k_pos: f64) -> bool {
    let inside = |y: usize, x: usize| probs.get(y, x) > k_pos;
    if !inside(y, x) {
        return false;
    }
    let (h, w) = probs.dims();
    y == 0
        || x == 0
        || y + 1 == h
        || x + 1 == w
        || !inside(y - 1, x)
        || !inside(y + 1, x)
        || !inside(y, x - 1)
        || !inside(y, x + 1)
}
