//! Student-noising augmentations: contrast transforms and head size/aspect
//! jitter. All functions are pure; stored datasets are never modified.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{Frame, Mask};

pub const GAMMA_RANGE: (f64, f64) = (0.85, 1.1);
pub const GAIN_RANGE: (f64, f64) = (0.7, 1.1);
pub const JITTER_RANGE: (f64, f64) = (-0.075, 0.075);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ContrastKind {
    PowerLaw,
    LogCorrection,
    None,
}

/// Which contrast transforms training may draw. `All` picks uniformly among
/// the three kinds; the others pin the kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastPolicy {
    #[default]
    All,
    NoneOnly,
    PowerLawOnly,
    LogOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationChoice {
    pub contrast_kind: ContrastKind,
    pub gamma: f64,
    pub gain: f64,
    /// Height jitter: `new_h = round(h * (1 - alpha))`.
    pub alpha: f64,
    /// Width jitter: `new_w = round(w * (1 - beta))`.
    pub beta: f64,
}

impl AugmentationChoice {
    pub fn identity() -> Self {
        Self {
            contrast_kind: ContrastKind::None,
            gamma: 1.0,
            gain: 1.0,
            alpha: 0.0,
            beta: 0.0,
        }
    }

    pub fn with_policy(mut self, policy: ContrastPolicy) -> Self {
        self.contrast_kind = match policy {
            ContrastPolicy::All => self.contrast_kind,
            ContrastPolicy::NoneOnly => ContrastKind::None,
            ContrastPolicy::PowerLawOnly => ContrastKind::PowerLaw,
            ContrastPolicy::LogOnly => ContrastKind::LogCorrection,
        };
        self
    }

    /// Jitter first, then contrast.
    pub fn apply(&self, frame: &Frame, mask: &Mask) -> Result<(Frame, Mask)> {
        let (f, m) = scale_jitter(frame, mask, self.alpha, self.beta)?;
        let f = match self.contrast_kind {
            ContrastKind::PowerLaw => power_law(&f, self.gamma)?,
            ContrastKind::LogCorrection => log_correction(&f, self.gain)?,
            ContrastKind::None => f,
        };
        Ok((f, m))
    }
}

/// `O = I^gamma`.
pub fn power_law(frame: &Frame, gamma: f64) -> Result<Frame> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::param(format!("power-law gamma {gamma} must be > 0")));
    }
    let data = frame
        .data()
        .iter()
        .map(|i| i.powf(gamma).clamp(0.0, 1.0))
        .collect();
    Ok(Frame::from_raw(frame.height(), frame.width(), data))
}

/// `O = gain * ln(1 + I)`, clamped to `[0, 1]`.
pub fn log_correction(frame: &Frame, gain: f64) -> Result<Frame> {
    if !(gain > 0.0 && gain.is_finite()) {
        return Err(Error::param(format!(
            "log-correction gain {gain} must be > 0"
        )));
    }
    let data = frame
        .data()
        .iter()
        .map(|i| (gain * i.ln_1p()).clamp(0.0, 1.0))
        .collect();
    Ok(Frame::from_raw(frame.height(), frame.width(), data))
}

/// Integer size after jitter: round half away from zero.
pub fn jittered_dim(dim: usize, jitter: f64) -> Result<usize> {
    if jitter.is_nan() || jitter.abs() >= 1.0 {
        return Err(Error::param(format!(
            "jitter {jitter} must satisfy |jitter| < 1"
        )));
    }
    let d = (dim as f64 * (1.0 - jitter)).round();
    if d < 1.0 {
        return Err(Error::param(format!(
            "jitter {jitter} shrinks dimension {dim} below 1"
        )));
    }
    Ok(d as usize)
}

/// Resize frame (bilinear) and mask (nearest neighbor) to the jittered size.
/// Zero jitter returns exact copies.
pub fn scale_jitter(frame: &Frame, mask: &Mask, alpha: f64, beta: f64) -> Result<(Frame, Mask)> {
    if frame.dims() != mask.dims() {
        return Err(Error::param("frame and mask dimensions differ"));
    }
    let (h0, w0) = frame.dims();
    let h = jittered_dim(h0, alpha)?;
    let w = jittered_dim(w0, beta)?;
    if (h, w) == (h0, w0) {
        return Ok((frame.clone(), mask.clone()));
    }

    let ys: Vec<Sample> = (0..h).map(|i| Sample::new(i, h0, h)).collect();
    let xs: Vec<Sample> = (0..w).map(|j| Sample::new(j, w0, w)).collect();

    let src = frame.data();
    let mut data = Vec::with_capacity(h * w);
    for sy in &ys {
        let r0 = &src[sy.lo * w0..(sy.lo + 1) * w0];
        let r1 = &src[sy.hi * w0..(sy.hi + 1) * w0];
        for sx in &xs {
            let top = r0[sx.lo] + (r0[sx.hi] - r0[sx.lo]) * sx.t;
            let bot = r1[sx.lo] + (r1[sx.hi] - r1[sx.lo]) * sx.t;
            data.push((top + (bot - top) * sy.t).clamp(0.0, 1.0));
        }
    }

    let labels = mask.labels();
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        let y = nearest(i, h0, h);
        for j in 0..w {
            out.push(labels[y * w0 + nearest(j, w0, w)]);
        }
    }
    Ok((Frame::from_raw(h, w, data), Mask::from_raw(h, w, out)))
}

/// Bilinear source position for output index `i` (pixel-center aligned).
struct Sample {
    lo: usize,
    hi: usize,
    t: f64,
}

impl Sample {
    fn new(i: usize, src: usize, dst: usize) -> Self {
        let pos = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        Self {
            lo,
            hi,
            t: pos - lo as f64,
        }
    }
}

fn nearest(i: usize, src: usize, dst: usize) -> usize {
    (((i as f64 + 0.5) * src as f64 / dst as f64) as usize).min(src - 1)
}

/// Draw one augmentation: contrast kind uniform over three options, and
/// gamma, gain, alpha, beta each drawn independently from their ranges.
pub fn sample_augmentation<R: Rng + ?Sized>(rng: &mut R) -> AugmentationChoice {
    let contrast_kind = match rng.gen_range(0..3u8) {
        0 => ContrastKind::PowerLaw,
        1 => ContrastKind::LogCorrection,
        _ => ContrastKind::None,
    };
    AugmentationChoice {
        contrast_kind,
        gamma: rng.gen_range(GAMMA_RANGE.0..GAMMA_RANGE.1),
        gain: rng.gen_range(GAIN_RANGE.0..GAIN_RANGE.1),
        alpha: rng.gen_range(JITTER_RANGE.0..JITTER_RANGE.1),
        beta: rng.gen_range(JITTER_RANGE.0..JITTER_RANGE.1),
    }
}
