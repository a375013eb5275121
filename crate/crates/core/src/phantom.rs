//! Deterministic synthetic head-CT-like phantoms.
//!
//! A frame is a bright skull ring around a textured elliptical brain on a dark
//! background. Lesion-bearing frames get one or two isotropic Gaussian blobs
//! inside the brain. A pixel is labeled positive when a single blob's
//! contribution there exceeds half of that blob's peak, so the mask of a blob
//! with radius `r` is the disk of radius `r` around its center.
//!
//! Everything here is a pure function of `(profile, seed)`.

use std::collections::HashSet;
use std::f64::consts::{LN_2, PI};
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{self, Frame, Mask, MIN_FRAME_DIM, NEG, POS};
use crate::rng::{mix_seed, rng_from_seed};

pub const MANIFEST_FILE: &str = "manifest.toml";

/// Lesion-bearing frames carry between one and this many blobs.
pub const MAX_LESIONS_PER_FRAME: usize = 2;
pub const LESION_RADIUS_RANGE: (f64, f64) = (2.0, 8.0);
/// Mask threshold as a fraction of a blob's peak amplitude.
pub const LESION_MASK_FRACTION: f64 = 0.5;

const BACKGROUND: f64 = 0.02;
const BRAIN_BASE: f64 = 0.40;
const SKULL: f64 = 0.92;
/// Skull thickness as a fraction of the brain semi-axes.
const SKULL_WIDTH: f64 = 0.12;
/// Lesion centers stay inside this normalized radius of the brain ellipse.
const LESION_CENTER_RADIUS: f64 = 0.75;

/// Knobs describing one acquisition "site".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainProfile {
    #[serde(default = "default_domain_id")]
    pub domain_id: String,
    pub noise_sigma: f64,
    /// Gamma applied to the clean image at generation time.
    pub contrast_bias: f64,
    /// Mean brain semi-axis as a fraction of the frame side.
    pub head_scale: f64,
    pub lesion_rate: f64,
    /// Mean peak intensity lift of a lesion blob.
    pub lesion_brightness: f64,
    /// `[height, width]`.
    pub frame_dims: [usize; 2],
    pub frames_per_stack: usize,
}

fn default_domain_id() -> String {
    "default".to_string()
}

impl DomainProfile {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Param(format!("domain profile: {msg}")));
        if !(0.0..=1.0).contains(&self.lesion_rate) {
            return bad(format!("lesion_rate {} outside [0, 1]", self.lesion_rate));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!(
                "noise_sigma {} must be finite and >= 0",
                self.noise_sigma
            ));
        }
        if !(self.head_scale > 0.0 && self.head_scale <= 0.5) {
            return bad(format!("head_scale {} outside (0, 0.5]", self.head_scale));
        }
        if !(self.contrast_bias > 0.0 && self.contrast_bias.is_finite()) {
            return bad(format!("contrast_bias {} must be > 0", self.contrast_bias));
        }
        if !(self.lesion_brightness >= 0.0 && self.lesion_brightness.is_finite()) {
            return bad(format!(
                "lesion_brightness {} must be >= 0",
                self.lesion_brightness
            ));
        }
        let [h, w] = self.frame_dims;
        if h < MIN_FRAME_DIM || w < MIN_FRAME_DIM {
            return bad(format!("frame_dims {h}x{w} below minimum {MIN_FRAME_DIM}"));
        }
        if self.frames_per_stack == 0 {
            return bad("frames_per_stack must be >= 1".into());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        let profile: DomainProfile =
            toml::from_str(&text).map_err(|e| Error::config(path, e.to_string()))?;
        profile.validate()?;
        Ok(profile)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stack {
    pub stack_id: String,
    pub domain_id: String,
    pub frames: Vec<(Frame, Mask)>,
}

impl Stack {
    pub fn positive(&self) -> bool {
        self.frames.iter().any(|(_, m)| m.has_positive())
    }
}

/// Geometry of one brain ellipse.
#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    /// Normalized radius; `< 1` is inside the brain.
    fn radius(&self, y: f64, x: f64) -> f64 {
        let dy = (y - self.cy) / self.ry;
        let dx = (x - self.cx) / self.rx;
        (dy * dy + dx * dx).sqrt()
    }
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    cy: f64,
    cx: f64,
    sigma: f64,
    amplitude: f64,
}

pub fn generate_stack(profile: &DomainProfile, seed: u64, stack_id: &str) -> Result<Stack> {
    profile.validate()?;
    let mut rng = rng_from_seed(seed);
    let [h, w] = profile.frame_dims;
    let side = h.min(w) as f64;

    // Per-exam head geometry; individual slices vary slightly around it.
    let base_ry = profile.head_scale * h as f64 * rng.gen_range(0.92..1.08);
    let base_rx = profile.head_scale * w as f64 * rng.gen_range(0.85..1.0);
    let cy = (h as f64 - 1.0) / 2.0 + rng.gen_range(-0.04..0.04) * side;
    let cx = (w as f64 - 1.0) / 2.0 + rng.gen_range(-0.04..0.04) * side;
    let noise = if profile.noise_sigma > 0.0 {
        Some(Normal::new(0.0, profile.noise_sigma).expect("validated sigma"))
    } else {
        None
    };

    let mut frames = Vec::with_capacity(profile.frames_per_stack);
    for _ in 0..profile.frames_per_stack {
        let slice = rng.gen_range(0.88..1.0);
        let head = Ellipse {
            cy,
            cx,
            ry: (base_ry * slice).max(1.0),
            rx: (base_rx * slice).max(1.0),
        };

        // Low-frequency brain texture.
        let fy = rng.gen_range(0.5..2.0) * PI / side;
        let fx = rng.gen_range(0.5..2.0) * PI / side;
        let (py, px) = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
        let texture_amp = rng.gen_range(0.02..0.05);

        let mut blobs = Vec::new();
        if rng.gen_bool(profile.lesion_rate) {
            let n = rng.gen_range(1..=MAX_LESIONS_PER_FRAME);
            for _ in 0..n {
                let radius = rng.gen_range(LESION_RADIUS_RANGE.0..=LESION_RADIUS_RANGE.1);
                let (ly, lx) = sample_lesion_center(&mut rng, &head, h, w);
                blobs.push(Blob {
                    cy: ly,
                    cx: lx,
                    // Half-maximum radius of the Gaussian equals `radius`.
                    sigma: radius / (2.0 * LN_2).sqrt(),
                    amplitude: profile.lesion_brightness * rng.gen_range(0.8..1.2),
                });
            }
        }

        let mut data = Vec::with_capacity(h * w);
        let mut labels = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (yf, xf) = (y as f64, x as f64);
                let r = head.radius(yf, xf);
                let mut v = if r < 1.0 {
                    BRAIN_BASE + texture_amp * (fy * yf + py).sin() * (fx * xf + px).cos()
                } else if r < 1.0 + SKULL_WIDTH {
                    SKULL
                } else {
                    BACKGROUND
                };
                let mut label = NEG;
                for b in &blobs {
                    let d2 = (yf - b.cy).powi(2) + (xf - b.cx).powi(2);
                    let c = b.amplitude * (-d2 / (2.0 * b.sigma * b.sigma)).exp();
                    v += c;
                    if r < 1.0 && c > LESION_MASK_FRACTION * b.amplitude {
                        label = POS;
                    }
                }
                let mut v = v.clamp(0.0, 1.0).powf(profile.contrast_bias);
                if let Some(n) = &noise {
                    v += n.sample(&mut rng);
                }
                data.push(v.clamp(0.0, 1.0) as f32 as f64);
                labels.push(label);
            }
        }
        frames.push((Frame::from_raw(h, w, data), Mask::from_raw(h, w, labels)));
    }

    Ok(Stack {
        stack_id: stack_id.to_string(),
        domain_id: profile.domain_id.clone(),
        frames,
    })
}

/// Integer pixel inside the inner part of the brain, so the center pixel is
/// always labeled positive.
fn sample_lesion_center<R: Rng>(rng: &mut R, head: &Ellipse, h: usize, w: usize) -> (f64, f64) {
    loop {
        let y = rng.gen_range(0..h) as f64;
        let x = rng.gen_range(0..w) as f64;
        if head.radius(y, x) < LESION_CENTER_RADIUS {
            return (y, x);
        }
    }
}

/// One stack's entry in a [`DatasetManifest`]. Paths are relative to the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackEntry {
    pub id: String,
    pub domain_id: String,
    pub frame_count: usize,
    pub positive: bool,
    pub frames: Vec<String>,
    pub masks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_id: String,
    #[serde(with = "crate::rng::seed_serde")]
    pub seed: u64,
    pub profile: DomainProfile,
    pub stacks: Vec<StackEntry>,
    #[serde(skip)]
    root: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        let mut manifest: DatasetManifest =
            toml::from_str(&text).map_err(|e| Error::config(path, e.to_string()))?;
        manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.validate().map_err(|e| match e {
            Error::Param(msg) => Error::config(path, msg),
            e => e,
        })?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::config(path, e.to_string()))?;
        frame::write_file(path, text.as_bytes())
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in &self.stacks {
            if !seen.insert(&s.id) {
                return Err(Error::param(format!("duplicate stack id {}", s.id)));
            }
            if s.frame_count == 0
                || s.frames.len() != s.frame_count
                || s.masks.len() != s.frame_count
            {
                return Err(Error::param(format!(
                    "stack {} has inconsistent frame lists",
                    s.id
                )));
            }
        }
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn frame_count(&self) -> usize {
        self.stacks.iter().map(|s| s.frame_count).sum()
    }

    pub fn load_stack(&self, index: usize) -> Result<Stack> {
        let entry = &self.stacks[index];
        let mut frames = Vec::with_capacity(entry.frame_count);
        for (f, m) in entry.frames.iter().zip(&entry.masks) {
            let frame = Frame::load(&self.root.join(f))?;
            let mask = Mask::load(&self.root.join(m))?;
            if frame.dims() != mask.dims() {
                return Err(Error::param(format!(
                    "stack {}: frame {f} and mask {m} differ in size",
                    entry.id
                )));
            }
            frames.push((frame, mask));
        }
        let stack = Stack {
            stack_id: entry.id.clone(),
            domain_id: entry.domain_id.clone(),
            frames,
        };
        if stack.positive() != entry.positive {
            return Err(Error::param(format!(
                "stack {}: positive flag disagrees with masks",
                entry.id
            )));
        }
        Ok(stack)
    }

    /// Load every stack, in manifest order.
    pub fn load_all(&self) -> Result<Vec<Stack>> {
        (0..self.stacks.len())
            .into_par_iter()
            .map(|i| self.load_stack(i))
            .collect()
    }
}

pub fn stack_seed(corpus_seed: u64, index: usize) -> u64 {
    mix_seed(corpus_seed, index as u64)
}

/// Generate `n_stacks` stacks into `out_dir` and write `manifest.toml` there.
pub fn generate_corpus(
    profile: &DomainProfile,
    n_stacks: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    profile.validate()?;
    if n_stacks == 0 {
        return Err(Error::param("n_stacks must be >= 1"));
    }
    let dataset_id = out_dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    fs::create_dir_all(out_dir).map_err(|e| Error::storage(out_dir, e))?;

    let stacks = (0..n_stacks)
        .into_par_iter()
        .map(|i| {
            let id = format!("{dataset_id}-{i:05}");
            let stack = generate_stack(profile, stack_seed(seed, i), &id)?;
            let mut entry = StackEntry {
                id: id.clone(),
                domain_id: stack.domain_id.clone(),
                frame_count: stack.frames.len(),
                positive: stack.positive(),
                frames: Vec::new(),
                masks: Vec::new(),
            };
            for (k, (f, m)) in stack.frames.iter().enumerate() {
                let fp = format!("stacks/{id}/frame_{k:03}.nsf");
                let mp = format!("stacks/{id}/mask_{k:03}.nsm");
                f.save(&out_dir.join(&fp))?;
                m.save(&out_dir.join(&mp))?;
                entry.frames.push(fp);
                entry.masks.push(mp);
            }
            Ok(entry)
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = DatasetManifest {
        dataset_id,
        seed,
        profile: profile.clone(),
        stacks,
        root: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
pub(crate) fn test_profile() -> DomainProfile {
    DomainProfile {
        domain_id: "test".into(),
        noise_sigma: 0.02,
        contrast_bias: 1.0,
        head_scale: 0.38,
        lesion_rate: 0.3,
        lesion_brightness: 0.3,
        frame_dims: [32, 32],
        frames_per_stack: 4,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lesion_rate_gives_negative_stack() {
        let p = DomainProfile {
            lesion_rate: 0.0,
            ..test_profile()
        };
        let s = generate_stack(&p, 3, "s").unwrap();
        assert!(!s.positive());
        assert!(s.frames.iter().all(|(_, m)| m.count(NEG) == 32 * 32));
    }

    #[test]
    fn generation_is_deterministic() {
        let p = test_profile();
        assert_eq!(
            generate_stack(&p, 11, "a").unwrap(),
            generate_stack(&p, 11, "a").unwrap()
        );
        assert_ne!(
            generate_stack(&p, 11, "a").unwrap(),
            generate_stack(&p, 12, "a").unwrap()
        );
    }

    #[test]
    fn invalid_profiles_rejected() {
        let base = test_profile();
        for p in [
            DomainProfile {
                lesion_rate: 1.5,
                ..base.clone()
            },
            DomainProfile {
                noise_sigma: -0.1,
                ..base.clone()
            },
            DomainProfile {
                head_scale: 0.0,
                ..base.clone()
            },
            DomainProfile {
                head_scale: 0.6,
                ..base.clone()
            },
            DomainProfile {
                frame_dims: [4, 32],
                ..base.clone()
            },
            DomainProfile {
                frames_per_stack: 0,
                ..base.clone()
            },
        ] {
            assert!(
                matches!(generate_stack(&p, 0, "x"), Err(Error::Param(_))),
                "{p:?}"
            );
        }
    }

    #[test]
    fn values_in_range_under_heavy_noise() {
        let p = DomainProfile {
            noise_sigma: 0.3,
            lesion_brightness: 0.9,
            ..test_profile()
        };
        for seed in 0..10 {
            let s = generate_stack(&p, seed, "s").unwrap();
            assert!(s
                .frames
                .iter()
                .all(|(f, _)| f.data().iter().all(|v| (0.0..=1.0).contains(v))));
        }
    }

    #[test]
    fn positive_pixels_lie_inside_brain() {
        // Without noise and with faint lesions, brain pixels sit near the base
        // level while skull and background are far away from it.
        let p = DomainProfile {
            noise_sigma: 0.0,
            lesion_rate: 1.0,
            lesion_brightness: 0.01,
            ..test_profile()
        };
        for seed in 0..20 {
            for (f, m) in generate_stack(&p, seed, "s").unwrap().frames {
                assert!(m.has_positive());
                for (v, l) in f.data().iter().zip(m.labels()) {
                    if *l == POS {
                        assert!((0.3..0.5).contains(v), "POS pixel with intensity {v}");
                    }
                }
            }
        }
    }

    #[test]
    fn corpus_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("toy");
        let m = generate_corpus(&test_profile(), 3, 9, &out).unwrap();
        assert_eq!(m.stacks.len(), 3);
        let loaded = DatasetManifest::load(&out.join(MANIFEST_FILE)).unwrap();
        assert_eq!(loaded, m);
        let direct = generate_stack(&test_profile(), stack_seed(9, 1), "toy-00001").unwrap();
        assert_eq!(loaded.load_stack(1).unwrap(), direct);
    }
}
