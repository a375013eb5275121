//! Frames, label masks, probability maps, and their on-disk encodings.
//!
//! All three file kinds share one layout: a four-byte magic, height and width
//! as little-endian `u32`, then the row-major payload (`f32` LE for frames and
//! probability maps, one byte per pixel for masks).

use std::fs;
use std::path::Path;

use crate::error::{DecodeError, Error, Result};

pub const NEG: u8 = 0;
pub const POS: u8 = 1;
pub const IGNORE: u8 = 255;

pub const FRAME_MAGIC: &[u8; 4] = b"NSF1";
pub const MASK_MAGIC: &[u8; 4] = b"NSM1";
pub const PROBMAP_MAGIC: &[u8; 4] = b"NSP1";

/// Smallest frame side the generator and file loaders accept.
pub const MIN_FRAME_DIM: usize = 8;

/// A single-channel image with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width, data.len())?;
        if let Some((i, v)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::param(format!(
                "frame intensity {v} at index {i} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    /// Callers guarantee the range invariant.
    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        debug_assert!(data.iter().all(|v| (0.0..=1.0).contains(v)));
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Frame {
        Frame::from_raw(
            height,
            width,
            crop_grid(&self.data, self.width, top, left, height, width),
        )
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = header(FRAME_MAGIC, self.height, self.width, 4 * self.data.len());
        for v in &self.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, DecodeError> {
        let (h, w) = read_header(bytes, FRAME_MAGIC)?;
        let data = read_f32_payload(bytes, h * w)?;
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(DecodeError::new(12 + 4 * i, "intensity outside [0, 1]"));
        }
        Ok(Self::from_raw(h, w, data))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        Self::decode(&bytes).map_err(|e| e.at(path))
    }
}

/// Per-pixel labels over `{NEG, POS, IGNORE}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        check_dims(height, width, labels.len())?;
        if let Some(v) = labels.iter().find(|v| !is_label(**v)) {
            return Err(Error::param(format!(
                "mask label {v} is not NEG, POS or IGNORE"
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Result<Self> {
        Self::new(height, width, vec![label; height * width])
    }

    pub(crate) fn from_raw(height: usize, width: usize, labels: Vec<u8>) -> Self {
        debug_assert_eq!(labels.len(), height * width);
        Self {
            height,
            width,
            labels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn has_positive(&self) -> bool {
        self.labels.contains(&POS)
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Mask {
        Mask::from_raw(
            height,
            width,
            crop_grid(&self.labels, self.width, top, left, height, width),
        )
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = header(MASK_MAGIC, self.height, self.width, self.labels.len());
        out.extend_from_slice(&self.labels);
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, DecodeError> {
        let (h, w) = read_header(bytes, MASK_MAGIC)?;
        let n = h * w;
        if bytes.len() < 12 + n {
            return Err(DecodeError::new(
                bytes.len(),
                format!("truncated: expected {n} label bytes"),
            ));
        }
        if bytes.len() > 12 + n {
            return Err(DecodeError::new(12 + n, "trailing bytes"));
        }
        let labels = bytes[12..].to_vec();
        if let Some(i) = labels.iter().position(|v| !is_label(*v)) {
            return Err(DecodeError::new(
                12 + i,
                format!("invalid label {}", labels[i]),
            ));
        }
        Ok(Self::from_raw(h, w, labels))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        Self::decode(&bytes).map_err(|e| e.at(path))
    }
}

/// Per-pixel foreground probabilities, each strictly inside `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    probs: Vec<f64>,
}

impl ProbMap {
    pub fn new(height: usize, width: usize, probs: Vec<f64>) -> Result<Self> {
        check_dims(height, width, probs.len())?;
        if let Some(p) = probs.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return Err(Error::param(format!("probability {p} outside (0, 1)")));
        }
        Ok(Self {
            height,
            width,
            probs,
        })
    }

    pub(crate) fn from_raw(height: usize, width: usize, probs: Vec<f64>) -> Self {
        debug_assert_eq!(probs.len(), height * width);
        Self {
            height,
            width,
            probs,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.probs[y * self.width + x]
    }

    /// Round every value to `f32` precision, matching what a save/load
    /// round-trip produces.
    pub fn quantized(&self) -> ProbMap {
        ProbMap::from_raw(
            self.height,
            self.width,
            self.probs.iter().map(|p| *p as f32 as f64).collect(),
        )
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = header(PROBMAP_MAGIC, self.height, self.width, 4 * self.probs.len());
        for p in &self.probs {
            out.extend_from_slice(&(*p as f32).to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, DecodeError> {
        let (h, w) = read_header(bytes, PROBMAP_MAGIC)?;
        let probs = read_f32_payload(bytes, h * w)?;
        if let Some(i) = probs.iter().position(|p| !(*p > 0.0 && *p < 1.0)) {
            return Err(DecodeError::new(12 + 4 * i, "probability outside (0, 1)"));
        }
        Ok(Self::from_raw(h, w, probs))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        Self::decode(&bytes).map_err(|e| e.at(path))
    }
}

fn is_label(v: u8) -> bool {
    v == NEG || v == POS || v == IGNORE
}

fn check_dims(height: usize, width: usize, len: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::param(format!("empty grid {height}x{width}")));
    }
    if height * width != len {
        return Err(Error::param(format!(
            "grid {height}x{width} needs {} values, got {len}",
            height * width
        )));
    }
    Ok(())
}

fn crop_grid<T: Copy>(
    data: &[T],
    stride: usize,
    top: usize,
    left: usize,
    height: usize,
    width: usize,
) -> Vec<T> {
    let mut out = Vec::with_capacity(height * width);
    for y in top..top + height {
        out.extend_from_slice(&data[y * stride + left..y * stride + left + width]);
    }
    out
}

fn header(magic: &[u8; 4], height: usize, width: usize, payload: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(height as u32).to_le_bytes());
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out
}

fn read_header(bytes: &[u8], magic: &[u8; 4]) -> std::result::Result<(usize, usize), DecodeError> {
    if bytes.len() < 4 {
        return Err(DecodeError::new(bytes.len(), "truncated magic"));
    }
    if &bytes[..4] != magic {
        return Err(DecodeError::new(
            0,
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..4]),
                String::from_utf8_lossy(magic)
            ),
        ));
    }
    if bytes.len() < 12 {
        return Err(DecodeError::new(bytes.len(), "truncated header"));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if h < MIN_FRAME_DIM || w < MIN_FRAME_DIM {
        return Err(DecodeError::new(
            4,
            format!("dimensions {h}x{w} below minimum {MIN_FRAME_DIM}"),
        ));
    }
    Ok((h, w))
}

fn read_f32_payload(bytes: &[u8], n: usize) -> std::result::Result<Vec<f64>, DecodeError> {
    let need = 12 + 4 * n;
    if bytes.len() < need {
        return Err(DecodeError::new(
            bytes.len(),
            format!("truncated: expected {need} bytes"),
        ));
    }
    if bytes.len() > need {
        return Err(DecodeError::new(need, "trailing bytes"));
    }
    let mut out = Vec::with_capacity(n);
    for (i, chunk) in bytes[12..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(DecodeError::new(12 + 4 * i, "non-finite value"));
        }
        out.push(v as f64);
    }
    Ok(out)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::storage(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::storage(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::storage(path, e))
}
