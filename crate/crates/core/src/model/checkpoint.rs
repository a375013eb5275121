//! Checkpoint codec.
//!
//! Layout, all integers `u32` LE:
//! `"NSC1"`, layer count `L`, `L + 1` channel counts, `L` kernel sizes,
//! then per layer the weights and biases as `f32` LE, then the length of the
//! training config followed by that many bytes of TOML (length 0 when absent).

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Architecture, ConvLayer, TinyFcn, TrainConfig};
use crate::error::{DecodeError, Result};
use crate::frame::{read_file, write_file};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NSC1";

/// Keeps corrupt headers from triggering huge allocations.
const MAX_LAYERS: usize = 1024;
const MAX_CHANNELS: usize = 1 << 16;
const MAX_KERNEL: usize = 255;

pub fn encode_checkpoint(model: &TinyFcn) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 4 * model.num_params());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let arch = model.architecture();
    put_u32(&mut out, arch.num_layers());
    for c in &arch.channels {
        put_u32(&mut out, *c);
    }
    for k in &arch.kernel_sizes {
        put_u32(&mut out, *k);
    }
    for p in model.params() {
        out.extend_from_slice(&(*p as f32).to_le_bytes());
    }
    let cfg = model
        .trained_with
        .as_ref()
        .map(|c| toml::to_string(c).expect("train config serializes"))
        .unwrap_or_default();
    put_u32(&mut out, cfg.len());
    out.extend_from_slice(cfg.as_bytes());
    out
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], DecodeError> {
        if self.bytes.len() - self.pos < n {
            return Err(DecodeError::new(
                self.bytes.len(),
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> std::result::Result<usize, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn bounded(&mut self, what: &str, max: usize) -> std::result::Result<usize, DecodeError> {
        let at = self.pos;
        let v = self.u32(what)?;
        if v > max {
            return Err(DecodeError::new(at, format!("{what} {v} exceeds {max}")));
        }
        Ok(v)
    }

    fn f32(&mut self, what: &str) -> std::result::Result<f64, DecodeError> {
        let at = self.pos;
        let v = f32::from_le_bytes(self.take(4, what)?.try_into().unwrap());
        if !v.is_finite() {
            return Err(DecodeError::new(at, format!("non-finite {what}")));
        }
        Ok(v as f64)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<TinyFcn, DecodeError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(DecodeError::new(0, "bad magic, expected NSC1"));
    }
    let n = r.bounded("layer count", MAX_LAYERS)?;
    let channels = (0..=n)
        .map(|_| r.bounded("channel count", MAX_CHANNELS))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let kernels = (0..n)
        .map(|_| r.bounded("kernel size", MAX_KERNEL))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let arch = Architecture {
        channels,
        kernel_sizes: kernels,
    };
    arch.validate()
        .map_err(|e| DecodeError::new(4, format!("invalid architecture: {e}")))?;

    let mut layers = Vec::with_capacity(n);
    for l in 0..n {
        let (ic, oc, k) = (arch.channels[l], arch.channels[l + 1], arch.kernel_sizes[l]);
        let weight = (0..oc * ic * k * k)
            .map(|_| r.f32("weight"))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let bias = (0..oc)
            .map(|_| r.f32("bias"))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        layers.push(ConvLayer {
            in_ch: ic,
            out_ch: oc,
            kernel: k,
            weight,
            bias,
        });
    }
    let cfg_at = r.pos;
    let cfg_len = r.u32("config length")?;
    let cfg_bytes = r.take(cfg_len, "train config")?;
    let trained_with = if cfg_len == 0 {
        None
    } else {
        let text = std::str::from_utf8(cfg_bytes)
            .map_err(|_| DecodeError::new(cfg_at + 4, "train config is not UTF-8"))?;
        Some(
            toml::from_str::<TrainConfig>(text)
                .map_err(|e| DecodeError::new(cfg_at + 4, format!("train config: {e}")))?,
        )
    };
    if r.pos != bytes.len() {
        return Err(DecodeError::new(r.pos, "trailing bytes"));
    }
    let mut model = TinyFcn::from_parts(arch, layers);
    model.trained_with = trained_with;
    Ok(model)
}

pub fn save_checkpoint(model: &TinyFcn, path: &Path) -> Result<()> {
    write_file(path, &encode_checkpoint(model))
}

pub fn load_checkpoint(path: &Path) -> Result<TinyFcn> {
    let bytes = read_file(path)?;
    decode_checkpoint(&bytes).map_err(|e| e.at(path))
}

/// Short content hash of the encoded checkpoint.
pub fn checkpoint_id(model: &TinyFcn) -> String {
    let digest = Sha256::digest(encode_checkpoint(model));
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
