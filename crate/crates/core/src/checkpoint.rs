//! Model checkpoint serialization.
//!
//! Layout, all little-endian:
//!
//! ```text
//! bytes 0..4    magic "ASLD"
//! u32           format version (1)
//! u32 x 5       num_layers, filters, kernel, in_channels, bn bitmask
//! per layer     conv weights f32 [O,I,K,K] row-major, conv bias f32 [O],
//!               then for bn layers: scale, shift, running mean, running var
//!               (each f32 [C])
//! u64           training step counter
//! u64           rng seed
//! ```
//!
//! Parameters are stored in 32-bit floats; the in-memory model stays f64.
//! BN momentum and epsilon are pipeline constants and are not stored. The
//! file length is fully determined by the header, and both truncation and
//! trailing bytes are rejected.

use crate::error::{Error, FormatKind, Result};
use crate::model::{build_model, ModelParams, ModelSpec};
use std::path::Path;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ASLD";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub step: u64,
    pub seed: u64,
}

impl Checkpoint {
    /// FNV-1a hash of the architecture fields plus seed; callers can compare
    /// fingerprints to detect configuration drift without field-by-field
    /// inspection.
    pub fn config_fingerprint(&self) -> u64 {
        let spec = self.params.spec();
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: u64| {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        eat(spec.num_layers as u64);
        eat(spec.filters as u64);
        eat(spec.kernel as u64);
        eat(spec.in_channels as u64);
        eat(spec.bn_bitmask() as u64);
        eat(self.seed);
        h
    }
}

fn scalar_count(spec: &ModelSpec) -> usize {
    let mut n = 0;
    for i in 1..=spec.num_layers {
        let (ic, oc) = spec.layer_io(i);
        n += oc * ic * spec.kernel * spec.kernel + oc;
        if spec.has_bn(i) {
            n += 4 * oc;
        }
    }
    n
}

/// Exact file size in bytes for a given architecture.
pub fn checkpoint_size(spec: &ModelSpec) -> usize {
    4 + 4 + 5 * 4 + 4 * scalar_count(spec) + 8 + 8
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, step: u64, seed: u64) -> Result<()> {
    let spec = params.spec();
    let mut buf: Vec<u8> = Vec::with_capacity(checkpoint_size(spec));
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [
        spec.num_layers as u32,
        spec.filters as u32,
        spec.kernel as u32,
        spec.in_channels as u32,
        spec.bn_bitmask(),
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let push_f32 = |buf: &mut Vec<u8>, data: &[f64]| {
        for &v in data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    };
    for layer in &params.layers {
        push_f32(&mut buf, layer.conv.weights.data());
        push_f32(&mut buf, layer.conv.bias.data());
        if let Some(bn) = &layer.bn {
            push_f32(&mut buf, bn.scale.data());
            push_f32(&mut buf, bn.shift.data());
            push_f32(&mut buf, bn.running_mean.data());
            push_f32(&mut buf, bn.running_var.data());
        }
    }
    buf.extend_from_slice(&step.to_le_bytes());
    buf.extend_from_slice(&seed.to_le_bytes());
    std::fs::write(path, &buf).map_err(|e| Error::io(format!("writing checkpoint {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
    if bytes.len() < 4 {
        return Err(Error::format(FormatKind::Truncated, format!("{} bytes is shorter than the magic", bytes.len())));
    }
    if bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format(FormatKind::BadMagic, format!("expected \"ASLD\", got {:?}", &bytes[..4])));
    }
    // Offsets: magic 0, version 4, num_layers 8, filters 12, kernel 16,
    // in_channels 20, bitmask 24; payload starts at 28.
    if bytes.len() < 28 {
        return Err(Error::format(FormatKind::Truncated, "header cut short"));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(FormatKind::UnsupportedVersion, format!("version {version}, supported: 1")));
    }
    let num_layers = u32_at(8) as usize;
    let filters = u32_at(12) as usize;
    let kernel = u32_at(16) as usize;
    let in_channels = u32_at(20) as usize;
    let bitmask = u32_at(24);
    let spec = ModelSpec {
        num_layers,
        filters,
        kernel,
        in_channels,
        bn_layers: ModelSpec::bn_layers_from_bitmask(num_layers.min(32), bitmask),
    };
    spec.validate()
        .map_err(|e| Error::format(FormatKind::BadHeader, format!("invalid architecture: {e}")))?;

    let expected = checkpoint_size(&spec);
    if bytes.len() < expected {
        return Err(Error::format(
            FormatKind::Truncated,
            format!("need {expected} bytes for this architecture, file has {}", bytes.len()),
        ));
    }
    if bytes.len() > expected {
        return Err(Error::format(
            FormatKind::SizeMismatch,
            format!("expected exactly {expected} bytes, file has {}", bytes.len()),
        ));
    }

    let mut params = build_model(&spec, 0)?;
    let mut off = 28;
    let read_f32s = |off: &mut usize, n: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let b: [u8; 4] = bytes[*off + 4 * i..*off + 4 * i + 4].try_into().unwrap();
            out.push(f32::from_le_bytes(b) as f64);
        }
        *off += 4 * n;
        out
    };
    for layer in &mut params.layers {
        let wlen = layer.conv.weights.len();
        let data = read_f32s(&mut off, wlen);
        layer.conv.weights.data_mut().copy_from_slice(&data);
        let blen = layer.conv.bias.len();
        let data = read_f32s(&mut off, blen);
        layer.conv.bias.data_mut().copy_from_slice(&data);
        if let Some(bn) = &mut layer.bn {
            let c = bn.scale.len();
            let s = read_f32s(&mut off, c);
            bn.scale.data_mut().copy_from_slice(&s);
            let s = read_f32s(&mut off, c);
            bn.shift.data_mut().copy_from_slice(&s);
            let s = read_f32s(&mut off, c);
            bn.running_mean.data_mut().copy_from_slice(&s);
            let s = read_f32s(&mut off, c);
            bn.running_var.data_mut().copy_from_slice(&s);
            bn.stats_ready = true;
        }
    }
    let step = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
    let seed = u64::from_le_bytes(bytes[off + 8..off + 16].try_into().unwrap());
    Ok(Checkpoint { params, step, seed })
}
