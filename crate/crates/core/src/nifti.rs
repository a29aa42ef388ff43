//! Single-file NIfTI-1 reader and writer covering the subset this pipeline
//! needs: little-endian `.nii` with a 348-byte header, 3D or effectively-3D
//! 4D volumes, datatypes int16 / float32 / float64.
//!
//! Header fields used (byte offsets into the 348-byte header):
//!   0   i32  sizeof_hdr, must be 348
//!   40  i16[8] dim: dim[0] = rank, dim[1..] = extents
//!   70  i16  datatype (4 = int16, 16 = float32, 64 = float64)
//!   72  i16  bitpix, must agree with datatype
//!   76  f32[8] pixdim: pixdim[1..3] = voxel size mm
//!   108 f32  vox_offset: byte offset of the data block
//!   112 f32  scl_slope (0 means 1), 116 f32 scl_inter
//!   344 [u8; 4] magic "n+1\0"
//!
//! The writer always emits float32 with slope 1 / inter 0, vox_offset 352
//! (348-byte header plus the 4-byte extension flag, all zero).

use crate::error::{Error, FormatKind, Result};
use crate::volume::{Volume, VolumeMeta};
use std::io::Write;
use std::path::Path;

pub const NIFTI_HEADER_LEN: usize = 348;
pub const NIFTI_MAGIC: [u8; 4] = *b"n+1\0";
/// Data offset the writer uses: header + 4-byte empty extension field.
pub const NIFTI_WRITE_VOX_OFFSET: usize = 352;

pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;
pub const DT_FLOAT64: i16 = 64;

fn io_err(context: &str, path: &Path, e: std::io::Error) -> Error {
    Error::io(format!("{context} {}", path.display()), e)
}

fn i16_at(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn i32_at(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

/// Reads a volume, applying scl_slope/scl_inter to the stored values.
pub fn read_nifti(path: &Path) -> Result<Volume> {
    let bytes = std::fs::read(path).map_err(|e| io_err("reading", path, e))?;
    if bytes.len() < NIFTI_HEADER_LEN {
        return Err(Error::format(
            FormatKind::Truncated,
            format!("file is {} bytes, the NIfTI-1 header alone is {NIFTI_HEADER_LEN}", bytes.len()),
        ));
    }
    let header = &bytes[..NIFTI_HEADER_LEN];
    if header[344..348] != NIFTI_MAGIC {
        return Err(Error::format(
            FormatKind::BadMagic,
            format!("magic {:?}, expected \"n+1\\0\" (single-file NIfTI-1)", &header[344..348]),
        ));
    }
    let sizeof_hdr = i32_at(header, 0);
    if sizeof_hdr != NIFTI_HEADER_LEN as i32 {
        return Err(Error::format(
            FormatKind::BadHeader,
            format!("sizeof_hdr {sizeof_hdr}, expected {NIFTI_HEADER_LEN} (non-little-endian or corrupt header)"),
        ));
    }

    let rank = i16_at(header, 40);
    if !(1..=4).contains(&rank) {
        return Err(Error::format(FormatKind::BadHeader, format!("dim[0] = {rank}, this reader handles rank 1..=4")));
    }
    let mut extent = [1usize; 4];
    for (i, e) in extent.iter_mut().enumerate().take(rank as usize) {
        let d = i16_at(header, 40 + 2 * (i + 1));
        if d < 1 {
            return Err(Error::format(FormatKind::BadHeader, format!("dim[{}] = {d}, extents must be >= 1", i + 1)));
        }
        *e = d as usize;
    }
    if extent[3] != 1 {
        return Err(Error::format(
            FormatKind::BadHeader,
            format!("4th dimension has extent {}, only single-timepoint volumes are supported", extent[3]),
        ));
    }
    let dims = [extent[0], extent[1], extent[2]];

    let datatype = i16_at(header, 70);
    let bitpix = i16_at(header, 72);
    let bytes_per = match datatype {
        DT_INT16 => 2usize,
        DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => {
            return Err(Error::format(
                FormatKind::UnsupportedDatatype,
                format!("datatype code {other}, supported: 4 (int16), 16 (float32), 64 (float64)"),
            ));
        }
    };
    if bitpix as usize != bytes_per * 8 {
        return Err(Error::format(
            FormatKind::BadHeader,
            format!("bitpix {bitpix} disagrees with datatype {datatype} ({} bits)", bytes_per * 8),
        ));
    }

    let mut voxel_mm = [0.0f64; 3];
    for (i, v) in voxel_mm.iter_mut().enumerate() {
        let p = f32_at(header, 76 + 4 * (i + 1));
        if !(p.is_finite() && p > 0.0) {
            return Err(Error::format(FormatKind::BadHeader, format!("pixdim[{}] = {p}, voxel sizes must be positive", i + 1)));
        }
        *v = p as f64;
    }

    let vox_offset = f32_at(header, 108);
    if !(vox_offset.is_finite() && vox_offset >= NIFTI_HEADER_LEN as f32 && vox_offset.fract() == 0.0) {
        return Err(Error::format(FormatKind::BadHeader, format!("vox_offset {vox_offset} is not an integral offset past the header")));
    }
    let data_start = vox_offset as usize;

    let slope_raw = f32_at(header, 112) as f64;
    let inter = f32_at(header, 116) as f64;
    let slope = if slope_raw == 0.0 { 1.0 } else { slope_raw };
    if !(slope.is_finite() && inter.is_finite()) {
        return Err(Error::format(FormatKind::BadHeader, format!("non-finite scaling: slope {slope_raw}, inter {inter}")));
    }

    let n_voxels = dims[0] * dims[1] * dims[2];
    let need = data_start + n_voxels * bytes_per;
    if bytes.len() < need {
        return Err(Error::format(
            FormatKind::Truncated,
            format!("file is {} bytes, {dims:?} {datatype} data needs {need}", bytes.len()),
        ));
    }

    let raw = &bytes[data_start..need];
    let mut data = Vec::with_capacity(n_voxels);
    match datatype {
        DT_INT16 => {
            for c in raw.chunks_exact(2) {
                data.push(i16::from_le_bytes([c[0], c[1]]) as f64 * slope + inter);
            }
        }
        DT_FLOAT32 => {
            for c in raw.chunks_exact(4) {
                data.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64 * slope + inter);
            }
        }
        _ => {
            for c in raw.chunks_exact(8) {
                let mut b = [0u8; 8];
                b.copy_from_slice(c);
                data.push(f64::from_le_bytes(b) * slope + inter);
            }
        }
    }

    Volume::new(VolumeMeta::new(dims, voxel_mm), data)
}

/// Writes a volume as float32 with identity scaling.
pub fn write_nifti(path: &Path, vol: &Volume) -> Result<()> {
    vol.meta.validate()?;
    let dims = vol.meta.dims;
    for (i, &d) in dims.iter().enumerate() {
        if d > i16::MAX as usize {
            return Err(Error::invalid("nifti::write", format!("dimension {i} extent {d} exceeds the int16 header field")));
        }
    }

    let mut header = vec![0u8; NIFTI_HEADER_LEN];
    header[0..4].copy_from_slice(&(NIFTI_HEADER_LEN as i32).to_le_bytes());
    // dim[0] = 3 plus three extents; the rest stay 0 per convention for
    // unused dimensions (readers only consult the first dim[0] entries).
    header[40..42].copy_from_slice(&3i16.to_le_bytes());
    for (i, &d) in dims.iter().enumerate() {
        header[42 + 2 * i..44 + 2 * i].copy_from_slice(&(d as i16).to_le_bytes());
    }
    header[70..72].copy_from_slice(&DT_FLOAT32.to_le_bytes());
    header[72..74].copy_from_slice(&32i16.to_le_bytes());
    // pixdim[0] is the quaternion sign slot; 1.0 is the conventional value.
    header[76..80].copy_from_slice(&1.0f32.to_le_bytes());
    for (i, &v) in vol.meta.voxel_mm.iter().enumerate() {
        header[80 + 4 * i..84 + 4 * i].copy_from_slice(&(v as f32).to_le_bytes());
    }
    header[108..112].copy_from_slice(&(NIFTI_WRITE_VOX_OFFSET as f32).to_le_bytes());
    header[112..116].copy_from_slice(&1.0f32.to_le_bytes());
    header[116..120].copy_from_slice(&0.0f32.to_le_bytes());
    header[344..348].copy_from_slice(&NIFTI_MAGIC);

    let mut out = Vec::with_capacity(NIFTI_WRITE_VOX_OFFSET + 4 * vol.data.len());
    out.extend_from_slice(&header);
    // Four zero bytes: the "no extensions" flag that pads to vox_offset.
    out.extend_from_slice(&[0u8; 4]);
    for &v in &vol.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }

    let mut file = std::fs::File::create(path).map_err(|e| io_err("creating", path, e))?;
    file.write_all(&out).map_err(|e| io_err("writing", path, e))?;
    Ok(())
}
