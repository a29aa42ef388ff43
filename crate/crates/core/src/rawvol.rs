//! Minimal dependency-free volume format for tests and fast local IO.
//!
//! Layout, all little-endian:
//!   magic  "ASLV"      4 bytes
//!   version u32        (currently 1)
//!   dims    3 x u32
//!   voxel   3 x f32    millimeters
//!   data    f32        x-fastest row-major, dims[0]*dims[1]*dims[2] values
//!
//! The file size is fully determined by the header; anything longer or
//! shorter is rejected outright so a bad write can never half-load.

use crate::error::{Error, FormatKind, Result};
use crate::volume::{Volume, VolumeMeta};
use std::io::Write;
use std::path::Path;

pub const RAW_MAGIC: [u8; 4] = *b"ASLV";
pub const RAW_VERSION: u32 = 1;
const RAW_HEADER_LEN: usize = 4 + 4 + 12 + 12;

pub fn write_raw(path: &Path, vol: &Volume) -> Result<()> {
    vol.meta.validate()?;
    for (i, &d) in vol.meta.dims.iter().enumerate() {
        if d > u32::MAX as usize {
            return Err(Error::invalid("rawvol::write", format!("dimension {i} extent {d} exceeds u32")));
        }
    }
    let mut out = Vec::with_capacity(RAW_HEADER_LEN + 4 * vol.data.len());
    out.extend_from_slice(&RAW_MAGIC);
    out.extend_from_slice(&RAW_VERSION.to_le_bytes());
    for &d in &vol.meta.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in &vol.meta.voxel_mm {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &v in &vol.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut file = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    file.write_all(&out)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(())
}

pub fn read_raw(path: &Path) -> Result<Volume> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if bytes.len() < RAW_HEADER_LEN {
        return Err(Error::format(
            FormatKind::Truncated,
            format!("file is {} bytes, the header alone is {RAW_HEADER_LEN}", bytes.len()),
        ));
    }
    if bytes[..4] != RAW_MAGIC {
        return Err(Error::format(FormatKind::BadMagic, format!("magic {:?}, expected \"ASLV\"", &bytes[..4])));
    }
    let u32_at = |off: usize| u32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]);
    let version = u32_at(4);
    if version != RAW_VERSION {
        return Err(Error::format(FormatKind::UnsupportedVersion, format!("version {version}, this build reads {RAW_VERSION}")));
    }
    let dims = [u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize];
    if dims.contains(&0) {
        return Err(Error::format(FormatKind::BadHeader, format!("zero extent in dims {dims:?}")));
    }
    let mut voxel_mm = [0.0f64; 3];
    for (i, v) in voxel_mm.iter_mut().enumerate() {
        let off = 20 + 4 * i;
        let p = f32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]);
        if !(p.is_finite() && p > 0.0) {
            return Err(Error::format(FormatKind::BadHeader, format!("voxel_mm[{i}] = {p}, must be positive")));
        }
        *v = p as f64;
    }
    let n_voxels = dims[0]
        .checked_mul(dims[1])
        .and_then(|p| p.checked_mul(dims[2]))
        .ok_or_else(|| Error::format(FormatKind::BadHeader, format!("dims {dims:?} overflow")))?;
    let expected = RAW_HEADER_LEN + 4 * n_voxels;
    if bytes.len() != expected {
        let kind = if bytes.len() < expected { FormatKind::Truncated } else { FormatKind::SizeMismatch };
        return Err(Error::format(
            kind,
            format!("file is {} bytes, dims {dims:?} require exactly {expected}", bytes.len()),
        ));
    }
    let mut data = Vec::with_capacity(n_voxels);
    for c in bytes[RAW_HEADER_LEN..].chunks_exact(4) {
        data.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    }
    Volume::new(VolumeMeta::new(dims, voxel_mm), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn sample() -> Volume {
        let dims = [3, 4, 2];
        Volume::new(
            VolumeMeta::new(dims, [1.5, 2.0, 2.5]),
            (0..24).map(|i| (i as f64 - 7.0) * 1.25).collect(),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_identity_at_f32() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("v.aslv");
        let vol = sample();
        write_raw(&path, &vol).unwrap();
        let back = read_raw(&path).unwrap();
        assert_eq!(back.meta.dims, vol.meta.dims);
        // Values in the sample are exactly representable in f32.
        assert_eq!(back.data, vol.data);
        let len = std::fs::metadata(&path).unwrap().len() as usize;
        assert_eq!(len, 4 + 4 + 12 + 12 + 4 * 24);
    }

    #[test]
    fn size_must_match_header_exactly() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("v.aslv");
        write_raw(&path, &sample()).unwrap();
        let base = std::fs::read(&path).unwrap();

        let mut short = base.clone();
        short.truncate(base.len() - 4);
        std::fs::write(&path, &short).unwrap();
        assert_eq!(read_raw(&path).unwrap_err().format_kind(), Some(FormatKind::Truncated));

        let mut long = base.clone();
        long.extend_from_slice(&[0u8; 8]);
        std::fs::write(&path, &long).unwrap();
        assert_eq!(read_raw(&path).unwrap_err().format_kind(), Some(FormatKind::SizeMismatch));
    }

    #[test]
    fn bad_magic_version_and_header_rejected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("v.aslv");
        write_raw(&path, &sample()).unwrap();
        let base = std::fs::read(&path).unwrap();

        let mut m = base.clone();
        m[0] = b'Z';
        std::fs::write(&path, &m).unwrap();
        assert_eq!(read_raw(&path).unwrap_err().format_kind(), Some(FormatKind::BadMagic));

        let mut v = base.clone();
        v[4..8].copy_from_slice(&9u32.to_le_bytes());
        std::fs::write(&path, &v).unwrap();
        assert_eq!(read_raw(&path).unwrap_err().format_kind(), Some(FormatKind::UnsupportedVersion));

        let mut z = base.clone();
        z[8..12].copy_from_slice(&0u32.to_le_bytes());
        std::fs::write(&path, &z).unwrap();
        assert_eq!(read_raw(&path).unwrap_err().format_kind(), Some(FormatKind::BadHeader));

        let mut p = base;
        p[20..24].copy_from_slice(&(-1.0f32).to_le_bytes());
        std::fs::write(&path, &p).unwrap();
        assert_eq!(read_raw(&path).unwrap_err().format_kind(), Some(FormatKind::BadHeader));
    }

    #[test]
    fn tiny_file_is_truncated() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("tiny.aslv");
        std::fs::write(&path, b"ASLV").unwrap();
        assert_eq!(read_raw(&path).unwrap_err().format_kind(), Some(FormatKind::Truncated));
    }
}
