//! 3-d volumes on a regular grid.
//!
//! Data is stored with x fastest, then y, then z (the same order a NIfTI
//! file uses), so an axial slice at fixed z is one contiguous plane of
//! `ny * nx` values. Slices are exposed as `Slice2d` with `h = ny` rows and
//! `w = nx` columns.
//!
//! Masks are ordinary volumes holding 0/1 values; a voxel is inside when its
//! value exceeds 0.5.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeMeta {
    pub dims: [usize; 3],
    pub voxel_mm: [f64; 3],
    /// Intensity scaling as read from file (already applied to the data).
    pub scl_slope: f64,
    pub scl_inter: f64,
}

impl VolumeMeta {
    pub fn new(dims: [usize; 3], voxel_mm: [f64; 3]) -> VolumeMeta {
        VolumeMeta { dims, voxel_mm, scl_slope: 1.0, scl_inter: 0.0 }
    }

    pub fn n_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::invalid("volume::meta", format!("zero dimension in {:?}", self.dims)));
        }
        if self.voxel_mm.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
            return Err(Error::invalid("volume::meta", format!("voxel size must be positive, got {:?}", self.voxel_mm)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub meta: VolumeMeta,
    pub data: Vec<f64>,
}

impl Volume {
    pub fn zeros(dims: [usize; 3], voxel_mm: [f64; 3]) -> Volume {
        let meta = VolumeMeta::new(dims, voxel_mm);
        let n = meta.n_voxels();
        Volume { meta, data: vec![0.0; n] }
    }

    pub fn new(meta: VolumeMeta, data: Vec<f64>) -> Result<Volume> {
        meta.validate()?;
        if data.len() != meta.n_voxels() {
            return Err(Error::shape(
                "volume::new",
                format!("dims {:?} need {} voxels, got {}", meta.dims, meta.n_voxels(), data.len()),
            ));
        }
        Ok(Volume { meta, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.meta.dims
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        let [nx, ny, _] = self.meta.dims;
        (z * ny + y) * nx + x
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.idx(x, y, z)]
    }

    pub fn same_grid(&self, other: &Volume, context: &'static str) -> Result<()> {
        if self.meta.dims != other.meta.dims {
            return Err(Error::shape(
                context,
                format!("grid {:?} vs {:?}", self.meta.dims, other.meta.dims),
            ));
        }
        Ok(())
    }

    /// Extracts the axial plane at index `z` (0-based).
    pub fn axial_slice(&self, z: usize) -> Result<Slice2d> {
        let [nx, ny, nz] = self.meta.dims;
        if z >= nz {
            return Err(Error::invalid("volume::axial_slice", format!("slice {z} out of {nz}")));
        }
        let plane = nx * ny;
        Ok(Slice2d { h: ny, w: nx, data: self.data[z * plane..(z + 1) * plane].to_vec() })
    }

    pub fn set_axial_slice(&mut self, z: usize, slice: &Slice2d) -> Result<()> {
        let [nx, ny, nz] = self.meta.dims;
        if z >= nz {
            return Err(Error::invalid("volume::set_axial_slice", format!("slice {z} out of {nz}")));
        }
        if slice.h != ny || slice.w != nx {
            return Err(Error::shape(
                "volume::set_axial_slice",
                format!("slice {}x{} vs plane {ny}x{nx}", slice.h, slice.w),
            ));
        }
        let plane = nx * ny;
        self.data[z * plane..(z + 1) * plane].copy_from_slice(&slice.data);
        Ok(())
    }

    /// Iterator over values where `mask > 0.5`; grids must match.
    pub fn masked_values<'a>(&'a self, mask: &'a Volume) -> impl Iterator<Item = f64> + 'a {
        debug_assert_eq!(self.meta.dims, mask.meta.dims);
        self.data
            .iter()
            .zip(&mask.data)
            .filter(|(_, &m)| m > 0.5)
            .map(|(&v, _)| v)
    }

    pub fn mask_count(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.5).count()
    }
}

/// One 2-d image plane, row-major with `w` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice2d {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Slice2d {
    pub fn zeros(h: usize, w: usize) -> Slice2d {
        Slice2d { h, w, data: vec![0.0; h * w] }
    }

    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Slice2d> {
        if data.len() != h * w {
            return Err(Error::shape("slice2d::new", format!("{h}x{w} needs {} values, got {}", h * w, data.len())));
        }
        Ok(Slice2d { h, w, data })
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.w + col]
    }

    /// Lifts the plane into a `[1, 1, h, w]` tensor for the network.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, 1, self.h, self.w], self.data.clone()).expect("consistent slice layout")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Slice2d> {
        let [n, c, h, w] = t.dims4()?;
        if n != 1 || c != 1 {
            return Err(Error::shape("slice2d::from_tensor", format!("expected [1,1,h,w], got {:?}", t.shape())));
        }
        Ok(Slice2d { h, w, data: t.data().to_vec() })
    }
}
