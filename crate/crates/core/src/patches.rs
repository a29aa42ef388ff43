//! Training patch extraction: axial slice selection, dense 2D patch
//! cropping, and assembly of input/reference/GM-prior triplets.

use crate::error::{Error, Result};
use crate::phantom::PhantomSubject;
use crate::preprocess::{adaptive_outlier_clean, gaussian_smooth, mean_cbf, CleanParams};
use crate::tensor::Tensor;
use crate::volume::{Slice2d, Volume};

/// Axial slice selection, 1-based and inclusive on both ends.
#[derive(Debug, Clone)]
pub struct SliceRange {
    pub first: usize,
    pub last: usize,
    pub step: usize,
}

impl Default for SliceRange {
    fn default() -> SliceRange {
        SliceRange { first: 36, last: 60, step: 3 }
    }
}

impl SliceRange {
    pub fn validate(&self) -> Result<()> {
        if self.first == 0 {
            return Err(Error::invalid("patches::slices", "slice numbering is 1-based, first must be >= 1"));
        }
        if self.step == 0 {
            return Err(Error::invalid("patches::slices", "step must be >= 1"));
        }
        if self.last < self.first {
            return Err(Error::invalid("patches::slices", format!("last {} before first {}", self.last, self.first)));
        }
        Ok(())
    }
}

/// Resolves the 1-based range into 0-based slice indices for a volume,
/// erroring when the volume is too short rather than silently clipping.
pub fn select_training_slices(vol: &Volume, range: &SliceRange) -> Result<Vec<usize>> {
    range.validate()?;
    let nz = vol.meta.dims[2];
    // Require one slice beyond the last selected so the selection is valid
    // under both 0- and 1-based readings of the slice labels (the default
    // 36..60 range therefore needs a 61-slice volume).
    if nz <= range.last {
        return Err(Error::invalid(
            "patches::slices",
            format!("volume has {nz} axial slices, selection through slice {} needs at least {}", range.last, range.last + 1),
        ));
    }
    Ok((range.first..=range.last).step_by(range.step).map(|s| s - 1).collect())
}

/// Number of patch anchor positions per axis: floor((len - size)/stride) + 1.
pub fn patch_grid(h: usize, w: usize, size: usize, stride: usize) -> Result<(usize, usize)> {
    if size == 0 || stride == 0 {
        return Err(Error::invalid("patches::grid", "size and stride must be >= 1"));
    }
    if h < size || w < size {
        return Err(Error::invalid(
            "patches::grid",
            format!("slice {h}x{w} smaller than patch size {size}"),
        ));
    }
    Ok(((h - size) / stride + 1, (w - size) / stride + 1))
}

/// Where a patch came from, for provenance and debugging.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchOrigin {
    pub subject: usize,
    /// 0-based axial slice index.
    pub slice: usize,
    pub row: usize,
    pub col: usize,
}

/// A flat store of aligned (input, reference, gm prior) patch triplets.
#[derive(Debug, Clone)]
pub struct PatchSet {
    pub size: usize,
    pub stride: usize,
    inputs: Vec<f64>,
    targets: Vec<f64>,
    gm: Vec<f64>,
    origins: Vec<PatchOrigin>,
    /// Provenance guard: the network input must stay unsmoothed. Extraction
    /// sets this false and nothing in the pipeline may flip it.
    pub input_smoothed: bool,
}

impl PatchSet {
    pub fn empty(size: usize, stride: usize) -> PatchSet {
        PatchSet { size, stride, inputs: Vec::new(), targets: Vec::new(), gm: Vec::new(), origins: Vec::new(), input_smoothed: false }
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn origins(&self) -> &[PatchOrigin] {
        &self.origins
    }

    pub fn extend(&mut self, other: PatchSet) -> Result<()> {
        if other.size != self.size || other.stride != self.stride {
            return Err(Error::invalid(
                "patches::extend",
                format!("patch geometry mismatch: {}x{} stride {} vs {}x{} stride {}", self.size, self.size, self.stride, other.size, other.size, other.stride),
            ));
        }
        if other.input_smoothed {
            return Err(Error::invalid("patches::extend", "refusing to merge patches with smoothed inputs"));
        }
        self.inputs.extend(other.inputs);
        self.targets.extend(other.targets);
        self.gm.extend(other.gm);
        self.origins.extend(other.origins);
        Ok(())
    }

    /// Assembles [B,1,size,size] batch tensors (input, reference, gm prior)
    /// for the given patch indices.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor, Tensor)> {
        if indices.is_empty() {
            return Err(Error::invalid("patches::batch", "empty index list"));
        }
        let pe = self.size * self.size;
        let mut y = Vec::with_capacity(indices.len() * pe);
        let mut x = Vec::with_capacity(indices.len() * pe);
        let mut g = Vec::with_capacity(indices.len() * pe);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid("patches::batch", format!("patch index {i} out of range ({} patches)", self.len())));
            }
            y.extend_from_slice(&self.inputs[i * pe..(i + 1) * pe]);
            x.extend_from_slice(&self.targets[i * pe..(i + 1) * pe]);
            g.extend_from_slice(&self.gm[i * pe..(i + 1) * pe]);
        }
        let shape = [indices.len(), 1, self.size, self.size];
        Ok((
            Tensor::from_vec(&shape, y)?,
            Tensor::from_vec(&shape, x)?,
            Tensor::from_vec(&shape, g)?,
        ))
    }
}

/// Crops aligned patches from one slice triplet on a dense stride grid.
pub fn extract_patches(
    input: &Slice2d,
    target: &Slice2d,
    gm: &Slice2d,
    size: usize,
    stride: usize,
    subject: usize,
    slice: usize,
) -> Result<PatchSet> {
    if input.h != target.h || input.w != target.w || input.h != gm.h || input.w != gm.w {
        return Err(Error::shape(
            "patches::extract",
            format!("slice dims differ: input {}x{}, target {}x{}, gm {}x{}", input.h, input.w, target.h, target.w, gm.h, gm.w),
        ));
    }
    let (rows, cols) = patch_grid(input.h, input.w, size, stride)?;
    let mut set = PatchSet::empty(size, stride);
    set.inputs.reserve(rows * cols * size * size);
    set.targets.reserve(rows * cols * size * size);
    set.gm.reserve(rows * cols * size * size);
    for r in 0..rows {
        for c in 0..cols {
            let (top, left) = (r * stride, c * stride);
            for dr in 0..size {
                let base = (top + dr) * input.w + left;
                set.inputs.extend_from_slice(&input.data[base..base + size]);
                set.targets.extend_from_slice(&target.data[base..base + size]);
                set.gm.extend_from_slice(&gm.data[base..base + size]);
            }
            set.origins.push(PatchOrigin { subject, slice, row: top, col: left });
        }
    }
    Ok(set)
}

/// How raw repetition series become training data.
#[derive(Debug, Clone)]
pub struct DataConfig {
    /// Repetitions simulated per subject.
    pub n_pairs: usize,
    /// The network input averages only this many leading repetitions.
    pub input_k: usize,
    /// Smoothing applied to the reference (never to the input).
    pub smooth_fwhm_mm: f64,
    /// The GM prior channel is gm_prob scaled to CBF units by this factor.
    pub gm_scale: f64,
    pub patch_size: usize,
    pub patch_stride: usize,
    pub slices: SliceRange,
    pub clean: CleanParams,
}

impl Default for DataConfig {
    fn default() -> DataConfig {
        DataConfig {
            n_pairs: 40,
            input_k: 10,
            smooth_fwhm_mm: 6.0,
            gm_scale: 60.0,
            patch_size: 16,
            patch_stride: 4,
            slices: SliceRange::default(),
            clean: CleanParams::default(),
        }
    }
}

/// The noisy network input for one subject: mean of the first `input_k`
/// repetitions, deliberately left unsmoothed.
pub fn subject_input_volume(series: &[Volume], cfg: &DataConfig) -> Result<Volume> {
    if series.len() < cfg.input_k {
        return Err(Error::invalid(
            "patches::input",
            format!("series has {} repetitions, input averaging needs {}", series.len(), cfg.input_k),
        ));
    }
    mean_cbf(series, cfg.input_k)
}

/// The training reference for one subject: outlier-clean the full series,
/// average the survivors, then smooth. Returns the volume and the kept
/// repetition indices.
pub fn subject_reference_volume(
    series: &[Volume],
    subject: &PhantomSubject,
    cfg: &DataConfig,
) -> Result<(Volume, Vec<usize>)> {
    let (kept, mean) = adaptive_outlier_clean(series, &subject.brain_mask, &subject.gm_roi, &cfg.clean)?;
    let smoothed = gaussian_smooth(&mean, cfg.smooth_fwhm_mm)?;
    Ok((smoothed, kept))
}

/// All training patches for one subject. Callers that stream subjects from
/// disk can build and merge these one at a time instead of holding every
/// series in memory at once.
pub fn subject_patches(subject: &PhantomSubject, series: &[Volume], cfg: &DataConfig) -> Result<PatchSet> {
    let input = subject_input_volume(series, cfg)?;
    let (reference, _) = subject_reference_volume(series, subject, cfg)?;
    let slices = select_training_slices(&input, &cfg.slices)?;
    let mut set = PatchSet::empty(cfg.patch_size, cfg.patch_stride);
    for z in slices {
        let in_slice = input.axial_slice(z)?;
        let ref_slice = reference.axial_slice(z)?;
        let mut gm_slice = subject.gm_prob.axial_slice(z)?;
        for v in &mut gm_slice.data {
            *v *= cfg.gm_scale;
        }
        let part = extract_patches(&in_slice, &ref_slice, &gm_slice, cfg.patch_size, cfg.patch_stride, subject.id, z)?;
        set.extend(part)?;
    }
    Ok(set)
}

/// Assembles the full training set over subjects and their series. The
/// series slice must align with `subjects` one to one.
pub fn build_training_set(
    subjects: &[PhantomSubject],
    series: &[Vec<Volume>],
    cfg: &DataConfig,
) -> Result<PatchSet> {
    if subjects.is_empty() {
        return Err(Error::invalid("patches::build", "no subjects"));
    }
    if subjects.len() != series.len() {
        return Err(Error::invalid(
            "patches::build",
            format!("{} subjects but {} series", subjects.len(), series.len()),
        ));
    }
    let mut set = PatchSet::empty(cfg.patch_size, cfg.patch_stride);
    for (subject, reps) in subjects.iter().zip(series) {
        set.extend(subject_patches(subject, reps, cfg)?)?;
    }
    Ok(set)
}
