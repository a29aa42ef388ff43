//! Synthetic ASL phantom subjects: concentric smoothed ellipsoids standing
//! in for gray and white matter, with a noisy CBF repetition series and a
//! known fraction of deliberately corrupted volumes.
//!
//! Everything is driven by a single master seed. A subject's geometry and
//! its noise series draw from separate seeded streams, so regenerating the
//! series never perturbs the anatomy.

use crate::error::{Error, Result};
use crate::preprocess::gaussian_smooth;
use crate::seed::{split_seed, STREAM_GEOMETRY, STREAM_SERIES};
use crate::volume::Volume;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub voxel_mm: [f64; 3],
    /// True gray-matter perfusion in ml/100g/min.
    pub gm_cbf: f64,
    /// True white-matter perfusion in ml/100g/min.
    pub wm_cbf: f64,
    /// Per-repetition noise standard deviation, CBF units.
    pub noise_sigma: f64,
    /// Partial-volume simulation: the binary tissue maps are blurred by
    /// this FWHM before use.
    pub boundary_fwhm_mm: f64,
    /// Probability that a repetition is corrupted.
    pub outlier_prob: f64,
    /// Corrupted repetitions get noise_sigma scaled by this factor plus a
    /// global additive offset of comparable size.
    pub outlier_amp: f64,
    /// Relative per-subject variation of ellipsoid axes and CBF levels.
    pub jitter: f64,
    /// Outer (gray matter) ellipsoid semi-axes as a fraction of the grid
    /// half-extent per axis.
    pub gm_outer_frac: f64,
    /// Inner (white matter) ellipsoid semi-axes, same convention.
    pub wm_core_frac: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> PhantomSpec {
        PhantomSpec {
            dims: [91, 109, 91],
            voxel_mm: [2.0, 2.0, 2.0],
            gm_cbf: 60.0,
            wm_cbf: 20.0,
            noise_sigma: 15.0,
            boundary_fwhm_mm: 4.0,
            outlier_prob: 0.05,
            outlier_amp: 6.0,
            jitter: 0.10,
            gm_outer_frac: 0.82,
            wm_core_frac: 0.55,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 8) {
            return Err(Error::invalid("phantom", format!("grid {:?} too small, need at least 8 voxels per axis", self.dims)));
        }
        if self.voxel_mm.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
            return Err(Error::invalid("phantom", format!("voxel size {:?} must be positive", self.voxel_mm)));
        }
        if !(self.gm_cbf.is_finite() && self.wm_cbf.is_finite() && self.gm_cbf > self.wm_cbf && self.wm_cbf > 0.0) {
            return Err(Error::invalid("phantom", format!("need gm_cbf > wm_cbf > 0, got {} and {}", self.gm_cbf, self.wm_cbf)));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::invalid("phantom", format!("noise sigma {} must be >= 0", self.noise_sigma)));
        }
        if !(self.boundary_fwhm_mm.is_finite() && self.boundary_fwhm_mm >= 0.0) {
            return Err(Error::invalid("phantom", format!("boundary fwhm {} must be >= 0", self.boundary_fwhm_mm)));
        }
        if !(0.0..=1.0).contains(&self.outlier_prob) {
            return Err(Error::invalid("phantom", format!("outlier_prob {} outside [0, 1]", self.outlier_prob)));
        }
        if !(self.outlier_amp.is_finite() && self.outlier_amp >= 1.0) {
            return Err(Error::invalid("phantom", format!("outlier_amp {} must be >= 1", self.outlier_amp)));
        }
        if !(0.0..0.5).contains(&self.jitter) {
            return Err(Error::invalid("phantom", format!("jitter {} outside [0, 0.5)", self.jitter)));
        }
        let (g, w) = (self.gm_outer_frac, self.wm_core_frac);
        if !(g > 0.0 && g < 1.0 && w > 0.0 && w < g) {
            return Err(Error::invalid("phantom", format!("need 0 < wm_core_frac < gm_outer_frac < 1, got {w} and {g}")));
        }
        Ok(())
    }
}

/// One generated subject: tissue probability maps, noiseless truth, masks,
/// and the per-subject seed everything else derives from.
#[derive(Debug, Clone)]
pub struct PhantomSubject {
    pub id: usize,
    pub seed: u64,
    pub gm_prob: Volume,
    pub wm_prob: Volume,
    pub truth_cbf: Volume,
    pub brain_mask: Volume,
    pub gm_roi: Volume,
    pub wm_roi: Volume,
    /// Jittered per-subject perfusion levels actually used for the truth.
    pub gm_cbf: f64,
    pub wm_cbf: f64,
}

/// Probability threshold above which a voxel counts as brain at all.
pub const BRAIN_MASK_THRESH: f64 = 0.01;
/// Probability threshold for the "pure tissue" evaluation ROIs.
pub const ROI_PROB_THRESH: f64 = 0.9;

/// Builds the anatomy for one subject. Deterministic in (spec.seed, id).
pub fn generate_phantom(spec: &PhantomSpec, subject_id: usize) -> Result<PhantomSubject> {
    spec.validate()?;
    let subject_seed = split_seed(spec.seed, subject_id as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(subject_seed, STREAM_GEOMETRY));
    let mut jittered = |base: f64| base * (1.0 + spec.jitter * (2.0 * rng.gen::<f64>() - 1.0));

    // Draw order is part of the format: outer axes, core axes, CBF levels.
    let outer: Vec<f64> = (0..3)
        .map(|a| jittered(spec.gm_outer_frac) * (spec.dims[a] as f64 - 1.0) / 2.0)
        .collect();
    let core: Vec<f64> = (0..3)
        .map(|a| jittered(spec.wm_core_frac) * (spec.dims[a] as f64 - 1.0) / 2.0)
        .collect();
    let gm_cbf = jittered(spec.gm_cbf);
    let wm_cbf = jittered(spec.wm_cbf);

    let center: Vec<f64> = spec.dims.iter().map(|&d| (d as f64 - 1.0) / 2.0).collect();
    let mut gm_bin = Volume::zeros(spec.dims, spec.voxel_mm);
    let mut wm_bin = Volume::zeros(spec.dims, spec.voxel_mm);
    for z in 0..spec.dims[2] {
        for y in 0..spec.dims[1] {
            for x in 0..spec.dims[0] {
                let r = |p: usize, c: usize, ax: &[f64]| {
                    let d = (p as f64 - center[c]) / ax[c];
                    d * d
                };
                let r_outer = r(x, 0, &outer) + r(y, 1, &outer) + r(z, 2, &outer);
                let r_core = r(x, 0, &core) + r(y, 1, &core) + r(z, 2, &core);
                let i = gm_bin.idx(x, y, z);
                if r_core <= 1.0 {
                    wm_bin.data[i] = 1.0;
                } else if r_outer <= 1.0 {
                    gm_bin.data[i] = 1.0;
                }
            }
        }
    }

    let gm_prob = gaussian_smooth(&gm_bin, spec.boundary_fwhm_mm)?;
    let wm_prob = gaussian_smooth(&wm_bin, spec.boundary_fwhm_mm)?;

    let n = gm_prob.data.len();
    let mut truth = Volume::zeros(spec.dims, spec.voxel_mm);
    let mut brain = Volume::zeros(spec.dims, spec.voxel_mm);
    let mut gm_roi = Volume::zeros(spec.dims, spec.voxel_mm);
    let mut wm_roi = Volume::zeros(spec.dims, spec.voxel_mm);
    for i in 0..n {
        let g = gm_prob.data[i];
        let w = wm_prob.data[i];
        truth.data[i] = gm_cbf * g + wm_cbf * w;
        if g + w > BRAIN_MASK_THRESH {
            brain.data[i] = 1.0;
        }
        if g > ROI_PROB_THRESH {
            gm_roi.data[i] = 1.0;
        }
        if w > ROI_PROB_THRESH {
            wm_roi.data[i] = 1.0;
        }
    }

    if gm_roi.mask_count() == 0 || wm_roi.mask_count() == 0 {
        return Err(Error::invalid(
            "phantom",
            format!(
                "degenerate geometry: pure-tissue ROIs are empty (gm {}, wm {} voxels); the shell is too thin for the boundary blur",
                gm_roi.mask_count(),
                wm_roi.mask_count()
            ),
        ));
    }

    Ok(PhantomSubject {
        id: subject_id,
        seed: subject_seed,
        gm_prob,
        wm_prob,
        truth_cbf: truth,
        brain_mask: brain,
        gm_roi,
        wm_roi,
        gm_cbf,
        wm_cbf,
    })
}

/// Simulates `n_pairs` pair-subtracted CBF repetitions for a subject.
/// Returns the volumes plus the indices of corrupted repetitions.
pub fn simulate_asl_series(
    subject: &PhantomSubject,
    n_pairs: usize,
    spec: &PhantomSpec,
) -> Result<(Vec<Volume>, Vec<usize>)> {
    spec.validate()?;
    if n_pairs == 0 {
        return Err(Error::invalid("phantom::series", "n_pairs must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(subject.seed, STREAM_SERIES));
    let unit = Normal::new(0.0, 1.0).map_err(|e| Error::invalid("phantom::series", e.to_string()))?;

    let mut series = Vec::with_capacity(n_pairs);
    let mut outliers = Vec::new();
    for rep in 0..n_pairs {
        let corrupted = rng.gen::<f64>() < spec.outlier_prob;
        let (sigma, offset) = if corrupted {
            outliers.push(rep);
            let mag = spec.noise_sigma * spec.outlier_amp * rng.gen_range(0.5..1.5);
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            (spec.noise_sigma * spec.outlier_amp, sign * mag)
        } else {
            (spec.noise_sigma, 0.0)
        };
        let mut vol = Volume::zeros(subject.truth_cbf.meta.dims, subject.truth_cbf.meta.voxel_mm);
        for i in 0..vol.data.len() {
            if subject.brain_mask.data[i] > 0.5 {
                vol.data[i] = subject.truth_cbf.data[i] + sigma * unit.sample(&mut rng) + offset;
            }
        }
        series.push(vol);
    }
    Ok((series, outliers))
}
