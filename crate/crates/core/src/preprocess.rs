//! Classical CBF preprocessing: pair subtraction, repetition averaging,
//! Gaussian smoothing, and adaptive outlier rejection.

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Conversion between a Gaussian FWHM and its standard deviation.
pub const FWHM_TO_SIGMA: f64 = 2.3548;

/// Scales a median absolute deviation into a robust standard-deviation
/// estimate (the MAD of a normal distribution is 0.6745 sigma). Without it
/// a `mad_k` of 3 would flag several percent of perfectly clean volumes and
/// the iterative loop would grind a healthy series down to `min_keep`.
pub const MAD_SIGMA_SCALE: f64 = 1.4826;

/// Perfusion-weighted difference `(control - label) * scale`. The scale slot
/// carries M0 calibration when quantified CBF units are wanted; pass 1.0 for
/// a plain difference.
pub fn subtract_pairs(control: &Volume, label: &Volume, scale: f64) -> Result<Volume> {
    control.same_grid(label, "preprocess::subtract_pairs")?;
    if !scale.is_finite() {
        return Err(Error::invalid("preprocess::subtract_pairs", format!("scale {scale} must be finite")));
    }
    let data = control
        .data
        .iter()
        .zip(&label.data)
        .map(|(&c, &l)| (c - l) * scale)
        .collect();
    Ok(Volume { meta: control.meta.clone(), data })
}

/// Voxelwise mean of the first `k` repetitions.
pub fn mean_cbf(series: &[Volume], k: usize) -> Result<Volume> {
    if series.is_empty() {
        return Err(Error::invalid("preprocess::mean_cbf", "empty series"));
    }
    if k == 0 || k > series.len() {
        return Err(Error::invalid(
            "preprocess::mean_cbf",
            format!("k = {k} outside [1, {}]", series.len()),
        ));
    }
    let first = &series[0];
    let mut acc = vec![0.0; first.data.len()];
    for vol in &series[..k] {
        vol.same_grid(first, "preprocess::mean_cbf")?;
        for (a, &v) in acc.iter_mut().zip(&vol.data) {
            *a += v;
        }
    }
    let inv = 1.0 / k as f64;
    for a in &mut acc {
        *a *= inv;
    }
    Ok(Volume { meta: first.meta.clone(), data: acc })
}

fn gaussian_kernel(sigma_vox: f64) -> Vec<f64> {
    let radius = (4.0 * sigma_vox).ceil() as usize;
    let mut w = Vec::with_capacity(2 * radius + 1);
    for t in 0..=2 * radius {
        let d = t as f64 - radius as f64;
        w.push((-d * d / (2.0 * sigma_vox * sigma_vox)).exp());
    }
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

fn smooth_axis(data: &mut [f64], len: usize, stride: usize, n_lines: impl Iterator<Item = usize>, kernel: &[f64]) {
    let radius = kernel.len() / 2;
    let mut line = vec![0.0; len];
    for base in n_lines {
        for (i, slot) in line.iter_mut().enumerate() {
            *slot = data[base + i * stride];
        }
        for i in 0..len {
            let j_lo = -(i.min(radius) as isize);
            let j_hi = (len - 1 - i).min(radius) as isize;
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for j in j_lo..=j_hi {
                let w = kernel[(j + radius as isize) as usize];
                acc += w * line[(i as isize + j) as usize];
                wsum += w;
            }
            // Truncated taps are renormalized away at the boundaries, so a
            // constant line stays constant all the way to the edge.
            data[base + i * stride] = acc / wsum;
        }
    }
}

/// Separable Gaussian smoothing with per-axis sigma `fwhm_mm / (2.3548 *
/// voxel_mm)`, kernel truncated at four sigma. `fwhm_mm == 0` returns the
/// input unchanged, bit for bit.
pub fn gaussian_smooth(vol: &Volume, fwhm_mm: f64) -> Result<Volume> {
    if !(fwhm_mm.is_finite() && fwhm_mm >= 0.0) {
        return Err(Error::invalid("preprocess::gaussian_smooth", format!("fwhm {fwhm_mm} must be finite and >= 0")));
    }
    if fwhm_mm == 0.0 {
        return Ok(vol.clone());
    }
    vol.meta.validate()?;
    let [nx, ny, nz] = vol.meta.dims;
    let mut out = vol.clone();

    for axis in 0..3 {
        let sigma = fwhm_mm / (FWHM_TO_SIGMA * vol.meta.voxel_mm[axis]);
        let kernel = gaussian_kernel(sigma);
        if kernel.len() == 1 {
            continue;
        }
        match axis {
            0 => {
                let bases: Vec<usize> = (0..ny * nz).map(|yz| yz * nx).collect();
                smooth_axis(&mut out.data, nx, 1, bases.into_iter(), &kernel);
            }
            1 => {
                let bases: Vec<usize> = (0..nz)
                    .flat_map(|z| (0..nx).map(move |x| z * nx * ny + x))
                    .collect();
                smooth_axis(&mut out.data, ny, nx, bases.into_iter(), &kernel);
            }
            _ => {
                let bases: Vec<usize> = (0..nx * ny).collect();
                smooth_axis(&mut out.data, nz, nx * ny, bases.into_iter(), &kernel);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct CleanParams {
    /// Volumes correlating with the series mean below this are dropped.
    pub corr_thresh: f64,
    /// Volumes whose GM-ROI mean deviates from the median by more than
    /// `mad_k` times the median absolute deviation are dropped.
    pub mad_k: f64,
    /// Never keep fewer volumes than this; 0 means half the series,
    /// rounded up.
    pub min_keep: usize,
}

impl Default for CleanParams {
    fn default() -> CleanParams {
        CleanParams { corr_thresh: 0.7, mad_k: 3.0, min_keep: 0 }
    }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        // A constant volume carries no shape information to disagree with
        // the mean, so it passes the correlation test.
        return 1.0;
    }
    cov / (va * vb).sqrt()
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Iteratively drops repetitions that disagree with the series consensus,
/// either by low spatial correlation with the mean or by an aberrant GM-ROI
/// mean. Returns the sorted kept indices and the mean over them.
pub fn adaptive_outlier_clean(
    series: &[Volume],
    brain_mask: &Volume,
    gm_roi: &Volume,
    params: &CleanParams,
) -> Result<(Vec<usize>, Volume)> {
    if series.len() < 2 {
        return Err(Error::invalid(
            "preprocess::clean",
            format!("need at least 2 repetitions, got {}", series.len()),
        ));
    }
    for vol in series {
        vol.same_grid(&series[0], "preprocess::clean")?;
    }
    brain_mask.same_grid(&series[0], "preprocess::clean")?;
    gm_roi.same_grid(&series[0], "preprocess::clean")?;
    if brain_mask.mask_count() < 2 {
        return Err(Error::invalid("preprocess::clean", "brain mask is empty"));
    }
    if gm_roi.mask_count() == 0 {
        return Err(Error::invalid("preprocess::clean", "gm roi is empty"));
    }
    if !(params.corr_thresh > -1.0 && params.corr_thresh < 1.0) {
        return Err(Error::invalid("preprocess::clean", format!("corr_thresh {} outside (-1, 1)", params.corr_thresh)));
    }
    if params.mad_k <= 0.0 {
        return Err(Error::invalid("preprocess::clean", format!("mad_k {} must be positive", params.mad_k)));
    }

    let n = series.len();
    let min_keep = if params.min_keep == 0 { n.div_ceil(2) } else { params.min_keep.min(n) }.max(2);

    let masked: Vec<Vec<f64>> = series.iter().map(|v| v.masked_values(brain_mask).collect()).collect();
    let gm_means: Vec<f64> = series
        .iter()
        .map(|v| {
            let vals: Vec<f64> = v.masked_values(gm_roi).collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        })
        .collect();

    let mut kept: Vec<usize> = (0..n).collect();
    loop {
        // Mean over currently kept volumes, restricted to the brain mask.
        let mut mean_masked = vec![0.0; masked[0].len()];
        for &i in &kept {
            for (m, &v) in mean_masked.iter_mut().zip(&masked[i]) {
                *m += v;
            }
        }
        let inv = 1.0 / kept.len() as f64;
        for m in &mut mean_masked {
            *m *= inv;
        }

        let mut kept_gm: Vec<f64> = kept.iter().map(|&i| gm_means[i]).collect();
        let med = median(&mut kept_gm);
        let mut devs: Vec<f64> = kept.iter().map(|&i| (gm_means[i] - med).abs()).collect();
        let mad = median(&mut devs);
        let roi_limit = params.mad_k * MAD_SIGMA_SCALE * mad;

        // (index, correlation, roi deviation) for each violator.
        let mut violators: Vec<(usize, f64, f64)> = Vec::new();
        for &i in &kept {
            let corr = pearson(&masked[i], &mean_masked);
            let dev = (gm_means[i] - med).abs();
            if corr < params.corr_thresh || dev > roi_limit {
                violators.push((i, corr, dev));
            }
        }
        if violators.is_empty() {
            break;
        }
        let can_drop = kept.len().saturating_sub(min_keep);
        if can_drop == 0 {
            break;
        }
        if violators.len() > can_drop {
            // Keep the least objectionable violators: rank by correlation
            // ascending, then ROI deviation descending.
            violators.sort_by(|a, b| {
                a.1.partial_cmp(&b.1)
                    .unwrap()
                    .then(b.2.partial_cmp(&a.2).unwrap())
                    .then(a.0.cmp(&b.0))
            });
            violators.truncate(can_drop);
        }
        let drop: std::collections::BTreeSet<usize> = violators.iter().map(|v| v.0).collect();
        kept.retain(|i| !drop.contains(i));
        if kept.len() <= min_keep {
            break;
        }
    }

    let kept_vols: Vec<Volume> = kept.iter().map(|&i| series[i].clone()).collect();
    let mean = mean_cbf(&kept_vols, kept_vols.len())?;
    Ok((kept, mean))
}
