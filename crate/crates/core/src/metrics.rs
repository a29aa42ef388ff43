//! Evaluation metrics: ROI-based SNR, masked MSE/PSNR against ground
//! truth, improvement percentages, a paired t-test with a numerically
//! integrated p-value, and the CSV report writer.

use crate::error::{Error, Result};
use crate::volume::Volume;
use std::io::Write;
use std::path::Path;

/// SNR as the GM-ROI mean over the WM-ROI sample standard deviation.
pub fn compute_snr(cbf: &Volume, gm_roi: &Volume, wm_roi: &Volume) -> Result<f64> {
    cbf.same_grid(gm_roi, "metrics::snr")?;
    cbf.same_grid(wm_roi, "metrics::snr")?;
    let gm: Vec<f64> = cbf.masked_values(gm_roi).collect();
    let wm: Vec<f64> = cbf.masked_values(wm_roi).collect();
    if gm.is_empty() {
        return Err(Error::invalid("metrics::snr", "gm roi is empty"));
    }
    if wm.len() < 2 {
        return Err(Error::invalid("metrics::snr", format!("wm roi has {} voxels, sample std needs at least 2", wm.len())));
    }
    let gm_mean = gm.iter().sum::<f64>() / gm.len() as f64;
    let wm_std = sample_std(&wm);
    if wm_std <= 0.0 {
        return Err(Error::invalid("metrics::snr", "wm roi has zero variance, SNR undefined"));
    }
    Ok(gm_mean / wm_std)
}

/// Sample (n-1) standard deviation.
pub fn sample_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Mean over a masked ROI; helper shared by the report assembly.
pub fn roi_mean(vol: &Volume, roi: &Volume) -> Result<f64> {
    vol.same_grid(roi, "metrics::roi_mean")?;
    let vals: Vec<f64> = vol.masked_values(roi).collect();
    if vals.is_empty() {
        return Err(Error::invalid("metrics::roi_mean", "roi is empty"));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Masked MSE and PSNR. `peak <= 0` selects the default peak: the masked
/// maximum of the truth volume. A zero MSE yields infinite PSNR.
pub fn compute_mse_psnr(cbf: &Volume, truth: &Volume, mask: &Volume, peak: f64) -> Result<(f64, f64)> {
    cbf.same_grid(truth, "metrics::mse")?;
    cbf.same_grid(mask, "metrics::mse")?;
    if !peak.is_finite() {
        return Err(Error::invalid("metrics::mse", format!("peak {peak} must be finite")));
    }
    let mut sq = 0.0;
    let mut n = 0usize;
    let mut truth_max = f64::NEG_INFINITY;
    for i in 0..cbf.data.len() {
        if mask.data[i] > 0.5 {
            let d = cbf.data[i] - truth.data[i];
            sq += d * d;
            truth_max = truth_max.max(truth.data[i]);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("metrics::mse", "mask is empty"));
    }
    let mse = sq / n as f64;
    let peak = if peak > 0.0 { peak } else { truth_max };
    if peak <= 0.0 {
        return Err(Error::invalid("metrics::mse", format!("derived peak {peak} is not positive")));
    }
    let psnr = if mse == 0.0 { f64::INFINITY } else { 10.0 * (peak * peak / mse).log10() };
    Ok((mse, psnr))
}

/// Relative SNR change in percent.
pub fn snr_improvement(snr_after: f64, snr_before: f64) -> Result<f64> {
    if !(snr_before.is_finite() && snr_before > 0.0) {
        return Err(Error::invalid("metrics::improvement", format!("baseline SNR {snr_before} must be positive")));
    }
    Ok(100.0 * (snr_after - snr_before) / snr_before)
}

/// Two-sided paired t-test. Returns (t, p). The p-value integrates the
/// Student t density with n-1 degrees of freedom numerically; no special
/// functions involved.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::shape("metrics::ttest", format!("lists differ in length: {} vs {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 3 {
        return Err(Error::invalid("metrics::ttest", format!("paired test needs n >= 3, got {n}")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let sd = sample_std(&d);
    if sd == 0.0 {
        return Err(Error::invalid("metrics::ttest", "zero variance in the paired differences"));
    }
    let t = mean / (sd / (n as f64).sqrt());
    let p = t_two_sided_p(t, (n - 1) as f64)?;
    Ok((t, p))
}

/// Unnormalized Student t density: (1 + x^2/nu)^(-(nu+1)/2). Working with
/// the unnormalized form and taking a ratio of integrals sidesteps the
/// gamma-function normalization constant entirely.
fn t_density_unnorm(x: f64, nu: f64) -> f64 {
    (1.0 + x * x / nu).powf(-(nu + 1.0) / 2.0)
}

/// Adaptive Simpson integration to a given absolute tolerance.
fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(f: &impl Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        ((b - a) / 6.0 * (fa + 4.0 * fm + fb), m, fm)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &impl Fn(f64) -> f64,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        whole: f64,
        m: f64,
        fm: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let (left, lm, flm) = simpson(f, a, fa, m, fm);
        let (right, rm, frm) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, fa, m, fm, left, lm, flm, tol / 2.0, depth - 1)
                + recurse(f, m, fm, b, fb, right, rm, frm, tol / 2.0, depth - 1)
        }
    }
    let fa = f(a);
    let fb = f(b);
    let (whole, m, fm) = simpson(f, a, fa, b, fb);
    recurse(f, a, fa, b, fb, whole, m, fm, tol, 48)
}

/// Two-sided p-value for Student's t. p = 2 * tail / total where both the
/// tail mass and the total mass use the unnormalized density.
fn t_two_sided_p(t: f64, nu: f64) -> Result<f64> {
    if !(nu >= 1.0 && nu.is_finite()) {
        return Err(Error::invalid("metrics::ttest", format!("degrees of freedom {nu} must be >= 1")));
    }
    if !t.is_finite() {
        return Err(Error::non_finite("metrics::ttest", format!("t statistic {t}")));
    }
    let ta = t.abs();
    if ta == 0.0 {
        return Ok(1.0);
    }
    let f = |x: f64| t_density_unnorm(x, nu);

    // The density is even, so total = 2 * integral over [0, T] for a cutoff
    // T where the remaining tail is negligible. For x >= T the density is
    // bounded by (x^2/nu)^(-(nu+1)/2), whose integral from T is
    // nu^((nu+1)/2) * T^(-nu) / nu; double T until that bound is tiny.
    let mut cutoff = (10.0f64).max(2.0 * ta);
    loop {
        let bound = nu.powf((nu + 1.0) / 2.0) * cutoff.powf(-nu) / nu;
        if bound < 1e-12 {
            break;
        }
        cutoff *= 2.0;
        if cutoff > 1e300 {
            return Err(Error::invalid("metrics::ttest", "tail cutoff search diverged"));
        }
    }

    let tol = 1e-10;
    let total_half = adaptive_simpson(&f, 0.0, cutoff, tol);
    let p = if ta >= cutoff {
        0.0
    } else {
        let tail = adaptive_simpson(&f, ta, cutoff, tol);
        (tail / total_half).clamp(0.0, 1.0)
    };
    Ok(p)
}

/// One evaluation record, one CSV row.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub subject: usize,
    pub method: String,
    pub snr: f64,
    pub mse: f64,
    pub psnr: f64,
    pub gm_mean: f64,
    pub wm_std: f64,
}

pub const METRICS_CSV_HEADER: &str = "subject,method,snr,mse,psnr,gm_mean,wm_std";

/// Formats a value with 6 significant digits; infinities become the
/// literal `inf` so downstream tools see a consistent sentinel.
pub fn fmt_sig(v: f64) -> String {
    if v.is_infinite() {
        return if v > 0.0 { "inf".to_owned() } else { "-inf".to_owned() };
    }
    if v.is_nan() {
        return "nan".to_owned();
    }
    if v == 0.0 {
        return "0.00000".to_owned();
    }
    let exp = v.abs().log10().floor() as i32;
    let decimals = (5 - exp).max(0) as usize;
    format!("{v:.decimals$}")
}

/// Writes the metrics report sorted by (subject, method).
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut sorted: Vec<&MetricsRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.subject.cmp(&b.subject).then_with(|| a.method.cmp(&b.method)));
    let mut out = String::new();
    out.push_str(METRICS_CSV_HEADER);
    out.push('\n');
    for r in sorted {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.subject,
            r.method,
            fmt_sig(r.snr),
            fmt_sig(r.mse),
            fmt_sig(r.psnr),
            fmt_sig(r.gm_mean),
            fmt_sig(r.wm_std)
        ));
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::VolumeMeta;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};
    use tempfile::TempDir;

    fn vol(dims: [usize; 3], data: Vec<f64>) -> Volume {
        Volume::new(VolumeMeta::new(dims, [2.0, 2.0, 2.0]), data).unwrap()
    }

    #[test]
    fn snr_hand_worked_example() {
        // GM all 60, WM {18, 22}: sample std = sqrt(8) = 2.828427,
        // SNR = 60 / 2.828427 = 21.2132.
        let dims = [4, 1, 1];
        let cbf = vol(dims, vec![60.0, 60.0, 18.0, 22.0]);
        let gm = vol(dims, vec![1.0, 1.0, 0.0, 0.0]);
        let wm = vol(dims, vec![0.0, 0.0, 1.0, 1.0]);
        let snr = compute_snr(&cbf, &gm, &wm).unwrap();
        assert!((snr - 21.2132).abs() < 1e-4, "{snr}");
    }

    #[test]
    fn snr_scale_invariant_not_shift_invariant() {
        let dims = [4, 1, 1];
        let cbf = vol(dims, vec![60.0, 58.0, 18.0, 22.0]);
        let gm = vol(dims, vec![1.0, 1.0, 0.0, 0.0]);
        let wm = vol(dims, vec![0.0, 0.0, 1.0, 1.0]);
        let base = compute_snr(&cbf, &gm, &wm).unwrap();
        let scaled = vol(dims, cbf.data.iter().map(|&v| v * 3.7).collect());
        let s = compute_snr(&scaled, &gm, &wm).unwrap();
        assert!((s - base).abs() / base < 1e-12);
        let shifted = vol(dims, cbf.data.iter().map(|&v| v + 10.0).collect());
        let sh = compute_snr(&shifted, &gm, &wm).unwrap();
        assert!((sh - base).abs() > 1e-6, "additive shift should change SNR");
    }

    #[test]
    fn snr_monte_carlo_against_designed_level() {
        // GM fixed at 60, WM = noise with sigma 5: SNR concentrates
        // around 12.
        let dims = [10, 10, 2];
        let n = 200;
        let mut gm_mask = vec![0.0; n];
        let mut wm_mask = vec![0.0; n];
        for i in 0..100 {
            gm_mask[i] = 1.0;
            wm_mask[100 + i] = 1.0;
        }
        let gm = vol(dims, gm_mask);
        let wm = vol(dims, wm_mask);
        let mut snrs = Vec::new();
        for seed in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Normal::new(0.0, 5.0).unwrap();
            let mut data = vec![60.0; n];
            for d in data.iter_mut().skip(100) {
                *d = 20.0 + noise.sample(&mut rng);
            }
            snrs.push(compute_snr(&vol(dims, data), &gm, &wm).unwrap());
        }
        let mean = snrs.iter().sum::<f64>() / snrs.len() as f64;
        assert!((mean - 12.0).abs() / 12.0 < 0.10, "mean SNR {mean}");
    }

    #[test]
    fn snr_rejects_degenerate_rois() {
        let dims = [4, 1, 1];
        let cbf = vol(dims, vec![60.0, 60.0, 18.0, 22.0]);
        let empty = vol(dims, vec![0.0; 4]);
        let gm = vol(dims, vec![1.0, 1.0, 0.0, 0.0]);
        let one_voxel = vol(dims, vec![0.0, 0.0, 1.0, 0.0]);
        assert!(compute_snr(&cbf, &empty, &gm).is_err());
        assert!(compute_snr(&cbf, &gm, &one_voxel).is_err());
        let flat = vol(dims, vec![60.0, 60.0, 20.0, 20.0]);
        let wm = vol(dims, vec![0.0, 0.0, 1.0, 1.0]);
        assert!(compute_snr(&flat, &gm, &wm).is_err(), "zero wm variance must be rejected");
    }

    #[test]
    fn mse_psnr_basics() {
        let dims = [3, 1, 1];
        let truth = vol(dims, vec![10.0, 20.0, 30.0]);
        let mask = vol(dims, vec![1.0, 1.0, 1.0]);

        let (mse, psnr) = compute_mse_psnr(&truth, &truth, &mask, 0.0).unwrap();
        assert_eq!(mse, 0.0);
        assert!(psnr.is_infinite() && psnr > 0.0);

        let off = vol(dims, vec![13.0, 23.0, 33.0]);
        let (mse, psnr) = compute_mse_psnr(&off, &truth, &mask, 0.0).unwrap();
        assert!((mse - 9.0).abs() < 1e-12);
        // Default peak is the masked truth max, 30.
        let expected = 10.0 * (30.0f64 * 30.0 / 9.0).log10();
        assert!((psnr - expected).abs() < 1e-12);

        // Explicit peak overrides the default.
        let (_, psnr60) = compute_mse_psnr(&off, &truth, &mask, 60.0).unwrap();
        assert!((psnr60 - 10.0 * (3600.0f64 / 9.0).log10()).abs() < 1e-12);

        let empty = vol(dims, vec![0.0; 3]);
        assert!(compute_mse_psnr(&off, &truth, &empty, 0.0).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise_level() {
        let dims = [8, 8, 4];
        let n = 256;
        let truth = vol(dims, vec![50.0; n]);
        let mask = vol(dims, vec![1.0; n]);
        let mut last_psnr = f64::INFINITY;
        for sigma in [5.0, 10.0, 20.0] {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let noise = Normal::new(0.0, sigma).unwrap();
            let noisy = vol(dims, truth.data.iter().map(|&v| v + noise.sample(&mut rng)).collect());
            let (_, psnr) = compute_mse_psnr(&noisy, &truth, &mask, 0.0).unwrap();
            assert!(psnr < last_psnr, "psnr {psnr} did not decrease at sigma {sigma}");
            last_psnr = psnr;
        }
    }

    #[test]
    fn improvement_percentages() {
        assert!((snr_improvement(1.386, 1.0).unwrap() - 38.6).abs() < 1e-9);
        assert_eq!(snr_improvement(5.0, 5.0).unwrap(), 0.0);
        assert_eq!(snr_improvement(10.0, 5.0).unwrap(), 100.0);
        assert!(snr_improvement(1.0, 0.0).is_err());
        assert!(snr_improvement(1.0, -2.0).is_err());
    }

    #[test]
    fn t_test_symmetric_differences_give_p_one() {
        let a = [1.0, 0.0, 1.0, 0.0];
        let b = [0.0, 1.0, 0.0, 1.0];
        let (t, p) = paired_t_test(&a, &b).unwrap();
        assert_eq!(t, 0.0);
        assert_eq!(p, 1.0);
    }

    #[test]
    fn t_test_degenerate_inputs_rejected() {
        assert!(paired_t_test(&[1.0, 2.0], &[0.0, 1.0]).is_err());
        let a = [3.0, 4.0, 5.0];
        let b = [1.0, 2.0, 3.0];
        assert!(paired_t_test(&a, &b).is_err(), "constant difference has zero variance");
        assert!(paired_t_test(&[1.0, 2.0, 3.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn t_test_antisymmetry() {
        let a = [5.1, 6.2, 4.8, 5.9, 6.4];
        let b = [4.9, 5.8, 5.1, 5.2, 6.0];
        let (t_ab, p_ab) = paired_t_test(&a, &b).unwrap();
        let (t_ba, p_ba) = paired_t_test(&b, &a).unwrap();
        assert!((t_ab + t_ba).abs() < 1e-12);
        assert!((p_ab - p_ba).abs() < 1e-12);
    }

    #[test]
    fn t_test_matches_high_resolution_quadrature_oracle() {
        // Seeded n=10 case; oracle integrates the same unnormalized density
        // with plain composite Simpson at a fixed fine resolution, written
        // independently of the adaptive routine above.
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let a: Vec<f64> = (0..10).map(|i| 10.0 + 0.4 * i as f64 + noise.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..10).map(|i| 9.2 + 0.4 * i as f64 + noise.sample(&mut rng)).collect();
        let (t, p) = paired_t_test(&a, &b).unwrap();

        let nu = 9.0;
        let dens = |x: f64| (1.0 + x * x / nu).powf(-(nu + 1.0) / 2.0);
        let simpson_fixed = |lo: f64, hi: f64, steps: usize| {
            // steps must be even.
            let h = (hi - lo) / steps as f64;
            let mut acc = dens(lo) + dens(hi);
            for k in 1..steps {
                let w = if k % 2 == 1 { 4.0 } else { 2.0 };
                acc += w * dens(lo + k as f64 * h);
            }
            acc * h / 3.0
        };
        let cutoff = 400.0;
        let total = simpson_fixed(0.0, cutoff, 4_000_000);
        let tail = simpson_fixed(t.abs(), cutoff, 4_000_000);
        let p_oracle = tail / total;
        assert!((p - p_oracle).abs() < 1e-6, "p {p} vs oracle {p_oracle} (t = {t})");
        assert!(p > 0.0 && p < 1.0);
    }

    #[test]
    fn fmt_sig_six_significant_digits() {
        assert_eq!(fmt_sig(21.213203), "21.2132");
        assert_eq!(fmt_sig(0.00123456), "0.00123456");
        assert_eq!(fmt_sig(123456.78), "123457");
        assert_eq!(fmt_sig(-3.0), "-3.00000");
        assert_eq!(fmt_sig(f64::INFINITY), "inf");
        assert_eq!(fmt_sig(0.0), "0.00000");
    }

    #[test]
    fn csv_rows_sorted_and_parseable() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("metrics.csv");
        let rows = vec![
            MetricsRow { subject: 2, method: "cnn".into(), snr: 9.5, mse: 1.25, psnr: 30.0, gm_mean: 58.0, wm_std: 6.1 },
            MetricsRow { subject: 1, method: "raw".into(), snr: 4.5, mse: 9.0, psnr: 20.0, gm_mean: 60.0, wm_std: 13.3 },
            MetricsRow { subject: 1, method: "cnn".into(), snr: 8.0, mse: 2.0, psnr: 28.0, gm_mean: 59.0, wm_std: 7.4 },
            MetricsRow { subject: 2, method: "raw".into(), snr: 4.0, mse: 10.0, psnr: 19.0, gm_mean: 61.0, wm_std: 15.2 },
        ];
        write_metrics_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], METRICS_CSV_HEADER);
        assert_eq!(lines.len(), 5);
        // Sorted by subject then method.
        assert!(lines[1].starts_with("1,cnn,"));
        assert!(lines[2].starts_with("1,raw,"));
        assert!(lines[3].starts_with("2,cnn,"));
        assert!(lines[4].starts_with("2,raw,"));
        // Values survive a parse round trip at 6 significant digits.
        let field: f64 = lines[1].split(',').nth(2).unwrap().parse().unwrap();
        assert!((field - 8.0).abs() < 1e-5);

        write_metrics_csv(&path, &[]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.trim_end(), METRICS_CSV_HEADER);
    }

    #[test]
    fn csv_infinite_psnr_sentinel() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("inf.csv");
        let rows = vec![MetricsRow {
            subject: 0,
            method: "exact".into(),
            snr: 10.0,
            mse: 0.0,
            psnr: f64::INFINITY,
            gm_mean: 60.0,
            wm_std: 6.0,
        }];
        write_metrics_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().nth(1).unwrap().contains(",inf,"), "{text}");
    }
}
