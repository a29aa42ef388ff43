//! The five subcommands: phantom, train, denoise, evaluate, gradcheck.
//!
//! All of them work through the filesystem: `phantom` writes subjects and a
//! manifest into the data directory, the later stages read them back. Every
//! output is refused if it already exists unless `--overwrite` is given, and
//! nothing time-dependent ever reaches a file, so reruns with the same
//! configuration and seed are byte-identical.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use asl_denoise::batchnorm::{bn_backward, bn_forward_train, BnParams};
use asl_denoise::checkpoint::{load_checkpoint, save_checkpoint};
use asl_denoise::conv::{conv2d_backward, conv2d_forward, ConvParams};
use asl_denoise::gradcheck::{gradcheck_with_floor, Probes};
use asl_denoise::loss::{loss_backward, loss_forward};
use asl_denoise::metrics::{
    compute_mse_psnr, compute_snr, paired_t_test, roi_mean, sample_std, snr_improvement,
    write_metrics_csv, MetricsRow,
};
use asl_denoise::model::{build_model, denoise_volume, model_loss_gradcheck, ModelSpec};
use asl_denoise::optim::{train_epoch, AdamState};
use asl_denoise::patches::{subject_patches, PatchSet};
use asl_denoise::phantom::{generate_phantom, simulate_asl_series, PhantomSubject};
use asl_denoise::preprocess::{gaussian_smooth, mean_cbf};
use asl_denoise::relu::{relu_backward, relu_forward};
use asl_denoise::seed::{split_seed, STREAM_INIT, STREAM_SHUFFLE};
use asl_denoise::tensor::Tensor;
use asl_denoise::volume::Volume;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DenoiseScope, RunConfig, VolumeFormat};
use crate::manifest::{Manifest, SubjectEntry, MANIFEST_NAME};
use crate::CliError;

/// Method identifiers used in the metrics CSV and the summary output.
pub const METHOD_RAW: &str = "input_raw";
pub const METHOD_SMOOTH: &str = "input_smooth";
pub const METHOD_REF: &str = "reference";
pub const METHOD_CNN: &str = "cnn";

const MAP_NAMES: [&str; 6] = ["gm_prob", "wm_prob", "truth_cbf", "brain_mask", "gm_roi", "wm_roi"];

fn runtime(e: asl_denoise::Error) -> CliError {
    CliError::Runtime(e.to_string())
}

fn subject_dir_name(id: usize) -> String {
    format!("subject_{id:03}")
}

fn map_file(dir: &Path, name: &str, format: VolumeFormat) -> PathBuf {
    dir.join(format!("{name}.{}", format.extension()))
}

fn rep_file(dir: &Path, rep: usize, format: VolumeFormat) -> PathBuf {
    dir.join(format!("rep_{rep:03}.{}", format.extension()))
}

fn denoised_file(out_dir: &Path, entry: &SubjectEntry, format: VolumeFormat) -> PathBuf {
    out_dir.join("denoised").join(format!("{}.{}", entry.dir, format.extension()))
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path)
        .map_err(|e| CliError::Runtime(format!("cannot create directory {}: {e}", path.display())))
}

fn refuse_overwrite(path: &Path, overwrite: bool) -> Result<(), CliError> {
    if !overwrite && path.exists() {
        return Err(CliError::Usage(format!(
            "refusing to overwrite {}; pass --overwrite to replace it",
            path.display()
        )));
    }
    Ok(())
}

fn read_volume(format: VolumeFormat, path: &Path) -> Result<Volume, CliError> {
    format
        .read(path)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))
}

fn write_volume(format: VolumeFormat, path: &Path, vol: &Volume) -> Result<(), CliError> {
    format
        .write(path, vol)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

/// Rebuilds a subject's anatomy from its files. The volumes are exactly what
/// `phantom` wrote; the perfusion levels come from the manifest.
fn load_subject(data_dir: &Path, entry: &SubjectEntry, format: VolumeFormat) -> Result<PhantomSubject, CliError> {
    let dir = data_dir.join(&entry.dir);
    let mut maps = Vec::with_capacity(MAP_NAMES.len());
    for name in MAP_NAMES {
        maps.push(read_volume(format, &map_file(&dir, name, format))?);
    }
    let mut it = maps.into_iter();
    Ok(PhantomSubject {
        id: entry.id,
        seed: entry.seed,
        gm_prob: it.next().unwrap(),
        wm_prob: it.next().unwrap(),
        truth_cbf: it.next().unwrap(),
        brain_mask: it.next().unwrap(),
        gm_roi: it.next().unwrap(),
        wm_roi: it.next().unwrap(),
        gm_cbf: entry.gm_cbf,
        wm_cbf: entry.wm_cbf,
    })
}

fn load_series(data_dir: &Path, entry: &SubjectEntry, format: VolumeFormat, count: usize) -> Result<Vec<Volume>, CliError> {
    let dir = data_dir.join(&entry.dir);
    let mut series = Vec::with_capacity(count);
    for rep in 0..count {
        series.push(read_volume(format, &rep_file(&dir, rep, format))?);
    }
    Ok(series)
}

pub fn cmd_phantom(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate_common()?;
    if cfg.n_subjects == 0 {
        return Err(CliError::Usage("n_subjects must be at least 1".to_string()));
    }
    let spec = cfg.phantom_spec();
    ensure_dir(&cfg.data_dir)?;
    let manifest_path = cfg.data_dir.join(MANIFEST_NAME);
    refuse_overwrite(&manifest_path, cfg.overwrite)?;
    let dirs: Vec<PathBuf> = (0..cfg.n_subjects).map(|id| cfg.data_dir.join(subject_dir_name(id))).collect();
    for dir in &dirs {
        refuse_overwrite(dir, cfg.overwrite)?;
    }

    let format = cfg.volume_format;
    let mut entries = Vec::with_capacity(cfg.n_subjects);
    for (id, dir) in dirs.iter().enumerate() {
        let subject = generate_phantom(&spec, id).map_err(runtime)?;
        let (series, outliers) = simulate_asl_series(&subject, cfg.n_pairs, &spec).map_err(runtime)?;
        if dir.exists() {
            fs::remove_dir_all(dir)
                .map_err(|e| CliError::Runtime(format!("cannot clear {}: {e}", dir.display())))?;
        }
        ensure_dir(dir)?;
        let maps = [
            &subject.gm_prob,
            &subject.wm_prob,
            &subject.truth_cbf,
            &subject.brain_mask,
            &subject.gm_roi,
            &subject.wm_roi,
        ];
        for (name, vol) in MAP_NAMES.iter().zip(maps) {
            write_volume(format, &map_file(dir, name, format), vol)?;
        }
        for (rep, vol) in series.iter().enumerate() {
            write_volume(format, &rep_file(dir, rep, format), vol)?;
        }
        println!("subject {id:03}: {} repetitions, {} corrupted", cfg.n_pairs, outliers.len());
        entries.push(SubjectEntry {
            id,
            dir: subject_dir_name(id),
            seed: subject.seed,
            outliers,
            gm_cbf: subject.gm_cbf,
            wm_cbf: subject.wm_cbf,
        });
    }
    Manifest { format, subjects: entries }.save(&manifest_path)?;
    println!("wrote {} subjects to {}", cfg.n_subjects, cfg.data_dir.display());
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate_common()?;
    if cfg.train_subjects == 0 {
        return Err(CliError::Usage("train_subjects must be at least 1".to_string()));
    }
    let manifest = Manifest::load(&cfg.data_dir.join(MANIFEST_NAME))?;
    if cfg.train_subjects > manifest.subjects.len() {
        return Err(CliError::Usage(format!(
            "train_subjects {} exceeds the {} subjects in the manifest",
            cfg.train_subjects,
            manifest.subjects.len()
        )));
    }
    ensure_dir(&cfg.out_dir)?;
    let ckpt_path = cfg.checkpoint_path();
    let loss_path = cfg.out_dir.join("loss.csv");
    refuse_overwrite(&ckpt_path, cfg.overwrite)?;
    refuse_overwrite(&loss_path, cfg.overwrite)?;

    let dcfg = cfg.data_config();
    let mut set = PatchSet::empty(cfg.patch_size, cfg.patch_stride);
    for entry in &manifest.subjects[..cfg.train_subjects] {
        let subject = load_subject(&cfg.data_dir, entry, manifest.format)?;
        let series = load_series(&cfg.data_dir, entry, manifest.format, cfg.n_pairs)?;
        let part = subject_patches(&subject, &series, &dcfg).map_err(runtime)?;
        println!("subject {:03}: {} patches", entry.id, part.len());
        set.extend(part).map_err(runtime)?;
    }
    println!("training on {} patches from {} subjects", set.len(), cfg.train_subjects);

    let mspec = cfg.model_spec();
    let mut params = build_model(&mspec, split_seed(cfg.seed, STREAM_INIT)).map_err(runtime)?;
    println!(
        "model: {} layers, {} filters, kernel {}, {} trainable parameters",
        mspec.num_layers,
        mspec.filters,
        mspec.kernel,
        params.param_count()
    );
    let mut state = AdamState::new(&params);
    let tcfg = cfg.train_config();
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(cfg.seed, STREAM_SHUFFLE));

    let mut loss_csv = String::from("epoch,data_term,prior_term,total\n");
    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        let stats = train_epoch(&mut params, &mut state, &set, &tcfg, &mut rng)
            .map_err(|e| CliError::Runtime(format!("epoch {epoch}: {e}")))?;
        println!(
            "epoch {epoch}: data {:.6} prior {:.6} total {:.6} ({} batches, {:.1} s)",
            stats.data_term,
            stats.prior_term,
            stats.total,
            stats.batches,
            t0.elapsed().as_secs_f64()
        );
        loss_csv.push_str(&format!("{epoch},{},{},{}\n", stats.data_term, stats.prior_term, stats.total));
    }
    fs::write(&loss_path, loss_csv)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", loss_path.display())))?;
    save_checkpoint(&ckpt_path, &params, state.t, cfg.seed).map_err(runtime)?;
    println!("saved checkpoint to {}", ckpt_path.display());
    Ok(())
}

pub fn cmd_denoise(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate_common()?;
    let ckpt_path = cfg.checkpoint_path();
    let ckpt = load_checkpoint(&ckpt_path)
        .map_err(|e| CliError::Runtime(format!("cannot load checkpoint {}: {e}", ckpt_path.display())))?;
    let mspec = cfg.model_spec();
    if *ckpt.params.spec() != mspec {
        return Err(CliError::Runtime(format!(
            "checkpoint architecture {:?} does not match the configured model {:?}",
            ckpt.params.spec(),
            mspec
        )));
    }
    let manifest = Manifest::load(&cfg.data_dir.join(MANIFEST_NAME))?;
    let scope: &[SubjectEntry] = match cfg.denoise_subjects {
        DenoiseScope::All => &manifest.subjects,
        DenoiseScope::Test => {
            if cfg.train_subjects >= manifest.subjects.len() {
                return Err(CliError::Usage(format!(
                    "denoise scope 'test' is empty: train_subjects {} covers all {} subjects",
                    cfg.train_subjects,
                    manifest.subjects.len()
                )));
            }
            &manifest.subjects[cfg.train_subjects..]
        }
    };
    let den_dir = cfg.out_dir.join("denoised");
    ensure_dir(&den_dir)?;
    for entry in scope {
        refuse_overwrite(&denoised_file(&cfg.out_dir, entry, manifest.format), cfg.overwrite)?;
    }

    for entry in scope {
        let series = load_series(&cfg.data_dir, entry, manifest.format, cfg.input_k)?;
        let input = mean_cbf(&series, cfg.input_k).map_err(runtime)?;
        let t0 = Instant::now();
        let out = denoise_volume(&ckpt.params, &input).map_err(runtime)?;
        let elapsed = t0.elapsed().as_secs_f64();
        write_volume(manifest.format, &denoised_file(&cfg.out_dir, entry, manifest.format), &out)?;
        println!("subject {:03}: {} slices denoised in {elapsed:.2} s", entry.id, input.dims()[2]);
    }
    println!("wrote {} denoised volumes to {}", scope.len(), den_dir.display());
    Ok(())
}

fn score(subject: usize, method: &str, vol: &Volume, s: &PhantomSubject, peak: f64) -> Result<MetricsRow, CliError> {
    let snr = compute_snr(vol, &s.gm_roi, &s.wm_roi).map_err(runtime)?;
    let (mse, psnr) = compute_mse_psnr(vol, &s.truth_cbf, &s.brain_mask, peak).map_err(runtime)?;
    let gm_mean = roi_mean(vol, &s.gm_roi).map_err(runtime)?;
    let wm: Vec<f64> = vol.masked_values(&s.wm_roi).collect();
    Ok(MetricsRow {
        subject,
        method: method.to_string(),
        snr,
        mse,
        psnr,
        gm_mean,
        wm_std: sample_std(&wm),
    })
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate_common()?;
    let manifest = Manifest::load(&cfg.data_dir.join(MANIFEST_NAME))?;
    if cfg.train_subjects >= manifest.subjects.len() {
        return Err(CliError::Usage(format!(
            "nothing to evaluate: train_subjects {} covers all {} subjects",
            cfg.train_subjects,
            manifest.subjects.len()
        )));
    }
    let test = &manifest.subjects[cfg.train_subjects..];
    ensure_dir(&cfg.out_dir)?;
    let metrics_path = cfg.out_dir.join("metrics.csv");
    refuse_overwrite(&metrics_path, cfg.overwrite)?;

    let dcfg = cfg.data_config();
    let mut rows = Vec::with_capacity(4 * test.len());
    let mut snr_by_method: Vec<(&str, Vec<f64>)> = [METHOD_CNN, METHOD_RAW, METHOD_SMOOTH, METHOD_REF]
        .iter()
        .map(|m| (*m, Vec::with_capacity(test.len())))
        .collect();
    for entry in test {
        let subject = load_subject(&cfg.data_dir, entry, manifest.format)?;
        let series = load_series(&cfg.data_dir, entry, manifest.format, cfg.n_pairs)?;
        let raw = mean_cbf(&series, cfg.input_k).map_err(runtime)?;
        let smooth = gaussian_smooth(&raw, cfg.smooth_fwhm_mm).map_err(runtime)?;
        let (reference, kept) =
            asl_denoise::patches::subject_reference_volume(&series, &subject, &dcfg).map_err(runtime)?;
        let den_path = denoised_file(&cfg.out_dir, entry, manifest.format);
        if !den_path.exists() {
            return Err(CliError::Runtime(format!(
                "missing denoised volume {}; run `asldn denoise` first",
                den_path.display()
            )));
        }
        let denoised = read_volume(manifest.format, &den_path)?;
        println!("subject {:03}: kept {}/{} repetitions for the reference", entry.id, kept.len(), cfg.n_pairs);

        for (method, vol) in [
            (METHOD_RAW, &raw),
            (METHOD_SMOOTH, &smooth),
            (METHOD_REF, &reference),
            (METHOD_CNN, &denoised),
        ] {
            let row = score(entry.id, method, vol, &subject, cfg.psnr_peak)?;
            for (m, snrs) in &mut snr_by_method {
                if *m == method {
                    snrs.push(row.snr);
                }
            }
            rows.push(row);
        }
    }
    write_metrics_csv(&metrics_path, &rows).map_err(runtime)?;

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("mean SNR over {} test subjects:", test.len());
    let mut mean_raw = 0.0;
    let mut mean_cnn = 0.0;
    for (method, snrs) in &snr_by_method {
        let m = mean(snrs);
        println!("  {method:<13} {m:.4}");
        if *method == METHOD_RAW {
            mean_raw = m;
        }
        if *method == METHOD_CNN {
            mean_cnn = m;
        }
    }
    match snr_improvement(mean_cnn, mean_raw) {
        Ok(pct) => println!("{METHOD_CNN} vs {METHOD_RAW}: {pct:+.1}% SNR"),
        Err(e) => println!("{METHOD_CNN} vs {METHOD_RAW}: improvement undefined ({e})"),
    }
    let cnn_snrs = &snr_by_method[0].1;
    let raw_snrs = &snr_by_method[1].1;
    if test.len() >= 3 {
        match paired_t_test(cnn_snrs, raw_snrs) {
            Ok((t, p)) => println!("paired t-test ({METHOD_CNN} vs {METHOD_RAW} SNR): t = {t:.4}, p = {p:.4e}"),
            Err(e) => println!("paired t-test skipped: {e}"),
        }
    } else {
        println!("paired t-test skipped: needs at least 3 test subjects, have {}", test.len());
    }
    println!("wrote {}", metrics_path.display());
    Ok(())
}

/// Denominator floor for a finite-difference comparison of a function whose
/// evaluation costs up to ~1e3 rounding errors. The central difference cannot
/// resolve derivatives below `1000 * eps * |f| / (2h)`; dividing that noise by
/// the 1e-5 tolerance the suite asserts gives the smallest denominator at
/// which noise alone can never fail a check.
fn fd_floor(f_at_theta: f64, h: f64) -> f64 {
    (1000.0 * f64::EPSILON * f_at_theta.abs() / (2.0 * h) / 1e-5).max(1e-12)
}

/// Runs every finite-difference check and returns (name, max relative error)
/// pairs. `grad_scale` multiplies the whole-model analytic gradient; 1.0
/// checks the implementation, anything else demonstrates detection.
///
/// The whole-model check uses a smaller step than the primitives: the network
/// contains ReLU gates, and a pre-activation that lands within step distance
/// of zero would make the central difference straddle the kink and measure a
/// blend of the two one-sided slopes. At 1e-6 the step is far below the
/// typical gap to the nearest gate, so in practice no probe crosses one. The
/// smooth primitives are safe at the larger, more accurate step.
fn gradient_check_suite(seed: u64, grad_scale: f64) -> asl_denoise::Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut checks = Vec::new();

    let x = Tensor::randn(&[2, 3, 6, 5], 1.0, &mut rng)?;
    let params = ConvParams::he_init(4, 3, 3, &mut rng)?;
    let out = conv2d_forward(&x, &params, 1)?;
    let c = Tensor::randn(out.shape(), 1.0, &mut rng)?;
    let grads = conv2d_backward(&c, &x, &params, 1)?;
    let floor = fd_floor(out.dot(&c)?, h);
    checks.push((
        "conv weights",
        gradcheck_with_floor(
            |w| conv2d_forward(&x, &ConvParams::new(w.clone(), params.bias.clone())?, 1)?.dot(&c),
            &params.weights,
            &grads.grad_weights,
            h,
            Probes::All,
            floor,
        )?,
    ));
    checks.push((
        "conv bias",
        gradcheck_with_floor(
            |b| conv2d_forward(&x, &ConvParams::new(params.weights.clone(), b.clone())?, 1)?.dot(&c),
            &params.bias,
            &grads.grad_bias,
            h,
            Probes::All,
            floor,
        )?,
    ));
    checks.push((
        "conv input",
        gradcheck_with_floor(|t| conv2d_forward(t, &params, 1)?.dot(&c), &x, &grads.grad_input, h, Probes::All, floor)?,
    ));

    let xr = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng)?.map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
    let (out_r, mask) = relu_forward(&xr);
    let cr = Tensor::randn(out_r.shape(), 1.0, &mut rng)?;
    let gr = relu_backward(&cr, &mask)?;
    let floor = fd_floor(out_r.dot(&cr)?, h);
    checks.push((
        "relu input",
        gradcheck_with_floor(|t| relu_forward(t).0.dot(&cr), &xr, &gr, h, Probes::All, floor)?,
    ));

    let xb = Tensor::randn(&[3, 4, 4, 5], 1.0, &mut rng)?;
    let mut bn = BnParams::with_unit_stats(4);
    bn.scale = Tensor::randn(&[4], 0.3, &mut rng)?.map(|v| v + 1.0);
    bn.shift = Tensor::randn(&[4], 0.3, &mut rng)?;
    let (out_b, cache, _) = bn_forward_train(&xb, &bn)?;
    let cb = Tensor::randn(out_b.shape(), 1.0, &mut rng)?;
    let (g_in, g_scale, g_shift) = bn_backward(&cb, &cache, &bn)?;
    let floor = fd_floor(out_b.dot(&cb)?, h);
    checks.push((
        "bn scale",
        gradcheck_with_floor(
            |s| {
                let mut p = bn.clone();
                p.scale = s.clone();
                bn_forward_train(&xb, &p)?.0.dot(&cb)
            },
            &bn.scale,
            &g_scale,
            h,
            Probes::All,
            floor,
        )?,
    ));
    checks.push((
        "bn shift",
        gradcheck_with_floor(
            |s| {
                let mut p = bn.clone();
                p.shift = s.clone();
                bn_forward_train(&xb, &p)?.0.dot(&cb)
            },
            &bn.shift,
            &g_shift,
            h,
            Probes::All,
            floor,
        )?,
    ));
    checks.push((
        "bn input",
        gradcheck_with_floor(|t| bn_forward_train(t, &bn)?.0.dot(&cb), &xb, &g_in, h, Probes::All, floor)?,
    ));

    let y = Tensor::randn(&[2, 1, 4, 4], 1.0, &mut rng)?;
    let t_y = Tensor::randn(&[2, 1, 4, 4], 1.0, &mut rng)?;
    let xl = Tensor::randn(&[2, 1, 4, 4], 1.0, &mut rng)?;
    let gamma = Tensor::randn(&[2, 1, 4, 4], 1.0, &mut rng)?;
    let gl = loss_backward(&y, &t_y, &xl, &gamma, 0.1)?;
    let floor = fd_floor(loss_forward(&y, &t_y, &xl, &gamma, 0.1)?.total, h);
    checks.push((
        "loss residual",
        gradcheck_with_floor(
            |t| Ok(loss_forward(&y, t, &xl, &gamma, 0.1)?.total),
            &t_y,
            &gl,
            h,
            Probes::All,
            floor,
        )?,
    ));

    let spec = ModelSpec { num_layers: 3, filters: 8, kernel: 7, in_channels: 1, bn_layers: vec![1, 2] };
    let model = build_model(&spec, split_seed(seed, STREAM_INIT))?;
    let ym = Tensor::randn(&[2, 1, 8, 8], 1.0, &mut rng)?;
    let xm = Tensor::randn(&[2, 1, 8, 8], 1.0, &mut rng)?;
    let gm = Tensor::randn(&[2, 1, 8, 8], 1.0, &mut rng)?;
    checks.push((
        "model parameters",
        model_loss_gradcheck(&model, &ym, &xm, &gm, 0.1, 1e-6, Probes::Random { count: 400, seed }, grad_scale)?,
    ));
    Ok(checks)
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<(), CliError> {
    const TOL: f64 = 1e-5;
    let grad_scale = if cfg.gradcheck_inject_bug { 1.01 } else { 1.0 };
    if cfg.gradcheck_inject_bug {
        println!("note: whole-model analytic gradient deliberately scaled by {grad_scale}");
    }
    let checks = gradient_check_suite(cfg.seed, grad_scale).map_err(runtime)?;
    let mut failed = 0usize;
    for (name, err) in &checks {
        let ok = *err < TOL;
        if !ok {
            failed += 1;
        }
        println!("{name:<18} max rel err {err:.3e}  {}", if ok { "pass" } else { "FAIL" });
    }
    if failed > 0 {
        Err(CliError::Gradcheck(format!("{failed} of {} gradient checks failed", checks.len())))
    } else {
        println!("all {} gradient checks passed", checks.len());
        Ok(())
    }
}
