//! Flat `key = value` run configuration shared by every subcommand.
//!
//! One file describes the whole pipeline so a run can be reproduced from a
//! single artifact. Lines are `key = value`, `#` starts a comment, blank
//! lines are ignored. Unknown keys are rejected so a typo cannot silently
//! fall back to a default. `RunConfig::dump` renders the effective
//! configuration in a form that parses back to the same configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use asl_denoise::model::ModelSpec;
use asl_denoise::optim::{OptConfig, TrainConfig};
use asl_denoise::patches::{DataConfig, SliceRange};
use asl_denoise::phantom::PhantomSpec;
use asl_denoise::preprocess::CleanParams;
use asl_denoise::Volume;

use crate::CliError;

/// On-disk encoding for volumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeFormat {
    Nifti,
    Raw,
}

impl VolumeFormat {
    pub fn name(self) -> &'static str {
        match self {
            VolumeFormat::Nifti => "nifti",
            VolumeFormat::Raw => "raw",
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            VolumeFormat::Nifti => "nii",
            VolumeFormat::Raw => "aslv",
        }
    }

    pub fn parse(value: &str) -> Result<VolumeFormat, CliError> {
        match value {
            "nifti" => Ok(VolumeFormat::Nifti),
            "raw" => Ok(VolumeFormat::Raw),
            other => Err(CliError::Usage(format!("volume_format must be 'nifti' or 'raw', got '{other}'"))),
        }
    }

    pub fn write(self, path: &Path, vol: &Volume) -> asl_denoise::Result<()> {
        match self {
            VolumeFormat::Nifti => asl_denoise::nifti::write_nifti(path, vol),
            VolumeFormat::Raw => asl_denoise::rawvol::write_raw(path, vol),
        }
    }

    pub fn read(self, path: &Path) -> asl_denoise::Result<Volume> {
        match self {
            VolumeFormat::Nifti => asl_denoise::nifti::read_nifti(path),
            VolumeFormat::Raw => asl_denoise::rawvol::read_raw(path),
        }
    }
}

/// Which subjects `asldn denoise` processes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenoiseScope {
    /// Only subjects past `train_subjects` (the held-out set).
    Test,
    /// Every subject in the manifest.
    All,
}

impl DenoiseScope {
    pub fn name(self) -> &'static str {
        match self {
            DenoiseScope::Test => "test",
            DenoiseScope::All => "all",
        }
    }

    pub fn parse(value: &str) -> Result<DenoiseScope, CliError> {
        match value {
            "test" => Ok(DenoiseScope::Test),
            "all" => Ok(DenoiseScope::All),
            other => Err(CliError::Usage(format!("denoise_subjects must be 'test' or 'all', got '{other}'"))),
        }
    }
}

/// Every tunable of the pipeline with its default. Field order mirrors the
/// pipeline: cohort, phantom, series/preprocessing, model, optimizer,
/// evaluation, plumbing.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Subjects generated by `phantom`. Default 25.
    pub n_subjects: usize,
    /// Leading subjects used for training; the rest are held out. Default 20.
    pub train_subjects: usize,
    /// Grid extent per axis (`grid_x`, `grid_y`, `grid_z`). Default 91 x 109 x 91.
    pub grid: [usize; 3],
    /// Voxel size in mm per axis (`voxel_x`, `voxel_y`, `voxel_z`). Default 2 mm.
    pub voxel_mm: [f64; 3],
    /// True gray-matter perfusion, ml/100g/min. Default 60.
    pub gm_cbf: f64,
    /// True white-matter perfusion, ml/100g/min. Default 20.
    pub wm_cbf: f64,
    /// Per-repetition noise standard deviation, CBF units. Default 15.
    pub noise_sigma: f64,
    /// Partial-volume blur of the tissue maps, FWHM in mm. Default 4.
    pub boundary_fwhm_mm: f64,
    /// Probability that a repetition is corrupted. Default 0.05.
    pub outlier_prob: f64,
    /// Noise scale factor for corrupted repetitions. Default 6.
    pub outlier_amp: f64,
    /// Relative per-subject variation of anatomy and CBF levels. Default 0.1.
    pub jitter: f64,
    /// Outer (GM) ellipsoid semi-axes as a fraction of the half-extent. Default 0.82.
    pub gm_outer_frac: f64,
    /// Inner (WM) ellipsoid semi-axes, same convention. Default 0.55.
    pub wm_core_frac: f64,
    /// Repetitions simulated per subject. Default 40.
    pub n_pairs: usize,
    /// Leading repetitions averaged into the network input. Default 10.
    pub input_k: usize,
    /// Gaussian smoothing of the reference, FWHM in mm. Default 6.
    pub smooth_fwhm_mm: f64,
    /// The GM prior channel is gm_prob scaled by this, CBF units. Default 60.
    pub gm_scale: f64,
    /// Square patch edge in voxels. Default 16.
    pub patch_size: usize,
    /// Patch grid stride in voxels. Default 4.
    pub patch_stride: usize,
    /// First training slice, 1-based inclusive. Default 36.
    pub slice_first: usize,
    /// Last training slice, 1-based inclusive. Default 60.
    pub slice_last: usize,
    /// Step between training slices. Default 3.
    pub slice_step: usize,
    /// Repetitions correlating with the series mean below this are dropped. Default 0.7.
    pub corr_thresh: f64,
    /// GM-ROI deviation threshold in robust standard deviations. Default 3.
    pub mad_k: f64,
    /// Outlier cleaning never keeps fewer repetitions than this; 0 means
    /// half the series rounded up. Default 0.
    pub min_keep: usize,
    /// Convolution layers. Default 5.
    pub num_layers: usize,
    /// Filters per hidden layer. Default 128.
    pub filters: usize,
    /// Square kernel edge, odd. Default 7.
    pub kernel: usize,
    /// Layers carrying batch norm, 1-based: 'auto' (all but last), 'none',
    /// or a comma list like '1,2,3'. Default auto.
    pub bn_layers: Option<Vec<usize>>,
    /// ADAM step size. Default 0.001.
    pub learning_rate: f64,
    /// ADAM first-moment decay. Default 0.9.
    pub beta1: f64,
    /// ADAM second-moment decay. Default 0.999.
    pub beta2: f64,
    /// ADAM denominator fuzz. Default 1e-8.
    pub eps: f64,
    /// Coupled weight decay added to every gradient. Default 1e-4.
    pub weight_decay: f64,
    /// Global L2 gradient norm ceiling. Default 0.1.
    pub clip_norm: f64,
    /// Passes over the training patches. Default 1.
    pub epochs: usize,
    /// Patches per optimizer step. Default 64.
    pub batch_size: usize,
    /// Weight of the GM prior term in the loss. Default 0.1.
    pub alpha: f64,
    /// PSNR peak value; 0 means the masked ground-truth maximum. Default 0.
    pub psnr_peak: f64,
    /// Which subjects `denoise` processes: 'test' or 'all'. Default test.
    pub denoise_subjects: DenoiseScope,
    /// Master seed; every stream (geometry, noise, init, shuffle) derives
    /// from it. Default 0.
    pub seed: u64,
    /// Directory holding phantom subjects and the manifest. Default 'data'.
    pub data_dir: PathBuf,
    /// Directory for checkpoints, CSVs, and denoised volumes. Default 'out'.
    pub out_dir: PathBuf,
    /// Checkpoint path; empty means '<out_dir>/model.ckpt'. Default empty.
    pub checkpoint: String,
    /// Volume encoding, 'nifti' or 'raw'. Default nifti.
    pub volume_format: VolumeFormat,
    /// Allow commands to replace files they already wrote. Default false.
    pub overwrite: bool,
    /// Corrupt the whole-model analytic gradient by 1% so `gradcheck`
    /// demonstrates its own sensitivity. Default false.
    pub gradcheck_inject_bug: bool,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        let phantom = PhantomSpec::default();
        let data = DataConfig::default();
        let opt = OptConfig::default();
        let train = TrainConfig::default();
        let model = ModelSpec::default();
        RunConfig {
            n_subjects: 25,
            train_subjects: 20,
            grid: phantom.dims,
            voxel_mm: phantom.voxel_mm,
            gm_cbf: phantom.gm_cbf,
            wm_cbf: phantom.wm_cbf,
            noise_sigma: phantom.noise_sigma,
            boundary_fwhm_mm: phantom.boundary_fwhm_mm,
            outlier_prob: phantom.outlier_prob,
            outlier_amp: phantom.outlier_amp,
            jitter: phantom.jitter,
            gm_outer_frac: phantom.gm_outer_frac,
            wm_core_frac: phantom.wm_core_frac,
            n_pairs: data.n_pairs,
            input_k: data.input_k,
            smooth_fwhm_mm: data.smooth_fwhm_mm,
            gm_scale: data.gm_scale,
            patch_size: data.patch_size,
            patch_stride: data.patch_stride,
            slice_first: data.slices.first,
            slice_last: data.slices.last,
            slice_step: data.slices.step,
            corr_thresh: data.clean.corr_thresh,
            mad_k: data.clean.mad_k,
            min_keep: data.clean.min_keep,
            num_layers: model.num_layers,
            filters: model.filters,
            kernel: model.kernel,
            bn_layers: None,
            learning_rate: opt.learning_rate,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            weight_decay: opt.weight_decay,
            clip_norm: opt.clip_norm,
            epochs: train.epochs,
            batch_size: train.batch_size,
            alpha: train.alpha,
            psnr_peak: 0.0,
            denoise_subjects: DenoiseScope::Test,
            seed: 0,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            checkpoint: String::new(),
            volume_format: VolumeFormat::Nifti,
            overwrite: false,
            gradcheck_inject_bug: false,
        }
    }
}

fn parse_num<T>(key: &str, value: &str) -> Result<T, CliError>
where
    T: FromStr,
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| CliError::Usage(format!("{key}: cannot parse '{value}': {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(CliError::Usage(format!("{key} must be 'true' or 'false', got '{other}'"))),
    }
}

fn parse_layer_list(value: &str) -> Result<Option<Vec<usize>>, CliError> {
    match value {
        "auto" => Ok(None),
        "none" => Ok(Some(Vec::new())),
        list => {
            let mut layers = Vec::new();
            for part in list.split(',') {
                layers.push(parse_num::<usize>("bn_layers", part.trim())?);
            }
            Ok(Some(layers))
        }
    }
}

fn render_layer_list(layers: &Option<Vec<usize>>) -> String {
    match layers {
        None => "auto".to_string(),
        Some(v) if v.is_empty() => "none".to_string(),
        Some(v) => v.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(","),
    }
}

/// Parses `key = value` lines, stripping `#` comments and blank lines.
/// Returns (line number, key, value) triples; the value may be empty.
pub(crate) fn parse_kv_lines(text: &str, origin: &str) -> Result<Vec<(usize, String, String)>, CliError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("{origin} line {}: expected 'key = value', got '{line}'", i + 1))
        })?;
        out.push((i + 1, key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::parse_text(&text, &path.display().to_string())
    }

    pub fn parse_text(text: &str, origin: &str) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::default();
        for (line, key, value) in parse_kv_lines(text, origin)? {
            cfg.set_key(&key, &value)
                .map_err(|e| CliError::Usage(format!("{origin} line {line}: {e}")))?;
        }
        Ok(cfg)
    }

    /// Applies one `key = value` assignment. Unknown keys are errors.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "n_subjects" => self.n_subjects = parse_num(key, value)?,
            "train_subjects" => self.train_subjects = parse_num(key, value)?,
            "grid_x" => self.grid[0] = parse_num(key, value)?,
            "grid_y" => self.grid[1] = parse_num(key, value)?,
            "grid_z" => self.grid[2] = parse_num(key, value)?,
            "voxel_x" => self.voxel_mm[0] = parse_num(key, value)?,
            "voxel_y" => self.voxel_mm[1] = parse_num(key, value)?,
            "voxel_z" => self.voxel_mm[2] = parse_num(key, value)?,
            "gm_cbf" => self.gm_cbf = parse_num(key, value)?,
            "wm_cbf" => self.wm_cbf = parse_num(key, value)?,
            "noise_sigma" => self.noise_sigma = parse_num(key, value)?,
            "boundary_fwhm_mm" => self.boundary_fwhm_mm = parse_num(key, value)?,
            "outlier_prob" => self.outlier_prob = parse_num(key, value)?,
            "outlier_amp" => self.outlier_amp = parse_num(key, value)?,
            "jitter" => self.jitter = parse_num(key, value)?,
            "gm_outer_frac" => self.gm_outer_frac = parse_num(key, value)?,
            "wm_core_frac" => self.wm_core_frac = parse_num(key, value)?,
            "n_pairs" => self.n_pairs = parse_num(key, value)?,
            "input_k" => self.input_k = parse_num(key, value)?,
            "smooth_fwhm_mm" => self.smooth_fwhm_mm = parse_num(key, value)?,
            "gm_scale" => self.gm_scale = parse_num(key, value)?,
            "patch_size" => self.patch_size = parse_num(key, value)?,
            "patch_stride" => self.patch_stride = parse_num(key, value)?,
            "slice_first" => self.slice_first = parse_num(key, value)?,
            "slice_last" => self.slice_last = parse_num(key, value)?,
            "slice_step" => self.slice_step = parse_num(key, value)?,
            "corr_thresh" => self.corr_thresh = parse_num(key, value)?,
            "mad_k" => self.mad_k = parse_num(key, value)?,
            "min_keep" => self.min_keep = parse_num(key, value)?,
            "num_layers" => self.num_layers = parse_num(key, value)?,
            "filters" => self.filters = parse_num(key, value)?,
            "kernel" => self.kernel = parse_num(key, value)?,
            "bn_layers" => self.bn_layers = parse_layer_list(value)?,
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "beta1" => self.beta1 = parse_num(key, value)?,
            "beta2" => self.beta2 = parse_num(key, value)?,
            "eps" => self.eps = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "clip_norm" => self.clip_norm = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "alpha" => self.alpha = parse_num(key, value)?,
            "psnr_peak" => self.psnr_peak = parse_num(key, value)?,
            "denoise_subjects" => self.denoise_subjects = DenoiseScope::parse(value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "checkpoint" => self.checkpoint = value.to_string(),
            "volume_format" => self.volume_format = VolumeFormat::parse(value)?,
            "overwrite" => self.overwrite = parse_bool(key, value)?,
            "gradcheck_inject_bug" => self.gradcheck_inject_bug = parse_bool(key, value)?,
            other => return Err(CliError::Usage(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Applies repeated `--set key=value` arguments in order.
    pub fn apply_set_args(&mut self, sets: &[String]) -> Result<(), CliError> {
        for s in sets {
            let (key, value) = s
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got '{s}'")))?;
            self.set_key(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Renders the effective configuration, sorted by key. Parsing the
    /// result reproduces this configuration exactly.
    pub fn dump(&self) -> String {
        let mut pairs: Vec<(&str, String)> = vec![
            ("n_subjects", self.n_subjects.to_string()),
            ("train_subjects", self.train_subjects.to_string()),
            ("grid_x", self.grid[0].to_string()),
            ("grid_y", self.grid[1].to_string()),
            ("grid_z", self.grid[2].to_string()),
            ("voxel_x", self.voxel_mm[0].to_string()),
            ("voxel_y", self.voxel_mm[1].to_string()),
            ("voxel_z", self.voxel_mm[2].to_string()),
            ("gm_cbf", self.gm_cbf.to_string()),
            ("wm_cbf", self.wm_cbf.to_string()),
            ("noise_sigma", self.noise_sigma.to_string()),
            ("boundary_fwhm_mm", self.boundary_fwhm_mm.to_string()),
            ("outlier_prob", self.outlier_prob.to_string()),
            ("outlier_amp", self.outlier_amp.to_string()),
            ("jitter", self.jitter.to_string()),
            ("gm_outer_frac", self.gm_outer_frac.to_string()),
            ("wm_core_frac", self.wm_core_frac.to_string()),
            ("n_pairs", self.n_pairs.to_string()),
            ("input_k", self.input_k.to_string()),
            ("smooth_fwhm_mm", self.smooth_fwhm_mm.to_string()),
            ("gm_scale", self.gm_scale.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("patch_stride", self.patch_stride.to_string()),
            ("slice_first", self.slice_first.to_string()),
            ("slice_last", self.slice_last.to_string()),
            ("slice_step", self.slice_step.to_string()),
            ("corr_thresh", self.corr_thresh.to_string()),
            ("mad_k", self.mad_k.to_string()),
            ("min_keep", self.min_keep.to_string()),
            ("num_layers", self.num_layers.to_string()),
            ("filters", self.filters.to_string()),
            ("kernel", self.kernel.to_string()),
            ("bn_layers", render_layer_list(&self.bn_layers)),
            ("learning_rate", self.learning_rate.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("alpha", self.alpha.to_string()),
            ("psnr_peak", self.psnr_peak.to_string()),
            ("denoise_subjects", self.denoise_subjects.name().to_string()),
            ("seed", self.seed.to_string()),
            ("data_dir", self.data_dir.display().to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("checkpoint", self.checkpoint.clone()),
            ("volume_format", self.volume_format.name().to_string()),
            ("overwrite", self.overwrite.to_string()),
            ("gradcheck_inject_bug", self.gradcheck_inject_bug.to_string()),
        ];
        pairs.sort_by(|a, b| a.0.cmp(b.0));
        let mut out = String::new();
        for (key, value) in pairs {
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        PhantomSpec {
            dims: self.grid,
            voxel_mm: self.voxel_mm,
            gm_cbf: self.gm_cbf,
            wm_cbf: self.wm_cbf,
            noise_sigma: self.noise_sigma,
            boundary_fwhm_mm: self.boundary_fwhm_mm,
            outlier_prob: self.outlier_prob,
            outlier_amp: self.outlier_amp,
            jitter: self.jitter,
            gm_outer_frac: self.gm_outer_frac,
            wm_core_frac: self.wm_core_frac,
            seed: self.seed,
        }
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            n_pairs: self.n_pairs,
            input_k: self.input_k,
            smooth_fwhm_mm: self.smooth_fwhm_mm,
            gm_scale: self.gm_scale,
            patch_size: self.patch_size,
            patch_stride: self.patch_stride,
            slices: SliceRange { first: self.slice_first, last: self.slice_last, step: self.slice_step },
            clean: CleanParams { corr_thresh: self.corr_thresh, mad_k: self.mad_k, min_keep: self.min_keep },
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            num_layers: self.num_layers,
            filters: self.filters,
            kernel: self.kernel,
            in_channels: 1,
            bn_layers: self
                .bn_layers
                .clone()
                .unwrap_or_else(|| ModelSpec::default_bn_layers(self.num_layers)),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            alpha: self.alpha,
            opt: OptConfig {
                learning_rate: self.learning_rate,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                weight_decay: self.weight_decay,
                clip_norm: self.clip_norm,
            },
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        if self.checkpoint.is_empty() {
            self.out_dir.join("model.ckpt")
        } else {
            PathBuf::from(&self.checkpoint)
        }
    }

    /// Structural validation shared by every command, done before any long
    /// computation or file output.
    pub fn validate_common(&self) -> Result<(), CliError> {
        let usage = |e: asl_denoise::Error| CliError::Usage(e.to_string());
        self.phantom_spec().validate().map_err(usage)?;
        self.model_spec().validate().map_err(usage)?;
        self.train_config().opt.validate().map_err(usage)?;
        self.data_config().slices.validate().map_err(usage)?;
        if self.epochs == 0 {
            return Err(CliError::Usage("epochs must be at least 1".to_string()));
        }
        if self.batch_size == 0 {
            return Err(CliError::Usage("batch_size must be at least 1".to_string()));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(CliError::Usage(format!("alpha {} must be finite and >= 0", self.alpha)));
        }
        if self.input_k == 0 || self.input_k > self.n_pairs {
            return Err(CliError::Usage(format!(
                "input_k {} must lie in [1, n_pairs = {}]",
                self.input_k, self.n_pairs
            )));
        }
        if !self.psnr_peak.is_finite() {
            return Err(CliError::Usage(format!("psnr_peak {} must be finite", self.psnr_peak)));
        }
        Ok(())
    }
}
