//! ADAM optimization with weight decay and global-norm gradient clipping,
//! plus the epoch training loop.
//!
//! Update order per mini-batch is fixed: the weight-decay term is added to
//! the raw gradients, the combined gradient is clipped by global L2 norm,
//! and only then does ADAM consume it.

use crate::error::{Error, Result};
use crate::loss::{loss_backward, loss_forward};
use crate::model::{ModelGrads, ModelParams};
use crate::patches::PatchSet;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct OptConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 norm ceiling for the combined gradient.
    pub clip_norm: f64,
}

impl Default for OptConfig {
    fn default() -> OptConfig {
        OptConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            clip_norm: 0.1,
        }
    }
}

impl OptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("optim", format!("learning rate {} must be positive", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid("optim", format!("{name} {b} outside [0, 1)")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::invalid("optim", format!("eps {} must be positive", self.eps)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid("optim", format!("weight decay {} must be >= 0", self.weight_decay)));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(Error::invalid("optim", format!("clip norm {} must be positive", self.clip_norm)));
        }
        Ok(())
    }
}

/// First and second moment estimates, flattened across all trainable
/// parameters in the model's canonical order.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    /// Completed update steps.
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> AdamState {
        let n = params.param_count();
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// Adds `weight_decay * param` to every trainable gradient, in place.
pub fn apply_weight_decay(grads: &mut ModelGrads, params: &ModelParams, weight_decay: f64) -> Result<()> {
    if weight_decay == 0.0 {
        return Ok(());
    }
    if !(weight_decay.is_finite() && weight_decay > 0.0) {
        return Err(Error::invalid("optim::decay", format!("weight decay {weight_decay} must be finite and >= 0")));
    }
    let theta = params.flatten_trainable();
    let mut flat = grads.flatten();
    if theta.len() != flat.len() {
        return Err(Error::shape("optim::decay", format!("{} params vs {} gradients", theta.len(), flat.len())));
    }
    for (g, p) in flat.iter_mut().zip(&theta) {
        *g += weight_decay * p;
    }
    grads.load_flat(&flat)
}

/// Rescales the gradients so their global L2 norm does not exceed
/// `clip_norm`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut ModelGrads, clip_norm: f64) -> Result<f64> {
    if !(clip_norm.is_finite() && clip_norm > 0.0) {
        return Err(Error::invalid("optim::clip", format!("clip norm {clip_norm} must be positive")));
    }
    if !grads.all_finite() {
        return Err(Error::non_finite("optim::clip", "gradients contain NaN or infinity"));
    }
    let norm = grads.global_norm();
    if norm > clip_norm {
        grads.scale_in_place(clip_norm / norm);
    }
    Ok(norm)
}

/// The bias-corrected ADAM update on raw slices. Exposed at this level so
/// the arithmetic is testable on scalars without building a model.
pub fn adam_update_slice(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &OptConfig,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != m.len() || param.len() != v.len() {
        return Err(Error::shape(
            "optim::adam",
            format!("length mismatch: param {}, grad {}, m {}, v {}", param.len(), grad.len(), m.len(), v.len()),
        ));
    }
    if t == 0 {
        return Err(Error::invalid("optim::adam", "step counter must start at 1"));
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// One ADAM step over the whole model. The gradients are consumed as-is;
/// weight decay and clipping are the caller's responsibility (the training
/// loop applies them first).
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelGrads,
    state: &mut AdamState,
    cfg: &OptConfig,
) -> Result<()> {
    cfg.validate()?;
    let mut theta = params.flatten_trainable();
    let flat = grads.flatten();
    if theta.len() != state.len() || flat.len() != state.len() {
        return Err(Error::shape(
            "optim::adam",
            format!("state sized for {} params, model has {}, gradients {}", state.len(), theta.len(), flat.len()),
        ));
    }
    state.t += 1;
    adam_update_slice(&mut theta, &flat, &mut state.m, &mut state.v, state.t, cfg)?;
    params.load_trainable(&theta)
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the GM prior term in the loss.
    pub alpha: f64,
    pub opt: OptConfig,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig { epochs: 1, batch_size: 64, alpha: 0.1, opt: OptConfig::default() }
    }
}

/// Patch-weighted mean loss terms over one epoch.
#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub data_term: f64,
    pub prior_term: f64,
    pub total: f64,
    pub batches: usize,
}

/// Runs one pass over the patch set in shuffled order. The last partial
/// mini-batch is used, not dropped. Loss statistics are averaged per patch
/// so ragged batch sizes do not skew them.
pub fn train_epoch(
    params: &mut ModelParams,
    state: &mut AdamState,
    patches: &PatchSet,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<EpochStats> {
    cfg.opt.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::invalid("optim::epoch", "batch size must be >= 1"));
    }
    if patches.is_empty() {
        return Err(Error::invalid("optim::epoch", "no training patches"));
    }
    if !(cfg.alpha.is_finite() && cfg.alpha >= 0.0) {
        return Err(Error::invalid("optim::epoch", format!("alpha {} must be >= 0", cfg.alpha)));
    }

    let mut order: Vec<usize> = (0..patches.len()).collect();
    order.shuffle(rng);

    let mut sum_data = 0.0;
    let mut sum_prior = 0.0;
    let mut sum_total = 0.0;
    let mut batches = 0usize;
    for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let (y, x, gamma) = patches.batch(chunk)?;
        let (t_y, y_hat, cache) = params.forward_train(&y)?;
        let terms = loss_forward(&y_hat, &t_y, &x, &gamma, cfg.alpha).map_err(|e| {
            Error::non_finite("optim::epoch", format!("loss diverged in batch {batch_idx}: {e}"))
        })?;
        let grad = loss_backward(&y, &t_y, &x, &gamma, cfg.alpha)?;
        let mut grads = params.backward(cache, &grad)?;
        apply_weight_decay(&mut grads, params, cfg.opt.weight_decay)?;
        clip_gradients(&mut grads, cfg.opt.clip_norm)
            .map_err(|e| Error::non_finite("optim::epoch", format!("batch {batch_idx}: {e}")))?;
        adam_step(params, &grads, state, &cfg.opt)?;

        let w = chunk.len() as f64;
        sum_data += terms.data_term * w;
        sum_prior += terms.prior_term * w;
        sum_total += terms.total * w;
        batches += 1;
    }
    let n = patches.len() as f64;
    Ok(EpochStats {
        data_term: sum_data / n,
        prior_term: sum_prior / n,
        total: sum_total / n,
        batches,
    })
}
