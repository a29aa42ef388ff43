//! Residual denoising network.
//!
//! The network is a plain stack of same-padded convolutions. Every layer but
//! the last is followed by ReLU; batch normalization sits between selected
//! convolutions and their activation. The stack predicts a residual `t_y`,
//! and the output is `y_hat = y + t_y`, so an all-zero network is exactly
//! the identity. There is no pooling and no fully connected head: the same
//! parameters run on 16x16 training patches and on full image slices.

use crate::batchnorm::{bn_backward, bn_forward_infer, bn_forward_train, BnCache, BnParams};
use crate::conv::{conv2d_backward, conv2d_forward, ConvParams};
use crate::error::{Error, Result};
use crate::gradcheck::{gradcheck_with_floor, Probes};
use crate::loss::{loss_backward, loss_forward};
use crate::relu::{relu_backward, relu_forward};
use crate::tensor::Tensor;
use crate::volume::{Slice2d, Volume};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Architecture description; `bn_layers` holds 1-based layer indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub num_layers: usize,
    pub filters: usize,
    pub kernel: usize,
    pub in_channels: usize,
    pub bn_layers: Vec<usize>,
}

impl Default for ModelSpec {
    fn default() -> ModelSpec {
        ModelSpec {
            num_layers: 5,
            filters: 128,
            kernel: 7,
            in_channels: 1,
            bn_layers: vec![1, 2, 3, 4],
        }
    }
}

impl ModelSpec {
    /// All layers except the last, the usual placement.
    pub fn default_bn_layers(num_layers: usize) -> Vec<usize> {
        (1..num_layers).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=32).contains(&self.num_layers) {
            return Err(Error::invalid("model::spec", format!("num_layers {} outside [2, 32]", self.num_layers)));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::invalid("model::spec", format!("kernel {} must be odd", self.kernel)));
        }
        if self.filters == 0 || self.in_channels == 0 {
            return Err(Error::invalid("model::spec", "filters and in_channels must be positive"));
        }
        let mut prev = 0;
        for &l in &self.bn_layers {
            if l == 0 || l >= self.num_layers {
                return Err(Error::invalid(
                    "model::spec",
                    format!("bn layer {l} outside [1, {}] (the last layer carries no bn)", self.num_layers - 1),
                ));
            }
            if l <= prev {
                return Err(Error::invalid("model::spec", "bn_layers must be strictly increasing"));
            }
            prev = l;
        }
        Ok(())
    }

    /// `(in_channels, out_channels)` of 1-based layer `i`.
    pub fn layer_io(&self, i: usize) -> (usize, usize) {
        let ic = if i == 1 { self.in_channels } else { self.filters };
        let oc = if i == self.num_layers { self.in_channels } else { self.filters };
        (ic, oc)
    }

    pub fn has_bn(&self, i: usize) -> bool {
        self.bn_layers.contains(&i)
    }

    pub fn pad(&self) -> usize {
        (self.kernel - 1) / 2
    }

    /// Layer membership packed as bits (bit i-1 set when layer i has bn).
    pub fn bn_bitmask(&self) -> u32 {
        let mut mask = 0u32;
        for &l in &self.bn_layers {
            mask |= 1 << (l - 1);
        }
        mask
    }

    pub fn bn_layers_from_bitmask(num_layers: usize, mask: u32) -> Vec<usize> {
        (1..=num_layers).filter(|&l| mask & (1 << (l - 1)) != 0).collect()
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub conv: ConvParams,
    pub bn: Option<BnParams>,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    spec: ModelSpec,
    pub layers: Vec<LayerParams>,
}

/// He-initialized parameters, deterministic in `seed`. BN scale starts at 1,
/// shift at 0, running statistics at (0, 1).
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(spec.num_layers);
    for i in 1..=spec.num_layers {
        let (ic, oc) = spec.layer_io(i);
        let conv = ConvParams::he_init(oc, ic, spec.kernel, &mut rng)?;
        let bn = if spec.has_bn(i) { Some(BnParams::with_unit_stats(oc)) } else { None };
        layers.push(LayerParams { conv, bn });
    }
    Ok(ModelParams { spec: spec.clone(), layers })
}

/// Per-layer values the backward pass replays; consumed exactly once.
#[derive(Debug)]
pub struct ForwardCache {
    y: Tensor,
    entries: Vec<LayerCache>,
}

#[derive(Debug)]
struct LayerCache {
    conv_input: Tensor,
    bn: Option<BnCache>,
    relu_mask: Option<Tensor>,
}

/// Gradients in the same layout as the trainable parameters.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub layers: Vec<LayerGrads>,
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weights: Tensor,
    pub bias: Tensor,
    pub bn_scale: Option<Tensor>,
    pub bn_shift: Option<Tensor>,
}

impl ModelGrads {
    pub fn zeros_like(params: &ModelParams) -> ModelGrads {
        let layers = params
            .layers
            .iter()
            .map(|l| LayerGrads {
                weights: Tensor::zeros(l.conv.weights.shape()),
                bias: Tensor::zeros(l.conv.bias.shape()),
                bn_scale: l.bn.as_ref().map(|b| Tensor::zeros(b.scale.shape())),
                bn_shift: l.bn.as_ref().map(|b| Tensor::zeros(b.shift.shape())),
            })
            .collect();
        ModelGrads { layers }
    }

    pub fn for_each(&self, mut f: impl FnMut(&Tensor)) {
        for l in &self.layers {
            f(&l.weights);
            f(&l.bias);
            if let Some(s) = &l.bn_scale {
                f(s);
            }
            if let Some(s) = &l.bn_shift {
                f(s);
            }
        }
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut Tensor)) {
        for l in &mut self.layers {
            f(&mut l.weights);
            f(&mut l.bias);
            if let Some(s) = &mut l.bn_scale {
                f(s);
            }
            if let Some(s) = &mut l.bn_shift {
                f(s);
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0;
        self.for_each(|t| acc += t.sq_norm());
        acc.sqrt()
    }

    pub fn scale_in_place(&mut self, factor: f64) {
        self.for_each_mut(|t| *t = t.scale(factor));
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.for_each(|t| out.extend_from_slice(t.data()));
        out
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|t| ok &= t.all_finite());
        ok
    }

    /// Overwrites every gradient tensor from a flat slice laid out in the
    /// same canonical order `flatten` produces.
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expected: usize = {
            let mut n = 0;
            self.for_each(|t| n += t.len());
            n
        };
        if flat.len() != expected {
            return Err(Error::shape(
                "model::grads",
                format!("flat gradient slice has {} values, structure needs {expected}", flat.len()),
            ));
        }
        let mut off = 0;
        self.for_each_mut(|t| {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        });
        Ok(())
    }
}

impl ModelParams {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Number of trainable scalars (conv weights and biases, bn scale and
    /// shift). Running statistics are state, not parameters.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        for l in &self.layers {
            n += l.conv.weights.len() + l.conv.bias.len();
            if let Some(bn) = &l.bn {
                n += bn.scale.len() + bn.shift.len();
            }
        }
        n
    }

    /// Zeroes every convolution weight and bias; with fresh bn statistics the
    /// network is then exactly the identity map.
    pub fn zero_weights(&mut self) {
        for l in &mut self.layers {
            l.conv.weights = Tensor::zeros(l.conv.weights.shape());
            l.conv.bias = Tensor::zeros(l.conv.bias.shape());
        }
    }

    fn check_input(&self, y: &Tensor) -> Result<()> {
        let [_, c, _, _] = y.dims4()?;
        if c != self.spec.in_channels {
            return Err(Error::shape(
                "model::forward",
                format!("input has {c} channels, model expects {}", self.spec.in_channels),
            ));
        }
        Ok(())
    }

    /// Training-mode forward; commits updated bn running statistics and
    /// returns `(t_y, y_hat, cache)`.
    pub fn forward_train(&mut self, y: &Tensor) -> Result<(Tensor, Tensor, ForwardCache)> {
        self.check_input(y)?;
        let pad = self.spec.pad();
        let mut entries = Vec::with_capacity(self.layers.len());
        let mut cur = y.clone();
        let last = self.layers.len();
        for (idx, layer) in self.layers.iter_mut().enumerate() {
            let conv_input = cur;
            cur = conv2d_forward(&conv_input, &layer.conv, pad)?;
            let bn_cache = match &mut layer.bn {
                Some(bn) => {
                    let (out, cache, updated) = bn_forward_train(&cur, bn)?;
                    *bn = updated;
                    cur = out;
                    Some(cache)
                }
                None => None,
            };
            let relu_mask = if idx + 1 < last {
                let (out, mask) = relu_forward(&cur);
                cur = out;
                Some(mask)
            } else {
                None
            };
            entries.push(LayerCache { conv_input, bn: bn_cache, relu_mask });
        }
        let t_y = cur;
        let y_hat = y.add(&t_y)?;
        Ok((t_y, y_hat, ForwardCache { y: y.clone(), entries }))
    }

    /// Inference-mode forward using bn running statistics; `(t_y, y_hat)`.
    pub fn forward_infer(&self, y: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_input(y)?;
        let pad = self.spec.pad();
        let mut cur = y.clone();
        let last = self.layers.len();
        for (idx, layer) in self.layers.iter().enumerate() {
            cur = conv2d_forward(&cur, &layer.conv, pad)?;
            if let Some(bn) = &layer.bn {
                cur = bn_forward_infer(&cur, bn)?;
            }
            if idx + 1 < last {
                let (out, _) = relu_forward(&cur);
                cur = out;
            }
        }
        let y_hat = y.add(&cur)?;
        Ok((cur, y_hat))
    }

    /// Backpropagates `grad_y_hat` (the loss gradient with respect to the
    /// prediction) through the stack. The cache is consumed.
    pub fn backward(&self, cache: ForwardCache, grad_y_hat: &Tensor) -> Result<ModelGrads> {
        if cache.entries.len() != self.layers.len() {
            return Err(Error::shape(
                "model::backward",
                format!("cache has {} layers, model has {}", cache.entries.len(), self.layers.len()),
            ));
        }
        cache.y.check_same_shape(grad_y_hat, "model::backward")?;
        let pad = self.spec.pad();
        // y_hat = y + t_y, so the gradient reaching the residual stack equals
        // grad_y_hat; the skip path touches no parameters.
        let mut grad = grad_y_hat.clone();
        let mut out_layers: Vec<LayerGrads> = Vec::with_capacity(self.layers.len());
        for (layer, entry) in self.layers.iter().zip(cache.entries).rev() {
            if let Some(mask) = &entry.relu_mask {
                grad = relu_backward(&grad, mask)?;
            }
            let (bn_scale, bn_shift) = match (&layer.bn, &entry.bn) {
                (Some(bn), Some(bn_cache)) => {
                    let (gi, gs, gb) = bn_backward(&grad, bn_cache, bn)?;
                    grad = gi;
                    (Some(gs), Some(gb))
                }
                (None, None) => (None, None),
                _ => {
                    return Err(Error::shape("model::backward", "cache bn entries do not match model layers"));
                }
            };
            let conv_grads = conv2d_backward(&grad, &entry.conv_input, &layer.conv, pad)?;
            grad = conv_grads.grad_input;
            out_layers.push(LayerGrads {
                weights: conv_grads.grad_weights,
                bias: conv_grads.grad_bias,
                bn_scale,
                bn_shift,
            });
        }
        out_layers.reverse();
        Ok(ModelGrads { layers: out_layers })
    }

    /// Runs the network on one image plane in inference mode.
    pub fn denoise_slice(&self, slice: &Slice2d) -> Result<Slice2d> {
        if self.spec.in_channels != 1 {
            return Err(Error::invalid(
                "model::denoise_slice",
                format!("slice denoising needs a 1-channel model, spec has {}", self.spec.in_channels),
            ));
        }
        let (_, y_hat) = self.forward_infer(&slice.to_tensor())?;
        Slice2d::from_tensor(&y_hat)
    }

    /// Flattened trainable parameters in a fixed order (per layer: conv
    /// weights, conv bias, bn scale, bn shift), matching `ModelGrads::flatten`.
    pub fn flatten_trainable(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.conv.weights.data());
            out.extend_from_slice(l.conv.bias.data());
            if let Some(bn) = &l.bn {
                out.extend_from_slice(bn.scale.data());
                out.extend_from_slice(bn.shift.data());
            }
        }
        out
    }

    pub fn load_trainable(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape(
                "model::load_trainable",
                format!("expected {} values, got {}", self.param_count(), flat.len()),
            ));
        }
        let mut off = 0;
        let mut take = |t: &mut Tensor| {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        };
        for l in &mut self.layers {
            take(&mut l.conv.weights);
            take(&mut l.conv.bias);
            if let Some(bn) = &mut l.bn {
                take(&mut bn.scale);
                take(&mut bn.shift);
            }
        }
        Ok(())
    }
}

/// Applies the model slice by slice along z.
pub fn denoise_volume(params: &ModelParams, vol: &Volume) -> Result<Volume> {
    let mut out = vol.clone();
    for z in 0..vol.dims()[2] {
        let denoised = params.denoise_slice(&vol.axial_slice(z)?)?;
        out.set_axial_slice(z, &denoised)?;
    }
    Ok(out)
}

/// Finite-difference check of the whole-model gradient of the training loss.
///
/// `grad_scale` multiplies the analytic gradient before comparison; 1.0
/// verifies the implementation, any other value demonstrates that the checker
/// notices a corrupted gradient.
///
/// One forward pass through the network accumulates on the order of 1e5
/// floating-point operations, so a central difference of the loss carries
/// rounding noise of roughly `1000 * eps * |loss| / (2h)` in the worst case.
/// Coordinates whose gradient sits near that scale cannot be resolved (conv
/// biases on batch-normalized layers are the extreme case: the normalization
/// subtracts the per-channel mean, making their true gradient exactly zero).
/// The comparison therefore uses a denominator floor at that noise estimate
/// divided by the 1e-5 tolerance this check is designed for, so rounding
/// noise alone can never fail the check while any error above noise on a
/// resolvable coordinate still registers at full strength.
#[allow(clippy::too_many_arguments)]
pub fn model_loss_gradcheck(
    params: &ModelParams,
    y: &Tensor,
    x: &Tensor,
    gamma: &Tensor,
    alpha: f64,
    h: f64,
    probes: Probes,
    grad_scale: f64,
) -> Result<f64> {
    let flat = params.flatten_trainable();
    let theta = Tensor::from_vec(&[flat.len()], flat)?;

    let mut work = params.clone();
    let (_, y_hat, cache) = work.forward_train(y)?;
    let loss_at_theta = loss_forward(y, &y_hat.sub(y)?, x, gamma, alpha)?.total;
    let grad_y_hat = loss_backward(y, &y_hat.sub(y)?, x, gamma, alpha)?;
    let grads = work.backward(cache, &grad_y_hat)?;
    let mut flat_grad = grads.flatten();
    for g in &mut flat_grad {
        *g *= grad_scale;
    }
    let analytic = Tensor::from_vec(&[flat_grad.len()], flat_grad)?;

    const ROUNDOFF_OPS: f64 = 1000.0;
    const DESIGN_TOL: f64 = 1e-5;
    let noise = ROUNDOFF_OPS * f64::EPSILON * loss_at_theta.abs() / (2.0 * h);
    let floor = (noise / DESIGN_TOL).max(1e-12);

    let template = params.clone();
    let f = move |t: &Tensor| -> Result<f64> {
        let mut m = template.clone();
        m.load_trainable(t.data())?;
        let (t_y, _, _) = m.forward_train(y)?;
        Ok(loss_forward(y, &t_y, x, gamma, alpha)?.total)
    };
    gradcheck_with_floor(f, &theta, &analytic, h, probes, floor)
}
