//! Batch normalization over `[N, C, H, W]`, statistics per channel.
//!
//! Training mode normalizes with the biased batch variance computed over the
//! `N*H*W` values of each channel and folds the batch statistics into the
//! running estimates as
//!
//! ```text
//! running <- (1 - momentum) * running + momentum * batch
//! ```
//!
//! Inference mode normalizes with the running statistics alone. The train
//! path is pure: it returns updated parameters instead of mutating, so a
//! caller that retries or replays a batch cannot corrupt state.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_DEFAULT_MOMENTUM: f64 = 0.1;
pub const BN_DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct BnParams {
    /// Learnable per-channel gain, shape `[C]`.
    pub scale: Tensor,
    /// Learnable per-channel offset, shape `[C]`.
    pub shift: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub epsilon: f64,
    /// True once the running statistics have been set by a training step or
    /// an explicit load; inference refuses to run before that.
    pub stats_ready: bool,
}

impl BnParams {
    /// Fresh parameters: scale 1, shift 0, running stats (0, 1), not yet
    /// marked ready for inference.
    pub fn new(channels: usize) -> BnParams {
        BnParams {
            scale: Tensor::full(&[channels], 1.0),
            shift: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            momentum: BN_DEFAULT_MOMENTUM,
            epsilon: BN_DEFAULT_EPSILON,
            stats_ready: false,
        }
    }

    /// Same as `new` but with the default (0, 1) statistics declared usable,
    /// as models initialize them explicitly.
    pub fn with_unit_stats(channels: usize) -> BnParams {
        let mut p = BnParams::new(channels);
        p.stats_ready = true;
        p
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        for (name, t) in [
            ("shift", &self.shift),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if t.len() != c {
                return Err(Error::shape("batchnorm::params", format!("{name} has {} channels, scale has {c}", t.len())));
            }
        }
        if self.running_var.data().iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("batchnorm::params", "negative running variance"));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid("batchnorm::params", format!("epsilon {} must be positive", self.epsilon)));
        }
        if !(0.0 < self.momentum && self.momentum <= 1.0) {
            return Err(Error::invalid("batchnorm::params", format!("momentum {} outside (0, 1]", self.momentum)));
        }
        Ok(())
    }
}

/// Values captured by the training forward pass that backward needs.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

fn check_input(input: &Tensor, params: &BnParams, context: &'static str) -> Result<[usize; 4]> {
    params.validate()?;
    let dims = input.dims4()?;
    if dims[1] != params.channels() {
        return Err(Error::shape(
            context,
            format!("input has {} channels, params have {}", dims[1], params.channels()),
        ));
    }
    Ok(dims)
}

/// Training-mode forward. Returns the normalized output, the cache for
/// backward, and parameters with updated running statistics.
pub fn bn_forward_train(input: &Tensor, params: &BnParams) -> Result<(Tensor, BnCache, BnParams)> {
    let [n, c, h, w] = check_input(input, params, "batchnorm::train")?;
    let m = n * h * w;
    if m < 2 {
        return Err(Error::invalid(
            "batchnorm::train",
            format!("batch statistics need at least 2 values per channel, got {m}"),
        ));
    }

    let plane = h * w;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut acc = 0.0;
        for s in 0..n {
            let base = (s * c + ch) * plane;
            acc += input.data()[base..base + plane].iter().sum::<f64>();
        }
        let mu = acc / m as f64;
        let mut acc2 = 0.0;
        for s in 0..n {
            let base = (s * c + ch) * plane;
            for &v in &input.data()[base..base + plane] {
                let d = v - mu;
                acc2 += d * d;
            }
        }
        mean[ch] = mu;
        var[ch] = acc2 / m as f64;
    }

    let mut xhat = Tensor::zeros(input.shape());
    let mut out = Tensor::zeros(input.shape());
    let mut inv_std = vec![0.0; c];
    for ch in 0..c {
        let istd = 1.0 / (var[ch] + params.epsilon).sqrt();
        inv_std[ch] = istd;
        let g = params.scale.data()[ch];
        let b = params.shift.data()[ch];
        let mu = mean[ch];
        for s in 0..n {
            let base = (s * c + ch) * plane;
            for i in base..base + plane {
                let xh = (input.data()[i] - mu) * istd;
                xhat.data_mut()[i] = xh;
                out.data_mut()[i] = g * xh + b;
            }
        }
    }

    let mut updated = params.clone();
    let mom = params.momentum;
    for ch in 0..c {
        let rm = updated.running_mean.data()[ch];
        let rv = updated.running_var.data()[ch];
        updated.running_mean.data_mut()[ch] = (1.0 - mom) * rm + mom * mean[ch];
        updated.running_var.data_mut()[ch] = (1.0 - mom) * rv + mom * var[ch];
    }
    updated.stats_ready = true;

    Ok((out, BnCache { xhat, inv_std }, updated))
}

/// Inference-mode forward using the running statistics.
pub fn bn_forward_infer(input: &Tensor, params: &BnParams) -> Result<Tensor> {
    let [n, c, h, w] = check_input(input, params, "batchnorm::infer")?;
    if !params.stats_ready {
        return Err(Error::invalid(
            "batchnorm::infer",
            "running statistics not initialized (train at least one step or load a checkpoint)",
        ));
    }
    let plane = h * w;
    let mut out = Tensor::zeros(input.shape());
    for ch in 0..c {
        let istd = 1.0 / (params.running_var.data()[ch] + params.epsilon).sqrt();
        let mu = params.running_mean.data()[ch];
        let g = params.scale.data()[ch];
        let b = params.shift.data()[ch];
        for s in 0..n {
            let base = (s * c + ch) * plane;
            for i in base..base + plane {
                out.data_mut()[i] = g * (input.data()[i] - mu) * istd + b;
            }
        }
    }
    Ok(out)
}

/// Exact adjoint of `bn_forward_train` with the batch statistics treated as
/// functions of the input. Returns `(grad_input, grad_scale, grad_shift)`.
pub fn bn_backward(grad_out: &Tensor, cache: &BnCache, params: &BnParams) -> Result<(Tensor, Tensor, Tensor)> {
    let [n, c, h, w] = check_input(grad_out, params, "batchnorm::backward")?;
    grad_out.check_same_shape(&cache.xhat, "batchnorm::backward")?;
    if cache.inv_std.len() != c {
        return Err(Error::shape(
            "batchnorm::backward",
            format!("cache has {} channels, grad_out has {c}", cache.inv_std.len()),
        ));
    }
    let plane = h * w;
    let m = (n * plane) as f64;

    let mut grad_input = Tensor::zeros(grad_out.shape());
    let mut grad_scale = Tensor::zeros(&[c]);
    let mut grad_shift = Tensor::zeros(&[c]);

    for ch in 0..c {
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for s in 0..n {
            let base = (s * c + ch) * plane;
            for i in base..base + plane {
                let g = grad_out.data()[i];
                sum_g += g;
                sum_gx += g * cache.xhat.data()[i];
            }
        }
        grad_shift.data_mut()[ch] = sum_g;
        grad_scale.data_mut()[ch] = sum_gx;

        let mean_g = sum_g / m;
        let mean_gx = sum_gx / m;
        let coeff = cache.inv_std[ch] * params.scale.data()[ch];
        for s in 0..n {
            let base = (s * c + ch) * plane;
            for i in base..base + plane {
                let g = grad_out.data()[i];
                let xh = cache.xhat.data()[i];
                grad_input.data_mut()[i] = coeff * (g - mean_g - xh * mean_gx);
            }
        }
    }

    Ok((grad_input, grad_scale, grad_shift))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_params(c: usize) -> BnParams {
        BnParams::with_unit_stats(c)
    }

    #[test]
    fn two_point_example_normalizes_to_plus_minus_one() {
        let input = Tensor::from_vec(&[2, 1, 1, 1], vec![0.0, 2.0]).unwrap();
        let (out, _, updated) = bn_forward_train(&input, &unit_params(1)).unwrap();
        assert!((out.data()[0] + 1.0).abs() < 1e-4);
        assert!((out.data()[1] - 1.0).abs() < 1e-4);
        // Batch stats: mean 1, biased var 1.
        assert!((updated.running_mean.data()[0] - 0.1).abs() < 1e-12);
        assert!((updated.running_var.data()[0] - (0.9 + 0.1)).abs() < 1e-12);
    }

    #[test]
    fn train_output_has_zero_mean_unit_var_per_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = Tensor::randn(&[4, 3, 5, 6], 1.3, &mut rng).unwrap();
        let (out, _, _) = bn_forward_train(&input, &unit_params(3)).unwrap();
        let [n, c, h, w] = out.dims4().unwrap();
        let m = (n * h * w) as f64;
        for ch in 0..c {
            let mut sum = 0.0;
            let mut sum2 = 0.0;
            for s in 0..n {
                for i in 0..h {
                    for j in 0..w {
                        let v = out.data()[out.offset4(s, ch, i, j)];
                        sum += v;
                        sum2 += v * v;
                    }
                }
            }
            let mean = sum / m;
            let var = sum2 / m - mean * mean;
            assert!(mean.abs() < 1e-6, "channel {ch} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "channel {ch} var {var}");
        }
    }

    #[test]
    fn running_stats_converge_under_repeated_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let input = Tensor::randn(&[2, 2, 4, 4], 2.0, &mut rng).unwrap();
        let mut params = unit_params(2);
        let (_, _, first) = bn_forward_train(&input, &params).unwrap();
        params = first;
        let mut batch_mean = [0.0; 2];
        let mut batch_var = [0.0; 2];
        // Recover the batch statistics from the first update.
        for ch in 0..2 {
            batch_mean[ch] = params.running_mean.data()[ch] / 0.1;
            batch_var[ch] = (params.running_var.data()[ch] - 0.9) / 0.1;
        }
        for _ in 0..300 {
            let (_, _, next) = bn_forward_train(&input, &params).unwrap();
            params = next;
        }
        for ch in 0..2 {
            assert!((params.running_mean.data()[ch] - batch_mean[ch]).abs() < 1e-9);
            assert!((params.running_var.data()[ch] - batch_var[ch]).abs() < 1e-9);
        }
    }

    #[test]
    fn infer_rejects_unready_stats_and_respects_them_when_ready() {
        let input = Tensor::from_vec(&[1, 1, 1, 2], vec![3.0, 5.0]).unwrap();
        let mut params = BnParams::new(1);
        assert!(bn_forward_infer(&input, &params).is_err());
        params.running_mean = Tensor::from_vec(&[1], vec![4.0]).unwrap();
        params.running_var = Tensor::from_vec(&[1], vec![4.0]).unwrap();
        params.stats_ready = true;
        let out = bn_forward_infer(&input, &params).unwrap();
        let istd = 1.0 / (4.0 + BN_DEFAULT_EPSILON).sqrt();
        assert!((out.data()[0] - (3.0 - 4.0) * istd).abs() < 1e-12);
        assert!((out.data()[1] - (5.0 - 4.0) * istd).abs() < 1e-12);
    }

    #[test]
    fn infer_is_elementwise_across_batch_splits() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let input = Tensor::randn(&[4, 2, 3, 3], 1.0, &mut rng).unwrap();
        let mut params = unit_params(2);
        let (_, _, trained) = bn_forward_train(&input, &params).unwrap();
        params = trained;
        let full = bn_forward_infer(&input, &params).unwrap();
        let half = input.len() / 2;
        let a = Tensor::from_vec(&[2, 2, 3, 3], input.data()[..half].to_vec()).unwrap();
        let b = Tensor::from_vec(&[2, 2, 3, 3], input.data()[half..].to_vec()).unwrap();
        let oa = bn_forward_infer(&a, &params).unwrap();
        let ob = bn_forward_infer(&b, &params).unwrap();
        let mut joined = oa.data().to_vec();
        joined.extend_from_slice(ob.data());
        assert_eq!(full.data(), &joined[..]);
    }

    #[test]
    fn backward_null_space_sum_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let input = Tensor::randn(&[3, 2, 4, 4], 1.0, &mut rng).unwrap();
        let grad = Tensor::randn(&[3, 2, 4, 4], 1.0, &mut rng).unwrap();
        let params = unit_params(2);
        let (_, cache, _) = bn_forward_train(&input, &params).unwrap();
        let (gi, _, _) = bn_backward(&grad, &cache, &params).unwrap();
        let [n, c, h, w] = gi.dims4().unwrap();
        for ch in 0..c {
            let mut sum = 0.0;
            for s in 0..n {
                for i in 0..h {
                    for j in 0..w {
                        sum += gi.data()[gi.offset4(s, ch, i, j)];
                    }
                }
            }
            assert!(sum.abs() / ((n * h * w) as f64) < 1e-9);
        }
    }

    #[test]
    fn backward_is_orthogonal_to_xhat_for_small_epsilon() {
        // The scale direction is only a null direction of the exact map in
        // the epsilon -> 0 limit, so probe it with a tiny epsilon.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let input = Tensor::randn(&[2, 1, 4, 4], 1.0, &mut rng).unwrap();
        let grad = Tensor::randn(&[2, 1, 4, 4], 1.0, &mut rng).unwrap();
        let mut params = unit_params(1);
        params.epsilon = 1e-10;
        let (_, cache, _) = bn_forward_train(&input, &params).unwrap();
        let (gi, _, _) = bn_backward(&grad, &cache, &params).unwrap();
        let dot = gi.dot(&cache.xhat).unwrap();
        assert!(dot.abs() / (gi.len() as f64) < 1e-9, "sum(grad_input * xhat) = {dot}");
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let input = Tensor::randn(&[2, 2, 3, 3], 1.0, &mut rng).unwrap();
        let weight = Tensor::randn(&[2, 2, 3, 3], 1.0, &mut rng).unwrap();
        let mut params = unit_params(2);
        params.scale = Tensor::from_vec(&[2], vec![1.3, 0.7]).unwrap();
        params.shift = Tensor::from_vec(&[2], vec![0.2, -0.1]).unwrap();

        let loss_of_input = |x: &Tensor| -> f64 {
            let (out, _, _) = bn_forward_train(x, &params).unwrap();
            out.dot(&weight).unwrap()
        };
        let (_, cache, _) = bn_forward_train(&input, &params).unwrap();
        let (gi, gs, gb) = bn_backward(&weight, &cache, &params).unwrap();

        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for idx in [0usize, 7, 16, 31] {
            let mut xp = input.clone();
            xp.data_mut()[idx] += h;
            let mut xm = input.clone();
            xm.data_mut()[idx] -= h;
            let numeric = (loss_of_input(&xp) - loss_of_input(&xm)) / (2.0 * h);
            let a = gi.data()[idx];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12));
        }
        for ch in 0..2 {
            for (target, analytic) in [(true, gs.data()[ch]), (false, gb.data()[ch])] {
                let mut pp = params.clone();
                let mut pm = params.clone();
                if target {
                    pp.scale.data_mut()[ch] += h;
                    pm.scale.data_mut()[ch] -= h;
                } else {
                    pp.shift.data_mut()[ch] += h;
                    pm.shift.data_mut()[ch] -= h;
                }
                let f = |p: &BnParams| {
                    let (out, _, _) = bn_forward_train(&input, p).unwrap();
                    out.dot(&weight).unwrap()
                };
                let numeric = (f(&pp) - f(&pm)) / (2.0 * h);
                worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12));
            }
        }
        assert!(worst < 1e-6, "max relative error {worst}");
    }

    #[test]
    fn rejects_single_value_batch_and_channel_mismatch() {
        let one = Tensor::zeros(&[1, 1, 1, 1]);
        assert!(bn_forward_train(&one, &unit_params(1)).is_err());
        let input = Tensor::zeros(&[1, 3, 2, 2]);
        assert!(bn_forward_train(&input, &unit_params(2)).is_err());
    }

    #[test]
    fn validate_rejects_negative_running_var() {
        let mut params = unit_params(1);
        params.running_var = Tensor::from_vec(&[1], vec![-0.5]).unwrap();
        assert!(params.validate().is_err());
    }
}
