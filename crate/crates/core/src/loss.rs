//! Training objective: data fidelity plus a gray-matter prior.
//!
//! For a batch of N patches with network residual `t_y`, prediction
//! `y_hat = y + t_y`, reference `x`, and scaled GM prior map `gamma`:
//!
//! ```text
//! data  = 1/(2N) * sum ||y_hat - x||^2
//! prior = 1/(2N) * sum ||y_hat - gamma||^2
//! total = data + alpha * prior
//! ```
//!
//! The gradient with respect to `t_y` (equivalently `y_hat`) is
//! `(y_hat - x)/N + alpha * (y_hat - gamma)/N`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub data_term: f64,
    pub prior_term: f64,
    pub alpha: f64,
    pub total: f64,
}

fn check(y: &Tensor, t_y: &Tensor, x: &Tensor, gamma: &Tensor, alpha: f64) -> Result<usize> {
    y.check_same_shape(t_y, "loss: y vs t_y")?;
    y.check_same_shape(x, "loss: y vs x")?;
    y.check_same_shape(gamma, "loss: y vs gamma")?;
    let [n, _, _, _] = y.dims4()?;
    if n == 0 {
        return Err(Error::invalid("loss", "empty batch"));
    }
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::invalid("loss", format!("alpha {alpha} must be finite and >= 0")));
    }
    Ok(n)
}

pub fn loss_forward(y: &Tensor, t_y: &Tensor, x: &Tensor, gamma: &Tensor, alpha: f64) -> Result<LossTerms> {
    let n = check(y, t_y, x, gamma, alpha)? as f64;
    let mut data = 0.0;
    let mut prior = 0.0;
    for i in 0..y.len() {
        let y_hat = y.data()[i] + t_y.data()[i];
        let dd = y_hat - x.data()[i];
        let dp = y_hat - gamma.data()[i];
        data += dd * dd;
        prior += dp * dp;
    }
    let data_term = data / (2.0 * n);
    let prior_term = prior / (2.0 * n);
    let total = data_term + alpha * prior_term;
    if !total.is_finite() {
        return Err(Error::non_finite("loss", format!("total {total} (data {data_term}, prior {prior_term})")));
    }
    Ok(LossTerms { data_term, prior_term, alpha, total })
}

/// Gradient of the total loss with respect to the residual `t_y`.
pub fn loss_backward(y: &Tensor, t_y: &Tensor, x: &Tensor, gamma: &Tensor, alpha: f64) -> Result<Tensor> {
    let n = check(y, t_y, x, gamma, alpha)? as f64;
    let mut grad = Tensor::zeros(y.shape());
    for i in 0..y.len() {
        let y_hat = y.data()[i] + t_y.data()[i];
        grad.data_mut()[i] = (y_hat - x.data()[i]) / n + alpha * (y_hat - gamma.data()[i]) / n;
    }
    Ok(grad)
}
