//! Rectified linear activation.

use crate::error::Result;
use crate::tensor::Tensor;

/// Returns `(max(x, 0), mask)` where the mask holds 1.0 exactly where the
/// input was strictly positive. The subgradient at 0 is taken as 0.
pub fn relu_forward(input: &Tensor) -> (Tensor, Tensor) {
    let out = input.map(|v| if v > 0.0 { v } else { 0.0 });
    let mask = input.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    (out, mask)
}

/// Propagates the upstream gradient through the mask captured in forward.
pub fn relu_backward(grad_out: &Tensor, mask: &Tensor) -> Result<Tensor> {
    grad_out.zip_map(mask, "relu::backward", |g, m| g * m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_clamps_negatives_and_keeps_positives() {
        let x = Tensor::from_vec(&[5], vec![-2.0, -0.0, 0.0, 0.5, 3.0]).unwrap();
        let (y, mask) = relu_forward(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 0.0, 0.5, 3.0]);
        assert_eq!(mask.data(), &[0.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_passes_gradient_only_where_active() {
        let x = Tensor::from_vec(&[4], vec![-1.0, 0.0, 2.0, -3.0]).unwrap();
        let (_, mask) = relu_forward(&x);
        let g = Tensor::from_vec(&[4], vec![10.0, 20.0, 30.0, 40.0]).unwrap();
        let gi = relu_backward(&g, &mask).unwrap();
        assert_eq!(gi.data(), &[0.0, 0.0, 30.0, 0.0]);
    }

    #[test]
    fn zero_input_has_zero_subgradient() {
        let x = Tensor::zeros(&[3]);
        let (_, mask) = relu_forward(&x);
        assert_eq!(mask.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_shape_mismatch() {
        let g = Tensor::zeros(&[2, 2]);
        let mask = Tensor::zeros(&[4]);
        assert!(relu_backward(&g, &mask).is_err());
    }
}
