//! 2-d convolution with zero same-padding, NCHW layout.
//!
//! Forward and backward are expressed as im2col plus a dense matrix product.
//! The column buffer is built per sample, so peak memory stays at
//! `C*K*K x H*W` doubles regardless of batch size. The backward pass is the
//! exact adjoint of the forward: `grad_input = W^T applied through col2im`,
//! `grad_weights = grad_out * columns^T` accumulated over the batch in a
//! fixed order, `grad_bias = sum of grad_out per output channel`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Debug, Clone)]
pub struct ConvParams {
    /// `[out_channels, in_channels, kernel, kernel]`
    pub weights: Tensor,
    /// `[out_channels]`
    pub bias: Tensor,
}

impl ConvParams {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<ConvParams> {
        let [o, _i, kh, kw] = weights.dims4()?;
        if kh != kw {
            return Err(Error::invalid("conv::params", format!("kernel must be square, got {kh}x{kw}")));
        }
        if bias.shape() != [o] {
            return Err(Error::shape(
                "conv::params",
                format!("bias {:?} does not match {o} output channels", bias.shape()),
            ));
        }
        Ok(ConvParams { weights, bias })
    }

    /// He-normal initialization: `N(0, 2 / (in_channels * kernel^2))`, zero bias.
    pub fn he_init<R: Rng>(out_channels: usize, in_channels: usize, kernel: usize, rng: &mut R) -> Result<ConvParams> {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        let weights = Tensor::randn(&[out_channels, in_channels, kernel, kernel], std, rng)?;
        let bias = Tensor::zeros(&[out_channels]);
        Ok(ConvParams { weights, bias })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weights.shape()[2]
    }
}

#[derive(Debug)]
pub struct ConvGrads {
    pub grad_input: Tensor,
    pub grad_weights: Tensor,
    pub grad_bias: Tensor,
}

fn validate(input: &Tensor, params: &ConvParams, pad: usize) -> Result<[usize; 4]> {
    let dims = input.dims4()?;
    let [n, c, h, w] = dims;
    let k = params.kernel();
    if k.is_multiple_of(2) {
        return Err(Error::invalid("conv", format!("even kernel size {k}: same-padding undefined")));
    }
    if pad != (k - 1) / 2 {
        return Err(Error::invalid("conv", format!("pad {pad} must equal (kernel-1)/2 = {}", (k - 1) / 2)));
    }
    if c != params.in_channels() {
        return Err(Error::shape(
            "conv",
            format!("input has {c} channels, weights expect {}", params.in_channels()),
        ));
    }
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::invalid("conv", format!("degenerate input shape {:?}", input.shape())));
    }
    Ok(dims)
}

/// Row-major matrix product `c[m x n] (+)= a[m x k_dim] * b[k_dim x n]`.
/// Strides are passed explicitly so transposed views need no copies.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k_dim: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k_dim,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Gathers one sample into `cols[c*k*k + u*k + v, i*w + j] = x[c, i+u-pad, j+v-pad]`
/// with zeros outside the image.
fn im2col(sample: &[f64], c: usize, h: usize, w: usize, k: usize, pad: usize, cols: &mut [f64]) {
    let plane = h * w;
    cols.fill(0.0);
    let mut row = 0;
    for ch in 0..c {
        let src_plane = &sample[ch * plane..(ch + 1) * plane];
        for u in 0..k {
            for v in 0..k {
                let dst_row = &mut cols[row * plane..(row + 1) * plane];
                // Output pixel (i, j) reads input (i + u - pad, j + v - pad).
                let di = u as isize - pad as isize;
                let dj = v as isize - pad as isize;
                let i_lo = (-di).max(0) as usize;
                let i_hi = ((h as isize - di).min(h as isize)).max(0) as usize;
                let j_lo = (-dj).max(0) as usize;
                let j_hi = ((w as isize - dj).min(w as isize)).max(0) as usize;
                for i in i_lo..i_hi {
                    let src_off = (i as isize + di) as usize * w;
                    let dst_off = i * w;
                    for j in j_lo..j_hi {
                        dst_row[dst_off + j] = src_plane[src_off + (j as isize + dj) as usize];
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add adjoint of `im2col`.
fn col2im_add(cols: &[f64], c: usize, h: usize, w: usize, k: usize, pad: usize, sample: &mut [f64]) {
    let plane = h * w;
    let mut row = 0;
    for ch in 0..c {
        let dst_plane = &mut sample[ch * plane..(ch + 1) * plane];
        for u in 0..k {
            for v in 0..k {
                let src_row = &cols[row * plane..(row + 1) * plane];
                let di = u as isize - pad as isize;
                let dj = v as isize - pad as isize;
                let i_lo = (-di).max(0) as usize;
                let i_hi = ((h as isize - di).min(h as isize)).max(0) as usize;
                let j_lo = (-dj).max(0) as usize;
                let j_hi = ((w as isize - dj).min(w as isize)).max(0) as usize;
                for i in i_lo..i_hi {
                    let si = (i as isize + di) as usize;
                    let src_off = i * w;
                    let dst_off = si * w;
                    for j in j_lo..j_hi {
                        dst_plane[dst_off + (j as isize + dj) as usize] += src_row[src_off + j];
                    }
                }
                row += 1;
            }
        }
    }
}

/// Same-padded convolution; output shape equals `[N, out_channels, H, W]`.
pub fn conv2d_forward(input: &Tensor, params: &ConvParams, pad: usize) -> Result<Tensor> {
    let [n, c, h, w] = validate(input, params, pad)?;
    let k = params.kernel();
    let o = params.out_channels();
    let plane = h * w;
    let ckk = c * k * k;

    let mut output = Tensor::zeros(&[n, o, h, w]);
    let mut cols = vec![0.0; ckk * plane];
    let wmat = params.weights.data();
    let bias = params.bias.data();

    for s in 0..n {
        let sample = &input.data()[s * c * plane..(s + 1) * c * plane];
        im2col(sample, c, h, w, k, pad, &mut cols);
        let out_sample = &mut output.data_mut()[s * o * plane..(s + 1) * o * plane];
        gemm(o, ckk, plane, wmat, ckk as isize, 1, &cols, plane as isize, 1, 0.0, out_sample);
        for oc in 0..o {
            let b = bias[oc];
            if b != 0.0 {
                for v in &mut out_sample[oc * plane..(oc + 1) * plane] {
                    *v += b;
                }
            }
        }
    }
    Ok(output)
}

/// Gradients of a scalar loss with respect to input, weights, and bias, given
/// the upstream gradient `grad_out` and the forward input.
pub fn conv2d_backward(grad_out: &Tensor, input: &Tensor, params: &ConvParams, pad: usize) -> Result<ConvGrads> {
    let [n, c, h, w] = validate(input, params, pad)?;
    let k = params.kernel();
    let o = params.out_channels();
    let expected = [n, o, h, w];
    if grad_out.dims4()? != expected {
        return Err(Error::shape(
            "conv::backward",
            format!("grad_out {:?} does not match output shape {expected:?}", grad_out.shape()),
        ));
    }
    let plane = h * w;
    let ckk = c * k * k;

    let mut grad_input = Tensor::zeros(input.shape());
    let mut grad_weights = Tensor::zeros(params.weights.shape());
    let mut grad_bias = Tensor::zeros(&[o]);

    let mut cols = vec![0.0; ckk * plane];
    let mut cols_grad = vec![0.0; ckk * plane];
    let wmat = params.weights.data();

    {
        let gb = grad_bias.data_mut();
        for s in 0..n {
            let go = &grad_out.data()[s * o * plane..(s + 1) * o * plane];
            for oc in 0..o {
                gb[oc] += go[oc * plane..(oc + 1) * plane].iter().sum::<f64>();
            }
        }
    }

    for s in 0..n {
        let sample = &input.data()[s * c * plane..(s + 1) * c * plane];
        let go = &grad_out.data()[s * o * plane..(s + 1) * o * plane];

        // grad_weights += grad_out_s [O x HW] * cols_s^T [HW x CKK]
        im2col(sample, c, h, w, k, pad, &mut cols);
        gemm(
            o,
            plane,
            ckk,
            go,
            plane as isize,
            1,
            &cols,
            1,
            plane as isize,
            1.0,
            grad_weights.data_mut(),
        );

        // cols_grad [CKK x HW] = W^T [CKK x O] * grad_out_s [O x HW]
        gemm(ckk, o, plane, wmat, 1, ckk as isize, go, plane as isize, 1, 0.0, &mut cols_grad);
        let gi_sample = &mut grad_input.data_mut()[s * c * plane..(s + 1) * c * plane];
        col2im_add(&cols_grad, c, h, w, k, pad, gi_sample);
    }

    Ok(ConvGrads { grad_input, grad_weights, grad_bias })
}
