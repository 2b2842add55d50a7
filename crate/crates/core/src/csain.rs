//! Conditional spatially-adaptive instance normalization (CSAIN).
//!
//! Features are instance-normalized per channel and then modulated by a
//! per-voxel scale and bias predicted from the regularization weight field:
//!
//! ```text
//! h'_i = gamma_i(W) * (h_i - mean(h_i)) / std(h_i) + beta_i(W)
//! ```
//!
//! The scale and bias maps have the full spatial size of the features, so
//! different regions of one feature map can be modulated differently.

use candle_core::Tensor;

use crate::error::{invalid, Result};
use crate::layers::{Conv, Init, ParamInit, LEAKY_SLOPE};
use crate::ops::{self, Padding};

pub const EPSILON: f64 = 1e-5;

/// Zero-mean, unit-variance per (instance, channel) over spatial axes.
pub fn instance_normalize(h: &Tensor, epsilon: f64) -> Result<Tensor> {
    if h.rank() < 3 {
        return Err(invalid!("instance norm needs (B, C, *spatial), got {:?}", h.dims()));
    }
    let (b, c) = (h.dim(0)?, h.dim(1)?);
    let flat = h.reshape((b, c, ()))?;
    let mean = flat.mean_keepdim(2)?;
    let centred = flat.broadcast_sub(&mean)?;
    let var = centred.sqr()?.mean_keepdim(2)?;
    let out = centred.broadcast_div(&(var + epsilon)?.sqrt()?)?;
    Ok(out.reshape(h.dims())?)
}

/// One CSAIN layer: shared embedding conv of the weight field, then parallel
/// convs producing the scale (as `1 + output`) and the bias.
#[derive(Debug, Clone)]
pub struct CsainLayer {
    pub embed_shared: Conv,
    pub embed_gamma: Conv,
    pub embed_beta: Conv,
    pub epsilon: f64,
}

impl CsainLayer {
    /// `channels` features, embedding width `embed`. Gamma and beta convs
    /// start at zero so a fresh layer is plain instance normalization.
    pub fn new(init: &mut ParamInit, name: &str, dims: usize, channels: usize, embed: usize) -> Result<Self> {
        let embed_shared = Conv::new(
            init,
            &format!("{name}.embed_shared"),
            dims,
            1,
            embed,
            3,
            1,
            Padding::Replicate,
            Init::He,
        )?;
        let embed_gamma = Conv::new(
            init,
            &format!("{name}.embed_gamma"),
            dims,
            embed,
            channels,
            3,
            1,
            Padding::Replicate,
            Init::Zeros,
        )?;
        let embed_beta = Conv::new(
            init,
            &format!("{name}.embed_beta"),
            dims,
            embed,
            channels,
            3,
            1,
            Padding::Replicate,
            Init::Zeros,
        )?;
        Ok(Self {
            embed_shared,
            embed_gamma,
            embed_beta,
            epsilon: EPSILON,
        })
    }

    pub fn channels(&self) -> usize {
        self.embed_gamma.out_ch
    }

    /// Scale and bias maps for a weight field already at feature resolution.
    pub fn modulation(&self, p: &[Tensor], cond: &Tensor) -> Result<(Tensor, Tensor)> {
        let emb = ops::leaky_relu(&self.embed_shared.forward(p, cond)?, LEAKY_SLOPE)?;
        let gamma = (self.embed_gamma.forward(p, &emb)? + 1.0)?;
        let beta = self.embed_beta.forward(p, &emb)?;
        Ok((gamma, beta))
    }

    pub fn forward(&self, p: &[Tensor], h: &Tensor, cond: &Tensor) -> Result<Tensor> {
        if h.dims()[2..] != cond.dims()[2..] || h.dim(0)? != cond.dim(0)? {
            return Err(invalid!(
                "features {:?} and weight field {:?} are not on the same grid",
                h.dims(),
                cond.dims()
            ));
        }
        if h.dim(1)? != self.channels() {
            return Err(invalid!("layer modulates {} channels, got {}", self.channels(), h.dim(1)?));
        }
        let (gamma, beta) = self.modulation(p, cond)?;
        let normed = instance_normalize(h, self.epsilon)?;
        Ok(((gamma * normed)? + beta)?)
    }
}

/// Pre-activation residual block:
/// `x -> CSAIN -> LeakyReLU -> conv -> CSAIN -> LeakyReLU -> conv -> (+ x)`.
#[derive(Debug, Clone)]
pub struct CsainBlock {
    pub norm1: CsainLayer,
    pub conv1: Conv,
    pub norm2: CsainLayer,
    pub conv2: Conv,
}

impl CsainBlock {
    pub fn new(init: &mut ParamInit, name: &str, dims: usize, channels: usize) -> Result<Self> {
        let norm1 = CsainLayer::new(init, &format!("{name}.norm1"), dims, channels, channels)?;
        let conv1 = Conv::new(
            init,
            &format!("{name}.conv1"),
            dims,
            channels,
            channels,
            3,
            1,
            Padding::Zeros,
            Init::He,
        )?;
        let norm2 = CsainLayer::new(init, &format!("{name}.norm2"), dims, channels, channels)?;
        let conv2 = Conv::new(
            init,
            &format!("{name}.conv2"),
            dims,
            channels,
            channels,
            3,
            1,
            Padding::Zeros,
            Init::He,
        )?;
        Ok(Self {
            norm1,
            conv1,
            norm2,
            conv2,
        })
    }

    pub fn forward(&self, p: &[Tensor], x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let h = ops::leaky_relu(&self.norm1.forward(p, x, cond)?, LEAKY_SLOPE)?;
        let h = self.conv1.forward(p, &h)?;
        let h = ops::leaky_relu(&self.norm2.forward(p, &h, cond)?, LEAKY_SLOPE)?;
        let h = self.conv2.forward(p, &h)?;
        if h.dims() != x.dims() {
            return Err(invalid!("residual branch {:?} does not match skip {:?}", h.dims(), x.dims()));
        }
        Ok((h + x)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn stats(t: &Tensor) -> (f64, f64) {
        let v: Vec<f64> = t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let s = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
        (m, s)
    }

    #[test]
    fn normalizes_ramp_channel() {
        let h = Tensor::new(&[1.0f64, 2.0, 3.0, 4.0], &Device::Cpu).unwrap().reshape((1, 1, 2, 2)).unwrap();
        let (m, s) = stats(&instance_normalize(&h, EPSILON).unwrap());
        assert!(m.abs() < 1e-12);
        assert!((s - 1.0).abs() < 1e-4);
    }

    #[test]
    fn constant_channel_maps_to_zero() {
        let h = Tensor::full(7.0f64, (1, 2, 3, 3), &Device::Cpu).unwrap();
        let out: Vec<f64> = instance_normalize(&h, EPSILON).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(out.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn affine_input_gives_same_output() {
        let h = Tensor::randn(0f64, 1.0, (2, 3, 5, 5), &Device::Cpu).unwrap();
        let a = instance_normalize(&h, EPSILON).unwrap();
        let b = instance_normalize(&h.affine(3.0, -2.0).unwrap(), EPSILON).unwrap();
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        // only the epsilon guard differs between the two
        assert!(diff < 1e-4);
    }

    #[test]
    fn mismatched_grid_is_rejected() {
        let mut init = ParamInit::new(0, DType::F64);
        let layer = CsainLayer::new(&mut init, "n", 2, 2, 2).unwrap();
        let p = init.finish().unwrap().live();
        let h = Tensor::zeros((1, 2, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let cond = Tensor::zeros((1, 1, 4, 5), DType::F64, &Device::Cpu).unwrap();
        assert!(layer.forward(&p, &h, &cond).is_err());
    }
}
