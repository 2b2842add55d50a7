//! Differentiable building blocks on channel-first tensors `(B, C, *spatial)`.

pub mod filters;
pub mod patches;
pub mod sampler;

pub use filters::{box_sum, downsample2, filter_axis, filter_separable, upsample2};
pub use patches::{col2im, im2col, Padding, PatchIndex};
pub use sampler::sample;

use candle_core::Tensor;

pub fn spatial_dims(t: &Tensor) -> &[usize] {
    &t.dims()[2..]
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> candle_core::Result<Tensor> {
    x.maximum(&x.affine(slope, 0.0)?)
}

pub fn scalar(t: &Tensor) -> candle_core::Result<f64> {
    t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()
}
