//! Spatially-variant regularization weights: a per-region hyperparameter
//! vector rasterized through a label map, optionally Gaussian-smoothed so the
//! weight field has no jumps at region boundaries.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::ops;

pub const LAMBDA_MIN: f64 = 0.0;
pub const LAMBDA_MAX: f64 = 10.0;
pub const DEFAULT_SIGMA: f64 = 0.8;
pub const DEFAULT_WINDOW: usize = 5;

/// Region naming for the five-region brain protocol, indexed by region id.
pub const BRAIN_REGIONS: [&str; 5] = [
    "background",
    "cortex",
    "subcortical-grey",
    "white-matter",
    "csf",
];

/// Integer region ids on a regular grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    shape: Vec<usize>,
    data: Vec<u32>,
    regions: usize,
}

impl LabelMap {
    pub fn new(shape: Vec<usize>, data: Vec<u32>, regions: usize) -> Result<Self> {
        if regions == 0 {
            return Err(invalid!("label map needs at least one region"));
        }
        if shape.is_empty() || data.len() != shape.iter().product::<usize>() {
            return Err(invalid!("{} labels for shape {shape:?}", data.len()));
        }
        if let Some(bad) = data.iter().find(|&&v| v as usize >= regions) {
            return Err(invalid!("label id {bad} out of range for {regions} regions"));
        }
        Ok(Self { shape, data, regions })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.regions];
        for &v in &self.data {
            h[v as usize] += 1;
        }
        h
    }

    /// One-hot masks `(1, K, *shape)`.
    pub fn one_hot(&self, dtype: DType) -> Result<Tensor> {
        let n = self.data.len();
        let mut v = vec![0f32; self.regions * n];
        for (i, &l) in self.data.iter().enumerate() {
            v[l as usize * n + i] = 1.0;
        }
        let mut dims = vec![1, self.regions];
        dims.extend_from_slice(&self.shape);
        Ok(Tensor::from_vec(v, dims, &Device::Cpu)?.to_dtype(dtype)?)
    }
}

/// Gaussian smoothing parameters for the weight field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Smoothing {
    pub sigma: f64,
    pub window: usize,
}

impl Default for Smoothing {
    fn default() -> Self {
        Self {
            sigma: DEFAULT_SIGMA,
            window: DEFAULT_WINDOW,
        }
    }
}

/// Which weight field conditions the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    Smoothed,
    Raw,
}

/// Hyperparameter vector plus its rasterized fields.
#[derive(Debug, Clone)]
pub struct RegWeights {
    pub lambdas: Vec<f64>,
    /// Λ, `(1, 1, *shape)`.
    pub raw: Tensor,
    /// Λ_gau, `(1, 1, *shape)`.
    pub smoothed: Tensor,
    pub smoothing: Smoothing,
}

impl RegWeights {
    pub fn build(labels: &LabelMap, lambdas: &[f64], smoothing: Smoothing) -> Result<Self> {
        let lambdas = clamp_lambdas(lambdas)?;
        let raw = build_weight_matrix(labels, &lambdas)?;
        let smoothed = gaussian_smooth(&raw, smoothing.sigma, smoothing.window)?;
        Ok(Self {
            lambdas,
            raw,
            smoothed,
            smoothing,
        })
    }

    pub fn field(&self, mode: WeightMode) -> &Tensor {
        match mode {
            WeightMode::Smoothed => &self.smoothed,
            WeightMode::Raw => &self.raw,
        }
    }
}

/// Project into the trained range; rejects non-finite entries.
pub fn clamp_lambdas(lambdas: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = lambdas.iter().find(|v| !v.is_finite()) {
        return Err(invalid!("non-finite regularization weight {bad}"));
    }
    Ok(lambdas
        .iter()
        .map(|&v| {
            if !(LAMBDA_MIN..=LAMBDA_MAX).contains(&v) {
                log::warn!("regularization weight {v} clamped to [{LAMBDA_MIN}, {LAMBDA_MAX}]");
            }
            v.clamp(LAMBDA_MIN, LAMBDA_MAX)
        })
        .collect())
}

/// Λ(x) = λ[label(x)], as `(1, 1, *shape)` f32.
pub fn build_weight_matrix(labels: &LabelMap, lambdas: &[f64]) -> Result<Tensor> {
    if lambdas.len() != labels.regions() {
        return Err(invalid!(
            "{} weights for {} regions",
            lambdas.len(),
            labels.regions()
        ));
    }
    let lambdas = clamp_lambdas(lambdas)?;
    let v: Vec<f32> = labels.data().iter().map(|&l| lambdas[l as usize] as f32).collect();
    let mut dims = vec![1, 1];
    dims.extend_from_slice(labels.shape());
    Ok(Tensor::from_vec(v, dims, &Device::Cpu)?)
}

/// Differentiable rasterization: `one_hot` `(B, K, *S)`, `lambdas` `(B, K)`
/// → `(B, 1, *S)`.
pub fn weight_field(one_hot: &Tensor, lambdas: &Tensor) -> Result<Tensor> {
    let (b, k) = lambdas.dims2()?;
    if one_hot.dim(1)? != k {
        return Err(invalid!("{} weights for {} one-hot channels", k, one_hot.dim(1)?));
    }
    let mut shape = vec![b, k];
    shape.extend(std::iter::repeat_n(1, one_hot.rank() - 2));
    Ok(one_hot.broadcast_mul(&lambdas.reshape(shape)?)?.sum_keepdim(1)?)
}

/// Normalized Gaussian taps on `window` integer offsets centred at zero.
pub fn gaussian_kernel(sigma: f64, window: usize) -> Result<Vec<f64>> {
    if window % 2 == 0 {
        return Err(invalid!("smoothing window must be odd, got {window}"));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(invalid!("smoothing sigma must be positive, got {sigma}"));
    }
    let r = (window / 2) as i64;
    let taps: Vec<f64> = (-r..=r)
        .map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / total).collect())
}

/// Separable Gaussian smoothing with edge replication.
pub fn gaussian_smooth(field: &Tensor, sigma: f64, window: usize) -> Result<Tensor> {
    let taps = gaussian_kernel(sigma, window)?;
    ops::filter_separable(field, &taps)
}

/// Bring a full-resolution weight field down `scale` halvings with the
/// pyramid's block-mean rule.
pub fn resample_weights(field: &Tensor, scale: usize) -> Result<Tensor> {
    let mut out = field.clone();
    for _ in 0..scale {
        let spatial = &out.dims()[2..];
        if spatial.iter().any(|&n| n % 2 != 0 || n < 4) {
            return Err(invalid!(
                "cannot resample weights {:?} by {scale} halvings",
                &field.dims()[2..]
            ));
        }
        out = ops::downsample2(&out)?;
    }
    Ok(out)
}
