//! Similarity, regularization and overlap objectives.

use candle_core::{DType, Tensor};

use crate::error::{invalid, Result};
use crate::grid;
use crate::ops;
use crate::weighting::resample_weights;

pub const EPSILON: f64 = 1e-5;

/// Mean local normalized cross-correlation over `window`^D neighbourhoods.
/// Inputs are `(B, C, *S)`; windows replicate edge values.
pub fn ncc_windowed(a: &Tensor, b: &Tensor, window: usize) -> Result<Tensor> {
    if window % 2 == 0 {
        return Err(invalid!("correlation window must be odd, got {window}"));
    }
    if a.dims() != b.dims() {
        return Err(invalid!("correlation of {:?} with {:?}", a.dims(), b.dims()));
    }
    let c = a.dim(1)?;
    let n = (window as f64).powi(a.rank() as i32 - 2);
    let stacked = Tensor::cat(&[a, b, &a.sqr()?, &b.sqr()?, &(a * b)?], 1)?;
    let means = ops::box_sum(&stacked, window)?.affine(1.0 / n, 0.0)?;
    let part = |i: usize| means.narrow(1, i * c, c);
    let (ma, mb, maa, mbb, mab) = (part(0)?, part(1)?, part(2)?, part(3)?, part(4)?);
    let cov = (mab - (&ma * &mb)?)?;
    let var_a = (maa - ma.sqr()?)?.relu()?;
    let var_b = (mbb - mb.sqr()?)?.relu()?;
    let denom = ((var_a + EPSILON)? * (var_b + EPSILON)?)?.sqrt()?;
    Ok((cov / denom)?.mean_all()?)
}

/// Voxel-mean of `weights^2 * |forward difference of u|^2`, summed over
/// displacement components and axes. `u` is `(B, D, *S)`, `weights` is
/// `(B or 1, 1, *S)` on the same grid.
pub fn weighted_diffusion(u: &Tensor, weights: &Tensor) -> Result<Tensor> {
    if u.dims()[2..] != weights.dims()[2..] || weights.dim(1)? != 1 {
        return Err(invalid!(
            "displacement {:?} and weight field {:?} do not share a grid",
            u.dims(),
            weights.dims()
        ));
    }
    let w2 = weights.sqr()?;
    let mut total: Option<Tensor> = None;
    for axis in 2..u.rank() {
        let n = u.dim(axis)?;
        if n < 2 {
            continue;
        }
        let diff = (u.narrow(axis, 1, n - 1)? - u.narrow(axis, 0, n - 1)?)?;
        let term = diff
            .sqr()?
            .sum_keepdim(1)?
            .broadcast_mul(&w2.narrow(axis, 0, n - 1)?)?
            .mean_all()?;
        total = Some(match total {
            None => term,
            Some(t) => (t + term)?,
        });
    }
    total.ok_or_else(|| invalid!("displacement grid {:?} has no differentiable axis", u.dims()))
}

/// One similarity term of the pyramid objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleTerm {
    /// Network level whose resolution this term is evaluated at (0 = coarsest).
    pub level: usize,
    pub weight: f64,
    pub window: usize,
    pub ncc: f64,
}

#[derive(Debug, Clone)]
pub struct LossTerms {
    /// Weighted, negated NCC sum.
    pub similarity: Tensor,
    pub regularizer: Tensor,
    pub total: Tensor,
    pub scales: Vec<ScaleTerm>,
}

impl LossTerms {
    pub fn values(&self) -> Result<(f64, f64, f64)> {
        Ok((
            ops::scalar(&self.similarity)?,
            ops::scalar(&self.regularizer)?,
            ops::scalar(&self.total)?,
        ))
    }
}

/// Correlation window used at network level `level` (0 = coarsest).
pub fn level_window(level: usize) -> usize {
    3 + 2 * level
}

/// Objective of network level `level` (0 = coarsest of `levels`).
///
/// `fixed` and `moving` are pyramids indexed by scale (halvings), `u` is the
/// level's displacement on its own grid and `weights` the full-resolution
/// weight field. Similarity is evaluated at this level and every coarser
/// one by downsampling the warped image, each term weighted by
/// `1 / 2^(level - i)` with window `3 + 2 i`; the regularizer is evaluated
/// once at this level's resolution on the displacement rescaled so the grid
/// spans `span` units along every axis (2 gives `[-1, 1]` coordinates).
pub fn pyramid_objective(
    fixed: &[Tensor],
    moving: &[Tensor],
    u: &Tensor,
    weights: &Tensor,
    level: usize,
    levels: usize,
    span: f64,
) -> Result<LossTerms> {
    if level >= levels {
        return Err(invalid!("level {level} outside a {levels}-level pyramid"));
    }
    if fixed.len() < levels || moving.len() < levels {
        return Err(invalid!("pyramids must have {levels} scales"));
    }
    let scale = levels - 1 - level;
    let mut warped = grid::warp_by_displacement(&moving[scale], u)?;
    let mut similarity: Option<Tensor> = None;
    let mut scales = Vec::with_capacity(level + 1);
    for i in (0..=level).rev() {
        if i < level {
            warped = ops::downsample2(&warped)?;
        }
        let depth = level - i;
        let weight = 1.0 / (1u64 << depth) as f64;
        let window = level_window(i);
        let ncc = ncc_windowed(&fixed[scale + depth], &warped, window)?;
        scales.push(ScaleTerm {
            level: i,
            weight,
            window,
            ncc: ops::scalar(&ncc)?,
        });
        let term = ncc.affine(-weight, 0.0)?;
        similarity = Some(match similarity {
            None => term,
            Some(s) => (s + term)?,
        });
    }
    scales.reverse();
    let similarity = similarity.expect("at least one scale");
    let w = resample_weights(&weights.to_dtype(u.dtype())?, scale)?;
    let regularizer = weighted_diffusion(&normalized_displacement(u, span)?, &w)?;
    let total = (&similarity + &regularizer)?;
    Ok(LossTerms {
        similarity,
        regularizer,
        total,
        scales,
    })
}

/// Rescale voxel displacements `(B, D, *S)` so the grid spans `span` units
/// along every axis.
pub fn normalized_displacement(u: &Tensor, span: f64) -> Result<Tensor> {
    if !(span > 0.0 && span.is_finite()) {
        return Err(invalid!("grid span must be positive, got {span}"));
    }
    let spatial = &u.dims()[2..];
    if u.dim(1)? != spatial.len() {
        return Err(invalid!("displacement {:?} needs one component per axis", u.dims()));
    }
    let factors: Vec<f64> = spatial.iter().map(|&n| span / (n.max(2) - 1) as f64).collect();
    let mut shape = vec![1, spatial.len()];
    shape.extend(std::iter::repeat_n(1, spatial.len()));
    let f = Tensor::from_vec(factors, shape, u.device())?.to_dtype(u.dtype())?;
    Ok(u.broadcast_mul(&f)?)
}

/// Mean over regions (and batch) of `2 sum(a b) / (sum a + sum b + eps)`.
/// Inputs are soft masks `(B, K, *S)`.
pub fn soft_dice(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() < 3 || b.rank() < 3 {
        return Err(invalid!("soft dice needs (B, K, *S) masks"));
    }
    if a.dim(1)? != b.dim(1)? {
        return Err(invalid!("{} regions vs {} regions", a.dim(1)?, b.dim(1)?));
    }
    if a.dims() != b.dims() {
        return Err(invalid!("mask shapes {:?} and {:?} differ", a.dims(), b.dims()));
    }
    let (n, k) = (a.dim(0)?, a.dim(1)?);
    let a = a.reshape((n, k, ()))?;
    let b = b.reshape((n, k, ()))?;
    let inter = (&a * &b)?.sum(2)?;
    let denom = ((a.sum(2)? + b.sum(2)?)? + EPSILON)?;
    Ok((inter.affine(2.0, 0.0)? / denom)?.mean_all()?)
}

/// Per-region soft Dice values, averaged over the batch.
pub fn soft_dice_per_region(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    let (n, k) = (a.dim(0)?, a.dim(1)?);
    let a = a.reshape((n, k, ()))?;
    let b = b.reshape((n, k, ()))?;
    let inter = (&a * &b)?.sum(2)?;
    let denom = ((a.sum(2)? + b.sum(2)?)? + EPSILON)?;
    Ok((inter.affine(2.0, 0.0)? / denom)?
        .mean(0)?
        .to_dtype(DType::F64)?
        .to_vec1()?)
}
