//! Evaluation metrics: label overlap and Jacobian-determinant statistics of
//! a deformation.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid::DeformationField;
use crate::losses;
use crate::ops::patches::row_major_strides;
use crate::weighting::LabelMap;

/// Jacobian determinant on the interior of a deformation grid (one voxel
/// trimmed from every face).
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianField {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Determinant of `d phi / d x` by central differences, first batch element.
pub fn jacobian_det(phi: &DeformationField) -> Result<JacobianField> {
    let shape = phi.spatial_shape().to_vec();
    let coords: Vec<f64> = phi.tensor().get(0)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    jacobian_det_raw(&coords, &shape)
}

/// Same as [`jacobian_det`] on raw component planes (`D * prod(shape)` values).
pub fn jacobian_det_raw(coords: &[f64], shape: &[usize]) -> Result<JacobianField> {
    let d = shape.len();
    if !(2..=3).contains(&d) {
        return Err(invalid!("jacobian needs a 2-D or 3-D grid, got {shape:?}"));
    }
    if shape.iter().any(|&n| n < 3) {
        return Err(invalid!("grid {shape:?} too small for central differences (need >= 3 per axis)"));
    }
    let n: usize = shape.iter().product();
    if coords.len() != d * n {
        return Err(invalid!("{} coordinate values for {d} components on {shape:?}", coords.len()));
    }
    let strides = row_major_strides(shape);
    let inner: Vec<usize> = shape.iter().map(|&s| s - 2).collect();
    let inner_n: usize = inner.iter().product();
    let inner_strides = row_major_strides(&inner);
    let mut values = Vec::with_capacity(inner_n);
    let mut m = [[0f64; 3]; 3];
    for i in 0..inner_n {
        let flat: usize = (0..d)
            .map(|a| ((i / inner_strides[a]) % inner[a] + 1) * strides[a])
            .sum();
        for (comp, row) in m.iter_mut().enumerate().take(d) {
            let plane = &coords[comp * n..(comp + 1) * n];
            for (b, entry) in row.iter_mut().enumerate().take(d) {
                *entry = 0.5 * (plane[flat + strides[b]] - plane[flat - strides[b]]);
            }
        }
        values.push(if d == 2 {
            m[0][0] * m[1][1] - m[0][1] * m[1][0]
        } else {
            m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
        });
    }
    Ok(JacobianField { shape: inner, values })
}

fn non_empty(j: &JacobianField) -> Result<()> {
    if j.values.is_empty() {
        return Err(invalid!("empty jacobian interior"));
    }
    Ok(())
}

/// Percentage of interior voxels with a negative determinant.
pub fn folding_pct(j: &JacobianField) -> Result<f64> {
    non_empty(j)?;
    let neg = j.values.iter().filter(|&&v| v < 0.0).count();
    Ok(100.0 * neg as f64 / j.values.len() as f64)
}

/// Mean gradient magnitude of the determinant field (central differences
/// inside, one-sided at its edges).
pub fn jac_grad_mean(j: &JacobianField) -> Result<f64> {
    non_empty(j)?;
    let shape = &j.shape;
    let strides = row_major_strides(shape);
    let n = j.values.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut sq = 0.0;
        for a in 0..shape.len() {
            let len = shape[a];
            if len < 2 {
                continue;
            }
            let pos = (i / strides[a]) % len;
            let s = strides[a];
            let g = if pos == 0 {
                j.values[i + s] - j.values[i]
            } else if pos == len - 1 {
                j.values[i] - j.values[i - s]
            } else {
                0.5 * (j.values[i + s] - j.values[i - s])
            };
            sq += g * g;
        }
        total += sq.sqrt();
    }
    Ok(total / n as f64)
}

/// Population standard deviation of the determinant.
pub fn jac_std(j: &JacobianField) -> Result<f64> {
    non_empty(j)?;
    let n = j.values.len() as f64;
    let mean = j.values.iter().sum::<f64>() / n;
    Ok((j.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiceScores {
    pub per_region: Vec<f64>,
    /// Regions absent from both maps; scored 1 by convention.
    pub absent: Vec<usize>,
}

/// Hard per-region Dice between two label maps on the same grid.
pub fn dice_hard(a: &LabelMap, b: &LabelMap) -> Result<DiceScores> {
    if a.shape() != b.shape() {
        return Err(invalid!("label grids {:?} and {:?} differ", a.shape(), b.shape()));
    }
    if a.regions() != b.regions() {
        return Err(invalid!("{} regions vs {} regions", a.regions(), b.regions()));
    }
    let k = a.regions();
    let mut inter = vec![0usize; k];
    for (&x, &y) in a.data().iter().zip(b.data()) {
        if x == y {
            inter[x as usize] += 1;
        }
    }
    let (ha, hb) = (a.histogram(), b.histogram());
    let mut absent = Vec::new();
    let per_region = (0..k)
        .map(|r| {
            let denom = ha[r] + hb[r];
            if denom == 0 {
                absent.push(r);
                1.0
            } else {
                2.0 * inter[r] as f64 / denom as f64
            }
        })
        .collect();
    Ok(DiceScores { per_region, absent })
}

/// Mean over foreground regions (ids >= 1); region 0 alone if K == 1.
pub fn foreground_mean(per_region: &[f64]) -> f64 {
    let fg = if per_region.len() > 1 { &per_region[1..] } else { per_region };
    fg.iter().sum::<f64>() / fg.len() as f64
}

/// Mean squared forward difference of a displacement (unweighted diffusion).
pub fn diffusion_energy(u: &Tensor) -> Result<f64> {
    let mut shape = u.dims().to_vec();
    shape[1] = 1;
    let ones = Tensor::ones(shape, u.dtype(), u.device())?;
    Ok(crate::ops::scalar(&losses::weighted_diffusion(u, &ones)?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dice_per_region: Vec<f64>,
    pub dice_avg: f64,
    pub folding_pct: f64,
    pub jac_grad_mean: f64,
    pub jac_std: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub absent_regions: Vec<usize>,
}

impl MetricsReport {
    pub fn compute(phi: &DeformationField, warped: &LabelMap, fixed: &LabelMap) -> Result<Self> {
        let dice = dice_hard(warped, fixed)?;
        let mut report = Self::deformation_only(phi)?;
        report.dice_avg = foreground_mean(&dice.per_region);
        report.dice_per_region = dice.per_region;
        report.absent_regions = dice.absent;
        Ok(report)
    }

    /// Jacobian statistics only; Dice fields left empty.
    pub fn deformation_only(phi: &DeformationField) -> Result<Self> {
        let j = jacobian_det(phi)?;
        Ok(Self {
            dice_per_region: Vec::new(),
            dice_avg: f64::NAN,
            folding_pct: folding_pct(&j)?,
            jac_grad_mean: jac_grad_mean(&j)?,
            jac_std: jac_std(&j)?,
            absent_regions: Vec::new(),
        })
    }
}
