use candle_core::Tensor;

use crate::error::{invalid, Result};

/// Correlate along one tensor axis with `taps` (odd length, centred),
/// replicating edge values.
pub fn filter_axis(t: &Tensor, axis: usize, taps: &[f64]) -> Result<Tensor> {
    if taps.len() % 2 == 0 {
        return Err(invalid!("filter needs an odd number of taps, got {}", taps.len()));
    }
    let r = taps.len() / 2;
    let n = t.dim(axis)?;
    let padded = if r > 0 { t.pad_with_same(axis, r, r)? } else { t.clone() };
    let mut acc: Option<Tensor> = None;
    for (i, &w) in taps.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let slab = padded.narrow(axis, i, n)?;
        let term = if w == 1.0 { slab } else { slab.affine(w, 0.0)? };
        acc = Some(match acc {
            None => term,
            Some(a) => (a + term)?,
        });
    }
    match acc {
        Some(a) => Ok(a),
        None => Ok(t.zeros_like()?),
    }
}

/// Apply the same 1D taps along every spatial axis.
pub fn filter_separable(t: &Tensor, taps: &[f64]) -> Result<Tensor> {
    let mut out = t.clone();
    for axis in 2..t.rank() {
        out = filter_axis(&out, axis, taps)?;
    }
    Ok(out)
}

/// Sum over a `window`^D neighbourhood (replicate padding).
pub fn box_sum(t: &Tensor, window: usize) -> Result<Tensor> {
    filter_separable(t, &vec![1.0; window])
}

/// Average 2^D blocks: box smoothing followed by stride-2 sampling.
pub fn downsample2(t: &Tensor) -> Result<Tensor> {
    let mut out = t.clone();
    for axis in 2..t.rank() {
        let n = out.dim(axis)?;
        if n % 2 != 0 || n < 2 {
            return Err(invalid!("cannot halve axis of length {n}"));
        }
        let mut shape = out.dims().to_vec();
        shape[axis] = n / 2;
        shape.insert(axis + 1, 2);
        out = out.reshape(shape)?.mean(axis + 1)?;
    }
    Ok(out)
}

/// Linear upsampling by two with half-voxel alignment (the adjoint
/// geometry of [`downsample2`]); values are not rescaled.
pub fn upsample2(t: &Tensor) -> Result<Tensor> {
    let mut out = t.clone();
    for axis in 2..t.rank() {
        let n = out.dim(axis)?;
        let (prev, next) = if n > 1 {
            (
                Tensor::cat(&[out.narrow(axis, 0, 1)?, out.narrow(axis, 0, n - 1)?], axis)?,
                Tensor::cat(&[out.narrow(axis, 1, n - 1)?, out.narrow(axis, n - 1, 1)?], axis)?,
            )
        } else {
            (out.clone(), out.clone())
        };
        let centre = out.affine(0.75, 0.0)?;
        let even = (&centre + prev.affine(0.25, 0.0)?)?;
        let odd = (&centre + next.affine(0.25, 0.0)?)?;
        let mut shape = out.dims().to_vec();
        shape[axis] = 2 * n;
        out = Tensor::stack(&[even, odd], axis + 1)?.reshape(shape)?;
    }
    Ok(out)
}
