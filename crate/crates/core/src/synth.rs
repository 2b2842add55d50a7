//! Synthetic multi-region phantoms and deformed pairs whose deformation
//! roughness differs by region.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{self, DisplacementField, Image};
use crate::metrics;
use crate::ops;
use crate::weighting::{self, LabelMap};

/// Largest supported region count (background included).
pub const MAX_REGIONS: usize = 8;
/// Every generated field keeps its determinant above this.
pub const MIN_JACOBIAN: f64 = 0.05;
pub const MAX_RETRIES: usize = 30;
/// Foreground region area, as a fraction of the grid.
pub const AREA_BOUNDS: (f64, f64) = (0.003, 0.2);

/// Grid extent the length scales below are expressed for.
const REFERENCE_EXTENT: f64 = 64.0;
/// Smoothing of a zero-roughness noise field, in reference voxels.
const BASE_FIELD_SIGMA: f64 = 12.0;
/// Width of the blend between neighbouring regions' fields.
const BLEND_SIGMA: f64 = 1.5;
const TEXTURE_SIGMA: f64 = 1.5;
const TEXTURE_AMPLITUDE: f64 = 0.04;
const SHRINK: f64 = 0.8;

const INTENSITY: [f64; MAX_REGIONS] = [0.1, 0.85, 0.45, 0.65, 1.0, 0.3, 0.55, 0.75];

/// Ground-truth pair.
#[derive(Debug, Clone)]
pub struct PhantomPair {
    pub fixed: Image,
    pub moving: Image,
    pub fixed_labels: LabelMap,
    pub moving_labels: LabelMap,
    pub true_field: DisplacementField,
}

/// Deformation settings of a generated pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairConfig {
    /// One entry per region, background first.
    pub roughness: Vec<f64>,
    /// RMS displacement (reference voxels) of the smoothest possible
    /// unit-roughness field; sets the overall deformation strength.
    pub amplitude: f64,
    /// Std of independent Gaussian noise added to both images.
    #[serde(default)]
    pub noise_std: f64,
}

impl PairConfig {
    pub fn new(roughness: Vec<f64>) -> Self {
        Self {
            roughness,
            amplitude: 3.0,
            noise_std: 0.0,
        }
    }
}

/// Default per-region roughness for `k` regions: alternating smooth and
/// rough structures.
pub fn default_roughness(k: usize) -> Vec<f64> {
    const PROFILE: [f64; MAX_REGIONS] = [0.5, 3.0, 0.2, 3.0, 0.2, 2.0, 0.5, 2.0];
    PROFILE.iter().copied().cycle().take(k).collect()
}

enum Shape {
    Ball { centre: [f64; 3], radius: f64 },
    Shell { centre: [f64; 3], inner: f64, outer: f64 },
    Slab { lo: [f64; 3], hi: [f64; 3] },
}

impl Shape {
    fn contains(&self, p: &[f64; 3], dims: usize) -> bool {
        let dist = |c: &[f64; 3]| (0..dims).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>().sqrt();
        match self {
            Shape::Ball { centre, radius } => dist(centre) <= *radius,
            Shape::Shell { centre, inner, outer } => {
                let d = dist(centre);
                d > *inner && d <= *outer
            }
            Shape::Slab { lo, hi } => (0..dims).all(|a| p[a] >= lo[a] && p[a] <= hi[a]),
        }
    }
}

fn layout(k: usize, rng: &mut ChaCha8Rng) -> Vec<Shape> {
    let mut j = |v: f64, spread: f64| v + rng.random_range(-spread..=spread);
    let c1 = [j(0.33, 0.02), j(0.33, 0.02), 0.5];
    let r1 = j(0.13, 0.015);
    let mut shapes = vec![
        Shape::Ball { centre: c1, radius: r1 },
        Shape::Shell {
            centre: c1,
            inner: r1,
            outer: r1 + j(0.08, 0.01),
        },
        Shape::Ball {
            centre: [j(0.68, 0.02), j(0.66, 0.02), 0.5],
            radius: j(0.14, 0.015),
        },
        Shape::Slab {
            lo: [j(0.82, 0.01), j(0.12, 0.02), 0.3],
            hi: [j(0.88, 0.01), j(0.45, 0.02), 0.7],
        },
    ];
    for c in [[0.12, 0.85], [0.9, 0.9], [0.5, 0.88]] {
        shapes.push(Shape::Ball {
            centre: [j(c[0], 0.01), j(c[1], 0.01), 0.5],
            radius: j(0.06, 0.008),
        });
    }
    shapes.truncate(k - 1);
    shapes
}

fn check_request(shape: &[usize], k: usize) -> Result<()> {
    if !(2..=MAX_REGIONS).contains(&k) {
        return Err(invalid!("phantoms have 2..={MAX_REGIONS} regions, got {k}"));
    }
    if !(2..=3).contains(&shape.len()) || shape.iter().any(|&n| n < 16) {
        return Err(invalid!("phantom grid must be 2-D or 3-D with every axis >= 16, got {shape:?}"));
    }
    Ok(())
}

fn normalized_points(shape: &[usize]) -> Vec<[f64; 3]> {
    let n: usize = shape.iter().product();
    let strides = ops::patches::row_major_strides(shape);
    (0..n)
        .map(|i| {
            let mut p = [0.5; 3];
            for (a, &len) in shape.iter().enumerate() {
                p[a] = ((i / strides[a]) % len) as f64 / (len - 1) as f64;
            }
            p
        })
        .collect()
}

fn reference_scale(shape: &[usize]) -> f64 {
    shape.iter().copied().min().unwrap_or(1) as f64 / REFERENCE_EXTENT
}

/// Gaussian-smoothed white noise `(1, channels, *shape)`. Noise is drawn on
/// a margin-padded grid and cropped so the result has no edge artefacts.
fn smooth_noise(rng: &mut ChaCha8Rng, shape: &[usize], channels: usize, sigma: f64) -> Result<Tensor> {
    let radius = (3.0 * sigma).ceil() as usize;
    let padded: Vec<usize> = shape.iter().map(|n| n + 2 * radius).collect();
    let n: usize = channels * padded.iter().product::<usize>();
    let data: Vec<f32> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
    let mut dims = vec![1, channels];
    dims.extend_from_slice(&padded);
    let t = Tensor::from_vec(data, dims, &Device::Cpu)?;
    let mut t = weighting::gaussian_smooth(&t, sigma, 2 * radius + 1)?;
    for (a, &len) in shape.iter().enumerate() {
        t = t.narrow(a + 2, radius, len)?;
    }
    Ok(t.contiguous()?)
}

/// Deterministic `k`-region phantom: background, a disk with a ring around
/// it, a separate disk, a thin bar and (for larger `k`) small blobs, each
/// with its own intensity plus a smooth texture.
pub fn gen_phantom(seed: u64, shape: &[usize], k: usize) -> Result<(Image, LabelMap)> {
    check_request(shape, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = layout(k, &mut rng);
    let dims = shape.len();
    let labels: Vec<u32> = normalized_points(shape)
        .iter()
        .map(|p| {
            shapes
                .iter()
                .enumerate()
                .rev()
                .find(|(_, s)| s.contains(p, dims))
                .map_or(0, |(i, _)| i as u32 + 1)
        })
        .collect();
    let labels = LabelMap::new(shape.to_vec(), labels, k)?;
    if let Some(r) = labels.histogram().iter().position(|&c| c == 0) {
        return Err(Error::Generation(format!("region {r} is empty on grid {shape:?}")));
    }
    let intensity: Vec<f64> = INTENSITY[..k].iter().map(|v| v + rng.random_range(-0.03..=0.03)).collect();
    let texture: Vec<f32> = smooth_noise(&mut rng, shape, 1, TEXTURE_SIGMA * reference_scale(shape).max(1.0))?
        .flatten_all()?
        .to_vec1()?;
    // unit-variance texture regardless of the smoothing width
    let rms = (texture.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / texture.len() as f64).sqrt();
    let data: Vec<f32> = labels
        .data()
        .iter()
        .zip(&texture)
        .map(|(&l, &t)| (intensity[l as usize] + TEXTURE_AMPLITUDE * t as f64 / rms) as f32)
        .collect();
    Ok((Image::from_vec(shape, data)?, labels))
}

/// Phantom pair with the default deformation amplitude.
pub fn gen_pair(seed: u64, shape: &[usize], k: usize, roughness: &[f64]) -> Result<PhantomPair> {
    gen_pair_with(seed, shape, k, &PairConfig::new(roughness.to_vec()))
}

/// Region-blended random displacement: region `r` contributes noise
/// smoothed at `BASE / (1 + roughness[r])` whose RMS amplitude is
/// `amplitude * roughness[r] * sigma / BASE`, so its gradient grows linearly
/// with roughness. Fields are blended through smoothed region masks. The whole field
/// shrinks until its Jacobian determinant stays above [`MIN_JACOBIAN`].
pub fn gen_pair_with(seed: u64, shape: &[usize], k: usize, cfg: &PairConfig) -> Result<PhantomPair> {
    check_request(shape, k)?;
    if cfg.roughness.len() != k {
        return Err(invalid!("{} roughness values for {k} regions", cfg.roughness.len()));
    }
    if cfg.roughness.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(invalid!("roughness must be finite and non-negative"));
    }
    if !(cfg.amplitude.is_finite() && cfg.amplitude >= 0.0 && cfg.noise_std.is_finite() && cfg.noise_std >= 0.0) {
        return Err(invalid!("amplitude and noise must be finite and non-negative"));
    }
    let (fixed, fixed_labels) = gen_phantom(seed, shape, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5DEE_CE66_D1CE_4E5B);
    let d = shape.len();
    let scale = reference_scale(shape);

    let masks = weighting::gaussian_smooth(
        &fixed_labels.one_hot(DType::F32)?,
        BLEND_SIGMA * scale.max(1.0),
        2 * (3.0 * BLEND_SIGMA * scale.max(1.0)).ceil() as usize + 1,
    )?;
    let mut dims = vec![1, d];
    dims.extend_from_slice(shape);
    let mut field = Tensor::zeros(dims, DType::F32, &Device::Cpu)?;
    for (r, &rough) in cfg.roughness.iter().enumerate() {
        if rough == 0.0 || cfg.amplitude == 0.0 {
            continue;
        }
        let sigma = BASE_FIELD_SIGMA * scale / (1.0 + rough);
        let noise = smooth_noise(&mut rng, shape, d, sigma.max(0.75))?;
        let rms = ops::scalar(&noise.sqr()?.mean_all()?)?.sqrt().max(1e-12);
        let amp = cfg.amplitude * scale * rough * sigma / (BASE_FIELD_SIGMA * scale);
        let noise = noise.affine(amp / rms, 0.0)?;
        field = (field + noise.broadcast_mul(&masks.narrow(1, r, 1)?)?)?;
    }

    let mut tries = 0;
    loop {
        let coords: Vec<f64> = grid::to_coordinates(&field)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let j = metrics::jacobian_det_raw(&coords, shape)?;
        let min = j.values.iter().copied().fold(f64::INFINITY, f64::min);
        if min > MIN_JACOBIAN {
            break;
        }
        tries += 1;
        if tries > MAX_RETRIES {
            return Err(Error::Generation(format!(
                "no fold-free field after {MAX_RETRIES} shrink steps (min det {min:.3})"
            )));
        }
        field = field.affine(SHRINK, 0.0)?;
    }

    let true_field = DisplacementField::new(field)?;
    let phi = grid::compose(&true_field)?;
    let mut moving = grid::warp(&fixed, &phi)?;
    let moving_labels = grid::warp_labels(&fixed_labels, &phi)?;
    let mut fixed = fixed;
    if cfg.noise_std > 0.0 {
        let mut noisy = |img: &Image| -> Result<Image> {
            let v: Vec<f32> = img
                .to_vec()?
                .into_iter()
                .map(|x| x + (cfg.noise_std * rng.sample::<f64, _>(StandardNormal)) as f32)
                .collect();
            Image::from_vec(shape, v)
        };
        fixed = noisy(&fixed)?;
        moving = noisy(&moving)?;
    }
    Ok(PhantomPair {
        fixed,
        moving,
        fixed_labels,
        moving_labels,
        true_field,
    })
}

/// `count` pairs from consecutive seeds starting at `seed`.
pub fn gen_dataset(seed: u64, count: usize, shape: &[usize], k: usize, cfg: &PairConfig) -> Result<Vec<PhantomPair>> {
    (0..count as u64)
        .map(|i| gen_pair_with(seed.wrapping_add(i), shape, k, cfg))
        .collect()
}

/// Mean squared central-difference gradient norm of `u` over voxels whose
/// label is `region`.
pub fn region_gradient_energy(u: &DisplacementField, labels: &LabelMap, region: u32) -> Result<f64> {
    let shape = u.spatial_shape().to_vec();
    let v: Vec<f64> = u.tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let n: usize = shape.iter().product();
    let strides = ops::patches::row_major_strides(&shape);
    let (mut total, mut count) = (0.0, 0usize);
    for (i, &l) in labels.data().iter().enumerate() {
        if l != region {
            continue;
        }
        let interior = shape
            .iter()
            .enumerate()
            .all(|(a, &len)| (1..len - 1).contains(&((i / strides[a]) % len)));
        if !interior {
            continue;
        }
        for c in 0..shape.len() {
            for &s in &strides {
                let g = 0.5 * (v[c * n + i + s] - v[c * n + i - s]);
                total += g * g;
            }
        }
        count += 1;
    }
    if count == 0 {
        return Err(invalid!("region {region} has no interior voxels"));
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantom_is_deterministic_and_fills_every_region() {
        let (a, la) = gen_phantom(7, &[64, 64], 5).unwrap();
        let (b, lb) = gen_phantom(7, &[64, 64], 5).unwrap();
        assert_eq!(a.to_vec().unwrap(), b.to_vec().unwrap());
        assert_eq!(la, lb);
        assert!(la.histogram().iter().all(|&c| c > 0));
    }

    #[test]
    fn rejects_single_region() {
        assert!(matches!(gen_phantom(0, &[64, 64], 1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn zero_roughness_leaves_images_unchanged() {
        let p = gen_pair(3, &[32, 32], 5, &[0.0; 5]).unwrap();
        assert_eq!(p.fixed.to_vec().unwrap(), p.moving.to_vec().unwrap());
        assert_eq!(p.fixed_labels, p.moving_labels);
        let u: Vec<f32> = p.true_field.tensor().flatten_all().unwrap().to_vec1().unwrap();
        assert!(u.iter().all(|&x| x == 0.0));
    }
}
