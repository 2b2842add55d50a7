//! Grid arithmetic shared by every stage: identity grids, warping,
//! multiresolution resampling and displacement composition.
//!
//! All fields are channel-first tensors `(B, C, *spatial)` with two or three
//! spatial axes. Coordinates are in voxel units of the grid they live on and
//! are axis-ordered, so channel `a` of a displacement moves along spatial
//! axis `a`.

use candle_core::{DType, Device, Tensor};

use crate::error::{invalid, Result};
use crate::ops;
use crate::weighting::LabelMap;

/// Smallest per-axis extent accepted by operations that differentiate or
/// window over the grid.
pub const MIN_EXTENT: usize = 4;

fn check_spatial(shape: &[usize]) -> Result<()> {
    if !(2..=3).contains(&shape.len()) {
        return Err(invalid!("expected 2 or 3 spatial axes, got shape {shape:?}"));
    }
    if shape.contains(&0) {
        return Err(invalid!("shape {shape:?} has an empty axis"));
    }
    Ok(())
}

/// Scalar (or multi-channel) intensity field.
#[derive(Debug, Clone)]
pub struct Image(Tensor);

/// Per-voxel offsets `u`, D channels.
#[derive(Debug, Clone)]
pub struct DisplacementField(Tensor);

/// Per-voxel absolute sampling coordinates `phi = Id + u`, D channels.
#[derive(Debug, Clone)]
pub struct DeformationField(Tensor);

impl Image {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() < 4 {
            return Err(invalid!("image tensor must be (B, C, *spatial), got {:?}", t.dims()));
        }
        check_spatial(&t.dims()[2..])?;
        Ok(Self(t))
    }

    /// Single-channel image from row-major values.
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        check_spatial(shape)?;
        if data.len() != shape.iter().product::<usize>() {
            return Err(invalid!("{} values for shape {shape:?}", data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid!("image contains non-finite values"));
        }
        let mut dims = vec![1, 1];
        dims.extend_from_slice(shape);
        Ok(Self(Tensor::from_vec(data, dims, &Device::Cpu)?))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn spatial_shape(&self) -> &[usize] {
        &self.0.dims()[2..]
    }

    pub fn to_vec(&self) -> Result<Vec<f32>> {
        Ok(self.0.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
    }
}

impl DisplacementField {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() < 4 {
            return Err(invalid!("displacement must be (B, D, *spatial), got {:?}", t.dims()));
        }
        check_spatial(&t.dims()[2..])?;
        if t.dim(1)? != t.rank() - 2 {
            return Err(invalid!(
                "displacement has {} components on a {}-D grid",
                t.dim(1)?,
                t.rank() - 2
            ));
        }
        Ok(Self(t))
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Result<Self> {
        check_spatial(shape)?;
        let mut dims = vec![1, shape.len()];
        dims.extend_from_slice(shape);
        Ok(Self(Tensor::zeros(dims, dtype, &Device::Cpu)?))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn spatial_shape(&self) -> &[usize] {
        &self.0.dims()[2..]
    }
}

impl DeformationField {
    pub fn new(t: Tensor) -> Result<Self> {
        DisplacementField::new(t).map(|u| Self(u.0))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn spatial_shape(&self) -> &[usize] {
        &self.0.dims()[2..]
    }

    /// `phi - Id`.
    pub fn displacement(&self) -> Result<DisplacementField> {
        let id = identity_tensor(self.spatial_shape(), self.0.dtype())?;
        DisplacementField::new(self.0.broadcast_sub(&id)?)
    }
}

/// Identity coordinates `(1, D, *shape)`: channel `a` holds the index along
/// axis `a`.
pub fn identity_tensor(shape: &[usize], dtype: DType) -> Result<Tensor> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(invalid!("identity grid needs a non-empty shape, got {shape:?}"));
    }
    let n: usize = shape.iter().product();
    let d = shape.len();
    let strides = ops::patches::row_major_strides(shape);
    let mut data = Vec::with_capacity(d * n);
    for a in 0..d {
        data.extend((0..n).map(|i| ((i / strides[a]) % shape[a]) as f64));
    }
    let mut dims = vec![1, d];
    dims.extend_from_slice(shape);
    Ok(Tensor::from_vec(data, dims, &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn identity_grid(shape: &[usize]) -> Result<DeformationField> {
    check_spatial(shape)?;
    Ok(DeformationField(identity_tensor(shape, DType::F32)?))
}

/// `phi = Id + u`.
pub fn compose(u: &DisplacementField) -> Result<DeformationField> {
    let id = identity_tensor(u.spatial_shape(), u.0.dtype())?;
    Ok(DeformationField(u.0.broadcast_add(&id)?))
}

/// Tensor-level `Id + u` for a batched displacement.
pub fn to_coordinates(u: &Tensor) -> Result<Tensor> {
    let id = identity_tensor(&u.dims()[2..], u.dtype())?;
    Ok(u.broadcast_add(&id)?)
}

/// Resample `img` at `phi` with multilinear interpolation; samples outside
/// the grid clamp to the edge. Differentiable in both arguments.
pub fn warp(img: &Image, phi: &DeformationField) -> Result<Image> {
    check_warp(img.tensor(), phi.tensor())?;
    Image::new(ops::sample(img.tensor(), phi.tensor())?)
}

fn check_warp(img: &Tensor, phi: &Tensor) -> Result<()> {
    if img.dims()[2..] != phi.dims()[2..] {
        return Err(invalid!(
            "image grid {:?} differs from deformation grid {:?}",
            &img.dims()[2..],
            &phi.dims()[2..]
        ));
    }
    if img.dim(0)? != phi.dim(0)? {
        return Err(invalid!("batch mismatch: {} images vs {} fields", img.dim(0)?, phi.dim(0)?));
    }
    Ok(())
}

/// Tensor-level warp by displacement: `img ∘ (Id + u)`.
pub fn warp_by_displacement(img: &Tensor, u: &Tensor) -> Result<Tensor> {
    let phi = to_coordinates(u)?;
    check_warp(img, &phi)?;
    ops::sample(img, &phi)
}

/// Nearest-neighbour warp of a label map (first batch element of `phi`).
pub fn warp_labels(labels: &LabelMap, phi: &DeformationField) -> Result<LabelMap> {
    if labels.shape() != phi.spatial_shape() {
        return Err(invalid!(
            "label grid {:?} differs from deformation grid {:?}",
            labels.shape(),
            phi.spatial_shape()
        ));
    }
    let coords: Vec<f64> = phi
        .tensor()
        .get(0)?
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1()?;
    let n = labels.len();
    let idx = ops::sampler::nearest_indices(&coords, labels.shape(), n);
    let data = idx.into_iter().map(|i| labels.data()[i]).collect();
    LabelMap::new(labels.shape().to_vec(), data, labels.regions())
}

/// Halve every spatial axis (2^D block mean). Fails if the result would be
/// smaller than [`MIN_EXTENT`] or an axis has odd length.
pub fn downsample(img: &Image) -> Result<Image> {
    let shape = img.spatial_shape();
    if shape.iter().any(|&n| n % 2 != 0 || n / 2 < MIN_EXTENT) {
        return Err(invalid!("cannot downsample {shape:?}: target below {MIN_EXTENT} voxels per axis"));
    }
    Image::new(ops::downsample2(img.tensor())?)
}

/// Double the grid of a displacement and rescale it into fine-voxel units.
pub fn upsample_displacement(u: &DisplacementField) -> Result<DisplacementField> {
    DisplacementField::new(upsample_displacement_tensor(u.tensor())?)
}

pub fn upsample_displacement_tensor(u: &Tensor) -> Result<Tensor> {
    Ok(ops::upsample2(u)?.affine(2.0, 0.0)?)
}

/// Spatial halving of a displacement with the matching unit rescale.
pub fn downsample_displacement_tensor(u: &Tensor) -> Result<Tensor> {
    Ok(ops::downsample2(u)?.affine(0.5, 0.0)?)
}

/// Check that `levels` successive halvings of `shape` stay on even,
/// sufficiently large grids.
pub fn check_pyramid_shape(shape: &[usize], levels: usize) -> Result<()> {
    check_spatial(shape)?;
    if levels == 0 {
        return Err(invalid!("pyramid needs at least one level"));
    }
    let factor = 1usize << (levels - 1);
    for &n in shape {
        if n % factor != 0 || n / factor < MIN_EXTENT {
            return Err(invalid!(
                "shape incompatible with pyramid depth: {shape:?} with {levels} levels \
                 ({n}/{factor} must be an integer >= {MIN_EXTENT})"
            ));
        }
    }
    Ok(())
}

/// Pyramid indexed by scale: entry `s` has been halved `s` times.
pub fn pyramid(img: &Image, levels: usize) -> Result<Vec<Image>> {
    check_pyramid_shape(img.spatial_shape(), levels)?;
    let mut out = vec![img.clone()];
    for _ in 1..levels {
        let next = downsample(out.last().expect("non-empty"))?;
        out.push(next);
    }
    Ok(out)
}

/// Tensor-level pyramid, same indexing as [`pyramid`].
pub fn pyramid_tensor(t: &Tensor, levels: usize) -> Result<Vec<Tensor>> {
    check_pyramid_shape(&t.dims()[2..], levels)?;
    let mut out = vec![t.clone()];
    for _ in 1..levels {
        let next = ops::downsample2(out.last().expect("non-empty"))?;
        out.push(next);
    }
    Ok(out)
}
