//! Multilinear resampling of a channel-first image at absolute voxel
//! coordinates, with edge clamping, plus its gradients with respect to both
//! the image and the coordinates.

use candle_core::{CpuStorage, CustomOp2, CustomOp3, Layout, Shape, Tensor, WithDType};

use super::patches::row_major_strides;
use crate::error::Result;

const MAX_DIMS: usize = 3;
const MAX_CORNERS: usize = 1 << MAX_DIMS;

/// Interpolation cell for one sample position.
struct Cell {
    corners: usize,
    idx: [usize; MAX_CORNERS],
    weight: [f64; MAX_CORNERS],
    /// d weight / d coordinate, per axis; zero where the coordinate is clamped
    dweight: [[f64; MAX_CORNERS]; MAX_DIMS],
}

fn cell(coords: &[f64], shape: &[usize], strides: &[usize]) -> Cell {
    let d = shape.len();
    let mut base = [0usize; MAX_DIMS];
    let mut step = [0usize; MAX_DIMS];
    let mut frac = [0f64; MAX_DIMS];
    let mut live = [0f64; MAX_DIMS];
    for a in 0..d {
        let hi = (shape[a] - 1) as f64;
        let p = if coords[a].is_nan() { 0.0 } else { coords[a] };
        if (0.0..=hi).contains(&p) {
            live[a] = 1.0;
        }
        let pc = p.clamp(0.0, hi);
        if shape[a] > 1 {
            let fl = pc.floor().min(hi - 1.0);
            base[a] = fl as usize;
            frac[a] = pc - fl;
            step[a] = strides[a];
        }
    }
    let corners = 1 << d;
    let mut out = Cell {
        corners,
        idx: [0; MAX_CORNERS],
        weight: [0.0; MAX_CORNERS],
        dweight: [[0.0; MAX_CORNERS]; MAX_DIMS],
    };
    for c in 0..corners {
        let mut idx = 0;
        let mut w = 1.0;
        let mut axis_w = [0f64; MAX_DIMS];
        for a in 0..d {
            let upper = (c >> (d - 1 - a)) & 1 == 1;
            idx += base[a] * strides[a] + if upper { step[a] } else { 0 };
            axis_w[a] = if upper { frac[a] } else { 1.0 - frac[a] };
            w *= axis_w[a];
        }
        out.idx[c] = idx;
        out.weight[c] = w;
        for a in 0..d {
            let upper = (c >> (d - 1 - a)) & 1 == 1;
            let mut dw = if upper { live[a] } else { -live[a] };
            for (b, wb) in axis_w.iter().enumerate().take(d) {
                if b != a {
                    dw *= wb;
                }
            }
            out.dweight[a][c] = dw;
        }
    }
    out
}

struct Geometry {
    batch: usize,
    channels: usize,
    in_spatial: Vec<usize>,
    out_spatial: Vec<usize>,
}

impl Geometry {
    fn new(img: &[usize], phi: &[usize]) -> candle_core::Result<Self> {
        if img.len() < 3 || img.len() != phi.len() {
            candle_core::bail!("warp: image {img:?} and coordinates {phi:?} rank mismatch");
        }
        let d = img.len() - 2;
        if d > MAX_DIMS || phi[1] != d || img[0] != phi[0] {
            candle_core::bail!("warp: image {img:?} incompatible with coordinates {phi:?}");
        }
        Ok(Self {
            batch: img[0],
            channels: img[1],
            in_spatial: img[2..].to_vec(),
            out_spatial: phi[2..].to_vec(),
        })
    }

    fn d(&self) -> usize {
        self.in_spatial.len()
    }

    fn n_in(&self) -> usize {
        self.in_spatial.iter().product()
    }

    fn n_out(&self) -> usize {
        self.out_spatial.iter().product()
    }

    /// Visit every (batch, output voxel) with its interpolation cell.
    fn for_each_cell<T: WithDType>(&self, phi: &[T], mut f: impl FnMut(usize, usize, &Cell)) {
        let d = self.d();
        let n_out = self.n_out();
        let strides = row_major_strides(&self.in_spatial);
        let mut coords = [0f64; MAX_DIMS];
        for b in 0..self.batch {
            for o in 0..n_out {
                for (a, c) in coords.iter_mut().enumerate().take(d) {
                    *c = phi[(b * d + a) * n_out + o].to_f64();
                }
                let cl = cell(&coords[..d], &self.in_spatial, &strides);
                f(b, o, &cl);
            }
        }
    }
}

fn slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((s, e)) => Ok(&data[s..e]),
        None => candle_core::bail!("warp: non-contiguous input"),
    }
}

fn forward<T: WithDType>(g: &Geometry, img: &[T], phi: &[T]) -> Vec<T> {
    let (n_in, n_out, ch) = (g.n_in(), g.n_out(), g.channels);
    let mut out = vec![T::zero(); g.batch * ch * n_out];
    g.for_each_cell(phi, |b, o, cl| {
        for c in 0..ch {
            let src = &img[(b * ch + c) * n_in..];
            let mut acc = 0.0;
            for k in 0..cl.corners {
                acc += cl.weight[k] * src[cl.idx[k]].to_f64();
            }
            out[(b * ch + c) * n_out + o] = T::from_f64(acc);
        }
    });
    out
}

fn image_grad<T: WithDType>(g: &Geometry, phi: &[T], grad: &[T]) -> Vec<T> {
    let (n_in, n_out, ch) = (g.n_in(), g.n_out(), g.channels);
    let mut acc = vec![0f64; g.batch * ch * n_in];
    g.for_each_cell(phi, |b, o, cl| {
        for c in 0..ch {
            let gv = grad[(b * ch + c) * n_out + o].to_f64();
            if gv == 0.0 {
                continue;
            }
            let dst = &mut acc[(b * ch + c) * n_in..];
            for k in 0..cl.corners {
                dst[cl.idx[k]] += cl.weight[k] * gv;
            }
        }
    });
    acc.into_iter().map(T::from_f64).collect()
}

fn coord_grad<T: WithDType>(g: &Geometry, img: &[T], phi: &[T], grad: &[T]) -> Vec<T> {
    let (n_in, n_out, ch, d) = (g.n_in(), g.n_out(), g.channels, g.d());
    let mut out = vec![T::zero(); g.batch * d * n_out];
    g.for_each_cell(phi, |b, o, cl| {
        let mut acc = [0f64; MAX_DIMS];
        for c in 0..ch {
            let gv = grad[(b * ch + c) * n_out + o].to_f64();
            if gv == 0.0 {
                continue;
            }
            let src = &img[(b * ch + c) * n_in..];
            for k in 0..cl.corners {
                let v = src[cl.idx[k]].to_f64() * gv;
                for (a, acc_a) in acc.iter_mut().enumerate().take(d) {
                    *acc_a += cl.dweight[a][k] * v;
                }
            }
        }
        for (a, acc_a) in acc.iter().enumerate().take(d) {
            out[(b * d + a) * n_out + o] = T::from_f64(*acc_a);
        }
    });
    out
}

struct Warp;
struct WarpImageGrad {
    in_spatial: Vec<usize>,
    channels: usize,
}
struct WarpCoordGrad;

impl CustomOp2 for Warp {
    fn name(&self) -> &'static str {
        "warp"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geometry::new(l1.dims(), l2.dims())?;
        let out = match (s1, s2) {
            (CpuStorage::F32(img), CpuStorage::F32(phi)) => {
                CpuStorage::F32(forward(&g, slice(img, l1)?, slice(phi, l2)?))
            }
            (CpuStorage::F64(img), CpuStorage::F64(phi)) => {
                CpuStorage::F64(forward(&g, slice(img, l1)?, slice(phi, l2)?))
            }
            _ => candle_core::bail!("warp: unsupported or mixed dtypes"),
        };
        let mut shape = vec![g.batch, g.channels];
        shape.extend_from_slice(&g.out_spatial);
        Ok((out, Shape::from(shape)))
    }

    fn bwd(
        &self,
        img: &Tensor,
        phi: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let op = WarpImageGrad {
            in_spatial: img.dims()[2..].to_vec(),
            channels: img.dims()[1],
        };
        let g_img = phi.apply_op2_no_bwd(&grad, &op)?;
        let g_phi = img.apply_op3_no_bwd(phi, &grad, &WarpCoordGrad)?;
        Ok((Some(g_img), Some(g_phi)))
    }
}

impl CustomOp2 for WarpImageGrad {
    fn name(&self) -> &'static str {
        "warp-image-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let phi_dims = l1.dims();
        let mut img_dims = vec![phi_dims[0], self.channels];
        img_dims.extend_from_slice(&self.in_spatial);
        let g = Geometry::new(&img_dims, phi_dims)?;
        let out = match (s1, s2) {
            (CpuStorage::F32(phi), CpuStorage::F32(grad)) => {
                CpuStorage::F32(image_grad(&g, slice(phi, l1)?, slice(grad, l2)?))
            }
            (CpuStorage::F64(phi), CpuStorage::F64(grad)) => {
                CpuStorage::F64(image_grad(&g, slice(phi, l1)?, slice(grad, l2)?))
            }
            _ => candle_core::bail!("warp-image-grad: unsupported or mixed dtypes"),
        };
        Ok((out, Shape::from(img_dims)))
    }
}

impl CustomOp3 for WarpCoordGrad {
    fn name(&self) -> &'static str {
        "warp-coord-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geometry::new(l1.dims(), l2.dims())?;
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(img), CpuStorage::F32(phi), CpuStorage::F32(grad)) => CpuStorage::F32(
                coord_grad(&g, slice(img, l1)?, slice(phi, l2)?, slice(grad, l3)?),
            ),
            (CpuStorage::F64(img), CpuStorage::F64(phi), CpuStorage::F64(grad)) => CpuStorage::F64(
                coord_grad(&g, slice(img, l1)?, slice(phi, l2)?, slice(grad, l3)?),
            ),
            _ => candle_core::bail!("warp-coord-grad: unsupported or mixed dtypes"),
        };
        Ok((out, Shape::from(l2.dims())))
    }
}

/// Sample `img` (B, C, *S_in) at absolute coordinates `phi` (B, D, *S_out).
pub fn sample(img: &Tensor, phi: &Tensor) -> Result<Tensor> {
    Ok(img.contiguous()?.apply_op2(&phi.contiguous()?, Warp)?)
}

/// Nearest-neighbour lookup of a flat row-major grid at absolute
/// coordinates, clamped to the grid. `coords` holds D planes of `n_out`
/// values each.
pub fn nearest_indices(coords: &[f64], in_spatial: &[usize], n_out: usize) -> Vec<usize> {
    let d = in_spatial.len();
    let strides = row_major_strides(in_spatial);
    (0..n_out)
        .map(|o| {
            (0..d)
                .map(|a| {
                    let hi = (in_spatial[a] - 1) as f64;
                    let p = coords[a * n_out + o];
                    let p = if p.is_nan() { 0.0 } else { p };
                    p.round().clamp(0.0, hi) as usize * strides[a]
                })
                .sum()
        })
        .collect()
}
