//! Patch extraction (im2col) and its adjoint over an arbitrary number of
//! spatial axes. Convolutions and strided transposed convolutions are built
//! from these two ops plus a matmul, so the same code path serves 2D and 3D.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

use crate::error::{invalid, Result};

/// Border handling for taps that fall outside the input grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Padding {
    Zeros,
    Replicate,
}

const NO_SOURCE: u32 = u32::MAX;

/// Gather table from (tap, output voxel) to a flat input voxel.
#[derive(Debug)]
pub struct PatchIndex {
    in_spatial: Vec<usize>,
    out_spatial: Vec<usize>,
    taps: usize,
    map: Vec<u32>,
}

type CacheKey = (Vec<usize>, usize, usize, usize, Padding);

fn cache() -> &'static Mutex<HashMap<CacheKey, Arc<PatchIndex>>> {
    static CACHE: OnceLock<Mutex<HashMap<CacheKey, Arc<PatchIndex>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for a in (0..shape.len().saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * shape[a + 1];
    }
    strides
}

fn advance(idx: &mut [usize], shape: &[usize]) {
    for a in (0..idx.len()).rev() {
        idx[a] += 1;
        if idx[a] < shape[a] {
            return;
        }
        idx[a] = 0;
    }
}

impl PatchIndex {
    pub fn new(
        in_spatial: &[usize],
        kernel: usize,
        stride: usize,
        pad: usize,
        padding: Padding,
    ) -> Result<Self> {
        if in_spatial.is_empty() || kernel == 0 || stride == 0 {
            return Err(invalid!(
                "patch index needs spatial axes, kernel and stride > 0"
            ));
        }
        if in_spatial.iter().any(|&n| n + 2 * pad < kernel) {
            return Err(invalid!(
                "grid {in_spatial:?} smaller than kernel {kernel} with padding {pad}"
            ));
        }
        let n_in: usize = in_spatial.iter().product();
        if n_in >= NO_SOURCE as usize {
            return Err(invalid!("grid {in_spatial:?} too large"));
        }
        let d = in_spatial.len();
        let out_spatial: Vec<usize> = in_spatial
            .iter()
            .map(|&n| (n + 2 * pad - kernel) / stride + 1)
            .collect();
        let taps = kernel.pow(d as u32);
        let n_out: usize = out_spatial.iter().product();

        // axis_src[a][k][o]: source coordinate along axis a for tap k at output o
        let axis_src: Vec<Vec<Vec<Option<usize>>>> = (0..d)
            .map(|a| {
                let n = in_spatial[a] as isize;
                (0..kernel)
                    .map(|k| {
                        (0..out_spatial[a])
                            .map(|o| {
                                let pos = (o * stride + k) as isize - pad as isize;
                                if (0..n).contains(&pos) {
                                    Some(pos as usize)
                                } else {
                                    match padding {
                                        Padding::Zeros => None,
                                        Padding::Replicate => Some(pos.clamp(0, n - 1) as usize),
                                    }
                                }
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();

        let strides = row_major_strides(in_spatial);
        let kernel_shape = vec![kernel; d];
        let mut map = Vec::with_capacity(taps * n_out);
        let mut kidx = vec![0usize; d];
        for _ in 0..taps {
            let mut oidx = vec![0usize; d];
            for _ in 0..n_out {
                let mut flat = Some(0usize);
                for a in 0..d {
                    flat = match (flat, axis_src[a][kidx[a]][oidx[a]]) {
                        (Some(f), Some(p)) => Some(f + p * strides[a]),
                        _ => None,
                    };
                }
                map.push(flat.map_or(NO_SOURCE, |f| f as u32));
                advance(&mut oidx, &out_spatial);
            }
            advance(&mut kidx, &kernel_shape);
        }
        Ok(Self {
            in_spatial: in_spatial.to_vec(),
            out_spatial,
            taps,
            map,
        })
    }

    /// Shared, memoized index for a given geometry.
    pub fn cached(
        in_spatial: &[usize],
        kernel: usize,
        stride: usize,
        pad: usize,
        padding: Padding,
    ) -> Result<Arc<Self>> {
        let key = (in_spatial.to_vec(), kernel, stride, pad, padding);
        let mut guard = cache().lock().expect("patch index cache poisoned");
        if let Some(idx) = guard.get(&key) {
            return Ok(idx.clone());
        }
        let idx = Arc::new(Self::new(in_spatial, kernel, stride, pad, padding)?);
        guard.insert(key, idx.clone());
        Ok(idx)
    }

    pub fn in_spatial(&self) -> &[usize] {
        &self.in_spatial
    }

    pub fn out_spatial(&self) -> &[usize] {
        &self.out_spatial
    }

    pub fn taps(&self) -> usize {
        self.taps
    }

    fn n_in(&self) -> usize {
        self.in_spatial.iter().product()
    }

    fn n_out(&self) -> usize {
        self.out_spatial.iter().product()
    }
}

fn gather<T: Copy + Default>(src: &[T], map: &[u32], planes: usize, n_in: usize) -> Vec<T> {
    let per_plane = map.len();
    let mut out = vec![T::default(); planes * per_plane];
    for (p, dst) in out.chunks_exact_mut(per_plane).enumerate() {
        let s = &src[p * n_in..(p + 1) * n_in];
        for (d, &m) in dst.iter_mut().zip(map) {
            if m != NO_SOURCE {
                *d = s[m as usize];
            }
        }
    }
    out
}

fn scatter<T: Copy + Default + std::ops::AddAssign>(
    src: &[T],
    map: &[u32],
    planes: usize,
    n_in: usize,
) -> Vec<T> {
    let per_plane = map.len();
    let mut out = vec![T::default(); planes * n_in];
    for (p, dst) in out.chunks_exact_mut(n_in).enumerate() {
        let s = &src[p * per_plane..(p + 1) * per_plane];
        for (&v, &m) in s.iter().zip(map) {
            if m != NO_SOURCE {
                dst[m as usize] += v;
            }
        }
    }
    out
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout, op: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => Err(candle_core::Error::Msg(format!(
            "{op} requires a contiguous input"
        ))),
    }
}

/// (B, C, *in_spatial) -> (B, C * taps, n_out)
struct Im2Col(Arc<PatchIndex>);

/// (B, C * taps, n_out) -> (B, C, *in_spatial), the adjoint of [`Im2Col`].
struct Col2Im(Arc<PatchIndex>);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let idx = &self.0;
        let dims = layout.dims();
        if dims.len() != idx.in_spatial.len() + 2 || dims[2..] != idx.in_spatial[..] {
            candle_core::bail!("im2col: input {dims:?} does not match grid {:?}", idx.in_spatial);
        }
        let (b, c) = (dims[0], dims[1]);
        let out = match storage {
            CpuStorage::F32(v) => {
                CpuStorage::F32(gather(contiguous_slice(v, layout, "im2col")?, &idx.map, b * c, idx.n_in()))
            }
            CpuStorage::F64(v) => {
                CpuStorage::F64(gather(contiguous_slice(v, layout, "im2col")?, &idx.map, b * c, idx.n_in()))
            }
            _ => candle_core::bail!("im2col: unsupported dtype"),
        };
        Ok((out, Shape::from((b, c * idx.taps, idx.n_out()))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0.clone()))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let idx = &self.0;
        let dims = layout.dims();
        if dims.len() != 3 || dims[1] % idx.taps != 0 || dims[2] != idx.n_out() {
            candle_core::bail!("col2im: input {dims:?} does not match patch geometry");
        }
        let (b, c) = (dims[0], dims[1] / idx.taps);
        let out = match storage {
            CpuStorage::F32(v) => {
                CpuStorage::F32(scatter(contiguous_slice(v, layout, "col2im")?, &idx.map, b * c, idx.n_in()))
            }
            CpuStorage::F64(v) => {
                CpuStorage::F64(scatter(contiguous_slice(v, layout, "col2im")?, &idx.map, b * c, idx.n_in()))
            }
            _ => candle_core::bail!("col2im: unsupported dtype"),
        };
        let mut shape = vec![b, c];
        shape.extend_from_slice(&idx.in_spatial);
        Ok((out, Shape::from(shape)))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Im2Col(self.0.clone()))?))
    }
}

pub fn im2col(x: &Tensor, index: &Arc<PatchIndex>) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Im2Col(index.clone()))?)
}

pub fn col2im(cols: &Tensor, index: &Arc<PatchIndex>) -> Result<Tensor> {
    Ok(cols.contiguous()?.apply_op1(Col2Im(index.clone()))?)
}
