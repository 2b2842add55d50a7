//! Flat parameter storage and the convolution layers built on it.
//!
//! Layers only hold [`ParamId`]s; the tensors live in a [`Params`] table and
//! are passed to `forward` as a slice. Swapping in detached copies of some
//! entries freezes those parameters without touching the layer structure.

use std::sync::Arc;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::ops::{self, Padding, PatchIndex};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Kaiming normal for a leaky-ReLU fan-in.
    He,
    Normal(f64),
    Zeros,
}

/// Deterministic parameter builder.
pub struct ParamInit {
    rng: ChaCha8Rng,
    dtype: DType,
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamInit {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Parameters added so far; also the id the next one will get.
    pub fn count(&self) -> usize {
        self.values.len()
    }

    pub fn add(&mut self, name: String, shape: &[usize], fan_in: usize, init: Init) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let std = match init {
            Init::He => (2.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in as f64)).sqrt(),
            Init::Normal(s) => s,
            Init::Zeros => 0.0,
        };
        let data: Vec<f64> = if std == 0.0 {
            vec![0.0; n]
        } else {
            let dist = Normal::new(0.0, std).map_err(|e| invalid!("init: {e}"))?;
            (0..n).map(|_| dist.sample(&mut self.rng)).collect()
        };
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        self.names.push(name);
        self.values.push(t);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn finish(self) -> Result<Params> {
        let vars = self
            .values
            .iter()
            .map(Var::from_tensor)
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Params {
            names: self.names,
            vars,
        })
    }
}

/// Named, trainable parameter table.
pub struct Params {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl Params {
    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn var(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }

    /// Tracked tensors for every parameter.
    pub fn live(&self) -> Vec<Tensor> {
        self.vars.iter().map(|v| v.as_tensor().clone()).collect()
    }

    /// Untracked views for every parameter (no gradients flow into them).
    pub fn frozen(&self) -> Vec<Tensor> {
        self.vars.iter().map(|v| v.as_tensor().detach()).collect()
    }

    /// Tracked only for ids where `trainable` returns true.
    pub fn partially_frozen(&self, trainable: impl Fn(ParamId) -> bool) -> Vec<Tensor> {
        self.vars
            .iter()
            .enumerate()
            .map(|(i, v)| {
                if trainable(ParamId(i)) {
                    v.as_tensor().clone()
                } else {
                    v.as_tensor().detach()
                }
            })
            .collect()
    }

    pub fn vars_where(&self, keep: impl Fn(ParamId) -> bool) -> Vec<Var> {
        self.vars
            .iter()
            .enumerate()
            .filter(|(i, _)| keep(ParamId(*i)))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn set(&self, id: ParamId, value: &Tensor) -> Result<()> {
        let var = &self.vars[id.0];
        if var.dims() != value.dims() {
            return Err(invalid!(
                "parameter {} has shape {:?}, got {:?}",
                self.names[id.0],
                var.dims(),
                value.dims()
            ));
        }
        var.set(&value.to_dtype(var.dtype())?)?;
        Ok(())
    }

    pub fn set_by_name(&self, name: &str, value: &Tensor) -> Result<()> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| invalid!("unknown parameter {name}"))?;
        self.set(ParamId(i), value)
    }

    /// Raw f32 copies of every parameter, in id order.
    pub fn snapshot(&self) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
        self.names
            .iter()
            .zip(&self.vars)
            .map(|(n, v)| {
                let data = v.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
                Ok((n.clone(), v.dims().to_vec(), data))
            })
            .collect()
    }
}

/// `kernel`^D convolution implemented as patch extraction plus a matmul.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut ParamInit,
        name: &str,
        dims: usize,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        weight_init: Init,
    ) -> Result<Self> {
        let taps = kernel.pow(dims as u32);
        let weight = init.add(format!("{name}.weight"), &[out_ch, in_ch * taps], in_ch * taps, weight_init)?;
        let bias = init.add(format!("{name}.bias"), &[out_ch], 1, Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
        })
    }

    pub fn forward(&self, p: &[Tensor], x: &Tensor) -> Result<Tensor> {
        if x.dim(1)? != self.in_ch {
            return Err(invalid!("conv expects {} channels, got {}", self.in_ch, x.dim(1)?));
        }
        let b = x.dim(0)?;
        let index: Arc<PatchIndex> = PatchIndex::cached(
            ops::spatial_dims(x),
            self.kernel,
            self.stride,
            self.kernel / 2,
            self.padding,
        )?;
        let cols = ops::im2col(x, &index)?;
        let y = p[self.weight.0].broadcast_left(b)?.contiguous()?.matmul(&cols)?;
        let y = y.broadcast_add(&p[self.bias.0].reshape((1, self.out_ch, 1))?)?;
        let mut shape = vec![b, self.out_ch];
        shape.extend_from_slice(index.out_spatial());
        Ok(y.reshape(shape)?)
    }
}

/// Kernel-2, stride-2 transposed convolution: doubles every spatial axis.
#[derive(Debug, Clone)]
pub struct UpConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl UpConv {
    pub fn new(init: &mut ParamInit, name: &str, dims: usize, in_ch: usize, out_ch: usize) -> Result<Self> {
        let taps = 1usize << dims;
        let weight = init.add(format!("{name}.weight"), &[out_ch * taps, in_ch], in_ch, Init::He)?;
        let bias = init.add(format!("{name}.bias"), &[out_ch], 1, Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            in_ch,
            out_ch,
        })
    }

    pub fn forward(&self, p: &[Tensor], x: &Tensor) -> Result<Tensor> {
        if x.dim(1)? != self.in_ch {
            return Err(invalid!("up-conv expects {} channels, got {}", self.in_ch, x.dim(1)?));
        }
        let b = x.dim(0)?;
        let spatial = ops::spatial_dims(x);
        let n: usize = spatial.iter().product();
        let fine: Vec<usize> = spatial.iter().map(|s| 2 * s).collect();
        let index = PatchIndex::cached(&fine, 2, 2, 0, Padding::Zeros)?;
        let flat = x.reshape((b, self.in_ch, n))?;
        let cols = p[self.weight.0].broadcast_left(b)?.contiguous()?.matmul(&flat)?;
        let y = ops::col2im(&cols, &index)?;
        let mut bias_shape = vec![1, self.out_ch];
        bias_shape.extend(std::iter::repeat_n(1, spatial.len()));
        Ok(y.broadcast_add(&p[self.bias.0].reshape(bias_shape)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct 2D convolution, zero padding, stride 1 or 2.
    fn conv_oracle(x: &[f64], h: usize, w: usize, cin: usize, wt: &[f64], cout: usize, stride: usize) -> Vec<f64> {
        let (oh, ow) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
        let mut out = vec![0.0; cout * oh * ow];
        for o in 0..cout {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = (y * stride + ky) as i64 - 1;
                                let sx = (xx * stride + kx) as i64 - 1;
                                if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                                    continue;
                                }
                                acc += wt[o * cin * 9 + c * 9 + ky * 3 + kx]
                                    * x[c * h * w + sy as usize * w + sx as usize];
                            }
                        }
                    }
                    out[o * oh * ow + y * ow + xx] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop() {
        for stride in [1, 2] {
            let mut init = ParamInit::new(3, DType::F64);
            let conv = Conv::new(&mut init, "c", 2, 2, 3, 3, stride, Padding::Zeros, Init::Normal(1.0)).unwrap();
            let params = init.finish().unwrap();
            let p = params.live();
            let x = Tensor::randn(0f64, 1.0, (1, 2, 6, 5), &Device::Cpu).unwrap();
            let y = conv.forward(&p, &x).unwrap();
            let wt: Vec<f64> = p[conv.weight.0].flatten_all().unwrap().to_vec1().unwrap();
            let xv: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
            let expect = conv_oracle(&xv, 6, 5, 2, &wt, 3, stride);
            let got: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(got.len(), expect.len());
            for (g, e) in got.iter().zip(&expect) {
                assert!((g - e).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn up_conv_doubles_grid_and_places_taps() {
        let mut init = ParamInit::new(0, DType::F64);
        let up = UpConv::new(&mut init, "u", 2, 1, 1).unwrap();
        let params = init.finish().unwrap();
        params
            .set(up.weight, &Tensor::new(&[[1.0f64], [2.0], [3.0], [4.0]], &Device::Cpu).unwrap())
            .unwrap();
        let x = Tensor::new(&[[1.0f64, 10.0]], &Device::Cpu).unwrap().reshape((1, 1, 1, 2)).unwrap();
        let y = up.forward(&params.live(), &x).unwrap();
        assert_eq!(y.dims(), &[1, 1, 2, 4]);
        let v: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(v, vec![1., 2., 10., 20., 3., 4., 30., 40.]);
    }

    #[test]
    fn frozen_parameters_receive_no_gradient() {
        let mut init = ParamInit::new(1, DType::F64);
        let a = Conv::new(&mut init, "a", 2, 1, 1, 3, 1, Padding::Zeros, Init::He).unwrap();
        let b = Conv::new(&mut init, "b", 2, 1, 1, 3, 1, Padding::Zeros, Init::He).unwrap();
        let params = init.finish().unwrap();
        let p = params.partially_frozen(|id| id >= b.weight);
        let x = Tensor::randn(0f64, 1.0, (1, 1, 4, 4), &Device::Cpu).unwrap();
        let loss = b.forward(&p, &a.forward(&p, &x).unwrap()).unwrap().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert!(grads.get(params.var(a.weight).as_tensor()).is_none());
        assert!(grads.get(params.var(b.weight).as_tensor()).is_some());
    }
}
