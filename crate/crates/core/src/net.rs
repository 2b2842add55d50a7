//! Coarse-to-fine pyramid registration network whose residual blocks are
//! conditioned on the regularization weight field, and its training loop.

use std::ops::Range;
use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::csain::CsainBlock;
use crate::error::{invalid, Error, Result};
use crate::grid;
use crate::layers::{Conv, Init, ParamId, ParamInit, Params, UpConv, LEAKY_SLOPE};
use crate::losses;
use crate::ops::{self, Padding};
use crate::synth::PhantomPair;
use crate::weighting::{self, Smoothing, WeightMode, LAMBDA_MAX, LAMBDA_MIN};

pub const CONFIG_VERSION: u32 = 1;
/// Default grid extent seen by the regularizer.
pub const DEFAULT_SPAN: f64 = 8.0;

/// Features live two halvings below each pyramid level.
const FEATURE_HALVINGS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub format_version: u32,
    /// Pyramid levels L.
    pub levels: usize,
    /// Conditioned residual blocks per level N.
    pub blocks: usize,
    /// Feature width W.
    pub width: usize,
    pub learning_rate: f64,
    pub iterations_per_level: Vec<usize>,
    pub batch_size: usize,
    /// Training distribution of every per-region weight.
    pub lambda_range: [f64; 2],
    pub seed: u64,
    pub image_shape: Vec<usize>,
    /// Number of label regions K.
    pub regions: usize,
    pub smoothing: Smoothing,
    /// Weight field used to condition the network and weight the
    /// regularizer during training.
    pub weight_mode: WeightMode,
    /// Grid extent, in regularizer units, along every axis; the diffusion
    /// term sees displacements rescaled by `span / (n - 1)`.
    pub displacement_span: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            format_version: CONFIG_VERSION,
            levels: 3,
            blocks: 5,
            width: 32,
            learning_rate: 1e-4,
            iterations_per_level: vec![20_000; 3],
            batch_size: 2,
            lambda_range: [LAMBDA_MIN, LAMBDA_MAX],
            seed: 0,
            image_shape: vec![64, 64],
            regions: 5,
            smoothing: Smoothing::default(),
            weight_mode: WeightMode::Smoothed,
            displacement_span: DEFAULT_SPAN,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_VERSION {
            return Err(Error::VersionMismatch(format!(
                "config version {} (expected {CONFIG_VERSION})",
                self.format_version
            )));
        }
        if self.levels == 0 || self.blocks == 0 || self.width == 0 || self.batch_size == 0 || self.regions == 0 {
            return Err(invalid!("levels, blocks, width, batch_size and regions must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid!("learning rate must be positive"));
        }
        if !(self.displacement_span > 0.0 && self.displacement_span.is_finite()) {
            return Err(invalid!("displacement span must be positive"));
        }
        if self.iterations_per_level.len() != self.levels {
            return Err(invalid!(
                "{} iteration counts for {} levels",
                self.iterations_per_level.len(),
                self.levels
            ));
        }
        let [lo, hi] = self.lambda_range;
        if !(LAMBDA_MIN <= lo && lo < hi && hi <= LAMBDA_MAX) {
            return Err(invalid!("lambda range [{lo}, {hi}] outside [{LAMBDA_MIN}, {LAMBDA_MAX}]"));
        }
        weighting::gaussian_kernel(self.smoothing.sigma, self.smoothing.window)?;
        check_network_shape(&self.image_shape, self.levels)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn dims(&self) -> usize {
        self.image_shape.len()
    }
}

/// Pyramid constraint plus room for the feature grid at the coarsest level.
pub fn check_network_shape(shape: &[usize], levels: usize) -> Result<()> {
    grid::check_pyramid_shape(shape, levels)?;
    let factor = 1usize << (levels - 1 + FEATURE_HALVINGS);
    for &n in shape {
        if n % factor != 0 || n / factor < 2 {
            return Err(invalid!(
                "shape incompatible with pyramid depth: {shape:?} needs every axis divisible by {factor} \
                 with at least 2 feature voxels at the coarsest level"
            ));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct LevelNet {
    enc1: Conv,
    enc2: Conv,
    blocks: Vec<CsainBlock>,
    up: UpConv,
    dec1: Conv,
    dec2: Conv,
    params: Range<usize>,
}

impl LevelNet {
    fn new(init: &mut ParamInit, level: usize, cfg: &RunConfig) -> Result<Self> {
        let (d, w) = (cfg.dims(), cfg.width);
        let first = init.count();
        let name = |s: &str| format!("level{level}.{s}");
        let enc1 = Conv::new(init, &name("enc1"), d, 2 + d, w, 3, 2, Padding::Zeros, Init::He)?;
        let enc2 = Conv::new(init, &name("enc2"), d, w, w, 3, 2, Padding::Zeros, Init::He)?;
        let blocks = (0..cfg.blocks)
            .map(|b| CsainBlock::new(init, &name(&format!("block{b}")), d, w))
            .collect::<Result<Vec<_>>>()?;
        let up = UpConv::new(init, &name("up"), d, w, w)?;
        let dec1 = Conv::new(init, &name("dec1"), d, 2 * w, w, 3, 1, Padding::Zeros, Init::He)?;
        let dec2 = Conv::new(init, &name("dec2"), d, w, d, 3, 1, Padding::Zeros, Init::Normal(1e-5))?;
        Ok(Self {
            enc1,
            enc2,
            blocks,
            up,
            dec1,
            dec2,
            params: first..init.count(),
        })
    }

    /// Residual displacement on this level's grid.
    fn forward(&self, p: &[Tensor], input: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let e1 = ops::leaky_relu(&self.enc1.forward(p, input)?, LEAKY_SLOPE)?;
        let mut h = ops::leaky_relu(&self.enc2.forward(p, &e1)?, LEAKY_SLOPE)?;
        for block in &self.blocks {
            h = block.forward(p, &h, cond)?;
        }
        let h = ops::leaky_relu(&h, LEAKY_SLOPE)?;
        let d = self.up.forward(p, &h)?;
        let d = ops::leaky_relu(&self.dec1.forward(p, &Tensor::cat(&[&d, &e1], 1)?)?, LEAKY_SLOPE)?;
        let r = self.dec2.forward(p, &d)?;
        grid::upsample_displacement_tensor(&r)
    }
}

/// Trained (or freshly initialized) registration model.
pub struct RegNet {
    config: RunConfig,
    levels: Vec<LevelNet>,
    params: Params,
}

impl RegNet {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut init = ParamInit::new(config.seed, DType::F32);
        let levels = (0..config.levels)
            .map(|l| LevelNet::new(&mut init, l, &config))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            levels,
            params: init.finish()?,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn level_params(&self, level: usize) -> Range<usize> {
        self.levels[level].params.clone()
    }

    /// Displacements per level, coarsest first, for levels `0..=upto`.
    ///
    /// `fixed`/`moving` are pyramids indexed by scale; `weights` is the
    /// full-resolution weight field `(B, 1, *S)` in weight units.
    pub fn forward_with(
        &self,
        p: &[Tensor],
        fixed: &[Tensor],
        moving: &[Tensor],
        weights: &Tensor,
        upto: usize,
    ) -> Result<Vec<Tensor>> {
        let levels = self.config.levels;
        if upto >= levels {
            return Err(invalid!("level {upto} outside a {levels}-level model"));
        }
        if fixed.len() < levels || moving.len() < levels {
            return Err(invalid!("pyramids must have {levels} scales"));
        }
        if fixed[0].dims()[2..] != self.config.image_shape[..] || fixed[0].dims() != moving[0].dims() {
            return Err(invalid!(
                "images {:?}/{:?} do not match model grid {:?}",
                fixed[0].dims(),
                moving[0].dims(),
                self.config.image_shape
            ));
        }
        if weights.dims()[2..] != fixed[0].dims()[2..] || weights.dim(0)? != fixed[0].dim(0)? {
            return Err(invalid!("weight field {:?} does not match images {:?}", weights.dims(), fixed[0].dims()));
        }
        let cond_full = weights.to_dtype(fixed[0].dtype())?.affine(1.0 / LAMBDA_MAX, 0.0)?;
        let d = self.config.dims();
        let mut out: Vec<Tensor> = Vec::with_capacity(upto + 1);
        for (l, net) in self.levels.iter().enumerate().take(upto + 1) {
            let scale = levels - 1 - l;
            let (f, m) = (&fixed[scale], &moving[scale]);
            let (prior, warped) = match out.last() {
                None => {
                    let mut shape = f.dims().to_vec();
                    shape[1] = d;
                    (Tensor::zeros(shape, f.dtype(), f.device())?, m.clone())
                }
                Some(u) => {
                    let up = grid::upsample_displacement_tensor(u)?;
                    let w = grid::warp_by_displacement(m, &up)?;
                    (up, w)
                }
            };
            let input = Tensor::cat(&[f, &warped, &prior], 1)?;
            let cond = weighting::resample_weights(&cond_full, scale + FEATURE_HALVINGS)?;
            let residual = net.forward(p, &input, &cond)?;
            out.push((prior + residual)?);
        }
        Ok(out)
    }

    /// Inference with frozen parameters on batched images `(B, 1, *S)`.
    pub fn forward(&self, fixed: &Tensor, moving: &Tensor, weights: &Tensor) -> Result<Vec<Tensor>> {
        let fp = grid::pyramid_tensor(fixed, self.config.levels)?;
        let mp = grid::pyramid_tensor(moving, self.config.levels)?;
        self.forward_with(&self.params.frozen(), &fp, &mp, weights, self.config.levels - 1)
    }
}

/// One logged optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub level: usize,
    pub iteration: usize,
    pub total: f64,
    pub similarity: f64,
    pub regularizer: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where to write a state dump if the loss becomes non-finite.
    pub dump_dir: Option<PathBuf>,
    pub log_every: usize,
}

/// Pre-stacked training tensors.
struct TrainingSet {
    fixed: Vec<Vec<Tensor>>,
    moving: Vec<Vec<Tensor>>,
    one_hot: Vec<Tensor>,
}

impl TrainingSet {
    fn new(pairs: &[PhantomPair], cfg: &RunConfig) -> Result<Self> {
        if pairs.is_empty() {
            return Err(invalid!("training needs at least one pair"));
        }
        let mut set = Self {
            fixed: Vec::new(),
            moving: Vec::new(),
            one_hot: Vec::new(),
        };
        for p in pairs {
            if p.fixed.spatial_shape() != cfg.image_shape.as_slice() {
                return Err(invalid!(
                    "pair grid {:?} differs from configured {:?}",
                    p.fixed.spatial_shape(),
                    cfg.image_shape
                ));
            }
            if p.fixed_labels.regions() != cfg.regions {
                return Err(invalid!(
                    "pair has {} regions, config expects {}",
                    p.fixed_labels.regions(),
                    cfg.regions
                ));
            }
            set.fixed.push(grid::pyramid_tensor(p.fixed.tensor(), cfg.levels)?);
            set.moving.push(grid::pyramid_tensor(p.moving.tensor(), cfg.levels)?);
            set.one_hot.push(p.fixed_labels.one_hot(DType::F32)?);
        }
        Ok(set)
    }

    fn batch(&self, idx: &[usize]) -> Result<(Vec<Tensor>, Vec<Tensor>, Tensor)> {
        let scales = self.fixed[0].len();
        let stack = |src: &Vec<Vec<Tensor>>, s: usize| -> Result<Tensor> {
            let parts: Vec<&Tensor> = idx.iter().map(|&i| &src[i][s]).collect();
            Ok(Tensor::cat(&parts, 0)?)
        };
        let fixed = (0..scales).map(|s| stack(&self.fixed, s)).collect::<Result<Vec<_>>>()?;
        let moving = (0..scales).map(|s| stack(&self.moving, s)).collect::<Result<Vec<_>>>()?;
        let oh: Vec<&Tensor> = idx.iter().map(|&i| &self.one_hot[i]).collect();
        Ok((fixed, moving, Tensor::cat(&oh, 0)?))
    }
}

/// Weight field for a batch of one-hot label maps and weight vectors.
pub fn batch_weight_field(one_hot: &Tensor, lambdas: &Tensor, mode: WeightMode, smoothing: Smoothing) -> Result<Tensor> {
    let raw = weighting::weight_field(one_hot, lambdas)?;
    match mode {
        WeightMode::Raw => Ok(raw),
        WeightMode::Smoothed => weighting::gaussian_smooth(&raw, smoothing.sigma, smoothing.window),
    }
}

/// Train every level in turn, coarse to fine; earlier levels stay frozen
/// while later ones train. A fresh weight vector is drawn for every sample
/// of every iteration.
pub fn train(pairs: &[PhantomPair], config: &RunConfig, opts: &TrainOptions) -> Result<(RegNet, Vec<CurvePoint>)> {
    let model = RegNet::new(config.clone())?;
    let data = TrainingSet::new(pairs, config)?;
    let mut curve = Vec::new();
    let [lo, hi] = config.lambda_range;
    let k = config.regions;
    for level in 0..config.levels {
        let range = model.level_params(level);
        let trainable = |id: ParamId| range.contains(&id.0);
        let vars = model.params.vars_where(trainable);
        let mut opt = AdamW::new(
            vars,
            ParamsAdamW {
                lr: config.learning_rate,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 0.0,
            },
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9E37_79B9).wrapping_add(level as u64 + 1));
        for it in 0..config.iterations_per_level[level] {
            let idx: Vec<usize> = (0..config.batch_size).map(|_| rng.random_range(0..data.fixed.len())).collect();
            let lambdas: Vec<f32> = (0..config.batch_size * k).map(|_| rng.random_range(lo..=hi) as f32).collect();
            let lambdas = Tensor::from_vec(lambdas, (config.batch_size, k), &Device::Cpu)?;
            let (fixed, moving, one_hot) = data.batch(&idx)?;
            let weights = batch_weight_field(&one_hot, &lambdas, config.weight_mode, config.smoothing)?;

            let p = model.params.partially_frozen(trainable);
            let us = model.forward_with(&p, &fixed, &moving, &weights, level)?;
            let terms = losses::pyramid_objective(&fixed, &moving, &us[level], &weights, level, config.levels, config.displacement_span)?;
            let (sim, reg, total) = terms.values()?;
            let point = CurvePoint {
                level,
                iteration: it,
                total,
                similarity: sim,
                regularizer: reg,
            };
            if !total.is_finite() {
                dump_state(opts, &point, &lambdas, &idx, &curve)?;
                return Err(Error::NumericalFailure(format!(
                    "non-finite loss at level {level}, iteration {it}"
                )));
            }
            opt.backward_step(&terms.total)?;
            if opts.log_every > 0 && it % opts.log_every == 0 {
                log::info!(
                    "level {level} iter {it}: total {total:.4} sim {sim:.4} reg {reg:.4}"
                );
            }
            curve.push(point);
        }
    }
    Ok((model, curve))
}

fn dump_state(
    opts: &TrainOptions,
    point: &CurvePoint,
    lambdas: &Tensor,
    idx: &[usize],
    curve: &[CurvePoint],
) -> Result<()> {
    let Some(dir) = &opts.dump_dir else {
        return Ok(());
    };
    std::fs::create_dir_all(dir)?;
    let lambdas: Vec<Vec<f32>> = lambdas.to_vec2()?;
    let tail = &curve[curve.len().saturating_sub(50)..];
    let dump = serde_json::json!({
        "failed_step": point,
        "pair_indices": idx,
        "lambdas": lambdas,
        "recent_curve": tail,
    });
    std::fs::write(dir.join("nan_dump.json"), serde_json::to_vec_pretty(&dump)?)?;
    Ok(())
}
