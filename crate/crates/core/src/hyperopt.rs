//! Post-training search for per-region regularization weights: gradient
//! ascent of validation soft Dice through the frozen network, and
//! one-region-at-a-time sweeps.

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::eval;
use crate::grid;
use crate::losses;
use crate::net::{batch_weight_field, RegNet};
use crate::ops;
use crate::synth::PhantomPair;
use crate::weighting::{clamp_lambdas, WeightMode, LAMBDA_MAX, LAMBDA_MIN};

pub const DEFAULT_STEPS: usize = 100;
pub const DEFAULT_LR: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub lambdas: Vec<f64>,
    pub soft_dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperOptState {
    pub lambda_current: Vec<f64>,
    pub step: usize,
    pub best_dice: f64,
    pub best_lambda: Vec<f64>,
    pub trajectory: Vec<TrajectoryPoint>,
}

impl HyperOptState {
    pub fn lambda_star(&self) -> &[f64] {
        &self.best_lambda
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperOptConfig {
    pub lambda_init: Vec<f64>,
    pub steps: usize,
    pub lr: f64,
    pub mode: WeightMode,
}

impl HyperOptConfig {
    /// All-ones start, default step count and rate.
    pub fn new(regions: usize) -> Self {
        Self {
            lambda_init: vec![1.0; regions],
            steps: DEFAULT_STEPS,
            lr: DEFAULT_LR,
            mode: WeightMode::Smoothed,
        }
    }
}

/// Validation tensors stacked into one batch.
pub struct ValidationBatch {
    fixed: Vec<Tensor>,
    moving: Vec<Tensor>,
    fixed_one_hot: Tensor,
    moving_one_hot: Tensor,
}

impl ValidationBatch {
    pub fn new(model: &RegNet, pairs: &[PhantomPair]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(invalid!("validation set is empty"));
        }
        let cfg = model.config();
        for p in pairs {
            if p.fixed_labels.regions() != cfg.regions || p.moving_labels.regions() != cfg.regions {
                return Err(invalid!("validation labels must have {} regions", cfg.regions));
            }
        }
        let cat = |f: &dyn Fn(&PhantomPair) -> Tensor| -> Result<Tensor> {
            Ok(Tensor::cat(&pairs.iter().map(f).collect::<Vec<_>>(), 0)?)
        };
        let fixed = cat(&|p| p.fixed.tensor().clone())?;
        let moving = cat(&|p| p.moving.tensor().clone())?;
        let one_hot = |l: &crate::weighting::LabelMap| l.one_hot(DType::F32);
        let fixed_one_hot = Tensor::cat(
            &pairs.iter().map(|p| one_hot(&p.fixed_labels)).collect::<Result<Vec<_>>>()?,
            0,
        )?;
        let moving_one_hot = Tensor::cat(
            &pairs.iter().map(|p| one_hot(&p.moving_labels)).collect::<Result<Vec<_>>>()?,
            0,
        )?;
        Ok(Self {
            fixed: grid::pyramid_tensor(&fixed, cfg.levels)?,
            moving: grid::pyramid_tensor(&moving, cfg.levels)?,
            fixed_one_hot,
            moving_one_hot,
        })
    }

    pub fn len(&self) -> usize {
        self.fixed_one_hot.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Validation soft Dice as a graph node, for a `(1, K)` weight tensor.
fn soft_dice_of(model: &RegNet, p: &[Tensor], batch: &ValidationBatch, lambdas: &Tensor, mode: WeightMode) -> Result<Tensor> {
    let b = batch.len();
    let k = lambdas.dim(1)?;
    let lam = lambdas.broadcast_as((b, k))?;
    let weights = batch_weight_field(&batch.fixed_one_hot, &lam, mode, model.config().smoothing)?;
    let us = model.forward_with(p, &batch.fixed, &batch.moving, &weights, model.config().levels - 1)?;
    let u = us.last().expect("at least one level");
    // soft masks warped linearly keep a gradient path to the weights
    let warped = grid::warp_by_displacement(&batch.moving_one_hot, u)?;
    losses::soft_dice(&warped, &batch.fixed_one_hot)
}

/// Validation soft Dice for a fixed weight vector.
pub fn validation_soft_dice(model: &RegNet, batch: &ValidationBatch, lambdas: &[f64], mode: WeightMode) -> Result<f64> {
    let lam = lambda_tensor(&clamp_lambdas(lambdas)?)?;
    Ok(ops::scalar(&soft_dice_of(model, &model.params().frozen(), batch, &lam, mode)?)?)
}

fn lambda_tensor(lambdas: &[f64]) -> Result<Tensor> {
    let v: Vec<f32> = lambdas.iter().map(|&x| x as f32).collect();
    Ok(Tensor::from_vec(v, (1, lambdas.len()), &Device::Cpu)?)
}

fn read_lambdas(v: &Var) -> Result<Vec<f64>> {
    Ok(v.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?)
}

/// Adam ascent on validation soft Dice with the network frozen. The start
/// point is projected into range before the first step and after every
/// step; the best evaluated point is returned.
pub fn optimize_lambda(model: &RegNet, val: &[PhantomPair], cfg: &HyperOptConfig) -> Result<HyperOptState> {
    let k = model.config().regions;
    if cfg.lambda_init.len() != k {
        return Err(invalid!("{} initial weights for {k} regions", cfg.lambda_init.len()));
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(invalid!("learning rate must be positive"));
    }
    let init = clamp_lambdas(&cfg.lambda_init)?;
    let batch = ValidationBatch::new(model, val)?;
    let frozen = model.params().frozen();
    let lambda = Var::from_tensor(&lambda_tensor(&init)?)?;
    let mut opt = AdamW::new(
        vec![lambda.clone()],
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut state = HyperOptState {
        lambda_current: init.clone(),
        step: 0,
        best_dice: f64::NEG_INFINITY,
        best_lambda: init,
        trajectory: Vec::with_capacity(cfg.steps + 1),
    };
    for step in 0..=cfg.steps {
        let dice = soft_dice_of(model, &frozen, &batch, lambda.as_tensor(), cfg.mode)?;
        let value = ops::scalar(&dice)?;
        state.step = step;
        state.lambda_current = read_lambdas(&lambda)?;
        state.trajectory.push(TrajectoryPoint {
            step,
            lambdas: state.lambda_current.clone(),
            soft_dice: value,
        });
        if !value.is_finite() {
            return Err(Error::NumericalFailure(format!(
                "non-finite soft Dice at step {step}: {}",
                serde_json::to_string(&state)?
            )));
        }
        if value > state.best_dice {
            state.best_dice = value;
            state.best_lambda = state.lambda_current.clone();
        }
        if step == cfg.steps {
            break;
        }
        let grads = dice.neg()?.backward()?;
        let g = grads
            .get(lambda.as_tensor())
            .ok_or_else(|| Error::Contract("soft Dice has no gradient path to the weights".into()))?;
        let finite = g.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NumericalFailure(format!(
                "non-finite weight gradient at step {step}: {}",
                serde_json::to_string(&state)?
            )));
        }
        opt.step(&grads)?;
        lambda.set(&lambda.as_tensor().clamp(LAMBDA_MIN as f32, LAMBDA_MAX as f32)?)?;
    }
    Ok(state)
}

/// One row of a single-region sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda_k: f64,
    /// Mean hard Dice per region over the pairs.
    pub dice: Vec<f64>,
    pub folding_pct: f64,
    pub jac_grad_mean: f64,
    pub jac_std: f64,
}

/// Vary `lambdas[region]` over `grid`, keeping the other entries fixed.
pub fn sweep_lambda(
    model: &RegNet,
    pairs: &[PhantomPair],
    region: usize,
    grid: &[f64],
    base: &[f64],
    mode: WeightMode,
) -> Result<Vec<SweepRow>> {
    let k = model.config().regions;
    if region >= k {
        return Err(invalid!("region {region} out of range for {k} regions"));
    }
    if base.len() != k {
        return Err(invalid!("{} base weights for {k} regions", base.len()));
    }
    if grid.is_empty() || pairs.is_empty() {
        return Err(invalid!("sweep needs a non-empty grid and pair set"));
    }
    grid.iter()
        .map(|&v| {
            let mut lambdas = base.to_vec();
            lambdas[region] = v;
            let regs = eval::evaluate_pairs(model, pairs, &lambdas, mode)?;
            let s = eval::summarize_registrations(&regs)?;
            Ok(SweepRow {
                lambda_k: v,
                dice: s.dice_per_region,
                folding_pct: s.folding_pct,
                jac_grad_mean: s.jac_grad_mean,
                jac_std: s.jac_std,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let k = rows.first().map_or(0, |r| r.dice.len());
    let mut out = String::from("lambda_k");
    for r in 0..k {
        out.push_str(&format!(",dice_{r}"));
    }
    out.push_str(",folding_pct\n");
    for row in rows {
        out.push_str(&row.lambda_k.to_string());
        for d in &row.dice {
            out.push_str(&format!(",{d}"));
        }
        out.push_str(&format!(",{}\n", row.folding_pct));
    }
    out
}
