//! Registration of stored pairs with a trained model and their metrics.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid::{self, DeformationField, DisplacementField, Image};
use crate::metrics::{self, JacobianField, MetricsReport};
use crate::net::RegNet;
use crate::synth::PhantomPair;
use crate::weighting::{LabelMap, RegWeights, WeightMode};

/// Pairs pushed through the network at once during evaluation.
pub const EVAL_BATCH: usize = 8;

#[derive(Debug, Clone)]
pub struct Registration {
    pub displacement: DisplacementField,
    pub deformation: DeformationField,
    pub warped: Image,
    pub warped_labels: Option<LabelMap>,
    pub jacobian: JacobianField,
    pub report: MetricsReport,
}

fn check_lambdas(model: &RegNet, lambdas: &[f64]) -> Result<()> {
    let k = model.config().regions;
    if lambdas.len() != k {
        return Err(invalid!("{} weights given, model has {k} regions", lambdas.len()));
    }
    Ok(())
}

/// One full-resolution weight field per fixed label map, stacked `(B, 1, *S)`.
pub fn stacked_weights(model: &RegNet, labels: &[&LabelMap], lambdas: &[f64], mode: WeightMode) -> Result<Tensor> {
    check_lambdas(model, lambdas)?;
    let fields = labels
        .iter()
        .map(|l| {
            if l.regions() != model.config().regions {
                return Err(invalid!(
                    "label map has {} regions, model has {}",
                    l.regions(),
                    model.config().regions
                ));
            }
            Ok(RegWeights::build(l, lambdas, model.config().smoothing)?.field(mode).clone())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&fields, 0)?)
}

/// Register `moving` onto `fixed` with weights built from `fixed_labels`.
pub fn register(
    model: &RegNet,
    fixed: &Image,
    moving: &Image,
    fixed_labels: &LabelMap,
    moving_labels: Option<&LabelMap>,
    lambdas: &[f64],
    mode: WeightMode,
) -> Result<Registration> {
    if fixed.spatial_shape() != moving.spatial_shape() || fixed.spatial_shape() != fixed_labels.shape() {
        return Err(invalid!(
            "fixed {:?}, moving {:?} and labels {:?} must share a grid",
            fixed.spatial_shape(),
            moving.spatial_shape(),
            fixed_labels.shape()
        ));
    }
    let weights = stacked_weights(model, &[fixed_labels], lambdas, mode)?;
    let u = model.forward(fixed.tensor(), moving.tensor(), &weights)?;
    let u = u.last().expect("at least one level");
    finish(u, moving, fixed_labels, moving_labels)
}

fn finish(u: &Tensor, moving: &Image, fixed_labels: &LabelMap, moving_labels: Option<&LabelMap>) -> Result<Registration> {
    let displacement = DisplacementField::new(u.clone())?;
    let deformation = grid::compose(&displacement)?;
    let warped = grid::warp(moving, &deformation)?;
    let jacobian = metrics::jacobian_det(&deformation)?;
    let (warped_labels, report) = match moving_labels {
        Some(ml) => {
            let wl = grid::warp_labels(ml, &deformation)?;
            let report = MetricsReport::compute(&deformation, &wl, fixed_labels)?;
            (Some(wl), report)
        }
        None => (None, MetricsReport::deformation_only(&deformation)?),
    };
    Ok(Registration {
        displacement,
        deformation,
        warped,
        warped_labels,
        jacobian,
        report,
    })
}

/// Register every pair with one weight vector, batching forward passes.
pub fn evaluate_pairs(model: &RegNet, pairs: &[PhantomPair], lambdas: &[f64], mode: WeightMode) -> Result<Vec<Registration>> {
    check_lambdas(model, lambdas)?;
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(EVAL_BATCH) {
        let labels: Vec<&LabelMap> = chunk.iter().map(|p| &p.fixed_labels).collect();
        let weights = stacked_weights(model, &labels, lambdas, mode)?;
        let fixed: Vec<&Tensor> = chunk.iter().map(|p| p.fixed.tensor()).collect();
        let moving: Vec<&Tensor> = chunk.iter().map(|p| p.moving.tensor()).collect();
        let us = model.forward(&Tensor::cat(&fixed, 0)?, &Tensor::cat(&moving, 0)?, &weights)?;
        let u = us.last().expect("at least one level");
        for (i, p) in chunk.iter().enumerate() {
            out.push(finish(&u.narrow(0, i, 1)?, &p.moving, &p.fixed_labels, Some(&p.moving_labels))?);
        }
    }
    Ok(out)
}

/// Mean of per-pair reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub pairs: usize,
    pub dice_per_region: Vec<f64>,
    pub avg_dice: f64,
    pub folding_pct: f64,
    pub jac_grad_mean: f64,
    pub jac_std: f64,
}

pub fn summarize(reports: &[&MetricsReport]) -> Result<Summary> {
    let n = reports.len();
    if n == 0 {
        return Err(invalid!("nothing to summarize"));
    }
    let mean = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(|r| f(r)).sum::<f64>() / n as f64;
    let k = reports[0].dice_per_region.len();
    let dice_per_region = (0..k)
        .map(|r| mean(&|m: &MetricsReport| m.dice_per_region.get(r).copied().unwrap_or(f64::NAN)))
        .collect();
    Ok(Summary {
        pairs: n,
        dice_per_region,
        avg_dice: mean(&|m| m.dice_avg),
        folding_pct: mean(&|m| m.folding_pct),
        jac_grad_mean: mean(&|m| m.jac_grad_mean),
        jac_std: mean(&|m| m.jac_std),
    })
}

pub fn summarize_registrations(regs: &[Registration]) -> Result<Summary> {
    summarize(&regs.iter().map(|r| &r.report).collect::<Vec<_>>())
}

/// Per-pair unweighted diffusion energy of the predicted displacement.
pub fn diffusion_energies(regs: &[Registration]) -> Result<Vec<f64>> {
    regs.iter().map(|r| metrics::diffusion_energy(r.displacement.tensor())).collect()
}

pub const REPORT_HEADER: &str = "method,avg_dice,folding_pct,jac_grad_mean,jac_std,lambda_star";

/// Weight vector as a CSV-safe cell (`;`-separated).
pub fn lambda_cell(lambdas: &[f64]) -> String {
    lambdas.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";")
}

pub fn report_row(method: &str, s: &Summary, lambdas: &[f64]) -> String {
    format!(
        "{method},{},{},{},{},{}",
        s.avg_dice,
        s.folding_pct,
        s.jac_grad_mean,
        s.jac_std,
        lambda_cell(lambdas)
    )
}
