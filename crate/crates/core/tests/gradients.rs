//! Autograd against central finite differences for every differentiable
//! building block.

use candle_core::{DType, Device, Tensor, Var};
use spatreg::csain::{instance_normalize, CsainLayer};
use spatreg::grid;
use spatreg::layers::{Conv, Init, ParamInit, UpConv};
use spatreg::losses;
use spatreg::net::{RegNet, RunConfig};
use spatreg::ops::{self, Padding, PatchIndex};
use spatreg::weighting;

const REL_TOL: f64 = 1e-3;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let d = Normal::new(0.0, 1.0).unwrap();
    let v: Vec<f64> = (0..n).map(|_| d.sample(&mut rng)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

/// Checks d f / d x at up to `probes` entries.
fn check(name: &str, x: &Tensor, probes: usize, f: impl Fn(&Tensor) -> Tensor) {
    let var = Var::from_tensor(x).unwrap();
    let y = f(var.as_tensor());
    let grads = y.backward().unwrap();
    let g: Vec<f64> = grads
        .get(var.as_tensor())
        .unwrap_or_else(|| panic!("{name}: no gradient"))
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap();
    let base: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
    let n = base.len();
    let step = (n / probes).max(1);
    let h = 1e-5;
    let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
    for i in (0..n).step_by(step).take(probes) {
        let eval = |delta: f64| {
            let mut v = base.clone();
            v[i] += delta;
            let t = Tensor::from_vec(v, x.dims(), &Device::Cpu).unwrap();
            ops::scalar(&f(&t)).unwrap()
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        let err = (fd - g[i]).abs() / (fd.abs().max(g[i].abs()).max(scale * 1e-2));
        assert!(err < REL_TOL, "{name}[{i}]: autograd {} vs finite difference {fd} (rel {err:e})", g[i]);
    }
}

fn weighted_sum(t: &Tensor, seed: u64) -> Tensor {
    let w = randn(t.dims(), seed);
    (t * w).unwrap().sum_all().unwrap()
}

#[test]
fn im2col_and_col2im() {
    for padding in [Padding::Zeros, Padding::Replicate] {
        let idx = PatchIndex::cached(&[5, 6], 3, 2, 1, padding).unwrap();
        check("im2col", &randn(&[2, 2, 5, 6], 1), 30, |x| weighted_sum(&ops::im2col(x, &idx).unwrap(), 2));
        let cols = randn(&[2, 2 * 9, idx.out_spatial().iter().product()], 3);
        check("col2im", &cols, 30, |c| weighted_sum(&ops::col2im(c, &idx).unwrap(), 4));
    }
}

#[test]
fn conv_and_upconv_inputs_and_weights() {
    let mut init = ParamInit::new(0, DType::F64);
    let conv = Conv::new(&mut init, "c", 2, 2, 3, 3, 2, Padding::Zeros, Init::He).unwrap();
    let up = UpConv::new(&mut init, "u", 2, 3, 2).unwrap();
    let params = init.finish().unwrap();
    let p = params.frozen();
    check("conv input", &randn(&[1, 2, 6, 6], 5), 20, |x| {
        weighted_sum(&up.forward(&p, &conv.forward(&p, x).unwrap()).unwrap(), 6)
    });
    let x = randn(&[1, 2, 6, 6], 7);
    check("conv weight", p[conv.weight.0].as_ref(), 20, |w| {
        let mut q = p.clone();
        q[conv.weight.0] = w.clone();
        weighted_sum(&up.forward(&q, &conv.forward(&q, &x).unwrap()).unwrap(), 6)
    });
    check("upconv weight", p[up.weight.0].as_ref(), 20, |w| {
        let mut q = p.clone();
        q[up.weight.0] = w.clone();
        weighted_sum(&up.forward(&q, &conv.forward(&q, &x).unwrap()).unwrap(), 6)
    });
}

fn smooth_field(shape: &[usize], amp: f64, seed: u64) -> Tensor {
    let mut dims = vec![1, shape.len()];
    dims.extend_from_slice(shape);
    let noise = randn(&dims, seed);
    weighting::gaussian_smooth(&noise, 1.5, 7).unwrap().affine(amp, 0.0).unwrap()
}

#[test]
fn warp_image_and_displacement_2d_3d() {
    for shape in [vec![7usize, 8], vec![5, 4, 6]] {
        let mut img_dims = vec![1, 2];
        img_dims.extend_from_slice(&shape);
        let img = randn(&img_dims, 11);
        // keep samples away from cell boundaries and the clamped border
        let u = (smooth_field(&shape, 1.0, 12) + 0.3).unwrap();
        check("warp image", &img, 30, |m| weighted_sum(&grid::warp_by_displacement(m, &u).unwrap(), 13));
        check("warp displacement", &u, 30, |d| {
            weighted_sum(&grid::warp_by_displacement(&img, d).unwrap(), 13)
        });
    }
}

#[test]
fn filters_and_resampling() {
    let x = randn(&[1, 2, 8, 8], 21);
    check("box sum", &x, 20, |t| weighted_sum(&ops::box_sum(t, 5).unwrap(), 22));
    check("downsample", &x, 20, |t| weighted_sum(&ops::downsample2(t).unwrap(), 23));
    check("upsample", &x, 20, |t| weighted_sum(&ops::upsample2(t).unwrap(), 24));
    check("gaussian", &x, 20, |t| weighted_sum(&weighting::gaussian_smooth(t, 0.8, 5).unwrap(), 25));
}

#[test]
fn ncc_and_diffusion() {
    let a = randn(&[2, 1, 9, 9], 31);
    let b = (a.affine(0.5, 0.0).unwrap() + randn(&[2, 1, 9, 9], 32)).unwrap();
    check("ncc", &b, 30, |t| losses::ncc_windowed(&a, t, 3).unwrap());
    let u = randn(&[1, 2, 6, 6], 33);
    let w = randn(&[1, 1, 6, 6], 34).abs().unwrap();
    check("diffusion u", &u, 30, |t| losses::weighted_diffusion(t, &w).unwrap());
    check("diffusion weights", &w, 30, |t| losses::weighted_diffusion(&u, t).unwrap());
}

#[test]
fn instance_norm_and_csain() {
    let h = randn(&[2, 3, 6, 6], 41);
    check("instance norm", &h, 30, |t| weighted_sum(&instance_normalize(t, 1e-5).unwrap(), 42));

    let mut init = ParamInit::new(3, DType::F64);
    let layer = CsainLayer::new(&mut init, "n", 2, 3, 3).unwrap();
    let params = init.finish().unwrap();
    let mut p = params.frozen();
    // non-zero modulation so both branches carry gradient
    p[layer.embed_gamma.weight.0] = randn(p[layer.embed_gamma.weight.0].dims(), 43).affine(0.3, 0.0).unwrap();
    p[layer.embed_beta.weight.0] = randn(p[layer.embed_beta.weight.0].dims(), 44).affine(0.3, 0.0).unwrap();
    let cond = randn(&[2, 1, 6, 6], 45).abs().unwrap();
    check("csain features", &h, 30, |t| weighted_sum(&layer.forward(&p, t, &cond).unwrap(), 46));
    check("csain condition", &cond, 30, |c| weighted_sum(&layer.forward(&p, &h, c).unwrap(), 46));
}

#[test]
fn soft_dice_through_linear_warp() {
    let labels = weighting::LabelMap::new(
        vec![8, 8],
        (0..64).map(|i| if (i / 8) > 3 { 1 } else { 0 } + if i % 8 > 4 { 1 } else { 0 }).collect(),
        3,
    )
    .unwrap();
    let oh = labels.one_hot(DType::F64).unwrap();
    let u = (smooth_field(&[8, 8], 0.8, 51) + 0.25).unwrap();
    check("soft dice", &u, 30, |d| {
        losses::soft_dice(&grid::warp_by_displacement(&oh, d).unwrap(), &oh).unwrap()
    });
}

#[test]
fn level_objective_wrt_probe_parameters() {
    let cfg = RunConfig {
        levels: 2,
        blocks: 1,
        width: 4,
        image_shape: vec![16, 16],
        regions: 2,
        iterations_per_level: vec![1, 1],
        ..Default::default()
    };
    let model = RegNet::new(cfg).unwrap();
    // whole network in f64 so finite differences are meaningful
    let f = weighting::gaussian_smooth(&randn(&[1, 1, 16, 16], 61), 1.0, 5).unwrap();
    let m = weighting::gaussian_smooth(&randn(&[1, 1, 16, 16], 62), 1.0, 5).unwrap();
    let fp = grid::pyramid_tensor(&f, 2).unwrap();
    let mp = grid::pyramid_tensor(&m, 2).unwrap();
    let w = Tensor::full(2.0f64, (1, 1, 16, 16), &Device::Cpu).unwrap();
    let mut params: Vec<Tensor> =
        model.params().frozen().iter().map(|t| t.to_dtype(DType::F64).unwrap()).collect();
    let names = model.params().names().to_vec();
    let id = |n: &str| names.iter().position(|x| x == n).unwrap();
    // a non-trivial output layer and modulation so every branch carries signal
    for n in ["level0.dec2.weight", "level1.dec2.weight"] {
        params[id(n)] = randn(params[id(n)].dims(), 63).affine(0.05, 0.0).unwrap();
    }
    for n in ["level1.block0.norm1.embed_gamma.weight", "level1.block0.norm2.embed_beta.weight"] {
        params[id(n)] = randn(params[id(n)].dims(), 64).affine(0.1, 0.0).unwrap();
    }
    for probe in ["level1.dec2.weight", "level1.enc1.weight", "level1.block0.norm1.embed_shared.weight", "level1.up.weight"] {
        let i = id(probe);
        check(probe, &params[i].clone(), 12, |t| {
            let mut q = params.clone();
            q[i] = t.clone();
            let us = model.forward_with(&q, &fp, &mp, &w, 1).unwrap();
            losses::pyramid_objective(&fp, &mp, &us[1], &w, 1, 2, 2.0).unwrap().total
        });
    }
}

#[test]
fn conv_batched_input() {
    let mut init = ParamInit::new(0, DType::F64);
    let conv = Conv::new(&mut init, "c", 2, 1, 3, 3, 1, Padding::Replicate, Init::He).unwrap();
    let p = init.finish().unwrap().frozen();
    check("conv batch1", &randn(&[1, 1, 6, 6], 5), 20, |x| weighted_sum(&conv.forward(&p, x).unwrap(), 6));
    check("conv batch2", &randn(&[2, 1, 6, 6], 5), 20, |x| weighted_sum(&conv.forward(&p, x).unwrap(), 6));
}

/// Every check in this file, for aggregate reporting.
#[allow(dead_code)]
pub const SUITE: &[(&str, fn())] = &[
    ("im2col_and_col2im", im2col_and_col2im),
    ("conv_and_upconv_inputs_and_weights", conv_and_upconv_inputs_and_weights),
    ("warp_image_and_displacement_2d_3d", warp_image_and_displacement_2d_3d),
    ("filters_and_resampling", filters_and_resampling),
    ("ncc_and_diffusion", ncc_and_diffusion),
    ("instance_norm_and_csain", instance_norm_and_csain),
    ("soft_dice_through_linear_warp", soft_dice_through_linear_warp),
    ("level_objective_wrt_probe_parameters", level_objective_wrt_probe_parameters),
    ("conv_batched_input", conv_batched_input),
];
