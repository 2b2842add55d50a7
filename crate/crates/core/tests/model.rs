use std::sync::OnceLock;

use candle_core::{DType, Device, Tensor};
use spatreg::eval;
use spatreg::grid::Image;
use spatreg::hyperopt::{self, HyperOptConfig};
use spatreg::net::{train, CurvePoint, RegNet, RunConfig, TrainOptions};
use spatreg::synth::{self, PairConfig, PhantomPair};
use spatreg::weighting::WeightMode;
use spatreg::Error;
use tempfile::TempDir;

const SHAPE: [usize; 2] = [32, 32];

fn config(iters: usize) -> RunConfig {
    RunConfig {
        levels: 2,
        blocks: 1,
        width: 8,
        learning_rate: 1e-3,
        iterations_per_level: vec![iters; 2],
        batch_size: 2,
        image_shape: SHAPE.to_vec(),
        seed: 5,
        ..Default::default()
    }
}

fn pairs(seed: u64, n: usize) -> Vec<PhantomPair> {
    synth::gen_dataset(seed, n, &SHAPE, 5, &PairConfig::new(synth::default_roughness(5))).unwrap()
}

struct Trained {
    model: RegNet,
    curve: Vec<CurvePoint>,
    val: Vec<PhantomPair>,
}

fn trained() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| {
        let (model, curve) = train(&pairs(100, 16), &config(150), &TrainOptions::default()).unwrap();
        Trained {
            model,
            curve,
            val: pairs(500, 3),
        }
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

#[test]
fn loss_decreases_at_every_level() {
    let t = trained();
    for level in 0..2 {
        let c: Vec<f64> = t.curve.iter().filter(|p| p.level == level).map(|p| p.total).collect();
        assert_eq!(c.len(), 150);
        let n = c.len() / 10;
        let (first, last) = (median(c[..n].to_vec()), median(c[c.len() - n..].to_vec()));
        assert!(last < first, "level {level}: {first} -> {last}");
    }
}

#[test]
fn seeded_training_is_bit_reproducible() {
    let data = pairs(7, 4);
    let (a, ca) = train(&data, &config(6), &TrainOptions::default()).unwrap();
    let (b, cb) = train(&data, &config(6), &TrainOptions::default()).unwrap();
    assert_eq!(ca, cb);
    assert_eq!(a.params().snapshot().unwrap(), b.params().snapshot().unwrap());
}

#[test]
fn non_finite_loss_aborts_with_dump() {
    let mut data = pairs(8, 2);
    let mut v = data[0].fixed.to_vec().unwrap();
    // finite, but its square overflows
    v[100] = f32::MAX;
    data[0].fixed = Image::from_vec(&SHAPE, v).unwrap();
    data.truncate(1);
    let dir = TempDir::new().unwrap();
    let opts = TrainOptions {
        dump_dir: Some(dir.path().to_path_buf()),
        log_every: 0,
    };
    let Err(err) = train(&data, &config(3), &opts) else {
        panic!("training on a NaN image succeeded");
    };
    assert!(matches!(err, Error::NumericalFailure(_)), "{err}");
    let dump: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("nan_dump.json")).unwrap()).unwrap();
    assert_eq!(dump["failed_step"]["iteration"], 0);
}

#[test]
fn training_rejects_mismatched_data() {
    let data = pairs(9, 2);
    let mut cfg = config(1);
    cfg.regions = 4;
    assert!(matches!(train(&data, &cfg, &TrainOptions::default()), Err(Error::InvalidArgument(_))));
    let mut cfg = config(1);
    cfg.image_shape = vec![64, 64];
    assert!(matches!(train(&data, &cfg, &TrainOptions::default()), Err(Error::InvalidArgument(_))));
}

#[test]
fn per_level_outputs_double_in_resolution() {
    let t = trained();
    let p = &t.val[0];
    let w = eval::stacked_weights(&t.model, &[&p.fixed_labels], &[1.0; 5], WeightMode::Smoothed).unwrap();
    let us = t.model.forward(p.fixed.tensor(), p.moving.tensor(), &w).unwrap();
    assert_eq!(us.len(), 2);
    assert_eq!(us[0].dims(), &[1, 2, 16, 16]);
    assert_eq!(us[1].dims(), &[1, 2, 32, 32]);
}

#[test]
fn weight_vector_length_must_match_regions() {
    let t = trained();
    let p = &t.val[0];
    let r = eval::register(&t.model, &p.fixed, &p.moving, &p.fixed_labels, None, &[1.0; 3], WeightMode::Smoothed);
    assert!(matches!(r, Err(Error::InvalidArgument(_))));
    let wrong = Tensor::ones((1, 1, 16, 16), DType::F32, &Device::Cpu).unwrap();
    assert!(t.model.forward(p.fixed.tensor(), p.moving.tensor(), &wrong).is_err());
}

#[test]
fn different_weights_give_different_fields() {
    let t = trained();
    let p = &t.val[0];
    let field = |lam: f64| {
        let r = eval::register(&t.model, &p.fixed, &p.moving, &p.fixed_labels, None, &[lam; 5], WeightMode::Smoothed).unwrap();
        r.displacement.tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap()
    };
    let (a, b) = (field(0.5), field(8.0));
    let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
    assert!(diff > 1e-4, "max difference {diff}");
}

#[test]
fn batched_evaluation_matches_single_registration() {
    let t = trained();
    let lam = [2.0, 1.0, 0.5, 4.0, 3.0];
    let batch = eval::evaluate_pairs(&t.model, &t.val, &lam, WeightMode::Smoothed).unwrap();
    for (p, b) in t.val.iter().zip(&batch) {
        let single = eval::register(&t.model, &p.fixed, &p.moving, &p.fixed_labels, Some(&p.moving_labels), &lam, WeightMode::Smoothed).unwrap();
        let v = |r: &eval::Registration| r.displacement.tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let err = v(&single).iter().zip(v(b)).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert!(err < 1e-4, "{err}");
        assert!((single.report.dice_avg - b.report.dice_avg).abs() < 1e-9);
    }
}

#[test]
fn zero_steps_return_the_start_point() {
    let t = trained();
    let mut cfg = HyperOptConfig::new(5);
    cfg.lambda_init = vec![0.5, 1.0, 2.0, 3.0, 4.0];
    cfg.steps = 0;
    let st = hyperopt::optimize_lambda(&t.model, &t.val, &cfg).unwrap();
    assert_eq!(st.lambda_star(), cfg.lambda_init.as_slice());
    assert_eq!(st.trajectory.len(), 1);
}

#[test]
fn out_of_range_start_is_projected_first() {
    let t = trained();
    let mut cfg = HyperOptConfig::new(5);
    cfg.lambda_init = vec![12.0, -1.0, 1.0, 1.0, 1.0];
    cfg.steps = 3;
    let st = hyperopt::optimize_lambda(&t.model, &t.val, &cfg).unwrap();
    assert_eq!(st.trajectory[0].lambdas, vec![10.0, 0.0, 1.0, 1.0, 1.0]);
    for p in &st.trajectory {
        assert!(p.lambdas.iter().all(|v| (0.0..=10.0).contains(v)), "{:?}", p.lambdas);
    }
}

#[test]
fn optimizer_leaves_the_network_untouched_and_tracks_its_best() {
    let t = trained();
    let before = t.model.params().snapshot().unwrap();
    let mut cfg = HyperOptConfig::new(5);
    cfg.steps = 8;
    let st = hyperopt::optimize_lambda(&t.model, &t.val, &cfg).unwrap();
    assert_eq!(t.model.params().snapshot().unwrap(), before);
    assert_eq!(st.trajectory.len(), 9);
    assert!(st.trajectory.iter().all(|p| st.best_dice >= p.soft_dice));
    assert!(st.best_dice >= st.trajectory[0].soft_dice);
    let batch = hyperopt::ValidationBatch::new(&t.model, &t.val).unwrap();
    let again = hyperopt::validation_soft_dice(&t.model, &batch, st.lambda_star(), WeightMode::Smoothed).unwrap();
    assert!((again - st.best_dice).abs() < 1e-6);
    // the start point moved
    assert_ne!(st.trajectory[8].lambdas, st.trajectory[0].lambdas);
}

#[test]
fn optimizer_rejects_bad_requests() {
    let t = trained();
    let mut cfg = HyperOptConfig::new(3);
    assert!(matches!(hyperopt::optimize_lambda(&t.model, &t.val, &cfg), Err(Error::InvalidArgument(_))));
    cfg = HyperOptConfig::new(5);
    cfg.lr = 0.0;
    assert!(matches!(hyperopt::optimize_lambda(&t.model, &t.val, &cfg), Err(Error::InvalidArgument(_))));
}

#[test]
fn sweep_has_one_row_per_grid_point() {
    let t = trained();
    let grid = [0.5, 1.0, 2.0, 4.0, 8.0];
    let rows = hyperopt::sweep_lambda(&t.model, &t.val, 3, &grid, &[1.0; 5], WeightMode::Smoothed).unwrap();
    assert_eq!(rows.len(), 5);
    assert_eq!(rows.iter().map(|r| r.lambda_k).collect::<Vec<_>>(), grid.to_vec());
    assert!(rows.iter().all(|r| r.dice.len() == 5));
    let csv = hyperopt::sweep_csv(&rows);
    assert_eq!(csv.lines().next(), Some("lambda_k,dice_0,dice_1,dice_2,dice_3,dice_4,folding_pct"));
    assert_eq!(csv.lines().count(), 6);
    assert!(matches!(
        hyperopt::sweep_lambda(&t.model, &t.val, 5, &grid, &[1.0; 5], WeightMode::Smoothed),
        Err(Error::InvalidArgument(_))
    ));
}
