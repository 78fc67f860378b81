//! Step-function experiment: y = step(x) + noise with noise std 0.01, 100
//! standard-normal training inputs, 500 evenly spaced test points on
//! [-5, 5]. Trains a plain GP and two deep models with 1 -> 6 -> 2 feature
//! nets, then writes per-model prediction CSVs (x, mean, std) and, for the
//! deep models, latent-map CSVs (x, z1, z2).
//!
//! Inputs are fed raw here, without rank normalization: the point of the
//! experiment is extrapolation behavior outside the training range, which a
//! rank transform would clamp away.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use dkgp_core::data::Dataset;
use dkgp_core::features::{feature_forward, init_feature, FeatureParams, FeatureSpec};
use dkgp_core::gp::gp_predict;
use dkgp_core::kernels::{DeepKernelParams, KernelHyperparams};
use dkgp_core::linalg::DenseMatrix;
use dkgp_core::train::{fit, ScalableMode, TrainConfig};

use crate::output::write_csv_atomic;
use crate::{at_stage, CliError};

const TRAIN_POINTS: usize = 100;
const TEST_POINTS: usize = 500;
const NOISE_STD: f64 = 0.01;

fn step(x: f64) -> f64 {
    if x < 0.0 {
        0.0
    } else {
        1.0
    }
}

pub fn cmd_step_demo(out: &Path, seed: u64) -> Result<(), CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..TRAIN_POINTS).map(|_| rng.sample(StandardNormal)).collect();
    let y: Vec<f64> = xs
        .iter()
        .map(|&x| step(x) + NOISE_STD * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let data = Dataset { name: "step".into(), x: DenseMatrix::column(&xs), y };
    let xstar: Vec<f64> = (0..TEST_POINTS)
        .map(|i| -5.0 + 10.0 * i as f64 / (TEST_POINTS - 1) as f64)
        .collect();
    let xstar_m = DenseMatrix::column(&xstar);

    let cfg = TrainConfig { seed, scalable_mode: ScalableMode::Exact, ..TrainConfig::default() };
    let y_mean = data.y.iter().sum::<f64>() / data.n() as f64;

    let specs: [(&str, Option<FeatureSpec>); 3] = [
        ("gp", None),
        ("dkl-mlp", Some(FeatureSpec::mlp(vec![1, 6, 2]))),
        ("dkl-kan", Some(FeatureSpec::kan(vec![1, 6, 2]))),
    ];
    for (name, spec) in specs {
        let feature = match &spec {
            None => FeatureParams::Identity,
            Some(s) => at_stage("model construction", init_feature(s, seed))?,
        };
        let latent = if spec.is_some() { 2 } else { 1 };
        let dk0 = DeepKernelParams { feature, base: KernelHyperparams::init(latent, y_mean) };
        let res = at_stage(&format!("training {name}"), fit(&dk0, &cfg, &data))?;
        let best = &res.best_params;
        let pred = at_stage(
            &format!("prediction {name}"),
            gp_predict(best, &data.x, &data.y, &xstar_m, false),
        )?;
        let var = pred.variance();
        let rows: Vec<Vec<String>> = (0..TEST_POINTS)
            .map(|i| {
                vec![
                    xstar[i].to_string(),
                    pred.mean[i].to_string(),
                    var[i].max(0.0).sqrt().to_string(),
                ]
            })
            .collect();
        write_csv_atomic(&out.join(format!("{name}-predictions.csv")), &["x", "mean", "std"], &rows)?;
        if spec.is_some() {
            let z = at_stage(&format!("latent map {name}"), feature_forward(&best.feature, &xstar_m))?;
            let zrows: Vec<Vec<String>> = (0..TEST_POINTS)
                .map(|i| vec![xstar[i].to_string(), z.get(i, 0).to_string(), z.get(i, 1).to_string()])
                .collect();
            write_csv_atomic(&out.join(format!("{name}-latent.csv")), &["x", "z1", "z2"], &zrows)?;
        }
        println!("{name}: trained {} epochs (best {})", res.epochs_run(), res.best_epoch);
    }
    Ok(())
}
