//! The shared train-and-score pipeline: load, rank-normalize inputs on the
//! training split, fit, predict on the held-out rows.

use std::path::Path;

use dkgp_core::data::{
    dataset_info, ecdf_fit, ecdf_transform, load_csv, partition, rmse, Dataset, Split,
};
use dkgp_core::features::feature_forward;
use dkgp_core::gp::{gp_nll, gp_predict};
use dkgp_core::kernels::DeepKernelParams;
use dkgp_core::models::{build_model, ModelKind};
use dkgp_core::scalable::{kiss_nll, kiss_predict, KissGpModel};
use dkgp_core::train::{fit, resolve_mode, save_checkpoint, Checkpoint, FitResult, ScalableMode, TrainConfig};

use crate::config::RunConfig;
use crate::output::write_json_atomic;
use crate::{at_stage, CliError};

pub const TRAIN_FRACTION: f64 = 0.9;
const GRID_PADDING: f64 = 0.1;

/// Load a dataset by CSV path, or by registry name resolved to
/// `$DKGP_DATA/<name>.csv` (default directory `data`).
pub fn load_dataset(name: &str) -> Result<Dataset, CliError> {
    let p = Path::new(name);
    if p.exists() {
        return at_stage(&format!("dataset {}", p.display()), load_csv(p));
    }
    if dataset_info(name).is_some() {
        let dir = std::env::var("DKGP_DATA").unwrap_or_else(|_| "data".into());
        let candidate = Path::new(&dir).join(format!("{}.csv", name.to_ascii_lowercase()));
        if candidate.exists() {
            return at_stage(&format!("dataset {}", candidate.display()), load_csv(&candidate));
        }
        return Err(CliError::data(format!(
            "registry dataset '{name}': no local file at {}",
            candidate.display()
        )));
    }
    Err(CliError::data(format!("dataset file not found: {name}")))
}

pub struct SplitOutcome {
    pub fit: FitResult,
    pub train_nll: f64,
    pub test_rmse: f64,
}

/// Train on one split and score the held-out rows. Inputs are ECDF
/// rank-normalized using the training rows only; targets stay raw (the
/// constant mean absorbs their level).
pub fn run_split(
    kind: ModelKind,
    data: &Dataset,
    split: &Split,
    cfg: &TrainConfig,
) -> Result<SplitOutcome, CliError> {
    let train = data.subset(&split.train);
    let test = data.subset(&split.test);
    let map = at_stage("preprocessing", ecdf_fit(&train.x))?;
    let xt = at_stage("preprocessing", ecdf_transform(&map, &train.x))?;
    let xs = at_stage("preprocessing", ecdf_transform(&map, &test.x))?;
    let train_n = Dataset { name: train.name.clone(), x: xt, y: train.y.clone() };
    let y_mean = train_n.y.iter().sum::<f64>() / train_n.n().max(1) as f64;
    let dk0 = at_stage("model construction", build_model(kind, train_n.dims(), y_mean, cfg.seed))?;
    let res = at_stage("training", fit(&dk0, cfg, &train_n))?;
    let best = &res.best_params;
    let mode = at_stage("training", resolve_mode(cfg, &best.feature, train_n.dims(), train_n.n()))?;
    let mean = match mode {
        ScalableMode::Kiss => {
            let model = at_stage(
                "prediction",
                KissGpModel::new(best.clone(), &train_n.x, cfg.grid_m_per_dim, GRID_PADDING),
            )?;
            let zs = at_stage("prediction", feature_forward(&best.feature, &xs))?;
            at_stage("prediction", kiss_predict(&model, &train_n.y, &zs))?.mean
        }
        // The dense posterior is exact and affordable at held-out-fold
        // sizes; the product-kernel path only accelerates training.
        _ => at_stage("prediction", gp_predict(best, &train_n.x, &train_n.y, &xs, false))?.mean,
    };
    let test_rmse = at_stage("scoring", rmse(&mean, &test.y))?;
    let train_nll = match res.loss_history.get(res.best_epoch) {
        Some(&v) => v,
        None => at_stage("scoring", untrained_nll(mode, best, &train_n, cfg))?,
    };
    Ok(SplitOutcome { fit: res, train_nll, test_rmse })
}

/// NLL of an untouched model, for zero-epoch runs where no loss history
/// exists to read it from.
fn untrained_nll(
    mode: ScalableMode,
    dk: &DeepKernelParams,
    data: &Dataset,
    cfg: &TrainConfig,
) -> dkgp_core::Result<f64> {
    match mode {
        ScalableMode::Kiss => {
            let model = KissGpModel::new(dk.clone(), &data.x, cfg.grid_m_per_dim, GRID_PADDING)?;
            kiss_nll(&model, &data.y)
        }
        _ => gp_nll(dk, &data.x, &data.y),
    }
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let dataset_name = cfg.dataset.single("dataset")?;
    let model = ModelKind::parse(&cfg.model.single("model")?).map_err(CliError::core)?;
    let tcfg = cfg.train.resolve()?;
    let data = load_dataset(&dataset_name)?;
    let plan = at_stage("partitioning", partition(data.n(), 1, TRAIN_FRACTION, tcfg.seed))?;
    let outcome = run_split(model, &data, &plan.splits[0], &tcfg)?;
    let ck = Checkpoint {
        config: tcfg.clone(),
        epoch: outcome.fit.epochs_run(),
        params: outcome.fit.best_params.flatten(),
        loss_history: outcome.fit.loss_history.clone(),
    };
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::data(format!("creating {}: {e}", out.display())))?;
    at_stage("writing checkpoint", save_checkpoint(out.join("checkpoint.json"), &ck))?;
    let metrics = serde_json::json!({
        "train_nll": outcome.train_nll,
        "test_rmse": outcome.test_rmse,
        "epochs_run": outcome.fit.epochs_run(),
        "best_epoch": outcome.fit.best_epoch,
    });
    write_json_atomic(&out.join("metrics.json"), &metrics)?;
    println!(
        "trained {} on {}: train_nll {:.6}, test_rmse {:.6}, epochs {} (best {})",
        model.name(),
        dataset_name,
        outcome.train_nll,
        outcome.test_rmse,
        outcome.fit.epochs_run(),
        outcome.fit.best_epoch,
    );
    Ok(())
}
