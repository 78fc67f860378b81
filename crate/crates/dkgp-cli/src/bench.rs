//! The (dataset x model) sweep. Cells are independent fits; a failing cell
//! is recorded as "failed" and the sweep keeps going. `DKGP_THREADS` workers
//! pull cells off a shared queue; all file writing happens after the sweep,
//! single-threaded.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::Serialize;

use dkgp_core::data::{partition, Dataset};
use dkgp_core::models::ModelKind;

use crate::config::RunConfig;
use crate::output::{write_atomic, write_json_atomic};
use crate::runner::{load_dataset, run_split, TRAIN_FRACTION};
use crate::CliError;

#[derive(Serialize)]
pub struct BenchmarkCell {
    pub dataset: String,
    pub model: String,
    pub status: &'static str,
    pub rmse_mean: Option<f64>,
    pub rmse_std: Option<f64>,
    pub param_count: Option<usize>,
    pub wall_time_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Serialize)]
pub struct BenchmarkReport {
    pub partitions: usize,
    pub cells: Vec<BenchmarkCell>,
}

struct CellSpec<'a> {
    dataset: &'a str,
    data: &'a Result<Dataset, CliError>,
    model: ModelKind,
}

pub fn cmd_benchmark(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let dataset_names = cfg.dataset.items();
    let model_names = cfg.model.items();
    if dataset_names.is_empty() {
        return Err(CliError::config("benchmark needs at least one dataset"));
    }
    if model_names.is_empty() {
        return Err(CliError::config("benchmark needs at least one model"));
    }
    if cfg.partitions == 0 {
        return Err(CliError::config("partitions must be at least 1"));
    }
    let models: Vec<ModelKind> = model_names
        .iter()
        .map(|m| ModelKind::parse(m).map_err(CliError::core))
        .collect::<Result<_, _>>()?;
    let tcfg = cfg.train.resolve()?;

    // Load each dataset once. A load failure poisons that dataset's cells
    // (each reports it) without stopping the others.
    let loaded: Vec<(String, Result<Dataset, CliError>)> =
        dataset_names.iter().map(|d| (d.clone(), load_dataset(d))).collect();
    let cells: Vec<CellSpec> = loaded
        .iter()
        .flat_map(|(name, data)| {
            models.iter().map(move |m| CellSpec { dataset: name, data, model: *m })
        })
        .collect();

    let run_cell = |spec: &CellSpec| -> BenchmarkCell {
        let started = Instant::now();
        let outcome = (|| -> Result<(f64, f64, usize), CliError> {
            let data = spec
                .data
                .as_ref()
                .map_err(|e| CliError { code: e.code, msg: e.msg.clone() })?;
            let plan = partition(data.n(), cfg.partitions, TRAIN_FRACTION, tcfg.seed)
                .map_err(CliError::core)?;
            let mut scores = Vec::with_capacity(plan.splits.len());
            for split in &plan.splits {
                scores.push(run_split(spec.model, data, split, &tcfg)?.test_rmse);
            }
            let k = scores.len() as f64;
            let mean = scores.iter().sum::<f64>() / k;
            let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / k;
            Ok((mean, var.sqrt(), spec.model.total_param_count(data.dims())))
        })();
        let wall = started.elapsed().as_secs_f64();
        match outcome {
            Ok((mean, std, params)) => BenchmarkCell {
                dataset: spec.dataset.to_string(),
                model: spec.model.name().to_string(),
                status: "ok",
                rmse_mean: Some(mean),
                rmse_std: Some(std),
                param_count: Some(params),
                wall_time_seconds: wall,
                error: None,
            },
            Err(e) => BenchmarkCell {
                dataset: spec.dataset.to_string(),
                model: spec.model.name().to_string(),
                status: "failed",
                rmse_mean: None,
                rmse_std: None,
                param_count: None,
                wall_time_seconds: wall,
                error: Some(e.msg),
            },
        }
    };

    let threads = crate::worker_threads()?;
    let results: Vec<BenchmarkCell> = if threads <= 1 || cells.len() <= 1 {
        cells.iter().map(run_cell).collect()
    } else {
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<BenchmarkCell>>> =
            cells.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..threads.min(cells.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= cells.len() {
                        break;
                    }
                    let cell = run_cell(&cells[i]);
                    *slots[i].lock().expect("result slot") = Some(cell);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().expect("result slot").expect("every cell ran"))
            .collect()
    };

    let report = BenchmarkReport { partitions: cfg.partitions, cells: results };
    let table = render_table(&report);
    write_json_atomic(&out.join("report.json"), &report)?;
    write_atomic(&out.join("report.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

/// Fixed-width text table, RMSE rendered as "mean ± std".
fn render_table(report: &BenchmarkReport) -> String {
    let rows: Vec<[String; 5]> = report
        .cells
        .iter()
        .map(|c| {
            let rmse = match (c.rmse_mean, c.rmse_std) {
                (Some(m), Some(s)) => format!("{m:.4} ± {s:.4}"),
                _ => "failed".to_string(),
            };
            let params = c.param_count.map(|p| p.to_string()).unwrap_or_else(|| "-".into());
            [
                c.dataset.clone(),
                c.model.clone(),
                rmse,
                params,
                format!("{:.2}", c.wall_time_seconds),
            ]
        })
        .collect();
    let headers = ["dataset", "model", "rmse", "params", "seconds"];
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row.iter()) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut text = String::new();
    let push_row = |cells: &[&str], text: &mut String| {
        for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
            if i > 0 {
                text.push_str("  ");
            }
            text.push_str(cell);
            for _ in cell.chars().count()..*w {
                text.push(' ');
            }
        }
        while text.ends_with(' ') {
            text.pop();
        }
        text.push('\n');
    };
    push_row(&headers, &mut text);
    for row in &rows {
        let cells: Vec<&str> = row.iter().map(|s| s.as_str()).collect();
        push_row(&cells, &mut text);
    }
    text
}
