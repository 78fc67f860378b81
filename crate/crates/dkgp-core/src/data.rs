//! Dataset ingestion, ECDF normalization, partitioning, and metrics.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// A regression dataset: feature matrix plus targets, no missing values.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub x: DenseMatrix,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn dims(&self) -> usize {
        self.x.cols()
    }

    /// Rows of `x` and entries of `y` selected by index, in order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut x = DenseMatrix::zeros(idx.len(), self.dims());
        let mut y = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            for j in 0..self.dims() {
                x.set(r, j, self.x.get(i, j));
            }
            y.push(self.y[i]);
        }
        Dataset { name: self.name.clone(), x, y }
    }
}

/// Load a comma-separated file with one header row, all-numeric cells, and
/// the last column as the regression target. Row and column numbers in parse
/// errors are 1-based over data rows (the header is row 0 conceptually but
/// never parsed as data).
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_path(path)?;
    let width = reader.headers()?.len();
    if width < 2 {
        return Err(Error::EmptyFile);
    }
    let mut x_data = Vec::new();
    let mut y = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        if record.len() != width {
            return Err(Error::RaggedRows { row, got: record.len(), expected: width });
        }
        for (j, cell) in record.iter().enumerate() {
            let parsed: f64 = cell
                .trim()
                .parse()
                .map_err(|_| Error::Parse { row, col: j + 1, value: cell.to_string() })?;
            if !parsed.is_finite() {
                return Err(Error::Parse { row, col: j + 1, value: cell.to_string() });
            }
            if j + 1 == width {
                y.push(parsed);
            } else {
                x_data.push(parsed);
            }
        }
    }
    if y.is_empty() {
        return Err(Error::EmptyFile);
    }
    if y.len() < 2 {
        return Err(Error::TooFewRows { side: "data", count: y.len() });
    }
    let x = DenseMatrix::new(y.len(), width - 1, x_data)?;
    Ok(Dataset { name, x, y })
}

/// Per-column empirical CDF of the training inputs: just the sorted training
/// values, which is everything the Hazen plotting-position transform needs.
#[derive(Clone, Debug)]
pub struct EcdfMap {
    cols: Vec<Vec<f64>>,
}

impl EcdfMap {
    pub fn dims(&self) -> usize {
        self.cols.len()
    }
}

/// Fit the per-column ECDF on training rows only (fitting on test rows would
/// leak their distribution into the normalization).
pub fn ecdf_fit(x_train: &DenseMatrix) -> Result<EcdfMap> {
    if x_train.rows() == 0 || x_train.cols() == 0 {
        return Err(Error::EmptyFile);
    }
    let cols = (0..x_train.cols())
        .map(|j| {
            let mut col: Vec<f64> = (0..x_train.rows()).map(|i| x_train.get(i, j)).collect();
            col.sort_by(f64::total_cmp);
            col
        })
        .collect();
    Ok(EcdfMap { cols })
}

/// Hazen plotting position of one value against a sorted training column:
/// `(r - 1/2) / n` at the (tie-averaged) rank r for training values, linear
/// interpolation between neighboring training values otherwise, clamped to
/// `[1/(2n), 1 - 1/(2n)]` outside the training range. Writing `lo` for the
/// count of training values strictly below v and `hi` for the count at or
/// below it, the tie-averaged transform collapses to `(lo + hi) / (2n)`.
fn ecdf_value(sorted: &[f64], v: f64) -> f64 {
    let n = sorted.len();
    let nf = n as f64;
    let lo = sorted.partition_point(|&s| s < v);
    let hi = sorted.partition_point(|&s| s <= v);
    if lo < hi {
        return (lo + hi) as f64 / (2.0 * nf);
    }
    if lo == 0 {
        return 0.5 / nf;
    }
    if lo == n {
        return 1.0 - 0.5 / nf;
    }
    let below = sorted[lo - 1];
    let above = sorted[lo];
    let p_below = (sorted.partition_point(|&s| s < below) + lo) as f64 / (2.0 * nf);
    let p_above = (lo + sorted.partition_point(|&s| s <= above)) as f64 / (2.0 * nf);
    let t = (v - below) / (above - below);
    p_below + t * (p_above - p_below)
}

/// Map every input through its column's training ECDF. Monotone per column,
/// with outputs confined to `[1/(2n), 1 - 1/(2n)]`, so normalized features
/// never sit on the spline grid boundary.
pub fn ecdf_transform(map: &EcdfMap, x: &DenseMatrix) -> Result<DenseMatrix> {
    if x.cols() != map.dims() {
        return Err(Error::DimensionMismatch {
            op: "ecdf_transform",
            expected: map.dims(),
            got: x.cols(),
        });
    }
    let mut out = DenseMatrix::zeros(x.rows(), x.cols());
    for j in 0..x.cols() {
        let sorted = &map.cols[j];
        for i in 0..x.rows() {
            out.set(i, j, ecdf_value(sorted, x.get(i, j)));
        }
    }
    Ok(out)
}

/// One train/test split by row index.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// A reproducible family of train/test splits.
#[derive(Clone, Debug)]
pub struct SplitPlan {
    pub k: usize,
    pub train_fraction: f64,
    pub seed: u64,
    pub splits: Vec<Split>,
}

/// `k` independent shuffled splits of `0..n`, split `i` seeded `seed + i` and
/// cut at `round(f * n)` training rows.
pub fn partition(n: usize, k: usize, train_fraction: f64, seed: u64) -> Result<SplitPlan> {
    if k == 0 {
        return Err(Error::InvalidConfig("partition needs k >= 1 splits".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "train fraction must lie strictly between 0 and 1, got {train_fraction}"
        )));
    }
    let cut = (train_fraction * n as f64).round() as usize;
    if cut == 0 {
        return Err(Error::TooFewRows { side: "train", count: 0 });
    }
    if cut >= n {
        return Err(Error::TooFewRows { side: "test", count: 0 });
    }
    let splits = (0..k)
        .map(|i| {
            let mut idx: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + i as u64);
            idx.shuffle(&mut rng);
            let test = idx.split_off(cut);
            Split { train: idx, test }
        })
        .collect();
    Ok(SplitPlan { k, train_fraction, seed, splits })
}

/// Root mean squared error between prediction and truth.
pub fn rmse(predicted: &[f64], actual: &[f64]) -> Result<f64> {
    if predicted.len() != actual.len() {
        return Err(Error::DimensionMismatch {
            op: "rmse",
            expected: actual.len(),
            got: predicted.len(),
        });
    }
    if predicted.is_empty() {
        return Err(Error::DimensionMismatch { op: "rmse", expected: 1, got: 0 });
    }
    let ss: f64 = predicted.iter().zip(actual).map(|(p, a)| (p - a) * (p - a)).sum();
    Ok((ss / predicted.len() as f64).sqrt())
}

/// Static facts about one benchmark dataset.
#[derive(Clone, Copy, Debug)]
pub struct DatasetInfo {
    pub name: &'static str,
    pub n: usize,
    /// Feature columns as stored on disk.
    pub input_dims: usize,
    /// Feature columns after preprocessing, which is what parameter budgets
    /// count. Differs from `input_dims` only for kegg, where two
    /// non-informative columns are dropped on load.
    pub param_dims: usize,
    /// Whether the benchmark uses the interpolation-based scalable path
    /// instead of dense inference.
    pub uses_scalable: bool,
}

/// The UCI regression benchmark suite, ordered by size.
pub const DATASET_REGISTRY: &[DatasetInfo] = &[
    DatasetInfo { name: "solar", n: 1066, input_dims: 10, param_dims: 10, uses_scalable: false },
    DatasetInfo { name: "airfoil", n: 1503, input_dims: 5, param_dims: 5, uses_scalable: false },
    DatasetInfo { name: "wine", n: 1599, input_dims: 11, param_dims: 11, uses_scalable: false },
    DatasetInfo { name: "gas", n: 2565, input_dims: 128, param_dims: 128, uses_scalable: false },
    DatasetInfo {
        name: "skillcraft",
        n: 3338,
        input_dims: 19,
        param_dims: 19,
        uses_scalable: false,
    },
    DatasetInfo { name: "sml", n: 4137, input_dims: 26, param_dims: 26, uses_scalable: false },
    DatasetInfo {
        name: "parkinsons",
        n: 5875,
        input_dims: 20,
        param_dims: 20,
        uses_scalable: false,
    },
    DatasetInfo { name: "pumadyn", n: 8192, input_dims: 32, param_dims: 32, uses_scalable: false },
    DatasetInfo {
        name: "elevators",
        n: 16599,
        input_dims: 18,
        param_dims: 18,
        uses_scalable: false,
    },
    DatasetInfo { name: "kin40k", n: 40000, input_dims: 8, param_dims: 8, uses_scalable: true },
    DatasetInfo { name: "protein", n: 45730, input_dims: 9, param_dims: 9, uses_scalable: true },
    DatasetInfo {
        name: "tamielectric",
        n: 45781,
        input_dims: 3,
        param_dims: 3,
        uses_scalable: true,
    },
    DatasetInfo { name: "kegg", n: 48827, input_dims: 22, param_dims: 20, uses_scalable: true },
    DatasetInfo { name: "ctslice", n: 53500, input_dims: 385, param_dims: 385, uses_scalable: true },
    DatasetInfo { name: "keggu", n: 63608, input_dims: 27, param_dims: 27, uses_scalable: true },
];

/// Registry lookup by case-insensitive name.
pub fn dataset_info(name: &str) -> Option<&'static DatasetInfo> {
    DATASET_REGISTRY.iter().find(|d| d.name.eq_ignore_ascii_case(name))
}
