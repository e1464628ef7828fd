//! Experiment configuration, dataset preparation and the train / sweep /
//! inspect / eval workflows behind the command-line tool.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    bundled_housing_csv, load_csv, load_table, make_windows, moving_median_normalize_table, synth_seasonal_series,
    train_test_split, Scaler, ScalerKind, SynthConfig, HOUSING_TARGET,
};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::kan::GridConfig;
use crate::model::{ModelKind, ModelSpec, Network, Variant};
use crate::tensor::Tensor;
use crate::train::{aggregate_runs, mse, r2_score, train, AggregateMetrics, Dataset, RunMetrics, TrainConfig};

/// Environment variable bounding the sweep worker pool.
pub const WORKERS_ENV: &str = "KAMOE_WORKERS";

pub const DEFAULT_EXPERTS: usize = 3;
pub const DEFAULT_MEDIAN_WINDOW: usize = 336;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Housing,
    SyntheticSeq,
    CsvSeq,
}

impl Task {
    pub fn is_sequential(self) -> bool {
        !matches!(self, Task::Housing)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// CSV source; the bundled housing table when omitted for `housing`.
    pub path: Option<PathBuf>,
    pub test_fraction: f64,
    /// Seed of the housing row split and of the synthetic series.
    pub split_seed: u64,
    /// Predicted column of a sequence table; the first column when omitted.
    pub target: Option<String>,
    pub median_window: usize,
    pub synthetic: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            test_fraction: 0.2,
            split_seed: 42,
            target: None,
            median_window: DEFAULT_MEDIAN_WINDOW,
            synthetic: SynthConfig::default(),
        }
    }
}

/// Grid expanded by `sweep`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub hidden: Vec<usize>,
    pub layers: Vec<usize>,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            hidden: vec![5, 100],
            layers: vec![1, 2],
            variants: vec![Variant::Kamoe, Variant::Moe, Variant::Standard],
            seeds: (0..5).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub variant: Variant,
    pub kind: ModelKind,
    pub hidden: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    /// Experts per mixture; must be absent for the standard variant.
    #[serde(default)]
    pub experts: Option<usize>,
    #[serde(default)]
    pub seq_len: Option<usize>,
    #[serde(default)]
    pub n_steps: Option<usize>,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sweep: Option<SweepGrid>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_layers() -> usize {
    1
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        ExperimentConfig::from_json(&crate::io::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.variant == Variant::Standard && self.experts.is_some() {
            return Err(Error::config("experts: not allowed for the standard variant"));
        }
        if self.experts == Some(0) {
            return Err(Error::config("experts: must be positive"));
        }
        if self.task.is_sequential() {
            if !self.kind.is_recurrent() {
                return Err(Error::config(format!("kind: {} cannot model sequence tasks", self.kind)));
            }
            if !self.seq_len.is_some_and(|s| s > 0) {
                return Err(Error::config("seq_len: required and positive for sequence tasks"));
            }
            if !self.n_steps.is_some_and(|s| s > 0) {
                return Err(Error::config("n_steps: required and positive for sequence tasks"));
            }
            if self.data.median_window == 0 {
                return Err(Error::config("data.median_window: must be positive"));
            }
        } else {
            if self.kind.is_recurrent() {
                return Err(Error::config(format!("kind: {} needs a sequence task", self.kind)));
            }
            if self.seq_len.is_some() || self.n_steps.is_some() {
                return Err(Error::config("seq_len/n_steps: not allowed for the housing task"));
            }
        }
        if self.task == Task::CsvSeq && self.data.path.is_none() {
            return Err(Error::config("data.path: required for the csv-seq task"));
        }
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            return Err(Error::config("data.test_fraction: must lie in (0, 1)"));
        }
        if let Some(s) = &self.sweep {
            if s.hidden.is_empty() || s.layers.is_empty() || s.variants.is_empty() || s.seeds.is_empty() {
                return Err(Error::config("sweep: hidden, layers, variants and seeds must be non-empty"));
            }
        }
        self.train.validate()?;
        self.model_spec(1, None, 1)?.validate()
    }

    /// Applies command-line overrides; `--seed` sets the training seed and
    /// shifts the sweep seeds to start at the same value.
    pub fn apply_overrides(&mut self, seed: Option<u64>, out: Option<PathBuf>) {
        if let Some(seed) = seed {
            self.train.seed = seed;
            if let Some(s) = &mut self.sweep {
                let n = s.seeds.len() as u64;
                s.seeds = (seed..seed + n).collect();
            }
        }
        if out.is_some() {
            self.out = out;
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("runs"))
    }

    fn experts_or_default(&self) -> usize {
        match self.variant {
            Variant::Standard => 0,
            _ => self.experts.unwrap_or(DEFAULT_EXPERTS),
        }
    }

    pub fn model_spec(&self, input_dim: usize, seq_len: Option<usize>, output_dim: usize) -> Result<ModelSpec> {
        let seq_len = if self.kind.is_recurrent() { seq_len.or(self.seq_len) } else { None };
        Ok(ModelSpec {
            kind: self.kind,
            variant: self.variant,
            input_dim,
            seq_len,
            hidden: self.hidden,
            layers: self.layers,
            experts: self.experts_or_default(),
            output_dim,
            grid: self.grid,
        })
    }

    /// Copy describing one sweep cell.
    pub fn cell(&self, variant: Variant, hidden: usize, layers: usize, seed: u64) -> ExperimentConfig {
        let mut c = self.clone();
        c.variant = variant;
        c.hidden = hidden;
        c.layers = layers;
        c.experts = match variant {
            Variant::Standard => None,
            _ => Some(self.experts.unwrap_or(DEFAULT_EXPERTS)),
        };
        c.train.seed = seed;
        c.sweep = None;
        c
    }
}

/// Everything the model file needs to reproduce preprocessing at inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub task: Task,
    pub input_scaler: Scaler,
    pub feature_names: Vec<String>,
    pub target_name: String,
    /// Sequence tasks only.
    pub median_window: Option<usize>,
    pub seq_len: Option<usize>,
    pub n_steps: Option<usize>,
    pub target_column: Option<usize>,
}

impl Preprocessing {
    /// Turns a raw CSV into model inputs and, when present, targets.
    pub fn apply(&self, path: &Path) -> Result<(Tensor, Option<Tensor>)> {
        if self.task.is_sequential() {
            let (header, table) = load_table(path)?;
            if header != self.feature_names {
                return Err(Error::config(format!(
                    "{} has columns {header:?}, the model expects {:?}",
                    path.display(),
                    self.feature_names
                )));
            }
            let normed = moving_median_normalize_table(&table, self.median_window.unwrap_or(DEFAULT_MEDIAN_WINDOW))?;
            let scaled = self.input_scaler.transform(&normed)?;
            let ds = make_windows(
                &scaled,
                self.seq_len.unwrap_or(1),
                self.n_steps.unwrap_or(1),
                self.target_column.unwrap_or(0),
            )?;
            Ok((ds.windows, Some(ds.horizons)))
        } else {
            let (header, table) = load_table(path)?;
            let col = |name: &str| header.iter().position(|h| h == name);
            let idx = self
                .feature_names
                .iter()
                .map(|f| col(f).ok_or_else(|| Error::config(format!("{} lacks column {f}", path.display()))))
                .collect::<Result<Vec<_>>>()?;
            let x = self.input_scaler.transform(&crate::data::select_columns(&table, &idx))?;
            let y = col(&self.target_name).map(|t| crate::data::select_columns(&table, &[t]));
            Ok((x, y))
        }
    }
}

#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub preprocessing: Preprocessing,
}

impl PreparedData {
    pub fn input_dim(&self) -> usize {
        *self.train.x.shape().last().expect("rank ≥ 2")
    }

    pub fn output_dim(&self) -> usize {
        self.train.y.shape()[1]
    }

    pub fn seq_len(&self) -> Option<usize> {
        (self.train.x.rank() == 3).then(|| self.train.x.shape()[1])
    }
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    match cfg.task {
        Task::Housing => prepare_housing(cfg),
        Task::SyntheticSeq | Task::CsvSeq => prepare_sequence(cfg),
    }
}

fn prepare_housing(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let path = cfg.data.path.clone().unwrap_or_else(|| bundled_housing_csv().to_path_buf());
    let ds = load_csv(&path, &[HOUSING_TARGET])?;
    let (tr, te) = train_test_split(ds.len(), cfg.data.test_fraction, cfg.data.split_seed);
    let x_train = ds.features.select_rows(&tr)?;
    let scaler = Scaler::fit(ScalerKind::Standard, &x_train)?;
    let train = Dataset::new(scaler.transform(&x_train)?, ds.targets.select_rows(&tr)?)?;
    let test = Dataset::new(
        scaler.transform(&ds.features.select_rows(&te)?)?,
        ds.targets.select_rows(&te)?,
    )?;
    Ok(PreparedData {
        train,
        test,
        preprocessing: Preprocessing {
            task: Task::Housing,
            input_scaler: scaler,
            feature_names: ds.feature_names,
            target_name: HOUSING_TARGET.to_string(),
            median_window: None,
            seq_len: None,
            n_steps: None,
            target_column: None,
        },
    })
}

/// Median-normalizes every channel, splits chronologically, fits MinMax on
/// the training segment only, and windows each segment separately so no
/// window straddles the split.
fn prepare_sequence(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let (header, table) = match cfg.task {
        Task::CsvSeq => load_table(cfg.data.path.as_deref().expect("validated"))?,
        _ => {
            let t = synth_seasonal_series(&cfg.data.synthetic, cfg.data.split_seed)?;
            let names = (0..t.shape()[1]).map(|c| format!("channel{c}")).collect();
            (names, t)
        }
    };
    let target = match &cfg.data.target {
        Some(name) => header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::config(format!("data.target: no column named {name}")))?,
        None => 0,
    };
    let (s, n_steps) = (cfg.seq_len.expect("validated"), cfg.n_steps.expect("validated"));
    let normed = moving_median_normalize_table(&table, cfg.data.median_window)?;
    let rows = normed.shape()[0];
    let n_train = ((1.0 - cfg.data.test_fraction) * rows as f64).round() as usize;
    let train_rows = normed.slice_rows(0, n_train)?;
    let scaler = Scaler::fit(ScalerKind::Minmax, &train_rows)?;
    let scaled = scaler.transform(&normed)?;
    let train_ds = make_windows(&scaled.slice_rows(0, n_train)?, s, n_steps, target)?;
    let test_ds = make_windows(&scaled.slice_rows(n_train, rows)?, s, n_steps, target)?;
    Ok(PreparedData {
        train: Dataset::new(train_ds.windows, train_ds.horizons)?,
        test: Dataset::new(test_ds.windows, test_ds.horizons)?,
        preprocessing: Preprocessing {
            task: cfg.task,
            input_scaler: scaler,
            target_name: header[target].clone(),
            feature_names: header,
            median_window: Some(cfg.data.median_window),
            seq_len: Some(s),
            n_steps: Some(n_steps),
            target_column: Some(target),
        },
    })
}

/// Builds and trains one model; all randomness derives from `cfg.train.seed`.
pub fn run_once(cfg: &ExperimentConfig, data: &PreparedData) -> Result<(Network, RunMetrics)> {
    let spec = cfg.model_spec(data.input_dim(), data.seq_len(), data.output_dim())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut net = Network::new(spec, &mut rng)?;
    let metrics = train(&mut net, &data.train, &data.test, &cfg.train, &mut rng)?;
    Ok((net, metrics))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ModelMetadata {
    preprocessing: Preprocessing,
    config: ExperimentConfig,
}

/// `train` subcommand: fits one model and writes `model.json`,
/// `metrics.json` and `summary.txt` into the output directory.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<RunMetrics> {
    let data = prepare_data(cfg)?;
    let (net, metrics) = run_once(cfg, &data)?;
    let out = cfg.out_dir();
    let meta = serde_json::to_value(ModelMetadata {
        preprocessing: data.preprocessing.clone(),
        config: cfg.clone(),
    })?;
    net.save(&out.join("model.json"), meta)?;
    write_atomic(&out.join("metrics.json"), serde_json::to_string_pretty(&metrics)?.as_bytes())?;
    let mut summary = String::new();
    let _ = writeln!(
        summary,
        "{} {} hidden={} layers={} seed={}",
        cfg.variant.label(),
        cfg.kind,
        cfg.hidden,
        cfg.layers,
        cfg.train.seed
    );
    let _ = writeln!(summary, "parameters    {}", metrics.parameter_count);
    let _ = writeln!(summary, "epochs        {}", metrics.epochs_run);
    let _ = writeln!(summary, "test R2       {:.6}", metrics.r2);
    let _ = writeln!(summary, "test RMSE     {:.6}", metrics.rmse);
    let _ = writeln!(summary, "test MSE      {:.6}", metrics.mse);
    let _ = writeln!(summary, "train seconds {:.2}", metrics.train_seconds);
    write_atomic(&out.join("summary.txt"), summary.as_bytes())?;
    Ok(metrics)
}

/// Worker count from [`WORKERS_ENV`], defaulting to the available cores.
pub fn workers_from_env() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::config(format!("{WORKERS_ENV} must be a positive integer, got {v:?}"))),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub variant: Variant,
    pub layers: usize,
    pub hidden: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub key: CellKey,
    pub runs: Vec<RunMetrics>,
    pub failures: Vec<String>,
    pub aggregate: Option<AggregateMetrics>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub grid: SweepGrid,
    pub cells: Vec<CellResult>,
    /// File name → CSV content.
    pub tables: BTreeMap<String, String>,
}

impl SweepResult {
    pub fn cell(&self, variant: Variant, layers: usize, hidden: usize) -> Option<&CellResult> {
        let key = CellKey { variant, layers, hidden };
        self.cells.iter().find(|c| c.key == key)
    }
}

fn cell_file(key: &CellKey, seed: u64) -> String {
    format!("{}_L{}_H{}_seed{}.json", key.variant, key.layers, key.hidden, seed)
}

/// `sweep` subcommand: every (variant, layers, hidden, seed) combination of
/// the grid, run on a pool of `workers` threads. Failed runs are recorded per
/// cell and do not stop the sweep.
pub fn cmd_sweep(cfg: &ExperimentConfig, workers: usize, write: bool) -> Result<SweepResult> {
    let grid = cfg.sweep.clone().unwrap_or_default();
    let data = prepare_data(cfg)?;
    let out = cfg.out_dir();
    let mut jobs = Vec::new();
    for &variant in &grid.variants {
        for &layers in &grid.layers {
            for &hidden in &grid.hidden {
                for &seed in &grid.seeds {
                    jobs.push((CellKey { variant, layers, hidden }, seed));
                }
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::config(format!("worker pool: {e}")))?;
    let outcomes: Vec<std::result::Result<RunMetrics, String>> = pool.install(|| {
        jobs.par_iter()
            .map(|(key, seed)| {
                let cell_cfg = cfg.cell(key.variant, key.hidden, key.layers, *seed);
                let result = cell_cfg.validate().and_then(|_| run_once(&cell_cfg, &data)).map(|(_, m)| m);
                if write {
                    let body = match &result {
                        Ok(m) => serde_json::to_string_pretty(m).unwrap_or_default(),
                        Err(e) => serde_json::json!({ "error": e.to_string() }).to_string(),
                    };
                    // A failed write is reported on the cell rather than aborting the sweep.
                    if let Err(e) = write_atomic(&out.join("cells").join(cell_file(key, *seed)), body.as_bytes()) {
                        return Err(e.to_string());
                    }
                }
                result.map_err(|e| e.to_string())
            })
            .collect()
    });

    let mut cells: Vec<CellResult> = Vec::new();
    for ((key, seed), outcome) in jobs.into_iter().zip(outcomes) {
        if cells.last().is_none_or(|c| c.key != key) {
            cells.push(CellResult {
                key: key.clone(),
                runs: Vec::new(),
                failures: Vec::new(),
                aggregate: None,
            });
        }
        let cell = cells.last_mut().expect("pushed");
        match outcome {
            Ok(m) => cell.runs.push(m),
            Err(e) => cell.failures.push(format!("seed {seed}: {e}")),
        }
    }
    for cell in &mut cells {
        cell.aggregate = aggregate_runs(&cell.runs).ok();
    }
    let tables = build_tables(&grid, &cells);
    if write {
        for (name, body) in &tables {
            write_atomic(&out.join(name), body.as_bytes())?;
        }
        write_atomic(&out.join("cells.json"), serde_json::to_string_pretty(&cells)?.as_bytes())?;
    }
    Ok(SweepResult { grid, cells, tables })
}

type MetricFn = fn(&AggregateMetrics) -> f64;

const TABLE_METRICS: [(&str, MetricFn); 5] = [
    ("r2_mean.csv", |a| a.r2.mean),
    ("r2_std.csv", |a| a.r2.std),
    ("mse_mean.csv", |a| a.mse.mean),
    ("params.csv", |a| a.parameter_count.mean),
    ("seconds_mean.csv", |a| a.train_seconds.mean),
];

pub const AVG_DIFF_LABEL: &str = "Avg. Diff. vs. Standard";

/// Rows are hidden sizes and columns are (variant, layers) pairs. The footer
/// averages variant minus standard over the hidden sizes where both exist.
fn build_tables(grid: &SweepGrid, cells: &[CellResult]) -> BTreeMap<String, String> {
    let lookup = |variant: Variant, layers: usize, hidden: usize| {
        cells
            .iter()
            .find(|c| c.key == CellKey { variant, layers, hidden })
            .and_then(|c| c.aggregate.as_ref())
    };
    let fmt = |v: Option<f64>| v.map_or_else(|| "NaN".to_string(), |v| format!("{v}"));
    let mut tables = BTreeMap::new();
    for (name, metric) in TABLE_METRICS {
        let mut csv = String::from("hidden");
        for v in &grid.variants {
            for l in &grid.layers {
                let _ = write!(csv, ",{}_L{l}", v.label());
            }
        }
        csv.push('\n');
        for &h in &grid.hidden {
            let _ = write!(csv, "{h}");
            for &v in &grid.variants {
                for &l in &grid.layers {
                    let _ = write!(csv, ",{}", fmt(lookup(v, l, h).map(metric)));
                }
            }
            csv.push('\n');
        }
        let _ = write!(csv, "\"{AVG_DIFF_LABEL}\"");
        for &v in &grid.variants {
            for &l in &grid.layers {
                let cell = if v == Variant::Standard || !grid.variants.contains(&Variant::Standard) {
                    String::new()
                } else {
                    let diffs: Vec<f64> = grid
                        .hidden
                        .iter()
                        .filter_map(|&h| Some(metric(lookup(v, l, h)?) - metric(lookup(Variant::Standard, l, h)?)))
                        .collect();
                    fmt((!diffs.is_empty()).then(|| diffs.iter().sum::<f64>() / diffs.len() as f64))
                };
                let _ = write!(csv, ",{cell}");
            }
        }
        csv.push('\n');
        tables.insert(name.to_string(), csv);
    }
    tables
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    /// (samples, m)
    pub weights: Tensor,
    pub mean_per_expert: Vec<f64>,
}

impl GateReport {
    pub fn to_csv(&self) -> String {
        let m = self.mean_per_expert.len();
        let mut csv = String::from("sample");
        for k in 0..m {
            let _ = write!(csv, ",expert_{k}");
        }
        csv.push('\n');
        for (i, row) in self.weights.data().chunks(m.max(1)).enumerate() {
            let _ = write!(csv, "{i}");
            for v in row {
                let _ = write!(csv, ",{v}");
            }
            csv.push('\n');
        }
        csv
    }
}

fn load_with_preprocessing(model_path: &Path) -> Result<(Network, Preprocessing)> {
    let (net, meta) = Network::load(model_path)?;
    let meta: ModelMetadata = serde_json::from_value(meta)
        .map_err(|e| Error::Serialization(format!("model metadata: {e}")))?;
    Ok((net, meta.preprocessing))
}

/// Per-sample gate weights of the first mixture block.
pub fn gate_report(net: &Network, x: &Tensor) -> Result<GateReport> {
    if !net.is_mixture() {
        return Err(Error::config("the model has no mixture layer to inspect"));
    }
    let (_, gates) = net.predict_with_gates(x, 4096)?;
    let weights = gates.expect("mixture models report gates");
    let (n, m) = (weights.shape()[0], weights.shape()[1]);
    let mean_per_expert = (0..m)
        .map(|k| (0..n).map(|r| weights.data()[r * m + k]).sum::<f64>() / n.max(1) as f64)
        .collect();
    Ok(GateReport { weights, mean_per_expert })
}

/// `inspect` subcommand.
pub fn cmd_inspect(model_path: &Path, input_path: &Path) -> Result<GateReport> {
    let (net, pre) = load_with_preprocessing(model_path)?;
    if !net.is_mixture() {
        return Err(Error::config("the model has no mixture layer to inspect"));
    }
    let (x, _) = pre.apply(input_path)?;
    gate_report(&net, &x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub rows: usize,
    pub r2: f64,
    pub rmse: f64,
    pub mse: f64,
}

/// `eval` subcommand: metrics of a saved model on a CSV holding targets.
pub fn cmd_eval(model_path: &Path, data_path: &Path) -> Result<EvalMetrics> {
    let (net, pre) = load_with_preprocessing(model_path)?;
    let (x, y) = pre.apply(data_path)?;
    let y = y.ok_or_else(|| Error::config(format!("{} has no {} column", data_path.display(), pre.target_name)))?;
    let pred = net.predict(&x, 4096)?;
    let m = mse(&pred, &y)?;
    Ok(EvalMetrics {
        rows: y.shape()[0],
        r2: r2_score(&pred, &y)?,
        rmse: m.sqrt(),
        mse: m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ExperimentConfig {
        ExperimentConfig::from_json(r#"{"task": "housing", "variant": "standard", "kind": "mlp", "hidden": 4}"#).unwrap()
    }

    #[test]
    fn config_defaults() {
        let c = base();
        assert_eq!(c.layers, 1);
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.data.split_seed, 42);
        assert_eq!(c.model_spec(8, None, 1).unwrap().experts, 0);
    }

    #[test]
    fn config_errors_name_the_field() {
        let bad = [
            r#"{"task": "housing", "variant": "mystery", "kind": "mlp", "hidden": 4}"#,
            r#"{"task": "housing", "variant": "standard", "kind": "mlp", "hidden": 4, "experts": 3}"#,
            r#"{"task": "housing", "variant": "kamoe", "kind": "mlp", "hidden": 4, "n_steps": 3}"#,
            r#"{"task": "synthetic-seq", "variant": "kamoe", "kind": "lstm", "hidden": 4, "seq_len": 8}"#,
            r#"{"task": "housing", "variant": "kamoe", "kind": "mlp", "hidden": 0}"#,
            r#"{"task": "housing", "variant": "kamoe", "kind": "mlp", "hidden": 4, "bogus": 1}"#,
        ];
        for text in bad {
            let err = ExperimentConfig::from_json(text).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}: {err}");
        }
        let err = ExperimentConfig::from_json(bad[1]).unwrap_err().to_string();
        assert!(err.contains("experts"), "{err}");
    }

    #[test]
    fn overrides() {
        let mut c = base();
        c.sweep = Some(SweepGrid::default());
        c.apply_overrides(Some(10), Some(PathBuf::from("x")));
        assert_eq!(c.train.seed, 10);
        assert_eq!(c.sweep.unwrap().seeds, vec![10, 11, 12, 13, 14]);
        assert_eq!(c.out, Some(PathBuf::from("x")));
    }

    fn agg(r2: f64) -> Option<AggregateMetrics> {
        let s = |v| crate::train::Stat { mean: v, std: 0.0 };
        Some(AggregateMetrics {
            runs: 1,
            r2: s(r2),
            rmse: s(0.0),
            mse: s(0.0),
            train_seconds: s(0.0),
            parameter_count: s(0.0),
        })
    }

    #[test]
    fn footer_is_mean_variant_minus_standard() {
        let grid = SweepGrid {
            hidden: vec![5, 10],
            layers: vec![1],
            variants: vec![Variant::Kamoe, Variant::Standard],
            seeds: vec![0],
        };
        let cell = |variant, hidden, r2| CellResult {
            key: CellKey { variant, layers: 1, hidden },
            runs: vec![],
            failures: vec![],
            aggregate: agg(r2),
        };
        let cells = vec![
            cell(Variant::Kamoe, 5, 0.75),
            cell(Variant::Kamoe, 10, 0.80),
            cell(Variant::Standard, 5, 0.70),
            cell(Variant::Standard, 10, 0.72),
        ];
        let t = &build_tables(&grid, &cells)["r2_mean.csv"];
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "hidden,KAMoE_L1,Standard_L1");
        assert_eq!(lines[1], "5,0.75,0.7");
        let footer: Vec<&str> = lines[3].split(',').collect();
        assert_eq!(footer[0], format!("\"{AVG_DIFF_LABEL}\""));
        assert!((footer[1].parse::<f64>().unwrap() - 0.065).abs() < 1e-12);
        assert_eq!(footer[2], "");
    }

    #[test]
    fn sequence_preparation_has_no_leakage() {
        let c = ExperimentConfig::from_json(
            r#"{"task": "synthetic-seq", "variant": "kamoe", "kind": "lstm", "hidden": 4,
                "seq_len": 12, "n_steps": 3, "data": {"median_window": 24, "synthetic": {"length": 400}}}"#,
        )
        .unwrap();
        let d = prepare_data(&c).unwrap();
        assert_eq!(d.train.x.shape()[1..], [12, 3]);
        assert_eq!(d.train.y.shape()[1], 3);
        // MinMax was fitted on the training segment only
        let train_max = d.train.x.data().iter().cloned().fold(f64::MIN, f64::max);
        let train_min = d.train.x.data().iter().cloned().fold(f64::MAX, f64::min);
        assert!(train_max <= 1.0 + 1e-12 && train_min >= -1e-12);
        let rows = 400 - 24;
        let n_train = (0.8 * rows as f64).round() as usize;
        assert_eq!(d.train.len(), n_train - 12 - 3 + 1);
        assert_eq!(d.test.len(), rows - n_train - 12 - 3 + 1);
    }
}
