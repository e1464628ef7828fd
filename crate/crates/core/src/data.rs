//! Dataset loading, scaling, moving-median normalization, windowing and the
//! synthetic seasonal generator.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Path of the housing table shipped with the crate.
pub fn bundled_housing_csv() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/data/california_housing.csv"))
}

pub const HOUSING_TARGET: &str = "MedHouseVal";

#[derive(Clone, Debug, PartialEq)]
pub struct TabularDataset {
    pub features: Tensor,
    pub targets: Tensor,
    pub feature_names: Vec<String>,
    pub target_names: Vec<String>,
}

impl TabularDataset {
    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Reads a headed numeric CSV into a (rows, columns) tensor.
pub fn load_table(path: &Path) -> Result<(Vec<String>, Tensor)> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io)?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse {
            row: 0,
            message: e.to_string(),
        })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let width = header.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        if record.len() != width {
            return Err(Error::Parse {
                row,
                message: format!("expected {width} fields, found {}", record.len()),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                row,
                message: format!("column {} holds non-numeric value {cell:?}", header[j]),
            })?;
            data.push(v);
        }
        rows += 1;
    }
    Ok((header, Tensor::new(vec![rows, width], data)?))
}

/// Loads a CSV, splitting the named `targets` columns from the features.
pub fn load_csv(path: &Path, targets: &[&str]) -> Result<TabularDataset> {
    let (header, table) = load_table(path)?;
    let mut target_idx = Vec::with_capacity(targets.len());
    for t in targets {
        let idx = header
            .iter()
            .position(|h| h == t)
            .ok_or_else(|| Error::config(format!("{} has no column named {t}", path.display())))?;
        target_idx.push(idx);
    }
    let feature_idx: Vec<usize> = (0..header.len()).filter(|i| !target_idx.contains(i)).collect();
    let features = select_columns(&table, &feature_idx);
    let targets_t = select_columns(&table, &target_idx);
    Ok(TabularDataset {
        features,
        targets: targets_t,
        feature_names: feature_idx.iter().map(|&i| header[i].clone()).collect(),
        target_names: target_idx.iter().map(|&i| header[i].clone()).collect(),
    })
}

/// Column subset of a rank-2 tensor.
pub fn select_columns(table: &Tensor, cols: &[usize]) -> Tensor {
    let (rows, width) = (table.shape()[0], table.shape()[1]);
    let mut data = Vec::with_capacity(rows * cols.len());
    for r in 0..rows {
        data.extend(cols.iter().map(|&c| table.data()[r * width + c]));
    }
    Tensor::new(vec![rows, cols.len()], data).expect("sized")
}

/// Random `(train, test)` row split with `round((1 − test_fraction)·n)` train rows.
pub fn train_test_split(n: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((1.0 - test_fraction) * n as f64).round() as usize;
    let test = idx.split_off(n_train.min(n));
    (idx, test)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// `out[i] = s[w + i] / median(s[i .. w + i])`; the first `w` entries have no
/// full trailing window and are dropped.
pub fn moving_median_normalize(series: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 || series.len() <= window {
        return Err(Error::config(format!(
            "moving median needs more than {window} points, got {}",
            series.len()
        )));
    }
    let mut buf = vec![0.0; window];
    (window..series.len())
        .map(|t| {
            buf.copy_from_slice(&series[t - window..t]);
            let m = median(&mut buf);
            if m == 0.0 {
                Err(Error::DegenerateSeries(format!("zero median in the window ending at step {t}")))
            } else {
                Ok(series[t] / m)
            }
        })
        .collect()
}

/// Applies [`moving_median_normalize`] to every column of a (T, q) table.
pub fn moving_median_normalize_table(table: &Tensor, window: usize) -> Result<Tensor> {
    let (t, q) = (table.shape()[0], table.shape()[1]);
    let mut cols = Vec::with_capacity(q);
    for c in 0..q {
        let col: Vec<f64> = (0..t).map(|r| table.data()[r * q + c]).collect();
        cols.push(moving_median_normalize(&col, window)?);
    }
    let rows = t - window;
    let data = (0..rows).flat_map(|r| cols.iter().map(move |col| col[r])).collect();
    Tensor::new(vec![rows, q], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalerKind {
    Minmax,
    Standard,
}

/// Per-column affine scaler, `(x − offset) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub kind: ScalerKind,
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Scaler {
    /// Fits on the rows of a (N, F) tensor, which must be the training rows.
    pub fn fit(kind: ScalerKind, train: &Tensor) -> Result<Scaler> {
        if train.rank() != 2 || train.shape()[0] == 0 {
            return Err(Error::config(format!(
                "scaler needs a non-empty (rows, columns) table, got {:?}",
                train.shape()
            )));
        }
        let (n, f) = (train.shape()[0], train.shape()[1]);
        let col = |c: usize| (0..n).map(move |r| train.data()[r * f + c]);
        let mut offset = Vec::with_capacity(f);
        let mut scale = Vec::with_capacity(f);
        for c in 0..f {
            match kind {
                ScalerKind::Minmax => {
                    let lo = col(c).fold(f64::INFINITY, f64::min);
                    let hi = col(c).fold(f64::NEG_INFINITY, f64::max);
                    if hi <= lo {
                        return Err(Error::DegenerateColumn { column: c });
                    }
                    offset.push(lo);
                    scale.push(hi - lo);
                }
                ScalerKind::Standard => {
                    let mean = col(c).sum::<f64>() / n as f64;
                    let var = col(c).map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                    let std = var.sqrt();
                    offset.push(mean);
                    // constant columns are only centred
                    scale.push(if std > 0.0 { std } else { 1.0 });
                }
            }
        }
        Ok(Scaler { kind, offset, scale })
    }

    pub fn width(&self) -> usize {
        self.offset.len()
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.shape().last() != Some(&self.width()) {
            return Err(Error::shape(format!(
                "scaler fitted on {} columns got {:?}",
                self.width(),
                x.shape()
            )));
        }
        Ok(())
    }

    /// Scales the last axis of any tensor.
    pub fn transform(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let f = self.width();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - self.offset[i % f]) / self.scale[i % f])
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn inverse_transform(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let f = self.width();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * self.scale[i % f] + self.offset[i % f])
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    /// The scaler restricted to one column.
    pub fn column(&self, c: usize) -> Scaler {
        Scaler {
            kind: self.kind,
            offset: vec![self.offset[c]],
            scale: vec![self.scale[c]],
        }
    }
}

/// Input windows with the horizon that follows each of them.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDataset {
    /// (N, s, q)
    pub windows: Tensor,
    /// (N, n_steps), taken from the target column.
    pub horizons: Tensor,
    /// Table row of each window's first step.
    pub starts: Vec<usize>,
    pub seq_len: usize,
    pub n_steps: usize,
    pub target: usize,
}

impl SequenceDataset {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }
}

/// Slides a window of `s` rows over a (T, q) table; each window is paired with
/// the next `n_steps` values of column `target`.
pub fn make_windows(table: &Tensor, s: usize, n_steps: usize, target: usize) -> Result<SequenceDataset> {
    if table.rank() != 2 {
        return Err(Error::shape(format!("expected a (time, channels) table, got {:?}", table.shape())));
    }
    let (len, q) = (table.shape()[0], table.shape()[1]);
    if s == 0 || n_steps == 0 || len < s + n_steps {
        return Err(Error::config(format!(
            "a table of {len} rows cannot hold windows of {s} plus {n_steps} steps"
        )));
    }
    if target >= q {
        return Err(Error::config(format!("target column {target} out of range for {q} columns")));
    }
    let n = len - s - n_steps + 1;
    let d = table.data();
    let mut windows = Vec::with_capacity(n * s * q);
    let mut horizons = Vec::with_capacity(n * n_steps);
    for start in 0..n {
        windows.extend_from_slice(&d[start * q..(start + s) * q]);
        horizons.extend((start + s..start + s + n_steps).map(|r| d[r * q + target]));
    }
    Ok(SequenceDataset {
        windows: Tensor::new(vec![n, s, q], windows)?,
        horizons: Tensor::new(vec![n, n_steps], horizons)?,
        starts: (0..n).collect(),
        seq_len: s,
        n_steps,
        target,
    })
}

/// Settings of the synthetic seasonal generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub length: usize,
    pub channels: usize,
    pub period: usize,
    /// AR(1) coefficient of the persistent component.
    pub ar_coef: f64,
    /// Standard deviation of the AR innovations.
    pub ar_noise: f64,
    pub amplitude: f64,
    /// Standard deviation of the additive observation noise.
    pub noise: f64,
    pub level: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            length: 2400,
            channels: 3,
            period: 24,
            ar_coef: 0.9,
            ar_noise: 0.3,
            amplitude: 3.0,
            noise: 0.3,
            level: 10.0,
        }
    }
}

/// `x[t, c] = level + a_c[t] + amplitude·sin(2π t / period + 2π c / q) + noise·ε`
/// with `a_c[t] = ar_coef · a_c[t−1] + ar_noise · η` and `a_c[−1] = 0`.
pub fn synth_seasonal_series(config: &SynthConfig, seed: u64) -> Result<Tensor> {
    if config.length == 0 || config.channels == 0 || config.period == 0 {
        return Err(Error::config("synthetic series needs positive length, channels and period"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = config.channels;
    let mut ar = vec![0.0; q];
    let mut data = Vec::with_capacity(config.length * q);
    let tau = std::f64::consts::TAU;
    for t in 0..config.length {
        for (c, a) in ar.iter_mut().enumerate() {
            let eta: f64 = StandardNormal.sample(&mut rng);
            let eps: f64 = StandardNormal.sample(&mut rng);
            *a = config.ar_coef * *a + config.ar_noise * eta;
            let phase = tau * t as f64 / config.period as f64 + tau * c as f64 / q as f64;
            data.push(config.level + *a + config.amplitude * phase.sin() + config.noise * eps);
        }
    }
    Tensor::new(vec![config.length, q], data)
}
