use std::path::{Path, PathBuf};

use kamoe::data::{bundled_housing_csv, load_csv, train_test_split, Scaler, ScalerKind, HOUSING_TARGET};
use kamoe::experiment::{cmd_eval, cmd_inspect, cmd_sweep, cmd_train, prepare_data, ExperimentConfig, AVG_DIFF_LABEL};
use kamoe::train::{train, Dataset, TrainConfig};
use kamoe::{Error, GridConfig, ModelKind, ModelSpec, Network, Tensor, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn fixture_csvs() {
    let ds = load_csv(&fixture("three_rows.csv"), &[HOUSING_TARGET]).unwrap();
    assert_eq!(ds.len(), 3);
    assert_eq!(ds.feature_names, ["a", "b", "c"]);
    assert_eq!(ds.targets.data(), [0.5, 1.5, 2.5]);

    let empty = load_csv(&fixture("header_only.csv"), &[HOUSING_TARGET]).unwrap();
    assert_eq!(empty.len(), 0);
    assert_eq!(empty.features.shape(), [0, 3]);

    match load_csv(&fixture("bad_cell.csv"), &[HOUSING_TARGET]) {
        Err(Error::Parse { row, .. }) => assert_eq!(row, 2),
        other => panic!("expected a parse error, got {other:?}"),
    }
    assert!(matches!(load_csv(&fixture("missing.csv"), &[HOUSING_TARGET]), Err(Error::Io { .. })));
    assert!(matches!(load_csv(&fixture("three_rows.csv"), &["nope"]), Err(Error::Config(_))));
}

#[test]
fn bundled_housing_shape() {
    let ds = load_csv(bundled_housing_csv(), &[HOUSING_TARGET]).unwrap();
    assert_eq!(ds.len(), 20_640);
    assert_eq!(ds.features.shape()[1], 8);
}

#[test]
fn housing_scaler_uses_training_rows_only() {
    let cfg = ExperimentConfig::from_json(r#"{"task": "housing", "variant": "standard", "kind": "mlp", "hidden": 4}"#).unwrap();
    let data = prepare_data(&cfg).unwrap();
    let raw = load_csv(bundled_housing_csv(), &[HOUSING_TARGET]).unwrap();
    let (train_rows, test_rows) = train_test_split(raw.len(), 0.2, 42);
    let refit = Scaler::fit(ScalerKind::Standard, &raw.features.select_rows(&train_rows).unwrap()).unwrap();
    assert_eq!(refit, data.preprocessing.input_scaler);
    assert_eq!((data.train.len(), data.test.len()), (train_rows.len(), test_rows.len()));
    assert_eq!(data.train.len(), 16_512);
    for c in 0..8 {
        let col: Vec<f64> = (0..data.train.len()).map(|r| data.train.x.at(&[r, c])).collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
        assert!(mean.abs() < 1e-10 && (var.sqrt() - 1.0).abs() < 1e-10);
    }
}

#[test]
fn training_reduces_loss_on_a_linear_problem() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = [0.7, -1.3, 0.4];
    let n = 2000;
    let x: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y: Vec<f64> = x.chunks(3).map(|r| r.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + 0.5).collect();
    let data = Dataset::new(Tensor::new(vec![n, 3], x).unwrap(), Tensor::new(vec![n, 1], y).unwrap()).unwrap();
    let (tr, te) = (data.slice(0, 1600).unwrap(), data.slice(1600, n).unwrap());
    for seed in 0..5 {
        for variant in [Variant::Standard, Variant::Kamoe] {
            let spec = ModelSpec {
                kind: ModelKind::Mlp,
                variant,
                input_dim: 3,
                seq_len: None,
                hidden: 8,
                layers: 1,
                experts: if variant == Variant::Standard { 0 } else { 2 },
                output_dim: 1,
                grid: GridConfig::default(),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut net = Network::new(spec, &mut rng).unwrap();
            let cfg = TrainConfig {
                epochs: 50,
                seed,
                ..TrainConfig::default()
            };
            let m = train(&mut net, &tr, &te, &cfg, &mut rng).unwrap();
            assert!(m.final_train_loss < m.initial_train_loss, "{variant} seed {seed}: {m:?}");
            assert!(m.r2 > 0.5, "{variant} seed {seed}: {m:?}");
        }
    }
}

fn small_config(out: &Path, body: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_json(body).unwrap();
    cfg.out = Some(out.to_path_buf());
    cfg
}

#[test]
fn train_then_eval_and_inspect_housing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(
        dir.path(),
        r#"{"task": "housing", "variant": "kamoe", "kind": "mlp", "hidden": 6, "experts": 2, "train": {"epochs": 2}}"#,
    );
    let metrics = cmd_train(&cfg).unwrap();
    for f in ["model.json", "metrics.json", "summary.txt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }

    // Evaluating on the raw three-row fixture exercises the stored scaler.
    let ev = cmd_eval(&dir.path().join("model.json"), &fixture("three_rows.csv"));
    assert!(matches!(ev, Err(Error::Config(_))), "fixture lacks the housing feature columns");

    let test_csv = dir.path().join("test.csv");
    let raw = load_csv(bundled_housing_csv(), &[HOUSING_TARGET]).unwrap();
    let (_, test_rows) = train_test_split(raw.len(), 0.2, 42);
    let mut text = raw.feature_names.join(",") + "," + HOUSING_TARGET + "\n";
    for &r in &test_rows {
        let row: Vec<String> = (0..8).map(|c| format!("{:?}", raw.features.at(&[r, c]))).collect();
        text += &format!("{},{:?}\n", row.join(","), raw.targets.at(&[r, 0]));
    }
    std::fs::write(&test_csv, text).unwrap();
    let ev = cmd_eval(&dir.path().join("model.json"), &test_csv).unwrap();
    assert_eq!(ev.rows, test_rows.len());
    assert!((ev.r2 - metrics.r2).abs() < 1e-12, "{} vs {}", ev.r2, metrics.r2);
    assert!((ev.mse - metrics.mse).abs() < 1e-12);

    let report = cmd_inspect(&dir.path().join("model.json"), &test_csv).unwrap();
    assert_eq!(report.weights.shape(), [test_rows.len(), 2]);
    assert!(report.weights.data().iter().all(|a| *a > 0.0 && *a < 1.0));
    assert_eq!(report.to_csv().lines().next().unwrap(), "sample,expert_0,expert_1");
}

#[test]
fn inspect_rejects_standard_models() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(
        dir.path(),
        r#"{"task": "housing", "variant": "standard", "kind": "mlp", "hidden": 3, "train": {"epochs": 1}}"#,
    );
    cmd_train(&cfg).unwrap();
    let err = cmd_inspect(&dir.path().join("model.json"), bundled_housing_csv()).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn sequence_model_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(
        dir.path(),
        r#"{"task": "synthetic-seq", "variant": "moe", "kind": "gru", "hidden": 4, "seq_len": 8, "n_steps": 2,
            "data": {"median_window": 24, "synthetic": {"length": 300}}, "train": {"epochs": 2}}"#,
    );
    let metrics = cmd_train(&cfg).unwrap();
    let series = dir.path().join("series.csv");
    let table = kamoe::data::synth_seasonal_series(&cfg.data.synthetic, cfg.data.split_seed).unwrap();
    let mut text = String::from("channel0,channel1,channel2\n");
    for row in table.data().chunks(3) {
        text += &format!("{:?},{:?},{:?}\n", row[0], row[1], row[2]);
    }
    std::fs::write(&series, text).unwrap();
    let ev = cmd_eval(&dir.path().join("model.json"), &series).unwrap();
    assert_eq!(ev.rows, 300 - 24 - 8 - 2 + 1);
    assert!(ev.mse.is_finite() && metrics.mse.is_finite());
    let report = cmd_inspect(&dir.path().join("model.json"), &series).unwrap();
    assert_eq!(report.weights.shape(), [ev.rows, 3]);
}

#[test]
fn sweep_writes_tables_and_cells() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(
        dir.path(),
        r#"{"task": "housing", "variant": "kamoe", "kind": "mlp", "hidden": 4, "train": {"epochs": 1},
            "sweep": {"hidden": [2, 3], "layers": [1, 2], "variants": ["kamoe", "moe", "standard"], "seeds": [0, 1]}}"#,
    );
    let result = cmd_sweep(&cfg, 2, true).unwrap();
    assert_eq!(result.cells.len(), 3 * 2 * 2);
    assert!(result.cells.iter().all(|c| c.failures.is_empty() && c.runs.len() == 2));
    for name in ["r2_mean.csv", "r2_std.csv", "mse_mean.csv", "params.csv", "seconds_mean.csv", "cells.json"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    assert_eq!(std::fs::read_dir(dir.path().join("cells")).unwrap().count(), 24);
    let params = std::fs::read_to_string(dir.path().join("params.csv")).unwrap();
    let lines: Vec<&str> = params.lines().collect();
    assert_eq!(lines[0], "hidden,KAMoE_L1,KAMoE_L2,MoE_L1,MoE_L2,Standard_L1,Standard_L2");
    // Standard columns follow the closed form 10h + 1 + (L − 1)(h² + h)
    assert!(lines[1].ends_with(",21,27"), "{}", lines[1]);
    assert!(lines[3].starts_with(&format!("\"{AVG_DIFF_LABEL}\"")));

    // Each cell is reproducible from its (config, seed) pair alone.
    let single = cmd_sweep(&cfg, 1, false).unwrap();
    for (a, b) in result.cells.iter().zip(&single.cells) {
        let strip = |c: &kamoe::experiment::CellResult| c.runs.iter().map(|m| m.without_timing()).collect::<Vec<_>>();
        assert_eq!(strip(a), strip(b));
    }
}
