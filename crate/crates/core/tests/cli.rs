use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use koopman_credit::cli::{run_cli, CreditReport, EXIT_CONFIG, EXIT_IO, EXIT_NUMERICAL, EXIT_OK};
use koopman_credit::linalg::Matrix;
use koopman_credit::model::{model_to_json, Activation, Dense, LayerSpec, NetworkModel, Shape};

fn dense(rows: &[&[f64]]) -> LayerSpec {
    let weight = Matrix::from_rows(rows).unwrap();
    let bias = vec![0.1; weight.rows()];
    LayerSpec::Dense(Dense { weight, bias })
}

/// 3 → 4 → 2 with tanh in between: two grouped blocks.
fn small_model() -> NetworkModel {
    let layers = vec![
        dense(&[&[0.5, -0.2, 0.1], &[0.3, 0.8, -0.4], &[-0.6, 0.2, 0.7], &[0.1, 0.1, 0.9]]),
        LayerSpec::Activation(Activation::Tanh),
        dense(&[&[0.4, -0.5, 0.2, 0.3], &[-0.1, 0.6, 0.5, -0.7]]),
    ];
    NetworkModel::new("small", Shape::Flat(3), layers).unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new(model: &NetworkModel) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("model.json"), model_to_json(model)).unwrap();
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self, extra: serde_json::Value) -> PathBuf {
        let mut config = json!({
            "model_path": "model.json",
            "partition": "grouped",
            "dataset": {"kind": "synthetic_gaussian"},
            "sample_count": 6,
            "repeats": 2,
            "master_seed": 3,
            "output_dir": "out",
        });
        for (k, v) in extra.as_object().unwrap() {
            config[k] = v.clone();
        }
        let path = self.path("config.json");
        fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
        path
    }
}

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = run_cli(std::iter::once("credit").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn data_lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().skip(1).map(str::to_string).collect()
}

#[test]
fn analyze_writes_every_artifact() {
    let fx = Fixture::new(&small_model());
    let config = fx.config(json!({}));
    let out = fx.path("nested/out");
    let (code, stdout, stderr) = run(&["analyze", "--config", s(&config), "--out", s(&out)]);
    assert_eq!(code, EXIT_OK, "{stderr}");
    assert!(stdout.contains("2 blocks, 2 repeats"), "{stdout}");

    let report = CreditReport::from_json(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.blocks.len(), 2);
    assert_eq!(report.metadata.repeat_seeds.len(), 2);
    assert_eq!(report.feature_weights.shape(), (2, 3));

    let credits = fs::read_to_string(out.join("credits.csv")).unwrap();
    assert!(credits.starts_with("block_id,name,log10_credit,share,rank,degenerate\n"));
    assert_eq!(data_lines(&out.join("credits.csv")).len(), 2);
    assert_eq!(data_lines(&out.join("feature_weights.csv")).len(), 6);
    assert!(fs::read_to_string(out.join("feature_weights.csv")).unwrap().starts_with("out_idx,in_idx,weight\n"));
    assert!(data_lines(&out.join("kernel_credits.csv")).is_empty());
    for k in 0..2 {
        let pgm = fs::read_to_string(out.join(format!("heatmap_{k}.pgm"))).unwrap();
        assert!(pgm.starts_with("P2\n"), "{pgm}");
    }
    assert!(!fx.path("out").exists(), "--out overrides the configured directory");
}

#[test]
fn overrides_change_the_run() {
    let fx = Fixture::new(&small_model());
    let config = fx.config(json!({}));
    let out = fx.path("o");
    let (code, stdout, stderr) = run(&[
        "analyze",
        "--config",
        s(&config),
        "--out",
        s(&out),
        "--seed",
        "11",
        "--repeats",
        "3",
        "--samples",
        "4",
        "--quiet",
    ]);
    assert_eq!(code, EXIT_OK, "{stderr}");
    assert!(stdout.is_empty());
    let report = CreditReport::from_json(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.metadata.master_seed, 11);
    assert_eq!(report.metadata.repeats, 3);
    assert_eq!(report.metadata.sample_count, 4);
}

#[test]
fn report_json_reloads_to_an_equal_report() {
    let fx = Fixture::new(&small_model());
    let config = fx.config(json!({"dump_snapshots": true}));
    let (code, _, stderr) = run(&["analyze", "--config", s(&config), "--quiet"]);
    assert_eq!(code, EXIT_OK, "{stderr}");
    let text = fs::read_to_string(fx.path("out/report.json")).unwrap();
    let report = CreditReport::from_json(&text).unwrap();
    assert_eq!(report.to_json(), text);
    assert_eq!(CreditReport::from_json(&report.to_json()).unwrap(), report);
    for b in 0..2 {
        let csv = fs::read_to_string(fx.path(&format!("out/snapshots/block_{b}.csv"))).unwrap();
        assert!(csv.starts_with("seed,step,idx,value\n"));
    }
}

#[test]
fn invalid_partition_writes_nothing() {
    let fx = Fixture::new(&small_model());
    let config = fx.config(json!({"partition": [[0, 1]]}));
    let (code, _, stderr) = run(&["analyze", "--config", s(&config)]);
    assert_eq!(code, EXIT_CONFIG, "{stderr}");
    assert!(stderr.starts_with("error:"), "{stderr}");
    assert!(!fx.path("out").exists());
}

#[test]
fn configuration_errors_exit_with_2() {
    let fx = Fixture::new(&small_model());
    for extra in [json!({"repeats": 0}), json!({"sample_count": 0}), json!({"d_cap": 0}), json!({"unknown_key": 1})] {
        let config = fx.config(extra.clone());
        let (code, _, _) = run(&["analyze", "--config", s(&config)]);
        assert_eq!(code, EXIT_CONFIG, "{extra}");
    }
    let config = fx.config(json!({}));
    assert_eq!(run(&["analyze", "--config", s(&config), "--repeats", "0"]).0, EXIT_CONFIG);
    assert_eq!(run(&["analyze"]).0, EXIT_CONFIG);
    assert_eq!(run(&["frobnicate"]).0, EXIT_CONFIG);
    assert!(!fx.path("out").exists());
}

#[test]
fn missing_files_exit_with_4() {
    let fx = Fixture::new(&small_model());
    assert_eq!(run(&["analyze", "--config", s(&fx.path("absent.json"))]).0, EXIT_IO);
    let config = fx.config(json!({"model_path": "absent.json"}));
    assert_eq!(run(&["analyze", "--config", s(&config)]).0, EXIT_IO);
    let config = fx.config(json!({"dataset": {"kind": "mnist_idx", "images": "none.gz", "labels": "none.gz"}}));
    assert_eq!(run(&["analyze", "--config", s(&config)]).0, EXIT_IO);
    assert_eq!(run(&["inspect-model", "--model", s(&fx.path("absent.json"))]).0, EXIT_IO);
}

#[test]
fn diverging_model_exits_with_3() {
    // Every trajectory overflows, so no snapshot survives.
    let layers = vec![dense(&[&[1e200, 0.0], &[0.0, 1e200]]), LayerSpec::Activation(Activation::Identity)];
    let model = NetworkModel::new("diverging", Shape::Flat(2), layers).unwrap();
    let fx = Fixture::new(&model);
    let config = fx.config(json!({"partition": "per_layer"}));
    let (code, _, stderr) = run(&["analyze", "--config", s(&config)]);
    assert_eq!(code, EXIT_NUMERICAL, "{stderr}");
    assert!(stderr.contains("repeat 0, block 0"), "{stderr}");
    assert!(!fx.path("out").exists());
}

#[test]
fn forward_prints_predictions() {
    let fx = Fixture::new(&small_model());
    let input = fx.path("input.csv");
    fs::write(&input, "1, 0, 0\n\n0.5,-1,2\n").unwrap();
    let (code, stdout, stderr) = run(&["forward", "--model", s(&fx.path("model.json")), "--input", s(&input)]);
    assert_eq!(code, EXIT_OK, "{stderr}");
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "predicted,out_0,out_1");
    assert_eq!(lines.len(), 3);

    // Row 1 by hand: tanh(W1·x + 0.1), then W2·h + 0.1.
    let h: Vec<f64> = [0.5, 0.3, -0.6, 0.1].iter().map(|w: &f64| (w + 0.1).tanh()).collect();
    let o0 = 0.4 * h[0] - 0.5 * h[1] + 0.2 * h[2] + 0.3 * h[3] + 0.1;
    let o1 = -0.1 * h[0] + 0.6 * h[1] + 0.5 * h[2] - 0.7 * h[3] + 0.1;
    let fields: Vec<f64> = lines[1].split(',').map(|f| f.parse().unwrap()).collect();
    assert_eq!(fields[0], if o0 >= o1 { 0.0 } else { 1.0 });
    assert!((fields[1] - o0).abs() < 1e-12 && (fields[2] - o1).abs() < 1e-12);

    fs::write(&input, "1,2\n").unwrap();
    assert_eq!(run(&["forward", "--model", s(&fx.path("model.json")), "--input", s(&input)]).0, EXIT_CONFIG);
    fs::write(&input, "1,x,2\n").unwrap();
    assert_eq!(run(&["forward", "--model", s(&fx.path("model.json")), "--input", s(&input)]).0, EXIT_CONFIG);
}

#[test]
fn inspect_lists_layers_and_blocks() {
    let fx = Fixture::new(&small_model());
    let (code, stdout, _) = run(&["inspect-model", "--model", s(&fx.path("model.json"))]);
    assert_eq!(code, EXIT_OK);
    assert!(stdout.contains("model small"), "{stdout}");
    assert!(stdout.contains("params 16"), "{stdout}");
    assert!(stdout.contains("dense+tanh"), "{stdout}");
    assert!(stdout.contains("block 1 layers 2..=2"), "{stdout}");
}

#[test]
fn help_exits_cleanly() {
    let (code, stdout, _) = run(&["--help"]);
    assert_eq!(code, EXIT_OK);
    assert!(stdout.contains("analyze"));
}

#[test]
fn dense81_exports_ten_nine_by_nine_heatmaps() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let fx = Fixture::new(&koopman_credit::model::load_model(root.join("models/dense81.json")).unwrap());
    let config = fx.config(json!({"repeats": 1, "sample_count": 8}));
    let (code, _, stderr) = run(&["analyze", "--config", s(&config), "--quiet"]);
    assert_eq!(code, EXIT_OK, "{stderr}");
    let pgms: Vec<PathBuf> = fs::read_dir(fx.path("out"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "pgm"))
        .collect();
    assert_eq!(pgms.len(), 10);
    for p in pgms {
        let text = fs::read_to_string(&p).unwrap();
        let tokens: Vec<&str> = text.split_whitespace().collect();
        assert_eq!(&tokens[..4], ["P2", "9", "9", "255"]);
        assert_eq!(tokens.len(), 4 + 81);
    }
}

#[test]
fn binary_reports_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_credit");
    let status = std::process::Command::new(bin).args(["analyze", "--config", "/nonexistent/c.json"]).output().unwrap();
    assert_eq!(status.status.code(), Some(EXIT_IO));
    let status = std::process::Command::new(bin).arg("--version").output().unwrap();
    assert_eq!(status.status.code(), Some(EXIT_OK));
}
