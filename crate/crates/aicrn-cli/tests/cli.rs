//! Integration tests driving the `aicrn` binary end to end: corpus
//! generation, training, evaluation, prediction, trend reports, and the
//! gradient self-check, including the exit-code discipline (0 ok, 1 runtime,
//! 2 usage).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_aicrn"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_code(out: &Output, want: i32) {
    let got = out.status.code().unwrap_or(-1);
    assert_eq!(
        got,
        want,
        "exit code {} != {}\nstdout: {}\nstderr: {}",
        got,
        want,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("aicrn_cli_{}", tag));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn dir_snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort_by(|a, b| a.0.cmp(&b.0));
    files
}

// ---- gen-data -------------------------------------------------------------------

#[test]
fn gen_data_writes_corpus_and_is_deterministic() {
    let dir = temp_dir("gen");
    let a = dir.join("a");
    let out = run(&[
        "gen-data",
        "--out",
        a.to_str().unwrap(),
        "--n",
        "8",
        "--seed",
        "7",
    ]);
    assert_code(&out, 0);
    let manifest_path = String::from_utf8_lossy(&out.stdout).trim().to_string();
    assert!(Path::new(&manifest_path).exists());
    assert!(a.join("metadata.csv").exists());
    let signals = fs::read_dir(&a)
        .unwrap()
        .filter(|e| {
            let name = e
                .as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .into_owned();
            name.starts_with("rec") && name.ends_with(".csv")
        })
        .count();
    assert_eq!(signals, 8);

    // Same flags, byte-identical corpus.
    let b = dir.join("b");
    assert_code(
        &run(&[
            "gen-data",
            "--out",
            b.to_str().unwrap(),
            "--n",
            "8",
            "--seed",
            "7",
        ]),
        0,
    );
    assert_eq!(dir_snapshot(&a), dir_snapshot(&b));
}

#[test]
fn gen_data_missing_out_is_usage_error() {
    let out = run(&["gen-data", "--n", "4"]);
    assert_code(&out, 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.to_lowercase().contains("usage") || stderr.contains("--out"),
        "{}",
        stderr
    );
}

// ---- train / eval / predict / report ---------------------------------------------

/// One small corpus + one trained checkpoint, shared by the tests below.
/// Training twice checks bitwise determinism of the checkpoint on the way.
struct Fixture {
    data: PathBuf,
    model_dir: PathBuf,
    checkpoint: PathBuf,
}

fn train_fixture() -> Fixture {
    let dir = temp_dir("fixture");
    let corpus = dir.join("corpus");
    assert_code(
        &run(&[
            "gen-data",
            "--out",
            corpus.to_str().unwrap(),
            "--n",
            "64",
            "--seed",
            "9",
        ]),
        0,
    );
    let data = corpus.join("metadata.csv");
    let model_dir = dir.join("models");
    let train_args = |out_dir: &Path| {
        vec![
            "train".to_string(),
            "--data".into(),
            data.to_str().unwrap().into(),
            "--target".into(),
            "hr".into(),
            "--out".into(),
            out_dir.to_str().unwrap().into(),
            "--width".into(),
            "16".into(),
            "--blocks".into(),
            "2".into(),
            "--epochs".into(),
            "20".into(),
            "--batch".into(),
            "16".into(),
            "--lr".into(),
            "0.005".into(),
            "--seed".into(),
            "5".into(),
            "--standardize-targets".into(),
            "--quiet".into(),
        ]
    };
    let out = bin().args(train_args(&model_dir)).output().unwrap();
    assert_code(&out, 0);

    // Determinism: the same flags reproduce the checkpoint bitwise.
    let model_dir2 = dir.join("models2");
    let out2 = bin().args(train_args(&model_dir2)).output().unwrap();
    assert_code(&out2, 0);
    assert_eq!(
        fs::read(model_dir.join("hr.aicn")).unwrap(),
        fs::read(model_dir2.join("hr.aicn")).unwrap(),
        "training must be bitwise deterministic under fixed flags and seed"
    );

    Fixture {
        data,
        model_dir: model_dir.clone(),
        checkpoint: model_dir.join("hr.aicn"),
    }
}

#[test]
fn train_eval_predict_report_chain() {
    let fx = train_fixture();

    // Training artifacts exist and validation improved over the run.
    assert!(fx.checkpoint.exists());
    assert!(fx.model_dir.join("hr.aicn.meta.json").exists());
    assert!(fx.model_dir.join("hr.history.csv").exists());
    let history = fs::read_to_string(fx.model_dir.join("hr.history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_mse,val_mse"));
    let val_col: Vec<f64> = history
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(val_col.len(), 20);
    let best = val_col.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(
        best < val_col[0],
        "validation MSE never improved: first {} best {}",
        val_col[0],
        best
    );

    // Eval on the training split reproduces the sidecar's final train-set
    // metrics.
    let sidecar: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(fx.model_dir.join("hr.aicn.meta.json")).unwrap())
            .unwrap();
    let out = run(&[
        "eval",
        "--model",
        fx.checkpoint.to_str().unwrap(),
        "--data",
        fx.data.to_str().unwrap(),
        "--split",
        "train",
        "--json",
    ]);
    assert_code(&out, 0);
    let eval: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stdout).trim()).unwrap();
    // Exact field set.
    let obj = eval.as_object().unwrap();
    let mut keys: Vec<&str> = obj.keys().map(|k| k.as_str()).collect();
    keys.sort_unstable();
    assert_eq!(keys, vec!["mae", "n", "r2", "rmse", "target"]);
    let side_metrics = &sidecar["train_metrics"];
    for field in ["mae", "rmse"] {
        let a = eval[field].as_f64().unwrap();
        let b = side_metrics[field].as_f64().unwrap();
        assert!(
            (a - b).abs() <= 1e-6 * b.abs().max(1.0),
            "{}: eval {} vs sidecar {}",
            field,
            a,
            b
        );
    }
    assert_eq!(eval["n"].as_u64(), side_metrics["n"].as_u64());

    // Predict: column order, row order, and the report pipeline.
    let pred_csv = fx.model_dir.join("predictions.csv");
    let out = run(&[
        "predict",
        "--model",
        fx.checkpoint.to_str().unwrap(),
        "--data",
        fx.data.to_str().unwrap(),
        "--out",
        pred_csv.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let pred_text = fs::read_to_string(&pred_csv).unwrap();
    let mut lines = pred_text.lines();
    assert_eq!(lines.next().unwrap(), "record_id,timestamp,hr_bpm");
    let ids: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ids.len(), 64);
    // Metadata order is generation order.
    let expect: Vec<String> = (0..64).map(|i| format!("rec{:05}", i)).collect();
    assert_eq!(ids, expect.iter().map(|s| s.as_str()).collect::<Vec<_>>());

    // Per-record predictions agree with the aggregated eval metrics: the
    // MAE recomputed from the CSV matches eval --split all.
    let eval_all = run(&[
        "eval",
        "--model",
        fx.checkpoint.to_str().unwrap(),
        "--data",
        fx.data.to_str().unwrap(),
        "--split",
        "all",
        "--json",
    ]);
    assert_code(&eval_all, 0);
    let eval_all: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&eval_all.stdout).trim()).unwrap();
    let labels: std::collections::HashMap<String, f64> = fs::read_to_string(&fx.data)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[7].parse::<f64>().unwrap()) // hr_bpm column
        })
        .collect();
    let mut abs_sum = 0.0;
    let mut n = 0usize;
    for line in pred_text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        abs_sum += (f[2].parse::<f64>().unwrap() - labels[f[0]]).abs();
        n += 1;
    }
    let mae_from_csv = abs_sum / n as f64;
    let mae_eval = eval_all["mae"].as_f64().unwrap();
    assert!(
        (mae_from_csv - mae_eval).abs() < 1e-9,
        "predict csv mae {} vs eval mae {}",
        mae_from_csv,
        mae_eval
    );

    // Duplicate target columns are a usage error.
    let dup = run(&[
        "predict",
        "--model",
        fx.checkpoint.to_str().unwrap(),
        "--model",
        fx.checkpoint.to_str().unwrap(),
        "--data",
        fx.data.to_str().unwrap(),
        "--out",
        fx.model_dir.join("dup.csv").to_str().unwrap(),
    ]);
    assert_code(&dup, 2);

    // Report: sorted series plus summary.
    let report_dir = fx.model_dir.join("report");
    let out = run(&[
        "report",
        "--predictions",
        pred_csv.to_str().unwrap(),
        "--out",
        report_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let series = fs::read_to_string(report_dir.join("hr_bpm.csv")).unwrap();
    let times: Vec<&str> = series
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(times.len(), 64);
    let mut sorted = times.clone();
    sorted.sort_unstable(); // ISO-8601 sorts chronologically
    assert_eq!(times, sorted, "report rows must be sorted by timestamp");
    let summary = fs::read_to_string(report_dir.join("summary.csv")).unwrap();
    assert!(summary.starts_with("parameter,n,min,max,mean,slope_per_day"));
    assert!(summary.lines().nth(1).unwrap().starts_with("hr_bpm,64,"));
}

#[test]
fn report_hand_cases() {
    let dir = temp_dir("report");
    // Constant series: slope ~ 0. Values 1,2,3 one day apart: slope ~ 1/day.
    let csv = "record_id,timestamp,hr_bpm,qt_ms\n\
               a,2024-01-01T00:00:00Z,70,1\n\
               b,2024-01-02T00:00:00Z,70,2\n\
               c,2024-01-03T00:00:00Z,70,3\n";
    let pred = dir.join("p.csv");
    fs::write(&pred, csv).unwrap();
    let out_dir = dir.join("out");
    assert_code(
        &run(&[
            "report",
            "--predictions",
            pred.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]),
        0,
    );
    let summary = fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    let mut slopes = std::collections::HashMap::new();
    for line in summary.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        slopes.insert(f[0].to_string(), f[5].parse::<f64>().unwrap());
    }
    assert!(
        slopes["hr_bpm"].abs() <= 1e-12,
        "constant slope {}",
        slopes["hr_bpm"]
    );
    assert!(
        (slopes["qt_ms"] - 1.0).abs() <= 1e-9,
        "unit slope {}",
        slopes["qt_ms"]
    );

    // Missing timestamps are a runtime failure naming the requirement.
    let bad = dir.join("bad.csv");
    fs::write(&bad, "record_id,timestamp,hr_bpm\na,,70\n").unwrap();
    let out = run(&[
        "report",
        "--predictions",
        bad.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 1);
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("report requires timestamps"),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn train_all_targets_writes_six_checkpoints() {
    let dir = temp_dir("all_targets");
    let corpus = dir.join("corpus");
    assert_code(
        &run(&[
            "gen-data",
            "--out",
            corpus.to_str().unwrap(),
            "--n",
            "12",
            "--seed",
            "3",
        ]),
        0,
    );
    let out = run(&[
        "train",
        "--data",
        corpus.join("metadata.csv").to_str().unwrap(),
        "--target",
        "all",
        "--out",
        dir.join("models").to_str().unwrap(),
        "--width",
        "8",
        "--blocks",
        "1",
        "--epochs",
        "2",
        "--batch",
        "4",
        "--seed",
        "1",
        "--standardize-targets",
        "--quiet",
    ]);
    assert_code(&out, 0);
    for target in ["pr", "qt", "qrs", "hr", "rpa", "twa"] {
        assert!(
            dir.join("models").join(format!("{}.aicn", target)).exists(),
            "{}",
            target
        );
    }
}

#[test]
fn no_attention_flag_is_recorded_in_sidecar() {
    let dir = temp_dir("ablation");
    let corpus = dir.join("corpus");
    assert_code(
        &run(&[
            "gen-data",
            "--out",
            corpus.to_str().unwrap(),
            "--n",
            "12",
            "--seed",
            "4",
        ]),
        0,
    );
    let out = run(&[
        "train",
        "--data",
        corpus.join("metadata.csv").to_str().unwrap(),
        "--target",
        "hr",
        "--out",
        dir.join("models").to_str().unwrap(),
        "--width",
        "8",
        "--blocks",
        "1",
        "--no-attention",
        "--epochs",
        "2",
        "--batch",
        "4",
        "--seed",
        "1",
        "--quiet",
    ]);
    assert_code(&out, 0);
    let sidecar: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(dir.join("models").join("hr.aicn.meta.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(sidecar["attention"], serde_json::Value::Bool(false));
}

// ---- gradcheck --------------------------------------------------------------------

#[test]
fn gradcheck_passes_and_corruption_hook_fails() {
    let out = run(&["gradcheck", "--seed", "42"]);
    assert_code(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    for op in [
        "elementwise_add",
        "elementwise_sub",
        "elementwise_mul",
        "matmul",
        "reduce_mean",
        "reduce_sum",
        "reduce_max",
        "conv1d",
        "batchnorm1d",
        "activation_relu",
        "activation_leaky_relu",
        "activation_sigmoid",
        "avg_pool1d",
        "global_avg_pool",
        "dropout",
        "channel_attention",
        "spatial_attention",
        "apply_cbam",
        "residual_module",
        "end_to_end",
    ] {
        assert!(stdout.contains(&format!("op={} ", op)), "missing op {}", op);
    }
    assert!(!stdout.contains("FAIL"));

    // Deliberately corrupted backward rule: exit 1 naming the op.
    let out = bin()
        .args(["gradcheck", "--seed", "42"])
        .env("AICRN_GRADCHECK_CORRUPT", "conv1d")
        .output()
        .unwrap();
    assert_code(&out, 1);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("conv1d"), "{}", stderr);
}
