use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use aicrn_core::checkpoint::{load_model, load_sidecar, save_sidecar, SidecarMeta};
use aicrn_core::data::{
    clean, compute_norm_stats, load_dataset, normalize, split, EcgRecord, NormStats, SplitSpec,
    TargetKind,
};
use aicrn_core::gradcheck::run_suite;
use aicrn_core::network::{AicrnConfig, AicrnModel};
use aicrn_core::report::summarize;
use aicrn_core::rng::Rng;
use aicrn_core::synth::{generate_corpus, GeneratorConfig};
use aicrn_core::timeutil::parse_iso8601_utc;
use aicrn_core::train::{fit, predict_records, TrainConfig};

use crate::{
    CliError, CliResult, EvalArgs, GenDataArgs, GradcheckArgs, PredictArgs, ReportArgs, TrainArgs,
};

fn runtime(msg: impl Into<String>) -> CliError {
    CliError::Runtime(msg.into())
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

// ---- gen-data -----------------------------------------------------------------

pub fn gen_data(args: GenDataArgs) -> CliResult {
    if args.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let config = GeneratorConfig {
        n_records: args.n,
        duration_s: args.duration,
        sample_rate_hz: args.rate,
        noise_std_mv: args.noise,
        seed: args.seed,
        ..GeneratorConfig::default()
    };
    let manifest = generate_corpus(&config, &args.out)?;
    println!("{}", manifest.manifest_path.display());
    Ok(())
}

// ---- train --------------------------------------------------------------------

fn parse_targets(s: &str) -> Result<Vec<TargetKind>, CliError> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(TargetKind::ALL.to_vec());
    }
    Ok(vec![TargetKind::from_str(s)?])
}

struct TargetOutputs {
    checkpoint: PathBuf,
    sidecar: PathBuf,
    history: PathBuf,
}

impl TargetOutputs {
    fn new(out_dir: &Path, target: TargetKind) -> Self {
        let checkpoint = out_dir.join(format!("{}.aicn", target));
        let sidecar = aicrn_core::checkpoint::sidecar_path(&checkpoint);
        let history = checkpoint.with_extension("history.csv");
        TargetOutputs {
            checkpoint,
            sidecar,
            history,
        }
    }

    fn remove_partial(&self) {
        for p in [&self.checkpoint, &self.sidecar, &self.history] {
            let _ = fs::remove_file(p);
        }
    }
}

fn train_one_target(
    args: &TrainArgs,
    target: TargetKind,
    records: &[EcgRecord],
) -> Result<(), (String, CliError)> {
    let stage = |s: &'static str| move |e: aicrn_core::Error| (s.to_string(), CliError::from(e));

    let (kept, report) = clean(records.to_vec(), target).map_err(stage("clean"))?;
    println!(
        "target {}: {} usable records ({} missing label, {} non-finite)",
        target, report.kept, report.missing_label, report.non_finite_signal
    );

    let spec = SplitSpec::new(args.train_ratio, args.val_ratio, args.test_ratio, args.seed);
    let (mut train_set, mut val_set, mut test_set) = split(kept, &spec).map_err(stage("split"))?;

    let stats = compute_norm_stats(&train_set).map_err(stage("normalize"))?;
    normalize(&mut train_set, &stats).map_err(stage("normalize"))?;
    normalize(&mut val_set, &stats).map_err(stage("normalize"))?;
    normalize(&mut test_set, &stats).map_err(stage("normalize"))?;

    let input_len = train_set[0].n_samples;
    let config = AicrnConfig {
        in_channels: 8,
        input_len,
        stem_width: args.width,
        stem_kernel: args.stem_kernel,
        block_kernel: args.block_kernel,
        num_blocks: args.blocks,
        attention: !args.no_attention,
        dropout_p: args.dropout,
        ..AicrnConfig::default()
    };
    let mut model =
        AicrnModel::<f32>::build(config, &mut Rng::new(args.seed)).map_err(stage("build"))?;

    let outputs = TargetOutputs::new(&args.out, target);
    let mut tc = TrainConfig::new(target, &outputs.checkpoint);
    tc.max_epochs = args.epochs;
    tc.batch_size = args.batch;
    tc.seed = args.seed;
    tc.lr = args.lr;
    tc.patience = args.patience;
    tc.standardize_targets = args.standardize_targets;
    tc.quiet = args.quiet;

    let run = fit(&mut model, &train_set, &val_set, &tc).map_err(stage("fit"))?;

    let meta = SidecarMeta {
        target: target.to_string(),
        attention: !args.no_attention,
        lead_means: stats.mean.clone(),
        lead_stds: stats.std.clone(),
        target_mean: run.target_mean,
        target_std: run.target_std,
        split_ratios: [args.train_ratio, args.val_ratio, args.test_ratio],
        split_seed: args.seed,
        best_epoch: run.best_epoch,
        best_val_mse: run.best_val_mse,
        epochs_run: run.history.len(),
        train_metrics: Some(run.final_train_metrics.clone()),
    };
    save_sidecar(&outputs.checkpoint, &meta).map_err(stage("sidecar"))?;

    println!(
        "target {}: best val mse {:.6e} at epoch {} after {} epochs; checkpoint {}",
        target,
        run.best_val_mse,
        run.best_epoch,
        run.history.len(),
        outputs.checkpoint.display()
    );
    Ok(())
}

pub fn train(args: TrainArgs) -> CliResult {
    let targets = parse_targets(&args.target)?;
    fs::create_dir_all(&args.out).map_err(|e| runtime(format!("{}: {}", args.out.display(), e)))?;
    let records = load_dataset(&args.data)?;
    for target in targets {
        if let Err((stage, err)) = train_one_target(&args, target, &records) {
            TargetOutputs::new(&args.out, target).remove_partial();
            let msg = match err {
                CliError::Usage(m) | CliError::Runtime(m) => m,
            };
            return Err(runtime(format!(
                "training target {} failed during {}: {}",
                target, stage, msg
            )));
        }
    }
    Ok(())
}

// ---- eval ---------------------------------------------------------------------

fn select_split(
    records: Vec<EcgRecord>,
    which: &str,
    meta: &SidecarMeta,
) -> Result<Vec<EcgRecord>, CliError> {
    if which == "all" {
        return Ok(records);
    }
    let spec = SplitSpec::new(
        meta.split_ratios[0],
        meta.split_ratios[1],
        meta.split_ratios[2],
        meta.split_seed,
    );
    let (train, val, test) = split(records, &spec)?;
    match which {
        "train" => Ok(train),
        "val" => Ok(val),
        "test" => Ok(test),
        other => Err(usage(format!(
            "unknown split `{}` (expected train|val|test|all)",
            other
        ))),
    }
}

fn unstandardize(preds: &mut [f64], meta: &SidecarMeta) {
    if let (Some(m), Some(s)) = (meta.target_mean, meta.target_std) {
        for p in preds.iter_mut() {
            *p = *p * s + m;
        }
    }
}

pub fn eval(args: EvalArgs) -> CliResult {
    let model = load_model(&args.model)?;
    let meta = load_sidecar(&args.model)?;
    let target = TargetKind::from_str(&meta.target)?;

    let records = load_dataset(&args.data)?;
    let (kept, _) = clean(records, target)?;
    let mut subset = select_split(kept, &args.split, &meta)?;
    if subset.is_empty() {
        return Err(runtime(format!(
            "split `{}` selected no records",
            args.split
        )));
    }
    let stats = NormStats {
        mean: meta.lead_means.clone(),
        std: meta.lead_stds.clone(),
    };
    normalize(&mut subset, &stats)?;

    let mut preds = predict_records(&model, &subset, 256)?;
    unstandardize(&mut preds, &meta);
    let targets: Vec<f64> = subset.iter().map(|r| r.label(target).unwrap()).collect();
    let m = aicrn_core::train::compute_metrics(&preds, &targets)?;

    let json = serde_json::json!({
        "target": meta.target,
        "n": subset.len(),
        "mae": m.mae,
        "rmse": m.rmse,
        "r2": m.r2,
    });
    if args.json {
        println!("{}", json);
    } else {
        println!(
            "target={} split={} n={} mae={:.6} rmse={:.6} r2={}",
            meta.target,
            args.split,
            subset.len(),
            m.mae,
            m.rmse,
            m.r2.map(|v| format!("{:.6}", v))
                .unwrap_or_else(|| "undefined".into()),
        );
    }
    if let Some(out) = &args.out {
        fs::write(out, json.to_string())
            .map_err(|e| runtime(format!("{}: {}", out.display(), e)))?;
    }
    Ok(())
}

// ---- predict ------------------------------------------------------------------

pub fn predict(args: PredictArgs) -> CliResult {
    let mut loaded: Vec<(AicrnModel<f32>, SidecarMeta, TargetKind)> = Vec::new();
    for path in &args.model {
        let model = load_model(path)?;
        let meta = load_sidecar(path)?;
        let target = TargetKind::from_str(&meta.target)?;
        if loaded.iter().any(|(_, _, t)| *t == target) {
            return Err(usage(format!(
                "duplicate target column `{}`: each --model must predict a distinct parameter",
                target.column()
            )));
        }
        loaded.push((model, meta, target));
    }
    let records = load_dataset(&args.data)?;
    if records.is_empty() {
        return Err(runtime("no records to predict on"));
    }

    let mut columns: Vec<Vec<f64>> = Vec::new();
    for (model, meta, _) in &loaded {
        let mut normalized = records.clone();
        let stats = NormStats {
            mean: meta.lead_means.clone(),
            std: meta.lead_stds.clone(),
        };
        normalize(&mut normalized, &stats)?;
        let mut preds = predict_records(model, &normalized, 256)?;
        unstandardize(&mut preds, meta);
        columns.push(preds);
    }

    let mut out = String::from("record_id,timestamp");
    for (_, _, target) in &loaded {
        out.push(',');
        out.push_str(target.column());
    }
    out.push('\n');
    for (i, rec) in records.iter().enumerate() {
        out.push_str(&rec.id);
        out.push(',');
        out.push_str(rec.timestamp.as_deref().unwrap_or(""));
        for col in &columns {
            out.push_str(&format!(",{}", col[i]));
        }
        out.push('\n');
    }
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| runtime(format!("{}: {}", parent.display(), e)))?;
        }
    }
    fs::write(&args.out, out).map_err(|e| runtime(format!("{}: {}", args.out.display(), e)))?;
    println!("{}", args.out.display());
    Ok(())
}

// ---- report -------------------------------------------------------------------

pub fn report(args: ReportArgs) -> CliResult {
    let text = fs::read_to_string(&args.predictions)
        .map_err(|e| runtime(format!("{}: {}", args.predictions.display(), e)))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| runtime("empty predictions file"))?;
    let cols: Vec<&str> = header.split(',').map(|s| s.trim()).collect();
    if cols.len() < 3 || cols[0] != "record_id" || cols[1] != "timestamp" {
        return Err(runtime(format!(
            "unexpected predictions header `{}`: want record_id,timestamp,<parameters...>",
            header
        )));
    }
    let params: Vec<String> = cols[2..].iter().map(|s| s.to_string()).collect();

    struct Row {
        secs: i64,
        timestamp: String,
        values: Vec<f64>,
    }
    let mut rows: Vec<Row> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(runtime(format!(
                "{}:{}: row has {} fields, header has {}",
                args.predictions.display(),
                lineno + 2,
                fields.len(),
                cols.len()
            )));
        }
        let ts = fields[1].trim();
        let secs = parse_iso8601_utc(ts).ok_or_else(|| {
            runtime(format!(
                "report requires timestamps: record `{}` has `{}`",
                fields[0], ts
            ))
        })?;
        let values = fields[2..]
            .iter()
            .map(|f| {
                f.trim().parse::<f64>().map_err(|_| {
                    runtime(format!("cannot parse value `{}` at line {}", f, lineno + 2))
                })
            })
            .collect::<Result<Vec<f64>, CliError>>()?;
        rows.push(Row {
            secs,
            timestamp: ts.to_string(),
            values,
        });
    }
    if rows.is_empty() {
        return Err(runtime("predictions file has no rows".to_string()));
    }
    rows.sort_by_key(|r| r.secs);

    fs::create_dir_all(&args.out).map_err(|e| runtime(format!("{}: {}", args.out.display(), e)))?;
    let t0 = rows[0].secs;
    let times_days: Vec<f64> = rows
        .iter()
        .map(|r| (r.secs - t0) as f64 / 86_400.0)
        .collect();

    let mut summary = String::from("parameter,n,min,max,mean,slope_per_day\n");
    for (pi, param) in params.iter().enumerate() {
        let mut series = String::from("time,value\n");
        let values: Vec<f64> = rows.iter().map(|r| r.values[pi]).collect();
        for row in &rows {
            series.push_str(&format!("{},{}\n", row.timestamp, row.values[pi]));
        }
        let path = args.out.join(format!("{}.csv", param));
        fs::write(&path, series).map_err(|e| runtime(format!("{}: {}", path.display(), e)))?;
        let s = summarize(&times_days, &values)?;
        summary.push_str(&format!(
            "{},{},{},{},{},{}\n",
            param, s.n, s.min, s.max, s.mean, s.slope
        ));
    }
    let summary_path = args.out.join("summary.csv");
    fs::write(&summary_path, summary)
        .map_err(|e| runtime(format!("{}: {}", summary_path.display(), e)))?;
    println!("{}", args.out.display());
    Ok(())
}

// ---- gradcheck ----------------------------------------------------------------

pub fn gradcheck(args: GradcheckArgs) -> CliResult {
    // Test hook: corrupt one op's analytic gradient to demonstrate the
    // harness actually detects wrong backward rules.
    let corrupt = std::env::var("AICRN_GRADCHECK_CORRUPT").ok();
    let reports = run_suite(args.seed, corrupt.as_deref());
    let mut failing: Vec<&str> = Vec::new();
    for r in &reports {
        println!(
            "op={} max_rel_err={:.3e} threshold={:.0e} {}",
            r.name,
            r.max_rel_err,
            r.threshold,
            if r.passed() { "PASS" } else { "FAIL" }
        );
        if !r.passed() {
            failing.push(r.name);
        }
    }
    if !failing.is_empty() {
        return Err(runtime(format!(
            "gradient check failed for: {}",
            failing.join(", ")
        )));
    }
    Ok(())
}
