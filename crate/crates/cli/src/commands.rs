use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Value;

use driftmoe::data::{generate_stream, load_csv, write_csv, RegimeScript, SeriesDataset, Split, SplitSpec};
use driftmoe::drift::{scan, DetectorConfig};
use driftmoe::manager::{profile as profile_residuals, write_event_log, Action};
use driftmoe::model::{evaluate, load_checkpoint, predict_split, save_checkpoint, train as train_model, MetricsReport};
use driftmoe::model::{Model, ModelConfig};
use driftmoe::router::write_routing_trace;

use crate::config::{env_seed, resolve};
use crate::failure::{CliResult, Failure, DATA};
use crate::{DetectArgs, TrainArgs};

const MANIFEST: &str = "manifest.json";
const CHECKPOINT: &str = "model.ckpt";
const METRICS: &str = "metrics.json";
const EVENTS: &str = "events.jsonl";
const LOSS_CURVE: &str = "loss_curve.csv";
const DETECTOR_LOG: &str = "detector.jsonl";
const ALIGNMENT: &str = "alignment.jsonl";
const EXPERTS: &str = "experts.json";
const PREDICTIONS: &str = "predictions.csv";

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::output(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(Failure::output)?;
    writeln!(w).and_then(|_| w.flush()).map_err(Failure::output)
}

fn print_json(value: &impl Serialize) -> CliResult<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, value).map_err(Failure::output)?;
    writeln!(out).map_err(Failure::output)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn gen(script: &Path, out: &Path) -> CliResult<()> {
    let text = fs::read_to_string(script)
        .map_err(|e| Failure::config(format!("cannot read script {}: {e}", script.display())))?;
    let mut table: toml::Table =
        toml::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", script.display())))?;
    if !table.contains_key("seed") {
        let seed = env_seed()?.unwrap_or(0);
        table.insert("seed".into(), Value::Integer(seed as i64));
    }
    let script: RegimeScript =
        RegimeScript::deserialize(Value::Table(table)).map_err(|e| Failure::config(format!("invalid script: {e}")))?;
    let ds = generate_stream(&script).map_err(|e| Failure::from_core(e, DATA))?;
    let mut w = create(out)?;
    write_csv(&ds, &mut w).map_err(Failure::output)?;
    w.flush().map_err(Failure::output)?;
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let sidecar = out.with_file_name(format!("{stem}.shifts.json"));
    write_json(
        &sidecar,
        &serde_json::json!({ "length": ds.len(), "shifts": ds.shifts }),
    )
}

/// Everything needed to repeat a training run.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunManifest {
    data: PathBuf,
    data_sha256: String,
    seed: u64,
    /// SHA-256 over the data digest and the canonical configuration JSON.
    input_hash: String,
    dump_predictions: bool,
    dump_routes: bool,
    config: ModelConfig,
    outputs: Vec<String>,
}

fn input_hash(data_sha: &str, cfg: &ModelConfig) -> String {
    let cfg_json = serde_json::to_vec(cfg).expect("config serializes");
    let mut h = Sha256::new();
    h.update(data_sha.as_bytes());
    h.update(&cfg_json);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn load_data(path: &Path, split: SplitSpec) -> CliResult<(SeriesDataset, String)> {
    let bytes = fs::read(path).map_err(|e| Failure::data(format!("cannot read data {}: {e}", path.display())))?;
    let ds = load_csv(path, split).map_err(|e| Failure::from_core(e, DATA))?;
    Ok((ds, sha256_hex(&bytes)))
}

#[derive(Serialize)]
struct MetricsJson<'a> {
    dataset: &'a str,
    horizon: usize,
    mse: f64,
    mae: f64,
    n_windows: usize,
    /// Experts per MoE layer.
    pool_final: Vec<usize>,
    drift_events: usize,
}

fn metrics_json<'a>(ds: &'a SeriesDataset, model: &Model, m: &MetricsReport) -> MetricsJson<'a> {
    let drift_events: BTreeSet<u64> = model
        .events()
        .iter()
        .filter(|e| e.action != Action::Pruned)
        .map(|e| e.event_id)
        .collect();
    MetricsJson {
        dataset: &ds.name,
        horizon: model.config().horizon,
        mse: m.mse,
        mae: m.mae,
        n_windows: m.n_windows,
        pool_final: model.layers().iter().map(|l| l.pool.len()).collect(),
        drift_events: drift_events.len(),
    }
}

pub fn train(args: &TrainArgs) -> CliResult<()> {
    let (data_path, mut cfg, dump_predictions, dump_routes, expected_sha) = match &args.manifest {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::config(format!("cannot read manifest {}: {e}", path.display())))?;
            let m: RunManifest =
                serde_json::from_str(&text).map_err(|e| Failure::config(format!("invalid manifest: {e}")))?;
            (m.data, m.config, m.dump_predictions, m.dump_routes, Some(m.data_sha256))
        }
        None => {
            let cfg = resolve(
                args.preset.as_deref(),
                args.config.as_deref(),
                &args.sets,
                args.no_adapt,
            )?;
            let data = args.data.clone().expect("clap requires --data without --manifest");
            (data, cfg, args.dump_predictions, args.dump_routes, None)
        }
    };
    let (ds, data_sha) = load_data(&data_path, cfg.split)?;
    if let Some(want) = expected_sha {
        if want != data_sha {
            return Err(Failure::data(format!(
                "{} changed since the manifest was written",
                data_path.display()
            )));
        }
    }
    if cfg.n_vars == 0 {
        cfg.n_vars = ds.n_vars();
    } else if cfg.n_vars != ds.n_vars() {
        return Err(Failure::data(format!(
            "config expects {} variables, {} has {}",
            cfg.n_vars,
            data_path.display(),
            ds.n_vars()
        )));
    }
    let mut model = Model::new(cfg.clone()).map_err(|e| Failure::from_core(e, DATA))?;
    fs::create_dir_all(&args.out).map_err(|e| Failure::output(format!("{}: {e}", args.out.display())))?;

    let report = train_model(&mut model, &ds).map_err(|e| Failure::from_core(e, DATA))?;
    let test = evaluate(&model, &ds, Split::Test).map_err(|e| Failure::from_core(e, DATA))?;
    let out = &args.out;
    let mut outputs: Vec<String> = [
        CHECKPOINT,
        METRICS,
        EVENTS,
        LOSS_CURVE,
        DETECTOR_LOG,
        ALIGNMENT,
        EXPERTS,
    ]
    .map(String::from)
    .to_vec();

    save_checkpoint(&model, out.join(CHECKPOINT)).map_err(Failure::output)?;
    let metrics = metrics_json(&ds, &model, &test);
    write_json(&out.join(METRICS), &metrics)?;

    let mut w = create(&out.join(EVENTS))?;
    write_event_log(&mut w, model.events()).map_err(Failure::output)?;
    w.flush().map_err(Failure::output)?;

    let mut w = create(&out.join(LOSS_CURVE))?;
    writeln!(w, "epoch,train_mse,val_mse").map_err(Failure::output)?;
    for e in &report.loss_curve {
        writeln!(w, "{},{},{}", e.epoch, e.train_mse, e.val_mse).map_err(Failure::output)?;
    }
    w.flush().map_err(Failure::output)?;

    let mut w = create(&out.join(DETECTOR_LOG))?;
    for ev in &report.detector {
        serde_json::to_writer(&mut w, ev).map_err(Failure::output)?;
        writeln!(w).map_err(Failure::output)?;
    }
    w.flush().map_err(Failure::output)?;

    let mut w = create(&out.join(ALIGNMENT))?;
    for curve in &report.alignment {
        serde_json::to_writer(&mut w, curve).map_err(Failure::output)?;
        writeln!(w).map_err(Failure::output)?;
    }
    w.flush().map_err(Failure::output)?;

    let inventory: Vec<_> = model
        .inventory()
        .into_iter()
        .map(|(layer, info)| serde_json::json!({ "layer": layer, "expert": info }))
        .collect();
    write_json(&out.join(EXPERTS), &inventory)?;

    if dump_predictions || dump_routes {
        let (origins, preds, truths) =
            predict_split(&model, &ds, Split::Test).map_err(|e| Failure::from_core(e, DATA))?;
        if dump_predictions {
            outputs.push(PREDICTIONS.into());
            let mut w = create(&out.join(PREDICTIONS))?;
            writeln!(w, "origin,step,variable,truth,prediction").map_err(Failure::output)?;
            for ((o, p), y) in origins.iter().zip(&preds).zip(&truths) {
                for t in 0..p.rows() {
                    for v in 0..p.cols() {
                        writeln!(
                            w,
                            "{o},{},{},{},{}",
                            t + 1,
                            ds.columns[v],
                            ds.denormalize(y.get(t, v), v),
                            ds.denormalize(p.get(t, v), v)
                        )
                        .map_err(Failure::output)?;
                    }
                }
            }
            w.flush().map_err(Failure::output)?;
        }
        if dump_routes {
            let mut per_layer: Vec<Vec<_>> = vec![Vec::new(); model.layers().len()];
            for &o in &origins {
                let win = ds.window_at(o, cfg.lookback, cfg.horizon);
                let (_, gates) = model
                    .predict_with_gates(&win.input, o)
                    .map_err(|e| Failure::from_core(e, DATA))?;
                for (l, g) in gates.into_iter().enumerate() {
                    per_layer[l].push(g);
                }
            }
            let n = cfg.n_patches().map_err(|e| Failure::from_core(e, DATA))?;
            for (l, gates) in per_layer.iter().enumerate() {
                let name = format!("routes_layer{l}.csv");
                let mut w = create(&out.join(&name))?;
                write_routing_trace(&mut w, gates, &model.layers()[l].pool.ids(), n).map_err(Failure::output)?;
                w.flush().map_err(Failure::output)?;
                outputs.push(name);
            }
        }
    }

    let data_abs = fs::canonicalize(&data_path).unwrap_or(data_path);
    let manifest = RunManifest {
        data: data_abs,
        input_hash: input_hash(&data_sha, &cfg),
        data_sha256: data_sha,
        seed: cfg.seed,
        dump_predictions,
        dump_routes,
        config: cfg,
        outputs,
    };
    write_json(&out.join(MANIFEST), &manifest)?;
    print_json(&metrics)
}

pub fn eval(checkpoint: &Path, data: &Path, split: Split) -> CliResult<()> {
    let model = load_checkpoint(checkpoint).map_err(|e| match e {
        driftmoe::Error::Io(io) => Failure::checkpoint(format!("cannot read {}: {io}", checkpoint.display())),
        other => Failure::checkpoint(other.to_string()),
    })?;
    let (ds, _) = load_data(data, model.config().split)?;
    let m = evaluate(&model, &ds, split).map_err(|e| Failure::from_core(e, DATA))?;
    print_json(&metrics_json(&ds, &model, &m))
}

pub fn detect(args: &DetectArgs) -> CliResult<()> {
    let mut cfg = DetectorConfig::default();
    if let Some(x) = args.lambda {
        cfg.lambda = x;
    }
    if let Some(x) = args.ref_size {
        cfg.ref_size = x;
    }
    if let Some(x) = args.cur_size {
        cfg.cur_size = x;
    }
    if let Some(x) = args.history {
        cfg.history = x;
    }
    if let Some(x) = args.min_fill {
        cfg.min_fill = x;
    }
    if let Some(p) = args.on_drift {
        cfg.on_drift = p.into();
    }
    cfg.validate().map_err(|e| Failure::config(e.to_string()))?;
    let (ds, _) = load_data(&args.data, SplitSpec::default())?;
    let rows = ds.normalized_block(0..ds.len());
    let (evals, _) = scan(&rows, &cfg).map_err(|e| Failure::from_core(e, DATA))?;
    let mut out = BufWriter::new(std::io::stdout().lock());
    for ev in &evals {
        serde_json::to_writer(&mut out, ev).map_err(Failure::output)?;
        writeln!(out).map_err(Failure::output)?;
    }
    out.flush().map_err(Failure::output)
}

/// Rows of numbers, one residual series per row. A leading row that does
/// not parse is taken as a header.
fn read_residuals(path: &Path) -> CliResult<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Failure::data(format!("cannot read {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Failure::data(format!("row {}: {e}", i + 1)))?;
        let parsed: Result<Vec<f64>, _> = rec.iter().map(|c| c.trim().parse::<f64>()).collect();
        match parsed {
            Ok(v) if v.iter().all(|x| x.is_finite()) => rows.push(v),
            Ok(_) => return Err(Failure::data(format!("row {}: non-finite value", i + 1))),
            Err(_) if i == 0 => {}
            Err(e) => return Err(Failure::data(format!("row {}: {e}", i + 1))),
        }
    }
    if rows.is_empty() {
        return Err(Failure::data(format!("{} holds no residual rows", path.display())));
    }
    Ok(rows)
}

pub fn profile(path: &Path) -> CliResult<()> {
    let rows = read_residuals(path)?;
    let report = profile_residuals(&rows).map_err(|e| Failure::data(e.to_string()))?;
    print_json(&report)
}
