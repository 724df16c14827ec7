use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use prunenet::analyzer::{measure_speedup, PruneReport};
use prunenet::data::{
    load_checkpoint, save_checkpoint, stream_rng, Checkpoint, CheckpointKind, Dataset, DatasetFormat, Normalization,
    Split, Stream, TrainingMeta,
};
use prunenet::model::{build_main_network, ParameterSet};
use prunenet::rewriter::{plan_prune, probe_batches, rewrite, verify_equivalence};
use prunenet::trainer::{
    evaluate, fraction_below, run_pruning, train_classifier, EpochMetrics, Evaluation, TrainState,
};
use prunenet::{Error, Result};
use serde_json::{json, Value};

use crate::config::{ReportFormat, RunConfig};

/// Largest logit deviation accepted between masked and rewritten networks.
pub const MAX_REWRITE_DEVIATION: f64 = 1e-6;

pub const BASELINE_FILE: &str = "baseline.ckpt";
pub const PRUNING_FILE: &str = "pruning.ckpt";
pub const COMPACT_FILE: &str = "compact.ckpt";
pub const FINETUNED_FILE: &str = "finetuned.ckpt";

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn prepare_out(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out).map_err(|e| io_err(&cfg.out, e))?;
    Ok(&cfg.out)
}

fn input_path(explicit: Option<&Path>, cfg: &RunConfig, default: &str) -> Result<PathBuf> {
    let p = explicit.map_or_else(|| cfg.out.join(default), Path::to_path_buf);
    if !p.is_file() {
        return Err(Error::Config(format!("input checkpoint {} does not exist", p.display())));
    }
    Ok(p)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// JSON-lines metrics log; every line carries the run seed.
struct MetricsLog {
    path: PathBuf,
    file: BufWriter<File>,
    seed: u64,
}

impl MetricsLog {
    fn create(path: PathBuf, seed: u64) -> Result<Self> {
        let file = File::create(&path).map_err(|e| io_err(&path, e))?;
        Ok(MetricsLog {
            path,
            file: BufWriter::new(file),
            seed,
        })
    }

    fn record(&mut self, m: &EpochMetrics) -> Result<()> {
        let mut v = serde_json::to_value(m)?;
        v["seed"] = json!(self.seed);
        println!("{v}");
        writeln!(self.file, "{v}").map_err(|e| io_err(&self.path, e))
    }

    fn finish(mut self) -> Result<()> {
        self.file.flush().map_err(|e| io_err(&self.path, e))
    }
}

/// Runs `f` with a logger, keeping the first logging error.
fn with_log<T>(
    log: &mut MetricsLog,
    f: impl FnOnce(&mut dyn FnMut(&EpochMetrics)) -> Result<T>,
) -> Result<T> {
    let mut first_err = None;
    let out = f(&mut |m| {
        if let Err(e) = log.record(m) {
            first_err.get_or_insert(e);
        }
    })?;
    match first_err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

struct Data {
    format: DatasetFormat,
    train: Option<Dataset>,
    test: Option<Dataset>,
}

fn load_data(cfg: &RunConfig, norm: Option<&Normalization>, train: bool, test: bool) -> Result<Data> {
    let dir = cfg.data_dir()?;
    let format = DatasetFormat::detect(dir)?;
    let limit = |d: Dataset, n: Option<usize>, split| match n {
        Some(n) => d.take(n, split),
        None => d,
    };
    let train_set = if train {
        let d = format.load(dir, Split::Train, norm)?;
        Some(limit(d, cfg.train_limit, Split::Train))
    } else {
        None
    };
    // The test split always uses training statistics.
    let test_norm = norm.or(train_set.as_ref().map(Dataset::normalization));
    let test_set = if test {
        let norm = test_norm.ok_or_else(|| Error::Config("test split needs normalization statistics".into()))?;
        let d = format.load(dir, Split::Test, Some(norm))?;
        Some(limit(d, cfg.test_limit, Split::Test))
    } else {
        None
    };
    Ok(Data {
        format,
        train: train_set,
        test: test_set,
    })
}

fn require_norm(ckpt: &Checkpoint) -> Result<&Normalization> {
    ckpt.normalization
        .as_ref()
        .ok_or_else(|| Error::Config("checkpoint has no normalization statistics".into()))
}

fn meta(cfg: &RunConfig, epoch: usize, metrics: Value) -> Result<TrainingMeta> {
    Ok(TrainingMeta {
        seed: cfg.seed,
        epoch,
        config: Some(serde_json::to_value(cfg)?),
        metrics: Some(metrics),
        sigmoid_scale: None,
    })
}

fn eval_json(e: &Evaluation) -> Value {
    json!({"test_accuracy": e.accuracy, "test_loss": e.loss, "test_count": e.count})
}

fn print_summary(command: &str, seed: u64, mut v: Value) {
    v["command"] = json!(command);
    v["seed"] = json!(seed);
    println!("{v}");
}

pub fn pretrain(cfg: &RunConfig) -> Result<Value> {
    let data = load_data(cfg, None, true, true)?;
    let (train, test) = (data.train.unwrap(), data.test.unwrap());
    let out = prepare_out(cfg)?;
    let spec = cfg.arch.spec(data.format.input_shape(), train.num_classes());
    let mut rng = stream_rng(cfg.seed, Stream::ParamInit, 0);
    let params = ParameterSet::init_main(&spec, &mut rng)?;
    let mut net = build_main_network(spec.clone(), params)?;
    let mut log = MetricsLog::create(out.join("pretrain_metrics.jsonl"), cfg.seed)?;
    let hist = with_log(&mut log, |cb| train_classifier(&mut net, &train, &cfg.pretrain, cb))?;
    log.finish()?;
    let eval = evaluate(&net, &test, None, cfg.eval_batch_size)?;
    let mut metrics = eval_json(&eval);
    metrics["train_accuracy"] = json!(hist.last().map(|m| m.accuracy));
    let (spec, params) = net.into_parts();
    let mut ckpt = Checkpoint::new(CheckpointKind::Baseline, spec, params, meta(cfg, cfg.pretrain.epochs, metrics.clone())?);
    ckpt.normalization = Some(train.normalization().clone());
    save_checkpoint(&ckpt, out.join(BASELINE_FILE))?;
    print_summary("pretrain", cfg.seed, metrics.clone());
    Ok(metrics)
}

pub fn prune(cfg: &RunConfig, input: Option<&Path>) -> Result<Value> {
    let path = input_path(input, cfg, BASELINE_FILE)?;
    let base = load_checkpoint(&path)?;
    base.expect_kind(&[CheckpointKind::Baseline, CheckpointKind::Finetuned])?;
    let norm = require_norm(&base)?.clone();
    let data = load_data(cfg, Some(&norm), true, false)?;
    let train = data.train.unwrap();
    let out = prepare_out(cfg)?;
    let main = build_main_network(base.spec.clone(), base.main.clone())?;
    let mut state = TrainState::new(main, &cfg.prune)?;
    let mut log = MetricsLog::create(out.join("prune_metrics.jsonl"), cfg.seed)?;
    let mask = with_log(&mut log, |cb| run_pruning(&mut state, &train, &cfg.prune, cb))?;
    log.finish()?;
    let plan = plan_prune(
        &mask,
        &base.spec,
        &state.groups,
        cfg.prune.threshold,
        cfg.prune.min_filters_per_layer,
    )?;
    let projected = PruneReport::from_specs(&base.spec, &plan.pruned_spec(&base.spec)?)?;
    let metrics = json!({
        "fraction_below_threshold": fraction_below(&mask, cfg.prune.threshold),
        "projected_pruned_flops_percent": projected.pruned_flops_percent,
        "kept_filters": plan.kept_counts(),
        "final_sigmoid_scale": state.scale,
    });
    let (spec, main_params) = state.main.clone().into_parts();
    let mut m = meta(cfg, state.epoch, metrics.clone())?;
    m.sigmoid_scale = Some(state.scale);
    let mut ckpt = Checkpoint::new(CheckpointKind::Pruning, spec, main_params, m);
    ckpt.pruner = Some(state.pruner.params().clone());
    ckpt.mask = Some(mask);
    ckpt.normalization = Some(norm);
    save_checkpoint(&ckpt, out.join(PRUNING_FILE))?;
    print_summary("prune", cfg.seed, metrics.clone());
    Ok(metrics)
}

pub fn rewrite_cmd(cfg: &RunConfig, input: Option<&Path>) -> Result<PruneReport> {
    let path = input_path(input, cfg, PRUNING_FILE)?;
    let ck = load_checkpoint(&path)?;
    ck.expect_kind(&[CheckpointKind::Pruning])?;
    let mask = ck
        .mask
        .as_ref()
        .ok_or_else(|| Error::Mask("pruning checkpoint has no mask".into()))?;
    let out = prepare_out(cfg)?;
    let groups = ck.spec.mask_groups();
    let plan = plan_prune(mask, &ck.spec, &groups, cfg.prune.threshold, cfg.prune.min_filters_per_layer)?;
    let original = build_main_network(ck.spec.clone(), ck.main.clone())?;
    let compact = rewrite(&original, &plan)?;
    let probes = probe_batches(ck.spec.input, cfg.probe_batches, 8, cfg.seed);
    let deviation = verify_equivalence(&original, &plan.binary_mask(&ck.spec), &compact, &probes)?;
    if !(deviation <= MAX_REWRITE_DEVIATION) {
        return Err(Error::Mask(format!(
            "rewritten network deviates from the masked network by {deviation:e} (limit {MAX_REWRITE_DEVIATION:e})"
        )));
    }
    let mut report = PruneReport::from_specs(&ck.spec, compact.spec())?;
    report.max_deviation = Some(deviation);
    let report_json = serde_json::to_value(&report)?;
    let (spec, params) = compact.into_parts();
    let mut out_ck = Checkpoint::new(CheckpointKind::Compact, spec, params, meta(cfg, 0, report_json.clone())?);
    out_ck.original_spec = Some(ck.spec.clone());
    out_ck.plan = Some(plan);
    out_ck.normalization = ck.normalization.clone();
    save_checkpoint(&out_ck, out.join(COMPACT_FILE))?;
    let mut with_seed = report_json;
    with_seed["seed"] = json!(cfg.seed);
    write_text(&out.join("report.json"), &serde_json::to_string_pretty(&with_seed)?)?;
    write_text(&out.join("report.txt"), &report.render_table())?;
    print!("{}", report.render_table());
    print_summary(
        "rewrite",
        cfg.seed,
        json!({"pruned_flops_percent": report.pruned_flops_percent, "max_deviation": deviation}),
    );
    Ok(report)
}

pub fn finetune(cfg: &RunConfig, input: Option<&Path>) -> Result<Value> {
    let path = input_path(input, cfg, COMPACT_FILE)?;
    let ck = load_checkpoint(&path)?;
    ck.expect_kind(&[CheckpointKind::Compact, CheckpointKind::Finetuned])?;
    let norm = require_norm(&ck)?.clone();
    let data = load_data(cfg, Some(&norm), true, true)?;
    let (train, test) = (data.train.unwrap(), data.test.unwrap());
    let out = prepare_out(cfg)?;
    let mut net = build_main_network(ck.spec.clone(), ck.main.clone())?;
    let mut log = MetricsLog::create(out.join("finetune_metrics.jsonl"), cfg.seed)?;
    let hist = with_log(&mut log, |cb| train_classifier(&mut net, &train, &cfg.finetune, cb))?;
    log.finish()?;
    let eval = evaluate(&net, &test, None, cfg.eval_batch_size)?;
    let mut metrics = eval_json(&eval);
    metrics["train_accuracy"] = json!(hist.last().map(|m| m.accuracy));
    let (spec, params) = net.into_parts();
    let mut out_ck = Checkpoint::new(CheckpointKind::Finetuned, spec, params, meta(cfg, cfg.finetune.epochs, metrics.clone())?);
    out_ck.original_spec = ck.original_spec.clone();
    out_ck.plan = ck.plan.clone();
    out_ck.normalization = Some(norm);
    save_checkpoint(&out_ck, out.join(FINETUNED_FILE))?;
    print_summary("finetune", cfg.seed, metrics.clone());
    Ok(metrics)
}

pub fn eval(cfg: &RunConfig, input: Option<&Path>) -> Result<Value> {
    let path = input.ok_or_else(|| Error::Config("eval needs --input".into()))?;
    let path = input_path(Some(path), cfg, "")?;
    let ck = load_checkpoint(&path)?;
    let norm = require_norm(&ck)?.clone();
    let data = load_data(cfg, Some(&norm), false, true)?;
    let test = data.test.unwrap();
    let net = build_main_network(ck.spec.clone(), ck.main.clone())?;
    // A pruning checkpoint is evaluated with its mask applied.
    let mask = match ck.kind {
        CheckpointKind::Pruning => ck.mask.as_deref(),
        _ => None,
    };
    let e = evaluate(&net, &test, mask, cfg.eval_batch_size)?;
    let mut v = eval_json(&e);
    v["kind"] = json!(ck.kind);
    print_summary("eval", cfg.seed, v.clone());
    Ok(v)
}

pub fn analyze(cfg: &RunConfig, input: Option<&Path>) -> Result<PruneReport> {
    let path = input.ok_or_else(|| Error::Config("analyze needs --input".into()))?;
    let path = input_path(Some(path), cfg, "")?;
    let ck = load_checkpoint(&path)?;
    let before = ck.original_spec.clone().unwrap_or_else(|| ck.spec.clone());
    let mut report = PruneReport::from_specs(&before, &ck.spec)?;
    if cfg.analyze.timing {
        let mut rng = stream_rng(cfg.seed, Stream::ParamInit, 1);
        let a = build_main_network(before.clone(), ParameterSet::init_main(&before, &mut rng)?)?;
        let b = build_main_network(ck.spec.clone(), ParameterSet::init_main(&ck.spec, &mut rng)?)?;
        report.timing = Some(measure_speedup(&a, &b, &cfg.analyze.batch_sizes, cfg.analyze.repeats)?);
    }
    let out = prepare_out(cfg)?;
    let mut v = serde_json::to_value(&report)?;
    v["seed"] = json!(cfg.seed);
    match cfg.analyze.format {
        ReportFormat::Table => print!("{}", report.render_table()),
        ReportFormat::Json => println!("{v}"),
    }
    write_text(&out.join("analysis.json"), &serde_json::to_string_pretty(&v)?)?;
    Ok(report)
}
