use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use hgch::autodiff::{GradCheckReport, Primitive};
use hgch::hcg::{fingerprint, prepare as prepare_dataset, ProcessedDataset};
use hgch::model::{export_embeddings, Checkpoint, Model, Stage};
use hgch::training::{evaluate_params, model_grad_check, EvalSplit, ModelGradCheck, Trainer};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{Overrides, RunConfig};
use crate::{Failure, GradCheckArgs};

pub const CONFIG_FILE: &str = "config.toml";
pub const RUN_FILE: &str = "run.json";
pub const LOG_FILE: &str = "epochs.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::runtime(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

pub fn code_version() -> String {
    format!("hgch {}", env!("CARGO_PKG_VERSION"))
}

/// Content hash of the version string in git's blob framing.
pub fn code_hash() -> String {
    let v = code_version();
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", v.len()));
    h.update(v.as_bytes());
    hex::encode(h.finalize())
}

pub fn prepare(manifest: &Path, out: &Path) -> Result<(), Failure> {
    let stats = prepare_dataset(manifest, out)?;
    print!("{}", json(&stats));
    Ok(())
}

#[derive(Serialize)]
struct RunRecord {
    code_version: String,
    code_hash: String,
    dataset_dir: PathBuf,
    dataset_fingerprint: String,
    param_count: usize,
    best_epoch: usize,
    epochs_run: usize,
    stopped_early: bool,
    metrics: BTreeMap<String, f64>,
}

pub fn train(config: Option<&Path>, flags: &Overrides) -> Result<(), Failure> {
    let cfg = RunConfig::resolve(config, flags)?;
    let data = ProcessedDataset::read(&cfg.data.dir)?;
    let fp = fingerprint(&cfg.data.dir)?;
    let trainer = Trainer::new(&data.split, cfg.model.clone(), cfg.train.clone())?;

    let out = &cfg.run.out;
    write_text(&out.join(CONFIG_FILE), &cfg.to_toml())?;
    let log_path = out.join(LOG_FILE);
    let mut log = BufWriter::new(File::create(&log_path).map_err(io_err(&log_path))?);
    let mut log_err = None;
    let outcome = trainer.run(|l| {
        let line = serde_json::to_string(l).expect("epoch log serializes");
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            log_err.get_or_insert(e);
        }
        log::info!("{line}");
    })?;
    if let Some(e) = log_err {
        return Err(io_err(&log_path)(e));
    }

    let mut metrics = BTreeMap::new();
    metrics.insert("val_ndcg@10".to_owned(), outcome.best_val_ndcg);
    metrics.insert("val_recall@10".to_owned(), outcome.best_val_recall);
    let test = evaluate_params(&data.split, &outcome.model, &outcome.params, EvalSplit::Test, &cfg.eval.ks)?;
    for row in &test.rows {
        metrics.insert(format!("test_ndcg@{}/{}", row.k, row.stratum), row.ndcg);
        metrics.insert(format!("test_recall@{}/{}", row.k, row.stratum), row.recall);
    }
    let ck = Checkpoint::new(
        cfg.model.clone(),
        outcome.params.clone(),
        fp.clone(),
        outcome.best_epoch,
        metrics.clone(),
    )?;
    ck.save(&out.join(CHECKPOINT_FILE))?;
    write_report(&out.join("test"), &test)?;
    let record = RunRecord {
        code_version: code_version(),
        code_hash: code_hash(),
        dataset_dir: cfg.data.dir.clone(),
        dataset_fingerprint: fp,
        param_count: outcome.model.param_count(),
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.history.len(),
        stopped_early: outcome.stopped_early,
        metrics,
    };
    let text = json(&record);
    write_text(&out.join(RUN_FILE), &text)?;
    print!("{text}");
    Ok(())
}

fn write_report(dir: &Path, report: &hgch::eval::RankingReport) -> Result<(), Failure> {
    write_text(&dir.join("report.json"), &report.to_json())?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv).expect("in-memory write");
    write_text(&dir.join("report.csv"), &String::from_utf8_lossy(&csv))?;
    let mut per_user = Vec::new();
    report.write_per_user_csv(&mut per_user).expect("in-memory write");
    write_text(&dir.join("per_user.csv"), &String::from_utf8_lossy(&per_user))
}

/// Checkpoint verified against the dataset, plus the rebuilt model.
fn load(checkpoint: &Path, data_dir: &Path) -> Result<(Checkpoint, ProcessedDataset, Model), Failure> {
    let ck = Checkpoint::load(checkpoint)?;
    ck.verify_dataset(&fingerprint(data_dir)?)?;
    let data = ProcessedDataset::read(data_dir)?;
    let model = Model::new(&data.split.train_graph()?, ck.config.clone())?;
    model.check_params(&ck.params)?;
    Ok((ck, data, model))
}

pub fn eval(checkpoint: &Path, data_dir: &Path, split: EvalSplit, ks: &[usize], out: Option<&Path>) -> Result<(), Failure> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Failure::usage("--ks must be a non-empty list of values ≥ 1"));
    }
    let (ck, data, model) = load(checkpoint, data_dir)?;
    let report = evaluate_params(&data.split, &model, &ck.params, split, ks)?;
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("eval-{split}")),
    };
    write_report(&dir, &report)?;
    print!("{}", report.to_json());
    Ok(())
}

pub fn export(checkpoint: &Path, data_dir: &Path, out: &Path, stage: Stage) -> Result<(), Failure> {
    let (ck, data, model) = load(checkpoint, data_dir)?;
    let graph = data.split.train_graph()?;
    let mut buf = Vec::new();
    export_embeddings(&mut buf, &model, &graph, &data.ids, &ck.params, stage)?;
    write_text(out, &String::from_utf8_lossy(&buf))
}

fn parse_fault(name: &str) -> Result<Primitive, Failure> {
    Primitive::ALL.iter().copied().find(|p| p.name() == name).ok_or_else(|| {
        let names: Vec<&str> = Primitive::ALL.iter().map(|p| p.name()).collect();
        Failure::usage(format!("unknown primitive `{name}`; expected one of: {}", names.join(", ")))
    })
}

/// Human name of a flat parameter coordinate.
fn locate(model: &Model, graph: &hgch::hcg::Hcg, leaf: usize, index: usize) -> String {
    let d = model.config().dim;
    let (row, col) = (index / d, index % d);
    if leaf == 0 {
        return format!("embeddings[{row}][{col}]");
    }
    let (t, r) = model.gate_pairs()[leaf - 1];
    format!(
        "gate({}, {})[{row}][{col}]",
        graph.node_types()[t].name,
        graph.relation(r).kind.name
    )
}

pub fn grad_check(a: &GradCheckArgs) -> Result<(), Failure> {
    let mut model = match &a.config {
        Some(p) => RunConfig::load(p)?.model,
        None => Default::default(),
    };
    model.dim = a.dim;
    if let Some(l) = a.layers {
        model.layers = l;
    }
    if let Some(f) = a.fusion {
        model.fusion = f;
    }
    if let Some(g) = a.aggregation {
        model.aggregation = g;
    }
    model.validate()?;
    let mut setup = if a.float32 {
        ModelGradCheck::float32(model)
    } else {
        ModelGradCheck::float64(model)
    };
    setup.seed = a.seed;
    setup.fault = a.inject_fault.as_deref().map(parse_fault).transpose()?;
    let report: GradCheckReport = if a.float32 {
        model_grad_check::<f32>(&setup)?
    } else {
        model_grad_check::<f64>(&setup)?
    };
    print!("{}", json(&report));
    if report.passed {
        return Ok(());
    }
    let graph = hgch::synthetic::toy_graph();
    let m = Model::new(&graph, setup.model.clone())?;
    let worst = match &report.worst {
        Some(w) => format!(
            "worst coordinate {}: analytic {:.6e}, numeric {:.6e}",
            locate(&m, &graph, w.leaf, w.index),
            w.analytic,
            w.numeric
        ),
        None => "no coordinate recorded".into(),
    };
    Err(Failure::runtime(format!(
        "gradient check failed: max relative error {:.3e} > {:.0e}; {worst}",
        report.max_rel_err, report.tol
    )))
}
