use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use edgedis::data::{generate_synthetic, load_dataset, save_dataset, DatasetBundle, SynthSpec, FACTORS_FILE};
use edgedis::data::{EDGES_FILE, META_FILE, NODES_FILE};
use edgedis::eval::{
    channel_correlation, compute_metrics, disentanglement_auc, layer_channels, render_heatmap, write_auc_csv,
    write_correlation_csv, write_metrics_csv, MetricsReport, ValueSource,
};
use edgedis::model::{
    load_checkpoint, save_checkpoint, train, write_history_csv, DisGnnModel, EpochRecord, PreparedGraph, TrainConfig,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{parse_overrides, read_json, resolve};

pub const CHECKPOINT: &str = "model.ckpt";
pub const HISTORY: &str = "history.csv";
pub const MANIFEST: &str = "manifest.json";

const EXIT_INPUT: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

pub fn version() -> String {
    option_env!("EDGEDIS_GIT_DESCRIBE")
        .map(String::from)
        .unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")))
}

/// 3 when the chain holds a numerical failure, 2 for anything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err
        .chain()
        .any(|e| e.downcast_ref::<edgedis::Error>().is_some_and(|e| e.is_numerical()));
    if numerical {
        EXIT_NUMERICAL
    } else {
        EXIT_INPUT
    }
}

/// SHA-256 over the dataset files in a fixed order, each prefixed by its
/// name and length.
pub fn dataset_hash(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for name in [META_FILE, NODES_FILE, EDGES_FILE, FACTORS_FILE] {
        let path = dir.join(name);
        if name == FACTORS_FILE && !path.exists() {
            continue;
        }
        let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

fn load(dir: &Path) -> Result<DatasetBundle> {
    let (bundle, stats) = load_dataset(dir)?;
    if stats.duplicate_edges + stats.self_edges > 0 {
        log::info!(
            "dropped {} duplicate and {} self edges",
            stats.duplicate_edges,
            stats.self_edges
        );
    }
    Ok(bundle)
}

pub fn generate(spec: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut spec: SynthSpec = match spec {
        Some(p) => serde_json::from_value(read_json(p)?).with_context(|| format!("invalid spec {}", p.display()))?,
        None => SynthSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let (bundle, stats) = generate_synthetic(&spec)?;
    save_dataset(&bundle, out)?;
    let s = bundle.summary();
    println!(
        "nodes {} edges {} homo {} hetero {} unknown {} collisions {}",
        s.nodes, s.edges, s.homo_edges, s.hetero_edges, s.unknown_edges, stats.collisions
    );
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub dataset: DatasetRef,
    pub best_epoch: Option<usize>,
    pub converged: bool,
    pub history: Vec<EpochRecord>,
    /// Test-mask metrics of the selected checkpoint.
    pub metrics: Option<MetricsReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub best_val_acc: f64,
    pub metrics: MetricsReport,
}

fn test_metrics(model: &DisGnnModel, pg: &PreparedGraph) -> Result<MetricsReport> {
    let pred = model.predict(pg)?;
    Ok(compute_metrics(&pred, pg.graph.labels(), &pg.graph.masks.test, model.num_classes)?)
}

/// Trains on `bundle` and writes checkpoint, history and manifest to `out`,
/// also when training aborts.
pub fn train_run(bundle: &DatasetBundle, dataset: DatasetRef, cfg: &TrainConfig, out: &Path) -> Result<RunResult> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let pg = PreparedGraph::new(&bundle.graph, cfg)?;
    let mut model = DisGnnModel::new(cfg, bundle.graph.feature_dim(), bundle.meta.num_classes)?;
    let mut log_epoch = |r: &EpochRecord| {
        log::info!(
            "epoch {} L_full {:.4} L_node {:.4} val {:.4}",
            r.epoch,
            r.report.full,
            r.report.node,
            r.val_acc
        )
    };
    let result = train(&mut model, &pg, &mut log_epoch);
    save_checkpoint(&model, &out.join(CHECKPOINT))?;
    let mut manifest = Manifest {
        version: version(),
        seed: cfg.seed,
        config: cfg.clone(),
        dataset,
        best_epoch: None,
        converged: false,
        history: Vec::new(),
        metrics: None,
        error: None,
    };
    let outcome = match result {
        Ok(o) => o,
        Err(e) => {
            write_history_csv(&e.history, &out.join(HISTORY))?;
            manifest.best_epoch = e.best_epoch;
            manifest.history = e.history;
            manifest.error = Some(e.source.to_string());
            write_manifest(&manifest, out)?;
            return Err(anyhow::Error::new(e.source).context("training diverged; best checkpoint kept"));
        }
    };
    write_history_csv(&outcome.history, &out.join(HISTORY))?;
    let metrics = test_metrics(&model, &pg)?;
    manifest.best_epoch = Some(outcome.best_epoch);
    manifest.converged = outcome.converged;
    manifest.history = outcome.history;
    manifest.metrics = Some(metrics.clone());
    write_manifest(&manifest, out)?;
    Ok(RunResult {
        best_val_acc: outcome.best_val_acc,
        metrics,
    })
}

fn write_manifest(m: &Manifest, out: &Path) -> Result<()> {
    let path = out.join(MANIFEST);
    std::fs::write(&path, serde_json::to_string_pretty(m)? + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn train_cmd(
    data: &Path,
    out: &Path,
    config: Option<&Path>,
    manifest: Option<&Path>,
    overrides: &[String],
) -> Result<()> {
    let overrides = parse_overrides(overrides)?;
    let sha256 = dataset_hash(data)?;
    let file = match (config, manifest) {
        (Some(p), _) => Some(read_json(p)?),
        (None, Some(p)) => {
            let m: Manifest = serde_json::from_value(read_json(p)?).context("invalid manifest")?;
            if m.dataset.sha256 != sha256 {
                bail!(
                    "dataset {} hashes to {sha256}, manifest recorded {}",
                    data.display(),
                    m.dataset.sha256
                );
            }
            Some(serde_json::to_value(m.config)?)
        }
        (None, None) => None,
    };
    let cfg = resolve(file.as_ref(), &overrides)?;
    let bundle = load(data)?;
    let dataset = DatasetRef {
        path: data.display().to_string(),
        sha256,
    };
    let r = train_run(&bundle, dataset, &cfg, out)?;
    println!(
        "best val acc {:.4} test acc {:.4} macro-F {:.4}",
        r.best_val_acc, r.metrics.accuracy, r.metrics.macro_f1
    );
    Ok(())
}

/// Loads a checkpoint and prepares `data` with the split it was trained on.
fn restore(checkpoint: &Path, data: &Path) -> Result<(DisGnnModel, PreparedGraph, DatasetBundle)> {
    let model = load_checkpoint(checkpoint)?;
    let bundle = load(data)?;
    let g = &bundle.graph;
    if g.feature_dim() != model.d_in || bundle.meta.num_classes != model.num_classes {
        bail!(
            "checkpoint expects {} features and {} classes, dataset has {} and {}",
            model.d_in,
            model.num_classes,
            g.feature_dim(),
            bundle.meta.num_classes
        );
    }
    let pg = PreparedGraph::new(g, &model.config)?;
    Ok((model, pg, bundle))
}

pub fn eval_cmd(checkpoint: &Path, data: &Path, out: Option<&Path>) -> Result<()> {
    let (model, pg, _) = restore(checkpoint, data)?;
    let m = test_metrics(&model, &pg)?;
    println!("accuracy {:.4} macro-F {:.4} evaluated {}", m.accuracy, m.macro_f1, m.evaluated);
    for c in m.per_class.iter().filter(|c| c.counted) {
        println!(
            "  class {} precision {:.4} recall {:.4} f1 {:.4} support {}",
            c.class, c.precision, c.recall, c.f1, c.support
        );
    }
    if let Some(path) = out {
        write_metrics_csv(&m, path)?;
    }
    Ok(())
}

pub fn analyze_cmd(checkpoint: &Path, data: &Path, layer: usize, source: ValueSource, out: &Path) -> Result<()> {
    let (model, pg, bundle) = restore(checkpoint, data)?;
    if layer >= model.layers.len() {
        bail!("layer {layer} out of range, the model has {} layers", model.layers.len());
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let lc = layer_channels(&model, &pg, layer)?;
    let corr = channel_correlation(lc.values(source))?;
    write_correlation_csv(&corr, &out.join("correlation.csv"))?;
    render_heatmap(&corr, &mut std::io::stdout().lock())?;
    println!("within-half minus cross-half correlation {:.4}", corr.half_block_gap());
    if let Some(factors) = bundle.directed_factors(&pg.graph) {
        let f: Vec<Option<usize>> = lc.edge_ids.iter().map(|&e| factors[e]).collect();
        let mut relations: Vec<usize> = f.iter().flatten().copied().collect();
        relations.sort_unstable();
        relations.dedup();
        let report = disentanglement_auc(&lc.probs, &f, &relations)?;
        write_auc_csv(&report, &out.join("auc.csv"))?;
        for m in &report.matching {
            println!("relation {} -> channel {} auc {:.4}", m.relation, m.channel, m.auc);
        }
        println!("mean matched auc {:.4}", report.mean_matched_auc());
    }
    Ok(())
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridSpec {
    lambda1: Option<Vec<f64>>,
    lambda2: Option<Vec<f64>>,
    lambda3: Option<Vec<f64>>,
}

/// Cartesian product in lambda1-major order; a missing axis keeps the
/// base value.
fn grid_cells(spec: &GridSpec, base: &TrainConfig) -> Vec<[f64; 3]> {
    let axis = |v: &Option<Vec<f64>>, d: f64| v.clone().unwrap_or_else(|| vec![d]);
    let (a, b, c) = (
        axis(&spec.lambda1, base.lambda1),
        axis(&spec.lambda2, base.lambda2),
        axis(&spec.lambda3, base.lambda3),
    );
    let mut cells = Vec::new();
    for &x in &a {
        for &y in &b {
            for &z in &c {
                cells.push([x, y, z]);
            }
        }
    }
    cells
}

/// Index of the first row with the highest validation accuracy.
pub fn best_row(vals: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in vals.iter().enumerate() {
        if let Some(v) = *v {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
    }
    best.map(|(i, _)| i)
}

pub fn grid_cmd(
    data: &Path,
    grid: &Path,
    out: &Path,
    config: Option<&Path>,
    parallel: usize,
    overrides: &[String],
) -> Result<()> {
    let overrides = parse_overrides(overrides)?;
    let file = config.map(read_json).transpose()?;
    let base = resolve(file.as_ref(), &overrides)?;
    let spec: GridSpec = serde_json::from_value(read_json(grid)?).context("invalid grid file")?;
    let cells = grid_cells(&spec, &base);
    if cells.is_empty() {
        bail!("grid has no cells");
    }
    let bundle = load(data)?;
    let dataset = DatasetRef {
        path: data.display().to_string(),
        sha256: dataset_hash(data)?,
    };
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let results: Mutex<Vec<Option<Result<RunResult, String>>>> = Mutex::new(vec![None; cells.len()]);
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(&[l1, l2, l3]) = cells.get(i) else {
            break;
        };
        let cfg = TrainConfig {
            lambda1: l1,
            lambda2: l2,
            lambda3: l3,
            ..base.clone()
        };
        let dir = out.join(format!("cell-{i:03}"));
        let r = cfg
            .validate()
            .map_err(anyhow::Error::from)
            .and_then(|_| train_run(&bundle, dataset.clone(), &cfg, &dir))
            .map_err(|e| format!("{e:#}"));
        match &r {
            Ok(r) => log::info!("cell {i} ({l1}, {l2}, {l3}): val {:.4}", r.best_val_acc),
            Err(e) => log::warn!("cell {i} ({l1}, {l2}, {l3}) failed: {e}"),
        }
        results.lock().expect("no worker panics while holding the lock")[i] = Some(r);
    };
    std::thread::scope(|s| {
        for _ in 0..parallel.clamp(1, cells.len()) {
            s.spawn(worker);
        }
    });
    let results: Vec<Result<RunResult, String>> = results
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect();

    let path = out.join("results.csv");
    let mut text = String::from("cell,lambda1,lambda2,lambda3,val_acc,test_acc,status\n");
    for (i, (cell, r)) in cells.iter().zip(&results).enumerate() {
        let (val, test, status) = match r {
            Ok(r) => (r.best_val_acc.to_string(), r.metrics.accuracy.to_string(), "ok".to_string()),
            Err(e) => (String::new(), String::new(), format!("failed: {}", e.replace(['\n', ','], " "))),
        };
        text += &format!("{i},{},{},{},{val},{test},{status}\n", cell[0], cell[1], cell[2]);
    }
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;

    let vals: Vec<Option<f64>> = results.iter().map(|r| r.as_ref().ok().map(|r| r.best_val_acc)).collect();
    let failed = results.iter().filter(|r| r.is_err()).count();
    match best_row(&vals) {
        Some(i) => {
            let r = results[i].as_ref().expect("best row succeeded");
            println!(
                "best cell {i} lambdas {:?}: val {:.4} test {:.4}",
                cells[i], r.best_val_acc, r.metrics.accuracy
            );
        }
        None => println!("no cell finished"),
    }
    if failed > 0 {
        println!("{failed} of {} cells failed", cells.len());
    }
    Ok(())
}
