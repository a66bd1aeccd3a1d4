//! Acceptance checks, one PASS/FAIL/SKIP line per criterion.
//!
//! `EDGEDIS_ACCEPTANCE_ONLY=1,2,7` restricts the run. With
//! `EDGEDIS_ACCEPTANCE_STRICT=1` any FAIL makes the process exit non-zero;
//! otherwise results are reported and the target succeeds.

mod common;

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::{fixture, full_loss_gradcheck, gradcheck, tiny_config};
use edgedis::autodiff::{Indices, Matrix, Tape, Tensor};
use edgedis::data::{generate_synthetic, import_linqs, load_dataset, DatasetBundle, SynthSpec};
use edgedis::disentangle::{Backend, ScorerKind};
use edgedis::eval::{channel_correlation, compute_metrics, disentanglement_auc, layer_channels};
use edgedis::graph::{partition_edges, Graph, LabelSource};
use edgedis::model::{train, write_history_csv, DisGnnModel, NoopObserver, PreparedGraph, TrainConfig};
use edgedis::ssl::{channel_difference_loss, edge_recovery_loss, node_subsample_for_channel_loss, sample_ssl_batch};
use edgedis::Result;

enum Verdict {
    Pass,
    Fail,
    Skip,
}

struct Outcome {
    verdict: Verdict,
    detail: String,
}

impl Outcome {
    fn check(ok: bool, detail: String) -> Self {
        let verdict = if ok { Verdict::Pass } else { Verdict::Fail };
        Self { verdict, detail }
    }
}

// ---------------------------------------------------------------- criterion 1

fn readout(tape: &mut Tape, t: Tensor) -> Result<Tensor> {
    let c = tape.constant(fixture(t.rows(), t.cols(), 99));
    let p = tape.mul(t, c)?;
    Ok(tape.sum(p))
}

fn idx(v: &[usize]) -> Indices {
    v.to_vec().into()
}

type OpCase = (&'static str, Vec<Matrix>, fn(&mut Tape, &[Tensor]) -> Result<Tensor>);

fn op_cases() -> Vec<OpCase> {
    vec![
        ("matmul", vec![fixture(3, 4, 1), fixture(4, 2, 2)], |t, x| {
            let y = t.matmul(x[0], x[1])?;
            readout(t, y)
        }),
        ("add", vec![fixture(3, 3, 3), fixture(3, 3, 4)], |t, x| {
            let y = t.add(x[0], x[1])?;
            readout(t, y)
        }),
        ("sub", vec![fixture(3, 3, 5), fixture(3, 3, 6)], |t, x| {
            let y = t.sub(x[0], x[1])?;
            readout(t, y)
        }),
        ("mul", vec![fixture(3, 3, 7), fixture(3, 3, 8)], |t, x| {
            let y = t.mul(x[0], x[1])?;
            readout(t, y)
        }),
        ("add_row", vec![fixture(4, 3, 9), fixture(1, 3, 10)], |t, x| {
            let y = t.add_row(x[0], x[1])?;
            readout(t, y)
        }),
        ("scale", vec![fixture(2, 3, 11)], |t, x| {
            let y = t.scale(x[0], -1.7);
            readout(t, y)
        }),
        ("leaky_relu", vec![fixture(4, 3, 12)], |t, x| {
            let y = t.leaky_relu(x[0], 0.2);
            readout(t, y)
        }),
        ("sigmoid", vec![fixture(4, 3, 13)], |t, x| {
            let y = t.sigmoid(x[0]);
            readout(t, y)
        }),
        ("powf", vec![fixture(3, 2, 14).map(|v| v.abs() + 0.5)], |t, x| {
            let y = t.powf(x[0], -0.5);
            readout(t, y)
        }),
        ("concat_cols", vec![fixture(3, 2, 15), fixture(3, 4, 16)], |t, x| {
            let y = t.concat_cols(x[0], x[1])?;
            readout(t, y)
        }),
        ("gather", vec![fixture(4, 3, 17)], |t, x| {
            let y = t.gather(x[0], idx(&[3, 0, 3, 1]))?;
            readout(t, y)
        }),
        ("segment_softmax", vec![fixture(7, 1, 18)], |t, x| {
            let y = t.segment_softmax(x[0], idx(&[0, 0, 1, 2, 2, 2, 0]))?;
            readout(t, y)
        }),
        ("segment_weighted_sum", vec![fixture(5, 1, 19), fixture(5, 3, 20)], |t, x| {
            let y = t.segment_weighted_sum(x[0], x[1], idx(&[2, 0, 2, 1, 0]), 4)?;
            readout(t, y)
        }),
        ("row_sum", vec![fixture(4, 3, 21)], |t, x| {
            let y = t.row_sum(x[0]);
            readout(t, y)
        }),
        ("sum", vec![fixture(4, 3, 22)], |t, x| Ok(t.sum(x[0]))),
        ("softmax_cross_entropy", vec![fixture(5, 3, 23)], |t, x| {
            t.softmax_cross_entropy(x[0], &[0, 2, 3, 2], &[1, 0, 2, 2])
        }),
        ("bce_with_logits", vec![fixture(5, 1, 24).map(|v| 3.0 * v)], |t, x| {
            t.bce_with_logits(x[0], &[1.0, 0.0, 0.0, 1.0, 1.0])
        }),
    ]
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, "");
    for (name, inputs, f) in op_cases() {
        let e = gradcheck(&inputs, f);
        if e > worst.0 {
            worst = (e, name);
        }
    }
    let mut variants = vec![("L_full mlp/attn", tiny_config())];
    for scorer in [ScorerKind::Go, ScorerKind::Dp] {
        variants.push(("L_full scorer", TrainConfig { scorer, ..tiny_config() }));
    }
    for backend in [Backend::Gcn, Backend::Sage] {
        variants.push(("L_full backend", TrainConfig { backend, ..tiny_config() }));
    }
    for (name, cfg) in variants {
        let e = full_loss_gradcheck(&cfg);
        if e > worst.0 {
            worst = (e, name);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::check(
        worst.0 < 1e-4 && secs < 60.0,
        format!("max rel err {:.2e} ({}), {secs:.1}s", worst.0, worst.1),
    )
}

// ---------------------------------------------------------------- criterion 2

fn criterion_sampling() -> Outcome {
    let mut checked = 0;
    let mut mismatches = Vec::new();
    for k in 0..50u64 {
        let spec = SynthSpec {
            nodes_per_class: 8 + (k as usize % 7) * 4,
            num_classes: 2 + (k as usize % 3),
            feature_dim: 2,
            seed: k,
            ..small_two_relation_spec(k)
        };
        let spec = SynthSpec {
            relations: two_relations(spec.num_classes, 1.5 + (k % 4) as f64, 1.0 + (k % 3) as f64),
            ..spec
        };
        let (b, _) = generate_synthetic(&spec).unwrap();
        let g = b.graph.add_self_loops();
        let n = g.num_nodes();
        let undirected: HashSet<(usize, usize)> =
            b.graph.edges().iter().filter(|(s, d)| s != d).map(|&(s, d)| (s.min(d), s.max(d))).collect();
        let a_plus = 2 * undirected.len();
        let a_minus = n * (n - 1) - a_plus;
        let p_e = [1.0, 0.5, 0.3, 0.8, 0.15][k as usize % 5];
        let part = partition_edges(&g, LabelSource::All).unwrap_or_default();
        let batch = sample_ssl_batch(&g, &part, p_e, Default::default(), k).unwrap();
        let want_p = (p_e * a_plus as f64).round() as usize;
        let want_n = ((p_e * a_minus as f64).round() as usize).min(3 * want_p);
        let r = &batch.recovery;
        let distinct: HashSet<_> = r.pairs.iter().collect();
        let edges = g.edge_set();
        let sound = r.edges.iter().all(|&e| g.edges()[e].0 != g.edges()[e].1)
            && r.pairs.iter().all(|&(u, v)| u != v && !edges.contains(&(u, v)))
            && distinct.len() == r.pairs.len();
        if r.positives() != want_p || r.negatives() != want_n || !sound {
            mismatches.push(format!("graph {k}: |E_p| {} vs {want_p}, |E_n| {} vs {want_n}", r.positives(), r.negatives()));
        }
        checked += 1;
    }
    Outcome::check(
        mismatches.is_empty(),
        format!("{checked} graphs, {} mismatches {}", mismatches.len(), mismatches.join("; ")),
    )
}

// ---------------------------------------------------------------- criterion 3

fn load_cora(dir: &Path) -> Result<DatasetBundle> {
    let content = dir.join("cora.content");
    if content.exists() {
        return Ok(import_linqs(&content, &dir.join("cora.cites"), "cora")?.0);
    }
    Ok(load_dataset(dir)?.0)
}

fn train_and_score(g: &Graph, num_classes: usize, cfg: &TrainConfig) -> (f64, f64) {
    let pg = PreparedGraph::new(g, cfg).unwrap();
    let mut m = DisGnnModel::new(cfg, g.feature_dim(), num_classes).unwrap();
    let out = train(&mut m, &pg, &mut NoopObserver).unwrap();
    let pred = m.predict(&pg).unwrap();
    let test = compute_metrics(&pred, pg.graph.labels(), &pg.graph.masks.test, num_classes).unwrap();
    (out.best_val_acc, test.accuracy)
}

fn criterion_cora() -> Outcome {
    let Some(dir) = std::env::var_os("EDGEDIS_CORA_DIR").map(PathBuf::from) else {
        return Outcome {
            verdict: Verdict::Skip,
            detail: "set EDGEDIS_CORA_DIR to a converted Cora directory or the LINQS release".into(),
        };
    };
    let bundle = match load_cora(&dir) {
        Ok(b) => b,
        Err(e) => return Outcome::check(false, format!("cannot load {}: {e}", dir.display())),
    };
    let classes = bundle.meta.num_classes;
    let cfg = TrainConfig::default();
    let start = Instant::now();
    let (_, base) = train_and_score(&bundle.graph, classes, &cfg.base());
    let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
    for lambda2 in [1e-4, 1e-2, 1.0, 10.0, 1e2] {
        let (val, test) = train_and_score(&bundle.graph, classes, &TrainConfig { lambda2, ..cfg.clone() });
        println!("  cora lambda2={lambda2}: val {val:.4} test {test:.4}");
        if val > best.0 {
            best = (val, test, lambda2);
        }
    }
    let runs = 6.0;
    let per_run = start.elapsed().as_secs_f64() / runs / 60.0;
    Outcome::check(
        best.1 >= base + 0.005 && base >= 0.78 && per_run <= 15.0,
        format!(
            "full {:.4} (lambda2 {}) vs base {base:.4}, {per_run:.1} min/run",
            best.1, best.2
        ),
    )
}

// ------------------------------------------------------- synthetic experiments

fn two_relations(classes: usize, homo_degree: f64, hetero_degree: f64) -> Vec<edgedis::data::RelationSpec> {
    let identity = (0..classes).map(|i| (0..classes).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    let cyclic = (0..classes)
        .map(|i| {
            (0..classes)
                .map(|j| f64::from(u8::from(i != j && ((i + 1) % classes == j || (j + 1) % classes == i))))
                .collect()
        })
        .collect();
    vec![
        edgedis::data::RelationSpec {
            id: 0,
            affinity: identity,
            expected_degree: homo_degree,
        },
        edgedis::data::RelationSpec {
            id: 1,
            affinity: cyclic,
            expected_degree: hetero_degree,
        },
    ]
}

fn small_two_relation_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        relations: two_relations(4, 6.0, 6.0),
        seed,
        ..SynthSpec::default()
    }
}

/// Model size used for every synthetic criterion; the learning rate is
/// raised from the Cora default because the graph is far smaller.
fn synthetic_config(seed: u64) -> TrainConfig {
    TrainConfig {
        channels: 4,
        d_channel: 8,
        hidden: 32,
        layer2_out: 32,
        scorer_hidden: 16,
        classifier_hidden: 32,
        disc_hidden: 16,
        lr: 5e-3,
        max_epochs: 300,
        seed,
        ..TrainConfig::default()
    }
}

#[derive(Clone, Copy)]
struct SynthRun {
    test_acc: f64,
    /// Matched AUC on layers 0 and 1.
    auc: [f64; 2],
    /// Within-half minus cross-half correlation of layer-0 weights and probabilities.
    gap_weights: f64,
    gap_probs: f64,
    best_epoch: usize,
}

struct Lab {
    runs: BTreeMap<(String, u64), SynthRun>,
}

impl Lab {
    fn run(&mut self, arm: &str, seed: u64, tweak: fn(&mut TrainConfig)) -> SynthRun {
        if let Some(r) = self.runs.get(&(arm.to_string(), seed)) {
            return *r;
        }
        let start = Instant::now();
        let (bundle, _) = generate_synthetic(&small_two_relation_spec(seed)).unwrap();
        let mut cfg = synthetic_config(seed);
        tweak(&mut cfg);
        let pg = PreparedGraph::new(&bundle.graph, &cfg).unwrap();
        let mut m = DisGnnModel::new(&cfg, bundle.graph.feature_dim(), bundle.meta.num_classes).unwrap();
        let out = train(&mut m, &pg, &mut NoopObserver).unwrap();
        let pred = m.predict(&pg).unwrap();
        let metrics = compute_metrics(&pred, pg.graph.labels(), &pg.graph.masks.test, bundle.meta.num_classes).unwrap();
        let factors = bundle.directed_factors(&pg.graph).unwrap();
        let mut auc = [0.0; 2];
        let mut gaps = (0.0, 0.0);
        for (layer, slot) in auc.iter_mut().enumerate() {
            let lc = layer_channels(&m, &pg, layer).unwrap();
            let f: Vec<Option<usize>> = lc.edge_ids.iter().map(|&e| factors[e]).collect();
            *slot = disentanglement_auc(&lc.probs, &f, &[0, 1]).unwrap().mean_matched_auc();
            if layer == 0 {
                gaps = (
                    channel_correlation(&lc.weights).unwrap().half_block_gap(),
                    channel_correlation(&lc.probs).unwrap().half_block_gap(),
                );
            }
        }
        let r = SynthRun {
            test_acc: metrics.accuracy,
            auc,
            gap_weights: gaps.0,
            gap_probs: gaps.1,
            best_epoch: out.best_epoch,
        };
        println!(
            "  {arm} seed {seed}: test {:.4} auc {:.3}/{:.3} gap w {:.3} p {:.3} best epoch {} ({:.1}s)",
            r.test_acc,
            r.auc[0],
            r.auc[1],
            r.gap_weights,
            r.gap_probs,
            r.best_epoch,
            start.elapsed().as_secs_f64()
        );
        self.runs.insert((arm.to_string(), seed), r);
        r
    }

    fn mean(&mut self, arm: &str, seeds: std::ops::Range<u64>, tweak: fn(&mut TrainConfig), f: fn(&SynthRun) -> f64) -> f64 {
        let n = seeds.end - seeds.start;
        seeds.map(|s| f(&self.run(arm, s, tweak))).sum::<f64>() / n as f64
    }
}

fn keep(_: &mut TrainConfig) {}

fn base(c: &mut TrainConfig) {
    *c = c.base();
}

fn acc(r: &SynthRun) -> f64 {
    r.test_acc
}

// ---------------------------------------------------------------- criterion 4

fn criterion_scorers(lab: &mut Lab) -> Outcome {
    let mlp = lab.mean("attn-mlp", 0..3, keep, acc);
    let go = lab.mean("attn-go", 0..3, |c| c.scorer = ScorerKind::Go, acc);
    let dp = lab.mean("attn-dp", 0..3, |c| c.scorer = ScorerKind::Dp, acc);
    Outcome::check(
        mlp >= dp,
        format!("mean test acc mlp {mlp:.4}, go {go:.4}, dp {dp:.4} (mlp >= go: {})", mlp >= go),
    )
}

// ---------------------------------------------------------------- criterion 5

fn criterion_backends(lab: &mut Lab) -> Outcome {
    let gcn = lab.mean("gcn", 0..3, |c| c.backend = Backend::Gcn, acc);
    let gcn_base = lab.mean("gcn-base", 0..3, |c| *c = TrainConfig { backend: Backend::Gcn, ..c.base() }, acc);
    let sage = lab.mean("sage", 0..3, |c| c.backend = Backend::Sage, acc);
    let sage_base = lab.mean("sage-base", 0..3, |c| *c = TrainConfig { backend: Backend::Sage, ..c.base() }, acc);
    Outcome::check(
        gcn >= gcn_base && sage >= sage_base,
        format!("gcn {gcn:.4} vs base {gcn_base:.4}; sage {sage:.4} vs base {sage_base:.4}"),
    )
}

// ---------------------------------------------------------------- criterion 6

fn criterion_disentanglement(lab: &mut Lab) -> Outcome {
    let auc0 = |r: &SynthRun| r.auc[0];
    let ssl = lab.mean("attn-mlp", 0..5, keep, auc0);
    let plain = lab.mean("attn-base", 0..5, base, auc0);
    let gap = lab.mean("attn-mlp", 0..5, keep, |r| r.gap_weights);
    let gap_p = lab.mean("attn-mlp", 0..5, keep, |r| r.gap_probs);
    let ssl1 = lab.mean("attn-mlp", 0..5, keep, |r| r.auc[1]);
    Outcome::check(
        ssl >= 0.75 && plain <= 0.65 && gap > 0.1,
        format!(
            "layer-0 matched auc ssl {ssl:.3} (>= 0.75), base {plain:.3} (<= 0.65), weight-correlation gap {gap:.3} (> 0.1); \
             layer-1 auc {ssl1:.3}, probability gap {gap_p:.3}"
        ),
    )
}

// ---------------------------------------------------------------- criterion 7

fn criterion_loss_floors() -> Outcome {
    let ln2 = std::f64::consts::LN_2;
    let mut edge_err: f64 = 0.0;
    let mut channel = Vec::new();
    let cfg0 = synthetic_config(0);
    let m = cfg0.channels as f64;
    for seed in 0..10 {
        let (bundle, _) = generate_synthetic(&small_two_relation_spec(seed)).unwrap();
        let cfg = synthetic_config(seed);
        let pg = PreparedGraph::new(&bundle.graph, &cfg).unwrap();
        let mut model = DisGnnModel::new(&cfg, bundle.graph.feature_dim(), bundle.meta.num_classes).unwrap();
        let part = pg.partition.clone().unwrap_or_default();
        let batch = sample_ssl_batch(&pg.graph, &part, cfg.p_e, cfg.conformity_negatives, seed).unwrap();

        let (mut tape, params, out) = model.run(&pg, &[]).unwrap();
        let nodes = node_subsample_for_channel_loss(pg.graph.num_nodes(), cfg.channel_node_cap, seed);
        for (layer, disc) in out.layers.iter().zip(&model.discriminators) {
            let l = channel_difference_loss(&mut tape, &params, layer, disc, &nodes).unwrap();
            channel.push(tape.value(l).item());
        }

        let scorer: Vec<_> = model.store.iter().filter(|(_, p)| p.name.contains(".scorer")).map(|(id, _)| id).collect();
        for id in scorer {
            let v = model.store.value_mut(id);
            *v = Matrix::zeros(v.rows(), v.cols());
        }
        let (mut tape, _, out) = model.run(&pg, &[]).unwrap();
        for l in 0..out.layers.len() {
            let e = edge_recovery_loss(&mut tape, &out.layers[l..l + 1], &batch).unwrap();
            edge_err = edge_err.max((tape.value(e).item() - ln2).abs());
        }
    }
    let mean = channel.iter().sum::<f64>() / channel.len() as f64;
    let rel = (mean - m.ln()).abs() / m.ln();
    Outcome::check(
        edge_err <= 1e-6 && rel <= 0.05,
        format!(
            "max |L_edge - ln 2| {edge_err:.1e} per layer; mean untrained L_channel {mean:.4} vs ln({m}) {:.4} ({:.1}% off, range {:.4}..{:.4})",
            m.ln(),
            100.0 * rel,
            channel.iter().copied().fold(f64::INFINITY, f64::min),
            channel.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        ),
    )
}

// ---------------------------------------------------------------- criterion 8

fn criterion_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str| {
        let (bundle, _) = generate_synthetic(&small_two_relation_spec(3)).unwrap();
        let cfg = TrainConfig {
            max_epochs: 40,
            ..synthetic_config(3)
        };
        let pg = PreparedGraph::new(&bundle.graph, &cfg).unwrap();
        let mut m = DisGnnModel::new(&cfg, bundle.graph.feature_dim(), bundle.meta.num_classes).unwrap();
        let out = train(&mut m, &pg, &mut NoopObserver).unwrap();
        let path = dir.path().join(format!("history-{tag}.csv"));
        write_history_csv(&out.history, &path).unwrap();
        let pred = m.predict(&pg).unwrap();
        let metrics = compute_metrics(&pred, pg.graph.labels(), &pg.graph.masks.test, bundle.meta.num_classes).unwrap();
        (std::fs::read(&path).unwrap(), metrics, out.history.len())
    };
    let (ha, ma, rows) = run("a");
    let (hb, mb, _) = run("b");
    Outcome::check(
        ha == hb && ma == mb,
        format!("{rows} history rows, histories equal: {}, metrics equal: {}", ha == hb, ma == mb),
    )
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("EDGEDIS_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let strict = std::env::var_os("EDGEDIS_ACCEPTANCE_STRICT").is_some();
    let mut lab = Lab { runs: BTreeMap::new() };
    let mut criteria: Vec<(usize, &str, Box<dyn FnMut(&mut Lab) -> Outcome>)> = vec![
        (1, "gradient correctness", Box::new(|_| criterion_gradients())),
        (2, "sampling contracts", Box::new(|_| criterion_sampling())),
        (3, "cora baseline ordering", Box::new(|_| criterion_cora())),
        (4, "scorer ablation direction", Box::new(criterion_scorers)),
        (5, "backend flexibility", Box::new(criterion_backends)),
        (6, "disentanglement property", Box::new(criterion_disentanglement)),
        (7, "loss floors", Box::new(|_| criterion_loss_floors())),
        (8, "determinism", Box::new(|_| criterion_determinism())),
    ];
    let mut lines = Vec::new();
    let mut failed = 0;
    for (n, name, f) in criteria.iter_mut() {
        if only.as_ref().is_some_and(|o| !o.contains(n)) {
            continue;
        }
        let start = Instant::now();
        let out = f(&mut lab);
        let tag = match out.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => {
                failed += 1;
                "FAIL"
            }
            Verdict::Skip => "SKIP",
        };
        let line = format!("criterion {n} {name}: {tag} ({:.0}s) {}", start.elapsed().as_secs_f64(), out.detail);
        println!("{line}");
        lines.push(line);
    }
    println!("\nacceptance summary");
    for l in &lines {
        println!("{l}");
    }
    println!("{failed} failed");
    if strict && failed > 0 {
        std::process::exit(1);
    }
}
