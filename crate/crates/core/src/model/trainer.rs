//! Alternating optimisation: `n_step` node-classification updates of the
//! extractor and classifier, then one update of everything on the full
//! objective with a freshly sampled SSL batch. Model selection keeps the
//! latest parameters attaining the best validation accuracy.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{full_loss, node_loss, DisGnnModel, LossReport, PreparedGraph};
use crate::autodiff::{adam_step, clip_global_norm, AdamState, ParamGroup, ParamStore};
use crate::error::{Error, Result};
use crate::ssl::{sample_ssl_batch, SslBatch};

/// One outer iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// `L_node` before each of the inner updates.
    pub inner_node: Vec<f64>,
    /// Terms of the full objective at the outer update.
    pub report: LossReport,
    pub train_acc: f64,
    pub val_acc: f64,
}

pub trait TrainObserver {
    fn on_epoch(&mut self, _record: &EpochRecord) {}
}

pub struct NoopObserver;

impl TrainObserver for NoopObserver {}

impl<F: FnMut(&EpochRecord)> TrainObserver for F {
    fn on_epoch(&mut self, record: &EpochRecord) {
        self(record)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    /// True when training stopped for lack of validation improvement.
    pub converged: bool,
}

/// Training aborted. The model has been rolled back to its best checkpoint
/// (or its initial state if no epoch completed).
#[derive(Debug)]
pub struct TrainError {
    pub source: Error,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

impl std::fmt::Display for TrainError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "training aborted after {} epochs: {}", self.history.len(), self.source)
    }
}

impl std::error::Error for TrainError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

fn accuracy(pred: &[usize], labels: &[Option<usize>], mask: &[bool]) -> f64 {
    let mut hit = 0usize;
    let mut total = 0usize;
    for v in 0..pred.len() {
        if let (true, Some(y)) = (mask[v], labels[v]) {
            total += 1;
            hit += usize::from(pred[v] == y);
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// One row per outer iteration: `step, L_node, L_edge, L_conform, L_channel, val_acc`.
/// `L_node` is the value at the full update.
pub fn write_history_csv(history: &[EpochRecord], path: &Path) -> Result<()> {
    let err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Contract(format!("{}: {other:?}", path.display())),
    };
    let mut out = csv::Writer::from_path(path).map_err(err)?;
    out.write_record(["step", "L_node", "L_edge", "L_conform", "L_channel", "val_acc"])
        .map_err(err)?;
    for r in history {
        let p = &r.report;
        out.write_record([
            r.epoch.to_string(),
            p.node.to_string(),
            p.edge.to_string(),
            p.conform.to_string(),
            p.channel.to_string(),
            r.val_acc.to_string(),
        ])
        .map_err(err)?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Seed of the SSL batch drawn at `epoch`.
pub(crate) fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (epoch as u64).wrapping_add(1)
}

struct Loop<'a> {
    model: &'a mut DisGnnModel,
    pg: &'a PreparedGraph,
    state: AdamState,
}

impl Loop<'_> {
    fn node_step(&mut self) -> Result<f64> {
        let trainable = [ParamGroup::Extractor, ParamGroup::Classifier];
        let (mut tape, params, out) = self.model.run(self.pg, &trainable)?;
        let loss = node_loss(&mut tape, out.logits, &self.pg.graph)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite { what: "L_node".into() });
        }
        let grads = tape.backward(loss)?;
        self.apply(params.collect(&tape, &grads))?;
        Ok(value)
    }

    fn full_step(&mut self, batch: Option<&SslBatch>, step_seed: u64) -> Result<LossReport> {
        let mut trainable = vec![ParamGroup::Extractor, ParamGroup::Classifier];
        if self.model.config.lambda3 > 0.0 {
            trainable.push(ParamGroup::Discriminator);
        }
        let (mut tape, params, out) = self.model.run(self.pg, &trainable)?;
        let (loss, report) = full_loss(&mut tape, &params, self.model, &out, &self.pg.graph, batch, step_seed)?;
        let grads = tape.backward(loss)?;
        self.apply(params.collect(&tape, &grads))?;
        Ok(report)
    }

    fn apply(&mut self, mut grads: Vec<(crate::autodiff::ParamId, crate::autodiff::Matrix)>) -> Result<()> {
        let norm = clip_global_norm(&mut grads, self.model.config.clip_norm);
        if !norm.is_finite() {
            return Err(Error::NonFinite { what: "gradient norm".into() });
        }
        let cfg = self.model.config.adam();
        adam_step(&mut self.model.store, &grads, &mut self.state, &cfg)
    }

    fn accuracies(&self) -> Result<(f64, f64)> {
        let pred = self.model.predict(self.pg)?;
        let g = &self.pg.graph;
        Ok((
            accuracy(&pred, g.labels(), &g.masks.train),
            accuracy(&pred, g.labels(), &g.masks.val),
        ))
    }
}

/// Trains `model` on `pg` following the model's own configuration.
pub fn train(
    model: &mut DisGnnModel,
    pg: &PreparedGraph,
    observer: &mut dyn TrainObserver,
) -> std::result::Result<TrainOutcome, TrainError> {
    let cfg = model.config.clone();
    let fail = |source, history, best_epoch| TrainError {
        source,
        history,
        best_epoch,
    };
    if let Err(e) = cfg.validate() {
        return Err(fail(e, Vec::new(), None));
    }
    let needs_batch = cfg.lambda1 > 0.0 || cfg.lambda2 > 0.0;
    if cfg.lambda2 > 0.0 && pg.partition.is_none() {
        log::warn!("label conformity requested but the graph has no labelled edges");
    }

    let mut best: (Option<usize>, f64, ParamStore) = (None, f64::NEG_INFINITY, model.store.clone());
    let mut history = Vec::new();
    let mut lp = Loop {
        state: AdamState::new(&model.store),
        model,
        pg,
    };

    let mut converged = false;
    let mut last_gain = 0;
    for epoch in 0..cfg.max_epochs {
        let step = (|| -> Result<EpochRecord> {
            let mut inner_node = Vec::with_capacity(cfg.n_step);
            for _ in 0..cfg.n_step {
                inner_node.push(lp.node_step()?);
            }
            let seed = epoch_seed(cfg.seed, epoch);
            let batch = match (&pg.partition, needs_batch) {
                (Some(part), true) => Some(sample_ssl_batch(&pg.graph, part, cfg.p_e, cfg.conformity_negatives, seed)?),
                (None, true) => {
                    let empty = crate::graph::EdgePartition::default();
                    Some(sample_ssl_batch(&pg.graph, &empty, cfg.p_e, cfg.conformity_negatives, seed)?)
                }
                (_, false) => None,
            };
            let report = lp.full_step(batch.as_ref(), seed)?;
            let (train_acc, val_acc) = lp.accuracies()?;
            Ok(EpochRecord {
                epoch,
                inner_node,
                report,
                train_acc,
                val_acc,
            })
        })();

        let record = match step {
            Ok(r) => r,
            Err(e) => {
                lp.model.store = best.2;
                return Err(fail(e, history, best.0));
            }
        };
        observer.on_epoch(&record);
        // ties move the checkpoint forward but do not reset the patience clock
        if record.val_acc > best.1 {
            last_gain = epoch;
        }
        if record.val_acc >= best.1 {
            best = (Some(epoch), record.val_acc, lp.model.store.clone());
        }
        history.push(record);
        if epoch - last_gain >= cfg.patience {
            converged = true;
            break;
        }
    }

    lp.model.store = best.2;
    Ok(TrainOutcome {
        history,
        best_epoch: best.0.unwrap_or(0),
        best_val_acc: best.1,
        converged,
    })
}
