//! Two disentangling layers, a two-layer classifier head, one channel
//! discriminator per layer, the combined objective and its trainer.

mod checkpoint;
mod config;
mod trainer;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use config::TrainConfig;
pub use trainer::{train, write_history_csv, EpochRecord, NoopObserver, TrainError, TrainObserver, TrainOutcome};

use crate::autodiff::{Bindings, Matrix, ParamGroup, ParamId, ParamStore, Tape, Tensor};
use crate::disentangle::{glorot, DisLayer, EdgeIndex, LayerOutput, LayerSpec};
use crate::error::{Error, Result};
use crate::graph::{partition_edges, split_nodes, EdgePartition, Graph};
use crate::rng::{self, stream};
use crate::ssl::{
    channel_difference_loss, edge_recovery_loss, label_conformity_loss, node_subsample_for_channel_loss,
    ChannelDiscriminator, SslBatch,
};

/// `softmax(W2 · σ(W1 · h))`, with biases.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DisGnnModel {
    pub config: TrainConfig,
    pub d_in: usize,
    pub num_classes: usize,
    pub store: ParamStore,
    pub layers: Vec<DisLayer>,
    pub classifier: Classifier,
    pub discriminators: Vec<ChannelDiscriminator>,
}

/// Graph ready for the model: split, self-loops added, edge index and
/// labelled edge partition built.
#[derive(Clone, Debug)]
pub struct PreparedGraph {
    pub graph: Graph,
    pub edges: EdgeIndex,
    /// `None` when no edge has both endpoints labelled.
    pub partition: Option<EdgePartition>,
}

impl PreparedGraph {
    /// Splits with `cfg.split`/`cfg.seed` unless `g` already carries a
    /// training mask, then adds self-loops.
    pub fn new(g: &Graph, cfg: &TrainConfig) -> Result<Self> {
        let mut graph = g.clone();
        if !graph.masks.train.iter().any(|&m| m) {
            let [a, b, c] = cfg.split;
            graph.masks = split_nodes(&graph, (a, b, c), cfg.seed)?;
        }
        let graph = graph.add_self_loops();
        let partition = match partition_edges(&graph, cfg.label_source) {
            Ok(p) => Some(p),
            Err(Error::Partition(msg)) => {
                log::warn!("no labelled edges ({msg}); label conformity unavailable");
                None
            }
            Err(e) => return Err(e),
        };
        Ok(Self {
            edges: EdgeIndex::new(&graph),
            graph,
            partition,
        })
    }
}

/// Everything a forward pass exposes.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub logits: Tensor,
    pub layers: Vec<LayerOutput>,
}

/// Unweighted loss terms plus the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub node: f64,
    pub edge: f64,
    pub conform: f64,
    pub channel: f64,
    pub full: f64,
}

impl DisGnnModel {
    pub fn new(config: &TrainConfig, d_in: usize, num_classes: usize) -> Result<Self> {
        config.validate()?;
        if d_in == 0 || num_classes < 2 {
            return Err(Error::Config(format!(
                "need positive feature width and at least two classes (got {d_in}, {num_classes})"
            )));
        }
        let mut rng = rng::derive(config.seed, stream::INIT, 0);
        let mut store = ParamStore::new();
        let spec = |d_in, d_out| LayerSpec {
            channels: config.channels,
            d_in,
            d_channel: config.d_channel,
            d_out,
            scorer_hidden: config.scorer_hidden,
            scorer: config.scorer,
            backend: config.backend,
            slope: config.slope,
            softmax_input: config.softmax_input,
            renormalize: config.renormalize,
        };
        let l1 = DisLayer::new(spec(d_in, config.hidden), &mut store, "layer0", &mut rng)?;
        let l2 = DisLayer::new(spec(config.hidden, config.layer2_out), &mut store, "layer1", &mut rng)?;

        let g = ParamGroup::Classifier;
        let ch = config.classifier_hidden;
        let classifier = Classifier {
            w1: store.add("cls.w1", g, glorot(config.layer2_out, ch, &mut rng)),
            b1: store.add("cls.b1", g, Matrix::zeros(1, ch)),
            w2: store.add("cls.w2", g, glorot(ch, num_classes, &mut rng)),
            b2: store.add("cls.b2", g, Matrix::zeros(1, num_classes)),
        };

        let discriminators = [&l1, &l2]
            .iter()
            .enumerate()
            .map(|(i, l)| {
                ChannelDiscriminator::new(
                    &mut store,
                    &format!("disc{i}"),
                    l.spec.d_in,
                    l.spec.channel_width(),
                    config.disc_hidden,
                    config.channels,
                    config.slope,
                    &mut rng,
                )
            })
            .collect();

        Ok(Self {
            config: config.clone(),
            d_in,
            num_classes,
            store,
            layers: vec![l1, l2],
            classifier,
            discriminators,
        })
    }

    /// Both layers and the classifier. Logits are left unnormalised.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Bindings,
        features: Tensor,
        edges: &EdgeIndex,
    ) -> Result<ModelOutput> {
        let mut h = features;
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let out = layer.forward(tape, params, h, edges)?;
            h = out.output;
            layers.push(out);
        }
        let c = &self.classifier;
        let z = tape.matmul(h, params.get(c.w1))?;
        let z = tape.add_row(z, params.get(c.b1))?;
        let z = tape.leaky_relu(z, self.config.slope);
        let z = tape.matmul(z, params.get(c.w2))?;
        let logits = tape.add_row(z, params.get(c.b2))?;
        Ok(ModelOutput { logits, layers })
    }

    /// Records a forward pass over `pg` on a fresh tape, with the listed
    /// groups trainable.
    pub fn run(&self, pg: &PreparedGraph, trainable: &[ParamGroup]) -> Result<(Tape, Bindings, ModelOutput)> {
        let mut tape = Tape::new();
        let params = Bindings::bind(&mut tape, &self.store, trainable);
        let x = tape.constant(pg.graph.features().clone());
        let out = self.forward(&mut tape, &params, x, &pg.edges)?;
        Ok((tape, params, out))
    }

    /// Class logits without recording gradients.
    pub fn logits(&self, pg: &PreparedGraph) -> Result<Matrix> {
        let (tape, _, out) = self.run(pg, &[])?;
        Ok(tape.value(out.logits).clone())
    }

    /// Predicted class per node.
    pub fn predict(&self, pg: &PreparedGraph) -> Result<Vec<usize>> {
        Ok(predict(&self.logits(pg)?))
    }
}

/// Row-wise argmax; ties go to the lowest class id.
pub fn predict(logits: &Matrix) -> Vec<usize> {
    logits.argmax_rows()
}

/// Mean cross-entropy over the training nodes.
pub fn node_loss(tape: &mut Tape, logits: Tensor, g: &Graph) -> Result<Tensor> {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for v in g.masks.train_nodes() {
        if let Some(c) = g.labels()[v] {
            rows.push(v);
            targets.push(c);
        }
    }
    if rows.is_empty() {
        return Err(Error::Contract("training mask selects no labelled node".into()));
    }
    tape.softmax_cross_entropy(logits, &rows, &targets)
}

/// Builds the weighted objective on `tape`. Terms whose weight is zero are
/// skipped and reported as zero. `step_seed` picks the discriminator's nodes.
pub fn full_loss(
    tape: &mut Tape,
    params: &Bindings,
    model: &DisGnnModel,
    out: &ModelOutput,
    g: &Graph,
    batch: Option<&SslBatch>,
    step_seed: u64,
) -> Result<(Tensor, LossReport)> {
    let cfg = &model.config;
    let node = node_loss(tape, out.logits, g)?;
    let mut report = LossReport {
        node: tape.value(node).item(),
        ..LossReport::default()
    };
    check_finite("L_node", report.node)?;
    let mut total = node;

    if cfg.lambda1 > 0.0 || cfg.lambda2 > 0.0 {
        let batch = batch.ok_or_else(|| Error::Contract("SSL weights set but no batch sampled".into()))?;
        if cfg.lambda1 > 0.0 {
            let l = edge_recovery_loss(tape, &out.layers, batch)?;
            report.edge = tape.value(l).item();
            check_finite("L_edge", report.edge)?;
            let w = tape.scale(l, cfg.lambda1);
            total = tape.add(total, w)?;
        }
        if cfg.lambda2 > 0.0 {
            if let Some(l) = label_conformity_loss(tape, &out.layers, batch)? {
                report.conform = tape.value(l).item();
                check_finite("L_conform", report.conform)?;
                let w = tape.scale(l, cfg.lambda2);
                total = tape.add(total, w)?;
            }
        }
    }
    if cfg.lambda3 > 0.0 {
        let nodes = node_subsample_for_channel_loss(g.num_nodes(), cfg.channel_node_cap, step_seed);
        let mut acc = None;
        for (layer, disc) in out.layers.iter().zip(&model.discriminators) {
            let l = channel_difference_loss(tape, params, layer, disc, &nodes)?;
            acc = Some(match acc {
                None => l,
                Some(a) => tape.add(a, l)?,
            });
        }
        if let Some(l) = acc {
            report.channel = tape.value(l).item();
            check_finite("L_channel", report.channel)?;
            let w = tape.scale(l, cfg.lambda3);
            total = tape.add(total, w)?;
        }
    }
    report.full = tape.value(total).item();
    check_finite("L_full", report.full)?;
    Ok((total, report))
}

fn check_finite(what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { what: what.into() })
    }
}
