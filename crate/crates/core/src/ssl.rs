//! Self-supervised signals that shape the channels: edge recovery by the
//! union of all channels, label conformity of the two channel halves, and
//! channel distinguishability through a discriminator.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Matrix, ParamGroup, ParamId, ParamStore, Tape, Tensor};
use crate::disentangle::{pair_indices, LayerOutput};
use crate::error::{Error, Result};
use crate::graph::{sample_non_edges, EdgePartition, Graph};
use crate::rng::{self, stream, Rng};

/// Where conformity negatives come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConformityNegatives {
    /// Labelled edges of the opposite kind only.
    EdgesOnly,
    /// Labelled edges of the opposite kind, topped up with unconnected pairs.
    #[default]
    AllPairs,
}

/// Supervision for one binary pair classifier. Realised edges are referenced
/// by index so their cached scores can be reused; other pairs are scored on
/// demand.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairTargets {
    pub edges: Vec<usize>,
    pub edge_targets: Vec<f64>,
    pub pairs: Vec<(usize, usize)>,
    pub pair_targets: Vec<f64>,
}

impl PairTargets {
    pub fn len(&self) -> usize {
        self.edges.len() + self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn positives(&self) -> usize {
        self.edge_targets.iter().chain(&self.pair_targets).filter(|&&t| t == 1.0).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SslBatch {
    /// Sampled realised edges against sampled unconnected pairs.
    pub recovery: PairTargets,
    /// Homo-edge detector supervision for the first channel half.
    pub homo: Option<PairTargets>,
    /// Hetero-edge detector supervision for the second channel half.
    pub hetero: Option<PairTargets>,
    pub p_e: f64,
    /// Set when the partition lacked homo or hetero edges.
    pub conformity_disabled: bool,
}

/// `round(p_e · total)`.
pub fn scaled_count(p_e: f64, total: usize) -> usize {
    (p_e * total as f64).round() as usize
}

/// Draws one batch of supervision pairs. `g` must be the graph the layers
/// run on (self-loops included); `partition` indexes its edges.
pub fn sample_ssl_batch(
    g: &Graph,
    partition: &EdgePartition,
    p_e: f64,
    negatives: ConformityNegatives,
    seed: u64,
) -> Result<SslBatch> {
    if !(p_e > 0.0 && p_e <= 1.0) {
        return Err(Error::Config(format!("p_e must lie in (0,1], got {p_e}")));
    }
    let mut rng = rng::derive(seed, stream::SSL, 0);
    let edge_set = g.edge_set();
    let a_minus = g.unconnected_pairs();

    let mut connected = g.non_loop_edges();
    let n_pos = scaled_count(p_e, connected.len());
    let n_neg = scaled_count(p_e, a_minus).min(3 * n_pos);
    let (pos, _) = connected.partial_shuffle(&mut rng, n_pos);
    let mut pos = pos.to_vec();
    pos.sort_unstable();
    let neg = sample_non_edges(g, &edge_set, n_neg, &mut rng)?;
    let recovery = PairTargets {
        edge_targets: vec![1.0; pos.len()],
        edges: pos,
        pair_targets: vec![0.0; neg.len()],
        pairs: neg,
    };

    let disabled = partition.homo.is_empty() || partition.hetero.is_empty();
    let (homo, hetero) = if disabled {
        log::warn!(
            "label conformity disabled: {} homo and {} hetero labelled edges",
            partition.homo.len(),
            partition.hetero.len()
        );
        (None, None)
    } else {
        let homo = conformity_targets(g, &edge_set, &partition.homo, &partition.hetero, p_e, negatives, &mut rng)?;
        let hetero = conformity_targets(g, &edge_set, &partition.hetero, &partition.homo, p_e, negatives, &mut rng)?;
        (Some(homo), Some(hetero))
    };

    Ok(SslBatch {
        recovery,
        homo,
        hetero,
        p_e,
        conformity_disabled: disabled,
    })
}

fn conformity_targets(
    g: &Graph,
    edge_set: &HashSet<(usize, usize)>,
    own: &[usize],
    opposite: &[usize],
    p_e: f64,
    negatives: ConformityNegatives,
    rng: &mut Rng,
) -> Result<PairTargets> {
    let n_pos = scaled_count(p_e, own.len());
    let pool = match negatives {
        ConformityNegatives::EdgesOnly => opposite.len(),
        ConformityNegatives::AllPairs => opposite.len() + g.unconnected_pairs(),
    };
    let n_neg = scaled_count(p_e, pool).min(3 * n_pos);

    let mut pos: Vec<usize> = own.choose_multiple(rng, n_pos).copied().collect();
    let n_opp = n_neg.min(opposite.len());
    let mut opp: Vec<usize> = opposite.choose_multiple(rng, n_opp).copied().collect();
    pos.sort_unstable();
    opp.sort_unstable();
    let pairs = sample_non_edges(g, edge_set, n_neg - n_opp, rng)?;

    let mut edge_targets = vec![1.0; pos.len()];
    edge_targets.extend(std::iter::repeat_n(0.0, opp.len()));
    pos.extend(opp);
    Ok(PairTargets {
        edges: pos,
        edge_targets,
        pair_targets: vec![0.0; pairs.len()],
        pairs,
    })
}

/// Mean binary cross-entropy of `sigmoid(Σ_{c∈channels} score_c)` over all
/// pairs of `targets`, for one layer.
fn union_bce(
    tape: &mut Tape,
    layer: &LayerOutput,
    channels: std::ops::Range<usize>,
    targets: &PairTargets,
) -> Result<Tensor> {
    if targets.is_empty() {
        return Err(Error::Contract("no supervision pairs for an SSL loss".into()));
    }
    let total = targets.len() as f64;
    let mut parts = Vec::with_capacity(2);
    if !targets.edges.is_empty() {
        let idx: crate::autodiff::Indices = targets.edges.clone().into();
        let mut sum = None;
        for c in channels.clone() {
            let l = tape.gather(layer.weights.logits[c], idx.clone())?;
            sum = Some(match sum {
                None => l,
                Some(s) => tape.add(s, l)?,
            });
        }
        let logit = sum.ok_or_else(|| Error::Contract("empty channel range".into()))?;
        let bce = tape.bce_with_logits(logit, &targets.edge_targets)?;
        parts.push(tape.scale(bce, targets.edges.len() as f64 / total));
    }
    if !targets.pairs.is_empty() {
        let (src, dst) = pair_indices(&targets.pairs);
        let scores = layer.cache.score_pairs(tape, &src, &dst)?;
        let mut sum = scores[channels.start];
        for &s in &scores[channels.start + 1..channels.end] {
            sum = tape.add(sum, s)?;
        }
        let bce = tape.bce_with_logits(sum, &targets.pair_targets)?;
        parts.push(tape.scale(bce, targets.pairs.len() as f64 / total));
    }
    let mut loss = parts[0];
    for &p in &parts[1..] {
        loss = tape.add(loss, p)?;
    }
    Ok(loss)
}

fn sum_layers(tape: &mut Tape, losses: Vec<Tensor>) -> Result<Tensor> {
    let mut it = losses.into_iter();
    let mut acc = it
        .next()
        .ok_or_else(|| Error::Contract("no layers to sum a loss over".into()))?;
    for l in it {
        acc = tape.add(acc, l)?;
    }
    Ok(acc)
}

/// Edge recovery: every layer's channel union must tell sampled edges from
/// sampled non-edges. Per-layer means are summed over layers.
pub fn edge_recovery_loss(tape: &mut Tape, layers: &[LayerOutput], batch: &SslBatch) -> Result<Tensor> {
    let per_layer = layers
        .iter()
        .map(|l| union_bce(tape, l, 0..l.weights.channels(), &batch.recovery))
        .collect::<Result<Vec<_>>>()?;
    sum_layers(tape, per_layer)
}

/// Label conformity: the first channel half detects homo-edges, the second
/// half hetero-edges. `None` when the batch has conformity disabled.
pub fn label_conformity_loss(
    tape: &mut Tape,
    layers: &[LayerOutput],
    batch: &SslBatch,
) -> Result<Option<Tensor>> {
    let (Some(homo), Some(hetero)) = (&batch.homo, &batch.hetero) else {
        return Ok(None);
    };
    let mut per_layer = Vec::with_capacity(2 * layers.len());
    for l in layers {
        let c = l.weights.channels();
        if c % 2 != 0 || c < 2 {
            return Err(Error::Config(format!(
                "label conformity needs an even channel count, got {c}"
            )));
        }
        per_layer.push(union_bce(tape, l, 0..c / 2, homo)?);
        per_layer.push(union_bce(tape, l, c / 2..c, hetero)?);
    }
    sum_layers(tape, per_layer).map(Some)
}

/// Two-layer perceptron that guesses which channel produced a channel-wise
/// embedding `[h_prev ‖ h_channel]`. The first weight matrix is stored as its
/// two row blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelDiscriminator {
    pub w_prev: ParamId,
    pub w_channel: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub channels: usize,
    pub slope: f64,
}

impl ChannelDiscriminator {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_prev: usize,
        d_channel: usize,
        hidden: usize,
        channels: usize,
        slope: f64,
        rng: &mut Rng,
    ) -> Self {
        let g = ParamGroup::Discriminator;
        let a = (6.0 / (d_prev + d_channel + hidden) as f64).sqrt();
        let block = |rows: usize, rng: &mut Rng| {
            use rand::Rng as _;
            let data = (0..rows * hidden).map(|_| rng.random_range(-a..a)).collect();
            Matrix::from_vec(rows, hidden, data).expect("sized")
        };
        let wp = block(d_prev, rng);
        let wc = block(d_channel, rng);
        Self {
            w_prev: store.add(format!("{prefix}.w_prev"), g, wp),
            w_channel: store.add(format!("{prefix}.w_channel"), g, wc),
            b1: store.add(format!("{prefix}.b1"), g, Matrix::zeros(1, hidden)),
            // a zero output layer starts the discriminator at chance level
            w2: store.add(format!("{prefix}.w2"), g, Matrix::zeros(hidden, channels)),
            b2: store.add(format!("{prefix}.b2"), g, Matrix::zeros(1, channels)),
            channels,
            slope,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w_prev, self.w_channel, self.b1, self.w2, self.b2]
    }
}

/// Channel difference: each channel-wise embedding of the sampled nodes is
/// labelled with its channel index and classified by `disc`. Gradients reach
/// both the discriminator and the layer.
pub fn channel_difference_loss(
    tape: &mut Tape,
    params: &Bindings,
    layer: &LayerOutput,
    disc: &ChannelDiscriminator,
    nodes: &[usize],
) -> Result<Tensor> {
    let outs = &layer.channel_outputs;
    if outs.len() != disc.channels {
        return Err(Error::Contract(format!(
            "discriminator classifies {} channels, layer has {}",
            disc.channels,
            outs.len()
        )));
    }
    let w_prev = params.get(disc.w_prev);
    let w_channel = params.get(disc.w_channel);
    if w_prev.rows() != layer.input.cols() || w_channel.rows() != outs[0].cols() {
        return Err(Error::Dimension {
            op: "channel_difference_loss",
            left: (layer.input.cols(), outs[0].cols()),
            right: (w_prev.rows(), w_channel.rows()),
        });
    }
    let idx: crate::autodiff::Indices = nodes.to_vec().into();
    let prev = tape.gather(layer.input, idx.clone())?;
    let prev_part = tape.matmul(prev, w_prev)?;
    let rows: Vec<usize> = (0..nodes.len()).collect();
    let mut total = None;
    for (i, &o) in outs.iter().enumerate() {
        let h = tape.gather(o, idx.clone())?;
        let ch_part = tape.matmul(h, w_channel)?;
        let pre = tape.add(prev_part, ch_part)?;
        let pre = tape.add_row(pre, params.get(disc.b1))?;
        let act = tape.leaky_relu(pre, disc.slope);
        let logits = tape.matmul(act, params.get(disc.w2))?;
        let logits = tape.add_row(logits, params.get(disc.b2))?;
        let ce = tape.softmax_cross_entropy(logits, &rows, &vec![i; rows.len()])?;
        total = Some(match total {
            None => ce,
            Some(t) => tape.add(t, ce)?,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("layer has no channels".into()))?;
    Ok(tape.scale(total, 1.0 / outs.len() as f64))
}

/// `min(n, cap)` distinct nodes, sorted.
pub fn node_subsample_for_channel_loss(n: usize, cap: usize, seed: u64) -> Vec<usize> {
    let cap = cap.max(1);
    if cap >= n {
        return (0..n).collect();
    }
    let mut rng = rng::derive(seed, stream::CHANNEL_NODES, 0);
    let mut all: Vec<usize> = (0..n).collect();
    let (picked, _) = all.partial_shuffle(&mut rng, cap);
    let mut picked = picked.to_vec();
    picked.sort_unstable();
    picked
}
