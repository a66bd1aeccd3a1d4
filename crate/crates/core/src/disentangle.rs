//! The edge-disentangling layer.
//!
//! Each of the layer's channels scores every edge with its own small
//! network, turns the scores into a distribution over each node's incoming
//! edges and aggregates neighbour messages with it. Channel outputs are then
//! concatenated and fused by one linear map plus LeakyReLU.
//!
//! Convention: an edge `(src, dst)` carries a message from `src` into `dst`.
//! The score of that edge is computed from `[h_dst, h_src]`, and softmax
//! normalisation runs over all edges sharing a `dst`.

use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Indices, Matrix, ParamGroup, ParamId, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    /// Two-layer perceptron on the concatenated endpoint embeddings.
    #[default]
    Mlp,
    /// Single linear layer on the concatenated projected embeddings.
    Go,
    /// Inner product of projected embeddings.
    Dp,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Channel softmax weights drive the aggregation.
    #[default]
    Attn,
    /// Fixed symmetric degree normalisation, gated by channel probability.
    Gcn,
    /// Mean over neighbours gated by channel probability, concatenated with
    /// the node's own projected state.
    Sage,
}

/// What the per-node softmax is taken over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxInput {
    /// Sigmoid edge probabilities.
    #[default]
    Probability,
    /// Raw pre-sigmoid scores.
    Logit,
}

/// Optional degree renormalisation applied on top of the softmax weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Renormalize {
    #[default]
    None,
    /// Divide each weight by the square root of its source's total outgoing weight.
    Symmetric,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub channels: usize,
    pub d_in: usize,
    pub d_channel: usize,
    pub d_out: usize,
    /// Hidden width of the MLP scorer.
    pub scorer_hidden: usize,
    pub scorer: ScorerKind,
    pub backend: Backend,
    pub slope: f64,
    pub softmax_input: SoftmaxInput,
    pub renormalize: Renormalize,
}

impl LayerSpec {
    /// Width of one channel's output.
    pub fn channel_width(&self) -> usize {
        match self.backend {
            Backend::Sage => 2 * self.d_channel,
            Backend::Attn | Backend::Gcn => self.d_channel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("a layer needs at least one channel".into()));
        }
        if self.d_in == 0 || self.d_channel == 0 || self.d_out == 0 || self.scorer_hidden == 0 {
            return Err(Error::Config(format!("layer dimensions must be positive: {self:?}")));
        }
        if !(self.slope > 0.0 && self.slope < 1.0) {
            return Err(Error::Config(format!(
                "LeakyReLU slope must lie in (0,1), got {}",
                self.slope
            )));
        }
        Ok(())
    }
}

/// Glorot-uniform matrix.
pub(crate) fn glorot(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

#[derive(Clone, Debug, PartialEq)]
pub enum ChannelParams {
    Mlp {
        w_dst: ParamId,
        w_src: ParamId,
        w_out: ParamId,
    },
    Go {
        w: ParamId,
        a_dst: ParamId,
        a_src: ParamId,
    },
    Dp {
        w: ParamId,
    },
}

/// Per-channel edge scoring networks of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelScorer {
    pub kind: ScorerKind,
    pub channels: Vec<ChannelParams>,
    pub slope: f64,
}

impl ChannelScorer {
    pub fn new(spec: &LayerSpec, store: &mut ParamStore, prefix: &str, rng: &mut Rng) -> Self {
        let g = ParamGroup::Extractor;
        let (d, h) = (spec.d_in, spec.scorer_hidden);
        let channels = (0..spec.channels)
            .map(|i| {
                let name = |s: &str| format!("{prefix}.scorer{i}.{s}");
                match spec.scorer {
                    ScorerKind::Mlp => {
                        // [h_dst, h_src]·W1 split into its two row blocks
                        let a = (6.0 / (2 * d + h) as f64).sqrt();
                        let mut half = |rows| {
                            let data = (0..rows * h).map(|_| rng.random_range(-a..a)).collect();
                            Matrix::from_vec(rows, h, data).expect("sized")
                        };
                        let (wd, ws) = (half(d), half(d));
                        ChannelParams::Mlp {
                            w_dst: store.add(name("w_dst"), g, wd),
                            w_src: store.add(name("w_src"), g, ws),
                            w_out: store.add(name("w_out"), g, glorot(h, 1, rng)),
                        }
                    }
                    ScorerKind::Go => {
                        let w = store.add(name("w"), g, glorot(d, spec.d_channel, rng));
                        let a = glorot(2 * spec.d_channel, 1, rng);
                        let (top, bottom) = a.as_slice().split_at(spec.d_channel);
                        ChannelParams::Go {
                            w,
                            a_dst: store.add(name("a_dst"), g, Matrix::column(top)),
                            a_src: store.add(name("a_src"), g, Matrix::column(bottom)),
                        }
                    }
                    ScorerKind::Dp => ChannelParams::Dp {
                        w: store.add(name("w"), g, glorot(d, spec.d_channel, rng)),
                    },
                }
            })
            .collect();
        Self {
            kind: spec.scorer,
            channels,
            slope: spec.slope,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.channels
            .iter()
            .flat_map(|c| match *c {
                ChannelParams::Mlp { w_dst, w_src, w_out } => vec![w_dst, w_src, w_out],
                ChannelParams::Go { w, a_dst, a_src } => vec![w, a_dst, a_src],
                ChannelParams::Dp { w } => vec![w],
            })
            .collect()
    }

    /// Per-node projections from which any pair can be scored.
    pub fn project(&self, tape: &mut Tape, params: &Bindings, h: Tensor) -> Result<ScorerCache> {
        let mut channels = Vec::with_capacity(self.channels.len());
        for c in &self.channels {
            channels.push(match *c {
                ChannelParams::Mlp { w_dst, w_src, w_out } => NodeProjection::Mlp {
                    dst: tape.matmul(h, params.get(w_dst))?,
                    src: tape.matmul(h, params.get(w_src))?,
                    w_out: params.get(w_out),
                },
                ChannelParams::Go { w, a_dst, a_src } => {
                    let z = tape.matmul(h, params.get(w))?;
                    NodeProjection::Go {
                        dst: tape.matmul(z, params.get(a_dst))?,
                        src: tape.matmul(z, params.get(a_src))?,
                    }
                }
                ChannelParams::Dp { w } => NodeProjection::Dp {
                    z: tape.matmul(h, params.get(w))?,
                },
            });
        }
        Ok(ScorerCache {
            channels,
            slope: self.slope,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub enum NodeProjection {
    Mlp { dst: Tensor, src: Tensor, w_out: Tensor },
    Go { dst: Tensor, src: Tensor },
    Dp { z: Tensor },
}

/// Node-level projections of one layer's scorers, recorded on the tape.
#[derive(Clone, Debug)]
pub struct ScorerCache {
    pub channels: Vec<NodeProjection>,
    slope: f64,
}

impl ScorerCache {
    /// Pre-sigmoid scores of `(src[k], dst[k])` for every channel, each `k×1`.
    pub fn score_pairs(&self, tape: &mut Tape, src: &Indices, dst: &Indices) -> Result<Vec<Tensor>> {
        if src.len() != dst.len() {
            return Err(Error::Contract(format!(
                "{} sources but {} destinations",
                src.len(),
                dst.len()
            )));
        }
        self.channels
            .iter()
            .map(|p| match *p {
                NodeProjection::Mlp { dst: pd, src: ps, w_out } => {
                    let a = tape.gather(pd, dst.clone())?;
                    let b = tape.gather(ps, src.clone())?;
                    let hidden = tape.add(a, b)?;
                    let act = tape.leaky_relu(hidden, self.slope);
                    tape.matmul(act, w_out)
                }
                NodeProjection::Go { dst: sd, src: ss } => {
                    let a = tape.gather(sd, dst.clone())?;
                    let b = tape.gather(ss, src.clone())?;
                    tape.add(a, b)
                }
                NodeProjection::Dp { z } => {
                    let a = tape.gather(z, dst.clone())?;
                    let b = tape.gather(z, src.clone())?;
                    let prod = tape.mul(a, b)?;
                    Ok(tape.row_sum(prod))
                }
            })
            .collect()
    }
}

/// Edge list of a graph in the form segment ops consume, plus the fixed
/// coefficients used by the GCN and SAGE backends.
#[derive(Clone, Debug)]
pub struct EdgeIndex {
    pub n: usize,
    pub src: Indices,
    pub dst: Indices,
    /// `deg(src)^-1/2 · deg(dst)^-1/2`, degrees counting self-loops.
    pub gcn_coef: Matrix,
    /// `1 / (number of non-loop in-edges of dst)`, zero on self-loops.
    pub mean_coef: Matrix,
}

impl EdgeIndex {
    pub fn new(g: &Graph) -> Self {
        let n = g.num_nodes();
        let edges = g.edges();
        let deg = g.in_degrees();
        let mut neigh = vec![0usize; n];
        for &(s, d) in edges {
            if s != d {
                neigh[d] += 1;
            }
        }
        let gcn: Vec<f64> = edges
            .iter()
            .map(|&(s, d)| 1.0 / ((deg[s] as f64).sqrt() * (deg[d] as f64).sqrt()))
            .collect();
        let mean: Vec<f64> = edges
            .iter()
            .map(|&(s, d)| if s == d { 0.0 } else { 1.0 / neigh[d] as f64 })
            .collect();
        Self {
            n,
            src: edges.iter().map(|e| e.0).collect::<Vec<_>>().into(),
            dst: edges.iter().map(|e| e.1).collect::<Vec<_>>().into(),
            gcn_coef: Matrix::column(&gcn),
            mean_coef: Matrix::column(&mean),
        }
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn has_all_groups(&self) -> bool {
        let mut seen = vec![false; self.n];
        self.dst.iter().for_each(|&d| seen[d] = true);
        seen.into_iter().all(|s| s)
    }
}

/// Per-channel edge scores of one layer over the layer's edge list.
#[derive(Clone, Debug)]
pub struct ChannelWeights {
    /// Pre-sigmoid scores, `e×1` per channel.
    pub logits: Vec<Tensor>,
    /// `sigmoid(logits)`.
    pub probs: Vec<Tensor>,
    /// Per-destination softmax weights.
    pub weights: Vec<Tensor>,
}

impl ChannelWeights {
    pub fn channels(&self) -> usize {
        self.logits.len()
    }

    /// Plain values, one vector per channel.
    pub fn weight_values(&self, tape: &Tape) -> Vec<Vec<f64>> {
        self.weights.iter().map(|&t| tape.value(t).as_slice().to_vec()).collect()
    }

    pub fn prob_values(&self, tape: &Tape) -> Vec<Vec<f64>> {
        self.probs.iter().map(|&t| tape.value(t).as_slice().to_vec()).collect()
    }
}

/// Scores every edge of `edges` on every channel.
pub fn score_edges(
    tape: &mut Tape,
    cache: &ScorerCache,
    edges: &EdgeIndex,
) -> Result<Vec<Tensor>> {
    if edges.is_empty() {
        return Err(Error::Contract("cannot score an empty edge list".into()));
    }
    cache.score_pairs(tape, &edges.src, &edges.dst)
}

/// Sigmoid probabilities plus per-destination softmax of `logits`.
pub fn normalize_channels(
    tape: &mut Tape,
    logits: Vec<Tensor>,
    edges: &EdgeIndex,
    input: SoftmaxInput,
) -> Result<ChannelWeights> {
    let mut probs = Vec::with_capacity(logits.len());
    let mut weights = Vec::with_capacity(logits.len());
    for &l in &logits {
        let p = tape.sigmoid(l);
        let s = match input {
            SoftmaxInput::Probability => p,
            SoftmaxInput::Logit => l,
        };
        weights.push(tape.segment_softmax(s, edges.dst.clone())?);
        probs.push(p);
    }
    Ok(ChannelWeights {
        logits,
        probs,
        weights,
    })
}

/// One edge-disentangling layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DisLayer {
    pub spec: LayerSpec,
    pub scorer: ChannelScorer,
    pub w_feat: Vec<ParamId>,
    pub w_agg: ParamId,
}

/// Everything a layer's forward pass leaves behind for the losses.
#[derive(Clone, Debug)]
pub struct LayerOutput {
    pub input: Tensor,
    pub output: Tensor,
    pub weights: ChannelWeights,
    pub channel_outputs: Vec<Tensor>,
    pub cache: ScorerCache,
}

impl DisLayer {
    pub fn new(spec: LayerSpec, store: &mut ParamStore, prefix: &str, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let scorer = ChannelScorer::new(&spec, store, prefix, rng);
        let w_feat = (0..spec.channels)
            .map(|i| {
                store.add(
                    format!("{prefix}.feat{i}"),
                    ParamGroup::Extractor,
                    glorot(spec.d_in, spec.d_channel, rng),
                )
            })
            .collect();
        let fused = spec.channels * spec.channel_width();
        let w_agg = store.add(
            format!("{prefix}.agg"),
            ParamGroup::Extractor,
            glorot(fused, spec.d_out, rng),
        );
        Ok(Self {
            spec,
            scorer,
            w_feat,
            w_agg,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.scorer.param_ids();
        ids.extend(&self.w_feat);
        ids.push(self.w_agg);
        ids
    }

    /// Per-channel neighbourhood aggregation.
    pub fn channel_aggregate(
        &self,
        tape: &mut Tape,
        params: &Bindings,
        h: Tensor,
        weights: &ChannelWeights,
        edges: &EdgeIndex,
    ) -> Result<Vec<Tensor>> {
        if weights.channels() != self.spec.channels {
            return Err(Error::Contract(format!(
                "{} channel weights for a {}-channel layer",
                weights.channels(),
                self.spec.channels
            )));
        }
        let mut outs = Vec::with_capacity(self.spec.channels);
        for (i, &wf) in self.w_feat.iter().enumerate() {
            let projected = tape.matmul(h, params.get(wf))?;
            let msgs = tape.gather(projected, edges.src.clone())?;
            let out = match self.spec.backend {
                Backend::Attn => {
                    let w = match self.spec.renormalize {
                        Renormalize::None => weights.weights[i],
                        Renormalize::Symmetric => {
                            symmetric_renormalize(tape, weights.weights[i], edges)?
                        }
                    };
                    tape.segment_weighted_sum(w, msgs, edges.dst.clone(), edges.n)?
                }
                Backend::Gcn => {
                    let coef = tape.constant(edges.gcn_coef.clone());
                    let w = tape.mul(weights.probs[i], coef)?;
                    tape.segment_weighted_sum(w, msgs, edges.dst.clone(), edges.n)?
                }
                Backend::Sage => {
                    let coef = tape.constant(edges.mean_coef.clone());
                    let w = tape.mul(weights.probs[i], coef)?;
                    let neigh = tape.segment_weighted_sum(w, msgs, edges.dst.clone(), edges.n)?;
                    tape.concat_cols(projected, neigh)?
                }
            };
            outs.push(out);
        }
        Ok(outs)
    }

    /// `LeakyReLU([h⁰ ‖ … ‖ hᵐ] · W_agg)`.
    pub fn fuse_channels(&self, tape: &mut Tape, params: &Bindings, outs: &[Tensor]) -> Result<Tensor> {
        fuse(tape, params.get(self.w_agg), outs, self.spec.channels, self.spec.slope)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Bindings,
        h: Tensor,
        edges: &EdgeIndex,
    ) -> Result<LayerOutput> {
        if h.cols() != self.spec.d_in || h.rows() != edges.n {
            return Err(Error::Dimension {
                op: "layer_forward",
                left: h.shape(),
                right: (edges.n, self.spec.d_in),
            });
        }
        let cache = self.scorer.project(tape, params, h)?;
        let logits = score_edges(tape, &cache, edges)?;
        let weights = normalize_channels(tape, logits, edges, self.spec.softmax_input)?;
        let channel_outputs = self.channel_aggregate(tape, params, h, &weights, edges)?;
        let output = self.fuse_channels(tape, params, &channel_outputs)?;
        Ok(LayerOutput {
            input: h,
            output,
            weights,
            channel_outputs,
            cache,
        })
    }
}

/// Concatenates `outs` column-wise and applies the fusion map.
pub fn fuse(
    tape: &mut Tape,
    w_agg: Tensor,
    outs: &[Tensor],
    expected: usize,
    slope: f64,
) -> Result<Tensor> {
    if outs.len() != expected || outs.is_empty() {
        return Err(Error::Contract(format!(
            "fusion expects {expected} channel outputs, got {}",
            outs.len()
        )));
    }
    let mut cat = outs[0];
    for &o in &outs[1..] {
        if o.shape() != outs[0].shape() {
            return Err(Error::Dimension {
                op: "fuse_channels",
                left: outs[0].shape(),
                right: o.shape(),
            });
        }
        cat = tape.concat_cols(cat, o)?;
    }
    let z = tape.matmul(cat, w_agg)?;
    Ok(tape.leaky_relu(z, slope))
}

fn symmetric_renormalize(tape: &mut Tape, w: Tensor, edges: &EdgeIndex) -> Result<Tensor> {
    let ones = tape.constant(Matrix::filled(edges.len(), 1, 1.0));
    let out_weight = tape.segment_weighted_sum(w, ones, edges.src.clone(), edges.n)?;
    let per_edge = tape.gather(out_weight, edges.src.clone())?;
    let inv_sqrt = tape.powf(per_edge, -0.5);
    tape.mul(w, inv_sqrt)
}

/// Shared edge list for a batch of pairs given as `(src, dst)` tuples.
pub fn pair_indices(pairs: &[(usize, usize)]) -> (Indices, Indices) {
    let src: Arc<[usize]> = pairs.iter().map(|p| p.0).collect::<Vec<_>>().into();
    let dst: Arc<[usize]> = pairs.iter().map(|p| p.1).collect::<Vec<_>>().into();
    (src, dst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn spec(channels: usize, d_in: usize, scorer: ScorerKind, backend: Backend) -> LayerSpec {
        LayerSpec {
            channels,
            d_in,
            d_channel: 2,
            d_out: 3,
            scorer_hidden: 2,
            scorer,
            backend,
            slope: 0.2,
            softmax_input: SoftmaxInput::Probability,
            renormalize: Renormalize::None,
        }
    }

    fn star(leaves: usize) -> Graph {
        let edges: Vec<_> = (1..=leaves).map(|l| (0, l)).collect();
        let feats = Matrix::from_vec(
            leaves + 1,
            2,
            (0..(leaves + 1) * 2).map(|i| (i as f64 * 0.37).sin()).collect(),
        )
        .unwrap();
        Graph::from_undirected(feats, edges, vec![None; leaves + 1], 1)
            .unwrap()
            .0
            .add_self_loops()
    }

    fn zero_all(store: &mut ParamStore, ids: &[ParamId]) {
        for &id in ids {
            let v = store.value_mut(id);
            *v = Matrix::zeros(v.rows(), v.cols());
        }
    }

    #[test]
    fn zero_scorer_gives_half_probabilities() {
        for kind in [ScorerKind::Mlp, ScorerKind::Go, ScorerKind::Dp] {
            let g = star(3);
            let mut store = ParamStore::new();
            let layer = DisLayer::new(spec(2, 2, kind, Backend::Attn), &mut store, "l", &mut rng::seeded(1)).unwrap();
            zero_all(&mut store, &layer.scorer.param_ids());
            let mut tape = Tape::new();
            let b = Bindings::bind(&mut tape, &store, &[ParamGroup::Extractor]);
            let h = tape.constant(g.features().clone());
            let ei = EdgeIndex::new(&g);
            let out = layer.forward(&mut tape, &b, h, &ei).unwrap();
            for c in 0..2 {
                assert!(tape.value(out.weights.logits[c]).as_slice().iter().all(|&x| x == 0.0));
                assert!(tape.value(out.weights.probs[c]).as_slice().iter().all(|&x| x == 0.5));
            }
        }
    }

    #[test]
    fn dot_product_orthogonal_is_zero() {
        let mut store = ParamStore::new();
        let w = store.add("w", ParamGroup::Extractor, Matrix::identity(2));
        let scorer = ChannelScorer {
            kind: ScorerKind::Dp,
            channels: vec![ChannelParams::Dp { w }],
            slope: 0.2,
        };
        let mut tape = Tape::new();
        let b = Bindings::bind(&mut tape, &store, &[]);
        let h = tape.constant(Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 3.0]]));
        let cache = scorer.project(&mut tape, &b, h).unwrap();
        let (src, dst) = pair_indices(&[(1, 0)]);
        let l = cache.score_pairs(&mut tape, &src, &dst).unwrap();
        assert_eq!(tape.value(l[0]).item(), 0.0);
    }

    #[test]
    fn mlp_hand_case() {
        // W1 = [[1, 1]] over [h_v, h_u], W2 = [[1]], h = (1, -2)
        let mut store = ParamStore::new();
        let g = ParamGroup::Extractor;
        let scorer = ChannelScorer {
            kind: ScorerKind::Mlp,
            channels: vec![ChannelParams::Mlp {
                w_dst: store.add("d", g, Matrix::scalar(1.0)),
                w_src: store.add("s", g, Matrix::scalar(1.0)),
                w_out: store.add("o", g, Matrix::scalar(1.0)),
            }],
            slope: 0.2,
        };
        let mut tape = Tape::new();
        let b = Bindings::bind(&mut tape, &store, &[]);
        let h = tape.constant(Matrix::column(&[1.0, -2.0]));
        let cache = scorer.project(&mut tape, &b, h).unwrap();
        let (src, dst) = pair_indices(&[(1, 0)]);
        let l = cache.score_pairs(&mut tape, &src, &dst).unwrap();
        assert!((tape.value(l[0]).item() - (-0.2)).abs() < 1e-15);
    }

    #[test]
    fn normalisation_cases() {
        let g = star(2);
        let ei = EdgeIndex::new(&g);
        assert!(ei.has_all_groups());
        let mut tape = Tape::new();
        // logits (0,1,2) into node 0 from its self loop and two leaves
        let mut logit = vec![0.0; ei.len()];
        let into0: Vec<usize> = (0..ei.len()).filter(|&e| ei.dst[e] == 0).collect();
        assert_eq!(into0.len(), 3);
        for (k, &e) in into0.iter().enumerate() {
            logit[e] = k as f64;
        }
        let l = tape.constant(Matrix::column(&logit));
        let w = normalize_channels(&mut tape, vec![l], &ei, SoftmaxInput::Logit).unwrap();
        let v = tape.value(w.weights[0]).as_slice();
        let z: f64 = (0..3).map(|k| (k as f64).exp()).sum();
        for (k, &e) in into0.iter().enumerate() {
            assert!((v[e] - (k as f64).exp() / z).abs() < 1e-6);
        }
        // leaves have a self loop and the hub: equal logits split evenly
        for e in (0..ei.len()).filter(|&e| ei.dst[e] != 0) {
            assert_eq!(v[e], 0.5);
        }
        let single = Graph::from_undirected(Matrix::zeros(1, 1), [], vec![None], 1)
            .unwrap()
            .0
            .add_self_loops();
        let ei = EdgeIndex::new(&single);
        let l = tape.constant(Matrix::column(&[3.0]));
        let w = normalize_channels(&mut tape, vec![l], &ei, SoftmaxInput::Probability).unwrap();
        assert_eq!(tape.value(w.weights[0]).item(), 1.0);
    }

    #[test]
    fn lone_node_attention_is_projection() {
        let g = Graph::from_undirected(Matrix::from_rows(&[&[0.3, -1.2]]), [], vec![None], 1)
            .unwrap()
            .0
            .add_self_loops();
        let mut store = ParamStore::new();
        let layer = DisLayer::new(spec(2, 2, ScorerKind::Mlp, Backend::Attn), &mut store, "l", &mut rng::seeded(4)).unwrap();
        let mut tape = Tape::new();
        let b = Bindings::bind(&mut tape, &store, &[]);
        let h = tape.constant(g.features().clone());
        let ei = EdgeIndex::new(&g);
        let out = layer.forward(&mut tape, &b, h, &ei).unwrap();
        for (i, &o) in out.channel_outputs.iter().enumerate() {
            let expect = g.features().matmul(store.value(layer.w_feat[i])).unwrap();
            assert_eq!(tape.value(o), &expect);
        }
        assert_eq!(out.output.shape(), (1, 3));
    }

    #[test]
    fn gcn_with_unit_probabilities_is_normalised_convolution() {
        let g = star(3);
        let ei = EdgeIndex::new(&g);
        let mut store = ParamStore::new();
        let layer = DisLayer::new(spec(1, 2, ScorerKind::Mlp, Backend::Gcn), &mut store, "l", &mut rng::seeded(2)).unwrap();
        let mut tape = Tape::new();
        let b = Bindings::bind(&mut tape, &store, &[]);
        let h = tape.constant(g.features().clone());
        let ones = tape.constant(Matrix::filled(ei.len(), 1, 1.0));
        let cw = ChannelWeights {
            logits: vec![ones],
            probs: vec![ones],
            weights: vec![ones],
        };
        let out = layer.channel_aggregate(&mut tape, &b, h, &cw, &ei).unwrap();

        let n = g.num_nodes();
        let mut a = Matrix::zeros(n, n);
        for &(s, d) in g.edges() {
            a.set(d, s, 1.0);
        }
        let deg: Vec<f64> = (0..n).map(|r| a.row(r).iter().sum()).collect();
        let norm = Matrix::from_vec(
            n,
            n,
            (0..n * n).map(|k| a.get(k / n, k % n) / (deg[k / n] * deg[k % n]).sqrt()).collect(),
        )
        .unwrap();
        let hw = g.features().matmul(store.value(layer.w_feat[0])).unwrap();
        let dense = norm.matmul(&hw).unwrap();
        for (x, y) in tape.value(out[0]).as_slice().iter().zip(dense.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_weights_on_star_average_leaves() {
        let g = star(4);
        let ei = EdgeIndex::new(&g);
        let mut store = ParamStore::new();
        let layer = DisLayer::new(spec(1, 2, ScorerKind::Mlp, Backend::Attn), &mut store, "l", &mut rng::seeded(3)).unwrap();
        zero_all(&mut store, &layer.scorer.param_ids());
        let mut tape = Tape::new();
        let b = Bindings::bind(&mut tape, &store, &[]);
        let h = tape.constant(g.features().clone());
        let out = layer.forward(&mut tape, &b, h, &ei).unwrap();
        let hw = g.features().matmul(store.value(layer.w_feat[0])).unwrap();
        let centre = tape.value(out.channel_outputs[0]).row(0).to_vec();
        for c in 0..2 {
            let mean = (0..5).map(|v| hw.get(v, c)).sum::<f64>() / 5.0;
            assert!((centre[c] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn sage_concatenates_self_term() {
        let g = star(2);
        let ei = EdgeIndex::new(&g);
        let mut store = ParamStore::new();
        let layer = DisLayer::new(spec(2, 2, ScorerKind::Mlp, Backend::Sage), &mut store, "l", &mut rng::seeded(5)).unwrap();
        assert_eq!(store.value(layer.w_agg).rows(), 2 * 4);
        let mut tape = Tape::new();
        let b = Bindings::bind(&mut tape, &store, &[]);
        let h = tape.constant(g.features().clone());
        let out = layer.forward(&mut tape, &b, h, &ei).unwrap();
        assert_eq!(out.channel_outputs[0].shape(), (3, 4));
        let hw = g.features().matmul(store.value(layer.w_feat[0])).unwrap();
        assert_eq!(&tape.value(out.channel_outputs[0]).row(1)[..2], hw.row(1));
    }

    #[test]
    fn fuse_hand_cases() {
        let mut tape = Tape::new();
        let h = tape.constant(Matrix::column(&[1.0, -1.0]));
        let eye = tape.constant(Matrix::identity(1));
        let y = fuse(&mut tape, eye, &[h], 1, 0.2).unwrap();
        assert_eq!(tape.value(y).as_slice(), &[1.0, -0.2]);

        let zero = tape.constant(Matrix::zeros(2, 1));
        let w = tape.constant(Matrix::column(&[2.0, 3.0]));
        let y = fuse(&mut tape, w, &[zero, zero], 2, 0.2).unwrap();
        assert_eq!(tape.value(y).as_slice(), &[0.0, 0.0]);

        // 2 channels, 1 dim: [1, 2]·[2, -3]ᵀ = -4 -> -0.8 ; [0.5, 0]·w = 1
        let a = tape.constant(Matrix::column(&[1.0, 0.5]));
        let b = tape.constant(Matrix::column(&[2.0, 0.0]));
        let w = tape.constant(Matrix::column(&[2.0, -3.0]));
        let y = fuse(&mut tape, w, &[a, b], 2, 0.2).unwrap();
        let v = tape.value(y).as_slice();
        assert!((v[0] + 0.8).abs() < 1e-15 && (v[1] - 1.0).abs() < 1e-15);

        assert!(fuse(&mut tape, w, &[a], 2, 0.2).is_err());
    }

    #[test]
    fn symmetric_renormalisation_runs() {
        let g = star(3);
        let ei = EdgeIndex::new(&g);
        let mut s = spec(2, 2, ScorerKind::Mlp, Backend::Attn);
        s.renormalize = Renormalize::Symmetric;
        let mut store = ParamStore::new();
        let layer = DisLayer::new(s, &mut store, "l", &mut rng::seeded(6)).unwrap();
        let mut tape = Tape::new();
        let b = Bindings::bind(&mut tape, &store, &[ParamGroup::Extractor]);
        let h = tape.constant(g.features().clone());
        let out = layer.forward(&mut tape, &b, h, &ei).unwrap();
        assert!(tape.value(out.output).is_finite());
    }
}
