//! Attributed graph with labels, split masks and the labelled edge
//! partition used by the conformity signal.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::rng::{self, stream};

/// Attributed graph. Edges are directed `(src, dst)` pairs; undirected input
/// is stored in both directions.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    features: Matrix,
    edges: Vec<(usize, usize)>,
    labels: Vec<Option<usize>>,
    num_classes: usize,
    pub masks: Masks,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Masks {
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
}

impl Masks {
    pub fn empty(n: usize) -> Self {
        Self {
            train: vec![false; n],
            val: vec![false; n],
            test: vec![false; n],
        }
    }

    pub fn train_nodes(&self) -> Vec<usize> {
        indices(&self.train)
    }

    pub fn val_nodes(&self) -> Vec<usize> {
        indices(&self.val)
    }

    pub fn test_nodes(&self) -> Vec<usize> {
        indices(&self.test)
    }
}

fn indices(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect()
}

/// What ingestion dropped.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub duplicate_edges: usize,
    pub self_edges: usize,
}

impl Graph {
    /// Builds a graph from undirected edges. Both directions are stored,
    /// self edges and duplicates are dropped, and edges are sorted.
    pub fn from_undirected(
        features: Matrix,
        edges: impl IntoIterator<Item = (usize, usize)>,
        labels: Vec<Option<usize>>,
        num_classes: usize,
    ) -> Result<(Self, IngestStats)> {
        let n = features.rows();
        if labels.len() != n {
            return Err(Error::Contract(format!(
                "{} labels for {n} nodes",
                labels.len()
            )));
        }
        if let Some((v, c)) = labels
            .iter()
            .enumerate()
            .find_map(|(v, l)| l.filter(|&c| c >= num_classes).map(|c| (v, c)))
        {
            return Err(Error::Contract(format!(
                "node {v} has label {c} but there are {num_classes} classes"
            )));
        }
        let mut stats = IngestStats::default();
        let mut seen = HashSet::new();
        for (position, (u, v)) in edges.into_iter().enumerate() {
            for index in [u, v] {
                if index >= n {
                    return Err(Error::Index {
                        op: "edge endpoint",
                        position,
                        index,
                        bound: n,
                    });
                }
            }
            if u == v {
                stats.self_edges += 1;
                continue;
            }
            let key = (u.min(v), u.max(v));
            if !seen.insert(key) {
                stats.duplicate_edges += 1;
            }
        }
        let mut directed: Vec<(usize, usize)> =
            seen.into_iter().flat_map(|(a, b)| [(a, b), (b, a)]).collect();
        directed.sort_unstable();
        Ok((
            Self {
                features,
                edges: directed,
                labels,
                num_classes,
                masks: Masks::empty(n),
            },
            stats,
        ))
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    /// Undirected view: each pair once with `src < dst`, self-loops skipped.
    pub fn undirected_edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied().filter(|&(s, d)| s < d)
    }

    /// Indices of edges that are not self-loops.
    pub fn non_loop_edges(&self) -> Vec<usize> {
        self.edges
            .iter()
            .enumerate()
            .filter_map(|(i, &(s, d))| (s != d).then_some(i))
            .collect()
    }

    pub fn edge_set(&self) -> HashSet<(usize, usize)> {
        self.edges.iter().copied().collect()
    }

    /// In-degree counting self-loops.
    pub fn in_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes()];
        for &(_, d) in &self.edges {
            deg[d] += 1;
        }
        deg
    }

    /// Number of ordered, distinct, unconnected node pairs.
    pub fn unconnected_pairs(&self) -> usize {
        let n = self.num_nodes();
        let connected = self.edges.iter().filter(|(s, d)| s != d).count();
        n * n.saturating_sub(1) - connected
    }

    /// Returns a copy with one `(v, v)` edge for every node that lacks one.
    pub fn add_self_loops(&self) -> Self {
        let mut has = vec![false; self.num_nodes()];
        for &(s, d) in &self.edges {
            if s == d {
                has[s] = true;
            }
        }
        let mut g = self.clone();
        g.edges
            .extend(has.iter().enumerate().filter(|(_, &h)| !h).map(|(v, _)| (v, v)));
        g
    }

    pub fn with_masks(mut self, masks: Masks) -> Self {
        self.masks = masks;
        self
    }

    /// Labels restricted to the nodes visible under `source`.
    pub fn visible_labels(&self, source: LabelSource) -> Vec<Option<usize>> {
        self.labels
            .iter()
            .enumerate()
            .map(|(v, &l)| {
                let visible = match source {
                    LabelSource::Train => self.masks.train[v],
                    LabelSource::TrainVal => self.masks.train[v] || self.masks.val[v],
                    LabelSource::All => true,
                };
                l.filter(|_| visible)
            })
            .collect()
    }
}

/// Stratified per-class split. Per class of size `k`, `round(ratio·k)` nodes
/// go to train and validation, the remainder to test. Unlabelled nodes are
/// in no mask.
pub fn split_nodes(g: &Graph, ratios: (f64, f64, f64), seed: u64) -> Result<Masks> {
    let (tr, va, te) = ratios;
    if tr <= 0.0 || va <= 0.0 || te <= 0.0 || (tr + va + te - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must be positive and sum to 1, got {ratios:?}"
        )));
    }
    let n = g.num_nodes();
    let mut by_class = vec![Vec::new(); g.num_classes];
    for (v, l) in g.labels.iter().enumerate() {
        if let Some(c) = l {
            by_class[*c].push(v);
        }
    }
    let mut rng = rng::derive(seed, stream::SPLIT, 0);
    let mut masks = Masks::empty(n);
    for (class, nodes) in by_class.iter_mut().enumerate() {
        let k = nodes.len();
        if k == 0 {
            continue;
        }
        if k < 3 {
            return Err(Error::Stratification { class, size: k });
        }
        nodes.shuffle(&mut rng);
        let n_train = ((tr * k as f64).round() as usize).clamp(1, k - 2);
        let n_val = ((va * k as f64).round() as usize).clamp(1, k - n_train - 1);
        for (i, &v) in nodes.iter().enumerate() {
            if i < n_train {
                masks.train[v] = true;
            } else if i < n_train + n_val {
                masks.val[v] = true;
            } else {
                masks.test[v] = true;
            }
        }
    }
    Ok(masks)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    #[default]
    Train,
    TrainVal,
    All,
}

/// Edge indices split by label agreement of their endpoints.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EdgePartition {
    /// Both endpoint labels visible and equal.
    pub homo: Vec<usize>,
    /// Both endpoint labels visible and different.
    pub hetero: Vec<usize>,
    /// At least one endpoint label hidden.
    pub unknown: Vec<usize>,
    /// `(v, v)` edges, which carry no relational information.
    pub self_loops: Vec<usize>,
}

pub fn partition_edges(g: &Graph, source: LabelSource) -> Result<EdgePartition> {
    let labels = g.visible_labels(source);
    let mut p = EdgePartition::default();
    for (i, &(s, d)) in g.edges.iter().enumerate() {
        if s == d {
            p.self_loops.push(i);
            continue;
        }
        match (labels[s], labels[d]) {
            (Some(a), Some(b)) if a == b => p.homo.push(i),
            (Some(_), Some(_)) => p.hetero.push(i),
            _ => p.unknown.push(i),
        }
    }
    if p.homo.is_empty() && p.hetero.is_empty() {
        return Err(Error::Partition(
            "no edge has both endpoint labels visible".into(),
        ));
    }
    Ok(p)
}

/// `count` distinct ordered pairs `(v, u)`, `v != u`, that are not edges.
pub fn negative_candidates(g: &Graph, count: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let mut rng = rng::seeded(seed);
    sample_non_edges(g, &g.edge_set(), count, &mut rng)
}

pub(crate) fn sample_non_edges(
    g: &Graph,
    edges: &HashSet<(usize, usize)>,
    count: usize,
    rng: &mut rng::Rng,
) -> Result<Vec<(usize, usize)>> {
    let n = g.num_nodes();
    let available = g.unconnected_pairs();
    if count > available {
        return Err(Error::Sampling(format!(
            "requested {count} unconnected pairs but only {available} exist"
        )));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    if count * 2 > available {
        // dense regime: enumerate and shuffle instead of rejecting
        let mut all: Vec<(usize, usize)> = (0..n)
            .flat_map(|v| (0..n).map(move |u| (v, u)))
            .filter(|&(v, u)| v != u && !edges.contains(&(v, u)))
            .collect();
        let (picked, _) = all.partial_shuffle(rng, count);
        return Ok(picked.to_vec());
    }
    let mut chosen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let v = rng.random_range(0..n);
        let u = rng.random_range(0..n);
        if v == u || edges.contains(&(v, u)) || !chosen.insert((v, u)) {
            continue;
        }
        out.push((v, u));
    }
    Ok(out)
}
