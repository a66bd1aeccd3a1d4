//! Classification metrics, channel correlation and disentanglement scores.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DisGnnModel, PreparedGraph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Masked nodes whose true class is this one.
    pub support: usize,
    /// False when the class occurs neither in the truth nor in the
    /// predictions on the mask; such classes are left out of `macro_f1`.
    pub counted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassScores>,
    /// `confusion[truth][pred]`.
    pub confusion: Vec<Vec<usize>>,
    pub evaluated: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy and macro-F over the masked, labelled nodes.
pub fn compute_metrics(
    pred: &[usize],
    truth: &[Option<usize>],
    mask: &[bool],
    num_classes: usize,
) -> Result<MetricsReport> {
    if pred.len() != truth.len() || mask.len() != truth.len() {
        return Err(Error::Contract(format!(
            "{} predictions, {} labels and {} mask entries",
            pred.len(),
            truth.len(),
            mask.len()
        )));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    let mut evaluated = 0;
    for v in 0..pred.len() {
        if let (true, Some(t)) = (mask[v], truth[v]) {
            if t >= num_classes || pred[v] >= num_classes {
                return Err(Error::Contract(format!(
                    "node {v}: class {} or {} outside 0..{num_classes}",
                    t, pred[v]
                )));
            }
            confusion[t][pred[v]] += 1;
            evaluated += 1;
        }
    }
    if evaluated == 0 {
        return Err(Error::Contract("mask selects no labelled node".into()));
    }
    let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
    let per_class: Vec<ClassScores> = (0..num_classes)
        .map(|c| {
            let tp = confusion[c][c];
            let support: usize = confusion[c].iter().sum();
            let predicted: usize = confusion.iter().map(|row| row[c]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassScores {
                class: c,
                precision,
                recall,
                f1,
                support,
                counted: support > 0 || predicted > 0,
            }
        })
        .collect();
    let counted: Vec<f64> = per_class.iter().filter(|s| s.counted).map(|s| s.f1).collect();
    Ok(MetricsReport {
        accuracy: ratio(correct, evaluated),
        macro_f1: counted.iter().sum::<f64>() / counted.len() as f64,
        per_class,
        confusion,
        evaluated,
    })
}

/// Per-edge channel values of one layer, self-loops left out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerChannels {
    pub layer: usize,
    /// Directed `(src, dst)` pairs.
    pub edges: Vec<(usize, usize)>,
    /// Position of each pair in the prepared graph's edge list.
    pub edge_ids: Vec<usize>,
    /// Normalised aggregation weights, `[channel][edge]`.
    pub weights: Vec<Vec<f64>>,
    /// Sigmoid probabilities, `[channel][edge]`.
    pub probs: Vec<Vec<f64>>,
}

impl LayerChannels {
    pub fn values(&self, source: ValueSource) -> &[Vec<f64>] {
        match source {
            ValueSource::Weights => &self.weights,
            ValueSource::Probabilities => &self.probs,
        }
    }
}

/// Which per-edge channel quantity an analysis reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueSource {
    #[default]
    Weights,
    Probabilities,
}

/// Runs the model once and collects the channel values of `layer`.
pub fn layer_channels(model: &DisGnnModel, pg: &PreparedGraph, layer: usize) -> Result<LayerChannels> {
    if layer >= model.layers.len() {
        return Err(Error::Index {
            op: "layer",
            position: 0,
            index: layer,
            bound: model.layers.len(),
        });
    }
    let (tape, _, out) = model.run(pg, &[])?;
    let w = &out.layers[layer].weights;
    let keep: Vec<usize> = pg
        .graph
        .edges()
        .iter()
        .enumerate()
        .filter_map(|(i, &(s, d))| (s != d).then_some(i))
        .collect();
    let pick = |rows: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        rows.into_iter().map(|r| keep.iter().map(|&i| r[i]).collect()).collect()
    };
    Ok(LayerChannels {
        layer,
        edges: keep.iter().map(|&i| pg.graph.edges()[i]).collect(),
        edge_ids: keep.clone(),
        weights: pick(w.weight_values(&tape)),
        probs: pick(w.prob_values(&tape)),
    })
}

/// Pearson coefficients between channels. Entries involving a constant
/// channel are undefined; they are stored as 0 and flagged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelCorrelation {
    pub coefficients: Vec<Vec<f64>>,
    pub constant: Vec<bool>,
}

impl ChannelCorrelation {
    pub fn channels(&self) -> usize {
        self.coefficients.len()
    }

    /// Mean off-diagonal coefficient inside the two channel halves minus the
    /// mean coefficient across halves. Flagged entries are skipped.
    pub fn half_block_gap(&self) -> f64 {
        let m = self.channels();
        let half = m / 2;
        let (mut within, mut nw, mut cross, mut nc) = (0.0, 0usize, 0.0, 0usize);
        for i in 0..m {
            for j in i + 1..m {
                if self.constant[i] || self.constant[j] {
                    continue;
                }
                if (i < half) == (j < half) {
                    within += self.coefficients[i][j];
                    nw += 1;
                } else {
                    cross += self.coefficients[i][j];
                    nc += 1;
                }
            }
        }
        if nw == 0 || nc == 0 {
            return 0.0;
        }
        within / nw as f64 - cross / nc as f64
    }
}

fn is_constant(x: &[f64], mean: f64) -> bool {
    let scale = 1.0 + mean.abs();
    x.iter().all(|&v| (v - mean).abs() <= 1e-12 * scale)
}

/// Pearson correlation matrix of per-edge channel values (`[channel][edge]`).
pub fn channel_correlation(values: &[Vec<f64>]) -> Result<ChannelCorrelation> {
    let m = values.len();
    let e = values.first().map_or(0, Vec::len);
    if values.iter().any(|v| v.len() != e) {
        return Err(Error::Contract("channels disagree on the number of edges".into()));
    }
    if e < 2 {
        return Err(Error::Contract(format!("correlation needs at least 2 edges, got {e}")));
    }
    let means: Vec<f64> = values.iter().map(|v| v.iter().sum::<f64>() / e as f64).collect();
    let constant: Vec<bool> = values.iter().zip(&means).map(|(v, &mu)| is_constant(v, mu)).collect();
    let centred: Vec<Vec<f64>> = values
        .iter()
        .zip(&means)
        .map(|(v, &mu)| v.iter().map(|x| x - mu).collect())
        .collect();
    let norms: Vec<f64> = centred.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut coefficients = vec![vec![0.0; m]; m];
    for i in 0..m {
        if constant[i] {
            continue;
        }
        coefficients[i][i] = 1.0;
        for j in i + 1..m {
            if constant[j] {
                continue;
            }
            let dot: f64 = centred[i].iter().zip(&centred[j]).map(|(a, b)| a * b).sum();
            let r = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            coefficients[i][j] = r;
            coefficients[j][i] = r;
        }
    }
    Ok(ChannelCorrelation {
        coefficients,
        constant,
    })
}

/// ROC-AUC of `scores` as a detector of `positive`, via the rank-sum
/// statistic with average ranks for ties. `None` without both classes.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let n_pos = n_pos as f64;
    Some((rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelMatch {
    pub channel: usize,
    pub relation: usize,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisentanglementReport {
    /// Relation ids scored, in column order of `auc`.
    pub relations: Vec<usize>,
    /// Relations left out because no edge (or every edge) belongs to them.
    pub skipped: Vec<usize>,
    /// `auc[channel][relation column]`.
    pub auc: Vec<Vec<f64>>,
    /// Greedy one-to-one assignment, best pairs first.
    pub matching: Vec<ChannelMatch>,
}

impl DisentanglementReport {
    pub fn mean_matched_auc(&self) -> f64 {
        if self.matching.is_empty() {
            return f64::NAN;
        }
        self.matching.iter().map(|m| m.auc).sum::<f64>() / self.matching.len() as f64
    }
}

/// Scores every channel against every relation. `factors[e]` is the
/// generating relation of edge `e`; edges with `None` are ignored.
pub fn disentanglement_auc(
    probs: &[Vec<f64>],
    factors: &[Option<usize>],
    relation_ids: &[usize],
) -> Result<DisentanglementReport> {
    if probs.iter().any(|p| p.len() != factors.len()) {
        return Err(Error::Contract("channel values and edge factors differ in length".into()));
    }
    let known: Vec<usize> = (0..factors.len()).filter(|&e| factors[e].is_some()).collect();
    let mut relations = Vec::new();
    let mut skipped = Vec::new();
    let mut columns: Vec<Vec<bool>> = Vec::new();
    for &r in relation_ids {
        let positive: Vec<bool> = known.iter().map(|&e| factors[e] == Some(r)).collect();
        let hits = positive.iter().filter(|&&p| p).count();
        if hits == 0 || hits == positive.len() {
            log::warn!("relation {r}: {hits} of {} edges, skipped", positive.len());
            skipped.push(r);
        } else {
            relations.push(r);
            columns.push(positive);
        }
    }
    let auc: Vec<Vec<f64>> = probs
        .iter()
        .map(|p| {
            let scores: Vec<f64> = known.iter().map(|&e| p[e]).collect();
            columns
                .iter()
                .map(|pos| roc_auc(&scores, pos).expect("both classes present"))
                .collect()
        })
        .collect();

    let mut pairs: Vec<(usize, usize)> = (0..auc.len())
        .flat_map(|c| (0..relations.len()).map(move |r| (c, r)))
        .collect();
    pairs.sort_by(|&(c1, r1), &(c2, r2)| auc[c2][r2].total_cmp(&auc[c1][r1]).then((c1, r1).cmp(&(c2, r2))));
    let mut used_c = vec![false; auc.len()];
    let mut used_r = vec![false; relations.len()];
    let mut matching = Vec::new();
    for (c, r) in pairs {
        if !used_c[c] && !used_r[r] {
            used_c[c] = true;
            used_r[r] = true;
            matching.push(ChannelMatch {
                channel: c,
                relation: relations[r],
                auc: auc[c][r],
            });
        }
    }
    Ok(DisentanglementReport {
        relations,
        skipped,
        auc,
        matching,
    })
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Contract(format!("{}: {other:?}", path.display())),
    }
}

/// One row per class plus `accuracy` and `macro_f1` summary rows.
pub fn write_metrics_csv(report: &MetricsReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["metric", "class", "value"]).map_err(csv_err(path))?;
    w.write_record(["accuracy", "", &report.accuracy.to_string()]).map_err(csv_err(path))?;
    w.write_record(["macro_f1", "", &report.macro_f1.to_string()]).map_err(csv_err(path))?;
    for s in &report.per_class {
        let class = s.class.to_string();
        for (name, v) in [
            ("precision", s.precision),
            ("recall", s.recall),
            ("f1", s.f1),
            ("support", s.support as f64),
        ] {
            w.write_record([name, &class, &v.to_string()]).map_err(csv_err(path))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Square matrix with a `channel` header column; flagged entries are written
/// as empty cells.
pub fn write_correlation_csv(corr: &ChannelCorrelation, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let m = corr.channels();
    let mut header = vec!["channel".to_string()];
    header.extend((0..m).map(|j| format!("c{j}")));
    w.write_record(&header).map_err(csv_err(path))?;
    for i in 0..m {
        let mut row = vec![format!("c{i}")];
        row.extend((0..m).map(|j| {
            if corr.constant[i] || corr.constant[j] {
                String::new()
            } else {
                corr.coefficients[i][j].to_string()
            }
        }));
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Channel × relation AUC table followed by the greedy matching.
pub fn write_auc_csv(report: &DisentanglementReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["channel", "relation", "auc", "matched"]).map_err(csv_err(path))?;
    for (c, row) in report.auc.iter().enumerate() {
        for (k, &r) in report.relations.iter().enumerate() {
            let matched = report.matching.iter().any(|m| m.channel == c && m.relation == r);
            w.write_record([c.to_string(), r.to_string(), row[k].to_string(), matched.to_string()])
                .map_err(csv_err(path))?;
        }
    }
    for &r in &report.skipped {
        w.write_record([String::new(), r.to_string(), String::new(), "skipped".into()])
            .map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Terminal heatmap of a correlation matrix; darker is closer to +1.
pub fn render_heatmap(corr: &ChannelCorrelation, out: &mut impl Write) -> std::io::Result<()> {
    const RAMP: &[char] = &[' ', '.', ':', '-', '=', '+', '*', '#', '%', '@'];
    let m = corr.channels();
    write!(out, "    ")?;
    for j in 0..m {
        write!(out, "{:>3}", j)?;
    }
    writeln!(out)?;
    for i in 0..m {
        write!(out, "{i:>3} ")?;
        for j in 0..m {
            let cell = if corr.constant[i] || corr.constant[j] {
                '?'
            } else {
                let t = (corr.coefficients[i][j] + 1.0) / 2.0;
                RAMP[((t * (RAMP.len() - 1) as f64).round() as usize).min(RAMP.len() - 1)]
            };
            write!(out, "  {cell}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}
