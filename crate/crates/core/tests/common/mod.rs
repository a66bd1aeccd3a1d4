#![allow(dead_code)]

use edgedis::autodiff::{Matrix, ParamGroup, Tape, Tensor};
use edgedis::graph::{Graph, Masks};
use edgedis::model::{full_loss, DisGnnModel, PreparedGraph, TrainConfig};
use edgedis::ssl::{sample_ssl_batch, SslBatch};
use edgedis::Result;

pub const FD_STEP: f64 = 1e-5;

/// Largest relative error between the tape gradient and a central
/// difference, over every entry of every input.
pub fn gradcheck<F>(inputs: &[Matrix], f: F) -> f64
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor>,
{
    let eval = |xs: &[Matrix]| {
        let mut tape = Tape::new();
        let ts: Vec<Tensor> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&mut tape, &ts).unwrap();
        (tape.value(out).item(), tape, ts, out)
    };
    let (_, tape, ts, out) = eval(inputs);
    let grads = tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, t) in ts.iter().enumerate() {
        let analytic = grads.get_or_zeros(*t);
        for i in 0..inputs[k].as_slice().len() {
            let mut xs = inputs.to_vec();
            xs[k].as_mut_slice()[i] += FD_STEP;
            let up = eval(&xs).0;
            xs[k].as_mut_slice()[i] -= 2.0 * FD_STEP;
            let down = eval(&xs).0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.as_slice()[i], numeric));
        }
    }
    worst
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Deterministic matrix with entries spread over roughly [-1, 1] and kept
/// away from zero so kinks are not crossed by the finite difference.
pub fn fixture(rows: usize, cols: usize, salt: u64) -> Matrix {
    let data = (0..rows * cols)
        .map(|i| {
            let x = ((i as u64 * 2654435761 + salt * 97) % 1000) as f64 / 1000.0;
            let v = 2.0 * x - 1.0;
            if v.abs() < 0.05 { v + 0.1 } else { v }
        })
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Two triangles joined by one bridge edge, every node labelled.
pub fn six_node_graph() -> Graph {
    let feats = fixture(6, 3, 11);
    let edges = [(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3), (2, 3)];
    let labels = vec![Some(0), Some(0), Some(1), Some(1), Some(1), Some(0)];
    let (g, _) = Graph::from_undirected(feats, edges, labels, 2).unwrap();
    let mut m = Masks::empty(6);
    m.train = vec![true, true, true, true, false, false];
    m.val[4] = true;
    m.test[5] = true;
    g.with_masks(m)
}

pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        channels: 4,
        d_channel: 3,
        hidden: 4,
        layer2_out: 4,
        scorer_hidden: 3,
        classifier_hidden: 4,
        disc_hidden: 3,
        ..TrainConfig::default()
    }
}

/// Value of `L_full` with every parameter group live.
pub fn full_objective(model: &DisGnnModel, pg: &PreparedGraph, batch: &SslBatch) -> (Tape, edgedis::autodiff::Bindings, Tensor) {
    let all = [ParamGroup::Extractor, ParamGroup::Classifier, ParamGroup::Discriminator];
    let (mut tape, params, out) = model.run(pg, &all).unwrap();
    let (loss, _) = full_loss(&mut tape, &params, model, &out, &pg.graph, Some(batch), 7).unwrap();
    (tape, params, loss)
}

/// Worst relative error of the `L_full` gradient over all parameters.
pub fn full_loss_gradcheck(cfg: &TrainConfig) -> f64 {
    let pg = PreparedGraph::new(&six_node_graph(), cfg).unwrap();
    let model = DisGnnModel::new(cfg, 3, 2).unwrap();
    let part = pg.partition.as_ref().unwrap();
    let batch = sample_ssl_batch(&pg.graph, part, 1.0, cfg.conformity_negatives, 5).unwrap();
    let (tape, params, loss) = full_objective(&model, &pg, &batch);
    let grads = params.collect(&tape, &tape.backward(loss).unwrap());
    let mut worst: f64 = 0.0;
    for (id, g) in grads {
        for i in 0..g.as_slice().len() {
            let mut m = model.clone();
            m.store.value_mut(id).as_mut_slice()[i] += FD_STEP;
            let (t, _, l) = full_objective(&m, &pg, &batch);
            let up = t.value(l).item();
            m.store.value_mut(id).as_mut_slice()[i] -= 2.0 * FD_STEP;
            let (t, _, l) = full_objective(&m, &pg, &batch);
            let down = t.value(l).item();
            worst = worst.max(rel_err(g.as_slice()[i], (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}
