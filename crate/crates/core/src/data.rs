//! Dataset files and the planted multi-relation generator.
//!
//! On-disk layout of a dataset directory:
//!
//! * `nodes.csv` with header `id,label,f0,..,f{d-1}`; label `?` marks an
//!   unlabelled node
//! * `edges.csv` with header `src,dst`, one undirected edge per line
//! * `meta.json` with `{name, num_classes, directed: false, provenance}`
//! * `edge_factors.csv` with header `src,dst,factor` (synthetic data only)

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::graph::{Graph, IngestStats};
use crate::rng::{self, stream};

pub const NODES_FILE: &str = "nodes.csv";
pub const EDGES_FILE: &str = "edges.csv";
pub const META_FILE: &str = "meta.json";
pub const FACTORS_FILE: &str = "edge_factors.csv";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub num_classes: usize,
    #[serde(default)]
    pub provenance: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaFile {
    name: String,
    num_classes: usize,
    directed: bool,
    #[serde(default)]
    provenance: String,
}

/// Ground-truth relation of one undirected edge, `u < v`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EdgeFactor {
    pub u: usize,
    pub v: usize,
    pub factor: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub graph: Graph,
    pub meta: DatasetMeta,
    /// One entry per undirected edge, in `Graph::undirected_edges` order.
    pub edge_factors: Option<Vec<EdgeFactor>>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub nodes: usize,
    pub edges: usize,
    pub homo_edges: usize,
    pub hetero_edges: usize,
    /// Edges with at least one unlabelled endpoint.
    pub unknown_edges: usize,
}

impl DatasetBundle {
    pub fn new(graph: Graph, meta: DatasetMeta, edge_factors: Option<Vec<EdgeFactor>>) -> Result<Self> {
        if meta.num_classes != graph.num_classes() {
            return Err(Error::Contract(format!(
                "meta declares {} classes, graph has {}",
                meta.num_classes,
                graph.num_classes()
            )));
        }
        if let Some(f) = &edge_factors {
            let undirected: Vec<_> = graph.undirected_edges().collect();
            if f.len() != undirected.len() || f.iter().zip(&undirected).any(|(a, &(u, v))| (a.u, a.v) != (u, v)) {
                return Err(Error::Contract(
                    "edge factors must list every undirected edge exactly once, in order".into(),
                ));
            }
        }
        Ok(Self {
            graph,
            meta,
            edge_factors,
        })
    }

    pub fn summary(&self) -> DatasetSummary {
        let labels = self.graph.labels();
        let mut s = DatasetSummary {
            nodes: self.graph.num_nodes(),
            ..DatasetSummary::default()
        };
        for (u, v) in self.graph.undirected_edges() {
            s.edges += 1;
            match (labels[u], labels[v]) {
                (Some(a), Some(b)) if a == b => s.homo_edges += 1,
                (Some(_), Some(_)) => s.hetero_edges += 1,
                _ => s.unknown_edges += 1,
            }
        }
        s
    }

    /// Factor of every directed edge of the graph, `None` for self-loops or
    /// edges missing from the factor table.
    pub fn directed_factors(&self, g: &Graph) -> Option<Vec<Option<usize>>> {
        let table: HashMap<(usize, usize), usize> = self
            .edge_factors
            .as_ref()?
            .iter()
            .map(|f| ((f.u, f.v), f.factor))
            .collect();
        Some(
            g.edges()
                .iter()
                .map(|&(s, d)| table.get(&(s.min(d), s.max(d))).copied())
                .collect(),
        )
    }
}

fn ingestion(file: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Ingestion {
        file: file.to_path_buf(),
        line: line as usize,
        msg: msg.into(),
    }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    ingestion(path, line, e.to_string())
}

fn check_header(path: &Path, reader: &mut csv::Reader<File>, expected: &[&str]) -> Result<csv::StringRecord> {
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let ok = header.len() >= expected.len() && expected.iter().zip(header.iter()).all(|(a, b)| *a == b);
    if !ok {
        return Err(ingestion(
            path,
            1,
            format!("header must start with {}, found {:?}", expected.join(","), header.iter().collect::<Vec<_>>()),
        ));
    }
    Ok(header)
}

fn read_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = dir.join(META_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: MetaFile =
        serde_json::from_str(&text).map_err(|e| ingestion(&path, e.line() as u64, e.to_string()))?;
    if meta.directed {
        return Err(ingestion(&path, 1, "directed graphs are not supported"));
    }
    if meta.num_classes == 0 {
        return Err(ingestion(&path, 1, "num_classes must be positive"));
    }
    Ok(DatasetMeta {
        name: meta.name,
        num_classes: meta.num_classes,
        provenance: meta.provenance,
    })
}

/// Reads a dataset directory. Node ids are remapped to `0..n` in file order.
pub fn load_dataset(dir: &Path) -> Result<(DatasetBundle, IngestStats)> {
    let meta = read_meta(dir)?;

    let path = dir.join(NODES_FILE);
    let mut reader = csv_reader(&path)?;
    let header = check_header(&path, &mut reader, &["id", "label"])?;
    let d = header.len() - 2;
    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(&path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != d + 2 {
            return Err(ingestion(
                &path,
                line,
                format!("expected {} columns, found {}", d + 2, record.len()),
            ));
        }
        let id = record[0].to_string();
        if ids.insert(id.clone(), labels.len()).is_some() {
            return Err(ingestion(&path, line, format!("duplicate node id {id:?}")));
        }
        let label = match &record[1] {
            "?" => None,
            s => {
                let c: usize = s
                    .parse()
                    .map_err(|_| ingestion(&path, line, format!("label {s:?} is not a non-negative integer")))?;
                if c >= meta.num_classes {
                    return Err(ingestion(
                        &path,
                        line,
                        format!("label {c} out of range for {} classes", meta.num_classes),
                    ));
                }
                Some(c)
            }
        };
        labels.push(label);
        for (j, field) in record.iter().skip(2).enumerate() {
            let x: f64 = field
                .parse()
                .map_err(|_| ingestion(&path, line, format!("feature f{j} {field:?} is not a number")))?;
            if !x.is_finite() {
                return Err(ingestion(&path, line, format!("feature f{j} is not finite")));
            }
            data.push(x);
        }
    }
    let n = labels.len();
    let features = Matrix::from_vec(n, d, data)?;

    let lookup = |path: &Path, line: u64, id: &str| {
        ids.get(id)
            .copied()
            .ok_or_else(|| ingestion(path, line, format!("unknown node id {id:?}")))
    };

    let path = dir.join(EDGES_FILE);
    let mut reader = csv_reader(&path)?;
    check_header(&path, &mut reader, &["src", "dst"])?;
    let mut edges = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(&path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 2 {
            return Err(ingestion(&path, line, format!("expected 2 columns, found {}", record.len())));
        }
        edges.push((lookup(&path, line, &record[0])?, lookup(&path, line, &record[1])?));
    }
    let (graph, stats) = Graph::from_undirected(features, edges, labels, meta.num_classes)?;
    if stats.duplicate_edges > 0 || stats.self_edges > 0 {
        log::info!(
            "{}: dropped {} duplicate and {} self edges",
            dir.display(),
            stats.duplicate_edges,
            stats.self_edges
        );
    }

    let path = dir.join(FACTORS_FILE);
    let edge_factors = if path.exists() {
        let mut reader = csv_reader(&path)?;
        check_header(&path, &mut reader, &["src", "dst", "factor"])?;
        let mut table = HashMap::new();
        for record in reader.records() {
            let record = record.map_err(|e| csv_error(&path, e))?;
            let line = record.position().map_or(0, |p| p.line());
            if record.len() != 3 {
                return Err(ingestion(&path, line, format!("expected 3 columns, found {}", record.len())));
            }
            let u = lookup(&path, line, &record[0])?;
            let v = lookup(&path, line, &record[1])?;
            let factor: usize = record[2]
                .parse()
                .map_err(|_| ingestion(&path, line, format!("factor {:?} is not an integer", &record[2])))?;
            table.insert((u.min(v), u.max(v)), (factor, line));
        }
        let mut factors = Vec::with_capacity(table.len());
        for (u, v) in graph.undirected_edges() {
            let (factor, _) = table
                .remove(&(u, v))
                .ok_or_else(|| ingestion(&path, 0, format!("no factor for edge ({u},{v})")))?;
            factors.push(EdgeFactor { u, v, factor });
        }
        if let Some((_, line)) = table.values().min_by_key(|(_, l)| *l) {
            return Err(ingestion(&path, *line, "factor given for an edge not in edges.csv"));
        }
        Some(factors)
    } else {
        None
    };

    Ok((DatasetBundle::new(graph, meta, edge_factors)?, stats))
}

fn write_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Contract(format!("{}: {other:?}", path.display())),
    }
}

/// Writes the bundle in the layout read by [`load_dataset`]. Features are
/// written in shortest round-trip form, so reloading is bit exact.
pub fn save_dataset(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let g = &bundle.graph;

    let meta = MetaFile {
        name: bundle.meta.name.clone(),
        num_classes: bundle.meta.num_classes,
        directed: false,
        provenance: bundle.meta.provenance.clone(),
    };
    let path = dir.join(META_FILE);
    let text = serde_json::to_string_pretty(&meta)? + "\n";
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;

    let path = dir.join(NODES_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(write_err(&path))?;
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend((0..g.feature_dim()).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(write_err(&path))?;
    for v in 0..g.num_nodes() {
        let mut row = vec![v.to_string(), g.labels()[v].map_or("?".into(), |c| c.to_string())];
        row.extend(g.features().row(v).iter().map(|x| x.to_string()));
        w.write_record(&row).map_err(write_err(&path))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join(EDGES_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(write_err(&path))?;
    w.write_record(["src", "dst"]).map_err(write_err(&path))?;
    for (u, v) in g.undirected_edges() {
        w.write_record([u.to_string(), v.to_string()]).map_err(write_err(&path))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join(FACTORS_FILE);
    match &bundle.edge_factors {
        Some(factors) => {
            let mut w = csv::Writer::from_path(&path).map_err(write_err(&path))?;
            w.write_record(["src", "dst", "factor"]).map_err(write_err(&path))?;
            for f in factors {
                w.write_record([f.u.to_string(), f.v.to_string(), f.factor.to_string()])
                    .map_err(write_err(&path))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        None => {
            if path.exists() {
                std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
            }
        }
    }
    Ok(())
}

/// Converts a LINQS citation release (`<name>.content`: tab separated id,
/// binary word features, class name; `<name>.cites`: cited and citing id per
/// line) into a bundle. Class names are numbered in sorted order. Citations
/// naming a paper missing from the content file are skipped.
pub fn import_linqs(content: &Path, cites: &Path, name: &str) -> Result<(DatasetBundle, IngestStats)> {
    let text = std::fs::read_to_string(content).map_err(|e| Error::io(content, e))?;
    let mut rows = Vec::new();
    let mut width = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 2 {
            return Err(ingestion(content, i as u64 + 1, "expected id, features and class"));
        }
        let d = fields.len() - 2;
        if *width.get_or_insert(d) != d {
            return Err(ingestion(content, i as u64 + 1, format!("expected {} features, found {d}", width.unwrap())));
        }
        rows.push((i + 1, fields));
    }
    let classes: BTreeSet<&str> = rows.iter().map(|(_, f)| *f.last().unwrap()).collect();
    let class_ids: HashMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let d = width.unwrap_or(0);
    let mut ids = HashMap::new();
    let mut labels = Vec::with_capacity(rows.len());
    let mut data = Vec::with_capacity(rows.len() * d);
    for (line, fields) in &rows {
        if ids.insert(fields[0], labels.len()).is_some() {
            return Err(ingestion(content, *line as u64, format!("duplicate paper id {}", fields[0])));
        }
        for f in &fields[1..=d] {
            let x: f64 = f
                .parse()
                .map_err(|_| ingestion(content, *line as u64, format!("feature {f:?} is not a number")))?;
            data.push(x);
        }
        labels.push(Some(class_ids[fields[d + 1]]));
    }
    let n = labels.len();

    let text = std::fs::read_to_string(cites).map_err(|e| Error::io(cites, e))?;
    let mut edges = Vec::new();
    let mut dangling = 0usize;
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            [] => continue,
            [a, b] => match (ids.get(a), ids.get(b)) {
                (Some(&u), Some(&v)) => edges.push((u, v)),
                _ => dangling += 1,
            },
            _ => return Err(ingestion(cites, i as u64 + 1, "expected two paper ids")),
        }
    }
    if dangling > 0 {
        log::warn!("{}: skipped {dangling} citations to unknown papers", cites.display());
    }
    let (graph, stats) = Graph::from_undirected(Matrix::from_vec(n, d, data)?, edges, labels, classes.len())?;
    let meta = DatasetMeta {
        name: name.to_string(),
        num_classes: classes.len(),
        provenance: format!(
            "converted from {} and {}; classes: {}",
            content.display(),
            cites.display(),
            classes.iter().copied().collect::<Vec<_>>().join(" ")
        ),
    };
    Ok((DatasetBundle::new(graph, meta, None)?, stats))
}

/// One edge-generating process of the planted model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationSpec {
    pub id: usize,
    /// Symmetric class-pair affinity, `C × C`.
    pub affinity: Vec<Vec<f64>>,
    /// Mean number of edges per node this process contributes.
    pub expected_degree: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub nodes_per_class: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Minimum pairwise distance between class centroids.
    pub centroid_separation: f64,
    pub noise_std: f64,
    pub relations: Vec<RelationSpec>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SynthSpec {
    /// Four classes with a homophilous process and a process linking each
    /// class to the next one around a cycle.
    fn default() -> Self {
        let c = 4;
        let identity = (0..c).map(|i| (0..c).map(|j| f64::from(u8::from(i == j))).collect()).collect();
        let cyclic = (0..c)
            .map(|i| (0..c).map(|j| f64::from(u8::from((i + 1) % c == j || (j + 1) % c == i))).collect())
            .collect();
        Self {
            nodes_per_class: 100,
            num_classes: c,
            feature_dim: 16,
            centroid_separation: 1.0,
            noise_std: 1.0,
            relations: vec![
                RelationSpec {
                    id: 0,
                    affinity: identity,
                    expected_degree: 4.0,
                },
                RelationSpec {
                    id: 1,
                    affinity: cyclic,
                    expected_degree: 4.0,
                },
            ],
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn num_nodes(&self) -> usize {
        self.nodes_per_class * self.num_classes
    }

    /// Class of node `v`: nodes are assigned to classes round-robin.
    pub fn class_of(&self, v: usize) -> usize {
        v % self.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_classes == 0 || self.nodes_per_class == 0 {
            return bad("num_classes and nodes_per_class must be positive".into());
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive".into());
        }
        if !(self.centroid_separation >= 0.0 && self.centroid_separation.is_finite()) {
            return bad(format!("centroid_separation must be finite and >= 0, got {}", self.centroid_separation));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be finite and >= 0, got {}", self.noise_std));
        }
        if self.relations.is_empty() {
            return bad("at least one relation is required".into());
        }
        let c = self.num_classes;
        let mut seen = BTreeSet::new();
        for (k, r) in self.relations.iter().enumerate() {
            let at = format!("relations[{k}]");
            if !seen.insert(r.id) {
                return bad(format!("{at}.id: duplicate relation id {}", r.id));
            }
            if !(r.expected_degree >= 1.0 && r.expected_degree.is_finite()) {
                return bad(format!("{at}.expected_degree must be >= 1, got {}", r.expected_degree));
            }
            if r.affinity.len() != c || r.affinity.iter().any(|row| row.len() != c) {
                return bad(format!("{at}.affinity must be {c}x{c}"));
            }
            for a in 0..c {
                for b in 0..c {
                    let x = r.affinity[a][b];
                    if !(x >= 0.0 && x.is_finite()) {
                        return bad(format!("{at}.affinity[{a}][{b}] must be finite and >= 0, got {x}"));
                    }
                    if x != r.affinity[b][a] {
                        return bad(format!("{at}.affinity must be symmetric ([{a}][{b}] != [{b}][{a}])"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Scale turning affinities into edge probabilities so that the process
    /// yields `expected_degree` edges per node on average.
    fn probability_scale(&self, r: &RelationSpec) -> Result<f64> {
        let k = self.nodes_per_class as f64;
        let c = self.num_classes;
        let mut pairs_weight = 0.0;
        for a in 0..c {
            pairs_weight += r.affinity[a][a] * k * (k - 1.0) / 2.0;
            for b in a + 1..c {
                pairs_weight += r.affinity[a][b] * k * k;
            }
        }
        if pairs_weight <= 0.0 {
            return Err(Error::Generation(format!("relation {} has no admissible node pair", r.id)));
        }
        let s = r.expected_degree * self.num_nodes() as f64 / 2.0 / pairs_weight;
        let max_aff = r.affinity.iter().flatten().fold(0.0f64, |m, &x| m.max(x));
        if max_aff * s > 1.0 {
            return Err(Error::Generation(format!(
                "relation {}: expected degree {} needs edge probability {:.3} > 1",
                r.id,
                r.expected_degree,
                max_aff * s
            )));
        }
        Ok(s)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthStats {
    /// Edges drawn by each relation, in spec order, collisions included.
    pub drawn: Vec<usize>,
    /// Draws that hit an edge an earlier relation already owned.
    pub collisions: usize,
}

fn centroids(spec: &SynthSpec) -> Result<Vec<Vec<f64>>> {
    const ATTEMPTS: usize = 10_000;
    let mut rng = rng::derive(spec.seed, stream::SYNTH_CENTROIDS, 0);
    let normal = Normal::new(0.0, spec.centroid_separation.max(f64::MIN_POSITIVE)).expect("finite std");
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(spec.num_classes);
    for class in 0..spec.num_classes {
        let found = (0..ATTEMPTS).find_map(|_| {
            let c: Vec<f64> = (0..spec.feature_dim).map(|_| normal.sample(&mut rng)).collect();
            let far = out.iter().all(|o| {
                o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= spec.centroid_separation
            });
            far.then_some(c)
        });
        match found {
            Some(c) => out.push(c),
            None => {
                return Err(Error::Generation(format!(
                    "could not place centroid {class} at distance >= {} in {} dimensions",
                    spec.centroid_separation, spec.feature_dim
                )))
            }
        }
    }
    Ok(out)
}

/// Samples a planted multi-relation graph. Every relation draws each node
/// pair independently with probability `s · affinity[class(u)][class(v)]`.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<(DatasetBundle, SynthStats)> {
    spec.validate()?;
    let n = spec.num_nodes();
    let scales = spec
        .relations
        .iter()
        .map(|r| spec.probability_scale(r))
        .collect::<Result<Vec<_>>>()?;

    let centres = centroids(spec)?;
    let mut rng = rng::derive(spec.seed, stream::SYNTH_FEATURES, 0);
    let noise = Normal::new(0.0, spec.noise_std).expect("finite std");
    let mut data = Vec::with_capacity(n * spec.feature_dim);
    for v in 0..n {
        for &m in &centres[spec.class_of(v)] {
            data.push(m + noise.sample(&mut rng));
        }
    }
    let features = Matrix::from_vec(n, spec.feature_dim, data)?;
    let labels = (0..n).map(|v| Some(spec.class_of(v))).collect();

    let mut owner: HashMap<(usize, usize), usize> = HashMap::new();
    let mut stats = SynthStats {
        drawn: vec![0; spec.relations.len()],
        collisions: 0,
    };
    for (k, (r, s)) in spec.relations.iter().zip(&scales).enumerate() {
        let mut rng = rng::derive(spec.seed, stream::SYNTH_EDGES, k as u64);
        for u in 0..n {
            let cu = spec.class_of(u);
            for v in u + 1..n {
                let p = s * r.affinity[cu][spec.class_of(v)];
                if p > 0.0 && rng.random::<f64>() < p {
                    stats.drawn[k] += 1;
                    if owner.contains_key(&(u, v)) {
                        stats.collisions += 1;
                    } else {
                        owner.insert((u, v), r.id);
                    }
                }
            }
        }
    }
    if stats.collisions > 0 {
        log::info!("synthetic generation: {} edge collisions, first relation kept", stats.collisions);
    }

    let (graph, _) = Graph::from_undirected(features, owner.keys().copied(), labels, spec.num_classes)?;
    let factors = graph
        .undirected_edges()
        .map(|(u, v)| EdgeFactor {
            u,
            v,
            factor: owner[&(u, v)],
        })
        .collect();
    let meta = DatasetMeta {
        name: "synthetic".into(),
        num_classes: spec.num_classes,
        provenance: format!("planted multi-relation generator, seed {}", spec.seed),
    };
    Ok((DatasetBundle::new(graph, meta, Some(factors))?, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> DatasetBundle {
        let feats = Matrix::from_rows(&[&[0.1, 1.0 / 3.0], &[-2.5e-8, 7.0], &[f64::MIN_POSITIVE, -0.0]]);
        let (g, _) = Graph::from_undirected(feats, [(0, 1), (1, 2)], vec![Some(0), None, Some(1)], 2).unwrap();
        let meta = DatasetMeta {
            name: "toy".into(),
            num_classes: 2,
            provenance: "hand made".into(),
        };
        DatasetBundle::new(g, meta, None).unwrap()
    }

    #[test]
    fn toy_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = toy();
        save_dataset(&b, dir.path()).unwrap();
        assert!(!dir.path().join(FACTORS_FILE).exists());
        let (back, stats) = load_dataset(dir.path()).unwrap();
        assert_eq!(back, b);
        assert_eq!(stats, IngestStats::default());
        let nodes = std::fs::read_to_string(dir.path().join(NODES_FILE)).unwrap();
        assert!(nodes.starts_with("id,label,f0,f1\n"));
        assert!(nodes.contains("1,?,"));
    }

    fn write(dir: &Path, nodes: &str, edges: &str) {
        std::fs::write(dir.join(META_FILE), r#"{"name":"t","num_classes":2,"directed":false}"#).unwrap();
        std::fs::write(dir.join(NODES_FILE), nodes).unwrap();
        std::fs::write(dir.join(EDGES_FILE), edges).unwrap();
    }

    #[test]
    fn duplicates_collapse_and_ids_are_remapped() {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            "id,label,f0\n31,0,1\n7,1,2\n1000,?,3\n",
            "src,dst\n31,7\n7,31\n31,7\n1000,1000\n7,1000\n",
        );
        let (b, stats) = load_dataset(dir.path()).unwrap();
        assert_eq!(stats.duplicate_edges, 2);
        assert_eq!(stats.self_edges, 1);
        assert_eq!(b.graph.undirected_edges().collect::<Vec<_>>(), vec![(0, 1), (1, 2)]);
        assert_eq!(b.graph.labels(), &[Some(0), Some(1), None]);
        assert_eq!(b.graph.features().as_slice(), &[1.0, 2.0, 3.0]);
    }

    fn line_of(err: Error) -> usize {
        match err {
            Error::Ingestion { line, .. } => line,
            other => panic!("expected an ingestion error, got {other}"),
        }
    }

    #[test]
    fn errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "id,label,f0,f1\n0,0,1,2\n1,1,3\n", "src,dst\n");
        assert_eq!(line_of(load_dataset(dir.path()).unwrap_err()), 3);

        write(dir.path(), "id,label,f0\n0,0,1\n1,x,3\n", "src,dst\n");
        assert_eq!(line_of(load_dataset(dir.path()).unwrap_err()), 3);

        write(dir.path(), "id,label,f0\n0,0,1\n1,1,3\n", "src,dst\n0,1\n1,9\n");
        assert_eq!(line_of(load_dataset(dir.path()).unwrap_err()), 3);

        write(dir.path(), "id,label,f0\n0,2,1\n", "src,dst\n");
        assert_eq!(line_of(load_dataset(dir.path()).unwrap_err()), 2);
    }

    #[test]
    fn linqs_conversion() {
        let dir = tempfile::tempdir().unwrap();
        let content = dir.path().join("x.content");
        let cites = dir.path().join("x.cites");
        std::fs::write(&content, "35\t0\t1\tTheory\n40\t1\t1\tAI\n9\t0\t0\tTheory\n").unwrap();
        std::fs::write(&cites, "35\t40\n40\t35\n9\t35\n77\t9\n").unwrap();
        let (b, stats) = import_linqs(&content, &cites, "x").unwrap();
        assert_eq!(b.meta.num_classes, 2);
        // classes are numbered alphabetically: AI=0, Theory=1
        assert_eq!(b.graph.labels(), &[Some(1), Some(0), Some(1)]);
        assert_eq!(b.graph.undirected_edges().count(), 2);
        assert_eq!(stats.duplicate_edges, 1);
    }

    fn spec(relations: Vec<RelationSpec>, seed: u64) -> SynthSpec {
        SynthSpec {
            nodes_per_class: 30,
            num_classes: 3,
            feature_dim: 4,
            relations,
            seed,
            ..SynthSpec::default()
        }
    }

    fn identity(c: usize) -> Vec<Vec<f64>> {
        (0..c).map(|i| (0..c).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
    }

    #[test]
    fn identity_affinity_gives_only_homo_edges() {
        let rel = RelationSpec {
            id: 0,
            affinity: identity(3),
            expected_degree: 3.0,
        };
        let (b, stats) = generate_synthetic(&spec(vec![rel], 1)).unwrap();
        let s = b.summary();
        assert!(s.edges > 0);
        assert_eq!(s.hetero_edges, 0);
        assert_eq!(stats.collisions, 0);
        assert!(b.edge_factors.unwrap().iter().all(|f| f.factor == 0));
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let a = generate_synthetic(&SynthSpec::default()).unwrap();
        let b = generate_synthetic(&SynthSpec::default()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SynthSpec {
            seed: 1,
            ..SynthSpec::default()
        })
        .unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn infeasible_degree_is_rejected() {
        let rel = RelationSpec {
            id: 0,
            affinity: identity(3),
            expected_degree: 40.0,
        };
        assert!(matches!(generate_synthetic(&spec(vec![rel], 0)), Err(Error::Generation(_))));
    }

    #[test]
    fn invalid_specs_name_the_field() {
        let mut s = SynthSpec::default();
        s.relations[1].affinity[0][1] = 0.5;
        let err = s.validate().unwrap_err().to_string();
        assert!(err.contains("relations[1].affinity"), "{err}");
        let mut s = SynthSpec::default();
        s.relations[0].expected_degree = 0.5;
        assert!(s.validate().unwrap_err().to_string().contains("relations[0].expected_degree"));
    }

    #[test]
    fn factor_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (b, _) = generate_synthetic(&SynthSpec {
            nodes_per_class: 12,
            ..SynthSpec::default()
        })
        .unwrap();
        save_dataset(&b, dir.path()).unwrap();
        let (back, _) = load_dataset(dir.path()).unwrap();
        assert_eq!(back, b);
    }
}
