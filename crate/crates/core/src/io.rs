//! Plain-text graphs, TU dataset directories, the synthetic two-class task,
//! and canonical JSON output.
//!
//! Graph text format:
//!
//! ```text
//! n m
//! u v        (m lines, 0-indexed)
//! features d (optional)
//! x_1 .. x_d (n lines)
//! ```
//!
//! Blank lines and lines starting with `#` are ignored.

use crate::graph::{Graph, GraphError};
use crate::nn::default_node_features;
use crate::rng::rng_for;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{file}:{line}: {msg}")]
    MalformedLine { file: String, line: usize, msg: String },
    #[error("{file}:{line}: index out of range")]
    IndexOutOfRange { file: String, line: usize },
    #[error("non-finite or null value in report")]
    NonFinite,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn malformed(file: &str, line: usize, msg: impl Into<String>) -> IoError {
    IoError::MalformedLine { file: file.into(), line, msg: msg.into() }
}

fn parse_fields<T: std::str::FromStr>(file: &str, line: usize, s: &str, sep: &[char]) -> Result<Vec<T>, IoError> {
    s.split(|c: char| sep.contains(&c) || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<T>().map_err(|_| malformed(file, line, format!("cannot parse {t:?}"))))
        .collect()
}

pub fn parse_graph_text(text: &str) -> Result<Graph, IoError> {
    const F: &str = "graph";
    let mut lines = content_lines(text);
    let (ln, header) = lines.next().ok_or_else(|| malformed(F, 1, "missing header"))?;
    let h: Vec<usize> = parse_fields(F, ln, header, &[])?;
    let [n, m] = h[..] else { return Err(malformed(F, ln, "header must be `n m`")) };
    let mut edges = Vec::with_capacity(m);
    for _ in 0..m {
        let (ln, l) = lines.next().ok_or_else(|| malformed(F, ln, "fewer edge lines than declared"))?;
        let e: Vec<usize> = parse_fields(F, ln, l, &[])?;
        let [u, v] = e[..] else { return Err(malformed(F, ln, "edge line must be `u v`")) };
        if u >= n || v >= n {
            return Err(IoError::IndexOutOfRange { file: F.into(), line: ln });
        }
        edges.push((u, v));
    }
    let g = Graph::new(n, edges)?;
    let Some((ln, l)) = lines.next() else { return Ok(g) };
    let d = match l.split_whitespace().collect::<Vec<_>>()[..] {
        ["features", d] => d.parse::<usize>().map_err(|_| malformed(F, ln, "bad feature width"))?,
        _ => return Err(malformed(F, ln, "expected `features d` or end of input")),
    };
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let (ln, l) = lines.next().ok_or_else(|| malformed(F, ln, "fewer feature rows than nodes"))?;
        let row: Vec<f64> = parse_fields(F, ln, l, &[])?;
        if row.len() != d || row.iter().any(|x| !x.is_finite()) {
            return Err(malformed(F, ln, format!("feature row must hold {d} finite values")));
        }
        rows.push(row);
    }
    if let Some((ln, _)) = lines.next() {
        return Err(malformed(F, ln, "trailing content"));
    }
    Ok(g.with_features(rows)?)
}

pub fn format_graph_text(g: &Graph) -> String {
    let mut s = format!("{} {}\n", g.node_count(), g.edge_count());
    for (u, v) in g.edges() {
        s.push_str(&format!("{u} {v}\n"));
    }
    if let Some(f) = g.features() {
        s.push_str(&format!("features {}\n", f.first().map_or(0, Vec::len)));
        for row in f {
            let cells: Vec<String> = row.iter().map(|x| format!("{x:?}")).collect();
            s.push_str(&cells.join(" "));
            s.push('\n');
        }
    }
    s
}

pub fn read_graph(path: &Path) -> Result<Graph, IoError> {
    parse_graph_text(&read_to_string(path)?)
}

fn read_to_string(path: &Path) -> Result<String, IoError> {
    if !path.exists() {
        return Err(IoError::MissingFile(path.to_path_buf()));
    }
    Ok(fs::read_to_string(path)?)
}

/// A graph classification dataset in TU layout.
#[derive(Debug, Clone, PartialEq)]
pub struct TuDataset {
    pub name: String,
    pub graphs: Vec<Graph>,
    /// Class indices into `class_values`.
    pub labels: Vec<usize>,
    /// Raw graph label values, sorted.
    pub class_values: Vec<i64>,
    /// Raw node label values (sorted) when node labels were present; node
    /// features are then one-hot over this list.
    pub node_label_values: Option<Vec<i64>>,
}

fn find_prefix(dir: &Path) -> Result<String, IoError> {
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).map_err(|_| IoError::MissingFile(dir.to_path_buf()))? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(p) = name.strip_suffix("_A.txt") {
            found.push(p.to_string());
        }
    }
    found.sort();
    match found.len() {
        1 => Ok(found.remove(0)),
        0 => Err(IoError::MissingFile(dir.join("<name>_A.txt"))),
        _ => Err(IoError::InvalidArgument(format!("several datasets in {}", dir.display()))),
    }
}

fn read_ints(path: &Path) -> Result<Vec<(usize, i64)>, IoError> {
    let file = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    let text = read_to_string(path)?;
    content_lines(&text)
        .map(|(ln, l)| {
            l.parse::<i64>().map(|v| (ln, v)).map_err(|_| malformed(&file, ln, format!("expected an integer, got {l:?}")))
        })
        .collect()
}

/// Reads `<name>_A.txt`, `<name>_graph_indicator.txt`, `<name>_graph_labels.txt`
/// and, if present, `<name>_node_labels.txt` from `dir`. Node and graph ids are
/// 1-indexed; edges listed in both directions collapse to one.
pub fn load_tudataset(dir: &Path) -> Result<TuDataset, IoError> {
    let name = find_prefix(dir)?;
    let file = |suffix: &str| dir.join(format!("{name}_{suffix}.txt"));

    let indicator = read_ints(&file("graph_indicator"))?;
    let graph_labels = read_ints(&file("graph_labels"))?;
    let n_graphs = graph_labels.len();
    let ind_name = format!("{name}_graph_indicator.txt");
    let mut node_graph = Vec::with_capacity(indicator.len());
    let mut local = Vec::with_capacity(indicator.len());
    let mut sizes = vec![0usize; n_graphs];
    for &(ln, gid) in &indicator {
        if gid < 1 {
            return Err(malformed(&ind_name, ln, "graph ids are 1-indexed"));
        }
        let gi = gid as usize - 1;
        if gi >= n_graphs {
            return Err(IoError::IndexOutOfRange { file: ind_name, line: ln });
        }
        node_graph.push(gi);
        local.push(sizes[gi]);
        sizes[gi] += 1;
    }
    if let Some(gi) = sizes.iter().position(|&s| s == 0) {
        return Err(IoError::InvalidArgument(format!("graph {} has no nodes", gi + 1)));
    }

    let a_name = format!("{name}_A.txt");
    let a_text = read_to_string(&file("A"))?;
    let mut edge_sets: Vec<BTreeSet<(usize, usize)>> = vec![BTreeSet::new(); n_graphs];
    for (ln, l) in content_lines(&a_text) {
        let uv: Vec<usize> = parse_fields(&a_name, ln, l, &[','])?;
        let [u, v] = uv[..] else { return Err(malformed(&a_name, ln, "edge line must be `u, v`")) };
        if u == 0 || v == 0 {
            return Err(malformed(&a_name, ln, "node ids are 1-indexed"));
        }
        if u > node_graph.len() || v > node_graph.len() {
            return Err(IoError::IndexOutOfRange { file: a_name, line: ln });
        }
        let (gu, gv) = (node_graph[u - 1], node_graph[v - 1]);
        if gu != gv {
            return Err(malformed(&a_name, ln, "edge joins two graphs"));
        }
        let (a, b) = (local[u - 1], local[v - 1]);
        if a == b {
            return Err(malformed(&a_name, ln, "self loop"));
        }
        edge_sets[gu].insert((a.min(b), a.max(b)));
    }

    let node_labels_path = file("node_labels");
    let node_labels = if node_labels_path.exists() {
        let nl = read_ints(&node_labels_path)?;
        if nl.len() != node_graph.len() {
            return Err(IoError::InvalidArgument("node label count differs from node count".into()));
        }
        Some(nl.into_iter().map(|(_, v)| v).collect::<Vec<_>>())
    } else {
        None
    };

    let mut graphs: Vec<Graph> = edge_sets
        .into_iter()
        .zip(&sizes)
        .map(|(e, &n)| Graph::new(n, e))
        .collect::<Result<_, _>>()?;
    let node_label_values = node_labels.as_ref().map(|nl| nl.iter().copied().collect::<BTreeSet<_>>().into_iter().collect::<Vec<_>>());
    if let (Some(nl), Some(values)) = (&node_labels, &node_label_values) {
        let mut rows: Vec<Vec<Vec<f64>>> = sizes.iter().map(|&n| vec![vec![0.0; values.len()]; n]).collect();
        for (v, &lab) in nl.iter().enumerate() {
            let c = values.binary_search(&lab).expect("value collected above");
            rows[node_graph[v]][local[v]][c] = 1.0;
        }
        graphs = graphs.into_iter().zip(rows).map(|(g, r)| g.with_features(r)).collect::<Result<_, _>>()?;
    }

    let class_values: Vec<i64> = graph_labels.iter().map(|&(_, v)| v).collect::<BTreeSet<_>>().into_iter().collect();
    let labels = graph_labels.iter().map(|(_, v)| class_values.binary_search(v).expect("present")).collect();
    Ok(TuDataset { name, graphs, labels, class_values, node_label_values })
}

/// Writes `ds` back in TU layout under `dir`. One-hot features are written as
/// node labels; any other feature matrix is rejected.
pub fn write_tudataset(dir: &Path, ds: &TuDataset) -> Result<(), IoError> {
    fs::create_dir_all(dir)?;
    let mut a = String::new();
    let mut ind = String::new();
    let mut nl = String::new();
    let mut offset = 0usize;
    for (gi, g) in ds.graphs.iter().enumerate() {
        for (u, v) in g.edges() {
            a.push_str(&format!("{}, {}\n{}, {}\n", u + offset + 1, v + offset + 1, v + offset + 1, u + offset + 1));
        }
        for v in 0..g.node_count() {
            ind.push_str(&format!("{}\n", gi + 1));
            if let Some(values) = &ds.node_label_values {
                let row = g.features().map(|f| &f[v]).ok_or_else(|| IoError::InvalidArgument("missing node features".into()))?;
                let hot: Vec<usize> = (0..row.len()).filter(|&c| row[c] == 1.0).collect();
                if hot.len() != 1 || row.iter().any(|&x| x != 0.0 && x != 1.0) || row.len() != values.len() {
                    return Err(IoError::InvalidArgument("node features are not one-hot node labels".into()));
                }
                nl.push_str(&format!("{}\n", values[hot[0]]));
            }
        }
        offset += g.node_count();
    }
    let gl: String = ds.labels.iter().map(|&l| format!("{}\n", ds.class_values[l])).collect();
    let file = |suffix: &str| dir.join(format!("{}_{suffix}.txt", ds.name));
    fs::write(file("A"), a)?;
    fs::write(file("graph_indicator"), ind)?;
    fs::write(file("graph_labels"), gl)?;
    if ds.node_label_values.is_some() {
        fs::write(file("node_labels"), nl)?;
    }
    Ok(())
}

/// Labelled graphs with a train/validation/test split.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct TaskData {
    pub graphs: Vec<Graph>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl TaskData {
    /// Stratified 80/10/10 split, shuffled per class with `seed`.
    pub fn with_split(graphs: Vec<Graph>, labels: Vec<usize>, seed: u64) -> Result<Self, IoError> {
        if graphs.len() != labels.len() || graphs.is_empty() {
            return Err(IoError::InvalidArgument("need one label per graph and at least one graph".into()));
        }
        let num_classes = labels.iter().max().map_or(0, |&c| c + 1);
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            by_class.entry(l).or_default().push(i);
        }
        let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for (c, mut idx) in by_class {
            idx.shuffle(&mut rng_for(seed, &[0x5711, c as u64]));
            let n = idx.len();
            let n_val = (n as f64 * 0.1).round() as usize;
            let n_test = (n as f64 * 0.1).round() as usize;
            let n_train = n - n_val - n_test;
            train.extend_from_slice(&idx[..n_train]);
            val.extend_from_slice(&idx[n_train..n_train + n_val]);
            test.extend_from_slice(&idx[n_train + n_val..]);
        }
        for (k, s) in [&mut train, &mut val, &mut test].into_iter().enumerate() {
            s.shuffle(&mut rng_for(seed, &[0x5712, k as u64]));
        }
        Ok(Self { graphs, labels, num_classes, train, val, test })
    }

    pub fn subset(&self, idx: &[usize]) -> Vec<Graph> {
        idx.iter().map(|&i| self.graphs[i].clone()).collect()
    }

    pub fn train_graphs(&self) -> Vec<Graph> {
        self.subset(&self.train)
    }

    /// Feature width of the graphs (the default degree features when absent).
    pub fn feature_dim(&self) -> usize {
        self.graphs
            .first()
            .and_then(|g| g.features().and_then(|f| f.first().map(Vec::len)))
            .unwrap_or(crate::nn::DEFAULT_FEATURE_DIM)
    }
}

fn gnp(n: usize, p: f64, rng: &mut crate::rng::Rng) -> Vec<(usize, usize)> {
    let mut e = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.gen::<f64>() < p {
                e.push((u, v));
            }
        }
    }
    e
}

/// Two-class synthetic graph classification task. Class 0 is `G(n, 0.1)`;
/// class 1 has two near-equal blocks with edge probability 0.5 inside and
/// 0.05 across. Sizes are uniform on `10..=30`, classes alternate so the
/// split is balanced, and node features are [`default_node_features`].
pub fn make_synthetic_task(n_graphs: usize, seed: u64) -> Result<TaskData, IoError> {
    if n_graphs < 10 {
        return Err(IoError::InvalidArgument("need at least 10 graphs".into()));
    }
    let mut graphs = Vec::with_capacity(n_graphs);
    let mut labels = Vec::with_capacity(n_graphs);
    for i in 0..n_graphs {
        let mut rng = rng_for(seed, &[0x6e11, i as u64]);
        let n = rng.gen_range(10..=30);
        let label = i % 2;
        let edges = if label == 0 {
            gnp(n, 0.1, &mut rng)
        } else {
            let half = n / 2;
            let mut e = Vec::new();
            for u in 0..n {
                for v in u + 1..n {
                    let p = if (u < half) == (v < half) { 0.5 } else { 0.05 };
                    if rng.gen::<f64>() < p {
                        e.push((u, v));
                    }
                }
            }
            e
        };
        let g = Graph::new(n, edges)?;
        let f = default_node_features(&g);
        graphs.push(g.with_features(f)?);
        labels.push(label);
    }
    TaskData::with_split(graphs, labels, seed)
}

/// Canonical JSON text: object keys sorted, shortest round-trip floats,
/// two-space indentation, trailing newline. Nulls are refused, which also
/// refuses non-finite floats (serialized as null by serde_json).
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String, IoError> {
    let v = serde_json::to_value(value)?;
    fn check(v: &Value) -> Result<(), IoError> {
        match v {
            Value::Null => Err(IoError::NonFinite),
            Value::Array(a) => a.iter().try_for_each(check),
            Value::Object(o) => o.values().try_for_each(check),
            _ => Ok(()),
        }
    }
    check(&v)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

/// Writes `report` as canonical JSON.
pub fn emit_report<T: Serialize>(report: &T, path: &Path) -> Result<(), IoError> {
    let s = to_canonical_json(report)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    Ok(serde_json::from_str(&read_to_string(path)?)?)
}
