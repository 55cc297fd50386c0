use super::tape::{SparseOp, Tape, Var};
use super::NnError;
use crate::graph::Graph;
use crate::rng::rng_for;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::rc::Rc;

/// Width of [`default_node_features`].
pub const DEFAULT_FEATURE_DIM: usize = 4;

const CHECKPOINT_FORMAT: &str = "graphmark-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Degree-only node features `[1, d/10, (d/10)^2, 1/(1+d)]`. Degree-preserving
/// rewiring leaves them unchanged.
pub fn default_node_features(g: &Graph) -> Vec<Vec<f64>> {
    let span = g.node_count().saturating_sub(1).max(1) as f64;
    (0..g.node_count())
        .map(|v| {
            let d = g.degree(v) as f64;
            vec![1.0, d / 10.0, d / span, 1.0 / (1.0 + d)]
        })
        .collect()
}

/// Dense row-major parameter tensor with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    #[serde(skip)]
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, NnError> {
        if values.len() != rows * cols {
            return Err(NnError::ShapeMismatch(format!("{rows}x{cols} tensor given {} values", values.len())));
        }
        Ok(Self { rows, cols, values, grad: None })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, values: vec![0.0; rows * cols], grad: None }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    TaskHead,
    PerceptionHead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSelector {
    All,
    Group(ParamGroup),
    /// Backbone and task head: everything except the perception head.
    BackboneAndTask,
}

impl ParamSelector {
    pub fn includes(self, g: ParamGroup) -> bool {
        match self {
            ParamSelector::All => true,
            ParamSelector::Group(x) => x == g,
            ParamSelector::BackboneAndTask => g != ParamGroup::PerceptionHead,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// Symmetric-normalized neighbourhood mean with self loops, then affine + ReLU.
    Gcn,
    /// `h_v + Σ_u h_u` followed by a two-layer ReLU MLP.
    #[default]
    Gin,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hyper {
    pub layer_kind: LayerKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub num_classes: usize,
    pub head_hidden: usize,
    pub activation: String,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            layer_kind: LayerKind::Gin,
            input_dim: DEFAULT_FEATURE_DIM,
            hidden_dim: 32,
            layers: 2,
            num_classes: 2,
            head_hidden: 16,
            activation: "relu".into(),
        }
    }
}

/// Per-graph loss terms; absent terms contribute nothing.
#[derive(Debug, Clone, Default)]
pub struct GraphObjective {
    /// Cross-entropy against `label`, scaled by `weight`.
    pub task: Option<(usize, f64)>,
    /// Tempered KL against teacher probabilities: `(probs, temperature, weight)`.
    pub kd: Option<(Vec<f64>, f64, f64)>,
    /// Squared error of the perception score against `target`, scaled by `weight`.
    pub wm: Option<(f64, f64)>,
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` with `D̃ = D + I`.
pub fn gcn_propagation(g: &Graph) -> SparseOp {
    let n = g.node_count();
    let inv_sqrt: Vec<f64> = (0..n).map(|v| 1.0 / ((g.degree(v) + 1) as f64).sqrt()).collect();
    let mut entries = Vec::with_capacity(n + 2 * g.edge_count());
    for v in 0..n {
        entries.push((v, v, inv_sqrt[v] * inv_sqrt[v]));
        for &u in g.neighbors(v) {
            entries.push((v, u, inv_sqrt[v] * inv_sqrt[u]));
        }
    }
    SparseOp { n, entries }
}

/// `(1 + eps0) I + A` with `eps0 = 0`.
pub fn gin_propagation(g: &Graph) -> SparseOp {
    let n = g.node_count();
    let mut entries = Vec::with_capacity(n + 2 * g.edge_count());
    for v in 0..n {
        entries.push((v, v, 1.0));
        for &u in g.neighbors(v) {
            entries.push((v, u, 1.0));
        }
    }
    SparseOp { n, entries }
}

/// Rescales `w` so its largest singular value is at most `nu`.
///
/// The singular value is estimated by power iteration on `WᵀW` from the
/// normalized all-ones vector: at least `iters` rounds, then on until the
/// estimate settles. Power iteration approaches σ from below, so stopping
/// early would leave the result above `nu`. The result is `w * min(1, nu/σ)`.
pub fn spectral_normalize(w: &Tensor, nu: f64, iters: usize) -> Tensor {
    let sigma = top_singular_value(w, iters.max(1));
    if sigma <= 0.0 || sigma <= nu {
        return w.clone();
    }
    let k = nu / sigma;
    Tensor { rows: w.rows, cols: w.cols, values: w.values.iter().map(|x| x * k).collect(), grad: None }
}

const SN_MAX_ITERS: usize = 20_000;
const SN_REL_TOL: f64 = 1e-12;

fn top_singular_value(w: &Tensor, iters: usize) -> f64 {
    let (r, c) = (w.rows, w.cols);
    if r == 0 || c == 0 {
        return 0.0;
    }
    let mut v = vec![1.0 / (c as f64).sqrt(); c];
    let mut u = vec![0.0; r];
    let mut sigma = 0.0;
    for round in 0..SN_MAX_ITERS {
        for i in 0..r {
            u[i] = (0..c).map(|j| w.values[i * c + j] * v[j]).sum();
        }
        let un = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if un == 0.0 {
            return 0.0;
        }
        u.iter_mut().for_each(|x| *x /= un);
        for j in 0..c {
            v[j] = (0..r).map(|i| w.values[i * c + j] * u[i]).sum();
        }
        let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if vn == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|x| *x /= vn);
        let settled = vn - sigma <= SN_REL_TOL * vn;
        sigma = vn;
        if round + 1 >= iters && settled {
            break;
        }
    }
    sigma
}

/// Gradients aligned with a model's parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub values: Vec<Vec<f64>>,
    groups: Vec<ParamGroup>,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            values: model.params.iter().map(|p| vec![0.0; p.tensor.len()]).collect(),
            groups: model.params.iter().map(|p| p.group).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.values.iter_mut().flatten().for_each(|x| *x *= k);
    }

    /// Euclidean norm over the selected parameter groups.
    pub fn norm(&self, sel: ParamSelector) -> f64 {
        self.values
            .iter()
            .zip(&self.groups)
            .filter(|(_, g)| sel.includes(**g))
            .flat_map(|(v, _)| v.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub hyper: Hyper,
    pub params: Vec<Param>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    group: ParamGroup,
    shape: [usize; 2],
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    hyper: Hyper,
    params: Vec<CheckpointEntry>,
}

struct Forward {
    logits: Var,
    score: Var,
}

impl Model {
    fn layout(h: &Hyper) -> Vec<(String, ParamGroup, usize, usize)> {
        let mut out = Vec::new();
        let mut d_in = h.input_dim;
        for l in 0..h.layers {
            match h.layer_kind {
                LayerKind::Gcn => {
                    out.push((format!("gcn{l}.weight"), ParamGroup::Backbone, d_in, h.hidden_dim));
                    out.push((format!("gcn{l}.bias"), ParamGroup::Backbone, 1, h.hidden_dim));
                }
                LayerKind::Gin => {
                    out.push((format!("gin{l}.mlp0.weight"), ParamGroup::Backbone, d_in, h.hidden_dim));
                    out.push((format!("gin{l}.mlp0.bias"), ParamGroup::Backbone, 1, h.hidden_dim));
                    out.push((format!("gin{l}.mlp1.weight"), ParamGroup::Backbone, h.hidden_dim, h.hidden_dim));
                    out.push((format!("gin{l}.mlp1.bias"), ParamGroup::Backbone, 1, h.hidden_dim));
                }
            }
            d_in = h.hidden_dim;
        }
        out.push(("task.weight".into(), ParamGroup::TaskHead, d_in, h.num_classes));
        out.push(("task.bias".into(), ParamGroup::TaskHead, 1, h.num_classes));
        out.push(("perception.hidden.weight".into(), ParamGroup::PerceptionHead, d_in, h.head_hidden));
        out.push(("perception.hidden.bias".into(), ParamGroup::PerceptionHead, 1, h.head_hidden));
        out.push(("perception.out.weight".into(), ParamGroup::PerceptionHead, h.head_hidden, 1));
        out.push(("perception.out.bias".into(), ParamGroup::PerceptionHead, 1, 1));
        out
    }

    fn validate_hyper(h: &Hyper) -> Result<(), NnError> {
        if h.input_dim == 0 || h.hidden_dim == 0 || h.layers == 0 || h.num_classes == 0 || h.head_hidden == 0 {
            return Err(NnError::ArchMismatch("all dimensions must be positive".into()));
        }
        if h.activation != "relu" {
            return Err(NnError::ArchMismatch(format!("unsupported activation {}", h.activation)));
        }
        Ok(())
    }

    /// All-zero parameters.
    pub fn zeros(hyper: Hyper) -> Result<Self, NnError> {
        Self::validate_hyper(&hyper)?;
        let params = Self::layout(&hyper)
            .into_iter()
            .map(|(name, group, r, c)| Param { name, group, tensor: Tensor::zeros(r, c) })
            .collect();
        Ok(Self { hyper, params })
    }

    /// Glorot-uniform weights and zero biases, deterministic in `seed`.
    pub fn new(hyper: Hyper, seed: u64) -> Result<Self, NnError> {
        let mut m = Self::zeros(hyper)?;
        for (i, p) in m.params.iter_mut().enumerate() {
            if p.name.ends_with(".bias") {
                continue;
            }
            let (r, c) = (p.tensor.rows, p.tensor.cols);
            let limit = (6.0 / (r + c) as f64).sqrt();
            let mut rng = rng_for(seed, &[i as u64]);
            p.tensor.values.iter_mut().for_each(|x| *x = rng.gen_range(-limit..limit));
        }
        Ok(m)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// All parameter values concatenated in layout order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.tensor.values.iter().copied()).collect()
    }

    /// Overwrites all parameters from a flat vector in layout order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<(), NnError> {
        if flat.len() != self.param_count() {
            return Err(NnError::ShapeMismatch(format!("{} values for {} parameters", flat.len(), self.param_count())));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.tensor.len();
            p.tensor.values.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn same_architecture(&self, other: &Model) -> bool {
        self.hyper == other.hyper
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.tensor.rows == b.tensor.rows && a.tensor.cols == b.tensor.cols)
    }

    /// `‖vec(self) − vec(other)‖₂`.
    pub fn distance(&self, other: &Model) -> Result<f64, NnError> {
        if !self.same_architecture(other) {
            return Err(NnError::ArchMismatch("distance between different architectures".into()));
        }
        Ok(self.flatten().iter().zip(other.flatten()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
    }

    fn input_features(&self, g: &Graph) -> Result<Vec<f64>, NnError> {
        let rows = match g.features() {
            Some(f) => f.to_vec(),
            None => default_node_features(g),
        };
        let width = rows.first().map_or(0, Vec::len);
        if width != self.hyper.input_dim {
            return Err(NnError::ShapeMismatch(format!(
                "graph features have width {width}, model expects {}",
                self.hyper.input_dim
            )));
        }
        Ok(rows.into_iter().flatten().collect())
    }

    fn leaves(&self, tape: &mut Tape) -> Result<Vec<Var>, NnError> {
        self.params.iter().map(|p| tape.leaf(p.tensor.rows, p.tensor.cols, p.tensor.values.clone())).collect()
    }

    fn build(&self, tape: &mut Tape, leaves: &[Var], g: &Graph) -> Result<Forward, NnError> {
        let x = self.input_features(g)?;
        let mut h = tape.leaf(g.node_count(), self.hyper.input_dim, x)?;
        let mut p = 0;
        match self.hyper.layer_kind {
            LayerKind::Gcn => {
                let prop = Rc::new(gcn_propagation(g));
                for _ in 0..self.hyper.layers {
                    let agg = tape.propagate(h, prop.clone())?;
                    let lin = tape.matmul(agg, leaves[p])?;
                    let lin = tape.add_bias(lin, leaves[p + 1])?;
                    h = tape.relu(lin)?;
                    p += 2;
                }
            }
            LayerKind::Gin => {
                let prop = Rc::new(gin_propagation(g));
                for _ in 0..self.hyper.layers {
                    let agg = tape.propagate(h, prop.clone())?;
                    let a = tape.matmul(agg, leaves[p])?;
                    let a = tape.add_bias(a, leaves[p + 1])?;
                    let a = tape.relu(a)?;
                    let b = tape.matmul(a, leaves[p + 2])?;
                    let b = tape.add_bias(b, leaves[p + 3])?;
                    h = tape.relu(b)?;
                    p += 4;
                }
            }
        }
        let z = tape.mean_rows(h)?;
        let logits = tape.matmul(z, leaves[p])?;
        let logits = tape.add_bias(logits, leaves[p + 1])?;
        let s = tape.matmul(z, leaves[p + 2])?;
        let s = tape.add_bias(s, leaves[p + 3])?;
        let s = tape.relu(s)?;
        let s = tape.matmul(s, leaves[p + 4])?;
        let s = tape.add_bias(s, leaves[p + 5])?;
        let score = tape.sigmoid(s)?;
        Ok(Forward { logits, score })
    }

    /// Task logits and perception score without gradients.
    pub fn forward(&self, g: &Graph) -> Result<(Vec<f64>, f64), NnError> {
        let mut tape = Tape::new();
        let leaves = self.leaves(&mut tape)?;
        let f = self.build(&mut tape, &leaves, g)?;
        Ok((tape.value(f.logits).to_vec(), tape.scalar(f.score)))
    }

    /// Perception score `s_θ(g) ∈ (0, 1)`.
    pub fn perception_score(&self, g: &Graph) -> Result<f64, NnError> {
        self.forward(g).map(|(_, s)| s)
    }

    pub fn logits(&self, g: &Graph) -> Result<Vec<f64>, NnError> {
        self.forward(g).map(|(l, _)| l)
    }

    pub fn predict(&self, g: &Graph) -> Result<usize, NnError> {
        let l = self.logits(g)?;
        Ok(l.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).unwrap_or(0))
    }

    fn collect_grads(&self, adj: &super::tape::Adjoints, leaves: &[Var]) -> Gradients {
        Gradients {
            values: self.params.iter().zip(leaves).map(|(p, &v)| adj.get_or_zeros(v, p.tensor.len())).collect(),
            groups: self.params.iter().map(|p| p.group).collect(),
        }
    }

    /// Perception score and its gradient with respect to every parameter.
    pub fn score_with_grad(&self, g: &Graph) -> Result<(f64, Gradients), NnError> {
        let mut tape = Tape::new();
        let leaves = self.leaves(&mut tape)?;
        let f = self.build(&mut tape, &leaves, g)?;
        let adj = tape.backward(f.score)?;
        Ok((tape.scalar(f.score), self.collect_grads(&adj, &leaves)))
    }

    /// Weighted sum of the requested loss terms on one graph, with gradients.
    pub fn objective_with_grad(&self, g: &Graph, obj: &GraphObjective) -> Result<(f64, Gradients), NnError> {
        let mut tape = Tape::new();
        let leaves = self.leaves(&mut tape)?;
        let f = self.build(&mut tape, &leaves, g)?;
        let mut terms = Vec::new();
        if let Some((label, w)) = obj.task {
            let ce = tape.softmax_cross_entropy(f.logits, label)?;
            terms.push(tape.scale(ce, w)?);
        }
        if let Some((probs, temp, w)) = &obj.kd {
            let kl = tape.tempered_kl(f.logits, probs, *temp)?;
            terms.push(tape.scale(kl, *w)?);
        }
        if let Some((target, w)) = obj.wm {
            let se = tape.squared_error(f.score, target)?;
            terms.push(tape.scale(se, w)?);
        }
        if terms.is_empty() {
            return Ok((0.0, Gradients::zeros_like(self)));
        }
        let total = tape.sum_scalars(&terms)?;
        let adj = tape.backward(total)?;
        Ok((tape.scalar(total), self.collect_grads(&adj, &leaves)))
    }

    /// Spectral-normalizes every perception-head weight matrix.
    pub fn apply_spectral_norm(&mut self, nu: f64, iters: usize) {
        for p in &mut self.params {
            if p.group == ParamGroup::PerceptionHead && p.name.ends_with(".weight") {
                p.tensor = spectral_normalize(&p.tensor, nu, iters);
            }
        }
    }

    /// Stores `grads` in the per-tensor gradient buffers.
    pub fn set_grads(&mut self, grads: &Gradients) -> Result<(), NnError> {
        if grads.values.len() != self.params.len() {
            return Err(NnError::ShapeMismatch("gradient list does not match parameters".into()));
        }
        for (p, g) in self.params.iter_mut().zip(&grads.values) {
            if g.len() != p.tensor.len() {
                return Err(NnError::ShapeMismatch(format!("gradient for {} has wrong length", p.name)));
            }
            p.tensor.grad = Some(g.clone());
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.grad = None);
    }

    /// Euclidean norm of the stored gradients over the selected groups.
    pub fn param_grad_norm(&self, sel: ParamSelector) -> Result<f64, NnError> {
        let mut s = 0.0;
        for p in self.params.iter().filter(|p| sel.includes(p.group)) {
            let g = p.tensor.grad.as_ref().ok_or(NnError::GradsAbsent)?;
            s += g.iter().map(|x| x * x).sum::<f64>();
        }
        Ok(s.sqrt())
    }

    pub fn to_checkpoint_json(&self) -> Result<String, NnError> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            hyper: self.hyper.clone(),
            params: self
                .params
                .iter()
                .map(|p| CheckpointEntry {
                    name: p.name.clone(),
                    group: p.group,
                    shape: [p.tensor.rows, p.tensor.cols],
                    values: p.tensor.values.clone(),
                })
                .collect(),
        };
        serde_json::to_string(&ck).map_err(|e| NnError::Checkpoint(e.to_string()))
    }

    pub fn from_checkpoint_json(s: &str) -> Result<Self, NnError> {
        let ck: Checkpoint = serde_json::from_str(s).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
        }
        let mut model = Self::zeros(ck.hyper)?;
        if model.params.len() != ck.params.len() {
            return Err(NnError::Checkpoint("parameter count does not match the architecture".into()));
        }
        for (p, e) in model.params.iter_mut().zip(ck.params) {
            if p.name != e.name || p.group != e.group || [p.tensor.rows, p.tensor.cols] != e.shape {
                return Err(NnError::Checkpoint(format!("unexpected parameter {}", e.name)));
            }
            if e.values.iter().any(|x| !x.is_finite()) {
                return Err(NnError::Checkpoint(format!("non-finite values in {}", e.name)));
            }
            p.tensor = Tensor::new(e.shape[0], e.shape[1], e.values)?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        std::fs::write(path, self.to_checkpoint_json()?).map_err(|e| NnError::Checkpoint(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let s = std::fs::read_to_string(path).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        Self::from_checkpoint_json(&s)
    }
}
