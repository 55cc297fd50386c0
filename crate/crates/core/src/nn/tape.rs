//! Reverse-mode differentiation over small dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its value; [`Tape::backward`] walks the nodes in reverse and accumulates
//! adjoints. All values are row-major `rows x cols` matrices; scalars are
//! `1 x 1`.

use super::NnError;
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Sparse square operator `y = S x` given as `(row, col, weight)` triples.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOp {
    pub n: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Propagate(Var, Rc<SparseOp>),
    MeanRows(Var),
    SoftmaxCrossEntropy(Var, usize),
    TemperedKl { student: Var, teacher_probs: Vec<f64>, temperature: f64 },
    SquaredError(Var, f64),
    SumScalars(Vec<Var>),
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| ((z - mx) / temperature).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Softmax of `logits / temperature`.
pub fn softmax_tempered(logits: &[f64], temperature: f64) -> Vec<f64> {
    softmax(logits, temperature)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Result<Var, NnError> {
        debug_assert_eq!(value.len(), rows * cols);
        if value.iter().any(|x| !x.is_finite()) {
            return Err(NnError::NonFinite);
        }
        self.nodes.push(Node { rows, cols, value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var, NnError> {
        if value.len() != rows * cols {
            return Err(NnError::ShapeMismatch(format!("leaf of {rows}x{cols} given {} values", value.len())));
        }
        self.push(rows, cols, value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(NnError::ShapeMismatch(format!("matmul {ar}x{ac} by {br}x{bc}")));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; ar * bc];
        for i in 0..ar {
            for k in 0..ac {
                let x = av[i * ac + k];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[k * bc..(k + 1) * bc];
                let orow = &mut out[i * bc..(i + 1) * bc];
                for (o, &y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        self.push(ar, bc, out, Op::MatMul(a, b))
    }

    /// `a + 1 bias` with `bias` of shape `1 x cols`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, NnError> {
        let (r, c) = self.shape(a);
        if self.shape(bias) != (1, c) {
            return Err(NnError::ShapeMismatch(format!("bias {:?} for {r}x{c}", self.shape(bias))));
        }
        let bv = self.value(bias).to_vec();
        let out: Vec<f64> = self.value(a).iter().enumerate().map(|(i, x)| x + bv[i % c]).collect();
        self.push(r, c, out, Op::AddBias(a, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        if self.shape(a) != self.shape(b) {
            return Err(NnError::ShapeMismatch(format!("add {:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push(r, c, out, Op::Add(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var, NnError> {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * k).collect();
        self.push(r, c, out, Op::Scale(a, k))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NnError> {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        self.push(r, c, out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NnError> {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        self.push(r, c, out, Op::Sigmoid(a))
    }

    /// `S a` for a sparse `n x n` operator.
    pub fn propagate(&mut self, a: Var, s: Rc<SparseOp>) -> Result<Var, NnError> {
        let (r, c) = self.shape(a);
        if s.n != r {
            return Err(NnError::ShapeMismatch(format!("propagation over {} nodes applied to {r} rows", s.n)));
        }
        let av = self.value(a);
        let mut out = vec![0.0; r * c];
        for &(i, j, w) in &s.entries {
            for k in 0..c {
                out[i * c + k] += w * av[j * c + k];
            }
        }
        self.push(r, c, out, Op::Propagate(a, s))
    }

    /// Column means, `1 x cols`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, NnError> {
        let (r, c) = self.shape(a);
        if r == 0 {
            return Err(NnError::ShapeMismatch("mean over zero rows".into()));
        }
        let av = self.value(a);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for k in 0..c {
                out[k] += av[i * c + k];
            }
        }
        for x in &mut out {
            *x /= r as f64;
        }
        self.push(1, c, out, Op::MeanRows(a))
    }

    /// `-log softmax(logits)[label]` for a `1 x k` row of logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var, NnError> {
        let (r, c) = self.shape(logits);
        if r != 1 || label >= c {
            return Err(NnError::ShapeMismatch(format!("cross-entropy on {r}x{c} with label {label}")));
        }
        let lv = self.value(logits);
        let mx = lv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + lv.iter().map(|z| (z - mx).exp()).sum::<f64>().ln();
        let loss = lse - lv[label];
        self.push(1, 1, vec![loss], Op::SoftmaxCrossEntropy(logits, label))
    }

    /// `T^2 KL(p_teacher || softmax(student / T))`.
    pub fn tempered_kl(&mut self, student: Var, teacher_probs: &[f64], temperature: f64) -> Result<Var, NnError> {
        let (r, c) = self.shape(student);
        if r != 1 || teacher_probs.len() != c {
            return Err(NnError::ShapeMismatch(format!("KL on {r}x{c} with {} teacher classes", teacher_probs.len())));
        }
        let q = softmax(self.value(student), temperature);
        let kl: f64 = teacher_probs
            .iter()
            .zip(&q)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, qi)| p * (p.ln() - qi.ln()))
            .sum();
        self.push(
            1,
            1,
            vec![temperature * temperature * kl.max(0.0)],
            Op::TemperedKl { student, teacher_probs: teacher_probs.to_vec(), temperature },
        )
    }

    /// `(a - target)^2` for a scalar `a`.
    pub fn squared_error(&mut self, a: Var, target: f64) -> Result<Var, NnError> {
        if self.shape(a) != (1, 1) {
            return Err(NnError::ShapeMismatch("squared error expects a scalar".into()));
        }
        let d = self.scalar(a) - target;
        self.push(1, 1, vec![d * d], Op::SquaredError(a, target))
    }

    pub fn sum_scalars(&mut self, xs: &[Var]) -> Result<Var, NnError> {
        if xs.iter().any(|&x| self.shape(x) != (1, 1)) {
            return Err(NnError::ShapeMismatch("sum_scalars expects scalars".into()));
        }
        let s = xs.iter().map(|&x| self.scalar(x)).sum();
        self.push(1, 1, vec![s], Op::SumScalars(xs.to_vec()))
    }

    /// Adjoints of every node with respect to the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Adjoints, NnError> {
        if self.shape(root) != (1, 1) {
            return Err(NnError::ShapeMismatch("backward from a non-scalar".into()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(vec![1.0]);

        fn acc(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            adj[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (ar, ac) = self.shape(*a);
                    let bc = node.cols;
                    let (av, bv) = (self.value(*a), self.value(*b));
                    // dA = G B^T
                    let da = acc(&mut adj, *a, ar * ac);
                    for i in 0..ar {
                        for k in 0..ac {
                            let mut s = 0.0;
                            for j in 0..bc {
                                s += g[i * bc + j] * bv[k * bc + j];
                            }
                            da[i * ac + k] += s;
                        }
                    }
                    // dB = A^T G
                    let db = acc(&mut adj, *b, ac * bc);
                    for i in 0..ar {
                        for k in 0..ac {
                            let x = av[i * ac + k];
                            if x == 0.0 {
                                continue;
                            }
                            for j in 0..bc {
                                db[k * bc + j] += x * g[i * bc + j];
                            }
                        }
                    }
                }
                Op::AddBias(a, bias) => {
                    let c = node.cols;
                    let da = acc(&mut adj, *a, g.len());
                    for (d, x) in da.iter_mut().zip(&g) {
                        *d += x;
                    }
                    let db = acc(&mut adj, *bias, c);
                    for (i, x) in g.iter().enumerate() {
                        db[i % c] += x;
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        let d = acc(&mut adj, v, g.len());
                        for (d, x) in d.iter_mut().zip(&g) {
                            *d += x;
                        }
                    }
                }
                Op::Scale(a, k) => {
                    let d = acc(&mut adj, *a, g.len());
                    for (d, x) in d.iter_mut().zip(&g) {
                        *d += k * x;
                    }
                }
                Op::Relu(a) => {
                    let av = self.value(*a);
                    let d = acc(&mut adj, *a, g.len());
                    for i in 0..g.len() {
                        if av[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let d = acc(&mut adj, *a, g.len());
                    for i in 0..g.len() {
                        d[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
                Op::Propagate(a, s) => {
                    let c = node.cols;
                    let d = acc(&mut adj, *a, g.len());
                    for &(i, j, w) in &s.entries {
                        for k in 0..c {
                            d[j * c + k] += w * g[i * c + k];
                        }
                    }
                }
                Op::MeanRows(a) => {
                    let (r, c) = self.shape(*a);
                    let d = acc(&mut adj, *a, r * c);
                    for i in 0..r {
                        for k in 0..c {
                            d[i * c + k] += g[k] / r as f64;
                        }
                    }
                }
                Op::SoftmaxCrossEntropy(a, label) => {
                    let p = softmax(self.value(*a), 1.0);
                    let d = acc(&mut adj, *a, p.len());
                    for (k, pk) in p.iter().enumerate() {
                        let y = if k == *label { 1.0 } else { 0.0 };
                        d[k] += g[0] * (pk - y);
                    }
                }
                Op::TemperedKl { student, teacher_probs, temperature } => {
                    let q = softmax(self.value(*student), *temperature);
                    let d = acc(&mut adj, *student, q.len());
                    for k in 0..q.len() {
                        d[k] += g[0] * temperature * (q[k] - teacher_probs[k]);
                    }
                }
                Op::SquaredError(a, t) => {
                    let diff = self.scalar(*a) - t;
                    acc(&mut adj, *a, 1)[0] += g[0] * 2.0 * diff;
                }
                Op::SumScalars(xs) => {
                    for &x in xs {
                        acc(&mut adj, x, 1)[0] += g[0];
                    }
                }
            }
            adj[idx] = Some(g);
        }
        if adj.iter().flatten().flatten().any(|x| !x.is_finite()) {
            return Err(NnError::NonFinite);
        }
        Ok(Adjoints(adj))
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Adjoints(Vec<Option<Vec<f64>>>);

impl Adjoints {
    /// Adjoint of `v`, or `None` if `v` does not influence the root.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.0[v.0].as_deref()
    }

    /// Adjoint of `v`, zeros if it does not influence the root.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }
}
