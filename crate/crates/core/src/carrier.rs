//! Carrier generation: degree-preserving rewiring of task graphs, gated on
//! WL-hash novelty and two-sample KS similarity, plus the cross-carrier
//! dependence estimate `ρ̂₀`.
//!
//! Bundle construction runs in rounds. In each round every pending carrier
//! index draws one candidate from its own stream `rng_for(seed, [k, attempt])`
//! (in parallel), checked against the hashes accepted before the round began.
//! Acceptance then walks the candidates in index order and retries any whose
//! hash collides with one accepted earlier in the same round. The output is
//! therefore independent of thread scheduling.

use crate::calibration::special::{inc_beta, kolmogorov_sf};
use crate::graph::wl::hash_words;
use crate::graph::{
    fit_normalization, graph_statistics, local_clustering, normalized_lambda2, percentile, spectrum, Graph, GraphError,
    NormalizationConstants, WlDigest, DEFAULT_DIAG_EPS,
};
use crate::graph::wl_hash_default;
use crate::par::Exec;
use crate::rng::{rng_for, Rng};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashSet};
use thiserror::Error;

pub const BUNDLE_VERSION: u32 = 1;
/// Candidate draws per carrier index before giving up.
pub const MAX_ATTEMPTS_PER_CARRIER: usize = 64;
/// Benjamini–Hochberg level for the `ρ̂₀` screen.
pub const BH_LEVEL: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CarrierError {
    #[error("empty sample")]
    EmptySample,
    #[error("candidate rejected at swap cap")]
    Rejected,
    #[error("protocol exhausted: accepted {accepted} of {needed} carriers")]
    ProtocolExhausted { accepted: usize, needed: usize },
    #[error("invalid protocol parameters: {0}")]
    InvalidParams(String),
    #[error("need at least {needed} carriers, got {got}")]
    InsufficientCarriers { needed: usize, got: usize },
    #[error("bundle invariant violated: {0}")]
    InvalidBundle(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolParams {
    pub swap_start: usize,
    pub swap_increment: usize,
    pub swap_cap: usize,
    pub ks_delta: f64,
    pub size_percentile: f64,
    pub rng_seed: u64,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        Self { swap_start: 5, swap_increment: 5, swap_cap: 50, ks_delta: 0.1, size_percentile: 25.0, rng_seed: 0 }
    }
}

impl ProtocolParams {
    pub fn with_seed(seed: u64) -> Self {
        Self { rng_seed: seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), CarrierError> {
        if self.swap_start == 0 || self.swap_start > self.swap_cap {
            return Err(CarrierError::InvalidParams("need 0 < swap_start <= swap_cap".into()));
        }
        if self.swap_increment == 0 {
            return Err(CarrierError::InvalidParams("swap_increment must be positive".into()));
        }
        if !(self.ks_delta > 0.0 && self.ks_delta < 1.0) {
            return Err(CarrierError::InvalidParams("ks_delta must lie in (0, 1)".into()));
        }
        if !(0.0..=100.0).contains(&self.size_percentile) {
            return Err(CarrierError::InvalidParams("size_percentile must lie in [0, 100]".into()));
        }
        Ok(())
    }

    fn swap_schedule(&self) -> impl Iterator<Item = usize> {
        (self.swap_start..=self.swap_cap).step_by(self.swap_increment)
    }
}

/// Rewires `g` with up to `swaps` accepted double-edge swaps. Each draw
/// picks two distinct edges and an orientation, `(a,b),(c,d) -> (a,d),(c,b)`,
/// and is discarded if it would create a self loop or a duplicate edge. At
/// most `100 * swaps` draws are made; node features are carried over.
pub fn double_edge_swap(g: &Graph, swaps: usize, rng: &mut Rng) -> Graph {
    let m = g.edge_count();
    if swaps == 0 || m < 2 {
        return g.clone();
    }
    let mut edges: Vec<(usize, usize)> = g.edges().to_vec();
    let mut present: HashSet<(usize, usize)> = edges.iter().copied().collect();
    let key = |u: usize, v: usize| if u < v { (u, v) } else { (v, u) };
    let mut done = 0;
    for _ in 0..100 * swaps {
        if done == swaps {
            break;
        }
        let i = rng.gen_range(0..m);
        let mut j = rng.gen_range(0..m - 1);
        if j >= i {
            j += 1;
        }
        let (a, b) = edges[i];
        let (c, d) = if rng.gen::<bool>() { edges[j] } else { (edges[j].1, edges[j].0) };
        if a == d || c == b {
            continue;
        }
        let (e1, e2) = (key(a, d), key(c, b));
        if e1 == e2 || present.contains(&e1) || present.contains(&e2) {
            continue;
        }
        present.remove(&edges[i]);
        present.remove(&edges[j]);
        present.insert(e1);
        present.insert(e2);
        edges[i] = e1;
        edges[j] = e2;
        done += 1;
    }
    edges.sort_unstable();
    let out = Graph::from_sorted_unchecked(g.node_count(), edges);
    match g.features() {
        Some(f) => out.with_features(f.to_vec()).expect("feature rows unchanged"),
        None => out,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-sample Kolmogorov–Smirnov test. The p-value is the asymptotic
/// Kolmogorov tail at `sqrt(n_a n_b / (n_a + n_b)) * D`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult, CarrierError> {
    if a.is_empty() || b.is_empty() {
        return Err(CarrierError::EmptySample);
    }
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(f64::total_cmp);
    xb.sort_by(f64::total_cmp);
    let (na, nb) = (xa.len(), xb.len());
    let (mut i, mut j) = (0, 0);
    let mut d = 0.0f64;
    while i < na && j < nb {
        let x = if xa[i].total_cmp(&xb[j]).is_le() { xa[i] } else { xb[j] };
        while i < na && xa[i] == x {
            i += 1;
        }
        while j < nb && xb[j] == x {
            j += 1;
        }
        d = d.max((i as f64 / na as f64 - j as f64 / nb as f64).abs());
    }
    let ne = (na * nb) as f64 / (na + nb) as f64;
    Ok(KsResult { statistic: d, p_value: kolmogorov_sf(ne.sqrt() * d) })
}

fn degree_sample(g: &Graph) -> Vec<f64> {
    g.degrees().into_iter().map(|d| d as f64).collect()
}

/// Reference distributions for the similarity gates, pooled over nodes of
/// all task graphs.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePools {
    pub degrees: Vec<f64>,
    pub clustering: Vec<f64>,
}

impl ReferencePools {
    pub fn from_graphs(graphs: &[Graph]) -> Self {
        Self {
            degrees: graphs.iter().flat_map(degree_sample).collect(),
            clustering: graphs.iter().flat_map(local_clustering).collect(),
        }
    }
}

/// One escalating-swap attempt on `seed_graph`: rewire with `swap_start`,
/// `swap_start + swap_increment`, ... swaps (each from the seed) and return
/// the first candidate whose WL hash is new and whose degree and clustering
/// KS p-values both reach `ks_delta`.
#[allow(clippy::too_many_arguments)]
pub fn sample_carrier(
    seed_graph: &Graph,
    train_hashes: &HashSet<WlDigest>,
    accepted_hashes: &HashSet<WlDigest>,
    ref_degrees: &[f64],
    ref_clustering: &[f64],
    p: &ProtocolParams,
    rng: &mut Rng,
) -> Result<Graph, CarrierError> {
    for swaps in p.swap_schedule() {
        let cand = double_edge_swap(seed_graph, swaps, rng);
        let h = wl_hash_default(&cand);
        if train_hashes.contains(&h) || accepted_hashes.contains(&h) {
            continue;
        }
        let deg = ks_two_sample(&degree_sample(&cand), ref_degrees)?;
        let clu = ks_two_sample(&local_clustering(&cand), ref_clustering)?;
        if deg.p_value >= p.ks_delta && clu.p_value >= p.ks_delta {
            return Ok(cand);
        }
    }
    Err(CarrierError::Rejected)
}

/// Owner-private key material.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarrierBundle {
    pub version: u32,
    pub carriers: Vec<Graph>,
    pub targets: Vec<f64>,
    pub key_bits: Vec<u8>,
    pub norm_constants: NormalizationConstants,
    pub protocol: ProtocolParams,
    pub size_cap: usize,
    pub carrier_hashes: Vec<WlDigest>,
    pub train_hash_set_digest: WlDigest,
}

/// Digest of the WL hash set of `graphs`, as recorded in a bundle built on them.
pub fn task_hash_digest(graphs: &[Graph]) -> WlDigest {
    hash_set_digest(&graphs.iter().map(wl_hash_default).collect())
}

/// Digest of a set of WL hashes (order independent).
pub fn hash_set_digest(hashes: &HashSet<WlDigest>) -> WlDigest {
    let sorted: BTreeSet<u64> = hashes.iter().map(|h| h.0).collect();
    WlDigest(hash_words(&sorted.into_iter().collect::<Vec<_>>()))
}

/// `1` iff the normalized target is at least one half.
pub fn key_bit(target: f64) -> u8 {
    u8::from(target >= 0.5)
}

impl CarrierBundle {
    pub fn len(&self) -> usize {
        self.carriers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.carriers.is_empty()
    }

    /// Checks the invariants that do not need the task data.
    pub fn validate(&self) -> Result<(), CarrierError> {
        let bad = |s: &str| Err(CarrierError::InvalidBundle(s.into()));
        if self.version != BUNDLE_VERSION {
            return bad("unsupported bundle version");
        }
        let m = self.carriers.len();
        if self.targets.len() != m || self.key_bits.len() != m || self.carrier_hashes.len() != m {
            return bad("carrier, target, bit and hash counts differ");
        }
        if NormalizationConstants::new(self.norm_constants.lambda_min(), self.norm_constants.lambda_scale()).is_err()
            || !self.norm_constants.is_frozen()
        {
            return bad("normalization constants are degenerate or not frozen");
        }
        let mut seen = HashSet::new();
        for k in 0..m {
            let t = self.targets[k];
            if !(0.0..=1.0).contains(&t) {
                return bad("target outside [0, 1]");
            }
            if self.key_bits[k] != key_bit(t) {
                return bad("key bit does not match its target");
            }
            if self.carriers[k].node_count() > self.size_cap {
                return bad("carrier exceeds the size cap");
            }
            let h = wl_hash_default(&self.carriers[k]);
            if h != self.carrier_hashes[k] || !seen.insert(h) {
                return bad("carrier hashes are stale or not distinct");
            }
        }
        Ok(())
    }

    /// Recomputes every target from the stored graphs and constants.
    pub fn recompute_targets(&self) -> Result<Vec<f64>, CarrierError> {
        self.carriers.iter().map(|g| Ok(normalized_lambda2(g, &self.norm_constants)?)).collect()
    }
}

/// Node-count cap: the `size_percentile` percentile of task graph sizes.
pub fn size_cap(graphs: &[Graph], size_percentile: f64) -> usize {
    let sizes: Vec<f64> = graphs.iter().map(|g| g.node_count() as f64).collect();
    percentile(&sizes, size_percentile).floor() as usize
}

pub fn build_bundle(task_graphs: &[Graph], m: usize, p: &ProtocolParams) -> Result<CarrierBundle, CarrierError> {
    build_bundle_with(Exec::default(), task_graphs, m, p)
}

pub fn build_bundle_with(
    exec: Exec,
    task_graphs: &[Graph],
    m: usize,
    p: &ProtocolParams,
) -> Result<CarrierBundle, CarrierError> {
    p.validate()?;
    if m == 0 {
        return Err(CarrierError::InvalidParams("m must be positive".into()));
    }
    if task_graphs.len() < 2 {
        return Err(GraphError::InsufficientData { needed: 2, got: task_graphs.len() }.into());
    }
    let constants = fit_normalization(task_graphs)?;
    let cap = size_cap(task_graphs, p.size_percentile);
    let train_hashes: HashSet<WlDigest> = exec.map_slice(task_graphs, wl_hash_default).into_iter().collect();
    let refs = ReferencePools::from_graphs(task_graphs);
    let seeds: Vec<&Graph> = task_graphs.iter().filter(|g| g.node_count() <= cap && g.edge_count() >= 2).collect();
    if seeds.is_empty() {
        return Err(CarrierError::ProtocolExhausted { accepted: 0, needed: m });
    }

    let mut carriers: Vec<Option<(Graph, WlDigest)>> = vec![None; m];
    let mut attempts = vec![0usize; m];
    let mut accepted: HashSet<WlDigest> = HashSet::new();
    let mut pending: Vec<usize> = (0..m).collect();
    while !pending.is_empty() {
        let snapshot = &accepted;
        let candidates = exec.map(pending.len(), |i| {
            let k = pending[i];
            let mut rng = rng_for(p.rng_seed, &[k as u64, attempts[k] as u64]);
            let seed = seeds.choose(&mut rng).expect("nonempty seeds");
            sample_carrier(seed, &train_hashes, snapshot, &refs.degrees, &refs.clustering, p, &mut rng)
                .map(|g| {
                    let h = wl_hash_default(&g);
                    (g, h)
                })
        });
        let mut next = Vec::new();
        for (k, cand) in pending.iter().copied().zip(candidates) {
            match cand {
                Ok((g, h)) if !accepted.contains(&h) => {
                    accepted.insert(h);
                    carriers[k] = Some((g, h));
                }
                Ok(_) | Err(CarrierError::Rejected) => {
                    attempts[k] += 1;
                    if attempts[k] >= MAX_ATTEMPTS_PER_CARRIER {
                        let done = carriers.iter().filter(|c| c.is_some()).count();
                        return Err(CarrierError::ProtocolExhausted { accepted: done, needed: m });
                    }
                    next.push(k);
                }
                Err(e) => return Err(e),
            }
        }
        pending = next;
    }

    let (carriers, carrier_hashes): (Vec<Graph>, Vec<WlDigest>) = carriers.into_iter().map(|c| c.expect("all accepted")).unzip();
    let targets = exec
        .map_slice(&carriers, |g| normalized_lambda2(g, &constants))
        .into_iter()
        .collect::<Result<Vec<f64>, _>>()?;
    let key_bits = targets.iter().map(|&t| key_bit(t)).collect();
    Ok(CarrierBundle {
        version: BUNDLE_VERSION,
        carriers,
        targets,
        key_bits,
        norm_constants: constants,
        protocol: *p,
        size_cap: cap,
        carrier_hashes,
        train_hash_set_digest: hash_set_digest(&train_hashes),
    })
}

/// Induced subgraph on `nodes` (in the given order), keeping feature rows.
pub fn induced_subgraph(g: &Graph, nodes: &[usize]) -> Graph {
    let mut index = vec![usize::MAX; g.node_count()];
    for (i, &v) in nodes.iter().enumerate() {
        index[v] = i;
    }
    let mut edges: Vec<(usize, usize)> = g
        .edges()
        .iter()
        .filter(|&&(u, v)| index[u] != usize::MAX && index[v] != usize::MAX)
        .map(|&(u, v)| (index[u].min(index[v]), index[u].max(index[v])))
        .collect();
    edges.sort_unstable();
    let sub = Graph::from_sorted_unchecked(nodes.len(), edges);
    match g.features() {
        Some(f) => sub.with_features(nodes.iter().map(|&v| f[v].clone()).collect()).expect("row count matches"),
        None => sub,
    }
}

/// Seed graphs for a single large graph: `count` subgraphs induced by random
/// walks that stop after visiting `size` distinct nodes (or `100 * size`
/// steps). Walks yielding fewer than two edges are redrawn, up to
/// `100 * count` walks in total.
pub fn random_walk_seeds(g: &Graph, count: usize, size: usize, seed: u64) -> Vec<Graph> {
    let mut out = Vec::with_capacity(count);
    if g.node_count() == 0 || size == 0 {
        return out;
    }
    for w in 0..100 * count as u64 {
        if out.len() == count {
            break;
        }
        let mut rng = rng_for(seed, &[w]);
        let mut cur = rng.gen_range(0..g.node_count());
        let mut visited = vec![cur];
        let mut mark = HashSet::from([cur]);
        for _ in 0..100 * size {
            if visited.len() >= size {
                break;
            }
            let nb = g.neighbors(cur);
            if nb.is_empty() {
                break;
            }
            cur = nb[rng.gen_range(0..nb.len())];
            if mark.insert(cur) {
                visited.push(cur);
            }
        }
        let sub = induced_subgraph(g, &visited);
        if sub.edge_count() >= 2 {
            out.push(sub);
        }
    }
    out
}

/// Bundle for node-level tasks on one large graph: `4m` random-walk seeds of
/// at most `seed_size` nodes stand in for the task graph pool.
pub fn build_bundle_from_large_graph(
    g: &Graph,
    m: usize,
    seed_size: usize,
    p: &ProtocolParams,
) -> Result<CarrierBundle, CarrierError> {
    let pool = random_walk_seeds(g, 4 * m.max(1), seed_size, p.rng_seed ^ 0x5eed);
    build_bundle(&pool, m, p)
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Two-sided p-value of a correlation from `n` pairs under the t test with
/// `n - 2` degrees of freedom, `I_{1-r²}((n-2)/2, 1/2)`.
fn correlation_p(r: f64, n: usize) -> f64 {
    if r.abs() >= 1.0 {
        return 0.0;
    }
    inc_beta(1.0 - r * r, (n - 2) as f64 / 2.0, 0.5).clamp(0.0, 1.0)
}

/// Screens one statistic's carrier series for serial dependence: Pearson
/// correlation between `f_k` and `f_{k+h}` for every lag `h` in `1..=m/2`
/// with at least four pairs, Bonferroni over lags. Returns the adjusted
/// p-value and `|r|` at the most significant lag.
fn lag_screen(series: &[f64]) -> Option<(f64, f64)> {
    let m = series.len();
    let mut best: Option<(f64, f64)> = None;
    let mut lags = 0usize;
    for h in 1..=m / 2 {
        let n = m - h;
        if n < 4 {
            break;
        }
        let Some(r) = pearson(&series[..n], &series[h..]) else { continue };
        lags += 1;
        let p = correlation_p(r, n);
        if best.is_none_or(|(bp, _)| p < bp) {
            best = Some((p, r.abs()));
        }
    }
    best.map(|(p, r)| ((p * lags as f64).min(1.0), r))
}

/// `ρ̂₀` from a carrier-by-statistic table (`rows[k][j]` is statistic `j` of
/// carrier `k`). Statistics surviving Benjamini–Hochberg at [`BH_LEVEL`]
/// contribute their correlation; the estimate is the largest, or 0.
pub fn rho0_from_statistics(rows: &[Vec<f64>]) -> Result<f64, CarrierError> {
    let m = rows.len();
    if m < 3 {
        return Err(CarrierError::InsufficientCarriers { needed: 3, got: m });
    }
    let dim = rows[0].len();
    let mut tests: Vec<(f64, f64)> = Vec::new();
    for j in 0..dim {
        let series: Vec<f64> = rows.iter().map(|r| r[j]).collect();
        if series.iter().any(|x| !x.is_finite()) || series.iter().all(|&x| x == series[0]) {
            continue;
        }
        if let Some(t) = lag_screen(&series) {
            tests.push(t);
        }
    }
    if tests.is_empty() {
        return Ok(0.0);
    }
    tests.sort_by(|a, b| a.0.total_cmp(&b.0));
    let s = tests.len() as f64;
    let cutoff = tests
        .iter()
        .enumerate()
        .filter(|(i, (p, _))| *p <= (*i as f64 + 1.0) / s * BH_LEVEL)
        .map(|(i, _)| i)
        .next_back();
    Ok(match cutoff {
        Some(c) => tests[..=c].iter().map(|t| t.1).fold(0.0, f64::max),
        None => 0.0,
    })
}

/// `ρ̂₀` over the 128 graph statistics of the bundle's carriers, plus the
/// perception scores as one more statistic when given.
pub fn estimate_rho0(bundle: &CarrierBundle, head_scores: Option<&[f64]>) -> Result<f64, CarrierError> {
    estimate_rho0_with(Exec::default(), bundle, head_scores)
}

pub fn estimate_rho0_with(exec: Exec, bundle: &CarrierBundle, head_scores: Option<&[f64]>) -> Result<f64, CarrierError> {
    let mut rows = exec.map_slice(&bundle.carriers, graph_statistics);
    if let Some(s) = head_scores {
        if s.len() != rows.len() {
            return Err(CarrierError::InvalidParams("one head score per carrier required".into()));
        }
        rows.iter_mut().zip(s).for_each(|(r, &x)| r.push(x));
    }
    rho0_from_statistics(&rows)
}

/// `λ₂` of each carrier; used by reports.
pub fn carrier_lambda2(bundle: &CarrierBundle) -> Result<Vec<f64>, CarrierError> {
    bundle.carriers.iter().map(|g| Ok(spectrum(g, DEFAULT_DIAG_EPS)?.lambda2)).collect()
}
