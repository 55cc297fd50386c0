//! Fixed-width structural statistics vector.
//!
//! Slot layout of [`graph_statistics`] (all other slots are zero padding):
//!
//! | slots    | content                                                        |
//! |----------|----------------------------------------------------------------|
//! | 0        | node count `n`                                                 |
//! | 1        | `ln(1 + n)`                                                    |
//! | 2        | edge count                                                     |
//! | 3        | density `2m / (n(n-1))`                                        |
//! | 4..12    | raw degree moments `E[d^k]`, `k = 1..=8`                        |
//! | 12..28   | fraction of nodes with degree `1..=15`, then `>= 16`            |
//! | 28       | global clustering (transitivity)                               |
//! | 29..33   | local clustering: mean, std, min, max                          |
//! | 33       | degree assortativity                                           |
//! | 34..40   | 4-node subgraph counts / C(n,4): path, star, cycle, paw, diamond, clique |
//! | 40..46   | induced 4-node graphlet counts / C(n,4), same order            |
//! | 46       | triangles / C(n,3)                                             |
//! | 47       | wedges (2-paths) / C(n,3)                                      |
//! | 48       | algebraic connectivity                                         |
//! | 49       | largest Laplacian eigenvalue                                   |
//! | 50..53   | max degree, min degree, degree variance                        |
//!
//! Statistics that are undefined on a given graph (assortativity with
//! uniform degrees, clustering of degree-<2 nodes, normalized counts when
//! `n` is too small) are reported as 0.

use super::{spectrum, Graph, DEFAULT_DIAG_EPS};

pub const STATISTICS_DIM: usize = 128;

/// Counts over all 4-node subsets. `subgraph` counts (not necessarily
/// induced) copies of each connected 4-node pattern; `induced` counts
/// subsets whose induced subgraph is exactly that pattern. Order:
/// path, star, cycle, paw, diamond, clique.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MotifCounts {
    pub subgraph: [u64; 6],
    pub induced: [u64; 6],
}

// Copies of pattern (row) contained in induced graphlet (column).
const CONTAINMENT: [[u64; 6]; 6] = [
    // path star cycle paw diamond clique
    [1, 0, 4, 2, 6, 12], // path
    [0, 1, 0, 1, 2, 4],  // star
    [0, 0, 1, 0, 1, 3],  // cycle
    [0, 0, 0, 1, 4, 12], // paw
    [0, 0, 0, 0, 1, 6],  // diamond
    [0, 0, 0, 0, 0, 1],  // clique
];

fn classify(g: &Graph, nodes: [usize; 4]) -> Option<usize> {
    let mut deg = [0u8; 4];
    let mut edges = 0;
    for i in 0..4 {
        for j in i + 1..4 {
            if g.has_edge(nodes[i], nodes[j]) {
                deg[i] += 1;
                deg[j] += 1;
                edges += 1;
            }
        }
    }
    deg.sort_unstable();
    match (edges, deg) {
        (3, [1, 1, 2, 2]) => Some(0),
        (3, [1, 1, 1, 3]) => Some(1),
        (4, [2, 2, 2, 2]) => Some(2),
        (4, [1, 2, 2, 3]) => Some(3),
        (5, _) => Some(4),
        (6, _) => Some(5),
        _ => None,
    }
}

pub fn motif_counts(g: &Graph) -> MotifCounts {
    let n = g.node_count();
    let mut induced = [0u64; 6];
    for a in 0..n {
        for b in a + 1..n {
            for c in b + 1..n {
                for d in c + 1..n {
                    if let Some(k) = classify(g, [a, b, c, d]) {
                        induced[k] += 1;
                    }
                }
            }
        }
    }
    let mut subgraph = [0u64; 6];
    for (p, row) in CONTAINMENT.iter().enumerate() {
        subgraph[p] = row.iter().zip(&induced).map(|(c, i)| c * i).sum();
    }
    MotifCounts { subgraph, induced }
}

fn triangles_at(g: &Graph, v: usize) -> usize {
    let nb = g.neighbors(v);
    let mut t = 0;
    for (i, &a) in nb.iter().enumerate() {
        for &b in &nb[i + 1..] {
            if g.has_edge(a, b) {
                t += 1;
            }
        }
    }
    t
}

/// Local clustering coefficient of every node (0 when degree < 2).
pub fn local_clustering(g: &Graph) -> Vec<f64> {
    (0..g.node_count())
        .map(|v| {
            let d = g.degree(v);
            if d < 2 {
                0.0
            } else {
                2.0 * triangles_at(g, v) as f64 / (d * (d - 1)) as f64
            }
        })
        .collect()
}

/// Pearson correlation of degrees across edge endpoints; 0 when undefined.
pub fn degree_assortativity(g: &Graph) -> f64 {
    if g.edge_count() == 0 {
        return 0.0;
    }
    let (mut sx, mut sxx, mut sxy, mut cnt) = (0.0, 0.0, 0.0, 0.0);
    for &(u, v) in g.edges() {
        let (du, dv) = (g.degree(u) as f64, g.degree(v) as f64);
        // Both orientations so the two marginals coincide.
        sx += du + dv;
        sxx += du * du + dv * dv;
        sxy += 2.0 * du * dv;
        cnt += 2.0;
    }
    let mean = sx / cnt;
    let var = sxx / cnt - mean * mean;
    if var <= 1e-12 {
        return 0.0;
    }
    ((sxy / cnt - mean * mean) / var).clamp(-1.0, 1.0)
}

fn choose(n: usize, k: usize) -> f64 {
    if n < k {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn per(x: f64, denom: f64) -> f64 {
    if denom > 0.0 {
        x / denom
    } else {
        0.0
    }
}

/// Deterministic [`STATISTICS_DIM`]-dimensional statistics vector; see the
/// module docs for the slot layout.
pub fn graph_statistics(g: &Graph) -> Vec<f64> {
    let n = g.node_count();
    let nf = n as f64;
    let mut out = vec![0.0; STATISTICS_DIM];
    let degrees: Vec<f64> = g.degrees().into_iter().map(|d| d as f64).collect();

    out[0] = nf;
    out[1] = (1.0 + nf).ln();
    out[2] = g.edge_count() as f64;
    out[3] = per(2.0 * g.edge_count() as f64, nf * (nf - 1.0));
    for k in 1..=8 {
        out[3 + k] = degrees.iter().map(|d| d.powi(k as i32)).sum::<f64>() / nf;
    }
    for &d in &degrees {
        let d = d as usize;
        if d >= 1 {
            out[12 + d.min(16) - 1] += 1.0 / nf;
        }
    }

    let local = local_clustering(g);
    let triangles: usize = (0..n).map(|v| triangles_at(g, v)).sum::<usize>() / 3;
    let wedges: f64 = degrees.iter().map(|d| d * (d - 1.0) / 2.0).sum();
    out[28] = per(3.0 * triangles as f64, wedges);
    let mean_c = local.iter().sum::<f64>() / nf;
    out[29] = mean_c;
    out[30] = (local.iter().map(|c| (c - mean_c).powi(2)).sum::<f64>() / nf).sqrt();
    out[31] = local.iter().copied().fold(f64::INFINITY, f64::min);
    out[32] = local.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    out[33] = degree_assortativity(g);

    let motifs = motif_counts(g);
    let c4 = choose(n, 4);
    for i in 0..6 {
        out[34 + i] = per(motifs.subgraph[i] as f64, c4);
        out[40 + i] = per(motifs.induced[i] as f64, c4);
    }
    let c3 = choose(n, 3);
    out[46] = per(triangles as f64, c3);
    out[47] = per(wedges, c3);

    if let Ok(s) = spectrum(g, DEFAULT_DIAG_EPS) {
        out[48] = s.lambda2.max(0.0);
        out[49] = s.eigenvalues.last().copied().unwrap_or(0.0).max(0.0);
    }
    let mean_d = out[4];
    out[50] = degrees.iter().copied().fold(0.0, f64::max);
    out[51] = degrees.iter().copied().fold(f64::INFINITY, f64::min);
    out[52] = degrees.iter().map(|d| (d - mean_d).powi(2)).sum::<f64>() / nf;

    for x in &mut out {
        if !x.is_finite() {
            *x = 0.0;
        }
    }
    out
}
