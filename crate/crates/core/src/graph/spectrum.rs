use super::{laplacian, DenseMatrix, Graph, GraphError};
use serde::{Deserialize, Serialize};

/// Diagonal shift applied before the eigensolve and removed afterwards.
pub const DEFAULT_DIAG_EPS: f64 = 1e-6;

/// Per-eigenvalue QL iteration cap.
const MAX_QL_ITERS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumResult {
    /// Laplacian eigenvalues, ascending.
    pub eigenvalues: Vec<f64>,
    /// Algebraic connectivity (second-smallest eigenvalue); 0 for `n == 1`.
    pub lambda2: f64,
}

/// Laplacian spectrum of `g`.
///
/// The eigensolve runs on `L + diag_eps * I` and `diag_eps` is subtracted
/// from every eigenvalue before reporting, so the reported values are those
/// of `L` itself.
pub fn spectrum(g: &Graph, diag_eps: f64) -> Result<SpectrumResult, GraphError> {
    let mut l = laplacian(g);
    for i in 0..l.n {
        let v = l.get(i, i);
        l.set(i, i, v + diag_eps);
    }
    let mut eigenvalues = symmetric_eigenvalues(&l)?;
    for x in &mut eigenvalues {
        *x -= diag_eps;
    }
    let lambda2 = eigenvalues.get(1).copied().unwrap_or(0.0);
    Ok(SpectrumResult { eigenvalues, lambda2 })
}

/// Eigenvalues of a dense symmetric matrix, ascending.
///
/// Householder reduction to tridiagonal form followed by the implicit QL
/// algorithm with Wilkinson-style shifts. `O(n^3)`; only the lower triangle
/// of `a` is trusted.
pub fn symmetric_eigenvalues(a: &DenseMatrix) -> Result<Vec<f64>, GraphError> {
    let n = a.n;
    if n == 0 {
        return Ok(Vec::new());
    }
    if n == 1 {
        return Ok(vec![a.get(0, 0)]);
    }
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| a.get(i.max(j), i.min(j))).collect()).collect();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tridiagonalize(&mut v, &mut d, &mut e);
    implicit_ql(&mut d, &mut e)?;
    d.sort_by(f64::total_cmp);
    Ok(d)
}

/// Householder tridiagonalization. On return `d` holds the diagonal and
/// `e[1..]` the subdiagonal.
fn tridiagonalize(v: &mut [Vec<f64>], d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    d.copy_from_slice(&v[n - 1]);

    for i in (1..n).rev() {
        let scale: f64 = d[..i].iter().map(|x| x.abs()).sum();
        let mut h = 0.0;
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[i - 1][j];
                v[i][j] = 0.0;
                v[j][i] = 0.0;
            }
        } else {
            for k in 0..i {
                d[k] /= scale;
                h += d[k] * d[k];
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            e[..i].fill(0.0);

            for j in 0..i {
                f = d[j];
                v[j][i] = f;
                g = e[j] + v[j][j] * f;
                for k in j + 1..i {
                    g += v[k][j] * d[k];
                    e[k] += v[k][j] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    v[k][j] -= f * e[k] + g * d[k];
                }
                d[j] = v[i - 1][j];
                v[i][j] = 0.0;
            }
        }
        d[i] = h;
    }

    // Accumulate transformations; this also moves the diagonal into the last row.
    for i in 0..n - 1 {
        v[n - 1][i] = v[i][i];
        v[i][i] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[k][i + 1] / h;
            }
            for j in 0..=i {
                let g: f64 = (0..=i).map(|k| v[k][i + 1] * v[k][j]).sum();
                for k in 0..=i {
                    v[k][j] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[k][i + 1] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[n - 1][j];
        v[n - 1][j] = 0.0;
    }
    v[n - 1][n - 1] = 1.0;
    e[0] = 0.0;
}

fn implicit_ql(d: &mut [f64], e: &mut [f64]) -> Result<(), GraphError> {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    let mut f = 0.0;
    let mut tst1: f64 = 0.0;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n - 1 && e[m].abs() > eps * tst1 {
            m += 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > MAX_QL_ITERS {
                    return Err(GraphError::NumericalFailure(MAX_QL_ITERS));
                }
                let g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let h = g - d[l];
                for x in &mut d[l + 2..n] {
                    *x -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    let g = c * e[i];
                    let h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(())
}
