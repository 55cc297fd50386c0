//! The watermark-removal decision problem (WM-Remove) for separable monotone
//! decoders, its reduction from Hitting Set, a certificate verifier, and
//! exhaustive solvers for small instances.
//!
//! A Hitting Set instance here is a universe `U = {0..m}`, a family of subsets
//! `C_j` and a budget `B`; it is a yes-instance when at most `B` of the sets
//! together touch every element. The reduction maps set `C_j` to parameter
//! coordinate `j` and element `u_k` to decoded bit `k`.

use crate::par::Exec;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

/// Largest family size enumerated by [`brute_force_hitting_set`].
pub const MAX_HS_SETS: usize = 20;
/// Largest dimension for the sign-restricted WM-Remove search.
pub const MAX_WM_DIM: usize = 20;
/// Largest dimension for the general `±ϑ_min` WM-Remove search.
pub const MAX_WM_DIM_SIGNED: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HardnessError {
    #[error("decoder weight a[{row}][{col}] = {value} is negative")]
    NegativeWeight { row: usize, col: usize, value: f64 },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("instance too large: {size} exceeds the enumeration limit {limit}")]
    TooLarge { size: usize, limit: usize },
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// `Dec_k(θ) = 1[Σ_j a_kj θ_j ≥ b_k]` with `a_kj ≥ 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDecoder")]
pub struct MonotoneDecoder {
    weights: Vec<Vec<f64>>,
    thresholds: Vec<f64>,
    dim: usize,
}

#[derive(Deserialize)]
struct RawDecoder {
    weights: Vec<Vec<f64>>,
    thresholds: Vec<f64>,
    dim: usize,
}

impl TryFrom<RawDecoder> for MonotoneDecoder {
    type Error = HardnessError;
    fn try_from(r: RawDecoder) -> Result<Self, Self::Error> {
        Self::new(r.weights, r.thresholds, r.dim)
    }
}

impl MonotoneDecoder {
    pub fn new(weights: Vec<Vec<f64>>, thresholds: Vec<f64>, dim: usize) -> Result<Self, HardnessError> {
        if weights.len() != thresholds.len() {
            return Err(HardnessError::DimMismatch(format!("{} rows, {} thresholds", weights.len(), thresholds.len())));
        }
        for (r, row) in weights.iter().enumerate() {
            if row.len() != dim {
                return Err(HardnessError::DimMismatch(format!("row {r} has {} entries, expected {dim}", row.len())));
            }
            for (c, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(HardnessError::InvalidInstance(format!("weight a[{r}][{c}] is not finite")));
                }
                if v < 0.0 {
                    return Err(HardnessError::NegativeWeight { row: r, col: c, value: v });
                }
            }
        }
        if thresholds.iter().any(|b| !b.is_finite()) {
            return Err(HardnessError::InvalidInstance("threshold is not finite".into()));
        }
        Ok(Self { weights, thresholds, dim })
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    /// Number of decoded bits.
    pub fn bits(&self) -> usize {
        self.thresholds.len()
    }

    /// Parameter dimension.
    pub fn dim(&self) -> usize {
        self.dim
    }
}

pub fn decode_bits(dec: &MonotoneDecoder, theta: &[f64]) -> Result<Vec<u8>, HardnessError> {
    if theta.len() != dec.dim {
        return Err(HardnessError::DimMismatch(format!("theta has {} entries, decoder expects {}", theta.len(), dec.dim)));
    }
    Ok(dec
        .weights
        .iter()
        .zip(&dec.thresholds)
        .map(|(row, &b)| u8::from(row.iter().zip(theta).map(|(a, t)| a * t).sum::<f64>() >= b))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HittingSetInstance {
    pub universe_size: usize,
    /// Sorted, duplicate-free element lists.
    pub sets: Vec<Vec<usize>>,
    pub budget: usize,
}

impl HittingSetInstance {
    pub fn new(universe_size: usize, sets: Vec<Vec<usize>>, budget: usize) -> Result<Self, HardnessError> {
        let mut clean = Vec::with_capacity(sets.len());
        for (j, mut s) in sets.into_iter().enumerate() {
            if s.is_empty() {
                return Err(HardnessError::InvalidInstance(format!("set {j} is empty")));
            }
            if let Some(&e) = s.iter().find(|&&e| e >= universe_size) {
                return Err(HardnessError::InvalidInstance(format!("set {j} contains {e} outside the universe")));
            }
            s.sort_unstable();
            s.dedup();
            clean.push(s);
        }
        Ok(Self { universe_size, sets: clean, budget })
    }

    /// Whether the sets chosen by `mask` touch every element.
    pub fn covers(&self, mask: u64) -> bool {
        let mut hit = vec![false; self.universe_size];
        for (j, s) in self.sets.iter().enumerate() {
            if mask >> j & 1 == 1 {
                for &e in s {
                    hit[e] = true;
                }
            }
        }
        hit.into_iter().all(|h| h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WmRemoveInstance {
    pub theta_tilde: Vec<f64>,
    pub decoder: MonotoneDecoder,
    pub budget: usize,
    pub theta_min: f64,
}

impl WmRemoveInstance {
    pub fn new(theta_tilde: Vec<f64>, decoder: MonotoneDecoder, budget: usize, theta_min: f64) -> Result<Self, HardnessError> {
        if theta_tilde.len() != decoder.dim {
            return Err(HardnessError::DimMismatch("theta_tilde does not match the decoder".into()));
        }
        if !(theta_min > 0.0 && theta_min.is_finite()) {
            return Err(HardnessError::InvalidInstance("theta_min must be positive".into()));
        }
        Ok(Self { theta_tilde, decoder, budget, theta_min })
    }
}

/// `a_kj = 1[u_k ∈ C_j]`, `b_k = ϑ_min / 2`, `θ̃ = 0`, same budget.
pub fn reduce_hitting_set(hs: &HittingSetInstance, theta_min: f64) -> Result<WmRemoveInstance, HardnessError> {
    let d = hs.sets.len();
    let mut weights = vec![vec![0.0; d]; hs.universe_size];
    for (j, s) in hs.sets.iter().enumerate() {
        for &k in s {
            weights[k][j] = 1.0;
        }
    }
    let decoder = MonotoneDecoder::new(weights, vec![theta_min / 2.0; hs.universe_size], d)?;
    WmRemoveInstance::new(vec![0.0; d], decoder, hs.budget, theta_min)
}

/// Support `J` and perturbation `δ` (full length, zero off `J`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub indices: Vec<usize>,
    pub delta: Vec<f64>,
}

/// Checks `|J| ≤ B`, `supp δ ⊆ J`, `|δ_j| ≥ ϑ_min` on `J`, and that every
/// decoded bit of `θ̃ + δ` differs from the baseline. `O(md)`.
pub fn verify_certificate(inst: &WmRemoveInstance, indices: &[usize], delta: &[f64]) -> bool {
    let d = inst.decoder.dim;
    if indices.len() > inst.budget || delta.len() != d {
        return false;
    }
    let mut in_j = vec![false; d];
    for &j in indices {
        if j >= d || in_j[j] {
            return false;
        }
        in_j[j] = true;
    }
    for (j, &x) in delta.iter().enumerate() {
        if !x.is_finite() || (in_j[j] && x.abs() < inst.theta_min) || (!in_j[j] && x != 0.0) {
            return false;
        }
    }
    let theta: Vec<f64> = inst.theta_tilde.iter().zip(delta).map(|(a, b)| a + b).collect();
    match (decode_bits(&inst.decoder, &inst.theta_tilde), decode_bits(&inst.decoder, &theta)) {
        (Ok(before), Ok(after)) => before.iter().zip(&after).all(|(a, b)| a != b),
        _ => false,
    }
}

/// Bitmasks over `n` items with exactly `k` bits set, in increasing order.
fn masks_of_size(n: usize, k: usize) -> Vec<u64> {
    (0..1u64 << n).filter(|m| m.count_ones() as usize == k).collect()
}

/// Minimum number of sets touching every element, or `None` when even the
/// whole family misses an element.
pub fn brute_force_hitting_set(hs: &HittingSetInstance) -> Result<Option<usize>, HardnessError> {
    brute_force_hitting_set_with(Exec::Sequential, hs)
}

pub fn brute_force_hitting_set_with(exec: Exec, hs: &HittingSetInstance) -> Result<Option<usize>, HardnessError> {
    let q = hs.sets.len();
    if q > MAX_HS_SETS {
        return Err(HardnessError::TooLarge { size: q, limit: MAX_HS_SETS });
    }
    for k in 0..=q {
        let masks = masks_of_size(q, k);
        if exec.find_first(masks.len(), |i| hs.covers(masks[i])).is_some() {
            return Ok(Some(k));
        }
    }
    Ok(None)
}

/// Exhaustive WM-Remove search over supports `|J| ≤ B` with `δ_j = ±ϑ_min`.
/// Instances with `θ̃ = 0` whose baseline bits are all 0 only need
/// `δ_j = +ϑ_min` (the decoder is monotone); every other instance also tries
/// `−ϑ_min` per coordinate. Returns a certificate on yes.
pub fn brute_force_wm_remove(inst: &WmRemoveInstance) -> Result<Option<Certificate>, HardnessError> {
    brute_force_wm_remove_with(Exec::Sequential, inst)
}

pub fn brute_force_wm_remove_with(exec: Exec, inst: &WmRemoveInstance) -> Result<Option<Certificate>, HardnessError> {
    let d = inst.decoder.dim;
    let baseline = decode_bits(&inst.decoder, &inst.theta_tilde)?;
    let positive_only = inst.theta_tilde.iter().all(|&t| t == 0.0) && baseline.iter().all(|&b| b == 0);
    let limit = if positive_only { MAX_WM_DIM } else { MAX_WM_DIM_SIGNED };
    if d > limit {
        return Err(HardnessError::TooLarge { size: d, limit });
    }
    let make = |mask: u64, signs: u64| -> Certificate {
        let indices: Vec<usize> = (0..d).filter(|j| mask >> j & 1 == 1).collect();
        let mut delta = vec![0.0; d];
        for (i, &j) in indices.iter().enumerate() {
            delta[j] = if signs >> i & 1 == 1 { -inst.theta_min } else { inst.theta_min };
        }
        Certificate { indices, delta }
    };
    for k in 0..=inst.budget.min(d) {
        let masks = masks_of_size(d, k);
        let sign_count: u64 = if positive_only { 1 } else { 1 << k };
        let n = masks.len() * sign_count as usize;
        let hit = exec.find_first(n, |i| {
            let c = make(masks[i / sign_count as usize], i as u64 % sign_count);
            verify_certificate(inst, &c.indices, &c.delta)
        });
        if let Some(i) = hit {
            return Ok(Some(make(masks[i / sign_count as usize], i as u64 % sign_count)));
        }
    }
    Ok(None)
}

/// `p hs m q B`, then one line of 1-based element indices per set. Lines
/// starting with `c` are comments.
pub fn format_dimacs(hs: &HittingSetInstance) -> String {
    let mut out = format!("p hs {} {} {}\n", hs.universe_size, hs.sets.len(), hs.budget);
    for s in &hs.sets {
        let line: Vec<String> = s.iter().map(|e| (e + 1).to_string()).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

pub fn parse_dimacs(text: &str) -> Result<HittingSetInstance, HardnessError> {
    let mut header: Option<(usize, usize, usize)> = None;
    let mut sets = Vec::new();
    let err = |line: usize, msg: &str| HardnessError::Parse { line, msg: msg.into() };
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('c') {
            continue;
        }
        if header.is_none() {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 || f[0] != "p" || f[1] != "hs" {
                return Err(err(n, "expected header `p hs m q B`"));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| err(n, "header fields must be nonnegative integers"));
            header = Some((num(f[2])?, num(f[3])?, num(f[4])?));
            continue;
        }
        let (m, _, _) = header.expect("set above");
        let mut set = Vec::new();
        for tok in line.split_whitespace() {
            let e: usize = tok.parse().map_err(|_| err(n, "element indices must be positive integers"))?;
            if e == 0 || e > m {
                return Err(err(n, "element index outside 1..=m"));
            }
            set.push(e - 1);
        }
        sets.push(set);
    }
    let (m, q, b) = header.ok_or_else(|| err(0, "missing header"))?;
    if sets.len() != q {
        return Err(err(0, &format!("header announces {q} sets, found {}", sets.len())));
    }
    HittingSetInstance::new(m, sets, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decoder_examples() {
        let d = MonotoneDecoder::new(vec![vec![1.0]], vec![0.5], 1).unwrap();
        assert_eq!(decode_bits(&d, &[1.0]).unwrap(), vec![1]);
        let d = MonotoneDecoder::new(vec![vec![1.0, 2.0]; 3], vec![0.1, 0.2, 0.3], 2).unwrap();
        assert_eq!(decode_bits(&d, &[0.0, 0.0]).unwrap(), vec![0, 0, 0]);
        assert!(matches!(
            MonotoneDecoder::new(vec![vec![0.0, -1.0]], vec![0.0], 2),
            Err(HardnessError::NegativeWeight { row: 0, col: 1, .. })
        ));
        assert!(decode_bits(&d, &[1.0]).is_err());
        let bad = r#"{"weights":[[-1.0]],"thresholds":[0.0],"dim":1}"#;
        assert!(serde_json::from_str::<MonotoneDecoder>(bad).is_err());
    }

    #[test]
    fn reduction_example() {
        let hs = HittingSetInstance::new(2, vec![vec![0], vec![1], vec![0, 1]], 1).unwrap();
        let inst = reduce_hitting_set(&hs, 1.0).unwrap();
        assert_eq!(inst.decoder.weights(), &[vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 1.0]]);
        assert_eq!(inst.decoder.thresholds(), &[0.5, 0.5]);
        assert_eq!(inst.theta_tilde, vec![0.0; 3]);
        let cert = brute_force_wm_remove(&inst).unwrap().unwrap();
        assert_eq!(cert.indices, vec![2]);
        assert!(verify_certificate(&inst, &cert.indices, &cert.delta));
        assert!(!verify_certificate(&inst, &[2], &[0.0, 0.0, 0.5]));
        assert!(!verify_certificate(&inst, &[], &[0.0; 3]));
    }

    #[test]
    fn hitting_set_examples() {
        let hs = HittingSetInstance::new(2, vec![vec![0], vec![1]], 2).unwrap();
        assert_eq!(brute_force_hitting_set(&hs).unwrap(), Some(2));
        let hs = HittingSetInstance::new(2, vec![vec![0, 1]], 1).unwrap();
        assert_eq!(brute_force_hitting_set(&hs).unwrap(), Some(1));
        let hs = HittingSetInstance::new(2, vec![], 1).unwrap();
        assert_eq!(brute_force_hitting_set(&hs).unwrap(), None);
        assert!(brute_force_wm_remove(&reduce_hitting_set(&hs, 1.0).unwrap()).unwrap().is_none());
        let big = HittingSetInstance::new(1, vec![vec![0]; 21], 1).unwrap();
        assert!(matches!(brute_force_hitting_set(&big), Err(HardnessError::TooLarge { .. })));
    }

    #[test]
    fn dimacs_round_trip() {
        let hs = HittingSetInstance::new(4, vec![vec![0, 2], vec![3], vec![1, 2, 3]], 2).unwrap();
        let text = format_dimacs(&hs);
        assert_eq!(text, "p hs 4 3 2\n1 3\n4\n2 3 4\n");
        assert_eq!(parse_dimacs(&format!("c comment\n{text}")).unwrap(), hs);
        assert!(matches!(parse_dimacs("p hs 2 1 1\n3\n"), Err(HardnessError::Parse { line: 2, .. })));
        assert!(parse_dimacs("p hs 2 2 1\n1\n").is_err());
    }

    #[test]
    fn signed_search_on_general_instance() {
        // Bit 0 starts at 1 and can only be cleared by a negative move.
        let dec = MonotoneDecoder::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.5, 0.5], 2).unwrap();
        let inst = WmRemoveInstance::new(vec![1.0, 0.0], dec, 2, 1.0).unwrap();
        let cert = brute_force_wm_remove(&inst).unwrap().unwrap();
        assert_eq!(cert.delta, vec![-1.0, 1.0]);
        let dec = MonotoneDecoder::new(vec![vec![1.0; 13]], vec![0.5], 13).unwrap();
        let inst = WmRemoveInstance::new(vec![1.0; 13], dec, 1, 1.0).unwrap();
        assert!(matches!(brute_force_wm_remove(&inst), Err(HardnessError::TooLarge { .. })));
    }
}
