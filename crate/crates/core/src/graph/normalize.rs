use super::{spectrum, Graph, GraphError, DEFAULT_DIAG_EPS};
use serde::{Deserialize, Serialize};

/// Below this many graphs the 5th/95th percentiles interpolate between the
/// two most extreme order statistics, so min-max scaling is used instead.
pub const MIN_PERCENTILE_SAMPLES: usize = 20;

const MIN_GAP: f64 = 1e-9;

/// Affine map taking algebraic connectivity onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationConstants {
    lambda_min: f64,
    lambda_scale: f64,
    frozen: bool,
}

impl NormalizationConstants {
    /// Frozen constants; `lambda_scale` must exceed `lambda_min`.
    pub fn new(lambda_min: f64, lambda_scale: f64) -> Result<Self, GraphError> {
        if !(lambda_scale > lambda_min) || !lambda_min.is_finite() || !lambda_scale.is_finite() {
            return Err(GraphError::DegenerateScale);
        }
        Ok(Self { lambda_min, lambda_scale, frozen: true })
    }

    pub fn lambda_min(&self) -> f64 {
        self.lambda_min
    }

    pub fn lambda_scale(&self) -> f64 {
        self.lambda_scale
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// `(lambda2 - min) / (scale - min)` clamped to `[0, 1]`.
    pub fn normalize(&self, lambda2: f64) -> Result<f64, GraphError> {
        if !self.frozen || !(self.lambda_scale > self.lambda_min) {
            return Err(GraphError::DegenerateScale);
        }
        Ok(((lambda2 - self.lambda_min) / (self.lambda_scale - self.lambda_min)).clamp(0.0, 1.0))
    }
}

/// Normalized algebraic connectivity of `g` under frozen constants.
pub fn normalized_lambda2(g: &Graph, c: &NormalizationConstants) -> Result<f64, GraphError> {
    let l2 = spectrum(g, DEFAULT_DIAG_EPS)?.lambda2;
    c.normalize(l2)
}

/// Percentile with linear interpolation between order statistics: the value
/// at fractional rank `(N - 1) * q / 100` of the sorted sample (the same
/// convention as NumPy's default). `values` must be nonempty.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty sample");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    percentile_sorted(&sorted, q)
}

pub(crate) fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let rank = (sorted.len() - 1) as f64 * (q / 100.0).clamp(0.0, 1.0);
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Fits `(lambda_min, lambda_scale)` as the 5th and 95th percentiles of the
/// algebraic connectivity over `graphs`, falling back to `(min, max)` when
/// there are fewer than [`MIN_PERCENTILE_SAMPLES`] graphs or the percentile
/// gap is below `1e-9`.
pub fn fit_normalization(graphs: &[Graph]) -> Result<NormalizationConstants, GraphError> {
    let l2: Vec<f64> = graphs
        .iter()
        .map(|g| spectrum(g, DEFAULT_DIAG_EPS).map(|s| s.lambda2))
        .collect::<Result<_, _>>()?;
    fit_normalization_values(&l2)
}

/// [`fit_normalization`] on precomputed algebraic connectivities.
pub fn fit_normalization_values(lambda2: &[f64]) -> Result<NormalizationConstants, GraphError> {
    if lambda2.len() < 2 {
        return Err(GraphError::InsufficientData { needed: 2, got: lambda2.len() });
    }
    let mut sorted = lambda2.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (p5, p95) = (percentile_sorted(&sorted, 5.0), percentile_sorted(&sorted, 95.0));
    if sorted.len() >= MIN_PERCENTILE_SAMPLES && p95 - p5 >= MIN_GAP {
        return NormalizationConstants::new(p5, p95);
    }
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    if hi - lo < MIN_GAP {
        return Err(GraphError::DegenerateScale);
    }
    NormalizationConstants::new(lo, hi)
}
