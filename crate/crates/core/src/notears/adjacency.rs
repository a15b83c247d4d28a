use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::ModelSet;
use crate::error::{CicmeError, Result};

/// Non-negative `d x d` matrix; entry `(k, j)` weighs the edge `k -> j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct WeightedAdjacency(DMatrix<f64>);

impl WeightedAdjacency {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(CicmeError::Structural(format!(
                "adjacency must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(CicmeError::Numeric("adjacency entries must be finite and non-negative".into()));
        }
        Ok(Self(m))
    }

    pub fn zeros(d: usize) -> Self {
        Self(DMatrix::zeros(d, d))
    }

    pub fn d(&self) -> usize {
        self.0.nrows()
    }

    pub fn get(&self, k: usize, j: usize) -> f64 {
        self.0[(k, j)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.0.row_iter().map(|r| r.iter().copied().collect()).collect()
    }
}

impl TryFrom<Vec<Vec<f64>>> for WeightedAdjacency {
    type Error = CicmeError;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        let d = rows.len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(CicmeError::Structural("adjacency rows must all have length d".into()));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Self::new(DMatrix::from_row_slice(d, d, &flat))
    }
}

impl From<WeightedAdjacency> for Vec<Vec<f64>> {
    fn from(w: WeightedAdjacency) -> Self {
        w.to_rows()
    }
}

/// `W[k, j]` is the Euclidean norm of column `k` of variable `j`'s
/// first-layer weights. Biases do not enter.
pub fn extract_adjacency(models: &ModelSet) -> WeightedAdjacency {
    WeightedAdjacency(squared_adjacency(models).map(f64::sqrt))
}

/// `W ∘ W` computed straight from the weights (no square root).
pub(crate) fn squared_adjacency(models: &ModelSet) -> DMatrix<f64> {
    let d = models.d();
    let mut s = DMatrix::zeros(d, d);
    for (j, m) in models.models.iter().enumerate() {
        let first = m.first_layer();
        for u in 0..first.rows {
            for k in 0..first.cols {
                let w = first.weight(u, k);
                s[(k, j)] += w * w;
            }
        }
    }
    s
}

/// Value of `h(W) = tr(exp(W ∘ W)) - d` and its gradient in `W`.
#[derive(Debug, Clone)]
pub struct Acyclicity {
    pub value: f64,
    pub grad: DMatrix<f64>,
}

/// Acyclicity measure of a weighted adjacency; zero iff its support is a DAG.
pub fn acyclicity(w: &WeightedAdjacency) -> Result<Acyclicity> {
    let sq = w.0.component_mul(&w.0);
    let (value, exp_t) = trace_exp_of_squared(&sq)?;
    Ok(Acyclicity { value, grad: exp_t.component_mul(&w.0) * 2.0 })
}

const MAX_EXP_NORM: f64 = 1e10;

/// For `S = W ∘ W`: returns `tr(exp(S)) - d` and `exp(S)^T`, which is the
/// gradient of the trace with respect to `S`.
pub(crate) fn trace_exp_of_squared(sq: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
    let d = sq.nrows();
    if sq.iter().any(|v| !v.is_finite()) {
        return Err(CicmeError::Numeric("adjacency has non-finite entries".into()));
    }
    // nalgebra sizes its squaring loop from a 27th matrix power, which overflows
    // to inf (and u64::MAX squarings) once the norm passes about 1e11.
    let norm = sq.one_norm();
    if norm > MAX_EXP_NORM {
        return Err(CicmeError::Numeric(format!(
            "squared adjacency too large for the matrix exponential (one-norm {norm:e})"
        )));
    }
    let e = sq.clone().exp();
    if e.iter().any(|v| !v.is_finite()) {
        let max = sq.iter().cloned().fold(0.0, f64::max);
        return Err(CicmeError::Numeric(format!(
            "matrix exponential overflowed (largest squared weight {max:e})"
        )));
    }
    // Rounding in exp() can leave the trace a hair below d on a DAG.
    let value = (e.trace() - d as f64).max(0.0);
    Ok((value, e.transpose()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::notears::{MlpParams, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Truncated power series for `tr(exp(A))`.
    fn series_trace_exp(a: &DMatrix<f64>, terms: usize) -> f64 {
        let d = a.nrows();
        let mut term = DMatrix::<f64>::identity(d, d);
        let mut total = d as f64;
        for k in 1..terms {
            term = &term * a / k as f64;
            total += term.trace();
        }
        total
    }

    #[test]
    fn empty_graph_is_acyclic() {
        let a = acyclicity(&WeightedAdjacency::zeros(4)).unwrap();
        assert_eq!(a.value, 0.0);
        assert!(a.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn two_cycle_closed_form() {
        let w = WeightedAdjacency::new(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        let h = acyclicity(&w).unwrap().value;
        let closed = 2.0 * 1f64.cosh() - 2.0;
        let series = series_trace_exp(&w.0.component_mul(&w.0), 30) - 2.0;
        assert!((closed - 1.0862).abs() < 1e-4);
        assert!((h - closed).abs() < 1e-12);
        assert!((series - closed).abs() < 1e-12);
    }

    #[test]
    fn upper_triangular_is_acyclic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let m = DMatrix::from_fn(5, 5, |k, j| if k < j { rng.random_range(0.0..2.0) } else { 0.0 });
            let h = acyclicity(&WeightedAdjacency::new(m).unwrap()).unwrap().value;
            assert!(h.abs() < 1e-12, "{h}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            // |Uniform[-1, 1]| keeps the entries admissible.
            let m = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0f64..1.0).abs());
            let w = WeightedAdjacency::new(m.clone()).unwrap();
            let a = acyclicity(&w).unwrap();
            let step = 1e-6;
            for k in 0..4 {
                for j in 0..4 {
                    let mut plus = m.clone();
                    plus[(k, j)] += step;
                    let mut minus = m.clone();
                    minus[(k, j)] -= step;
                    let hp = series_trace_exp(&plus.component_mul(&plus), 60);
                    let hm = series_trace_exp(&minus.component_mul(&minus), 60);
                    let numeric = (hp - hm) / (2.0 * step);
                    let g = a.grad[(k, j)];
                    let rel = (g - numeric).abs() / g.abs().max(numeric.abs()).max(1e-8);
                    assert!(rel <= 1e-5, "({k},{j}) {g} vs {numeric}");
                }
            }
        }
    }

    #[test]
    fn overflow_is_reported() {
        let w = WeightedAdjacency::new(DMatrix::from_element(3, 3, 1e160)).unwrap();
        assert!(matches!(acyclicity(&w), Err(CicmeError::Numeric(_))));
    }

    #[test]
    fn huge_two_cycle_fails_fast() {
        let mut sq = DMatrix::zeros(4, 4);
        sq[(0, 2)] = 2.09e49;
        sq[(1, 2)] = 2.06e49;
        sq[(3, 2)] = 2.91e51;
        sq[(2, 3)] = 3.33e50;
        assert!(matches!(trace_exp_of_squared(&sq), Err(CicmeError::Numeric(_))));
    }

    #[test]
    fn adjacency_is_column_norm() {
        let mut set = ModelSet {
            models: vec![MlpParams::zeros(3, &[2]); 3],
            config: ModelConfig::default(),
        };
        *set.models[2].layers[0].weight_mut(0, 0) = 3.0;
        *set.models[2].layers[0].weight_mut(1, 0) = 4.0;
        let w = extract_adjacency(&set);
        assert_eq!(w.get(0, 2), 5.0);
        assert_eq!(w.get(1, 2), 0.0);
        assert_eq!(w.get(2, 0), 0.0);
        for u in 0..2 {
            for k in 0..3 {
                *set.models[2].layers[0].weight_mut(u, k) *= 2.5;
            }
        }
        assert_eq!(extract_adjacency(&set).get(0, 2), 12.5);
    }

    #[test]
    fn adjacency_serde_uses_rows() {
        let w = WeightedAdjacency::new(DMatrix::from_row_slice(2, 2, &[0.0, 1.5, 0.25, 0.0])).unwrap();
        let s = serde_json::to_string(&w).unwrap();
        assert_eq!(s, "[[0.0,1.5],[0.25,0.0]]");
        let back: WeightedAdjacency = serde_json::from_str(&s).unwrap();
        assert_eq!(back, w);
        assert!(serde_json::from_str::<WeightedAdjacency>("[[0.0,-1.0],[0.0,0.0]]").is_err());
    }
}
