//! NOTEARS-MLP: one MLP per variable, a weighted adjacency read off the
//! first-layer weights, and an augmented-Lagrangian solve that drives the
//! trace-exponential acyclicity measure to zero.

mod adjacency;
mod fit;
pub mod lbfgsb;
mod mlp;
mod objective;

use serde::{Deserialize, Serialize};

pub use adjacency::{acyclicity, extract_adjacency, Acyclicity, WeightedAdjacency};
pub use fit::{fit, AdjacencyPenalty, FitOptions, FitOutcome, Init, SolverConfig};
pub use mlp::{Layer, MlpParams, ModelSet};
pub use objective::{objective, Objective};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        }
    }

    /// Derivative expressed through the activation's output `a`.
    #[inline]
    pub fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Sigmoid => a * (1.0 - a),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    LeastSquares,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Width of the single hidden layer.
    pub hidden_units: usize,
    pub activation: Activation,
    /// Weight of the l1 penalty on first-layer weights.
    pub lambda1: f64,
    /// Weight of `1/2 sum w^2` over every layer's weights (biases excluded).
    #[serde(default = "default_lambda2")]
    pub lambda2: f64,
    pub loss_kind: LossKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_units: 10,
            activation: Activation::Sigmoid,
            lambda1: 0.01,
            lambda2: default_lambda2(),
            loss_kind: LossKind::LeastSquares,
        }
    }
}

fn default_lambda2() -> f64 {
    0.01
}

impl ModelConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.hidden_units == 0 {
            return Err(crate::CicmeError::Argument("hidden_units must be positive".into()));
        }
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return Err(crate::CicmeError::Argument(format!(
                "lambda1 must be non-negative, got {}",
                self.lambda1
            )));
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return Err(crate::CicmeError::Argument(format!(
                "lambda2 must be non-negative, got {}",
                self.lambda2
            )));
        }
        Ok(())
    }
}
