use nalgebra::DMatrix;

use super::mlp::Workspace;
use super::{Activation, MlpParams, ModelSet};
use crate::error::{CicmeError, Result};

/// Score value and per-parameter gradients, shaped like the model set.
#[derive(Debug, Clone)]
pub struct Objective {
    pub loss: f64,
    pub grads: Vec<MlpParams>,
}

/// `(1/n) sum_j 1/2 ||x_j - MLP(X; theta_j)||^2 + lambda1 sum_j ||A_j^(1)||_1`
/// plus `lambda2/2` times the squared weights of every layer.
///
/// The l1 part contributes `lambda1 * sign(a)` to the gradient (zero at
/// zero); the solver itself works on a smooth split of the weights.
pub fn objective(models: &ModelSet, x: &DMatrix<f64>) -> Result<Objective> {
    models.validate()?;
    let (n, d) = x.shape();
    if n == 0 {
        return Err(CicmeError::Argument("objective needs at least one sample".into()));
    }
    if d != models.d() {
        return Err(CicmeError::Structural(format!(
            "data has {d} columns, model set has {} variables",
            models.d()
        )));
    }
    let lambda = models.config.lambda1;
    let ridge = models.config.lambda2;
    let mut ws = Workspace::default();
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(d);
    for (j, m) in models.models.iter().enumerate() {
        let mut g = m.zeros_like();
        loss += squared_loss_grad(m, x, j, models.config.activation, &mut ws, &mut g);
        let first = m.first_layer();
        for (gw, &w) in g.layers[0].weights.iter_mut().zip(&first.weights) {
            loss += lambda * w.abs();
            if w != 0.0 {
                *gw += lambda * w.signum();
            }
        }
        for (gl, l) in g.layers.iter_mut().zip(&m.layers) {
            for (gw, &w) in gl.weights.iter_mut().zip(&l.weights) {
                loss += 0.5 * ridge * w * w;
                *gw += ridge * w;
            }
        }
        grads.push(g);
    }
    if !loss.is_finite() {
        return Err(CicmeError::Numeric("non-finite loss".into()));
    }
    Ok(Objective { loss, grads })
}

/// `1/(2n) ||x_j - MLP(X; theta_j)||^2`; its gradient is added into `grad`.
pub(crate) fn squared_loss_grad(
    model: &MlpParams,
    x: &DMatrix<f64>,
    j: usize,
    activation: Activation,
    ws: &mut Workspace,
    grad: &mut MlpParams,
) -> f64 {
    let n = x.nrows();
    let input = x.as_slice();
    let target = &input[j * n..(j + 1) * n];
    let mut dout = std::mem::take(&mut ws.scratch);
    let out = model.forward_ws(input, n, activation, ws);
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    dout.clear();
    dout.extend(out.iter().zip(target).map(|(o, t)| {
        let r = o - t;
        loss += r * r;
        r * inv_n
    }));
    model.backward_ws(input, n, activation, ws, &dout, grad);
    ws.scratch = dout;
    0.5 * loss * inv_n
}

/// Squared loss only, no gradient.
pub(crate) fn squared_loss(
    model: &MlpParams,
    x: &DMatrix<f64>,
    j: usize,
    activation: Activation,
    ws: &mut Workspace,
) -> f64 {
    let n = x.nrows();
    let input = x.as_slice();
    let target = &input[j * n..(j + 1) * n];
    let out = model.forward_ws(input, n, activation, ws);
    0.5 * out.iter().zip(target).map(|(o, t)| (o - t) * (o - t)).sum::<f64>() / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::notears::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn total(models: &ModelSet, x: &DMatrix<f64>) -> f64 {
        objective(models, x).unwrap().loss
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        // Variable 1 is exactly the output-layer bias; variable 0 likewise.
        let config = ModelConfig { lambda1: 0.0, lambda2: 0.0, ..ModelConfig::default() };
        let mut set = ModelSet { models: vec![MlpParams::zeros(2, &[3]); 2], config };
        set.models[0].layers[1].bias[0] = 2.0;
        set.models[1].layers[1].bias[0] = -1.0;
        let x = DMatrix::from_fn(8, 2, |_, j| if j == 0 { 2.0 } else { -1.0 });
        assert_eq!(total(&set, &x), 0.0);
    }

    #[test]
    fn constant_predictor_loss() {
        let config = ModelConfig { lambda1: 0.0, lambda2: 0.0, ..ModelConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut set = ModelSet { models: vec![MlpParams::zeros(3, &[10]); 3], config };
        for m in &mut set.models {
            m.layers[1].weights.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        }
        let n = 50;
        let mut x = DMatrix::from_fn(n, 3, |_, _| rng.random_range(-3.0..3.0));
        for j in 0..3 {
            let mean = x.column(j).mean();
            let sd = x.column(j).map(|v: f64| (v - mean).powi(2)).sum().sqrt() / ((n - 1) as f64).sqrt();
            for i in 0..n {
                x[(i, j)] = (x[(i, j)] - mean) / sd;
            }
        }
        let expected: f64 = (0..3)
            .map(|j| {
                let c: f64 = set.models[j].layers[1].weights.iter().sum::<f64>() * 0.5;
                x.column(j).iter().map(|v| 0.5 * (v - c).powi(2)).sum::<f64>() / n as f64
            })
            .sum();
        assert!((total(&set, &x) - expected).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let config = ModelConfig { hidden_units: 10, lambda1: 0.01, ..ModelConfig::default() };
        let mut set = ModelSet::random(3, &config, 5);
        // Push weights away from zero so |.| is differentiable at every entry.
        for m in &mut set.models {
            for layer in &mut m.layers {
                for w in layer.weights.iter_mut() {
                    *w = (w.signum() * 0.2 + *w) * 3.0;
                }
            }
        }
        for (j, m) in set.models.iter_mut().enumerate() {
            for u in 0..10 {
                *m.layers[0].weight_mut(u, j) = 0.7;
            }
        }
        let x = DMatrix::from_fn(20, 3, |_, _| rng.random_range(-2.0..2.0));
        let obj = objective(&set, &x).unwrap();
        let eps = 1e-5;
        for j in 0..3 {
            for l in 0..2 {
                let nw = set.models[j].layers[l].weights.len();
                let nb = set.models[j].layers[l].bias.len();
                for idx in 0..nw + nb {
                    let bump = |s: &mut ModelSet, delta: f64| {
                        let layer = &mut s.models[j].layers[l];
                        if idx < nw { layer.weights[idx] += delta } else { layer.bias[idx - nw] += delta }
                    };
                    let mut plus = set.clone();
                    bump(&mut plus, eps);
                    let mut minus = set.clone();
                    bump(&mut minus, -eps);
                    let numeric = (total(&plus, &x) - total(&minus, &x)) / (2.0 * eps);
                    let g = &obj.grads[j].layers[l];
                    let analytic = if idx < nw { g.weights[idx] } else { g.bias[idx - nw] };
                    let rel = (numeric - analytic).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
                    assert!(rel <= 1e-4, "var {j} layer {l} idx {idx}: {analytic} vs {numeric}");
                }
            }
        }
    }

    #[test]
    fn rejects_mismatched_data() {
        let set = ModelSet::random(3, &ModelConfig::default(), 1);
        assert!(objective(&set, &DMatrix::zeros(4, 2)).is_err());
        assert!(objective(&set, &DMatrix::zeros(0, 3)).is_err());
    }
}
