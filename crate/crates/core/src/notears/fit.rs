use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::adjacency::{squared_adjacency, trace_exp_of_squared};
use super::lbfgsb::{self, Bounds, LbfgsbConfig, Problem};
use super::mlp::Workspace;
use super::objective::{squared_loss, squared_loss_grad};
use super::{extract_adjacency, Activation, MlpParams, ModelConfig, ModelSet, WeightedAdjacency};
use crate::error::{CicmeError, Result};

/// Augmented-Lagrangian schedule and inner-solver settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub rho_init: f64,
    pub rho_max: f64,
    /// Factor applied to rho when h has not shrunk enough.
    pub rho_growth: f64,
    /// Required ratio `h_new / h_prev` before the dual variable is updated.
    pub progress_ratio: f64,
    pub h_tol: f64,
    pub max_dual_steps: usize,
    pub inner: LbfgsbConfig,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rho_init: 1.0,
            rho_max: 1e16,
            rho_growth: 10.0,
            progress_ratio: 0.25,
            h_tol: 1e-8,
            max_dual_steps: 100,
            inner: LbfgsbConfig::default(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho_init > 0.0 && self.rho_init < self.rho_max) {
            return Err(CicmeError::Argument("need 0 < rho_init < rho_max".into()));
        }
        if !(self.h_tol > 0.0) {
            return Err(CicmeError::Argument("h_tol must be positive".into()));
        }
        if !(self.rho_growth > 1.0) {
            return Err(CicmeError::Argument("rho_growth must exceed 1".into()));
        }
        Ok(())
    }
}

/// Starting point of a fit.
#[derive(Debug, Clone)]
pub enum Init {
    /// Fresh uniform draws from this seed.
    Random(u64),
    Models(ModelSet),
}

/// Extra differentiable term on the weighted adjacency, added to the
/// objective of every inner solve.
pub trait AdjacencyPenalty: Sync {
    /// Value and gradient with respect to each entry of `W`.
    fn value_and_grad(&self, w: &WeightedAdjacency) -> (f64, DMatrix<f64>);
}

#[derive(Default)]
pub struct FitOptions<'a> {
    /// `freeze[j]` keeps variable `j`'s parameters at their initial values.
    /// Empty means nothing is frozen.
    pub freeze: Vec<bool>,
    pub penalty: Option<&'a dyn AdjacencyPenalty>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOutcome {
    pub models: ModelSet,
    /// `h(W) <= h_tol` at the end.
    pub converged: bool,
    pub h: f64,
    pub rho: f64,
    pub alpha: f64,
    pub dual_steps: usize,
    pub inner_solves: usize,
    pub evaluations: usize,
    /// rho after each inner solve.
    pub rho_trace: Vec<f64>,
    /// h after each dual step.
    pub h_trace: Vec<f64>,
}

impl FitOutcome {
    pub fn adjacency(&self) -> WeightedAdjacency {
        extract_adjacency(&self.models)
    }
}

/// Where each trainable variable's parameters live in the flat vector.
///
/// Per variable: first-layer positive part, negative part (each
/// `rows x d`, row-major), first-layer bias, then every later layer's
/// weights and bias.
struct Packing {
    trainable: Vec<usize>,
    first_rows: usize,
    d: usize,
    per_var: usize,
}

impl Packing {
    fn new(template: &MlpParams, trainable: Vec<usize>) -> Self {
        let first = template.first_layer();
        let rest: usize = template.layers[1..]
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum();
        Self {
            first_rows: first.rows,
            d: first.cols,
            per_var: 2 * first.weights.len() + first.rows + rest,
            trainable,
        }
    }

    fn len(&self) -> usize {
        self.per_var * self.trainable.len()
    }

    fn first_len(&self) -> usize {
        self.first_rows * self.d
    }

    fn pack(&self, models: &ModelSet) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.len());
        for &j in &self.trainable {
            let m = &models.models[j];
            let first = m.first_layer();
            x.extend(first.weights.iter().map(|w| w.max(0.0)));
            x.extend(first.weights.iter().map(|w| (-w).max(0.0)));
            x.extend_from_slice(&first.bias);
            for l in &m.layers[1..] {
                x.extend_from_slice(&l.weights);
                x.extend_from_slice(&l.bias);
            }
        }
        x
    }

    fn unpack(&self, x: &[f64], models: &mut ModelSet) {
        let fl = self.first_len();
        for (slot, &j) in self.trainable.iter().enumerate() {
            let chunk = &x[slot * self.per_var..(slot + 1) * self.per_var];
            let m = &mut models.models[j];
            let (pos, rest) = chunk.split_at(fl);
            let (neg, mut rest) = rest.split_at(fl);
            let first = &mut m.layers[0];
            for ((w, p), q) in first.weights.iter_mut().zip(pos).zip(neg) {
                *w = p - q;
            }
            let (b, r) = rest.split_at(first.bias.len());
            first.bias.copy_from_slice(b);
            rest = r;
            for l in &mut m.layers[1..] {
                let (w, r) = rest.split_at(l.weights.len());
                l.weights.copy_from_slice(w);
                let (b, r) = r.split_at(l.bias.len());
                l.bias.copy_from_slice(b);
                rest = r;
            }
        }
    }

    /// Split parts are non-negative; the self-input column is pinned at 0.
    fn bounds(&self) -> Bounds {
        let mut b = Bounds::unbounded(self.len());
        let fl = self.first_len();
        for (slot, &j) in self.trainable.iter().enumerate() {
            let base = slot * self.per_var;
            for part in 0..2 {
                for u in 0..self.first_rows {
                    for k in 0..self.d {
                        let i = base + part * fl + u * self.d + k;
                        b.lower[i] = 0.0;
                        if k == j {
                            b.upper[i] = 0.0;
                        }
                    }
                }
            }
        }
        b
    }
}

struct Augmented<'a> {
    x: &'a DMatrix<f64>,
    packing: &'a Packing,
    activation: Activation,
    lambda1: f64,
    lambda2: f64,
    rho: f64,
    alpha: f64,
    penalty: Option<&'a dyn AdjacencyPenalty>,
    frozen_loss: f64,
    work: ModelSet,
    grads: Vec<MlpParams>,
    ws: Workspace,
}

impl Problem for Augmented<'_> {
    fn evaluate(&mut self, p: &[f64], grad: &mut [f64]) -> f64 {
        let packing = self.packing;
        packing.unpack(p, &mut self.work);
        let mut f = self.frozen_loss;
        for (slot, &j) in packing.trainable.iter().enumerate() {
            let g = &mut self.grads[slot];
            for l in &mut g.layers {
                l.weights.iter_mut().for_each(|v| *v = 0.0);
                l.bias.iter_mut().for_each(|v| *v = 0.0);
            }
            f += squared_loss_grad(&self.work.models[j], self.x, j, self.activation, &mut self.ws, g);
        }

        let sq = squared_adjacency(&self.work);
        let Ok((h, exp_t)) = trace_exp_of_squared(&sq) else {
            return f64::INFINITY;
        };
        f += 0.5 * self.rho * h * h + self.alpha * h;
        let h_coef = self.rho * h + self.alpha;

        let penalty_grad = self.penalty.map(|pen| {
            let w = WeightedAdjacency::new(sq.map(f64::sqrt)).expect("norms are non-negative");
            let (value, g) = pen.value_and_grad(&w);
            f += value;
            (w, g)
        });

        let fl = packing.first_len();
        let d = packing.d;
        for (slot, &j) in packing.trainable.iter().enumerate() {
            let out = &mut grad[slot * packing.per_var..(slot + 1) * packing.per_var];
            let model = &self.work.models[j];
            let first = model.first_layer();
            let g = &self.grads[slot];
            for u in 0..packing.first_rows {
                for k in 0..d {
                    let idx = u * d + k;
                    let a = first.weights[idx];
                    let mut ga = g.layers[0].weights[idx] + h_coef * exp_t[(k, j)] * 2.0 * a + self.lambda2 * a;
                    f += 0.5 * self.lambda2 * a * a;
                    if let Some((w, pg)) = &penalty_grad {
                        let norm = w.get(k, j);
                        // zero-norm columns get a zero subgradient
                        if norm > 0.0 {
                            ga += pg[(k, j)] * a / norm;
                        }
                    }
                    let pos = p[slot * packing.per_var + idx];
                    let neg = p[slot * packing.per_var + fl + idx];
                    f += self.lambda1 * (pos + neg);
                    out[idx] = ga + self.lambda1;
                    out[fl + idx] = -ga + self.lambda1;
                }
            }
            let mut at = 2 * fl;
            for (l, gl) in g.layers.iter().enumerate() {
                if l == 0 {
                    out[at..at + gl.bias.len()].copy_from_slice(&gl.bias);
                    at += gl.bias.len();
                    continue;
                }
                for ((o, &gw), &w) in out[at..at + gl.weights.len()].iter_mut().zip(&gl.weights).zip(&model.layers[l].weights) {
                    *o = gw + self.lambda2 * w;
                    f += 0.5 * self.lambda2 * w * w;
                }
                at += gl.weights.len();
                out[at..at + gl.bias.len()].copy_from_slice(&gl.bias);
                at += gl.bias.len();
            }
        }
        f
    }
}

/// Fit NOTEARS-MLP by dual ascent on the acyclicity constraint.
///
/// Each dual step solves the augmented problem with L-BFGS under box
/// constraints, raising rho until `h` falls below `progress_ratio` times
/// its previous value, then updates the multiplier `alpha += rho * h`.
/// Stops once `h <= h_tol` or `rho >= rho_max`; an unmet tolerance is
/// reported through [`FitOutcome::converged`], not as an error.
pub fn fit(
    x: &DMatrix<f64>,
    config: &ModelConfig,
    solver: &SolverConfig,
    init: Init,
    options: &FitOptions<'_>,
) -> Result<FitOutcome> {
    config.validate()?;
    solver.validate()?;
    let (n, d) = x.shape();
    if n == 0 || d == 0 {
        return Err(CicmeError::Argument("fit needs a non-empty data matrix".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(CicmeError::Numeric("data contains non-finite values".into()));
    }
    let mut models = match init {
        Init::Random(seed) => ModelSet::random(d, config, seed),
        Init::Models(mut m) => {
            m.config = config.clone();
            m
        }
    };
    models.validate()?;
    if models.d() != d {
        return Err(CicmeError::Structural(format!(
            "initial model set has {} variables, data has {d}",
            models.d()
        )));
    }
    let freeze = if options.freeze.is_empty() { vec![false; d] } else { options.freeze.clone() };
    if freeze.len() != d {
        return Err(CicmeError::Argument(format!("freeze mask has length {}, expected {d}", freeze.len())));
    }
    // variables never feed themselves
    for (j, m) in models.models.iter_mut().enumerate() {
        if !freeze[j] {
            let first = &mut m.layers[0];
            for u in 0..first.rows {
                *first.weight_mut(u, j) = 0.0;
            }
        }
    }

    let trainable: Vec<usize> = (0..d).filter(|&j| !freeze[j]).collect();
    let h_now = |m: &ModelSet| trace_exp_of_squared(&squared_adjacency(m)).map(|(h, _)| h);
    let mut h = h_now(&models)?;
    let mut outcome = FitOutcome {
        models: models.clone(),
        converged: h <= solver.h_tol,
        h,
        rho: solver.rho_init,
        alpha: 0.0,
        dual_steps: 0,
        inner_solves: 0,
        evaluations: 0,
        rho_trace: Vec::new(),
        h_trace: Vec::new(),
    };
    if trainable.is_empty() {
        return Ok(outcome);
    }

    let packing = Packing::new(&models.models[trainable[0]], trainable);
    let bounds = packing.bounds();
    let mut ws = Workspace::default();
    let frozen_loss: f64 = (0..d)
        .filter(|&j| freeze[j])
        .map(|j| squared_loss(&models.models[j], x, j, config.activation, &mut ws))
        .sum::<f64>()
        + (0..d)
            .filter(|&j| freeze[j])
            .map(|j| {
                let m = &models.models[j];
                config.lambda1 * m.first_layer().weights.iter().map(|w| w.abs()).sum::<f64>()
                    + 0.5 * config.lambda2 * m.layers.iter().flat_map(|l| &l.weights).map(|w| w * w).sum::<f64>()
            })
            .sum::<f64>();

    let mut problem = Augmented {
        x,
        packing: &packing,
        activation: config.activation,
        lambda1: config.lambda1,
        lambda2: config.lambda2,
        rho: solver.rho_init,
        alpha: 0.0,
        penalty: options.penalty,
        frozen_loss,
        grads: packing.trainable.iter().map(|&j| models.models[j].zeros_like()).collect(),
        work: models.clone(),
        ws,
    };
    let mut params = packing.pack(&models);
    h = f64::INFINITY;

    for _ in 0..solver.max_dual_steps {
        let mut h_new = h;
        while problem.rho < solver.rho_max {
            let min = lbfgsb::minimize(&mut problem, &params, &bounds, &solver.inner)?;
            outcome.inner_solves += 1;
            outcome.evaluations += min.evaluations;
            params = min.x;
            packing.unpack(&params, &mut models);
            h_new = h_now(&models)?;
            log::debug!(
                "rho {:e} alpha {:e}: h {:e} after {} iterations ({:?})",
                problem.rho,
                problem.alpha,
                h_new,
                min.iterations,
                min.termination
            );
            outcome.rho_trace.push(problem.rho);
            if h_new > solver.progress_ratio * h {
                problem.rho *= solver.rho_growth;
            } else {
                break;
            }
        }
        problem.alpha += problem.rho * h_new;
        h = h_new;
        outcome.dual_steps += 1;
        outcome.h_trace.push(h);
        if h <= solver.h_tol || problem.rho >= solver.rho_max {
            break;
        }
    }

    if models.models.iter().any(|m| m.validate().is_err()) {
        return Err(CicmeError::Numeric("fit produced non-finite parameters".into()));
    }
    outcome.models = models;
    outcome.h = h;
    outcome.rho = problem.rho;
    outcome.alpha = problem.alpha;
    outcome.converged = h <= solver.h_tol;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::threshold;
    use crate::notears::acyclicity;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn pair_data(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = Normal::new(0.0, 1.0).unwrap();
        let small = Normal::new(0.0, 0.1).unwrap();
        let mut x = DMatrix::zeros(n, 2);
        for i in 0..n {
            let a = std.sample(&mut rng);
            x[(i, 0)] = a;
            x[(i, 1)] = 1.5 * a + small.sample(&mut rng);
        }
        x
    }

    #[test]
    fn packing_round_trip_and_bounds() {
        let set = ModelSet::random(3, &ModelConfig::default(), 4);
        let packing = Packing::new(&set.models[0], vec![0, 2]);
        let x = packing.pack(&set);
        assert_eq!(x.len(), packing.len());
        let mut back = set.clone();
        back.models[0] = MlpParams::zeros(3, &[10]);
        packing.unpack(&x, &mut back);
        assert_eq!(back, set);
        let b = packing.bounds();
        // first slot, positive part, unit 0, own column 0
        assert_eq!((b.lower[0], b.upper[0]), (0.0, 0.0));
        assert_eq!((b.lower[1], b.upper[1]), (0.0, f64::INFINITY));
    }

    struct Shift(DMatrix<f64>);

    impl AdjacencyPenalty for Shift {
        fn value_and_grad(&self, w: &WeightedAdjacency) -> (f64, DMatrix<f64>) {
            let diff = w.matrix() - &self.0;
            (diff.map(|v| v * v).sum(), diff * 2.0)
        }
    }

    #[test]
    fn augmented_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = DMatrix::from_fn(15, 3, |_, _| Normal::new(0.0, 1.0).unwrap().sample(&mut rng));
        let mut set = ModelSet::random(3, &ModelConfig::default(), 8);
        for m in &mut set.models {
            m.layers[0].weights.iter_mut().for_each(|w| *w *= 6.0);
        }
        let packing = Packing::new(&set.models[0], vec![0, 1]);
        let target = DMatrix::from_fn(3, 3, |k, j| 0.1 * (k + 2 * j) as f64);
        let shift = Shift(target);
        let mut problem = Augmented {
            x: &x,
            packing: &packing,
            activation: Activation::Sigmoid,
            lambda1: 0.01,
            lambda2: 0.02,
            rho: 3.0,
            alpha: 0.5,
            penalty: Some(&shift),
            frozen_loss: 0.0,
            grads: packing.trainable.iter().map(|&j| set.models[j].zeros_like()).collect(),
            work: set.clone(),
            ws: Workspace::default(),
        };
        let p = packing.pack(&set);
        let mut g = vec![0.0; p.len()];
        problem.evaluate(&p, &mut g);
        let eps = 1e-6;
        let mut scratch = vec![0.0; p.len()];
        for i in 0..p.len() {
            // stay inside the feasible region of the split parts
            if p[i] == 0.0 && i % packing.per_var < 2 * packing.first_len() {
                continue;
            }
            let mut plus = p.clone();
            plus[i] += eps;
            let mut minus = p.clone();
            minus[i] -= eps;
            let numeric = (problem.evaluate(&plus, &mut scratch) - problem.evaluate(&minus, &mut scratch)) / (2.0 * eps);
            let rel = (numeric - g[i]).abs() / g[i].abs().max(numeric.abs()).max(1e-3);
            assert!(rel <= 1e-4, "param {i}: {} vs {numeric}", g[i]);
        }
    }

    #[test]
    fn recovers_identifiable_pair() {
        let x = pair_data(1000, 1);
        let out = fit(&x, &ModelConfig::default(), &SolverConfig::default(), Init::Random(3), &FitOptions::default())
            .unwrap();
        let g = threshold(&out.adjacency(), 0.3).unwrap();
        assert_eq!(g.edges(), vec![(0, 1)]);
        assert!(out.converged);
        assert!(out.h <= 1e-8);
        assert!(out.rho_trace.windows(2).all(|w| w[0] <= w[1]));
        let w = out.adjacency();
        assert!((0..2).all(|j| w.get(j, j) == 0.0));
        assert!(acyclicity(&w).unwrap().value <= 1e-8);
    }

    #[test]
    fn fully_frozen_fit_is_identity() {
        let x = pair_data(50, 2);
        let init = ModelSet::random(2, &ModelConfig::default(), 9);
        let opts = FitOptions { freeze: vec![true, true], penalty: None };
        let out = fit(&x, &ModelConfig::default(), &SolverConfig::default(), Init::Models(init.clone()), &opts)
            .unwrap();
        assert_eq!(out.models, init);
        assert_eq!(out.inner_solves, 0);
    }

    #[test]
    fn frozen_variables_are_bit_identical() {
        let x = pair_data(200, 3);
        let init = ModelSet::random(2, &ModelConfig::default(), 10);
        let opts = FitOptions { freeze: vec![true, false], penalty: None };
        let out = fit(&x, &ModelConfig::default(), &SolverConfig::default(), Init::Models(init.clone()), &opts)
            .unwrap();
        assert_eq!(
            serde_json::to_vec(&out.models.models[0]).unwrap(),
            serde_json::to_vec(&init.models[0]).unwrap()
        );
        assert_ne!(out.models.models[1], init.models[1]);
    }

    #[test]
    fn fit_is_deterministic() {
        let x = pair_data(100, 4);
        let run = || {
            fit(&x, &ModelConfig::default(), &SolverConfig::default(), Init::Random(5), &FitOptions::default())
                .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn bad_freeze_mask_is_rejected() {
        let x = pair_data(10, 4);
        let opts = FitOptions { freeze: vec![true], penalty: None };
        assert!(fit(&x, &ModelConfig::default(), &SolverConfig::default(), Init::Random(1), &opts).is_err());
    }
}
