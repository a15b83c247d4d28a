use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Activation, ModelConfig};
use crate::error::{CicmeError, Result};

/// Dense layer with row-major `rows x cols` weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, weights: vec![0.0; rows * cols], bias: vec![0.0; rows] }
    }

    #[inline]
    pub fn weight(&self, u: usize, k: usize) -> f64 {
        self.weights[u * self.cols + k]
    }

    #[inline]
    pub fn weight_mut(&mut self, u: usize, k: usize) -> &mut f64 {
        &mut self.weights[u * self.cols + k]
    }

    fn fill(&mut self, value: f64) {
        self.weights.iter_mut().for_each(|w| *w = value);
        self.bias.iter_mut().for_each(|b| *b = value);
    }
}

/// Parameters of one variable's MLP. Hidden layers apply the activation;
/// the output layer is affine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

impl MlpParams {
    /// Zero-initialised network with the given hidden widths.
    pub fn zeros(d: usize, hidden: &[usize]) -> Self {
        let mut dims = vec![d];
        dims.extend_from_slice(hidden);
        dims.push(1);
        Self {
            layers: dims.windows(2).map(|w| Layer::zeros(w[1], w[0])).collect(),
        }
    }

    /// Uniform `[-0.1, 0.1]` weights and biases, with input column `own`
    /// of the first layer held at zero.
    pub fn random(d: usize, own: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(d, hidden);
        for layer in &mut p.layers {
            for w in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *w = rng.random_range(-0.1..=0.1);
            }
        }
        let first = &mut p.layers[0];
        for u in 0..first.rows {
            *first.weight_mut(u, own) = 0.0;
        }
        p
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols
    }

    pub fn first_layer(&self) -> &Layer {
        &self.layers[0]
    }

    pub fn validate(&self) -> Result<()> {
        let Some(last) = self.layers.last() else {
            return Err(CicmeError::Structural("MLP needs at least one layer".into()));
        };
        if last.rows != 1 {
            return Err(CicmeError::Structural("output layer must have one unit".into()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.weights.len() != layer.rows * layer.cols || layer.bias.len() != layer.rows {
                return Err(CicmeError::Structural(format!("layer {l} buffers do not match its shape")));
            }
            if l > 0 && layer.cols != self.layers[l - 1].rows {
                return Err(CicmeError::Structural(format!("layer {l} input width breaks the shape chain")));
            }
            if layer.weights.iter().chain(&layer.bias).any(|v| !v.is_finite()) {
                return Err(CicmeError::Numeric(format!("layer {l} has non-finite parameters")));
            }
        }
        Ok(())
    }

    pub(crate) fn zeros_like(&self) -> Self {
        let mut p = self.clone();
        p.layers.iter_mut().for_each(|l| l.fill(0.0));
        p
    }

    /// Predictions for every row of `x` (`n x d`).
    pub fn forward(&self, x: &DMatrix<f64>, activation: Activation) -> Result<Vec<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(CicmeError::Structural(format!(
                "data has {} columns, model expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        self.validate()?;
        let mut ws = Workspace::default();
        let out = self.forward_ws(x.as_slice(), x.nrows(), activation, &mut ws);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(CicmeError::Numeric("non-finite MLP output".into()));
        }
        Ok(out.to_vec())
    }

    /// Batched forward pass on feature-major input (`input[k * n + i]`).
    /// Layer outputs are cached in `ws` for the backward pass.
    pub(crate) fn forward_ws<'w>(
        &self,
        input: &[f64],
        n: usize,
        activation: Activation,
        ws: &'w mut Workspace,
    ) -> &'w [f64] {
        let depth = self.layers.len();
        ws.acts.resize_with(depth, Vec::new);
        for (l, layer) in self.layers.iter().enumerate() {
            let (done, rest) = ws.acts.split_at_mut(l);
            let src: &[f64] = if l == 0 { input } else { &done[l - 1] };
            let out = &mut rest[0];
            out.clear();
            out.resize(layer.rows * n, 0.0);
            for u in 0..layer.rows {
                let o = &mut out[u * n..(u + 1) * n];
                o.fill(layer.bias[u]);
                for k in 0..layer.cols {
                    let w = layer.weight(u, k);
                    if w != 0.0 {
                        axpy(w, &src[k * n..(k + 1) * n], o);
                    }
                }
                if l + 1 < depth {
                    o.iter_mut().for_each(|v| *v = activation.apply(*v));
                }
            }
        }
        &ws.acts[depth - 1]
    }

    /// Accumulate parameter gradients of `sum_i dout[i] * out[i]` into `grad`,
    /// using the activations left in `ws` by the matching forward call.
    pub(crate) fn backward_ws(
        &self,
        input: &[f64],
        n: usize,
        activation: Activation,
        ws: &mut Workspace,
        dout: &[f64],
        grad: &mut MlpParams,
    ) {
        let depth = self.layers.len();
        ws.delta.clear();
        ws.delta.extend_from_slice(dout);
        for l in (0..depth).rev() {
            let layer = &self.layers[l];
            let src: &[f64] = if l == 0 { input } else { &ws.acts[l - 1] };
            let g = &mut grad.layers[l];
            for u in 0..layer.rows {
                let du = &ws.delta[u * n..(u + 1) * n];
                g.bias[u] += du.iter().sum::<f64>();
                for k in 0..layer.cols {
                    g.weights[u * layer.cols + k] += dot(du, &src[k * n..(k + 1) * n]);
                }
            }
            if l == 0 {
                break;
            }
            // delta for the previous (hidden) layer's outputs
            ws.delta_next.clear();
            ws.delta_next.resize(layer.cols * n, 0.0);
            for u in 0..layer.rows {
                let du = &ws.delta[u * n..(u + 1) * n];
                for k in 0..layer.cols {
                    let w = layer.weight(u, k);
                    if w != 0.0 {
                        axpy(w, du, &mut ws.delta_next[k * n..(k + 1) * n]);
                    }
                }
            }
            let a = &ws.acts[l - 1];
            for (dn, &av) in ws.delta_next.iter_mut().zip(a.iter()) {
                *dn *= activation.derivative_from_output(av);
            }
            std::mem::swap(&mut ws.delta, &mut ws.delta_next);
        }
    }
}

#[derive(Debug, Default)]
pub(crate) struct Workspace {
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_next: Vec<f64>,
    pub(crate) scratch: Vec<f64>,
}

#[inline]
pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators; fixed order keeps results reproducible.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// One MLP per variable, `theta = (theta_1, ..., theta_d)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSet {
    pub models: Vec<MlpParams>,
    pub config: ModelConfig,
}

impl ModelSet {
    /// Fresh random parameters for every variable, drawn from `seed`.
    pub fn random(d: usize, config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = [config.hidden_units];
        Self {
            models: (0..d).map(|j| MlpParams::random(d, j, &hidden, &mut rng)).collect(),
            config: config.clone(),
        }
    }

    pub fn d(&self) -> usize {
        self.models.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let d = self.d();
        if d == 0 {
            return Err(CicmeError::Structural("model set is empty".into()));
        }
        let arch: Vec<(usize, usize)> =
            self.models[0].layers.iter().map(|l| (l.rows, l.cols)).collect();
        for (j, m) in self.models.iter().enumerate() {
            m.validate()?;
            if m.input_dim() != d {
                return Err(CicmeError::Structural(format!(
                    "model {j} takes {} inputs, expected {d}",
                    m.input_dim()
                )));
            }
            let a: Vec<(usize, usize)> = m.layers.iter().map(|l| (l.rows, l.cols)).collect();
            if a != arch {
                return Err(CicmeError::Structural(format!("model {j} has a different architecture")));
            }
        }
        Ok(())
    }

    /// Per-variable predictions on `x`.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<Vec<f64>>> {
        self.models.iter().map(|m| m.forward(x, self.config.activation)).collect()
    }

    /// `x_j - MLP(x; theta_j)` for each variable `j`.
    pub fn residuals(&self, x: &DMatrix<f64>) -> Result<Vec<Vec<f64>>> {
        let n = x.nrows();
        let preds = self.predict(x)?;
        Ok(preds
            .into_iter()
            .enumerate()
            .map(|(j, p)| (0..n).map(|i| x[(i, j)] - p[i]).collect())
            .collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }
}
