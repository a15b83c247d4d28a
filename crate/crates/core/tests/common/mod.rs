//! Independent oracles shared by the integration and acceptance targets.
#![allow(dead_code)]

use std::collections::{HashMap, VecDeque};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use cicme::notears::{objective, ModelSet};
use cicme::stability::ResidualSample;
use cicme::BinaryGraph;

/// `X2 = 1.5 X1 + N(0, 0.1^2)` with standard normal `X1`.
pub fn pair_data(n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.1).unwrap();
    let mut x = DMatrix::zeros(n, 2);
    for i in 0..n {
        let x1: f64 = StandardNormal.sample(&mut rng);
        x[(i, 0)] = x1;
        x[(i, 1)] = 1.5 * x1 + noise.sample(&mut rng);
    }
    x
}

fn centered(x: &DMatrix<f64>, j: usize) -> Vec<f64> {
    let col = x.column(j);
    let m = col.mean();
    col.iter().map(|v| v - m).collect()
}

/// Summed least-squares residual variance of each 2-node structure:
/// index 0 is the empty graph, 1 is `X1 -> X2`, 2 is `X2 -> X1`.
pub fn pair_scores(x: &DMatrix<f64>) -> [f64; 3] {
    let a = centered(x, 0);
    let b = centered(x, 1);
    let n = a.len() as f64;
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).sum::<f64>() / n;
    let (vaa, vbb, vab) = (dot(&a, &a), dot(&b, &b), dot(&a, &b));
    [vaa + vbb, vaa + (vbb - vab * vab / vaa), vbb + (vaa - vab * vab / vbb)]
}

/// Exhaustive scoring over the three 2-node DAGs; returns the edge list of
/// the minimiser.
pub fn best_pair_structure(x: &DMatrix<f64>) -> Vec<(usize, usize)> {
    let s = pair_scores(x);
    let best = (0..3).min_by(|&i, &j| s[i].total_cmp(&s[j])).unwrap();
    match best {
        0 => vec![],
        1 => vec![(0, 1)],
        _ => vec![(1, 0)],
    }
}

/// `tr(exp(W o W)) - d` by the truncated power series.
pub fn series_acyclicity(w: &DMatrix<f64>, terms: usize) -> f64 {
    let d = w.nrows();
    let s = w.component_mul(w);
    let mut term = DMatrix::<f64>::identity(d, d);
    let mut total = 0.0;
    for k in 1..=terms {
        term = &term * &s / k as f64;
        total += term.trace();
    }
    total
}

/// Central-difference gradient of the objective for every parameter
/// except first-layer weights on the model's own input column.
pub fn objective_fd_check(models: &ModelSet, x: &DMatrix<f64>, eps: f64) -> f64 {
    let analytic = objective(models, x).unwrap().grads;
    let mut worst: f64 = 0.0;
    for j in 0..models.models.len() {
        for l in 0..models.models[j].layers.len() {
            let layer = &models.models[j].layers[l];
            let nw = layer.weights.len();
            for idx in 0..nw + layer.bias.len() {
                if l == 0 && idx < nw && idx % layer.cols == j {
                    continue;
                }
                let eval = |delta: f64| {
                    let mut m = models.clone();
                    let layer = &mut m.models[j].layers[l];
                    if idx < nw {
                        layer.weights[idx] += delta;
                    } else {
                        layer.bias[idx - nw] += delta;
                    }
                    objective(&m, x).unwrap().loss
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let g = &analytic[j].layers[l];
                let an = if idx < nw { g.weights[idx] } else { g.bias[idx - nw] };
                worst = worst.max((fd - an).abs() / an.abs().max(1.0));
            }
        }
    }
    worst
}

pub const D: usize = 3;
const PAIRS: [(usize, usize); 6] = [(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)];

pub fn from_mask(mask: u32) -> BinaryGraph {
    let edges: Vec<_> = PAIRS.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, &e)| e).collect();
    BinaryGraph::from_edges(D, &edges).unwrap()
}

fn is_acyclic(mask: u32) -> bool {
    // a 3-node digraph is cyclic iff it has a 2-cycle or a directed triangle
    let has = |k: usize, j: usize| mask >> PAIRS.iter().position(|&p| p == (k, j)).unwrap() & 1 == 1;
    let two = (0..D).any(|a| (0..D).any(|b| a != b && has(a, b) && has(b, a)));
    let tri = (has(0, 1) && has(1, 2) && has(2, 0)) || (has(0, 2) && has(2, 1) && has(1, 0));
    !two && !tri
}

/// Edit distance under single-edge insertion, deletion and reversal, by
/// breadth-first search over all 64 directed graphs on three nodes.
pub fn bfs_distances(from: u32) -> HashMap<u32, usize> {
    let mut dist = HashMap::from([(from, 0)]);
    let mut queue = VecDeque::from([from]);
    while let Some(g) = queue.pop_front() {
        let here = dist[&g];
        let mut next = Vec::new();
        for i in 0..6 {
            next.push(g ^ (1 << i));
            let (k, j) = PAIRS[i];
            let rev = PAIRS.iter().position(|&p| p == (j, k)).unwrap();
            if g >> i & 1 == 1 && g >> rev & 1 == 0 {
                next.push((g & !(1 << i)) | (1 << rev));
            }
        }
        for h in next {
            if !dist.contains_key(&h) {
                dist.insert(h, here + 1);
                queue.push_back(h);
            }
        }
    }
    dist
}

/// The 25 acyclic graphs on three labelled nodes, as edge masks over `PAIRS`.
pub fn three_node_dags() -> Vec<u32> {
    (0..64).filter(|&m| is_acyclic(m)).collect()
}

/// Standard normal residuals with three balanced domains.
pub fn null_sample(n: usize, rng: &mut ChaCha8Rng) -> ResidualSample {
    let residuals = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let domains = (0..n).map(|i| i * 3 / n + 1).collect();
    ResidualSample::new(residuals, domains).unwrap()
}
