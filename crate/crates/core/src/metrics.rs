//! Graph post-processing and evaluation metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{CicmeError, Result};
use crate::notears::WeightedAdjacency;

/// Post-processing threshold applied to estimated weighted adjacencies.
pub const DEFAULT_THRESHOLD: f64 = 0.3;

/// Directed graph on `d` nodes; `has_edge(k, j)` means `k -> j`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryGraph {
    d: usize,
    adjacency: Vec<bool>,
}

impl BinaryGraph {
    pub fn empty(d: usize) -> Self {
        Self { d, adjacency: vec![false; d * d] }
    }

    /// Build from `(parent, child)` pairs. Self-loops are dropped.
    pub fn from_edges(d: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut g = Self::empty(d);
        for &(k, j) in edges {
            if k >= d || j >= d {
                return Err(CicmeError::Argument(format!("edge {k} -> {j} out of range")));
            }
            g.set(k, j, true);
        }
        Ok(g)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn has_edge(&self, k: usize, j: usize) -> bool {
        self.adjacency[k * self.d + j]
    }

    /// Diagonal writes are ignored.
    pub fn set(&mut self, k: usize, j: usize, present: bool) {
        if k != j {
            self.adjacency[k * self.d + j] = present;
        }
    }

    pub fn parents(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.d).filter(move |&k| self.has_edge(k, j))
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.d)
            .flat_map(|k| (0..self.d).map(move |j| (k, j)))
            .filter(|&(k, j)| self.has_edge(k, j))
            .collect()
    }

    pub fn num_edges(&self) -> usize {
        self.adjacency.iter().filter(|&&e| e).count()
    }

    /// Rows of 0/1 in `[parent][child]` order.
    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        (0..self.d)
            .map(|k| (0..self.d).map(|j| u8::from(self.has_edge(k, j))).collect())
            .collect()
    }
}

/// Keep the edges with weight strictly above `tau`.
pub fn threshold(w: &WeightedAdjacency, tau: f64) -> Result<BinaryGraph> {
    if !(tau > 0.0) {
        return Err(CicmeError::Argument(format!("threshold must be positive, got {tau}")));
    }
    let d = w.d();
    let mut g = BinaryGraph::empty(d);
    for k in 0..d {
        for j in 0..d {
            g.set(k, j, w.get(k, j) > tau);
        }
    }
    Ok(g)
}

fn check_dims(a: &BinaryGraph, b: &BinaryGraph) -> Result<()> {
    if a.d != b.d {
        return Err(CicmeError::Argument(format!(
            "graphs have different sizes ({} vs {})",
            a.d, b.d
        )));
    }
    Ok(())
}

/// Structural Hamming distance: additions, deletions and reversals, each
/// costing one.
///
/// Every unordered node pair whose connection state differs counts once, so
/// a reversed edge costs 1 rather than a deletion plus an addition.
pub fn shd(estimated: &BinaryGraph, truth: &BinaryGraph) -> Result<usize> {
    check_dims(estimated, truth)?;
    let d = truth.d;
    let mut count = 0;
    for a in 0..d {
        for b in (a + 1)..d {
            let est = (estimated.has_edge(a, b), estimated.has_edge(b, a));
            let tru = (truth.has_edge(a, b), truth.has_edge(b, a));
            if est != tru {
                count += 1;
            }
        }
    }
    Ok(count)
}

/// Size of the symmetric difference between estimated and true parents of `j`.
pub fn local_shd(estimated: &BinaryGraph, truth: &BinaryGraph, j: usize) -> Result<usize> {
    check_dims(estimated, truth)?;
    if j >= truth.d {
        return Err(CicmeError::Argument(format!("variable {j} out of range")));
    }
    Ok((0..truth.d)
        .filter(|&k| estimated.has_edge(k, j) != truth.has_edge(k, j))
        .count())
}

/// Per-domain evaluation of one method on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub per_domain_shd: Vec<usize>,
    pub mean_shd: f64,
    /// `lshd[k][j]`: local SHD of variable `j` in domain `k`.
    pub lshd: Vec<Vec<usize>>,
}

impl EvalRecord {
    pub fn evaluate(estimated: &[BinaryGraph], truth: &[BinaryGraph]) -> Result<Self> {
        if estimated.len() != truth.len() || truth.is_empty() {
            return Err(CicmeError::Argument(
                "need one estimated graph per ground-truth domain".into(),
            ));
        }
        let per_domain_shd = estimated
            .iter()
            .zip(truth)
            .map(|(e, t)| shd(e, t))
            .collect::<Result<Vec<_>>>()?;
        let lshd = estimated
            .iter()
            .zip(truth)
            .map(|(e, t)| (0..t.d()).map(|j| local_shd(e, t, j)).collect())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mean_shd: mean_usize(&per_domain_shd),
            per_domain_shd,
            lshd,
        })
    }
}

fn mean_usize(v: &[usize]) -> f64 {
    v.iter().sum::<usize>() as f64 / v.len() as f64
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; zero for fewer than two values.
pub fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Linear-interpolation quantile, `q` in `[0, 1]`.
pub fn quantile(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    if s.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

pub fn median(v: &[f64]) -> f64 {
    quantile(v, 0.5)
}

/// Renders an undefined mean LSHD as the table placeholder `−`.
pub fn lshd_cell(value: Option<f64>) -> String {
    value.map_or_else(|| "−".to_string(), |v| format!("{v:.2}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShdRow {
    pub experiment: String,
    pub n: usize,
    pub method: String,
    pub repeats: usize,
    pub mean_shd: f64,
    pub std_shd: f64,
    pub median_shd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StableRow {
    pub experiment: String,
    pub n: usize,
    pub variable: String,
    pub repeats: usize,
    pub stable_count: usize,
    /// Mean local SHD over the repeats where the variable was judged stable.
    pub mean_lshd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub experiment: String,
    pub n: usize,
    pub method: String,
    pub step: String,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

/// One repeat's contribution to the stable-count table.
#[derive(Debug, Clone)]
pub struct StableObservation<'a> {
    pub experiment: String,
    pub n: usize,
    pub stable: &'a [bool],
    pub lshd: &'a [f64],
}

/// Mean/std/median SHD per `(experiment, n, method)`.
pub fn summarize_shd<'a>(
    samples: impl IntoIterator<Item = (&'a str, usize, &'a str, f64)>,
) -> Vec<ShdRow> {
    let mut groups: BTreeMap<(String, usize, String), Vec<f64>> = BTreeMap::new();
    for (e, n, m, shd) in samples {
        groups.entry((e.to_string(), n, m.to_string())).or_default().push(shd);
    }
    groups
        .into_iter()
        .map(|((experiment, n, method), v)| ShdRow {
            experiment,
            n,
            method,
            repeats: v.len(),
            mean_shd: mean(&v),
            std_shd: std_dev(&v),
            median_shd: median(&v),
        })
        .collect()
}

/// Stable counts and conditional mean LSHD per `(experiment, n, variable)`.
pub fn summarize_stable(
    observations: &[StableObservation<'_>],
    variable_names: &[String],
) -> Vec<StableRow> {
    let mut groups: BTreeMap<(String, usize), Vec<&StableObservation<'_>>> = BTreeMap::new();
    for o in observations {
        groups.entry((o.experiment.clone(), o.n)).or_default().push(o);
    }
    let mut rows = Vec::new();
    for ((experiment, n), obs) in groups {
        for (j, name) in variable_names.iter().enumerate() {
            let stable_lshd: Vec<f64> = obs
                .iter()
                .filter(|o| o.stable.get(j).copied().unwrap_or(false))
                .map(|o| o.lshd[j])
                .collect();
            rows.push(StableRow {
                experiment: experiment.clone(),
                n,
                variable: name.clone(),
                repeats: obs.len(),
                stable_count: stable_lshd.len(),
                mean_lshd: (!stable_lshd.is_empty()).then(|| mean(&stable_lshd)),
            });
        }
    }
    rows
}

/// Median and quartiles per `(experiment, n, method, step)`.
pub fn summarize_timings<'a>(
    samples: impl IntoIterator<Item = (&'a str, usize, &'a str, &'a str, f64)>,
) -> Vec<TimingRow> {
    let mut groups: BTreeMap<(String, usize, String, String), Vec<f64>> = BTreeMap::new();
    for (e, n, m, step, t) in samples {
        groups
            .entry((e.to_string(), n, m.to_string(), step.to_string()))
            .or_default()
            .push(t);
    }
    groups
        .into_iter()
        .map(|((experiment, n, method, step), v)| TimingRow {
            experiment,
            n,
            method,
            step,
            median: median(&v),
            q1: quantile(&v, 0.25),
            q3: quantile(&v, 0.75),
        })
        .collect()
}

/// Markdown rendering: the stable-count table laid out one row per
/// `(experiment, n)` with a count/LSHD pair per variable, then SHD and
/// timing summaries.
pub fn render_markdown(
    stable: &[StableRow],
    shd_rows: &[ShdRow],
    timings: &[TimingRow],
    variable_names: &[String],
) -> String {
    let mut out = String::new();
    if !stable.is_empty() {
        out.push_str("## Identified stable variables\n\n| Experiment | Sample size |");
        for v in variable_names {
            let _ = write!(out, " {v} stable count | {v} LSHD |");
        }
        out.push_str("\n|---|---|");
        for _ in variable_names {
            out.push_str("---|---|");
        }
        out.push('\n');
        let mut groups: BTreeMap<(String, std::cmp::Reverse<usize>), Vec<&StableRow>> =
            BTreeMap::new();
        for r in stable {
            groups
                .entry((r.experiment.clone(), std::cmp::Reverse(r.n)))
                .or_default()
                .push(r);
        }
        for ((e, std::cmp::Reverse(n)), rows) in groups {
            let _ = write!(out, "| {e} | {n} |");
            for v in variable_names {
                match rows.iter().find(|r| &r.variable == v) {
                    Some(r) => {
                        let _ = write!(out, " {} | {} |", r.stable_count, lshd_cell(r.mean_lshd));
                    }
                    None => out.push_str(" | |"),
                }
            }
            out.push('\n');
        }
        out.push('\n');
    }
    if !shd_rows.is_empty() {
        out.push_str(
            "## SHD averaged over domains\n\n| Experiment | Sample size | Method | Repeats | Mean | Std | Median |\n|---|---|---|---|---|---|---|\n",
        );
        for r in shd_rows {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {:.3} | {:.3} | {:.3} |",
                r.experiment, r.n, r.method, r.repeats, r.mean_shd, r.std_shd, r.median_shd
            );
        }
        out.push('\n');
    }
    if !timings.is_empty() {
        out.push_str(
            "## Execution time (seconds)\n\n| Experiment | Sample size | Method | Step | Median | Q1 | Q3 |\n|---|---|---|---|---|---|---|\n",
        );
        for r in timings {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {:.4} | {:.4} | {:.4} |",
                r.experiment, r.n, r.method, r.step, r.median, r.q1, r.q3
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn chain() -> BinaryGraph {
        BinaryGraph::from_edges(3, &[(0, 1), (1, 2)]).unwrap()
    }

    #[test]
    fn threshold_is_strict() {
        let mut m = DMatrix::zeros(3, 3);
        m[(0, 1)] = 0.3;
        m[(1, 2)] = 0.31;
        m[(2, 2)] = 5.0;
        let g = threshold(&WeightedAdjacency::new(m).unwrap(), 0.3).unwrap();
        assert!(!g.has_edge(0, 1));
        assert!(g.has_edge(1, 2));
        assert!(!g.has_edge(2, 2));
        let empty = threshold(&WeightedAdjacency::zeros(3), 0.3).unwrap();
        assert_eq!(empty.num_edges(), 0);
        assert!(threshold(&WeightedAdjacency::zeros(3), 0.0).is_err());
    }

    #[test]
    fn shd_examples() {
        let g = chain();
        assert_eq!(shd(&g, &g).unwrap(), 0);
        let reversed = BinaryGraph::from_edges(3, &[(1, 0), (1, 2)]).unwrap();
        assert_eq!(shd(&reversed, &g).unwrap(), 1);
        assert_eq!(shd(&BinaryGraph::empty(3), &g).unwrap(), 2);
        assert!(shd(&BinaryGraph::empty(2), &g).is_err());
    }

    #[test]
    fn local_shd_examples() {
        let truth = BinaryGraph::from_edges(4, &[(0, 2), (1, 2), (2, 3)]).unwrap();
        assert_eq!(local_shd(&truth, &truth, 2).unwrap(), 0);
        let extra = BinaryGraph::from_edges(4, &[(0, 2), (1, 2), (2, 3), (0, 3)]).unwrap();
        assert_eq!(local_shd(&extra, &truth, 3).unwrap(), 1);
        assert_eq!(local_shd(&BinaryGraph::empty(4), &truth, 2).unwrap(), 2);
        assert!(local_shd(&truth, &truth, 4).is_err());
    }

    #[test]
    fn eval_record_averages_domains() {
        let truth = chain();
        let one_off = BinaryGraph::from_edges(3, &[(0, 1)]).unwrap();
        let est = vec![truth.clone(), one_off, BinaryGraph::empty(3)];
        let rec = EvalRecord::evaluate(&est, &vec![truth; 3]).unwrap();
        assert_eq!(rec.per_domain_shd, vec![0, 1, 2]);
        assert_eq!(rec.mean_shd, 1.0);
    }

    #[test]
    fn identical_repeats_have_zero_spread() {
        let rows = summarize_shd((0..100).map(|_| ("E1", 10, "cicme-f", 1.0)));
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].mean_shd, 1.0);
        assert_eq!(rows[0].std_shd, 0.0);
    }

    #[test]
    fn zero_stable_count_renders_dash() {
        let names: Vec<String> = vec!["X1".into(), "X2".into()];
        let stable = [true, false];
        let lshd = [0.0, 1.0];
        let obs = vec![StableObservation { experiment: "E3".into(), n: 1000, stable: &stable, lshd: &lshd }];
        let rows = summarize_stable(&obs, &names);
        assert_eq!(rows[0].stable_count, 1);
        assert_eq!(rows[1].stable_count, 0);
        assert_eq!(rows[1].mean_lshd, None);
        let md = render_markdown(&rows, &[], &[], &names);
        assert!(md.contains("| E3 | 1000 | 1 | 0.00 | 0 | − |"), "{md}");
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(median(&v), 2.5);
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert_eq!(quantile(&v, 0.25), 1.75);
    }
}
