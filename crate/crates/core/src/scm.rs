//! Ground-truth structural causal models and the synthetic multi-domain
//! datasets used by the experiments.
//!
//! Every model is a linear additive-noise system over a DAG. The leakage
//! test system has four variables
//!
//! ```text
//! X1 := N1
//! X2 := N2
//! X3 := X1 + X2 + N3
//! X4 := H * X3 + N4
//! ```
//!
//! where `H` is stored as the weight of the edge `X3 -> X4`.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CicmeError, Result};
use crate::metrics::BinaryGraph;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub parent: usize,
    pub child: usize,
    pub weight: f64,
}

/// A linear additive-noise functional causal model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcmSpec {
    pub d: usize,
    pub edges: Vec<Edge>,
    pub noise_means: Vec<f64>,
    /// A standard deviation of zero makes the noise the constant mean.
    pub noise_stds: Vec<f64>,
    pub variable_names: Vec<String>,
}

impl FcmSpec {
    /// The four-variable leakage test system with `X3 -> X4` weight `h`
    /// and standard Gaussian noises.
    pub fn leakage_test(h: f64) -> Self {
        Self {
            d: 4,
            edges: vec![
                Edge { parent: 0, child: 2, weight: 1.0 },
                Edge { parent: 1, child: 2, weight: 1.0 },
                Edge { parent: 2, child: 3, weight: h },
            ],
            noise_means: vec![0.0; 4],
            noise_stds: vec![1.0; 4],
            variable_names: (1..=4).map(|i| format!("X{i}")).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d;
        if d == 0 {
            return Err(CicmeError::Structural("model has no variables".into()));
        }
        if self.noise_means.len() != d || self.noise_stds.len() != d || self.variable_names.len() != d
        {
            return Err(CicmeError::Structural(format!(
                "per-variable vectors must have length {d}"
            )));
        }
        if let Some(s) = self.noise_stds.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(CicmeError::Structural(format!("invalid noise std {s}")));
        }
        if let Some(m) = self.noise_means.iter().find(|m| !m.is_finite()) {
            return Err(CicmeError::Structural(format!("invalid noise mean {m}")));
        }
        for e in &self.edges {
            if e.parent >= d || e.child >= d {
                return Err(CicmeError::Structural(format!(
                    "edge {} -> {} out of range for d = {d}",
                    e.parent, e.child
                )));
            }
            if !e.weight.is_finite() {
                return Err(CicmeError::Structural(format!(
                    "edge {} -> {} has non-finite weight",
                    e.parent, e.child
                )));
            }
        }
        self.topological_order().map(|_| ())
    }

    /// Kahn's algorithm; errors on a cycle (self-loops included).
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        let d = self.d;
        let mut indegree = vec![0usize; d];
        let mut children = vec![Vec::new(); d];
        for e in &self.edges {
            if e.parent >= d || e.child >= d {
                return Err(CicmeError::Structural("edge index out of range".into()));
            }
            indegree[e.child] += 1;
            children[e.parent].push(e.child);
        }
        let mut queue: Vec<usize> = (0..d).filter(|&j| indegree[j] == 0).collect();
        let mut order = Vec::with_capacity(d);
        let mut head = 0;
        while head < queue.len() {
            let v = queue[head];
            head += 1;
            order.push(v);
            for &c in &children[v] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    queue.push(c);
                }
            }
        }
        if order.len() != d {
            return Err(CicmeError::Structural("edge list contains a cycle".into()));
        }
        Ok(order)
    }

    /// Binary graph of the edges with non-zero weight.
    pub fn truth_graph(&self) -> BinaryGraph {
        let mut g = BinaryGraph::empty(self.d);
        for e in self.edges.iter().filter(|e| e.weight != 0.0) {
            g.set(e.parent, e.child, true);
        }
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarValue {
    pub var: usize,
    pub value: f64,
}

/// Per-domain replacements applied on top of a base model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Overrides {
    /// Weight replacements for existing edges; a weight of 0 removes the edge.
    pub edge_weights: Vec<Edge>,
    pub noise_means: Vec<VarValue>,
    pub noise_stds: Vec<VarValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub base: FcmSpec,
    /// 1-based domain index.
    pub k: usize,
    pub overrides: Overrides,
}

impl DomainSpec {
    pub fn new(base: FcmSpec, k: usize) -> Self {
        Self { base, k, overrides: Overrides::default() }
    }

    /// The base model with this domain's overrides applied.
    pub fn resolve(&self) -> Result<FcmSpec> {
        let mut spec = self.base.clone();
        for o in &self.overrides.edge_weights {
            let edge = spec
                .edges
                .iter_mut()
                .find(|e| e.parent == o.parent && e.child == o.child)
                .ok_or_else(|| {
                    CicmeError::Structural(format!(
                        "override references missing edge {} -> {}",
                        o.parent, o.child
                    ))
                })?;
            edge.weight = o.weight;
        }
        let d = spec.d;
        for (target, values) in [
            (&mut spec.noise_means, &self.overrides.noise_means),
            (&mut spec.noise_stds, &self.overrides.noise_stds),
        ] {
            for v in values {
                if v.var >= d || v.var >= target.len() {
                    return Err(CicmeError::Structural(format!(
                        "override references missing variable {}",
                        v.var
                    )));
                }
                target[v.var] = v.value;
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn truth_graph(&self) -> Result<BinaryGraph> {
        Ok(self.resolve()?.truth_graph())
    }
}

/// Draw `n` independent rows from the domain's model.
pub fn sample_domain(spec: &DomainSpec, n: usize, seed: u64) -> Result<DMatrix<f64>> {
    if n == 0 {
        return Err(CicmeError::Argument("sample count must be at least 1".into()));
    }
    let fcm = spec.resolve()?;
    let order = fcm.topological_order()?;
    let d = fcm.d;
    let mut parents: Vec<Vec<(usize, f64)>> = vec![Vec::new(); d];
    for e in &fcm.edges {
        parents[e.child].push((e.parent, e.weight));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DMatrix::zeros(n, d);
    let mut row = vec![0.0; d];
    for i in 0..n {
        for &j in &order {
            let z: f64 = rng.sample(StandardNormal);
            let mut v = fcm.noise_means[j] + fcm.noise_stds[j] * z;
            for &(p, w) in &parents[j] {
                v += w * row[p];
            }
            row[j] = v;
        }
        for j in 0..d {
            x[(i, j)] = row[j];
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Experiment {
    /// `H` differs across domains.
    E1,
    /// As E1, with `H = 0` in one randomly chosen domain.
    E2,
    /// Mean of `N2` shifted per domain.
    E3,
    /// `N2` fixed to a per-domain constant.
    E4,
}

impl Experiment {
    pub const ALL: [Experiment; 4] = [Experiment::E1, Experiment::E2, Experiment::E3, Experiment::E4];

    pub fn id(self) -> u64 {
        match self {
            Experiment::E1 => 1,
            Experiment::E2 => 2,
            Experiment::E3 => 3,
            Experiment::E4 => 4,
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "E{}", self.id())
    }
}

impl FromStr for Experiment {
    type Err = CicmeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "E1" => Ok(Experiment::E1),
            "E2" => Ok(Experiment::E2),
            "E3" => Ok(Experiment::E3),
            "E4" => Ok(Experiment::E4),
            other => Err(CicmeError::Argument(format!("unknown experiment '{other}'"))),
        }
    }
}

/// Uniform on `[-2, -0.5] ∪ [0.5, 2]`: a fair sign times `U[0.5, 2]`.
fn draw_coefficient(rng: &mut impl Rng) -> f64 {
    let magnitude = rng.random_range(0.5..=2.0);
    if rng.random_bool(0.5) {
        magnitude
    } else {
        -magnitude
    }
}

pub const NUM_DOMAINS: usize = 3;

/// The three per-domain settings of an experiment, drawn from `seed`.
pub fn experiment_specs(experiment: Experiment, seed: u64) -> Vec<DomainSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[seed::tag("experiment")]));
    let base = FcmSpec::leakage_test(1.0);
    let mut specs: Vec<DomainSpec> =
        (1..=NUM_DOMAINS).map(|k| DomainSpec::new(base.clone(), k)).collect();
    let h_edge = |weight| Edge { parent: 2, child: 3, weight };
    match experiment {
        Experiment::E1 | Experiment::E2 => {
            for spec in &mut specs {
                spec.overrides.edge_weights.push(h_edge(draw_coefficient(&mut rng)));
            }
            if experiment == Experiment::E2 {
                let cut = rng.random_range(0..NUM_DOMAINS);
                specs[cut].overrides.edge_weights = vec![h_edge(0.0)];
            }
        }
        Experiment::E3 | Experiment::E4 => {
            for spec in &mut specs {
                let c = draw_coefficient(&mut rng);
                spec.overrides.noise_means.push(VarValue { var: 1, value: c });
                if experiment == Experiment::E4 {
                    spec.overrides.noise_stds.push(VarValue { var: 1, value: 0.0 });
                }
            }
        }
    }
    specs
}

/// Seed of domain `k`'s sample stream under experiment seed `seed`.
pub fn domain_seed(seed: u64, k: usize) -> u64 {
    seed::derive(seed, &[seed::tag("domain"), k as u64])
}

/// Sample an experiment with `n` rows per domain.
pub fn make_experiment(experiment: Experiment, n: usize, seed: u64) -> Result<MultiDomainDataset> {
    if n == 0 {
        return Err(CicmeError::Argument("per-domain sample count must be at least 1".into()));
    }
    let specs = experiment_specs(experiment, seed);
    let domains = specs
        .iter()
        .map(|s| sample_domain(s, n, domain_seed(seed, s.k)))
        .collect::<Result<Vec<_>>>()?;
    Ok(MultiDomainDataset {
        variable_names: specs[0].base.variable_names.clone(),
        domains,
        truth: Some(specs),
        provenance: Some(Provenance { experiment, n, seed }),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub experiment: Experiment,
    pub n: usize,
    pub seed: u64,
}

/// `K` per-domain sample matrices (rows are samples) over shared variables.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiDomainDataset {
    pub variable_names: Vec<String>,
    pub domains: Vec<DMatrix<f64>>,
    pub truth: Option<Vec<DomainSpec>>,
    pub provenance: Option<Provenance>,
}

impl MultiDomainDataset {
    pub fn new(variable_names: Vec<String>, domains: Vec<DMatrix<f64>>) -> Result<Self> {
        let ds = Self { variable_names, domains, truth: None, provenance: None };
        ds.validate()?;
        Ok(ds)
    }

    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn d(&self) -> usize {
        self.variable_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(CicmeError::Structural("dataset has no domains".into()));
        }
        let d = self.d();
        for (k, m) in self.domains.iter().enumerate() {
            if m.ncols() != d {
                return Err(CicmeError::Structural(format!(
                    "domain {} has {} columns, expected {d}",
                    k + 1,
                    m.ncols()
                )));
            }
            if m.nrows() == 0 {
                return Err(CicmeError::Structural(format!("domain {} is empty", k + 1)));
            }
        }
        if let Some(truth) = &self.truth {
            if truth.len() != self.domains.len() {
                return Err(CicmeError::Structural("one ground truth per domain required".into()));
            }
        }
        Ok(())
    }

    /// Row-concatenation in domain order plus the 1-based domain label of each row.
    pub fn pool(&self) -> Result<(DMatrix<f64>, Vec<usize>)> {
        self.validate()?;
        let d = self.d();
        let total: usize = self.domains.iter().map(|m| m.nrows()).sum();
        let mut pooled = DMatrix::zeros(total, d);
        let mut index = Vec::with_capacity(total);
        let mut offset = 0;
        for (k, m) in self.domains.iter().enumerate() {
            pooled.view_mut((offset, 0), (m.nrows(), d)).copy_from(m);
            index.extend(std::iter::repeat_n(k + 1, m.nrows()));
            offset += m.nrows();
        }
        Ok((pooled, index))
    }

    /// Ground-truth graphs per domain, when known.
    pub fn truth_graphs(&self) -> Result<Option<Vec<BinaryGraph>>> {
        self.truth
            .as_ref()
            .map(|t| t.iter().map(DomainSpec::truth_graph).collect())
            .transpose()
    }

    /// Write `domain_<k>.csv`, `pooled.csv` and the `dataset.json` sidecar.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| CicmeError::io(dir, e))?;
        for (k, m) in self.domains.iter().enumerate() {
            let path = dir.join(format!("domain_{}.csv", k + 1));
            write_matrix_csv(&path, &self.variable_names, m, None)?;
        }
        let (pooled, index) = self.pool()?;
        write_matrix_csv(&dir.join("pooled.csv"), &self.variable_names, &pooled, Some(&index))?;
        let meta = DatasetMeta {
            variable_names: self.variable_names.clone(),
            num_domains: self.num_domains(),
            rows: self.domains.iter().map(|m| m.nrows()).collect(),
            truth: self.truth.clone(),
            provenance: self.provenance,
            seed: self.provenance.map(|p| p.seed),
        };
        let path = dir.join("dataset.json");
        let body = serde_json::to_string_pretty(&meta)?;
        fs::write(&path, body).map_err(|e| CicmeError::io(&path, e))
    }

    /// Inverse of [`write_dir`](Self::write_dir).
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let path = dir.join("dataset.json");
        let body = fs::read_to_string(&path).map_err(|e| CicmeError::io(&path, e))?;
        let meta: DatasetMeta = serde_json::from_str(&body)?;
        let domains = (1..=meta.num_domains)
            .map(|k| read_matrix_csv(&dir.join(format!("domain_{k}.csv")), &meta.variable_names))
            .collect::<Result<Vec<_>>>()?;
        let ds = Self {
            variable_names: meta.variable_names,
            domains,
            truth: meta.truth,
            provenance: meta.provenance,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Split a pooled matrix back into per-domain matrices by 1-based label.
pub fn split_by_domain(pooled: &DMatrix<f64>, index: &[usize]) -> Result<Vec<DMatrix<f64>>> {
    if pooled.nrows() != index.len() {
        return Err(CicmeError::Structural("domain index length differs from row count".into()));
    }
    let k_max = index.iter().copied().max().unwrap_or(0);
    if index.contains(&0) {
        return Err(CicmeError::Structural("domain labels are 1-based".into()));
    }
    Ok((1..=k_max)
        .map(|k| {
            let rows: Vec<usize> = (0..index.len()).filter(|&i| index[i] == k).collect();
            pooled.select_rows(rows.iter())
        })
        .collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    variable_names: Vec<String>,
    num_domains: usize,
    rows: Vec<usize>,
    truth: Option<Vec<DomainSpec>>,
    provenance: Option<Provenance>,
    seed: Option<u64>,
}

fn write_matrix_csv(
    path: &Path,
    names: &[String],
    m: &DMatrix<f64>,
    domain: Option<&[usize]>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    let mut header: Vec<&str> = names.iter().map(String::as_str).collect();
    if domain.is_some() {
        header.push("domain");
    }
    w.write_record(&header)?;
    for i in 0..m.nrows() {
        let mut rec: Vec<String> = (0..m.ncols()).map(|j| m[(i, j)].to_string()).collect();
        if let Some(idx) = domain {
            rec.push(idx[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| CicmeError::io(path, e))
}

fn read_matrix_csv(path: &Path, names: &[String]) -> Result<DMatrix<f64>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header.len() < names.len() || header[..names.len()] != *names {
        return Err(CicmeError::Structural(format!(
            "{}: header {header:?} does not match variables {names:?}",
            path.display()
        )));
    }
    let d = names.len();
    let mut values = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec?;
        for j in 0..d {
            let field = rec.get(j).unwrap_or("");
            let v: f64 = field.parse().map_err(|_| {
                CicmeError::Structural(format!("{}: bad number '{field}'", path.display()))
            })?;
            values.push(v);
        }
        rows += 1;
    }
    Ok(DMatrix::from_row_slice(rows, d, &values))
}

fn csv_io(path: &Path, e: csv::Error) -> CicmeError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CicmeError::io(path, io),
        other => CicmeError::Structural(format!("{}: {other:?}", path.display())),
    }
}
