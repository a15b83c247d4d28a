//! The three CICME steps and the two NOTEARS baselines.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CicmeError, Result};
use crate::metrics::{threshold, BinaryGraph, DEFAULT_THRESHOLD};
use crate::notears::{
    extract_adjacency, fit, AdjacencyPenalty, FitOptions, Init, ModelConfig, ModelSet, SolverConfig,
    WeightedAdjacency,
};
use crate::scm::MultiDomainDataset;
use crate::seed::{derive, tag};
use crate::stability::{detect_stable_with, StabilityReport, TestOptions};

/// How step 3 reuses the stable mechanisms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Load and freeze the pooled parameters of stable variables.
    Freeze,
    /// Penalise deviation of stable columns of `W` from the pooled estimate.
    LossPenalty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "cicme-f")]
    CicmeF,
    #[serde(rename = "cicme-l")]
    CicmeL,
    #[serde(rename = "notears-pool")]
    NotearsPool,
    #[serde(rename = "notears-ind")]
    NotearsInd,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::CicmeF, Method::CicmeL, Method::NotearsPool, Method::NotearsInd];

    pub fn name(self) -> &'static str {
        match self {
            Method::CicmeF => "cicme-f",
            Method::CicmeL => "cicme-l",
            Method::NotearsPool => "notears-pool",
            Method::NotearsInd => "notears-ind",
        }
    }

    pub fn variant(self) -> Option<Variant> {
        match self {
            Method::CicmeF => Some(Variant::Freeze),
            Method::CicmeL => Some(Variant::LossPenalty),
            _ => None,
        }
    }

    pub fn uses_pool(self) -> bool {
        self != Method::NotearsInd
    }

    pub fn uses_stability(self) -> bool {
        self.variant().is_some()
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = CicmeError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| CicmeError::Argument(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CicmeConfig {
    pub variant: Variant,
    /// Weight of the common-structure loss in the penalty variant.
    pub gamma: f64,
    /// Level of the stability test.
    pub alpha: f64,
    pub model: ModelConfig,
    pub solver: SolverConfig,
    pub test: TestOptions,
    pub seed: u64,
    pub threshold: f64,
}

impl Default for CicmeConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Freeze,
            gamma: 10.0,
            alpha: 0.05,
            model: ModelConfig::default(),
            solver: SolverConfig::default(),
            test: TestOptions::default(),
            seed: 0,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl CicmeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(CicmeError::Argument(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(CicmeError::Argument(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.threshold > 0.0) {
            return Err(CicmeError::Argument(format!("threshold must be positive, got {}", self.threshold)));
        }
        self.model.validate()?;
        self.solver.validate()
    }

    fn pool_seed(&self) -> u64 {
        derive(self.seed, &[tag("pool")])
    }

    /// Shared by every per-domain fit so the methods stay paired.
    fn domain_seed(&self, k: usize) -> u64 {
        derive(self.seed, &[tag("domain-fit"), k as u64])
    }
}

/// `M[k, j] = 1` exactly when variable `j` is stable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StableMask {
    stable: Vec<bool>,
}

impl StableMask {
    pub fn new(stable: Vec<bool>) -> Self {
        Self { stable }
    }

    pub fn d(&self) -> usize {
        self.stable.len()
    }

    pub fn get(&self, _k: usize, j: usize) -> bool {
        self.stable[j]
    }

    pub fn stable(&self) -> &[bool] {
        &self.stable
    }

    /// `sum_kj M_kj`.
    pub fn total(&self) -> usize {
        self.d() * self.stable.iter().filter(|&&s| s).count()
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        let d = self.d();
        DMatrix::from_fn(d, d, |_, j| if self.stable[j] { 1.0 } else { 0.0 })
    }
}

fn check_shapes(w_pool: &WeightedAdjacency, w_ind: &WeightedAdjacency, mask: &StableMask) -> Result<()> {
    if w_pool.d() != w_ind.d() || w_pool.d() != mask.d() {
        return Err(CicmeError::Structural(format!(
            "shape mismatch: pooled {}, individual {}, mask {}",
            w_pool.d(),
            w_ind.d(),
            mask.d()
        )));
    }
    Ok(())
}

/// Masked mean squared difference `sum M (W_pool - W)^2 / sum M`, zero for
/// an empty mask.
pub fn common_structure_loss(w_pool: &WeightedAdjacency, w_ind: &WeightedAdjacency, mask: &StableMask) -> Result<f64> {
    check_shapes(w_pool, w_ind, mask)?;
    let total = mask.total();
    if total == 0 {
        return Ok(0.0);
    }
    let d = mask.d();
    let mut s = 0.0;
    for j in (0..d).filter(|&j| mask.stable[j]) {
        for k in 0..d {
            let diff = w_pool.get(k, j) - w_ind.get(k, j);
            s += diff * diff;
        }
    }
    Ok(s / total as f64)
}

/// `gamma * L_com` as an adjacency penalty for the per-domain fits.
#[derive(Debug, Clone)]
pub struct CommonStructurePenalty {
    pub pooled: WeightedAdjacency,
    pub mask: StableMask,
    pub gamma: f64,
}

impl AdjacencyPenalty for CommonStructurePenalty {
    fn value_and_grad(&self, w: &WeightedAdjacency) -> (f64, DMatrix<f64>) {
        let d = w.d();
        let mut grad = DMatrix::zeros(d, d);
        let total = self.mask.total();
        if total == 0 || self.gamma == 0.0 {
            return (0.0, grad);
        }
        let scale = self.gamma / total as f64;
        let mut value = 0.0;
        for j in (0..d).filter(|&j| self.mask.stable[j]) {
            for k in 0..d {
                let diff = self.pooled.get(k, j) - w.get(k, j);
                value += diff * diff;
                grad[(k, j)] = -2.0 * scale * diff;
            }
        }
        (scale * value, grad)
    }
}

/// A fitted model set with its adjacency and thresholded graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub models: ModelSet,
    pub adjacency: WeightedAdjacency,
    pub graph: BinaryGraph,
    pub converged: bool,
    pub h: f64,
}

impl Estimate {
    fn new(models: ModelSet, converged: bool, h: f64, tau: f64) -> Result<Self> {
        let adjacency = extract_adjacency(&models);
        let graph = threshold(&adjacency, tau)?;
        Ok(Self { models, adjacency, graph, converged, h })
    }
}

/// Per-domain step-3 outcome; a failed fit keeps its error message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainResult {
    /// Zero-based domain position in the dataset.
    pub domain: usize,
    pub estimate: Option<Estimate>,
    pub error: Option<String>,
}

/// Wall-clock seconds per step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub step1: f64,
    pub step2: f64,
    pub step3: f64,
}

impl Timings {
    pub fn total(&self) -> f64 {
        self.step1 + self.step2 + self.step3
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CicmeResult {
    pub method: Method,
    pub config: CicmeConfig,
    pub pooled: Option<Estimate>,
    pub stability: Option<StabilityReport>,
    pub domains: Vec<DomainResult>,
    pub timings: Timings,
}

impl CicmeResult {
    /// Thresholded per-domain graphs, or the first domain error.
    pub fn graphs(&self) -> Result<Vec<BinaryGraph>> {
        self.domains
            .iter()
            .map(|d| match &d.estimate {
                Some(e) => Ok(e.graph.clone()),
                None => Err(CicmeError::Numeric(format!(
                    "domain {} failed: {}",
                    d.domain,
                    d.error.as_deref().unwrap_or("unknown error")
                ))),
            })
            .collect()
    }

    pub fn stable(&self) -> Option<Vec<bool>> {
        self.stability.as_ref().map(StabilityReport::stable)
    }

    /// Every fit that ran reached `h <= h_tol`.
    pub fn converged(&self) -> bool {
        self.pooled.as_ref().is_none_or(|p| p.converged)
            && self.domains.iter().all(|d| d.estimate.as_ref().is_some_and(|e| e.converged))
    }

    pub fn failed_domains(&self) -> usize {
        self.domains.iter().filter(|d| d.estimate.is_none()).count()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn check_dataset(dataset: &MultiDomainDataset) -> Result<()> {
    dataset.validate()?;
    if dataset.num_domains() == 0 {
        return Err(CicmeError::Argument("dataset has no domains".into()));
    }
    Ok(())
}

/// Step 1: NOTEARS-MLP on the pooled data. Domain labels are not inputs.
pub fn step1_pool(dataset: &MultiDomainDataset, config: &CicmeConfig) -> Result<Estimate> {
    check_dataset(dataset)?;
    let (x, _) = dataset.pool()?;
    let out = fit(&x, &config.model, &config.solver, Init::Random(config.pool_seed()), &FitOptions::default())?;
    if !out.converged {
        log::warn!("pooled fit stopped at h = {:e}", out.h);
    }
    Estimate::new(out.models, out.converged, out.h, config.threshold)
}

/// Step 2: residual-versus-domain tests on the pooled model.
pub fn step2_stability(dataset: &MultiDomainDataset, pooled: &ModelSet, config: &CicmeConfig) -> Result<StabilityReport> {
    let (x, labels) = dataset.pool()?;
    detect_stable_with(pooled, &x, &labels, config.alpha, &config.test)
}

fn domain_fits(
    dataset: &MultiDomainDataset,
    config: &CicmeConfig,
    mut fit_one: impl FnMut(usize, &DMatrix<f64>) -> Result<Estimate>,
) -> Vec<DomainResult> {
    dataset
        .domains
        .iter()
        .enumerate()
        .map(|(k, x)| match fit_one(k, x) {
            Ok(e) => {
                if !e.converged {
                    log::warn!("domain {k} fit stopped at h = {:e} (seed {})", e.h, config.seed);
                }
                DomainResult { domain: k, estimate: Some(e), error: None }
            }
            Err(err) => {
                log::warn!("domain {k} fit failed: {err}");
                DomainResult { domain: k, estimate: None, error: Some(err.to_string()) }
            }
        })
        .collect()
}

fn check_stable(stable: &[bool], d: usize) -> Result<()> {
    if stable.len() != d {
        return Err(CicmeError::Argument(format!("stable set has length {}, expected {d}", stable.len())));
    }
    Ok(())
}

/// Step 3, freeze variant: stable variables keep the pooled parameters and
/// are not trained; the rest start from fresh random parameters.
pub fn step3_freeze(
    dataset: &MultiDomainDataset,
    pooled: &ModelSet,
    stable: &[bool],
    config: &CicmeConfig,
) -> Result<Vec<DomainResult>> {
    check_dataset(dataset)?;
    check_stable(stable, dataset.d())?;
    Ok(domain_fits(dataset, config, |k, x| {
        let mut init = ModelSet::random(dataset.d(), &config.model, config.domain_seed(k));
        for (j, &s) in stable.iter().enumerate() {
            if s {
                init.models[j] = pooled.models[j].clone();
            }
        }
        let options = FitOptions { freeze: stable.to_vec(), penalty: None };
        let out = fit(x, &config.model, &config.solver, Init::Models(init), &options)?;
        Estimate::new(out.models, out.converged, out.h, config.threshold)
    }))
}

/// Step 3, penalty variant: every parameter trains from a fresh start with
/// `gamma * L_com` added to the objective.
pub fn step3_penalty(
    dataset: &MultiDomainDataset,
    w_pool: &WeightedAdjacency,
    stable: &[bool],
    config: &CicmeConfig,
) -> Result<Vec<DomainResult>> {
    check_dataset(dataset)?;
    check_stable(stable, dataset.d())?;
    let penalty = CommonStructurePenalty { pooled: w_pool.clone(), mask: StableMask::new(stable.to_vec()), gamma: config.gamma };
    Ok(domain_fits(dataset, config, |k, x| {
        let options = FitOptions { freeze: Vec::new(), penalty: Some(&penalty) };
        let out = fit(x, &config.model, &config.solver, Init::Random(config.domain_seed(k)), &options)?;
        Estimate::new(out.models, out.converged, out.h, config.threshold)
    }))
}

/// Per-domain NOTEARS-MLP fits with nothing shared.
pub fn notears_ind(dataset: &MultiDomainDataset, config: &CicmeConfig) -> Result<Vec<DomainResult>> {
    let none = vec![false; dataset.d()];
    step3_freeze(dataset, &ModelSet::random(dataset.d(), &config.model, 0), &none, config)
}

/// Run one method end to end.
pub fn run(dataset: &MultiDomainDataset, method: Method, config: &CicmeConfig) -> Result<CicmeResult> {
    run_many(dataset, &[method], config)?.pop().expect("one method requested").1
}

/// Run several methods on one dataset, computing steps 1 and 2 once.
///
/// Shared steps are deterministic, so each method gets exactly the result
/// it would compute alone; their measured time is charged to every method
/// that uses them.
pub fn run_many(
    dataset: &MultiDomainDataset,
    methods: &[Method],
    config: &CicmeConfig,
) -> Result<Vec<(Method, Result<CicmeResult>)>> {
    config.validate()?;
    check_dataset(dataset)?;
    if methods.is_empty() {
        return Err(CicmeError::Argument("no methods selected".into()));
    }
    let mut step1 = None;
    if methods.iter().any(|m| m.uses_pool()) {
        let t = Instant::now();
        let pooled = step1_pool(dataset, config);
        step1 = Some((pooled, t.elapsed().as_secs_f64()));
    }
    let mut step2 = None;
    if let Some((Ok(pooled), _)) = &step1 {
        if methods.iter().any(|m| m.uses_stability()) {
            let t = Instant::now();
            let report = step2_stability(dataset, &pooled.models, config);
            step2 = Some((report, t.elapsed().as_secs_f64()));
        }
    }

    let results = methods
        .iter()
        .map(|&method| {
            let mut method_config = config.clone();
            if let Some(v) = method.variant() {
                method_config.variant = v;
            }
            let result = run_method(dataset, method, &method_config, step1.as_ref(), step2.as_ref());
            (method, result)
        })
        .collect();
    Ok(results)
}

fn shared<T: Clone>(step: Option<&(Result<T>, f64)>) -> Result<(T, f64)> {
    match step {
        Some((Ok(v), t)) => Ok((v.clone(), *t)),
        Some((Err(e), _)) => Err(CicmeError::Numeric(format!("shared step failed: {e}"))),
        None => Err(CicmeError::Argument("shared step was not computed".into())),
    }
}

fn run_method(
    dataset: &MultiDomainDataset,
    method: Method,
    config: &CicmeConfig,
    step1: Option<&(Result<Estimate>, f64)>,
    step2: Option<&(Result<StabilityReport>, f64)>,
) -> Result<CicmeResult> {
    let mut timings = Timings::default();
    let mut result = CicmeResult {
        method,
        config: config.clone(),
        pooled: None,
        stability: None,
        domains: Vec::new(),
        timings,
    };
    if method == Method::NotearsInd {
        let t = Instant::now();
        result.domains = notears_ind(dataset, config)?;
        timings.step3 = t.elapsed().as_secs_f64();
        result.timings = timings;
        return Ok(result);
    }
    let (pooled, t1) = shared(step1)?;
    timings.step1 = t1;
    if method == Method::NotearsPool {
        result.domains = (0..dataset.num_domains())
            .map(|k| DomainResult { domain: k, estimate: Some(pooled.clone()), error: None })
            .collect();
        result.pooled = Some(pooled);
        result.timings = timings;
        return Ok(result);
    }
    let (report, t2) = shared(step2)?;
    timings.step2 = t2;
    let stable = report.stable();
    let t = Instant::now();
    result.domains = match config.variant {
        Variant::Freeze => step3_freeze(dataset, &pooled.models, &stable, config)?,
        Variant::LossPenalty => step3_penalty(dataset, &pooled.adjacency, &stable, config)?,
    };
    timings.step3 = t.elapsed().as_secs_f64();
    result.pooled = Some(pooled);
    result.stability = Some(report);
    result.timings = timings;
    Ok(result)
}
