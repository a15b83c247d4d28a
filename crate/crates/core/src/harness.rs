//! Seeded experiment sweeps: datasets per `(experiment, n, repeat)`, every
//! selected method on the same dataset, resumable JSONL storage and
//! CSV/markdown summaries.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{run_many, CicmeConfig, CicmeResult, Method, Timings, Variant};
use crate::error::{CicmeError, Result};
use crate::metrics::{
    local_shd, render_markdown, summarize_shd, summarize_stable, summarize_timings, BinaryGraph, EvalRecord,
    ShdRow, StableObservation, StableRow, TimingRow,
};
use crate::scm::{make_experiment, Experiment, MultiDomainDataset};
use crate::seed::{derive, tag};

pub const RUNS_FILE: &str = "runs.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunPlan {
    pub experiments: Vec<Experiment>,
    pub sample_sizes: Vec<usize>,
    pub repeats: usize,
    pub methods: Vec<Method>,
    pub master_seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads across coordinates.
    pub jobs: usize,
    /// Method settings; `seed` and `variant` are set per run.
    pub config: CicmeConfig,
}

impl Default for RunPlan {
    fn default() -> Self {
        Self {
            experiments: Experiment::ALL.to_vec(),
            sample_sizes: vec![10, 100, 1000],
            repeats: 100,
            methods: Method::ALL.to_vec(),
            master_seed: 0,
            out_dir: PathBuf::from("results"),
            jobs: 1,
            config: CicmeConfig::default(),
        }
    }
}

impl RunPlan {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(CicmeError::Argument("no methods selected".into()));
        }
        if self.experiments.is_empty() {
            return Err(CicmeError::Argument("no experiments selected".into()));
        }
        if self.sample_sizes.is_empty() || self.sample_sizes.contains(&0) {
            return Err(CicmeError::Argument("sample sizes must be a non-empty list of positive counts".into()));
        }
        if self.repeats == 0 {
            return Err(CicmeError::Argument("repeats must be at least 1".into()));
        }
        if self.jobs == 0 {
            return Err(CicmeError::Argument("jobs must be at least 1".into()));
        }
        self.config.validate()
    }

    /// Config with the per-run fields cleared, as stored in the manifest.
    fn normalized_config(&self) -> CicmeConfig {
        CicmeConfig { seed: 0, variant: Variant::Freeze, ..self.config.clone() }
    }
}

/// Seed of the dataset at one plan coordinate.
pub fn dataset_seed(master: u64, experiment: Experiment, n: usize, repeat: usize) -> u64 {
    derive(master, &[experiment.id(), n as u64, repeat as u64])
}

/// Seed of the model initialisations, derived from the dataset seed.
pub fn fit_seed(dataset_seed: u64) -> u64 {
    derive(dataset_seed, &[tag("fit")])
}

/// Evaluation of one method at one coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: Experiment,
    pub n: usize,
    pub repeat: usize,
    pub method: Method,
    pub dataset_seed: u64,
    pub fit_seed: u64,
    pub eval: Option<EvalRecord>,
    /// Thresholded per-domain estimates; empty for failed runs.
    pub graphs: Vec<BinaryGraph>,
    pub pooled_graph: Option<BinaryGraph>,
    /// Verdicts of the stability test, for methods that run it.
    pub stable: Option<Vec<bool>>,
    pub p_values: Option<Vec<Option<f64>>>,
    /// Local SHD of the pooled graph per variable, averaged over domains.
    pub pooled_lshd: Option<Vec<f64>>,
    pub timings: Timings,
    pub converged: bool,
    pub error: Option<String>,
}

type Key = (Experiment, usize, usize, Method);

impl RunRecord {
    fn key(&self) -> Key {
        (self.experiment, self.n, self.repeat, self.method)
    }

    pub fn failed(&self) -> bool {
        self.error.is_some()
    }

    /// Regenerate the dataset this record was computed on.
    pub fn dataset(&self) -> Result<MultiDomainDataset> {
        make_experiment(self.experiment, self.n, self.dataset_seed)
    }

    fn from_result(base: &RunRecord, result: &CicmeResult, dataset: &MultiDomainDataset) -> Result<Self> {
        let truth = dataset
            .truth_graphs()?
            .ok_or_else(|| CicmeError::Structural("generated dataset lacks ground truth".into()))?;
        let graphs = result.graphs()?;
        let eval = EvalRecord::evaluate(&graphs, &truth)?;
        let pooled_lshd = match &result.pooled {
            Some(p) => Some(
                (0..dataset.d())
                    .map(|j| {
                        let total = truth.iter().map(|t| local_shd(&p.graph, t, j)).sum::<Result<usize>>()?;
                        Ok(total as f64 / truth.len() as f64)
                    })
                    .collect::<Result<Vec<f64>>>()?,
            ),
            None => None,
        };
        Ok(Self {
            eval: Some(eval),
            graphs,
            pooled_graph: result.pooled.as_ref().map(|p| p.graph.clone()),
            stable: result.stable(),
            p_values: result.stability.as_ref().map(|s| s.p_values()),
            pooled_lshd,
            timings: result.timings,
            converged: result.converged(),
            ..base.clone()
        })
    }
}

fn run_coordinate(plan: &RunPlan, experiment: Experiment, n: usize, repeat: usize, methods: &[Method]) -> Vec<RunRecord> {
    let seed = dataset_seed(plan.master_seed, experiment, n, repeat);
    let config = CicmeConfig { seed: fit_seed(seed), ..plan.config.clone() };
    let base = |method| RunRecord {
        experiment,
        n,
        repeat,
        method,
        dataset_seed: seed,
        fit_seed: config.seed,
        eval: None,
        graphs: Vec::new(),
        pooled_graph: None,
        stable: None,
        p_values: None,
        pooled_lshd: None,
        timings: Timings::default(),
        converged: false,
        error: None,
    };
    let fail = |method, e: &CicmeError| {
        log::warn!("{experiment} n={n} repeat={repeat} {method}: {e}");
        RunRecord { error: Some(e.to_string()), ..base(method) }
    };
    let dataset = match make_experiment(experiment, n, seed) {
        Ok(d) => d,
        Err(e) => return methods.iter().map(|&m| fail(m, &e)).collect(),
    };
    match run_many(&dataset, methods, &config) {
        Err(e) => methods.iter().map(|&m| fail(m, &e)).collect(),
        Ok(results) => results
            .into_iter()
            .map(|(m, r)| match r.and_then(|r| RunRecord::from_result(&base(m), &r, &dataset)) {
                Ok(rec) => rec,
                Err(e) => fail(m, &e),
            })
            .collect(),
    }
}

/// Stored alongside the records; a directory only accepts runs with the
/// same settings and master seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub master_seed: u64,
    pub config: CicmeConfig,
    pub experiments: Vec<Experiment>,
    pub sample_sizes: Vec<usize>,
    pub repeats: usize,
    pub methods: Vec<Method>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| CicmeError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CicmeError::io(path, e))
}

fn check_manifest(plan: &RunPlan) -> Result<()> {
    let path = plan.out_dir.join(MANIFEST_FILE);
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        master_seed: plan.master_seed,
        config: plan.normalized_config(),
        experiments: plan.experiments.clone(),
        sample_sizes: plan.sample_sizes.clone(),
        repeats: plan.repeats,
        methods: plan.methods.clone(),
    };
    if path.exists() {
        let text = fs::read_to_string(&path).map_err(|e| CicmeError::io(&path, e))?;
        let old: Manifest = serde_json::from_str(&text)?;
        if old.master_seed != manifest.master_seed || old.config != manifest.config {
            return Err(CicmeError::Argument(format!(
                "{} holds results for a different seed or configuration",
                plan.out_dir.display()
            )));
        }
    }
    write_atomic(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())
}

/// Read `runs.jsonl`; a truncated trailing line is skipped with a warning.
pub fn load_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let path = dir.join(RUNS_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = File::open(&path).map_err(|e| CicmeError::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CicmeError::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(r) => out.push(r),
            Err(e) => log::warn!("{}:{}: skipping unreadable record ({e})", path.display(), i + 1),
        }
    }
    Ok(out)
}

fn sorted_unique(records: Vec<RunRecord>) -> Vec<RunRecord> {
    let mut map = BTreeMap::new();
    for r in records {
        map.entry(r.key()).or_insert(r);
    }
    map.into_values().collect()
}

fn jsonl(records: &[RunRecord]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    Ok(buf)
}

#[derive(Debug, Clone)]
pub struct Execution {
    /// Records of the plan's coordinates, sorted.
    pub records: Vec<RunRecord>,
    /// Coordinates found complete on disk and not re-run.
    pub resumed: usize,
    pub failed: usize,
}

/// Run every missing `(experiment, n, repeat)` of the plan.
///
/// Records are appended to `runs.jsonl` as coordinates finish, so an
/// interrupted sweep resumes where it stopped; at the end the file is
/// rewritten in sorted order.
pub fn execute(plan: &RunPlan) -> Result<Execution> {
    plan.validate()?;
    fs::create_dir_all(&plan.out_dir).map_err(|e| CicmeError::io(&plan.out_dir, e))?;
    check_manifest(plan)?;
    let existing = load_records(&plan.out_dir)?;
    let done: HashSet<Key> = existing.iter().map(RunRecord::key).collect();

    let mut methods = plan.methods.clone();
    methods.sort();
    methods.dedup();
    let mut todo = Vec::new();
    let mut resumed = 0;
    for &e in &plan.experiments {
        for &n in &plan.sample_sizes {
            for rep in 0..plan.repeats {
                let missing: Vec<Method> = methods.iter().copied().filter(|&m| !done.contains(&(e, n, rep, m))).collect();
                if missing.is_empty() {
                    resumed += 1;
                } else {
                    todo.push((e, n, rep, missing));
                }
            }
        }
    }
    log::info!("{} coordinates to run, {resumed} already complete", todo.len());

    let path = plan.out_dir.join(RUNS_FILE);
    let file = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| CicmeError::io(&path, e))?;
    let writer = Mutex::new(file);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.jobs)
        .build()
        .map_err(|e| CicmeError::Argument(format!("thread pool: {e}")))?;
    let fresh: Vec<RunRecord> = pool.install(|| {
        todo.par_iter()
            .map(|(e, n, rep, missing)| -> Result<Vec<RunRecord>> {
                let records = run_coordinate(plan, *e, *n, *rep, missing);
                let bytes = jsonl(&records)?;
                let mut f = writer.lock().expect("writer lock");
                f.write_all(&bytes).and_then(|_| f.flush()).map_err(|err| CicmeError::io(&path, err))?;
                log::info!("finished {e} n={n} repeat={rep}");
                Ok(records)
            })
            .collect::<Result<Vec<_>>>()
            .map(|v| v.into_iter().flatten().collect())
    })?;
    drop(writer);

    let all = sorted_unique(existing.into_iter().chain(fresh).collect());
    write_atomic(&path, &jsonl(&all)?)?;
    let mut wanted = HashSet::new();
    for &e in &plan.experiments {
        for &n in &plan.sample_sizes {
            for &m in &methods {
                wanted.insert((e, n, m));
            }
        }
    }
    let records: Vec<RunRecord> =
        all.into_iter().filter(|r| r.repeat < plan.repeats && wanted.contains(&(r.experiment, r.n, r.method))).collect();
    let failed = records.iter().filter(|r| r.failed()).count();
    Ok(Execution { records, resumed, failed })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summaries {
    pub stable: Vec<StableRow>,
    pub shd: Vec<ShdRow>,
    pub timings: Vec<TimingRow>,
    pub markdown: String,
}

fn variable_names(records: &[RunRecord]) -> Vec<String> {
    let d = records
        .iter()
        .find_map(|r| r.stable.as_ref().map(Vec::len).or_else(|| r.eval.as_ref().and_then(|e| e.lshd.first().map(Vec::len))))
        .unwrap_or(0);
    (1..=d).map(|j| format!("X{j}")).collect()
}

/// Aggregate successful records; failures are left out.
pub fn summarize(records: &[RunRecord]) -> Summaries {
    let ok: Vec<&RunRecord> = records.iter().filter(|r| !r.failed()).collect();
    let names = variable_names(records);
    let exp_names: BTreeMap<Experiment, String> = Experiment::ALL.iter().map(|e| (*e, e.to_string())).collect();

    let shd = summarize_shd(
        ok.iter()
            .filter_map(|r| r.eval.as_ref().map(|e| (exp_names[&r.experiment].as_str(), r.n, r.method.name(), e.mean_shd))),
    );

    // one stability observation per coordinate; both CICME variants share it
    let mut per_coord: BTreeMap<(Experiment, usize, usize), &RunRecord> = BTreeMap::new();
    for r in &ok {
        if r.stable.is_some() && r.pooled_lshd.is_some() {
            per_coord.entry((r.experiment, r.n, r.repeat)).or_insert(r);
        }
    }
    let observations: Vec<StableObservation<'_>> = per_coord
        .values()
        .map(|r| StableObservation {
            experiment: r.experiment.to_string(),
            n: r.n,
            stable: r.stable.as_deref().unwrap_or(&[]),
            lshd: r.pooled_lshd.as_deref().unwrap_or(&[]),
        })
        .collect();
    let stable = summarize_stable(&observations, &names);

    let mut samples = Vec::new();
    for r in &ok {
        let t = r.timings;
        for (step, v) in [("step1", t.step1), ("step2", t.step2), ("step3", t.step3), ("total", t.total())] {
            samples.push((exp_names[&r.experiment].as_str(), r.n, r.method.name(), step, v));
        }
    }
    let timings = summarize_timings(samples);
    let markdown = render_markdown(&stable, &shd, &timings, &names);
    Summaries { stable, shd, timings, markdown }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CicmeError::io(path, e))
}

/// Write `stable_counts.csv`, `shd_summary.csv`, `timings.csv`,
/// `summary.md` and a sorted `runs.jsonl` into `dir`.
pub fn report(records: &[RunRecord], dir: &Path) -> Result<Summaries> {
    if records.is_empty() {
        return Err(CicmeError::Argument("no records to report".into()));
    }
    fs::create_dir_all(dir).map_err(|e| CicmeError::io(dir, e))?;
    let s = summarize(records);
    write_csv(&dir.join("stable_counts.csv"), &s.stable)?;
    write_csv(&dir.join("shd_summary.csv"), &s.shd)?;
    write_csv(&dir.join("timings.csv"), &s.timings)?;
    let md = dir.join("summary.md");
    fs::write(&md, &s.markdown).map_err(|e| CicmeError::io(&md, e))?;
    let sorted = sorted_unique(records.to_vec());
    write_atomic(&dir.join(RUNS_FILE), &jsonl(&sorted)?)?;
    Ok(s)
}

/// Sweep settings read from a TOML file; every key is optional and
/// command-line flags take precedence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanFile {
    pub experiments: Option<Vec<Experiment>>,
    pub sizes: Option<Vec<usize>>,
    pub repeats: Option<usize>,
    pub methods: Option<Vec<Method>>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub alpha: Option<f64>,
    pub gamma: Option<f64>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub threshold: Option<f64>,
}

impl PlanFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CicmeError::Argument(format!("config file: {e}")))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CicmeError::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Overwrite the plan's fields with every key present in `self`.
    pub fn apply(&self, plan: &mut RunPlan) {
        if let Some(v) = &self.experiments {
            plan.experiments = v.clone();
        }
        if let Some(v) = &self.sizes {
            plan.sample_sizes = v.clone();
        }
        if let Some(v) = self.repeats {
            plan.repeats = v;
        }
        if let Some(v) = &self.methods {
            plan.methods = v.clone();
        }
        if let Some(v) = self.seed {
            plan.master_seed = v;
        }
        if let Some(v) = &self.out {
            plan.out_dir = v.clone();
        }
        if let Some(v) = self.jobs {
            plan.jobs = v;
        }
        if let Some(v) = self.alpha {
            plan.config.alpha = v;
        }
        if let Some(v) = self.gamma {
            plan.config.gamma = v;
        }
        if let Some(v) = self.lambda1 {
            plan.config.model.lambda1 = v;
        }
        if let Some(v) = self.lambda2 {
            plan.config.model.lambda2 = v;
        }
        if let Some(v) = self.threshold {
            plan.config.threshold = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_plan(dir: &Path) -> RunPlan {
        RunPlan {
            experiments: vec![Experiment::E2],
            sample_sizes: vec![8],
            repeats: 2,
            methods: vec![Method::NotearsPool, Method::CicmeF],
            master_seed: 11,
            out_dir: dir.to_path_buf(),
            jobs: 1,
            config: CicmeConfig::default(),
        }
    }

    fn without_timings(records: &[RunRecord]) -> Vec<RunRecord> {
        records.iter().map(|r| RunRecord { timings: Timings::default(), ..r.clone() }).collect()
    }

    #[test]
    fn empty_method_set_is_rejected_before_work() {
        let dir = tempfile::tempdir().unwrap();
        let plan = RunPlan { methods: vec![], ..tiny_plan(&dir.path().join("out")) };
        assert!(matches!(execute(&plan), Err(CicmeError::Argument(_))));
        assert!(!dir.path().join("out").exists());
    }

    #[test]
    fn execution_is_resumable_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let plan = tiny_plan(dir.path());
        let first = execute(&plan).unwrap();
        assert_eq!(first.records.len(), 4);
        assert_eq!(first.failed, 0);
        let again = execute(&plan).unwrap();
        assert_eq!(again.resumed, 2);
        assert_eq!(again.records, first.records);

        let other = tempfile::tempdir().unwrap();
        let fresh = execute(&RunPlan { jobs: 2, ..tiny_plan(other.path()) }).unwrap();
        assert_eq!(without_timings(&fresh.records), without_timings(&first.records));
        let replay = first.records[0].dataset().unwrap();
        assert_eq!(replay.provenance.unwrap().seed, first.records[0].dataset_seed);
    }

    #[test]
    fn partial_store_only_reruns_missing_methods() {
        let dir = tempfile::tempdir().unwrap();
        let plan = tiny_plan(dir.path());
        let full = execute(&plan).unwrap();
        let kept: Vec<RunRecord> = full.records.iter().filter(|r| r.method == Method::CicmeF).cloned().collect();
        fs::write(dir.path().join(RUNS_FILE), jsonl(&kept).unwrap()).unwrap();
        let resumed = execute(&plan).unwrap();
        assert_eq!(resumed.resumed, 0);
        assert_eq!(without_timings(&resumed.records), without_timings(&full.records));
        // cicme-f records were kept verbatim, timings included
        for r in &kept {
            assert!(resumed.records.contains(r));
        }
    }

    #[test]
    fn changed_configuration_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let plan = RunPlan { repeats: 1, ..tiny_plan(dir.path()) };
        execute(&plan).unwrap();
        let mut changed = plan.clone();
        changed.config.alpha = 0.1;
        assert!(execute(&changed).is_err());
    }

    #[test]
    fn report_writes_every_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let plan = tiny_plan(dir.path());
        let exe = execute(&plan).unwrap();
        let s = report(&exe.records, dir.path()).unwrap();
        for f in ["stable_counts.csv", "shd_summary.csv", "timings.csv", "summary.md", RUNS_FILE] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        assert_eq!(s.shd.len(), 2);
        assert_eq!(s.stable.len(), 4);
        assert!(report(&[], dir.path()).is_err());
        assert_eq!(load_records(dir.path()).unwrap(), exe.records);
    }

    #[test]
    fn truncated_trailing_line_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let plan = RunPlan { repeats: 1, ..tiny_plan(dir.path()) };
        let exe = execute(&plan).unwrap();
        let mut bytes = jsonl(&exe.records).unwrap();
        bytes.extend_from_slice(b"{\"experiment\":\"E2\",\"n\"");
        fs::write(dir.path().join(RUNS_FILE), bytes).unwrap();
        assert_eq!(load_records(dir.path()).unwrap(), exe.records);
    }

    #[test]
    fn plan_file_overrides() {
        let file = PlanFile::from_toml(
            "experiments = [\"E1\", \"E3\"]\nsizes = [10]\nmethods = [\"cicme-l\"]\ngamma = 2.5\nlambda1 = 0.02\n",
        )
        .unwrap();
        let mut plan = RunPlan::default();
        file.apply(&mut plan);
        assert_eq!(plan.experiments, vec![Experiment::E1, Experiment::E3]);
        assert_eq!(plan.sample_sizes, vec![10]);
        assert_eq!(plan.methods, vec![Method::CicmeL]);
        assert_eq!(plan.config.gamma, 2.5);
        assert_eq!(plan.config.model.lambda1, 0.02);
        assert_eq!(plan.repeats, 100);
        assert!(PlanFile::from_toml("bogus = 1").is_err());
    }
}
