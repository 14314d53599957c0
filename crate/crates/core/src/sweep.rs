//! Full pipeline over a grid of environments, generation schemes, seeds and
//! offline algorithms, producing a long-format result table and
//! correlations between dataset measures and offline performance.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{derive_seed, generate, reference_returns, train_online, GenerationScheme, OnlineTrainerConfig, SchemeKind};
use crate::dataset::Dataset;
use crate::envs::build_env;
use crate::format::{save, FormatError};
use crate::measures::{characterize, Counter, MeasureReport, ReferenceNames, References};
use crate::offline::{run_offline, Algorithm, OfflineConfig, ScoreReferences};
use crate::stats::{correlate, correlations_to_csv, Correlation};

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("invalid sweep spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("reading {path}: {message}")]
    Csv { path: PathBuf, message: String },
    #[error("writing {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub envs: Vec<String>,
    pub schemes: Vec<SchemeKind>,
    pub dataset_seeds: usize,
    pub run_seeds: usize,
    pub algorithms: Vec<Algorithm>,
    pub n_samples: usize,
    pub output_dir: PathBuf,
    pub iterations: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub seed: u64,
    pub counter: Counter,
}

impl SweepSpec {
    /// Three environments, five schemes, three dataset seeds, six
    /// algorithms and three run seeds.
    pub fn desk(output_dir: impl Into<PathBuf>) -> Self {
        Self {
            envs: vec!["grid5".into(), "lava7".into(), "chain8".into()],
            schemes: SchemeKind::ALL.to_vec(),
            dataset_seeds: 3,
            run_seeds: 3,
            algorithms: Algorithm::NAMES.iter().map(|n| Algorithm::parse(n, None, None).expect("known tag")).collect(),
            n_samples: 10_000,
            output_dir: output_dir.into(),
            iterations: 50,
            eval_every: 5,
            eval_episodes: 10,
            seed: 0,
            counter: Counter::Exact,
        }
    }

    pub fn validate(&self) -> Result<(), SweepError> {
        let bad = |m: &str| Err(SweepError::Spec(m.to_string()));
        if self.envs.is_empty() || self.schemes.is_empty() || self.algorithms.is_empty() {
            return bad("envs, schemes and algorithms must be nonempty");
        }
        if self.dataset_seeds == 0 || self.run_seeds == 0 || self.n_samples == 0 {
            return bad("seed counts and n_samples must be at least 1");
        }
        if self.iterations == 0 || self.eval_every == 0 || self.eval_episodes == 0 {
            return bad("iterations, eval_every and eval_episodes must be positive");
        }
        Ok(())
    }
}

/// Measures of one generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub env: String,
    pub scheme: SchemeKind,
    pub dataset_seed: usize,
    pub path: Option<PathBuf>,
    /// Replay dataset used as the coverage and entropy reference.
    pub ref_path: Option<PathBuf>,
    pub d_min_return: f64,
    pub d_expert_return: f64,
    pub report: Option<MeasureReport>,
    pub error: Option<String>,
}

/// One long-format result row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub env: String,
    pub scheme: String,
    pub dataset_seed: usize,
    pub run_seed: usize,
    pub algo: String,
    pub tq: Option<f64>,
    pub saco: Option<f64>,
    pub lsaco: Option<f64>,
    pub entropy_ratio: Option<f64>,
    pub omega: Option<f64>,
    pub best_return: Option<f64>,
    pub status: String,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub datasets: Vec<DatasetRow>,
    pub results: Vec<ResultRow>,
    pub correlations: Vec<Correlation>,
    pub failures: usize,
}

impl SweepOutcome {
    /// Mean omega of one algorithm per dataset, in dataset order, skipping
    /// failed runs.
    pub fn dataset_omegas(&self, algo: &str) -> Vec<Option<f64>> {
        let mut acc: BTreeMap<(String, String, usize), (f64, usize)> = BTreeMap::new();
        for r in self.results.iter().filter(|r| r.algo == algo) {
            if let Some(w) = r.omega {
                let e = acc.entry((r.env.clone(), r.scheme.clone(), r.dataset_seed)).or_default();
                e.0 += w;
                e.1 += 1;
            }
        }
        self.datasets
            .iter()
            .map(|d| acc.get(&(d.env.clone(), d.scheme.name().to_string(), d.dataset_seed)).map(|(s, c)| s / *c as f64))
            .collect()
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SweepError + '_ {
    move |source| SweepError::Io { path: path.to_path_buf(), source }
}

struct Prepared {
    rows: Vec<DatasetRow>,
    datasets: Vec<Option<Dataset>>,
    reference: Option<Dataset>,
}

/// Trains the online expert for one (env, dataset seed) cell and generates
/// every scheme, measured against that cell's replay dataset.
fn prepare_cell(spec: &SweepSpec, env: &str, k: usize) -> Prepared {
    let fail = |msg: String| Prepared {
        rows: spec
            .schemes
            .iter()
            .map(|&scheme| DatasetRow {
                env: env.to_string(),
                scheme,
                dataset_seed: k,
                path: None,
                ref_path: None,
                d_min_return: f64::NAN,
                d_expert_return: f64::NAN,
                report: None,
                error: Some(msg.clone()),
            })
            .collect(),
        datasets: vec![None; spec.schemes.len()],
        reference: None,
    };
    let mdp = match build_env(env) {
        Ok(m) => m,
        Err(e) => return fail(e.to_string()),
    };
    let cell_seed = derive_seed(derive_seed(spec.seed, k as u64), env.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64)));
    let cfg = OnlineTrainerConfig {
        steps: spec.n_samples,
        eps_decay_steps: (spec.n_samples / 5).max(1),
        eval_every: (spec.n_samples / 10).max(1),
        seed: cell_seed,
        ..Default::default()
    };
    let run = match train_online(&mdp, &cfg, env) {
        Ok(r) => r,
        Err(e) => return fail(e.to_string()),
    };
    let (d_min_return, d_expert_return) = match reference_returns(&mdp, &run.expert) {
        Ok(r) => r,
        Err(e) => return fail(e.to_string()),
    };
    let replay = match generate(&mdp, &GenerationScheme::new(SchemeKind::Replay, spec.n_samples), None, Some(&run.replay_log), cell_seed, env) {
        Ok(d) => d,
        Err(e) => return fail(e.to_string()),
    };
    let names = ReferenceNames {
        ref_dataset: format!("{env}_replay_{k}"),
        ref_min: "uniform-policy".into(),
        ref_expert: "online-expert".into(),
    };
    let mut rows = Vec::new();
    let mut datasets = Vec::new();
    for (i, &scheme) in spec.schemes.iter().enumerate() {
        let generated = if scheme == SchemeKind::Replay {
            Ok(replay.clone())
        } else {
            generate(&mdp, &GenerationScheme::new(scheme, spec.n_samples), Some(&run.expert), Some(&run.replay_log), derive_seed(cell_seed, 10 + i as u64), env)
        };
        let mut row = DatasetRow {
            env: env.to_string(),
            scheme,
            dataset_seed: k,
            path: None,
            ref_path: None,
            d_min_return,
            d_expert_return,
            report: None,
            error: None,
        };
        match generated {
            Ok(ds) => {
                let refs = References { d_ref: &replay, d_min_return, d_expert_return, gamma: 1.0, names: names.clone() };
                match characterize(&ds, &refs, spec.counter) {
                    Ok(rep) => row.report = Some(rep),
                    Err(e) => row.error = Some(e.to_string()),
                }
                datasets.push(Some(ds));
            }
            Err(e) => {
                row.error = Some(e.to_string());
                datasets.push(None);
            }
        }
        rows.push(row);
    }
    Prepared { rows, datasets, reference: Some(replay) }
}

pub fn dataset_file_name(env: &str, scheme: SchemeKind, k: usize) -> String {
    format!("{env}_{scheme}_{k}.jsonl")
}

/// Runs the sweep, writing dataset files, `results.csv`, `datasets.csv`,
/// `references.json` and `correlations.csv` below `spec.output_dir`.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepOutcome, SweepError> {
    spec.validate()?;
    let data_dir = spec.output_dir.join("datasets");
    fs::create_dir_all(&data_dir).map_err(io_err(&data_dir))?;

    let cells: Vec<(String, usize)> =
        spec.envs.iter().flat_map(|e| (0..spec.dataset_seeds).map(move |k| (e.clone(), k))).collect();
    let prepared: Vec<Prepared> = cells.par_iter().map(|(env, k)| prepare_cell(spec, env, *k)).collect();

    let mut dataset_rows = Vec::new();
    let mut datasets = Vec::new();
    for p in prepared {
        let mut ref_path = None;
        if let (Some(reference), Some(first)) = (&p.reference, p.rows.first()) {
            let path = data_dir.join(dataset_file_name(&first.env, SchemeKind::Replay, first.dataset_seed));
            save(reference, &path)?;
            ref_path = Some(path);
        }
        for (mut row, ds) in p.rows.into_iter().zip(p.datasets) {
            row.ref_path.clone_from(&ref_path);
            if let Some(ds) = &ds {
                let path = data_dir.join(dataset_file_name(&row.env, row.scheme, row.dataset_seed));
                save(ds, &path)?;
                row.path = Some(path);
            }
            dataset_rows.push(row);
            datasets.push(ds);
        }
    }

    let jobs: Vec<(usize, usize, usize)> = (0..dataset_rows.len())
        .flat_map(|d| (0..spec.algorithms.len()).flat_map(move |a| (0..spec.run_seeds).map(move |r| (d, a, r))))
        .collect();
    let results: Vec<ResultRow> = jobs
        .par_iter()
        .map(|&(d, a, r)| run_job(spec, &dataset_rows[d], datasets[d].as_ref(), spec.algorithms[a], r))
        .collect();
    let failures = results.iter().filter(|r| r.status != "ok").count();

    let mut outcome = SweepOutcome { datasets: dataset_rows, results, correlations: Vec::new(), failures };
    outcome.correlations = correlation_table(&outcome);
    write_outputs(spec, &outcome)?;
    Ok(outcome)
}

fn run_job(spec: &SweepSpec, row: &DatasetRow, ds: Option<&Dataset>, algorithm: Algorithm, r: usize) -> ResultRow {
    let mut out = ResultRow {
        env: row.env.clone(),
        scheme: row.scheme.name().to_string(),
        dataset_seed: row.dataset_seed,
        run_seed: r,
        algo: algorithm.name().to_string(),
        tq: row.report.as_ref().map(|m| m.tq),
        saco: row.report.as_ref().map(|m| m.saco),
        lsaco: row.report.as_ref().map(|m| m.lsaco),
        entropy_ratio: row.report.as_ref().map(|m| m.naive_entropy_ratio),
        omega: None,
        best_return: None,
        status: "ok".into(),
        error: None,
    };
    let (Some(ds), None) = (ds, &row.error) else {
        out.status = "error".into();
        out.error = Some(row.error.clone().unwrap_or_else(|| "dataset unavailable".into()));
        return out;
    };
    let mdp = match build_env(&row.env) {
        Ok(m) => m,
        Err(e) => {
            out.status = "error".into();
            out.error = Some(e.to_string());
            return out;
        }
    };
    let cfg = OfflineConfig {
        iterations: spec.iterations,
        eval_every: spec.eval_every,
        eval_episodes: spec.eval_episodes,
        seed: derive_seed(spec.seed ^ 0xa160, (row.dataset_seed * 1000 + r) as u64),
        ..OfflineConfig::new(algorithm)
    };
    let refs = ScoreReferences { d_min_return: row.d_min_return, d_expert_return: row.d_expert_return };
    match run_offline(ds, &mdp, &cfg, refs) {
        Ok(res) => {
            out.omega = Some(res.omega);
            out.best_return = Some(res.best_eval_return);
        }
        Err(e) => {
            out.status = "error".into();
            out.error = Some(e.to_string());
        }
    }
    out
}

/// Dataset measures against each algorithm's seed-averaged omega, one
/// point per dataset.
pub fn correlation_table(outcome: &SweepOutcome) -> Vec<Correlation> {
    correlations_from_results(&outcome.results)
}

/// Same table computed from long-format rows alone, so a saved
/// `results.csv` reproduces `correlations.csv`. Datasets and algorithms
/// keep their order of first appearance.
pub fn correlations_from_results(rows: &[ResultRow]) -> Vec<Correlation> {
    type Key<'a> = (&'a str, &'a str, usize);
    let mut keys: Vec<Key> = Vec::new();
    let mut measures: HashMap<Key, [f64; 4]> = HashMap::new();
    let mut algos: Vec<&str> = Vec::new();
    let mut omegas: HashMap<(Key, &str), (f64, usize)> = HashMap::new();
    for r in rows {
        let key = (r.env.as_str(), r.scheme.as_str(), r.dataset_seed);
        if !keys.contains(&key) {
            keys.push(key);
        }
        if let (Some(tq), Some(saco), Some(lsaco), Some(er)) = (r.tq, r.saco, r.lsaco, r.entropy_ratio) {
            measures.entry(key).or_insert([tq, saco, lsaco, er]);
        }
        if !algos.contains(&r.algo.as_str()) {
            algos.push(&r.algo);
        }
        if let Some(w) = r.omega {
            let e = omegas.entry((key, r.algo.as_str())).or_default();
            e.0 += w;
            e.1 += 1;
        }
    }
    let names = ["tq", "saco", "lsaco", "entropy_ratio"];
    let mut out = Vec::new();
    for algo in algos {
        for (i, name) in names.iter().enumerate() {
            let (xs, ys): (Vec<f64>, Vec<f64>) = keys
                .iter()
                .filter_map(|k| {
                    let m = measures.get(k)?;
                    let (sum, count) = omegas.get(&(*k, algo))?;
                    Some((m[i], sum / *count as f64))
                })
                .unzip();
            out.push(correlate(name, &xs, &format!("omega_{algo}"), &ys));
        }
    }
    out
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>, SweepError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| SweepError::Csv { path: path.to_path_buf(), message: e.to_string() })?;
    rdr.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| SweepError::Csv { path: path.to_path_buf(), message: format!("row {}: {e}", i + 1) }))
        .collect()
}

pub fn results_to_csv(rows: &[ResultRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("result rows serialize");
    }
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8")
}

fn datasets_to_csv(rows: &[DatasetRow]) -> String {
    #[derive(Serialize)]
    struct Row<'a> {
        env: &'a str,
        scheme: &'a str,
        dataset_seed: usize,
        path: String,
        ref_path: String,
        d_min_return: f64,
        d_expert_return: f64,
        tq: Option<f64>,
        saco: Option<f64>,
        lsaco: Option<f64>,
        entropy_ratio: Option<f64>,
        unique_sa: Option<u64>,
        avg_return: Option<f64>,
        error: Option<&'a str>,
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for d in rows {
        let m = d.report.as_ref();
        w.serialize(Row {
            env: &d.env,
            scheme: d.scheme.name(),
            dataset_seed: d.dataset_seed,
            path: d.path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ref_path: d.ref_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            d_min_return: d.d_min_return,
            d_expert_return: d.d_expert_return,
            tq: m.map(|m| m.tq),
            saco: m.map(|m| m.saco),
            lsaco: m.map(|m| m.lsaco),
            entropy_ratio: m.map(|m| m.naive_entropy_ratio),
            unique_sa: m.map(|m| m.unique_sa),
            avg_return: m.map(|m| m.avg_return),
            error: d.error.as_deref(),
        })
        .expect("dataset rows serialize");
    }
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8")
}

fn write_outputs(spec: &SweepSpec, outcome: &SweepOutcome) -> Result<(), SweepError> {
    let files = [
        ("results.csv", results_to_csv(&outcome.results)),
        ("datasets.csv", datasets_to_csv(&outcome.datasets)),
        ("correlations.csv", correlations_to_csv(&outcome.correlations)),
        ("spec.json", serde_json::to_string_pretty(spec).expect("spec serializes") + "\n"),
    ];
    for (name, text) in files {
        let path = spec.output_dir.join(name);
        fs::write(&path, text).map_err(io_err(&path))?;
    }
    Ok(())
}
