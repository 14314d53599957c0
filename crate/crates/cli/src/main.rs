use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use datascope::datagen::{generate, reference_returns, train_online, GenerationScheme, OnlineTrainerConfig, SchemeKind};
use datascope::dataset::DatasetError;
use datascope::envs::build_env;
use datascope::format::{load, save, FormatError};
use datascope::mdp::{evaluate_policy_discounted, optimal_policy, PolicyTable};
use datascope::measures::{characterize, Counter, MeasureError, ReferenceNames, References};
use datascope::offline::{run_offline, Algorithm, OfflineConfig, ScoreReferences};
use datascope::shift::{compare, estimate_factors, DEFAULT_THRESHOLD};
use datascope::stats::correlations_to_csv;
use datascope::sweep::{correlations_from_results, read_results, run_sweep, SweepSpec};
use datascope::theory;

const EXIT_FORMAT: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_PARTIAL: u8 = 4;

#[derive(Parser)]
#[command(name = "datascope", version, about = "Characterize offline RL datasets of finite MDPs")]
struct Cli {
    /// Base seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Discount used for reported trajectory returns.
    #[arg(long, global = true, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Json)]
    format: OutputFormat,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Measure datasets against a reference dataset and reference returns.
    #[command(allow_negative_numbers = true)]
    Characterize {
        #[arg(required = true)]
        data: Vec<PathBuf>,
        /// Reference dataset for coverage and entropy ratios.
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Average return of the minimal reference.
        #[arg(long)]
        min: f64,
        /// Average return of the expert reference.
        #[arg(long)]
        expert: f64,
        /// `exact` or `hll:<precision>`.
        #[arg(long, default_value = "exact", value_parser = parse_counter)]
        counter: Counter,
    },
    /// Train an online expert on a catalog environment and sample a dataset.
    Generate {
        #[arg(long)]
        env: String,
        #[arg(long)]
        scheme: SchemeKind,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also save the replay dataset of the online run here.
        #[arg(long)]
        ref_out: Option<PathBuf>,
        /// Online training steps; defaults to `n`.
        #[arg(long)]
        online_steps: Option<usize>,
        #[arg(long, default_value_t = 0.2)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.8)]
        mix: f64,
    },
    /// Run one offline algorithm on a dataset.
    #[command(allow_negative_numbers = true)]
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        env: String,
        #[arg(long)]
        algo: String,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, default_value_t = 100)]
        iterations: usize,
        #[arg(long, default_value_t = 10)]
        eval_every: usize,
        #[arg(long, default_value_t = 10)]
        eval_episodes: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        /// Discount used by the learner.
        #[arg(long, default_value_t = 0.99)]
        discount: f64,
        /// Score references; default to the uniform and optimal policies.
        #[arg(long)]
        min: Option<f64>,
        #[arg(long)]
        expert: Option<f64>,
    },
    /// Run the full generate, characterize and train grid.
    Sweep {
        #[arg(long, default_value = "sweep-out")]
        out: PathBuf,
        /// JSON sweep spec; flags below override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        envs: Option<Vec<String>>,
        #[arg(long, value_delimiter = ',')]
        schemes: Option<Vec<SchemeKind>>,
        #[arg(long, value_delimiter = ',')]
        algos: Option<Vec<String>>,
        #[arg(long)]
        dataset_seeds: Option<usize>,
        #[arg(long)]
        run_seeds: Option<usize>,
        #[arg(long)]
        n_samples: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long, value_parser = parse_counter)]
        counter: Option<Counter>,
    },
    /// Compare the factors of two datasets.
    Shift {
        #[arg(long = "a")]
        first: PathBuf,
        #[arg(long = "b")]
        second: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Correlate dataset measures with offline scores from a results table.
    Correlate { results: PathBuf },
    /// Run the randomized abstraction and measure invariant suites.
    VerifyTheory {
        /// Smaller case counts.
        #[arg(long)]
        quick: bool,
    },
}

fn parse_counter(s: &str) -> Result<Counter, String> {
    match s {
        "exact" => Ok(Counter::Exact),
        _ => s
            .strip_prefix("hll:")
            .and_then(|p| p.parse::<u8>().ok())
            .map(Counter::Hll)
            .ok_or_else(|| format!("expected `exact` or `hll:<precision>`, got `{s}`")),
    }
}

/// Failure carrying its own exit status.
#[derive(Debug)]
struct Status(u8, String);

impl std::fmt::Display for Status {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Status {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(s) = cause.downcast_ref::<Status>() {
            return s.0;
        }
        if let Some(FormatError::Io { .. }) = cause.downcast_ref::<FormatError>() {
            return 1;
        }
        if cause.is::<FormatError>() || cause.is::<DatasetError>() {
            return EXIT_FORMAT;
        }
        if let Some(m) = cause.downcast_ref::<MeasureError>() {
            return match m {
                MeasureError::Dataset(_) => EXIT_FORMAT,
                m if m.is_numerical() => EXIT_NUMERICAL,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Characterize { data, reference, min, expert, counter } => {
            let d_ref = load(reference).with_context(|| format!("loading {}", reference.display()))?;
            let names = ReferenceNames {
                ref_dataset: reference.display().to_string(),
                ref_min: min.to_string(),
                ref_expert: expert.to_string(),
            };
            let refs = References { d_ref: &d_ref, d_min_return: *min, d_expert_return: *expert, gamma: cli.gamma, names };
            let mut reports = Vec::new();
            for path in data {
                let ds = load(path).with_context(|| format!("loading {}", path.display()))?;
                let report = characterize(&ds, &refs, *counter).with_context(|| format!("characterizing {}", path.display()))?;
                reports.push((path, report));
            }
            match cli.format {
                OutputFormat::Csv => {
                    print!("dataset,");
                    for (i, (path, r)) in reports.iter().enumerate() {
                        let text = r.to_csv(i == 0);
                        let mut lines = text.lines();
                        if i == 0 {
                            println!("{}", lines.next().unwrap_or_default());
                        }
                        for line in lines {
                            println!("{},{line}", csv_field(&path.display().to_string()));
                        }
                    }
                }
                OutputFormat::Json => {
                    let rows: Vec<_> = reports
                        .iter()
                        .map(|(path, r)| {
                            let mut v = serde_json::to_value(r).expect("report serializes");
                            v["dataset"] = json!(path.display().to_string());
                            v
                        })
                        .collect();
                    println!("{}", serde_json::to_string_pretty(&rows)?);
                }
            }
        }
        Command::Generate { env, scheme, n, out, ref_out, online_steps, epsilon, mix } => {
            let mdp = build_env(env)?;
            let steps = online_steps.unwrap_or(*n);
            let cfg = OnlineTrainerConfig { steps, eps_decay_steps: (steps / 5).max(1), eval_every: (steps / 10).max(1), seed: cli.seed, ..Default::default() };
            let online = train_online(&mdp, &cfg, env)?;
            let (d_min_return, d_expert_return) = reference_returns(&mdp, &online.expert)?;
            let gen = GenerationScheme { epsilon: *epsilon, mix_fraction: *mix, ..GenerationScheme::new(*scheme, *n) };
            let ds = generate(&mdp, &gen, Some(&online.expert), Some(&online.replay_log), cli.seed, env)?;
            save(&ds, out)?;
            if let Some(path) = ref_out {
                let replay = generate(&mdp, &GenerationScheme::new(SchemeKind::Replay, *n), None, Some(&online.replay_log), cli.seed, env)?;
                save(&replay, path)?;
            }
            let summary = json!({
                "path": out.display().to_string(),
                "ref_path": ref_out.as_ref().map(|p| p.display().to_string()),
                "env": env,
                "scheme": scheme.name(),
                "n_transitions": ds.len(),
                "episodes": ds.trajectories.len(),
                "d_min_return": d_min_return,
                "d_expert_return": d_expert_return,
            });
            emit_flat(cli.format, &summary)?;
        }
        Command::Train { data, env, algo, tau, alpha, iterations, eval_every, eval_episodes, lr, discount, min, expert } => {
            let ds = load(data).with_context(|| format!("loading {}", data.display()))?;
            let mdp = build_env(env)?;
            let algorithm = Algorithm::parse(algo, *tau, *alpha)?;
            let refs = match (min, expert) {
                (Some(lo), Some(hi)) => ScoreReferences { d_min_return: *lo, d_expert_return: *hi },
                (None, None) => default_references(&mdp)?,
                _ => bail!("--min and --expert must be given together"),
            };
            let cfg = OfflineConfig {
                iterations: *iterations,
                eval_every: *eval_every,
                eval_episodes: *eval_episodes,
                alpha_lr: *lr,
                gamma: *discount,
                seed: cli.seed,
                ..OfflineConfig::new(algorithm)
            };
            let res = run_offline(&ds, &mdp, &cfg, refs)?;
            let summary = json!({
                "algo": res.algorithm.name(),
                "omega": res.omega,
                "best_return": res.best_eval_return,
                "d_min_return": refs.d_min_return,
                "d_expert_return": refs.d_expert_return,
                "evaluations": res.eval_history.len(),
            });
            emit_flat(cli.format, &summary)?;
        }
        Command::Sweep { out, config, envs, schemes, algos, dataset_seeds, run_seeds, n_samples, iterations, counter } => {
            let mut spec = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                    serde_json::from_str(&text).map_err(|e| Status(EXIT_FORMAT, format!("sweep spec {}: {e}", path.display())))?
                }
                None => SweepSpec::desk(out),
            };
            spec.output_dir.clone_from(out);
            spec.seed = cli.seed;
            if let Some(v) = envs {
                spec.envs.clone_from(v);
            }
            if let Some(v) = schemes {
                spec.schemes.clone_from(v);
            }
            if let Some(v) = algos {
                spec.algorithms = v.iter().map(|a| Algorithm::parse(a, None, None)).collect::<Result<_, _>>()?;
            }
            if let Some(v) = dataset_seeds {
                spec.dataset_seeds = *v;
            }
            if let Some(v) = run_seeds {
                spec.run_seeds = *v;
            }
            if let Some(v) = n_samples {
                spec.n_samples = *v;
            }
            if let Some(v) = iterations {
                spec.iterations = *v;
            }
            if let Some(v) = counter {
                spec.counter = *v;
            }
            let outcome = run_sweep(&spec)?;
            match cli.format {
                OutputFormat::Csv => print!("{}", correlations_to_csv(&outcome.correlations)),
                OutputFormat::Json => println!(
                    "{}",
                    serde_json::to_string_pretty(&json!({
                        "output_dir": spec.output_dir.display().to_string(),
                        "datasets": outcome.datasets.len(),
                        "runs": outcome.results.len(),
                        "failures": outcome.failures,
                        "correlations": outcome.correlations,
                    }))?
                ),
            }
            if outcome.failures > 0 {
                return Err(Status(EXIT_PARTIAL, format!("{} of {} runs failed", outcome.failures, outcome.results.len())).into());
            }
        }
        Command::Shift { first, second, threshold } => {
            let a = estimate_factors(&load(first).with_context(|| format!("loading {}", first.display()))?)?;
            let b = estimate_factors(&load(second).with_context(|| format!("loading {}", second.display()))?)?;
            let report = compare(&a, &b, *threshold)?;
            let mut v = serde_json::to_value(&report)?;
            let flags = v.as_object_mut().and_then(|o| o.remove("flags")).unwrap_or_default();
            if let Some(flags) = flags.as_object() {
                for (k, f) in flags {
                    v[format!("shift_{k}")] = f.clone();
                }
            }
            emit_flat(cli.format, &v)?;
        }
        Command::Correlate { results } => {
            let rows = read_results(results).map_err(|e| Status(EXIT_FORMAT, e.to_string()))?;
            let table = correlations_from_results(&rows);
            match cli.format {
                OutputFormat::Csv => print!("{}", correlations_to_csv(&table)),
                OutputFormat::Json => println!("{}", serde_json::to_string_pretty(&table)?),
            }
        }
        Command::VerifyTheory { quick } => {
            let suites = if *quick {
                vec![
                    theory::factorization_suite(20, cli.seed),
                    theory::deterministic_collapse_suite(20, cli.seed.wrapping_add(1)),
                    theory::homomorphism_suite(20, cli.seed.wrapping_add(2)),
                    theory::bias_suite(1000, 100, 1000, cli.seed.wrapping_add(3)),
                ]
            } else {
                theory::run_all(cli.seed)
            };
            match cli.format {
                OutputFormat::Json => println!("{}", serde_json::to_string_pretty(&suites)?),
                OutputFormat::Csv => {
                    println!("suite,cases,failures,max_error,tolerance,passed");
                    for s in &suites {
                        println!("{},{},{},{},{},{}", s.name, s.cases, s.failures, s.max_error, s.tolerance, s.passed());
                    }
                }
            }
            let failed: Vec<&str> = suites.iter().filter(|s| !s.passed()).map(|s| s.name.as_str()).collect();
            if !failed.is_empty() {
                return Err(Status(EXIT_NUMERICAL, format!("suites failed: {}", failed.join(", "))).into());
            }
        }
    }
    Ok(())
}

/// Uniform-policy and optimal-policy undiscounted returns.
fn default_references(mdp: &datascope::mdp::FiniteMdp) -> Result<ScoreReferences> {
    let uniform = PolicyTable::uniform(mdp.n_states(), mdp.n_actions());
    let (_, best) = optimal_policy(mdp, 1.0);
    Ok(ScoreReferences {
        d_min_return: evaluate_policy_discounted(mdp, &uniform, 1.0)?,
        d_expert_return: evaluate_policy_discounted(mdp, &best, 1.0)?,
    })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Prints a flat JSON object, or a header and one CSV row.
fn emit_flat(format: OutputFormat, value: &serde_json::Value) -> Result<()> {
    let obj = value.as_object().ok_or_else(|| anyhow!("expected a flat object"))?;
    match format {
        OutputFormat::Json => println!("{}", serde_json::to_string_pretty(value)?),
        OutputFormat::Csv => {
            let keys: Vec<&str> = obj.keys().map(String::as_str).collect();
            println!("{}", keys.join(","));
            let cells: Vec<String> = obj
                .values()
                .map(|v| match v {
                    serde_json::Value::Null => String::new(),
                    serde_json::Value::String(s) => csv_field(s),
                    other => other.to_string(),
                })
                .collect();
            println!("{}", cells.join(","));
        }
    }
    Ok(())
}
