//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line; exits nonzero if any fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use datascope::datagen::{generate, train_online, GenerationScheme, OnlineTrainerConfig, SchemeKind};
use datascope::dataset::{Dataset, Manifest, Trajectory, Transition};
use datascope::envs::build_env;
use datascope::format::{read_jsonl, to_jsonl_string};
use datascope::measures::{characterize, Counter, ReferenceNames, References};
use datascope::offline::{run_offline, Algorithm, OfflineConfig, ScoreReferences};
use datascope::sketch::{sketch_sharded, CardinalitySketch, SaKey};
use datascope::sweep::{run_sweep, SweepOutcome, SweepSpec};
use datascope::theory;

type Outcome = Result<String, String>;

fn manifest(scheme: &str, n: u64) -> Manifest {
    Manifest { env: "fixture".into(), scheme: scheme.into(), seed: 0, n, n_states: 0, n_actions: 1, gamma: 1.0 }
}

/// `total` transitions split evenly over `episodes`, with exactly `unique`
/// distinct state-action pairs and reward `step_reward` on every step.
fn table_fixture(unique: usize, total: usize, episodes: usize, step_reward: f64) -> Dataset {
    assert!(total >= unique && total >= episodes);
    let state = |j: usize| 1 + if j < unique { j as u64 } else { 0 };
    let (base, extra) = (total / episodes, total % episodes);
    let mut j = 0;
    let mut trajectories = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let len = base + usize::from(ep < extra);
        let steps = (0..len)
            .map(|i| {
                let last = i + 1 == len;
                let next = if last { 0 } else { state(j + i + 1) };
                Transition::new(state(j + i), 0, step_reward, next, last)
            })
            .collect();
        j += len;
        trajectories.push(Trajectory::new(ep as u64, steps));
    }
    let mut m = manifest("fixture", total as u64);
    m.n_states = unique as u64 + 2;
    Dataset::from_trajectories(trajectories, m).expect("fixture is valid")
}

fn within(name: &str, got: f64, want: f64, tol: f64, log: &mut Vec<String>) -> bool {
    log.push(format!("{name}={got:.5}"));
    (got - want).abs() <= tol
}

fn criterion_1() -> Outcome {
    let names = ReferenceNames::default();
    // Episode lengths chosen so the mean return with unit rewards matches the
    // tabulated averages: 57798 / 2600 = 22.23 and 104025 / 500 = 208.05.
    let cp_random = table_fixture(55_916, 57_798, 2_600, 1.0);
    let cp_replay = table_fixture(95_384, 104_025, 500, 1.0);
    let mc_noisy = table_fixture(14_669, 15_000, 100, -1.0);
    let mc_replay = table_fixture(13_740, 14_000, 100, -1.0);
    let cp = References { d_ref: &cp_replay, d_min_return: 22.23, d_expert_return: 500.0, gamma: 1.0, names: names.clone() };
    let mc = References { d_ref: &mc_replay, d_min_return: -200.0, d_expert_return: -100.0, gamma: 1.0, names };
    let r_random = characterize(&cp_random, &cp, Counter::Exact).map_err(|e| e.to_string())?;
    let r_replay = characterize(&cp_replay, &cp, Counter::Exact).map_err(|e| e.to_string())?;
    let r_noisy = characterize(&mc_noisy, &mc, Counter::Exact).map_err(|e| e.to_string())?;
    let mut log = Vec::new();
    let ok = [
        within("avg_return_random", r_random.avg_return, 22.23, 1e-9, &mut log),
        within("avg_return_replay", r_replay.avg_return, 208.05, 1e-9, &mut log),
        within("tq_random", r_random.tq, 0.0, 1e-4, &mut log),
        within("tq_replay", r_replay.tq, 0.38893, 1e-4, &mut log),
        within("saco_random", r_random.saco, 0.58622, 1e-4, &mut log),
        within("saco_mc_noisy", r_noisy.saco, 1.06761, 1e-4, &mut log),
        within("lsaco_random", r_random.lsaco, 0.95343, 1e-4, &mut log),
    ]
    .iter()
    .all(|&b| b);
    let text = log.join(" ");
    if ok {
        Ok(text)
    } else {
        Err(text)
    }
}

fn suite(report: theory::SuiteReport) -> Outcome {
    let text = format!("{} cases={} failures={} max_error={:e} {}", report.name, report.cases, report.failures, report.max_error, report.detail);
    if report.passed() {
        Ok(text)
    } else {
        Err(text)
    }
}

fn criterion_5() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for n in [10_000u64, 100_000, 1_000_000] {
        let mut good = 0;
        let mut worst = 0.0f64;
        for stream in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(stream ^ n.rotate_left(17));
            let base: u64 = rng.random::<u64>() >> 8;
            let action: u32 = rng.random_range(0..16);
            let mut sk = CardinalitySketch::with_seed(14, rng.random()).map_err(|e| e.to_string())?;
            for i in 0..n {
                sk.insert(&SaKey::new(base + i, action));
            }
            let rel = (sk.estimate() - n as f64).abs() / n as f64;
            worst = worst.max(rel);
            good += usize::from(rel <= 0.02);
        }
        ok &= good >= 99;
        lines.push(format!("n={n}: {good}/100 within 2% (worst {:.4})", worst));
    }
    let keys: Vec<SaKey> = (0..200_000u64).map(|i| SaKey::new(i * 7919, (i % 5) as u32)).collect();
    let mut single = CardinalitySketch::with_seed(14, 42).map_err(|e| e.to_string())?;
    keys.iter().for_each(|k| single.insert(k));
    let shards: Vec<&[SaKey]> = keys.chunks(33_333).collect();
    let merged = sketch_sharded(&shards, 14, 42).map_err(|e| e.to_string())?;
    let exact_merge = merged.registers() == single.registers();
    ok &= exact_merge;
    lines.push(format!("shard merge register-exact: {exact_merge}"));
    if ok {
        Ok(lines.join("; "))
    } else {
        Err(lines.join("; "))
    }
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, c) = xs.into_iter().fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
    s / c as f64
}

fn criterion_7(dir: &Path) -> Outcome {
    let spec = SweepSpec {
        dataset_seeds: 5,
        run_seeds: 1,
        algorithms: vec![Algorithm::Bc],
        iterations: 1,
        eval_every: 1,
        eval_episodes: 1,
        ..SweepSpec::desk(dir)
    };
    let out = run_sweep(&spec).map_err(|e| e.to_string())?;
    let by_scheme = |kind: SchemeKind| -> Result<(f64, f64), String> {
        let reps: Vec<_> = out
            .datasets
            .iter()
            .filter(|d| d.scheme == kind)
            .map(|d| d.report.clone().ok_or_else(|| format!("missing report: {:?}", d.error)))
            .collect::<Result<_, _>>()?;
        if reps.len() != 15 {
            return Err(format!("{kind} has {} datasets", reps.len()));
        }
        Ok((mean(reps.iter().map(|r| r.tq)), mean(reps.iter().map(|r| r.saco))))
    };
    let mut means = Vec::new();
    for kind in SchemeKind::ALL {
        means.push((kind, by_scheme(kind)?));
    }
    let get = |k: SchemeKind| means.iter().find(|m| m.0 == k).expect("all schemes").1;
    let (expert, random, replay) = (get(SchemeKind::Expert), get(SchemeKind::Random), get(SchemeKind::Replay));
    let dominated = means.iter().any(|&(k, (tq, saco))| {
        k != SchemeKind::Replay && tq >= replay.0 && saco >= replay.1 && (tq > replay.0 || saco > replay.1)
    });
    let text = means.iter().map(|(k, (t, s))| format!("{k}: tq={t:.3} saco={s:.3}")).collect::<Vec<_>>().join(", ");
    if expert.0 > random.0 && replay.1 >= expert.1 && !dominated {
        Ok(text)
    } else {
        Err(format!("{text}; replay dominated: {dominated}"))
    }
}

fn mean_omega_on(out: &SweepOutcome, algo: &str, scheme: SchemeKind) -> f64 {
    mean(out.datasets.iter().zip(out.dataset_omegas(algo)).filter(|(d, _)| d.scheme == scheme).filter_map(|(_, w)| w))
}

fn criterion_8(dir: &Path) -> Outcome {
    let spec = SweepSpec::desk(dir);
    let out = run_sweep(&spec).map_err(|e| e.to_string())?;
    let rho = |x: &str, y: &str| out.correlations.iter().find(|c| c.x == x && c.y == y).and_then(|c| c.spearman);
    let bc_tq = rho("tq", "omega_bc");
    let q_saco = rho("saco", "omega_qlearn");
    let (bc, ql) = (mean_omega_on(&out, "bc", SchemeKind::Expert), mean_omega_on(&out, "qlearn", SchemeKind::Expert));
    let text = format!(
        "datasets={} runs={} failures={} spearman(tq,omega_bc)={:?} spearman(saco,omega_qlearn)={:?} expert omega bc={bc:.3} qlearn={ql:.3}",
        out.datasets.len(),
        out.results.len(),
        out.failures,
        bc_tq,
        q_saco
    );
    let ok = out.datasets.len() == 45
        && out.results.len() == 45 * 6 * 3
        && out.failures == 0
        && bc_tq.is_some_and(|r| r >= 0.5)
        && q_saco.is_some_and(|r| r > 0.0)
        && bc >= ql;
    if ok {
        Ok(text)
    } else {
        Err(text)
    }
}

fn criterion_9() -> Outcome {
    let mut checked = 0;
    for env in ["grid5", "lava7", "chain8"] {
        let mdp = build_env(env).map_err(|e| e.to_string())?;
        let online = train_online(&mdp, &OnlineTrainerConfig { steps: 3000, eps_decay_steps: 600, seed: 11, ..Default::default() }, env)
            .map_err(|e| e.to_string())?;
        for seed in 0..3u64 {
            let noisy = GenerationScheme { epsilon: 0.0, ..GenerationScheme::new(SchemeKind::Noisy, 3000) };
            let a = generate(&mdp, &noisy, Some(&online.expert), None, seed, env).map_err(|e| e.to_string())?;
            let b = generate(&mdp, &GenerationScheme::new(SchemeKind::Expert, 3000), Some(&online.expert), None, seed, env)
                .map_err(|e| e.to_string())?;
            if to_jsonl_string(&a) != to_jsonl_string(&b) {
                return Err(format!("{env} seed {seed}: noisy(0) differs from expert"));
            }
            for scheme in [SchemeKind::Random, SchemeKind::Mixed, SchemeKind::Noisy] {
                let ds = generate(&mdp, &GenerationScheme::new(scheme, 3000), Some(&online.expert), None, seed, env)
                    .map_err(|e| e.to_string())?;
                let refs = ScoreReferences { d_min_return: -100.0, d_expert_return: 100.0 };
                let run = |algorithm| {
                    let cfg = OfflineConfig { iterations: 20, eval_every: 4, seed: seed + 100, ..OfflineConfig::new(algorithm) };
                    run_offline(&ds, &mdp, &cfg, refs).map_err(|e| e.to_string())
                };
                let q = run(Algorithm::Qlearn)?;
                for alt in [Algorithm::Bcq { tau: 0.0 }, Algorithm::Cql { alpha: 0.0 }] {
                    let r = run(alt)?;
                    if r.learned_policy != q.learned_policy || r.eval_history != q.eval_history || r.best_eval_return != q.best_eval_return {
                        return Err(format!("{env} seed {seed} {scheme}: {} differs from qlearn", alt.name()));
                    }
                    checked += 1;
                }
            }
        }
    }
    Ok(format!("noisy(0) == expert on 9 datasets; {checked} degenerate runs match qlearn"))
}

const MALFORMED: [(&str, usize); 7] = [
    ("not_json", 2),
    ("missing_field", 3),
    ("unknown_field", 1),
    ("step_gap", 3),
    ("broken_chain", 2),
    ("after_terminal", 3),
    ("reward_type", 4),
];

fn criterion_10(dir: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut trajectories = Vec::new();
    let mut total = 0;
    let mut ep = 0;
    while total < 100_000 {
        let len = rng.random_range(1..=200).min(100_000 - total);
        let mut s = rng.random_range(0..1000u64);
        let steps = (0..len)
            .map(|i| {
                let next = rng.random_range(0..1000u64);
                let r = match rng.random_range(0..4) {
                    0 => 0.0,
                    1 => -1.0,
                    2 => rng.random::<f64>() * 1e-7,
                    _ => rng.random_range(-1e6..1e6),
                };
                let t = Transition::new(s, rng.random_range(0..6), r, next, i + 1 == len);
                s = next;
                t
            })
            .collect();
        trajectories.push(Trajectory::new(ep, steps));
        ep += 1 + rng.random_range(0..3);
        total += len;
    }
    let m = Manifest { n_states: 1000, n_actions: 6, ..manifest("roundtrip", 0) };
    let ds = Dataset::from_trajectories(trajectories, m).map_err(|e| e.to_string())?;
    let first = to_jsonl_string(&ds);
    let back = read_jsonl(first.as_bytes(), None).map_err(|e| e.to_string())?;
    if to_jsonl_string(&back) != first || back.len() != 100_000 {
        return Err("round trip is not byte-identical".into());
    }

    let good = dir.join("good.jsonl");
    std::fs::write(&good, "{\"ep\":0,\"t\":0,\"s\":0,\"a\":0,\"r\":1.0,\"sn\":1,\"d\":true}\n").map_err(|e| e.to_string())?;
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/malformed");
    for (name, line) in MALFORMED {
        let path = fixtures.join(format!("{name}.jsonl"));
        let out = Command::new(env!("CARGO_BIN_EXE_datascope"))
            .args(["characterize", path.to_str().unwrap(), "--ref", good.to_str().unwrap(), "--min", "0", "--expert", "1"])
            .output()
            .map_err(|e| e.to_string())?;
        let stderr = String::from_utf8_lossy(&out.stderr);
        if out.status.code() != Some(2) || !stderr.contains(&format!("line {line}:")) {
            return Err(format!("{name}: exit {:?}, stderr {}", out.status.code(), stderr.trim()));
        }
    }
    Ok(format!("100000 transitions byte-identical; {} malformed fixtures exit 2 with line numbers", MALFORMED.len()))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let sub = |name: &str| {
        let p = tmp.path().join(name);
        std::fs::create_dir_all(&p).expect("temp subdir");
        p
    };
    let (d7, d8, d10) = (sub("c7"), sub("c8"), sub("c10"));
    let criteria: Vec<(&str, Duration, Box<dyn FnOnce() -> Outcome>)> = vec![
        ("1 table arithmetic", Duration::from_secs(1), Box::new(criterion_1)),
        ("2 entropy factorization", Duration::from_secs(5), Box::new(|| suite(theory::factorization_suite(100, 2)))),
        ("3 deterministic collapse", Duration::from_secs(5), Box::new(|| suite(theory::deterministic_collapse_suite(100, 3)))),
        ("4 homomorphism suite", Duration::from_secs(30), Box::new(|| suite(theory::homomorphism_suite(100, 4)))),
        ("5 sketch accuracy", Duration::from_secs(60), Box::new(criterion_5)),
        ("6 estimator bias", Duration::from_secs(60), Box::new(|| suite(theory::bias_suite(1000, 100, 10_000, 6)))),
        ("7 scheme geometry", Duration::from_secs(120), Box::new(move || criterion_7(&d7))),
        ("8 end-to-end sweep", Duration::from_secs(600), Box::new(move || criterion_8(&d8))),
        ("9 degeneracy identities", Duration::from_secs(60), Box::new(criterion_9)),
        ("10 format round-trip", Duration::from_secs(60), Box::new(move || criterion_10(&d10))),
    ];
    let mut failed = 0;
    for (name, budget, check) in criteria {
        let start = Instant::now();
        let result = check();
        let took = start.elapsed();
        let (ok, detail) = match result {
            Ok(d) if took <= budget => (true, d),
            Ok(d) => (false, format!("{d} (over the {budget:?} budget)")),
            Err(d) => (false, d),
        };
        failed += usize::from(!ok);
        println!("{} criterion {name} [{:.2?}]: {detail}", if ok { "PASS" } else { "FAIL" }, took);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
