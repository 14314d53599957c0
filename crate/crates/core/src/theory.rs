//! Randomized invariant suites: entropy factorization, deterministic
//! collapse, homomorphism bounds and the naive-estimator bias comparison.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::abstraction::{check_entropy_bounds, check_return_preservation, random_pair, validate_homomorphism, Homomorphism, RETURN_TOL};
use crate::envs::random::{random_mdp, random_policy, RandomMdpSpec};
use crate::envs::{transform, TransformKind};
use crate::mdp::occupancy_exact;
use crate::measures::{occupancy_entropy, transition_entropy_direct, transition_entropy_exact, transition_entropy_factorized};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    /// Largest observed deviation of the checked quantity.
    pub max_error: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Direct against factorized transition entropy on random stochastic MDPs.
pub fn factorization_suite(cases: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tol = 1e-10;
    let (mut failures, mut max_error) = (0, 0.0f64);
    for _ in 0..cases {
        let mdp = random_mdp(&RandomMdpSpec::default(), &mut rng);
        let pi = random_policy(mdp.n_states(), mdp.n_actions(), &mut rng);
        let err = match occupancy_exact(&mdp, &pi) {
            Ok(rho) => (transition_entropy_direct(&mdp, &rho) - transition_entropy_factorized(&mdp, &rho)).abs(),
            Err(_) => f64::INFINITY,
        };
        max_error = max_error.max(err);
        failures += usize::from(!(err <= tol));
    }
    SuiteReport { name: "entropy-factorization".into(), cases, failures, max_error, tolerance: tol, detail: String::new() }
}

/// Transition entropy against occupancy entropy on deterministic MDPs.
pub fn deterministic_collapse_suite(cases: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tol = 1e-12;
    let spec = RandomMdpSpec { deterministic: true, ..Default::default() };
    let (mut failures, mut max_error) = (0, 0.0f64);
    for _ in 0..cases {
        let mdp = random_mdp(&spec, &mut rng);
        let pi = random_policy(mdp.n_states(), mdp.n_actions(), &mut rng);
        let err = match (transition_entropy_exact(&mdp, &pi), occupancy_exact(&mdp, &pi)) {
            (Ok(h), Ok(rho)) => occupancy_entropy(&rho).map_or(f64::INFINITY, |ho| (h - ho).abs()),
            _ => f64::INFINITY,
        };
        max_error = max_error.max(err);
        failures += usize::from(!(err <= tol));
    }
    SuiteReport { name: "deterministic-collapse".into(), cases, failures, max_error, tolerance: tol, detail: String::new() }
}

/// Random pairs of homomorphic images of a shared abstract MDP: both images
/// validate, the lower and difference entropy bounds hold and lifted
/// policies earn equal returns. Also checks that duplicating every state of
/// an MDP adds exactly `ln 2` to its transition entropy.
pub fn homomorphism_suite(cases: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut failures, mut max_error) = (0, 0.0f64);
    let mut notes = Vec::new();
    for i in 0..cases {
        let (h1, h2, pi) = random_pair(&RandomMdpSpec::default(), &mut rng);
        let valid = validate_homomorphism(&h1).is_valid() && validate_homomorphism(&h2).is_valid();
        let entropy = check_entropy_bounds(&h1, &h2, &pi);
        let returns = check_return_preservation(&h1, &h2, &pi);
        match (valid, entropy, returns) {
            (true, Ok(e), Ok(r)) => {
                max_error = max_error.max(r.difference).max((-e.slack).max(0.0));
                if !(e.holds() && r.holds) {
                    failures += 1;
                    notes.push(format!("case {i}: bounds {} returns {}", e.holds(), r.holds));
                }
            }
            (valid, e, r) => {
                failures += 1;
                notes.push(format!("case {i}: valid {valid}, entropy {:?}, returns {:?}", e.err(), r.err()));
            }
        }
    }

    let base = random_mdp(&RandomMdpSpec::default(), &mut rng);
    let pi = random_policy(base.n_states(), base.n_actions(), &mut rng);
    let doubled = transform(&base, &TransformKind::DuplicateStates(2)).expect("k = 2 is valid");
    let ground = Homomorphism::new(doubled.mdp, base.clone(), doubled.maps.expect("duplication records maps")).expect("surjective");
    let gap = check_entropy_bounds(&ground, &Homomorphism::identity(&base), &pi)
        .map(|e| (e.h_first - e.h_abstract - std::f64::consts::LN_2).abs())
        .unwrap_or(f64::INFINITY);
    if !(gap <= 1e-10) {
        failures += 1;
        notes.push(format!("duplication gap off ln 2 by {gap:e}"));
    }
    notes.insert(0, format!("duplication gap error {gap:e}"));
    SuiteReport {
        name: "homomorphism-bounds".into(),
        cases: cases + 1,
        failures,
        max_error: max_error.max(gap),
        tolerance: RETURN_TOL,
        detail: notes.join("; "),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasComparison {
    pub k: usize,
    pub n: usize,
    pub resamples: usize,
    pub true_entropy: f64,
    pub mean_log_unique: f64,
    pub mean_naive: f64,
    pub threshold: f64,
}

impl BiasComparison {
    pub fn log_unique_bias(&self) -> f64 {
        (self.mean_log_unique - self.true_entropy).abs()
    }

    pub fn naive_bias(&self) -> f64 {
        (self.mean_naive - self.true_entropy).abs()
    }
}

/// Monte-Carlo bias of `ln(unique)` and of the naive entropy estimate for
/// `n` uniform draws over `k` outcomes.
pub fn bias_comparison(k: usize, n: usize, resamples: usize, seed: u64) -> BiasComparison {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum_log_u, mut sum_naive) = (0.0, 0.0);
    let mut counts = vec![0u32; k];
    for _ in 0..resamples {
        counts.iter_mut().for_each(|c| *c = 0);
        for _ in 0..n {
            counts[rng.random_range(0..k)] += 1;
        }
        let unique = counts.iter().filter(|&&c| c > 0).count();
        sum_log_u += (unique as f64).ln();
        sum_naive -= counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n as f64;
                p * p.ln()
            })
            .sum::<f64>();
    }
    let nf = n as f64;
    BiasComparison {
        k,
        n,
        resamples,
        true_entropy: (k as f64).ln(),
        mean_log_unique: sum_log_u / resamples as f64,
        mean_naive: sum_naive / resamples as f64,
        threshold: 2.0 * nf * nf.ln() + 1.0,
    }
}

pub fn bias_suite(k: usize, n: usize, resamples: usize, seed: u64) -> SuiteReport {
    let b = bias_comparison(k, n, resamples, seed);
    let ok = b.log_unique_bias() <= b.naive_bias();
    SuiteReport {
        name: "log-unique-bias".into(),
        cases: resamples,
        failures: usize::from(!ok),
        max_error: b.log_unique_bias(),
        tolerance: b.naive_bias(),
        detail: format!(
            "K={} N={} threshold={:.1} |E ln u - H|={:.5} |E naive - H|={:.5}",
            k,
            n,
            b.threshold,
            b.log_unique_bias(),
            b.naive_bias()
        ),
    }
}

/// All suites at their full sizes.
pub fn run_all(seed: u64) -> Vec<SuiteReport> {
    vec![
        factorization_suite(100, seed),
        deterministic_collapse_suite(100, seed.wrapping_add(1)),
        homomorphism_suite(100, seed.wrapping_add(2)),
        bias_suite(1000, 100, 10_000, seed.wrapping_add(3)),
    ]
}

/// Distinct values, used by tests to confirm a suite explores varied inputs.
pub fn distinct_sizes(cases: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cases)
        .map(|_| {
            let m = random_mdp(&RandomMdpSpec::default(), &mut rng);
            (m.n_states(), m.n_actions(), m.rewards().len())
        })
        .collect::<HashSet<_>>()
        .len()
}
