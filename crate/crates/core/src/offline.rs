//! Tabular offline learners and the normalized performance score of their
//! best evaluated policy.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{derive_seed, rollout_mean_return};
use crate::dataset::Dataset;
use crate::mdp::{argmax, FiniteMdp, MdpError, PolicyTable};
use crate::measures::{tq_from_return, MeasureError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OfflineError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("unknown algorithm {0:?}")]
    UnknownAlgorithm(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset refers to state {state} / action {action} outside the environment")]
    OutOfRange { state: u64, action: u32 },
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum Algorithm {
    /// Imitates the most frequent logged action.
    Bc,
    /// Greedy on Monte-Carlo returns-to-go of the behavior policy.
    Mce,
    /// SARSA on logged successor actions.
    Bve,
    /// Q-learning with max bootstrapping over all actions.
    Qlearn,
    /// Q-learning whose max only ranges over actions with behavior
    /// probability at least `tau` times the most probable one.
    Bcq { tau: f64 },
    /// Q-learning plus a conservative penalty with temperature `alpha`.
    Cql { alpha: f64 },
}

impl Algorithm {
    pub const NAMES: [&'static str; 6] = ["bc", "mce", "bve", "qlearn", "bcq", "cql"];

    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Bc => "bc",
            Algorithm::Mce => "mce",
            Algorithm::Bve => "bve",
            Algorithm::Qlearn => "qlearn",
            Algorithm::Bcq { .. } => "bcq",
            Algorithm::Cql { .. } => "cql",
        }
    }

    /// Parses a tag with default parameters (`tau = 0.3`, `alpha = 0.1`).
    pub fn parse(tag: &str, tau: Option<f64>, alpha: Option<f64>) -> Result<Self, OfflineError> {
        Ok(match tag {
            "bc" => Algorithm::Bc,
            "mce" => Algorithm::Mce,
            "bve" => Algorithm::Bve,
            "qlearn" | "dqn" => Algorithm::Qlearn,
            "bcq" => Algorithm::Bcq { tau: tau.unwrap_or(0.3) },
            "cql" => Algorithm::Cql { alpha: alpha.unwrap_or(0.1) },
            other => return Err(OfflineError::UnknownAlgorithm(other.to_string())),
        })
    }

    fn validate(&self) -> Result<(), OfflineError> {
        match *self {
            Algorithm::Bcq { tau } if !(0.0..=1.0).contains(&tau) => Err(OfflineError::Config(format!("tau {tau} outside [0, 1]"))),
            Algorithm::Cql { alpha } if !(alpha >= 0.0) => Err(OfflineError::Config(format!("alpha {alpha} is negative"))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineConfig {
    pub algorithm: Algorithm,
    pub iterations: usize,
    pub alpha_lr: f64,
    pub gamma: f64,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub seed: u64,
}

impl OfflineConfig {
    pub fn new(algorithm: Algorithm) -> Self {
        Self { algorithm, iterations: 100, alpha_lr: 0.1, gamma: 0.99, eval_every: 10, eval_episodes: 10, seed: 0 }
    }

    fn validate(&self) -> Result<(), OfflineError> {
        self.algorithm.validate()?;
        if self.iterations == 0 || self.eval_every == 0 || self.eval_episodes == 0 {
            return Err(OfflineError::Config("iterations, eval_every and eval_episodes must be positive".into()));
        }
        if !(self.alpha_lr > 0.0 && self.alpha_lr <= 1.0) {
            return Err(OfflineError::Config(format!("learning rate {} outside (0, 1]", self.alpha_lr)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(OfflineError::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        Ok(())
    }
}

/// Lower and upper returns used to normalize the best evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreReferences {
    pub d_min_return: f64,
    pub d_expert_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineResult {
    pub algorithm: Algorithm,
    pub best_eval_return: f64,
    /// `(iteration, mean undiscounted return)` pairs.
    pub eval_history: Vec<(usize, f64)>,
    pub omega: f64,
    pub learned_policy: PolicyTable,
}

/// Best evaluation return normalized between the references.
pub fn omega(best_return: f64, d_min_return: f64, d_expert_return: f64) -> Result<f64, OfflineError> {
    Ok(tq_from_return(best_return, d_min_return, d_expert_return)?)
}

/// One logged step with the successor action when the trajectory continues.
#[derive(Debug, Clone, Copy)]
struct Step {
    s: usize,
    a: usize,
    r: f64,
    s_next: usize,
    terminal: bool,
    next_action: Option<usize>,
}

struct Tables {
    na: usize,
    steps: Vec<Step>,
    /// Empirical behavior policy of each observed state.
    behavior: HashMap<usize, Vec<f64>>,
}

impl Tables {
    fn build(ds: &Dataset, mdp: &FiniteMdp) -> Result<Self, OfflineError> {
        let (n, na) = (mdp.n_states(), mdp.n_actions());
        let mut steps = Vec::with_capacity(ds.len());
        let mut counts: HashMap<usize, Vec<f64>> = HashMap::new();
        for traj in &ds.trajectories {
            for (i, t) in traj.transitions.iter().enumerate() {
                if t.s as usize >= n || t.s_next as usize >= n || t.a as usize >= na {
                    return Err(OfflineError::OutOfRange { state: t.s.max(t.s_next), action: t.a });
                }
                let next_action = traj.transitions.get(i + 1).map(|x| x.a as usize);
                steps.push(Step { s: t.s as usize, a: t.a as usize, r: t.r, s_next: t.s_next as usize, terminal: t.terminal, next_action });
                counts.entry(t.s as usize).or_insert_with(|| vec![0.0; na])[t.a as usize] += 1.0;
            }
        }
        if steps.is_empty() {
            return Err(OfflineError::EmptyDataset);
        }
        for row in counts.values_mut() {
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= total);
        }
        Ok(Self { na, steps, behavior: counts })
    }

    fn eligible(&self, s: usize, tau: f64) -> Vec<bool> {
        match self.behavior.get(&s) {
            Some(row) => {
                let top = row.iter().cloned().fold(0.0, f64::max);
                row.iter().map(|&p| p >= tau * top).collect()
            }
            None => vec![true; self.na],
        }
    }

    /// Greedy policy over `scores`, restricted by `mask` when given; states
    /// absent from the dataset act uniformly.
    fn policy(&self, n: usize, scores: &[f64], tau: Option<f64>) -> PolicyTable {
        let na = self.na;
        let mut probs = vec![1.0 / na as f64; n * na];
        for s in 0..n {
            if !self.behavior.contains_key(&s) {
                continue;
            }
            let row = &scores[s * na..(s + 1) * na];
            let a = match tau {
                Some(tau) => {
                    let mask = self.eligible(s, tau);
                    let masked: Vec<f64> = row.iter().zip(&mask).map(|(&q, &ok)| if ok { q } else { f64::NEG_INFINITY }).collect();
                    argmax(&masked)
                }
                None => argmax(row),
            };
            let out = &mut probs[s * na..(s + 1) * na];
            out.iter_mut().for_each(|x| *x = 0.0);
            out[a] = 1.0;
        }
        PolicyTable::new(n, na, probs).expect("one-hot and uniform rows are normalized")
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn max_over(row: &[f64], mask: Option<&[bool]>) -> f64 {
    row.iter()
        .enumerate()
        .filter(|(a, _)| mask.is_none_or(|m| m[*a]))
        .map(|(_, &q)| q)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Trains for `cfg.iterations` sweeps over the dataset, evaluating the greedy
/// policy with environment rollouts every `cfg.eval_every` sweeps.
pub fn run_offline(ds: &Dataset, mdp: &FiniteMdp, cfg: &OfflineConfig, refs: ScoreReferences) -> Result<OfflineResult, OfflineError> {
    cfg.validate()?;
    let tables = Tables::build(ds, mdp)?;
    let (n, na) = (mdp.n_states(), mdp.n_actions());
    let mut order: Vec<usize> = (0..tables.steps.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x0e7a1));
    let mut q = vec![0.0; n * na];
    let tau = match cfg.algorithm {
        Algorithm::Bcq { tau } => Some(tau),
        _ => None,
    };
    // BCQ masks only depend on the data, so they are computed once.
    let masks: Option<Vec<Vec<bool>>> = tau.map(|tau| (0..n).map(|s| tables.eligible(s, tau)).collect());

    match cfg.algorithm {
        Algorithm::Bc => {
            for (&s, row) in &tables.behavior {
                q[s * na..(s + 1) * na].copy_from_slice(row);
            }
        }
        Algorithm::Mce => {
            let mut sum = vec![0.0; n * na];
            let mut cnt = vec![0.0; n * na];
            for traj in &ds.trajectories {
                let mut g = 0.0;
                for t in traj.transitions.iter().rev() {
                    g = t.r + cfg.gamma * g;
                    let idx = t.s as usize * na + t.a as usize;
                    sum[idx] += g;
                    cnt[idx] += 1.0;
                }
            }
            for i in 0..n * na {
                if cnt[i] > 0.0 {
                    q[i] = sum[i] / cnt[i];
                }
            }
        }
        _ => {}
    }
    let iterative = !matches!(cfg.algorithm, Algorithm::Bc | Algorithm::Mce);

    let mut eval_history = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut best_policy = None;
    for it in 1..=cfg.iterations {
        if iterative {
            order.shuffle(&mut rng);
            for &i in &order {
                let st = tables.steps[i];
                let next = &q[st.s_next * na..(st.s_next + 1) * na];
                let bootstrap = match cfg.algorithm {
                    Algorithm::Bve => match (st.terminal, st.next_action) {
                        (false, Some(a2)) => next[a2],
                        _ => 0.0,
                    },
                    _ if st.terminal => 0.0,
                    _ => max_over(next, masks.as_ref().map(|m| m[st.s_next].as_slice())),
                };
                let idx = st.s * na + st.a;
                q[idx] += cfg.alpha_lr * (st.r + cfg.gamma * bootstrap - q[idx]);
            }
            if let Algorithm::Cql { alpha } = cfg.algorithm {
                if alpha > 0.0 {
                    for (&s, behavior) in &tables.behavior {
                        let row = &mut q[s * na..(s + 1) * na];
                        let w = softmax(row);
                        for a in 0..na {
                            row[a] -= alpha * (w[a] - behavior[a]);
                        }
                    }
                }
            }
        }
        if it % cfg.eval_every == 0 || it == cfg.iterations {
            let policy = tables.policy(n, &q, tau);
            let ret = rollout_mean_return(mdp, &policy, cfg.eval_episodes, &mut eval_rng);
            eval_history.push((it, ret));
            if ret > best {
                best = ret;
                best_policy = Some(policy);
            }
        }
    }
    let learned_policy = best_policy.expect("at least one evaluation runs");
    Ok(OfflineResult {
        algorithm: cfg.algorithm,
        best_eval_return: best,
        eval_history,
        omega: omega(best, refs.d_min_return, refs.d_expert_return)?,
        learned_policy,
    })
}
