//! Online tabular Q-learning for expert policies and the five dataset
//! generation schemes (random, expert, mixed, noisy, replay).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetError, Manifest, Trajectory, Transition};
use crate::mdp::{evaluate_policy_discounted, FiniteMdp, MdpError, PolicyTable};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatagenError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("scheme {0} needs an expert policy")]
    MissingExpert(SchemeKind),
    #[error("replay scheme needs a replay log")]
    MissingReplay,
    #[error("replay log holds {have} transitions, {need} requested")]
    ReplayTooShort { have: usize, need: usize },
    #[error("unknown scheme {0:?}")]
    UnknownScheme(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Mdp(#[from] MdpError),
}

/// Deterministic per-stream seed derived from a base seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the combined value
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineTrainerConfig {
    pub steps: usize,
    /// Leading steps taken by a uniform policy before epsilon-greedy starts.
    pub warmup_steps: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub eps_initial: f64,
    pub eps_final: f64,
    pub eps_decay_steps: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub seed: u64,
}

impl Default for OnlineTrainerConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            warmup_steps: 0,
            alpha: 0.1,
            gamma: 0.99,
            eps_initial: 1.0,
            eps_final: 0.01,
            eps_decay_steps: 1_000,
            eval_every: 1_000,
            eval_episodes: 10,
            seed: 0,
        }
    }
}

impl OnlineTrainerConfig {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |m: &str| Err(DatagenError::Config(m.to_string()));
        if !(self.eps_initial >= self.eps_final && self.eps_final >= 0.0 && self.eps_initial <= 1.0) {
            return bad("need 1 >= eps_initial >= eps_final >= 0");
        }
        if self.steps < self.eps_decay_steps {
            return bad("steps must be at least eps_decay_steps");
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if self.eval_every == 0 || self.eval_episodes == 0 {
            return bad("eval_every and eval_episodes must be positive");
        }
        Ok(())
    }

    fn epsilon(&self, t: usize) -> f64 {
        if self.eps_decay_steps == 0 {
            return self.eps_final;
        }
        let frac = (t as f64 / self.eps_decay_steps as f64).min(1.0);
        self.eps_initial + (self.eps_final - self.eps_initial) * frac
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub mean_return: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineRun {
    pub expert: PolicyTable,
    pub q: Vec<f64>,
    pub replay_log: Dataset,
    pub eval_history: Vec<EvalPoint>,
}

/// Greedy policy of a Q-table, lowest index on ties.
pub fn greedy_policy(q: &[f64], n_states: usize, n_actions: usize) -> PolicyTable {
    let actions: Vec<usize> = (0..n_states).map(|s| crate::mdp::argmax(&q[s * n_actions..(s + 1) * n_actions])).collect();
    PolicyTable::deterministic(n_actions, &actions)
}

fn greedy_random_ties<R: Rng + ?Sized>(row: &[f64], rng: &mut R) -> usize {
    let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ties: Vec<usize> = (0..row.len()).filter(|&a| row[a] == best).collect();
    ties[rng.random_range(0..ties.len())]
}

/// Mean undiscounted return of `episodes` rollouts.
pub fn rollout_mean_return<R: Rng + ?Sized>(mdp: &FiniteMdp, policy: &PolicyTable, episodes: usize, rng: &mut R) -> f64 {
    let total: f64 = (0..episodes)
        .map(|_| crate::mdp::rollout(mdp, policy, rng, usize::MAX).iter().map(|t| t.2).sum::<f64>())
        .sum();
    total / episodes as f64
}

fn manifest_for(mdp: &FiniteMdp, env: &str, scheme: &str, seed: u64) -> Manifest {
    Manifest {
        env: env.to_string(),
        scheme: scheme.to_string(),
        seed,
        n: 0,
        n_states: mdp.n_states() as u64,
        n_actions: mdp.n_actions() as u32,
        gamma: mdp.gamma(),
    }
}

/// Tabular Q-learning with a linearly decaying epsilon. Every environment
/// step lands in the replay log; episodes end at terminal states or the
/// horizon, and the final partial episode is kept.
pub fn train_online(mdp: &FiniteMdp, cfg: &OnlineTrainerConfig, env: &str) -> Result<OnlineRun, DatagenError> {
    cfg.validate()?;
    let (n, na) = (mdp.n_states(), mdp.n_actions());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let mut q = vec![0.0; n * na];
    let mut trajectories = Vec::new();
    let mut current = Vec::new();
    let mut eval_history = Vec::new();
    let mut s = mdp.sample_initial(&mut rng);
    let total = cfg.warmup_steps + cfg.steps;

    for step in 0..total {
        let a = if step < cfg.warmup_steps || rng.random::<f64>() < cfg.epsilon(step - cfg.warmup_steps.min(step)) {
            rng.random_range(0..na)
        } else {
            greedy_random_ties(&q[s * na..(s + 1) * na], &mut rng)
        };
        let (sn, r) = mdp.sample_step(s, a, &mut rng);
        let done = mdp.is_terminal(sn);
        let bootstrap = if done { 0.0 } else { q[sn * na..(sn + 1) * na].iter().cloned().fold(f64::NEG_INFINITY, f64::max) };
        let idx = s * na + a;
        q[idx] += cfg.alpha * (r + cfg.gamma * bootstrap - q[idx]);
        current.push(Transition::new(s as u64, a as u32, r, sn as u64, done));

        if done || current.len() >= mdp.horizon() {
            trajectories.push(Trajectory::new(trajectories.len() as u64, std::mem::take(&mut current)));
            s = mdp.sample_initial(&mut rng);
        } else {
            s = sn;
        }
        if (step + 1) % cfg.eval_every == 0 {
            let policy = greedy_policy(&q, n, na);
            eval_history.push(EvalPoint {
                step: step + 1,
                mean_return: rollout_mean_return(mdp, &policy, cfg.eval_episodes, &mut eval_rng),
            });
        }
    }
    if !current.is_empty() {
        trajectories.push(Trajectory::new(trajectories.len() as u64, current));
    }
    let replay_log = Dataset::from_trajectories(trajectories, manifest_for(mdp, env, "replay", cfg.seed))?;
    Ok(OnlineRun { expert: greedy_policy(&q, n, na), q, replay_log, eval_history })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeKind {
    Random,
    Expert,
    Mixed,
    Noisy,
    Replay,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 5] = [Self::Random, Self::Expert, Self::Mixed, Self::Noisy, Self::Replay];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::Expert => "expert",
            Self::Mixed => "mixed",
            Self::Noisy => "noisy",
            Self::Replay => "replay",
        }
    }
}

impl std::fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SchemeKind {
    type Err = DatagenError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| DatagenError::UnknownScheme(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationScheme {
    pub kind: SchemeKind,
    /// Exploration rate of the noisy scheme.
    pub epsilon: f64,
    /// Share of random-policy transitions in the mixed scheme.
    pub mix_fraction: f64,
    pub n_samples: usize,
}

impl GenerationScheme {
    pub fn new(kind: SchemeKind, n_samples: usize) -> Self {
        Self { kind, epsilon: 0.2, mix_fraction: 0.8, n_samples }
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(DatagenError::Config(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        if !(0.0..=1.0).contains(&self.mix_fraction) {
            return Err(DatagenError::Config(format!("mix_fraction {} outside [0, 1]", self.mix_fraction)));
        }
        if self.n_samples == 0 {
            return Err(DatagenError::Config("n_samples must be positive".into()));
        }
        Ok(())
    }
}

/// Samples episodes under `policy` until exactly `n` transitions are
/// collected, cutting the last episode short if needed.
pub fn sample_transitions<R: Rng + ?Sized>(
    mdp: &FiniteMdp,
    policy: &PolicyTable,
    n: usize,
    first_episode: u64,
    rng: &mut R,
) -> Vec<Trajectory> {
    let mut out = Vec::new();
    let mut remaining = n;
    while remaining > 0 {
        let steps = crate::mdp::rollout(mdp, policy, rng, remaining);
        if steps.is_empty() {
            // initial state was terminal; nothing to record
            continue;
        }
        remaining -= steps.len();
        let transitions = steps
            .into_iter()
            .map(|(s, a, r, sn, d)| Transition::new(s as u64, a as u32, r, sn as u64, d))
            .collect();
        out.push(Trajectory::new(first_episode + out.len() as u64, transitions));
    }
    out
}

/// First `n` transitions of a log, keeping whole episodes and cutting the
/// last one short.
pub fn truncate_log(log: &Dataset, n: usize) -> Result<Vec<Trajectory>, DatagenError> {
    if log.len() < n {
        return Err(DatagenError::ReplayTooShort { have: log.len(), need: n });
    }
    let mut out = Vec::new();
    let mut remaining = n;
    for traj in &log.trajectories {
        if remaining == 0 {
            break;
        }
        let take = traj.len().min(remaining);
        out.push(Trajectory::new(traj.episode_id, traj.transitions[..take].to_vec()));
        remaining -= take;
    }
    Ok(out)
}

pub fn generate(
    mdp: &FiniteMdp,
    scheme: &GenerationScheme,
    expert: Option<&PolicyTable>,
    replay_log: Option<&Dataset>,
    seed: u64,
    env: &str,
) -> Result<Dataset, DatagenError> {
    scheme.validate()?;
    let n = scheme.n_samples;
    let need_expert = || expert.ok_or(DatagenError::MissingExpert(scheme.kind));
    let uniform = PolicyTable::uniform(mdp.n_states(), mdp.n_actions());
    let trajectories = match scheme.kind {
        SchemeKind::Random => sample_transitions(mdp, &uniform, n, 0, &mut ChaCha8Rng::seed_from_u64(seed)),
        SchemeKind::Expert => {
            let pi = need_expert()?;
            pi.check_against(mdp)?;
            sample_transitions(mdp, pi, n, 0, &mut ChaCha8Rng::seed_from_u64(seed))
        }
        SchemeKind::Noisy => {
            let pi = need_expert()?;
            pi.check_against(mdp)?;
            sample_transitions(mdp, &pi.epsilon_mix(scheme.epsilon), n, 0, &mut ChaCha8Rng::seed_from_u64(seed))
        }
        SchemeKind::Mixed => {
            let pi = need_expert()?;
            pi.check_against(mdp)?;
            let n_random = (scheme.mix_fraction * n as f64).round() as usize;
            let mut all =
                sample_transitions(mdp, &uniform, n_random, 0, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 1)));
            let more = sample_transitions(
                mdp,
                pi,
                n - n_random,
                all.len() as u64,
                &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 2)),
            );
            all.extend(more);
            all
        }
        SchemeKind::Replay => truncate_log(replay_log.ok_or(DatagenError::MissingReplay)?, n)?,
    };
    Ok(Dataset::from_trajectories(trajectories, manifest_for(mdp, env, scheme.kind.name(), seed))?)
}

/// Exact undiscounted returns of the uniform policy and of `expert`, used as
/// the lower and upper normalization references.
pub fn reference_returns(mdp: &FiniteMdp, expert: &PolicyTable) -> Result<(f64, f64), DatagenError> {
    let uniform = PolicyTable::uniform(mdp.n_states(), mdp.n_actions());
    Ok((evaluate_policy_discounted(mdp, &uniform, 1.0)?, evaluate_policy_discounted(mdp, expert, 1.0)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{build_chain, build_gridworld, GridSpec};
    use crate::format::{read_jsonl, to_jsonl_string};
    use crate::mdp::MdpBuilder;

    fn chain_run(seed: u64) -> OnlineRun {
        let mdp = build_chain(5, 0.0).unwrap();
        train_online(&mdp, &OnlineTrainerConfig { seed, ..Default::default() }, "chain5").unwrap()
    }

    #[test]
    fn chain_expert_is_optimal() {
        let mdp = build_chain(5, 0.0).unwrap();
        let run = chain_run(1);
        assert_eq!(evaluate_policy_discounted(&mdp, &run.expert, 1.0).unwrap(), 1.0);
        assert_eq!(run.replay_log.len(), 20_000);
        assert_eq!(run.eval_history.len(), 20);
        assert_eq!(run.eval_history.last().unwrap().mean_return, 1.0);
    }

    #[test]
    fn greedy_bandit_finds_best_arm() {
        let mut b = MdpBuilder::new(2, 3).terminal(1).horizon(1);
        for (a, r) in [-3.0, -1.0, -2.0].into_iter().enumerate() {
            b.add(0, a, 1, r, 1.0);
        }
        let mdp = b.build().unwrap();
        let cfg = OnlineTrainerConfig {
            steps: 500,
            eps_initial: 0.0,
            eps_final: 0.0,
            eps_decay_steps: 0,
            eval_every: 100,
            ..Default::default()
        };
        let run = train_online(&mdp, &cfg, "bandit").unwrap();
        assert_eq!(run.expert.greedy_action(0), 1);
    }

    #[test]
    fn warmup_steps_are_logged() {
        let mdp = build_chain(4, 0.0).unwrap();
        let cfg = OnlineTrainerConfig { steps: 3000, warmup_steps: 77, ..Default::default() };
        assert_eq!(train_online(&mdp, &cfg, "chain4").unwrap().replay_log.len(), 3077);
    }

    #[test]
    fn config_validation() {
        let mdp = build_chain(3, 0.0).unwrap();
        for cfg in [
            OnlineTrainerConfig { eps_initial: 0.1, eps_final: 0.2, ..Default::default() },
            OnlineTrainerConfig { steps: 10, eps_decay_steps: 100, ..Default::default() },
            OnlineTrainerConfig { alpha: 0.0, ..Default::default() },
        ] {
            assert!(matches!(train_online(&mdp, &cfg, "x"), Err(DatagenError::Config(_))));
        }
    }

    #[test]
    fn random_scheme_is_uniform_per_state() {
        let mdp = build_chain(5, 0.0).unwrap();
        let ds = generate(&mdp, &GenerationScheme::new(SchemeKind::Random, 20_000), None, None, 4, "chain5").unwrap();
        assert_eq!(ds.len(), 20_000);
        let mut counts = vec![[0usize; 2]; 5];
        for t in ds.transitions() {
            counts[t.s as usize][t.a as usize] += 1;
        }
        for c in counts.iter().filter(|c| c[0] + c[1] > 0) {
            let n = (c[0] + c[1]) as f64;
            assert!((c[0] as f64 - n / 2.0).abs() <= 3.0 * (n * 0.25).sqrt(), "{c:?}");
        }
    }

    #[test]
    fn noisy_without_noise_equals_expert() {
        let mdp = build_gridworld(&GridSpec::grid5()).unwrap();
        let (_, pi) = crate::mdp::optimal_policy(&mdp, 0.99);
        let noisy = GenerationScheme { epsilon: 0.0, ..GenerationScheme::new(SchemeKind::Noisy, 500) };
        let a = generate(&mdp, &noisy, Some(&pi), None, 9, "grid5").unwrap();
        let b = generate(&mdp, &GenerationScheme::new(SchemeKind::Expert, 500), Some(&pi), None, 9, "grid5").unwrap();
        assert_eq!(a.trajectories, b.trajectories);
    }

    #[test]
    fn mixed_composition() {
        let mdp = build_gridworld(&GridSpec::grid5()).unwrap();
        let (_, pi) = crate::mdp::optimal_policy(&mdp, 0.99);
        let ds = generate(&mdp, &GenerationScheme::new(SchemeKind::Mixed, 10_000), Some(&pi), None, 5, "grid5").unwrap();
        assert_eq!(ds.len(), 10_000);
        let random = sample_transitions(&mdp, &PolicyTable::uniform(mdp.n_states(), 4), 8000, 0, &mut ChaCha8Rng::seed_from_u64(derive_seed(5, 1)));
        let k = random.len();
        assert_eq!(&ds.trajectories[..k], &random[..]);
        let expert_part: usize = ds.trajectories[k..].iter().map(|t| t.len()).sum();
        assert_eq!(expert_part, 2000);
        for t in ds.trajectories[k..].iter().flat_map(|t| &t.transitions) {
            assert_eq!(t.a as usize, pi.greedy_action(t.s as usize));
        }
    }

    #[test]
    fn missing_inputs_are_errors() {
        let mdp = build_chain(3, 0.0).unwrap();
        for kind in [SchemeKind::Expert, SchemeKind::Noisy, SchemeKind::Mixed] {
            assert_eq!(generate(&mdp, &GenerationScheme::new(kind, 10), None, None, 0, "c"), Err(DatagenError::MissingExpert(kind)));
        }
        assert_eq!(generate(&mdp, &GenerationScheme::new(SchemeKind::Replay, 10), None, None, 0, "c"), Err(DatagenError::MissingReplay));
        let log = chain_run(2).replay_log;
        assert_eq!(
            generate(&mdp, &GenerationScheme::new(SchemeKind::Replay, 30_000), None, Some(&log), 0, "c"),
            Err(DatagenError::ReplayTooShort { have: 20_000, need: 30_000 })
        );
    }

    #[test]
    fn replay_truncation_keeps_prefix() {
        let run = chain_run(3);
        let mdp = build_chain(5, 0.0).unwrap();
        let ds = generate(&mdp, &GenerationScheme::new(SchemeKind::Replay, 1234), None, Some(&run.replay_log), 0, "chain5").unwrap();
        assert_eq!(ds.len(), 1234);
        let a: Vec<_> = ds.transitions().copied().collect();
        let b: Vec<_> = run.replay_log.transitions().take(1234).copied().collect();
        assert_eq!(a, b);
    }

    #[test]
    fn generation_is_deterministic_and_round_trips() {
        let mdp = build_gridworld(&GridSpec { slip_prob: 0.1, ..GridSpec::grid5() }).unwrap();
        let run = train_online(&mdp, &OnlineTrainerConfig { steps: 5000, seed: 7, ..Default::default() }, "grid5-slip").unwrap();
        for kind in SchemeKind::ALL {
            let scheme = GenerationScheme::new(kind, 2000);
            let a = generate(&mdp, &scheme, Some(&run.expert), Some(&run.replay_log), 11, "grid5-slip").unwrap();
            let b = generate(&mdp, &scheme, Some(&run.expert), Some(&run.replay_log), 11, "grid5-slip").unwrap();
            let text = to_jsonl_string(&a);
            assert_eq!(text, to_jsonl_string(&b));
            let back = read_jsonl(text.as_bytes(), Some(a.manifest.clone())).unwrap();
            assert_eq!(back, a);
        }
    }

    #[test]
    fn scheme_names_parse() {
        for kind in SchemeKind::ALL {
            assert_eq!(kind.name().parse::<SchemeKind>().unwrap(), kind);
        }
        assert!("bogus".parse::<SchemeKind>().is_err());
    }

    #[test]
    fn seed_derivation_separates_streams() {
        assert_ne!(derive_seed(1, 1), derive_seed(1, 2));
        assert_ne!(derive_seed(1, 1), derive_seed(2, 1));
        assert_eq!(derive_seed(5, 3), derive_seed(5, 3));
    }
}
