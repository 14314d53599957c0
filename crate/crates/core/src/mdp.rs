//! Finite MDPs, tabular policies, exact policy evaluation and occupancy.
//!
//! Dynamics are stored sparsely: every `(s, a)` row lists the outcomes
//! `(s', r)` with nonzero probability, sorted by next state and reward index.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on row sums of dynamics and policy tables.
pub const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MdpError {
    #[error("mdp needs at least one state and one action")]
    Empty,
    #[error("discount {0} outside [0, 1)")]
    Discount(f64),
    #[error("probability {prob} out of range at state {state}, action {action}")]
    Probability { state: usize, action: usize, prob: f64 },
    #[error("dynamics row ({state}, {action}) sums to {sum}")]
    RowSum { state: usize, action: usize, sum: f64 },
    #[error("outcome ({state}, {action}) references state {next} or reward index {reward} out of range")]
    OutcomeRange { state: usize, action: usize, next: usize, reward: usize },
    #[error("initial distribution invalid: {0}")]
    Initial(String),
    #[error("terminal state {0} must self-loop with reward 0 under every action")]
    TerminalLoop(usize),
    #[error("reward value {0} is not finite")]
    Reward(f64),
    #[error("reward value {0} listed twice")]
    DuplicateReward(f64),
    #[error("dimension mismatch: expected {expected_states}x{expected_actions}, got {states}x{actions}")]
    Dimension { expected_states: usize, expected_actions: usize, states: usize, actions: usize },
    #[error("policy row {state} invalid: {reason}")]
    PolicyRow { state: usize, reason: String },
    #[error("no nonterminal state is ever visited")]
    NoVisits,
}

/// One possible result of taking an action: next state, index into the
/// reward set, and its probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub next: usize,
    pub reward: usize,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteMdp {
    n_states: usize,
    n_actions: usize,
    rewards: Vec<f64>,
    dynamics: Vec<Vec<Outcome>>,
    gamma: f64,
    initial: Vec<f64>,
    terminal: Vec<bool>,
    horizon: usize,
}

impl FiniteMdp {
    /// Validates and normalizes the representation: duplicate outcomes are
    /// merged, zero-probability outcomes dropped, and rows sorted.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_states: usize,
        n_actions: usize,
        rewards: Vec<f64>,
        dynamics: Vec<Vec<Outcome>>,
        gamma: f64,
        initial: Vec<f64>,
        terminal: Vec<bool>,
        horizon: usize,
    ) -> Result<Self, MdpError> {
        if n_states == 0 || n_actions == 0 {
            return Err(MdpError::Empty);
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(MdpError::Discount(gamma));
        }
        if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
            return Err(MdpError::Reward(*r));
        }
        for (i, r) in rewards.iter().enumerate() {
            if rewards[..i].contains(r) {
                return Err(MdpError::DuplicateReward(*r));
            }
        }
        if dynamics.len() != n_states * n_actions || terminal.len() != n_states {
            return Err(MdpError::Dimension {
                expected_states: n_states,
                expected_actions: n_actions,
                states: terminal.len(),
                actions: dynamics.len() / n_states.max(1),
            });
        }
        if initial.len() != n_states {
            return Err(MdpError::Initial(format!("length {} != {}", initial.len(), n_states)));
        }
        if initial.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(MdpError::Initial("entry outside [0, 1]".into()));
        }
        let init_sum: f64 = initial.iter().sum();
        if (init_sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(MdpError::Initial(format!("sums to {init_sum}")));
        }
        if let Some(s) = (0..n_states).find(|&s| terminal.get(s).copied().unwrap_or(false) && initial[s] > 0.0) {
            return Err(MdpError::Initial(format!("mass on terminal state {s}")));
        }

        let mut rows = Vec::with_capacity(dynamics.len());
        for (idx, row) in dynamics.into_iter().enumerate() {
            let (state, action) = (idx / n_actions, idx % n_actions);
            let mut row: Vec<Outcome> = row;
            for o in &row {
                if !(0.0..=1.0).contains(&o.prob) || o.prob.is_nan() {
                    return Err(MdpError::Probability { state, action, prob: o.prob });
                }
                if o.next >= n_states || o.reward >= rewards.len() {
                    return Err(MdpError::OutcomeRange { state, action, next: o.next, reward: o.reward });
                }
            }
            row.sort_by_key(|o| (o.next, o.reward));
            let mut merged: Vec<Outcome> = Vec::with_capacity(row.len());
            for o in row {
                match merged.last_mut() {
                    Some(last) if last.next == o.next && last.reward == o.reward => last.prob += o.prob,
                    _ => merged.push(o),
                }
            }
            merged.retain(|o| o.prob > 0.0);
            let sum: f64 = merged.iter().map(|o| o.prob).sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(MdpError::RowSum { state, action, sum });
            }
            rows.push(merged);
        }

        for s in (0..n_states).filter(|&s| terminal[s]) {
            for a in 0..n_actions {
                let row = &rows[s * n_actions + a];
                let ok = row.len() == 1 && row[0].next == s && rewards[row[0].reward] == 0.0;
                if !ok {
                    return Err(MdpError::TerminalLoop(s));
                }
            }
        }

        Ok(Self {
            n_states,
            n_actions,
            rewards,
            dynamics: rows,
            gamma,
            initial,
            terminal,
            horizon,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn terminal(&self) -> &[bool] {
        &self.terminal
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn outcomes(&self, s: usize, a: usize) -> &[Outcome] {
        &self.dynamics[s * self.n_actions + a]
    }

    /// All dynamics rows, indexed `s * n_actions + a`.
    pub fn rows(&self) -> &[Vec<Outcome>] {
        &self.dynamics
    }

    /// Marginal `p(s' | s, a)` as a dense vector.
    pub fn next_state_probs(&self, s: usize, a: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_states];
        for o in self.outcomes(s, a) {
            out[o.next] += o.prob;
        }
        out
    }

    /// True when every `(s, a)` has a single outcome.
    pub fn is_deterministic(&self) -> bool {
        self.dynamics.iter().all(|row| row.len() == 1)
    }

    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn with_initial(self, initial: Vec<f64>) -> Result<Self, MdpError> {
        Self::new(
            self.n_states,
            self.n_actions,
            self.rewards,
            self.dynamics,
            self.gamma,
            initial,
            self.terminal,
            self.horizon,
        )
    }

    /// Draws an initial state.
    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_index(&self.initial, rng.random::<f64>())
    }

    /// Samples `(next_state, reward)` for one step.
    pub fn sample_step<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> (usize, f64) {
        let row = self.outcomes(s, a);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for o in row {
            acc += o.prob;
            if u < acc {
                return (o.next, self.rewards[o.reward]);
            }
        }
        let last = row.last().expect("validated rows are nonempty");
        (last.next, self.rewards[last.reward])
    }
}

/// Inverse-CDF draw from a probability vector with a single uniform.
pub fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Incremental construction of an MDP with reward values interned on the fly.
/// Terminal states get their self-loop rows automatically.
#[derive(Debug, Clone)]
pub struct MdpBuilder {
    n_states: usize,
    n_actions: usize,
    rewards: Vec<f64>,
    dynamics: Vec<Vec<Outcome>>,
    terminal: Vec<bool>,
    initial: Vec<f64>,
    gamma: f64,
    horizon: usize,
}

impl MdpBuilder {
    pub fn new(n_states: usize, n_actions: usize) -> Self {
        let mut initial = vec![0.0; n_states];
        if n_states > 0 {
            initial[0] = 1.0;
        }
        Self {
            n_states,
            n_actions,
            rewards: Vec::new(),
            dynamics: vec![Vec::new(); n_states * n_actions],
            terminal: vec![false; n_states],
            initial,
            gamma: 0.99,
            horizon: 100,
        }
    }

    pub fn gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn initial(mut self, initial: Vec<f64>) -> Self {
        self.initial = initial;
        self
    }

    pub fn start(mut self, s: usize) -> Self {
        self.initial = vec![0.0; self.n_states];
        self.initial[s] = 1.0;
        self
    }

    pub fn terminal(mut self, s: usize) -> Self {
        self.terminal[s] = true;
        self
    }

    pub fn reward_index(&mut self, r: f64) -> usize {
        match self.rewards.iter().position(|&x| x == r) {
            Some(i) => i,
            None => {
                self.rewards.push(r);
                self.rewards.len() - 1
            }
        }
    }

    /// Adds probability mass for `(s, a) -> (s', r)`.
    pub fn add(&mut self, s: usize, a: usize, next: usize, r: f64, prob: f64) -> &mut Self {
        let reward = self.reward_index(r);
        self.dynamics[s * self.n_actions + a].push(Outcome { next, reward, prob });
        self
    }

    pub fn build(mut self) -> Result<FiniteMdp, MdpError> {
        let zero = self.reward_index(0.0);
        for s in 0..self.n_states {
            if self.terminal[s] {
                for a in 0..self.n_actions {
                    self.dynamics[s * self.n_actions + a] = vec![Outcome { next: s, reward: zero, prob: 1.0 }];
                }
            }
        }
        FiniteMdp::new(
            self.n_states,
            self.n_actions,
            self.rewards,
            self.dynamics,
            self.gamma,
            self.initial,
            self.terminal,
            self.horizon,
        )
    }
}

/// Per-state action distribution `pi(a | s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl PolicyTable {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self, MdpError> {
        if probs.len() != n_states * n_actions {
            return Err(MdpError::Dimension {
                expected_states: n_states,
                expected_actions: n_actions,
                states: probs.len() / n_actions.max(1),
                actions: n_actions,
            });
        }
        for s in 0..n_states {
            let row = &probs[s * n_actions..(s + 1) * n_actions];
            if row.iter().any(|p| !(0.0..=1.0).contains(p) || p.is_nan()) {
                return Err(MdpError::PolicyRow { state: s, reason: "entry outside [0, 1]".into() });
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(MdpError::PolicyRow { state: s, reason: format!("sums to {sum}") });
            }
        }
        Ok(Self { n_states, n_actions, probs })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MdpError> {
        let n_actions = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_actions) {
            return Err(MdpError::PolicyRow { state: 0, reason: "ragged rows".into() });
        }
        Self::new(rows.len(), n_actions, rows.concat())
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        let p = 1.0 / n_actions as f64;
        Self { n_states, n_actions, probs: vec![p; n_states * n_actions] }
    }

    /// One-hot policy picking `actions[s]` in every state.
    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Self {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            probs[s * n_actions + a] = 1.0;
        }
        Self { n_states: actions.len(), n_actions, probs }
    }

    /// `(1 - eps) * self + eps * uniform`, row by row.
    pub fn epsilon_mix(&self, eps: f64) -> Self {
        let u = eps / self.n_actions as f64;
        let probs = self.probs.iter().map(|&p| (1.0 - eps) * p + u).collect();
        Self { n_states: self.n_states, n_actions: self.n_actions, probs }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    /// Most probable action, lowest index on ties.
    pub fn greedy_action(&self, s: usize) -> usize {
        argmax(self.row(s))
    }

    pub fn sample<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        sample_index(self.row(s), rng.random::<f64>())
    }

    pub fn check_against(&self, mdp: &FiniteMdp) -> Result<(), MdpError> {
        if self.n_states != mdp.n_states() || self.n_actions != mdp.n_actions() {
            return Err(MdpError::Dimension {
                expected_states: mdp.n_states(),
                expected_actions: mdp.n_actions(),
                states: self.n_states,
                actions: self.n_actions,
            });
        }
        Ok(())
    }
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Derivation {
    Exact,
    Empirical,
}

/// Normalized state-action occupancy `rho(s, a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyTable {
    n_states: usize,
    n_actions: usize,
    rho: Vec<f64>,
    derivation: Derivation,
}

impl OccupancyTable {
    pub const SUM_TOL: f64 = 1e-10;

    pub fn new(n_states: usize, n_actions: usize, rho: Vec<f64>, derivation: Derivation) -> Result<Self, MdpError> {
        if rho.len() != n_states * n_actions {
            return Err(MdpError::Dimension {
                expected_states: n_states,
                expected_actions: n_actions,
                states: rho.len() / n_actions.max(1),
                actions: n_actions,
            });
        }
        if rho.iter().any(|&p| p < 0.0 || p.is_nan()) {
            return Err(MdpError::PolicyRow { state: 0, reason: "negative occupancy".into() });
        }
        let sum: f64 = rho.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOL {
            return Err(MdpError::PolicyRow { state: 0, reason: format!("occupancy sums to {sum}") });
        }
        Ok(Self { n_states, n_actions, rho, derivation })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.rho[s * self.n_actions + a]
    }

    pub fn values(&self) -> &[f64] {
        &self.rho
    }

    pub fn derivation(&self) -> Derivation {
        self.derivation
    }

    /// State marginal `rho(s) = sum_a rho(s, a)`.
    pub fn state_marginal(&self) -> Vec<f64> {
        self.rho.chunks(self.n_actions).map(|c| c.iter().sum()).collect()
    }

    pub fn total_variation(&self, other: &OccupancyTable) -> f64 {
        0.5 * self.rho.iter().zip(&other.rho).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }
}

/// Expected return from the initial distribution using the MDP's own discount.
pub fn evaluate_policy_exact(mdp: &FiniteMdp, policy: &PolicyTable) -> Result<f64, MdpError> {
    evaluate_policy_discounted(mdp, policy, mdp.gamma())
}

/// Backward induction over the finite horizon with an explicit discount.
/// `gamma = 1` is allowed since the horizon is finite.
pub fn evaluate_policy_discounted(mdp: &FiniteMdp, policy: &PolicyTable, gamma: f64) -> Result<f64, MdpError> {
    policy.check_against(mdp)?;
    if !(0.0..=1.0).contains(&gamma) {
        return Err(MdpError::Discount(gamma));
    }
    let v = state_values(mdp, policy, gamma);
    Ok(mdp.initial().iter().zip(&v).map(|(p, v)| p * v).sum())
}

/// Time-zero state values of a policy under a finite horizon.
pub fn state_values(mdp: &FiniteMdp, policy: &PolicyTable, gamma: f64) -> Vec<f64> {
    let n = mdp.n_states();
    let mut next = vec![0.0; n];
    let mut cur = vec![0.0; n];
    for _ in 0..mdp.horizon() {
        for s in 0..n {
            cur[s] = if mdp.is_terminal(s) {
                0.0
            } else {
                (0..mdp.n_actions())
                    .map(|a| {
                        let pa = policy.prob(s, a);
                        if pa == 0.0 {
                            return 0.0;
                        }
                        let q: f64 = mdp
                            .outcomes(s, a)
                            .iter()
                            .map(|o| o.prob * (mdp.rewards()[o.reward] + gamma * next[o.next]))
                            .sum();
                        pa * q
                    })
                    .sum()
            };
        }
        std::mem::swap(&mut cur, &mut next);
    }
    next
}

/// Optimal finite-horizon action values at time zero and a stationary greedy
/// policy. Among tied actions the one that attains the optimal value with the
/// fewest remaining steps wins, then the lowest index; otherwise a stationary
/// policy could stall on actions that are only optimal because of slack in
/// the horizon.
pub fn optimal_policy(mdp: &FiniteMdp, gamma: f64) -> (Vec<f64>, PolicyTable) {
    const TIE_TOL: f64 = 1e-12;
    let (n, na) = (mdp.n_states(), mdp.n_actions());
    let mut v = vec![0.0; n];
    let mut q = vec![0.0; n * na];
    let mut history: Vec<Vec<f64>> = Vec::with_capacity(mdp.horizon());
    for _ in 0..mdp.horizon() {
        for s in 0..n {
            for a in 0..na {
                q[s * na + a] = if mdp.is_terminal(s) {
                    0.0
                } else {
                    mdp.outcomes(s, a)
                        .iter()
                        .map(|o| o.prob * (mdp.rewards()[o.reward] + gamma * v[o.next]))
                        .sum()
                };
            }
        }
        for s in 0..n {
            v[s] = q[s * na..(s + 1) * na].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        }
        history.push(q.clone());
    }
    let actions: Vec<usize> = (0..n)
        .map(|s| {
            let row = &q[s * na..(s + 1) * na];
            let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let first_hit = |a: usize| history.iter().position(|qk| qk[s * na + a] >= best - TIE_TOL).unwrap_or(usize::MAX);
            (0..na)
                .filter(|&a| row[a] >= best - TIE_TOL)
                .min_by_key(|&a| (first_hit(a), a))
                .unwrap_or(0)
        })
        .collect();
    (q, PolicyTable::deterministic(na, &actions))
}

/// Infinite-horizon optimal state values by value iteration, iterated until
/// the sup-norm change drops below `tol`. Terminal states are worth zero.
pub fn value_iteration(mdp: &FiniteMdp, gamma: f64, tol: f64) -> Vec<f64> {
    assert!((0.0..1.0).contains(&gamma), "value iteration needs gamma < 1");
    let n = mdp.n_states();
    let mut v = vec![0.0; n];
    loop {
        let mut delta: f64 = 0.0;
        let mut next = vec![0.0; n];
        for s in (0..n).filter(|&s| !mdp.is_terminal(s)) {
            next[s] = (0..mdp.n_actions())
                .map(|a| {
                    mdp.outcomes(s, a)
                        .iter()
                        .map(|o| o.prob * (mdp.rewards()[o.reward] + gamma * v[o.next]))
                        .sum::<f64>()
                })
                .fold(f64::NEG_INFINITY, f64::max);
            delta = delta.max((next[s] - v[s]).abs());
        }
        v = next;
        if delta < tol {
            return v;
        }
    }
}

/// Normalized expected visit counts of nonterminal `(s, a)` pairs over one
/// episode truncated at the horizon.
pub fn occupancy_exact(mdp: &FiniteMdp, policy: &PolicyTable) -> Result<OccupancyTable, MdpError> {
    policy.check_against(mdp)?;
    let (n, na) = (mdp.n_states(), mdp.n_actions());
    let mut visits = vec![0.0; n * na];
    let mut dist = mdp.initial().to_vec();
    let mut next = vec![0.0; n];
    for _ in 0..mdp.horizon() {
        next.iter_mut().for_each(|x| *x = 0.0);
        let mut alive = false;
        for s in 0..n {
            if dist[s] == 0.0 || mdp.is_terminal(s) {
                continue;
            }
            alive = true;
            for a in 0..na {
                let m = dist[s] * policy.prob(s, a);
                if m == 0.0 {
                    continue;
                }
                visits[s * na + a] += m;
                for o in mdp.outcomes(s, a) {
                    next[o.next] += m * o.prob;
                }
            }
        }
        if !alive {
            break;
        }
        std::mem::swap(&mut dist, &mut next);
    }
    let total: f64 = visits.iter().sum();
    if total <= 0.0 {
        return Err(MdpError::NoVisits);
    }
    let rho = visits.into_iter().map(|v| v / total).collect();
    OccupancyTable::new(n, na, rho, Derivation::Exact)
}

/// One environment episode under `policy`, as `(s, a, r, s', terminal)` tuples.
pub fn rollout<R: Rng + ?Sized>(
    mdp: &FiniteMdp,
    policy: &PolicyTable,
    rng: &mut R,
    max_steps: usize,
) -> Vec<(usize, usize, f64, usize, bool)> {
    let mut s = mdp.sample_initial(rng);
    let mut out = Vec::new();
    while out.len() < max_steps.min(mdp.horizon()) && !mdp.is_terminal(s) {
        let a = policy.sample(s, rng);
        let (sn, r) = mdp.sample_step(s, a, rng);
        let done = mdp.is_terminal(sn);
        out.push((s, a, r, sn, done));
        s = sn;
    }
    out
}

/// Discounted return of a sampled episode.
pub fn episode_return(rewards: impl IntoIterator<Item = f64>, gamma: f64) -> f64 {
    let mut g = 0.0;
    let mut disc = 1.0;
    for r in rewards {
        g += disc * r;
        disc *= gamma;
    }
    g
}
