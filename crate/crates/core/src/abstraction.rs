//! MDP homomorphisms: abstraction maps from a ground MDP onto an abstract
//! MDP, validation of the aggregation conditions, policy lifting, and exact
//! checks of return preservation and the transition-entropy bounds.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Trajectory, Transition};
use crate::envs::random::{random_mdp, random_policy, random_simplex, RandomMdpSpec};
use crate::mdp::{evaluate_policy_exact, FiniteMdp, MdpBuilder, MdpError, PolicyTable, ROW_SUM_TOL};
use crate::measures::{transition_entropy_exact, MeasureError};

/// Tolerance of the aggregation conditions.
pub const CONDITION_TOL: f64 = 1e-10;
pub const RETURN_TOL: f64 = 1e-9;
pub const ENTROPY_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AbstractionError {
    #[error("state map has {got} entries for {expected} ground states")]
    StateMapLength { expected: usize, got: usize },
    #[error("action map of ground state {state} has {got} entries for {expected} actions")]
    ActionMapLength { state: usize, expected: usize, got: usize },
    #[error("map value {value} out of range {bound}")]
    OutOfRange { value: usize, bound: usize },
    #[error("state map is not surjective: abstract state {0} has no preimage")]
    StateNotSurjective(usize),
    #[error("action map of ground state {state} misses abstract action {action}")]
    ActionNotSurjective { state: usize, action: usize },
    #[error("homomorphisms do not share the same abstract mdp")]
    AbstractMismatch,
    #[error("ground initial distribution does not push forward onto the abstract one")]
    InitialMismatch,
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

/// `phi[s]` is the abstract state of ground state `s`; `psi[s][a]` the
/// abstract action of ground action `a` in `s`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbstractionMaps {
    pub phi: Vec<usize>,
    pub psi: Vec<Vec<usize>>,
}

impl AbstractionMaps {
    pub fn identity(n_states: usize, n_actions: usize) -> Self {
        Self { phi: (0..n_states).collect(), psi: vec![(0..n_actions).collect(); n_states] }
    }

    /// Ground actions of `s` mapping to abstract action `abstract_action`.
    pub fn action_preimage(&self, s: usize, abstract_action: usize) -> Vec<usize> {
        self.psi[s].iter().enumerate().filter(|(_, &x)| x == abstract_action).map(|(a, _)| a).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Homomorphism {
    pub maps: AbstractionMaps,
    pub ground: FiniteMdp,
    pub abstract_mdp: FiniteMdp,
}

impl Homomorphism {
    /// Checks that the maps are total and surjective. The dynamics
    /// conditions are checked separately by [`validate_homomorphism`].
    pub fn new(ground: FiniteMdp, abstract_mdp: FiniteMdp, maps: AbstractionMaps) -> Result<Self, AbstractionError> {
        let (n, na) = (ground.n_states(), ground.n_actions());
        let (m, ma) = (abstract_mdp.n_states(), abstract_mdp.n_actions());
        if maps.phi.len() != n {
            return Err(AbstractionError::StateMapLength { expected: n, got: maps.phi.len() });
        }
        if maps.psi.len() != n {
            return Err(AbstractionError::StateMapLength { expected: n, got: maps.psi.len() });
        }
        let mut hit = vec![false; m];
        for &x in &maps.phi {
            if x >= m {
                return Err(AbstractionError::OutOfRange { value: x, bound: m });
            }
            hit[x] = true;
        }
        if let Some(missing) = hit.iter().position(|h| !h) {
            return Err(AbstractionError::StateNotSurjective(missing));
        }
        for (s, row) in maps.psi.iter().enumerate() {
            if row.len() != na {
                return Err(AbstractionError::ActionMapLength { state: s, expected: na, got: row.len() });
            }
            let mut hit = vec![false; ma];
            for &x in row {
                if x >= ma {
                    return Err(AbstractionError::OutOfRange { value: x, bound: ma });
                }
                hit[x] = true;
            }
            if let Some(action) = hit.iter().position(|h| !h) {
                return Err(AbstractionError::ActionNotSurjective { state: s, action });
            }
        }
        Ok(Self { maps, ground, abstract_mdp })
    }

    pub fn identity(mdp: &FiniteMdp) -> Self {
        let maps = AbstractionMaps::identity(mdp.n_states(), mdp.n_actions());
        Self { maps, ground: mdp.clone(), abstract_mdp: mdp.clone() }
    }

    /// Pushforward of the ground initial distribution through `phi`.
    pub fn pushed_initial(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.abstract_mdp.n_states()];
        for (s, &p) in self.ground.initial().iter().enumerate() {
            out[self.maps.phi[s]] += p;
        }
        out
    }

    pub fn initial_consistent(&self) -> bool {
        self.pushed_initial()
            .iter()
            .zip(self.abstract_mdp.initial())
            .all(|(a, b)| (a - b).abs() <= CONDITION_TOL)
    }

    /// Maps a ground trajectory onto abstract state and action ids.
    pub fn map_trajectory(&self, traj: &Trajectory) -> Trajectory {
        let transitions = traj
            .transitions
            .iter()
            .map(|t| {
                let s = t.s as usize;
                Transition::new(
                    self.maps.phi[s] as u64,
                    self.maps.psi[s][t.a as usize] as u32,
                    t.r,
                    self.maps.phi[t.s_next as usize] as u64,
                    t.terminal,
                )
            })
            .collect();
        Trajectory::new(traj.episode_id, transitions)
    }
}

/// Serialized form: `{"phi":[...],"psi":[[...]],"abstract_env":{...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomomorphismFile {
    pub phi: Vec<usize>,
    pub psi: Vec<Vec<usize>>,
    pub abstract_env: FiniteMdp,
}

impl From<&Homomorphism> for HomomorphismFile {
    fn from(h: &Homomorphism) -> Self {
        Self { phi: h.maps.phi.clone(), psi: h.maps.psi.clone(), abstract_env: h.abstract_mdp.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Violation {
    /// `p(r | s, a, s')` differs from `p̂(r | phi(s), psi_s(a), phi(s'))`.
    Reward { s: usize, a: usize, s_next: usize, reward: f64, ground: f64, abstract_value: f64 },
    /// Aggregated `p(phi^-1(ŝ') | s, a)` differs from `p̂(ŝ' | phi(s), psi_s(a))`.
    StateAggregation { s: usize, a: usize, abstract_next: usize, ground: f64, abstract_value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub max_error: f64,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

fn reward_conditionals(mdp: &FiniteMdp, s: usize, a: usize) -> BTreeMap<usize, BTreeMap<u64, f64>> {
    let mut joint: BTreeMap<usize, BTreeMap<u64, f64>> = BTreeMap::new();
    for o in mdp.outcomes(s, a) {
        *joint.entry(o.next).or_default().entry(mdp.rewards()[o.reward].to_bits()).or_default() += o.prob;
    }
    for row in joint.values_mut() {
        let total: f64 = row.values().sum();
        row.values_mut().for_each(|p| *p /= total);
    }
    joint
}

/// Checks both aggregation conditions for every ground `(s, a, s', r)`.
pub fn validate_homomorphism(h: &Homomorphism) -> ValidationReport {
    let (g, ab, maps) = (&h.ground, &h.abstract_mdp, &h.maps);
    let mut violations = Vec::new();
    let mut max_error: f64 = 0.0;
    for s in 0..g.n_states() {
        let hs = maps.phi[s];
        for a in 0..g.n_actions() {
            let ha = maps.psi[s][a];

            let mut aggregated = vec![0.0; ab.n_states()];
            for o in g.outcomes(s, a) {
                aggregated[maps.phi[o.next]] += o.prob;
            }
            let abstract_next = ab.next_state_probs(hs, ha);
            for (next, (&got, &want)) in aggregated.iter().zip(&abstract_next).enumerate() {
                let err = (got - want).abs();
                max_error = max_error.max(err);
                if err > CONDITION_TOL {
                    violations.push(Violation::StateAggregation { s, a, abstract_next: next, ground: got, abstract_value: want });
                }
            }

            let ground_r = reward_conditionals(g, s, a);
            let abstract_r = reward_conditionals(ab, hs, ha);
            for (&s_next, row) in &ground_r {
                let empty = BTreeMap::new();
                let arow = abstract_r.get(&maps.phi[s_next]).unwrap_or(&empty);
                let keys: std::collections::BTreeSet<u64> = row.keys().chain(arow.keys()).copied().collect();
                for bits in keys {
                    let got = row.get(&bits).copied().unwrap_or(0.0);
                    let want = arow.get(&bits).copied().unwrap_or(0.0);
                    let err = (got - want).abs();
                    max_error = max_error.max(err);
                    if err > CONDITION_TOL {
                        violations.push(Violation::Reward {
                            s,
                            a,
                            s_next,
                            reward: f64::from_bits(bits),
                            ground: got,
                            abstract_value: want,
                        });
                    }
                }
            }
        }
    }
    ValidationReport { violations, max_error }
}

/// Aggregates each ground row through `phi` and compares the joint
/// `(ŝ', r)` distribution with the abstract row entry by entry.
pub fn quotient_matches(h: &Homomorphism) -> bool {
    let (g, ab, maps) = (&h.ground, &h.abstract_mdp, &h.maps);
    for s in 0..g.n_states() {
        for a in 0..g.n_actions() {
            let mut agg: BTreeMap<(usize, u64), f64> = BTreeMap::new();
            for o in g.outcomes(s, a) {
                *agg.entry((maps.phi[o.next], g.rewards()[o.reward].to_bits())).or_default() += o.prob;
            }
            let mut want: BTreeMap<(usize, u64), f64> = BTreeMap::new();
            for o in ab.outcomes(maps.phi[s], maps.psi[s][a]) {
                *want.entry((o.next, ab.rewards()[o.reward].to_bits())).or_default() += o.prob;
            }
            let keys: std::collections::BTreeSet<_> = agg.keys().chain(want.keys()).copied().collect();
            for k in keys {
                let x = agg.get(&k).copied().unwrap_or(0.0);
                let y = want.get(&k).copied().unwrap_or(0.0);
                if (x - y).abs() > CONDITION_TOL {
                    return false;
                }
            }
        }
    }
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRule {
    /// Abstract action mass is shared equally by its ground preimage.
    Uniform,
    /// All mass goes to the lowest-indexed ground action of the preimage.
    First,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiftedPolicy {
    pub abstract_policy: PolicyTable,
    pub ground_policy: PolicyTable,
    pub split_rule: SplitRule,
}

/// `pi(a | s) = pî(psi_s(a) | phi(s)) * split(a)`.
pub fn lift_policy(h: &Homomorphism, abstract_policy: &PolicyTable, split_rule: SplitRule) -> Result<LiftedPolicy, AbstractionError> {
    abstract_policy.check_against(&h.abstract_mdp)?;
    let (n, na) = (h.ground.n_states(), h.ground.n_actions());
    let mut probs = vec![0.0; n * na];
    for s in 0..n {
        let hs = h.maps.phi[s];
        for ha in 0..h.abstract_mdp.n_actions() {
            let pre = h.maps.action_preimage(s, ha);
            if pre.is_empty() {
                return Err(AbstractionError::ActionNotSurjective { state: s, action: ha });
            }
            let mass = abstract_policy.prob(hs, ha);
            match split_rule {
                SplitRule::Uniform => {
                    let share = mass / pre.len() as f64;
                    pre.iter().for_each(|&a| probs[s * na + a] = share);
                }
                SplitRule::First => probs[s * na + pre[0]] = mass,
            }
        }
    }
    let ground_policy = PolicyTable::new(n, na, probs)?;
    Ok(LiftedPolicy { abstract_policy: abstract_policy.clone(), ground_policy, split_rule })
}

/// Pushes a ground policy through the action maps, one row per ground state.
pub fn pushforward_rows(h: &Homomorphism, ground_policy: &PolicyTable) -> Vec<Vec<f64>> {
    (0..h.ground.n_states())
        .map(|s| {
            let mut row = vec![0.0; h.abstract_mdp.n_actions()];
            for a in 0..h.ground.n_actions() {
                row[h.maps.psi[s][a]] += ground_policy.prob(s, a);
            }
            row
        })
        .collect()
}

/// Every ground state's pushed-forward row equals the abstract row of its image.
pub fn pushforward_matches(h: &Homomorphism, ground_policy: &PolicyTable, abstract_policy: &PolicyTable) -> bool {
    pushforward_rows(h, ground_policy).iter().enumerate().all(|(s, row)| {
        row.iter()
            .zip(abstract_policy.row(h.maps.phi[s]))
            .all(|(x, y)| (x - y).abs() <= ROW_SUM_TOL)
    })
}

fn check_pair(h1: &Homomorphism, h2: &Homomorphism) -> Result<(), AbstractionError> {
    if h1.abstract_mdp != h2.abstract_mdp {
        return Err(AbstractionError::AbstractMismatch);
    }
    if !h1.initial_consistent() || !h2.initial_consistent() {
        return Err(AbstractionError::InitialMismatch);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReturnReport {
    pub g_first: f64,
    pub g_second: f64,
    pub g_abstract: f64,
    pub difference: f64,
    pub holds: bool,
}

/// Exact returns of the two uniformly lifted ground policies.
pub fn check_return_preservation(h1: &Homomorphism, h2: &Homomorphism, abstract_policy: &PolicyTable) -> Result<ReturnReport, AbstractionError> {
    check_pair(h1, h2)?;
    let p1 = lift_policy(h1, abstract_policy, SplitRule::Uniform)?;
    let p2 = lift_policy(h2, abstract_policy, SplitRule::Uniform)?;
    let g_first = evaluate_policy_exact(&h1.ground, &p1.ground_policy)?;
    let g_second = evaluate_policy_exact(&h2.ground, &p2.ground_policy)?;
    let g_abstract = evaluate_policy_exact(&h1.abstract_mdp, abstract_policy)?;
    let difference = (g_first - g_second).abs();
    Ok(ReturnReport { g_first, g_second, g_abstract, difference, holds: difference <= RETURN_TOL })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropyBoundReport {
    pub h_first: f64,
    pub h_second: f64,
    pub h_abstract: f64,
    /// `H(p) >= H(p̂)` for the first image.
    pub lower_bound_first: bool,
    pub lower_bound_second: bool,
    /// `|H(p) - H(p̃)| <= max(H(p), H(p̃)) - H(p̂)`.
    pub difference_bound: bool,
    /// Right-hand side minus left-hand side of the difference bound.
    pub slack: f64,
}

impl EntropyBoundReport {
    pub fn holds(&self) -> bool {
        self.lower_bound_first && self.lower_bound_second && self.difference_bound
    }
}

pub fn check_entropy_bounds(h1: &Homomorphism, h2: &Homomorphism, abstract_policy: &PolicyTable) -> Result<EntropyBoundReport, AbstractionError> {
    check_pair(h1, h2)?;
    let p1 = lift_policy(h1, abstract_policy, SplitRule::Uniform)?;
    let p2 = lift_policy(h2, abstract_policy, SplitRule::Uniform)?;
    let h_first = transition_entropy_exact(&h1.ground, &p1.ground_policy)?;
    let h_second = transition_entropy_exact(&h2.ground, &p2.ground_policy)?;
    let h_abstract = transition_entropy_exact(&h1.abstract_mdp, abstract_policy)?;
    let slack = h_first.max(h_second) - h_abstract - (h_first - h_second).abs();
    Ok(EntropyBoundReport {
        h_first,
        h_second,
        h_abstract,
        lower_bound_first: h_first >= h_abstract - ENTROPY_TOL,
        lower_bound_second: h_second >= h_abstract - ENTROPY_TOL,
        difference_bound: slack >= -ENTROPY_TOL,
        slack,
    })
}

/// Expands an abstract MDP into a random homomorphic image: every abstract
/// state gets `1..=max_copies` ground copies, every ground state
/// `abstract actions + 0..=max_extra_actions` actions with a random surjective
/// action map, and abstract next-state mass is split over the successor's
/// copies with random weights that do not depend on the reward. The result
/// satisfies both aggregation conditions by construction.
pub fn random_image<R: Rng + ?Sized>(abstract_mdp: &FiniteMdp, max_copies: usize, max_extra_actions: usize, rng: &mut R) -> Homomorphism {
    let m = abstract_mdp.n_states();
    let ma = abstract_mdp.n_actions();
    let copies: Vec<usize> = (0..m).map(|_| rng.random_range(1..=max_copies.max(1))).collect();
    let mut phi = Vec::new();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (hs, &k) in copies.iter().enumerate() {
        for _ in 0..k {
            members[hs].push(phi.len());
            phi.push(hs);
        }
    }
    let n = phi.len();
    let na = ma + rng.random_range(0..=max_extra_actions);

    let psi: Vec<Vec<usize>> = (0..n)
        .map(|_| {
            let mut row: Vec<usize> = crate::envs::random_permutation(ma, rng);
            row.extend((ma..na).map(|_| rng.random_range(0..ma)));
            let order = crate::envs::random_permutation(na, rng);
            order.into_iter().map(|i| row[i]).collect()
        })
        .collect();

    let mut initial = vec![0.0; n];
    for hs in 0..m {
        let w = random_simplex(members[hs].len(), rng);
        for (&g, wi) in members[hs].iter().zip(w) {
            initial[g] = abstract_mdp.initial()[hs] * wi;
        }
    }

    let mut b = MdpBuilder::new(n, na)
        .gamma(abstract_mdp.gamma())
        .horizon(abstract_mdp.horizon())
        .initial(initial);
    for s in 0..n {
        if abstract_mdp.is_terminal(phi[s]) {
            b = b.terminal(s);
        }
    }
    for s in 0..n {
        if abstract_mdp.is_terminal(phi[s]) {
            continue;
        }
        for a in 0..na {
            let outcomes = abstract_mdp.outcomes(phi[s], psi[s][a]);
            let mut weights: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for o in outcomes {
                weights.entry(o.next).or_insert_with(|| random_simplex(members[o.next].len(), rng));
            }
            for o in outcomes {
                let r = abstract_mdp.rewards()[o.reward];
                for (&g, w) in members[o.next].iter().zip(&weights[&o.next]) {
                    b.add(s, a, g, r, o.prob * w);
                }
            }
        }
    }
    let ground = b.build().expect("expanded rows stay normalized");
    Homomorphism { maps: AbstractionMaps { phi, psi }, ground, abstract_mdp: abstract_mdp.clone() }
}

/// A random abstract MDP, two random images of it and a random abstract policy.
pub fn random_pair<R: Rng + ?Sized>(spec: &RandomMdpSpec, rng: &mut R) -> (Homomorphism, Homomorphism, PolicyTable) {
    let abstract_mdp = random_mdp(spec, rng);
    let h1 = random_image(&abstract_mdp, 3, 2, rng);
    let h2 = random_image(&abstract_mdp, 3, 2, rng);
    let policy = random_policy(abstract_mdp.n_states(), abstract_mdp.n_actions(), rng);
    (h1, h2, policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{build_chain, build_gridworld, transform, GridSpec, TransformKind};
    use crate::mdp::{optimal_policy, Outcome};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn duplicated(base: &FiniteMdp, k: usize) -> Homomorphism {
        let t = transform(base, &TransformKind::DuplicateStates(k)).unwrap();
        Homomorphism::new(t.mdp, base.clone(), t.maps.unwrap()).unwrap()
    }

    #[test]
    fn identity_is_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mdp = random_mdp(&RandomMdpSpec::default(), &mut rng);
            assert!(validate_homomorphism(&Homomorphism::identity(&mdp)).is_valid());
        }
    }

    #[test]
    fn duplicated_states_are_valid_images() {
        let base = build_chain(3, 0.0).unwrap();
        let h = duplicated(&base, 2);
        let report = validate_homomorphism(&h);
        assert!(report.is_valid(), "{report:?}");
        assert!(quotient_matches(&h));
    }

    #[test]
    fn perturbed_row_is_reported() {
        let base = build_gridworld(&GridSpec { slip_prob: 0.2, ..GridSpec::grid5() }).unwrap();
        let h = duplicated(&base, 2);
        let (s, a) = (2usize, 1usize);
        let mut rows: Vec<Vec<Outcome>> = h.ground.rows().to_vec();
        let row = &mut rows[s * h.ground.n_actions() + a];
        assert!(row.len() >= 2);
        row[0].prob += 0.05;
        row[1].prob -= 0.05;
        let perturbed = FiniteMdp::new(
            h.ground.n_states(),
            h.ground.n_actions(),
            h.ground.rewards().to_vec(),
            rows,
            h.ground.gamma(),
            h.ground.initial().to_vec(),
            h.ground.terminal().to_vec(),
            h.ground.horizon(),
        )
        .unwrap();
        let bad = Homomorphism { ground: perturbed, ..h };
        let report = validate_homomorphism(&bad);
        assert!(!report.is_valid());
        assert!(report.violations.iter().all(|v| matches!(v,
            Violation::StateAggregation { s: 2, a: 1, .. } | Violation::Reward { s: 2, a: 1, .. })));
        assert!((report.max_error - 0.05).abs() < 1e-9);
        assert!(!quotient_matches(&bad));
    }

    #[test]
    fn non_surjective_maps_rejected() {
        let base = build_chain(3, 0.0).unwrap();
        let maps = AbstractionMaps { phi: vec![0, 0, 1], psi: vec![vec![0, 1]; 3] };
        assert_eq!(Homomorphism::new(base.clone(), base.clone(), maps), Err(AbstractionError::StateNotSurjective(2)));
        let maps = AbstractionMaps { phi: vec![0, 1, 2], psi: vec![vec![0, 0]; 3] };
        assert_eq!(
            Homomorphism::new(base.clone(), base, maps),
            Err(AbstractionError::ActionNotSurjective { state: 0, action: 1 })
        );
    }

    #[test]
    fn lifting_through_identity_is_identity() {
        let mdp = build_gridworld(&GridSpec::grid5()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pi = random_policy(mdp.n_states(), 4, &mut rng);
        let lifted = lift_policy(&Homomorphism::identity(&mdp), &pi, SplitRule::Uniform).unwrap();
        assert_eq!(lifted.ground_policy, pi);
    }

    #[test]
    fn duplicated_copies_share_rows() {
        let base = build_chain(4, 0.0).unwrap();
        let h = duplicated(&base, 2);
        let pi = PolicyTable::from_rows(&[vec![0.2, 0.8], vec![0.6, 0.4], vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap();
        let lifted = lift_policy(&h, &pi, SplitRule::Uniform).unwrap();
        for s in 0..4 {
            assert_eq!(lifted.ground_policy.row(2 * s), lifted.ground_policy.row(2 * s + 1));
        }
    }

    #[test]
    fn pushforward_recovers_abstract_policy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let (h, _, pi) = random_pair(&RandomMdpSpec::default(), &mut rng);
            for rule in [SplitRule::Uniform, SplitRule::First] {
                let lifted = lift_policy(&h, &pi, rule).unwrap();
                assert!(pushforward_matches(&h, &lifted.ground_policy, &pi));
            }
        }
    }

    #[test]
    fn random_images_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let (h1, h2, _) = random_pair(&RandomMdpSpec::default(), &mut rng);
            for h in [&h1, &h2] {
                assert!(validate_homomorphism(h).is_valid());
                assert!(quotient_matches(h));
                assert!(h.initial_consistent());
            }
        }
    }

    #[test]
    fn identity_pair_has_equal_returns_and_entropies() {
        let mdp = build_chain(5, 0.1).unwrap();
        let h = Homomorphism::identity(&mdp);
        let pi = PolicyTable::uniform(5, 2);
        let r = check_return_preservation(&h, &h, &pi).unwrap();
        assert_eq!(r.difference, 0.0);
        let e = check_entropy_bounds(&h, &h, &pi).unwrap();
        assert_eq!(e.h_first, e.h_abstract);
        assert_eq!(e.slack, 0.0);
        assert!(e.holds());
    }

    #[test]
    fn duplicated_chain_preserves_optimal_return() {
        let base = build_chain(5, 0.0).unwrap();
        let (_, pi) = optimal_policy(&base, base.gamma());
        let r = check_return_preservation(&Homomorphism::identity(&base), &duplicated(&base, 2), &pi).unwrap();
        assert!(r.holds, "{r:?}");
        assert!((r.g_first - r.g_abstract).abs() < 1e-12);
    }

    #[test]
    fn permuted_image_preserves_return() {
        let base = build_gridworld(&GridSpec::lava7()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let perm = crate::envs::random_permutation(base.n_states(), &mut rng);
        let t = transform(&base, &TransformKind::PermuteStates(perm)).unwrap();
        let h = Homomorphism::new(t.mdp, base.clone(), t.maps.unwrap()).unwrap();
        assert!(validate_homomorphism(&h).is_valid());
        let pi = random_policy(base.n_states(), 4, &mut rng);
        let r = check_return_preservation(&Homomorphism::identity(&base), &h, &pi).unwrap();
        assert!(r.difference <= 1e-12);
    }

    #[test]
    fn full_duplication_adds_ln_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let base = random_mdp(&RandomMdpSpec::default(), &mut rng);
        let pi = random_policy(base.n_states(), base.n_actions(), &mut rng);
        let e = check_entropy_bounds(&duplicated(&base, 2), &Homomorphism::identity(&base), &pi).unwrap();
        assert!((e.h_first - e.h_abstract - std::f64::consts::LN_2).abs() < 1e-10);
        assert!(e.holds());
    }

    #[test]
    fn mismatched_abstract_mdps_rejected() {
        let a = Homomorphism::identity(&build_chain(3, 0.0).unwrap());
        let b = Homomorphism::identity(&build_chain(4, 0.0).unwrap());
        let pi = PolicyTable::uniform(3, 2);
        assert_eq!(check_return_preservation(&a, &b, &pi), Err(AbstractionError::AbstractMismatch));
        assert!(matches!(check_entropy_bounds(&a, &b, &pi), Err(AbstractionError::AbstractMismatch)));
    }

    #[test]
    fn mapped_trajectories_keep_returns() {
        let base = build_chain(4, 0.0).unwrap();
        let h = duplicated(&base, 3);
        let pi = PolicyTable::uniform(base.n_states(), 2);
        let lifted = lift_policy(&h, &pi, SplitRule::Uniform).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut ground_total = 0.0;
        let mut abstract_total = 0.0;
        let episodes = 20_000;
        for ep in 0..episodes {
            let steps = crate::mdp::rollout(&h.ground, &lifted.ground_policy, &mut rng, usize::MAX);
            let traj = Trajectory::new(
                ep,
                steps.iter().map(|&(s, a, r, sn, d)| Transition::new(s as u64, a as u32, r, sn as u64, d)).collect(),
            );
            let mapped = h.map_trajectory(&traj);
            for t in &mapped.transitions {
                assert!(t.s < 4 && t.s_next < 4);
            }
            ground_total += traj.discounted_return(1.0);
            abstract_total += mapped.discounted_return(1.0);
        }
        assert_eq!(ground_total, abstract_total);
        let exact = crate::mdp::evaluate_policy_discounted(&base, &pi, 1.0).unwrap();
        assert!((abstract_total / episodes as f64 - exact).abs() < 0.02);
    }

    #[test]
    fn homomorphism_json_shape() {
        let h = Homomorphism::identity(&build_chain(2, 0.0).unwrap());
        let v = serde_json::to_value(HomomorphismFile::from(&h)).unwrap();
        assert_eq!(v["phi"], serde_json::json!([0, 1]));
        assert_eq!(v["psi"], serde_json::json!([[0, 1], [0, 1]]));
        assert!(v["abstract_env"].is_object());
    }
}
