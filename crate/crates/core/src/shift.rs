//! Count-based estimates of the four transition factors (reward dynamics,
//! state dynamics, policy, state occupancy) and a comparison of two datasets
//! factor by factor.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;

pub const DEFAULT_THRESHOLD: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShiftError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("datasets share no state-action pair; shift is not comparable")]
    Incomparable,
    #[error("threshold {0} outside [0, 1]")]
    Threshold(f64),
}

type Row<K> = BTreeMap<K, f64>;

/// Empirical conditionals. Reward values are keyed by their bit pattern.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FactorEstimates {
    pub n: usize,
    /// `p(r | s, a, s')`
    pub reward_dynamics: BTreeMap<(u64, u32, u64), Row<u64>>,
    /// `p(s' | s, a)`
    pub state_dynamics: BTreeMap<(u64, u32), Row<u64>>,
    /// `pi(a | s)`
    pub policy: BTreeMap<u64, Row<u32>>,
    /// `rho(s)`
    pub state_occupancy: Row<u64>,
}

fn normalize<K: Ord + Copy>(counts: BTreeMap<K, u64>) -> Row<K> {
    let total: u64 = counts.values().sum();
    counts.into_iter().map(|(k, c)| (k, c as f64 / total as f64)).collect()
}

fn tv<K: Ord + Copy>(a: &Row<K>, b: &Row<K>) -> f64 {
    let keys: BTreeSet<K> = a.keys().chain(b.keys()).copied().collect();
    0.5 * keys
        .into_iter()
        .map(|k| (a.get(&k).copied().unwrap_or(0.0) - b.get(&k).copied().unwrap_or(0.0)).abs())
        .sum::<f64>()
}

pub fn estimate_factors(ds: &Dataset) -> Result<FactorEstimates, ShiftError> {
    let mut r_counts: BTreeMap<(u64, u32, u64), BTreeMap<u64, u64>> = BTreeMap::new();
    let mut s_counts: BTreeMap<(u64, u32), BTreeMap<u64, u64>> = BTreeMap::new();
    let mut a_counts: BTreeMap<u64, BTreeMap<u32, u64>> = BTreeMap::new();
    let mut o_counts: BTreeMap<u64, u64> = BTreeMap::new();
    let mut n = 0;
    for t in ds.transitions() {
        *r_counts.entry((t.s, t.a, t.s_next)).or_default().entry(t.r.to_bits()).or_default() += 1;
        *s_counts.entry((t.s, t.a)).or_default().entry(t.s_next).or_default() += 1;
        *a_counts.entry(t.s).or_default().entry(t.a).or_default() += 1;
        *o_counts.entry(t.s).or_default() += 1;
        n += 1;
    }
    if n == 0 {
        return Err(ShiftError::EmptyDataset);
    }
    Ok(FactorEstimates {
        n,
        reward_dynamics: r_counts.into_iter().map(|(k, v)| (k, normalize(v))).collect(),
        state_dynamics: s_counts.into_iter().map(|(k, v)| (k, normalize(v))).collect(),
        policy: a_counts.into_iter().map(|(k, v)| (k, normalize(v))).collect(),
        state_occupancy: normalize(o_counts),
    })
}

impl FactorEstimates {
    /// `rho(s) pi(a | s)`
    pub fn pair_weight(&self, s: u64, a: u32) -> f64 {
        self.state_occupancy.get(&s).copied().unwrap_or(0.0) * self.policy.get(&s).and_then(|r| r.get(&a)).copied().unwrap_or(0.0)
    }

    /// `rho(s) pi(a | s) p(s' | s, a)`
    pub fn triple_weight(&self, s: u64, a: u32, s_next: u64) -> f64 {
        self.pair_weight(s, a) * self.state_dynamics.get(&(s, a)).and_then(|r| r.get(&s_next)).copied().unwrap_or(0.0)
    }

    /// Product of the four factors over the observed support, keyed by
    /// `(s, a, reward bits, s')`.
    pub fn recompose(&self) -> BTreeMap<(u64, u32, u64, u64), f64> {
        let mut out = BTreeMap::new();
        for (&(s, a, sn), row) in &self.reward_dynamics {
            let w = self.triple_weight(s, a, sn);
            for (&r, &p) in row {
                out.insert((s, a, r, sn), w * p);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftFlags {
    pub reward_dynamics: bool,
    pub state_dynamics: bool,
    pub policy: bool,
    pub occupancy: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub tv_reward: f64,
    pub tv_state_dyn: f64,
    pub tv_policy: f64,
    pub tv_occupancy: f64,
    pub threshold: f64,
    pub flags: ShiftFlags,
    /// `none`, a single factor name, `general` when the reward, state and
    /// policy factors all shift, or the flagged factors joined by `+`.
    pub label: String,
    pub shared_states: usize,
    pub shared_pairs: usize,
    pub shared_triples: usize,
}

fn label(flags: &ShiftFlags) -> String {
    let named = [
        (flags.reward_dynamics, "reward-dynamics"),
        (flags.state_dynamics, "state-dynamics"),
        (flags.policy, "policy"),
    ];
    let hits: Vec<&str> = named.iter().filter(|(f, _)| *f).map(|(_, n)| *n).collect();
    match hits.len() {
        0 if flags.occupancy => "occupancy".to_string(),
        0 => "none".to_string(),
        3 => "general".to_string(),
        _ => hits.join("+"),
    }
}

/// Weighted mean of per-key TV distances over keys present in both maps,
/// weighting each key by the average of its two weights.
fn weighted_tv<K: Ord + Copy, V: Ord + Copy>(
    a: &BTreeMap<K, Row<V>>,
    b: &BTreeMap<K, Row<V>>,
    weight: impl Fn(&K) -> f64,
) -> (f64, usize) {
    let mut num = 0.0;
    let mut den = 0.0;
    let mut shared = 0;
    for (k, ra) in a {
        if let Some(rb) = b.get(k) {
            shared += 1;
            let w = weight(k);
            num += w * tv(ra, rb);
            den += w;
        }
    }
    (if den > 0.0 { num / den } else { 0.0 }, shared)
}

pub fn compare(a: &FactorEstimates, b: &FactorEstimates, threshold: f64) -> Result<ShiftReport, ShiftError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(ShiftError::Threshold(threshold));
    }
    let (tv_state_dyn, shared_pairs) =
        weighted_tv(&a.state_dynamics, &b.state_dynamics, |&(s, act)| 0.5 * (a.pair_weight(s, act) + b.pair_weight(s, act)));
    if shared_pairs == 0 {
        return Err(ShiftError::Incomparable);
    }
    let (tv_policy, shared_states) = weighted_tv(&a.policy, &b.policy, |s| {
        0.5 * (a.state_occupancy.get(s).copied().unwrap_or(0.0) + b.state_occupancy.get(s).copied().unwrap_or(0.0))
    });
    let (tv_reward, shared_triples) = weighted_tv(&a.reward_dynamics, &b.reward_dynamics, |&(s, act, sn)| {
        0.5 * (a.triple_weight(s, act, sn) + b.triple_weight(s, act, sn))
    });
    let tv_occupancy = tv(&a.state_occupancy, &b.state_occupancy);
    let flags = ShiftFlags {
        reward_dynamics: tv_reward > threshold,
        state_dynamics: tv_state_dyn > threshold,
        policy: tv_policy > threshold,
        occupancy: tv_occupancy > threshold,
    };
    Ok(ShiftReport {
        tv_reward,
        tv_state_dyn,
        tv_policy,
        tv_occupancy,
        threshold,
        label: label(&flags),
        flags,
        shared_states,
        shared_pairs,
        shared_triples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, GenerationScheme, SchemeKind};
    use crate::dataset::tests::manifest;
    use crate::dataset::{Trajectory, Transition};
    use crate::envs::{build_chain, build_gridworld, transform, GridSpec, TransformKind};
    use crate::mdp::{optimal_policy, FiniteMdp, PolicyTable};

    fn sample(mdp: &FiniteMdp, policy: Option<&PolicyTable>, n: usize, seed: u64) -> Dataset {
        let kind = if policy.is_some() { SchemeKind::Noisy } else { SchemeKind::Random };
        generate(mdp, &GenerationScheme::new(kind, n), policy, None, seed, "t").unwrap()
    }

    #[test]
    fn deterministic_rows_are_point_masses() {
        let mdp = build_gridworld(&GridSpec::grid5()).unwrap();
        let f = estimate_factors(&sample(&mdp, None, 5000, 1)).unwrap();
        assert!(f.state_dynamics.values().all(|r| r.len() == 1 && r.values().all(|&p| p == 1.0)));
        assert!(f.reward_dynamics.values().all(|r| r.len() == 1));
    }

    #[test]
    fn random_policy_is_uniform_within_three_sigma() {
        let mdp = build_chain(5, 0.0).unwrap();
        let ds = sample(&mdp, None, 20_000, 2);
        let f = estimate_factors(&ds).unwrap();
        for (s, row) in &f.policy {
            let n = f.state_occupancy[s] * f.n as f64;
            let p0 = row.get(&0).copied().unwrap_or(0.0);
            assert!((p0 - 0.5).abs() <= 3.0 * (0.25 / n).sqrt(), "state {s}: {p0}");
        }
    }

    #[test]
    fn factors_recompose_the_joint() {
        let mdp = build_gridworld(&GridSpec { slip_prob: 0.2, ..GridSpec::lava7() }).unwrap();
        let ds = sample(&mdp, None, 8000, 3);
        let f = estimate_factors(&ds).unwrap();
        let mut joint: BTreeMap<(u64, u32, u64, u64), f64> = BTreeMap::new();
        for t in ds.transitions() {
            *joint.entry((t.s, t.a, t.r.to_bits(), t.s_next)).or_default() += 1.0 / ds.len() as f64;
        }
        let rec = f.recompose();
        assert_eq!(rec.len(), joint.len());
        for (k, p) in joint {
            assert!((rec[&k] - p).abs() <= 1e-10);
        }
        for row in f.state_dynamics.values() {
            assert!((row.values().sum::<f64>() - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn identical_datasets_show_no_shift() {
        let mdp = build_chain(6, 0.1).unwrap();
        let f = estimate_factors(&sample(&mdp, None, 3000, 4)).unwrap();
        let r = compare(&f, &f, DEFAULT_THRESHOLD).unwrap();
        assert_eq!((r.tv_reward, r.tv_state_dyn, r.tv_policy, r.tv_occupancy), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(r.label, "none");
    }

    #[test]
    fn random_versus_expert_is_a_policy_shift() {
        let mdp = build_gridworld(&GridSpec::grid5()).unwrap();
        let (_, expert) = optimal_policy(&mdp, 0.99);
        let noisy = expert.epsilon_mix(0.2);
        let a = estimate_factors(&sample(&mdp, None, 20_000, 5)).unwrap();
        let b = estimate_factors(&sample(&mdp, Some(&noisy), 20_000, 6)).unwrap();
        let r = compare(&a, &b, DEFAULT_THRESHOLD).unwrap();
        assert!(r.flags.policy && !r.flags.state_dynamics && !r.flags.reward_dynamics, "{r:?}");
        assert_eq!(r.label, "policy");
        let back = compare(&b, &a, DEFAULT_THRESHOLD).unwrap();
        assert_eq!((r.tv_reward, r.tv_state_dyn, r.tv_policy, r.tv_occupancy), (back.tv_reward, back.tv_state_dyn, back.tv_policy, back.tv_occupancy));
    }

    #[test]
    fn reward_scaling_is_a_reward_shift() {
        let mdp = build_gridworld(&GridSpec::grid5()).unwrap();
        let scaled = transform(&mdp, &TransformKind::RewardScale(2.0)).unwrap().mdp;
        let a = estimate_factors(&sample(&mdp, None, 20_000, 7)).unwrap();
        let b = estimate_factors(&sample(&scaled, None, 20_000, 8)).unwrap();
        let r = compare(&a, &b, DEFAULT_THRESHOLD).unwrap();
        assert!(r.flags.reward_dynamics && !r.flags.policy && !r.flags.state_dynamics, "{r:?}");
        assert!(r.tv_policy < DEFAULT_THRESHOLD);
        assert_eq!(r.label, "reward-dynamics");
    }

    #[test]
    fn dynamics_noise_shifts_state_dynamics_and_occupancy() {
        let mdp = build_gridworld(&GridSpec::grid5()).unwrap();
        let noisy = transform(&mdp, &TransformKind::DynamicsNoise(0.5)).unwrap().mdp;
        let (_, expert) = optimal_policy(&mdp, 0.99);
        let pi = expert.epsilon_mix(0.1);
        let a = estimate_factors(&sample(&mdp, Some(&pi), 20_000, 9)).unwrap();
        let b = estimate_factors(&sample(&noisy, Some(&pi), 20_000, 10)).unwrap();
        let r = compare(&a, &b, DEFAULT_THRESHOLD).unwrap();
        assert!(r.flags.state_dynamics && r.flags.occupancy, "{r:?}");
    }

    #[test]
    fn disjoint_supports_are_incomparable() {
        let one = |s: u64| {
            Dataset::from_trajectories(vec![Trajectory::new(0, vec![Transition::new(s, 0, 0.0, s, true)])], manifest(10, 1)).unwrap()
        };
        let (a, b) = (estimate_factors(&one(1)).unwrap(), estimate_factors(&one(2)).unwrap());
        assert_eq!(compare(&a, &b, 0.05), Err(ShiftError::Incomparable));
        assert_eq!(compare(&a, &a, 1.5), Err(ShiftError::Threshold(1.5)));
    }

    #[test]
    fn labels_follow_flags() {
        let f = |r, s, p, o| ShiftFlags { reward_dynamics: r, state_dynamics: s, policy: p, occupancy: o };
        assert_eq!(label(&f(false, false, false, false)), "none");
        assert_eq!(label(&f(false, false, false, true)), "occupancy");
        assert_eq!(label(&f(true, false, true, true)), "reward-dynamics+policy");
        assert_eq!(label(&f(true, true, true, false)), "general");
    }
}
