//! Random finite MDPs and policies for property sweeps.

use rand::Rng;

use crate::mdp::{FiniteMdp, MdpBuilder, PolicyTable};

#[derive(Debug, Clone, Copy)]
pub struct RandomMdpSpec {
    pub max_states: usize,
    pub max_actions: usize,
    pub max_rewards: usize,
    pub deterministic: bool,
    /// Probability that the last state is made terminal.
    pub terminal_prob: f64,
}

impl Default for RandomMdpSpec {
    fn default() -> Self {
        Self { max_states: 6, max_actions: 4, max_rewards: 3, deterministic: false, terminal_prob: 0.5 }
    }
}

/// Normalized positive weights.
pub fn random_simplex<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

pub fn random_mdp<R: Rng + ?Sized>(spec: &RandomMdpSpec, rng: &mut R) -> FiniteMdp {
    let n = rng.random_range(2..=spec.max_states.max(2));
    let na = rng.random_range(1..=spec.max_actions.max(1));
    let nr = rng.random_range(1..=spec.max_rewards.max(1));
    let reward_values: Vec<f64> = (0..nr)
        .map(|i| if i == 0 { 0.0 } else { i as f64 + rng.random_range(0.0..0.5) })
        .collect();
    let has_terminal = rng.random_bool(spec.terminal_prob);
    let n_live = if has_terminal { n - 1 } else { n };

    let mut initial = vec![0.0; n];
    for (s, w) in random_simplex(n_live, rng).into_iter().enumerate() {
        initial[s] = w;
    }
    let mut b = MdpBuilder::new(n, na)
        .gamma(rng.random_range(0.5..0.99))
        .horizon(rng.random_range(3..25))
        .initial(initial);
    if has_terminal {
        b = b.terminal(n - 1);
    }
    for s in 0..n_live {
        for a in 0..na {
            let k = if spec.deterministic { 1 } else { rng.random_range(1..=3) };
            let probs = random_simplex(k, rng);
            for p in probs {
                let next = rng.random_range(0..n);
                let r = reward_values[rng.random_range(0..nr)];
                b.add(s, a, next, r, if spec.deterministic { 1.0 } else { p });
            }
        }
    }
    b.build().expect("generator produces valid mdps")
}

pub fn random_policy<R: Rng + ?Sized>(n_states: usize, n_actions: usize, rng: &mut R) -> PolicyTable {
    let probs: Vec<f64> = (0..n_states).flat_map(|_| random_simplex(n_actions, rng)).collect();
    PolicyTable::new(n_states, n_actions, probs).expect("simplex rows are normalized")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn generator_respects_bounds() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let spec = RandomMdpSpec { deterministic: rng.random_bool(0.5), ..Default::default() };
            let mdp = random_mdp(&spec, &mut rng);
            assert!(mdp.n_states() <= 6 && mdp.n_actions() <= 4 && mdp.rewards().len() <= 3);
            if spec.deterministic {
                assert!(mdp.is_deterministic());
            }
        }
    }
}
