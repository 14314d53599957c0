//! Transitions, trajectories and datasets.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: u64,
    pub a: u32,
    pub r: f64,
    pub s_next: u64,
    pub terminal: bool,
}

impl Transition {
    pub fn new(s: u64, a: u32, r: f64, s_next: u64, terminal: bool) -> Self {
        Self { s, a, r, s_next, terminal }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub episode_id: u64,
    pub transitions: Vec<Transition>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatasetError {
    #[error("dataset is empty")]
    Empty,
    #[error("episode {episode}: step {step} starts at state {got} but previous step ended in {expected}")]
    Stitching { episode: u64, step: usize, expected: u64, got: u64 },
    #[error("episode {episode}: terminal flag on step {step} which is not the last")]
    EarlyTerminal { episode: u64, step: usize },
    #[error("episode {0} has no transitions")]
    EmptyEpisode(u64),
    #[error("manifest declares {declared} transitions, dataset holds {actual}")]
    Count { declared: u64, actual: u64 },
    #[error("episode {episode}, step {step}: {what} {value} outside declared range {bound}")]
    Range { episode: u64, step: usize, what: &'static str, value: u64, bound: u64 },
    #[error("duplicate episode id {0}")]
    DuplicateEpisode(u64),
}

impl Trajectory {
    pub fn new(episode_id: u64, transitions: Vec<Transition>) -> Self {
        Self { episode_id, transitions }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn discounted_return(&self, gamma: f64) -> f64 {
        crate::mdp::episode_return(self.transitions.iter().map(|t| t.r), gamma)
    }

    /// Consecutive steps must chain states, and only the final step may be terminal.
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.transitions.is_empty() {
            return Err(DatasetError::EmptyEpisode(self.episode_id));
        }
        let last = self.transitions.len() - 1;
        for (i, w) in self.transitions.windows(2).enumerate() {
            if w[0].s_next != w[1].s {
                return Err(DatasetError::Stitching {
                    episode: self.episode_id,
                    step: i + 1,
                    expected: w[0].s_next,
                    got: w[1].s,
                });
            }
        }
        if let Some(i) = self.transitions[..last].iter().position(|t| t.terminal) {
            return Err(DatasetError::EarlyTerminal { episode: self.episode_id, step: i });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub env: String,
    pub scheme: String,
    pub seed: u64,
    pub n: u64,
    pub n_states: u64,
    pub n_actions: u32,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub manifest: Manifest,
}

impl Dataset {
    /// Builds a dataset and checks it against its manifest.
    pub fn new(trajectories: Vec<Trajectory>, manifest: Manifest) -> Result<Self, DatasetError> {
        let ds = Self { trajectories, manifest };
        ds.validate()?;
        Ok(ds)
    }

    /// Builds a dataset whose manifest count is filled from the trajectories.
    pub fn from_trajectories(trajectories: Vec<Trajectory>, mut manifest: Manifest) -> Result<Self, DatasetError> {
        manifest.n = trajectories.iter().map(|t| t.len() as u64).sum();
        Self::new(trajectories, manifest)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let mut seen = std::collections::HashSet::new();
        for traj in &self.trajectories {
            if !seen.insert(traj.episode_id) {
                return Err(DatasetError::DuplicateEpisode(traj.episode_id));
            }
            traj.validate()?;
            for (step, t) in traj.transitions.iter().enumerate() {
                let check = |what, value: u64, bound: u64| {
                    if value >= bound {
                        Err(DatasetError::Range { episode: traj.episode_id, step, what, value, bound })
                    } else {
                        Ok(())
                    }
                };
                check("state", t.s, self.manifest.n_states)?;
                check("next state", t.s_next, self.manifest.n_states)?;
                check("action", t.a as u64, self.manifest.n_actions as u64)?;
            }
        }
        let actual = self.len() as u64;
        if actual != self.manifest.n {
            return Err(DatasetError::Count { declared: self.manifest.n, actual });
        }
        Ok(())
    }

    /// Total number of transitions.
    pub fn len(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.trajectories.iter().flat_map(|t| t.transitions.iter())
    }

    /// Mean discounted trajectory return over the `B` trajectories.
    pub fn average_return(&self, gamma: f64) -> Result<f64, DatasetError> {
        average_trajectory_return(self, gamma)
    }
}

/// `(1/B) * sum_b sum_t gamma^t r_{b,t}`.
pub fn average_trajectory_return(ds: &Dataset, gamma: f64) -> Result<f64, DatasetError> {
    if ds.trajectories.is_empty() {
        return Err(DatasetError::Empty);
    }
    let total: f64 = ds.trajectories.iter().map(|t| t.discounted_return(gamma)).sum();
    Ok(total / ds.trajectories.len() as f64)
}
