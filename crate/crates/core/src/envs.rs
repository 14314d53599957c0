//! Built-in finite environments and MDP transformations.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abstraction::AbstractionMaps;
use crate::mdp::{FiniteMdp, MdpBuilder, MdpError, Outcome};

pub mod random;

pub const UP: usize = 0;
pub const DOWN: usize = 1;
pub const LEFT: usize = 2;
pub const RIGHT: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("start and goal coincide")]
    StartIsGoal,
    #[error("cell ({0}, {1}) is outside the grid")]
    OutOfBounds(usize, usize),
    #[error("start or goal is a wall")]
    BlockedEndpoint,
    #[error("goal unreachable from start without crossing lava")]
    Disconnected,
    #[error("probability {0} outside [0, 1]")]
    Probability(f64),
    #[error("chain needs at least 2 states, got {0}")]
    ChainTooShort(usize),
    #[error("duplication factor must be >= 1")]
    DuplicationFactor,
    #[error("not a permutation of 0..{0}")]
    Permutation(usize),
    #[error("unknown environment {0:?}")]
    Unknown(String),
    #[error("grid spec {path}: {message}")]
    SpecFile { path: String, message: String },
    #[error(transparent)]
    Mdp(#[from] MdpError),
}

fn default_horizon() -> usize {
    50
}

fn default_gamma() -> f64 {
    0.99
}

/// Cell coordinates are `[x, y]` with `y = 0` the top row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub walls: Vec<[usize; 2]>,
    #[serde(default)]
    pub lava: Vec<[usize; 2]>,
    pub start: [usize; 2],
    pub goal: [usize; 2],
    pub step_reward: f64,
    pub goal_reward: f64,
    #[serde(default)]
    pub lava_reward: f64,
    #[serde(default)]
    pub slip_prob: f64,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

impl GridSpec {
    /// The default 5x5 layout: start top-left, goal bottom-right and two
    /// interior wall segments.
    pub fn grid5() -> Self {
        Self {
            width: 5,
            height: 5,
            walls: vec![[1, 1], [1, 2], [1, 3], [3, 1], [3, 2], [3, 3]],
            lava: vec![],
            start: [0, 0],
            goal: [4, 4],
            step_reward: -1.0,
            goal_reward: 1.0,
            lava_reward: 0.0,
            slip_prob: 0.0,
            horizon: 50,
            gamma: 0.99,
        }
    }

    /// A 7x5 room split by a lava column with a single gap.
    pub fn lava7() -> Self {
        Self {
            width: 7,
            height: 5,
            walls: vec![],
            lava: vec![[3, 0], [3, 1], [3, 3], [3, 4]],
            start: [0, 0],
            goal: [6, 4],
            step_reward: -1.0,
            goal_reward: 1.0,
            lava_reward: -20.0,
            slip_prob: 0.0,
            horizon: 60,
            gamma: 0.99,
        }
    }

    fn blocked(&self, c: [usize; 2]) -> bool {
        self.walls.contains(&c)
    }

    fn in_bounds(&self, c: [usize; 2]) -> bool {
        c[0] < self.width && c[1] < self.height
    }

    /// Non-wall cells in row-major order; the position is the state id.
    pub fn cells(&self) -> Vec<[usize; 2]> {
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| [x, y]))
            .filter(|&c| !self.blocked(c))
            .collect()
    }

    pub fn state_of(&self, cell: [usize; 2]) -> Option<usize> {
        self.cells().iter().position(|&c| c == cell)
    }

    /// Destination of a move; walls and borders leave the agent in place.
    pub fn step_cell(&self, c: [usize; 2], action: usize) -> [usize; 2] {
        let [x, y] = c;
        let to = match action {
            UP if y > 0 => [x, y - 1],
            DOWN => [x, y + 1],
            LEFT if x > 0 => [x - 1, y],
            RIGHT => [x + 1, y],
            _ => c,
        };
        if self.in_bounds(to) && !self.blocked(to) {
            to
        } else {
            c
        }
    }

    fn validate(&self) -> Result<(), EnvError> {
        for &c in self.walls.iter().chain(&self.lava).chain([&self.start, &self.goal]) {
            if !self.in_bounds(c) {
                return Err(EnvError::OutOfBounds(c[0], c[1]));
            }
        }
        if self.start == self.goal {
            return Err(EnvError::StartIsGoal);
        }
        if self.blocked(self.start) || self.blocked(self.goal) || self.lava.contains(&self.start) {
            return Err(EnvError::BlockedEndpoint);
        }
        if !(0.0..=1.0).contains(&self.slip_prob) {
            return Err(EnvError::Probability(self.slip_prob));
        }
        let mut seen = vec![self.start];
        let mut queue = VecDeque::from([self.start]);
        while let Some(c) = queue.pop_front() {
            if c == self.goal {
                return Ok(());
            }
            for a in [UP, DOWN, LEFT, RIGHT] {
                let n = self.step_cell(c, a);
                if !seen.contains(&n) && !self.lava.contains(&n) {
                    seen.push(n);
                    queue.push_back(n);
                }
            }
        }
        Err(EnvError::Disconnected)
    }
}

/// Four actions (up, down, left, right). Goal and lava cells are terminal.
/// With `slip_prob > 0` the chosen action is replaced by a uniformly random
/// one with that probability.
pub fn build_gridworld(spec: &GridSpec) -> Result<FiniteMdp, EnvError> {
    spec.validate()?;
    let cells = spec.cells();
    let index = |c: [usize; 2]| cells.iter().position(|&x| x == c).expect("non-wall cell");
    let mut b = MdpBuilder::new(cells.len(), 4)
        .gamma(spec.gamma)
        .horizon(spec.horizon)
        .start(index(spec.start));
    for (s, &c) in cells.iter().enumerate() {
        if c == spec.goal || spec.lava.contains(&c) {
            b = b.terminal(s);
        }
    }
    for (s, &c) in cells.iter().enumerate() {
        if c == spec.goal || spec.lava.contains(&c) {
            continue;
        }
        for a in 0..4 {
            for actual in 0..4 {
                let p = if actual == a { 1.0 - spec.slip_prob } else { 0.0 } + spec.slip_prob / 4.0;
                if p == 0.0 {
                    continue;
                }
                let to = spec.step_cell(c, actual);
                let r = if to == spec.goal {
                    spec.goal_reward
                } else if spec.lava.contains(&to) {
                    spec.lava_reward
                } else {
                    spec.step_reward
                };
                b.add(s, a, index(to), r, p);
            }
        }
    }
    Ok(b.build()?)
}

/// Left/right chain starting at state 0 with a terminal goal at `n - 1`
/// paying reward 1. With probability `noise` the agent moves the other way.
pub fn build_chain(n: usize, noise: f64) -> Result<FiniteMdp, EnvError> {
    if n < 2 {
        return Err(EnvError::ChainTooShort(n));
    }
    if !(0.0..=1.0).contains(&noise) {
        return Err(EnvError::Probability(noise));
    }
    let goal = n - 1;
    let mut b = MdpBuilder::new(n, 2).gamma(0.99).horizon(4 * n).start(0).terminal(goal);
    let reward = |to: usize| if to == goal { 1.0 } else { 0.0 };
    for s in 0..goal {
        let left = s.saturating_sub(1);
        let right = s + 1;
        for (a, (intended, other)) in [(left, right), (right, left)].into_iter().enumerate() {
            b.add(s, a, intended, reward(intended), 1.0 - noise);
            if noise > 0.0 {
                b.add(s, a, other, reward(other), noise);
            }
        }
    }
    Ok(b.build()?)
}

/// Named environments addressable from the command line.
#[derive(Debug, Clone, PartialEq)]
pub enum EnvBuilder {
    Grid(GridSpec),
    Chain { n: usize, noise: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvCatalogEntry {
    pub name: String,
    pub builder: EnvBuilder,
    pub notes: &'static str,
}

impl EnvCatalogEntry {
    pub fn build(&self) -> Result<FiniteMdp, EnvError> {
        match &self.builder {
            EnvBuilder::Grid(spec) => build_gridworld(spec),
            EnvBuilder::Chain { n, noise } => build_chain(*n, *noise),
        }
    }
}

pub fn catalog() -> Vec<EnvCatalogEntry> {
    let mut slippery = GridSpec::grid5();
    slippery.slip_prob = 0.1;
    vec![
        EnvCatalogEntry {
            name: "grid5".into(),
            builder: EnvBuilder::Grid(GridSpec::grid5()),
            notes: "5x5 deterministic gridworld with two interior walls",
        },
        EnvCatalogEntry {
            name: "grid5-slip".into(),
            builder: EnvBuilder::Grid(slippery),
            notes: "grid5 with sticky-action probability 0.1",
        },
        EnvCatalogEntry {
            name: "lava7".into(),
            builder: EnvBuilder::Grid(GridSpec::lava7()),
            notes: "7x5 room crossed by lava with one gap",
        },
        EnvCatalogEntry {
            name: "chain8".into(),
            builder: EnvBuilder::Chain { n: 8, noise: 0.0 },
            notes: "8-state deterministic chain, reward 1 at the right end",
        },
    ]
}

/// Resolves a catalog name. `chainN` accepts any `N >= 2`, and a path
/// ending in `.json` is read as a [`GridSpec`].
pub fn lookup(name: &str) -> Result<EnvCatalogEntry, EnvError> {
    if name.ends_with(".json") {
        let err = |message: String| EnvError::SpecFile { path: name.into(), message };
        let text = std::fs::read_to_string(name).map_err(|e| err(e.to_string()))?;
        let spec: GridSpec = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        return Ok(EnvCatalogEntry { name: name.into(), builder: EnvBuilder::Grid(spec), notes: "grid loaded from file" });
    }
    if let Some(entry) = catalog().into_iter().find(|e| e.name == name) {
        return Ok(entry);
    }
    if let Some(n) = name.strip_prefix("chain").and_then(|n| n.parse::<usize>().ok()) {
        if n < 2 {
            return Err(EnvError::ChainTooShort(n));
        }
        return Ok(EnvCatalogEntry {
            name: name.into(),
            builder: EnvBuilder::Chain { n, noise: 0.0 },
            notes: "deterministic chain",
        });
    }
    Err(EnvError::Unknown(name.into()))
}

pub fn build_env(name: &str) -> Result<FiniteMdp, EnvError> {
    lookup(name)?.build()
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransformKind {
    /// `perm[old] = new`.
    PermuteStates(Vec<usize>),
    /// `perm[old] = new`, applied in every state.
    PermuteActions(Vec<usize>),
    /// Splits the MDP into `k` identical layers; copy `j` of a state only
    /// transitions into copy `j` of its successors.
    DuplicateStates(usize),
    RewardScale(f64),
    /// Mixes each dynamics row with the action-averaged row of its state.
    DynamicsNoise(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transformed {
    pub mdp: FiniteMdp,
    /// Maps from the transformed MDP onto the original one, for the
    /// structure-preserving kinds.
    pub maps: Option<AbstractionMaps>,
}

fn check_perm(perm: &[usize], n: usize) -> Result<Vec<usize>, EnvError> {
    let mut inv = vec![usize::MAX; n];
    if perm.len() != n {
        return Err(EnvError::Permutation(n));
    }
    for (old, &new) in perm.iter().enumerate() {
        if new >= n || inv[new] != usize::MAX {
            return Err(EnvError::Permutation(n));
        }
        inv[new] = old;
    }
    Ok(inv)
}

pub fn transform(mdp: &FiniteMdp, kind: &TransformKind) -> Result<Transformed, EnvError> {
    let (n, na) = (mdp.n_states(), mdp.n_actions());
    match kind {
        TransformKind::PermuteStates(perm) => {
            let inv = check_perm(perm, n)?;
            let mut rows = Vec::with_capacity(n * na);
            for &old in &inv {
                for a in 0..na {
                    rows.push(
                        mdp.outcomes(old, a)
                            .iter()
                            .map(|o| Outcome { next: perm[o.next], ..*o })
                            .collect(),
                    );
                }
            }
            let initial = inv.iter().map(|&old| mdp.initial()[old]).collect();
            let terminal = inv.iter().map(|&old| mdp.is_terminal(old)).collect();
            let out = FiniteMdp::new(n, na, mdp.rewards().to_vec(), rows, mdp.gamma(), initial, terminal, mdp.horizon())?;
            let maps = AbstractionMaps { phi: inv, psi: vec![(0..na).collect(); n] };
            Ok(Transformed { mdp: out, maps: Some(maps) })
        }
        TransformKind::PermuteActions(perm) => {
            let inv = check_perm(perm, na)?;
            let mut rows = Vec::with_capacity(n * na);
            for s in 0..n {
                for &old in &inv {
                    rows.push(mdp.outcomes(s, old).to_vec());
                }
            }
            let out = FiniteMdp::new(
                n,
                na,
                mdp.rewards().to_vec(),
                rows,
                mdp.gamma(),
                mdp.initial().to_vec(),
                mdp.terminal().to_vec(),
                mdp.horizon(),
            )?;
            let maps = AbstractionMaps { phi: (0..n).collect(), psi: vec![inv; n] };
            Ok(Transformed { mdp: out, maps: Some(maps) })
        }
        TransformKind::DuplicateStates(k) => {
            let k = *k;
            if k < 1 {
                return Err(EnvError::DuplicationFactor);
            }
            let mut rows = Vec::with_capacity(n * k * na);
            let mut initial = Vec::with_capacity(n * k);
            let mut terminal = Vec::with_capacity(n * k);
            let mut phi = Vec::with_capacity(n * k);
            for s in 0..n {
                for j in 0..k {
                    for a in 0..na {
                        rows.push(
                            mdp.outcomes(s, a)
                                .iter()
                                .map(|o| Outcome { next: o.next * k + j, ..*o })
                                .collect(),
                        );
                    }
                    initial.push(mdp.initial()[s] / k as f64);
                    terminal.push(mdp.is_terminal(s));
                    phi.push(s);
                }
            }
            let out = FiniteMdp::new(n * k, na, mdp.rewards().to_vec(), rows, mdp.gamma(), initial, terminal, mdp.horizon())?;
            let maps = AbstractionMaps { phi, psi: vec![(0..na).collect(); n * k] };
            Ok(Transformed { mdp: out, maps: Some(maps) })
        }
        TransformKind::RewardScale(c) => {
            let mut b = MdpBuilder::new(n, na)
                .gamma(mdp.gamma())
                .horizon(mdp.horizon())
                .initial(mdp.initial().to_vec());
            for s in 0..n {
                if mdp.is_terminal(s) {
                    b = b.terminal(s);
                    continue;
                }
                for a in 0..na {
                    for o in mdp.outcomes(s, a) {
                        b.add(s, a, o.next, c * mdp.rewards()[o.reward], o.prob);
                    }
                }
            }
            Ok(Transformed { mdp: b.build()?, maps: None })
        }
        TransformKind::DynamicsNoise(eps) => {
            let eps = *eps;
            if !(0.0..=1.0).contains(&eps) {
                return Err(EnvError::Probability(eps));
            }
            let mut rows = Vec::with_capacity(n * na);
            for s in 0..n {
                for a in 0..na {
                    let mut row: Vec<Outcome> = mdp
                        .outcomes(s, a)
                        .iter()
                        .map(|o| Outcome { prob: (1.0 - eps) * o.prob, ..*o })
                        .collect();
                    for b in 0..na {
                        row.extend(
                            mdp.outcomes(s, b)
                                .iter()
                                .map(|o| Outcome { prob: eps * o.prob / na as f64, ..*o }),
                        );
                    }
                    rows.push(row);
                }
            }
            let out = FiniteMdp::new(
                n,
                na,
                mdp.rewards().to_vec(),
                rows,
                mdp.gamma(),
                mdp.initial().to_vec(),
                mdp.terminal().to_vec(),
                mdp.horizon(),
            )?;
            Ok(Transformed { mdp: out, maps: None })
        }
    }
}

/// Uniformly random permutation of `0..n`.
pub fn random_permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}
