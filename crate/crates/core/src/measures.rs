//! Dataset and policy measures: exact transition and occupancy entropies,
//! trajectory quality, state-action coverage, and the naive entropy
//! estimator with its bias terms.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetError};
use crate::mdp::{occupancy_exact, FiniteMdp, MdpError, OccupancyTable, PolicyTable};
use crate::sketch::{exact_unique_count, CardinalitySketch, SketchError, DEFAULT_SEED};

/// Allowed gap between the direct and factorized transition entropy.
pub const FACTORIZATION_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Sketch(#[from] SketchError),
    #[error("direct entropy {direct} and factorized entropy {factorized} disagree")]
    FactorizationMismatch { direct: f64, factorized: f64 },
    #[error("occupancy table sums to {0}, not 1")]
    Unnormalized(f64),
    #[error("reference returns are degenerate: min {min} is not below expert {expert}")]
    DegenerateReferences { min: f64, expert: f64 },
    #[error("reference count is zero")]
    ZeroReference,
    #[error("log-coverage needs counts of at least 2, got {got} and {reference}")]
    CountTooSmall { got: u64, reference: u64 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("reference dataset has zero naive entropy")]
    ZeroReferenceEntropy,
    #[error("invalid probability vector: {0}")]
    InvalidProbabilities(String),
}

impl MeasureError {
    /// Numerical failures as opposed to bad inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, MeasureError::FactorizationMismatch { .. })
    }
}

fn entropy_of(probs: impl IntoIterator<Item = f64>) -> f64 {
    -probs.into_iter().filter(|&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Occupancy-weighted entropy of the dynamics plus the occupancy entropy.
pub fn transition_entropy_factorized(mdp: &FiniteMdp, rho: &OccupancyTable) -> f64 {
    let mut weighted = 0.0;
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let w = rho.get(s, a);
            if w > 0.0 {
                weighted += w * entropy_of(mdp.outcomes(s, a).iter().map(|o| o.prob));
            }
        }
    }
    weighted + occupancy_entropy_unchecked(rho)
}

/// Entropy of the joint `rho(s, a) p(s', r | s, a)` enumerated entry by entry.
pub fn transition_entropy_direct(mdp: &FiniteMdp, rho: &OccupancyTable) -> f64 {
    let mut joint: BTreeMap<(usize, usize, usize, usize), f64> = BTreeMap::new();
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let w = rho.get(s, a);
            if w == 0.0 {
                continue;
            }
            for o in mdp.outcomes(s, a) {
                *joint.entry((s, a, o.reward, o.next)).or_default() += w * o.prob;
            }
        }
    }
    entropy_of(joint.into_values())
}

/// Transition entropy of the policy's occupancy, checked against the
/// factorized form. Returns the direct value.
pub fn transition_entropy_exact(mdp: &FiniteMdp, policy: &PolicyTable) -> Result<f64, MeasureError> {
    let rho = occupancy_exact(mdp, policy)?;
    let direct = transition_entropy_direct(mdp, &rho);
    let factorized = transition_entropy_factorized(mdp, &rho);
    if (direct - factorized).abs() > FACTORIZATION_TOL {
        return Err(MeasureError::FactorizationMismatch { direct, factorized });
    }
    Ok(direct)
}

fn occupancy_entropy_unchecked(rho: &OccupancyTable) -> f64 {
    entropy_of(rho.values().iter().copied())
}

pub fn occupancy_entropy(rho: &OccupancyTable) -> Result<f64, MeasureError> {
    let total: f64 = rho.values().iter().sum();
    if (total - 1.0).abs() > OccupancyTable::SUM_TOL || rho.values().iter().any(|&p| p < 0.0) {
        return Err(MeasureError::Unnormalized(total));
    }
    Ok(occupancy_entropy_unchecked(rho))
}

/// Normalizes an average return between the minimal and expert references.
pub fn tq_from_return(avg_return: f64, d_min_return: f64, d_expert_return: f64) -> Result<f64, MeasureError> {
    if !(d_expert_return > d_min_return) {
        return Err(MeasureError::DegenerateReferences { min: d_min_return, expert: d_expert_return });
    }
    Ok((avg_return - d_min_return) / (d_expert_return - d_min_return))
}

pub fn tq(ds: &Dataset, d_min_return: f64, d_expert_return: f64, gamma: f64) -> Result<f64, MeasureError> {
    tq_from_return(ds.average_return(gamma)?, d_min_return, d_expert_return)
}

pub fn saco(u_ds: u64, u_ref: u64) -> Result<f64, MeasureError> {
    if u_ref == 0 {
        return Err(MeasureError::ZeroReference);
    }
    Ok(u_ds as f64 / u_ref as f64)
}

pub fn lsaco(u_ds: u64, u_ref: u64) -> Result<f64, MeasureError> {
    if u_ds < 2 || u_ref < 2 {
        return Err(MeasureError::CountTooSmall { got: u_ds, reference: u_ref });
    }
    Ok((u_ds as f64).ln() / (u_ref as f64).ln())
}

/// Plug-in entropy of the empirical state-action distribution.
pub fn naive_entropy(ds: &Dataset) -> Result<f64, MeasureError> {
    // ordered so the floating-point sum is reproducible
    let mut counts: BTreeMap<(u64, u32), u64> = BTreeMap::new();
    let mut n = 0u64;
    for t in ds.transitions() {
        *counts.entry((t.s, t.a)).or_default() += 1;
        n += 1;
    }
    if n == 0 {
        return Err(MeasureError::EmptyDataset);
    }
    let n = n as f64;
    Ok(entropy_of(counts.values().map(|&c| c as f64 / n)))
}

pub fn naive_entropy_ratio(ds: &Dataset, d_ref: &Dataset) -> Result<f64, MeasureError> {
    let h_ref = naive_entropy(d_ref)?;
    if h_ref == 0.0 {
        return Err(MeasureError::ZeroReferenceEntropy);
    }
    Ok(naive_entropy(ds)? / h_ref)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasTerms {
    pub z: f64,
    pub regime_k_threshold: f64,
    pub less_biased_flag: bool,
}

/// Leading terms of the naive estimator's bias for `k` outcomes with
/// probabilities `p` and `n` samples; the cubic remainder is dropped.
pub fn naive_bias(k: usize, n: usize, p: &[f64]) -> Result<BiasTerms, MeasureError> {
    if n < 2 {
        return Err(MeasureError::InvalidProbabilities(format!("need at least 2 samples, got {n}")));
    }
    if p.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(MeasureError::InvalidProbabilities("entries must lie in [0, 1]".into()));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-10 {
        return Err(MeasureError::InvalidProbabilities(format!("sums to {total}")));
    }
    let positive = p.iter().filter(|&&x| x > 0.0).count();
    if positive != k {
        return Err(MeasureError::InvalidProbabilities(format!("{positive} positive entries, expected {k}")));
    }
    let nf = n as f64;
    let inv_sum: f64 = p.iter().filter(|&&x| x > 0.0).map(|x| 1.0 / x).sum();
    let z = (k as f64 - 1.0) / (2.0 * nf) + (inv_sum - 1.0) / (12.0 * nf * nf);
    let regime_k_threshold = 2.0 * nf * nf.ln() + 1.0;
    Ok(BiasTerms { z, regime_k_threshold, less_biased_flag: k as f64 >= regime_k_threshold })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Counter {
    Exact,
    /// HyperLogLog with the given precision and the default hash seed.
    Hll(u8),
}

impl Counter {
    pub fn count(&self, ds: &Dataset) -> Result<u64, MeasureError> {
        match *self {
            Counter::Exact => Ok(exact_unique_count(ds)),
            Counter::Hll(p) => {
                let mut sk = CardinalitySketch::with_seed(p, DEFAULT_SEED)?;
                sk.insert_dataset(ds);
                Ok(sk.count())
            }
        }
    }
}

/// Names recorded alongside a report.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ReferenceNames {
    pub ref_dataset: String,
    pub ref_min: String,
    pub ref_expert: String,
}

#[derive(Debug, Clone)]
pub struct References<'a> {
    pub d_ref: &'a Dataset,
    pub d_min_return: f64,
    pub d_expert_return: f64,
    /// Discount for trajectory returns; 1 for undiscounted reporting.
    pub gamma: f64,
    pub names: ReferenceNames,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureReport {
    pub tq: f64,
    pub saco: f64,
    pub lsaco: f64,
    pub naive_entropy_ratio: f64,
    pub unique_sa: u64,
    pub avg_return: f64,
    pub n_transitions: u64,
    #[serde(flatten)]
    pub references: ReferenceNames,
}

impl MeasureReport {
    pub fn to_csv(&self, with_header: bool) -> String {
        let mut w = csv::WriterBuilder::new().has_headers(with_header).from_writer(Vec::new());
        w.serialize(CsvRow::from(self)).expect("report rows serialize");
        String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv output is utf-8")
    }
}

// csv cannot serialize flattened structs, so the row is spelled out.
#[derive(Serialize)]
struct CsvRow<'a> {
    tq: f64,
    saco: f64,
    lsaco: f64,
    naive_entropy_ratio: f64,
    unique_sa: u64,
    avg_return: f64,
    n_transitions: u64,
    ref_dataset: &'a str,
    ref_min: &'a str,
    ref_expert: &'a str,
}

impl<'a> From<&'a MeasureReport> for CsvRow<'a> {
    fn from(r: &'a MeasureReport) -> Self {
        Self {
            tq: r.tq,
            saco: r.saco,
            lsaco: r.lsaco,
            naive_entropy_ratio: r.naive_entropy_ratio,
            unique_sa: r.unique_sa,
            avg_return: r.avg_return,
            n_transitions: r.n_transitions,
            ref_dataset: &r.references.ref_dataset,
            ref_min: &r.references.ref_min,
            ref_expert: &r.references.ref_expert,
        }
    }
}

pub fn characterize(ds: &Dataset, refs: &References<'_>, counter: Counter) -> Result<MeasureReport, MeasureError> {
    if ds.is_empty() {
        return Err(MeasureError::EmptyDataset);
    }
    let (unique_sa, u_ref) = rayon::join(|| counter.count(ds), || counter.count(refs.d_ref));
    let (unique_sa, u_ref) = (unique_sa?, u_ref?);
    let avg_return = ds.average_return(refs.gamma)?;
    Ok(MeasureReport {
        tq: tq_from_return(avg_return, refs.d_min_return, refs.d_expert_return)?,
        saco: saco(unique_sa, u_ref)?,
        lsaco: lsaco(unique_sa, u_ref)?,
        naive_entropy_ratio: naive_entropy_ratio(ds, refs.d_ref)?,
        unique_sa,
        avg_return,
        n_transitions: ds.len() as u64,
        references: refs.names.clone(),
    })
}
