//! Pearson and Spearman correlation with two-sided p-values.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

/// Largest sample size whose permutation distribution is enumerated fully.
pub const EXACT_PERMUTATION_MAX: usize = 9;
/// Largest sample size that still uses a permutation test.
pub const PERMUTATION_MAX: usize = 20;
pub const MONTE_CARLO_DRAWS: usize = 20_000;
const PERMUTATION_SEED: u64 = 0x5eed_c0de;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PValueMethod {
    ExactPermutation,
    MonteCarloPermutation,
    StudentT,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub x: String,
    pub y: String,
    pub n: usize,
    pub pearson: Option<f64>,
    pub pearson_p: Option<f64>,
    pub spearman: Option<f64>,
    pub spearman_p: Option<f64>,
    pub method: Option<PValueMethod>,
    /// Why the coefficients are missing, when they are.
    pub reason: Option<String>,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "columns must have equal length");
    let n = x.len();
    if n < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Ranks starting at 1 with ties sharing their average rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&ranks(x), &ranks(y))
}

fn heap_permutations(y: &mut [f64], mut visit: impl FnMut(&[f64])) {
    let n = y.len();
    let mut c = vec![0usize; n];
    visit(y);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                y.swap(0, i);
            } else {
                y.swap(c[i], i);
            }
            visit(y);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

/// Two-sided permutation p-value of the Pearson coefficient of `x` and `y`.
fn permutation_p(x: &[f64], y: &[f64], observed: f64) -> (f64, PValueMethod) {
    let cutoff = observed.abs() - 1e-12;
    let stat = |yy: &[f64]| pearson(x, yy).map_or(0.0, f64::abs);
    if x.len() <= EXACT_PERMUTATION_MAX {
        let (mut hits, mut total) = (0u64, 0u64);
        heap_permutations(&mut y.to_vec(), |yy| {
            total += 1;
            if stat(yy) >= cutoff {
                hits += 1;
            }
        });
        (hits as f64 / total as f64, PValueMethod::ExactPermutation)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(PERMUTATION_SEED);
        let mut yy = y.to_vec();
        let mut hits = 0usize;
        for _ in 0..MONTE_CARLO_DRAWS {
            yy.shuffle(&mut rng);
            if stat(&yy) >= cutoff {
                hits += 1;
            }
        }
        ((hits + 1) as f64 / (MONTE_CARLO_DRAWS + 1) as f64, PValueMethod::MonteCarloPermutation)
    }
}

fn t_p(r: f64, n: usize) -> f64 {
    if r.abs() >= 1.0 {
        return 0.0;
    }
    let df = (n - 2) as f64;
    let t = r * (df / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
}

/// Both coefficients with p-values: permutation tests up to
/// [`PERMUTATION_MAX`] samples, the Student-t approximation beyond.
pub fn correlate(x_name: &str, x: &[f64], y_name: &str, y: &[f64]) -> Correlation {
    let n = x.len();
    let mut out = Correlation {
        x: x_name.to_string(),
        y: y_name.to_string(),
        n,
        pearson: None,
        pearson_p: None,
        spearman: None,
        spearman_p: None,
        method: None,
        reason: None,
    };
    if n != y.len() {
        out.reason = Some(format!("column lengths differ ({} vs {})", n, y.len()));
        return out;
    }
    if n < 3 {
        out.reason = Some(format!("need at least 3 samples, got {n}"));
        return out;
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        out.reason = Some("non-finite value".into());
        return out;
    }
    let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
    if constant(x) || constant(y) {
        out.reason = Some(format!("constant column {}", if constant(x) { x_name } else { y_name }));
        return out;
    }
    let (r, rho) = (pearson(x, y).expect("non-constant"), spearman(x, y).expect("non-constant"));
    out.pearson = Some(r);
    out.spearman = Some(rho);
    if n <= PERMUTATION_MAX {
        let (p, method) = permutation_p(x, y, r);
        let (rx, ry) = (ranks(x), ranks(y));
        let (ps, _) = permutation_p(&rx, &ry, rho);
        out.pearson_p = Some(p);
        out.spearman_p = Some(ps);
        out.method = Some(method);
    } else {
        out.pearson_p = Some(t_p(r, n));
        out.spearman_p = Some(t_p(rho, n));
        out.method = Some(PValueMethod::StudentT);
    }
    out
}

pub fn correlations_to_csv(rows: &[Correlation]) -> String {
    #[derive(Serialize)]
    struct Row<'a> {
        x: &'a str,
        y: &'a str,
        n: usize,
        pearson: Option<f64>,
        pearson_p: Option<f64>,
        spearman: Option<f64>,
        spearman_p: Option<f64>,
        method: Option<PValueMethod>,
        reason: Option<&'a str>,
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(Row {
            x: &r.x,
            y: &r.y,
            n: r.n,
            pearson: r.pearson,
            pearson_p: r.pearson_p,
            spearman: r.spearman,
            spearman_p: r.spearman_p,
            method: r.method,
            reason: r.reason.as_deref(),
        })
        .expect("correlation rows serialize");
    }
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8")
}
