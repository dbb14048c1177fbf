//! Spearman ceiling of an optimal binary classifier.
//!
//! Sort `n` scored pairs by gold similarity (descending, no ties) and let a
//! classifier label the first `k` positive and the rest negative. With
//! mean-rank substitution the predicted ranks are `(k+1)/2` for the positives
//! and `(k+n+1)/2` for the negatives, so
//!
//! ```text
//! Σd² = n(n+1)(2n+1)/6 + n/4 · (k² - nk - (n+1)²)
//! ```
//!
//! which is minimised at `k = n/2`, giving `max ρ = (7n² - 4) / (8(n² - 1))`,
//! a sequence that decreases towards 7/8.
//!
//! All closed forms are evaluated in exact rational arithmetic and converted
//! to `f64` only at the boundary.

use std::collections::BTreeSet;

use num_rational::Ratio;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correlation::{compute_ranks, spearman_rank_difference};
use crate::error::{Error, Result};

pub type Rational = Ratio<i128>;

/// Largest n accepted by the exact closed forms. Keeps every intermediate
/// product comfortably inside i128.
pub const MAX_N: u64 = 1 << 32;

/// The limit of the binary-classifier ceiling as n grows.
pub const CEILING_LIMIT: f64 = 0.875;

/// Sweep entries above this size skip the brute-force cross-check.
pub const BRUTE_FORCE_CHECK_MAX_N: u64 = 1000;

/// One evaluation of the optimal-binary-classifier analysis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundAnalysis {
    pub n: u64,
    pub k: u64,
    pub sum_d_sq: f64,
    pub rho: f64,
}

impl BoundAnalysis {
    pub fn new(n: u64, k: u64) -> Result<Self> {
        let d2 = sum_d_sq_exact(n, k)?;
        Ok(Self {
            n,
            k,
            sum_d_sq: to_f64(d2),
            rho: to_f64(rho_from_sum_d_sq(n, d2)),
        })
    }
}

fn check_n(n: u64) -> Result<()> {
    if n < 2 {
        return Err(Error::invalid(format!("n must be at least 2, got {n}")));
    }
    if n > MAX_N {
        return Err(Error::invalid(format!("n = {n} exceeds supported maximum {MAX_N}")));
    }
    Ok(())
}

fn check_nk(n: u64, k: u64) -> Result<()> {
    check_n(n)?;
    if k < 1 || k > n - 1 {
        return Err(Error::invalid(format!("k must lie in [1, {}], got {k}", n - 1)));
    }
    Ok(())
}

pub fn to_f64(r: Rational) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

fn rho_from_sum_d_sq(n: u64, d2: Rational) -> Rational {
    let n = n as i128;
    Rational::from_integer(1) - d2 * 6 / (n * (n * n - 1))
}

/// Exact `n(n+1)(2n+1)/6 + n/4 · (k² - nk - (n+1)²)`.
pub fn sum_d_sq_exact(n: u64, k: u64) -> Result<Rational> {
    check_nk(n, k)?;
    let (n, k) = (n as i128, k as i128);
    let squares = Rational::new(n * (n + 1) * (2 * n + 1), 6);
    let shift = Rational::new(n * (k * k - n * k - (n + 1) * (n + 1)), 4);
    Ok(squares + shift)
}

/// Closed-form Σd² for threshold `k`, as f64.
pub fn sum_d_sq_closed(n: u64, k: u64) -> Result<f64> {
    sum_d_sq_exact(n, k).map(to_f64)
}

/// Σd² obtained by materialising the classifier output and ranking it.
///
/// Gold scores are strictly decreasing, predictions are `k` ones followed by
/// `n - k` zeros, and both are ranked in descending order through
/// [`compute_ranks`]. Mean ranks are half-integers, so the result is exact.
pub fn sum_d_sq_bruteforce_exact(n: u64, k: u64) -> Result<Rational> {
    check_nk(n, k)?;
    let len = n as usize;
    // negate so the ascending ranker yields descending ranks
    let gold: Vec<f64> = (0..len).map(|i| -((len - i) as f64)).collect();
    let predictions: Vec<f64> = (0..len)
        .map(|i| if (i as u64) < k { -1.0 } else { -0.0 })
        .collect();
    let gold_ranks = compute_ranks(&gold)?;
    let pred_ranks = compute_ranks(&predictions)?;

    let mut quarter_units: i128 = 0;
    for (&p, &g) in pred_ranks.ranks().iter().zip(gold_ranks.ranks()) {
        let twice = 2.0 * (p - g);
        debug_assert_eq!(twice.fract(), 0.0);
        let twice = twice as i128;
        quarter_units += twice * twice;
    }
    Ok(Rational::new(quarter_units, 4))
}

pub fn sum_d_sq_bruteforce(n: u64, k: u64) -> Result<f64> {
    sum_d_sq_bruteforce_exact(n, k).map(to_f64)
}

/// The intermediate form `Σ_{i=1..n} (i - (k+1)/2)² - n²(n-k)/4` from the
/// step-by-step rearrangement of Σd², summed term by term.
pub fn sum_d_sq_intermediate(n: u64, k: u64) -> Result<Rational> {
    check_nk(n, k)?;
    let (n, k) = (n as i128, k as i128);
    let centre = Rational::new(k + 1, 2);
    let squares: Rational = (1..=n)
        .map(|i| {
            let d = Rational::from_integer(i) - centre;
            d * d
        })
        .fold(Rational::from_integer(0), |acc, t| acc + t);
    Ok(squares - Rational::new(n * n * (n - k), 4))
}

/// All admissible `k` minimising `k² - nk`.
pub fn optimal_k(n: u64) -> Result<BTreeSet<u64>> {
    check_n(n)?;
    Ok(if n % 2 == 0 {
        BTreeSet::from([n / 2])
    } else {
        BTreeSet::from([(n - 1) / 2, (n + 1) / 2])
    })
}

/// Exact maximum Spearman (rank-difference form) of a binary classifier
/// over `n` tie-free gold scores.
///
/// For even `n` this is `(7n² - 4) / (8(n² - 1))`; for odd `n` it is the
/// rank-difference ρ at the optimal thresholds, which works out to exactly
/// 7/8.
pub fn max_spearman_exact(n: u64) -> Result<Rational> {
    check_n(n)?;
    if n % 2 == 0 {
        let m = n as i128;
        return Ok(Rational::new(7 * m * m - 4, 8 * (m * m - 1)));
    }
    let mut best: Option<Rational> = None;
    for k in optimal_k(n)? {
        let rho = rho_from_sum_d_sq(n, sum_d_sq_exact(n, k)?);
        best = Some(best.map_or(rho, |b| b.max(rho)));
    }
    Ok(best.expect("optimal_k is never empty"))
}

pub fn max_spearman(n: u64) -> Result<f64> {
    max_spearman_exact(n).map(to_f64)
}

/// Minimum Σd² over admissible thresholds.
pub fn min_sum_d_sq_exact(n: u64) -> Result<Rational> {
    let k = *optimal_k(n)?.iter().next().expect("non-empty");
    sum_d_sq_exact(n, k)
}

/// Spearman (rank-difference form, mean ranks) between a two-level
/// prediction vector and tie-free gold scores.
pub fn binary_predictor_spearman(predictions: &[f64], gold: &[f64]) -> Result<f64> {
    if predictions.len() != gold.len() {
        return Err(Error::invalid(format!(
            "length mismatch: {} predictions, {} gold scores",
            predictions.len(),
            gold.len()
        )));
    }
    if predictions.len() < 2 {
        return Err(Error::invalid("need at least 2 observations"));
    }
    let mut levels: Vec<f64> = Vec::with_capacity(2);
    for &p in predictions {
        if !p.is_finite() {
            return Err(Error::invalid(format!("non-finite prediction {p}")));
        }
        if !levels.contains(&p) {
            if levels.len() == 2 {
                return Err(Error::invalid("predictions take more than two distinct values"));
            }
            levels.push(p);
        }
    }
    if levels.len() < 2 {
        return Err(Error::degenerate("all predictions are identical"));
    }
    let mut sorted = gold.to_vec();
    if sorted.iter().any(|g| !g.is_finite()) {
        return Err(Error::invalid("gold scores must be finite"));
    }
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid("gold scores must be tie-free"));
    }
    spearman_rank_difference(predictions, gold)
}

/// One row of a ceiling sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: u64,
    pub k_star: u64,
    pub min_sum_d_sq: f64,
    pub max_rho: f64,
}

/// Closed-form ceiling for every `n`, cross-checked against brute force for
/// `n ≤ 1000`. Rows come back in input order.
pub fn bound_sweep(n_values: &[u64]) -> Result<Vec<SweepRow>> {
    n_values
        .par_iter()
        .map(|&n| {
            let ks = optimal_k(n)?;
            let k_star = *ks.iter().next().expect("non-empty");
            let min_d2 = sum_d_sq_exact(n, k_star)?;
            if n <= BRUTE_FORCE_CHECK_MAX_N {
                let brute = sum_d_sq_bruteforce_exact(n, k_star)?;
                if brute != min_d2 {
                    return Err(Error::InvalidInput(format!(
                        "closed form {min_d2} disagrees with brute force {brute} at n = {n}"
                    )));
                }
            }
            Ok(SweepRow {
                n,
                k_star,
                min_sum_d_sq: to_f64(min_d2),
                max_rho: max_spearman(n)?,
            })
        })
        .collect()
}

/// Formats like C's `%.{digits}g`.
pub fn format_significant(x: f64, digits: usize) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let digits = digits.max(1);
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= digits as i32 {
        let mantissa = trim_fraction(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim_fraction(&format!("{:.*}", decimals, x)).to_string()
    }
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub const SWEEP_CSV_HEADER: &str = "n,k_star,min_sum_d_sq,max_rho";

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.n,
            r.k_star,
            format_significant(r.min_sum_d_sq, 12),
            format_significant(r.max_rho, 12)
        ));
    }
    out
}
