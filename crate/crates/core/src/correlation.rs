//! Rank statistics: mean-rank ranking, Spearman's rho and Pearson's r.
//!
//! Spearman is computed as the Pearson correlation of the two mean-rank
//! vectors, which is exact in the presence of ties. The classic
//! `1 - 6 Σd² / (n(n² - 1))` form is available separately as
//! [`spearman_rank_difference`]; it coincides with [`spearman`] only when
//! both inputs are tie-free.

use std::cmp::Ordering;

use crate::error::{Error, Result};

/// A vector together with its 1-based mean ranks.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedVector {
    values: Vec<f64>,
    ranks: Vec<f64>,
}

impl RankedVector {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn ranks(&self) -> &[f64] {
        &self.ranks
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_ranks(self) -> Vec<f64> {
        self.ranks
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!(
            "{what}[{i}] is not finite ({})",
            values[i]
        )));
    }
    Ok(())
}

/// Ranks `values` in ascending order starting at 1. Tied entries share the
/// mean of the positions they jointly occupy.
pub fn compute_ranks(values: &[f64]) -> Result<RankedVector> {
    if values.is_empty() {
        return Err(Error::invalid("cannot rank an empty vector"));
    }
    check_finite(values, "values")?;

    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    // Finite values only, so partial_cmp never fails. Using partial_cmp
    // rather than total_cmp keeps -0.0 and 0.0 in the same tie group.
    order.sort_by(|&a, &b| {
        values[a]
            .partial_cmp(&values[b])
            .unwrap_or(Ordering::Equal)
    });

    let mut ranks = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end, 1-based
        let mean_rank = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = mean_rank;
        }
        start = end;
    }

    Ok(RankedVector {
        values: values.to_vec(),
        ranks,
    })
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!(
            "length mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 observations, got {}",
            x.len()
        )));
    }
    check_finite(x, "x")?;
    check_finite(y, "y")
}

/// Centered sums for a two-pass Pearson computation.
#[derive(Debug, Clone, Copy)]
pub(crate) struct CenteredMoments {
    pub sxx: f64,
    pub syy: f64,
    pub sxy: f64,
}

pub(crate) fn centered_moments(x: &[f64], y: &[f64]) -> CenteredMoments {
    let n = x.len() as f64;
    let mean_x = x.iter().sum::<f64>() / n;
    let mean_y = y.iter().sum::<f64>() / n;
    let mut m = CenteredMoments {
        sxx: 0.0,
        syy: 0.0,
        sxy: 0.0,
    };
    for (&a, &b) in x.iter().zip(y) {
        let dx = a - mean_x;
        let dy = b - mean_y;
        m.sxx += dx * dx;
        m.syy += dy * dy;
        m.sxy += dx * dy;
    }
    m
}

/// Whether the population standard deviation of `values` (given its centered
/// sum of squares) is indistinguishable from zero at f64 resolution.
fn is_flat(values: &[f64], centered_ss: f64) -> bool {
    let scale = values.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    let std = (centered_ss / values.len() as f64).sqrt();
    std <= 4.0 * f64::EPSILON * scale
}

/// Pearson's correlation coefficient with population normalization.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let m = centered_moments(x, y);
    if is_flat(x, m.sxx) {
        return Err(Error::degenerate("x has zero variance"));
    }
    if is_flat(y, m.syy) {
        return Err(Error::degenerate("y has zero variance"));
    }
    let r = m.sxy / (m.sxx * m.syy).sqrt();
    Ok(r.clamp(-1.0, 1.0))
}

/// Spearman's rho as the Pearson correlation of mean ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let rx = compute_ranks(x)?.into_ranks();
    let ry = compute_ranks(y)?.into_ranks();
    pearson(&rx, &ry).map_err(|e| match e {
        Error::DegenerateInput(msg) => {
            Error::degenerate(format!("rank vector is constant ({msg})"))
        }
        other => other,
    })
}

/// Sum of squared differences between the mean ranks of `x` and `y`.
pub fn sum_sq_rank_difference(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let rx = compute_ranks(x)?;
    let ry = compute_ranks(y)?;
    Ok(rx
        .ranks()
        .iter()
        .zip(ry.ranks())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// The classic rank-difference form `1 - 6 Σd² / (n(n² - 1))` evaluated on
/// mean ranks. Equal to [`spearman`] for tie-free inputs; with ties it is
/// the quantity the binary-classifier ceiling is stated in.
pub fn spearman_rank_difference(x: &[f64], y: &[f64]) -> Result<f64> {
    let d2 = sum_sq_rank_difference(x, y)?;
    let n = x.len() as f64;
    Ok(1.0 - 6.0 * d2 / (n * (n * n - 1.0)))
}
