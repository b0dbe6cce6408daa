//! Convergence and degradation measurement: Kolmogorov-Smirnov statistics,
//! unique-value proportions, effective sample size, and the statistics behind
//! the two rules for choosing the number of transition sweeps.

use std::collections::BTreeSet;
use std::io::Write;

use crate::error::{Error, Result};
use crate::textio::fmt17;

/// sup_x |F_emp(x) - F(x)| against a reference CDF, evaluated at the sorted
/// sample points using both one-sided gaps.
pub fn ks_statistic(samples: &[f64], reference_cdf: impl Fn(f64) -> f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::contract("ks_statistic needs a non-empty sample"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    let mut worst: f64 = 0.0;
    for (i, x) in sorted.iter().enumerate() {
        let f = reference_cdf(*x);
        let hi = (i + 1) as f64 / n - f;
        let lo = f - i as f64 / n;
        worst = worst.max(hi).max(lo);
    }
    Ok(worst)
}

/// sup-norm distance between two empirical CDFs.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::contract("ks_two_sample needs non-empty samples"));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut worst: f64 = 0.0;
    while i < sa.len() && j < sb.len() {
        let x = sa[i].min(sb[j]);
        while i < sa.len() && sa[i] <= x {
            i += 1;
        }
        while j < sb.len() && sb[j] <= x {
            j += 1;
        }
        worst = worst.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(worst)
}

/// Fraction of distinct values (exact bit equality) among the samples.
pub fn unique_proportion(samples: &[f64]) -> f64 {
    assert!(!samples.is_empty(), "unique_proportion needs samples");
    let distinct: BTreeSet<u64> = samples.iter().map(|x| x.to_bits()).collect();
    distinct.len() as f64 / samples.len() as f64
}

/// Effective sample size N / (1 + 2 sum rho_k) using the initial positive
/// sequence truncation on pairs of autocorrelations. A (near-)constant chain
/// is degenerate and reports 1.
pub fn effective_sample_size(chain: &[f64]) -> f64 {
    let n = chain.len();
    assert!(n >= 10, "effective_sample_size needs a chain of length >= 10");
    let mean = chain.iter().sum::<f64>() / n as f64;
    let var: f64 = chain.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    if !(var > 0.0) || !var.is_finite() {
        return 1.0;
    }
    let autocov = |lag: usize| -> f64 {
        chain[..n - lag]
            .iter()
            .zip(&chain[lag..])
            .map(|(a, b)| (a - mean) * (b - mean))
            .sum::<f64>()
            / n as f64
    };
    // Geyer initial positive sequence: sum consecutive autocorrelation pairs
    // while they stay positive.
    let mut tau = -1.0; // accounts for rho_0 counted once, not twice
    let mut m = 0usize;
    while 2 * m + 1 < n {
        let pair = (autocov(2 * m) + autocov(2 * m + 1)) / var;
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        m += 1;
    }
    let ess = n as f64 / tau.max(1e-12);
    ess.clamp(1.0, n as f64)
}

/// Max over coordinates of the across-chain Pearson correlation between the
/// current iteration's values and the initial (iteration-1) values.
///
/// With `signed = false` (the default convention here) the absolute
/// correlation is returned, so a sign flip cannot falsely certify
/// decorrelation. A coordinate with zero across-chain variance at either
/// iteration reports correlation 1: it cannot certify decorrelation.
pub fn correlation_stop_statistic(
    initial: &[Vec<f64>],
    current: &[Vec<f64>],
    signed: bool,
) -> Result<f64> {
    let s = initial.len();
    if s < 3 || current.len() != s {
        return Err(Error::contract(
            "correlation statistic needs matching ensembles with at least 3 chains",
        ));
    }
    let dim = initial[0].len();
    if current[0].len() != dim {
        return Err(Error::contract("ensemble dimensions differ"));
    }
    let mut worst = f64::NEG_INFINITY;
    for j in 0..dim {
        let xs: Vec<f64> = initial.iter().map(|v| v[j]).collect();
        let ys: Vec<f64> = current.iter().map(|v| v[j]).collect();
        let r = match pearson(&xs, &ys) {
            Some(r) => {
                if signed {
                    r
                } else {
                    r.abs()
                }
            }
            None => 1.0,
        };
        worst = worst.max(r);
    }
    Ok(worst)
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        None
    } else {
        Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
    }
}

/// True iff the per-coordinate KS statistics at all monitored coordinates are
/// strictly below the threshold.
pub fn oracle_stop_check(
    samples_by_coord: impl Fn(usize) -> Vec<f64>,
    reference_cdfs: &[&(dyn Fn(f64) -> f64 + Sync)],
    coords: &[usize],
    threshold: f64,
) -> Result<bool> {
    for (&c, cdf) in coords.iter().zip(reference_cdfs) {
        let ks = ks_statistic(&samples_by_coord(c), cdf)?;
        if ks >= threshold {
            return Ok(false);
        }
    }
    Ok(true)
}

/// One recorded diagnostic value, serialized as a (t, coordinate, metric,
/// value) row. Coordinate 0 denotes a whole-update metric.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticsRow {
    pub t: usize,
    pub coordinate: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, Default)]
pub struct DiagnosticsReport {
    pub rows: Vec<DiagnosticsRow>,
}

impl DiagnosticsReport {
    pub fn push(&mut self, t: usize, coordinate: usize, metric: &str, value: f64) {
        self.rows.push(DiagnosticsRow {
            t,
            coordinate,
            metric: metric.to_string(),
            value,
        });
    }

    pub fn write(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "t,coordinate,metric,value")?;
        for row in &self.rows {
            writeln!(out, "{},{},{},{}", row.t, row.coordinate, row.metric, fmt17(row.value))?;
        }
        Ok(())
    }
}
