//! Two-sided Mann–Whitney U, Bonferroni correction and significance symbols.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest pooled sample size handled by exact enumeration.
pub const EXACT_MAX_N: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Exact,
    NormalApprox,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// Number of (x, y) pairs with x > y, ties counted as one half.
    pub u: f64,
    pub p_raw: f64,
    pub method: Method,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Significance {
    #[serde(rename = "****")]
    P0001,
    #[serde(rename = "***")]
    P001,
    #[serde(rename = "**")]
    P01,
    #[serde(rename = "*")]
    P05,
    #[serde(rename = "ns")]
    Ns,
}

impl Significance {
    pub fn as_str(self) -> &'static str {
        match self {
            Significance::P0001 => "****",
            Significance::P001 => "***",
            Significance::P01 => "**",
            Significance::P05 => "*",
            Significance::Ns => "ns",
        }
    }
}

impl fmt::Display for Significance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub u: f64,
    pub p_raw: f64,
    pub p_corr: f64,
    pub symbol: Significance,
    pub method: Method,
}

/// Midranks (1-based) of the pooled sample and the tie-group sizes.
fn midranks(pooled: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&a, &b| pooled[a].total_cmp(&pooled[b]));
    let mut ranks = vec![0.0; pooled.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && pooled[order[j]] == pooled[order[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        ties.push(j - i);
        i = j;
    }
    (ranks, ties)
}

/// `counts[u]` = number of arrangements of m x's and n y's with statistic u.
fn exact_distribution(m: usize, n: usize) -> Vec<u64> {
    // table[i][j] holds the distribution for i x's and j y's
    let mut table: Vec<Vec<Vec<u64>>> = vec![vec![Vec::new(); n + 1]; m + 1];
    for i in 0..=m {
        for j in 0..=n {
            table[i][j] = if i == 0 || j == 0 {
                vec![1]
            } else {
                let mut d = vec![0u64; i * j + 1];
                // largest element is a y
                for (u, &c) in table[i][j - 1].iter().enumerate() {
                    d[u] += c;
                }
                // largest element is an x and beats all j y's
                for (u, &c) in table[i - 1][j].iter().enumerate() {
                    d[u + j] += c;
                }
                d
            };
        }
    }
    std::mem::take(&mut table[m][n])
}

/// Exact enumeration for small tie-free samples, normal approximation otherwise.
pub fn mann_whitney_u(x: &[f64], y: &[f64]) -> Result<MannWhitney> {
    mann_whitney_u_with(x, y, None)
}

/// As [`mann_whitney_u`], optionally forcing a branch. Forcing `Exact` on
/// samples with ties or more than [`EXACT_MAX_N`] values is a usage error.
pub fn mann_whitney_u_with(x: &[f64], y: &[f64], method: Option<Method>) -> Result<MannWhitney> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::usage("Mann-Whitney U needs two non-empty samples"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::usage("Mann-Whitney U samples must be finite"));
    }
    let (m, n) = (x.len(), y.len());
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let rank_sum: f64 = ranks[..m].iter().sum();
    let u = rank_sum - (m * (m + 1)) as f64 / 2.0;
    let has_ties = ties.iter().any(|&t| t > 1);

    let exact_ok = m + n <= EXACT_MAX_N && !has_ties;
    if method == Some(Method::Exact) && !exact_ok {
        return Err(Error::usage(format!(
            "exact Mann-Whitney needs at most {EXACT_MAX_N} tie-free values"
        )));
    }
    if exact_ok && method != Some(Method::NormalApprox) {
        let dist = exact_distribution(m, n);
        let total: u64 = dist.iter().sum();
        let k = u.round() as usize;
        let lower: u64 = dist[..=k].iter().sum();
        let upper: u64 = dist[k..].iter().sum();
        let p = (2.0 * lower.min(upper) as f64 / total as f64).min(1.0);
        return Ok(MannWhitney {
            u,
            p_raw: p,
            method: Method::Exact,
        });
    }

    let big_n = (m + n) as f64;
    let mean = (m * n) as f64 / 2.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (big_n * (big_n - 1.0));
    let var = (m * n) as f64 / 12.0 * ((big_n + 1.0) - tie_term);
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = ((u - mean).abs() - 0.5).max(0.0) / var.sqrt();
        libm::erfc(z / std::f64::consts::SQRT_2).min(1.0)
    };
    Ok(MannWhitney {
        u,
        p_raw: p,
        method: Method::NormalApprox,
    })
}

/// `min(1, factor · p)`.
pub fn bonferroni(p_raw: f64, factor: usize) -> f64 {
    (p_raw * factor.max(1) as f64).min(1.0)
}

pub fn significance_symbol(p_corr: f64) -> Result<Significance> {
    if !(0.0..=1.0).contains(&p_corr) {
        return Err(Error::usage(format!("p-value {p_corr} outside [0, 1]")));
    }
    Ok(if p_corr < 1e-4 {
        Significance::P0001
    } else if p_corr < 1e-3 {
        Significance::P001
    } else if p_corr < 1e-2 {
        Significance::P01
    } else if p_corr < 0.05 {
        Significance::P05
    } else {
        Significance::Ns
    })
}

/// Mann–Whitney U followed by Bonferroni correction and symbol mapping.
pub fn compare(x: &[f64], y: &[f64], factor: usize) -> Result<TestResult> {
    let mw = mann_whitney_u(x, y)?;
    let p_corr = bonferroni(mw.p_raw, factor);
    Ok(TestResult {
        u: mw.u,
        p_raw: mw.p_raw,
        p_corr,
        symbol: significance_symbol(p_corr)?,
        method: mw.method,
    })
}
