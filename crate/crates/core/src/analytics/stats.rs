use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, StudentsT};
use statrs::function::erf::erf;
use statrs::function::gamma::ln_gamma;

use super::AnalyticsError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsResult {
    /// r, F, or a studentized difference depending on the test.
    pub statistic: f64,
    pub p_value: f64,
    pub df: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TukeyComparison {
    pub i: usize,
    pub j: usize,
    /// `mean(groups[i]) - mean(groups[j])`.
    pub mean_diff: f64,
    /// Signed studentized difference and its studentized-range p-value.
    pub result: StatsResult,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn check_finite(v: &[f64]) -> Result<(), AnalyticsError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(AnalyticsError::Degenerate("non-finite sample".into()))
    }
}

/// Pearson r with a two-sided p-value from Student's t on n−2 df.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<StatsResult, AnalyticsError> {
    if x.len() != y.len() {
        return Err(AnalyticsError::Shape(format!(
            "{} vs {} samples",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 3 {
        return Err(AnalyticsError::Degenerate(format!(
            "{} samples, need at least 3",
            x.len()
        )));
    }
    check_finite(x)?;
    check_finite(y)?;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(AnalyticsError::Degenerate("zero variance".into()));
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = (x.len() - 2) as f64;
    let p = if r.abs() == 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist =
            StudentsT::new(0.0, 1.0, df).map_err(|e| AnalyticsError::Degenerate(e.to_string()))?;
        (2.0 * dist.sf(t.abs())).min(1.0)
    };
    Ok(StatsResult {
        statistic: r,
        p_value: p,
        df: vec![df],
    })
}

fn check_groups(groups: &[Vec<f64>]) -> Result<(), AnalyticsError> {
    if groups.len() < 2 {
        return Err(AnalyticsError::Degenerate(format!(
            "{} groups, need at least 2",
            groups.len()
        )));
    }
    if let Some(g) = groups.iter().position(|g| g.len() < 2) {
        return Err(AnalyticsError::Degenerate(format!(
            "group {g} has fewer than 2 values"
        )));
    }
    groups.iter().try_for_each(|g| check_finite(g))
}

/// Within-group sum of squares, total count, and group means.
fn within(groups: &[Vec<f64>]) -> (f64, usize, Vec<f64>) {
    let means: Vec<f64> = groups.iter().map(|g| mean(g)).collect();
    let ssw = groups
        .iter()
        .zip(&means)
        .map(|(g, m)| g.iter().map(|v| (v - m).powi(2)).sum::<f64>())
        .sum();
    (ssw, groups.iter().map(Vec::len).sum(), means)
}

/// One-way ANOVA. Zero within-group variance yields `f64::MAX` and p = 0,
/// unless the group means also coincide, in which case F = 0 and p = 1.
pub fn one_way_anova(groups: &[Vec<f64>]) -> Result<StatsResult, AnalyticsError> {
    check_groups(groups)?;
    let (ssw, n, means) = within(groups);
    let k = groups.len();
    let grand = groups.iter().flatten().sum::<f64>() / n as f64;
    let ssb: f64 = groups
        .iter()
        .zip(&means)
        .map(|(g, m)| g.len() as f64 * (m - grand).powi(2))
        .sum();
    let (df1, df2) = ((k - 1) as f64, (n - k) as f64);
    let df = vec![df1, df2];
    // relative to the data scale so rounding noise in identical groups reads as zero
    let scale = groups
        .iter()
        .flatten()
        .map(|v| v * v)
        .sum::<f64>()
        .max(f64::MIN_POSITIVE);
    let tiny = scale * 1e-24;
    if ssw <= tiny {
        let (statistic, p_value) = if ssb <= tiny {
            (0.0, 1.0)
        } else {
            (f64::MAX, 0.0)
        };
        return Ok(StatsResult {
            statistic,
            p_value,
            df,
        });
    }
    if ssb <= tiny {
        return Ok(StatsResult {
            statistic: 0.0,
            p_value: 1.0,
            df,
        });
    }
    let f = (ssb / df1) / (ssw / df2);
    let dist =
        FisherSnedecor::new(df1, df2).map_err(|e| AnalyticsError::Degenerate(e.to_string()))?;
    Ok(StatsResult {
        statistic: f,
        p_value: dist.sf(f).clamp(0.0, 1.0),
        df,
    })
}

/// Tukey-Kramer comparisons for every pair `i < j`, using the pooled
/// within-group mean square.
pub fn tukey_pairwise(groups: &[Vec<f64>]) -> Result<Vec<TukeyComparison>, AnalyticsError> {
    check_groups(groups)?;
    let (ssw, n, means) = within(groups);
    let k = groups.len();
    let df = (n - k) as f64;
    let msw = ssw / df;
    let mut out = Vec::with_capacity(k * (k - 1) / 2);
    for i in 0..k {
        for j in i + 1..k {
            let diff = means[i] - means[j];
            let se =
                (msw / 2.0 * (1.0 / groups[i].len() as f64 + 1.0 / groups[j].len() as f64)).sqrt();
            let (q, p) = if se > 0.0 {
                let q = diff / se;
                (q, (1.0 - ptukey(q.abs(), k, df)).clamp(0.0, 1.0))
            } else if diff == 0.0 {
                (0.0, 1.0)
            } else {
                (f64::MAX.copysign(diff), 0.0)
            };
            out.push(TukeyComparison {
                i,
                j,
                mean_diff: diff,
                result: StatsResult {
                    statistic: q,
                    p_value: p,
                    df: vec![k as f64, df],
                },
            });
        }
    }
    Ok(out)
}

fn norm_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

fn simpson(a: f64, b: f64, intervals: usize, f: impl Fn(f64) -> f64) -> f64 {
    let n = intervals + intervals % 2;
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        acc += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

/// Range CDF of `k` standard normals (infinite df).
fn range_cdf(q: f64, k: usize) -> f64 {
    if q <= 0.0 {
        return 0.0;
    }
    let inv_sqrt_2pi = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let inner = simpson(-8.5, 8.5, 256, |z| {
        let d = (norm_cdf(z) - norm_cdf(z - q)).max(0.0);
        inv_sqrt_2pi * (-0.5 * z * z).exp() * d.powi(k as i32 - 1)
    });
    (k as f64 * inner).clamp(0.0, 1.0)
}

/// CDF of the studentized range distribution with `k` means and `df` error
/// degrees of freedom, by nested Simpson integration.
pub fn ptukey(q: f64, k: usize, df: f64) -> f64 {
    if q <= 0.0 || k < 2 {
        return 0.0;
    }
    if df > 1e5 {
        return range_cdf(q, k);
    }
    // density of s = chi_df / sqrt(df)
    let half = df / 2.0;
    let log_norm = half * half.ln() + std::f64::consts::LN_2 - ln_gamma(half);
    let spread = 10.0 / (2.0 * df).sqrt();
    let (lo, hi) = ((1.0 - spread).max(0.0), 1.0 + spread);
    let outer = simpson(lo, hi, 400, |s| {
        if s <= 0.0 {
            return if df == 1.0 {
                (2.0 / std::f64::consts::PI).sqrt() * range_cdf(0.0, k)
            } else {
                0.0
            };
        }
        let log_f = log_norm + (df - 1.0) * s.ln() - half * s * s;
        log_f.exp() * range_cdf(q * s, k)
    });
    outer.clamp(0.0, 1.0)
}
