//! Empirical predictive distributions and scoring-rule kernels.
//!
//! All rules are negatively oriented: a smaller score is a better forecast.
//! Moments of an [`Ecdf`] use the population convention (divide by `n`), so
//! the in-sample DSS total of a node is exactly `n (1 + ln var)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::{Error, Result};

/// Absolute lower bound on the variance used by DSS.
pub const ABSOLUTE_VARIANCE_FLOOR: f64 = 1e-12;

/// DSS variances are floored at this multiple of the root response variance.
pub const RELATIVE_VARIANCE_FLOOR: f64 = 1e-9;

/// Default miscoverage level for the interval scores.
pub const DEFAULT_ALPHA: f64 = 0.2;

/// Variance floor for DSS given the variance of the full training response.
pub fn variance_floor(root_variance: f64) -> f64 {
    if root_variance > 0.0 && root_variance.is_finite() {
        (RELATIVE_VARIANCE_FLOOR * root_variance).max(ABSOLUTE_VARIANCE_FLOOR)
    } else {
        ABSOLUTE_VARIANCE_FLOOR
    }
}

/// Empirical CDF of a finite sample, stored as sorted order statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Ecdf {
    samples: Vec<f64>,
}

impl Ecdf {
    pub fn from_samples(values: impl Into<Vec<f64>>) -> Result<Self> {
        let mut samples = values.into();
        if samples.is_empty() {
            return Err(Error::EmptySamples);
        }
        if let Some(&bad) = samples.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSample(bad));
        }
        samples.sort_by(f64::total_cmp);
        Ok(Ecdf { samples })
    }

    /// Caller guarantees `samples` is non-empty, finite and sorted.
    pub(crate) fn from_sorted_unchecked(samples: Vec<f64>) -> Self {
        debug_assert!(!samples.is_empty());
        debug_assert!(samples.windows(2).all(|w| w[0] <= w[1]));
        Ecdf { samples }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    /// Always false; an `Ecdf` holds at least one sample.
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.samples[0]
    }

    pub fn max(&self) -> f64 {
        self.samples[self.samples.len() - 1]
    }

    /// Fraction of samples `<= z`.
    pub fn cdf(&self, z: f64) -> f64 {
        let count = self.samples.partition_point(|&s| s <= z);
        count as f64 / self.samples.len() as f64
    }

    /// Smallest sample `z` with `cdf(z) >= p`.
    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::InvalidProbability(p));
        }
        Ok(self.samples[quantile_index(self.samples.len(), p)])
    }

    pub fn mean(&self) -> f64 {
        mean(&self.samples)
    }

    /// Population variance.
    pub fn variance(&self) -> f64 {
        population_variance(&self.samples, self.mean())
    }
}

/// Zero-based order-statistic index of the inf-quantile at level `p`.
///
/// Finds the smallest `k` with `k / n >= p`, comparing in the same floating
/// arithmetic as [`Ecdf::cdf`] so the two always agree.
pub(crate) fn quantile_index(n: usize, p: f64) -> usize {
    let nf = n as f64;
    let mut k = ((p * nf).ceil() as usize).clamp(1, n);
    while k > 1 && (k - 1) as f64 / nf >= p {
        k -= 1;
    }
    while k < n && (k as f64 / nf) < p {
        k += 1;
    }
    k - 1
}

pub(crate) fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub(crate) fn population_variance(values: &[f64], mean: f64) -> f64 {
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64
}

/// A scoring rule `S(F, y)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScoringRule {
    /// Squared error of the predictive mean.
    Sse,
    /// Continuous ranked probability score.
    Crps,
    /// Dawid-Sebastiani score.
    Dss,
    /// Upper one-sided interval score at level `1 - alpha`.
    Is1 { alpha: f64 },
    /// Two-sided interval score at level `1 - alpha`.
    Is2 { alpha: f64 },
}

impl ScoringRule {
    pub fn is1(alpha: f64) -> Result<Self> {
        let rule = ScoringRule::Is1 { alpha };
        rule.validate()?;
        Ok(rule)
    }

    pub fn is2(alpha: f64) -> Result<Self> {
        let rule = ScoringRule::Is2 { alpha };
        rule.validate()?;
        Ok(rule)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ScoringRule::Is1 { alpha } | ScoringRule::Is2 { alpha } => {
                if alpha > 0.0 && alpha < 1.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidParameter(format!(
                        "alpha must lie in (0, 1), got {alpha}"
                    )))
                }
            }
            _ => Ok(()),
        }
    }

    /// Short lowercase name without parameters.
    pub fn kind_name(&self) -> &'static str {
        match self {
            ScoringRule::Sse => "sse",
            ScoringRule::Crps => "crps",
            ScoringRule::Dss => "dss",
            ScoringRule::Is1 { .. } => "is1",
            ScoringRule::Is2 { .. } => "is2",
        }
    }

    pub fn alpha(&self) -> Option<f64> {
        match *self {
            ScoringRule::Is1 { alpha } | ScoringRule::Is2 { alpha } => Some(alpha),
            _ => None,
        }
    }
}

impl fmt::Display for ScoringRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.alpha() {
            Some(alpha) => write!(f, "{}:{}", self.kind_name(), alpha),
            None => f.write_str(self.kind_name()),
        }
    }
}

/// Parses `sse`, `crps`, `dss`, `is1`, `is2`, optionally with `:alpha`
/// (interval scores default to alpha = 0.2).
impl FromStr for ScoringRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let (name, alpha) = match lower.split_once(':') {
            Some((name, a)) => {
                let alpha = a
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| Error::UnknownRule(s.to_string()))?;
                (name.trim().to_string(), Some(alpha))
            }
            None => (lower.clone(), None),
        };
        let rule = match (name.as_str(), alpha) {
            ("sse", None) => ScoringRule::Sse,
            ("crps", None) => ScoringRule::Crps,
            ("dss", None) => ScoringRule::Dss,
            ("is1", a) => ScoringRule::Is1 {
                alpha: a.unwrap_or(DEFAULT_ALPHA),
            },
            ("is2", a) => ScoringRule::Is2 {
                alpha: a.unwrap_or(DEFAULT_ALPHA),
            },
            _ => return Err(Error::UnknownRule(s.to_string())),
        };
        rule.validate()?;
        Ok(rule)
    }
}

impl Serialize for ScoringRule {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ScoringRule {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Total in-sample score of a node's ECDF over its own samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreSummary {
    pub total: f64,
    /// `ES(F, F)` for the node's own ECDF `F`.
    pub per_point_mean: f64,
    pub n: usize,
}

impl ScoreSummary {
    fn from_mean(per_point_mean: f64, n: usize) -> Self {
        ScoreSummary {
            total: per_point_mean * n as f64,
            per_point_mean,
            n,
        }
    }
}

/// `S(f, y)` with the default absolute DSS variance floor.
pub fn score(rule: &ScoringRule, f: &Ecdf, y: f64) -> Result<f64> {
    score_floored(rule, f, y, ABSOLUTE_VARIANCE_FLOOR)
}

/// `S(f, y)` where DSS uses `max(var, variance_floor)`.
pub fn score_floored(rule: &ScoringRule, f: &Ecdf, y: f64, variance_floor: f64) -> Result<f64> {
    if !y.is_finite() {
        return Err(Error::NonFiniteObservation(y));
    }
    rule.validate()?;
    Ok(score_unchecked(rule, f, y, variance_floor))
}

pub(crate) fn score_unchecked(rule: &ScoringRule, f: &Ecdf, y: f64, variance_floor: f64) -> f64 {
    let s = f.samples();
    match *rule {
        ScoringRule::Sse => {
            let d = f.mean() - y;
            d * d
        }
        ScoringRule::Crps => crps_fast(f, y),
        ScoringRule::Dss => {
            let mu = f.mean();
            let var = population_variance(s, mu).max(variance_floor);
            (mu - y) * (mu - y) / var + var.ln()
        }
        ScoringRule::Is1 { alpha } => {
            let q = s[quantile_index(s.len(), 1.0 - alpha)];
            q + (y - q).max(0.0) / alpha
        }
        ScoringRule::Is2 { alpha } => {
            let lo = s[quantile_index(s.len(), alpha / 2.0)];
            let hi = s[quantile_index(s.len(), 1.0 - alpha / 2.0)];
            interval_score(lo, hi, alpha, y)
        }
    }
}

fn interval_score(lo: f64, hi: f64, alpha: f64, y: f64) -> f64 {
    let penalty = if y < lo {
        (2.0 / alpha) * (lo - y)
    } else if y > hi {
        (2.0 / alpha) * (y - hi)
    } else {
        0.0
    };
    hi - lo + penalty
}

/// CRPS by the two-expectation form, `O(n^2)`.
pub fn crps_naive(f: &Ecdf, y: f64) -> f64 {
    let s = f.samples();
    let n = s.len() as f64;
    let abs_err: f64 = s.iter().map(|z| (z - y).abs()).sum::<f64>() / n;
    let mut spread = 0.0;
    for a in s {
        for b in s {
            spread += (a - b).abs();
        }
    }
    abs_err - 0.5 * spread / (n * n)
}

/// CRPS from sorted order statistics in one pass.
///
/// `(2/n^2) sum_i (y_(i) - y) (n 1{y < y_(i)} - i + 1/2)` with 1-based `i`.
pub fn crps_fast(f: &Ecdf, y: f64) -> f64 {
    let s = f.samples();
    let n = s.len() as f64;
    let mut acc = 0.0;
    for (i, &z) in s.iter().enumerate() {
        let above = if y < z { n } else { 0.0 };
        acc += (z - y) * (above - (i + 1) as f64 + 0.5);
    }
    2.0 * acc / (n * n)
}

/// `sum_i S(F, y_i)` where `F` is the ECDF of `samples` itself.
pub fn node_total_score(rule: &ScoringRule, samples: &[f64]) -> Result<ScoreSummary> {
    node_total_score_floored(rule, samples, ABSOLUTE_VARIANCE_FLOOR)
}

pub fn node_total_score_floored(
    rule: &ScoringRule,
    samples: &[f64],
    variance_floor: f64,
) -> Result<ScoreSummary> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    if let Some(&bad) = samples.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFiniteSample(bad));
    }
    rule.validate()?;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(total_sorted(rule, &sorted, variance_floor))
}

/// Closed-form self-score of a sorted, finite, non-empty sample.
pub(crate) fn total_sorted(rule: &ScoringRule, sorted: &[f64], variance_floor: f64) -> ScoreSummary {
    let n = sorted.len();
    let nf = n as f64;
    let es = match *rule {
        ScoringRule::Sse => population_variance(sorted, mean(sorted)),
        ScoringRule::Dss => {
            let raw = population_variance(sorted, mean(sorted));
            let var = raw.max(variance_floor);
            raw / var + var.ln()
        }
        ScoringRule::Crps => {
            // (1/(2n^2)) sum_i sum_j |y_i - y_j| via order statistics.
            let mut acc = 0.0;
            for (i, &z) in sorted.iter().enumerate() {
                acc += (2.0 * (i + 1) as f64 - nf - 1.0) * z;
            }
            acc / (nf * nf)
        }
        ScoringRule::Is1 { alpha } => {
            let q = sorted[quantile_index(n, 1.0 - alpha)];
            let exceed: f64 = sorted.iter().map(|&y| (y - q).max(0.0)).sum();
            q + exceed / (alpha * nf)
        }
        ScoringRule::Is2 { alpha } => {
            let lo = sorted[quantile_index(n, alpha / 2.0)];
            let hi = sorted[quantile_index(n, 1.0 - alpha / 2.0)];
            let outside: f64 = sorted
                .iter()
                .map(|&y| (lo - y).max(0.0) + (y - hi).max(0.0))
                .sum();
            hi - lo + (2.0 / alpha) * outside / nf
        }
    };
    ScoreSummary::from_mean(es, n)
}

/// Minimum node size for an `epsilon`-accurate ECDF with confidence
/// `1 - alpha`, from inverting the DKW inequality.
pub fn dkw_min_node_size(epsilon: f64, alpha: f64) -> Result<usize> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "epsilon must lie in (0, 1), got {epsilon}"
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    let n = (2f64.ln() - alpha.ln()) / (2.0 * epsilon * epsilon);
    Ok(n.ceil() as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ecdf(v: &[f64]) -> Ecdf {
        Ecdf::from_samples(v.to_vec()).unwrap()
    }

    fn one_to_ten() -> Ecdf {
        ecdf(&(1..=10).map(f64::from).collect::<Vec<_>>())
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn construction() {
        assert_eq!(ecdf(&[3.0]).samples(), &[3.0]);
        assert_eq!(ecdf(&[2.0, 1.0, 3.0]).samples(), &[1.0, 2.0, 3.0]);
        let f = ecdf(&[1.0, 1.0, 2.0]);
        assert_eq!(f.samples(), &[1.0, 1.0, 2.0]);
        assert_eq!(f.cdf(1.0), 2.0 / 3.0);
        assert_eq!(f.cdf(0.5), 0.0);
        assert_eq!(f.cdf(2.0), 1.0);
        assert_eq!(f.cdf(7.0), 1.0);
    }

    #[test]
    fn construction_errors() {
        assert!(matches!(Ecdf::from_samples(vec![]), Err(Error::EmptySamples)));
        assert_eq!(Error::EmptySamples.to_string(), "empty sample set");
        assert!(matches!(
            Ecdf::from_samples(vec![1.0, f64::NAN]),
            Err(Error::NonFiniteSample(_))
        ));
        assert!(Ecdf::from_samples(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn quantiles() {
        let f = one_to_ten();
        assert_eq!(f.quantile(0.8).unwrap(), 8.0);
        assert_eq!(f.quantile(0.1).unwrap(), 1.0);
        assert_eq!(f.quantile(1.0).unwrap(), 10.0);
        assert_eq!(f.quantile(1.0 - 0.2).unwrap(), 8.0);
        assert_eq!(ecdf(&[5.0, 5.0, 5.0]).quantile(0.5).unwrap(), 5.0);
        assert!(f.quantile(0.0).is_err());
        assert!(f.quantile(1.5).is_err());
        assert!(f.quantile(-0.1).is_err());
        assert!(f.quantile(f64::NAN).is_err());
    }

    #[test]
    fn point_scores() {
        let two = ecdf(&[0.0, 2.0]);
        assert_eq!(score(&ScoringRule::Sse, &two, 1.0).unwrap(), 0.0);
        assert_eq!(score(&ScoringRule::Crps, &ecdf(&[3.0]), 5.0).unwrap(), 2.0);
        assert!(close(score(&ScoringRule::Crps, &two, 1.0).unwrap(), 0.5));
        assert!(close(score(&ScoringRule::Dss, &two, 1.0).unwrap(), 0.0));

        let f = one_to_ten();
        let is1 = ScoringRule::is1(0.2).unwrap();
        assert!(close(score(&is1, &f, 5.0).unwrap(), 8.0));
        assert!(close(score(&is1, &f, 10.0).unwrap(), 18.0));
        let is2 = ScoringRule::is2(0.2).unwrap();
        assert!(close(score(&is2, &f, 5.0).unwrap(), 8.0));
        // below q(0.1) = 1 and above q(0.9) = 9
        assert!(close(score(&is2, &f, 0.0).unwrap(), 8.0 + 10.0));
        assert!(close(score(&is2, &f, 10.0).unwrap(), 8.0 + 10.0));
    }

    #[test]
    fn score_rejects_non_finite_observation() {
        let f = one_to_ten();
        assert!(matches!(
            score(&ScoringRule::Sse, &f, f64::NAN),
            Err(Error::NonFiniteObservation(_))
        ));
        assert!(score(&ScoringRule::Crps, &f, f64::INFINITY).is_err());
    }

    #[test]
    fn crps_forms() {
        assert_eq!(crps_naive(&ecdf(&[3.0]), 5.0), 2.0);
        assert!(close(crps_naive(&ecdf(&[0.0, 2.0]), 2.0), 0.5));
        assert!(close(crps_naive(&ecdf(&[0.0, 2.0]), 1.0), 0.5));
        assert_eq!(crps_fast(&ecdf(&[3.0]), 5.0), 2.0);
        assert!(close(crps_fast(&ecdf(&[0.0, 2.0]), 1.0), 0.5));
        assert!(close(crps_fast(&ecdf(&[0.0, 2.0]), 2.0), 0.5));
        assert!(close(crps_fast(&ecdf(&[0.0, 2.0]), 0.0), 0.5));
    }

    #[test]
    fn node_totals() {
        assert_eq!(
            node_total_score(&ScoringRule::Sse, &[1.0, 1.0, 1.0]).unwrap().total,
            0.0
        );
        let crps = node_total_score(&ScoringRule::Crps, &[0.0, 2.0]).unwrap();
        assert!(close(crps.total, 1.0));
        let naive: f64 = [0.0, 2.0]
            .iter()
            .map(|&y| crps_naive(&ecdf(&[0.0, 2.0]), y))
            .sum();
        assert!(close(crps.total, naive));
        let dss = node_total_score(&ScoringRule::Dss, &[0.0, 2.0]).unwrap();
        assert!(close(dss.total, 2.0));
        assert!(node_total_score(&ScoringRule::Sse, &[]).is_err());
    }

    #[test]
    fn dss_constant_node_uses_floor() {
        let s = node_total_score_floored(&ScoringRule::Dss, &[4.0; 5], 1e-6).unwrap();
        assert!(close(s.total, 5.0 * 1e-6f64.ln()));
        assert!(s.total.is_finite());
    }

    #[test]
    fn dkw() {
        assert_eq!(dkw_min_node_size(0.1, 0.05).unwrap(), 185);
        assert_eq!(dkw_min_node_size(0.5, 0.5).unwrap(), 3);
        let mut prev = usize::MAX;
        for eps in [0.01, 0.05, 0.1, 0.2, 0.4, 0.9] {
            let n = dkw_min_node_size(eps, 0.05).unwrap();
            assert!(n <= prev);
            prev = n;
        }
        assert!(dkw_min_node_size(0.0, 0.05).is_err());
        assert!(dkw_min_node_size(0.1, 1.0).is_err());
    }

    #[test]
    fn rule_names_round_trip() {
        for s in ["sse", "crps", "dss", "is1:0.2", "is2:0.1"] {
            let r: ScoringRule = s.parse().unwrap();
            assert_eq!(r.to_string(), s);
        }
        assert_eq!("IS1".parse::<ScoringRule>().unwrap(), ScoringRule::Is1 { alpha: 0.2 });
        assert!("is1:1.5".parse::<ScoringRule>().is_err());
        assert!("log".parse::<ScoringRule>().is_err());
        assert!("sse:0.3".parse::<ScoringRule>().is_err());
        assert!(ScoringRule::is1(0.0).is_err());
    }

    fn brute_quantile(f: &Ecdf, p: f64) -> f64 {
        f.samples()
            .iter()
            .copied()
            .filter(|&z| f.cdf(z) >= p)
            .fold(f64::INFINITY, f64::min)
    }

    fn sample_strategy() -> impl Strategy<Value = Vec<f64>> {
        // small integer grid produces plenty of ties
        prop::collection::vec(
            prop_oneof![(-20i32..20).prop_map(f64::from), -50.0f64..50.0],
            1..80,
        )
    }

    proptest! {
        #[test]
        fn quantile_matches_scan(v in sample_strategy()) {
            let f = Ecdf::from_samples(v).unwrap();
            for k in 1..=100 {
                let p = k as f64 * 0.01;
                prop_assert_eq!(f.quantile(p).unwrap(), brute_quantile(&f, p));
            }
        }

        #[test]
        fn crps_fast_matches_naive(v in sample_strategy(), y in -60.0f64..60.0, pick in any::<prop::sample::Index>()) {
            let f = Ecdf::from_samples(v).unwrap();
            let tie = f.samples()[pick.index(f.len())];
            for obs in [y, tie] {
                let naive = crps_naive(&f, obs);
                prop_assert!((crps_fast(&f, obs) - naive).abs() <= 1e-9 * (1.0 + naive.abs()));
            }
        }

        #[test]
        fn totals_match_pointwise(v in sample_strategy()) {
            let f = Ecdf::from_samples(v.clone()).unwrap();
            for rule in [ScoringRule::Sse, ScoringRule::Crps, ScoringRule::Dss,
                         ScoringRule::Is1 { alpha: 0.2 }, ScoringRule::Is2 { alpha: 0.3 }] {
                let summary = node_total_score(&rule, &v).unwrap();
                let pointwise: f64 = v.iter().map(|&y| score(&rule, &f, y).unwrap()).sum();
                prop_assert!((summary.total - pointwise).abs() <= 1e-9 * (1.0 + pointwise.abs()),
                    "{rule}: {} vs {}", summary.total, pointwise);
                prop_assert_eq!(summary.total, summary.per_point_mean * summary.n as f64);
            }
        }
    }
}
