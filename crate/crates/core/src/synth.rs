//! Seeded generators for piecewise response designs on one predictor.
//!
//! `x` is uniform over the spec's interval and `y` is drawn from the
//! distribution of the region containing `x`. The first region is closed,
//! later regions are left-open and right-closed, so the boundary value
//! belongs to the region on its left.
//!
//! Random numbers come from ChaCha8 seeded with `seed_from_u64`, whose
//! output is fixed across platforms; distributions come from `rand_distr`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Exp, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "lowercase")]
pub enum ResponseDist {
    /// Log-normal with the given mean and standard deviation of `ln y`.
    Lognormal { meanlog: f64, sdlog: f64 },
    Normal { mean: f64, sd: f64 },
    Exponential { rate: f64 },
}

impl ResponseDist {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            ResponseDist::Lognormal { meanlog, sdlog } => meanlog.is_finite() && sdlog > 0.0 && sdlog.is_finite(),
            ResponseDist::Normal { mean, sd } => mean.is_finite() && sd > 0.0 && sd.is_finite(),
            ResponseDist::Exponential { rate } => rate > 0.0 && rate.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid distribution {self:?}")))
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        // parameters are validated when the spec is built
        match *self {
            ResponseDist::Lognormal { meanlog, sdlog } => LogNormal::new(meanlog, sdlog).unwrap().sample(rng),
            ResponseDist::Normal { mean, sd } => Normal::new(mean, sd).unwrap().sample(rng),
            ResponseDist::Exponential { rate } => Exp::new(rate).unwrap().sample(rng),
        }
    }

    /// Exact `E[y^k]`.
    pub fn raw_moment(&self, k: u32) -> f64 {
        let kf = k as f64;
        match *self {
            ResponseDist::Lognormal { meanlog, sdlog } => (kf * meanlog + kf * kf * sdlog * sdlog / 2.0).exp(),
            ResponseDist::Normal { mean, sd } => {
                // E[(mu + sd Z)^k] with E[Z^2] = 1, E[Z^4] = 3
                let v = sd * sd;
                match k {
                    0 => 1.0,
                    1 => mean,
                    2 => mean * mean + v,
                    3 => mean.powi(3) + 3.0 * mean * v,
                    4 => mean.powi(4) + 6.0 * mean * mean * v + 3.0 * v * v,
                    _ => f64::NAN,
                }
            }
            ResponseDist::Exponential { rate } => (1..=k).map(f64::from).product::<f64>() / rate.powi(k as i32),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub lower: f64,
    pub upper: f64,
    #[serde(flatten)]
    pub dist: ResponseDist,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<RegionSpec>", into = "Vec<RegionSpec>")]
pub struct PiecewiseSpec {
    regions: Vec<RegionSpec>,
}

impl TryFrom<Vec<RegionSpec>> for PiecewiseSpec {
    type Error = Error;

    fn try_from(regions: Vec<RegionSpec>) -> Result<Self> {
        PiecewiseSpec::new(regions)
    }
}

impl From<PiecewiseSpec> for Vec<RegionSpec> {
    fn from(spec: PiecewiseSpec) -> Self {
        spec.regions
    }
}

fn lgn(lower: f64, upper: f64, meanlog: f64, sdlog: f64) -> RegionSpec {
    RegionSpec {
        lower,
        upper,
        dist: ResponseDist::Lognormal { meanlog, sdlog },
    }
}

impl PiecewiseSpec {
    /// Regions must be ordered, non-empty and contiguous.
    pub fn new(regions: Vec<RegionSpec>) -> Result<Self> {
        if regions.is_empty() {
            return Err(Error::InvalidParameter("spec needs at least one region".into()));
        }
        for (i, r) in regions.iter().enumerate() {
            if !(r.lower.is_finite() && r.upper.is_finite() && r.lower < r.upper) {
                return Err(Error::InvalidParameter(format!("region {i} has bounds {}..{}", r.lower, r.upper)));
            }
            r.dist.validate()?;
            if i > 0 && regions[i - 1].upper != r.lower {
                return Err(Error::InvalidParameter(format!("region {i} does not start where region {} ends", i - 1)));
            }
        }
        Ok(PiecewiseSpec { regions })
    }

    /// Four log-normal regions whose means differ sharply.
    pub fn easy() -> Self {
        PiecewiseSpec::new(vec![
            lgn(-1.0, -0.5, 2.0, 1.0 / 2.0),
            lgn(-0.5, 0.0, 3.0, 1.0 / 3.0),
            lgn(0.0, 0.5, 4.0, 1.0 / 4.0),
            lgn(0.5, 1.0, 5.0, 1.0 / 5.0),
        ])
        .expect("valid preset")
    }

    /// Four log-normal regions with similar first two moments.
    pub fn hard() -> Self {
        PiecewiseSpec::new(vec![
            lgn(-1.0, -0.5, 0.5, 0.5),
            lgn(-0.5, 0.0, 1.0 / 3.0, 0.6),
            lgn(0.0, 0.5, 0.25, 0.3),
            lgn(0.5, 1.0, 0.2, 0.3),
        ])
        .expect("valid preset")
    }

    /// Normal(1, 2) on `[-1, 0]`, Exponential(1) on `(0, 1]`.
    pub fn toy() -> Self {
        PiecewiseSpec::new(vec![
            RegionSpec {
                lower: -1.0,
                upper: 0.0,
                dist: ResponseDist::Normal { mean: 1.0, sd: 2.0 },
            },
            RegionSpec {
                lower: 0.0,
                upper: 1.0,
                dist: ResponseDist::Exponential { rate: 1.0 },
            },
        ])
        .expect("valid preset")
    }

    /// `easy`, `hard` or `toy`.
    pub fn preset(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "easy" => Ok(Self::easy()),
            "hard" => Ok(Self::hard()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::InvalidParameter(format!(
                "unknown preset '{other}' (expected easy, hard or toy)"
            ))),
        }
    }

    pub fn regions(&self) -> &[RegionSpec] {
        &self.regions
    }

    pub fn lower(&self) -> f64 {
        self.regions[0].lower
    }

    pub fn upper(&self) -> f64 {
        self.regions[self.regions.len() - 1].upper
    }

    /// Interior region boundaries.
    pub fn boundaries(&self) -> Vec<f64> {
        self.regions[..self.regions.len() - 1].iter().map(|r| r.upper).collect()
    }

    pub fn region_of(&self, x: f64) -> Option<usize> {
        if x < self.lower() || x > self.upper() {
            return None;
        }
        self.regions.iter().position(|r| x <= r.upper)
    }
}

/// `n` rows with predictor `x` and response `y`.
pub fn generate(spec: &PiecewiseSpec, n: usize, seed: u64) -> Result<Dataset> {
    let (x, y) = generate_columns(spec, n, seed)?;
    Dataset::from_numeric(&["x"], vec![x], y, "y")
}

pub(crate) fn generate_columns(spec: &PiecewiseSpec, n: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(Error::InvalidParameter("n must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (spec.lower(), spec.upper());
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.random_range(lo..hi);
        let region = spec.region_of(x).expect("x drawn inside the spec interval");
        ys.push(spec.regions[region].dist.sample(&mut rng));
        xs.push(x);
    }
    Ok((xs, ys))
}

/// Monte Carlo estimates of `E[y^k]`, `k = 1, 2, 3`, with standard errors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MomentEstimate {
    pub moments: [f64; 3],
    pub std_errors: [f64; 3],
    pub n: usize,
}

pub fn moment_oracle(spec: &PiecewiseSpec, region: usize, n_mc: usize, seed: u64) -> Result<MomentEstimate> {
    let r = spec
        .regions
        .get(region)
        .ok_or_else(|| Error::InvalidParameter(format!("region {region} out of range")))?;
    if n_mc < 10_000 {
        return Err(Error::InvalidParameter(format!("need at least 10^4 Monte Carlo draws, got {n_mc}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<f64> = (0..n_mc).map(|_| r.dist.sample(&mut rng)).collect();
    let mut moments = [0.0; 3];
    let mut std_errors = [0.0; 3];
    let nf = n_mc as f64;
    for k in 0..3 {
        let vals: Vec<f64> = draws.iter().map(|y| y.powi(k as i32 + 1)).collect();
        let m = vals.iter().sum::<f64>() / nf;
        let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (nf - 1.0);
        moments[k] = m;
        std_errors[k] = (var / nf).sqrt();
    }
    Ok(MomentEstimate {
        moments,
        std_errors,
        n: n_mc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_tile_their_interval() {
        assert_eq!(PiecewiseSpec::easy().boundaries(), vec![-0.5, 0.0, 0.5]);
        assert_eq!(PiecewiseSpec::hard().boundaries(), vec![-0.5, 0.0, 0.5]);
        assert_eq!(PiecewiseSpec::toy().boundaries(), vec![0.0]);
        for s in [PiecewiseSpec::easy(), PiecewiseSpec::hard(), PiecewiseSpec::toy()] {
            assert_eq!((s.lower(), s.upper()), (-1.0, 1.0));
        }
        assert!(PiecewiseSpec::preset("medium").is_err());
    }

    #[test]
    fn boundary_membership() {
        let toy = PiecewiseSpec::toy();
        assert_eq!(toy.region_of(-1.0), Some(0));
        assert_eq!(toy.region_of(0.0), Some(0));
        assert_eq!(toy.region_of(1e-12), Some(1));
        assert_eq!(toy.region_of(1.0), Some(1));
        assert_eq!(toy.region_of(1.5), None);
        let easy = PiecewiseSpec::easy();
        assert_eq!(easy.region_of(-0.5), Some(0));
        assert_eq!(easy.region_of(0.5), Some(2));
    }

    #[test]
    fn invalid_specs() {
        let gap = vec![lgn(-1.0, 0.0, 0.0, 1.0), lgn(0.1, 1.0, 0.0, 1.0)];
        assert!(PiecewiseSpec::new(gap).is_err());
        assert!(PiecewiseSpec::new(vec![lgn(0.0, 0.0, 0.0, 1.0)]).is_err());
        assert!(PiecewiseSpec::new(vec![lgn(0.0, 1.0, 0.0, -1.0)]).is_err());
        assert!(PiecewiseSpec::new(vec![]).is_err());
        assert!(generate(&PiecewiseSpec::toy(), 0, 1).is_err());
    }

    #[test]
    fn toy_rows_follow_region() {
        let ds = generate(&PiecewiseSpec::toy(), 4, 11).unwrap();
        assert_eq!(ds.n_rows(), 4);
        let ds = generate(&PiecewiseSpec::toy(), 2000, 11).unwrap();
        let crate::data::ColumnData::Numeric(x) = &ds.column(0).data else { panic!() };
        // Exponential responses are never negative
        for (xi, yi) in x.iter().zip(ds.response()) {
            if *xi > 0.0 {
                assert!(*yi >= 0.0);
            }
        }
        assert!(x.iter().zip(ds.response()).any(|(xi, yi)| *xi <= 0.0 && *yi < 0.0));
    }

    #[test]
    fn reproducible_and_seed_sensitive() {
        let a = generate(&PiecewiseSpec::hard(), 300, 7).unwrap();
        let b = generate(&PiecewiseSpec::hard(), 300, 7).unwrap();
        let c = generate(&PiecewiseSpec::hard(), 300, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn region_dispatch_with_marker_distributions() {
        // widely separated normals identify which region produced each y
        let spec = PiecewiseSpec::new(vec![
            RegionSpec { lower: 0.0, upper: 1.0, dist: ResponseDist::Normal { mean: 0.0, sd: 1e-3 } },
            RegionSpec { lower: 1.0, upper: 2.0, dist: ResponseDist::Normal { mean: 100.0, sd: 1e-3 } },
            RegionSpec { lower: 2.0, upper: 3.0, dist: ResponseDist::Normal { mean: 200.0, sd: 1e-3 } },
        ])
        .unwrap();
        let ds = generate(&spec, 3000, 5).unwrap();
        let crate::data::ColumnData::Numeric(x) = &ds.column(0).data else { panic!() };
        for (xi, yi) in x.iter().zip(ds.response()) {
            let region = spec.region_of(*xi).unwrap();
            assert!((yi - 100.0 * region as f64).abs() < 0.1);
        }
    }

    #[test]
    fn lognormal_log_moments() {
        let spec = PiecewiseSpec::easy();
        let dist = spec.regions()[1].dist;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000;
        let logs: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng).ln()).collect();
        let m = logs.iter().sum::<f64>() / n as f64;
        let sd = (logs.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
        let sigma = 1.0 / 3.0;
        let se_mean = sigma / (n as f64).sqrt();
        let se_sd = sigma / (2.0 * n as f64).sqrt();
        assert!((m - 3.0).abs() < 4.0 * se_mean, "meanlog {m}");
        assert!((sd - sigma).abs() < 4.0 * se_sd, "sdlog {sd}");
    }

    #[test]
    fn analytic_moments() {
        let easy = PiecewiseSpec::easy();
        let m2 = easy.regions()[1].dist.raw_moment(1);
        assert!((m2 - (3.0f64 + 1.0 / 18.0).exp()).abs() < 1e-12);
        assert!((easy.regions()[2].dist.raw_moment(1) - 56.33).abs() < 0.01);
        let hard = PiecewiseSpec::hard();
        assert!((hard.regions()[0].dist.raw_moment(1) - 0.625f64.exp()).abs() < 1e-12);
        let e = ResponseDist::Exponential { rate: 2.0 };
        assert_eq!(e.raw_moment(3), 6.0 / 8.0);
        let nrm = ResponseDist::Normal { mean: 1.0, sd: 2.0 };
        assert_eq!(nrm.raw_moment(3), 1.0 + 12.0);
    }

    #[test]
    fn oracle_brackets_analytic_moment() {
        let spec = PiecewiseSpec::easy();
        for region in 1..4 {
            let est = moment_oracle(&spec, region, 50_000, 1234 + region as u64).unwrap();
            let truth = spec.regions()[region].dist.raw_moment(1);
            assert!((est.moments[0] - truth).abs() < 4.0 * est.std_errors[0]);
        }
        assert!(moment_oracle(&spec, 0, 100, 1).is_err());
        assert!(moment_oracle(&spec, 9, 10_000, 1).is_err());
    }
}
