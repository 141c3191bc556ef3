//! Replicated benchmark experiments comparing trees built with different
//! scoring rules, plus the statistics computed from their results.
//!
//! One experiment fits a tree for every `(build rule, κ)` cell of every
//! replicate and scores it under every evaluation rule, in sample (`I`) and
//! out of sample (`O`). All cells of a replicate share the same training and
//! test rows. Scores are sums over rows.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{self, ColumnData, Dataset};
use crate::score::{self, ScoringRule};
use crate::synth::{self, PiecewiseSpec, RegionSpec};
use crate::tree::{self, PredictiveTree, SplitKind, TreeConfig};
use crate::{Error, Result};

/// Added to `base_seed` to seed the shared synthetic test set.
pub const TEST_SEED_OFFSET: u64 = 0x5EED_7E57_0000_0000;

/// Two-sided coverage of the OD* confidence intervals.
pub const CONFIDENCE_LEVEL: f64 = 0.95;

fn default_depth() -> usize {
    4
}
fn default_min_node() -> usize {
    50
}
fn default_step() -> f64 {
    0.05
}
fn default_test_size() -> usize {
    1000
}
fn default_margin() -> f64 {
    0.02
}

/// Synthetic design given by preset name or by explicit regions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpecSource {
    Preset(String),
    Regions(Vec<RegionSpec>),
}

impl SpecSource {
    pub fn resolve(&self) -> Result<PiecewiseSpec> {
        match self {
            SpecSource::Preset(name) => PiecewiseSpec::preset(name),
            SpecSource::Regions(r) => PiecewiseSpec::new(r.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Fresh training draws per replicate (seed `base_seed + b`) and one
    /// shared test set.
    Synthetic {
        spec: SpecSource,
        train_sizes: Vec<usize>,
        #[serde(default = "default_test_size")]
        test_size: usize,
        /// Defaults to `base_seed + TEST_SEED_OFFSET`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_seed: Option<u64>,
    },
    /// Resamples of a CSV file; rows left out form the test set. Without
    /// `train_fraction` the resample is a bootstrap of size `n`, otherwise a
    /// subsample without replacement of that fraction.
    BootstrapCsv {
        path: PathBuf,
        response: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_fraction: Option<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    pub rules: Vec<ScoringRule>,
    pub grid_step: f64,
    /// Grid bounds; default to the range of the predictor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    pub true_splits: Vec<f64>,
    #[serde(default = "default_margin")]
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub build_scores: Vec<ScoringRule>,
    pub eval_scores: Vec<ScoringRule>,
    pub kappas: Vec<f64>,
    pub replicates: usize,
    pub data: DataSource,
    #[serde(default = "default_depth")]
    pub max_depth: usize,
    #[serde(default = "default_min_node")]
    pub min_node_size: usize,
    #[serde(default = "default_step")]
    pub quantile_step: f64,
    #[serde(default)]
    pub base_seed: u64,
    /// Criterion curves over each replicate's training set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scan: Option<ScanConfig>,
    /// Split recovery of the κ* trees; single-predictor data only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit: Option<AuditConfig>,
}

fn check_rules(label: &str, rules: &[ScoringRule]) -> Result<()> {
    if rules.is_empty() {
        return Err(Error::InvalidParameter(format!("{label} must not be empty")));
    }
    let mut seen = BTreeSet::new();
    for r in rules {
        r.validate()?;
        if !seen.insert(r.to_string()) {
            return Err(Error::InvalidParameter(format!("{label} lists {r} twice")));
        }
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        check_rules("build_scores", &self.build_scores)?;
        check_rules("eval_scores", &self.eval_scores)?;
        if self.replicates == 0 {
            return Err(Error::InvalidParameter("replicates must be at least 1".into()));
        }
        if self.kappas.is_empty() {
            return Err(Error::InvalidParameter("kappas must not be empty".into()));
        }
        let mut seen = BTreeSet::new();
        for &k in &self.kappas {
            if !(0.0..=1.0).contains(&k) {
                return Err(Error::InvalidParameter(format!("kappa {k} outside [0, 1]")));
            }
            if !seen.insert(k.to_bits()) {
                return Err(Error::InvalidParameter(format!("kappa {k} listed twice")));
            }
        }
        self.tree_config(self.build_scores[0], self.kappas[0]).validate()?;
        match &self.data {
            DataSource::Synthetic {
                spec,
                train_sizes,
                test_size,
                ..
            } => {
                spec.resolve()?;
                if train_sizes.is_empty() || train_sizes.contains(&0) {
                    return Err(Error::InvalidParameter("train_sizes must be non-empty and positive".into()));
                }
                if *test_size == 0 {
                    return Err(Error::InvalidParameter("test_size must be positive".into()));
                }
                let distinct: BTreeSet<_> = train_sizes.iter().collect();
                if distinct.len() != train_sizes.len() {
                    return Err(Error::InvalidParameter("train_sizes has duplicates".into()));
                }
            }
            DataSource::BootstrapCsv { train_fraction, .. } => {
                if let Some(f) = train_fraction {
                    if !(*f > 0.0 && *f < 1.0) {
                        return Err(Error::InvalidParameter(format!("train_fraction {f} outside (0, 1)")));
                    }
                }
            }
        }
        if let Some(scan) = &self.scan {
            check_rules("scan.rules", &scan.rules)?;
            if !(scan.grid_step > 0.0 && scan.grid_step.is_finite()) {
                return Err(Error::InvalidParameter("scan.grid_step must be positive".into()));
            }
        }
        if let Some(audit) = &self.audit {
            if !(audit.margin >= 0.0 && audit.margin.is_finite()) {
                return Err(Error::InvalidParameter("audit.margin must be non-negative".into()));
            }
        }
        Ok(())
    }

    pub fn tree_config(&self, rule: ScoringRule, kappa: f64) -> TreeConfig {
        TreeConfig::new(rule)
            .with_depth(self.max_depth)
            .with_min_node_size(self.min_node_size)
            .with_quantile_step(self.quantile_step)
            .with_kappa(kappa)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn test_seed(&self) -> Option<u64> {
        match &self.data {
            DataSource::Synthetic { test_seed, .. } => {
                Some(test_seed.unwrap_or(self.base_seed.wrapping_add(TEST_SEED_OFFSET)))
            }
            DataSource::BootstrapCsv { .. } => None,
        }
    }

    /// Parses JSON, or TOML when the text does not start with `{`.
    pub fn from_text(text: &str) -> Result<Self> {
        let config: ExperimentConfig = if text.trim_start().starts_with('{') {
            serde_json::from_str(text)?
        } else {
            toml::from_str(text).map_err(|e| Error::InvalidParameter(format!("config: {e}")))?
        };
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_text(&text)
    }
}

/// Provenance written as the first line of every output file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Metadata {
    pub version: String,
    pub config_sha256: String,
    pub base_seed: u64,
    pub test_seed: Option<u64>,
}

impl Metadata {
    pub fn for_config(config: &ExperimentConfig) -> Self {
        Metadata {
            version: format!("scoretree-{}", env!("CARGO_PKG_VERSION")),
            config_sha256: config.hash(),
            base_seed: config.base_seed,
            test_seed: config.test_seed(),
        }
    }

    pub fn header(&self) -> String {
        let mut s = format!(
            "# {} config_sha256={} base_seed={} replicate_seed=base_seed+b",
            self.version, self.config_sha256, self.base_seed
        );
        if let Some(t) = self.test_seed {
            let _ = write!(s, " test_seed={t}");
        }
        s
    }

    fn parse_header(line: &str) -> Option<Self> {
        let mut tokens = line.strip_prefix('#')?.split_whitespace();
        let version = tokens.next()?.to_string();
        let mut meta = Metadata {
            version,
            config_sha256: String::new(),
            base_seed: 0,
            test_seed: None,
        };
        for t in tokens {
            match t.split_once('=') {
                Some(("config_sha256", v)) => meta.config_sha256 = v.to_string(),
                Some(("base_seed", v)) => meta.base_seed = v.parse().ok()?,
                Some(("test_seed", v)) => meta.test_seed = Some(v.parse().ok()?),
                _ => {}
            }
        }
        Some(meta)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub replicate: usize,
    pub train_size: usize,
    pub build: ScoringRule,
    pub eval: ScoringRule,
    pub kappa: f64,
    pub in_sample: f64,
    pub out_sample: f64,
}

type CellKey = (usize, usize, String, u64, String);

fn key(train_size: usize, replicate: usize, build: &ScoringRule, kappa: f64, eval: &ScoringRule) -> CellKey {
    (train_size, replicate, build.to_string(), kappa.to_bits(), eval.to_string())
}

#[derive(Clone, Debug)]
pub struct ExperimentResults {
    pub metadata: Metadata,
    records: Vec<Record>,
    index: HashMap<CellKey, usize>,
}

impl PartialEq for ExperimentResults {
    fn eq(&self, other: &Self) -> bool {
        self.metadata == other.metadata && self.records == other.records
    }
}

impl ExperimentResults {
    /// Rejects non-finite scores and duplicate cells.
    pub fn new(metadata: Metadata, records: Vec<Record>) -> Result<Self> {
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if !(r.in_sample.is_finite() && r.out_sample.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "non-finite score in replicate {} build {} eval {} kappa {}",
                    r.replicate, r.build, r.eval, r.kappa
                )));
            }
            if index
                .insert(key(r.train_size, r.replicate, &r.build, r.kappa, &r.eval), i)
                .is_some()
            {
                return Err(Error::InvalidParameter(format!(
                    "duplicate record for replicate {} build {} eval {} kappa {}",
                    r.replicate, r.build, r.eval, r.kappa
                )));
            }
        }
        Ok(ExperimentResults {
            metadata,
            records,
            index,
        })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn get(
        &self,
        train_size: usize,
        replicate: usize,
        build: &ScoringRule,
        kappa: f64,
        eval: &ScoringRule,
    ) -> Option<&Record> {
        self.index
            .get(&key(train_size, replicate, build, kappa, eval))
            .map(|&i| &self.records[i])
    }

    fn out_sample(
        &self,
        train_size: usize,
        replicate: usize,
        build: &ScoringRule,
        kappa: f64,
        eval: &ScoringRule,
    ) -> Result<f64> {
        self.get(train_size, replicate, build, kappa, eval)
            .map(|r| r.out_sample)
            .ok_or_else(|| {
                Error::MissingCell(format!(
                    "train_size {train_size}, replicate {replicate}, build {build}, kappa {kappa}, eval {eval}"
                ))
            })
    }

    /// Train sizes in first-seen order.
    pub fn train_sizes(&self) -> Vec<usize> {
        let mut seen = BTreeSet::new();
        self.records
            .iter()
            .filter(|r| seen.insert(r.train_size))
            .map(|r| r.train_size)
            .collect()
    }

    /// Number of replicates recorded for a train size.
    pub fn replicates(&self, train_size: usize) -> usize {
        self.records
            .iter()
            .filter(|r| r.train_size == train_size)
            .map(|r| r.replicate + 1)
            .max()
            .unwrap_or(0)
    }

    /// κ values recorded for `build` in ascending order.
    pub fn kappas(&self, train_size: usize, build: &ScoringRule) -> Vec<f64> {
        let mut ks: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.train_size == train_size && r.build == *build)
            .map(|r| r.kappa)
            .collect();
        ks.sort_by(f64::total_cmp);
        ks.dedup_by(|a, b| a.to_bits() == b.to_bits());
        ks
    }

    /// Build and eval rules in first-seen order.
    pub fn rules(&self) -> (Vec<ScoringRule>, Vec<ScoringRule>) {
        let mut builds = Vec::new();
        let mut evals = Vec::new();
        for r in &self.records {
            if !builds.contains(&r.build) {
                builds.push(r.build);
            }
            if !evals.contains(&r.eval) {
                evals.push(r.eval);
            }
        }
        (builds, evals)
    }

    /// Every train size must hold exactly `r × |build| × |κ| × |eval|` records.
    pub fn check_cardinality(&self, config: &ExperimentConfig, train_sizes: &[usize]) -> Result<()> {
        let per_size = config.replicates * config.build_scores.len() * config.kappas.len() * config.eval_scores.len();
        for &n in train_sizes {
            let found = self.records.iter().filter(|r| r.train_size == n).count();
            if found != per_size {
                return Err(Error::MissingCell(format!(
                    "train_size {n} has {found} records, expected {per_size}"
                )));
            }
            for b in 0..config.replicates {
                for build in &config.build_scores {
                    for &k in &config.kappas {
                        for eval in &config.eval_scores {
                            self.out_sample(n, b, build, k, eval)?;
                        }
                    }
                }
            }
        }
        if self.records.len() != per_size * train_sizes.len() {
            return Err(Error::MissingCell("records for unexpected train sizes".into()));
        }
        Ok(())
    }
}

/// One fitted tree kept for auditing and export.
#[derive(Clone, Debug)]
pub struct FittedCell {
    pub train_size: usize,
    pub replicate: usize,
    pub build: ScoringRule,
    pub kappa: f64,
    pub tree: PredictiveTree,
}

/// Training and test rows of one replicate.
#[derive(Clone, Debug)]
pub struct ReplicateData {
    pub train_size: usize,
    pub replicate: usize,
    pub train: Dataset,
    pub test: Dataset,
}

/// Materializes every replicate's data.
pub fn replicate_data(config: &ExperimentConfig) -> Result<Vec<ReplicateData>> {
    config.validate()?;
    match &config.data {
        DataSource::Synthetic {
            spec,
            train_sizes,
            test_size,
            ..
        } => {
            let spec = spec.resolve()?;
            let test = synth::generate(&spec, *test_size, config.test_seed().expect("synthetic"))?;
            let jobs: Vec<(usize, usize)> = train_sizes
                .iter()
                .flat_map(|&n| (0..config.replicates).map(move |b| (n, b)))
                .collect();
            jobs.into_par_iter()
                .map(|(n, b)| {
                    Ok(ReplicateData {
                        train_size: n,
                        replicate: b,
                        train: synth::generate(&spec, n, config.base_seed.wrapping_add(b as u64))?,
                        test: test.clone(),
                    })
                })
                .collect()
        }
        DataSource::BootstrapCsv {
            path,
            response,
            train_fraction,
        } => {
            let full = data::load_csv(path, response)?;
            (0..config.replicates)
                .into_par_iter()
                .map(|b| {
                    let (train_rows, test_rows) =
                        resample_rows(full.n_rows(), *train_fraction, config.base_seed.wrapping_add(b as u64));
                    if test_rows.is_empty() {
                        return Err(Error::InvalidParameter(format!("replicate {b} has no out-of-bag rows")));
                    }
                    Ok(ReplicateData {
                        train_size: train_rows.len(),
                        replicate: b,
                        train: full.take_rows(&train_rows),
                        test: full.take_rows(&test_rows),
                    })
                })
                .collect()
        }
    }
}

/// Training rows (with repetition for a bootstrap) and the rows left out.
pub fn resample_rows(n: usize, train_fraction: Option<f64>, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match train_fraction {
        None => {
            let train: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let mut in_bag = vec![false; n];
            for &i in &train {
                in_bag[i] = true;
            }
            let oob = (0..n).filter(|&i| !in_bag[i]).collect();
            (train, oob)
        }
        Some(f) => {
            let mut rows: Vec<usize> = (0..n).collect();
            rows.shuffle(&mut rng);
            let m = ((n as f64 * f).round() as usize).clamp(1, n);
            let mut train = rows[..m].to_vec();
            let mut test = rows[m..].to_vec();
            train.sort_unstable();
            test.sort_unstable();
            (train, test)
        }
    }
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResults> {
    run_experiment_with_models(config, false).map(|(r, _)| r)
}

/// Runs every cell; with `keep_models` all fitted trees are returned too.
pub fn run_experiment_with_models(
    config: &ExperimentConfig,
    keep_models: bool,
) -> Result<(ExperimentResults, Vec<FittedCell>)> {
    let replicates = replicate_data(config)?;
    run_on_replicates(config, &replicates, keep_models)
}

pub fn run_on_replicates(
    config: &ExperimentConfig,
    replicates: &[ReplicateData],
    keep_models: bool,
) -> Result<(ExperimentResults, Vec<FittedCell>)> {
    let cells: Vec<(ScoringRule, f64)> = config
        .build_scores
        .iter()
        .flat_map(|b| config.kappas.iter().map(move |k| (*b, *k)))
        .collect();
    let jobs: Vec<(&ReplicateData, ScoringRule, f64)> = replicates
        .iter()
        .flat_map(|rep| cells.iter().map(move |(b, k)| (rep, *b, *k)))
        .collect();
    let outputs = jobs
        .into_par_iter()
        .map(|(rep, build, kappa)| {
            let wrap = |e: Error| Error::Fit {
                replicate: rep.replicate,
                build: build.to_string(),
                kappa,
                source: Box::new(e),
            };
            let tree = tree::fit(&rep.train, &config.tree_config(build, kappa)).map_err(wrap)?;
            let train_leaves = tree.leaf_assignments(&rep.train).map_err(wrap)?;
            let test_leaves = tree.leaf_assignments(&rep.test).map_err(wrap)?;
            let mut records = Vec::with_capacity(config.eval_scores.len());
            for eval in &config.eval_scores {
                records.push(Record {
                    replicate: rep.replicate,
                    train_size: rep.train_size,
                    build,
                    eval: *eval,
                    kappa,
                    in_sample: tree
                        .evaluate_assigned(&train_leaves, rep.train.response(), eval)
                        .map_err(wrap)?,
                    out_sample: tree
                        .evaluate_assigned(&test_leaves, rep.test.response(), eval)
                        .map_err(wrap)?,
                });
            }
            let fitted = keep_models.then_some(FittedCell {
                train_size: rep.train_size,
                replicate: rep.replicate,
                build,
                kappa,
                tree,
            });
            Ok((records, fitted))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut records = Vec::new();
    let mut models = Vec::new();
    for (r, m) in outputs {
        records.extend(r);
        models.extend(m);
    }
    let results = ExperimentResults::new(Metadata::for_config(config), records)?;
    Ok((results, models))
}

/// `OD_b = O_b^eval(eval-built, κ) − O_b^eval(build-built, κ)` for each replicate.
/// Negative values mean the tree built with `eval` wins under `eval`.
pub fn paired_differences(
    results: &ExperimentResults,
    train_size: usize,
    eval: &ScoringRule,
    build: &ScoringRule,
    kappa: f64,
) -> Result<Vec<f64>> {
    let r = results.replicates(train_size);
    if r == 0 {
        return Err(Error::MissingCell(format!("no records for train_size {train_size}")));
    }
    (0..r)
        .map(|b| {
            Ok(results.out_sample(train_size, b, eval, kappa, eval)?
                - results.out_sample(train_size, b, build, kappa, eval)?)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct KappaTuning {
    pub kappa_star: f64,
    /// `(κ, mean out-of-sample self-score)` in ascending κ.
    pub means: Vec<(f64, f64)>,
}

/// κ minimizing the mean out-of-sample self-score; ties go to the larger κ.
pub fn tune_kappa(results: &ExperimentResults, train_size: usize, rule: &ScoringRule) -> Result<KappaTuning> {
    let r = results.replicates(train_size);
    let kappas = results.kappas(train_size, rule);
    if r == 0 || kappas.is_empty() {
        return Err(Error::MissingCell(format!("no {rule} cells for train_size {train_size}")));
    }
    let mut means = Vec::with_capacity(kappas.len());
    for &k in &kappas {
        let mut sum = 0.0;
        for b in 0..r {
            sum += results.out_sample(train_size, b, rule, k, rule)?;
        }
        means.push((k, sum / r as f64));
    }
    let mut best = means[0];
    for &(k, m) in &means[1..] {
        if m <= best.1 {
            best = (k, m);
        }
    }
    Ok(KappaTuning {
        kappa_star: best.0,
        means,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimalDifferences {
    pub kappa_eval: f64,
    pub kappa_build: f64,
    pub differences: Vec<f64>,
    pub mean: f64,
    /// Student-t interval; `None` with fewer than two replicates.
    pub confidence_interval: Option<(f64, f64)>,
    /// Fraction of replicates with `O(eval-built) <= O(build-built)`.
    pub success_probability: f64,
}

/// Paired differences with each rule at its own κ*.
pub fn optimal_paired_differences(
    results: &ExperimentResults,
    train_size: usize,
    eval: &ScoringRule,
    build: &ScoringRule,
) -> Result<OptimalDifferences> {
    let kappa_eval = tune_kappa(results, train_size, eval)?.kappa_star;
    let kappa_build = tune_kappa(results, train_size, build)?.kappa_star;
    let r = results.replicates(train_size);
    let mut differences = Vec::with_capacity(r);
    let mut wins = 0usize;
    for b in 0..r {
        let own = results.out_sample(train_size, b, eval, kappa_eval, eval)?;
        let other = results.out_sample(train_size, b, build, kappa_build, eval)?;
        if own <= other {
            wins += 1;
        }
        differences.push(own - other);
    }
    let mean = score::mean(&differences);
    Ok(OptimalDifferences {
        kappa_eval,
        kappa_build,
        confidence_interval: t_interval(&differences, CONFIDENCE_LEVEL),
        mean,
        success_probability: wins as f64 / r as f64,
        differences,
    })
}

fn sample_sd(values: &[f64], mean: f64) -> f64 {
    let n = values.len() as f64;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Two-sided Student-t interval for the mean with `n - 1` degrees of freedom.
pub fn t_interval(values: &[f64], level: f64) -> Option<(f64, f64)> {
    if values.len() < 2 {
        return None;
    }
    let mean = score::mean(values);
    let se = sample_sd(values, mean) / (values.len() as f64).sqrt();
    if se == 0.0 {
        return Some((mean, mean));
    }
    let t = StudentsT::new(0.0, 1.0, (values.len() - 1) as f64).ok()?;
    let half = t.inverse_cdf(0.5 + level / 2.0) * se;
    Some((mean - half, mean + half))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TestOutcome {
    pub mean_difference: f64,
    pub t_statistic: f64,
    /// `P(T >= t)` under `T ~ t(r - 1)`.
    pub p_value: f64,
    /// All differences equal; `p_value` is then 1 unless the mean is positive.
    pub zero_variance: bool,
}

/// One-sided paired t-test on `d_b = O(eval-built) − O(build-built)`.
/// A small p-value is evidence that the eval-built tree scored worse.
pub fn hypothesis_test(
    results: &ExperimentResults,
    train_size: usize,
    eval: &ScoringRule,
    build: &ScoringRule,
    kappa: f64,
) -> Result<TestOutcome> {
    paired_t_test(&paired_differences(results, train_size, eval, build, kappa)?)
}

pub fn paired_t_test(differences: &[f64]) -> Result<TestOutcome> {
    let r = differences.len();
    if r < 2 {
        return Err(Error::TooFewReplicates { needed: 2, found: r });
    }
    let mean = score::mean(differences);
    let sd = sample_sd(differences, mean);
    // a spread at rounding level of the mean is no spread
    if sd == 0.0 || sd <= 1e-14 * mean.abs() {
        let (t, p) = if mean > 0.0 { (f64::INFINITY, 0.0) } else { (0.0, 1.0) };
        return Ok(TestOutcome {
            mean_difference: mean,
            t_statistic: t,
            p_value: p,
            zero_variance: true,
        });
    }
    let t = mean / (sd / (r as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (r - 1) as f64).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok(TestOutcome {
        mean_difference: mean,
        t_statistic: t,
        p_value: dist.sf(t),
        zero_variance: false,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditReport {
    /// `(true split, fraction of trees with a threshold within the margin)`.
    pub recovery: Vec<(f64, f64)>,
    /// Mean count of thresholds far from every true split.
    pub mean_incorrect: f64,
    pub trees: usize,
}

pub fn split_recovery_audit(trees: &[PredictiveTree], true_splits: &[f64], margin: f64) -> Result<AuditReport> {
    if trees.is_empty() {
        return Err(Error::InvalidParameter("no trees to audit".into()));
    }
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(Error::InvalidParameter(format!("margin {margin} must be non-negative")));
    }
    let mut hits = vec![0usize; true_splits.len()];
    let mut incorrect = 0usize;
    for (i, tree) in trees.iter().enumerate() {
        if tree.features().len() != 1 {
            return Err(Error::InvalidParameter(format!(
                "tree {i} has {} predictors; the audit needs exactly one",
                tree.features().len()
            )));
        }
        let mut thresholds = Vec::new();
        for s in tree.stats().splits {
            match s.kind {
                SplitKind::Threshold(t) => thresholds.push(t),
                SplitKind::CategorySet(_) => {
                    return Err(Error::InvalidParameter(format!("tree {i} has a categorical split")))
                }
            }
        }
        let near = |t: f64, v: f64| (t - v).abs() <= margin;
        for (h, &v) in hits.iter_mut().zip(true_splits) {
            if thresholds.iter().any(|&t| near(t, v)) {
                *h += 1;
            }
        }
        incorrect += thresholds
            .iter()
            .filter(|&&t| !true_splits.iter().any(|&v| near(t, v)))
            .count();
    }
    let n = trees.len() as f64;
    Ok(AuditReport {
        recovery: true_splits.iter().zip(&hits).map(|(&v, &h)| (v, h as f64 / n)).collect(),
        mean_incorrect: incorrect as f64 / n,
        trees: trees.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanResult {
    /// `(s, C(s))` for every grid point leaving both sides non-empty.
    pub points: Vec<(f64, f64)>,
    /// Smallest `s` attaining the minimum.
    pub argmin: Option<(f64, f64)>,
}

/// `lower, lower + step, ...` up to `upper`, computed by multiplication.
pub fn scan_grid(lower: f64, upper: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step.is_finite() && lower.is_finite() && upper.is_finite() && lower <= upper) {
        return Err(Error::InvalidParameter(format!("bad grid {lower}..{upper} by {step}")));
    }
    let count = ((upper - lower) / step + 1e-9).floor() as usize;
    Ok((0..=count).map(|i| lower + i as f64 * step).collect())
}

/// Split objective at each grid point, rows with `x <= s` on the left.
pub fn criterion_scan(dataset: &Dataset, rule: &ScoringRule, grid: &[f64]) -> Result<ScanResult> {
    rule.validate()?;
    if dataset.n_features() != 1 {
        return Err(Error::InvalidParameter(format!(
            "criterion scan needs one predictor, found {}",
            dataset.n_features()
        )));
    }
    let ColumnData::Numeric(x) = &dataset.column(0).data else {
        return Err(Error::InvalidParameter("criterion scan needs a numeric predictor".into()));
    };
    if let Some(row) = x.iter().position(|v| v.is_nan()) {
        return Err(Error::MissingValue {
            column: dataset.column(0).name.clone(),
            row,
        });
    }
    let y = dataset.response();
    let root_mean = score::mean(y);
    let floor = score::variance_floor(score::population_variance(y, root_mean));
    let mut pairs: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let points: Vec<(f64, f64)> = grid
        .par_iter()
        .map(|&s| {
            let cut = pairs.partition_point(|p| p.0 <= s);
            if cut == 0 || cut == pairs.len() {
                return Ok(None);
            }
            let c = tree::split_objective_floored(rule, &ys[..cut], &ys[cut..], floor)?;
            Ok(Some((s, c)))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let argmin = points.iter().fold(None, |best: Option<(f64, f64)>, &(s, c)| match best {
        Some((_, bc)) if bc <= c => best,
        _ => Some((s, c)),
    });
    Ok(ScanResult { points, argmin })
}

/// Trees at each build rule's κ*, grouped by `(train size, build)`.
pub fn kappa_star_models<'a>(
    results: &ExperimentResults,
    models: &'a [FittedCell],
) -> Result<BTreeMap<(usize, String), Vec<&'a FittedCell>>> {
    let mut star = HashMap::new();
    let mut out: BTreeMap<(usize, String), Vec<&FittedCell>> = BTreeMap::new();
    for m in models {
        let k = match star.get(&(m.train_size, m.build.to_string())) {
            Some(k) => *k,
            None => {
                let k = tune_kappa(results, m.train_size, &m.build)?.kappa_star;
                star.insert((m.train_size, m.build.to_string()), k);
                k
            }
        };
        if m.kappa.to_bits() == k.to_bits() {
            out.entry((m.train_size, m.build.to_string())).or_default().push(m);
        }
    }
    for cells in out.values_mut() {
        cells.sort_by_key(|c| c.replicate);
    }
    Ok(out)
}

fn csv_writer<W: Write>(meta: &Metadata, mut w: W, extra_comment: Option<&str>) -> Result<csv::Writer<W>> {
    let io = |e| Error::io("writing header", e);
    writeln!(w, "{}", meta.header()).map_err(io)?;
    if let Some(c) = extra_comment {
        writeln!(w, "# {c}").map_err(io)?;
    }
    Ok(csv::Writer::from_writer(w))
}

fn finish<W: Write>(mut w: csv::Writer<W>) -> Result<()> {
    w.flush().map_err(|e| Error::io("flushing csv", e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_results_csv<W: Write>(results: &ExperimentResults, w: W) -> Result<()> {
    let mut wtr = csv_writer(&results.metadata, w, None)?;
    wtr.write_record(["replicate", "train_size", "build", "eval", "kappa", "in_sample", "out_sample"])?;
    for r in &results.records {
        wtr.write_record([
            r.replicate.to_string(),
            r.train_size.to_string(),
            r.build.to_string(),
            r.eval.to_string(),
            r.kappa.to_string(),
            r.in_sample.to_string(),
            r.out_sample.to_string(),
        ])?;
    }
    finish(wtr)
}

#[derive(Deserialize)]
struct RecordRow {
    replicate: usize,
    train_size: usize,
    build: ScoringRule,
    eval: ScoringRule,
    kappa: f64,
    in_sample: f64,
    out_sample: f64,
}

pub fn read_results_csv<R: Read>(reader: R) -> Result<ExperimentResults> {
    let mut reader = BufReader::new(reader);
    let mut first = String::new();
    reader
        .read_line(&mut first)
        .map_err(|e| Error::io("reading results", e))?;
    let metadata = Metadata::parse_header(first.trim_end())
        .ok_or_else(|| Error::InvalidParameter("results file lacks its provenance header".into()))?;
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
    let mut records = Vec::new();
    for row in rdr.deserialize::<RecordRow>() {
        let row = row?;
        records.push(Record {
            replicate: row.replicate,
            train_size: row.train_size,
            build: row.build,
            eval: row.eval,
            kappa: row.kappa,
            in_sample: row.in_sample,
            out_sample: row.out_sample,
        });
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    ExperimentResults::new(metadata, records)
}

pub fn load_results(path: impl AsRef<Path>) -> Result<ExperimentResults> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    read_results_csv(file)
}

/// Rules present both as build and eval; only these have a κ*.
fn self_scored(results: &ExperimentResults) -> Vec<ScoringRule> {
    let (builds, evals) = results.rules();
    builds.into_iter().filter(|b| evals.contains(b)).collect()
}

pub fn write_kappa_star_csv<W: Write>(results: &ExperimentResults, w: W) -> Result<()> {
    let mut wtr = csv_writer(&results.metadata, w, Some("kappa_star: argmin of mean out-of-sample self-score, ties to larger kappa"))?;
    wtr.write_record(["train_size", "score", "kappa", "mean_out_sample", "is_kappa_star"])?;
    for n in results.train_sizes() {
        for rule in self_scored(results) {
            let tuning = tune_kappa(results, n, &rule)?;
            for (k, m) in &tuning.means {
                wtr.write_record([
                    n.to_string(),
                    rule.to_string(),
                    k.to_string(),
                    m.to_string(),
                    (k.to_bits() == tuning.kappa_star.to_bits()).to_string(),
                ])?;
            }
        }
    }
    finish(wtr)
}

pub fn write_odstar_csv<W: Write>(results: &ExperimentResults, w: W) -> Result<()> {
    let mut wtr = csv_writer(
        &results.metadata,
        w,
        Some("od_star = O(eval-built at kappa*(eval)) - O(build-built at kappa*(build)) under eval; 95% t interval"),
    )?;
    wtr.write_record([
        "train_size",
        "eval",
        "build",
        "kappa_eval",
        "kappa_build",
        "mean",
        "ci_lower",
        "ci_upper",
        "success_probability",
        "replicates",
    ])?;
    let rules = self_scored(results);
    for n in results.train_sizes() {
        for eval in &rules {
            for build in &rules {
                let od = optimal_paired_differences(results, n, eval, build)?;
                wtr.write_record([
                    n.to_string(),
                    eval.to_string(),
                    build.to_string(),
                    od.kappa_eval.to_string(),
                    od.kappa_build.to_string(),
                    od.mean.to_string(),
                    opt(od.confidence_interval.map(|c| c.0)),
                    opt(od.confidence_interval.map(|c| c.1)),
                    od.success_probability.to_string(),
                    od.differences.len().to_string(),
                ])?;
            }
        }
    }
    finish(wtr)
}

pub fn write_pvalues_csv<W: Write>(results: &ExperimentResults, w: W) -> Result<()> {
    let mut wtr = csv_writer(
        &results.metadata,
        w,
        Some("p_value = P(T >= t), paired t on d = O(eval-built) - O(build-built) per replicate; small p: eval-built tree scored worse"),
    )?;
    wtr.write_record([
        "train_size",
        "eval",
        "build",
        "kappa",
        "mean_difference",
        "t_statistic",
        "p_value",
        "zero_variance",
    ])?;
    let (builds, evals) = results.rules();
    for n in results.train_sizes() {
        if results.replicates(n) < 2 {
            continue;
        }
        for eval in evals.iter().filter(|e| builds.contains(e)) {
            for build in builds.iter().filter(|b| *b != eval) {
                for k in results.kappas(n, eval) {
                    let t = hypothesis_test(results, n, eval, build, k)?;
                    wtr.write_record([
                        n.to_string(),
                        eval.to_string(),
                        build.to_string(),
                        k.to_string(),
                        t.mean_difference.to_string(),
                        t.t_statistic.to_string(),
                        t.p_value.to_string(),
                        t.zero_variance.to_string(),
                    ])?;
                }
            }
        }
    }
    finish(wtr)
}

pub fn write_scan_csv<W: Write>(meta: &Metadata, rows: &[(usize, usize, ScoringRule, ScanResult)], w: W) -> Result<()> {
    let mut wtr = csv_writer(meta, w, None)?;
    wtr.write_record(["replicate", "train_size", "rule", "split", "criterion", "is_argmin"])?;
    for (b, n, rule, scan) in rows {
        for &(s, c) in &scan.points {
            let is_min = scan.argmin.is_some_and(|(ms, _)| ms.to_bits() == s.to_bits());
            wtr.write_record([
                b.to_string(),
                n.to_string(),
                rule.to_string(),
                s.to_string(),
                c.to_string(),
                is_min.to_string(),
            ])?;
        }
    }
    finish(wtr)
}

fn create(path: &Path) -> Result<std::io::BufWriter<fs::File>> {
    fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))
}

/// File-system friendly rule label, e.g. `is1-0.2`.
pub fn rule_slug(rule: &ScoringRule) -> String {
    rule.to_string().replace(':', "-")
}

/// Runs `config` and writes the results directory:
/// `results.csv`, `kappa_star.csv`, `odstar.csv`, `pvalues.csv`,
/// optionally `scan.csv` and `audit.csv`, and the κ* trees under
/// `models/n{size}/{build}/rep{b}.json`.
pub fn run_bench(config: &ExperimentConfig, out_dir: impl AsRef<Path>) -> Result<ExperimentResults> {
    let out_dir = out_dir.as_ref();
    let replicates = replicate_data(config)?;
    let (results, models) = run_on_replicates(config, &replicates, true)?;
    let sizes: Vec<usize> = replicates
        .iter()
        .map(|r| r.train_size)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    results.check_cardinality(config, &sizes)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    write_results_csv(&results, create(&out_dir.join("results.csv"))?)?;
    write_kappa_star_csv(&results, create(&out_dir.join("kappa_star.csv"))?)?;
    write_odstar_csv(&results, create(&out_dir.join("odstar.csv"))?)?;
    write_pvalues_csv(&results, create(&out_dir.join("pvalues.csv"))?)?;

    if let Some(scan) = &config.scan {
        let jobs: Vec<(&ReplicateData, ScoringRule)> = replicates
            .iter()
            .flat_map(|rep| scan.rules.iter().map(move |r| (rep, *r)))
            .collect();
        let rows = jobs
            .into_iter()
            .map(|(rep, rule)| {
                let ColumnData::Numeric(x) = &rep.train.column(0).data else {
                    return Err(Error::InvalidParameter("scan needs a numeric predictor".into()));
                };
                let lo = scan.lower.unwrap_or_else(|| x.iter().copied().fold(f64::INFINITY, f64::min));
                let hi = scan.upper.unwrap_or_else(|| x.iter().copied().fold(f64::NEG_INFINITY, f64::max));
                let grid = scan_grid(lo, hi, scan.grid_step)?;
                Ok((rep.replicate, rep.train_size, rule, criterion_scan(&rep.train, &rule, &grid)?))
            })
            .collect::<Result<Vec<_>>>()?;
        write_scan_csv(&results.metadata, &rows, create(&out_dir.join("scan.csv"))?)?;
    }

    let star = kappa_star_models(&results, &models)?;
    for ((n, build), cells) in &star {
        let dir = out_dir
            .join("models")
            .join(format!("n{n}"))
            .join(build.replace(':', "-"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        for c in cells {
            data::save_model(&c.tree, dir.join(format!("rep{}.json", c.replicate)))?;
        }
    }

    if let Some(audit) = &config.audit {
        let mut wtr = csv_writer(&results.metadata, create(&out_dir.join("audit.csv"))?, None)?;
        wtr.write_record(["train_size", "build", "kappa", "true_split", "recovery_rate", "mean_incorrect", "trees"])?;
        for ((n, build), cells) in &star {
            let trees: Vec<PredictiveTree> = cells.iter().map(|c| c.tree.clone()).collect();
            let report = split_recovery_audit(&trees, &audit.true_splits, audit.margin)?;
            for (v, rate) in &report.recovery {
                wtr.write_record([
                    n.to_string(),
                    build.clone(),
                    cells[0].kappa.to_string(),
                    v.to_string(),
                    rate.to_string(),
                    report.mean_incorrect.to_string(),
                    report.trees.to_string(),
                ])?;
            }
        }
        finish(wtr)?;
    }
    Ok(results)
}
