//! Score-minimizing binary trees with ECDF leaves.
//!
//! Growth is breadth first. Node `t` has children `2t + 1` (left, `x <= s`)
//! and `2t + 2`. A node becomes a leaf when it holds at most `N` points, its
//! response is constant, no admissible split exists, the split is rejected by
//! the pruning rule, or the depth limit is reached. A candidate split is
//! admissible only if both children keep at least `N` points.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Column, ColumnData, ColumnKind, Dataset, FeatureValue};
use crate::score::{self, quantile_index, total_sorted, Ecdf, ScoringRule};
use crate::{Error, Result};

/// Split gains at or below this fraction of the parent's total score are
/// treated as zero.
pub const ZERO_GAIN_RTOL: f64 = 1e-12;

/// Deepest tree supported; node ids must fit in `u64`.
pub const MAX_SUPPORTED_DEPTH: usize = 62;

/// Hyperparameters of [`fit`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeConfig {
    pub rule: ScoringRule,
    /// Maximum number of split levels; leaves sit at depth `<= max_depth`.
    pub max_depth: usize,
    /// `N`: nodes with at most `N` points are not split, and no split may
    /// create a child with fewer than `N` points.
    pub min_node_size: usize,
    /// `ℓ`: numeric candidates are the node quantiles at `ℓ, 2ℓ, ... < 1`.
    pub quantile_step: f64,
    /// `κ`: relative-improvement pruning threshold in `[0, 1]`.
    pub kappa: f64,
    /// Columns with at most this many distinct values are searched exhaustively.
    #[serde(default = "default_cutoff")]
    pub discrete_unique_cutoff: usize,
    /// Reserved; the builder is fully deterministic.
    #[serde(default)]
    pub seed: u64,
    /// When false, every positive-gain best split is accepted regardless of κ.
    #[serde(default = "default_true")]
    pub pruning: bool,
}

fn default_cutoff() -> usize {
    10
}

fn default_true() -> bool {
    true
}

impl TreeConfig {
    /// `D = 4`, `N = 50`, `ℓ = 0.05`, `κ = 0`.
    pub fn new(rule: ScoringRule) -> Self {
        TreeConfig {
            rule,
            max_depth: 4,
            min_node_size: 50,
            quantile_step: 0.05,
            kappa: 0.0,
            discrete_unique_cutoff: default_cutoff(),
            seed: 0,
            pruning: true,
        }
    }

    pub fn with_kappa(mut self, kappa: f64) -> Self {
        self.kappa = kappa;
        self
    }

    pub fn with_depth(mut self, max_depth: usize) -> Self {
        self.max_depth = max_depth;
        self
    }

    pub fn with_min_node_size(mut self, n: usize) -> Self {
        self.min_node_size = n;
        self
    }

    pub fn with_quantile_step(mut self, step: f64) -> Self {
        self.quantile_step = step;
        self
    }

    pub fn without_pruning(mut self) -> Self {
        self.pruning = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.rule.validate()?;
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.max_depth < 1 || self.max_depth > MAX_SUPPORTED_DEPTH {
            return bad(format!(
                "max depth must lie in [1, {MAX_SUPPORTED_DEPTH}], got {}",
                self.max_depth
            ));
        }
        if self.min_node_size < 1 {
            return bad("min node size must be at least 1".into());
        }
        if !(self.quantile_step > 0.0 && self.quantile_step <= 0.5) {
            return bad(format!("quantile step must lie in (0, 0.5], got {}", self.quantile_step));
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return bad(format!("kappa must lie in [0, 1], got {}", self.kappa));
        }
        Ok(())
    }
}

/// How a split sends a row left.
#[derive(Clone, Debug, PartialEq)]
pub enum SplitKind {
    /// Left iff `x <= s`.
    Threshold(f64),
    /// Left iff the category is in the set; everything else goes right.
    CategorySet(BTreeSet<String>),
}

impl SplitKind {
    /// Total order used for deterministic tie-breaking.
    fn order(&self, other: &SplitKind) -> Ordering {
        match (self, other) {
            (SplitKind::Threshold(a), SplitKind::Threshold(b)) => a.total_cmp(b),
            (SplitKind::CategorySet(a), SplitKind::CategorySet(b)) => a.cmp(b),
            (SplitKind::Threshold(_), SplitKind::CategorySet(_)) => Ordering::Less,
            (SplitKind::CategorySet(_), SplitKind::Threshold(_)) => Ordering::Greater,
        }
    }

    pub fn threshold(&self) -> Option<f64> {
        match self {
            SplitKind::Threshold(s) => Some(*s),
            SplitKind::CategorySet(_) => None,
        }
    }
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitKind::Threshold(s) => write!(f, "<= {s}"),
            SplitKind::CategorySet(set) => {
                let names: Vec<&str> = set.iter().map(String::as_str).collect();
                write!(f, "in {{{}}}", names.join(","))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitRule {
    pub feature: usize,
    pub kind: SplitKind,
}

impl SplitRule {
    pub fn goes_left(&self, value: FeatureValue<'_>) -> Result<bool> {
        match (&self.kind, value) {
            (SplitKind::Threshold(s), FeatureValue::Numeric(x)) => Ok(x <= *s),
            (SplitKind::CategorySet(set), FeatureValue::Category(c)) => Ok(set.contains(c)),
            (_, FeatureValue::Missing) => Err(Error::MissingValue {
                column: format!("#{}", self.feature),
                row: 0,
            }),
            (SplitKind::Threshold(_), FeatureValue::Category(c)) => Err(Error::SchemaMismatch(format!(
                "feature {} is numeric but got category '{c}'",
                self.feature
            ))),
            (SplitKind::CategorySet(_), FeatureValue::Numeric(x)) => Err(Error::SchemaMismatch(format!(
                "feature {} is categorical but got number {x}",
                self.feature
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    Internal {
        split: SplitRule,
        /// Reduction in total score achieved by the split.
        delta: f64,
        n: usize,
    },
    Leaf {
        ecdf: Ecdf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: ColumnKind,
}

/// A fitted tree. Immutable; prediction methods take `&self`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveTree {
    pub(crate) nodes: BTreeMap<u64, Node>,
    pub(crate) config: TreeConfig,
    pub(crate) features: Vec<FeatureSpec>,
    pub(crate) root_delta: f64,
    pub(crate) root_n: usize,
    pub(crate) variance_floor: f64,
}

/// Point summary of a predictive distribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PointSummary {
    Mean,
    Quantile(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSummary {
    pub node: u64,
    pub feature: usize,
    pub feature_name: String,
    pub kind: SplitKind,
    pub delta: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeStats {
    pub depth: usize,
    pub leaf_count: usize,
    pub splits: Vec<SplitSummary>,
}

pub fn node_depth(id: u64) -> usize {
    (64 - (id + 1).leading_zeros() - 1) as usize
}

impl PredictiveTree {
    pub(crate) fn from_parts(
        nodes: BTreeMap<u64, Node>,
        config: TreeConfig,
        features: Vec<FeatureSpec>,
        root_delta: f64,
        root_n: usize,
        variance_floor: f64,
    ) -> Result<Self> {
        let tree = PredictiveTree {
            nodes,
            config,
            features,
            root_delta,
            root_n,
            variance_floor,
        };
        tree.check_structure()?;
        Ok(tree)
    }

    fn check_structure(&self) -> Result<()> {
        if !self.nodes.contains_key(&0) {
            return Err(Error::MalformedModel("missing root node".into()));
        }
        let mut reachable = 0usize;
        let mut stack = vec![0u64];
        while let Some(t) = stack.pop() {
            reachable += 1;
            match self.nodes.get(&t) {
                Some(Node::Internal { split, .. }) => {
                    if split.feature >= self.features.len() {
                        return Err(Error::MalformedModel(format!(
                            "node {t} splits on unknown feature {}",
                            split.feature
                        )));
                    }
                    let want = self.features[split.feature].kind;
                    let have = match split.kind {
                        SplitKind::Threshold(_) => ColumnKind::Numeric,
                        SplitKind::CategorySet(_) => ColumnKind::Categorical,
                    };
                    if want != have {
                        return Err(Error::MalformedModel(format!("node {t} split kind does not match feature kind")));
                    }
                    let left = t.checked_mul(2).and_then(|v| v.checked_add(1));
                    match left {
                        Some(l) => {
                            stack.push(l);
                            stack.push(l + 1);
                        }
                        None => return Err(Error::MalformedModel("node id overflow".into())),
                    }
                }
                Some(Node::Leaf { .. }) => {}
                None => return Err(Error::MalformedModel(format!("missing node {t}"))),
            }
        }
        if reachable != self.nodes.len() {
            return Err(Error::MalformedModel("unreachable nodes present".into()));
        }
        Ok(())
    }

    pub fn config(&self) -> &TreeConfig {
        &self.config
    }

    pub fn features(&self) -> &[FeatureSpec] {
        &self.features
    }

    pub fn nodes(&self) -> &BTreeMap<u64, Node> {
        &self.nodes
    }

    /// `Δ_0`, the gain of the best root split (computed even if rejected).
    pub fn root_delta(&self) -> f64 {
        self.root_delta
    }

    pub fn root_n(&self) -> usize {
        self.root_n
    }

    pub fn variance_floor(&self) -> f64 {
        self.variance_floor
    }

    pub fn leaves(&self) -> impl Iterator<Item = (u64, &Ecdf)> {
        self.nodes.iter().filter_map(|(&id, n)| match n {
            Node::Leaf { ecdf } => Some((id, ecdf)),
            Node::Internal { .. } => None,
        })
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves().count()
    }

    pub fn leaf(&self, id: u64) -> Option<&Ecdf> {
        match self.nodes.get(&id) {
            Some(Node::Leaf { ecdf }) => Some(ecdf),
            _ => None,
        }
    }

    fn descend<'v>(&self, mut value_of: impl FnMut(usize) -> Result<FeatureValue<'v>>) -> Result<u64> {
        let mut t = 0u64;
        loop {
            match &self.nodes[&t] {
                Node::Leaf { .. } => return Ok(t),
                Node::Internal { split, .. } => {
                    let v = value_of(split.feature)?;
                    t = if split.goes_left(v)? { 2 * t + 1 } else { 2 * t + 2 };
                }
            }
        }
    }

    /// Leaf id reached by a predictor row given in training column order.
    pub fn route(&self, x: &[FeatureValue<'_>]) -> Result<u64> {
        if x.len() != self.features.len() {
            return Err(Error::SchemaMismatch(format!(
                "expected {} predictors, got {}",
                self.features.len(),
                x.len()
            )));
        }
        self.descend(|k| match x[k] {
            FeatureValue::Missing => Err(Error::MissingValue {
                column: self.features[k].name.clone(),
                row: 0,
            }),
            v => Ok(v),
        })
    }

    pub fn predict_distribution(&self, x: &[FeatureValue<'_>]) -> Result<&Ecdf> {
        let id = self.route(x)?;
        Ok(self.leaf(id).expect("route ends at a leaf"))
    }

    pub fn predict_point(&self, x: &[FeatureValue<'_>], summary: PointSummary) -> Result<f64> {
        let f = self.predict_distribution(x)?;
        match summary {
            PointSummary::Mean => Ok(f.mean()),
            PointSummary::Quantile(p) => f.quantile(p),
        }
    }

    /// Maps each tree feature to the dataset column of the same name.
    pub fn column_map(&self, dataset: &Dataset) -> Result<Vec<usize>> {
        self.column_map_of(dataset.columns())
    }

    /// As [`column_map`](Self::column_map) over bare columns.
    pub fn column_map_of(&self, columns: &[Column]) -> Result<Vec<usize>> {
        self.features
            .iter()
            .map(|f| {
                let k = columns
                    .iter()
                    .position(|c| c.name == f.name)
                    .ok_or_else(|| Error::SchemaMismatch(format!("missing column '{}'", f.name)))?;
                let kind = columns[k].data.kind();
                if kind != f.kind {
                    return Err(Error::SchemaMismatch(format!(
                        "column '{}' is {:?}, model expects {:?}",
                        f.name, kind, f.kind
                    )));
                }
                Ok(k)
            })
            .collect()
    }

    /// Leaf id for every row of `dataset`.
    pub fn leaf_assignments(&self, dataset: &Dataset) -> Result<Vec<u64>> {
        self.leaf_assignments_of(dataset.columns(), dataset.n_rows())
    }

    /// Leaf id for each of the first `n_rows` rows of `columns`, matched to
    /// the model's features by name.
    pub fn leaf_assignments_of(&self, columns: &[Column], n_rows: usize) -> Result<Vec<u64>> {
        let map = self.column_map_of(columns)?;
        if let Some(c) = columns.iter().find(|c| c.data.len() < n_rows) {
            return Err(Error::SchemaMismatch(format!("column '{}' is too short", c.name)));
        }
        (0..n_rows)
            .map(|row| {
                self.descend(|k| match columns[map[k]].value(row) {
                    FeatureValue::Missing => Err(Error::MissingValue {
                        column: self.features[k].name.clone(),
                        row,
                    }),
                    v => Ok(v),
                })
            })
            .collect()
    }

    /// Sum of `S(F_leaf(x_j), y_j)` over the rows of `dataset`.
    pub fn evaluate(&self, dataset: &Dataset, rule: &ScoringRule) -> Result<f64> {
        let leaves = self.leaf_assignments(dataset)?;
        self.evaluate_assigned(&leaves, dataset.response(), rule)
    }

    /// As [`evaluate`](Self::evaluate) with precomputed leaf ids.
    pub fn evaluate_assigned(&self, leaves: &[u64], response: &[f64], rule: &ScoringRule) -> Result<f64> {
        rule.validate()?;
        if leaves.len() != response.len() {
            return Err(Error::SchemaMismatch("leaf ids and responses differ in length".into()));
        }
        let mut total = 0.0;
        for (&id, &y) in leaves.iter().zip(response) {
            let f = self
                .leaf(id)
                .ok_or_else(|| Error::SchemaMismatch(format!("node {id} is not a leaf")))?;
            if !y.is_finite() {
                return Err(Error::NonFiniteObservation(y));
            }
            total += score::score_unchecked(rule, f, y, self.variance_floor);
        }
        Ok(total)
    }

    pub fn stats(&self) -> TreeStats {
        let splits = self
            .nodes
            .iter()
            .filter_map(|(&id, node)| match node {
                Node::Internal { split, delta, n } => Some(SplitSummary {
                    node: id,
                    feature: split.feature,
                    feature_name: self.features[split.feature].name.clone(),
                    kind: split.kind.clone(),
                    delta: *delta,
                    n: *n,
                }),
                Node::Leaf { .. } => None,
            })
            .collect();
        TreeStats {
            depth: self.leaves().map(|(id, _)| node_depth(id)).max().unwrap_or(0),
            leaf_count: self.leaf_count(),
            splits,
        }
    }
}

pub fn tree_stats(tree: &PredictiveTree) -> TreeStats {
    tree.stats()
}

/// Predictor values of one column restricted to a node.
#[derive(Clone, Copy, Debug)]
pub enum ColumnValues<'a> {
    Numeric(&'a [f64]),
    Categorical(&'a [&'a str]),
}

/// Candidate splits of one column at a node.
///
/// Numeric columns with more than `cutoff` distinct values use the node
/// quantiles at `step, 2 step, ...` below 1; otherwise every distinct value
/// except the largest is a threshold. Categorical columns enumerate all
/// `2^(m-1) - 1` two-way partitions of their `m` observed categories.
pub fn candidate_splits(column: ColumnValues<'_>, step: f64, cutoff: usize) -> Result<Vec<SplitKind>> {
    if !(step > 0.0 && step <= 0.5) {
        return Err(Error::InvalidParameter(format!("quantile step must lie in (0, 0.5], got {step}")));
    }
    match column {
        ColumnValues::Numeric(values) => {
            if values.is_empty() {
                return Err(Error::EmptySamples);
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter("non-finite predictor value".into()));
            }
            let mut sorted = values.to_vec();
            sorted.sort_by(f64::total_cmp);
            Ok(thresholds_from_sorted(&sorted, step, cutoff)
                .into_iter()
                .map(SplitKind::Threshold)
                .collect())
        }
        ColumnValues::Categorical(cats) => {
            if cats.is_empty() {
                return Err(Error::EmptySamples);
            }
            let names: Vec<&str> = cats.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
            if names.len() > cutoff {
                return Err(Error::CategoricalCardinality {
                    column: String::new(),
                    found: names.len(),
                    cutoff,
                });
            }
            Ok(category_partitions(names.len())
                .map(|mask| SplitKind::CategorySet(mask_to_set(mask, &names)))
                .collect())
        }
    }
}

fn thresholds_from_sorted(sorted: &[f64], step: f64, cutoff: usize) -> Vec<f64> {
    let n = sorted.len();
    let max = sorted[n - 1];
    let mut uniques = sorted.to_vec();
    uniques.dedup();
    if uniques.len() <= cutoff {
        uniques.pop();
        return uniques;
    }
    let mut out: Vec<f64> = Vec::new();
    let mut j = 1usize;
    loop {
        let p = j as f64 * step;
        if p >= 1.0 - 1e-9 {
            break;
        }
        // j * step carries rounding error; nudge down so exact grid levels stay exact
        let q = sorted[quantile_index(n, p - 1e-12)];
        if q < max && out.last() != Some(&q) {
            out.push(q);
        }
        j += 1;
    }
    out
}

/// Bitmasks over the first `m - 1` categories; the last category always
/// sits on the right, so each unordered partition appears once.
fn category_partitions(m: usize) -> impl Iterator<Item = u32> {
    let upper = if m >= 2 { 1u32 << (m - 1) } else { 1 };
    1..upper
}

fn mask_to_set(mask: u32, names: &[&str]) -> BTreeSet<String> {
    names
        .iter()
        .enumerate()
        .filter(|(i, _)| mask & (1 << i) != 0)
        .map(|(_, n)| n.to_string())
        .collect()
}

/// `C = total(left) + total(right)`, the objective minimized by split search.
pub fn split_objective(rule: &ScoringRule, left: &[f64], right: &[f64]) -> Result<f64> {
    split_objective_floored(rule, left, right, score::ABSOLUTE_VARIANCE_FLOOR)
}

pub fn split_objective_floored(rule: &ScoringRule, left: &[f64], right: &[f64], variance_floor: f64) -> Result<f64> {
    if left.is_empty() || right.is_empty() {
        return Err(Error::EmptySplitSide);
    }
    let l = score::node_total_score_floored(rule, left, variance_floor)?;
    let r = score::node_total_score_floored(rule, right, variance_floor)?;
    Ok(l.total + r.total)
}

fn sorted_total(rule: &ScoringRule, values: &[f64], floor: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    total_sorted(rule, &v, floor).total
}

/// Pre-pruning acceptance: `Δ_t / n_t > κ Δ_0 / n`, and the gain must be
/// positive. At the root (`Δ_t = Δ_0`) this accepts iff `κ < 1`.
pub fn accept_split(delta: f64, n_node: usize, root_delta: f64, n_root: usize, kappa: f64) -> bool {
    delta > 0.0 && delta / n_node as f64 > kappa * root_delta / n_root as f64
}

#[derive(Clone, Debug)]
struct Candidate {
    rule: SplitRule,
    objective: f64,
}

impl Candidate {
    /// Smaller objective wins; ties go to the smaller feature index, then
    /// the smaller threshold or lexicographically smaller category set.
    fn beats(&self, other: &Candidate) -> bool {
        match self.objective.total_cmp(&other.objective) {
            Ordering::Less => true,
            Ordering::Greater => false,
            Ordering::Equal => match self.rule.feature.cmp(&other.rule.feature) {
                Ordering::Less => true,
                Ordering::Greater => false,
                Ordering::Equal => self.rule.kind.order(&other.rule.kind) == Ordering::Less,
            },
        }
    }
}

fn keep_best(best: &mut Option<Candidate>, cand: Candidate) {
    if best.as_ref().is_none_or(|b| cand.beats(b)) {
        *best = Some(cand);
    }
}

fn search_feature(
    dataset: &Dataset,
    feature: usize,
    rows: &[usize],
    config: &TreeConfig,
    floor: f64,
) -> Result<Option<Candidate>> {
    let y = dataset.response();
    let min = config.min_node_size;
    let n = rows.len();
    let rule = &config.rule;
    let mut best: Option<Candidate> = None;
    match &dataset.column(feature).data {
        ColumnData::Numeric(x) => {
            let mut pairs: Vec<(f64, f64)> = rows.iter().map(|&r| (x[r], y[r])).collect();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
            let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            for s in thresholds_from_sorted(&xs, config.quantile_step, config.discrete_unique_cutoff) {
                let k = xs.partition_point(|&v| v <= s);
                if k < min || n - k < min {
                    continue;
                }
                let objective = sorted_total(rule, &ys[..k], floor) + sorted_total(rule, &ys[k..], floor);
                keep_best(
                    &mut best,
                    Candidate {
                        rule: SplitRule {
                            feature,
                            kind: SplitKind::Threshold(s),
                        },
                        objective,
                    },
                );
            }
        }
        ColumnData::Categorical { levels, codes } => {
            // Group responses by observed category, categories in name order.
            let mut groups: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
            for &r in rows {
                let code = codes[r].ok_or_else(|| Error::MissingValue {
                    column: dataset.column(feature).name.clone(),
                    row: r,
                })?;
                groups.entry(code).or_default().push(y[r]);
            }
            let mut named: Vec<(&str, Vec<f64>)> =
                groups.into_iter().map(|(c, v)| (levels[c as usize].as_str(), v)).collect();
            named.sort_by(|a, b| a.0.cmp(b.0));
            let m = named.len();
            if m > config.discrete_unique_cutoff {
                return Err(Error::CategoricalCardinality {
                    column: dataset.column(feature).name.clone(),
                    found: m,
                    cutoff: config.discrete_unique_cutoff,
                });
            }
            let names: Vec<&str> = named.iter().map(|g| g.0).collect();
            let mut left = Vec::with_capacity(n);
            let mut right = Vec::with_capacity(n);
            for mask in category_partitions(m) {
                left.clear();
                right.clear();
                for (i, (_, vals)) in named.iter().enumerate() {
                    if mask & (1 << i) != 0 {
                        left.extend_from_slice(vals);
                    } else {
                        right.extend_from_slice(vals);
                    }
                }
                if left.len() < min || right.len() < min {
                    continue;
                }
                let objective = sorted_total(rule, &left, floor) + sorted_total(rule, &right, floor);
                keep_best(
                    &mut best,
                    Candidate {
                        rule: SplitRule {
                            feature,
                            kind: SplitKind::CategorySet(mask_to_set(mask, &names)),
                        },
                        objective,
                    },
                );
            }
        }
    }
    Ok(best)
}

fn best_split_floored(
    dataset: &Dataset,
    rows: &[usize],
    config: &TreeConfig,
    floor: f64,
) -> Result<Option<Candidate>> {
    if rows.len() <= config.min_node_size {
        return Ok(None);
    }
    let per_feature = (0..dataset.n_features())
        .into_par_iter()
        .map(|k| search_feature(dataset, k, rows, config, floor))
        .collect::<Result<Vec<_>>>()?;
    let mut best = None;
    for cand in per_feature.into_iter().flatten() {
        keep_best(&mut best, cand);
    }
    Ok(best)
}

/// Best admissible split of the node holding `rows`, with its objective.
pub fn best_split(dataset: &Dataset, rows: &[usize], config: &TreeConfig) -> Result<Option<(SplitRule, f64)>> {
    config.validate()?;
    let floor = score::variance_floor(root_variance(dataset.response()));
    Ok(best_split_floored(dataset, rows, config, floor)?.map(|c| (c.rule, c.objective)))
}

fn root_variance(y: &[f64]) -> f64 {
    score::population_variance(y, score::mean(y))
}

struct Pending {
    id: u64,
    rows: Vec<usize>,
    total: f64,
}

/// Grows a tree on `dataset` under `config`.
pub fn fit(dataset: &Dataset, config: &TreeConfig) -> Result<PredictiveTree> {
    config.validate()?;
    if dataset.n_rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    if let Some((row, k)) = dataset.first_missing() {
        return Err(Error::MissingValue {
            column: dataset.column(k).name.clone(),
            row,
        });
    }
    let y = dataset.response();
    let n = y.len();
    let floor = score::variance_floor(root_variance(y));
    let rule = config.rule;
    let values_of = |rows: &[usize]| -> Vec<f64> { rows.iter().map(|&r| y[r]).collect() };

    let mut nodes = BTreeMap::new();
    let mut root_delta = 0.0;
    let all: Vec<usize> = (0..n).collect();
    let mut level = vec![Pending {
        id: 0,
        total: sorted_total(&rule, &values_of(&all), floor),
        rows: all,
    }];

    for depth in 0..=config.max_depth {
        let decisions = level
            .par_iter()
            .map(|node| {
                if depth == config.max_depth || node.rows.len() <= config.min_node_size {
                    return Ok(None);
                }
                let first = y[node.rows[0]];
                if node.rows.iter().all(|&r| y[r] == first) {
                    return Ok(None);
                }
                best_split_floored(dataset, &node.rows, config, floor)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut next = Vec::new();
        for (node, decision) in level.into_iter().zip(decisions) {
            let accepted = decision.and_then(|cand| {
                let gain = node.total - cand.objective;
                let delta = if gain <= ZERO_GAIN_RTOL * node.total.abs() { 0.0 } else { gain };
                if node.id == 0 {
                    root_delta = delta;
                }
                let ok = if config.pruning {
                    accept_split(delta, node.rows.len(), root_delta, n, config.kappa)
                } else {
                    delta > 0.0
                };
                ok.then_some((cand.rule, delta))
            });
            match accepted {
                Some((split, delta)) => {
                    let mut left = Vec::new();
                    let mut right = Vec::new();
                    for &r in &node.rows {
                        if split.goes_left(dataset.value(r, split.feature))? {
                            left.push(r);
                        } else {
                            right.push(r);
                        }
                    }
                    let id = node.id;
                    let n_node = node.rows.len();
                    next.push(Pending {
                        id: 2 * id + 1,
                        total: sorted_total(&rule, &values_of(&left), floor),
                        rows: left,
                    });
                    next.push(Pending {
                        id: 2 * id + 2,
                        total: sorted_total(&rule, &values_of(&right), floor),
                        rows: right,
                    });
                    nodes.insert(id, Node::Internal { split, delta, n: n_node });
                }
                None => {
                    let mut samples = values_of(&node.rows);
                    samples.sort_by(f64::total_cmp);
                    nodes.insert(
                        node.id,
                        Node::Leaf {
                            ecdf: Ecdf::from_sorted_unchecked(samples),
                        },
                    );
                }
            }
        }
        if next.is_empty() {
            break;
        }
        level = next;
    }

    let features = dataset
        .columns()
        .iter()
        .map(|c| FeatureSpec {
            name: c.name.clone(),
            kind: c.data.kind(),
        })
        .collect();
    PredictiveTree::from_parts(nodes, config.clone(), features, root_delta, n, floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Column, ColumnData};
    use crate::score::node_total_score;
    use proptest::prelude::*;

    fn numeric(x: Vec<f64>, y: Vec<f64>) -> Dataset {
        Dataset::from_numeric(&["x"], vec![x], y, "y").unwrap()
    }

    fn thresholds(kinds: &[SplitKind]) -> Vec<f64> {
        kinds.iter().map(|k| k.threshold().unwrap()).collect()
    }

    #[test]
    fn low_cardinality_thresholds() {
        let c = candidate_splits(ColumnValues::Numeric(&[3.0, 1.0, 2.0, 2.0]), 0.05, 10).unwrap();
        assert_eq!(thresholds(&c), vec![1.0, 2.0]);
    }

    #[test]
    fn quantile_thresholds() {
        let values: Vec<f64> = (1..=1000).map(|i| i as f64 / 1000.0).collect();
        let c = thresholds(&candidate_splits(ColumnValues::Numeric(&values), 0.05, 10).unwrap());
        assert_eq!(c.len(), 19);
        for (j, s) in c.iter().enumerate() {
            assert_eq!(*s, (j as f64 + 1.0) * 50.0 / 1000.0);
        }
    }

    #[test]
    fn categorical_partitions() {
        let c = candidate_splits(ColumnValues::Categorical(&["a", "b", "c", "a"]), 0.05, 10).unwrap();
        assert_eq!(c.len(), 3);
        let all: BTreeSet<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let mut partitions: Vec<BTreeSet<BTreeSet<String>>> = c
            .iter()
            .map(|k| match k {
                SplitKind::CategorySet(left) => {
                    let right: BTreeSet<String> = all.difference(left).cloned().collect();
                    [left.clone(), right].into_iter().collect()
                }
                _ => panic!(),
            })
            .collect();
        partitions.sort();
        partitions.dedup();
        assert_eq!(partitions.len(), 3);
        let cats: Vec<String> = (0..11).map(|i| format!("c{i}")).collect();
        let refs: Vec<&str> = cats.iter().map(String::as_str).collect();
        assert!(matches!(
            candidate_splits(ColumnValues::Categorical(&refs), 0.05, 10),
            Err(Error::CategoricalCardinality { .. })
        ));
        assert!(candidate_splits(ColumnValues::Categorical(&refs[..10]), 0.05, 10).unwrap().len() == 511);
    }

    #[test]
    fn objectives() {
        assert_eq!(split_objective(&ScoringRule::Sse, &[1.0, 1.0], &[5.0, 5.0]).unwrap(), 0.0);
        assert!((split_objective(&ScoringRule::Crps, &[0.0, 2.0], &[0.0, 2.0]).unwrap() - 2.0).abs() < 1e-12);
        assert!((split_objective(&ScoringRule::Sse, &[0.0, 2.0], &[4.0]).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(
            split_objective(&ScoringRule::Sse, &[], &[1.0]),
            Err(Error::EmptySplitSide)
        ));
    }

    #[test]
    fn perfect_separation() {
        let ds = numeric(vec![0.0, 0.0, 1.0, 1.0], vec![0.0, 0.0, 10.0, 10.0]);
        let cfg = TreeConfig::new(ScoringRule::Sse).with_min_node_size(1);
        let (rule, obj) = best_split(&ds, &[0, 1, 2, 3], &cfg).unwrap().unwrap();
        assert_eq!(rule.kind, SplitKind::Threshold(0.0));
        assert_eq!(obj, 0.0);
        let cfg = cfg.with_min_node_size(3);
        assert!(best_split(&ds, &[0, 1, 2, 3], &cfg).unwrap().is_none());
    }

    #[test]
    fn ties_go_to_smallest_feature_then_threshold() {
        // both columns separate y identically
        let ds = Dataset::from_numeric(
            &["a", "b"],
            vec![vec![0.0, 1.0, 2.0, 3.0], vec![0.0, 1.0, 2.0, 3.0]],
            vec![0.0, 0.0, 5.0, 5.0],
            "y",
        )
        .unwrap();
        let cfg = TreeConfig::new(ScoringRule::Sse).with_min_node_size(1);
        let (rule, _) = best_split(&ds, &[0, 1, 2, 3], &cfg).unwrap().unwrap();
        assert_eq!(rule.feature, 0);
        assert_eq!(rule.kind, SplitKind::Threshold(1.0));
    }

    #[test]
    fn pruning_rule() {
        assert!(accept_split(1e-6, 10, 5.0, 100, 0.0));
        assert!(!accept_split(0.0, 10, 5.0, 100, 0.0));
        assert!(!accept_split(3.0, 100, 3.0, 100, 1.0));
        // Δ_0/n = 2.0, Δ_t/n_t = 0.9, κ = 0.5
        assert!(!accept_split(9.0, 10, 200.0, 100, 0.5));
        assert!(accept_split(11.0, 10, 200.0, 100, 0.5));
    }

    #[test]
    fn constant_response_is_single_leaf() {
        let x: Vec<f64> = (0..200).map(f64::from).collect();
        let ds = numeric(x, vec![0.1; 200]);
        for rule in [ScoringRule::Sse, ScoringRule::Crps, ScoringRule::Dss, ScoringRule::Is1 { alpha: 0.2 }] {
            let t = fit(&ds, &TreeConfig::new(rule).with_min_node_size(5)).unwrap();
            assert_eq!(t.leaf_count(), 1);
            assert_eq!(t.root_delta(), 0.0);
        }
    }

    #[test]
    fn single_leaf_predictions() {
        let ds = numeric(vec![0.0, 1.0, 2.0], vec![3.0, 1.0, 2.0]);
        let t = fit(&ds, &TreeConfig::new(ScoringRule::Sse)).unwrap();
        let x = [FeatureValue::Numeric(42.0)];
        assert_eq!(t.route(&x).unwrap(), 0);
        assert_eq!(t.predict_distribution(&x).unwrap().samples(), &[1.0, 2.0, 3.0]);
        assert_eq!(t.predict_point(&x, PointSummary::Mean).unwrap(), 2.0);
        assert_eq!(t.predict_point(&x, PointSummary::Quantile(0.8)).unwrap(), 3.0);
        let st = t.stats();
        assert_eq!((st.depth, st.leaf_count, st.splits.len()), (0, 1, 0));
        let two = numeric(vec![0.0, 1.0], vec![0.0, 2.0]);
        let t = fit(&two, &TreeConfig::new(ScoringRule::Sse)).unwrap();
        assert_eq!(t.evaluate(&two, &ScoringRule::Sse).unwrap(), 2.0);
        assert_eq!(t.evaluate_assigned(&[], &[], &ScoringRule::Sse).unwrap(), 0.0);
    }

    #[test]
    fn routing_boundary_is_inclusive_left() {
        let x: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
        let y: Vec<f64> = x.iter().map(|&v| if v <= 0.5 { 0.0 } else { 10.0 }).collect();
        let ds = numeric(x, y);
        let t = fit(&ds, &TreeConfig::new(ScoringRule::Sse).with_min_node_size(1).with_depth(1)).unwrap();
        assert_eq!(t.stats().splits[0].kind, SplitKind::Threshold(0.5));
        assert_eq!(t.route(&[FeatureValue::Numeric(0.5)]).unwrap(), 1);
        assert_eq!(t.route(&[FeatureValue::Numeric(0.6)]).unwrap(), 2);
        assert!(t.route(&[FeatureValue::Missing]).is_err());
        assert!(t.route(&[]).is_err());
        let st = t.stats();
        assert_eq!((st.leaf_count, st.splits.len()), (2, 1));
    }

    #[test]
    fn categorical_split_and_unseen_category() {
        let cats = ["a", "b", "c", "a", "b", "c", "a", "b", "c"];
        let y = vec![0.0, 0.0, 9.0, 0.0, 0.0, 9.0, 0.0, 0.0, 9.0];
        let ds = Dataset::new(
            vec![Column {
                name: "c".into(),
                data: ColumnData::categorical_from_strings(&cats),
            }],
            y,
            "y",
        )
        .unwrap();
        let t = fit(&ds, &TreeConfig::new(ScoringRule::Crps).with_min_node_size(1).with_depth(1)).unwrap();
        let left_c = t.route(&[FeatureValue::Category("c")]).unwrap();
        let left_a = t.route(&[FeatureValue::Category("a")]).unwrap();
        assert_ne!(left_a, left_c);
        assert_eq!(t.route(&[FeatureValue::Category("zzz")]).unwrap(), 2);
        assert!(t.route(&[FeatureValue::Numeric(1.0)]).is_err());
    }

    #[test]
    fn missing_values_rejected_at_fit() {
        let ds = numeric(vec![0.0, f64::NAN, 1.0], vec![1.0, 2.0, 3.0]);
        assert!(matches!(
            fit(&ds, &TreeConfig::new(ScoringRule::Sse)),
            Err(Error::MissingValue { .. })
        ));
    }

    #[test]
    fn invalid_config() {
        let ds = numeric(vec![0.0], vec![1.0]);
        for cfg in [
            TreeConfig::new(ScoringRule::Sse).with_depth(0),
            TreeConfig::new(ScoringRule::Sse).with_min_node_size(0),
            TreeConfig::new(ScoringRule::Sse).with_quantile_step(0.6),
            TreeConfig::new(ScoringRule::Sse).with_kappa(1.5),
            TreeConfig::new(ScoringRule::Is1 { alpha: 0.0 }),
        ] {
            assert!(fit(&ds, &cfg).is_err());
        }
    }

    #[test]
    fn node_depths() {
        assert_eq!(node_depth(0), 0);
        assert_eq!(node_depth(1), 1);
        assert_eq!(node_depth(2), 1);
        assert_eq!(node_depth(6), 2);
        assert_eq!(node_depth(14), 3);
        assert_eq!(node_depth(30), 4);
    }

    fn random_dataset(seed: u64, n: usize) -> Dataset {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|&v| {
                let e: f64 = rng.random_range(0.0..1.0);
                if v < 0.0 { e * 3.0 } else { (e + 0.5).powi(3) }
            })
            .collect();
        numeric(x, y)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn fitted_tree_invariants(seed in 0u64..1000, n in 20usize..400, rule_idx in 0usize..5) {
            let rules = [ScoringRule::Sse, ScoringRule::Crps, ScoringRule::Dss,
                         ScoringRule::Is1 { alpha: 0.2 }, ScoringRule::Is2 { alpha: 0.2 }];
            let rule = rules[rule_idx];
            let ds = random_dataset(seed, n);
            let cfg = TreeConfig::new(rule).with_min_node_size(10);
            let tree = fit(&ds, &cfg).unwrap();

            // partition: leaf multiset equals training multiset
            let mut leaf_samples: Vec<f64> = tree.leaves().flat_map(|(_, e)| e.samples().to_vec()).collect();
            let mut ys = ds.response().to_vec();
            leaf_samples.sort_by(f64::total_cmp);
            ys.sort_by(f64::total_cmp);
            prop_assert_eq!(leaf_samples, ys);

            // every training row routes to a leaf holding its response
            let leaves = tree.leaf_assignments(&ds).unwrap();
            for (r, id) in leaves.iter().enumerate() {
                prop_assert!(tree.leaf(*id).unwrap().samples().contains(&ds.response()[r]));
            }

            // leaves below an accepted split keep at least N points
            for (id, e) in tree.leaves() {
                if id != 0 {
                    prop_assert!(e.len() >= cfg.min_node_size);
                }
            }

            // in-sample evaluation with the build rule = sum of leaf self-scores
            let eval = tree.evaluate(&ds, &rule).unwrap();
            let by_leaf: f64 = tree.leaves()
                .map(|(_, e)| score::node_total_score_floored(&rule, e.samples(), tree.variance_floor()).unwrap().total)
                .sum();
            prop_assert!((eval - by_leaf).abs() <= 1e-9 * (1.0 + by_leaf.abs()));

            // recorded gains are non-negative
            for s in tree.stats().splits {
                prop_assert!(s.delta > 0.0);
            }

            // κ monotonicity
            let mut prev = usize::MAX;
            for kappa in [0.0, 0.1, 0.3, 0.5, 0.8, 1.0] {
                let leaves = fit(&ds, &cfg.clone().with_kappa(kappa)).unwrap().leaf_count();
                prop_assert!(leaves <= prev);
                prev = leaves;
            }

            // determinism
            prop_assert_eq!(&fit(&ds, &cfg).unwrap(), &tree);

            let _ = node_total_score(&rule, ds.response()).unwrap();
        }
    }
}
