//! Training loss weights and evaluation metrics.

use std::fmt;

use indexmap::IndexMap;
use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_WEIGHT_BOUNDARIES: [f64; 3] = [45.0, 70.0, 100.0];
pub const DEFAULT_GROUP_BOUNDARIES: [f64; 2] = [45.0, 70.0];

/// Per-interval loss weights. Interval `k` is `[b_{k-1}, b_k)` with the
/// first interval open below and the last open above.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightTable {
    pub boundaries: Vec<f64>,
    pub weights: Vec<f64>,
    pub counts: Vec<usize>,
}

fn check_boundaries(boundaries: &[f64]) -> Result<()> {
    if boundaries.iter().any(|b| !b.is_finite()) || boundaries.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig(format!(
            "interval boundaries must be finite and strictly ascending: {boundaries:?}"
        )));
    }
    Ok(())
}

fn bucket(boundaries: &[f64], t: f64) -> usize {
    boundaries.partition_point(|&b| b <= t)
}

impl WeightTable {
    /// Inverse-frequency weights `N / (K · count_k)`. An empty interval
    /// takes the largest weight among the others.
    pub fn from_counts(counts: &[usize], boundaries: &[f64]) -> Result<Self> {
        check_boundaries(boundaries)?;
        if counts.len() != boundaries.len() + 1 {
            return Err(Error::Shape(format!(
                "{} counts for {} intervals",
                counts.len(),
                boundaries.len() + 1
            )));
        }
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::InvalidConfig("no labels to weight".into()));
        }
        let k = counts.len() as f64;
        let mut weights: Vec<f64> = counts
            .iter()
            .map(|&c| if c == 0 { 0.0 } else { total as f64 / (k * c as f64) })
            .collect();
        let cap = weights.iter().copied().fold(0.0, f64::max);
        for (i, w) in weights.iter_mut().enumerate() {
            if counts[i] == 0 {
                warn!("temperature interval {i} has no labels; using weight {cap:.4}");
                *w = cap;
            }
        }
        Ok(WeightTable {
            boundaries: boundaries.to_vec(),
            weights,
            counts: counts.to_vec(),
        })
    }

    pub fn uniform() -> Self {
        WeightTable {
            boundaries: Vec::new(),
            weights: vec![1.0],
            counts: vec![0],
        }
    }

    pub fn interval_of(&self, t: f64) -> usize {
        bucket(&self.boundaries, t)
    }

    pub fn weight_of(&self, t: f64) -> f64 {
        self.weights[self.interval_of(t)]
    }

    pub fn weights_for(&self, truth: &[f64]) -> Vec<f64> {
        truth.iter().map(|&t| self.weight_of(t)).collect()
    }
}

pub fn build_weight_table(labels: &[f64], boundaries: &[f64]) -> Result<WeightTable> {
    check_boundaries(boundaries)?;
    let mut counts = vec![0; boundaries.len() + 1];
    for &t in labels {
        counts[bucket(boundaries, t)] += 1;
    }
    WeightTable::from_counts(&counts, boundaries)
}

fn check_pair(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "need equal non-empty lengths, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

/// `sqrt(Σ w(t_i)(ŷ_i − t_i)² / N)`, weights keyed on the true value.
pub fn weighted_rmse(pred: &[f64], truth: &[f64], table: &WeightTable) -> Result<f64> {
    check_pair(pred, truth)?;
    let s: f64 = pred
        .iter()
        .zip(truth)
        .map(|(&p, &t)| {
            let e = p - t;
            table.weight_of(t) * (e * e)
        })
        .sum();
    Ok((s / pred.len() as f64).sqrt())
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let s: f64 = pred.iter().zip(truth).map(|(&p, &t)| (p - t) * (p - t)).sum();
    Ok((s / pred.len() as f64).sqrt())
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let s: f64 = pred.iter().zip(truth).map(|(&p, &t)| (p - t).abs()).sum();
    Ok(s / pred.len() as f64)
}

/// Product-moment correlation; `Undefined` when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    if x.len() < 2 {
        return Err(Error::Undefined("correlation needs at least two points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("correlation of a constant vector"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks, ties sharing the mean of the positions they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketMae {
    /// `None` when no true value falls in the bucket.
    pub mae: Option<f64>,
    pub count: usize,
}

pub fn bucket_labels(boundaries: &[f64]) -> Vec<String> {
    if boundaries.is_empty() {
        return vec!["all".into()];
    }
    let mut out = vec![format!("<{}", boundaries[0])];
    for w in boundaries.windows(2) {
        out.push(format!("{}-{}", w[0], w[1]));
    }
    out.push(format!(">={}", boundaries[boundaries.len() - 1]));
    out
}

/// MAE per bucket of the true value.
pub fn grouped_mae(pred: &[f64], truth: &[f64], boundaries: &[f64]) -> Result<IndexMap<String, BucketMae>> {
    check_pair(pred, truth)?;
    check_boundaries(boundaries)?;
    let labels = bucket_labels(boundaries);
    let mut sums = vec![0.0; labels.len()];
    let mut counts = vec![0usize; labels.len()];
    for (&p, &t) in pred.iter().zip(truth) {
        let k = bucket(boundaries, t);
        sums[k] += (p - t).abs();
        counts[k] += 1;
    }
    Ok(labels
        .into_iter()
        .zip(sums.into_iter().zip(counts))
        .map(|(label, (s, c))| {
            let mae = (c > 0).then(|| s / c as f64);
            (label, BucketMae { mae, count: c })
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub rmse: f64,
    pub mae: f64,
    /// `None` when undefined (constant predictions or labels).
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub grouped_mae: IndexMap<String, BucketMae>,
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::Undefined(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn evaluate(pred: &[f64], truth: &[f64], boundaries: &[f64]) -> Result<EvalReport> {
    Ok(EvalReport {
        n: pred.len(),
        rmse: rmse(pred, truth)?,
        mae: mae(pred, truth)?,
        pearson: defined(pearson(pred, truth))?,
        spearman: defined(spearman(pred, truth))?,
        grouped_mae: grouped_mae(pred, truth, boundaries)?,
    })
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"));
        writeln!(f, "{:<12}{:>12}", "metric", "value")?;
        writeln!(f, "{:<12}{:>12}", "n", self.n)?;
        writeln!(f, "{:<12}{:>12.4}", "rmse", self.rmse)?;
        writeln!(f, "{:<12}{:>12.4}", "mae", self.mae)?;
        writeln!(f, "{:<12}{:>12}", "pearson", opt(self.pearson))?;
        writeln!(f, "{:<12}{:>12}", "spearman", opt(self.spearman))?;
        writeln!(f)?;
        writeln!(f, "{:<12}{:>12}{:>8}", "range", "mae", "count")?;
        for (label, b) in &self.grouped_mae {
            let m = b.mae.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
            writeln!(f, "{:<12}{:>12}{:>8}", label, m, b.count)?;
        }
        Ok(())
    }
}
