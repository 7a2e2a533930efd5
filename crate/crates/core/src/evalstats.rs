//! Benchmark metrics and statistics: balanced accuracy, weighted F1, AUC,
//! DICE/IoU, percentile bootstrap, tie-averaged ranking and the Nemenyi
//! critical difference.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("class {0} has no true instances")]
    EmptyClass(usize),
    #[error("labels do not contain both a positive and a negative")]
    DegenerateLabels,
    #[error("shape mismatch: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error("empty sample")]
    EmptySample,
    #[error("missing value for model {model}, task {task}")]
    MissingCell { model: usize, task: usize },
    #[error("no critical value for k = {0} (table covers 2..=10)")]
    KOutOfTableRange(usize),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;

// ---------------------------------------------------------------------------
// classification

/// `conf[truth][pred]` counts.
pub fn confusion_matrix(truth: &[usize], pred: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    if truth.len() != pred.len() {
        return Err(EvalError::ShapeMismatch(truth.len(), pred.len()));
    }
    let mut m = vec![vec![0; classes]; classes];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= classes || p >= classes {
            return Err(EvalError::Invalid(format!("label {} outside {classes} classes", t.max(p))));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// Mean per-class recall; every class must occur.
pub fn balanced_accuracy(conf: &[Vec<usize>]) -> Result<f64> {
    let mut sum = 0.0;
    for (c, row) in conf.iter().enumerate() {
        let n: usize = row.iter().sum();
        if n == 0 {
            return Err(EvalError::EmptyClass(c));
        }
        sum += row[c] as f64 / n as f64;
    }
    if conf.is_empty() {
        return Err(EvalError::EmptySample);
    }
    Ok(sum / conf.len() as f64)
}

/// Mean recall over the classes that occur in the truth (for splits where
/// some classes are absent).
pub fn balanced_accuracy_observed(conf: &[Vec<usize>]) -> Result<f64> {
    let present: Vec<Vec<usize>> = conf
        .iter()
        .enumerate()
        .filter(|(_, r)| r.iter().sum::<usize>() > 0)
        .map(|(c, r)| vec![r[c], r.iter().sum::<usize>() - r[c]])
        .collect();
    if present.is_empty() {
        return Err(EvalError::EmptySample);
    }
    Ok(present.iter().map(|r| r[0] as f64 / (r[0] + r[1]) as f64).sum::<f64>() / present.len() as f64)
}

/// Support-weighted mean of per-class F1 (F1 = 0 when precision + recall = 0).
pub fn weighted_f1_from(precision: &[f64], recall: &[f64], support: &[usize]) -> Result<f64> {
    if precision.len() != recall.len() || recall.len() != support.len() {
        return Err(EvalError::ShapeMismatch(precision.len(), support.len()));
    }
    let total: usize = support.iter().sum();
    if total == 0 {
        return Err(EvalError::EmptySample);
    }
    let mut acc = 0.0;
    for i in 0..support.len() {
        let (p, r) = (precision[i], recall[i]);
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        acc += f1 * support[i] as f64;
    }
    Ok(acc / total as f64)
}

pub fn weighted_f1(conf: &[Vec<usize>]) -> Result<f64> {
    let k = conf.len();
    let mut prec = vec![0.0; k];
    let mut rec = vec![0.0; k];
    let mut sup = vec![0; k];
    for c in 0..k {
        let tp = conf[c][c] as f64;
        let predicted: usize = (0..k).map(|t| conf[t][c]).sum();
        sup[c] = conf[c].iter().sum();
        prec[c] = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        rec[c] = if sup[c] == 0 { 0.0 } else { tp / sup[c] as f64 };
    }
    weighted_f1_from(&prec, &rec, &sup)
}

/// Average (1-based) ranks of `xs` in ascending order, ties sharing the mean
/// of their positions.
pub fn average_ranks_ascending(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Mann–Whitney AUC with half credit for ties.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(EvalError::ShapeMismatch(scores.len(), positive.len()));
    }
    let np = positive.iter().filter(|&&p| p).count();
    let nn = positive.len() - np;
    if np == 0 || nn == 0 {
        return Err(EvalError::DegenerateLabels);
    }
    let ranks = average_ranks_ascending(scores);
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let u = rank_sum - (np * (np + 1)) as f64 / 2.0;
    Ok(u / (np as f64 * nn as f64))
}

/// Macro one-vs-rest AUC over the classes that occur in `labels`;
/// `scores[i][c]` is the score of sample `i` for class `c`.
pub fn auc(scores: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(EvalError::ShapeMismatch(scores.len(), labels.len()));
    }
    let k = scores.first().map_or(0, Vec::len);
    let mut per = Vec::new();
    for c in 0..k {
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        if !pos.iter().any(|&p| p) {
            continue;
        }
        let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        per.push(binary_auc(&s, &pos)?);
    }
    if per.len() < 2 && k > 1 {
        return Err(EvalError::DegenerateLabels);
    }
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

// ---------------------------------------------------------------------------
// segmentation

/// `(dice, iou)` of two binary masks; both empty gives `(1, 1)`.
pub fn dice_and_iou(pred: &[bool], truth: &[bool]) -> Result<(f64, f64)> {
    if pred.len() != truth.len() {
        return Err(EvalError::ShapeMismatch(pred.len(), truth.len()));
    }
    let (mut inter, mut p, mut t) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(truth) {
        inter += (a && b) as usize;
        p += a as usize;
        t += b as usize;
    }
    if p + t == 0 {
        return Ok((1.0, 1.0));
    }
    let union = p + t - inter;
    Ok((2.0 * inter as f64 / (p + t) as f64, inter as f64 / union as f64))
}

// ---------------------------------------------------------------------------
// bootstrap

/// A point estimate with its percentile bootstrap interval.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricResult {
    pub name: String,
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_replicates: usize,
}

pub const DEFAULT_REPLICATES: usize = 1000;

/// Linear-interpolation quantile of sorted data (`h = (n−1)p`).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Indices of bootstrap replicate `r`: `n` draws with replacement from
/// stream `r` of the generator keyed by `seed`, so nearby seeds share no
/// replicates.
pub fn resample_indices(n: usize, seed: u64, replicate: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate as u64);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Percentile bootstrap of `statistic` over `samples`.
pub fn bootstrap_ci_with<T: Clone>(
    name: &str,
    samples: &[T],
    statistic: impl Fn(&[T]) -> f64,
    replicates: usize,
    alpha: f64,
    seed: u64,
) -> Result<MetricResult> {
    if samples.is_empty() {
        return Err(EvalError::EmptySample);
    }
    if replicates == 0 || !(0.0..1.0).contains(&alpha) {
        return Err(EvalError::Invalid("need replicates >= 1 and 0 <= alpha < 1".into()));
    }
    let n = samples.len();
    let mut stats: Vec<f64> = (0..replicates)
        .map(|r| {
            let draw: Vec<T> = resample_indices(n, seed, r).into_iter().map(|i| samples[i].clone()).collect();
            statistic(&draw)
        })
        .filter(|v| v.is_finite())
        .collect();
    if stats.is_empty() {
        return Err(EvalError::Invalid("statistic undefined on every replicate".into()));
    }
    stats.sort_by(|a, b| a.total_cmp(b));
    Ok(MetricResult {
        name: name.to_string(),
        point: statistic(samples),
        ci_low: quantile_sorted(&stats, alpha / 2.0),
        ci_high: quantile_sorted(&stats, 1.0 - alpha / 2.0),
        n_replicates: replicates,
    })
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Bootstrap CI of the mean of per-sample values.
pub fn bootstrap_ci(name: &str, values: &[f64], replicates: usize, alpha: f64, seed: u64) -> Result<MetricResult> {
    bootstrap_ci_with(name, values, mean, replicates, alpha, seed)
}

/// Bootstrap CI of the mean resampling whole groups (e.g. patients).
pub fn bootstrap_ci_grouped(
    name: &str,
    values: &[f64],
    groups: &[String],
    replicates: usize,
    alpha: f64,
    seed: u64,
) -> Result<MetricResult> {
    if values.len() != groups.len() {
        return Err(EvalError::ShapeMismatch(values.len(), groups.len()));
    }
    let mut by: std::collections::BTreeMap<&str, Vec<f64>> = Default::default();
    for (v, g) in values.iter().zip(groups) {
        by.entry(g).or_default().push(*v);
    }
    let clusters: Vec<Vec<f64>> = by.into_values().collect();
    let stat = |cs: &[Vec<f64>]| mean(&cs.concat());
    bootstrap_ci_with(name, &clusters, stat, replicates, alpha, seed)
}

// ---------------------------------------------------------------------------
// ranking

/// Ranks of one task's values across models (1 = best, ties averaged).
pub fn rank_values(values: &[f64], higher_is_better: bool) -> Vec<f64> {
    if higher_is_better {
        average_ranks_ascending(&values.iter().map(|v| -v).collect::<Vec<_>>())
    } else {
        average_ranks_ascending(values)
    }
}

/// Models × tasks ranking with averages and Nemenyi critical difference.
#[derive(Clone, Debug, PartialEq)]
pub struct RankTable {
    /// `values[model][task]`
    pub values: Vec<Vec<f64>>,
    pub ranks: Vec<Vec<f64>>,
    pub average_rank: Vec<f64>,
    /// `None` when the model count is outside the critical-value table.
    pub cd: Option<f64>,
}

impl RankTable {
    /// Pairs `(i, j)`, `i < j`, whose average-rank gap exceeds the CD.
    pub fn significant_pairs(&self) -> Vec<(usize, usize)> {
        let Some(cd) = self.cd else { return Vec::new() };
        let k = self.average_rank.len();
        let mut out = Vec::new();
        for i in 0..k {
            for j in i + 1..k {
                if (self.average_rank[i] - self.average_rank[j]).abs() > cd {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Maximal groups of models not significantly different from each other.
    pub fn cd_groups(&self) -> Vec<Vec<usize>> {
        cd_groups(&self.average_rank, self.cd.unwrap_or(f64::INFINITY))
    }
}

/// Ranks a models × tasks matrix; `higher_is_better[task]`.
pub fn rank_models(values: &[Vec<Option<f64>>], higher_is_better: &[bool]) -> Result<RankTable> {
    let k = values.len();
    if k == 0 {
        return Err(EvalError::EmptySample);
    }
    let n = higher_is_better.len();
    let mut full = vec![vec![0.0; n]; k];
    for (m, row) in values.iter().enumerate() {
        if row.len() != n {
            return Err(EvalError::ShapeMismatch(row.len(), n));
        }
        for (t, v) in row.iter().enumerate() {
            full[m][t] = v.ok_or(EvalError::MissingCell { model: m, task: t })?;
        }
    }
    let mut ranks = vec![vec![0.0; n]; k];
    for t in 0..n {
        let col: Vec<f64> = full.iter().map(|r| r[t]).collect();
        for (m, r) in rank_values(&col, higher_is_better[t]).into_iter().enumerate() {
            ranks[m][t] = r;
        }
    }
    let average_rank = ranks
        .iter()
        .map(|r| if n == 0 { (k + 1) as f64 / 2.0 } else { r.iter().sum::<f64>() / n as f64 })
        .collect();
    let cd = if n > 0 { nemenyi_cd(k, n).ok() } else { None };
    Ok(RankTable {
        values: full,
        ranks,
        average_rank,
        cd,
    })
}

/// Two-tailed q_0.05 critical values for k = 2..=10 models.
const Q_05: [f64; 9] = [1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164];

/// `q_0.05(k)·sqrt(k(k+1)/(6N))`.
pub fn nemenyi_cd(k: usize, n: usize) -> Result<f64> {
    if !(2..=10).contains(&k) {
        return Err(EvalError::KOutOfTableRange(k));
    }
    if n == 0 {
        return Err(EvalError::EmptySample);
    }
    Ok(Q_05[k - 2] * ((k * (k + 1)) as f64 / (6 * n) as f64).sqrt())
}

/// Maximal runs of rank-sorted models whose spread is ≤ `cd`.
pub fn cd_groups(avg_rank: &[f64], cd: f64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..avg_rank.len()).collect();
    order.sort_by(|&a, &b| avg_rank[a].total_cmp(&avg_rank[b]).then(a.cmp(&b)));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in 0..order.len() {
        let mut j = i;
        while j + 1 < order.len() && avg_rank[order[j + 1]] - avg_rank[order[i]] <= cd {
            j += 1;
        }
        let g = order[i..=j].to_vec();
        // skip runs contained in the previous one
        if groups.last().is_none_or(|last| !g.iter().all(|m| last.contains(m))) {
            groups.push(g);
        }
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_fixture() {
        let a = binary_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert_eq!(a, 0.75);
        assert_eq!(binary_auc(&[1.0; 4], &[false, true, false, true]).unwrap(), 0.5);
    }

    #[test]
    fn tie_averaged_ranks() {
        assert_eq!(rank_values(&[0.9, 0.8, 0.9, 0.7], true), vec![1.5, 3.0, 1.5, 4.0]);
        assert_eq!(rank_values(&[2.0; 3], true), vec![2.0; 3]);
    }

    #[test]
    fn small_metrics() {
        let conf = vec![vec![4, 0], vec![2, 2]];
        assert_eq!(balanced_accuracy(&conf).unwrap(), 0.75);
        assert_eq!(weighted_f1_from(&[1.0, 0.0], &[1.0, 0.0], &[3, 1]).unwrap(), 0.75);
        assert_eq!(balanced_accuracy(&[vec![1, 0], vec![0, 0]]), Err(EvalError::EmptyClass(1)));
    }

    #[test]
    fn groups_split_on_gap() {
        assert_eq!(cd_groups(&[1.0, 1.5, 3.0, 3.2], 1.0), vec![vec![0, 1], vec![2, 3]]);
        assert_eq!(cd_groups(&[1.0, 1.8, 2.6], 1.0), vec![vec![0, 1], vec![1, 2]]);
    }
}
