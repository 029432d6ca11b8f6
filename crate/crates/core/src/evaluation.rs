//! Per-user train/test split and top-N ranking metrics.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{AdoptionDataset, SavedModel};
use crate::error::{Error, Result};
use crate::ids::{AppId, UserId};
use crate::model::{FlatParams, Model};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train_fraction: 0.8, seed: 1 }
    }
}

/// Number of a user's `n` adoptions that go to training.
pub fn train_count(n: usize, fraction: f64) -> usize {
    if n < 2 {
        return n;
    }
    ((fraction * n as f64).floor() as usize).clamp(1, n - 1)
}

/// Randomly partitions each user's adoptions. Both halves keep the full user list.
pub fn split(data: &AdoptionDataset, spec: &SplitSpec) -> Result<(AdoptionDataset, AdoptionDataset)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::InvalidConfig("train fraction must lie strictly between 0 and 1".into()));
    }
    if data.n_obs() == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut train = Vec::with_capacity(data.n_users());
    let mut test = Vec::with_capacity(data.n_users());
    for (u, apps) in data.per_user().iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(u as u64);
        let mut apps = apps.clone();
        apps.shuffle(&mut rng);
        let rest = apps.split_off(train_count(apps.len(), spec.train_fraction));
        train.push(apps);
        test.push(rest);
    }
    Ok((
        AdoptionDataset::new(data.users().clone(), data.n_apps(), train)?,
        AdoptionDataset::new(data.users().clone(), data.n_apps(), test)?,
    ))
}

fn hits<'a>(recommended: &'a [AppId], test: &'a [AppId], n: usize) -> impl Iterator<Item = bool> + 'a {
    let n = n.min(recommended.len());
    recommended[..n].iter().map(move |a| test.contains(a))
}

fn check(test: &[AppId], n: usize) -> Result<()> {
    if test.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    if n == 0 {
        return Err(Error::InvalidConfig("cutoff N must be at least 1".into()));
    }
    Ok(())
}

pub fn precision_recall_at_n(recommended: &[AppId], test: &[AppId], n: usize) -> Result<(f64, f64)> {
    check(test, n)?;
    let h = hits(recommended, test, n).filter(|&x| x).count() as f64;
    Ok((h / n as f64, h / test.len() as f64))
}

/// Weighted harmonic mean of precision and recall; 0 when both are 0.
pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let denom = b2 * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / denom
    }
}

pub fn ap_at_n(recommended: &[AppId], test: &[AppId], n: usize) -> Result<f64> {
    check(test, n)?;
    let mut found = 0usize;
    let mut sum = 0.0;
    for (k, hit) in hits(recommended, test, n).enumerate() {
        if hit {
            found += 1;
            sum += found as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / n.min(test.len()) as f64)
}

pub fn ndcg_at_n(recommended: &[AppId], test: &[AppId], n: usize) -> Result<f64> {
    check(test, n)?;
    let gain = |k: usize| 1.0 / ((k + 2) as f64).log2();
    let dcg: f64 = hits(recommended, test, n).enumerate().filter(|&(_, h)| h).map(|(k, _)| gain(k)).sum();
    let idcg: f64 = (0..n.min(test.len())).map(gain).sum();
    Ok(dcg / idcg)
}

/// Anything that can rank every app for a user.
pub trait Scorer: Sync {
    fn n_users(&self) -> usize;
    /// Apps ordered best first, ties by app id, with `exclude` removed.
    fn rank(&self, u: UserId, exclude: &[AppId]) -> Result<Vec<(AppId, f64)>>;
}

impl Scorer for Model {
    fn n_users(&self) -> usize {
        Model::n_users(self)
    }

    fn rank(&self, u: UserId, exclude: &[AppId]) -> Result<Vec<(AppId, f64)>> {
        self.score_all(u, Some(exclude))
    }
}

impl Scorer for FlatParams {
    fn n_users(&self) -> usize {
        FlatParams::n_users(self)
    }

    fn rank(&self, u: UserId, exclude: &[AppId]) -> Result<Vec<(AppId, f64)>> {
        crate::baselines::score_flat(self, u, Some(exclude))
    }
}

impl Scorer for SavedModel {
    fn n_users(&self) -> usize {
        match self {
            SavedModel::Structural { model, .. } => model.n_users(),
            SavedModel::Flat { params, .. } => params.n_users(),
        }
    }

    fn rank(&self, u: UserId, exclude: &[AppId]) -> Result<Vec<(AppId, f64)>> {
        match self {
            SavedModel::Structural { model, .. } => model.rank(u, exclude),
            SavedModel::Flat { params, .. } => params.rank(u, exclude),
        }
    }
}

pub const METRICS: [&str; 5] = ["precision", "recall", "f_beta", "map", "ndcg"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub cutoffs: Vec<usize>,
    pub beta: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { cutoffs: vec![1, 3, 5, 10], beta: 0.5 }
    }
}

/// Metric values for one user, indexed `[cutoff][metric]` in `METRICS` order.
pub fn user_metrics(recommended: &[AppId], test: &[AppId], opts: &EvalOptions) -> Result<Vec<[f64; 5]>> {
    opts.cutoffs
        .iter()
        .map(|&n| {
            let (p, r) = precision_recall_at_n(recommended, test, n)?;
            Ok([p, r, f_beta(p, r, opts.beta), ap_at_n(recommended, test, n)?, ndcg_at_n(recommended, test, n)?])
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub cutoff: usize,
    pub value: f64,
    pub n_users: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub beta: f64,
    pub cutoffs: Vec<usize>,
    pub evaluated_users: usize,
    pub skipped_users: usize,
    pub rows: Vec<MetricRow>,
}

impl EvalReport {
    pub fn value(&self, metric: &str, cutoff: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.metric == metric && r.cutoff == cutoff).map(|r| r.value)
    }

    /// One row per cutoff, one column per metric.
    pub fn to_tsv(&self) -> String {
        let mut s = format!(
            "# model={} beta={} evaluated={} skipped={}\n",
            self.model, self.beta, self.evaluated_users, self.skipped_users
        );
        s.push('N');
        for m in METRICS {
            s.push('\t');
            s.push_str(m);
        }
        s.push('\n');
        for &n in &self.cutoffs {
            s.push_str(&n.to_string());
            for m in METRICS {
                let _ = write!(s, "\t{:.6}", self.value(m, n).unwrap_or(f64::NAN));
            }
            s.push('\n');
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Ranks every app not adopted in `train` for each user with a nonempty test
/// set and averages the metrics over those users.
pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    model_name: &str,
    train: &AdoptionDataset,
    test: &AdoptionDataset,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if opts.cutoffs.is_empty() || opts.cutoffs.contains(&0) {
        return Err(Error::InvalidConfig("cutoffs must be a nonempty list of positive integers".into()));
    }
    if !(opts.beta > 0.0 && opts.beta.is_finite()) {
        return Err(Error::InvalidConfig("beta must be positive".into()));
    }
    if train.n_users() != test.n_users() {
        return Err(Error::InvalidConfig("train and test cover different users".into()));
    }
    let max_n = *opts.cutoffs.iter().max().expect("nonempty");
    let per_user: Vec<Option<Vec<[f64; 5]>>> = (0..test.n_users())
        .into_par_iter()
        .map(|u| {
            let u = UserId::from(u);
            let held = test.adopted(u);
            if held.is_empty() {
                return Ok(None);
            }
            let ranked = scorer.rank(u, train.adopted(u))?;
            let top: Vec<AppId> = ranked.iter().take(max_n).map(|x| x.0).collect();
            user_metrics(&top, held, opts).map(Some)
        })
        .collect::<Result<_>>()?;

    let evaluated = per_user.iter().flatten().count();
    if evaluated == 0 {
        return Err(Error::NoEvaluableUsers);
    }
    let mut sums = vec![[0.0; 5]; opts.cutoffs.len()];
    for m in per_user.iter().flatten() {
        for (acc, vals) in sums.iter_mut().zip(m) {
            for (a, v) in acc.iter_mut().zip(vals) {
                *a += v;
            }
        }
    }
    let mut rows = Vec::new();
    for (metric_idx, name) in METRICS.iter().enumerate() {
        for (ci, &n) in opts.cutoffs.iter().enumerate() {
            rows.push(MetricRow {
                metric: name.to_string(),
                cutoff: n,
                value: sums[ci][metric_idx] / evaluated as f64,
                n_users: evaluated,
            });
        }
    }
    Ok(EvalReport {
        model: model_name.to_string(),
        beta: opts.beta,
        cutoffs: opts.cutoffs.clone(),
        evaluated_users: evaluated,
        skipped_users: test.n_users() - evaluated,
        rows,
    })
}

/// Mean over held-out adoptions of the model's log Pr(app | user).
pub fn mean_test_log_prob(model: &Model, test: &AdoptionDataset) -> Result<f64> {
    let n = test.n_obs();
    if n == 0 {
        return Err(Error::EmptyTestSet);
    }
    let per_user: Vec<f64> = (0..test.n_users())
        .into_par_iter()
        .map(|u| {
            let u = UserId::from(u);
            if test.adopted(u).is_empty() {
                return Ok(0.0);
            }
            let lp = model.log_probs_all(u)?;
            Ok(test.adopted(u).iter().map(|a| lp[a.index()]).sum())
        })
        .collect::<Result<_>>()?;
    Ok(per_user.iter().sum::<f64>() / n as f64)
}
