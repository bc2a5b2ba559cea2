//! Ranking evaluation, parameter counting and multi-seed stability.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;

use crate::data::InteractionTable;
use crate::distill::{student_score, StudentModel, TeacherFusion};
use crate::error::{Error, Result};
use crate::teacher::TeacherModel;

/// Anything that scores a `(user, item)` pair.
pub trait Scorer {
    fn score(&self, user: usize, item: usize) -> Result<f64>;
}

impl Scorer for StudentModel {
    fn score(&self, user: usize, item: usize) -> Result<f64> {
        student_score(self, user, item)
    }
}

impl Scorer for TeacherFusion<'_> {
    fn score(&self, user: usize, item: usize) -> Result<f64> {
        Ok(self.predict(user, item)?.y_star)
    }
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn score(&self, user: usize, item: usize) -> Result<f64> {
        (**self).score(user, item)
    }
}

/// Adapts a plain function into a [`Scorer`].
pub struct FnScorer<F>(pub F);

impl<F: Fn(usize, usize) -> f64> Scorer for FnScorer<F> {
    fn score(&self, user: usize, item: usize) -> Result<f64> {
        Ok((self.0)(user, item))
    }
}

/// Candidates of one user ordered by descending score, ties by ascending
/// item id.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    pub user: usize,
    pub items: Vec<usize>,
    pub relevant: Vec<bool>,
    pub scores: Vec<f64>,
}

impl RankedList {
    pub fn num_relevant(&self) -> usize {
        self.relevant.iter().filter(|r| **r).count()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Ranks `(item, relevant)` candidates for `user`.
pub fn rank_items<S: Scorer + ?Sized>(
    scorer: &S,
    user: usize,
    candidates: &[(usize, bool)],
) -> Result<RankedList> {
    if candidates.is_empty() {
        return Err(Error::Empty(format!("candidate set of user {user}")));
    }
    let mut scored = Vec::with_capacity(candidates.len());
    for &(item, relevant) in candidates {
        let s = scorer.score(user, item)?;
        if s.is_nan() {
            return Err(Error::Invalid(format!("NaN score for ({user}, {item})")));
        }
        scored.push((item, relevant, s));
    }
    scored.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    Ok(RankedList {
        user,
        items: scored.iter().map(|c| c.0).collect(),
        relevant: scored.iter().map(|c| c.1).collect(),
        scores: scored.iter().map(|c| c.2).collect(),
    })
}

fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

/// `Σ 1/log2(rank + 1)` over relevant items at ranks `1..=k`.
pub fn dcg_at_k(ranked: &RankedList, k: usize) -> f64 {
    ranked
        .relevant
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, r)| **r)
        .map(|(pos, _)| discount(pos + 1))
        .sum()
}

/// DCG of the ideal ordering truncated at `k`.
pub fn ideal_dcg_at_k(num_relevant: usize, k: usize) -> f64 {
    (1..=num_relevant.min(k)).map(discount).sum()
}

/// Zero when the list holds no relevant item.
pub fn ndcg_at_k(ranked: &RankedList, k: usize) -> f64 {
    let ideal = ideal_dcg_at_k(ranked.num_relevant(), k);
    if ideal == 0.0 {
        return 0.0;
    }
    dcg_at_k(ranked, k) / ideal
}

/// Fraction of the user's relevant items ranked within the top `k`; zero
/// when the list holds no relevant item.
pub fn recall_at_k(ranked: &RankedList, k: usize) -> f64 {
    let total = ranked.num_relevant();
    if total == 0 {
        return 0.0;
    }
    let hits = ranked.relevant.iter().take(k).filter(|r| **r).count();
    hits as f64 / total as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    Ndcg,
    Recall,
}

impl Metric {
    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::Ndcg => "ndcg",
            Metric::Recall => "recall",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricValue {
    pub metric: Metric,
    pub k: usize,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CandidateSet {
    /// Each user's own test items.
    #[default]
    TestItems,
    /// Every item in the catalog; relevance from the user's test positives.
    FullCatalog,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub run_id: String,
    pub seed: u64,
    pub values: Vec<MetricValue>,
    pub users_evaluated: usize,
    pub parameter_count: Option<usize>,
    pub config_fingerprint: Option<String>,
}

pub const CSV_HEADER: &str = "run_id,seed,metric,k,value";

impl MetricReport {
    pub fn get(&self, metric: Metric, k: usize) -> Option<f64> {
        self.values
            .iter()
            .find(|v| v.metric == metric && v.k == k)
            .map(|v| v.value)
    }

    /// One row per `(metric, k)` under [`CSV_HEADER`].
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for v in &self.values {
            writeln!(out, "{},{},{},{},{}", self.run_id, self.seed, v.metric, v.k, v.value).unwrap();
        }
        out
    }
}

/// Averages NDCG@k and Recall@k uniformly over users with at least one
/// positive test item.
pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    test: &InteractionTable,
    ks: &[usize],
    candidates: CandidateSet,
) -> Result<MetricReport> {
    if test.is_empty() {
        return Err(Error::Empty("test table".into()));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::InvalidConfig("k values must be >= 1".into()));
    }
    let mut per_user: BTreeMap<usize, Vec<(usize, bool)>> = BTreeMap::new();
    for x in test.iter() {
        per_user.entry(x.user).or_default().push((x.item, x.label > 0.5));
    }
    let mut sums = vec![(0.0, 0.0); ks.len()];
    let mut users = 0usize;
    for (user, mut items) in per_user {
        if !items.iter().any(|c| c.1) {
            continue;
        }
        if candidates == CandidateSet::FullCatalog {
            let mut relevant = vec![false; test.num_items()];
            for (item, rel) in &items {
                relevant[*item] |= *rel;
            }
            items = relevant.into_iter().enumerate().collect();
        } else {
            items.sort_unstable();
        }
        let ranked = rank_items(scorer, user, &items)?;
        for (sum, &k) in sums.iter_mut().zip(ks) {
            sum.0 += ndcg_at_k(&ranked, k);
            sum.1 += recall_at_k(&ranked, k);
        }
        users += 1;
    }
    if users == 0 {
        return Err(Error::Empty("no test user has a positive item".into()));
    }
    let mut values = Vec::with_capacity(2 * ks.len());
    for (metric, pick) in [(Metric::Ndcg, 0), (Metric::Recall, 1)] {
        for (sum, &k) in sums.iter().zip(ks) {
            let total = if pick == 0 { sum.0 } else { sum.1 };
            values.push(MetricValue {
                metric,
                k,
                value: total / users as f64,
            });
        }
    }
    Ok(MetricReport {
        values,
        users_evaluated: users,
        ..Default::default()
    })
}

pub trait ParameterCount {
    fn parameter_count(&self) -> usize;
}

impl ParameterCount for StudentModel {
    fn parameter_count(&self) -> usize {
        self.user_emb.len() + self.item_emb.len()
    }
}

impl ParameterCount for TeacherModel {
    fn parameter_count(&self) -> usize {
        self.user_inv.len()
            + self.item_inv.len()
            + self.user_var.len()
            + self.item_var.len()
            + self.env_emb.len()
            + self.clf_weight.len()
            + self.clf_bias.len()
    }
}

pub fn count_parameters(model: &dyn ParameterCount) -> usize {
    model.parameter_count()
}

/// `(users + items) · dim`.
pub fn student_parameter_count(num_users: usize, num_items: usize, dim: usize) -> usize {
    (num_users + num_items) * dim
}

/// Two embedding sets, environment embeddings, classifier weights and bias.
pub fn teacher_parameter_count(num_users: usize, num_items: usize, num_envs: usize, dim: usize) -> usize {
    2 * (num_users + num_items) * dim + num_envs * dim + dim * num_envs + num_envs
}

/// `|p − y|`.
pub fn prediction_distance(p: f64, y: f64) -> f64 {
    (p - y).abs()
}

/// Distance of each teacher prediction to the unbiased label of one record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistanceRecord {
    pub user: usize,
    pub item: usize,
    pub label: f64,
    pub invariant: f64,
    pub variant: f64,
    pub fused: f64,
}

pub fn distance_diagnostics(
    fusion: &TeacherFusion<'_>,
    test: &InteractionTable,
) -> Result<Vec<DistanceRecord>> {
    test.iter()
        .map(|x| {
            let s = fusion.predict(x.user, x.item)?;
            Ok(DistanceRecord {
                user: x.user,
                item: x.item,
                label: x.label,
                invariant: prediction_distance(s.p_inv, x.label),
                variant: prediction_distance(s.p_var, x.label),
                fused: prediction_distance(s.y_star, x.label),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n − 1).
    pub std: f64,
}

/// Order-independent: values are summed in sorted order.
pub fn mean_std(values: &[f64]) -> Result<MeanStd> {
    if values.len() < 2 {
        return Err(Error::InvalidConfig(
            "need at least two values for a sample standard deviation".into(),
        ));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    // offset by the smallest value so identical inputs give an exact mean
    let base = sorted[0];
    let mean = base + sorted.iter().map(|v| v - base).sum::<f64>() / n;
    let mut sq: Vec<f64> = sorted.iter().map(|v| (v - mean).powi(2)).collect();
    sq.sort_by(f64::total_cmp);
    let var = sq.iter().sum::<f64>() / (n - 1.0);
    Ok(MeanStd {
        mean,
        std: var.sqrt(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityReport {
    pub k: usize,
    /// `(seed, ndcg@k, recall@k)` per run.
    pub runs: Vec<(u64, f64, f64)>,
    pub ndcg: MeanStd,
    pub recall: MeanStd,
}

impl StabilityReport {
    pub fn summary(&self, label: &str) -> String {
        format!(
            "{label}: ndcg@{k} mean={:.6} std={:.6}  recall@{k} mean={:.6} std={:.6}  over {} seeds",
            self.ndcg.mean,
            self.ndcg.std,
            self.recall.mean,
            self.recall.std,
            self.runs.len(),
            k = self.k
        )
    }
}

/// Runs `run` once per seed and summarizes NDCG@k / Recall@k.
pub fn stability_report<F>(mut run: F, seeds: &[u64], k: usize) -> Result<StabilityReport>
where
    F: FnMut(u64) -> Result<MetricReport>,
{
    if seeds.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "stability needs at least 2 seeds, got {}",
            seeds.len()
        )));
    }
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let report = run(seed)?;
        let missing = |m: Metric| Error::Invalid(format!("run for seed {seed} did not report {m}@{k}"));
        let ndcg = report.get(Metric::Ndcg, k).ok_or_else(|| missing(Metric::Ndcg))?;
        let recall = report.get(Metric::Recall, k).ok_or_else(|| missing(Metric::Recall))?;
        runs.push((seed, ndcg, recall));
    }
    let ndcg: Vec<f64> = runs.iter().map(|r| r.1).collect();
    let recall: Vec<f64> = runs.iter().map(|r| r.2).collect();
    Ok(StabilityReport {
        k,
        ndcg: mean_std(&ndcg)?,
        recall: mean_std(&recall)?,
        runs,
    })
}
