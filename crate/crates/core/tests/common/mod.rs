#![allow(dead_code)]

use kd_debias::data::{Interaction, InteractionTable};
use kd_debias::embedding::Embedding;
use kd_debias::rng;
use kd_debias::teacher::TeacherModel;
use rand::seq::SliceRandom;
use rand::Rng;

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Denominator floor for relative error, so entries that are zero in both
/// gradients compare on absolute error instead.
pub const FD_FLOOR: f64 = 1e-6;

/// Teacher with unit-scale embeddings and a non-zero classifier, so every
/// loss term has a gradient worth checking.
pub fn random_teacher(seed: u64, users: usize, items: usize, envs: usize, dim: usize) -> TeacherModel {
    let mut t = TeacherModel::init(users, items, envs, dim, 0.6, seed);
    let mut r = rng::stream(seed, "test-classifier");
    t.clf_weight = Embedding::normal(dim, envs, 0.8, &mut r);
    t.clf_bias = (0..envs).map(|_| r.random_range(-0.5..0.5)).collect();
    t
}

/// `n` distinct pairs with labels in {0, 1} or, if `soft`, in (0, 1).
pub fn random_table(
    seed: u64,
    users: usize,
    items: usize,
    envs: usize,
    n: usize,
    soft: bool,
) -> InteractionTable {
    let mut r = rng::stream(seed, "test-table");
    let mut pairs: Vec<(usize, usize)> = (0..users)
        .flat_map(|u| (0..items).map(move |i| (u, i)))
        .collect();
    pairs.shuffle(&mut r);
    let rows = pairs[..n.min(pairs.len())]
        .iter()
        .map(|&(user, item)| Interaction {
            user,
            item,
            label: if soft {
                r.random_range(0.05..0.95)
            } else {
                f64::from(r.random_bool(0.5) as u8)
            },
            env: r.random_range(0..envs),
        })
        .collect();
    InteractionTable::new(rows, users, items, envs).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_FLOOR)
}

/// Central differences of `loss` with respect to every entry of every
/// parameter table, compared against `analytic` (same layout). Returns the
/// largest relative error.
pub fn max_fd_error<M: Clone>(
    model: &M,
    slices: impl Fn(&mut M) -> Vec<&mut [f64]>,
    analytic: &[Vec<f64>],
    loss: impl Fn(&M) -> f64,
) -> f64 {
    let mut probe = model.clone();
    let shape: Vec<usize> = slices(&mut probe).iter().map(|s| s.len()).collect();
    assert_eq!(shape.len(), analytic.len());
    let mut worst = 0.0_f64;
    for (t, &len) in shape.iter().enumerate() {
        assert_eq!(len, analytic[t].len(), "table {t} layout");
        for j in 0..len {
            let orig = slices(&mut probe)[t][j];
            slices(&mut probe)[t][j] = orig + FD_EPS;
            let up = loss(&probe);
            slices(&mut probe)[t][j] = orig - FD_EPS;
            let down = loss(&probe);
            slices(&mut probe)[t][j] = orig;
            let numeric = (up - down) / (2.0 * FD_EPS);
            worst = worst.max(rel_err(analytic[t][j], numeric));
        }
    }
    worst
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Σ over records of the variant loss, computed from scratch.
pub fn var_loss_sum(t: &TeacherModel, table: &InteractionTable) -> f64 {
    table
        .iter()
        .map(|x| {
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(a, b)| a * b).sum::<f64>();
            let p_inv = sigmoid(dot(t.user_inv.row(x.user), t.item_inv.row(x.item)));
            let uv: Vec<f64> = t
                .user_var
                .row(x.user)
                .iter()
                .zip(t.item_var.row(x.item))
                .map(|(a, b)| a * b)
                .collect();
            let p = (p_inv * sigmoid(dot(&uv, t.env_emb.row(x.env)))).clamp(1e-7, 1.0 - 1e-7);
            -(x.label * p.ln() + (1.0 - x.label) * (1.0 - p).ln())
        })
        .sum()
}

pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// DCG straight from the definition: ranks are 1-based, gain 1 for a relevant
/// item, discount log2(rank + 1).
pub fn dcg(order: &[usize], relevant: &[bool], k: usize) -> f64 {
    order
        .iter()
        .enumerate()
        .filter(|(pos, c)| pos + 1 <= k && relevant[**c])
        .map(|(pos, _)| 1.0 / ((pos + 2) as f64).log2())
        .sum()
}

/// Ranking, NDCG@k and Recall@k by exhaustive search over every ordering of
/// the candidates `0..n` (candidate index = item id here).
pub fn brute_force(scores: &[f64], relevant: &[bool], k: usize) -> (Vec<usize>, f64, f64) {
    let perms = permutations(scores.len());
    let valid: Vec<&Vec<usize>> = perms
        .iter()
        .filter(|p| {
            p.windows(2).all(|w| {
                let (a, b) = (w[0], w[1]);
                scores[a] > scores[b] || (scores[a] == scores[b] && a < b)
            })
        })
        .collect();
    assert_eq!(valid.len(), 1, "tie rule must pick one ordering");
    let order = valid[0].clone();
    let ideal = perms
        .iter()
        .map(|p| dcg(p, relevant, k))
        .fold(0.0, f64::max);
    let ndcg = if ideal == 0.0 { 0.0 } else { dcg(&order, relevant, k) / ideal };
    let total = relevant.iter().filter(|r| **r).count();
    let hits = order[..k.min(order.len())].iter().filter(|c| relevant[**c]).count();
    let recall = if total == 0 { 0.0 } else { hits as f64 / total as f64 };
    (order, ndcg, recall)
}
