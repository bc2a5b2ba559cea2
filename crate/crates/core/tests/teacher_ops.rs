mod common;

use common::{random_table, random_teacher, var_loss_sum};
use kd_debias::data::{generate_synthetic, Interaction, InteractionTable, SyntheticConfig};
use kd_debias::distill::{train_mf_baseline, DistillConfig};
use kd_debias::embedding::Embedding;
use kd_debias::teacher::{
    bce, fuse_f, invariant_score, loss_env, loss_inv, loss_major, loss_var, phi,
    reassign_environments, total_var_loss, train_teacher, variant_score, TeacherConfig,
    TeacherModel,
};
use proptest::prelude::*;

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn one(user: usize, item: usize, label: f64, env: usize) -> Interaction {
    Interaction {
        user,
        item,
        label,
        env,
    }
}

fn unit_model(envs: usize) -> TeacherModel {
    let mut m = TeacherModel::zeros(1, 1, envs, 2);
    m.user_inv = Embedding::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
    m.item_inv = Embedding::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
    m.user_var = Embedding::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
    m.item_var = Embedding::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
    m.env_emb = Embedding::from_vec(envs, 2, vec![1.0; 2 * envs]).unwrap();
    m
}

#[test]
fn phi_examples() {
    assert_eq!(phi(&[0.0, 0.0, 0.0]), 0.5);
    let expected = logistic(2.0);
    assert!(close(phi(&[1.0, 1.0]), expected, 1e-15));
    assert!(close(expected, 0.880797, 1e-6));
}

#[test]
fn score_examples() {
    let mut m = unit_model(2);
    assert!(close(invariant_score(&m, 0, 0).unwrap(), logistic(2.0), 1e-15));
    assert!(close(variant_score(&m, 0, 0, 1).unwrap(), logistic(2.0), 1e-15));

    m.user_inv = Embedding::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
    m.item_inv = Embedding::from_vec(1, 2, vec![0.0, 1.0]).unwrap();
    assert_eq!(invariant_score(&m, 0, 0).unwrap(), 0.5);

    m.env_emb = Embedding::zeros(2, 2);
    assert_eq!(variant_score(&m, 0, 0, 0).unwrap(), 0.5);

    let mut t = random_teacher(3, 4, 5, 2, 3);
    for x in t.item_inv.as_mut_slice() {
        *x = 0.0;
    }
    for u in 0..4 {
        assert_eq!(invariant_score(&t, u, 2).unwrap(), 0.5);
    }
    assert!(invariant_score(&t, 4, 0).is_err());
    assert!(variant_score(&t, 0, 0, 2).is_err());
}

#[test]
fn permuting_dimensions_keeps_variant_score() {
    let t = random_teacher(9, 3, 3, 2, 4);
    let perm = [2, 0, 3, 1];
    let permute = |e: &Embedding| {
        let mut data = Vec::new();
        for r in 0..e.rows() {
            data.extend(perm.iter().map(|&k| e.row(r)[k]));
        }
        Embedding::from_vec(e.rows(), e.dim(), data).unwrap()
    };
    let mut p = t.clone();
    p.user_var = permute(&t.user_var);
    p.item_var = permute(&t.item_var);
    p.env_emb = permute(&t.env_emb);
    for u in 0..3 {
        for i in 0..3 {
            for e in 0..2 {
                let a = variant_score(&t, u, i, e).unwrap();
                let b = variant_score(&p, u, i, e).unwrap();
                assert!(close(a, b, 1e-15));
            }
        }
    }
}

#[test]
fn fuse_f_examples() {
    assert_eq!(fuse_f(1.0, 1.0), 1.0);
    assert_eq!(fuse_f(0.5, 0.5), 0.25);
    for p in [0.0, 0.3, 1.0] {
        assert_eq!(fuse_f(0.0, p), 0.0);
    }
}

#[test]
fn bce_examples() {
    assert!(close(bce(0.5, 1.0), std::f64::consts::LN_2, 1e-15));
    assert!(bce(1.0, 1.0) <= 1e-6);
    assert!(bce(0.0, 0.0) <= 1e-6);
    let at = bce(0.9, 0.9);
    let grid_min = (1..1000)
        .map(|k| bce(k as f64 / 1000.0, 0.9))
        .fold(f64::INFINITY, f64::min);
    assert!(at <= grid_min + 1e-15);
}

#[test]
fn loss_inv_examples() {
    let m = TeacherModel::zeros(2, 2, 2, 3);
    let batch = [one(0, 0, 1.0, 0), one(1, 1, 1.0, 1)];
    assert!(close(loss_inv(&m, &batch).unwrap(), std::f64::consts::LN_2, 1e-15));

    let t = random_teacher(1, 4, 4, 2, 3);
    let x = one(2, 3, 1.0, 1);
    let p = invariant_score(&t, 2, 3).unwrap();
    assert!(close(loss_inv(&t, &[x]).unwrap(), bce(p, 1.0), 1e-15));

    let table = random_table(4, 4, 4, 2, 10, false);
    let b = table.interactions();
    let doubled: Vec<_> = b.iter().chain(b).copied().collect();
    assert!(close(loss_inv(&t, b).unwrap(), loss_inv(&t, &doubled).unwrap(), 1e-14));
}

#[test]
fn loss_env_examples() {
    let m = TeacherModel::zeros(1, 2, 2, 3);
    let batch = [one(0, 0, 1.0, 0), one(0, 1, 0.0, 1)];
    assert!(close(loss_env(&m, &batch).unwrap(), std::f64::consts::LN_2, 1e-15));

    let single = random_teacher(2, 2, 2, 1, 3);
    assert_eq!(loss_env(&single, &[one(1, 1, 1.0, 0)]).unwrap(), 0.0);

    // softmax of (ln 0.9, ln 0.1) is (0.9, 0.1)
    let mut c = TeacherModel::zeros(1, 1, 2, 2);
    c.clf_bias = vec![0.9_f64.ln(), 0.1_f64.ln()];
    let l = loss_env(&c, &[one(0, 0, 1.0, 0)]).unwrap();
    assert!(close(l, -(0.9_f64.ln()), 1e-12));
    assert!(close(l, 0.10536, 1e-5));
}

#[test]
fn loss_var_examples() {
    let m = TeacherModel::zeros(1, 1, 2, 2);
    let l = loss_var(&m, &[one(0, 0, 1.0, 1)]).unwrap();
    assert!(close(l, 4.0_f64.ln(), 1e-12));
    assert!(close(l, 1.386294, 1e-6));

    let t = random_teacher(5, 3, 3, 2, 4);
    let x = one(1, 2, 0.0, 1);
    let p = invariant_score(&t, 1, 2).unwrap() * variant_score(&t, 1, 2, 1).unwrap();
    assert!(close(loss_var(&t, &[x]).unwrap(), -(1.0 - p).ln(), 1e-12));
}

#[test]
fn loss_major_examples() {
    let t = random_teacher(6, 4, 4, 3, 3);
    let table = random_table(6, 4, 4, 3, 12, true);
    let b = table.interactions();
    assert_eq!(loss_major(&t, b, 0.0, 0.0).unwrap(), loss_inv(&t, b).unwrap());

    let z = TeacherModel::zeros(2, 2, 2, 3);
    let ones = [one(0, 0, 1.0, 0), one(1, 1, 1.0, 1)];
    let expected = std::f64::consts::LN_2 - std::f64::consts::LN_2 + 4.0_f64.ln();
    assert!(close(loss_major(&z, &ones, 1.0, 1.0).unwrap(), expected, 1e-12));

    let alpha = 0.7;
    let term = |beta: f64| {
        loss_major(&t, b, alpha, beta).unwrap() - loss_inv(&t, b).unwrap()
            + alpha * loss_env(&t, b).unwrap()
    };
    assert!(close(term(2.0), 2.0 * term(1.0), 1e-12));
}

#[test]
fn reassignment_never_increases_variant_loss() {
    for seed in 0..120u64 {
        let envs = 1 + (seed % 4) as usize;
        let dim = [2, 3, 8][(seed % 3) as usize];
        let t = random_teacher(seed, 5, 6, envs, dim);
        let table = random_table(seed + 1000, 5, 6, envs, 1 + (seed as usize * 7) % 30, seed % 2 == 0);
        let before = var_loss_sum(&t, &table);
        let after_table = reassign_environments(&t, &table).unwrap();
        let after = var_loss_sum(&t, &after_table);
        assert!(after <= before + 1e-12, "seed {seed}: {before} -> {after}");
        assert!(close(total_var_loss(&t, &after_table).unwrap(), after, 1e-9));
    }
}

#[test]
fn reassignment_examples() {
    let t = random_teacher(1, 4, 4, 1, 3);
    let table = random_table(1, 4, 4, 1, 10, false);
    assert_eq!(reassign_environments(&t, &table).unwrap(), table);

    let mut t = random_teacher(2, 4, 4, 3, 3);
    let row = t.env_emb.row(0).to_vec();
    for e in 1..3 {
        t.env_emb.row_mut(e).copy_from_slice(&row);
    }
    let table = random_table(2, 4, 4, 3, 12, false);
    let moved = reassign_environments(&t, &table).unwrap();
    assert!(moved.iter().all(|x| x.env == 0));
}

fn synthetic_train(users: usize, envs: usize) -> InteractionTable {
    let (biased, _) = generate_synthetic(&SyntheticConfig {
        num_users: users,
        num_items: 60,
        num_envs: envs,
        positives_per_user: 20,
        seed: 11,
        ..Default::default()
    })
    .unwrap();
    biased
}

#[test]
fn zero_epochs_return_the_initial_model() {
    let data = synthetic_train(20, 2);
    let all_pos: Vec<_> = data.iter().map(|x| Interaction { label: 1.0, ..*x }).collect();
    let all_pos = InteractionTable::new(all_pos, data.num_users(), data.num_items(), 2).unwrap();
    let cfg = TeacherConfig {
        epochs: 0,
        seed: 4,
        ..Default::default()
    };
    let trained = train_teacher(&cfg, &all_pos).unwrap();
    let init = TeacherModel::init(20, 60, 2, cfg.dim, cfg.init_std, 4);
    assert_eq!(trained.model, init);
    assert!(trained.history.is_empty());
    let l = loss_inv(&trained.model, all_pos.interactions()).unwrap();
    assert!(close(l, std::f64::consts::LN_2, 0.05), "{l}");
}

#[test]
fn training_lowers_invariant_loss_and_is_deterministic() {
    let data = synthetic_train(50, 2);
    let cfg = TeacherConfig {
        dim: 8,
        lr: 0.1,
        epochs: 15,
        batch_size: 64,
        seed: 2,
        ..Default::default()
    };
    let init = TeacherModel::init(50, 60, 2, 8, cfg.init_std, 2);
    let initial = loss_inv(&init, data.interactions()).unwrap();
    let a = train_teacher(&cfg, &data).unwrap();
    let final_inv = a.history.last().unwrap().loss_inv;
    assert!(final_inv < initial, "{initial} -> {final_inv}");
    let b = train_teacher(&cfg, &data).unwrap();
    assert_eq!(a, b);
}

#[test]
fn training_rejects_mismatched_envs_and_raw_ratings() {
    let data = synthetic_train(10, 2);
    let cfg = TeacherConfig {
        num_envs: 3,
        epochs: 1,
        ..Default::default()
    };
    assert!(train_teacher(&cfg, &data).is_err());
    let raw: Vec<_> = data.iter().map(|x| Interaction { label: 5.0, ..*x }).collect();
    let raw = InteractionTable::new(raw, 10, 60, 2).unwrap();
    assert!(train_teacher(&TeacherConfig { epochs: 1, ..Default::default() }, &raw).is_err());
}

fn mf_equivalence_gap(beta: f64, detach: bool) -> f64 {
    let data = synthetic_train(30, 1);
    let tcfg = TeacherConfig {
        dim: 6,
        num_envs: 1,
        alpha: 0.0,
        beta,
        detach_inv_in_var: detach,
        lr: 0.2,
        epochs: 8,
        batch_size: 32,
        l2: 1e-3,
        seed: 5,
        ..Default::default()
    };
    let dcfg = DistillConfig {
        dim: 6,
        lr: 0.2,
        epochs: 8,
        batch_size: 32,
        l2: 1e-3,
        seed: 5,
        init_std: tcfg.init_std,
        ..Default::default()
    };
    let teacher = train_teacher(&tcfg, &data).unwrap().model;
    let mf = train_mf_baseline(&data, &dcfg).unwrap();
    let diff = |a: &Embedding, b: &Embedding| {
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    };
    diff(&teacher.user_inv, &mf.user_emb).max(diff(&teacher.item_inv, &mf.item_emb))
}

#[test]
fn invariant_branch_reduces_to_mf() {
    assert!(mf_equivalence_gap(0.0, false) <= 1e-10);
    assert!(mf_equivalence_gap(9.9, true) <= 1e-10);
    // with the variant term attached, L_var also moves the invariant tables
    assert!(mf_equivalence_gap(9.9, false) > 1e-6);
}

proptest! {
    #[test]
    fn phi_is_permutation_invariant(mut x in prop::collection::vec(-5.0f64..5.0, 1..10), seed in 0u64..1000) {
        let before = phi(&x);
        let k = (seed as usize) % x.len();
        x.rotate_left(k);
        x.reverse();
        prop_assert!(close(phi(&x), before, 1e-12));
    }

    #[test]
    fn scores_stay_inside_the_unit_interval(seed in 0u64..500, scale in 0.01f64..200.0) {
        let mut t = random_teacher(seed, 3, 3, 2, 4);
        for s in t.parameter_slices_mut() {
            for v in s.iter_mut() {
                *v *= scale;
            }
        }
        for u in 0..3 {
            for i in 0..3 {
                let p = invariant_score(&t, u, i).unwrap();
                prop_assert!(p > 0.0 && p < 1.0);
                let q = variant_score(&t, u, i, 1).unwrap();
                prop_assert!(q > 0.0 && q < 1.0);
            }
        }
    }
}
