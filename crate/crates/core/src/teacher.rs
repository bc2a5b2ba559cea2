//! Disentangled preference model.
//!
//! Each user/item carries an invariant and a variant embedding. The invariant
//! preference of a pair is `m = u_inv ⊙ i_inv`, the variant preference is
//! `n = u_var ⊙ i_var ⊙ q_e` for the pair's environment `e`, and both are read
//! out by `phi(x) = logistic(Σ x)`. A linear softmax classifier tries to
//! recover `e` from `m`; the embeddings are trained to fool it.

use rand::seq::SliceRandom;

use crate::data::{Interaction, InteractionTable};
use crate::embedding::{hadamard3_sum, hadamard_sum, Embedding, RowGrads};
use crate::error::{Error, Result};
use crate::rng;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

pub const DEFAULT_INIT_STD: f64 = 0.1;

/// Logistic function kept strictly inside (0, 1): saturated tails map to the
/// nearest representable values instead of exactly 0 or 1.
pub fn sigmoid(x: f64) -> f64 {
    let p = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// `logistic(Σ x)`.
pub fn phi(x: &[f64]) -> f64 {
    sigmoid(x.iter().sum())
}

/// Product fusion of variant and invariant predictions.
pub fn fuse_f(p_var: f64, p_inv: f64) -> f64 {
    p_var * p_inv
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Binary cross entropy with soft targets allowed.
pub fn bce(p: f64, y: f64) -> f64 {
    let p = clamp_prob(p);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// `d bce(p, y) / d p`, zero where the clamp is active.
fn bce_dp(p: f64, y: f64) -> f64 {
    if p <= PROB_EPS || p >= 1.0 - PROB_EPS {
        0.0
    } else {
        (p - y) / (p * (1.0 - p))
    }
}

/// `d bce(logistic(s), y) / d s`, zero where the clamp is active.
pub(crate) fn bce_logit_grad(p: f64, y: f64) -> f64 {
    if p <= PROB_EPS || p >= 1.0 - PROB_EPS {
        0.0
    } else {
        p - y
    }
}

fn softmax(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for z in logits.iter_mut() {
        *z = (*z - max).exp();
        total += *z;
    }
    for z in logits.iter_mut() {
        *z /= total;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherConfig {
    pub dim: usize,
    pub num_envs: usize,
    /// Weight of the adversarial environment term.
    pub alpha: f64,
    /// Weight of the variant reconstruction term.
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs before environment reassignment starts.
    pub warmup_epochs: usize,
    pub l2: f64,
    pub seed: u64,
    /// Blocks the variant loss gradient from reaching invariant embeddings.
    pub detach_inv_in_var: bool,
    pub init_std: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            dim: 40,
            num_envs: 2,
            alpha: 1.9,
            beta: 9.9,
            lr: 0.003,
            epochs: 50,
            batch_size: 256,
            warmup_epochs: 3,
            l2: 0.0,
            seed: 0,
            detach_inv_in_var: false,
            init_std: DEFAULT_INIT_STD,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.dim == 0 {
            return bad("dim must be positive");
        }
        if self.num_envs == 0 {
            return bad("num_envs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("teacher lr must be positive");
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return bad("l2 must be non-negative");
        }
        if !(self.alpha.is_finite() && self.beta.is_finite()) {
            return bad("alpha and beta must be finite");
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return bad("init_std must be non-negative");
        }
        Ok(())
    }

    pub fn objective(&self) -> Objective {
        Objective {
            alpha: self.alpha,
            beta: self.beta,
            detach_inv_in_var: self.detach_inv_in_var,
        }
    }
}

/// Weights of the embedding objective `L_inv − α·L_env + β·L_var`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub alpha: f64,
    pub beta: f64,
    pub detach_inv_in_var: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherModel {
    pub user_inv: Embedding,
    pub item_inv: Embedding,
    pub user_var: Embedding,
    pub item_var: Embedding,
    /// `num_envs × dim`.
    pub env_emb: Embedding,
    /// `dim × num_envs`.
    pub clf_weight: Embedding,
    pub clf_bias: Vec<f64>,
}

impl TeacherModel {
    pub fn zeros(num_users: usize, num_items: usize, num_envs: usize, dim: usize) -> Self {
        Self {
            user_inv: Embedding::zeros(num_users, dim),
            item_inv: Embedding::zeros(num_items, dim),
            user_var: Embedding::zeros(num_users, dim),
            item_var: Embedding::zeros(num_items, dim),
            env_emb: Embedding::zeros(num_envs, dim),
            clf_weight: Embedding::zeros(dim, num_envs),
            clf_bias: vec![0.0; num_envs],
        }
    }

    /// Embeddings ~ Normal(0, std²) drawn from the `(seed, "init")` stream in
    /// the order user_inv, item_inv, user_var, item_var, env_emb; classifier
    /// at zero.
    pub fn init(
        num_users: usize,
        num_items: usize,
        num_envs: usize,
        dim: usize,
        std: f64,
        seed: u64,
    ) -> Self {
        let mut rng = rng::stream(seed, rng::INIT);
        Self {
            user_inv: Embedding::normal(num_users, dim, std, &mut rng),
            item_inv: Embedding::normal(num_items, dim, std, &mut rng),
            user_var: Embedding::normal(num_users, dim, std, &mut rng),
            item_var: Embedding::normal(num_items, dim, std, &mut rng),
            env_emb: Embedding::normal(num_envs, dim, std, &mut rng),
            clf_weight: Embedding::zeros(dim, num_envs),
            clf_bias: vec![0.0; num_envs],
        }
    }

    pub fn num_users(&self) -> usize {
        self.user_inv.rows()
    }

    pub fn num_items(&self) -> usize {
        self.item_inv.rows()
    }

    pub fn num_envs(&self) -> usize {
        self.env_emb.rows()
    }

    pub fn dim(&self) -> usize {
        self.user_inv.dim()
    }

    /// Checks shape agreement between all tables and finiteness.
    pub fn validate(&self) -> Result<()> {
        let (users, items, envs, dim) = (
            self.num_users(),
            self.num_items(),
            self.num_envs(),
            self.dim(),
        );
        let shapes = [
            ("user_inv", &self.user_inv, users, dim),
            ("item_inv", &self.item_inv, items, dim),
            ("user_var", &self.user_var, users, dim),
            ("item_var", &self.item_var, items, dim),
            ("env_emb", &self.env_emb, envs, dim),
            ("clf_weight", &self.clf_weight, dim, envs),
        ];
        for (name, table, rows, cols) in shapes {
            if table.rows() != rows || table.dim() != cols {
                return Err(Error::DimensionMismatch(format!(
                    "{name} is {}x{}, expected {rows}x{cols}",
                    table.rows(),
                    table.dim()
                )));
            }
            if !table.is_finite() {
                return Err(Error::Invalid(format!("{name} has non-finite entries")));
            }
        }
        if self.clf_bias.len() != envs {
            return Err(Error::DimensionMismatch(format!(
                "clf_bias has {} entries, expected {envs}",
                self.clf_bias.len()
            )));
        }
        if dim == 0 || envs == 0 {
            return Err(Error::DimensionMismatch("dim and num_envs must be positive".into()));
        }
        Ok(())
    }

    /// Flat views of every parameter table in a fixed order.
    pub fn parameter_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.user_inv.as_mut_slice(),
            self.item_inv.as_mut_slice(),
            self.user_var.as_mut_slice(),
            self.item_var.as_mut_slice(),
            self.env_emb.as_mut_slice(),
            self.clf_weight.as_mut_slice(),
            &mut self.clf_bias,
        ]
    }

    fn check_pair(&self, u: usize, i: usize) -> Result<()> {
        self.user_inv.checked_row(u, "user")?;
        self.item_inv.checked_row(i, "item")?;
        Ok(())
    }

    fn check_env(&self, e: usize) -> Result<()> {
        self.env_emb.checked_row(e, "env").map(|_| ())
    }

    fn inv_logit(&self, u: usize, i: usize) -> f64 {
        hadamard_sum(self.user_inv.row(u), self.item_inv.row(i))
    }

    fn var_logit(&self, u: usize, i: usize, e: usize) -> f64 {
        hadamard3_sum(self.user_var.row(u), self.item_var.row(i), self.env_emb.row(e))
    }

    /// Softmax over environments of `clf_weightᵀ m + clf_bias`.
    fn env_probs(&self, m: &[f64]) -> Vec<f64> {
        let envs = self.num_envs();
        let mut z = self.clf_bias.clone();
        for (k, mk) in m.iter().enumerate() {
            let w = self.clf_weight.row(k);
            for c in 0..envs {
                z[c] += w[c] * mk;
            }
        }
        softmax(&mut z);
        z
    }

    fn check_batch(&self, batch: &[Interaction]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Empty("batch".into()));
        }
        for x in batch {
            self.check_pair(x.user, x.item)?;
            self.check_env(x.env)?;
        }
        Ok(())
    }
}

/// `phi(u_inv ⊙ i_inv)`.
pub fn invariant_score(model: &TeacherModel, u: usize, i: usize) -> Result<f64> {
    model.check_pair(u, i)?;
    Ok(sigmoid(model.inv_logit(u, i)))
}

/// `phi(u_var ⊙ i_var ⊙ q_e)`.
pub fn variant_score(model: &TeacherModel, u: usize, i: usize, e: usize) -> Result<f64> {
    model.check_pair(u, i)?;
    model.check_env(e)?;
    Ok(sigmoid(model.var_logit(u, i, e)))
}

fn mean_over(batch: &[Interaction], f: impl Fn(&Interaction) -> f64) -> f64 {
    batch.iter().map(f).sum::<f64>() / batch.len() as f64
}

pub fn loss_inv(model: &TeacherModel, batch: &[Interaction]) -> Result<f64> {
    model.check_batch(batch)?;
    Ok(mean_over(batch, |x| {
        bce(sigmoid(model.inv_logit(x.user, x.item)), x.label)
    }))
}

/// Mean cross entropy of the environment classifier. Only the lower clamp
/// applies here since the loss has no `ln(1 − p)` term.
pub fn loss_env(model: &TeacherModel, batch: &[Interaction]) -> Result<f64> {
    model.check_batch(batch)?;
    Ok(mean_over(batch, |x| {
        let probs = model.env_probs(&m_of(model, x));
        -probs[x.env].max(PROB_EPS).ln()
    }))
}

fn m_of(model: &TeacherModel, x: &Interaction) -> Vec<f64> {
    model
        .user_inv
        .row(x.user)
        .iter()
        .zip(model.item_inv.row(x.item))
        .map(|(a, b)| a * b)
        .collect()
}

pub fn loss_var(model: &TeacherModel, batch: &[Interaction]) -> Result<f64> {
    model.check_batch(batch)?;
    Ok(mean_over(batch, |x| record_var_loss(model, x, x.env)))
}

fn record_var_loss(model: &TeacherModel, x: &Interaction, env: usize) -> f64 {
    let p_inv = sigmoid(model.inv_logit(x.user, x.item));
    let p_var = sigmoid(model.var_logit(x.user, x.item, env));
    bce(fuse_f(p_var, p_inv), x.label)
}

/// `L_inv − α·L_env + β·L_var`; may be negative.
pub fn loss_major(model: &TeacherModel, batch: &[Interaction], alpha: f64, beta: f64) -> Result<f64> {
    Ok(loss_inv(model, batch)? - alpha * loss_env(model, batch)? + beta * loss_var(model, batch)?)
}

/// Gradient of a weighted loss with respect to every teacher parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherGrads {
    pub user_inv: RowGrads,
    pub item_inv: RowGrads,
    pub user_var: RowGrads,
    pub item_var: RowGrads,
    pub env_emb: RowGrads,
    /// Dense, same layout as `clf_weight`.
    pub clf_weight: Vec<f64>,
    pub clf_bias: Vec<f64>,
}

impl TeacherGrads {
    fn new(model: &TeacherModel) -> Self {
        let dim = model.dim();
        Self {
            user_inv: RowGrads::new(dim),
            item_inv: RowGrads::new(dim),
            user_var: RowGrads::new(dim),
            item_var: RowGrads::new(dim),
            env_emb: RowGrads::new(dim),
            clf_weight: vec![0.0; dim * model.num_envs()],
            clf_bias: vec![0.0; model.num_envs()],
        }
    }

    /// Dense flattening in the order of [`TeacherModel::parameter_slices_mut`].
    pub fn to_dense(&self, model: &TeacherModel) -> Vec<Vec<f64>> {
        vec![
            self.user_inv.to_dense(model.num_users()),
            self.item_inv.to_dense(model.num_items()),
            self.user_var.to_dense(model.num_users()),
            self.item_var.to_dense(model.num_items()),
            self.env_emb.to_dense(model.num_envs()),
            self.clf_weight.clone(),
            self.clf_bias.clone(),
        ]
    }
}

/// Per-term weights for [`gradients`]; a zero weight skips the term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub inv: f64,
    pub env: f64,
    pub var: f64,
    pub detach_inv_in_var: bool,
}

impl LossWeights {
    pub const INV: Self = Self::only(1.0, 0.0, 0.0);
    pub const ENV: Self = Self::only(0.0, 1.0, 0.0);
    pub const VAR: Self = Self::only(0.0, 0.0, 1.0);

    const fn only(inv: f64, env: f64, var: f64) -> Self {
        Self {
            inv,
            env,
            var,
            detach_inv_in_var: false,
        }
    }

    pub fn major(objective: &Objective) -> Self {
        Self {
            inv: 1.0,
            env: -objective.alpha,
            var: objective.beta,
            detach_inv_in_var: objective.detach_inv_in_var,
        }
    }
}

/// Analytic gradient of `w.inv·L_inv + w.env·L_env + w.var·L_var` on `batch`.
pub fn gradients(model: &TeacherModel, batch: &[Interaction], w: LossWeights) -> Result<TeacherGrads> {
    model.check_batch(batch)?;
    let dim = model.dim();
    let envs = model.num_envs();
    let scale = 1.0 / batch.len() as f64;
    let mut g = TeacherGrads::new(model);
    let mut m = vec![0.0; dim];
    let mut dm = vec![0.0; dim];
    let mut dir = vec![0.0; dim];

    for x in batch {
        let (u, i) = (x.user, x.item);
        let (ui, ii) = (model.user_inv.row(u), model.item_inv.row(i));
        for k in 0..dim {
            m[k] = ui[k] * ii[k];
        }
        dm.iter_mut().for_each(|v| *v = 0.0);
        let p_inv = sigmoid(m.iter().sum());
        let mut ds_inv = 0.0;

        if w.inv != 0.0 {
            ds_inv += w.inv * scale * bce_logit_grad(p_inv, x.label);
        }

        if w.var != 0.0 {
            let (uv, iv, q) = (
                model.user_var.row(u),
                model.item_var.row(i),
                model.env_emb.row(x.env),
            );
            let p_var = sigmoid(hadamard3_sum(uv, iv, q));
            let p = fuse_f(p_var, p_inv);
            let dl_dp = w.var * scale * bce_dp(p, x.label);
            let ds_var = dl_dp * p * (1.0 - p_var);
            if !w.detach_inv_in_var {
                ds_inv += dl_dp * p * (1.0 - p_inv);
            }
            for k in 0..dim {
                dir[k] = iv[k] * q[k];
            }
            g.user_var.add_scaled(u, ds_var, &dir);
            for k in 0..dim {
                dir[k] = uv[k] * q[k];
            }
            g.item_var.add_scaled(i, ds_var, &dir);
            for k in 0..dim {
                dir[k] = uv[k] * iv[k];
            }
            g.env_emb.add_scaled(x.env, ds_var, &dir);
        }

        dm.iter_mut().for_each(|v| *v = ds_inv);

        if w.env != 0.0 {
            let probs = model.env_probs(&m);
            if probs[x.env] > PROB_EPS {
                let mut dz = probs;
                dz[x.env] -= 1.0;
                dz.iter_mut().for_each(|v| *v *= w.env * scale);
                for k in 0..dim {
                    let row = model.clf_weight.row(k);
                    let mut acc = 0.0;
                    for c in 0..envs {
                        g.clf_weight[k * envs + c] += m[k] * dz[c];
                        acc += row[c] * dz[c];
                    }
                    dm[k] += acc;
                }
                for c in 0..envs {
                    g.clf_bias[c] += dz[c];
                }
            }
        }

        if w.inv != 0.0 || w.env != 0.0 || (w.var != 0.0 && !w.detach_inv_in_var) {
            for k in 0..dim {
                dir[k] = dm[k] * ii[k];
            }
            g.user_inv.add_scaled(u, 1.0, &dir);
            for k in 0..dim {
                dir[k] = dm[k] * ui[k];
            }
            g.item_inv.add_scaled(i, 1.0, &dir);
        }
    }
    Ok(g)
}

/// One SGD step of the classifier on `L_env`. Embeddings are untouched.
pub fn classifier_step(model: &mut TeacherModel, batch: &[Interaction], lr: f64) -> Result<()> {
    let g = gradients(model, batch, LossWeights::ENV)?;
    for (w, d) in model.clf_weight.as_mut_slice().iter_mut().zip(&g.clf_weight) {
        *w -= lr * d;
    }
    for (b, d) in model.clf_bias.iter_mut().zip(&g.clf_bias) {
        *b -= lr * d;
    }
    Ok(())
}

/// One SGD step of all embedding tables on `L_major`; the `−α·L_env` term
/// makes the invariant tables ascend the classifier loss. The classifier is
/// untouched. L2 decay applies to the rows touched by the batch.
pub fn embedding_step(
    model: &mut TeacherModel,
    batch: &[Interaction],
    objective: &Objective,
    lr: f64,
    l2: f64,
) -> Result<()> {
    let g = gradients(model, batch, LossWeights::major(objective))?;
    g.user_inv.apply(&mut model.user_inv, lr, l2);
    g.item_inv.apply(&mut model.item_inv, lr, l2);
    g.user_var.apply(&mut model.user_var, lr, l2);
    g.item_var.apply(&mut model.item_var, lr, l2);
    g.env_emb.apply(&mut model.env_emb, lr, l2);
    Ok(())
}

/// Moves every record to the environment with the lowest variant loss,
/// ties toward the lowest index.
pub fn reassign_environments(model: &TeacherModel, table: &InteractionTable) -> Result<InteractionTable> {
    if table.num_users() > model.num_users() || table.num_items() > model.num_items() {
        return Err(Error::DimensionMismatch(format!(
            "table spans {}x{} but teacher covers {}x{}",
            table.num_users(),
            table.num_items(),
            model.num_users(),
            model.num_items()
        )));
    }
    let envs = model.num_envs();
    let labels: Vec<usize> = table
        .iter()
        .map(|x| best_env(model, x, envs))
        .collect();
    table.with_envs(&labels, envs)
}

fn best_env(model: &TeacherModel, x: &Interaction, envs: usize) -> usize {
    let mut best = 0;
    let mut best_loss = f64::INFINITY;
    for e in 0..envs {
        let l = record_var_loss(model, x, e);
        if l < best_loss {
            best = e;
            best_loss = l;
        }
    }
    best
}

/// Sum of per-record variant losses at each record's current environment.
pub fn total_var_loss(model: &TeacherModel, table: &InteractionTable) -> Result<f64> {
    if table.is_empty() {
        return Ok(0.0);
    }
    Ok(loss_var(model, table.interactions())? * table.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss_inv: f64,
    pub loss_env: f64,
    pub loss_var: f64,
    /// Records whose environment changed at the end of this epoch.
    pub moved: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedTeacher {
    pub model: TeacherModel,
    /// Training records carrying their final environment labels.
    pub table: InteractionTable,
    pub history: Vec<EpochStats>,
}

/// Alternating adversarial training.
///
/// Per epoch the records are shuffled; per mini-batch the classifier takes a
/// step on `L_env`, then the embeddings take a step on `L_major`. After each
/// epoch beyond `warmup_epochs`, environments are reassigned.
pub fn train_teacher(cfg: &TeacherConfig, data: &InteractionTable) -> Result<TrainedTeacher> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training table".into()));
    }
    data.check_unit_labels()?;
    if data.num_envs() != cfg.num_envs {
        return Err(Error::InvalidConfig(format!(
            "table has {} environments but teacher expects {}",
            data.num_envs(),
            cfg.num_envs
        )));
    }
    let mut model = TeacherModel::init(
        data.num_users(),
        data.num_items(),
        cfg.num_envs,
        cfg.dim,
        cfg.init_std,
        cfg.seed,
    );
    let objective = cfg.objective();
    let mut table = data.clone();
    let mut order: Vec<usize> = (0..table.len()).collect();
    let mut shuffle = rng::stream(cfg.seed, rng::SHUFFLE);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut batch = Vec::with_capacity(cfg.batch_size);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&k| table.interactions()[k]));
            classifier_step(&mut model, &batch, cfg.lr)?;
            embedding_step(&mut model, &batch, &objective, cfg.lr, cfg.l2)?;
        }
        let mut moved = 0;
        if epoch > cfg.warmup_epochs && cfg.num_envs > 1 {
            let next = reassign_environments(&model, &table)?;
            moved = next
                .iter()
                .zip(table.iter())
                .filter(|(a, b)| a.env != b.env)
                .count();
            table = next;
        }
        let all = table.interactions();
        history.push(EpochStats {
            epoch,
            loss_inv: loss_inv(&model, all)?,
            loss_env: loss_env(&model, all)?,
            loss_var: loss_var(&model, all)?,
            moved,
        });
    }
    Ok(TrainedTeacher {
        model,
        table,
        history,
    })
}
