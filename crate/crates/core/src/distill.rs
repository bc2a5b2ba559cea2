//! Distance-aware fusion of teacher predictions and distillation into a
//! matrix-factorization student.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::data::{Interaction, InteractionTable};
use crate::embedding::{hadamard_sum, Embedding, RowGrads};
use crate::error::{Error, Result};
use crate::rng;
use crate::teacher::{
    bce, bce_logit_grad, invariant_score, sigmoid, variant_score, TeacherModel, DEFAULT_INIT_STD,
};

/// One user table and one item table; score is `logistic(s_u · t_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentModel {
    pub user_emb: Embedding,
    pub item_emb: Embedding,
}

impl StudentModel {
    pub fn zeros(num_users: usize, num_items: usize, dim: usize) -> Self {
        Self {
            user_emb: Embedding::zeros(num_users, dim),
            item_emb: Embedding::zeros(num_items, dim),
        }
    }

    /// Same stream and draw order as the teacher's invariant tables.
    pub fn init(num_users: usize, num_items: usize, dim: usize, std: f64, seed: u64) -> Self {
        let mut rng = rng::stream(seed, rng::INIT);
        Self {
            user_emb: Embedding::normal(num_users, dim, std, &mut rng),
            item_emb: Embedding::normal(num_items, dim, std, &mut rng),
        }
    }

    pub fn num_users(&self) -> usize {
        self.user_emb.rows()
    }

    pub fn num_items(&self) -> usize {
        self.item_emb.rows()
    }

    pub fn dim(&self) -> usize {
        self.user_emb.dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.user_emb.dim() != self.item_emb.dim() || self.dim() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "user_emb dim {} vs item_emb dim {}",
                self.user_emb.dim(),
                self.item_emb.dim()
            )));
        }
        if !(self.user_emb.is_finite() && self.item_emb.is_finite()) {
            return Err(Error::Invalid("student has non-finite entries".into()));
        }
        Ok(())
    }

    pub fn parameter_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.user_emb.as_mut_slice(), self.item_emb.as_mut_slice()]
    }

    fn logit(&self, u: usize, i: usize) -> f64 {
        hadamard_sum(self.user_emb.row(u), self.item_emb.row(i))
    }

    fn check_batch(&self, batch: &[Interaction]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Empty("batch".into()));
        }
        for x in batch {
            self.user_emb.checked_row(x.user, "user")?;
            self.item_emb.checked_row(x.item, "item")?;
        }
        Ok(())
    }
}

pub fn student_score(student: &StudentModel, u: usize, i: usize) -> Result<f64> {
    student.user_emb.checked_row(u, "user")?;
    student.item_emb.checked_row(i, "item")?;
    Ok(sigmoid(student.logit(u, i)))
}

/// Fused teacher prediction and its components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftLabel {
    pub y_star: f64,
    pub p_inv: f64,
    pub p_var: f64,
    pub distance: f64,
    pub w_inv: f64,
    pub w_var: f64,
}

impl SoftLabel {
    fn weighted(p_inv: f64, p_var: f64, w_inv: f64) -> Self {
        let w_var = 1.0 - w_inv;
        Self {
            y_star: w_inv * p_inv + w_var * p_var,
            p_inv,
            p_var,
            distance: (p_inv - p_var).abs(),
            w_inv,
            w_var,
        }
    }
}

/// `d = |p_inv − p_var|`, `w_inv = (1 − d)^γ`, `w_var = 1 − w_inv`,
/// `y* = w_inv·p_inv + w_var·p_var`. Larger disagreement shifts weight to
/// the variant prediction.
pub fn soft_label(p_inv: f64, p_var: f64, gamma: f64) -> SoftLabel {
    let d = (p_inv - p_var).abs();
    SoftLabel::weighted(p_inv, p_var, (1.0 - d).powf(gamma))
}

/// How the teacher's two predictions become the student's target.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum DistillMode {
    /// Distance-aware fusion.
    #[default]
    Full,
    /// Invariant prediction only.
    NoVariant,
    /// Fixed `w_inv = 0.5`.
    EqualWeight,
    /// No student; the teacher's fusion is evaluated directly.
    NoKd,
}

impl DistillMode {
    pub const ALL: [DistillMode; 4] = [
        DistillMode::Full,
        DistillMode::NoVariant,
        DistillMode::EqualWeight,
        DistillMode::NoKd,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            DistillMode::Full => "full",
            DistillMode::NoVariant => "no-variant",
            DistillMode::EqualWeight => "equal-weight",
            DistillMode::NoKd => "no-kd",
        }
    }

    /// Fusion rule for one pair of predictions.
    pub fn fuse(&self, p_inv: f64, p_var: f64, gamma: f64) -> SoftLabel {
        match self {
            DistillMode::Full | DistillMode::NoKd => soft_label(p_inv, p_var, gamma),
            DistillMode::NoVariant => SoftLabel::weighted(p_inv, p_var, 1.0),
            DistillMode::EqualWeight => SoftLabel::weighted(p_inv, p_var, 0.5),
        }
    }
}

impl fmt::Display for DistillMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DistillMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DistillMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                let accepted: Vec<_> = DistillMode::ALL.iter().map(|m| m.as_str()).collect();
                Error::InvalidConfig(format!(
                    "unknown distill mode {s:?}; expected one of {}",
                    accepted.join(", ")
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftLabelEntry {
    pub user: usize,
    pub item: usize,
    pub env: usize,
    pub label: SoftLabel,
}

/// One fused target per training interaction, aligned with the source table
/// and addressable by `(user, item)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabelSet {
    entries: Vec<SoftLabelEntry>,
    index: HashMap<(usize, usize), usize>,
}

impl SoftLabelSet {
    pub fn entries(&self) -> &[SoftLabelEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, user: usize, item: usize) -> Option<&SoftLabelEntry> {
        self.index.get(&(user, item)).map(|&k| &self.entries[k])
    }

    /// The source table with each label replaced by `y*`.
    pub fn targets(&self, source: &InteractionTable) -> Result<InteractionTable> {
        let interactions = source
            .iter()
            .map(|x| {
                self.get(x.user, x.item)
                    .map(|e| Interaction {
                        label: e.label.y_star,
                        ..*x
                    })
                    .ok_or_else(|| misaligned(x))
            })
            .collect::<Result<Vec<_>>>()?;
        InteractionTable::new(
            interactions,
            source.num_users(),
            source.num_items(),
            source.num_envs(),
        )
    }
}

fn misaligned(x: &Interaction) -> Error {
    Error::Invalid(format!(
        "no soft label for interaction ({}, {})",
        x.user, x.item
    ))
}

fn check_compatible(teacher: &TeacherModel, data: &InteractionTable) -> Result<()> {
    if data.num_users() > teacher.num_users()
        || data.num_items() > teacher.num_items()
        || data.num_envs() > teacher.num_envs()
    {
        return Err(Error::DimensionMismatch(format!(
            "data spans {} users, {} items, {} envs; teacher covers {}, {}, {}",
            data.num_users(),
            data.num_items(),
            data.num_envs(),
            teacher.num_users(),
            teacher.num_items(),
            teacher.num_envs()
        )));
    }
    Ok(())
}

/// Distance-aware soft labels from a frozen teacher, using each record's
/// environment label for the variant prediction.
pub fn build_soft_labels(
    teacher: &TeacherModel,
    data: &InteractionTable,
    gamma: f64,
) -> Result<SoftLabelSet> {
    build_soft_labels_with(teacher, data, DistillMode::Full, gamma)
}

pub fn build_soft_labels_with(
    teacher: &TeacherModel,
    data: &InteractionTable,
    mode: DistillMode,
    gamma: f64,
) -> Result<SoftLabelSet> {
    check_compatible(teacher, data)?;
    let mut entries = Vec::with_capacity(data.len());
    let mut index = HashMap::with_capacity(data.len());
    for (k, x) in data.iter().enumerate() {
        let p_inv = invariant_score(teacher, x.user, x.item)?;
        let p_var = variant_score(teacher, x.user, x.item, x.env)?;
        entries.push(SoftLabelEntry {
            user: x.user,
            item: x.item,
            env: x.env,
            label: mode.fuse(p_inv, p_var, gamma),
        });
        index.insert((x.user, x.item), k);
    }
    Ok(SoftLabelSet { entries, index })
}

/// Mean BCE of the student against the soft labels of the batch's pairs.
pub fn kd_loss(student: &StudentModel, batch: &[Interaction], labels: &SoftLabelSet) -> Result<f64> {
    let aligned = align(batch, labels)?;
    student_loss(student, &aligned)
}

/// Analytic gradient of [`kd_loss`] as `(user_emb, item_emb)`.
pub fn kd_gradients(
    student: &StudentModel,
    batch: &[Interaction],
    labels: &SoftLabelSet,
) -> Result<(RowGrads, RowGrads)> {
    let aligned = align(batch, labels)?;
    student_gradients(student, &aligned)
}

fn align(batch: &[Interaction], labels: &SoftLabelSet) -> Result<Vec<Interaction>> {
    batch
        .iter()
        .map(|x| {
            labels
                .get(x.user, x.item)
                .map(|e| Interaction {
                    label: e.label.y_star,
                    ..*x
                })
                .ok_or_else(|| misaligned(x))
        })
        .collect()
}

/// Mean BCE of the student against each record's own label.
pub fn student_loss(student: &StudentModel, batch: &[Interaction]) -> Result<f64> {
    student.check_batch(batch)?;
    let total: f64 = batch
        .iter()
        .map(|x| bce(sigmoid(student.logit(x.user, x.item)), x.label))
        .sum();
    Ok(total / batch.len() as f64)
}

pub fn student_gradients(
    student: &StudentModel,
    batch: &[Interaction],
) -> Result<(RowGrads, RowGrads)> {
    student.check_batch(batch)?;
    let dim = student.dim();
    let scale = 1.0 / batch.len() as f64;
    let mut gu = RowGrads::new(dim);
    let mut gi = RowGrads::new(dim);
    let mut dir = vec![0.0; dim];
    for x in batch {
        let (s, t) = (student.user_emb.row(x.user), student.item_emb.row(x.item));
        let ds = scale * bce_logit_grad(sigmoid(hadamard_sum(s, t)), x.label);
        for k in 0..dim {
            dir[k] = ds * t[k];
        }
        gu.add_scaled(x.user, 1.0, &dir);
        for k in 0..dim {
            dir[k] = ds * s[k];
        }
        gi.add_scaled(x.item, 1.0, &dir);
    }
    Ok((gu, gi))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub gamma: f64,
    pub lr: f64,
    pub dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2: f64,
    pub seed: u64,
    pub mode: DistillMode,
    pub init_std: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            gamma: 0.17,
            lr: 0.005,
            dim: 40,
            epochs: 50,
            batch_size: 256,
            l2: 0.0,
            seed: 0,
            mode: DistillMode::Full,
            init_std: DEFAULT_INIT_STD,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return bad("gamma must be non-negative");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("distill lr must be positive");
        }
        if self.dim == 0 || self.batch_size == 0 {
            return bad("dim and batch_size must be positive");
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return bad("l2 must be non-negative");
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return bad("init_std must be non-negative");
        }
        Ok(())
    }
}

/// Mini-batch SGD of a fresh student on each record's label.
fn fit_student(targets: &InteractionTable, cfg: &DistillConfig) -> Result<StudentModel> {
    cfg.validate()?;
    if targets.is_empty() {
        return Err(Error::Empty("training table".into()));
    }
    targets.check_unit_labels()?;
    let mut student = StudentModel::init(
        targets.num_users(),
        targets.num_items(),
        cfg.dim,
        cfg.init_std,
        cfg.seed,
    );
    let mut order: Vec<usize> = (0..targets.len()).collect();
    let mut shuffle = rng::stream(cfg.seed, rng::SHUFFLE);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&k| targets.interactions()[k]));
            let (gu, gi) = student_gradients(&student, &batch)?;
            gu.apply(&mut student.user_emb, cfg.lr, cfg.l2);
            gi.apply(&mut student.item_emb, cfg.lr, cfg.l2);
        }
    }
    Ok(student)
}

/// Distills the frozen teacher into a student. `data` must carry the
/// teacher's final environment labels. Returns `None` in `no-kd` mode.
pub fn distill(
    teacher: &TeacherModel,
    data: &InteractionTable,
    cfg: &DistillConfig,
) -> Result<Option<StudentModel>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training table".into()));
    }
    if cfg.mode == DistillMode::NoKd {
        return Ok(None);
    }
    let labels = build_soft_labels_with(teacher, data, cfg.mode, cfg.gamma)?;
    let targets = labels
        .targets(data)?
        .with_sizes(teacher.num_users(), teacher.num_items())?;
    fit_student(&targets, cfg).map(Some)
}

/// Plain MF trained on the observed labels with the student's trainer.
pub fn train_mf_baseline(data: &InteractionTable, cfg: &DistillConfig) -> Result<StudentModel> {
    fit_student(data, cfg)
}

/// The teacher's own fused prediction, usable as a scorer for pairs without
/// an assigned environment: the variant prediction is averaged over all
/// environments.
#[derive(Clone, Copy, Debug)]
pub struct TeacherFusion<'a> {
    pub teacher: &'a TeacherModel,
    pub mode: DistillMode,
    pub gamma: f64,
}

impl TeacherFusion<'_> {
    pub fn predict(&self, u: usize, i: usize) -> Result<SoftLabel> {
        let p_inv = invariant_score(self.teacher, u, i)?;
        let envs = self.teacher.num_envs();
        let mut p_var = 0.0;
        for e in 0..envs {
            p_var += variant_score(self.teacher, u, i, e)?;
        }
        p_var /= envs as f64;
        Ok(self.mode.fuse(p_inv, p_var, self.gamma))
    }
}
