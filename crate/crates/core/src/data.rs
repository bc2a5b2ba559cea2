//! Interaction logs: loading, binarization, splitting and synthesis.
//!
//! The on-disk format is a headerless UTF-8 TSV with one
//! `user<TAB>item<TAB>rating` record per line. Empty lines and lines starting
//! with `#` are skipped.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    /// Raw rating right after loading, a value in `[0, 1]` once binarized
    /// or replaced by a soft label.
    pub label: f64,
    pub env: usize,
}

/// A biased or unbiased interaction log over fixed user/item/environment
/// index spaces. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionTable {
    interactions: Vec<Interaction>,
    num_users: usize,
    num_items: usize,
    num_envs: usize,
}

impl InteractionTable {
    /// Validates index bounds, finite labels and uniqueness of `(user, item)`.
    pub fn new(
        interactions: Vec<Interaction>,
        num_users: usize,
        num_items: usize,
        num_envs: usize,
    ) -> Result<Self> {
        if num_users == 0 || num_items == 0 || num_envs == 0 {
            return Err(Error::InvalidConfig(format!(
                "table sizes must be positive (users={num_users}, items={num_items}, envs={num_envs})"
            )));
        }
        let mut seen = HashSet::with_capacity(interactions.len());
        for x in &interactions {
            bound("user", x.user, num_users)?;
            bound("item", x.item, num_items)?;
            bound("env", x.env, num_envs)?;
            if !x.label.is_finite() {
                return Err(Error::Invalid(format!(
                    "non-finite label for ({}, {})",
                    x.user, x.item
                )));
            }
            if !seen.insert((x.user, x.item)) {
                return Err(Error::Invalid(format!(
                    "duplicate (user, item) pair ({}, {})",
                    x.user, x.item
                )));
            }
        }
        Ok(Self {
            interactions,
            num_users,
            num_items,
            num_envs,
        })
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Interaction> {
        self.interactions.iter()
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_envs(&self) -> usize {
        self.num_envs
    }

    /// Mean label.
    pub fn positive_rate(&self) -> f64 {
        if self.interactions.is_empty() {
            return 0.0;
        }
        self.interactions.iter().map(|x| x.label).sum::<f64>() / self.interactions.len() as f64
    }

    /// Errors unless every label lies in `[0, 1]`.
    pub fn check_unit_labels(&self) -> Result<()> {
        match self
            .interactions
            .iter()
            .find(|x| !(0.0..=1.0).contains(&x.label))
        {
            Some(x) => Err(Error::Invalid(format!(
                "label {} for ({}, {}) outside [0, 1]; binarize raw ratings first",
                x.label, x.user, x.item
            ))),
            None => Ok(()),
        }
    }

    /// Same records with environment labels replaced, in order.
    pub fn with_envs(&self, envs: &[usize], num_envs: usize) -> Result<Self> {
        if envs.len() != self.interactions.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} environment labels for {} interactions",
                envs.len(),
                self.interactions.len()
            )));
        }
        let interactions = self
            .interactions
            .iter()
            .zip(envs)
            .map(|(x, &env)| Interaction { env, ..*x })
            .collect();
        Self::new(interactions, self.num_users, self.num_items, num_envs)
    }

    /// Fresh uniform environment labels drawn from the `(seed, "env")` stream.
    pub fn with_random_envs(&self, num_envs: usize, seed: u64) -> Result<Self> {
        let envs = random_envs(self.interactions.len(), num_envs, seed);
        self.with_envs(&envs, num_envs)
    }

    /// Same records over enlarged index spaces.
    pub fn with_sizes(&self, num_users: usize, num_items: usize) -> Result<Self> {
        Self::new(
            self.interactions.clone(),
            num_users,
            num_items,
            self.num_envs,
        )
    }

    /// Interactions grouped per user, in table order.
    pub fn by_user(&self) -> HashMap<usize, Vec<Interaction>> {
        let mut out: HashMap<usize, Vec<Interaction>> = HashMap::new();
        for x in &self.interactions {
            out.entry(x.user).or_default().push(*x);
        }
        out
    }

    /// Canonical TSV text; labels are written in shortest round-trip form.
    pub fn to_tsv(&self) -> String {
        let mut out = String::with_capacity(self.interactions.len() * 12);
        for x in &self.interactions {
            writeln!(out, "{}\t{}\t{}", x.user, x.item, x.label).unwrap();
        }
        out
    }
}

fn bound(what: &'static str, index: usize, bound: usize) -> Result<()> {
    if index >= bound {
        Err(Error::IndexOutOfRange { what, index, bound })
    } else {
        Ok(())
    }
}

fn random_envs(n: usize, num_envs: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng::stream(seed, rng::ENV_ASSIGN);
    (0..n).map(|_| rng.random_range(0..num_envs.max(1))).collect()
}

/// One parsed TSV record before reindexing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawRecord {
    pub line: usize,
    pub user: u64,
    pub item: u64,
    pub rating: f64,
}

/// Parses TSV text. Line numbers are 1-based.
pub fn parse_tsv(text: &str) -> Result<Vec<RawRecord>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(
                lineno,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        let user = fields[0]
            .trim()
            .parse::<u64>()
            .map_err(|_| Error::parse(lineno, format!("invalid user id {:?}", fields[0])))?;
        let item = fields[1]
            .trim()
            .parse::<u64>()
            .map_err(|_| Error::parse(lineno, format!("invalid item id {:?}", fields[1])))?;
        let rating = fields[2]
            .trim()
            .parse::<f64>()
            .ok()
            .filter(|r| r.is_finite())
            .ok_or_else(|| Error::parse(lineno, format!("invalid rating {:?}", fields[2])))?;
        out.push(RawRecord {
            line: lineno,
            user,
            item,
            rating,
        });
    }
    Ok(out)
}

fn read_raw(path: &Path) -> Result<Vec<RawRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records = parse_tsv(&text)?;
    if records.is_empty() {
        return Err(Error::Empty(format!("{} has no records", path.display())));
    }
    Ok(records)
}

/// Dense reindexing of raw ids: the k-th smallest raw id becomes index k.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IdIndex {
    users: Vec<u64>,
    items: Vec<u64>,
}

impl IdIndex {
    pub fn from_records<'a>(sets: impl IntoIterator<Item = &'a [RawRecord]>) -> Self {
        let mut users = BTreeSet::new();
        let mut items = BTreeSet::new();
        for set in sets {
            for r in set {
                users.insert(r.user);
                items.insert(r.item);
            }
        }
        Self {
            users: users.into_iter().collect(),
            items: items.into_iter().collect(),
        }
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn user(&self, raw: u64) -> Option<usize> {
        self.users.binary_search(&raw).ok()
    }

    pub fn item(&self, raw: u64) -> Option<usize> {
        self.items.binary_search(&raw).ok()
    }

    /// Raw id of a dense user index.
    pub fn raw_user(&self, index: usize) -> Option<u64> {
        self.users.get(index).copied()
    }

    pub fn raw_item(&self, index: usize) -> Option<u64> {
        self.items.get(index).copied()
    }
}

fn build_table(
    records: &[RawRecord],
    map: impl Fn(&RawRecord) -> Result<(usize, usize)>,
    num_users: usize,
    num_items: usize,
    envs: &[usize],
    num_envs: usize,
) -> Result<InteractionTable> {
    let mut seen = HashMap::with_capacity(records.len());
    let mut interactions = Vec::with_capacity(records.len());
    for (r, &env) in records.iter().zip(envs) {
        let (user, item) = map(r)?;
        if let Some(first) = seen.insert((user, item), r.line) {
            return Err(Error::parse(
                r.line,
                format!(
                    "duplicate (user, item) pair ({}, {}) first seen at line {first}",
                    r.user, r.item
                ),
            ));
        }
        interactions.push(Interaction {
            user,
            item,
            label: r.rating,
            env,
        });
    }
    InteractionTable::new(interactions, num_users, num_items, num_envs)
}

/// Loads a TSV log with contiguous 0-based reindexed ids and uniform random
/// initial environments. Ratings are kept raw.
pub fn load_interactions(path: &Path, num_envs: usize, seed: u64) -> Result<InteractionTable> {
    let (mut tables, _) = load_jointly(&[path], num_envs, seed)?;
    Ok(tables.remove(0))
}

/// Loads several logs into one shared index space (e.g. a biased training
/// log and its unbiased test log). Environments for all tables are drawn in
/// order from a single stream.
pub fn load_jointly(
    paths: &[&Path],
    num_envs: usize,
    seed: u64,
) -> Result<(Vec<InteractionTable>, IdIndex)> {
    if num_envs == 0 {
        return Err(Error::InvalidConfig("num_envs must be positive".into()));
    }
    let raws = paths
        .iter()
        .map(|p| read_raw(p))
        .collect::<Result<Vec<_>>>()?;
    let index = IdIndex::from_records(raws.iter().map(Vec::as_slice));
    let total: usize = raws.iter().map(Vec::len).sum();
    let envs = random_envs(total, num_envs, seed);
    let mut offset = 0;
    let mut tables = Vec::with_capacity(raws.len());
    for raw in &raws {
        let table = build_table(
            raw,
            |r| Ok((index.user(r.user).unwrap(), index.item(r.item).unwrap())),
            index.num_users(),
            index.num_items(),
            &envs[offset..offset + raw.len()],
            num_envs,
        )?;
        offset += raw.len();
        tables.push(table);
    }
    Ok((tables, index))
}

/// Loads a TSV log whose ids are already indices into the given spaces.
/// `None` sizes are taken as `max id + 1`.
pub fn load_indexed(
    path: &Path,
    num_users: Option<usize>,
    num_items: Option<usize>,
    num_envs: usize,
    seed: u64,
) -> Result<InteractionTable> {
    if num_envs == 0 {
        return Err(Error::InvalidConfig("num_envs must be positive".into()));
    }
    let raw = read_raw(path)?;
    let max_user = raw.iter().map(|r| r.user).max().unwrap_or(0) as usize;
    let max_item = raw.iter().map(|r| r.item).max().unwrap_or(0) as usize;
    let num_users = num_users.unwrap_or(max_user + 1);
    let num_items = num_items.unwrap_or(max_item + 1);
    let envs = random_envs(raw.len(), num_envs, seed);
    build_table(
        &raw,
        |r| {
            let (u, i) = (r.user as usize, r.item as usize);
            if u >= num_users {
                return Err(Error::parse(
                    r.line,
                    format!("user {u} outside index space of {num_users}"),
                ));
            }
            if i >= num_items {
                return Err(Error::parse(
                    r.line,
                    format!("item {i} outside index space of {num_items}"),
                ));
            }
            Ok((u, i))
        },
        num_users,
        num_items,
        &envs,
        num_envs,
    )
}

pub fn write_tsv(table: &InteractionTable, path: &Path) -> Result<()> {
    fs::write(path, table.to_tsv()).map_err(|e| Error::io(path, e))
}

/// Default positive threshold on the 1–5 rating scale.
pub const DEFAULT_THRESHOLD: f64 = 3.0;

/// `label = 1` if `rating > threshold` (strictly), else `0`.
pub fn binarize(table: &InteractionTable, threshold: f64) -> InteractionTable {
    let interactions = table
        .interactions
        .iter()
        .map(|x| Interaction {
            label: if x.label > threshold { 1.0 } else { 0.0 },
            ..*x
        })
        .collect();
    InteractionTable {
        interactions,
        ..table.clone()
    }
}

/// Random partition of an unbiased log into train / validation / test parts.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: InteractionTable,
    pub validation: InteractionTable,
    pub test: InteractionTable,
}

/// Partitions by interaction. Part sizes are `round(f · n)` for train and
/// validation; test receives the remainder.
pub fn split_unbiased(
    unbiased: &InteractionTable,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit> {
    let (ft, fv, fs) = fractions;
    if [ft, fv, fs].iter().any(|f| !f.is_finite() || *f < 0.0) {
        return Err(Error::InvalidConfig(format!(
            "split fractions must be non-negative, got {fractions:?}"
        )));
    }
    if ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "split fractions must sum to 1, got {}",
            ft + fv + fs
        )));
    }
    let n = unbiased.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, rng::SPLIT));
    let n_train = ((ft * n as f64).round() as usize).min(n);
    let n_val = ((fv * n as f64).round() as usize).min(n - n_train);
    let part = |idx: &[usize]| {
        let interactions = idx.iter().map(|&k| unbiased.interactions[k]).collect();
        InteractionTable {
            interactions,
            ..unbiased.clone()
        }
    };
    Ok(DatasetSplit {
        train: part(&order[..n_train]),
        validation: part(&order[n_train..n_train + n_val]),
        test: part(&order[n_train + n_val..]),
    })
}

/// Generator for a desk-scale biased/unbiased pair of logs with a known
/// confounding structure.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub latent_dim: usize,
    /// Number of hidden confounding environments, also used as the tables'
    /// environment count.
    pub num_envs: usize,
    /// Strength of the environment-specific item shift.
    pub bias_strength: f64,
    /// Strength of the popularity component.
    pub exposure_skew: f64,
    /// Multiplier on the confounder inside the biased label logit. Exposure
    /// always uses the full confounder.
    pub label_tilt: f64,
    /// Records per user in each generated log.
    pub positives_per_user: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_users: 200,
            num_items: 200,
            latent_dim: 4,
            num_envs: 2,
            bias_strength: 2.0,
            exposure_skew: 1.0,
            label_tilt: 0.25,
            positives_per_user: 50,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_users", self.num_users),
            ("num_items", self.num_items),
            ("latent_dim", self.latent_dim),
            ("num_envs", self.num_envs),
            ("positives_per_user", self.positives_per_user),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        for (name, v) in [
            ("bias_strength", self.bias_strength),
            ("exposure_skew", self.exposure_skew),
            ("label_tilt", self.label_tilt),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 0")));
            }
        }
        if self.positives_per_user > self.num_items {
            return Err(Error::InvalidConfig(format!(
                "positives_per_user ({}) exceeds num_items ({})",
                self.positives_per_user, self.num_items
            )));
        }
        Ok(())
    }
}

/// Ground truth behind a synthetic draw.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub user_latent: Vec<Vec<f64>>,
    pub item_latent: Vec<Vec<f64>>,
    pub popularity: Vec<f64>,
    /// `shift[z][i]`: item shift in hidden environment `z`.
    pub shift: Vec<Vec<f64>>,
}

impl SyntheticWorld {
    fn draw(cfg: &SyntheticConfig, rng: &mut rng::StreamRng) -> Self {
        // entries ~ N(0, s²) with d·s⁴ = 4, so relevance logits have std ≈ 2
        let s = (2.0_f64).sqrt() / (cfg.latent_dim as f64).powf(0.25);
        let latent = Normal::new(0.0, s).unwrap();
        let unit = Normal::new(0.0, 1.0).unwrap();
        let mut table = |rows: usize, cols: usize, d: &Normal<f64>| -> Vec<Vec<f64>> {
            (0..rows)
                .map(|_| (0..cols).map(|_| d.sample(rng)).collect())
                .collect()
        };
        let user_latent = table(cfg.num_users, cfg.latent_dim, &latent);
        let item_latent = table(cfg.num_items, cfg.latent_dim, &latent);
        let popularity = table(1, cfg.num_items, &unit).remove(0);
        let shift = table(cfg.num_envs, cfg.num_items, &unit);
        Self {
            user_latent,
            item_latent,
            popularity,
            shift,
        }
    }

    pub fn relevance_logit(&self, user: usize, item: usize) -> f64 {
        crate::embedding::hadamard_sum(&self.user_latent[user], &self.item_latent[item])
    }

    pub fn confounder(&self, cfg: &SyntheticConfig, item: usize, env: usize) -> f64 {
        cfg.exposure_skew * self.popularity[item] + cfg.bias_strength * self.shift[env][item]
    }
}

fn logistic(x: f64) -> f64 {
    crate::teacher::sigmoid(x)
}

/// Draws a biased log and an unbiased log from one ground truth.
///
/// Relevance is `logistic(u · i)`. In the biased log each record first draws
/// a hidden environment `z`, then an unseen item with probability
/// proportional to `exp(c)` where
/// `c = exposure_skew · popularity[i] + bias_strength · shift[z][i]`, and a
/// label from `logistic(u · i + label_tilt · c)`. The unbiased log draws items uniformly
/// and labels from pure relevance. Observed environment labels are uniform
/// random; the hidden `z` is not recorded.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<(InteractionTable, InteractionTable)> {
    let (biased, unbiased, _) = generate_synthetic_with_world(cfg)?;
    Ok((biased, unbiased))
}

pub fn generate_synthetic_with_world(
    cfg: &SyntheticConfig,
) -> Result<(InteractionTable, InteractionTable, SyntheticWorld)> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, rng::SYNTH);
    let world = SyntheticWorld::draw(cfg, &mut rng);

    let confounders: Vec<Vec<f64>> = (0..cfg.num_envs)
        .map(|z| {
            (0..cfg.num_items)
                .map(|i| world.confounder(cfg, i, z))
                .collect()
        })
        .collect();
    let exposure: Vec<Vec<f64>> = confounders
        .iter()
        .map(|c| c.iter().map(|v| v.exp()).collect())
        .collect();

    let mut biased = Vec::with_capacity(cfg.num_users * cfg.positives_per_user);
    let mut unbiased = Vec::with_capacity(cfg.num_users * cfg.positives_per_user);
    let mut taken = vec![false; cfg.num_items];
    let mut all_items: Vec<usize> = (0..cfg.num_items).collect();
    for user in 0..cfg.num_users {
        taken.iter_mut().for_each(|t| *t = false);
        for _ in 0..cfg.positives_per_user {
            let z = rng.random_range(0..cfg.num_envs);
            let weights = &exposure[z];
            let total: f64 = (0..cfg.num_items)
                .filter(|&i| !taken[i])
                .map(|i| weights[i])
                .sum();
            let mut target = rng.random::<f64>() * total;
            let mut item = None;
            for i in (0..cfg.num_items).filter(|&i| !taken[i]) {
                item = Some(i);
                target -= weights[i];
                if target <= 0.0 {
                    break;
                }
            }
            let item = item.expect("positives_per_user <= num_items");
            taken[item] = true;
            let p = logistic(world.relevance_logit(user, item) + cfg.label_tilt * confounders[z][item]);
            let label = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
            biased.push(Interaction {
                user,
                item,
                label,
                env: 0,
            });
        }

        let (chosen, _) = all_items.partial_shuffle(&mut rng, cfg.positives_per_user);
        let mut chosen = chosen.to_vec();
        chosen.sort_unstable();
        for item in chosen {
            let p = logistic(world.relevance_logit(user, item));
            let label = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
            unbiased.push(Interaction {
                user,
                item,
                label,
                env: 0,
            });
        }
    }

    let mut env_rng = rng::stream(cfg.seed, rng::ENV_ASSIGN);
    for x in biased.iter_mut().chain(unbiased.iter_mut()) {
        x.env = env_rng.random_range(0..cfg.num_envs);
    }
    let biased = InteractionTable::new(biased, cfg.num_users, cfg.num_items, cfg.num_envs)?;
    let unbiased = InteractionTable::new(unbiased, cfg.num_users, cfg.num_items, cfg.num_envs)?;
    Ok((biased, unbiased, world))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn loads_and_reindexes() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.tsv", "0\t0\t5\n0\t1\t1");
        let t = load_interactions(&p, 2, 1).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.num_users(), 1);
        assert_eq!(t.num_items(), 2);
        assert_eq!(t.interactions()[0].label, 5.0);
        assert_eq!(t.interactions()[1].label, 1.0);

        let p = write(&dir, "b.tsv", "# comment\n\n17\t40\t2\n3\t40\t4\n");
        let t = load_interactions(&p, 1, 1).unwrap();
        assert_eq!((t.num_users(), t.num_items()), (2, 1));
        assert_eq!(t.interactions()[0].user, 1);
        assert_eq!(t.interactions()[1].user, 0);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.tsv", "a\t0\t5\n");
        match load_interactions(&p, 2, 1) {
            Err(Error::Parse { line: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let p = write(&dir, "b.tsv", "0\t0\t5\n0\t1\n");
        assert!(matches!(
            load_interactions(&p, 2, 1),
            Err(Error::Parse { line: 2, .. })
        ));
        let p = write(&dir, "c.tsv", "0\t0\t5\n0\t0\t4\n");
        assert!(matches!(
            load_interactions(&p, 2, 1),
            Err(Error::Parse { line: 2, .. })
        ));
        let p = write(&dir, "d.tsv", "0\t0\tx\n");
        assert!(matches!(
            load_interactions(&p, 2, 1),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn empty_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.tsv", "\n# nothing\n");
        assert!(matches!(load_interactions(&p, 2, 1), Err(Error::Empty(_))));
        let missing = dir.path().join("missing.tsv");
        assert!(matches!(
            load_interactions(&missing, 2, 1),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn env_assignment_is_seeded() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.tsv", "0\t0\t5\n1\t1\t1\n2\t2\t3\n");
        let a = load_interactions(&p, 4, 9).unwrap();
        let b = load_interactions(&p, 4, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|x| x.env < 4));
    }

    #[test]
    fn joint_loading_shares_the_index() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(&dir, "a.tsv", "10\t5\t5\n20\t6\t1\n");
        let b = write(&dir, "b.tsv", "20\t7\t4\n");
        let (tables, index) = load_jointly(&[&a, &b], 2, 3).unwrap();
        assert_eq!(index.num_users(), 2);
        assert_eq!(index.num_items(), 3);
        assert_eq!(tables[1].interactions()[0].user, 1);
        assert_eq!(tables[1].interactions()[0].item, 2);
        assert_eq!(tables[0].num_items(), 3);
        assert_eq!(index.raw_item(2), Some(7));
    }

    #[test]
    fn indexed_loading_checks_bounds() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.tsv", "0\t4\t1\n");
        let t = load_indexed(&p, None, None, 1, 0).unwrap();
        assert_eq!((t.num_users(), t.num_items()), (1, 5));
        let t = load_indexed(&p, Some(3), Some(10), 1, 0).unwrap();
        assert_eq!((t.num_users(), t.num_items()), (3, 10));
        assert!(matches!(
            load_indexed(&p, Some(3), Some(4), 1, 0),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn binarize_is_strict() {
        let t = InteractionTable::new(
            vec![
                Interaction { user: 0, item: 0, label: 5.0, env: 0 },
                Interaction { user: 0, item: 1, label: 3.0, env: 1 },
                Interaction { user: 0, item: 2, label: 1.0, env: 0 },
                Interaction { user: 0, item: 3, label: 4.0, env: 0 },
            ],
            1,
            4,
            2,
        )
        .unwrap();
        let b = binarize(&t, DEFAULT_THRESHOLD);
        let labels: Vec<f64> = b.iter().map(|x| x.label).collect();
        assert_eq!(labels, vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(b.interactions()[1].env, 1);
        assert_eq!(binarize(&b, 0.5), b);
    }

    #[test]
    fn table_rejects_bad_records() {
        let x = Interaction { user: 0, item: 0, label: 1.0, env: 0 };
        assert!(InteractionTable::new(vec![x, x], 1, 1, 1).is_err());
        assert!(InteractionTable::new(vec![Interaction { user: 1, ..x }], 1, 1, 1).is_err());
        assert!(InteractionTable::new(vec![Interaction { env: 2, ..x }], 1, 1, 2).is_err());
        let raw = InteractionTable::new(vec![Interaction { label: 4.0, ..x }], 1, 1, 1).unwrap();
        assert!(raw.check_unit_labels().is_err());
    }

    fn hundred() -> InteractionTable {
        let interactions = (0..100)
            .map(|k| Interaction {
                user: k / 10,
                item: k % 10,
                label: (k % 3 == 0) as u8 as f64,
                env: 0,
            })
            .collect();
        InteractionTable::new(interactions, 10, 10, 1).unwrap()
    }

    #[test]
    fn split_sizes_follow_fractions() {
        let t = hundred();
        let s = split_unbiased(&t, (0.05, 0.05, 0.90), 3).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (5, 5, 90));
        let s = split_unbiased(&t, (0.0, 0.0, 1.0), 3).unwrap();
        assert_eq!(s.test.len(), 100);
        assert_eq!(
            split_unbiased(&t, (0.05, 0.05, 0.90), 3).unwrap(),
            split_unbiased(&t, (0.05, 0.05, 0.90), 3).unwrap()
        );
        assert!(split_unbiased(&t, (-0.1, 0.1, 1.0), 3).is_err());
        assert!(split_unbiased(&t, (0.5, 0.5, 0.5), 3).is_err());
    }

    #[test]
    fn synthetic_is_deterministic() {
        let cfg = SyntheticConfig {
            num_users: 30,
            num_items: 40,
            positives_per_user: 40,
            seed: 5,
            ..Default::default()
        };
        let (a1, b1) = generate_synthetic(&cfg).unwrap();
        let (a2, b2) = generate_synthetic(&cfg).unwrap();
        assert_eq!(a1.to_tsv(), a2.to_tsv());
        assert_eq!(b1.to_tsv(), b2.to_tsv());
        assert_eq!(a1, a2);
        assert_eq!(a1.len(), 30 * 40);
        assert_eq!(b1.len(), 30 * 40);
    }

    #[test]
    fn synthetic_config_validation() {
        let bad = SyntheticConfig {
            positives_per_user: 0,
            ..Default::default()
        };
        assert!(generate_synthetic(&bad).is_err());
        let bad = SyntheticConfig {
            bias_strength: -1.0,
            ..Default::default()
        };
        assert!(generate_synthetic(&bad).is_err());
        let bad = SyntheticConfig {
            positives_per_user: 300,
            ..Default::default()
        };
        assert!(generate_synthetic(&bad).is_err());
    }
}
