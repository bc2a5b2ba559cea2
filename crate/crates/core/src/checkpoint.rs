//! Text checkpoints.
//!
//! ```text
//! KD-DEBIAS-CKPT 1
//! kind=teacher
//! num_users=2
//! num_items=3
//! dim=4
//! num_envs=2
//! assignments=5
//!
//! [user_inv]
//! <one row per user: dim space-separated floats>
//! ...
//! ```
//!
//! Teacher sections, in order: `user_inv`, `item_inv`, `user_var`,
//! `item_var`, `env_emb`, `clf_weight` (dim rows of num_envs), `clf_bias`
//! (one row) and optionally `assignments` (`user item env` per training
//! record). Student sections: `user_emb`, `item_emb`. Floats are written with
//! 17 significant digits, which round-trips every `f64` exactly.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::{Interaction, InteractionTable};
use crate::distill::StudentModel;
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::teacher::TeacherModel;

pub const MAGIC: &str = "KD-DEBIAS-CKPT 1";
pub const KINDS: [&str; 2] = ["teacher", "student"];

/// Final environment of one training record.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EnvAssignment {
    pub user: usize,
    pub item: usize,
    pub env: usize,
}

impl EnvAssignment {
    pub fn from_table(table: &InteractionTable) -> Vec<Self> {
        table
            .iter()
            .map(|x| Self {
                user: x.user,
                item: x.item,
                env: x.env,
            })
            .collect()
    }
}

/// Copies environment labels onto `table` by `(user, item)`.
pub fn apply_assignments(
    table: &InteractionTable,
    assignments: &[EnvAssignment],
    num_envs: usize,
) -> Result<InteractionTable> {
    let lookup: HashMap<(usize, usize), usize> = assignments
        .iter()
        .map(|a| ((a.user, a.item), a.env))
        .collect();
    let envs = table
        .iter()
        .map(|x| {
            lookup.get(&(x.user, x.item)).copied().ok_or_else(|| {
                Error::Invalid(format!(
                    "no environment assignment for ({}, {})",
                    x.user, x.item
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    table.with_envs(&envs, num_envs)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Checkpoint {
    Teacher {
        model: TeacherModel,
        assignments: Vec<EnvAssignment>,
    },
    Student(StudentModel),
}

impl Checkpoint {
    pub fn kind(&self) -> &'static str {
        match self {
            Checkpoint::Teacher { .. } => "teacher",
            Checkpoint::Student(_) => "student",
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{MAGIC}").unwrap();
        writeln!(out, "kind={}", self.kind()).unwrap();
        match self {
            Checkpoint::Teacher { model, assignments } => {
                writeln!(out, "num_users={}", model.num_users()).unwrap();
                writeln!(out, "num_items={}", model.num_items()).unwrap();
                writeln!(out, "dim={}", model.dim()).unwrap();
                writeln!(out, "num_envs={}", model.num_envs()).unwrap();
                writeln!(out, "assignments={}", assignments.len()).unwrap();
                out.push('\n');
                write_table(&mut out, "user_inv", &model.user_inv);
                write_table(&mut out, "item_inv", &model.item_inv);
                write_table(&mut out, "user_var", &model.user_var);
                write_table(&mut out, "item_var", &model.item_var);
                write_table(&mut out, "env_emb", &model.env_emb);
                write_table(&mut out, "clf_weight", &model.clf_weight);
                out.push_str("[clf_bias]\n");
                write_row(&mut out, &model.clf_bias);
                if !assignments.is_empty() {
                    out.push_str("[assignments]\n");
                    for a in assignments {
                        writeln!(out, "{} {} {}", a.user, a.item, a.env).unwrap();
                    }
                }
            }
            Checkpoint::Student(model) => {
                writeln!(out, "num_users={}", model.num_users()).unwrap();
                writeln!(out, "num_items={}", model.num_items()).unwrap();
                writeln!(out, "dim={}", model.dim()).unwrap();
                out.push('\n');
                write_table(&mut out, "user_emb", &model.user_emb);
                write_table(&mut out, "item_emb", &model.item_emb);
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Reader::new(text).read()
    }
}

fn write_table(out: &mut String, name: &str, table: &Embedding) {
    writeln!(out, "[{name}]").unwrap();
    for r in 0..table.rows() {
        write_row(out, table.row(r));
    }
}

fn write_row(out: &mut String, row: &[f64]) {
    for (k, v) in row.iter().enumerate() {
        if k > 0 {
            out.push(' ');
        }
        write!(out, "{v:.16e}").unwrap();
    }
    out.push('\n');
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, checkpoint.to_text()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_text(&text)
}

fn ckpt_err(line: usize, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        line,
        message: message.into(),
    }
}

struct Reader<'a> {
    lines: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    last_line: usize,
}

impl<'a> Reader<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            lines: text.lines().enumerate().peekable(),
            last_line: 0,
        }
    }

    /// Next line with its 1-based number.
    fn next(&mut self) -> Option<(usize, &'a str)> {
        let (idx, line) = self.lines.next()?;
        self.last_line = idx + 1;
        Some((idx + 1, line.strip_suffix('\r').unwrap_or(line)))
    }

    fn expect_line(&mut self, what: &str) -> Result<(usize, &'a str)> {
        self.next().ok_or_else(|| {
            ckpt_err(
                self.last_line + 1,
                format!("unexpected end of file, expected {what}"),
            )
        })
    }

    fn read(mut self) -> Result<Checkpoint> {
        let (n, first) = self.expect_line("magic line")?;
        if first.trim() != MAGIC {
            return Err(ckpt_err(n, format!("bad magic line {first:?}, expected {MAGIC:?}")));
        }
        let header = self.header()?;
        let kind = header.get("kind").ok_or_else(|| ckpt_err(2, "missing kind"))?;
        match kind.1.as_str() {
            "teacher" => self.teacher(&header),
            "student" => self.student(&header),
            other => Err(ckpt_err(
                kind.0,
                format!(
                    "unknown kind {other:?}; accepted kinds: {}",
                    KINDS.join(", ")
                ),
            )),
        }
    }

    fn header(&mut self) -> Result<HashMap<String, (usize, String)>> {
        let mut out = HashMap::new();
        loop {
            let (n, line) = self.expect_line("header or blank line")?;
            if line.trim().is_empty() {
                return Ok(out);
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ckpt_err(n, format!("expected key=value, got {line:?}")))?;
            out.insert(k.trim().to_string(), (n, v.trim().to_string()));
        }
    }

    fn size(header: &HashMap<String, (usize, String)>, key: &str) -> Result<usize> {
        let (n, v) = header
            .get(key)
            .ok_or_else(|| ckpt_err(2, format!("missing header {key}")))?;
        v.parse::<usize>()
            .map_err(|_| ckpt_err(*n, format!("{key} must be a non-negative integer, got {v:?}")))
    }

    fn section_start(&mut self, name: &str) -> Result<()> {
        let (n, line) = self.expect_line(&format!("section [{name}]"))?;
        if line.trim() != format!("[{name}]") {
            return Err(ckpt_err(n, format!("expected section [{name}], got {line:?}")));
        }
        Ok(())
    }

    fn floats(&mut self, section: &str, cols: usize) -> Result<Vec<f64>> {
        let (n, line) = self.expect_line(&format!("a row of [{section}]"))?;
        if line.starts_with('[') {
            return Err(ckpt_err(
                n,
                format!("section [{section}] ended early; dimension mismatch"),
            ));
        }
        let row = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| ckpt_err(n, format!("non-numeric token {tok:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if row.len() != cols {
            return Err(ckpt_err(
                n,
                format!(
                    "dimension mismatch in [{section}]: {} values, expected {cols}",
                    row.len()
                ),
            ));
        }
        Ok(row)
    }

    fn table(&mut self, name: &str, rows: usize, cols: usize) -> Result<Embedding> {
        self.section_start(name)?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            data.extend(self.floats(name, cols)?);
        }
        Embedding::from_vec(rows, cols, data)
    }

    fn finish(&mut self) -> Result<()> {
        while let Some((n, line)) = self.next() {
            if !line.trim().is_empty() {
                return Err(ckpt_err(
                    n,
                    format!("unexpected content {line:?}; dimension mismatch"),
                ));
            }
        }
        Ok(())
    }

    fn teacher(&mut self, header: &HashMap<String, (usize, String)>) -> Result<Checkpoint> {
        let users = Self::size(header, "num_users")?;
        let items = Self::size(header, "num_items")?;
        let dim = Self::size(header, "dim")?;
        let envs = Self::size(header, "num_envs")?;
        let count = match header.get("assignments") {
            Some(_) => Self::size(header, "assignments")?,
            None => 0,
        };
        let model = TeacherModel {
            user_inv: self.table("user_inv", users, dim)?,
            item_inv: self.table("item_inv", items, dim)?,
            user_var: self.table("user_var", users, dim)?,
            item_var: self.table("item_var", items, dim)?,
            env_emb: self.table("env_emb", envs, dim)?,
            clf_weight: self.table("clf_weight", dim, envs)?,
            clf_bias: {
                self.section_start("clf_bias")?;
                self.floats("clf_bias", envs)?
            },
        };
        model
            .validate()
            .map_err(|e| ckpt_err(self.last_line, e.to_string()))?;
        let mut assignments = Vec::with_capacity(count);
        if count > 0 {
            self.section_start("assignments")?;
            for _ in 0..count {
                let (n, line) = self.expect_line("a row of [assignments]")?;
                let parts = line
                    .split_whitespace()
                    .map(|t| {
                        t.parse::<usize>()
                            .map_err(|_| ckpt_err(n, format!("non-numeric token {t:?}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let [user, item, env] = parts[..] else {
                    return Err(ckpt_err(n, "assignment rows hold `user item env`"));
                };
                if user >= users || item >= items || env >= envs {
                    return Err(ckpt_err(n, "assignment index out of range"));
                }
                assignments.push(EnvAssignment { user, item, env });
            }
        }
        self.finish()?;
        Ok(Checkpoint::Teacher { model, assignments })
    }

    fn student(&mut self, header: &HashMap<String, (usize, String)>) -> Result<Checkpoint> {
        let users = Self::size(header, "num_users")?;
        let items = Self::size(header, "num_items")?;
        let dim = Self::size(header, "dim")?;
        let model = StudentModel {
            user_emb: self.table("user_emb", users, dim)?,
            item_emb: self.table("item_emb", items, dim)?,
        };
        model
            .validate()
            .map_err(|e| ckpt_err(self.last_line, e.to_string()))?;
        self.finish()?;
        Ok(Checkpoint::Student(model))
    }
}

/// Training records with their interaction data, for callers that need an
/// [`InteractionTable`] from assignments alone (labels set to zero).
pub fn assignments_table(
    assignments: &[EnvAssignment],
    num_users: usize,
    num_items: usize,
    num_envs: usize,
) -> Result<InteractionTable> {
    let interactions = assignments
        .iter()
        .map(|a| Interaction {
            user: a.user,
            item: a.item,
            label: 0.0,
            env: a.env,
        })
        .collect();
    InteractionTable::new(interactions, num_users, num_items, num_envs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn teacher() -> TeacherModel {
        let mut t = TeacherModel::init(3, 4, 2, 5, 0.7, 11);
        let mut r = rng::stream(3, "test");
        t.clf_weight = Embedding::normal(5, 2, 1.3, &mut r);
        t.clf_bias = vec![0.25, -1.0 / 3.0];
        t
    }

    #[test]
    fn teacher_round_trip_is_exact() {
        let ckpt = Checkpoint::Teacher {
            model: teacher(),
            assignments: vec![
                EnvAssignment { user: 0, item: 3, env: 1 },
                EnvAssignment { user: 2, item: 0, env: 0 },
            ],
        };
        let text = ckpt.to_text();
        assert_eq!(Checkpoint::from_text(&text).unwrap(), ckpt);
        assert_eq!(ckpt.to_text(), text);
    }

    #[test]
    fn student_round_trip_is_exact() {
        let s = StudentModel::init(4, 2, 3, 0.1, 5);
        let ckpt = Checkpoint::Student(s);
        assert_eq!(Checkpoint::from_text(&ckpt.to_text()).unwrap(), ckpt);
    }

    fn line_of(err: Error) -> usize {
        match err {
            Error::Checkpoint { line, .. } => line,
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn structural_errors() {
        let text = Checkpoint::Student(StudentModel::init(2, 2, 2, 0.1, 1)).to_text();

        let bad_magic = text.replacen(MAGIC, "KD-DEBIAS-CKPT 2", 1);
        assert_eq!(line_of(Checkpoint::from_text(&bad_magic).unwrap_err()), 1);

        let unknown = text.replacen("kind=student", "kind=oracle", 1);
        let err = Checkpoint::from_text(&unknown).unwrap_err().to_string();
        assert!(err.contains("teacher") && err.contains("student"), "{err}");

        let mismatched = text.replacen("dim=2", "dim=3", 1);
        assert!(Checkpoint::from_text(&mismatched).is_err());

        let more_users = text.replacen("num_users=2", "num_users=3", 1);
        assert!(Checkpoint::from_text(&more_users).is_err());

        let lines: Vec<&str> = text.lines().collect();
        let truncated = lines[..lines.len() - 1].join("\n");
        assert!(Checkpoint::from_text(&truncated).is_err());

        let mut tokens = lines.clone();
        tokens[6] = "1.0 abc";
        let err = Checkpoint::from_text(&tokens.join("\n")).unwrap_err();
        assert_eq!(line_of(err), 7);
    }

    #[test]
    fn assignments_apply_by_pair() {
        let table = InteractionTable::new(
            vec![
                Interaction { user: 0, item: 1, label: 1.0, env: 0 },
                Interaction { user: 1, item: 0, label: 0.0, env: 0 },
            ],
            2,
            2,
            2,
        )
        .unwrap();
        let a = [
            EnvAssignment { user: 1, item: 0, env: 1 },
            EnvAssignment { user: 0, item: 1, env: 0 },
        ];
        let t = apply_assignments(&table, &a, 2).unwrap();
        assert_eq!(t.interactions()[1].env, 1);
        assert!(apply_assignments(&table, &a[..1], 2).is_err());
    }
}
