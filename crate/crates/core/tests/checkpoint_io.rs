mod common;

use common::{random_table, random_teacher};
use kd_debias::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, EnvAssignment, KINDS};
use kd_debias::distill::StudentModel;
use kd_debias::Error;

fn teacher_ckpt() -> Checkpoint {
    let table = random_table(4, 9, 11, 3, 40, false);
    Checkpoint::Teacher {
        model: random_teacher(4, 9, 11, 3, 6),
        assignments: EnvAssignment::from_table(&table),
    }
}

fn student_ckpt() -> Checkpoint {
    Checkpoint::Student(StudentModel::init(9, 11, 5, 0.9, 4))
}

fn line_of(err: &Error) -> usize {
    match err {
        Error::Checkpoint { line, .. } => *line,
        other => panic!("expected a checkpoint error, got {other}"),
    }
}

#[test]
fn round_trips_are_exact_and_stable() {
    let dir = tempfile::tempdir().unwrap();
    for ckpt in [teacher_ckpt(), student_ckpt()] {
        let a = dir.path().join(format!("{}-a.ckpt", ckpt.kind()));
        let b = dir.path().join(format!("{}-b.ckpt", ckpt.kind()));
        save_checkpoint(&ckpt, &a).unwrap();
        let back = load_checkpoint(&a).unwrap();
        assert_eq!(back, ckpt);
        save_checkpoint(&back, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
}

#[test]
fn mismatched_dimensions_are_rejected() {
    let text = student_ckpt().to_text().replacen("dim=5", "dim=4", 1);
    let err = Checkpoint::from_text(&text).unwrap_err();
    assert!(line_of(&err) > 0);

    let text = teacher_ckpt().to_text().replacen("num_items=11", "num_items=12", 1);
    assert!(Checkpoint::from_text(&text).is_err());
}

#[test]
fn truncated_file_is_rejected() {
    for ckpt in [teacher_ckpt(), student_ckpt()] {
        let text = ckpt.to_text();
        let lines: Vec<&str> = text.lines().collect();
        for keep in [1, 3, lines.len() / 2, lines.len() - 1] {
            let cut = lines[..keep].join("\n");
            assert!(Checkpoint::from_text(&cut).is_err(), "{} kept {keep}", ckpt.kind());
        }
    }
}

#[test]
fn unknown_kind_lists_the_accepted_tags() {
    let text = student_ckpt().to_text().replacen("kind=student", "kind=ensemble", 1);
    let err = Checkpoint::from_text(&text).unwrap_err();
    assert_eq!(line_of(&err), 2);
    let msg = err.to_string();
    for k in KINDS {
        assert!(msg.contains(k), "{msg}");
    }
}

#[test]
fn non_numeric_token_names_its_line() {
    let text = student_ckpt().to_text();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let target = lines.iter().position(|l| l == "[item_emb]").unwrap() + 2;
    lines[target] = lines[target].replacen(' ', " oops ", 1);
    let err = Checkpoint::from_text(&lines.join("\n")).unwrap_err();
    assert_eq!(line_of(&err), target + 1);

    let text = text.replacen("[user_emb]\n", "[user_emb]\nNaN ", 1);
    assert!(Checkpoint::from_text(&text).is_err());
}
