//! End-to-end runs shared by the CLI and the acceptance suite.

use std::fs;
use std::path::Path;

use crate::checkpoint::{save_checkpoint, Checkpoint, EnvAssignment};
use crate::config::RunConfig;
use crate::data::{
    binarize, generate_synthetic, load_jointly, split_unbiased, DatasetSplit, Interaction,
    InteractionTable,
};
use crate::distill::{distill, train_mf_baseline, DistillMode, StudentModel, TeacherFusion};
use crate::error::{Error, Result};
use crate::metrics::{count_parameters, evaluate, MetricReport, CSV_HEADER};
use crate::teacher::{train_teacher, TrainedTeacher};

/// Rating written for positive labels; negatives are written as 1. Both sit
/// on either side of the default threshold.
pub const POSITIVE_RATING: f64 = 5.0;
pub const NEGATIVE_RATING: f64 = 1.0;

/// Binary labels mapped back onto the rating scale for writing.
pub fn as_ratings(table: &InteractionTable) -> Result<InteractionTable> {
    let rows = table
        .iter()
        .map(|x| Interaction {
            label: if x.label > 0.5 { POSITIVE_RATING } else { NEGATIVE_RATING },
            ..*x
        })
        .collect();
    InteractionTable::new(rows, table.num_users(), table.num_items(), table.num_envs())
}

pub fn write_ratings(table: &InteractionTable, path: &Path) -> Result<()> {
    crate::data::write_tsv(&as_ratings(table)?, path)
}

#[derive(Clone, Debug)]
pub struct RunData {
    /// Biased training log with binary labels.
    pub biased: InteractionTable,
    pub split: DatasetSplit,
}

/// Synthesizes or loads the biased log and splits the unbiased one.
pub fn prepare_data(cfg: &RunConfig) -> Result<RunData> {
    let (biased, unbiased) = if cfg.synthetic {
        generate_synthetic(&cfg.synthetic_config())?
    } else {
        let data = cfg
            .data
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("need --data or --synthetic".into()))?;
        let unbiased = cfg.unbiased.as_deref().ok_or_else(|| {
            Error::InvalidConfig("need --unbiased to evaluate a loaded log".into())
        })?;
        let (tables, _) = load_jointly(&[data, unbiased], cfg.envs, cfg.seed)?;
        (
            binarize(&tables[0], cfg.threshold),
            binarize(&tables[1], cfg.threshold),
        )
    };
    let split = split_unbiased(&unbiased, cfg.split, cfg.seed)?;
    Ok(RunData { biased, split })
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub teacher: TrainedTeacher,
    /// `None` in `no-kd` mode, where the teacher's fusion is evaluated.
    pub student: Option<StudentModel>,
    pub mf: StudentModel,
    pub kd_report: MetricReport,
    pub mf_report: MetricReport,
}

impl RunOutcome {
    pub fn metrics_csv(&self) -> String {
        let mut out = self.kd_report.to_csv();
        out.push_str(
            self.mf_report
                .to_csv()
                .strip_prefix(CSV_HEADER)
                .unwrap()
                .trim_start_matches('\n'),
        );
        out
    }
}

pub fn kd_run_id(mode: DistillMode) -> String {
    format!("kd-debias-{mode}")
}

pub const MF_RUN_ID: &str = "mf";

/// Teacher, student and MF baseline on prepared data, evaluated on the
/// unbiased test part. No files are touched.
pub fn run_on(cfg: &RunConfig, data: &RunData) -> Result<RunOutcome> {
    cfg.validate()?;
    let teacher = train_teacher(&cfg.teacher_config(), &data.biased)?;
    let dcfg = cfg.distill_config();
    let student = distill(&teacher.model, &teacher.table, &dcfg)?;
    let mf = train_mf_baseline(&data.biased, &dcfg)?;

    let test = &data.split.test;
    let fingerprint = cfg.fingerprint();
    let mut kd_report = match &student {
        Some(s) => {
            let mut r = evaluate(s, test, &cfg.ks, cfg.candidates)?;
            r.parameter_count = Some(count_parameters(s));
            r
        }
        None => {
            let fusion = TeacherFusion {
                teacher: &teacher.model,
                mode: cfg.mode,
                gamma: cfg.gamma,
            };
            let mut r = evaluate(&fusion, test, &cfg.ks, cfg.candidates)?;
            r.parameter_count = Some(count_parameters(&teacher.model));
            r
        }
    };
    kd_report.run_id = kd_run_id(cfg.mode);
    kd_report.seed = cfg.seed;
    kd_report.config_fingerprint = Some(fingerprint.clone());

    let mut mf_report = evaluate(&mf, test, &cfg.ks, cfg.candidates)?;
    mf_report.run_id = MF_RUN_ID.into();
    mf_report.seed = cfg.seed;
    mf_report.parameter_count = Some(count_parameters(&mf));
    mf_report.config_fingerprint = Some(fingerprint);

    Ok(RunOutcome {
        teacher,
        student,
        mf,
        kd_report,
        mf_report,
    })
}

pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    run_on(cfg, &prepare_data(cfg)?)
}

/// [`run`], then writes the resolved config, data parts, checkpoints and
/// `metrics.csv` into `out`.
pub fn run_to_dir(cfg: &RunConfig, out: &Path) -> Result<RunOutcome> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    cfg.save(&out.join("config.txt"))?;
    let data = prepare_data(cfg)?;
    write_ratings(&data.biased, &out.join("biased.tsv"))?;
    write_ratings(&data.split.train, &out.join("unbiased_train.tsv"))?;
    write_ratings(&data.split.validation, &out.join("unbiased_validation.tsv"))?;
    write_ratings(&data.split.test, &out.join("unbiased_test.tsv"))?;

    let outcome = run_on(cfg, &data)?;
    save_checkpoint(
        &Checkpoint::Teacher {
            model: outcome.teacher.model.clone(),
            assignments: EnvAssignment::from_table(&outcome.teacher.table),
        },
        &out.join("teacher.ckpt"),
    )?;
    if let Some(s) = &outcome.student {
        save_checkpoint(&Checkpoint::Student(s.clone()), &out.join("student.ckpt"))?;
    }
    save_checkpoint(&Checkpoint::Student(outcome.mf.clone()), &out.join("mf.ckpt"))?;
    let metrics = out.join("metrics.csv");
    fs::write(&metrics, outcome.metrics_csv()).map_err(|e| Error::io(&metrics, e))?;
    Ok(outcome)
}
