//! `kd-debias` command line.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{
    apply_assignments, load_checkpoint, save_checkpoint, Checkpoint, EnvAssignment,
};
use crate::config::RunConfig;
use crate::data::{binarize, generate_synthetic, load_indexed, InteractionTable};
use crate::distill::{distill, train_mf_baseline, DistillMode, TeacherFusion};
use crate::error::{Error, Result};
use crate::metrics::{count_parameters, evaluate, stability_report, MetricReport, CSV_HEADER};
use crate::pipeline::{self, write_ratings, MF_RUN_ID};
use crate::teacher::train_teacher;

#[derive(Parser, Debug)]
#[command(
    name = "kd-debias",
    version,
    about = "Debiased recommendation: disentangled teacher, distilled MF student"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a synthetic biased/unbiased pair of logs.
    Synth(RunArgs),
    /// Train the disentangled teacher on a biased log.
    TrainTeacher(RunArgs),
    /// Distill a teacher checkpoint into an MF student.
    Distill(RunArgs),
    /// Train the plain MF baseline on a biased log.
    TrainMf(RunArgs),
    /// Score a checkpoint on a test log.
    Eval(RunArgs),
    /// Repeat the pipeline over consecutive seeds and report mean/std.
    Stability(RunArgs),
    /// Data, teacher, student, MF baseline and evaluation in one run.
    Pipeline(RunArgs),
}

#[derive(Args, Debug, Default)]
struct RunArgs {
    /// key=value file applied before any flag.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Biased interaction log (TSV).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Unbiased interaction log (TSV), split into train/validation/test.
    #[arg(long)]
    unbiased: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Student checkpoint for `eval`.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Teacher checkpoint for `distill` or `eval`.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Test log for `eval`.
    #[arg(long)]
    test: Option<PathBuf>,

    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    envs: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lr_teacher: Option<f64>,
    #[arg(long)]
    lr_distill: Option<f64>,
    /// Teacher epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Student epochs.
    #[arg(long)]
    distill_epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    l2: Option<f64>,
    /// full, no-variant, equal-weight or no-kd.
    #[arg(long)]
    mode: Option<String>,
    /// Cutoff; repeat for several.
    #[arg(long = "k")]
    k: Vec<usize>,
    /// Ratings strictly above this are positive.
    #[arg(long)]
    threshold: Option<f64>,
    /// test (each user's test items) or catalog.
    #[arg(long)]
    candidates: Option<String>,
    #[arg(long)]
    stability_runs: Option<usize>,
    #[arg(long)]
    detach_inv_in_var: bool,

    /// Use the synthetic generator instead of --data/--unbiased.
    #[arg(long)]
    synthetic: bool,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    items: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    bias_strength: Option<f64>,
    #[arg(long)]
    exposure_skew: Option<f64>,
    #[arg(long)]
    label_tilt: Option<f64>,
    #[arg(long)]
    positives_per_user: Option<usize>,
}

impl RunArgs {
    /// Config file (or defaults) with flags applied on top.
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let mut set = |key: &str, value: Option<String>| -> Result<()> {
            match value {
                Some(v) => cfg.set(key, &v),
                None => Ok(()),
            }
        };
        let p = |v: &Option<PathBuf>| v.as_ref().map(|p| p.display().to_string());
        set("data", p(&self.data))?;
        set("unbiased", p(&self.unbiased))?;
        set("out", p(&self.out))?;
        set("seed", text(&self.seed))?;
        set("dim", text(&self.dim))?;
        set("envs", text(&self.envs))?;
        set("alpha", text(&self.alpha))?;
        set("beta", text(&self.beta))?;
        set("gamma", text(&self.gamma))?;
        set("lr_teacher", text(&self.lr_teacher))?;
        set("lr_distill", text(&self.lr_distill))?;
        set("epochs", text(&self.epochs))?;
        set("distill_epochs", text(&self.distill_epochs))?;
        set("batch", text(&self.batch))?;
        set("warmup", text(&self.warmup))?;
        set("l2", text(&self.l2))?;
        set("mode", self.mode.clone())?;
        set("threshold", text(&self.threshold))?;
        set("candidates", self.candidates.clone())?;
        set("stability_runs", text(&self.stability_runs))?;
        set("users", text(&self.users))?;
        set("items", text(&self.items))?;
        set("latent_dim", text(&self.latent_dim))?;
        set("bias_strength", text(&self.bias_strength))?;
        set("exposure_skew", text(&self.exposure_skew))?;
        set("label_tilt", text(&self.label_tilt))?;
        set(
            "positives_per_user",
            text(&self.positives_per_user),
        )?;
        if !self.k.is_empty() {
            let ks: Vec<String> = self.k.iter().map(|k| k.to_string()).collect();
            set("ks", Some(ks.join(",")))?;
        }
        if self.synthetic {
            set("synthetic", Some("true".into()))?;
        }
        if self.detach_inv_in_var {
            set("detach_inv_in_var", Some("true".into()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn text<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(T::to_string)
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig(format!("missing --{flag}")))
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    let out = required(&cfg.out, "out")?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    Ok(out)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Index-space log with ratings binarized at the configured threshold.
fn load_log(
    path: &Path,
    sizes: Option<(usize, usize)>,
    cfg: &RunConfig,
) -> Result<InteractionTable> {
    let table = load_indexed(
        path,
        sizes.map(|s| s.0),
        sizes.map(|s| s.1),
        cfg.envs,
        cfg.seed,
    )?;
    Ok(binarize(&table, cfg.threshold))
}

fn synth(cfg: &RunConfig) -> Result<()> {
    let out = out_dir(cfg)?;
    let (biased, unbiased) = generate_synthetic(&cfg.synthetic_config())?;
    write_ratings(&biased, &out.join("biased.tsv"))?;
    write_ratings(&unbiased, &out.join("unbiased.tsv"))?;
    cfg.save(&out.join("config.txt"))?;
    println!(
        "biased: {} records, positive rate {:.4}",
        biased.len(),
        biased.positive_rate()
    );
    println!(
        "unbiased: {} records, positive rate {:.4}",
        unbiased.len(),
        unbiased.positive_rate()
    );
    Ok(())
}

fn cmd_train_teacher(cfg: &RunConfig) -> Result<()> {
    let data = load_log(required(&cfg.data, "data")?, None, cfg)?;
    let out = out_dir(cfg)?;
    let trained = train_teacher(&cfg.teacher_config(), &data)?;
    if let Some(last) = trained.history.last() {
        println!(
            "epoch {}: loss_inv {:.6} loss_env {:.6} loss_var {:.6}",
            last.epoch, last.loss_inv, last.loss_env, last.loss_var
        );
    }
    println!("parameters={}", count_parameters(&trained.model));
    cfg.save(&out.join("config.txt"))?;
    save_checkpoint(
        &Checkpoint::Teacher {
            assignments: EnvAssignment::from_table(&trained.table),
            model: trained.model,
        },
        &out.join("teacher.ckpt"),
    )
}

fn load_teacher(path: &Path) -> Result<(crate::teacher::TeacherModel, Vec<EnvAssignment>)> {
    match load_checkpoint(path)? {
        Checkpoint::Teacher { model, assignments } => Ok((model, assignments)),
        Checkpoint::Student(_) => Err(Error::Invalid(format!(
            "{}: expected a teacher checkpoint, found a student",
            path.display()
        ))),
    }
}

fn cmd_distill(args: &RunArgs, cfg: &RunConfig) -> Result<()> {
    if cfg.mode == DistillMode::NoKd {
        return Err(Error::InvalidConfig(
            "mode no-kd trains no student; evaluate the teacher with `eval --teacher`".into(),
        ));
    }
    let (teacher, assignments) = load_teacher(required(&args.teacher, "teacher")?)?;
    let sizes = (teacher.num_users(), teacher.num_items());
    let data = load_log(required(&cfg.data, "data")?, Some(sizes), cfg)?;
    let data = if assignments.is_empty() {
        data.with_random_envs(teacher.num_envs(), cfg.seed)?
    } else {
        apply_assignments(&data, &assignments, teacher.num_envs())?
    };
    let out = out_dir(cfg)?;
    let student = distill(&teacher, &data, &cfg.distill_config())?
        .expect("student exists outside no-kd mode");
    println!("parameters={}", count_parameters(&student));
    cfg.save(&out.join("config.txt"))?;
    save_checkpoint(&Checkpoint::Student(student), &out.join("student.ckpt"))
}

fn cmd_train_mf(cfg: &RunConfig) -> Result<()> {
    let data = load_log(required(&cfg.data, "data")?, None, cfg)?;
    let out = out_dir(cfg)?;
    let mf = train_mf_baseline(&data, &cfg.distill_config())?;
    println!("parameters={}", count_parameters(&mf));
    cfg.save(&out.join("config.txt"))?;
    save_checkpoint(&Checkpoint::Student(mf), &out.join("mf.ckpt"))
}

fn print_report(report: &MetricReport) {
    if let Some(n) = report.parameter_count {
        println!("parameters={n}");
    }
    println!("users_evaluated={}", report.users_evaluated);
    print!("{}", report.to_csv());
}

fn cmd_eval(args: &RunArgs, cfg: &RunConfig) -> Result<()> {
    let test_path = required(&args.test, "test")?;
    let mut report = match (&args.model, &args.teacher) {
        (Some(path), None) => {
            let student = match load_checkpoint(path)? {
                Checkpoint::Student(s) => s,
                Checkpoint::Teacher { .. } => {
                    return Err(Error::Invalid(format!(
                        "{}: --model expects a student checkpoint; use --teacher",
                        path.display()
                    )))
                }
            };
            let sizes = (student.num_users(), student.num_items());
            let test = load_log(test_path, Some(sizes), cfg)?;
            let mut r = evaluate(&student, &test, &cfg.ks, cfg.candidates)?;
            r.run_id = "student".into();
            r.parameter_count = Some(count_parameters(&student));
            r
        }
        (None, Some(path)) => {
            let (teacher, _) = load_teacher(path)?;
            let sizes = (teacher.num_users(), teacher.num_items());
            let test = load_log(test_path, Some(sizes), cfg)?;
            let fusion = TeacherFusion {
                teacher: &teacher,
                mode: cfg.mode,
                gamma: cfg.gamma,
            };
            let mut r = evaluate(&fusion, &test, &cfg.ks, cfg.candidates)?;
            r.run_id = format!("teacher-{}", cfg.mode);
            r.parameter_count = Some(count_parameters(&teacher));
            r
        }
        _ => {
            return Err(Error::InvalidConfig(
                "eval needs exactly one of --model or --teacher".into(),
            ))
        }
    };
    report.seed = cfg.seed;
    report.config_fingerprint = Some(cfg.fingerprint());
    print_report(&report);
    if let Some(out) = &cfg.out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        write_file(&out.join("metrics.csv"), &report.to_csv())?;
    }
    Ok(())
}

fn cmd_stability(cfg: &RunConfig) -> Result<()> {
    let k = cfg.ks[0];
    let seeds: Vec<u64> = (0..cfg.stability_runs as u64).map(|s| cfg.seed + s).collect();
    let mut mf_reports = Vec::new();
    let mut kd_reports = Vec::new();
    let kd = stability_report(
        |seed| {
            let mut c = cfg.clone();
            c.seed = seed;
            let outcome = pipeline::run(&c)?;
            mf_reports.push(outcome.mf_report);
            kd_reports.push(outcome.kd_report.clone());
            Ok(outcome.kd_report)
        },
        &seeds,
        k,
    )?;
    let mut mf_iter = mf_reports.iter().cloned();
    let mf = stability_report(|_| Ok(mf_iter.next().unwrap()), &seeds, k)?;
    let summary = format!(
        "{}\n{}\n",
        kd.summary(&pipeline::kd_run_id(cfg.mode)),
        mf.summary(MF_RUN_ID)
    );
    print!("{summary}");
    if let Some(out) = &cfg.out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        cfg.save(&out.join("config.txt"))?;
        let mut csv = String::from(CSV_HEADER);
        csv.push('\n');
        for r in kd_reports.iter().chain(&mf_reports) {
            csv.push_str(r.to_csv().strip_prefix(CSV_HEADER).unwrap().trim_start_matches('\n'));
        }
        write_file(&out.join("stability.csv"), &csv)?;
        write_file(&out.join("stability.txt"), &summary)?;
    }
    Ok(())
}

fn cmd_pipeline(cfg: &RunConfig) -> Result<()> {
    let out = required(&cfg.out, "out")?;
    let outcome = pipeline::run_to_dir(cfg, out)?;
    for r in [&outcome.kd_report, &outcome.mf_report] {
        println!(
            "{}: parameters={} users_evaluated={}",
            r.run_id,
            r.parameter_count.unwrap_or(0),
            r.users_evaluated
        );
    }
    print!("{}", outcome.metrics_csv());
    Ok(())
}

fn dispatch(command: &Command) -> Result<()> {
    let args = match command {
        Command::Synth(a)
        | Command::TrainTeacher(a)
        | Command::Distill(a)
        | Command::TrainMf(a)
        | Command::Eval(a)
        | Command::Stability(a)
        | Command::Pipeline(a) => a,
    };
    let cfg = args.resolve()?;
    match command {
        Command::Synth(_) => synth(&cfg),
        Command::TrainTeacher(_) => cmd_train_teacher(&cfg),
        Command::Distill(_) => cmd_distill(args, &cfg),
        Command::TrainMf(_) => cmd_train_mf(&cfg),
        Command::Eval(_) => cmd_eval(args, &cfg),
        Command::Stability(_) => cmd_stability(&cfg),
        Command::Pipeline(_) => cmd_pipeline(&cfg),
    }
}

/// Runs one command line (including the program name) and returns the
/// process exit code: 0 on success, 1 on a failed run, 2 on a usage error.
pub fn run_command(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
