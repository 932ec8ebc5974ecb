use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use prerank::checkpoint::{load_teacher, load_two_tower, save_teacher, save_two_tower};
use prerank::experiments::{
    emit_report, evaluate_scorer, run_ablation, run_variant, train_baseline_on, Combination, CombinedScorer, Dataset, ExperimentConfig,
    RunRecord, TeacherHandle, TeacherScorer, TwoTowerScorer, Variant, SUITES,
};
use prerank::metrics::{LoggingPolicyScorer, PoolScorer, RandomScorer};
use prerank::samples::write_samples;
use prerank::teacher::LearnedTeacher;
use prerank::two_tower::PrerankParams;
use prerank::{Error, Result};

const MODEL_CKPT: &str = "model.ckpt";
const TEACHER_CKPT: &str = "teacher.ckpt";

#[derive(Parser)]
#[command(name = "prerank", version, about = "Entire-space pre-ranking laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Paths {
    /// TOML experiment config.
    config: PathBuf,
    /// Output directory (created if missing).
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the catalog and cascade logs.
    Simulate(Paths),
    /// Build query-level training samples.
    BuildSamples(Paths),
    /// Train the two-tower model and report its metrics.
    Train(Paths),
    /// Train the learned ranking teacher.
    TrainTeacher(Paths),
    /// Train separate pointwise CTR / CVR (/ ER) models.
    TrainBaseline(Paths),
    /// Evaluate saved checkpoints and reference policies.
    Evaluate(Paths),
    /// ASPH curves of the teacher and the student.
    Curve(Paths),
    /// Run an ablation suite over several seeds.
    Ablate(Paths),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    let (paths, f): (Paths, fn(&ExperimentConfig, &Path) -> Result<()>) = match command {
        Command::Simulate(p) => (p, simulate),
        Command::BuildSamples(p) => (p, build_samples),
        Command::Train(p) => (p, train),
        Command::TrainTeacher(p) => (p, train_teacher),
        Command::TrainBaseline(p) => (p, train_baseline),
        Command::Evaluate(p) => (p, evaluate),
        Command::Curve(p) => (p, curve),
        Command::Ablate(p) => (p, ablate),
    };
    let cfg = ExperimentConfig::load(&paths.config)?;
    fs::create_dir_all(&paths.out)?;
    f(&cfg, &paths.out)
}

fn record(name: &str, cfg: &ExperimentConfig, reports: Vec<prerank::metrics::MetricReport>, started: Instant) -> RunRecord {
    RunRecord {
        name: name.into(),
        seed: cfg.seed,
        config_digest: cfg.digest(),
        loss_history: Vec::new(),
        reports: reports.into_iter().map(|r| prerank::metrics::MetricReport { model: name.into(), ..r }).collect(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    }
}

fn simulate(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let ds = Dataset::generate(cfg)?;
    ds.write(out)?;
    let exposures: usize = ds.logs.iter().map(|l| l.exposures.len()).sum();
    let outside: usize = ds.logs.iter().map(|l| l.other_scenario_purchases.len()).sum();
    println!(
        "requests {} (train {}), exposures {exposures}, outside purchases {outside}, attached {}",
        ds.logs.len(),
        ds.n_train,
        ds.attachments.purchases.len()
    );
    Ok(())
}

fn build_samples(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let ds = Dataset::load_or_generate(cfg, out)?;
    let teacher = ds.teacher(cfg)?;
    let (samples, stats) = ds.samples(cfg, &teacher)?;
    let mut w = BufWriter::new(fs::File::create(out.join("samples.jsonl"))?);
    write_samples(&samples, &mut w)?;
    w.flush()?;
    fs::write(out.join("sample_stats.json"), serde_json::to_string_pretty(&stats)?)?;
    println!("samples {} from {} requests", stats.emitted, stats.requests);
    Ok(())
}

fn train_student(cfg: &ExperimentConfig, ds: &Dataset, teacher: &TeacherHandle) -> Result<(PrerankParams, RunRecord)> {
    let (samples, _) = ds.samples(cfg, teacher)?;
    let variant = Variant { combination: Combination::OneModel, ..Variant::from_config("model", cfg) };
    let (rec, params) = run_variant(cfg, ds, &samples, &variant)?;
    let params = params.ok_or_else(|| Error::Contract("one-model run returned no parameters".into()))?;
    Ok((params, rec))
}

fn train(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let ds = Dataset::load_or_generate(cfg, out)?;
    let teacher = ds.teacher(cfg)?;
    let (params, rec) = train_student(cfg, &ds, &teacher)?;
    fs::write(out.join(MODEL_CKPT), save_two_tower(&params)?)?;
    emit_report(out, &[rec.clone()], &[])?;
    println!("asph@{} {:.4}  pauc@10 {:.4}", cfg.k_eval(), metric(&rec, "asph", cfg.k_eval()), metric(&rec, "pauc", 10));
    Ok(())
}

fn metric(rec: &RunRecord, name: &str, k: usize) -> f64 {
    rec.metric(name, k).unwrap_or(f64::NAN)
}

fn train_teacher(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let ds = Dataset::load_or_generate(cfg, out)?;
    let started = Instant::now();
    let training = ds.train_teacher(cfg)?;
    fs::write(out.join(TEACHER_CKPT), save_teacher(&training.teacher.params)?)?;
    fs::write(out.join("calibration.json"), serde_json::to_string_pretty(&training.calibration)?)?;
    let scorer = TeacherScorer { teacher: &training.teacher, catalog: &ds.catalog, name: "teacher".into() };
    let mut rec = record("teacher", cfg, evaluate_scorer(&ds, cfg, &scorer)?, started);
    rec.loss_history = training.loss_history;
    emit_report(out, &[rec], &[])?;
    println!(
        "mean pCTR {:.4} vs observed {:.4}",
        training.calibration.mean_ctr_predicted, training.calibration.mean_ctr_observed
    );
    Ok(())
}

fn train_baseline(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let ds = Dataset::load_or_generate(cfg, out)?;
    let started = Instant::now();
    let (samples, _) = ds.samples(cfg, &TeacherHandle::None)?;
    let strategy = match cfg.combination {
        Combination::OneModel => Combination::CtrXCvr,
        s => s,
    };
    let models = train_baseline_on(cfg, &ds, &samples, strategy == Combination::CtrXCvrXEr)?;
    fs::write(out.join("baseline_ctr.ckpt"), save_two_tower(&models.ctr)?)?;
    fs::write(out.join("baseline_cvr.ckpt"), save_two_tower(&models.cvr)?)?;
    if let Some(er) = &models.er {
        fs::write(out.join("baseline_er.ckpt"), save_two_tower(er)?)?;
    }
    let scorer = CombinedScorer::new(strategy, &models, &ds.features)?;
    let name = scorer.name();
    let mut rec = record(&name, cfg, evaluate_scorer(&ds, cfg, &scorer)?, started);
    rec.loss_history = models.loss_histories.values().flatten().copied().collect();
    emit_report(out, &[rec.clone()], &[])?;
    println!("{name}: asph@{} {:.4}  pauc@10 {:.4}", cfg.k_eval(), metric(&rec, "asph", cfg.k_eval()), metric(&rec, "pauc", 10));
    Ok(())
}

fn load_student(out: &Path, ds: &Dataset) -> Result<Option<PrerankParams>> {
    let path = out.join(MODEL_CKPT);
    if !path.exists() {
        return Ok(None);
    }
    let params = load_two_tower(&fs::read_to_string(path)?)?;
    if params.vocab != ds.features.vocab {
        return Err(Error::Checkpoint("model vocabulary does not match the catalog".into()));
    }
    Ok(Some(params))
}

fn load_learned_teacher(out: &Path, ds: &Dataset) -> Result<Option<LearnedTeacher>> {
    let path = out.join(TEACHER_CKPT);
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(LearnedTeacher::new(load_teacher(&fs::read_to_string(path)?)?, &ds.catalog)?))
}

fn evaluate(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let ds = Dataset::load_or_generate(cfg, out)?;
    let student = load_student(out, &ds)?;
    let teacher = load_learned_teacher(out, &ds)?;
    if student.is_none() && teacher.is_none() {
        return Err(Error::config(format!("no {MODEL_CKPT} or {TEACHER_CKPT} in {}", out.display())));
    }
    let mut records = Vec::new();
    let mut push = |name: &str, scorer: &dyn PoolScorer| -> Result<()> {
        let started = Instant::now();
        records.push(record(name, cfg, evaluate_scorer(&ds, cfg, scorer)?, started));
        Ok(())
    };
    if let Some(p) = &student {
        push("model", &TwoTowerScorer::new("model", p, &ds.features)?)?;
    }
    if let Some(t) = &teacher {
        push("teacher", &TeacherScorer { teacher: t, catalog: &ds.catalog, name: "teacher".into() })?;
    }
    push("logging_policy", &LoggingPolicyScorer::new(ds.eval_logs()))?;
    push("random", &RandomScorer { seed: cfg.seed })?;
    emit_report(out, &records, &[])?;
    for r in &records {
        println!("{:>16}: asph@{} {:.4}  pauc@10 {:.4}", r.name, cfg.k_eval(), metric(r, "asph", cfg.k_eval()), metric(r, "pauc", 10));
    }
    Ok(())
}

fn curve(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let ds = Dataset::load_or_generate(cfg, out)?;
    let teacher = match load_learned_teacher(out, &ds)? {
        Some(t) => t,
        None => {
            let t = ds.train_teacher(cfg)?.teacher;
            fs::write(out.join(TEACHER_CKPT), save_teacher(&t.params)?)?;
            t
        }
    };
    let student = match load_student(out, &ds)? {
        Some(p) => p,
        None => {
            let handle = TeacherHandle::Learned(Box::new(teacher.clone()));
            let (p, _) = train_student(cfg, &ds, &handle)?;
            fs::write(out.join(MODEL_CKPT), save_two_tower(&p)?)?;
            p
        }
    };
    let started = Instant::now();
    let t_rec = record("teacher", cfg, evaluate_scorer(&ds, cfg, &TeacherScorer { teacher: &teacher, catalog: &ds.catalog, name: "teacher".into() })?, started);
    let started = Instant::now();
    let s_rec = record("model", cfg, evaluate_scorer(&ds, cfg, &TwoTowerScorer::new("model", &student, &ds.features)?)?, started);
    emit_report(out, &[t_rec.clone(), s_rec.clone()], &[])?;
    println!("{:>6} {:>8} {:>8}", "k", "teacher", "model");
    let (t, s) = (&t_rec.reports[0], &s_rec.reports[0]);
    for (i, k) in t.k_grid.iter().enumerate() {
        println!("{k:>6} {:>8.4} {:>8.4}", t.values[i], s.values[i]);
    }
    Ok(())
}

fn ablate(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let suites: Vec<&str> = match &cfg.ablation.suite {
        Some(s) => vec![s.as_str()],
        None => SUITES.to_vec(),
    };
    let mut tables = Vec::new();
    let mut records = Vec::new();
    for suite in suites {
        let (table, recs) = run_ablation(suite, cfg)?;
        for row in &table.rows {
            println!(
                "{suite:>12} {:>16}: asph@{} {:.4}  pauc@10 {:.4}  sign {}/{} (p={:.3})",
                row.variant, table.k_eval, row.mean_asph, row.mean_pauc, row.asph_sign.wins, row.asph_sign.losses, row.asph_sign.p_value
            );
        }
        tables.push(table);
        records.extend(recs);
    }
    emit_report(out, &records, &tables)?;
    Ok(())
}
