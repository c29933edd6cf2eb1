use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ocai_core::backbone::Backbone;
use ocai_core::domain::{read_cohort, validate_visit, write_cohort, VisitRecord};
use ocai_core::engine::{read_institutions, read_traces, write_institutions, write_traces, InstitutionProfile, Models};
use ocai_core::harness::{evaluate, tables};
use ocai_core::openmax::OpenMaxCalibration;
use ocai_core::pipeline::{self, PipelineConfig};
use ocai_core::recommender::Recommender;
use ocai_core::strategy::{read_examination, write_examination};

const BACKBONE_FILE: &str = "backbone.bin";
const OPENMAX_FILE: &str = "openmax.json";
const EXAMINATION_FILE: &str = "examination.jsonl";
const RECOMMENDER_FILE: &str = "recommender.bin";

#[derive(Parser)]
#[command(name = "ocai", version, about = "Open-set dynamic diagnosis: data generation, training, diagnosis and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run seed; every stage seed is derived from it.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Pipeline configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort, its subject-level split and institution profiles.
    GenCohort {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the backbone classifier.
    TrainMcml {
        #[command(flatten)]
        common: Common,
        /// Cohort directory (train.jsonl, val.jsonl) or a single training file.
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        model_dir: PathBuf,
    },
    /// Calibrate the open-set layer on the trained backbone.
    FitOpenmax {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        model_dir: PathBuf,
    },
    /// Build the examination dataset of (observation, action, reward) records.
    GenRewards {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        model_dir: PathBuf,
        /// Defaults to examination.jsonl in the model directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the examination recommender.
    TrainDmarl {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        model_dir: PathBuf,
    },
    /// Run the diagnosis loop over a cohort and write one trace per visit.
    Diagnose {
        #[command(flatten)]
        common: Common,
        /// Cohort directory (uses test.jsonl) or a cohort file.
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        institutions: PathBuf,
        #[arg(long)]
        model_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Request every exam at the first step instead of following the recommender.
        #[arg(long)]
        all_exams: bool,
    },
    /// Metrics with bootstrap intervals for a trace file.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exam usage, strategy and institution tables.
    Census {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        institutions: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Input that fails validation; reported with exit code 2.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn is_validation_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<Invalid>().is_some()
            || matches!(
                c.downcast_ref::<ocai_core::Error>(),
                Some(
                    ocai_core::Error::InvalidSpec(_)
                        | ocai_core::Error::WidthMismatch { .. }
                        | ocai_core::Error::DimensionMismatch { .. }
                        | ocai_core::Error::MissingBase
                        | ocai_core::Error::Json(_)
                        | ocai_core::Error::Toml(_)
                )
            )
    })
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let base = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            PipelineConfig::from_toml_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => PipelineConfig::default(),
    };
    Ok(base.seeded(common.seed))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Writes a report to stdout; a closed pipe is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn read_visits(path: &Path) -> Result<Vec<VisitRecord>> {
    let visits = read_cohort(open(path)?).with_context(|| format!("reading cohort {}", path.display()))?;
    let width = pipeline::feature_width(&visits).ok();
    for v in &visits {
        let problems = validate_visit(v, width.unwrap_or(0));
        if let Some(p) = problems.first() {
            return Err(Invalid(format!("{}: visit {} / {}: {p}", path.display(), v.subject_id, v.visit_index)).into());
        }
    }
    Ok(visits)
}

/// The named split of a cohort directory, or the path itself when it is a file.
fn cohort_part(path: &Path, split: &str) -> Result<Vec<VisitRecord>> {
    if path.is_dir() {
        read_visits(&path.join(format!("{split}.jsonl")))
    } else {
        read_visits(path)
    }
}

fn validation_part(path: &Path) -> Result<Vec<VisitRecord>> {
    let p = path.join("val.jsonl");
    if path.is_dir() && p.exists() {
        read_visits(&p)
    } else {
        Ok(Vec::new())
    }
}

fn load_backbone(dir: &Path) -> Result<Backbone> {
    Backbone::load(open(&dir.join(BACKBONE_FILE))?).context("loading backbone")
}

fn load_openmax(dir: &Path) -> Result<OpenMaxCalibration> {
    let text = fs::read_to_string(dir.join(OPENMAX_FILE)).context("reading calibration")?;
    OpenMaxCalibration::from_json(&text).context("parsing calibration")
}

fn load_institutions(path: &Path) -> Result<Vec<InstitutionProfile>> {
    let p = read_institutions(open(path)?).with_context(|| format!("reading institutions {}", path.display()))?;
    if p.is_empty() {
        return Err(Invalid(format!("{}: no institution profiles", path.display())).into());
    }
    Ok(p)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCohort { common, out } => {
            let cfg = load_config(&common)?;
            let data = pipeline::generate(&cfg)?;
            fs::create_dir_all(&out)?;
            for (name, visits) in [
                ("cohort", &data.cohort),
                ("train", &data.split.train),
                ("val", &data.split.val),
                ("test", &data.split.test),
            ] {
                let mut w = create(&out.join(format!("{name}.jsonl")))?;
                write_cohort(&mut w, visits)?;
                w.flush()?;
            }
            let mut w = create(&out.join("institutions.jsonl"))?;
            write_institutions(&mut w, &data.institutions)?;
            w.flush()?;
            fs::write(out.join("config.toml"), cfg.to_toml_string()?)?;
            eprintln!(
                "{} visits: {} train, {} val, {} test; {} institutions",
                data.cohort.len(),
                data.split.train.len(),
                data.split.val.len(),
                data.split.test.len(),
                data.institutions.len()
            );
        }
        Command::TrainMcml { common, cohort, model_dir } => {
            let cfg = load_config(&common)?;
            let train = cohort_part(&cohort, "train")?;
            let val = validation_part(&cohort)?;
            let (model, report) = pipeline::train_mcml(&train, &val, &cfg)?;
            let mut w = create(&model_dir.join(BACKBONE_FILE))?;
            model.save(&mut w, serde_json::json!({ "seed": common.seed }))?;
            w.flush()?;
            write_json(&model_dir.join("backbone_report.json"), &report)?;
            eprintln!("backbone: {} parameters, best epoch {}", model.n_params(), report.best_epoch);
        }
        Command::FitOpenmax { common, cohort, model_dir } => {
            let cfg = load_config(&common)?;
            let train = cohort_part(&cohort, "train")?;
            let cal = pipeline::fit_openmax(&train, &load_backbone(&model_dir)?, &cfg)?;
            let mut w = create(&model_dir.join(OPENMAX_FILE))?;
            w.write_all(cal.to_json()?.as_bytes())?;
            w.write_all(b"\n")?;
            w.flush()?;
            eprintln!("calibration thresholds: {:?}", cal.thresholds);
        }
        Command::GenRewards { common, cohort, model_dir, out } => {
            let cfg = load_config(&common)?;
            let train = cohort_part(&cohort, "train")?;
            let records = pipeline::gen_rewards(&train, &load_backbone(&model_dir)?, &load_openmax(&model_dir)?, &cfg)?;
            let path = out.unwrap_or_else(|| model_dir.join(EXAMINATION_FILE));
            let mut w = create(&path)?;
            write_examination(&mut w, &records)?;
            w.flush()?;
            eprintln!("{} examination records", records.len());
        }
        Command::TrainDmarl { common, cohort, model_dir } => {
            let cfg = load_config(&common)?;
            let train = cohort_part(&cohort, "train")?;
            let records = read_examination(open(&model_dir.join(EXAMINATION_FILE))?)?;
            if records.is_empty() {
                bail!(Invalid("examination dataset is empty".into()));
            }
            let (model, report) = pipeline::train_dmarl(&records, &train, &cfg)?;
            let mut w = create(&model_dir.join(RECOMMENDER_FILE))?;
            model.save(&mut w, serde_json::json!({ "seed": common.seed }))?;
            w.flush()?;
            write_json(&model_dir.join("recommender_report.json"), &report)?;
            eprintln!("recommender: {} parameters", model.n_params());
        }
        Command::Diagnose { common, cohort, institutions, model_dir, out, all_exams } => {
            let cfg = load_config(&common)?;
            let visits = cohort_part(&cohort, "test")?;
            let sites = load_institutions(&institutions)?;
            let models = Models {
                backbone: load_backbone(&model_dir)?,
                calibration: load_openmax(&model_dir)?,
                recommender: Recommender::load(open(&model_dir.join(RECOMMENDER_FILE))?).context("loading recommender")?,
            };
            let traces = if all_exams {
                pipeline::diagnose_baseline(&visits, &sites, &models, &cfg)?
            } else {
                pipeline::diagnose_visits(&visits, &sites, &models, &cfg)?
            };
            let mut w = create(&out)?;
            write_traces(&mut w, &traces)?;
            w.flush()?;
            eprintln!("{} traces", traces.len());
        }
        Command::Evaluate { common, traces, out } => {
            let cfg = load_config(&common)?;
            let records = read_traces(open(&traces)?)?;
            if records.is_empty() {
                bail!(Invalid(format!("{}: no traces", traces.display())));
            }
            let report = evaluate(&records, &cfg.bootstrap)?;
            write_json(&out, &report)?;
            let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.4}"));
            let rows: Vec<Vec<String>> = report
                .classes
                .iter()
                .map(|c| {
                    let auc = c.auc.as_ref().map_or("undefined".to_string(), |a| format!("{:.4} ({:.4}-{:.4})", a.point, a.ci_low, a.ci_high));
                    vec![c.class.to_string(), auc, fmt(c.rates.sensitivity), fmt(c.rates.specificity)]
                })
                .collect();
            let mut text = tables::render_table(&["class", "AUC (95% CI)", "sensitivity", "specificity"], &rows);
            text += &format!("accuracy (all visits, Unknown as a class): {:.4}\n", report.accuracy_open);
            text += &format!("accuracy (known-class visits only): {}\n", fmt(report.accuracy_known));
            text += &format!("exams requested {}, granted {}, adjustments {}\n", report.exams_requested, report.exams_granted, report.adjustments);
            emit(&text)?;
        }
        Command::Census { traces, institutions, out } => {
            let records = read_traces(open(&traces)?)?;
            if records.is_empty() {
                bail!(Invalid(format!("{}: no traces", traces.display())));
            }
            let usage = tables::exam_usage_table(records.iter().map(|r| &r.trace))?;
            let census = tables::strategy_census(records.iter().map(|r| &r.trace))?;
            let sites = match &institutions {
                Some(p) => Some(tables::institution_census(&load_institutions(p)?)),
                None => None,
            };
            write_json(&out, &serde_json::json!({ "exam_usage": usage, "strategies": census, "institutions": sites }))?;
            let mut text = tables::render_exam_usage(&usage) + "\n" + &tables::render_census(&census);
            if let Some(rows) = &sites {
                let body: Vec<Vec<String>> = rows.iter().map(|r| vec![r.executable.to_string(), r.count.to_string()]).collect();
                text += "\n";
                text += &tables::render_table(&["executable", "sites"], &body);
            }
            emit(&text)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_validation_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
