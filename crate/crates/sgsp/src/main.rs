use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sgsp::artifact::{read_envelope, write_json, write_text, ModelFile, ModelKind, ReportFile, WorldFile};
use sgsp::artifact::{MODEL_FORMAT, REPORT_FORMAT, WORLD_FORMAT};
use sgsp::config::ExperimentConfig;
use sgsp::manifest::{now_ms, RunManifest, StageRecord};
use sgsp::pipeline::{self, row_label};
use sgsp::tables::{audit_csv, histogram_csv, summary_csv, table_text, Layout};
use sgsp::RunError;
use sgsp_core::evaluation::{EvalReport, FilterMode};
use sgsp_core::poisoning::Method;
use sgsp_core::Rng;

#[derive(Parser)]
#[command(name = "sgsp", version, about = "Toy-scale speaker poisoning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FilterArg {
    None,
    Sf,
    Gtf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Tgp,
    Egp,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON). Defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the forget-set size.
    #[arg(long = "n-forget")]
    n_forget: Option<usize>,
    /// Poisoning method. Selecting a method turns the triplet term off unless
    /// --triplet is also given.
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Add the triplet term to poisoning.
    #[arg(long)]
    triplet: bool,
    #[arg(long, value_enum)]
    filter: Option<FilterArg>,
    /// Speaker-filter threshold.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the world and partition.
    World {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the generator on every train utterance.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a pretrained model with TGP or EGP.
    Poison {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        world: PathBuf,
        /// Pretrained model (the teacher and the student's starting point).
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a model on the eval pairs.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write the similarity histogram as CSV.
        #[arg(long)]
        histogram: Option<PathBuf>,
        /// Write the speaker-filter decisions as CSV.
        #[arg(long)]
        audit: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Check a saved model instead of a fresh 4-dimensional one.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Run every method for every forget-set size.
    Reproduce {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print tables from saved reports (files or directories, searched recursively).
    Report {
        inputs: Vec<PathBuf>,
        /// Also write summary.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig, RunError> {
    let mut cfg = match &c.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(n) = c.n_forget {
        cfg.n_forget = n;
    }
    if let Some(m) = c.method {
        cfg.poison.method = match m {
            MethodArg::Tgp => Method::Tgp,
            MethodArg::Egp => Method::Egp,
        };
        cfg.poison.use_triplet = c.triplet;
    } else if c.triplet {
        cfg.poison.use_triplet = true;
    }
    if let Some(f) = c.filter {
        cfg.filter.mode = match f {
            FilterArg::None => FilterMode::None,
            FilterArg::Sf => FilterMode::Sf,
            FilterArg::Gtf => FilterMode::Gtf,
        };
    }
    if let Some(t) = c.threshold {
        cfg.filter.threshold = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dir_of(path: &Path) -> PathBuf {
    match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Writes `value` to `out` and records it in the manifest beside it.
fn emit<T: serde::Serialize>(
    cfg: &ExperimentConfig,
    stage: &str,
    key: &str,
    out: &Path,
    value: &T,
    started: u128,
) -> Result<(), RunError> {
    write_json(out, value)?;
    let dir = dir_of(out);
    let mut m = RunManifest::open(&dir, &cfg.hash());
    m.record(StageRecord {
        stage: stage.into(),
        path: out.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
        stage_key: key.into(),
        config_hash: cfg.hash(),
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
    });
    m.save(&dir)
}

fn load_world(cfg: &ExperimentConfig, path: &Path) -> Result<WorldFile, RunError> {
    let w: WorldFile = read_envelope(path, WORLD_FORMAT)?;
    w.expect_key(&cfg.world_key(), path)?;
    Ok(w)
}

fn load_model(path: &Path) -> Result<ModelFile, RunError> {
    read_envelope(path, MODEL_FORMAT)
}

fn run(cli: Cli) -> Result<(), RunError> {
    let t0 = now_ms();
    match cli.command {
        Command::World { common, out } => {
            let cfg = load_config(&common)?;
            let body = pipeline::build_world(&cfg)?;
            println!(
                "world: {} speakers, {} utterances, {} contents; forget ids {:?}; {} eval pairs per side",
                body.world.speakers.len(),
                body.world.utterances.len(),
                body.world.contents.len(),
                body.partition.forget_ids,
                body.partition.eval_pairs_retain.len()
            );
            emit(&cfg, "world", &cfg.world_key(), &out, &pipeline::world_file(&cfg, body), t0)
        }
        Command::Pretrain { common, world, out } => {
            let cfg = load_config(&common)?;
            let w = load_world(&cfg, &world)?;
            let m = pipeline::pretrain_model(&cfg, &w.body.world, &w.body.partition)?;
            println!("pretrain: final loss {:.6}", m.losses.last().copied().unwrap_or(f64::NAN));
            emit(&cfg, "pretrain", &cfg.pretrain_key(), &out, &pipeline::model_file(&cfg, m), t0)
        }
        Command::Poison { common, world, model, out } => {
            let cfg = load_config(&common)?;
            let w = load_world(&cfg, &world)?;
            let teacher = load_model(&model)?;
            teacher.expect_key(&cfg.pretrain_key(), &model)?;
            let m = pipeline::poison_model(&cfg, &w.body.world, &w.body.partition, &teacher.body.model)?;
            println!(
                "poison {}: final loss {:.6}",
                cfg.poison_config().label(),
                m.losses.last().copied().unwrap_or(f64::NAN)
            );
            emit(&cfg, "poison", &cfg.poison_key(), &out, &pipeline::model_file(&cfg, m), t0)
        }
        Command::Evaluate { common, world, model, out, histogram, audit } => {
            let cfg = load_config(&common)?;
            let w = load_world(&cfg, &world)?;
            let m = load_model(&model)?;
            let (key, base) = match m.body.kind {
                ModelKind::Pretrained => (cfg.pretrain_key(), "PT"),
                ModelKind::Poisoned => (cfg.poison_key(), cfg.poison_config().label()),
            };
            m.expect_key(&key, &model)?;
            let label = row_label(base, cfg.filter.mode);
            let report = pipeline::evaluate_model(
                &cfg,
                &w.body.world,
                &w.body.partition,
                &m.body.model,
                cfg.filter.mode,
                &label,
            )?;
            print!("{}", table_text(&label, Layout::for_setting(cfg.n_forget), std::slice::from_ref(&report)));
            if let Some(h) = histogram {
                write_text(&h, &histogram_csv(&report.histogram)?)?;
            }
            if let Some(a) = audit {
                write_text(&a, &audit_csv(&report, &w.body.world)?)?;
            }
            emit(&cfg, "evaluate", &key, &out, &pipeline::report_file(&cfg, &key, report), t0)
        }
        Command::Gradcheck { common, model } => {
            let cfg = load_config(&common)?;
            let results = match model {
                None => pipeline::gradcheck(&cfg)?,
                Some(path) => {
                    let m = load_model(&path)?;
                    let mut rng = Rng::new(cfg.stage_seed(sgsp::config::stage::GRADCHECK));
                    pipeline::gradcheck_model(&m.body.model, cfg.world.d_id, &mut rng)?
                }
            };
            let mut failed = Vec::new();
            for (name, r) in &results {
                println!(
                    "{name:<11} params {:>6}  max rel error {:.3e}  {}",
                    r.n_params,
                    r.max_rel_error,
                    if r.passed { "ok" } else { "FAIL" }
                );
                if !r.passed {
                    failed.push(format!("{name}: {:.3e} > {:.0e}", r.max_rel_error, r.tolerance));
                }
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(RunError::GradCheck(failed.join("; ")))
            }
        }
        Command::Reproduce { common, out } => {
            let cfg = load_config(&common)?;
            let b = pipeline::reproduce(&cfg, &out)?;
            println!("reproduce: wrote {} in {:.1} s", out.display(), b.elapsed.as_secs_f64());
            Ok(())
        }
        Command::Report { inputs, out } => {
            let mut files = Vec::new();
            for i in &inputs {
                collect_reports(i, &mut files)?;
            }
            if files.is_empty() {
                return Err(RunError::Artifact("no report files found".into()));
            }
            let mut reports: Vec<EvalReport> = Vec::new();
            for f in &files {
                let r: ReportFile = read_envelope(f, REPORT_FORMAT)?;
                reports.push(r.body);
            }
            let mut sizes: Vec<usize> = reports.iter().map(|r| r.n_forget).collect();
            sizes.sort_unstable();
            sizes.dedup();
            for n in sizes {
                let rows: Vec<EvalReport> = ordered(reports.iter().filter(|r| r.n_forget == n).cloned().collect());
                println!("{}", table_text(&format!("{n} forget speaker(s)"), Layout::for_setting(n), &rows));
            }
            if let Some(o) = out {
                write_text(&o.join("summary.csv"), &summary_csv(&ordered(reports))?)?;
            }
            Ok(())
        }
    }
}

const ROW_ORDER: [&str; 7] = ["PT", "PT + SF", "PT + GTF", "TGP", "TGP+Trip.", "EGP", "EGP+Trip."];

fn ordered(mut rows: Vec<EvalReport>) -> Vec<EvalReport> {
    let rank = |l: &str| ROW_ORDER.iter().position(|r| *r == l).unwrap_or(ROW_ORDER.len());
    rows.sort_by(|a, b| (a.n_forget, rank(&a.label), &a.label).cmp(&(b.n_forget, rank(&b.label), &b.label)));
    rows
}

fn collect_reports(path: &Path, out: &mut Vec<PathBuf>) -> Result<(), RunError> {
    if path.is_file() {
        out.push(path.to_path_buf());
        return Ok(());
    }
    let mut entries: Vec<PathBuf> =
        std::fs::read_dir(path).map_err(|e| RunError::io(path, e))?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    entries.sort();
    for e in entries {
        if e.is_dir() {
            collect_reports(&e, out)?;
        } else if e.extension().is_some_and(|x| x == "json") && e.components().any(|c| c.as_os_str() == "reports") {
            out.push(e);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
