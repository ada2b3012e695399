//! Stage functions shared by the subcommands, and the full sweep.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use sgsp_core::evaluation::{evaluate, EvalConfig, EvalReport, Filter, FilterMode};
use sgsp_core::filtering::ForgetRegistry;
use sgsp_core::generator::{grad_check, pretrain, GeneratorModel, GradCheckCase, GradCheckReport};
use sgsp_core::poisoning::{poison, Method};
use sgsp_core::world::{generate_world, make_eval_pairs, partition, Partition, SpeakerWorld};
use sgsp_core::Rng;

use crate::artifact::{write_json, write_text, Envelope};
use crate::artifact::{
    ModelArtifact, ModelFile, ModelKind, PoisonProvenance, ReportFile, Seeds, WorldArtifact, WorldFile, MODEL_FORMAT,
    REPORT_FORMAT, WORLD_FORMAT,
};
use crate::config::{stage, ExperimentConfig};
use crate::manifest::{now_ms, RunManifest, StageRecord};
use crate::tables::{audit_csv, histogram_csv, slug, summary_csv, table_csv, table_text, Layout};
use crate::RunError;

/// Maximum relative error accepted by `gradcheck`.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub fn generate(cfg: &ExperimentConfig) -> Result<SpeakerWorld, RunError> {
    generate_world(cfg.world, cfg.stage_seed(stage::WORLD)).map_err(RunError::stage("world"))
}

/// Forget set of size `n_forget` plus eval pairs. Forget sets of different
/// sizes are nested because they share one permutation seed.
pub fn partition_for(cfg: &ExperimentConfig, world: &SpeakerWorld, n_forget: usize) -> Result<Partition, RunError> {
    let p = partition(world, cfg.stage_seed(stage::PARTITION), n_forget).map_err(RunError::stage("partition"))?;
    make_eval_pairs(world, p, cfg.stage_seed(stage::EVAL_PAIRS)).map_err(RunError::stage("eval-pairs"))
}

pub fn build_world(cfg: &ExperimentConfig) -> Result<WorldArtifact, RunError> {
    let world = generate(cfg)?;
    let partition = partition_for(cfg, &world, cfg.n_forget)?;
    Ok(WorldArtifact { world, partition })
}

pub fn world_file(cfg: &ExperimentConfig, body: WorldArtifact) -> WorldFile {
    Envelope::new(WORLD_FORMAT, cfg.world_key(), cfg.hash(), body)
}

fn seeds(cfg: &ExperimentConfig, poisoned: bool) -> Seeds {
    Seeds {
        master: cfg.seed,
        init: cfg.stage_seed(stage::INIT),
        pretrain: cfg.stage_seed(stage::PRETRAIN),
        poison: poisoned.then(|| cfg.stage_seed(stage::POISON)),
    }
}

pub fn pretrain_model(
    cfg: &ExperimentConfig,
    world: &SpeakerWorld,
    partition: &Partition,
) -> Result<ModelArtifact, RunError> {
    let mut rng = Rng::new(cfg.stage_seed(stage::INIT));
    let model = GeneratorModel::new(&cfg.layer_dims(), cfg.generator.activation, &mut rng)
        .map_err(RunError::stage("pretrain"))?;
    let out = pretrain(model, world, partition, &cfg.pretrain, cfg.stage_seed(stage::PRETRAIN))
        .map_err(RunError::stage("pretrain"))?;
    Ok(ModelArtifact {
        kind: ModelKind::Pretrained,
        seeds: seeds(cfg, false),
        poison: None,
        losses: out.losses,
        model: out.model,
    })
}

pub fn poison_model(
    cfg: &ExperimentConfig,
    world: &SpeakerWorld,
    partition: &Partition,
    teacher: &GeneratorModel,
) -> Result<ModelArtifact, RunError> {
    let pc = cfg.poison_config();
    let out = poison(teacher.clone(), teacher, world, partition, &pc)
        .map_err(RunError::stage(format!("poison {}", pc.label())))?;
    Ok(ModelArtifact {
        kind: ModelKind::Poisoned,
        seeds: seeds(cfg, true),
        poison: Some(PoisonProvenance {
            method: pc.method,
            use_triplet: pc.use_triplet,
            p_forget: pc.p_forget,
            triplet_margin: pc.triplet_margin,
            triplet_weight: pc.triplet_weight,
            steps: pc.steps,
            lr: pc.lr,
            n_forget: partition.n_forget(),
        }),
        losses: out.losses,
        model: out.model,
    })
}

pub fn model_file(cfg: &ExperimentConfig, body: ModelArtifact) -> ModelFile {
    let key = match body.kind {
        ModelKind::Pretrained => cfg.pretrain_key(),
        ModelKind::Poisoned => cfg.poison_key(),
    };
    Envelope::new(MODEL_FORMAT, key, cfg.hash(), body)
}

pub fn eval_config(cfg: &ExperimentConfig) -> EvalConfig {
    EvalConfig { bins: cfg.eval.bins, max_aggregation: cfg.eval.max_aggregation, seed: cfg.stage_seed(stage::FILTER) }
}

pub fn registry(
    cfg: &ExperimentConfig,
    world: &SpeakerWorld,
    partition: &Partition,
) -> Result<ForgetRegistry, RunError> {
    let f = &cfg.filter;
    ForgetRegistry::from_partition(world, partition, f.registry_source, f.registry_mode, f.threshold)
        .map_err(RunError::stage("registry"))
}

pub fn evaluate_model(
    cfg: &ExperimentConfig,
    world: &SpeakerWorld,
    partition: &Partition,
    model: &GeneratorModel,
    mode: FilterMode,
    label: &str,
) -> Result<EvalReport, RunError> {
    let reg;
    let filter = match mode {
        FilterMode::None => Filter::None,
        FilterMode::Gtf => Filter::Gtf,
        FilterMode::Sf => {
            reg = registry(cfg, world, partition)?;
            Filter::Sf { registry: &reg, max_attempts: cfg.filter.max_attempts }
        }
    };
    evaluate(model, world, partition, filter, &eval_config(cfg), label)
        .map_err(RunError::stage(format!("evaluate {label}")))
}

pub fn report_file(cfg: &ExperimentConfig, model_key: &str, report: EvalReport) -> ReportFile {
    Envelope::new(REPORT_FORMAT, model_key.into(), cfg.hash(), report)
}

/// Label such as `PT + GTF` or `EGP+Trip. + SF`.
pub fn row_label(base: &str, mode: FilterMode) -> String {
    match mode {
        FilterMode::None => base.into(),
        FilterMode::Sf => format!("{base} + SF"),
        FilterMode::Gtf => format!("{base} + GTF"),
    }
}

/// Model dimensions used by `gradcheck`: identity 4, content 4, two hidden layers of 8.
pub const GRADCHECK_D_ID: usize = 4;
pub const GRADCHECK_DIMS: [usize; 4] = [8, 8, 8, 8];

/// L2 and L2 + triplet checks on a fresh random model.
pub fn gradcheck(cfg: &ExperimentConfig) -> Result<Vec<(&'static str, GradCheckReport)>, RunError> {
    let mut rng = Rng::new(cfg.stage_seed(stage::GRADCHECK));
    let model = GeneratorModel::new(&GRADCHECK_DIMS, cfg.generator.activation, &mut rng)
        .map_err(RunError::stage("gradcheck"))?;
    gradcheck_model(&model, GRADCHECK_D_ID, &mut rng)
}

pub fn gradcheck_model(
    model: &GeneratorModel,
    d_id: usize,
    rng: &mut Rng,
) -> Result<Vec<(&'static str, GradCheckReport)>, RunError> {
    let mut out = Vec::new();
    for (name, triplet) in [("l2", false), ("l2+triplet", true)] {
        let case = GradCheckCase::random(model, d_id, rng, triplet).map_err(RunError::stage("gradcheck"))?;
        out.push((name, grad_check(model, &case, GRADCHECK_TOLERANCE).map_err(RunError::stage("gradcheck"))?));
    }
    Ok(out)
}

/// Poisoning rows in table order.
pub const POISON_ROWS: [(Method, bool); 4] =
    [(Method::Tgp, false), (Method::Tgp, true), (Method::Egp, false), (Method::Egp, true)];

#[derive(Debug, Clone)]
pub struct SettingResult {
    pub n_forget: usize,
    pub partition: Partition,
    /// PT, PT + SF, PT + GTF, then the poisoning rows.
    pub reports: Vec<EvalReport>,
    pub models: Vec<ModelArtifact>,
}

impl SettingResult {
    pub fn report(&self, label: &str) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.label == label)
    }
}

#[derive(Debug, Clone)]
pub struct Bundle {
    pub config: ExperimentConfig,
    pub world: SpeakerWorld,
    pub pretrained: ModelArtifact,
    pub settings: Vec<SettingResult>,
    /// Wall-clock time of each training stage, e.g. `pretrain` or `poison n=1 EGP+Trip.`.
    pub timings: Vec<(String, Duration)>,
    pub elapsed: Duration,
}

impl Bundle {
    pub fn setting(&self, n_forget: usize) -> Option<&SettingResult> {
        self.settings.iter().find(|s| s.n_forget == n_forget)
    }

    pub fn timing(&self, stage: &str) -> Option<Duration> {
        self.timings.iter().find(|t| t.0 == stage).map(|t| t.1)
    }
}

struct Writer<'a> {
    out: &'a Path,
    manifest: RunManifest,
    config_hash: String,
}

impl Writer<'_> {
    fn json<T: serde::Serialize>(&mut self, stage: &str, rel: PathBuf, key: &str, value: &T) -> Result<(), RunError> {
        let t = now_ms();
        write_json(&self.out.join(&rel), value)?;
        self.note(stage, rel, key, t);
        Ok(())
    }

    fn text(&mut self, stage: &str, rel: PathBuf, key: &str, text: &str) -> Result<(), RunError> {
        let t = now_ms();
        write_text(&self.out.join(&rel), text)?;
        self.note(stage, rel, key, t);
        Ok(())
    }

    fn note(&mut self, stage: &str, rel: PathBuf, key: &str, started: u128) {
        self.manifest.record(StageRecord {
            stage: stage.into(),
            path: rel.display().to_string(),
            stage_key: key.into(),
            config_hash: self.config_hash.clone(),
            started_unix_ms: started,
            finished_unix_ms: now_ms(),
        });
    }
}

/// Pretrains once, then for every forget-set size evaluates PT, PT + SF,
/// PT + GTF and the four poisoning variants, writing the bundle to `out`.
pub fn reproduce(cfg: &ExperimentConfig, out: &Path) -> Result<Bundle, RunError> {
    cfg.validate()?;
    let start = Instant::now();
    let hash = cfg.hash();
    let mut w = Writer { out, manifest: RunManifest::new(&hash), config_hash: hash.clone() };
    w.text("config", "config.json".into(), &hash, &format!("{}\n", cfg.to_json()))?;

    let world = generate(cfg)?;
    let first = partition_for(cfg, &world, cfg.reproduce.settings[0])?;
    eprintln!("[reproduce] pretraining ({} steps)", cfg.pretrain.steps);
    let mut timings = Vec::new();
    let t = Instant::now();
    let pretrained = pretrain_model(cfg, &world, &first)?;
    timings.push(("pretrain".to_string(), t.elapsed()));
    let pt_key = cfg.pretrain_key();
    w.json("pretrain", "models/pretrained.json".into(), &pt_key, &model_file(cfg, pretrained.clone()))?;

    let mut settings = Vec::new();
    let mut all_reports = Vec::new();
    let mut summary = String::new();
    for &n in &cfg.reproduce.settings {
        let mut c = cfg.clone();
        c.n_forget = n;
        let dir = PathBuf::from(format!("n{n}"));
        let p = if n == first.n_forget() { first.clone() } else { partition_for(&c, &world, n)? };
        let world_key = c.world_key();
        w.json(
            "world",
            PathBuf::from("worlds").join(format!("{}.json", dir.display())),
            &world_key,
            &world_file(&c, WorldArtifact { world: world.clone(), partition: p.clone() }),
        )?;

        let mut reports = Vec::new();
        for mode in [FilterMode::None, FilterMode::Sf, FilterMode::Gtf] {
            let label = row_label("PT", mode);
            eprintln!("[reproduce] n={n} {label}");
            reports.push(evaluate_model(&c, &world, &p, &pretrained.model, mode, &label)?);
        }
        let mut models = Vec::new();
        for (method, triplet) in POISON_ROWS {
            c.poison.method = method;
            c.poison.use_triplet = triplet;
            let label = c.poison_config().label();
            eprintln!("[reproduce] n={n} {label}");
            let t = Instant::now();
            let m = poison_model(&c, &world, &p, &pretrained.model)?;
            timings.push((format!("poison n={n} {label}"), t.elapsed()));
            let key = c.poison_key();
            w.json(
                "poison",
                PathBuf::from("models").join(&dir).join(format!("{}.json", slug(label))),
                &key,
                &model_file(&c, m.clone()),
            )?;
            reports.push(evaluate_model(&c, &world, &p, &m.model, FilterMode::None, label)?);
            models.push(m);
        }

        for r in &reports {
            let s = slug(&r.label);
            w.json(
                "evaluate",
                PathBuf::from("reports").join(&dir).join(format!("{s}.json")),
                &hash,
                &report_file(cfg, &hash, r.clone()),
            )?;
            w.text(
                "histogram",
                PathBuf::from("histograms").join(&dir).join(format!("{s}.csv")),
                &hash,
                &histogram_csv(&r.histogram)?,
            )?;
            if r.filter == FilterMode::Sf {
                w.text(
                    "audit",
                    PathBuf::from("audit").join(&dir).join(format!("{s}.csv")),
                    &hash,
                    &audit_csv(r, &world)?,
                )?;
            }
        }
        let layout = Layout::for_setting(n);
        let title = format!("{n} forget speaker{}", if n == 1 { "" } else { "s" });
        let text = table_text(&title, layout, &reports);
        eprint!("{text}");
        summary.push_str(&text);
        summary.push('\n');
        w.text(
            "table",
            PathBuf::from("tables").join(format!("{}.csv", dir.display())),
            &hash,
            &table_csv(layout, &reports)?,
        )?;
        w.text("table", PathBuf::from("tables").join(format!("{}.txt", dir.display())), &hash, &text)?;
        all_reports.extend(reports.iter().cloned());
        settings.push(SettingResult { n_forget: n, partition: p, reports, models });
    }
    w.text("table", "tables/summary.csv".into(), &hash, &summary_csv(&all_reports)?)?;
    w.text("table", "tables/summary.txt".into(), &hash, &summary)?;
    w.manifest.save(out)?;
    Ok(Bundle { config: cfg.clone(), world, pretrained, settings, timings, elapsed: start.elapsed() })
}
