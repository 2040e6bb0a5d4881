//! Pipelines shared by the subcommands: task loading, base training,
//! registration and the ablation sweeps.

use std::fs;
use std::path::{Path, PathBuf};

use fewseg_core::embeddings::{ClassEntry, EmbeddingProvider};
use fewseg_core::evaluation::{evaluate_cached, EmbeddingCache};
use fewseg_core::incremental::{run_stream, SessionData, SessionRecord, SessionSpec};
use fewseg_core::metrics::EvalReport;
use fewseg_core::model::{ModelConfig, Phase, SegModel};
use fewseg_core::numerics::stable_hash;
use fewseg_core::prototypes::{register_novel, CalibrationFormat};
use fewseg_core::taskgen::{generate, load_task, save_task, TaskData};
use fewseg_core::training::{register_novel_phase, train_base, FtStrategy, PhaseConfig, TrainReport};
use fewseg_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, RngState};
use crate::config::RunConfig;

pub const CACHE_ENV: &str = "FEWSEG_CACHE";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<f64>,
    pub report: EvalReport,
}

/// Serialized output of a sweep; `report` renders these without touching
/// a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub kind: String,
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.into(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, label: impl Into<String>, x: Option<f64>, report: EvalReport) {
        self.rows.push(ResultRow {
            label: label.into(),
            x,
            report,
        });
    }

    pub fn markdown(&self) -> String {
        let mut out = format!(
            "### {}\n\n| run | mIoU_B | mIoU_N | hIoU |\n|---|---|---|---|\n",
            self.kind
        );
        for r in &self.rows {
            out.push_str(&format!(
                "| {} | {:.2} | {:.2} | {:.2} |\n",
                r.label, r.report.miou_base, r.report.miou_novel, r.report.hiou
            ));
        }
        out
    }

    /// Writes `<kind>.json` and `<kind>.md` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(format!("{}.json", self.kind));
        fs::write(&path, serde_json::to_string_pretty(self)?)?;
        fs::write(dir.join(format!("{}.md", self.kind)), self.markdown())?;
        Ok(path)
    }
}

pub struct Context {
    pub cfg: RunConfig,
    pub task: TaskData,
    pub provider: EmbeddingProvider,
}

/// Generated task for `cfg`, reused from `$FEWSEG_CACHE` when present.
pub fn task_for(cfg: &RunConfig) -> Result<TaskData> {
    let spec = cfg.task_spec();
    let Some(root) = std::env::var_os(CACHE_ENV) else {
        return generate(&spec);
    };
    let key = stable_hash(&serde_json::to_string(&spec)?);
    let dir = PathBuf::from(root).join(format!("task-{key:016x}"));
    let manifest = dir.join("manifest.json");
    if manifest.exists() {
        return load_task(&manifest);
    }
    let task = generate(&spec)?;
    save_task(&task, &dir)?;
    Ok(task)
}

impl Context {
    pub fn new(cfg: RunConfig, task_manifest: Option<&Path>) -> Result<Self> {
        let task = match task_manifest {
            Some(p) => load_task(p)?,
            None => task_for(&cfg)?,
        };
        let provider = task.provider.build()?;
        Ok(Self { cfg, task, provider })
    }

    pub fn novel_ids(&self) -> Vec<u8> {
        self.task.novel_classes().iter().map(|c| c.class_id).collect()
    }

    pub fn fresh_model(&self, config: ModelConfig) -> Result<SegModel> {
        SegModel::new(
            config,
            self.task.provider.clone(),
            &self.provider,
            self.task.base_vocab()?,
            self.cfg.seed,
        )
    }

    pub fn train_base(&self, config: ModelConfig) -> Result<(Checkpoint, TrainReport)> {
        let mut model = self.fresh_model(config)?;
        let phase = self.cfg.base_phase();
        let log = train_base(&mut model, &self.provider, &self.task.base_train, &phase)?;
        let rng = RngState {
            init_seed: self.cfg.seed,
            phase_seeds: vec![phase.seed],
        };
        Ok((Checkpoint { model, rng }, log))
    }

    /// Registers every novel class of the task not yet in the vocabulary.
    pub fn register(&self, ckpt: &mut Checkpoint, strategy: FtStrategy) -> Result<TrainReport> {
        self.register_with(ckpt, strategy, self.cfg.novel_phase(&self.task.provider))
    }

    pub fn register_with(&self, ckpt: &mut Checkpoint, strategy: FtStrategy, phase: PhaseConfig) -> Result<TrainReport> {
        let classes = self.pending_novel(&ckpt.model);
        if classes.is_empty() {
            return Err(Error::Protocol("every novel class is already registered".into()));
        }
        let log = register_novel_phase(
            &mut ckpt.model,
            &self.provider,
            &classes,
            &self.task.novel_support,
            &phase,
            strategy,
        )?;
        ckpt.rng.phase_seeds.push(phase.seed);
        Ok(log)
    }

    fn pending_novel(&self, model: &SegModel) -> Vec<ClassEntry> {
        self.task
            .novel_classes()
            .into_iter()
            .filter(|c| !model.vocab.contains(c.class_id))
            .collect()
    }

    /// Adds textual rows for unregistered novel classes without training.
    /// Works on untrained models too.
    pub fn attach_novel(&self, model: &mut SegModel) -> Result<()> {
        let classes = self.pending_novel(model);
        if classes.is_empty() {
            return Ok(());
        }
        let stage = model.stage + 1;
        register_novel(&mut model.registry, &mut model.vocab, &classes, &self.provider, stage)?;
        model.stage = stage;
        if model.phase == Phase::BaseTrained {
            model.phase = Phase::NovelRegistered;
        }
        Ok(())
    }

    pub fn evaluate(&self, model: &SegModel, cache: &mut EmbeddingCache) -> Result<EvalReport> {
        evaluate_cached(model, &self.provider, &self.task.test, cache)
    }

    /// Novel classes split into `cfg.sessions` contiguous groups.
    pub fn default_sessions(&self) -> Result<Vec<SessionData>> {
        let novel = self.task.novel_classes();
        let n = self.cfg.sessions;
        if n == 0 || n > novel.len() {
            return Err(Error::Config(format!(
                "{n} sessions for {} novel classes",
                novel.len()
            )));
        }
        let per = novel.len().div_ceil(n);
        Ok(novel
            .chunks(per)
            .enumerate()
            .map(|(i, chunk)| {
                let ids: Vec<u8> = chunk.iter().map(|c| c.class_id).collect();
                SessionData {
                    name: format!("session{}", i + 1),
                    classes: chunk.to_vec(),
                    support: self.task.support_for(&ids),
                }
            })
            .collect())
    }

    /// Sessions from a JSON list of session specs naming task classes.
    pub fn sessions_from(&self, specs: &[SessionSpec]) -> Result<Vec<SessionData>> {
        specs
            .iter()
            .map(|s| {
                let mut classes = Vec::new();
                let mut support = Vec::new();
                for name in &s.classes {
                    let entry = self
                        .task
                        .novel_classes()
                        .into_iter()
                        .find(|c| &c.name == name)
                        .ok_or_else(|| {
                            Error::Session(format!(
                                "session `{}` names `{name}`, which is not a novel class",
                                s.session_name
                            ))
                        })?;
                    support.extend(self.task.support_for(&[entry.class_id]).into_iter().take(s.shots));
                    classes.push(entry);
                }
                Ok(SessionData {
                    name: s.session_name.clone(),
                    classes,
                    support,
                })
            })
            .collect()
    }

    pub fn stream(&self, base: &SegModel, sessions: &[SessionData]) -> Result<Vec<SessionRecord>> {
        let phase = self.cfg.novel_phase(&self.task.provider);
        Ok(run_stream(base, &self.provider, sessions, &self.task.test, &phase)?.history)
    }
}

fn write_log(dir: &Path, label: &str, log: &TrainReport) -> Result<()> {
    if !log.log.is_empty() {
        fs::write(dir.join(format!("{label}.train.jsonl")), log.to_jsonl()?)?;
    }
    Ok(())
}

fn base_for_sweep(ctx: &Context, dir: &Path) -> Result<Checkpoint> {
    fs::create_dir_all(dir)?;
    eprintln!("training base model");
    let (base, log) = ctx.train_base(ctx.cfg.model.clone())?;
    write_log(dir, "base", &log)?;
    Ok(base)
}

pub fn ablate_format(ctx: &Context, dir: &Path) -> Result<ResultTable> {
    fs::create_dir_all(dir)?;
    let mut table = ResultTable::new("ablate-format");
    for format in CalibrationFormat::ALL {
        eprintln!("format {format}");
        let config = ModelConfig {
            format,
            ..ctx.cfg.model.clone()
        };
        let (mut ckpt, log) = ctx.train_base(config)?;
        write_log(dir, &format!("{format}.base"), &log)?;
        let log = ctx.register(&mut ckpt, FtStrategy::Pc)?;
        write_log(dir, &format!("{format}.novel"), &log)?;
        table.push(format.tag(), None, ctx.evaluate(&ckpt.model, &mut EmbeddingCache::new())?);
    }
    Ok(table)
}

fn strategy_table(
    ctx: &Context,
    dir: &Path,
    kind: &str,
    runs: &[(&str, FtStrategy)],
) -> Result<ResultTable> {
    let base = base_for_sweep(ctx, dir)?;
    let mut cache = EmbeddingCache::new();
    let mut table = ResultTable::new(kind);
    for &(label, strategy) in runs {
        eprintln!("{kind}: {label}");
        let mut ckpt = base.clone();
        let log = ctx.register(&mut ckpt, strategy)?;
        write_log(dir, label, &log)?;
        table.push(label, None, ctx.evaluate(&ckpt.model, &mut cache)?);
    }
    Ok(table)
}

pub fn ablate_ft(ctx: &Context, dir: &Path) -> Result<ResultTable> {
    let runs: Vec<(&str, FtStrategy)> = FtStrategy::ALL.iter().map(|s| (s.tag(), *s)).collect();
    strategy_table(ctx, dir, "ablate-ft", &runs)
}

pub fn ablate_modality(ctx: &Context, dir: &Path) -> Result<ResultTable> {
    strategy_table(
        ctx,
        dir,
        "ablate-modality",
        &[
            ("text", FtStrategy::None),
            ("vision", FtStrategy::VisionOnly),
            ("both", FtStrategy::Pc),
        ],
    )
}

/// Registration and evaluation with `M` samples for every `M` of the sweep.
pub fn sweep_m(ctx: &Context, dir: &Path) -> Result<ResultTable> {
    let base = base_for_sweep(ctx, dir)?;
    let mut cache = EmbeddingCache::new();
    let mut table = ResultTable::new("sweep-m");
    for &m in &ctx.cfg.sweep_m {
        eprintln!("M = {m}");
        let phase = PhaseConfig {
            samples: m,
            ..ctx.cfg.novel_phase(&ctx.task.provider)
        };
        let mut ckpt = base.clone();
        ckpt.model.config.samples = m;
        let log = ctx.register_with(&mut ckpt, FtStrategy::Pc, phase)?;
        write_log(dir, &format!("m{m}"), &log)?;
        table.push(format!("M={m}"), Some(m as f64), ctx.evaluate(&ckpt.model, &mut cache)?);
    }
    Ok(table)
}

pub fn incremental(ctx: &Context, dir: &Path, stream: Option<&Path>) -> Result<(ResultTable, Vec<SessionRecord>)> {
    let sessions = match stream {
        Some(p) => {
            let specs: Vec<SessionSpec> = serde_json::from_str(&fs::read_to_string(p)?)?;
            ctx.sessions_from(&specs)?
        }
        None => ctx.default_sessions()?,
    };
    let base = base_for_sweep(ctx, dir)?;
    let history = ctx.stream(&base.model, &sessions)?;
    let mut table = ResultTable::new("incremental");
    for r in &history {
        table.push(r.name.clone(), Some(r.index as f64), r.report.clone());
    }
    Ok((table, history))
}
