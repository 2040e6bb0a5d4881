//! Class-incremental sessions: novel classes arrive in disjoint groups and
//! evaluation after each session is cumulative.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::SegSample;
use crate::embeddings::{ClassEntry, ClassId, EmbeddingProvider, Split};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_cached, EmbeddingCache};
use crate::metrics::EvalReport;
use crate::model::{Phase, SegModel};
use crate::training::{register_novel_phase, FtStrategy, PhaseConfig};

/// One session of the stream: its classes and their support images.
#[derive(Clone, Debug)]
pub struct SessionData {
    pub name: String,
    pub classes: Vec<ClassEntry>,
    pub support: Vec<SegSample>,
}

/// Serializable description of a session, as read from a stream config.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSpec {
    pub session_name: String,
    pub classes: Vec<String>,
    pub shots: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub index: u32,
    pub name: String,
    pub classes: Vec<ClassId>,
    /// Checksum of every registry tensor after the session.
    pub checksums: BTreeMap<String, String>,
    pub report: EvalReport,
}

#[derive(Clone, Debug)]
pub struct SessionState {
    pub index: u32,
    pub model: SegModel,
    pub history: Vec<SessionRecord>,
}

impl SessionState {
    /// Session 0: the base-trained model and its base-class report.
    pub fn start(
        model: SegModel,
        provider: &EmbeddingProvider,
        test: &[SegSample],
        cache: &mut EmbeddingCache,
    ) -> Result<Self> {
        if model.phase == Phase::Initialized {
            return Err(Error::Protocol("a class stream starts from a base-trained model".into()));
        }
        let report = evaluate_cached(&model, provider, test, cache)?;
        let record = SessionRecord {
            index: 0,
            name: "base".into(),
            classes: model.vocab.ids(),
            checksums: model.registry.checksums(),
            report,
        };
        Ok(Self {
            index: 0,
            model,
            history: vec![record],
        })
    }

    pub fn reports(&self) -> Vec<&EvalReport> {
        self.history.iter().map(|r| &r.report).collect()
    }
}

/// Registers one session's classes and evaluates on `test` restricted to the
/// classes seen so far. Earlier records are never modified.
pub fn advance_session(
    state: &mut SessionState,
    provider: &EmbeddingProvider,
    session: &SessionData,
    test: &[SegSample],
    cfg: &PhaseConfig,
    cache: &mut EmbeddingCache,
) -> Result<()> {
    let index = state.index + 1;
    if let Some(c) = session
        .classes
        .iter()
        .find(|c| state.model.vocab.contains(c.class_id) || state.model.vocab.names().contains(&c.name.as_str()))
    {
        return Err(Error::Session(format!(
            "class `{}` ({}) of session {index} is already registered",
            c.name, c.class_id
        )));
    }
    let classes: Vec<ClassEntry> = session
        .classes
        .iter()
        .map(|c| ClassEntry::new(c.class_id, c.name.clone(), Split::Session(index)))
        .collect();
    if !classes.is_empty() {
        register_novel_phase(
            &mut state.model,
            provider,
            &classes,
            &session.support,
            cfg,
            FtStrategy::Pc,
        )?;
    }
    let report = evaluate_cached(&state.model, provider, test, cache)?;
    state.index = index;
    state.history.push(SessionRecord {
        index,
        name: session.name.clone(),
        classes: classes.iter().map(|c| c.class_id).collect(),
        checksums: state.model.registry.checksums(),
        report,
    });
    Ok(())
}

/// Runs every session in order from a base-trained model.
pub fn run_stream(
    base: &SegModel,
    provider: &EmbeddingProvider,
    sessions: &[SessionData],
    test: &[SegSample],
    cfg: &PhaseConfig,
) -> Result<SessionState> {
    let mut cache = EmbeddingCache::new();
    let mut state = SessionState::start(base.clone(), provider, test, &mut cache)?;
    for s in sessions {
        advance_session(&mut state, provider, s, test, cfg, &mut cache)?;
    }
    Ok(state)
}

/// Markdown table with one row per session: mIoU_B, mIoU_N and hIoU.
pub fn session_table(history: &[SessionRecord]) -> String {
    let mut out = String::from("| session | classes | mIoU_B | mIoU_N | hIoU |\n|---|---|---|---|---|\n");
    for r in history {
        let (n, h) = if r.index == 0 {
            ("-".to_string(), "-".to_string())
        } else {
            (format!("{:.2}", r.report.miou_novel), format!("{:.2}", r.report.hiou))
        };
        out.push_str(&format!(
            "| {} | {} | {:.2} | {n} | {h} |\n",
            r.name,
            r.classes.len(),
            r.report.miou_base
        ));
    }
    out
}
