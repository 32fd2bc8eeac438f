//! Human-judgment sessions backed by an append-only event log.
//!
//! Each session lives in `{dir}/{session_id}.jsonl`. The first line is a
//! `created` event holding the full session; every accepted change after
//! that is a `judgment` event. State is rebuilt by replaying the log on
//! open, and each event is fsynced before the caller is acknowledged.
//!
//! Assignment is either `partitioned` (item `i` goes to judge
//! `i mod judges`, one verdict per item) or `overlap` (every judge sees
//! every item; an item resolves by strict majority, ties stay unresolved).

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::jsonl;
use crate::metrics::{accuracy_from_counts, Accuracy};
use crate::sampling;

pub const PAYLOAD_VERSION: u32 = 1;

/// One system's answer to one evaluation question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub question_id: String,
    pub question: String,
    pub context_text: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemOutputs {
    pub system: String,
    /// Same question ids in the same order for every system in a session.
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationItem {
    pub item_id: String,
    pub question_id: String,
    pub question: String,
    pub context_text: String,
    pub answer: String,
    /// Never sent to judges.
    pub system: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentMode {
    #[default]
    Partitioned,
    Overlap,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSpec {
    #[serde(default)]
    pub session_id: Option<String>,
    pub judges: Vec<String>,
    pub sample_size: usize,
    pub sample_seed: u64,
    #[serde(default)]
    pub mode: AssignmentMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationSession {
    pub session_id: String,
    pub items: Vec<AnnotationItem>,
    pub judges: Vec<String>,
    pub sample_seed: u64,
    pub mode: AssignmentMode,
    pub created_at: DateTime<Utc>,
}

impl AnnotationSession {
    fn assigned(&self, index: usize, judge: &str) -> bool {
        match self.mode {
            AssignmentMode::Overlap => true,
            AssignmentMode::Partitioned => self.judges[index % self.judges.len()] == judge,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Correct,
    Incorrect,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub item_id: String,
    pub judge_id: String,
    pub verdict: Verdict,
    pub timestamp: DateTime<Utc>,
}

/// What a judge is shown; carries no system identity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeItem {
    pub version: u32,
    pub item_id: String,
    pub index: usize,
    pub question: String,
    pub context_text: String,
    pub answer: String,
    pub progress: Progress,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub judged: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum NextItem {
    Item(JudgeItem),
    Done { version: u32, progress: Progress },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AckStatus {
    Recorded,
    Duplicate,
    Overwritten,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub version: u32,
    pub item_id: String,
    pub judge_id: String,
    pub verdict: Verdict,
    pub status: AckStatus,
    pub progress: Progress,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStats {
    pub version: u32,
    pub session_id: String,
    pub total_items: usize,
    pub judged_by_judge: BTreeMap<String, usize>,
    pub resolved: usize,
    pub resolved_correct: usize,
    pub unresolved: usize,
    /// `None` until at least one item is resolved.
    pub accuracy: Option<Accuracy>,
    /// Resolved accuracy per hidden system label.
    pub by_system: BTreeMap<String, Accuracy>,
    pub overwrites: usize,
}

impl SessionStats {
    /// The stats with per-system results removed, for judge-facing use.
    pub fn blinded(mut self) -> Self {
        self.by_system.clear();
        self
    }
}

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("unknown judge `{judge}` for session `{session}`")]
    UnknownJudge { session: String, judge: String },
    #[error("unknown item `{item}` in session `{session}`")]
    UnknownItem { session: String, item: String },
    #[error("item `{item}` is not assigned to judge `{judge}`")]
    NotAssigned { item: String, judge: String },
    #[error("invalid session: {0}")]
    Invalid(String),
    #[error("sample of {requested} requested but only {available} items exist")]
    SampleSize { requested: usize, available: usize },
    #[error("session `{0}` already exists")]
    Exists(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
}

/// Samples `spec.sample_size` questions with the corpus sampling scheme
/// and builds the items. With several systems each sampled question
/// contributes one item per system and the combined list is shuffled
/// (seeded by `sample_seed`) so systems are interleaved.
pub fn create_session(
    systems: &[SystemOutputs],
    spec: &SessionSpec,
    created_at: DateTime<Utc>,
) -> Result<AnnotationSession, AnnotationError> {
    let first = systems.first().ok_or_else(|| AnnotationError::Invalid("no system outputs".into()))?;
    if spec.judges.is_empty() {
        return Err(AnnotationError::Invalid("at least one judge is required".into()));
    }
    let mut judges = spec.judges.clone();
    judges.sort();
    judges.dedup();
    if judges.len() != spec.judges.len() || judges.iter().any(|j| j.trim().is_empty()) {
        return Err(AnnotationError::Invalid("judge ids must be unique and non-empty".into()));
    }
    for s in systems {
        let same = s.candidates.len() == first.candidates.len()
            && s.candidates.iter().zip(&first.candidates).all(|(a, b)| a.question_id == b.question_id);
        if !same {
            return Err(AnnotationError::Invalid(format!("system `{}` does not cover the same questions in the same order", s.system)));
        }
    }
    let n = first.candidates.len();
    let picked = sampling::sample_indices(n, spec.sample_size, spec.sample_seed)
        .ok_or(AnnotationError::SampleSize { requested: spec.sample_size, available: n })?;
    let mut items: Vec<AnnotationItem> = Vec::with_capacity(picked.len() * systems.len());
    for &i in &picked {
        for s in systems {
            let c = &s.candidates[i];
            items.push(AnnotationItem {
                item_id: String::new(),
                question_id: c.question_id.clone(),
                question: c.question.clone(),
                context_text: c.context_text.clone(),
                answer: c.answer.clone(),
                system: s.system.clone(),
            });
        }
    }
    if systems.len() > 1 {
        sampling::shuffle(&mut items, spec.sample_seed);
    }
    let width = items.len().to_string().len().max(4);
    for (k, item) in items.iter_mut().enumerate() {
        item.item_id = format!("item-{k:0width$}");
    }
    let session_id = match &spec.session_id {
        Some(id) => {
            if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                return Err(AnnotationError::Invalid("session id may only contain [A-Za-z0-9_-]".into()));
            }
            id.clone()
        }
        None => {
            let mut h = Sha256::new();
            h.update(spec.sample_seed.to_le_bytes());
            for item in &items {
                h.update(item.question_id.as_bytes());
                h.update([0]);
                h.update(item.system.as_bytes());
                h.update([0]);
            }
            format!("s{}", &hex::encode(h.finalize())[..12])
        }
    };
    Ok(AnnotationSession { session_id, items, judges: spec.judges.clone(), sample_seed: spec.sample_seed, mode: spec.mode, created_at })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created { version: u32, session: AnnotationSession },
    Judgment {
        judgment: Judgment,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        overwrites: Option<Verdict>,
    },
}

struct SessionState {
    session: AnnotationSession,
    index_of: HashMap<String, usize>,
    /// Latest verdict per (item index, judge).
    verdicts: Vec<BTreeMap<String, Verdict>>,
    overwrites: usize,
    log: File,
    path: PathBuf,
}

impl SessionState {
    fn new(session: AnnotationSession, log: File, path: PathBuf) -> Self {
        let index_of = session.items.iter().enumerate().map(|(i, it)| (it.item_id.clone(), i)).collect();
        let verdicts = vec![BTreeMap::new(); session.items.len()];
        Self { session, index_of, verdicts, overwrites: 0, log, path }
    }

    fn apply(&mut self, j: &Judgment, overwrote: bool) -> Result<(), String> {
        let &i = self.index_of.get(&j.item_id).ok_or_else(|| format!("unknown item `{}`", j.item_id))?;
        self.verdicts[i].insert(j.judge_id.clone(), j.verdict);
        if overwrote {
            self.overwrites += 1;
        }
        Ok(())
    }

    fn progress(&self, judge: &str) -> Progress {
        let (mut judged, mut total) = (0, 0);
        for (i, v) in self.verdicts.iter().enumerate() {
            if self.session.assigned(i, judge) {
                total += 1;
                judged += usize::from(v.contains_key(judge));
            }
        }
        Progress { judged, total }
    }

    fn check_judge(&self, judge: &str) -> Result<(), AnnotationError> {
        if self.session.judges.iter().any(|j| j == judge) {
            Ok(())
        } else {
            Err(AnnotationError::UnknownJudge { session: self.session.session_id.clone(), judge: judge.to_owned() })
        }
    }

    fn resolved(&self, i: usize) -> Option<Verdict> {
        let v = &self.verdicts[i];
        match self.session.mode {
            AssignmentMode::Partitioned => v.values().next().copied(),
            AssignmentMode::Overlap => {
                let correct = v.values().filter(|&&x| x == Verdict::Correct).count();
                let incorrect = v.len() - correct;
                match correct.cmp(&incorrect) {
                    std::cmp::Ordering::Greater => Some(Verdict::Correct),
                    std::cmp::Ordering::Less => Some(Verdict::Incorrect),
                    std::cmp::Ordering::Equal => None,
                }
            }
        }
    }

    fn stats(&self) -> SessionStats {
        let mut judged_by_judge: BTreeMap<String, usize> = self.session.judges.iter().map(|j| (j.clone(), 0)).collect();
        for v in &self.verdicts {
            for judge in v.keys() {
                *judged_by_judge.entry(judge.clone()).or_default() += 1;
            }
        }
        let (mut resolved, mut correct) = (0usize, 0usize);
        let mut per_system: BTreeMap<String, (u64, u64)> = BTreeMap::new();
        for (i, item) in self.session.items.iter().enumerate() {
            if let Some(v) = self.resolved(i) {
                resolved += 1;
                let hit = v == Verdict::Correct;
                correct += usize::from(hit);
                let e = per_system.entry(item.system.clone()).or_default();
                e.0 += u64::from(hit);
                e.1 += 1;
            }
        }
        SessionStats {
            version: PAYLOAD_VERSION,
            session_id: self.session.session_id.clone(),
            total_items: self.session.items.len(),
            judged_by_judge,
            resolved,
            resolved_correct: correct,
            unresolved: self.session.items.len() - resolved,
            accuracy: accuracy_from_counts(correct as u64, resolved as u64).ok(),
            by_system: per_system
                .into_iter()
                .map(|(s, (c, t))| (s, accuracy_from_counts(c, t).expect("non-empty")))
                .collect(),
            overwrites: self.overwrites,
        }
    }
}

/// All sessions under one directory.
pub struct AnnotationStore {
    dir: PathBuf,
    sessions: RwLock<HashMap<String, Arc<Mutex<SessionState>>>>,
}

fn io_at(path: &Path) -> impl Fn(io::Error) -> AnnotationError + '_ {
    move |source| AnnotationError::Io { path: path.to_path_buf(), source }
}

fn sync_dir(dir: &Path) -> io::Result<()> {
    File::open(dir)?.sync_all()
}

impl AnnotationStore {
    /// Opens (creating if needed) `dir` and replays every session log in it.
    /// A torn final line from an interrupted write is cut off.
    pub fn open(dir: &Path) -> Result<Self, AnnotationError> {
        std::fs::create_dir_all(dir).map_err(io_at(dir))?;
        Self::open_with(dir, true)
    }

    /// Replays `dir` without modifying anything; a torn final line is
    /// ignored and writes through this store fail.
    pub fn open_read_only(dir: &Path) -> Result<Self, AnnotationError> {
        Self::open_with(dir, false)
    }

    fn open_with(dir: &Path, writable: bool) -> Result<Self, AnnotationError> {
        let mut sessions = HashMap::new();
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(io_at(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        entries.sort();
        for path in entries {
            let state = Self::replay(&path, writable)?;
            sessions.insert(state.session.session_id.clone(), Arc::new(Mutex::new(state)));
        }
        Ok(Self { dir: dir.to_path_buf(), sessions: RwLock::new(sessions) })
    }

    fn replay(path: &Path, writable: bool) -> Result<SessionState, AnnotationError> {
        let bad = |m: String| AnnotationError::Io { path: path.to_path_buf(), source: io::Error::new(io::ErrorKind::InvalidData, m) };
        let recovered = jsonl::recover::<Event>(path).map_err(io_at(path))?;
        if recovered.torn_tail && writable {
            let f = std::fs::OpenOptions::new().write(true).open(path).map_err(io_at(path))?;
            f.set_len(recovered.good_len).and_then(|_| f.sync_all()).map_err(io_at(path))?;
        }
        let mut events = recovered.records.into_iter();
        let Some(Event::Created { session, .. }) = events.next() else {
            return Err(bad("log does not start with a created event".into()));
        };
        let log = if writable { jsonl::open_append(path) } else { File::open(path) }.map_err(io_at(path))?;
        let mut state = SessionState::new(session, log, path.to_path_buf());
        for (n, ev) in events.enumerate() {
            match ev {
                Event::Judgment { judgment, overwrites } => {
                    state.apply(&judgment, overwrites.is_some()).map_err(|m| bad(format!("event {}: {m}", n + 2)))?
                }
                Event::Created { .. } => return Err(bad(format!("event {}: second created event", n + 2))),
            }
        }
        Ok(state)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.read().expect("store lock").keys().cloned().collect();
        ids.sort();
        ids
    }

    /// Persists a new session.
    pub fn insert(&self, session: AnnotationSession) -> Result<(), AnnotationError> {
        let mut sessions = self.sessions.write().expect("store lock");
        if sessions.contains_key(&session.session_id) {
            return Err(AnnotationError::Exists(session.session_id));
        }
        let path = self.dir.join(format!("{}.jsonl", session.session_id));
        if path.exists() {
            return Err(AnnotationError::Exists(session.session_id));
        }
        let mut log = jsonl::open_append(&path).map_err(io_at(&path))?;
        jsonl::append_synced(&mut log, &Event::Created { version: PAYLOAD_VERSION, session: session.clone() })
            .map_err(io_at(&path))?;
        sync_dir(&self.dir).map_err(io_at(&self.dir))?;
        let id = session.session_id.clone();
        sessions.insert(id, Arc::new(Mutex::new(SessionState::new(session, log, path))));
        Ok(())
    }

    fn get(&self, session_id: &str) -> Result<Arc<Mutex<SessionState>>, AnnotationError> {
        self.sessions
            .read()
            .expect("store lock")
            .get(session_id)
            .cloned()
            .ok_or_else(|| AnnotationError::UnknownSession(session_id.to_owned()))
    }

    pub fn session(&self, session_id: &str) -> Result<AnnotationSession, AnnotationError> {
        Ok(self.get(session_id)?.lock().expect("session lock").session.clone())
    }

    /// The lowest-indexed item assigned to `judge` that they have not judged.
    pub fn next_item(&self, session_id: &str, judge: &str) -> Result<NextItem, AnnotationError> {
        let arc = self.get(session_id)?;
        let state = arc.lock().expect("session lock");
        state.check_judge(judge)?;
        let progress = state.progress(judge);
        let next = (0..state.session.items.len()).find(|&i| state.session.assigned(i, judge) && !state.verdicts[i].contains_key(judge));
        Ok(match next {
            Some(index) => {
                let it = &state.session.items[index];
                NextItem::Item(JudgeItem {
                    version: PAYLOAD_VERSION,
                    item_id: it.item_id.clone(),
                    index,
                    question: it.question.clone(),
                    context_text: it.context_text.clone(),
                    answer: it.answer.clone(),
                    progress,
                })
            }
            None => NextItem::Done { version: PAYLOAD_VERSION, progress },
        })
    }

    /// Records a verdict durably before returning. Resubmitting the same
    /// verdict writes nothing; a different verdict is logged as an
    /// overwrite.
    pub fn submit_judgment(&self, session_id: &str, judgment: Judgment) -> Result<Ack, AnnotationError> {
        let arc = self.get(session_id)?;
        let mut state = arc.lock().expect("session lock");
        state.check_judge(&judgment.judge_id)?;
        let &i = state.index_of.get(&judgment.item_id).ok_or_else(|| AnnotationError::UnknownItem {
            session: session_id.to_owned(),
            item: judgment.item_id.clone(),
        })?;
        if !state.session.assigned(i, &judgment.judge_id) {
            return Err(AnnotationError::NotAssigned { item: judgment.item_id, judge: judgment.judge_id });
        }
        let previous = state.verdicts[i].get(&judgment.judge_id).copied();
        let status = match previous {
            Some(v) if v == judgment.verdict => AckStatus::Duplicate,
            Some(_) => AckStatus::Overwritten,
            None => AckStatus::Recorded,
        };
        if status != AckStatus::Duplicate {
            let event = Event::Judgment { judgment: judgment.clone(), overwrites: previous };
            let path = state.path.clone();
            jsonl::append_synced(&mut state.log, &event).map_err(io_at(&path))?;
            state.apply(&judgment, previous.is_some()).expect("item index checked");
        }
        Ok(Ack {
            version: PAYLOAD_VERSION,
            item_id: judgment.item_id,
            progress: state.progress(&judgment.judge_id),
            judge_id: judgment.judge_id,
            verdict: judgment.verdict,
            status,
        })
    }

    pub fn session_stats(&self, session_id: &str) -> Result<SessionStats, AnnotationError> {
        Ok(self.get(session_id)?.lock().expect("session lock").stats())
    }
}
