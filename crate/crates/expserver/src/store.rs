//! Participant sessions and the append-only response log.
//!
//! The log holds one JSON record per line: a `session` record carrying the
//! full plan, then one `response` record per answered trial. Replaying it
//! rebuilds every session and its accuracies.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use bodyscene::stimpipe::StimulusVersion;
use bodyscene::synth::mix_seed;
use serde::{Deserialize, Serialize};

use crate::error::{ExpError, Result};
use crate::plan::{build_session, Catalog, TrialPlan};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub participant: String,
    /// 1-based block index in presentation order.
    pub block: usize,
    pub version: StimulusVersion,
    /// 1-based trial index within the block.
    pub trial: usize,
    pub clip_id: String,
    pub choices: Vec<usize>,
    pub chosen: usize,
    pub correct: bool,
    /// Milliseconds since the Unix epoch.
    pub server_time_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogEntry {
    Session(TrialPlan),
    Response(TrialRecord),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceOption {
    pub label: usize,
    pub name: String,
}

/// Everything a client needs to run one trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialPayload {
    pub participant: String,
    pub block: usize,
    pub version: StimulusVersion,
    pub trial: usize,
    pub trials_in_block: usize,
    /// Trials answered so far across all blocks.
    pub answered: usize,
    pub total: usize,
    pub clip_id: String,
    pub frame_count: usize,
    pub frame_rate: f64,
    /// One URL per frame, in display order.
    pub frames: Vec<String>,
    pub choices: Vec<ChoiceOption>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum NextTrial {
    Trial(TrialPayload),
    Done,
}

/// Per-block accuracy in presentation order (background, body, original).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockAccuracy {
    pub participant: String,
    pub bg: f64,
    pub body: f64,
    pub orig: f64,
    pub answered: [usize; 3],
    pub trials: [usize; 3],
    /// False while some trial is unanswered; accuracies then cover answered trials only.
    pub complete: bool,
}

#[derive(Clone, Debug)]
struct Session {
    plan: TrialPlan,
    records: Vec<TrialRecord>,
}

impl Session {
    fn accuracy(&self) -> BlockAccuracy {
        let mut correct = [0usize; 3];
        let mut answered = [0usize; 3];
        for r in &self.records {
            answered[r.block - 1] += 1;
            correct[r.block - 1] += usize::from(r.correct);
        }
        let trials = [0, 1, 2].map(|b| self.plan.blocks[b].trials.len());
        let acc = |b: usize| {
            if answered[b] == 0 {
                0.0
            } else {
                correct[b] as f64 / answered[b] as f64
            }
        };
        BlockAccuracy {
            participant: self.plan.participant.clone(),
            bg: acc(0),
            body: acc(1),
            orig: acc(2),
            answered,
            trials,
            complete: answered == trials,
        }
    }

    fn apply(&mut self, record: TrialRecord) -> Result<()> {
        let (block, trial) = self.plan.position(self.records.len()).ok_or_else(|| {
            ExpError::Conflict(format!(
                "participant {} already finished",
                self.plan.participant
            ))
        })?;
        if (record.block, record.trial) != (block, trial) {
            return Err(ExpError::Conflict(format!(
                "pending trial is block {block} trial {trial}, got block {} trial {}",
                record.block, record.trial
            )));
        }
        self.records.push(record);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoreConfig {
    pub n_categories: usize,
    /// Session seeds derive from this and the participant number unless given.
    pub seed: u64,
    pub frame_rate: f64,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            n_categories: 8,
            seed: 0,
            frame_rate: 10.0,
        }
    }
}

struct Inner {
    sessions: BTreeMap<String, Session>,
    log: Option<File>,
}

pub struct Store {
    catalog: Catalog,
    config: StoreConfig,
    log_path: Option<PathBuf>,
    inner: Mutex<Inner>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

/// Reads a response log back into sessions, checking every record.
fn replay_sessions(path: &Path) -> Result<BTreeMap<String, Session>> {
    let io = |source| ExpError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io)?;
    let mut sessions: BTreeMap<String, Session> = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| ExpError::Log {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        match serde_json::from_str::<LogEntry>(&line).map_err(|e| bad(e.to_string()))? {
            LogEntry::Session(plan) => {
                let pid = plan.participant.clone();
                if sessions
                    .insert(
                        pid.clone(),
                        Session {
                            plan,
                            records: Vec::new(),
                        },
                    )
                    .is_some()
                {
                    return Err(bad(format!("participant {pid} created twice")));
                }
            }
            LogEntry::Response(rec) => {
                let session = sessions.get_mut(&rec.participant).ok_or_else(|| {
                    bad(format!(
                        "response for unknown participant {}",
                        rec.participant
                    ))
                })?;
                session.apply(rec).map_err(|e| bad(e.to_string()))?;
            }
        }
    }
    Ok(sessions)
}

/// Per-participant accuracies reconstructed from a response log alone.
pub fn replay_log(path: &Path) -> Result<Vec<BlockAccuracy>> {
    Ok(replay_sessions(path)?
        .values()
        .map(Session::accuracy)
        .collect())
}

impl Store {
    /// A store backed by `log_path`, resuming any sessions it already holds.
    /// Without a path nothing is persisted.
    pub fn open(catalog: Catalog, config: StoreConfig, log_path: Option<PathBuf>) -> Result<Self> {
        let (sessions, log) = match &log_path {
            Some(path) => {
                let sessions = if path.exists() {
                    replay_sessions(path)?
                } else {
                    BTreeMap::new()
                };
                let file = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|source| ExpError::Io {
                        path: path.clone(),
                        source,
                    })?;
                (sessions, Some(file))
            }
            None => (BTreeMap::new(), None),
        };
        Ok(Self {
            catalog,
            config,
            log_path,
            inner: Mutex::new(Inner { sessions, log }),
        })
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    fn append(&self, inner: &mut Inner, entry: &LogEntry) -> Result<()> {
        if let Some(file) = inner.log.as_mut() {
            let mut line = serde_json::to_string(entry).expect("log entry serializes");
            line.push('\n');
            let path = self.log_path.clone().unwrap_or_default();
            file.write_all(line.as_bytes())
                .and_then(|()| file.flush())
                .map_err(|source| ExpError::Io { path, source })?;
        }
        Ok(())
    }

    /// Creates a participant with a fresh plan and returns its id.
    pub fn create_session(&self, seed: Option<u64>) -> Result<TrialPlan> {
        let mut inner = self.inner.lock().expect("store lock");
        let number = inner.sessions.len() as u64 + 1;
        let pid = format!("p{number:04}");
        let seed = seed.unwrap_or_else(|| mix_seed(self.config.seed, number));
        let plan = build_session(&self.catalog, &pid, self.config.n_categories, seed)?;
        self.append(&mut inner, &LogEntry::Session(plan.clone()))?;
        inner.sessions.insert(
            pid,
            Session {
                plan: plan.clone(),
                records: Vec::new(),
            },
        );
        Ok(plan)
    }

    fn payload(&self, session: &Session) -> NextTrial {
        let n = session.records.len();
        let Some((block, trial)) = session.plan.position(n) else {
            return NextTrial::Done;
        };
        let b = &session.plan.blocks[block - 1];
        let t = &b.trials[trial - 1];
        let frame_count = self.catalog.frames_of(&t.clip_id).unwrap_or(0);
        NextTrial::Trial(TrialPayload {
            participant: session.plan.participant.clone(),
            block,
            version: b.version,
            trial,
            trials_in_block: b.trials.len(),
            answered: n,
            total: session.plan.total_trials(),
            clip_id: t.clip_id.clone(),
            frame_count,
            frame_rate: self.config.frame_rate,
            frames: (0..frame_count)
                .map(|f| format!("/clip/{}/{}/{f}", b.version, t.clip_id))
                .collect(),
            choices: t
                .choices
                .iter()
                .map(|&label| ChoiceOption {
                    label,
                    name: self.catalog.categories[label].clone(),
                })
                .collect(),
        })
    }

    /// The first unanswered trial, or `Done`.
    pub fn next_trial(&self, participant: &str) -> Result<NextTrial> {
        let inner = self.inner.lock().expect("store lock");
        let session = inner
            .sessions
            .get(participant)
            .ok_or_else(|| ExpError::NotFound(format!("participant {participant}")))?;
        Ok(self.payload(session))
    }

    /// Records the answer to the pending trial. Anything else is a conflict
    /// and leaves the store unchanged.
    pub fn record_response(
        &self,
        participant: &str,
        block: usize,
        trial: usize,
        chosen: usize,
    ) -> Result<TrialRecord> {
        let mut inner = self.inner.lock().expect("store lock");
        let session = inner
            .sessions
            .get(participant)
            .ok_or_else(|| ExpError::NotFound(format!("participant {participant}")))?;
        let (pb, pt) = session
            .plan
            .position(session.records.len())
            .ok_or_else(|| {
                ExpError::Conflict(format!("participant {participant} already finished"))
            })?;
        if (block, trial) != (pb, pt) {
            return Err(ExpError::Conflict(format!(
                "pending trial is block {pb} trial {pt}, got block {block} trial {trial}"
            )));
        }
        let t = session
            .plan
            .trial(block, trial)
            .expect("pending trial exists");
        if !t.choices.contains(&chosen) {
            return Err(ExpError::Invalid(format!("label {chosen} was not offered")));
        }
        let record = TrialRecord {
            participant: participant.to_string(),
            block,
            version: session.plan.blocks[block - 1].version,
            trial,
            clip_id: t.clip_id.clone(),
            choices: t.choices.clone(),
            chosen,
            correct: chosen == t.label,
            server_time_ms: now_ms(),
        };
        self.append(&mut inner, &LogEntry::Response(record.clone()))?;
        let session = inner.sessions.get_mut(participant).expect("session exists");
        session.apply(record.clone())?;
        Ok(record)
    }

    pub fn records(&self, participant: &str) -> Result<Vec<TrialRecord>> {
        let inner = self.inner.lock().expect("store lock");
        inner
            .sessions
            .get(participant)
            .map(|s| s.records.clone())
            .ok_or_else(|| ExpError::NotFound(format!("participant {participant}")))
    }

    pub fn plan(&self, participant: &str) -> Result<TrialPlan> {
        let inner = self.inner.lock().expect("store lock");
        inner
            .sessions
            .get(participant)
            .map(|s| s.plan.clone())
            .ok_or_else(|| ExpError::NotFound(format!("participant {participant}")))
    }

    pub fn participant_accuracy(&self, participant: &str) -> Result<BlockAccuracy> {
        let inner = self.inner.lock().expect("store lock");
        inner
            .sessions
            .get(participant)
            .map(Session::accuracy)
            .ok_or_else(|| ExpError::NotFound(format!("participant {participant}")))
    }

    /// Accuracies of every participant, in id order.
    pub fn all_accuracies(&self) -> Vec<BlockAccuracy> {
        let inner = self.inner.lock().expect("store lock");
        inner.sessions.values().map(Session::accuracy).collect()
    }
}
