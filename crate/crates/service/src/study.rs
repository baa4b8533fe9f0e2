//! Task scheduling and exactly-once persistence for a single study.
//!
//! The JSON-lines logs are the source of truth. Opening a study replays them
//! to rebuild coverage counters and the acknowledgement table; outstanding
//! assignments live only in memory and are re-issued after a restart.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::{Arc, Mutex};

use majorness_core::ranking::{AnchorSet, Choice, ComparisonRecord};
use majorness_core::scale::{rating_from_placement, replay_walk, Judgment, RatingRecord, WalkOrder};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::StudyConfig;
use crate::layout;

pub trait Clock: Send + Sync {
    /// UTC seconds.
    fn now(&self) -> i64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> i64 {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs() as i64)
            .unwrap_or(0)
    }
}

/// Clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicI64);

impl ManualClock {
    pub fn new(start: i64) -> Self {
        Self(AtomicI64::new(start))
    }

    pub fn advance(&self, seconds: i64) {
        self.0.fetch_add(seconds, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> i64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Pair,
    Placement,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::Pair => "pair",
            TaskKind::Placement => "placement",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TaskPayload {
    Pair { left: String, right: String },
    /// Anchors are listed from most minor to most major.
    Placement { item: String, anchors: Vec<String>, order: WalkOrder },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAssignment {
    pub task_id: String,
    pub rater_id: String,
    pub kind: TaskKind,
    pub payload: TaskPayload,
    pub issued_at: i64,
    pub expires_at: i64,
    /// Audio URL for every item the task mentions.
    pub audio: BTreeMap<String, String>,
}

/// Reply to a task request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TaskResponse {
    Assigned(TaskAssignment),
    Exhausted { kind: TaskKind },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Submission {
    pub task_id: String,
    #[serde(default)]
    pub choice: Option<Choice>,
    #[serde(default)]
    pub walk: Option<Vec<Judgment>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub task_id: String,
    pub kind: TaskKind,
    /// Zero-based line of the record in its log.
    pub record: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slot: Option<usize>,
}

#[derive(Debug, thiserror::Error)]
pub enum StudyError {
    #[error("study directory {0} does not exist")]
    UnknownStudy(PathBuf),
    #[error("{0}")]
    NotConfigured(String),
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("task {0} has expired")]
    Expired(String),
    #[error("invalid submission: {0}")]
    Validation(String),
    #[error("invalid rater id: {0:?}")]
    InvalidRater(String),
    #[error("corrupt log {path} line {line}: {message}")]
    CorruptLog { path: PathBuf, line: usize, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StudyError + '_ {
    move |source| StudyError::Io { path: path.to_path_buf(), source }
}

/// Unordered pairs over `n` items: every pair when `n <= full_limit`,
/// otherwise `sample_size` pairs (at least a spanning chain) drawn so the
/// comparison graph is connected.
pub fn pair_plan(n: usize, full_limit: usize, sample_size: usize, seed: u64) -> Vec<(usize, usize)> {
    let total = n * n.saturating_sub(1) / 2;
    if n <= full_limit || sample_size >= total {
        return (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let mut chosen: BTreeSet<(usize, usize)> = perm.windows(2).map(|w| (w[0].min(w[1]), w[0].max(w[1]))).collect();
    let target = sample_size.max(n - 1);
    while chosen.len() < target {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a != b {
            chosen.insert((a.min(b), a.max(b)));
        }
    }
    chosen.into_iter().collect()
}

fn read_lines(path: &Path) -> Result<Option<Vec<String>>, StudyError> {
    match std::fs::read_to_string(path) {
        Ok(text) => Ok(Some(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(source) => Err(StudyError::Io { path: path.into(), source }),
    }
}

/// Item ids double as file names, so only a conservative alphabet is allowed.
pub fn is_safe_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 128 && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.')) && !id.starts_with('.')
}

#[derive(Debug, Clone)]
struct Outstanding {
    assignment: TaskAssignment,
    unit: usize,
}

struct UnitTable {
    kind: TaskKind,
    /// Pair units store both ids; placement units store the item in `.0`.
    units: Vec<(String, String)>,
    lookup: HashMap<(String, String), usize>,
    target: usize,
    completed: Vec<usize>,
    outstanding: Vec<usize>,
}

impl UnitTable {
    fn new(kind: TaskKind, units: Vec<(String, String)>, target: usize) -> Self {
        let lookup = units.iter().enumerate().map(|(i, u)| (u.clone(), i)).collect();
        let n = units.len();
        Self { kind, units, lookup, target, completed: vec![0; n], outstanding: vec![0; n] }
    }

    fn find(&self, a: &str, b: &str) -> Option<usize> {
        let key = if self.kind == TaskKind::Pair && a > b { (b.to_string(), a.to_string()) } else { (a.to_string(), b.to_string()) };
        self.lookup.get(&key).copied()
    }
}

struct State {
    pairs: UnitTable,
    placements: Option<(UnitTable, AnchorSet)>,
    /// (rater, kind, unit) that were completed or are outstanding.
    taken: HashSet<(String, TaskKind, usize)>,
    outstanding: HashMap<String, Outstanding>,
    active: HashMap<(String, TaskKind), String>,
    expired: HashSet<String>,
    acks: HashMap<String, Ack>,
    comparison_lines: usize,
    rating_lines: usize,
    comparisons: File,
    ratings: File,
}

/// Coverage and bookkeeping state, comparable across a restart.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudySnapshot {
    pub pair_completed: Vec<usize>,
    pub placement_completed: Vec<usize>,
    pub taken: BTreeSet<(String, TaskKind, usize)>,
    pub acks: BTreeMap<String, Ack>,
    pub comparison_records: usize,
    pub rating_records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitStatus {
    pub units: usize,
    pub target_per_unit: usize,
    pub records: usize,
    pub outstanding: usize,
    pub fully_covered: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyStatus {
    pub pair: UnitStatus,
    /// Absent until anchors have been selected.
    pub placement: Option<UnitStatus>,
    pub comparison_records: usize,
    pub rating_records: usize,
}

pub struct Study {
    dir: PathBuf,
    expiry: i64,
    order: WalkOrder,
    clock: Arc<dyn Clock>,
    state: Mutex<State>,
}

impl Study {
    /// Opens the study in `dir`, replaying both logs.
    pub fn open(dir: &Path, config: &StudyConfig, clock: Arc<dyn Clock>) -> Result<Self, StudyError> {
        if !dir.is_dir() {
            return Err(StudyError::UnknownStudy(dir.into()));
        }
        let ranking_items = read_lines(&dir.join(layout::RANKING_ITEMS))?.unwrap_or_default();
        let plan = pair_plan(ranking_items.len(), config.full_pair_limit, config.pair_sample_size, config.seed);
        let pair_units = plan
            .iter()
            .map(|&(a, b)| {
                let (x, y) = (&ranking_items[a], &ranking_items[b]);
                if x < y { (x.clone(), y.clone()) } else { (y.clone(), x.clone()) }
            })
            .collect();
        let pairs = UnitTable::new(TaskKind::Pair, pair_units, config.raters_per_pair);

        let anchors_path = dir.join(layout::ANCHORS);
        let placements = match std::fs::read_to_string(&anchors_path) {
            Ok(text) => {
                let anchors = AnchorSet::from_text(&text, "anchors.txt")
                    .map_err(|e| StudyError::NotConfigured(format!("{}: {e}", anchors_path.display())))?;
                let items = read_lines(&dir.join(layout::ITEMS))?.unwrap_or_default();
                let units = items.into_iter().map(|i| (i, String::new())).collect();
                Some((UnitTable::new(TaskKind::Placement, units, config.ratings_per_item), anchors))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(source) => return Err(StudyError::Io { path: anchors_path, source }),
        };

        let open_log = |name: &str| {
            let path = dir.join(name);
            OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))
        };
        let mut state = State {
            pairs,
            placements,
            taken: HashSet::new(),
            outstanding: HashMap::new(),
            active: HashMap::new(),
            expired: HashSet::new(),
            acks: HashMap::new(),
            comparison_lines: 0,
            rating_lines: 0,
            comparisons: open_log(layout::COMPARISONS)?,
            ratings: open_log(layout::RATINGS)?,
        };
        replay_comparisons(&dir.join(layout::COMPARISONS), &mut state)?;
        replay_ratings(&dir.join(layout::RATINGS), &mut state)?;
        Ok(Self { dir: dir.into(), expiry: config.task_expiry_seconds, order: config.walk_order, clock, state: Mutex::new(state) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Every item id the study may serve audio for.
    pub fn known_items(&self) -> BTreeSet<String> {
        let st = self.lock();
        let mut out: BTreeSet<String> = st.pairs.units.iter().flat_map(|(a, b)| [a.clone(), b.clone()]).collect();
        if let Some((table, anchors)) = &st.placements {
            out.extend(table.units.iter().map(|u| u.0.clone()));
            out.extend(anchors.anchors.iter().cloned());
        }
        out
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn next_task(&self, rater: &str, kind: TaskKind) -> Result<TaskResponse, StudyError> {
        if !is_safe_id(rater) {
            return Err(StudyError::InvalidRater(rater.into()));
        }
        let now = self.clock.now();
        let mut guard = self.lock();
        let st = &mut *guard;
        purge_expired(st, now);
        if kind == TaskKind::Placement && st.placements.is_none() {
            return Err(StudyError::NotConfigured("no anchors selected yet; run the `anchors` stage first".into()));
        }
        if kind == TaskKind::Pair && st.pairs.units.is_empty() {
            return Err(StudyError::NotConfigured(format!("no pairs to compare; {} lists fewer than two items", layout::RANKING_ITEMS)));
        }
        if let Some(id) = st.active.get(&(rater.to_string(), kind)) {
            return Ok(TaskResponse::Assigned(st.outstanding[id].assignment.clone()));
        }
        let table = match kind {
            TaskKind::Pair => &st.pairs,
            TaskKind::Placement => &st.placements.as_ref().expect("checked above").0,
        };
        let pick = (0..table.units.len())
            .filter(|&u| table.completed[u] + table.outstanding[u] < table.target)
            .filter(|&u| !st.taken.contains(&(rater.to_string(), kind, u)))
            .min_by_key(|&u| (table.completed[u] + table.outstanding[u], u));
        let Some(unit) = pick else {
            return Ok(TaskResponse::Exhausted { kind });
        };
        let payload = match kind {
            TaskKind::Pair => {
                let (a, b) = table.units[unit].clone();
                // Alternate sides so each pair is heard in both orders.
                if (table.completed[unit] + table.outstanding[unit]) % 2 == 0 {
                    TaskPayload::Pair { left: a, right: b }
                } else {
                    TaskPayload::Pair { left: b, right: a }
                }
            }
            TaskKind::Placement => {
                let anchors = &st.placements.as_ref().expect("checked above").1;
                TaskPayload::Placement { item: table.units[unit].0.clone(), anchors: anchors.anchors.clone(), order: self.order }
            }
        };
        let audio = match &payload {
            TaskPayload::Pair { left, right } => vec![left.clone(), right.clone()],
            TaskPayload::Placement { item, anchors, .. } => std::iter::once(item.clone()).chain(anchors.iter().cloned()).collect(),
        }
        .into_iter()
        .map(|id| {
            let url = format!("/api/audio/{id}");
            (id, url)
        })
        .collect();
        let assignment = TaskAssignment {
            task_id: uuid::Uuid::new_v4().to_string(),
            rater_id: rater.into(),
            kind,
            payload,
            issued_at: now,
            expires_at: now + self.expiry,
            audio,
        };
        match kind {
            TaskKind::Pair => st.pairs.outstanding[unit] += 1,
            TaskKind::Placement => st.placements.as_mut().expect("checked above").0.outstanding[unit] += 1,
        }
        st.taken.insert((rater.into(), kind, unit));
        st.active.insert((rater.into(), kind), assignment.task_id.clone());
        st.outstanding.insert(assignment.task_id.clone(), Outstanding { assignment: assignment.clone(), unit });
        Ok(TaskResponse::Assigned(assignment))
    }

    /// Records a submission exactly once. Resubmitting a recorded task
    /// returns the original acknowledgement and writes nothing.
    pub fn submit(&self, submission: &Submission) -> Result<Ack, StudyError> {
        let now = self.clock.now();
        let mut guard = self.lock();
        let st = &mut *guard;
        if let Some(ack) = st.acks.get(&submission.task_id) {
            return Ok(ack.clone());
        }
        purge_expired(st, now);
        let Some(task) = st.outstanding.get(&submission.task_id).cloned() else {
            return Err(if st.expired.contains(&submission.task_id) {
                StudyError::Expired(submission.task_id.clone())
            } else {
                StudyError::UnknownTask(submission.task_id.clone())
            });
        };
        let a = &task.assignment;
        let ack = match (&a.payload, submission.choice, &submission.walk) {
            (TaskPayload::Pair { left, right }, Some(choice), None) => {
                let record = ComparisonRecord {
                    rater: a.rater_id.clone(),
                    left: left.clone(),
                    right: right.clone(),
                    choice,
                    ts: now,
                    task_id: Some(a.task_id.clone()),
                };
                append_line(&mut st.comparisons, &record, &self.dir.join(layout::COMPARISONS))?;
                st.comparison_lines += 1;
                st.pairs.outstanding[task.unit] -= 1;
                st.pairs.completed[task.unit] += 1;
                Ack { task_id: a.task_id.clone(), kind: TaskKind::Pair, record: st.comparison_lines - 1, rating: None, slot: None }
            }
            (TaskPayload::Placement { item, .. }, None, Some(walk)) => {
                let anchors = &st.placements.as_ref().expect("placement task without anchors").1;
                let slot = replay_walk(anchors, self.order, walk).map_err(|e| StudyError::Validation(e.to_string()))?;
                let rating = rating_from_placement(slot, anchors.len()).map_err(|e| StudyError::Validation(e.to_string()))?;
                let record = RatingRecord {
                    rater: a.rater_id.clone(),
                    item: item.clone(),
                    rating,
                    slot,
                    walk: walk.clone(),
                    ts: now,
                    self_comparison: anchors.anchors.contains(item),
                    task_id: Some(a.task_id.clone()),
                };
                append_line(&mut st.ratings, &record, &self.dir.join(layout::RATINGS))?;
                let table = &mut st.placements.as_mut().expect("placement task without anchors").0;
                table.outstanding[task.unit] -= 1;
                table.completed[task.unit] += 1;
                st.rating_lines += 1;
                Ack { task_id: a.task_id.clone(), kind: TaskKind::Placement, record: st.rating_lines - 1, rating: Some(rating), slot: Some(slot) }
            }
            (TaskPayload::Pair { .. }, _, _) => {
                return Err(StudyError::Validation("a pair task takes exactly one `choice` and no `walk`".into()));
            }
            (TaskPayload::Placement { .. }, _, _) => {
                return Err(StudyError::Validation("a placement task takes exactly one `walk` and no `choice`".into()));
            }
        };
        st.outstanding.remove(&a.task_id);
        st.active.remove(&(a.rater_id.clone(), a.kind));
        st.acks.insert(a.task_id.clone(), ack.clone());
        Ok(ack)
    }

    pub fn status(&self) -> StudyStatus {
        let mut guard = self.lock();
        purge_expired(&mut guard, self.clock.now());
        let unit_status = |t: &UnitTable| UnitStatus {
            units: t.units.len(),
            target_per_unit: t.target,
            records: t.completed.iter().sum(),
            outstanding: t.outstanding.iter().sum(),
            fully_covered: t.completed.iter().filter(|&&c| c >= t.target).count(),
        };
        StudyStatus {
            pair: unit_status(&guard.pairs),
            placement: guard.placements.as_ref().map(|(t, _)| unit_status(t)),
            comparison_records: guard.comparison_lines,
            rating_records: guard.rating_lines,
        }
    }

    /// Durable state only; outstanding assignments are excluded, so a
    /// quiescent study and its reopened copy compare equal.
    pub fn snapshot(&self) -> StudySnapshot {
        let st = self.lock();
        let outstanding: HashSet<(String, TaskKind, usize)> =
            st.outstanding.values().map(|o| (o.assignment.rater_id.clone(), o.assignment.kind, o.unit)).collect();
        StudySnapshot {
            pair_completed: st.pairs.completed.clone(),
            placement_completed: st.placements.as_ref().map(|(t, _)| t.completed.clone()).unwrap_or_default(),
            taken: st.taken.iter().filter(|t| !outstanding.contains(*t)).cloned().collect(),
            acks: st.acks.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
            comparison_records: st.comparison_lines,
            rating_records: st.rating_lines,
        }
    }
}

fn purge_expired(st: &mut State, now: i64) {
    let stale: Vec<String> = st.outstanding.iter().filter(|(_, o)| o.assignment.expires_at <= now).map(|(id, _)| id.clone()).collect();
    for id in stale {
        let o = st.outstanding.remove(&id).expect("listed above");
        let a = o.assignment;
        match a.kind {
            TaskKind::Pair => st.pairs.outstanding[o.unit] -= 1,
            TaskKind::Placement => st.placements.as_mut().expect("placement task without anchors").0.outstanding[o.unit] -= 1,
        }
        st.taken.remove(&(a.rater_id.clone(), a.kind, o.unit));
        st.active.remove(&(a.rater_id, a.kind));
        st.expired.insert(id);
    }
}

fn append_line<T: Serialize>(file: &mut File, record: &T, path: &Path) -> Result<(), StudyError> {
    let mut line = serde_json::to_vec(record).expect("records serialize");
    line.push(b'\n');
    file.write_all(&line).and_then(|_| file.flush()).map_err(io_err(path))
}

fn for_each_line(path: &Path, mut f: impl FnMut(usize, &str) -> Result<(), String>) -> Result<(), StudyError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(source) => return Err(StudyError::Io { path: path.into(), source }),
    };
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        f(i, &line).map_err(|message| StudyError::CorruptLog { path: path.into(), line: i + 1, message })?;
    }
    Ok(())
}

fn replay_comparisons(path: &Path, st: &mut State) -> Result<(), StudyError> {
    for_each_line(path, |i, line| {
        let rec: ComparisonRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
        st.comparison_lines = i + 1;
        if let Some(unit) = st.pairs.find(&rec.left, &rec.right) {
            st.taken.insert((rec.rater.clone(), TaskKind::Pair, unit));
            st.pairs.completed[unit] += 1;
        }
        if let Some(id) = rec.task_id {
            st.acks.insert(id.clone(), Ack { task_id: id, kind: TaskKind::Pair, record: i, rating: None, slot: None });
        }
        Ok(())
    })
}

fn replay_ratings(path: &Path, st: &mut State) -> Result<(), StudyError> {
    for_each_line(path, |i, line| {
        let rec: RatingRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
        st.rating_lines = i + 1;
        if let Some((table, _)) = st.placements.as_mut() {
            if let Some(unit) = table.find(&rec.item, "") {
                st.taken.insert((rec.rater.clone(), TaskKind::Placement, unit));
                table.completed[unit] += 1;
            }
        }
        if let Some(id) = rec.task_id {
            let ack = Ack { task_id: id.clone(), kind: TaskKind::Placement, record: i, rating: Some(rec.rating), slot: Some(rec.slot) };
            st.acks.insert(id, ack);
        }
        Ok(())
    })
}
