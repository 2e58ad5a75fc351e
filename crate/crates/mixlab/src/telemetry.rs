//! Append-only event log and content-addressed image store.
//!
//! Layout under the store root:
//!
//! ```text
//! sessions/{session_id}.jsonl   one event per line, seq 0, 1, 2, ...
//! images/{sha256}.png           PNG bytes, named by their own hash
//! ```
//!
//! Every append is written as a single line and `fsync`ed before the seq is
//! acknowledged. A crash can therefore leave at most one torn, newline-less
//! fragment at the end of a file, which [`TelemetryStore::repair_session`]
//! removes before the next append.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::imaging::{decode_png, is_hash, sha256_hex};
use crate::model::{EndReason, ModeKind, ModeRef, QuestionId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    SessionStart,
    ModeStart,
    SetChosen,
    Generate,
    Save,
    ModeEnd,
    Survey,
    SessionEnd,
}

impl EventKind {
    pub const ALL: [EventKind; 8] = [
        EventKind::SessionStart,
        EventKind::ModeStart,
        EventKind::SetChosen,
        EventKind::Generate,
        EventKind::Save,
        EventKind::ModeEnd,
        EventKind::Survey,
        EventKind::SessionEnd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::SessionStart => "SESSION_START",
            EventKind::ModeStart => "MODE_START",
            EventKind::SetChosen => "SET_CHOSEN",
            EventKind::Generate => "GENERATE",
            EventKind::Save => "SAVE",
            EventKind::ModeEnd => "MODE_END",
            EventKind::Survey => "SURVEY",
            EventKind::SessionEnd => "SESSION_END",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

/// Kind-specific fields. Only the fields relevant to the event kind are set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Payload {
    // SESSION_START
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator_seed: Option<u64>,
    // MODE_START (challenge)
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct_set: Option<u8>,
    // GENERATE, SAVE
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_hash: Option<String>,
    // SET_CHOSEN
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub set_index: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout: Option<bool>,
    // SURVEY
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_id: Option<QuestionId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating: Option<u8>,
    // MODE_END
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<EndReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TelemetryEvent {
    pub session_id: String,
    pub seq: u64,
    pub timestamp_ms: u64,
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<ModeRef>,
    #[serde(default)]
    pub payload: Payload,
}

impl TelemetryEvent {
    /// Checks the kind-specific schema.
    pub fn validate(&self) -> Result<(), String> {
        let p = &self.payload;
        let need = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(format!("{} requires {what}", self.kind.as_str()))
            }
        };
        let weights_ok = |w: &Option<Vec<f64>>, mode: Option<ModeRef>| match (w, mode) {
            (Some(w), Some(m)) => {
                w.len() == m.kind.source_count() && w.iter().all(|x| (0.0..=1.0).contains(x))
            }
            _ => false,
        };
        match self.kind {
            EventKind::SessionStart | EventKind::SessionEnd | EventKind::Survey => {
                need(self.mode.is_none(), "no mode")?
            }
            _ => need(self.mode.is_some(), "a mode")?,
        }
        if let Some(m) = self.mode {
            let level_ok = match m.kind {
                ModeKind::Challenge => matches!(m.level, Some(1..=3)),
                _ => m.level.is_none(),
            };
            need(level_ok, "a level exactly for challenge modes")?;
        }
        match self.kind {
            EventKind::SessionStart => need(
                p.seed.is_some()
                    && p.latent_dim.is_some()
                    && p.width.is_some()
                    && p.height.is_some()
                    && p.generator_seed.is_some(),
                "seed, latent_dim, width, height, generator_seed",
            ),
            EventKind::ModeStart => match self.mode.map(|m| m.kind) {
                Some(ModeKind::Challenge) => need(
                    weights_ok(&p.target_weights, self.mode)
                        && matches!(p.correct_set, Some(0..=2)),
                    "target_weights and correct_set",
                ),
                _ => Ok(()),
            },
            EventKind::SetChosen => need(
                matches!(p.set_index, Some(0..=2)) && p.correct.is_some() && p.timeout.is_some(),
                "set_index, correct, timeout",
            ),
            EventKind::Generate => need(
                weights_ok(&p.weights, self.mode)
                    && p.image_hash.as_deref().is_some_and(is_hash),
                "weights matching the mode's source count and image_hash",
            ),
            EventKind::Save => need(p.image_hash.as_deref().is_some_and(is_hash), "image_hash"),
            EventKind::ModeEnd => need(p.reason.is_some(), "reason"),
            EventKind::Survey => need(
                p.question_id.is_some() && matches!(p.rating, Some(1..=6)),
                "question_id and rating in 1..=6",
            ),
            EventKind::SessionEnd => Ok(()),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("sequence gap in session {session}: expected seq {expected}, got {found}")]
    SequenceGap {
        session: String,
        expected: u64,
        found: u64,
    },
    #[error("timestamp regression in session {session}: {found} < {last}")]
    TimestampRegression {
        session: String,
        last: u64,
        found: u64,
    },
    #[error("invalid event: {0}")]
    InvalidEvent(String),
    #[error("storage failure: {0}")]
    StorageFailure(#[source] io::Error),
    #[error("unknown session '{0}'")]
    UnknownSession(String),
    #[error("corrupt record in session {session} at line {line}: {reason}")]
    CorruptRecord {
        session: String,
        line: usize,
        reason: String,
    },
    #[error("unknown image hash '{0}'")]
    UnknownHash(String),
    #[error("invalid PNG: {0}")]
    InvalidPng(String),
    #[error("io failure: {0}")]
    IoFailure(#[source] io::Error),
    #[error("csv failure: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy)]
struct Head {
    next_seq: u64,
    last_timestamp_ms: u64,
}

#[derive(Debug)]
struct SessionLog {
    file: File,
    head: Head,
}

#[derive(Debug)]
pub struct TelemetryStore {
    root: PathBuf,
    logs: Mutex<HashMap<String, Arc<Mutex<SessionLog>>>>,
    tmp_counter: AtomicU64,
}

/// Column order of the CSV export.
pub const CSV_COLUMNS: [&str; 12] = [
    "session_id",
    "seq",
    "timestamp_ms",
    "kind",
    "mode",
    "level",
    "set_index",
    "weights",
    "image_hash",
    "question_id",
    "rating",
    "reason",
];

fn valid_session_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

impl TelemetryStore {
    /// Opens (creating if needed) a store rooted at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(root.join("sessions")).map_err(StoreError::IoFailure)?;
        fs::create_dir_all(root.join("images")).map_err(StoreError::IoFailure)?;
        Ok(Self {
            root,
            logs: Mutex::new(HashMap::new()),
            tmp_counter: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn session_path(&self, id: &str) -> PathBuf {
        self.root.join("sessions").join(format!("{id}.jsonl"))
    }

    fn image_path(&self, hash: &str) -> PathBuf {
        self.root.join("images").join(format!("{hash}.png"))
    }

    pub fn has_session(&self, id: &str) -> bool {
        valid_session_id(id) && self.session_path(id).exists()
    }

    /// Ids of every session on disk, sorted.
    pub fn session_ids(&self) -> Result<Vec<String>, StoreError> {
        let mut ids: Vec<String> = fs::read_dir(self.root.join("sessions"))
            .map_err(StoreError::IoFailure)?
            .filter_map(|entry| {
                let name = entry.ok()?.file_name().into_string().ok()?;
                name.strip_suffix(".jsonl").map(str::to_owned)
            })
            .collect();
        ids.sort();
        Ok(ids)
    }

    fn log_for(&self, id: &str) -> Result<Arc<Mutex<SessionLog>>, StoreError> {
        let mut logs = self.logs.lock().expect("store lock poisoned");
        if let Some(log) = logs.get(id) {
            return Ok(Arc::clone(log));
        }
        let path = self.session_path(id);
        let head = if path.exists() {
            self.repair_session(id)?;
            match self.load_session(id)?.last() {
                Some(last) => Head {
                    next_seq: last.seq + 1,
                    last_timestamp_ms: last.timestamp_ms,
                },
                None => Head {
                    next_seq: 0,
                    last_timestamp_ms: 0,
                },
            }
        } else {
            Head {
                next_seq: 0,
                last_timestamp_ms: 0,
            }
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(StoreError::StorageFailure)?;
        let log = Arc::new(Mutex::new(SessionLog { file, head }));
        logs.insert(id.to_owned(), Arc::clone(&log));
        Ok(log)
    }

    /// Durably appends `event`; returns its seq once it is on disk.
    pub fn append(&self, event: &TelemetryEvent) -> Result<u64, StoreError> {
        if !valid_session_id(&event.session_id) {
            return Err(StoreError::InvalidEvent(format!(
                "bad session id '{}'",
                event.session_id
            )));
        }
        event.validate().map_err(StoreError::InvalidEvent)?;
        let log = self.log_for(&event.session_id)?;
        let mut log = log.lock().expect("session log poisoned");
        if event.seq != log.head.next_seq {
            return Err(StoreError::SequenceGap {
                session: event.session_id.clone(),
                expected: log.head.next_seq,
                found: event.seq,
            });
        }
        if event.seq > 0 && event.timestamp_ms < log.head.last_timestamp_ms {
            return Err(StoreError::TimestampRegression {
                session: event.session_id.clone(),
                last: log.head.last_timestamp_ms,
                found: event.timestamp_ms,
            });
        }
        let mut line = serde_json::to_vec(event).expect("events always serialize");
        line.push(b'\n');
        log.file
            .write_all(&line)
            .and_then(|_| log.file.sync_data())
            .map_err(StoreError::StorageFailure)?;
        log.head = Head {
            next_seq: event.seq + 1,
            last_timestamp_ms: event.timestamp_ms,
        };
        Ok(event.seq)
    }

    /// Every event of a session in seq order. Any line that fails to parse
    /// or validate is reported with its 1-based line number.
    pub fn load_session(&self, id: &str) -> Result<Vec<TelemetryEvent>, StoreError> {
        if !valid_session_id(id) {
            return Err(StoreError::UnknownSession(id.to_owned()));
        }
        let file = match File::open(self.session_path(id)) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(StoreError::UnknownSession(id.to_owned()))
            }
            Err(e) => return Err(StoreError::IoFailure(e)),
        };
        let corrupt = |line: usize, reason: String| StoreError::CorruptRecord {
            session: id.to_owned(),
            line,
            reason,
        };
        let mut events: Vec<TelemetryEvent> = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(StoreError::IoFailure)?;
            let event: TelemetryEvent =
                serde_json::from_str(&line).map_err(|e| corrupt(line_no, e.to_string()))?;
            event.validate().map_err(|e| corrupt(line_no, e))?;
            if event.session_id != id {
                return Err(corrupt(line_no, "session id mismatch".into()));
            }
            if event.seq != events.len() as u64 {
                return Err(corrupt(line_no, format!("seq {} out of order", event.seq)));
            }
            events.push(event);
        }
        Ok(events)
    }

    /// Drops a torn trailing fragment (bytes after the last newline).
    /// Returns the number of bytes removed.
    pub fn repair_session(&self, id: &str) -> Result<usize, StoreError> {
        let path = self.session_path(id);
        let bytes = fs::read(&path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => StoreError::UnknownSession(id.to_owned()),
            _ => StoreError::IoFailure(e),
        })?;
        let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        let torn = bytes.len() - keep;
        if torn > 0 {
            log::warn!("session {id}: dropping {torn} torn bytes at end of log");
            let file = OpenOptions::new()
                .write(true)
                .open(&path)
                .map_err(StoreError::StorageFailure)?;
            file.set_len(keep as u64)
                .and_then(|_| file.sync_all())
                .map_err(StoreError::StorageFailure)?;
        }
        Ok(torn)
    }

    /// Stores PNG bytes under their SHA-256; identical bytes share one file.
    pub fn store_image(&self, png_bytes: &[u8]) -> Result<String, StoreError> {
        decode_png(png_bytes).map_err(|e| StoreError::InvalidPng(e.to_string()))?;
        let hash = sha256_hex(png_bytes);
        let path = self.image_path(&hash);
        if path.exists() {
            return Ok(hash);
        }
        let tmp = self.root.join("images").join(format!(
            ".{hash}.{}.{}.tmp",
            std::process::id(),
            self.tmp_counter.fetch_add(1, Ordering::Relaxed)
        ));
        let write = || -> io::Result<()> {
            let mut f = File::create(&tmp)?;
            f.write_all(png_bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, &path)
        };
        write().map_err(|e| {
            let _ = fs::remove_file(&tmp);
            StoreError::StorageFailure(e)
        })?;
        Ok(hash)
    }

    pub fn fetch_image(&self, hash: &str) -> Result<Vec<u8>, StoreError> {
        if !is_hash(hash) {
            return Err(StoreError::UnknownHash(hash.to_owned()));
        }
        fs::read(self.image_path(hash)).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => StoreError::UnknownHash(hash.to_owned()),
            _ => StoreError::IoFailure(e),
        })
    }

    pub fn has_image(&self, hash: &str) -> bool {
        is_hash(hash) && self.image_path(hash).exists()
    }

    /// Writes the events of `session_ids` (in the given order) as CSV.
    /// Returns the number of data rows.
    pub fn export_csv(&self, session_ids: &[String], destination: &Path) -> Result<usize, StoreError> {
        let mut all = Vec::new();
        for id in session_ids {
            all.extend(self.load_session(id)?);
        }
        let file = File::create(destination).map_err(StoreError::IoFailure)?;
        write_csv(&all, file)?;
        Ok(all.len())
    }
}

fn format_weights(w: &[f64]) -> String {
    w.iter()
        .map(|x| format!("{x:.2}"))
        .collect::<Vec<_>>()
        .join(";")
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Serializes events with the fixed column set. MODE_START rows of a
/// challenge carry the target in `weights` and the correct set in `set_index`.
pub fn write_csv<W: Write>(events: &[TelemetryEvent], out: W) -> Result<(), StoreError> {
    let csv_err = |e: csv::Error| StoreError::Csv(e.to_string());
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(CSV_COLUMNS).map_err(csv_err)?;
    for e in events {
        let p = &e.payload;
        let weights = p.weights.as_ref().or(p.target_weights.as_ref());
        let set_index = p.set_index.or(p.correct_set);
        w.write_record([
            e.session_id.clone(),
            e.seq.to_string(),
            e.timestamp_ms.to_string(),
            e.kind.as_str().to_owned(),
            opt(e.mode.map(|m| m.kind)),
            opt(e.mode.and_then(|m| m.level)),
            opt(set_index),
            weights.map(|w| format_weights(w)).unwrap_or_default(),
            p.image_hash.clone().unwrap_or_default(),
            opt(p.question_id.map(QuestionId::as_str)),
            opt(p.rating),
            opt(p.reason.map(EndReason::as_str)),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(StoreError::IoFailure)?;
    Ok(())
}

/// Parses a CSV export back into events. Fields the CSV does not carry
/// (session parameters, SET_CHOSEN flags other than correctness) are absent.
pub fn read_csv<R: io::Read>(input: R) -> Result<Vec<TelemetryEvent>, StoreError> {
    let mut r = csv::ReaderBuilder::new().from_reader(input);
    let headers = r.headers().map_err(|e| StoreError::Csv(e.to_string()))?.clone();
    if headers.iter().ne(CSV_COLUMNS) {
        return Err(StoreError::Csv("unexpected header row".into()));
    }
    let mut events = Vec::new();
    for (i, record) in r.records().enumerate() {
        let line = i + 2;
        let bad = |what: &str| StoreError::Csv(format!("line {line}: bad {what}"));
        let rec = record.map_err(|e| StoreError::Csv(e.to_string()))?;
        let field = |k: usize| rec.get(k).filter(|s| !s.is_empty());
        let kind = field(3).and_then(EventKind::parse).ok_or_else(|| bad("kind"))?;
        let mode = match field(4) {
            Some(m) => Some(ModeRef {
                kind: m.parse().map_err(|_| bad("mode"))?,
                level: field(5).map(str::parse).transpose().map_err(|_| bad("level"))?,
            }),
            None => None,
        };
        let weights = field(7)
            .map(|s| {
                s.split(';')
                    .map(str::parse::<f64>)
                    .collect::<Result<Vec<_>, _>>()
            })
            .transpose()
            .map_err(|_| bad("weights"))?;
        let set_index: Option<u8> = field(6).map(str::parse).transpose().map_err(|_| bad("set_index"))?;
        let mut payload = Payload {
            image_hash: field(8).map(str::to_owned),
            question_id: field(9).map(str::parse).transpose().map_err(|_| bad("question_id"))?,
            rating: field(10).map(str::parse).transpose().map_err(|_| bad("rating"))?,
            reason: field(11).map(str::parse).transpose().map_err(|_| bad("reason"))?,
            ..Payload::default()
        };
        if kind == EventKind::ModeStart {
            payload.target_weights = weights;
            payload.correct_set = set_index;
        } else {
            payload.weights = weights;
            payload.set_index = set_index;
        }
        events.push(TelemetryEvent {
            session_id: field(0).ok_or_else(|| bad("session_id"))?.to_owned(),
            seq: field(1).and_then(|s| s.parse().ok()).ok_or_else(|| bad("seq"))?,
            timestamp_ms: field(2).and_then(|s| s.parse().ok()).ok_or_else(|| bad("timestamp_ms"))?,
            kind,
            mode,
            payload,
        });
    }
    Ok(events)
}
