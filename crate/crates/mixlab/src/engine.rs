//! Session lifecycle and the mode state machines.
//!
//! Every mutating operation validates against the current state, builds the
//! telemetry event it implies, appends it durably, and only then applies it.
//! State is therefore a fold over the session's event log, which is also how
//! sessions are restored after a restart.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::{Arc, Mutex};

use mixlab_core::{blend, BlendError, BlendWeights, LatentVector, Renderer};
use serde::Serialize;

use crate::generator::{Backend, GeneratorError, RenderSpec, RendererCache};
use crate::imaging::encode_png;
use crate::materials::{derive_materials, MaterialsError, SessionMaterials, SourceImage};
use crate::model::{EndReason, ModeKind, ModeRef, Phase, QuestionId, PROTOCOL};
use crate::telemetry::{EventKind, Payload, StoreError, TelemetryEvent, TelemetryStore};

pub const PLAY_MS: u64 = 300_000;
pub const CHOICE_MS: u64 = 30_000;
pub const CHALLENGE_PLAY_MS: u64 = 180_000;

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("unknown session '{0}'")]
    UnknownSession(String),
    #[error("session '{0}' already exists")]
    SessionExists(String),
    #[error("session has ended")]
    SessionEnded,
    #[error("mode {requested} is out of order (next is {})", expected.map_or("none".to_owned(), |m| m.to_string()))]
    OutOfOrder {
        expected: Option<ModeRef>,
        requested: ModeRef,
    },
    #[error("a mode is already active")]
    ModeAlreadyActive,
    #[error("no mode is active")]
    NoActiveMode,
    #[error("invalid challenge level for {0}")]
    InvalidLevel(ModeKind),
    #[error("not in the set choice phase")]
    NotInChoicePhase,
    #[error("set index {0} is not in 0..=2")]
    InvalidSetIndex(i64),
    #[error("active mode is not in the playing phase")]
    ModeNotPlaying,
    #[error("deadline {deadline} passed (at {at})")]
    DeadlinePassed { deadline: u64, at: u64 },
    #[error("all blend weights are zero")]
    AllZeroWeights,
    #[error("expected {expected} weights, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("weight {index} = {value} is outside [0, 1] or off the 0.01 grid")]
    WeightOutOfRange { index: usize, value: f64 },
    #[error("saving is not available in this mode")]
    WrongMode,
    #[error("image '{0}' was not generated in this mode")]
    UnknownImage(String),
    #[error("image '{0}' is already saved")]
    DuplicateSave(String),
    #[error("all modes must be completed first")]
    ModesIncomplete,
    #[error("rating {0} is not in 1..=6")]
    OutOfRange(i64),
    #[error("question '{}' already answered", .0.as_str())]
    DuplicateAnswer(QuestionId),
    #[error("timestamp {at} is earlier than the last event at {last}")]
    ClockRegression { last: u64, at: u64 },
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Materials(#[from] MaterialsError),
    #[error("session log is inconsistent: {0}")]
    Replay(String),
}

impl EngineError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            EngineError::UnknownSession(_) => "UNKNOWN_SESSION",
            EngineError::SessionExists(_) => "SESSION_EXISTS",
            EngineError::SessionEnded => "SESSION_ENDED",
            EngineError::OutOfOrder { .. } => "OUT_OF_ORDER",
            EngineError::ModeAlreadyActive => "MODE_ALREADY_ACTIVE",
            EngineError::NoActiveMode => "NO_ACTIVE_MODE",
            EngineError::InvalidLevel(_) => "INVALID_LEVEL",
            EngineError::NotInChoicePhase => "NOT_IN_CHOICE_PHASE",
            EngineError::InvalidSetIndex(_) => "INVALID_SET_INDEX",
            EngineError::ModeNotPlaying => "MODE_NOT_PLAYING",
            EngineError::DeadlinePassed { .. } => "DEADLINE_PASSED",
            EngineError::AllZeroWeights => "ALL_ZERO_WEIGHTS",
            EngineError::LengthMismatch { .. } => "LENGTH_MISMATCH",
            EngineError::WeightOutOfRange { .. } => "WEIGHT_OUT_OF_RANGE",
            EngineError::WrongMode => "WRONG_MODE",
            EngineError::UnknownImage(_) => "UNKNOWN_IMAGE",
            EngineError::DuplicateSave(_) => "DUPLICATE_SAVE",
            EngineError::ModesIncomplete => "MODES_INCOMPLETE",
            EngineError::OutOfRange(_) => "OUT_OF_RANGE",
            EngineError::DuplicateAnswer(_) => "DUPLICATE_ANSWER",
            EngineError::ClockRegression { .. } => "CLOCK_REGRESSION",
            EngineError::Generator(GeneratorError::RemoteUnavailable(_)) => "REMOTE_UNAVAILABLE",
            EngineError::Generator(GeneratorError::MalformedRemoteResponse(_)) => {
                "MALFORMED_REMOTE_RESPONSE"
            }
            EngineError::Generator(GeneratorError::Timeout) => "REMOTE_TIMEOUT",
            EngineError::Generator(GeneratorError::Render(_)) => "RENDER_FAILED",
            EngineError::Store(StoreError::UnknownSession(_)) => "UNKNOWN_SESSION",
            EngineError::Store(StoreError::CorruptRecord { .. }) => "CORRUPT_SESSION",
            EngineError::Store(_) => "STORAGE_FAILURE",
            EngineError::Materials(_) => "MATERIALS_FAILED",
            EngineError::Replay(_) => "CORRUPT_SESSION",
        }
    }
}

impl From<BlendError> for EngineError {
    fn from(e: BlendError) -> Self {
        match e {
            BlendError::AllZeroWeights => EngineError::AllZeroWeights,
            BlendError::LengthMismatch { expected, found } => {
                EngineError::LengthMismatch { expected, found }
            }
            BlendError::WeightOutOfRange { index, value } => {
                EngineError::WeightOutOfRange { index, value }
            }
            BlendError::InvalidLatent(what) => EngineError::Replay(what.to_owned()),
        }
    }
}

/// Renderer geometry for new sessions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EngineConfig {
    pub latent_dim: usize,
    pub width: u32,
    pub height: u32,
    pub generator_seed: u64,
}

/// Wave-table seed used unless configured otherwise.
pub const DEFAULT_GENERATOR_SEED: u64 = 1;

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            latent_dim: mixlab_core::DEFAULT_LATENT_DIM,
            width: mixlab_core::DEFAULT_IMAGE_SIZE,
            height: mixlab_core::DEFAULT_IMAGE_SIZE,
            generator_seed: DEFAULT_GENERATOR_SEED,
        }
    }
}

impl EngineConfig {
    fn spec(&self) -> RenderSpec {
        RenderSpec {
            latent_dim: self.latent_dim,
            width: self.width,
            height: self.height,
            generator_seed: self.generator_seed,
        }
    }
}

#[derive(Debug, Clone)]
struct ModeState {
    mode: ModeRef,
    phase: Phase,
    started_at: u64,
    phase_deadline: u64,
    chosen_set: Option<u8>,
    choice_timed_out: bool,
    generation_count: u64,
    generated: HashSet<String>,
    saved: Vec<String>,
    last_weights: BlendWeights,
    end_reason: Option<EndReason>,
}

#[derive(Debug)]
struct Session {
    id: String,
    seed: u64,
    created_at: u64,
    materials: Arc<SessionMaterials>,
    renderer: Arc<Renderer>,
    next_seq: u64,
    last_ts: u64,
    current: Option<ModeState>,
    completed: Vec<ModeRef>,
    survey: BTreeMap<QuestionId, u8>,
    ended: bool,
}

/// Source thumbnail reference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SourceView {
    pub id: String,
    pub label: String,
    pub thumbnail_hash: String,
}

impl From<&SourceImage> for SourceView {
    fn from(s: &SourceImage) -> Self {
        Self {
            id: s.id.clone(),
            label: s.label.clone(),
            thumbnail_hash: s.thumbnail_hash.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeView {
    pub mode: ModeRef,
    pub phase: Phase,
    pub started_at_ms: u64,
    pub phase_deadline_ms: u64,
    pub chosen_set: Option<u8>,
    pub choice_timed_out: bool,
    pub generation_count: u64,
    pub saved_image_hashes: Vec<String>,
    pub last_weights: Vec<f64>,
    pub end_reason: Option<EndReason>,
    /// Sliders currently in play (the chosen set in a challenge).
    pub sources: Vec<SourceView>,
    /// Candidate sets while a challenge is active.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub candidate_sets: Option<Vec<Vec<SourceView>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_image_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionView {
    pub session_id: String,
    pub seed: u64,
    pub created_at_ms: u64,
    pub current_mode: Option<ModeView>,
    pub completed_modes: Vec<ModeRef>,
    pub next_mode: Option<ModeRef>,
    pub survey: BTreeMap<QuestionId, u8>,
    pub ended: bool,
    pub next_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GenerateOutcome {
    pub image_hash: String,
    pub seq: u64,
}

/// Correct set and target weights of a challenge level. Only simulated
/// players and tests use this.
#[derive(Debug, Clone, PartialEq)]
pub struct ChallengeOracle {
    pub correct_set: u8,
    pub target_weights: BlendWeights,
    pub target_image_hash: String,
}

impl ModeState {
    fn is_active(&self) -> bool {
        self.phase != Phase::Ended
    }
}

impl Session {
    fn check_clock(&self, at: u64) -> Result<(), EngineError> {
        if at < self.last_ts {
            return Err(EngineError::ClockRegression {
                last: self.last_ts,
                at,
            });
        }
        Ok(())
    }

    fn check_open(&self, at: u64) -> Result<(), EngineError> {
        if self.ended {
            return Err(EngineError::SessionEnded);
        }
        self.check_clock(at)
    }

    fn active(&self) -> Result<&ModeState, EngineError> {
        self.current
            .as_ref()
            .filter(|m| m.is_active())
            .ok_or(EngineError::NoActiveMode)
    }

    fn playing(&self, at: u64) -> Result<&ModeState, EngineError> {
        let mode = self.active()?;
        if mode.phase != Phase::Playing {
            return Err(EngineError::ModeNotPlaying);
        }
        if at > mode.phase_deadline {
            return Err(EngineError::DeadlinePassed {
                deadline: mode.phase_deadline,
                at,
            });
        }
        Ok(mode)
    }

    fn event(&self, kind: EventKind, at: u64, mode: Option<ModeRef>, payload: Payload) -> TelemetryEvent {
        TelemetryEvent {
            session_id: self.id.clone(),
            seq: self.next_seq,
            timestamp_ms: at,
            kind,
            mode,
            payload,
        }
    }

    fn active_sources(&self, mode: &ModeState) -> &[SourceImage] {
        match mode.mode.kind {
            ModeKind::Challenge => {
                let level = self
                    .materials
                    .level(mode.mode.level.unwrap_or(1))
                    .expect("levels 1..=3 exist");
                let set = mode.chosen_set.map_or(0, usize::from);
                &level.sets[set]
            }
            _ => &self.materials.creatures,
        }
    }

    /// Folds one event into the state. Events reaching here have passed
    /// validation, either just now or when they were first written.
    fn apply(&mut self, e: &TelemetryEvent) -> Result<(), EngineError> {
        let bad = |what: &str| EngineError::Replay(format!("seq {}: {what}", e.seq));
        if e.seq != self.next_seq {
            return Err(bad("sequence mismatch"));
        }
        let p = &e.payload;
        match e.kind {
            EventKind::SessionStart => return Err(bad("repeated SESSION_START")),
            EventKind::ModeStart => {
                let mode = e.mode.ok_or_else(|| bad("mode missing"))?;
                let (phase, deadline) = match mode.kind {
                    ModeKind::Challenge => (Phase::AwaitingChoice, e.timestamp_ms + CHOICE_MS),
                    _ => (Phase::Playing, e.timestamp_ms + PLAY_MS),
                };
                self.current = Some(ModeState {
                    mode,
                    phase,
                    started_at: e.timestamp_ms,
                    phase_deadline: deadline,
                    chosen_set: None,
                    choice_timed_out: false,
                    generation_count: 0,
                    generated: HashSet::new(),
                    saved: Vec::new(),
                    last_weights: BlendWeights::zeros(mode.kind.source_count()),
                    end_reason: None,
                });
            }
            EventKind::SetChosen => {
                let m = self.current.as_mut().ok_or_else(|| bad("no mode"))?;
                m.chosen_set = p.set_index;
                m.choice_timed_out = p.timeout.unwrap_or(false);
                m.phase = Phase::Playing;
                m.phase_deadline = e.timestamp_ms + CHALLENGE_PLAY_MS;
            }
            EventKind::Generate => {
                let m = self.current.as_mut().ok_or_else(|| bad("no mode"))?;
                let weights = p.weights.as_deref().ok_or_else(|| bad("weights missing"))?;
                m.last_weights = BlendWeights::from_values(weights)?;
                m.generation_count += 1;
                m.generated
                    .insert(p.image_hash.clone().ok_or_else(|| bad("hash missing"))?);
            }
            EventKind::Save => {
                let m = self.current.as_mut().ok_or_else(|| bad("no mode"))?;
                m.saved.push(p.image_hash.clone().ok_or_else(|| bad("hash missing"))?);
            }
            EventKind::ModeEnd => {
                let m = self.current.as_mut().ok_or_else(|| bad("no mode"))?;
                m.phase = Phase::Ended;
                m.end_reason = p.reason;
                self.completed.push(m.mode);
            }
            EventKind::Survey => {
                let q = p.question_id.ok_or_else(|| bad("question missing"))?;
                self.survey.insert(q, p.rating.ok_or_else(|| bad("rating missing"))?);
            }
            EventKind::SessionEnd => self.ended = true,
        }
        self.next_seq += 1;
        self.last_ts = e.timestamp_ms;
        Ok(())
    }

    fn view(&self) -> SessionView {
        SessionView {
            session_id: self.id.clone(),
            seed: self.seed,
            created_at_ms: self.created_at,
            current_mode: self.current.as_ref().map(|m| self.mode_view(m)),
            completed_modes: self.completed.clone(),
            next_mode: PROTOCOL.get(self.completed.len()).copied(),
            survey: self.survey.clone(),
            ended: self.ended,
            next_seq: self.next_seq,
        }
    }

    fn mode_view(&self, m: &ModeState) -> ModeView {
        let challenge = (m.mode.kind == ModeKind::Challenge)
            .then(|| self.materials.level(m.mode.level.unwrap_or(1)))
            .flatten();
        let sources = match (challenge, m.chosen_set) {
            (Some(_), None) => Vec::new(),
            _ => self.active_sources(m).iter().map(SourceView::from).collect(),
        };
        ModeView {
            mode: m.mode,
            phase: m.phase,
            started_at_ms: m.started_at,
            phase_deadline_ms: m.phase_deadline,
            chosen_set: m.chosen_set,
            choice_timed_out: m.choice_timed_out,
            generation_count: m.generation_count,
            saved_image_hashes: m.saved.clone(),
            last_weights: m.last_weights.values(),
            end_reason: m.end_reason,
            sources,
            candidate_sets: challenge.map(|l| {
                l.sets
                    .iter()
                    .map(|set| set.iter().map(SourceView::from).collect())
                    .collect()
            }),
            target_image_hash: challenge.map(|l| l.target_image_hash.clone()),
        }
    }
}

/// The game engine. Operations on one session are serialized; distinct
/// sessions run in parallel.
pub struct Engine {
    store: Arc<TelemetryStore>,
    config: EngineConfig,
    backend: Backend,
    renderers: RendererCache,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("root", &self.store.root())
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl Engine {
    pub fn new(store: Arc<TelemetryStore>, config: EngineConfig, backend: Backend) -> Self {
        Self {
            store,
            config,
            backend,
            renderers: RendererCache::default(),
            sessions: Mutex::new(HashMap::new()),
        }
    }

    pub fn store(&self) -> &Arc<TelemetryStore> {
        &self.store
    }

    pub fn config(&self) -> EngineConfig {
        self.config
    }

    /// True if the session exists in memory or on disk.
    pub fn session_exists(&self, id: &str) -> bool {
        self.sessions.lock().expect("engine lock poisoned").contains_key(id)
            || self.store.has_session(id)
    }

    fn handle(&self, id: &str) -> Result<Arc<Mutex<Session>>, EngineError> {
        let mut sessions = self.sessions.lock().expect("engine lock poisoned");
        if let Some(s) = sessions.get(id) {
            return Ok(Arc::clone(s));
        }
        if !self.store.has_session(id) {
            return Err(EngineError::UnknownSession(id.to_owned()));
        }
        let session = Arc::new(Mutex::new(self.replay(id)?));
        sessions.insert(id.to_owned(), Arc::clone(&session));
        Ok(session)
    }

    fn with_session<T>(
        &self,
        id: &str,
        f: impl FnOnce(&mut Session) -> Result<T, EngineError>,
    ) -> Result<T, EngineError> {
        let handle = self.handle(id)?;
        let mut session = handle.lock().expect("session lock poisoned");
        f(&mut session)
    }

    /// Durably appends `event` and folds it into `session`.
    fn commit(&self, session: &mut Session, event: TelemetryEvent) -> Result<u64, EngineError> {
        let seq = self.store.append(&event)?;
        session.apply(&event)?;
        Ok(seq)
    }

    fn build_session(
        &self,
        id: &str,
        seed: u64,
        created_at: u64,
        spec: RenderSpec,
    ) -> Result<Session, EngineError> {
        let renderer = self.renderers.get(spec).map_err(GeneratorError::from)?;
        let (materials, images) = derive_materials(seed, &renderer)?;
        for image in &images {
            self.store.store_image(&image.png)?;
        }
        Ok(Session {
            id: id.to_owned(),
            seed,
            created_at,
            materials: Arc::new(materials),
            renderer,
            next_seq: 0,
            last_ts: created_at,
            current: None,
            completed: Vec::new(),
            survey: BTreeMap::new(),
            ended: false,
        })
    }

    fn replay(&self, id: &str) -> Result<Session, EngineError> {
        self.store.repair_session(id)?;
        let events = self.store.load_session(id)?;
        let first = events
            .first()
            .filter(|e| e.kind == EventKind::SessionStart)
            .ok_or_else(|| EngineError::Replay("log does not open with SESSION_START".into()))?;
        let p = &first.payload;
        let spec = RenderSpec {
            latent_dim: p.latent_dim.unwrap_or(self.config.latent_dim),
            width: p.width.unwrap_or(self.config.width),
            height: p.height.unwrap_or(self.config.height),
            generator_seed: p.generator_seed.unwrap_or(self.config.generator_seed),
        };
        let mut session = self.build_session(id, p.seed.unwrap_or(0), first.timestamp_ms, spec)?;
        session.next_seq = 1;
        for e in &events[1..] {
            session.apply(e)?;
        }
        log::info!("restored session {id} from {} events", events.len());
        Ok(session)
    }

    /// Creates a session whose sources and challenge levels derive from `seed`.
    pub fn start_session(&self, id: &str, seed: u64, at: u64) -> Result<SessionView, EngineError> {
        if self.session_exists(id) {
            return Err(EngineError::SessionExists(id.to_owned()));
        }
        let spec = self.config.spec();
        let mut session = self.build_session(id, seed, at, spec)?;
        let mut sessions = self.sessions.lock().expect("engine lock poisoned");
        if sessions.contains_key(id) || self.store.has_session(id) {
            return Err(EngineError::SessionExists(id.to_owned()));
        }
        let event = session.event(
            EventKind::SessionStart,
            at,
            None,
            Payload {
                seed: Some(seed),
                latent_dim: Some(spec.latent_dim),
                width: Some(spec.width),
                height: Some(spec.height),
                generator_seed: Some(spec.generator_seed),
                ..Payload::default()
            },
        );
        self.store.append(&event)?;
        session.next_seq = 1;
        let view = session.view();
        sessions.insert(id.to_owned(), Arc::new(Mutex::new(session)));
        Ok(view)
    }

    pub fn session(&self, id: &str) -> Result<SessionView, EngineError> {
        self.with_session(id, |s| Ok(s.view()))
    }

    pub fn start_mode(&self, id: &str, mode: ModeRef, at: u64) -> Result<ModeView, EngineError> {
        self.with_session(id, |s| {
            s.check_open(at)?;
            let level_ok = match mode.kind {
                ModeKind::Challenge => matches!(mode.level, Some(1..=3)),
                _ => mode.level.is_none(),
            };
            if !level_ok {
                return Err(EngineError::InvalidLevel(mode.kind));
            }
            if s.current.as_ref().is_some_and(ModeState::is_active) {
                return Err(EngineError::ModeAlreadyActive);
            }
            let expected = PROTOCOL.get(s.completed.len()).copied();
            if expected != Some(mode) {
                return Err(EngineError::OutOfOrder {
                    expected,
                    requested: mode,
                });
            }
            let mut payload = Payload::default();
            if let Some(level) = mode.level {
                let l = s.materials.level(level).expect("levels 1..=3 exist");
                payload.target_weights = Some(l.target_weights.values());
                payload.correct_set = Some(l.correct_set);
            }
            let event = s.event(EventKind::ModeStart, at, Some(mode), payload);
            self.commit(s, event)?;
            Ok(s.mode_view(s.current.as_ref().expect("mode just started")))
        })
    }

    pub fn choose_set(&self, id: &str, set_index: i64, at: u64) -> Result<ModeView, EngineError> {
        self.with_session(id, |s| {
            s.check_open(at)?;
            let m = s.active()?;
            if m.phase != Phase::AwaitingChoice {
                // The lapsed choice was already locked in by the timer.
                if m.choice_timed_out {
                    return Err(EngineError::DeadlinePassed {
                        deadline: m.started_at + CHOICE_MS,
                        at,
                    });
                }
                return Err(EngineError::NotInChoicePhase);
            }
            if !(0..=2).contains(&set_index) {
                return Err(EngineError::InvalidSetIndex(set_index));
            }
            if at > m.phase_deadline {
                return Err(EngineError::DeadlinePassed {
                    deadline: m.phase_deadline,
                    at,
                });
            }
            let event = set_chosen_event(s, set_index as u8, false, at);
            self.commit(s, event)?;
            Ok(s.mode_view(s.current.as_ref().expect("mode is active")))
        })
    }

    /// Blends the active sources with `weights`, renders, stores the image,
    /// and logs the generation.
    pub fn generate(&self, id: &str, weights: &[f64], at: u64) -> Result<GenerateOutcome, EngineError> {
        self.with_session(id, |s| {
            s.check_open(at)?;
            let m = s.playing(at)?;
            let count = m.mode.kind.source_count();
            if weights.len() != count {
                return Err(EngineError::LengthMismatch {
                    expected: count,
                    found: weights.len(),
                });
            }
            let w = BlendWeights::from_values(weights)?;
            if w.is_all_zero() {
                return Err(EngineError::AllZeroWeights);
            }
            let latents: Vec<LatentVector> =
                s.active_sources(m).iter().map(|src| src.latent.clone()).collect();
            let latent = blend(&latents, &w)?;
            let image = self.backend.generate(&s.renderer, &latent)?;
            let image_hash = self.store.store_image(&encode_png(&image))?;
            let mode = m.mode;
            let event = s.event(
                EventKind::Generate,
                at,
                Some(mode),
                Payload {
                    weights: Some(w.values()),
                    image_hash: Some(image_hash.clone()),
                    ..Payload::default()
                },
            );
            let seq = self.commit(s, event)?;
            Ok(GenerateOutcome { image_hash, seq })
        })
    }

    pub fn save_image(&self, id: &str, image_hash: &str, at: u64) -> Result<ModeView, EngineError> {
        self.with_session(id, |s| {
            s.check_open(at)?;
            let m = s.active()?;
            if m.mode.kind == ModeKind::Challenge {
                return Err(EngineError::WrongMode);
            }
            let m = s.playing(at)?;
            if !m.generated.contains(image_hash) {
                return Err(EngineError::UnknownImage(image_hash.to_owned()));
            }
            if m.saved.iter().any(|h| h == image_hash) {
                return Err(EngineError::DuplicateSave(image_hash.to_owned()));
            }
            let event = s.event(
                EventKind::Save,
                at,
                Some(m.mode),
                Payload {
                    image_hash: Some(image_hash.to_owned()),
                    ..Payload::default()
                },
            );
            self.commit(s, event)?;
            Ok(s.mode_view(s.current.as_ref().expect("mode is active")))
        })
    }

    /// Ends the playing phase early (the player is done).
    pub fn finish_mode(&self, id: &str, at: u64) -> Result<ModeView, EngineError> {
        self.with_session(id, |s| {
            s.check_open(at)?;
            let mode = s.playing(at)?.mode;
            let event = mode_end_event(s, mode, EndReason::Finished, at);
            self.commit(s, event)?;
            Ok(s.mode_view(s.current.as_ref().expect("mode exists")))
        })
    }

    /// Applies any deadline that has passed by `now`. A lapsed choice locks
    /// set 0 with the timeout flag; a lapsed play phase ends the mode. Events
    /// are stamped with the deadline they enforce.
    pub fn expire_timers(&self, id: &str, now: u64) -> Result<SessionView, EngineError> {
        self.with_session(id, |s| {
            s.check_clock(now)?;
            if let Some(m) = s.current.as_ref().filter(|m| m.is_active()) {
                if m.phase == Phase::AwaitingChoice && now > m.phase_deadline {
                    let event = set_chosen_event(s, 0, true, m.phase_deadline);
                    self.commit(s, event)?;
                }
            }
            if let Some(m) = s.current.as_ref().filter(|m| m.is_active()) {
                if m.phase == Phase::Playing && now > m.phase_deadline {
                    let event = mode_end_event(s, m.mode, EndReason::Timeout, m.phase_deadline);
                    self.commit(s, event)?;
                }
            }
            Ok(s.view())
        })
    }

    pub fn submit_survey(
        &self,
        id: &str,
        question: QuestionId,
        rating: i64,
        at: u64,
    ) -> Result<SessionView, EngineError> {
        self.with_session(id, |s| {
            s.check_open(at)?;
            if s.completed.len() < PROTOCOL.len() {
                return Err(EngineError::ModesIncomplete);
            }
            if !(1..=6).contains(&rating) {
                return Err(EngineError::OutOfRange(rating));
            }
            if s.survey.contains_key(&question) {
                return Err(EngineError::DuplicateAnswer(question));
            }
            let event = s.event(
                EventKind::Survey,
                at,
                None,
                Payload {
                    question_id: Some(question),
                    rating: Some(rating as u8),
                    ..Payload::default()
                },
            );
            self.commit(s, event)?;
            Ok(s.view())
        })
    }

    pub fn end_session(&self, id: &str, at: u64) -> Result<SessionView, EngineError> {
        self.with_session(id, |s| {
            s.check_open(at)?;
            if s.completed.len() < PROTOCOL.len() {
                return Err(EngineError::ModesIncomplete);
            }
            let event = s.event(EventKind::SessionEnd, at, None, Payload::default());
            self.commit(s, event)?;
            Ok(s.view())
        })
    }

    pub fn challenge_oracle(&self, id: &str, level: u8) -> Result<ChallengeOracle, EngineError> {
        self.with_session(id, |s| {
            let l = s
                .materials
                .level(level)
                .ok_or(EngineError::InvalidLevel(ModeKind::Challenge))?;
            Ok(ChallengeOracle {
                correct_set: l.correct_set,
                target_weights: l.target_weights.clone(),
                target_image_hash: l.target_image_hash.clone(),
            })
        })
    }

    pub fn materials(&self, id: &str) -> Result<Arc<SessionMaterials>, EngineError> {
        self.with_session(id, |s| Ok(Arc::clone(&s.materials)))
    }

    /// Ids of sessions with an unexpired active mode in memory.
    pub fn active_session_ids(&self) -> Vec<String> {
        let sessions: Vec<(String, Arc<Mutex<Session>>)> = self
            .sessions
            .lock()
            .expect("engine lock poisoned")
            .iter()
            .map(|(k, v)| (k.clone(), Arc::clone(v)))
            .collect();
        sessions
            .into_iter()
            .filter(|(_, s)| {
                let s = s.lock().expect("session lock poisoned");
                !s.ended && s.current.as_ref().is_some_and(ModeState::is_active)
            })
            .map(|(id, _)| id)
            .collect()
    }

    pub fn events(&self, id: &str) -> Result<Vec<TelemetryEvent>, EngineError> {
        // Take the session lock so the read sees a whole number of events.
        let handle = self.handle(id)?;
        let _guard = handle.lock().expect("session lock poisoned");
        Ok(self.store.load_session(id)?)
    }
}

fn set_chosen_event(s: &Session, set_index: u8, timeout: bool, at: u64) -> TelemetryEvent {
    let m = s.current.as_ref().expect("choice needs an active mode");
    let level = s
        .materials
        .level(m.mode.level.unwrap_or(1))
        .expect("levels 1..=3 exist");
    s.event(
        EventKind::SetChosen,
        at,
        Some(m.mode),
        Payload {
            set_index: Some(set_index),
            correct: Some(set_index == level.correct_set),
            timeout: Some(timeout),
            ..Payload::default()
        },
    )
}

fn mode_end_event(s: &Session, mode: ModeRef, reason: EndReason, at: u64) -> TelemetryEvent {
    s.event(
        EventKind::ModeEnd,
        at,
        Some(mode),
        Payload {
            reason: Some(reason),
            ..Payload::default()
        },
    )
}
