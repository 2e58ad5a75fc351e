//! Scripted players that drive the engine through its public operations on
//! a virtual clock.

use std::str::FromStr;

use mixlab_core::rng::{mix_seed, SeededRng};
use rayon::prelude::*;

use crate::clock::{Clock, VirtualClock};
use crate::engine::{ChallengeOracle, Engine, EngineError, CHALLENGE_PLAY_MS, PLAY_MS};
use crate::model::{ModeKind, ModeRef, QuestionId, PROTOCOL};

/// Virtual start time of every simulated session (2020-09-13T12:26:40Z).
pub const SIM_EPOCH_MS: u64 = 1_600_000_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    Random,
    Greedy,
    Explorative,
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(PolicyKind::Random),
            "greedy" => Ok(PolicyKind::Greedy),
            "explorative" => Ok(PolicyKind::Explorative),
            other => Err(format!("unknown policy '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlayerPolicy {
    pub kind: PolicyKind,
    pub step_cap: f64,
    pub worsening_bound: u32,
    pub inter_action_ms: u64,
    pub rng_seed: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("bad policy: {0}")]
    BadPolicy(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

impl PlayerPolicy {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.step_cap > 0.0 && self.step_cap <= 1.0) {
            return Err(SimError::BadPolicy(format!(
                "step cap {} is not in (0, 1]",
                self.step_cap
            )));
        }
        if self.cap_hundredths() == 0 {
            return Err(SimError::BadPolicy("step cap is below the 0.01 slider quantum".into()));
        }
        if self.inter_action_ms == 0 {
            return Err(SimError::BadPolicy("inter-action time must be positive".into()));
        }
        Ok(())
    }

    fn cap_hundredths(&self) -> i64 {
        (self.step_cap * 100.0 + 1e-9).floor() as i64
    }
}

/// One player bound to a session, with its own virtual clock.
pub struct Agent<'a> {
    engine: &'a Engine,
    session_id: String,
    clock: VirtualClock,
}

impl<'a> Agent<'a> {
    pub fn new(engine: &'a Engine, session_id: &str, start_ms: u64) -> Self {
        Self {
            engine,
            session_id: session_id.to_owned(),
            clock: VirtualClock::new(start_ms),
        }
    }

    pub fn now(&self) -> u64 {
        self.clock.now_ms()
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    fn values(h: &[i64]) -> Vec<f64> {
        h.iter().map(|&x| x as f64 / 100.0).collect()
    }

    /// Waits one action interval; false once that would pass `deadline`.
    fn tick(&self, policy: &PlayerPolicy, deadline: u64) -> bool {
        if self.now() + policy.inter_action_ms > deadline {
            return false;
        }
        self.clock.advance(policy.inter_action_ms);
        true
    }

    /// Lets the deadline lapse and has the engine close the mode.
    fn run_out(&self, deadline: u64) -> Result<(), SimError> {
        self.clock.set(self.now().max(deadline + 1));
        self.engine.expire_timers(&self.session_id, self.now())?;
        Ok(())
    }

    /// Perturbs every slider by a uniform amount within the step cap and
    /// generates, until the deadline. Saves each new image with probability
    /// one half when the mode allows saving.
    pub fn run_random(&self, mode: ModeRef, policy: &PlayerPolicy) -> Result<(), SimError> {
        policy.validate()?;
        let mut rng = SeededRng::new(policy.rng_seed);
        let view = self.engine.start_mode(&self.session_id, mode, self.now())?;
        let mut deadline = view.phase_deadline_ms;
        if mode.kind == ModeKind::Challenge {
            self.tick(policy, deadline);
            let set = rng.below(3) as i64;
            deadline = self
                .engine
                .choose_set(&self.session_id, set, self.now())?
                .phase_deadline_ms;
        }
        let cap = policy.cap_hundredths();
        let n = mode.kind.source_count();
        let mut w = vec![0i64; n];
        let saves = mode.kind != ModeKind::Challenge;
        while self.tick(policy, deadline) {
            for x in w.iter_mut() {
                *x = (*x + rng.range_inclusive(-cap, cap)).clamp(0, 100);
            }
            if w.iter().all(|&x| x == 0) {
                w[rng.below(n as u64) as usize] = cap;
            }
            let out = self.engine.generate(&self.session_id, &Self::values(&w), self.now())?;
            if saves && rng.chance(0.5) {
                match self.engine.save_image(&self.session_id, &out.image_hash, self.now()) {
                    Ok(_) | Err(EngineError::DuplicateSave(_)) => {}
                    Err(e) => return Err(e.into()),
                }
            }
        }
        self.run_out(deadline)
    }

    /// Coordinate descent toward the target: the slider with the largest gap
    /// (lowest index on ties) moves by `min(step_cap, gap)`.
    pub fn run_greedy(
        &self,
        level: u8,
        oracle: &ChallengeOracle,
        policy: &PlayerPolicy,
    ) -> Result<(), SimError> {
        self.run_challenge(level, oracle, policy, 0)
    }

    /// Greedy moves interleaved with seeded moves away from the target,
    /// never more than `worsening_bound` in a row.
    pub fn run_explorative(
        &self,
        level: u8,
        oracle: &ChallengeOracle,
        policy: &PlayerPolicy,
    ) -> Result<(), SimError> {
        self.run_challenge(level, oracle, policy, policy.worsening_bound)
    }

    fn run_challenge(
        &self,
        level: u8,
        oracle: &ChallengeOracle,
        policy: &PlayerPolicy,
        worsening_bound: u32,
    ) -> Result<(), SimError> {
        const WORSEN_PROBABILITY: f64 = 0.3;
        policy.validate()?;
        let mut rng = SeededRng::new(policy.rng_seed);
        let view = self
            .engine
            .start_mode(&self.session_id, ModeRef::challenge(level), self.now())?;
        self.tick(policy, view.phase_deadline_ms);
        let deadline = self
            .engine
            .choose_set(&self.session_id, i64::from(oracle.correct_set), self.now())?
            .phase_deadline_ms;
        let target: Vec<i64> = oracle.target_weights.hundredths().iter().map(|&h| i64::from(h)).collect();
        let cap = policy.cap_hundredths();
        let mut w = vec![0i64; target.len()];
        let mut run = 0;
        while self.tick(policy, deadline) {
            let mut moved = false;
            if worsening_bound > 0 && run < worsening_bound && rng.chance(WORSEN_PROBABILITY) {
                let i = rng.below(w.len() as u64) as usize;
                let up = if w[i] == target[i] { w[i] < 100 } else { w[i] > target[i] };
                let step = cap.min(if up { 100 - w[i] } else { w[i] });
                let mut next = w.clone();
                next[i] += if up { step } else { -step };
                if step > 0 && next.iter().any(|&x| x > 0) {
                    w = next;
                    run += 1;
                    moved = true;
                }
            }
            if !moved {
                let (i, gap) = w
                    .iter()
                    .zip(&target)
                    .map(|(a, b)| (b - a).abs())
                    .enumerate()
                    .fold((0, -1), |best, (i, g)| if g > best.1 { (i, g) } else { best });
                let step = cap.min(gap);
                w[i] += if target[i] > w[i] { step } else { -step };
                run = 0;
            }
            self.engine.generate(&self.session_id, &Self::values(&w), self.now())?;
            if w == target {
                self.engine.finish_mode(&self.session_id, self.now())?;
                return Ok(());
            }
        }
        self.run_out(deadline)
    }
}

/// Which policy plays which mode in a cohort run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CohortConfig {
    pub sessions: usize,
    pub seed: u64,
    pub free_policy: PolicyKind,
    pub free_step_cap: f64,
    pub challenge_policy: PolicyKind,
    pub challenge_step_cap: f64,
    pub worsening_bound: u32,
    pub free_inter_action_ms: u64,
    pub challenge_inter_action_ms: u64,
    pub id_prefix: &'static str,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            sessions: 8,
            seed: 1,
            free_policy: PolicyKind::Random,
            free_step_cap: 1.0,
            challenge_policy: PolicyKind::Greedy,
            challenge_step_cap: 0.05,
            worsening_bound: 2,
            free_inter_action_ms: 5_000,
            challenge_inter_action_ms: 2_000,
            id_prefix: "sim",
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.sessions == 0 {
            return Err(SimError::BadPolicy("cohort size must be at least 1".into()));
        }
        if self.free_policy != PolicyKind::Random {
            return Err(SimError::BadPolicy(
                "free-play modes support only the random policy (no target to converge to)".into(),
            ));
        }
        for (cap, ms) in [
            (self.free_step_cap, self.free_inter_action_ms),
            (self.challenge_step_cap, self.challenge_inter_action_ms),
        ] {
            PlayerPolicy {
                kind: PolicyKind::Random,
                step_cap: cap,
                worsening_bound: self.worsening_bound,
                inter_action_ms: ms,
                rng_seed: 0,
            }
            .validate()?;
        }
        Ok(())
    }

    fn policy(&self, session_seed: u64, stream: u64, challenge: bool) -> PlayerPolicy {
        let (kind, step_cap, inter_action_ms) = if challenge {
            (self.challenge_policy, self.challenge_step_cap, self.challenge_inter_action_ms)
        } else {
            (self.free_policy, self.free_step_cap, self.free_inter_action_ms)
        };
        PlayerPolicy {
            kind,
            step_cap,
            worsening_bound: self.worsening_bound,
            inter_action_ms,
            rng_seed: mix_seed(session_seed, 100 + stream),
        }
    }
}

/// Plays one full protocol: every mode in order, the survey, then the end
/// of the session.
pub fn play_session(engine: &Engine, id: &str, seed: u64, cfg: &CohortConfig) -> Result<(), SimError> {
    engine.start_session(id, seed, SIM_EPOCH_MS)?;
    let agent = Agent::new(engine, id, SIM_EPOCH_MS);
    for (stream, mode) in PROTOCOL.iter().enumerate() {
        let challenge = mode.kind == ModeKind::Challenge;
        let policy = cfg.policy(seed, stream as u64, challenge);
        match (mode.level, policy.kind) {
            (Some(level), PolicyKind::Greedy) => {
                agent.run_greedy(level, &engine.challenge_oracle(id, level)?, &policy)?
            }
            (Some(level), PolicyKind::Explorative) => {
                agent.run_explorative(level, &engine.challenge_oracle(id, level)?, &policy)?
            }
            _ => agent.run_random(*mode, &policy)?,
        }
        agent.clock.advance(1_000);
    }
    let mut rng = SeededRng::new(mix_seed(seed, 200));
    for q in QuestionId::ALL {
        let rating = rng.range_inclusive(1, 6);
        engine.submit_survey(id, q, rating, agent.now())?;
        agent.clock.advance(1_000);
    }
    engine.end_session(id, agent.now())?;
    Ok(())
}

/// Session ids and seeds for a cohort, skipping ids already present.
pub fn allocate_sessions(engine: &Engine, cfg: &CohortConfig) -> Vec<(String, u64)> {
    let mut out = Vec::with_capacity(cfg.sessions);
    let mut counter = 0u64;
    while out.len() < cfg.sessions {
        let id = format!("{}{counter:04}", cfg.id_prefix);
        if !engine.session_exists(&id) {
            out.push((id, mix_seed(cfg.seed, counter)));
        }
        counter += 1;
    }
    out
}

/// Runs a cohort in parallel; returns the session ids in order.
pub fn simulate_cohort(engine: &Engine, cfg: &CohortConfig) -> Result<Vec<String>, SimError> {
    cfg.validate()?;
    let plan = allocate_sessions(engine, cfg);
    plan.par_iter()
        .map(|(id, seed)| play_session(engine, id, *seed, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(plan.into_iter().map(|(id, _)| id).collect())
}

/// Upper bound on generations a policy can make in one play phase.
pub fn generation_budget(mode: ModeKind, inter_action_ms: u64) -> u64 {
    let play = match mode {
        ModeKind::Challenge => CHALLENGE_PLAY_MS,
        _ => PLAY_MS,
    };
    play / inter_action_ms
}
