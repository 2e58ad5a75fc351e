//! Vocabulary shared by the engine, the event log, and the analysis.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModeKind {
    #[serde(rename = "creatures")]
    Creatures,
    #[serde(rename = "challenge")]
    Challenge,
    #[serde(rename = "openplay")]
    OpenPlay,
}

impl ModeKind {
    pub const ALL: [ModeKind; 3] = [ModeKind::Creatures, ModeKind::Challenge, ModeKind::OpenPlay];

    pub fn as_str(self) -> &'static str {
        match self {
            ModeKind::Creatures => "creatures",
            ModeKind::Challenge => "challenge",
            ModeKind::OpenPlay => "openplay",
        }
    }

    /// Sliders shown in this mode.
    pub fn source_count(self) -> usize {
        match self {
            ModeKind::Challenge => 3,
            ModeKind::Creatures | ModeKind::OpenPlay => 6,
        }
    }
}

impl fmt::Display for ModeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "creatures" => Ok(ModeKind::Creatures),
            "challenge" => Ok(ModeKind::Challenge),
            "openplay" => Ok(ModeKind::OpenPlay),
            other => Err(format!("unknown mode '{other}'")),
        }
    }
}

/// A mode together with its challenge level, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModeRef {
    pub kind: ModeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<u8>,
}

impl ModeRef {
    pub const fn new(kind: ModeKind, level: Option<u8>) -> Self {
        Self { kind, level }
    }

    pub const fn challenge(level: u8) -> Self {
        Self::new(ModeKind::Challenge, Some(level))
    }
}

impl fmt::Display for ModeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.level {
            Some(level) => write!(f, "{}{}", self.kind, level),
            None => write!(f, "{}", self.kind),
        }
    }
}

/// Fixed study protocol: every session plays these in order.
pub const PROTOCOL: [ModeRef; 5] = [
    ModeRef::new(ModeKind::Creatures, None),
    ModeRef::challenge(1),
    ModeRef::challenge(2),
    ModeRef::challenge(3),
    ModeRef::new(ModeKind::OpenPlay, None),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionId {
    ControlStart,
    ControlEnd,
    Playfulness,
}

impl QuestionId {
    pub const ALL: [QuestionId; 3] = [
        QuestionId::ControlStart,
        QuestionId::ControlEnd,
        QuestionId::Playfulness,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QuestionId::ControlStart => "control_start",
            QuestionId::ControlEnd => "control_end",
            QuestionId::Playfulness => "playfulness",
        }
    }
}

impl FromStr for QuestionId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        QuestionId::ALL
            .into_iter()
            .find(|q| q.as_str() == s)
            .ok_or_else(|| format!("unknown question '{s}'"))
    }
}

/// Why a mode ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndReason {
    Timeout,
    Finished,
}

impl EndReason {
    pub fn as_str(self) -> &'static str {
        match self {
            EndReason::Timeout => "timeout",
            EndReason::Finished => "finished",
        }
    }
}

impl FromStr for EndReason {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "timeout" => Ok(EndReason::Timeout),
            "finished" => Ok(EndReason::Finished),
            other => Err(format!("unknown end reason '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    AwaitingChoice,
    Playing,
    Ended,
}
