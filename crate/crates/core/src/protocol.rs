//! Framed wire protocol shared by agents, humans, the environment and the
//! orchestrator.
//!
//! A frame is `[len: u32 big-endian][len bytes of UTF-8 JSON]`. The JSON
//! payload always has the five top-level fields of [`WireMessage`].

use std::collections::HashMap;
use std::fmt;
use std::io::{self, Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// Largest payload a frame may carry.
pub const MAX_PAYLOAD: usize = (1 << 24) - 1;

pub const ENVIRONMENT_INDEX: i64 = -1;
pub const ORCHESTRATOR_INDEX: i64 = -2;

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("payload of {0} bytes exceeds the frame limit")]
    PayloadTooLarge(usize),
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("malformed payload: {0}")]
    MalformedPayload(String),
    #[error("unknown message kind {0:?}")]
    UnknownKind(String),
    #[error("invalid message: {0}")]
    InvalidMessage(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    JoinTrial,
    Joined,
    Observation,
    Action,
    Reward,
    Recommend,
    TickResult,
    EndTrial,
    Heartbeat,
    Error,
}

impl MessageKind {
    pub const ALL: [MessageKind; 10] = [
        MessageKind::JoinTrial,
        MessageKind::Joined,
        MessageKind::Observation,
        MessageKind::Action,
        MessageKind::Reward,
        MessageKind::Recommend,
        MessageKind::TickResult,
        MessageKind::EndTrial,
        MessageKind::Heartbeat,
        MessageKind::Error,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::JoinTrial => "JoinTrial",
            MessageKind::Joined => "Joined",
            MessageKind::Observation => "Observation",
            MessageKind::Action => "Action",
            MessageKind::Reward => "Reward",
            MessageKind::Recommend => "Recommend",
            MessageKind::TickResult => "TickResult",
            MessageKind::EndTrial => "EndTrial",
            MessageKind::Heartbeat => "Heartbeat",
            MessageKind::Error => "Error",
        }
    }

    /// Kinds that may omit the trial id.
    pub fn trial_id_optional(self) -> bool {
        matches!(
            self,
            MessageKind::JoinTrial | MessageKind::Heartbeat | MessageKind::Error
        )
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MessageKind {
    type Err = ProtocolError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MessageKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| ProtocolError::UnknownKind(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActorClass {
    Agent,
    Human,
    Environment,
    Orchestrator,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActorRef {
    pub actor_index: i64,
    pub actor_class: ActorClass,
    pub name: String,
}

impl ActorRef {
    pub fn agent(index: usize, name: impl Into<String>) -> Self {
        Self {
            actor_index: index as i64,
            actor_class: ActorClass::Agent,
            name: name.into(),
        }
    }

    pub fn human(index: usize, name: impl Into<String>) -> Self {
        Self {
            actor_index: index as i64,
            actor_class: ActorClass::Human,
            name: name.into(),
        }
    }

    pub fn environment() -> Self {
        Self {
            actor_index: ENVIRONMENT_INDEX,
            actor_class: ActorClass::Environment,
            name: "environment".into(),
        }
    }

    pub fn orchestrator() -> Self {
        Self {
            actor_index: ORCHESTRATOR_INDEX,
            actor_class: ActorClass::Orchestrator,
            name: "orchestrator".into(),
        }
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        let ok = match self.actor_class {
            ActorClass::Agent | ActorClass::Human => self.actor_index >= 0,
            ActorClass::Environment => self.actor_index == ENVIRONMENT_INDEX,
            ActorClass::Orchestrator => self.actor_index == ORCHESTRATOR_INDEX,
        };
        if ok {
            Ok(())
        } else {
            Err(ProtocolError::InvalidMessage(format!(
                "{:?} cannot have actor_index {}",
                self.actor_class, self.actor_index
            )))
        }
    }
}

/// One source's reward signal for one actor and tick, before fusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardContribution {
    pub target_actor: i64,
    pub value: f64,
    pub confidence: f64,
    pub source: ActorRef,
    /// Tick the contribution is attributed to (its arrival tick).
    pub tick_id: u64,
    /// Arrival tick minus the tick the sender stamped on its message.
    #[serde(default)]
    pub latency_ticks: u64,
}

impl RewardContribution {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if !self.value.is_finite() {
            return Err(ProtocolError::InvalidMessage("reward value must be finite".into()));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(ProtocolError::InvalidMessage(format!(
                "confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireMessage {
    pub kind: MessageKind,
    pub trial_id: String,
    pub tick_id: u64,
    pub sender: ActorRef,
    pub body: Map<String, Value>,
}

impl WireMessage {
    pub fn new(kind: MessageKind, trial_id: impl Into<String>, tick_id: u64, sender: ActorRef) -> Self {
        Self {
            kind,
            trial_id: trial_id.into(),
            tick_id,
            sender,
            body: Map::new(),
        }
    }

    /// Replaces the body; non-object values are wrapped as `{"value": v}`.
    pub fn with_body(mut self, body: Value) -> Self {
        self.body = match body {
            Value::Object(m) => m,
            other => {
                let mut m = Map::new();
                m.insert("value".into(), other);
                m
            }
        };
        self
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.trial_id.is_empty() && !self.kind.trial_id_optional() {
            return Err(ProtocolError::InvalidMessage(format!(
                "{} requires a trial_id",
                self.kind
            )));
        }
        self.sender.validate()
    }
}

/// Serializes `msg` into one frame.
pub fn encode(msg: &WireMessage) -> Result<Vec<u8>, ProtocolError> {
    msg.validate()?;
    let payload =
        serde_json::to_vec(msg).map_err(|e| ProtocolError::MalformedPayload(e.to_string()))?;
    if payload.len() > MAX_PAYLOAD {
        return Err(ProtocolError::PayloadTooLarge(payload.len()));
    }
    let mut out = Vec::with_capacity(4 + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses one frame from the front of `bytes`; returns the message and the
/// unconsumed remainder.
pub fn decode(bytes: &[u8]) -> Result<(WireMessage, &[u8]), ProtocolError> {
    if bytes.len() < 4 {
        return Err(ProtocolError::Truncated {
            needed: 4,
            available: bytes.len(),
        });
    }
    let len = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    if len > MAX_PAYLOAD {
        return Err(ProtocolError::PayloadTooLarge(len));
    }
    let rest = &bytes[4..];
    if rest.len() < len {
        return Err(ProtocolError::Truncated {
            needed: 4 + len,
            available: bytes.len(),
        });
    }
    let (payload, remainder) = rest.split_at(len);
    Ok((decode_payload(payload)?, remainder))
}

/// Parses a bare JSON payload (no length prefix), as carried by WebSocket
/// text messages.
pub fn decode_payload(payload: &[u8]) -> Result<WireMessage, ProtocolError> {
    let value: Value =
        serde_json::from_slice(payload).map_err(|e| ProtocolError::MalformedPayload(e.to_string()))?;
    match value.get("kind") {
        Some(Value::String(k)) => {
            k.parse::<MessageKind>()?;
        }
        Some(_) => return Err(ProtocolError::MalformedPayload("`kind` is not a string".into())),
        None => return Err(ProtocolError::MalformedPayload("missing `kind`".into())),
    }
    let msg: WireMessage =
        serde_json::from_value(value).map_err(|e| ProtocolError::MalformedPayload(e.to_string()))?;
    msg.validate()
        .map_err(|e| ProtocolError::MalformedPayload(e.to_string()))?;
    Ok(msg)
}

/// JSON payload without the length prefix.
pub fn encode_payload(msg: &WireMessage) -> Result<String, ProtocolError> {
    let frame = encode(msg)?;
    Ok(String::from_utf8(frame[4..].to_vec()).expect("serde_json emits UTF-8"))
}

#[derive(Debug, Error)]
pub enum FrameIoError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// Reads one frame. `Ok(None)` on a clean end of stream before any byte of
/// the next frame.
pub fn read_frame(r: &mut impl Read) -> Result<Option<WireMessage>, FrameIoError> {
    let mut prefix = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut prefix[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => {
                return Err(ProtocolError::Truncated {
                    needed: 4,
                    available: got,
                }
                .into())
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(prefix) as usize;
    if len > MAX_PAYLOAD {
        return Err(ProtocolError::PayloadTooLarge(len).into());
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            FrameIoError::Protocol(ProtocolError::Truncated {
                needed: 4 + len,
                available: 4,
            })
        } else {
            FrameIoError::Io(e)
        }
    })?;
    Ok(Some(decode_payload(&payload)?))
}

pub fn write_frame(w: &mut impl Write, msg: &WireMessage) -> Result<(), FrameIoError> {
    w.write_all(&encode(msg)?)?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("protocol violation at message {index} ({found}): {reason}; expected one of {expected:?}")]
pub struct ProtocolViolation {
    pub index: usize,
    pub found: MessageKind,
    pub expected: Vec<MessageKind>,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Start,
    Joining,
    Active,
    Closed,
}

const ACTIVE: [MessageKind; 8] = [
    MessageKind::Observation,
    MessageKind::Action,
    MessageKind::Reward,
    MessageKind::Recommend,
    MessageKind::TickResult,
    MessageKind::Heartbeat,
    MessageKind::Error,
    MessageKind::EndTrial,
];

/// Checks one connection's messages (both directions, arrival order)
/// against the session grammar
/// `JoinTrial -> Joined -> (Observation|Action|Reward|Recommend|TickResult)* -> EndTrial`.
///
/// Heartbeat and Error are accepted anywhere after Joined. An Error right
/// after JoinTrial is a rejected join and closes the session. `tick_id` must
/// not decrease within a `(trial_id, sender)` stream.
pub fn validate_sequence(stream: &[WireMessage]) -> Result<(), ProtocolViolation> {
    let mut stage = Stage::Start;
    let mut last_tick: HashMap<(&str, i64, ActorClass), u64> = HashMap::new();
    for (index, msg) in stream.iter().enumerate() {
        let violation = |expected: &[MessageKind], reason: &str| ProtocolViolation {
            index,
            found: msg.kind,
            expected: expected.to_vec(),
            reason: reason.to_string(),
        };
        stage = match (stage, msg.kind) {
            (Stage::Start, MessageKind::JoinTrial) => Stage::Joining,
            (Stage::Start, _) => {
                return Err(violation(&[MessageKind::JoinTrial], "session must open with JoinTrial"))
            }
            (Stage::Joining, MessageKind::Joined) => Stage::Active,
            (Stage::Joining, MessageKind::Error) => Stage::Closed,
            (Stage::Joining, _) => {
                return Err(violation(
                    &[MessageKind::Joined, MessageKind::Error],
                    "JoinTrial must be answered first",
                ))
            }
            (Stage::Active, MessageKind::EndTrial) => Stage::Closed,
            (Stage::Active, k) if ACTIVE.contains(&k) => Stage::Active,
            (Stage::Active, _) => return Err(violation(&ACTIVE, "already joined")),
            (Stage::Closed, _) => return Err(violation(&[], "session already closed")),
        };
        let key = (msg.trial_id.as_str(), msg.sender.actor_index, msg.sender.actor_class);
        if let Some(&prev) = last_tick.get(&key) {
            if msg.tick_id < prev {
                return Err(ProtocolViolation {
                    index,
                    found: msg.kind,
                    expected: vec![],
                    reason: format!("tick regression {prev} -> {}", msg.tick_id),
                });
            }
        }
        last_tick.insert(key, msg.tick_id);
    }
    Ok(())
}
