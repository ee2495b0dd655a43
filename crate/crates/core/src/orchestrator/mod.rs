//! Trial lifecycle, routing and reward fusion.
//!
//! [`Trial`] is the per-trial state machine and does no I/O: every method
//! returns the frames to deliver as [`Envelope`]s. [`run_tick`] drives one
//! tick against anything implementing [`ActorIo`], which is how the TCP and
//! WebSocket server, the in-process training driver and the tests share one
//! code path.

mod local;
mod remote;
pub mod server;

use std::path::PathBuf;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::datastore::{
    ActionRecord, AuxRecord, DataError, Sample, TrialFooter, TrialHeader, TrialStream,
};
use crate::environment::{self, EnvironmentSpec, GridAction, GridState};
use crate::protocol::{ActorClass, ActorRef, MessageKind, RewardContribution, WireMessage};

pub use local::{LocalIo, OrchestratedDriver};
pub use remote::RemoteDriver;

#[derive(Debug, Error, PartialEq)]
pub enum OrchestratorError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("contributions disagree on target actor or tick")]
    MixedTarget,
    #[error("invalid contribution: {0}")]
    InvalidContribution(String),
    #[error("unknown target actor {0}")]
    UnknownTarget(i64),
    #[error("trial is {0:?}")]
    WrongPhase(Phase),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrialConfig {
    pub n_agents: usize,
    pub include_human: bool,
    pub max_ticks: u64,
    pub tick_deadline_ms: u64,
    pub env_spec: EnvironmentSpec,
    pub seed: u64,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            n_agents: 2,
            include_human: false,
            max_ticks: 50,
            tick_deadline_ms: 500,
            env_spec: EnvironmentSpec::default(),
            seed: 0,
        }
    }
}

impl TrialConfig {
    pub fn n_actors(&self) -> usize {
        self.n_agents + usize::from(self.include_human)
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |m: &str| Err(OrchestratorError::InvalidConfig(m.into()));
        if self.n_agents < 1 {
            return bad("n_agents must be at least 1");
        }
        if self.max_ticks < 1 {
            return bad("max_ticks must be at least 1");
        }
        if self.tick_deadline_ms == 0 {
            return bad("tick_deadline_ms must be positive");
        }
        self.env_spec
            .validate(self.n_actors())
            .map_err(|e| OrchestratorError::InvalidConfig(e.to_string()))
    }

    /// Class of the roster slot `index`: agents first, then the human.
    pub fn slot_class(&self, index: usize) -> Option<ActorClass> {
        if index < self.n_agents {
            Some(ActorClass::Agent)
        } else if index < self.n_actors() {
            Some(ActorClass::Human)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Pending,
    Running,
    Ended,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EndReason {
    MaxTicks,
    EnvDone,
    ActorLost,
    Aborted,
}

impl std::fmt::Display for EndReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        std::fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedReward {
    pub target_actor: i64,
    pub tick_id: u64,
    pub value: f64,
    pub n_sources: usize,
    pub no_signal: bool,
}

/// Confidence-weighted mean of the contributions for one (actor, tick).
///
/// Items are summed in a canonical order so the result does not depend on
/// arrival order, and the mean is clamped to the range of the weighted
/// values so rounding never leaves their convex hull.
pub fn combine_rewards(
    target_actor: i64,
    tick_id: u64,
    items: &[RewardContribution],
) -> Result<FusedReward, OrchestratorError> {
    for c in items {
        if c.target_actor != target_actor || c.tick_id != tick_id {
            return Err(OrchestratorError::MixedTarget);
        }
        c.validate()
            .map_err(|e| OrchestratorError::InvalidContribution(e.to_string()))?;
    }
    let mut weighted: Vec<(f64, f64)> = items
        .iter()
        .filter(|c| c.confidence > 0.0)
        .map(|c| (c.value, c.confidence))
        .collect();
    weighted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let total: f64 = weighted.iter().map(|w| w.1).sum();
    let (value, no_signal) = if total > 0.0 {
        let num: f64 = weighted.iter().map(|(v, c)| v * c).sum();
        let lo = weighted.first().map_or(0.0, |w| w.0);
        let hi = weighted.last().map_or(0.0, |w| w.0);
        ((num / total).clamp(lo, hi), false)
    } else {
        (0.0, true)
    };
    Ok(FusedReward {
        target_actor,
        tick_id,
        value,
        n_sources: items.len(),
        no_signal,
    })
}

/// A frame for roster slot `to`.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub to: usize,
    pub msg: WireMessage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub trial_id: String,
    pub end_reason: EndReason,
    pub ticks: u64,
    pub cumulative: Vec<f64>,
}

/// Where a trial writes its log; `None` keeps it in memory only.
pub type DataRoot = Option<PathBuf>;

pub struct Trial {
    id: String,
    config: TrialConfig,
    root: DataRoot,
    started_at_ms: u64,
    phase: Phase,
    tick: u64,
    roster: Vec<Option<ActorRef>>,
    lost: Vec<bool>,
    state: Option<GridState>,
    observations: Vec<Vec<f64>>,
    pending: Vec<Option<GridAction>>,
    ledger: Vec<RewardContribution>,
    cumulative: Vec<f64>,
    end_reason: Option<EndReason>,
    stream: Option<TrialStream>,
    last_sample: Option<Sample>,
    samples_in_memory: Vec<Sample>,
    keep_samples: bool,
}

impl Trial {
    pub fn new(
        id: impl Into<String>,
        config: TrialConfig,
        root: DataRoot,
        started_at_ms: u64,
    ) -> Result<Self, OrchestratorError> {
        config.validate()?;
        let n = config.n_actors();
        Ok(Self {
            id: id.into(),
            config,
            root,
            started_at_ms,
            phase: Phase::Pending,
            tick: 0,
            roster: vec![None; n],
            lost: vec![false; n],
            state: None,
            observations: Vec::new(),
            pending: vec![None; n],
            ledger: Vec::new(),
            cumulative: vec![0.0; n],
            end_reason: None,
            stream: None,
            last_sample: None,
            samples_in_memory: Vec::new(),
            keep_samples: false,
        })
    }

    /// Keep every sample in memory as well (used when there is no data root).
    pub fn keep_samples(mut self) -> Self {
        self.keep_samples = true;
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn config(&self) -> &TrialConfig {
        &self.config
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn end_reason(&self) -> Option<EndReason> {
        self.end_reason
    }

    pub fn roster(&self) -> &[Option<ActorRef>] {
        &self.roster
    }

    pub fn state(&self) -> Option<&GridState> {
        self.state.as_ref()
    }

    /// Observations for the open tick, one per roster slot.
    pub fn observations(&self) -> &[Vec<f64>] {
        &self.observations
    }

    pub fn last_sample(&self) -> Option<&Sample> {
        self.last_sample.as_ref()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples_in_memory
    }

    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }

    /// Slots still free for `class`.
    pub fn free_slots(&self, class: ActorClass) -> usize {
        (0..self.roster.len())
            .filter(|&i| self.roster[i].is_none() && self.config.slot_class(i) == Some(class))
            .count()
    }

    fn orchestrator_msg(&self, kind: MessageKind, body: Value) -> WireMessage {
        WireMessage::new(kind, self.id.clone(), self.tick, ActorRef::orchestrator()).with_body(body)
    }

    fn error_msg(&self, reason: impl Into<String>) -> WireMessage {
        self.orchestrator_msg(MessageKind::Error, json!({ "reason": reason.into() }))
    }

    /// Handles a JoinTrial. Returns the slot on success plus the frames to
    /// send; on refusal the slot is `None` and the only frame is an Error
    /// addressed to slot `usize::MAX` (the caller's connection).
    pub fn join(&mut self, msg: &WireMessage) -> (Option<usize>, Vec<Envelope>) {
        let refuse = |t: &Self, reason: &str| {
            (
                None,
                vec![Envelope {
                    to: usize::MAX,
                    msg: t.error_msg(reason),
                }],
            )
        };
        if msg.kind != MessageKind::JoinTrial {
            return refuse(self, "expected JoinTrial");
        }
        if self.phase != Phase::Pending {
            return refuse(self, "roster full: trial already running");
        }
        let class = msg.sender.actor_class;
        if !matches!(class, ActorClass::Agent | ActorClass::Human) {
            return refuse(self, "only agents and humans join trials");
        }
        let Some(slot) = (0..self.roster.len())
            .find(|&i| self.roster[i].is_none() && self.config.slot_class(i) == Some(class))
        else {
            return refuse(self, &format!("roster full: no free {class:?} slot"));
        };
        let actor = ActorRef {
            actor_index: slot as i64,
            actor_class: class,
            name: msg.sender.name.clone(),
        };
        self.roster[slot] = Some(actor.clone());
        let mut out = vec![Envelope {
            to: slot,
            msg: self.orchestrator_msg(
                MessageKind::Joined,
                json!({ "actor": actor, "config": self.config }),
            ),
        }];
        if self.roster.iter().all(Option::is_some) {
            match self.start() {
                Ok(obs) => out.extend(obs),
                Err(e) => {
                    out.extend(self.broadcast(self.error_msg(e.to_string())));
                }
            }
        }
        (Some(slot), out)
    }

    /// Frees a slot whose connection dropped before the trial started.
    pub fn leave(&mut self, slot: usize) {
        if self.phase == Phase::Pending {
            if let Some(s) = self.roster.get_mut(slot) {
                *s = None;
            }
        }
    }

    fn start(&mut self) -> Result<Vec<Envelope>, OrchestratorError> {
        let n = self.roster.len();
        let (state, obs) = environment::reset(&self.config.env_spec, n, self.config.seed)
            .map_err(|e| OrchestratorError::InvalidConfig(e.to_string()))?;
        if let Some(root) = &self.root {
            let header = TrialHeader {
                trial_id: self.id.clone(),
                config: self.config.clone(),
                actors: self.roster.iter().flatten().cloned().collect(),
                started_at_ms: self.started_at_ms,
            };
            self.stream = Some(TrialStream::create(root, &header)?);
        }
        self.state = Some(state);
        self.observations = obs;
        self.phase = Phase::Running;
        Ok(self.observation_messages())
    }

    /// Observation frames for the open tick.
    pub fn observation_messages(&self) -> Vec<Envelope> {
        let Some(state) = &self.state else {
            return Vec::new();
        };
        let snapshot = environment::snapshot(&self.config.env_spec, state);
        (0..self.roster.len())
            .filter(|&i| !self.lost[i])
            .map(|i| Envelope {
                to: i,
                msg: WireMessage::new(
                    MessageKind::Observation,
                    self.id.clone(),
                    self.tick,
                    ActorRef::environment(),
                )
                .with_body(json!({
                    "observation": self.observations[i],
                    "snapshot": snapshot,
                    "deadline_ms": self.config.tick_deadline_ms,
                })),
            })
            .collect()
    }

    fn broadcast(&self, msg: WireMessage) -> Vec<Envelope> {
        (0..self.roster.len())
            .filter(|&i| self.roster[i].is_some() && !self.lost[i])
            .map(|i| Envelope {
                to: i,
                msg: msg.clone(),
            })
            .collect()
    }

    pub fn all_actions_in(&self) -> bool {
        self.pending.iter().all(Option::is_some)
    }

    /// Handles a frame from the actor in `slot` during a running trial.
    pub fn accept(&mut self, slot: usize, msg: WireMessage) -> Result<Vec<Envelope>, OrchestratorError> {
        if self.phase != Phase::Running {
            return Err(OrchestratorError::WrongPhase(self.phase));
        }
        let notice = |t: &Self, reason: String| {
            Ok(vec![Envelope {
                to: slot,
                msg: t.error_msg(reason),
            }])
        };
        let Some(Some(me)) = self.roster.get(slot) else {
            return notice(self, format!("slot {slot} is not in the roster"));
        };
        if msg.sender.actor_index != me.actor_index || msg.sender.actor_class != me.actor_class {
            return notice(self, "sender does not match the joined actor".into());
        }
        if msg.trial_id != self.id && !msg.trial_id.is_empty() {
            return notice(self, format!("frame for trial {}", msg.trial_id));
        }
        match msg.kind {
            MessageKind::Action => {
                if msg.tick_id != self.tick {
                    return notice(
                        self,
                        format!("action for tick {} ignored: tick {} is open", msg.tick_id, self.tick),
                    );
                }
                if self.pending[slot].is_some() {
                    return notice(self, format!("second action for tick {} ignored", self.tick));
                }
                let action = msg
                    .body
                    .get("action")
                    .and_then(Value::as_str)
                    .and_then(GridAction::from_name);
                match action {
                    Some(a) => {
                        self.pending[slot] = Some(a);
                        Ok(Vec::new())
                    }
                    None => notice(self, "action body needs \"action\": North|South|East|West|Stay".into()),
                }
            }
            MessageKind::Reward => {
                let target = msg.body.get("target_actor").and_then(Value::as_i64);
                let value = msg.body.get("value").and_then(Value::as_f64);
                let confidence = msg.body.get("confidence").and_then(Value::as_f64).unwrap_or(1.0);
                let (Some(target), Some(value)) = (target, value) else {
                    return notice(self, "reward body needs target_actor and value".into());
                };
                if !self.is_actor(target) {
                    return notice(self, format!("unknown reward target {target}"));
                }
                let c = RewardContribution {
                    target_actor: target,
                    value,
                    confidence,
                    source: me.clone(),
                    tick_id: self.tick,
                    latency_ticks: self.tick.saturating_sub(msg.tick_id),
                };
                if let Err(e) = c.validate() {
                    return notice(self, e.to_string());
                }
                self.ledger.push(c);
                Ok(Vec::new())
            }
            MessageKind::Recommend => match self.route_recommendation(slot, msg) {
                Ok(out) => Ok(out),
                Err(OrchestratorError::UnknownTarget(t)) => {
                    notice(self, format!("unknown recommendation target {t}"))
                }
                Err(e) => Err(e),
            },
            MessageKind::Heartbeat => Ok(Vec::new()),
            other => notice(self, format!("{other} is not accepted from actors")),
        }
    }

    fn is_actor(&self, index: i64) -> bool {
        index >= 0 && (index as usize) < self.roster.len()
    }

    /// Forwards a Recommend frame verbatim to its target and logs it.
    pub fn route_recommendation(
        &mut self,
        slot: usize,
        msg: WireMessage,
    ) -> Result<Vec<Envelope>, OrchestratorError> {
        let target = msg.body.get("target_actor").and_then(Value::as_i64).unwrap_or(-1);
        if !self.is_actor(target) {
            return Err(OrchestratorError::UnknownTarget(target));
        }
        let payload = match msg.body.get("payload") {
            Some(Value::Object(m)) => m.clone(),
            Some(other) => {
                let mut m = Map::new();
                m.insert("value".into(), other.clone());
                m
            }
            None => Map::new(),
        };
        let aux = AuxRecord {
            tick_id: self.tick,
            sender: self.roster[slot].clone().unwrap_or_else(|| msg.sender.clone()),
            target_actor: target,
            payload,
        };
        if let Some(stream) = &mut self.stream {
            stream.append_aux(&aux)?;
        }
        let to = target as usize;
        Ok(if self.lost[to] {
            Vec::new()
        } else {
            vec![Envelope { to, msg }]
        })
    }

    /// Substitutes missing actions, steps the environment, fuses rewards,
    /// appends the sample and advances the tick. Returns TickResult frames,
    /// then either the next tick's Observations or the EndTrial frames.
    pub fn close_tick(&mut self) -> Result<Vec<Envelope>, OrchestratorError> {
        if self.phase != Phase::Running {
            return Err(OrchestratorError::WrongPhase(self.phase));
        }
        let n = self.roster.len();
        let tick = self.tick;
        let actions: Vec<ActionRecord> = (0..n)
            .map(|i| ActionRecord {
                actor_index: i,
                action: self.pending[i].unwrap_or(GridAction::NOOP),
                substituted: self.pending[i].is_none(),
            })
            .collect();
        let moves: Vec<GridAction> = actions.iter().map(|a| a.action).collect();
        let state = self.state.as_ref().expect("running trial has a state");
        let out = environment::step(&self.config.env_spec, state, &moves)
            .map_err(|e| OrchestratorError::InvalidConfig(e.to_string()))?;
        let next_observations = environment::observe_all(&self.config.env_spec, &out.state);
        let mut contributions: Vec<RewardContribution> = out
            .rewards
            .iter()
            .enumerate()
            .map(|(i, &r)| RewardContribution {
                target_actor: i as i64,
                value: r,
                confidence: 1.0,
                source: ActorRef::environment(),
                tick_id: tick,
                latency_ticks: 0,
            })
            .collect();
        contributions.append(&mut self.ledger);
        let mut fused = Vec::with_capacity(n);
        for i in 0..n {
            let mine: Vec<RewardContribution> = contributions
                .iter()
                .filter(|c| c.target_actor == i as i64)
                .cloned()
                .collect();
            let f = combine_rewards(i as i64, tick, &mine)?;
            self.cumulative[i] += f.value;
            fused.push(f);
        }
        let terminal = out.state.all_visited();
        let sample = Sample {
            tick_id: tick,
            observations: std::mem::take(&mut self.observations),
            actions,
            env_rewards: out.rewards,
            contributions,
            fused,
            next_observations,
            done: out.done,
            terminal,
        };
        if let Some(stream) = &mut self.stream {
            stream.append_sample(&sample)?;
        }
        let mut frames = Vec::with_capacity(2 * n);
        for i in (0..n).filter(|&i| !self.lost[i]) {
            let body = json!({
                "actions": sample.actions,
                "rewards": sample.fused,
                "done": sample.done,
                "terminal": sample.terminal,
                "next_observation": sample.next_observations[i],
            });
            frames.push(Envelope {
                to: i,
                msg: self.orchestrator_msg(MessageKind::TickResult, body),
            });
        }
        self.observations = sample.next_observations.clone();
        self.state = Some(out.state);
        self.pending = vec![None; n];
        self.tick += 1;
        let env_done = sample.done;
        if self.keep_samples {
            self.samples_in_memory.push(sample.clone());
        }
        self.last_sample = Some(sample);
        if self.tick >= self.config.max_ticks {
            frames.extend(self.end(EndReason::MaxTicks)?);
        } else if env_done {
            frames.extend(self.end(EndReason::EnvDone)?);
        } else {
            frames.extend(self.observation_messages());
        }
        Ok(frames)
    }

    /// Marks the actor in `slot` as gone and ends the trial.
    pub fn lose(&mut self, slot: usize) -> Result<Vec<Envelope>, OrchestratorError> {
        if let Some(l) = self.lost.get_mut(slot) {
            *l = true;
        }
        match self.phase {
            Phase::Running => self.end(EndReason::ActorLost),
            Phase::Pending => {
                self.leave(slot);
                Ok(Vec::new())
            }
            Phase::Ended => Ok(Vec::new()),
        }
    }

    /// Ends the trial: EndTrial to every connected actor, footer written.
    /// Ending an already ended trial is a no-op.
    pub fn end(&mut self, reason: EndReason) -> Result<Vec<Envelope>, OrchestratorError> {
        if self.phase == Phase::Ended {
            return Ok(Vec::new());
        }
        self.phase = Phase::Ended;
        self.end_reason = Some(reason);
        if let Some(stream) = &mut self.stream {
            stream.close(&TrialFooter {
                end_reason: reason,
                ticks: self.tick,
                cumulative: self.cumulative.clone(),
            })?;
        }
        let body = json!({
            "reason": reason,
            "ticks": self.tick,
            "cumulative": self.cumulative,
        });
        Ok(self.broadcast(self.orchestrator_msg(MessageKind::EndTrial, body)))
    }

    pub fn summary(&self) -> Option<Summary> {
        Some(Summary {
            trial_id: self.id.clone(),
            end_reason: self.end_reason?,
            ticks: self.tick,
            cumulative: self.cumulative.clone(),
        })
    }
}

/// What an [`ActorIo`] hands back while a tick is collecting actions.
#[derive(Debug, Clone, PartialEq)]
pub enum Inbound {
    Message(usize, WireMessage),
    /// The connection behind this slot is gone.
    Lost(usize),
    /// Shut down: end the trial now.
    Abort,
    /// Nothing arrived before the deadline.
    Timeout,
}

pub trait ActorIo {
    fn send(&mut self, envelope: Envelope);
    fn recv(&mut self, deadline: Instant) -> Inbound;
}

/// Collects actions until every actor has acted or the deadline passes,
/// then closes the tick. Frames produced along the way go out through `io`.
pub fn run_tick(trial: &mut Trial, io: &mut dyn ActorIo) -> Result<Phase, OrchestratorError> {
    if trial.phase() != Phase::Running {
        return Err(OrchestratorError::WrongPhase(trial.phase()));
    }
    let deadline = Instant::now() + Duration::from_millis(trial.config().tick_deadline_ms);
    while !trial.all_actions_in() {
        match io.recv(deadline) {
            Inbound::Message(slot, msg) => {
                for e in trial.accept(slot, msg)? {
                    io.send(e);
                }
            }
            Inbound::Lost(slot) => {
                for e in trial.lose(slot)? {
                    io.send(e);
                }
                return Ok(trial.phase());
            }
            Inbound::Abort => {
                for e in trial.end(EndReason::Aborted)? {
                    io.send(e);
                }
                return Ok(trial.phase());
            }
            Inbound::Timeout => break,
        }
    }
    for e in trial.close_tick()? {
        io.send(e);
    }
    Ok(trial.phase())
}
