//! In-process actor plumbing: a queue-backed [`ActorIo`] and the training
//! driver that runs every episode as an orchestrated trial.

use std::collections::VecDeque;
use std::time::Instant;

use serde_json::json;

use crate::algorithms::train::episode_seed;
use crate::algorithms::{AlgoError, EnvDriver, StepResult};
use crate::environment::GridAction;
use crate::protocol::{ActorRef, MessageKind, WireMessage};

use super::{run_tick, ActorIo, DataRoot, EndReason, Envelope, Inbound, Phase, Summary, Trial, TrialConfig};

type Responder = Box<dyn FnMut(&Envelope) -> Vec<Inbound> + Send>;

/// Queue-backed [`ActorIo`]. `recv` never blocks: an empty inbox is a
/// timeout. An optional responder plays scripted actors by turning each
/// outgoing frame into zero or more inbound events.
#[derive(Default)]
pub struct LocalIo {
    inbox: VecDeque<Inbound>,
    responder: Option<Responder>,
    /// Per-slot connection traces, both directions, when recording.
    traces: Option<Vec<Vec<WireMessage>>>,
}

impl LocalIo {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_responder(mut self, f: impl FnMut(&Envelope) -> Vec<Inbound> + Send + 'static) -> Self {
        self.responder = Some(Box::new(f));
        self
    }

    pub fn recording(mut self) -> Self {
        self.traces = Some(Vec::new());
        self
    }

    pub fn push(&mut self, inbound: Inbound) {
        self.inbox.push_back(inbound);
    }

    fn record(&mut self, slot: usize, msg: &WireMessage) {
        if let Some(traces) = &mut self.traces {
            if slot == usize::MAX {
                return;
            }
            if traces.len() <= slot {
                traces.resize(slot + 1, Vec::new());
            }
            traces[slot].push(msg.clone());
        }
    }

    /// Offers `msg` to the trial as a JoinTrial and delivers the replies.
    pub fn join(&mut self, trial: &mut Trial, msg: WireMessage) -> Option<usize> {
        let (slot, out) = trial.join(&msg);
        if let Some(s) = slot {
            self.record(s, &msg);
        }
        for e in out {
            self.send(e);
        }
        slot
    }

    pub fn take_traces(&mut self) -> Vec<Vec<WireMessage>> {
        self.traces.as_mut().map(std::mem::take).unwrap_or_default()
    }
}

impl ActorIo for LocalIo {
    fn send(&mut self, envelope: Envelope) {
        self.record(envelope.to, &envelope.msg);
        if let Some(r) = &mut self.responder {
            let replies = r(&envelope);
            self.inbox.extend(replies);
        }
    }

    fn recv(&mut self, _deadline: Instant) -> Inbound {
        let next = self.inbox.pop_front().unwrap_or(Inbound::Timeout);
        if let Inbound::Message(slot, msg) = &next {
            let (slot, msg) = (*slot, msg.clone());
            self.record(slot, &msg);
        }
        next
    }
}

/// [`EnvDriver`] that runs each episode as a trial through the
/// orchestrator, with the learner's agents as ordinary actors.
///
/// Trial ids are `<prefix>-<episode:05>` and headers carry a zero start
/// time, so two runs with the same seed write byte-identical logs.
pub struct OrchestratedDriver {
    base: TrialConfig,
    root: DataRoot,
    seed: u64,
    fixed_layout: bool,
    prefix: String,
    trial: Option<Trial>,
    io: LocalIo,
    summaries: Vec<Summary>,
}

impl OrchestratedDriver {
    pub fn new(base: TrialConfig, root: DataRoot, seed: u64, fixed_layout: bool, prefix: impl Into<String>) -> Self {
        Self {
            base: TrialConfig {
                include_human: false,
                ..base
            },
            root,
            seed,
            fixed_layout,
            prefix: prefix.into(),
            trial: None,
            io: LocalIo::new(),
            summaries: Vec::new(),
        }
    }

    pub fn trial(&self) -> Option<&Trial> {
        self.trial.as_ref()
    }

    pub fn summaries(&self) -> &[Summary] {
        &self.summaries
    }

    /// Ends the open trial, if any, as aborted.
    pub fn finish(&mut self) -> Result<(), AlgoError> {
        if let Some(t) = &mut self.trial {
            if t.phase() != Phase::Ended {
                t.end(EndReason::Aborted).map_err(driver_err)?;
            }
            self.summaries.extend(t.summary());
        }
        self.trial = None;
        Ok(())
    }
}

fn driver_err(e: impl std::fmt::Display) -> AlgoError {
    AlgoError::Driver(e.to_string())
}

impl EnvDriver for OrchestratedDriver {
    fn reset(&mut self, episode: u64) -> Result<Vec<Vec<f64>>, AlgoError> {
        self.finish()?;
        let config = TrialConfig {
            seed: episode_seed(self.seed, episode, self.fixed_layout),
            ..self.base.clone()
        };
        let id = format!("{}-{episode:05}", self.prefix);
        let mut trial = Trial::new(id, config, self.root.clone(), 0).map_err(driver_err)?;
        for i in 0..self.base.n_agents {
            let join = WireMessage::new(MessageKind::JoinTrial, trial.id(), 0, ActorRef::agent(i, format!("agent-{i}")));
            if self.io.join(&mut trial, join).is_none() {
                return Err(AlgoError::Driver(format!("agent {i} could not join")));
            }
        }
        let obs = trial.observations().to_vec();
        self.trial = Some(trial);
        Ok(obs)
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult, AlgoError> {
        let trial = self
            .trial
            .as_mut()
            .filter(|t| t.phase() == Phase::Running)
            .ok_or_else(|| AlgoError::Driver("step without a running trial".into()))?;
        for (i, &a) in actions.iter().enumerate() {
            let action = GridAction::from_index(a).ok_or_else(|| AlgoError::Driver(format!("action {a}")))?;
            let me = ActorRef::agent(i, format!("agent-{i}"));
            let msg = WireMessage::new(MessageKind::Action, trial.id(), trial.tick(), me)
                .with_body(json!({ "action": action.name() }));
            self.io.push(Inbound::Message(i, msg));
        }
        run_tick(trial, &mut self.io).map_err(driver_err)?;
        let sample = trial
            .last_sample()
            .ok_or_else(|| AlgoError::Driver("tick produced no sample".into()))?;
        Ok(StepResult {
            observations: sample.next_observations.clone(),
            rewards: sample.fused.iter().map(|f| f.value).collect(),
            done: trial.phase() == Phase::Ended,
            terminal: sample.terminal,
        })
    }
}
