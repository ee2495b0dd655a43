#![allow(dead_code)]

pub mod net;
pub mod oracle;
pub mod strategies;

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use trialmesh::environment::GridAction;
use trialmesh::orchestrator::{run_tick, Envelope, Inbound, LocalIo, Phase, Trial, TrialConfig};
use trialmesh::protocol::{ActorClass, ActorRef, MessageKind, WireMessage};

/// How the scripted actors behave.
#[derive(Debug, Clone, Default)]
pub struct Script {
    /// Seed for the actors' choices.
    pub seed: u64,
    /// The human sends feedback and recommendations and sometimes a second
    /// action in the same tick.
    pub chatty_human: bool,
    /// Slots that never act.
    pub silent: Vec<usize>,
}

pub fn actor_for(config: &TrialConfig, slot: usize) -> ActorRef {
    match config.slot_class(slot) {
        Some(ActorClass::Human) => ActorRef::human(slot, "pilot"),
        _ => ActorRef::agent(slot, format!("agent-{slot}")),
    }
}

fn responder(config: TrialConfig, script: Script) -> impl FnMut(&Envelope) -> Vec<Inbound> + Send {
    let mut rng = ChaCha8Rng::seed_from_u64(script.seed);
    move |e: &Envelope| {
        if e.msg.kind != MessageKind::Observation || script.silent.contains(&e.to) {
            return Vec::new();
        }
        let me = actor_for(&config, e.to);
        let trial = e.msg.trial_id.clone();
        let tick = e.msg.tick_id;
        let action = |a: GridAction| {
            WireMessage::new(MessageKind::Action, trial.clone(), tick, me.clone()).with_body(json!({ "action": a.name() }))
        };
        let mut out = Vec::new();
        let is_human = me.actor_class == ActorClass::Human;
        if is_human && script.chatty_human {
            if rng.gen_bool(0.5) {
                let fb = WireMessage::new(MessageKind::Reward, trial.clone(), tick, me.clone()).with_body(json!({
                    "target_actor": rng.gen_range(0..config.n_agents),
                    "value": if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
                    "confidence": rng.gen_range(0.0..=1.0),
                }));
                out.push(Inbound::Message(e.to, fb));
            }
            if rng.gen_bool(0.3) {
                let rec = WireMessage::new(MessageKind::Recommend, trial.clone(), tick, me.clone())
                    .with_body(json!({ "target_actor": 0, "payload": { "suggest": "go_north" } }));
                out.push(Inbound::Message(e.to, rec));
            }
        }
        out.push(Inbound::Message(e.to, action(GridAction::ALL[rng.gen_range(0..GridAction::COUNT)])));
        if is_human && script.chatty_human && rng.gen_bool(0.2) {
            out.push(Inbound::Message(e.to, action(GridAction::North)));
        }
        out
    }
}

/// Runs one trial to completion with scripted actors. Returns the ended
/// trial and every slot's connection trace.
pub fn run_scripted(id: &str, config: TrialConfig, root: Option<PathBuf>, script: Script) -> (Trial, Vec<Vec<WireMessage>>) {
    let mut io = LocalIo::new().recording().with_responder(responder(config.clone(), script));
    let mut trial = Trial::new(id, config.clone(), root, 0).unwrap().keep_samples();
    for slot in 0..config.n_actors() {
        let join = WireMessage::new(MessageKind::JoinTrial, id, 0, actor_for(&config, slot));
        assert_eq!(io.join(&mut trial, join), Some(slot));
    }
    while trial.phase() == Phase::Running {
        run_tick(&mut trial, &mut io).unwrap();
    }
    (trial, io.take_traces())
}
