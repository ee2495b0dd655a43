//! Training driver that plays its agents as TCP clients of a running
//! orchestrator, one connection per agent.

use std::io::BufReader;
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use serde_json::{json, Value};

use crate::algorithms::{AlgoError, EnvDriver, StepResult};
use crate::environment::GridAction;
use crate::protocol::{read_frame, write_frame, ActorRef, MessageKind, WireMessage};

struct Conn {
    me: ActorRef,
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Conn {
    fn send(&mut self, msg: &WireMessage) -> Result<(), AlgoError> {
        write_frame(&mut self.writer, msg).map_err(|e| AlgoError::Driver(e.to_string()))
    }

    /// Next frame of one of `kinds`, skipping the rest. While joining, an
    /// Error is the refusal.
    fn expect(&mut self, kinds: &[MessageKind]) -> Result<WireMessage, AlgoError> {
        loop {
            let msg = read_frame(&mut self.reader)
                .map_err(|e| AlgoError::Driver(e.to_string()))?
                .ok_or_else(|| AlgoError::Driver("orchestrator closed the connection".into()))?;
            if kinds.contains(&msg.kind) {
                return Ok(msg);
            }
            if msg.kind == MessageKind::Error && kinds.contains(&MessageKind::Joined) {
                let reason = msg.body.get("reason").and_then(Value::as_str).unwrap_or("refused");
                return Err(AlgoError::Driver(format!("join refused: {reason}")));
            }
        }
    }
}

fn floats(v: Option<&Value>) -> Result<Vec<f64>, AlgoError> {
    serde_json::from_value(v.cloned().unwrap_or(Value::Null))
        .map_err(|e| AlgoError::Driver(format!("bad observation: {e}")))
}

pub struct RemoteDriver {
    addr: String,
    n_agents: usize,
    conns: Vec<Conn>,
    trial_id: String,
    tick: u64,
}

impl RemoteDriver {
    /// Checks that `addr` accepts connections.
    pub fn connect(addr: &str, n_agents: usize) -> Result<Self, std::io::Error> {
        let sock = addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| std::io::Error::other(format!("{addr} does not resolve")))?;
        TcpStream::connect_timeout(&sock, Duration::from_secs(5))?;
        Ok(Self {
            addr: addr.to_string(),
            n_agents,
            conns: Vec::new(),
            trial_id: String::new(),
            tick: 0,
        })
    }

    fn open(&self, i: usize) -> Result<Conn, AlgoError> {
        let stream = TcpStream::connect(&self.addr).map_err(|e| AlgoError::Driver(format!("{}: {e}", self.addr)))?;
        let _ = stream.set_nodelay(true);
        let writer = stream.try_clone().map_err(|e| AlgoError::Driver(e.to_string()))?;
        Ok(Conn {
            me: ActorRef::agent(i, format!("agent-{i}")),
            reader: BufReader::new(stream),
            writer,
        })
    }
}

impl EnvDriver for RemoteDriver {
    fn reset(&mut self, _episode: u64) -> Result<Vec<Vec<f64>>, AlgoError> {
        self.conns.clear();
        self.trial_id.clear();
        for i in 0..self.n_agents {
            let mut c = self.open(i)?;
            let join = WireMessage::new(MessageKind::JoinTrial, self.trial_id.clone(), 0, c.me.clone());
            c.send(&join)?;
            let joined = c.expect(&[MessageKind::Joined])?;
            self.trial_id = joined.trial_id.clone();
            if let Some(actor) = joined.body.get("actor") {
                c.me = serde_json::from_value(actor.clone()).map_err(|e| AlgoError::Driver(e.to_string()))?;
            }
            self.conns.push(c);
        }
        self.tick = 0;
        let mut obs = Vec::with_capacity(self.n_agents);
        for c in &mut self.conns {
            obs.push(floats(c.expect(&[MessageKind::Observation])?.body.get("observation"))?);
        }
        Ok(obs)
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult, AlgoError> {
        for (c, &a) in self.conns.iter_mut().zip(actions) {
            let action = GridAction::from_index(a).ok_or_else(|| AlgoError::Driver(format!("action {a}")))?;
            let msg = WireMessage::new(MessageKind::Action, self.trial_id.clone(), self.tick, c.me.clone())
                .with_body(json!({ "action": action.name() }));
            c.send(&msg)?;
        }
        let mut observations = Vec::with_capacity(self.n_agents);
        let mut rewards = vec![0.0; self.n_agents];
        let mut ended = false;
        let mut terminal = false;
        for (i, c) in self.conns.iter_mut().enumerate() {
            let result = c.expect(&[MessageKind::TickResult])?;
            if let Some(r) = result.body.get("rewards").and_then(|r| r.get(i)) {
                rewards[i] = r.get("value").and_then(Value::as_f64).unwrap_or(0.0);
            }
            terminal |= result.body.get("terminal").and_then(Value::as_bool).unwrap_or(false);
            observations.push(floats(result.body.get("next_observation"))?);
            let next = c.expect(&[MessageKind::Observation, MessageKind::EndTrial])?;
            ended |= next.kind == MessageKind::EndTrial;
        }
        self.tick += 1;
        Ok(StepResult {
            observations,
            rewards,
            done: ended,
            terminal,
        })
    }
}
