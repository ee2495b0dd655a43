//! Network front end: TCP (length-prefixed frames) and WebSocket (binary
//! frames carrying the same bytes, or text frames carrying the bare JSON
//! payload) feeding one runner thread per trial.
//!
//! A JoinTrial with an empty `trial_id` lands in the open Pending trial,
//! creating one from the served config when none is open. A JoinTrial naming
//! a trial joins that trial or is refused.

use std::collections::HashMap;
use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde_json::json;
use thiserror::Error;
use tungstenite::Message;

use crate::protocol::{self, ActorClass, ActorRef, FrameIoError, MessageKind, ProtocolError, WireMessage};

use super::{run_tick, ActorIo, EndReason, Envelope, Inbound, Phase, Summary, Trial, TrialConfig};

const POLL: Duration = Duration::from_millis(20);

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("PortInUse: port {0} is already in use")]
    PortInUse(u16),
    #[error("Io: {0}")]
    Io(String),
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub config: TrialConfig,
    pub host: String,
    pub port: u16,
    pub ws_port: u16,
    pub data_dir: PathBuf,
}

type EventSink = Arc<dyn Fn(&str) + Send + Sync>;

enum RunnerMsg {
    Join {
        conn: u64,
        msg: WireMessage,
        out: Sender<Outgoing>,
    },
    Frame {
        conn: u64,
        msg: WireMessage,
    },
    Lost {
        conn: u64,
    },
}

enum Outgoing {
    Frame(WireMessage),
    /// Nothing more will be sent; close the write side.
    Close,
}

struct OpenTrial {
    id: String,
    agents_left: usize,
    human_left: usize,
}

#[derive(Default)]
struct HubState {
    trials: HashMap<String, Sender<RunnerMsg>>,
    open: Option<OpenTrial>,
    counter: u64,
    runners: Vec<JoinHandle<Option<Summary>>>,
}

struct Hub {
    config: TrialConfig,
    root: PathBuf,
    shutdown: Arc<AtomicBool>,
    events: EventSink,
    state: Mutex<HubState>,
    next_conn: AtomicU64,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn orchestrator_error(trial_id: &str, reason: impl Into<String>) -> WireMessage {
    WireMessage::new(MessageKind::Error, trial_id, 0, ActorRef::orchestrator())
        .with_body(json!({ "reason": reason.into() }))
}

impl Hub {
    /// Routes a JoinTrial to its runner; on refusal sends the Error and a
    /// close to `out` and returns `None`.
    fn route_join(self: &Arc<Self>, conn: u64, msg: WireMessage, out: &Sender<Outgoing>) -> Option<Sender<RunnerMsg>> {
        let refuse = |reason: String| {
            let _ = out.send(Outgoing::Frame(orchestrator_error(&msg.trial_id, reason)));
            let _ = out.send(Outgoing::Close);
            None
        };
        if self.shutdown.load(Ordering::SeqCst) {
            return refuse("orchestrator is shutting down".into());
        }
        let class = msg.sender.actor_class;
        let mut st = self.state.lock().expect("hub lock");
        let id = if msg.trial_id.is_empty() {
            let fits = |o: &OpenTrial| match class {
                ActorClass::Agent => o.agents_left > 0,
                ActorClass::Human => o.human_left > 0,
                _ => false,
            };
            if !matches!(class, ActorClass::Agent | ActorClass::Human) {
                return refuse("only agents and humans join trials".into());
            }
            if !st.open.as_ref().is_some_and(fits) {
                match self.spawn_trial(&mut st) {
                    Ok(id) => id,
                    Err(e) => return refuse(e),
                };
            }
            st.open.as_ref().expect("open trial").id.clone()
        } else {
            msg.trial_id.clone()
        };
        let Some(tx) = st.trials.get(&id).cloned() else {
            return refuse(format!("unknown trial {id}"));
        };
        if let Some(open) = st.open.as_mut().filter(|o| o.id == id) {
            match class {
                ActorClass::Agent => open.agents_left = open.agents_left.saturating_sub(1),
                ActorClass::Human => open.human_left = open.human_left.saturating_sub(1),
                _ => {}
            }
            if open.agents_left == 0 && open.human_left == 0 {
                st.open = None;
            }
        }
        drop(st);
        let mut msg = msg;
        msg.trial_id = id;
        if tx.send(RunnerMsg::Join { conn, msg, out: out.clone() }).is_err() {
            let _ = out.send(Outgoing::Frame(orchestrator_error("", "trial has ended")));
            let _ = out.send(Outgoing::Close);
            return None;
        }
        Some(tx)
    }

    fn spawn_trial(self: &Arc<Self>, st: &mut HubState) -> Result<String, String> {
        let (n, id) = loop {
            let n = st.counter;
            st.counter += 1;
            let id = format!("trial-{n:04}");
            if !st.trials.contains_key(&id) && !self.root.join(&id).exists() {
                break (n, id);
            }
        };
        let config = TrialConfig {
            seed: self.config.seed.wrapping_add(n),
            ..self.config.clone()
        };
        let trial = Trial::new(id.clone(), config, Some(self.root.clone()), now_ms()).map_err(|e| e.to_string())?;
        let (tx, rx) = mpsc::channel();
        st.trials.insert(id.clone(), tx);
        st.open = Some(OpenTrial {
            id: id.clone(),
            agents_left: trial.config().n_agents,
            human_left: usize::from(trial.config().include_human),
        });
        (self.events)(&format!("trial {id} created"));
        let hub = Arc::clone(self);
        st.runners.push(thread::spawn(move || hub.run_trial(trial, rx)));
        Ok(id)
    }

    fn release(&self, id: &str, class: ActorClass) {
        let mut st = self.state.lock().expect("hub lock");
        if let Some(open) = st.open.as_mut().filter(|o| o.id == id) {
            match class {
                ActorClass::Agent => open.agents_left += 1,
                ActorClass::Human => open.human_left += 1,
                _ => {}
            }
        }
    }

    fn retire(&self, id: &str) {
        let mut st = self.state.lock().expect("hub lock");
        st.trials.remove(id);
        if st.open.as_ref().is_some_and(|o| o.id == id) {
            st.open = None;
        }
    }

    fn run_trial(self: Arc<Self>, mut trial: Trial, rx: Receiver<RunnerMsg>) -> Option<Summary> {
        let mut io = ChannelIo {
            rx,
            conns: HashMap::new(),
            outs: vec![None; trial.config().n_actors()],
            shutdown: Arc::clone(&self.shutdown),
        };
        while trial.phase() == Phase::Pending {
            match io.next(Instant::now() + POLL) {
                Some(RunnerMsg::Join { conn, msg, out }) => {
                    let (slot, frames) = trial.join(&msg);
                    if let Some(slot) = slot {
                        io.conns.insert(conn, slot);
                        io.outs[slot] = Some(out.clone());
                    }
                    for e in frames {
                        if e.to == usize::MAX {
                            let _ = out.send(Outgoing::Frame(e.msg));
                        } else {
                            io.send(e);
                        }
                    }
                    if slot.is_none() {
                        let _ = out.send(Outgoing::Close);
                    }
                    if trial.phase() == Phase::Running {
                        (self.events)(&format!("trial {} running", trial.id()));
                    }
                }
                Some(RunnerMsg::Lost { conn }) => {
                    if let Some(slot) = io.conns.remove(&conn) {
                        if let Some(Some(a)) = trial.roster().get(slot) {
                            self.release(trial.id(), a.actor_class);
                        }
                        trial.leave(slot);
                        io.outs[slot] = None;
                    }
                }
                Some(RunnerMsg::Frame { .. }) => {}
                None if self.shutdown.load(Ordering::SeqCst) => {
                    for e in trial.end(EndReason::Aborted).unwrap_or_default() {
                        io.send(e);
                    }
                }
                None => {}
            }
        }
        while trial.phase() == Phase::Running {
            if let Err(e) = run_tick(&mut trial, &mut io) {
                (self.events)(&format!("trial {} error: {e}", trial.id()));
                for env in trial.end(EndReason::Aborted).unwrap_or_default() {
                    io.send(env);
                }
            }
        }
        for out in io.outs.iter().flatten() {
            let _ = out.send(Outgoing::Close);
        }
        self.retire(trial.id());
        let summary = trial.summary();
        if let Some(s) = &summary {
            (self.events)(&format!("trial {} ended ({})", s.trial_id, s.end_reason));
        }
        summary
    }
}

/// [`ActorIo`] over the runner's inbound queue and per-slot outboxes.
struct ChannelIo {
    rx: Receiver<RunnerMsg>,
    conns: HashMap<u64, usize>,
    outs: Vec<Option<Sender<Outgoing>>>,
    shutdown: Arc<AtomicBool>,
}

impl ChannelIo {
    /// Next queued message before `deadline`, waking periodically so a
    /// shutdown is noticed.
    fn next(&mut self, deadline: Instant) -> Option<RunnerMsg> {
        loop {
            if self.shutdown.load(Ordering::SeqCst) {
                return None;
            }
            let now = Instant::now();
            if now >= deadline {
                return None;
            }
            match self.rx.recv_timeout((deadline - now).min(POLL)) {
                Ok(m) => return Some(m),
                Err(RecvTimeoutError::Timeout) => continue,
                Err(RecvTimeoutError::Disconnected) => return None,
            }
        }
    }
}

impl ActorIo for ChannelIo {
    fn send(&mut self, envelope: Envelope) {
        if let Some(Some(out)) = self.outs.get(envelope.to) {
            let _ = out.send(Outgoing::Frame(envelope.msg));
        }
    }

    fn recv(&mut self, deadline: Instant) -> Inbound {
        loop {
            match self.next(deadline) {
                Some(RunnerMsg::Frame { conn, msg }) => {
                    if let Some(&slot) = self.conns.get(&conn) {
                        return Inbound::Message(slot, msg);
                    }
                }
                Some(RunnerMsg::Lost { conn }) => {
                    if let Some(slot) = self.conns.remove(&conn) {
                        self.outs[slot] = None;
                        return Inbound::Lost(slot);
                    }
                }
                Some(RunnerMsg::Join { msg, out, .. }) => {
                    let refusal = orchestrator_error(&msg.trial_id, "roster full: trial already running");
                    let _ = out.send(Outgoing::Frame(refusal));
                    let _ = out.send(Outgoing::Close);
                }
                None if self.shutdown.load(Ordering::SeqCst) => return Inbound::Abort,
                None => return Inbound::Timeout,
            }
        }
    }
}

/// Per-connection join state shared by the TCP and WebSocket handlers.
struct Session {
    hub: Arc<Hub>,
    conn: u64,
    out: Sender<Outgoing>,
    runner: Option<Sender<RunnerMsg>>,
    closed: bool,
}

impl Session {
    fn new(hub: Arc<Hub>, out: Sender<Outgoing>) -> Self {
        let conn = hub.next_conn.fetch_add(1, Ordering::SeqCst);
        Self {
            hub,
            conn,
            out,
            runner: None,
            closed: false,
        }
    }

    fn incoming(&mut self, msg: WireMessage) {
        if self.closed {
            return;
        }
        match &self.runner {
            Some(r) => {
                if msg.kind == MessageKind::JoinTrial {
                    let _ = self.out.send(Outgoing::Frame(orchestrator_error(&msg.trial_id, "already joined")));
                } else {
                    let _ = r.send(RunnerMsg::Frame { conn: self.conn, msg });
                }
            }
            None if msg.kind == MessageKind::JoinTrial => {
                self.runner = self.hub.route_join(self.conn, msg, &self.out);
                self.closed = self.runner.is_none();
            }
            None if msg.kind == MessageKind::Heartbeat => {}
            None => {
                let _ = self.out.send(Outgoing::Frame(orchestrator_error(&msg.trial_id, "send JoinTrial first")));
            }
        }
    }

    fn malformed(&mut self, e: &ProtocolError) {
        let _ = self.out.send(Outgoing::Frame(orchestrator_error("", e.to_string())));
    }

    fn lost(&mut self) {
        if let Some(r) = self.runner.take() {
            let _ = r.send(RunnerMsg::Lost { conn: self.conn });
        }
    }
}

fn handle_tcp(stream: TcpStream, hub: Arc<Hub>) {
    let _ = stream.set_nodelay(true);
    let Ok(mut writer) = stream.try_clone() else {
        return;
    };
    let (tx, rx) = mpsc::channel::<Outgoing>();
    thread::spawn(move || {
        for out in rx {
            match out {
                Outgoing::Frame(msg) => {
                    if protocol::write_frame(&mut writer, &msg).is_err() {
                        break;
                    }
                }
                Outgoing::Close => break,
            }
        }
        let _ = writer.shutdown(std::net::Shutdown::Write);
    });
    let mut session = Session::new(hub, tx);
    let mut reader = std::io::BufReader::new(stream);
    loop {
        match protocol::read_frame(&mut reader) {
            Ok(Some(msg)) => session.incoming(msg),
            Ok(None) | Err(FrameIoError::Io(_)) => break,
            Err(FrameIoError::Protocol(
                e @ (ProtocolError::MalformedPayload(_) | ProtocolError::UnknownKind(_) | ProtocolError::InvalidMessage(_)),
            )) => session.malformed(&e),
            Err(FrameIoError::Protocol(e)) => {
                // framing is lost; nothing after this can be trusted
                session.malformed(&e);
                break;
            }
        }
    }
    session.lost();
}

fn handle_ws(stream: TcpStream, hub: Arc<Hub>) {
    let _ = stream.set_nodelay(true);
    let Ok(mut ws) = tungstenite::accept(stream) else {
        return;
    };
    if ws.get_ref().set_read_timeout(Some(POLL)).is_err() {
        return;
    }
    let (tx, rx) = mpsc::channel::<Outgoing>();
    let mut session = Session::new(hub, tx);
    let mut binary = true;
    let mut closing = false;
    loop {
        while let Ok(out) = rx.try_recv() {
            match out {
                Outgoing::Frame(msg) => {
                    let sent = if binary {
                        protocol::encode(&msg).map(|b| Message::Binary(b.into()))
                    } else {
                        protocol::encode_payload(&msg).map(|s| Message::Text(s.into()))
                    };
                    if let Ok(m) = sent {
                        let _ = ws.send(m);
                    }
                }
                Outgoing::Close if !closing => {
                    closing = true;
                    let _ = ws.close(None);
                }
                Outgoing::Close => {}
            }
        }
        match ws.read() {
            Ok(Message::Binary(bytes)) => {
                binary = true;
                match protocol::decode(&bytes) {
                    Ok((msg, rest)) if rest.is_empty() => session.incoming(msg),
                    Ok(_) => session.malformed(&ProtocolError::MalformedPayload(
                        "one protocol frame per WebSocket message".into(),
                    )),
                    Err(e) => session.malformed(&e),
                }
            }
            Ok(Message::Text(text)) => {
                binary = false;
                match protocol::decode_payload(text.as_bytes()) {
                    Ok(msg) => session.incoming(msg),
                    Err(e) => session.malformed(&e),
                }
            }
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                let _ = ws.flush();
            }
            Err(_) => break,
        }
    }
    session.lost();
}

fn bind(host: &str, port: u16) -> Result<TcpListener, ServeError> {
    TcpListener::bind((host, port)).map_err(|e| match e.kind() {
        ErrorKind::AddrInUse => ServeError::PortInUse(port),
        _ => ServeError::Io(format!("{host}:{port}: {e}")),
    })
}

/// Bound but not yet serving. Binding touches nothing on disk.
pub struct Server {
    tcp: TcpListener,
    ws: TcpListener,
    hub: Arc<Hub>,
}

impl Server {
    pub fn bind(opts: ServeOptions, events: impl Fn(&str) + Send + Sync + 'static) -> Result<Self, ServeError> {
        opts.config
            .validate()
            .map_err(|e| ServeError::Io(e.to_string()))?;
        let tcp = bind(&opts.host, opts.port)?;
        let ws = bind(&opts.host, opts.ws_port)?;
        for l in [&tcp, &ws] {
            l.set_nonblocking(true).map_err(|e| ServeError::Io(e.to_string()))?;
        }
        let hub = Arc::new(Hub {
            config: opts.config,
            root: opts.data_dir,
            shutdown: Arc::new(AtomicBool::new(false)),
            events: Arc::new(events),
            state: Mutex::new(HubState::default()),
            next_conn: AtomicU64::new(0),
        });
        Ok(Self { tcp, ws, hub })
    }

    pub fn tcp_addr(&self) -> SocketAddr {
        self.tcp.local_addr().expect("bound listener")
    }

    pub fn ws_addr(&self) -> SocketAddr {
        self.ws.local_addr().expect("bound listener")
    }

    /// Setting this flag stops accepting, aborts running trials and makes
    /// [`Server::run`] return.
    pub fn shutdown_flag(&self) -> Arc<AtomicBool> {
        Arc::clone(&self.hub.shutdown)
    }

    /// Serves until the shutdown flag is set, then drains every trial and
    /// returns their summaries.
    pub fn run(self) -> Result<Vec<Summary>, ServeError> {
        std::fs::create_dir_all(&self.hub.root).map_err(|e| ServeError::Io(format!("{}: {e}", self.hub.root.display())))?;
        while !self.hub.shutdown.load(Ordering::SeqCst) {
            let mut idle = true;
            if let Ok((s, _)) = self.tcp.accept() {
                idle = false;
                let _ = s.set_nonblocking(false);
                let hub = Arc::clone(&self.hub);
                thread::spawn(move || handle_tcp(s, hub));
            }
            if let Ok((s, _)) = self.ws.accept() {
                idle = false;
                let _ = s.set_nonblocking(false);
                let hub = Arc::clone(&self.hub);
                thread::spawn(move || handle_ws(s, hub));
            }
            if idle {
                thread::sleep(Duration::from_millis(5));
            }
        }
        let runners = std::mem::take(&mut self.hub.state.lock().expect("hub lock").runners);
        let mut summaries = Vec::new();
        for r in runners {
            if let Ok(Some(s)) = r.join() {
                summaries.push(s);
            }
        }
        Ok(summaries)
    }
}
