use std::fs;
use std::io::{BufRead, BufReader};
use std::net::{SocketAddr, TcpStream};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver};
use std::thread;
use std::time::Duration;

use serde_json::json;

use trialmesh::protocol::{self, ActorRef, MessageKind, WireMessage};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_trialmesh"))
}

pub struct Serve {
    pub child: Child,
    pub lines: Receiver<String>,
    pub tcp: SocketAddr,
    pub ws: SocketAddr,
}

impl Serve {
    pub fn start(config: serde_json::Value, data: &Path) -> Serve {
        let cfg = data.parent().unwrap().join("serve.json");
        fs::write(&cfg, config.to_string()).unwrap();
        let mut child = bin()
            .args(["serve", "--port", "0", "--ws-port", "0", "--config"])
            .arg(&cfg)
            .arg("--data-dir")
            .arg(data)
            .stdout(Stdio::piped())
            .spawn()
            .unwrap();
        let (tx, lines) = mpsc::channel();
        let out = child.stdout.take().unwrap();
        thread::spawn(move || {
            for line in BufReader::new(out).lines().map_while(Result::ok) {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let first = lines.recv_timeout(Duration::from_secs(10)).expect("serve prints its ports");
        let addr = |key: &str| -> SocketAddr {
            let tok = first.split_whitespace().find_map(|t| t.strip_prefix(key)).unwrap();
            tok.parse().unwrap()
        };
        Serve {
            tcp: addr("tcp="),
            ws: addr("ws="),
            child,
            lines,
        }
    }

    pub fn wait_for(&self, needle: &str) -> String {
        loop {
            let line = self.lines.recv_timeout(Duration::from_secs(10)).unwrap_or_else(|_| panic!("no line with {needle:?}"));
            if line.contains(needle) {
                return line;
            }
        }
    }

    pub fn signal(&self, sig: &str) {
        let ok = Command::new("kill").args([sig, &self.child.id().to_string()]).status().unwrap();
        assert!(ok.success());
    }
}

impl Drop for Serve {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// One scripted agent over TCP. Plays `ticks` ticks (or until EndTrial) and
/// returns what it received.
/// The second vector is the whole session, both directions, in order.
pub fn tcp_agent(
    addr: SocketAddr,
    trial_id: &str,
    index: usize,
    ticks: Option<u64>,
) -> (TcpStream, Vec<WireMessage>, Vec<WireMessage>) {
    let mut s = TcpStream::connect(addr).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
    let me = ActorRef::agent(index, "scripted");
    let join = WireMessage::new(MessageKind::JoinTrial, trial_id, 0, me.clone());
    protocol::write_frame(&mut s, &join).unwrap();
    let mut session = vec![join];
    let mut seen = Vec::new();
    let mut played = 0;
    while let Some(msg) = protocol::read_frame(&mut s).unwrap() {
        let kind = msg.kind;
        let (trial, tick) = (msg.trial_id.clone(), msg.tick_id);
        seen.push(msg.clone());
        session.push(msg);
        match kind {
            MessageKind::Observation => {
                let act = WireMessage::new(MessageKind::Action, trial, tick, me.clone())
                    .with_body(json!({ "action": (["North", "East", "South", "West"][tick as usize % 4]) }));
                protocol::write_frame(&mut s, &act).unwrap();
                session.push(act);
            }
            MessageKind::TickResult => {
                played += 1;
                if Some(played) == ticks {
                    break;
                }
            }
            MessageKind::EndTrial => break,
            MessageKind::Error if seen.len() == 1 => break,
            _ => {}
        }
    }
    (s, seen, session)
}
