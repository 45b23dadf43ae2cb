//! Networked round over TCP. One coordinator thread owns the round state;
//! per-connection reader threads only forward lines to it, so aggregation
//! runs exactly once and never on a partial set of agents.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, ErrorKind, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, warn};

use super::wire::{self, ErrorMessage, ThresholdMessage, WireMessage};
use super::{agent_messages, Accepted, AuditRecord, CalibrationRoundConfig, Direction, RoundCollector};
use crate::aggregation::{AggregatedThreshold, AggregationOutcome};
use crate::calibration::{AgentId, ScoreSample};
use crate::error::{Error, Result};

/// Longest accepted line; a full score chunk is far below this.
const MAX_LINE_BYTES: u64 = 4 << 20;
const POLL: Duration = Duration::from_millis(2);
/// Extra time an agent waits beyond the round timeout.
const AGENT_GRACE: Duration = Duration::from_secs(5);

#[derive(Debug)]
pub struct ServerRound {
    pub outcome: AggregationOutcome,
    pub audit: Vec<AuditRecord>,
    /// Upstream lines in arrival order.
    pub upstream: Vec<String>,
}

pub struct ServerHandle {
    local_addr: SocketAddr,
    thread: JoinHandle<Result<ServerRound>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    /// Blocks until the round completes or aborts.
    pub fn wait(self) -> Result<ServerRound> {
        self.thread.join().unwrap_or_else(|_| Err(Error::Transport(std::io::Error::other("server thread panicked"))))
    }
}

enum Event {
    Line(u64, String),
    Closed(u64),
}

struct Connection {
    writer: TcpStream,
    agent: Option<AgentId>,
    contributed: bool,
    rejected: bool,
}

fn error_code(err: &Error) -> &str {
    match err {
        Error::Validation(_) => "validation",
        Error::Protocol { code, .. } => code,
        Error::Parse(_) => "parse",
        Error::PartialRound { .. } => "partial_round",
        _ => "internal",
    }
}

/// Binds and starts a server for one round; returns once the socket listens.
pub fn serve(bind: &str, cfg: &CalibrationRoundConfig) -> Result<ServerHandle> {
    let listener = TcpListener::bind(bind)?;
    listener.set_nonblocking(true)?;
    let local_addr = listener.local_addr()?;
    let cfg = cfg.clone();
    let thread = thread::Builder::new()
        .name(format!("fedwq-round-{}", cfg.round_id))
        .spawn(move || Coordinator::new(cfg).run(listener))?;
    Ok(ServerHandle { local_addr, thread })
}

fn spawn_reader(id: u64, stream: TcpStream, tx: Sender<Event>) {
    thread::spawn(move || {
        let mut reader = BufReader::new(stream);
        loop {
            let mut line = String::new();
            match (&mut reader).take(MAX_LINE_BYTES).read_line(&mut line) {
                Ok(0) | Err(_) => break,
                Ok(_) => {
                    if tx.send(Event::Line(id, line)).is_err() {
                        return;
                    }
                }
            }
        }
        let _ = tx.send(Event::Closed(id));
    });
}

struct Coordinator {
    cfg: CalibrationRoundConfig,
    collector: RoundCollector,
    connections: BTreeMap<u64, Connection>,
    audit: Vec<AuditRecord>,
    upstream: Vec<String>,
}

impl Coordinator {
    fn new(cfg: CalibrationRoundConfig) -> Self {
        Coordinator {
            collector: RoundCollector::new(cfg.clone()),
            cfg,
            connections: BTreeMap::new(),
            audit: Vec::new(),
            upstream: Vec::new(),
        }
    }

    fn run(mut self, listener: TcpListener) -> Result<ServerRound> {
        let (tx, rx) = mpsc::channel();
        let deadline = Instant::now() + self.cfg.timeout;
        let mut next_id = 0u64;
        loop {
            loop {
                match listener.accept() {
                    Ok((stream, peer)) => {
                        debug!("round {}: connection from {peer}", self.cfg.round_id);
                        stream.set_nonblocking(false)?;
                        let reader = stream.try_clone()?;
                        spawn_reader(next_id, reader, tx.clone());
                        self.connections.insert(
                            next_id,
                            Connection { writer: stream, agent: None, contributed: false, rejected: false },
                        );
                        next_id += 1;
                    }
                    Err(e) if e.kind() == ErrorKind::WouldBlock => break,
                    Err(e) => return Err(e.into()),
                }
            }
            match rx.recv_timeout(POLL) {
                Ok(Event::Line(id, line)) => self.on_line(id, line),
                Ok(Event::Closed(id)) => {
                    let dropped = self
                        .connections
                        .get(&id)
                        .filter(|c| !c.contributed && !c.rejected && c.agent.is_some())
                        .and_then(|c| c.agent);
                    if let Some(agent) = dropped {
                        return Err(self.abort(format!("agent {agent} disconnected before reporting")));
                    }
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => unreachable!("coordinator holds a sender"),
            }
            if self.collector.is_complete() {
                return self.complete();
            }
            if Instant::now() >= deadline {
                return Err(self.abort(format!("timed out after {:?}", self.cfg.timeout)));
            }
        }
    }

    fn send(&mut self, id: u64, message: &WireMessage) {
        let line = wire::encode(message);
        if let Some(conn) = self.connections.get_mut(&id) {
            self.audit.push(AuditRecord::new(
                &self.cfg,
                Direction::Downstream,
                conn.agent,
                message.type_name(),
                line.len(),
            ));
            if let Err(e) = conn.writer.write_all(line.as_bytes()) {
                warn!("round {}: write to connection {id} failed: {e}", self.cfg.round_id);
            }
        }
    }

    fn reply_error(&mut self, id: u64, err: &Error) {
        let message = WireMessage::Error(ErrorMessage {
            round_id: self.cfg.round_id.clone(),
            code: error_code(err).to_string(),
            detail: err.to_string(),
        });
        self.send(id, &message);
    }

    fn on_line(&mut self, id: u64, line: String) {
        let decoded = wire::decode(&line);
        let agent = match &decoded {
            Ok(WireMessage::Summary(m)) => Some(m.agent_id),
            Ok(WireMessage::Scores(m)) => Some(m.agent_id),
            _ => None,
        };
        let kind = decoded.as_ref().map(|m| m.type_name()).unwrap_or("malformed");
        self.audit.push(AuditRecord::new(&self.cfg, Direction::Upstream, agent, kind, line.len()));
        self.upstream.push(line);
        if let Some(conn) = self.connections.get_mut(&id) {
            if conn.agent.is_none() {
                conn.agent = agent;
            }
        }
        let result = decoded.and_then(|m| self.collector.accept(m));
        match result {
            Ok(Accepted::Contribution(_)) => {
                if let Some(conn) = self.connections.get_mut(&id) {
                    conn.contributed = true;
                }
            }
            Ok(Accepted::Partial(_)) => {}
            Err(err) => {
                warn!("round {}: rejected message on connection {id}: {err}", self.cfg.round_id);
                self.reply_error(id, &err);
                // A connection that already contributed stays open for its broadcast.
                let close = matches!(err, Error::Parse(_)) || !self.connections.get(&id).is_some_and(|c| c.contributed);
                if close {
                    if let Some(conn) = self.connections.get_mut(&id) {
                        conn.rejected = true;
                        let _ = conn.writer.shutdown(Shutdown::Both);
                    }
                }
            }
        }
    }

    fn abort(&mut self, reason: String) -> Error {
        let err =
            Error::PartialRound { received: self.collector.contributed(), expected: self.cfg.agent_count, reason };
        let ids: Vec<u64> = self.connections.iter().filter(|(_, c)| !c.rejected).map(|(id, _)| *id).collect();
        for id in ids {
            self.reply_error(id, &err);
        }
        self.close_all();
        err
    }

    fn close_all(&mut self) {
        for conn in self.connections.values() {
            let _ = conn.writer.shutdown(Shutdown::Both);
        }
    }

    fn complete(mut self) -> Result<ServerRound> {
        let outcome = match self.collector.finish() {
            Ok(outcome) => outcome,
            Err(err) => {
                let reason = err.to_string();
                let _ = self.abort(reason);
                return Err(err);
            }
        };
        let targets: Vec<(u64, AgentId)> = self
            .connections
            .iter()
            .filter(|(_, c)| c.contributed)
            .filter_map(|(id, c)| c.agent.map(|a| (*id, a)))
            .collect();
        for (id, agent) in targets {
            let threshold = outcome.for_agent(agent).expect("contributing agent has a threshold");
            let message =
                WireMessage::Threshold(ThresholdMessage::new(&self.cfg.round_id, self.cfg.alpha(), threshold));
            self.send(id, &message);
        }
        self.close_all();
        Ok(ServerRound { outcome, audit: self.audit, upstream: self.upstream })
    }
}

/// Computes the local summary, sends it, and blocks for the broadcast.
pub fn run_agent(
    addr: impl ToSocketAddrs,
    agent_id: AgentId,
    sample: &ScoreSample,
    cfg: &CalibrationRoundConfig,
) -> Result<AggregatedThreshold> {
    let mut stream = TcpStream::connect(addr)?;
    stream.set_read_timeout(Some(cfg.timeout + AGENT_GRACE))?;
    for message in agent_messages(agent_id, sample, cfg) {
        stream.write_all(wire::encode(&message).as_bytes())?;
    }
    stream.flush()?;
    let mut line = String::new();
    let read = BufReader::new(&stream).take(MAX_LINE_BYTES).read_line(&mut line)?;
    if read == 0 {
        return Err(Error::Transport(std::io::Error::new(
            ErrorKind::UnexpectedEof,
            "server closed the connection without a reply",
        )));
    }
    match wire::decode(&line)? {
        WireMessage::Threshold(m) => {
            if m.round_id != cfg.round_id {
                return Err(Error::protocol(
                    "round_mismatch",
                    format!("expected round {:?}, server answered for {:?}", cfg.round_id, m.round_id),
                ));
            }
            if m.alpha.to_bits() != cfg.alpha().to_bits() {
                return Err(Error::protocol(
                    "alpha_mismatch",
                    format!("agent calibrated at alpha = {}, server aggregated at {}", cfg.alpha(), m.alpha),
                ));
            }
            if m.method != cfg.method {
                return Err(Error::protocol(
                    "method_mismatch",
                    format!("agent expected {}, server ran {}", cfg.method, m.method),
                ));
            }
            Ok(m.aggregated())
        }
        WireMessage::Error(m) if m.code == "validation" => Err(Error::Validation(m.detail)),
        WireMessage::Error(m) => Err(Error::Protocol { code: m.code, detail: m.detail }),
        other => Err(Error::protocol("unexpected_message", format!("server sent a {} message", other.type_name()))),
    }
}
