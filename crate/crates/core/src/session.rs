//! Drivers that run one protocol session over a transport.

use std::collections::BTreeMap;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::GaussianNBModel;
use crate::protocol::{
    site_node, Coordinator, CoordinatorEvent, CoordinatorPhase, Destination, Outgoing, Party,
    PartyEvent, ProtocolError, ProtocolMessage, COORDINATOR_NODE,
};
use crate::transport::{decode_frame, encode_frame, write_frame, InProcessNetwork, TcpEndpoint, TransportError};

/// Per-phase deadline on real connections.
pub const DEFAULT_PHASE_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    #[default]
    InProcess,
    /// Real sockets on 127.0.0.1, one thread per party.
    TcpLoopback,
}

/// One message as it crossed the wire.
#[derive(Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub from: String,
    pub to: String,
    /// Frame body (canonical JSON), without the length prefix.
    pub body: Vec<u8>,
}

impl std::fmt::Debug for TraceEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TraceEntry")
            .field("from", &self.from)
            .field("to", &self.to)
            .field("body", &String::from_utf8_lossy(&self.body))
            .finish()
    }
}

impl TraceEntry {
    pub fn message(&self) -> Result<ProtocolMessage, ProtocolError> {
        ProtocolMessage::decode(&self.body)
    }
}

#[derive(Debug)]
pub struct SessionOutcome {
    pub model: GaussianNBModel,
    pub model_json: String,
    pub trace: Vec<TraceEntry>,
    pub coordinator_history: Vec<CoordinatorPhase>,
}

#[derive(Debug, Error)]
pub enum SessionFailure {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// A failed session together with every message exchanged before the failure.
#[derive(Debug, Error)]
#[error("session failed: {failure}")]
pub struct SessionError {
    pub failure: SessionFailure,
    pub trace: Vec<TraceEntry>,
}

impl SessionError {
    fn new(failure: impl Into<SessionFailure>, trace: Vec<TraceEntry>) -> Self {
        Self { failure: failure.into(), trace }
    }
}

pub fn run_session(
    coordinator: Coordinator,
    parties: Vec<Party>,
    transport: TransportKind,
) -> Result<SessionOutcome, SessionError> {
    match transport {
        TransportKind::InProcess => run_in_process(coordinator, parties),
        TransportKind::TcpLoopback => run_tcp_loopback(coordinator, parties, DEFAULT_PHASE_TIMEOUT),
    }
}

fn destination_nodes(to: Destination, sites: &[String]) -> Vec<String> {
    match to {
        Destination::Coordinator => vec![COORDINATOR_NODE.to_string()],
        Destination::Site(id) => vec![site_node(id)],
        Destination::AllSites => sites.to_vec(),
    }
}

/// Runs a session on the deterministic in-process network. The full trace is
/// a function of the inputs alone when the null envelope scheme is used.
pub fn run_in_process(
    mut coordinator: Coordinator,
    mut parties: Vec<Party>,
) -> Result<SessionOutcome, SessionError> {
    let sites: Vec<String> = parties.iter().map(Party::node_id).collect();
    let mut nodes = vec![COORDINATOR_NODE.to_string()];
    nodes.extend(sites.iter().cloned());
    let mut net = InProcessNetwork::new(nodes);
    let mut trace = Vec::new();

    let route = |net: &mut InProcessNetwork, from: &str, out: Vec<Outgoing>| {
        for o in out {
            let frame = encode_frame(&o.message.encode())?;
            for to in destination_nodes(o.to, &sites) {
                net.send(from, &to, frame.clone())?;
            }
        }
        Ok::<(), TransportError>(())
    };

    let out = coordinator.step(CoordinatorEvent::Begin);
    if let Err(e) = route(&mut net, COORDINATOR_NODE, out) {
        return Err(SessionError::new(e, trace));
    }
    while let Some(d) = net.deliver_next() {
        let body = match decode_frame(&d.frame) {
            Ok(b) => b.to_vec(),
            Err(e) => return Err(SessionError::new(e, trace)),
        };
        trace.push(TraceEntry { from: d.from, to: d.to.clone(), body });
        let msg = match trace.last().map(TraceEntry::message) {
            Some(Ok(m)) => m,
            Some(Err(e)) => return Err(SessionError::new(e, trace)),
            None => unreachable!(),
        };
        let result = if d.to == COORDINATOR_NODE {
            let out = coordinator.step(CoordinatorEvent::Message(msg));
            route(&mut net, COORDINATOR_NODE, out)
        } else {
            let party = parties
                .iter_mut()
                .find(|p| p.node_id() == d.to)
                .expect("every site node has a party");
            let out = party.step(PartyEvent::Message(msg));
            route(&mut net, &d.to, out)
        };
        if let Err(e) = result {
            return Err(SessionError::new(e, trace));
        }
    }
    finish(&coordinator, &parties, trace)
}

fn finish(
    coordinator: &Coordinator,
    parties: &[Party],
    trace: Vec<TraceEntry>,
) -> Result<SessionOutcome, SessionError> {
    if let Some(e) = coordinator.failure() {
        return Err(SessionError::new(e.clone(), trace));
    }
    let Some(model) = coordinator.model() else {
        let e = ProtocolError::Timeout(format!(
            "session stalled in coordinator phase {:?}",
            coordinator.phase()
        ));
        return Err(SessionError::new(e, trace));
    };
    for party in parties.iter().filter(|p| coordinator.roster().contains(&p.site_id())) {
        if party.model() != Some(model) {
            let e = party.failure().cloned().unwrap_or_else(|| {
                ProtocolError::ProtocolViolation(format!(
                    "{} did not receive the model (phase {:?})",
                    party.node_id(),
                    party.phase()
                ))
            });
            return Err(SessionError::new(e, trace));
        }
    }
    Ok(SessionOutcome {
        model: model.clone(),
        model_json: model.to_canonical_json(),
        trace,
        coordinator_history: coordinator.history().to_vec(),
    })
}

enum NetEvent {
    Connected(usize, TcpStream),
    Frame(usize, Vec<u8>),
    Closed(usize, Option<String>),
}

fn spawn_acceptor(
    listener: TcpListener,
    tx: mpsc::Sender<NetEvent>,
    stop: Arc<AtomicBool>,
) -> Result<thread::JoinHandle<()>, TransportError> {
    listener.set_nonblocking(true)?;
    Ok(thread::spawn(move || {
        let mut next_id = 0;
        while !stop.load(Ordering::Relaxed) {
            match listener.accept() {
                Ok((stream, peer)) => {
                    log::debug!("accepted connection {next_id} from {peer}");
                    let id = next_id;
                    next_id += 1;
                    let endpoint = stream
                        .set_nonblocking(false)
                        .map_err(TransportError::from)
                        .and_then(|_| TcpEndpoint::new(stream));
                    let mut endpoint = match endpoint {
                        Ok(e) => e,
                        Err(e) => {
                            log::warn!("dropping connection {id}: {e}");
                            continue;
                        }
                    };
                    let Ok(writer) = endpoint.writer() else { continue };
                    if tx.send(NetEvent::Connected(id, writer)).is_err() {
                        return;
                    }
                    let tx = tx.clone();
                    thread::spawn(move || loop {
                        match endpoint.recv() {
                            Ok(Some(body)) => {
                                if tx.send(NetEvent::Frame(id, body)).is_err() {
                                    return;
                                }
                            }
                            Ok(None) => {
                                let _ = tx.send(NetEvent::Closed(id, None));
                                return;
                            }
                            Err(e) => {
                                let _ = tx.send(NetEvent::Closed(id, Some(e.to_string())));
                                return;
                            }
                        }
                    });
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    thread::sleep(Duration::from_millis(5));
                }
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    thread::sleep(Duration::from_millis(5));
                }
            }
        }
    }))
}

/// Serves one coordinator session on `listener`. Sites may connect at any
/// time before the roster closes; each receives Init on connection. Every
/// phase must complete within `phase_timeout`.
pub fn serve_coordinator(
    listener: TcpListener,
    mut coordinator: Coordinator,
    phase_timeout: Duration,
) -> Result<SessionOutcome, SessionError> {
    let (tx, rx) = mpsc::channel();
    let stop = Arc::new(AtomicBool::new(false));
    let acceptor = match spawn_acceptor(listener, tx, stop.clone()) {
        Ok(h) => h,
        Err(e) => return Err(SessionError::new(e, Vec::new())),
    };

    let mut trace = Vec::new();
    let mut writers: BTreeMap<usize, TcpStream> = BTreeMap::new();
    let mut site_conn: BTreeMap<u32, usize> = BTreeMap::new();
    let mut init_body: Option<Vec<u8>> = None;

    let route = |out: Vec<Outgoing>,
                     writers: &mut BTreeMap<usize, TcpStream>,
                     site_conn: &BTreeMap<u32, usize>,
                     trace: &mut Vec<TraceEntry>,
                     init_body: &mut Option<Vec<u8>>| {
        for o in out {
            let body = o.message.encode();
            let targets: Vec<(String, usize)> = match o.to {
                Destination::Coordinator => Vec::new(),
                Destination::Site(id) => site_conn
                    .get(&id)
                    .map(|&c| vec![(site_node(id), c)])
                    .unwrap_or_default(),
                Destination::AllSites => {
                    if matches!(o.message, ProtocolMessage::Init { .. }) {
                        *init_body = Some(body.clone());
                    }
                    writers.keys().map(|&c| (format!("conn-{c}"), c)).collect()
                }
            };
            for (label, conn) in targets {
                trace.push(TraceEntry { from: COORDINATOR_NODE.into(), to: label, body: body.clone() });
                if let Some(w) = writers.get_mut(&conn) {
                    if let Err(e) = write_frame(w, &body) {
                        log::warn!("write to connection {conn} failed: {e}");
                    }
                }
            }
        }
    };

    let out = coordinator.step(CoordinatorEvent::Begin);
    route(out, &mut writers, &site_conn, &mut trace, &mut init_body);
    let mut phase = coordinator.phase();
    let mut deadline = Instant::now() + phase_timeout;

    while !coordinator.is_finished() {
        let wait = deadline.saturating_duration_since(Instant::now());
        let out = match rx.recv_timeout(wait) {
            Ok(NetEvent::Connected(id, mut w)) => {
                if let Some(body) = &init_body {
                    trace.push(TraceEntry {
                        from: COORDINATOR_NODE.into(),
                        to: format!("conn-{id}"),
                        body: body.clone(),
                    });
                    if let Err(e) = write_frame(&mut w, body) {
                        log::warn!("sending Init to connection {id} failed: {e}");
                    }
                }
                writers.insert(id, w);
                Vec::new()
            }
            Ok(NetEvent::Frame(id, body)) => {
                let from = site_conn
                    .iter()
                    .find(|(_, &c)| c == id)
                    .map(|(&s, _)| site_node(s))
                    .unwrap_or_else(|| format!("conn-{id}"));
                trace.push(TraceEntry { from, to: COORDINATOR_NODE.into(), body: body.clone() });
                match ProtocolMessage::decode(&body) {
                    Ok(msg) => {
                        if let ProtocolMessage::Ready { site_id, .. } = &msg {
                            site_conn.entry(*site_id).or_insert(id);
                        }
                        coordinator.step(CoordinatorEvent::Message(msg))
                    }
                    Err(e) => {
                        log::warn!("ignoring malformed frame from connection {id}: {e}");
                        Vec::new()
                    }
                }
            }
            Ok(NetEvent::Closed(id, reason)) => {
                log::debug!("connection {id} closed: {}", reason.as_deref().unwrap_or("eof"));
                writers.remove(&id);
                Vec::new()
            }
            Err(RecvTimeoutError::Timeout) => coordinator.step(CoordinatorEvent::Deadline),
            Err(RecvTimeoutError::Disconnected) => coordinator.step(CoordinatorEvent::Deadline),
        };
        route(out, &mut writers, &site_conn, &mut trace, &mut init_body);
        if coordinator.phase() != phase {
            phase = coordinator.phase();
            deadline = Instant::now() + phase_timeout;
        }
    }

    stop.store(true, Ordering::Relaxed);
    for w in writers.values() {
        let _ = w.shutdown(std::net::Shutdown::Write);
    }
    let _ = acceptor.join();
    finish(&coordinator, &[], trace)
}

/// Runs one party against a coordinator at `addr`, retrying the connection
/// until `phase_timeout` elapses. Returns the party in its final state.
pub fn run_party_tcp(
    addr: SocketAddr,
    mut party: Party,
    phase_timeout: Duration,
) -> Result<Party, SessionError> {
    let start = Instant::now();
    let mut endpoint = loop {
        match crate::transport::tcp_connect(addr) {
            Ok(e) => break e,
            Err(e) if start.elapsed() >= phase_timeout => {
                return Err(SessionError::new(e, Vec::new()))
            }
            Err(_) => thread::sleep(Duration::from_millis(50)),
        }
    };
    let mut trace = Vec::new();
    if let Err(e) = endpoint.set_read_timeout(Some(phase_timeout)) {
        return Err(SessionError::new(e, trace));
    }
    let node = party.node_id();
    while !party.is_finished() {
        let event = match endpoint.recv() {
            Ok(Some(body)) => {
                trace.push(TraceEntry { from: COORDINATOR_NODE.into(), to: node.clone(), body: body.clone() });
                match ProtocolMessage::decode(&body) {
                    Ok(m) => PartyEvent::Message(m),
                    Err(e) => return Err(SessionError::new(e, trace)),
                }
            }
            Ok(None) => {
                let e = ProtocolError::Timeout(format!(
                    "coordinator closed the connection while {node} was in phase {:?}",
                    party.phase()
                ));
                return Err(SessionError::new(e, trace));
            }
            Err(TransportError::Io(e))
                if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) =>
            {
                PartyEvent::Deadline
            }
            Err(e) => return Err(SessionError::new(e, trace)),
        };
        for o in party.step(event) {
            let body = o.message.encode();
            trace.push(TraceEntry { from: node.clone(), to: COORDINATOR_NODE.into(), body: body.clone() });
            if let Err(e) = endpoint.send(&body) {
                return Err(SessionError::new(e, trace));
            }
        }
    }
    endpoint.shutdown();
    match party.failure() {
        Some(e) => Err(SessionError::new(e.clone(), trace)),
        None => Ok(party),
    }
}

/// Runs coordinator and parties over real sockets on the loopback interface.
pub fn run_tcp_loopback(
    coordinator: Coordinator,
    parties: Vec<Party>,
    phase_timeout: Duration,
) -> Result<SessionOutcome, SessionError> {
    let listener = match crate::transport::tcp_listen("127.0.0.1:0") {
        Ok(l) => l,
        Err(e) => return Err(SessionError::new(e, Vec::new())),
    };
    let addr = match listener.local_addr() {
        Ok(a) => a,
        Err(e) => return Err(SessionError::new(TransportError::Io(e), Vec::new())),
    };
    let handles: Vec<_> = parties
        .into_iter()
        .map(|p| thread::spawn(move || run_party_tcp(addr, p, phase_timeout)))
        .collect();
    let outcome = serve_coordinator(listener, coordinator, phase_timeout);
    let finished: Vec<Result<Party, SessionError>> = handles
        .into_iter()
        .map(|h| h.join().expect("party thread panicked"))
        .collect();
    let outcome = outcome?;
    for party in finished {
        let party = party?;
        if party.model() != Some(&outcome.model) {
            let e = ProtocolError::ProtocolViolation(format!(
                "{} holds a different model",
                party.node_id()
            ));
            return Err(SessionError::new(e, outcome.trace));
        }
    }
    Ok(outcome)
}
