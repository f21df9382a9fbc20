//! TCP transport for federated rounds.

use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use super::protocol::{digest_hex, params_from_b64, params_to_b64, Frame};
use super::{digest, fed_avg, local_train, ClientState, ClientUpdate, FedConfig, RoundRecord};
use crate::error::{Error, Result};
use crate::mdfnn::ModelParams;

struct Conn {
    client_id: u32,
    examples: usize,
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

fn send(writer: &mut TcpStream, frame: &Frame, log: &mut Vec<String>) -> Result<()> {
    let line = frame.to_line();
    writer.write_all(line.as_bytes())?;
    writer.flush()?;
    log.push(line.trim_end().to_owned());
    Ok(())
}

fn recv(reader: &mut BufReader<TcpStream>, what: &str, log: &mut Vec<String>) -> Result<Frame> {
    let mut line = String::new();
    match reader.read_line(&mut line) {
        Ok(0) => Err(Error::Protocol(format!("connection closed while waiting for {what}"))),
        Ok(_) => {
            log.push(line.trim_end().to_owned());
            Frame::parse(&line)
        }
        Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
            Err(Error::Timeout(what.to_owned()))
        }
        Err(e) => Err(e.into()),
    }
}

/// Aggregation server. Every frame sent or received is kept in the
/// transcript.
pub struct FedServer {
    listener: TcpListener,
    cfg: FedConfig,
    expected: usize,
    global: ModelParams,
    conns: Vec<Conn>,
    transcript: Vec<String>,
}

impl FedServer {
    pub fn bind(
        addr: impl ToSocketAddrs,
        initial: ModelParams,
        cfg: FedConfig,
        expected_clients: usize,
    ) -> Result<Self> {
        if expected_clients == 0 || expected_clients < cfg.min_clients {
            return Err(Error::Config(format!(
                "expecting {expected_clients} clients but min_clients is {}",
                cfg.min_clients
            )));
        }
        Ok(Self {
            listener: TcpListener::bind(addr)?,
            cfg,
            expected: expected_clients,
            global: initial,
            conns: Vec::new(),
            transcript: Vec::new(),
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    pub fn global(&self) -> &ModelParams {
        &self.global
    }

    pub fn transcript(&self) -> &[String] {
        &self.transcript
    }

    fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.cfg.timeout_secs.max(0.001))
    }

    /// Waits for the expected number of clients to connect and say hello.
    pub fn accept_clients(&mut self) -> Result<()> {
        let deadline = Instant::now() + self.timeout();
        self.listener.set_nonblocking(true)?;
        while self.conns.len() < self.expected {
            match self.listener.accept() {
                Ok((stream, _)) => {
                    stream.set_nonblocking(false)?;
                    stream.set_read_timeout(Some(self.timeout()))?;
                    let mut writer = stream.try_clone()?;
                    let mut reader = BufReader::new(stream);
                    match recv(&mut reader, "hello", &mut self.transcript) {
                        Ok(Frame::Hello { client_id, examples }) if examples > 0 => {
                            if self.conns.iter().any(|c| c.client_id == client_id) {
                                let _ = send(
                                    &mut writer,
                                    &Frame::Error { message: format!("client id {client_id} already connected") },
                                    &mut self.transcript,
                                );
                                continue;
                            }
                            self.conns.push(Conn { client_id, examples, reader, writer });
                        }
                        other => {
                            let message = match other {
                                Err(e) => e.to_string(),
                                Ok(f) => format!("expected a hello with examples > 0, got {f:?}"),
                            };
                            let _ = send(&mut writer, &Frame::Error { message }, &mut self.transcript);
                        }
                    }
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        break;
                    }
                    std::thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(e.into()),
            }
        }
        self.listener.set_nonblocking(false)?;
        if self.conns.len() < self.cfg.min_clients.max(1) {
            return Err(Error::Timeout(format!("clients: {} of {} connected", self.conns.len(), self.expected)));
        }
        self.conns.sort_by_key(|c| c.client_id);
        Ok(())
    }

    /// Broadcasts the global model, collects one update per client and
    /// installs the aggregate. A client that fails or times out is dropped
    /// and the round is retried with the rest while enough remain.
    pub fn run_round(&mut self, round: u32) -> Result<RoundRecord> {
        loop {
            let need = self.cfg.min_clients.max(1);
            if self.conns.len() < need {
                return Err(Error::Protocol(format!(
                    "round {round}: {} clients left, {need} required",
                    self.conns.len()
                )));
            }
            let begin = Frame::RoundBegin { round, params_b64: params_to_b64(&self.global) };
            let mut failed = vec![false; self.conns.len()];
            for (i, c) in self.conns.iter_mut().enumerate() {
                failed[i] = send(&mut c.writer, &begin, &mut self.transcript).is_err();
            }
            let mut updates = Vec::new();
            for (i, c) in self.conns.iter_mut().enumerate() {
                if failed[i] {
                    continue;
                }
                let got = recv(&mut c.reader, "update", &mut self.transcript).and_then(|f| match f {
                    Frame::Update { round: r, params_b64, examples } if r == round => {
                        Ok(ClientUpdate { client_id: c.client_id, params: params_from_b64(&params_b64)?, examples })
                    }
                    other => Err(Error::Protocol(format!("expected update for round {round}, got {other:?}"))),
                });
                match got {
                    Ok(u) if u.params.same_shape(&self.global) && u.examples > 0 => updates.push(u),
                    Ok(_) => {
                        let _ = send(
                            &mut c.writer,
                            &Frame::Error { message: "update has the wrong shape or no examples".into() },
                            &mut self.transcript,
                        );
                        failed[i] = true;
                    }
                    Err(e) => {
                        if !matches!(e, Error::Timeout(_) | Error::Io(_)) {
                            let _ = send(&mut c.writer, &Frame::Error { message: e.to_string() }, &mut self.transcript);
                        }
                        failed[i] = true;
                    }
                }
            }
            if failed.iter().any(|&f| f) {
                let mut keep = failed.iter().map(|f| !f);
                self.conns.retain(|_| keep.next().unwrap_or(false));
                continue;
            }
            self.global = fed_avg(&updates)?;
            let d = digest(&self.global);
            let end = Frame::RoundEnd { round, digest: digest_hex(d) };
            for c in &mut self.conns {
                let _ = send(&mut c.writer, &end, &mut self.transcript);
            }
            return Ok(RoundRecord {
                round,
                clients: updates.iter().map(|u| u.client_id).collect(),
                examples: self.conns.iter().map(|c| c.examples).collect(),
                digest: d,
            });
        }
    }

    /// Accepts clients, runs every round, then tells clients to stop.
    pub fn run(&mut self, mut on_round: impl FnMut(&RoundRecord, &ModelParams) -> Result<()>) -> Result<ModelParams> {
        self.accept_clients()?;
        for round in 0..self.cfg.rounds {
            let rec = self.run_round(round)?;
            on_round(&rec, &self.global)?;
        }
        for c in &mut self.conns {
            let _ = send(&mut c.writer, &Frame::Shutdown, &mut self.transcript);
        }
        Ok(self.global.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientSummary {
    pub rounds: u32,
    pub last_digest: Option<String>,
}

/// Connects to a server (retrying until `connect_timeout` passes), then
/// trains on every broadcast until shutdown.
pub fn run_client(
    addr: impl ToSocketAddrs + Clone,
    client: &mut ClientState,
    local_epochs: u32,
    connect_timeout: Duration,
    read_timeout: Option<Duration>,
) -> Result<ClientSummary> {
    let deadline = Instant::now() + connect_timeout;
    let stream = loop {
        match TcpStream::connect(addr.clone()) {
            Ok(s) => break s,
            Err(e) if Instant::now() < deadline && e.kind() == ErrorKind::ConnectionRefused => {
                std::thread::sleep(Duration::from_millis(20));
            }
            Err(e) => return Err(e.into()),
        }
    };
    stream.set_read_timeout(read_timeout)?;
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    let mut log = Vec::new();
    send(&mut writer, &Frame::Hello { client_id: client.id, examples: client.data.len() }, &mut log)?;
    let mut summary = ClientSummary { rounds: 0, last_digest: None };
    loop {
        match recv(&mut reader, "server frame", &mut log)? {
            Frame::RoundBegin { round, params_b64 } => {
                let global = params_from_b64(&params_b64)?;
                let (params, examples) = local_train(client, &global, local_epochs)?;
                send(&mut writer, &Frame::Update { round, params_b64: params_to_b64(&params), examples }, &mut log)?;
            }
            Frame::RoundEnd { digest, .. } => {
                summary.rounds += 1;
                summary.last_digest = Some(digest);
            }
            Frame::Shutdown => return Ok(summary),
            Frame::Error { message } => return Err(Error::Protocol(format!("server: {message}"))),
            other => {
                let message = format!("unexpected frame {other:?}");
                let _ = send(&mut writer, &Frame::Error { message: message.clone() }, &mut log);
                return Err(Error::Protocol(message));
            }
        }
    }
}
