//! Multi-process ranks over local TCP.
//!
//! The coordinator keeps the scheduler and the in-process [`Transport`]
//! for routing; each rank's state lives in a worker process reached
//! through a [`RemoteRank`] proxy. Frames are a 4-byte little-endian
//! length, a kind byte, then the body. Control frames carry JSON, data
//! frames carry one wire-encoded message with its envelope header.
//!
//! [`Transport`]: super::Transport

use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::marker::PhantomData;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{Envelope, RankProgram, WireMessage};
use crate::error::{Error, Result};
use crate::idspace::RankId;

pub const FRAME_CONTROL: u8 = 0;
pub const FRAME_DATA: u8 = 1;

/// Largest accepted frame body.
pub const MAX_FRAME: usize = 1 << 30;

pub const CONNECT_TIMEOUT: Duration = Duration::from_secs(60);
pub const READ_TIMEOUT: Duration = Duration::from_secs(600);

pub fn write_frame(w: &mut impl Write, kind: u8, body: &[u8]) -> std::io::Result<()> {
    let len = u32::try_from(body.len() + 1)
        .map_err(|_| std::io::Error::new(ErrorKind::InvalidInput, "frame too large"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&[kind])?;
    w.write_all(body)
}

pub fn read_frame(r: &mut impl Read) -> std::io::Result<(u8, Vec<u8>)> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_le_bytes(len) as usize;
    if len == 0 || len > MAX_FRAME {
        return Err(std::io::Error::new(
            ErrorKind::InvalidData,
            format!("bad frame length {len}"),
        ));
    }
    let mut kind = [0u8; 1];
    r.read_exact(&mut kind)?;
    let mut body = vec![0u8; len - 1];
    r.read_exact(&mut body)?;
    Ok((kind[0], body))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Control {
    Hello { rank: RankId },
    /// Followed by `count` data frames.
    Step { count: usize },
    /// Followed by `count` data frames.
    StepDone { changed: bool, count: usize },
    Audit,
    AuditDone { ok: bool, detail: String },
    Finish,
    Failed(String),
}

fn transport_err(e: std::io::Error) -> Error {
    Error::Transport(e.to_string())
}

/// One end of a rank connection.
pub struct Link {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl Link {
    fn new(stream: TcpStream) -> Result<Self> {
        stream.set_nodelay(true).map_err(transport_err)?;
        stream
            .set_read_timeout(Some(READ_TIMEOUT))
            .map_err(transport_err)?;
        let reader = BufReader::new(stream.try_clone().map_err(transport_err)?);
        Ok(Link {
            reader,
            writer: BufWriter::new(stream),
        })
    }

    fn send_control(&mut self, c: &Control) -> Result<()> {
        self.send_json(c)
    }

    fn send_json<T: Serialize>(&mut self, v: &T) -> Result<()> {
        let body = serde_json::to_vec(v)?;
        write_frame(&mut self.writer, FRAME_CONTROL, &body).map_err(transport_err)
    }

    fn send_data(&mut self, body: &[u8]) -> Result<()> {
        write_frame(&mut self.writer, FRAME_DATA, body).map_err(transport_err)
    }

    fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(transport_err)
    }

    fn recv(&mut self, want: u8) -> Result<Vec<u8>> {
        let (kind, body) = read_frame(&mut self.reader).map_err(transport_err)?;
        if kind != want {
            return Err(Error::Transport(format!(
                "expected frame kind {want}, got {kind}"
            )));
        }
        Ok(body)
    }

    fn recv_json<T: DeserializeOwned>(&mut self) -> Result<T> {
        let body = self.recv(FRAME_CONTROL)?;
        if let Ok(Control::Failed(msg)) = serde_json::from_slice::<Control>(&body) {
            return Err(Error::Transport(format!("peer failed: {msg}")));
        }
        Ok(serde_json::from_slice(&body)?)
    }

    fn recv_control(&mut self) -> Result<Control> {
        self.recv_json()
    }
}

/// Coordinator-side proxy for a rank running in another process.
pub struct RemoteRank<M> {
    rank: RankId,
    link: Link,
    _msg: PhantomData<fn() -> M>,
}

/// Accepts one connection per rank, each announcing its rank with a hello.
pub fn accept_ranks<M>(listener: &TcpListener, num_ranks: usize) -> Result<Vec<RemoteRank<M>>> {
    listener.set_nonblocking(true).map_err(transport_err)?;
    let deadline = Instant::now() + CONNECT_TIMEOUT;
    let mut slots: Vec<Option<RemoteRank<M>>> = (0..num_ranks).map(|_| None).collect();
    let mut pending = num_ranks;
    while pending > 0 {
        match listener.accept() {
            Ok((stream, _)) => {
                stream.set_nonblocking(false).map_err(transport_err)?;
                let mut link = Link::new(stream)?;
                let Control::Hello { rank } = link.recv_control()? else {
                    return Err(Error::Transport("expected hello".into()));
                };
                let slot = slots
                    .get_mut(rank.index())
                    .ok_or_else(|| Error::Transport(format!("hello from unknown rank {rank}")))?;
                if slot.is_some() {
                    return Err(Error::Transport(format!("rank {rank} connected twice")));
                }
                *slot = Some(RemoteRank {
                    rank,
                    link,
                    _msg: PhantomData,
                });
                pending -= 1;
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => {
                if Instant::now() > deadline {
                    return Err(Error::Transport(format!(
                        "{pending} of {num_ranks} workers never connected"
                    )));
                }
                std::thread::sleep(Duration::from_millis(2));
            }
            Err(e) => return Err(transport_err(e)),
        }
    }
    Ok(slots.into_iter().map(|s| s.expect("all connected")).collect())
}

impl<M> RemoteRank<M> {
    pub fn send_init<T: Serialize>(&mut self, init: &T) -> Result<()> {
        self.link.send_json(init)?;
        self.link.flush()
    }

    /// Asks the worker to replay one empty step on a copy of its state.
    pub fn audit(&mut self) -> Result<()> {
        self.link.send_control(&Control::Audit)?;
        self.link.flush()?;
        match self.link.recv_control()? {
            Control::AuditDone { ok: true, .. } => Ok(()),
            Control::AuditDone { detail, .. } => Err(Error::AuditFailed(format!(
                "rank {}: {detail}",
                self.rank
            ))),
            other => Err(Error::Transport(format!("unexpected {other:?}"))),
        }
    }

    /// Ends the run and collects the worker's final payload.
    pub fn finish<T: DeserializeOwned>(&mut self) -> Result<T> {
        self.link.send_control(&Control::Finish)?;
        self.link.flush()?;
        self.link.recv_json()
    }
}

impl<M: WireMessage + Send> RankProgram for RemoteRank<M> {
    type Msg = M;

    fn rank(&self) -> RankId {
        self.rank
    }

    fn step(&mut self, inbox: Vec<Envelope<M>>, out: &mut Vec<(RankId, M)>) -> Result<bool> {
        self.link.send_control(&Control::Step { count: inbox.len() })?;
        let mut buf = Vec::new();
        for env in inbox {
            buf.clear();
            buf.extend_from_slice(&env.src.0.to_le_bytes());
            buf.extend_from_slice(&env.seq.to_le_bytes());
            env.payload.encode(&mut buf);
            self.link.send_data(&buf)?;
        }
        self.link.flush()?;
        let Control::StepDone { changed, count } = self.link.recv_control()? else {
            return Err(Error::Transport("expected step reply".into()));
        };
        for _ in 0..count {
            let body = self.link.recv(FRAME_DATA)?;
            if body.len() < 4 {
                return Err(Error::Transport("short outgoing frame".into()));
            }
            let dst = RankId(u32::from_le_bytes(body[..4].try_into().unwrap()));
            out.push((dst, M::decode(&body[4..])?));
        }
        Ok(changed)
    }
}

/// Worker-side connection.
pub struct WorkerLink {
    rank: RankId,
    link: Link,
}

impl WorkerLink {
    pub fn connect(addr: SocketAddr, rank: RankId) -> Result<Self> {
        let stream = TcpStream::connect_timeout(&addr, CONNECT_TIMEOUT).map_err(transport_err)?;
        let mut link = Link::new(stream)?;
        link.send_control(&Control::Hello { rank })?;
        link.flush()?;
        Ok(WorkerLink { rank, link })
    }

    pub fn rank(&self) -> RankId {
        self.rank
    }

    pub fn recv_init<T: DeserializeOwned>(&mut self) -> Result<T> {
        self.link.recv_json()
    }

    /// Runs steps and audits until the coordinator sends `Finish`.
    pub fn serve<P>(&mut self, program: &mut P) -> Result<()>
    where
        P: RankProgram + Clone + PartialEq,
        P::Msg: WireMessage,
    {
        let mut out = Vec::new();
        let mut buf = Vec::new();
        loop {
            match self.link.recv_control()? {
                Control::Step { count } => {
                    let mut inbox = Vec::with_capacity(count);
                    for _ in 0..count {
                        let body = self.link.recv(FRAME_DATA)?;
                        if body.len() < 12 {
                            return Err(Error::Transport("short incoming frame".into()));
                        }
                        inbox.push(Envelope {
                            src: RankId(u32::from_le_bytes(body[..4].try_into().unwrap())),
                            dst: self.rank,
                            seq: u64::from_le_bytes(body[4..12].try_into().unwrap()),
                            payload: P::Msg::decode(&body[12..])?,
                        });
                    }
                    out.clear();
                    let changed = program.step(inbox, &mut out)?;
                    self.link.send_control(&Control::StepDone {
                        changed,
                        count: out.len(),
                    })?;
                    for (dst, m) in out.drain(..) {
                        buf.clear();
                        buf.extend_from_slice(&dst.0.to_le_bytes());
                        m.encode(&mut buf);
                        self.link.send_data(&buf)?;
                    }
                    self.link.flush()?;
                }
                Control::Audit => {
                    let mut copy = program.clone();
                    let mut sent = Vec::new();
                    let changed = copy.step(Vec::new(), &mut sent)?;
                    let ok = !changed && sent.is_empty() && copy == *program;
                    let detail = if ok {
                        String::new()
                    } else {
                        format!("still makes progress ({} messages)", sent.len())
                    };
                    self.link.send_control(&Control::AuditDone { ok, detail })?;
                    self.link.flush()?;
                }
                Control::Finish => return Ok(()),
                other => return Err(Error::Transport(format!("unexpected {other:?}"))),
            }
        }
    }

    pub fn send_result<T: Serialize>(&mut self, v: &T) -> Result<()> {
        self.link.send_json(v)?;
        self.link.flush()
    }

    /// Best-effort failure report before the worker exits.
    pub fn report_failure(&mut self, msg: &str) {
        let _ = self.link.send_control(&Control::Failed(msg.to_string()));
        let _ = self.link.flush();
    }
}
