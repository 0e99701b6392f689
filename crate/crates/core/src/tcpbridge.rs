//! Carries several local queues over one TCP connection.
//!
//! Wire format, all integers little-endian:
//!
//! ```text
//! handshake: magic u32 = 0x53574244, version u32 = 1, count u32,
//!            then per binding: label_len u16, label (UTF-8), direction u8
//!            (0 = outbound, 1 = inbound)
//! frame:     binding index u32, packet (64 bytes)
//! ```
//!
//! Each side sends its handshake and then checks that the peer's binding list
//! mirrors its own: same labels in the same order with opposite directions.

use std::io::{self, BufWriter, ErrorKind, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use thiserror::Error;

use crate::packet::{Packet, PACKET_SIZE};
use crate::shmq::{Consumer, Producer, QueueError};

pub const MAGIC: u32 = 0x5357_4244;
pub const VERSION: u32 = 1;
pub const FRAME_SIZE: usize = 4 + PACKET_SIZE;

const POLL: Duration = Duration::from_millis(20);
const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(5);
const MAX_BACKOFF: Duration = Duration::from_secs(2);

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Local consumer, drained onto the wire.
    Outbound,
    /// Wire, pushed into a local producer.
    Inbound,
}

impl Direction {
    fn code(self) -> u8 {
        match self {
            Direction::Outbound => 0,
            Direction::Inbound => 1,
        }
    }

    fn from_code(b: u8) -> Option<Direction> {
        match b {
            0 => Some(Direction::Outbound),
            1 => Some(Direction::Inbound),
            _ => None,
        }
    }

    pub fn opposite(self) -> Direction {
        match self {
            Direction::Outbound => Direction::Inbound,
            Direction::Inbound => Direction::Outbound,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Binding {
    pub label: String,
    pub direction: Direction,
    pub queue: PathBuf,
}

impl Binding {
    pub fn new(label: impl Into<String>, direction: Direction, queue: impl Into<PathBuf>) -> Self {
        Binding {
            label: label.into(),
            direction,
            queue: queue.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("handshake mismatch: {0}")]
    HandshakeMismatch(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error("stopped before a connection was established")]
    Stopped,
    #[error("bindings must be nonempty with unique labels")]
    BadBindings,
}

fn validate(bindings: &[Binding]) -> Result<(), BridgeError> {
    let mut seen = std::collections::HashSet::new();
    if bindings.is_empty() || !bindings.iter().all(|b| seen.insert(b.label.as_str())) {
        return Err(BridgeError::BadBindings);
    }
    if bindings.iter().any(|b| b.label.len() > u16::MAX as usize) {
        return Err(BridgeError::BadBindings);
    }
    Ok(())
}

fn encode_handshake(bindings: &[Binding]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC.to_le_bytes());
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(bindings.len() as u32).to_le_bytes());
    for b in bindings {
        out.extend_from_slice(&(b.label.len() as u16).to_le_bytes());
        out.extend_from_slice(b.label.as_bytes());
        out.push(b.direction.code());
    }
    out
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_handshake(r: &mut impl Read, max_count: usize) -> Result<Vec<(String, Direction)>, BridgeError> {
    let mismatch = |m: String| BridgeError::HandshakeMismatch(m);
    let magic = read_u32(r)?;
    if magic != MAGIC {
        return Err(mismatch(format!("bad magic {magic:#010x}")));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(mismatch(format!("peer version {version}, expected {VERSION}")));
    }
    let count = read_u32(r)? as usize;
    if count != max_count {
        return Err(mismatch(format!("peer declares {count} bindings, expected {max_count}")));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut len = [0u8; 2];
        r.read_exact(&mut len)?;
        let mut label = vec![0u8; u16::from_le_bytes(len) as usize];
        r.read_exact(&mut label)?;
        let label = String::from_utf8(label).map_err(|_| mismatch("label is not UTF-8".into()))?;
        let mut dir = [0u8; 1];
        r.read_exact(&mut dir)?;
        let dir = Direction::from_code(dir[0])
            .ok_or_else(|| mismatch(format!("bad direction byte {}", dir[0])))?;
        out.push((label, dir));
    }
    Ok(out)
}

fn handshake(stream: &mut TcpStream, bindings: &[Binding]) -> Result<(), BridgeError> {
    stream.set_read_timeout(Some(HANDSHAKE_TIMEOUT))?;
    stream.write_all(&encode_handshake(bindings))?;
    stream.flush()?;
    let peer = read_handshake(stream, bindings.len())?;
    for (i, (b, (label, dir))) in bindings.iter().zip(&peer).enumerate() {
        if &b.label != label {
            return Err(BridgeError::HandshakeMismatch(format!(
                "binding {i}: local label {:?}, peer label {label:?}",
                b.label
            )));
        }
        if b.direction.opposite() != *dir {
            return Err(BridgeError::HandshakeMismatch(format!(
                "binding {i} ({label}): both sides declare {dir:?}"
            )));
        }
    }
    Ok(())
}

/// A bound listening socket awaiting one peer.
pub struct Listener {
    inner: TcpListener,
}

/// Binds `addr` without accepting yet, so callers can learn the port first.
pub fn listen(addr: impl ToSocketAddrs) -> Result<Listener, BridgeError> {
    Ok(Listener {
        inner: TcpListener::bind(addr)?,
    })
}

impl Listener {
    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.inner.local_addr()
    }

    /// Accepts one peer and completes the handshake.
    pub fn accept(self, bindings: &[Binding], stop: &AtomicBool) -> Result<Bridge, BridgeError> {
        validate(bindings)?;
        self.inner.set_nonblocking(true)?;
        let mut stream = loop {
            match self.inner.accept() {
                Ok((s, _)) => break s,
                Err(e) if e.kind() == ErrorKind::WouldBlock => {
                    if stop.load(Ordering::Relaxed) {
                        return Err(BridgeError::Stopped);
                    }
                    thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(e.into()),
            }
        };
        stream.set_nonblocking(false)?;
        Bridge::establish(&mut stream, bindings)?;
        Ok(Bridge {
            stream,
            bindings: bindings.to_vec(),
        })
    }
}

/// Listens on every interface at `port` and accepts one peer.
pub fn serve(port: u16, bindings: &[Binding], stop: &AtomicBool) -> Result<Bridge, BridgeError> {
    listen(("0.0.0.0", port))?.accept(bindings, stop)
}

/// Connects to a server, retrying until it appears or `stop` is raised.
pub fn connect(host: &str, port: u16, bindings: &[Binding], stop: &AtomicBool) -> Result<Bridge, BridgeError> {
    validate(bindings)?;
    let mut attempt = 0u32;
    let mut stream = loop {
        match TcpStream::connect((host, port)) {
            Ok(s) => break s,
            Err(e) => {
                attempt += 1;
                log::debug!("connect to {host}:{port} failed (attempt {attempt}): {e}");
                let wait = (Duration::from_millis(100) * attempt).min(MAX_BACKOFF);
                let mut waited = Duration::ZERO;
                while waited < wait {
                    if stop.load(Ordering::Relaxed) {
                        return Err(BridgeError::Stopped);
                    }
                    thread::sleep(POLL);
                    waited += POLL;
                }
            }
        }
    };
    Bridge::establish(&mut stream, bindings)?;
    Ok(Bridge {
        stream,
        bindings: bindings.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PumpStats {
    pub sent: u64,
    pub received: u64,
}

/// A connection that has completed its handshake.
pub struct Bridge {
    stream: TcpStream,
    bindings: Vec<Binding>,
}

impl Bridge {
    fn establish(stream: &mut TcpStream, bindings: &[Binding]) -> Result<(), BridgeError> {
        stream.set_nodelay(true)?;
        if let Err(e) = handshake(stream, bindings) {
            let _ = stream.shutdown(Shutdown::Both);
            return Err(e);
        }
        Ok(())
    }

    pub fn bindings(&self) -> &[Binding] {
        &self.bindings
    }

    /// Moves packets in both directions until `stop` is raised or the peer
    /// closes. On stop, outbound queues are drained before the write half
    /// is shut down.
    pub fn pump(self, stop: Arc<AtomicBool>) -> Result<PumpStats, BridgeError> {
        let mut outs = Vec::new();
        // Indexed by binding; `None` marks an outbound binding.
        let mut routes: Vec<Option<Producer>> = Vec::with_capacity(self.bindings.len());
        for (i, b) in self.bindings.iter().enumerate() {
            match b.direction {
                Direction::Outbound => {
                    outs.push((i as u32, Consumer::open(&b.queue, false)?));
                    routes.push(None);
                }
                Direction::Inbound => routes.push(Some(Producer::open(&b.queue, false)?)),
            }
        }

        // Either loop failing stops the other. A clean end of ingress, by
        // stop or peer close, lets egress drain and finish.
        let failed = Arc::new(AtomicBool::new(false));
        let ingress_done = Arc::new(AtomicBool::new(false));
        let reader = self.stream.try_clone()?;
        let egress_stream = self.stream;
        let (stop_e, failed_e, done_e) = (stop.clone(), failed.clone(), ingress_done.clone());
        let egress = thread::spawn(move || {
            let r = egress_loop(egress_stream, outs, &stop_e, &done_e, &failed_e);
            if r.is_err() {
                failed_e.store(true, Ordering::Relaxed);
            }
            r
        });
        let ingress = ingress_loop(reader, routes, &stop, &failed);
        if ingress.is_err() {
            failed.store(true, Ordering::Relaxed);
        }
        ingress_done.store(true, Ordering::Relaxed);
        let sent = egress.join().expect("egress thread panicked")?;
        let received = ingress?;
        Ok(PumpStats { sent, received })
    }
}

fn egress_loop(
    stream: TcpStream,
    mut outs: Vec<(u32, Consumer)>,
    stop: &AtomicBool,
    ingress_done: &AtomicBool,
    failed: &AtomicBool,
) -> Result<u64, BridgeError> {
    let mut w = BufWriter::with_capacity(64 * FRAME_SIZE, stream);
    let mut frame = [0u8; FRAME_SIZE];
    let mut sent = 0u64;
    let mut idle = 0u32;
    loop {
        let stopping = stop.load(Ordering::Relaxed) || ingress_done.load(Ordering::Relaxed);
        if failed.load(Ordering::Relaxed) {
            break;
        }
        let mut moved = false;
        for (index, rx) in outs.iter_mut() {
            if let Some(p) = rx.try_recv() {
                frame[..4].copy_from_slice(&index.to_le_bytes());
                p.encode_into((&mut frame[4..]).try_into().unwrap());
                w.write_all(&frame)?;
                sent += 1;
                moved = true;
            }
        }
        if moved {
            idle = 0;
            continue;
        }
        w.flush()?;
        if stopping {
            break;
        }
        idle += 1;
        if idle < 64 {
            std::hint::spin_loop();
        } else if idle < 256 {
            thread::yield_now();
        } else {
            thread::sleep(Duration::from_micros(50));
        }
    }
    w.flush()?;
    let _ = w.get_ref().shutdown(Shutdown::Write);
    Ok(sent)
}

fn ingress_loop(
    mut stream: TcpStream,
    mut routes: Vec<Option<Producer>>,
    stop: &AtomicBool,
    failed: &AtomicBool,
) -> Result<u64, BridgeError> {
    stream.set_read_timeout(Some(POLL))?;
    let mut frame = [0u8; FRAME_SIZE];
    let mut filled = 0usize;
    let mut received = 0u64;
    loop {
        match stream.read(&mut frame[filled..]) {
            Ok(0) => {
                if filled != 0 {
                    return Err(BridgeError::Protocol("connection closed mid-frame".into()));
                }
                return Ok(received);
            }
            Ok(n) => filled += n,
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                if stop.load(Ordering::Relaxed) || failed.load(Ordering::Relaxed) {
                    return Ok(received);
                }
                continue;
            }
            Err(e) if e.kind() == ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
        if filled < FRAME_SIZE {
            continue;
        }
        filled = 0;
        let index = u32::from_le_bytes(frame[..4].try_into().unwrap()) as usize;
        let p = Packet::from_raw((&frame[4..]).try_into().unwrap());
        let tx = match routes.get_mut(index) {
            Some(Some(tx)) => tx,
            Some(_) => {
                let _ = stream.shutdown(Shutdown::Both);
                return Err(BridgeError::Protocol(format!(
                    "frame for binding {index}, which is outbound here"
                )));
            }
            None => {
                let _ = stream.shutdown(Shutdown::Both);
                return Err(BridgeError::Protocol(format!(
                    "frame for binding {index} of {}",
                    routes.len()
                )));
            }
        };
        loop {
            if tx.send_blocking(&p, POLL).is_ok() {
                break;
            }
            if stop.load(Ordering::Relaxed) || failed.load(Ordering::Relaxed) {
                return Ok(received);
            }
        }
        received += 1;
    }
}
