//! Two-process ping-pong latency and one-way throughput measurement.

use std::hint;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde::Serialize;

use super::{Consumer, Producer, QueueError};
use crate::packet::{Packet, FLAG_LAST};

const ECHO: u32 = 0;
const SINK: u32 = 1;
const STOP: u32 = 2;
const ACK: u32 = 3;

const POLL_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub dir: PathBuf,
    /// Packets pushed through the ping queue for the throughput phase.
    pub packets: u64,
    /// Round trips timed for the latency phase.
    pub latency_samples: u64,
    /// Executable that serves `echo --rx PING --tx PONG`.
    pub peer_exe: PathBuf,
}

impl BenchOptions {
    pub fn new(dir: impl Into<PathBuf>, packets: u64, peer_exe: impl Into<PathBuf>) -> Self {
        BenchOptions {
            dir: dir.into(),
            packets,
            latency_samples: 100_000,
            peer_exe: peer_exe.into(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub round_trip_latency_ns: f64,
    pub round_trip_p99_ns: f64,
    pub packets_per_second: f64,
    pub bytes_per_second: f64,
    pub latency_samples: u64,
    pub packets: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error("failed to start peer {exe}: {source}")]
    Spawn {
        exe: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("peer stopped responding")]
    PeerTimeout,
    #[error("echo mismatch at sample {0}")]
    Mismatch(u64),
}

struct PeerGuard(Child);

impl Drop for PeerGuard {
    fn drop(&mut self) {
        if matches!(self.0.try_wait(), Ok(None)) {
            let _ = self.0.kill();
        }
        let _ = self.0.wait();
    }
}

fn poll_send(tx: &mut Producer, p: &Packet) -> Result<(), BenchError> {
    let start = Instant::now();
    let mut n = 0u32;
    while !tx.try_send(p) {
        relax(&mut n, start)?;
    }
    Ok(())
}

fn poll_recv(rx: &mut Consumer) -> Result<Packet, BenchError> {
    let start = Instant::now();
    let mut n = 0u32;
    loop {
        if let Some(p) = rx.try_recv() {
            return Ok(p);
        }
        relax(&mut n, start)?;
    }
}

// Spin a little, then hand the core to the peer; on a host with fewer cores
// than processes the peer cannot make progress until we yield.
fn relax(n: &mut u32, start: Instant) -> Result<(), BenchError> {
    *n += 1;
    if *n % 64 == 0 {
        thread::yield_now();
        if *n % 4096 == 0 && start.elapsed() > POLL_TIMEOUT {
            return Err(BenchError::PeerTimeout);
        }
    } else {
        hint::spin_loop();
    }
    Ok(())
}

/// Runs the latency and throughput phases against a peer process.
///
/// Throughput in bytes is `packets_per_second * 64`.
pub fn bench(opts: &BenchOptions) -> Result<BenchReport, BenchError> {
    let ping = opts.dir.join(format!("bench-ping-{}.q", std::process::id()));
    let pong = opts.dir.join(format!("bench-pong-{}.q", std::process::id()));
    let result = bench_inner(opts, &ping, &pong);
    let _ = std::fs::remove_file(&ping);
    let _ = std::fs::remove_file(&pong);
    result
}

fn bench_inner(opts: &BenchOptions, ping: &Path, pong: &Path) -> Result<BenchReport, BenchError> {
    let mut tx = Producer::open(ping, true)?;
    let mut rx = Consumer::open(pong, true)?;
    let child = Command::new(&opts.peer_exe)
        .arg("echo")
        .arg("--rx")
        .arg(ping)
        .arg("--tx")
        .arg(pong)
        .stdin(Stdio::null())
        .spawn()
        .map_err(|source| BenchError::Spawn {
            exe: opts.peer_exe.clone(),
            source,
        })?;
    let mut guard = PeerGuard(child);

    let mut p = Packet::default();
    p.destination = ECHO;
    for i in 0..1_000u64 {
        p.write_u64(0, i);
        poll_send(&mut tx, &p)?;
        poll_recv(&mut rx)?;
    }

    let mut samples = Vec::with_capacity(opts.latency_samples as usize);
    for i in 0..opts.latency_samples {
        p.write_u64(0, i);
        let t0 = Instant::now();
        poll_send(&mut tx, &p)?;
        let back = poll_recv(&mut rx)?;
        samples.push(t0.elapsed().as_nanos() as f64);
        if back.read_u64(0) != i {
            return Err(BenchError::Mismatch(i));
        }
    }
    samples.sort_by(|a, b| a.total_cmp(b));
    let median = percentile(&samples, 0.5);
    let p99 = percentile(&samples, 0.99);

    let mut s = Packet::default();
    s.destination = SINK;
    let t0 = Instant::now();
    for i in 0..opts.packets {
        s.write_u64(0, i);
        if i + 1 == opts.packets {
            s.flags = FLAG_LAST;
        }
        poll_send(&mut tx, &s)?;
    }
    let ack = poll_recv(&mut rx)?;
    let secs = t0.elapsed().as_secs_f64();
    if ack.destination != ACK || ack.read_u64(0) != opts.packets {
        return Err(BenchError::Mismatch(opts.packets));
    }

    let mut stop = Packet::default();
    stop.destination = STOP;
    poll_send(&mut tx, &stop)?;
    let _ = guard.0.wait();

    let pps = opts.packets as f64 / secs;
    Ok(BenchReport {
        round_trip_latency_ns: median,
        round_trip_p99_ns: p99,
        packets_per_second: pps,
        bytes_per_second: pps * crate::packet::PACKET_SIZE as f64,
        latency_samples: opts.latency_samples,
        packets: opts.packets,
    })
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

/// Peer side of [`bench`]: echoes, sinks, or stops according to each
/// packet's destination.
pub fn echo_peer(rx_path: &Path, tx_path: &Path) -> Result<(), BenchError> {
    let mut rx = Consumer::open(rx_path, false)?;
    let mut tx = Producer::open(tx_path, false)?;
    let mut sunk = 0u64;
    loop {
        let p = poll_recv(&mut rx)?;
        match p.destination {
            ECHO => poll_send(&mut tx, &p)?,
            SINK => {
                sunk += 1;
                if p.is_last() {
                    let mut ack = Packet::default();
                    ack.destination = ACK;
                    ack.write_u64(0, sunk);
                    poll_send(&mut tx, &ack)?;
                    sunk = 0;
                }
            }
            _ => return Ok(()),
        }
    }
}


fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stress_checksum(p: &Packet) -> u64 {
    let mut h = mix(u64::from(p.flags) << 32 | u64::from(p.destination));
    for w in p.data[..44].chunks_exact(8) {
        h = mix(h ^ u64::from_le_bytes(w.try_into().unwrap()));
    }
    h
}

/// Packet `seq` of a stress stream: every byte depends on `seq`, and the
/// last payload word is a checksum over the rest.
pub fn stress_packet(seq: u64) -> Packet {
    let mut p = Packet {
        flags: (seq as u32) << 1,
        destination: !(seq as u32),
        data: [0; crate::packet::PAYLOAD_SIZE],
    };
    p.write_u64(0, seq);
    let mut x = seq;
    for at in (8..44).step_by(8) {
        x = mix(x);
        p.write_u64(at, x);
    }
    let sum = stress_checksum(&p);
    p.write_u64(44, sum);
    p
}

/// Sequence number of an intact stress packet, or `None` if torn.
pub fn check_stress_packet(p: &Packet) -> Option<u64> {
    let seq = p.read_u64(0);
    (stress_checksum(p) == p.read_u64(44) && *p == stress_packet(seq)).then_some(seq)
}
