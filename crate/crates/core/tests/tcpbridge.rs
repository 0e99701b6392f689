use std::io::{Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use sbnet::shmq::{self, Consumer, Producer};
use sbnet::tcpbridge::{self, Binding, BridgeError, Direction, PumpStats, MAGIC, VERSION};

const WAIT: Duration = Duration::from_secs(30);

fn queue(dir: &Path, name: &str) -> PathBuf {
    let p = dir.join(name);
    drop(Producer::open(&p, true).unwrap());
    p
}

struct Pair {
    stop: Arc<AtomicBool>,
    server: thread::JoinHandle<Result<PumpStats, BridgeError>>,
    client: thread::JoinHandle<Result<PumpStats, BridgeError>>,
}

impl Pair {
    fn finish(self) -> (PumpStats, PumpStats) {
        self.stop.store(true, Ordering::Relaxed);
        (self.server.join().unwrap().unwrap(), self.client.join().unwrap().unwrap())
    }
}

/// Server side owns `a_*` queues, client side `b_*`; each label is
/// mirrored with the opposite direction.
fn start(dir: &Path, labels: &[(&str, Direction)]) -> Pair {
    let server_b: Vec<Binding> = labels
        .iter()
        .map(|(l, d)| Binding::new(*l, *d, queue(dir, &format!("a_{l}.q"))))
        .collect();
    let client_b: Vec<Binding> = labels
        .iter()
        .map(|(l, d)| Binding::new(*l, d.opposite(), queue(dir, &format!("b_{l}.q"))))
        .collect();
    let stop = Arc::new(AtomicBool::new(false));
    let listener = tcpbridge::listen("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    let s = stop.clone();
    let server = thread::spawn(move || listener.accept(&server_b, &s)?.pump(s));
    let s = stop.clone();
    let client = thread::spawn(move || tcpbridge::connect("127.0.0.1", port, &client_b, &s)?.pump(s));
    Pair { stop, server, client }
}

fn tagged(label: u8, n: u64) -> sbnet::Packet {
    let mut p = shmq::stress_packet(n);
    p.destination = u32::from(label);
    p
}

#[test]
fn two_bindings_each_arrive_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let pair = start(
        dir.path(),
        &[("x", Direction::Outbound), ("y", Direction::Outbound), ("z", Direction::Inbound)],
    );
    let d = dir.path();
    let mut ax = Producer::open(d.join("a_x.q"), false).unwrap();
    let mut ay = Producer::open(d.join("a_y.q"), false).unwrap();
    let mut bz = Producer::open(d.join("b_z.q"), false).unwrap();
    let mut bx = Consumer::open(d.join("b_x.q"), false).unwrap();
    let mut by = Consumer::open(d.join("b_y.q"), false).unwrap();
    let mut az = Consumer::open(d.join("a_z.q"), false).unwrap();

    const N: u64 = 10_000;
    const NZ: u64 = 1_000;
    let (mut sx, mut sy, mut sz) = (0u64, 0u64, 0u64);
    let (mut rx, mut ry, mut rz) = (0u64, 0u64, 0u64);
    let start = Instant::now();
    while rx < N || ry < N || rz < NZ {
        assert!(start.elapsed() < WAIT, "stuck at x {rx} y {ry} z {rz}");
        if sx < N && ax.try_send(&tagged(b'x', sx)) {
            sx += 1;
        }
        if sy < N && ay.try_send(&tagged(b'y', sy)) {
            sy += 1;
        }
        if sz < NZ && bz.try_send(&tagged(b'z', sz)) {
            sz += 1;
        }
        while let Some(p) = bx.try_recv() {
            assert_eq!(p, tagged(b'x', rx));
            rx += 1;
        }
        while let Some(p) = by.try_recv() {
            assert_eq!(p, tagged(b'y', ry));
            ry += 1;
        }
        while let Some(p) = az.try_recv() {
            assert_eq!(p, tagged(b'z', rz));
            rz += 1;
        }
        thread::yield_now();
    }
    let (server, client) = pair.finish();
    assert_eq!((server.sent, server.received), (2 * N, NZ));
    assert_eq!((client.sent, client.received), (NZ, 2 * N));
}

fn handshake_result(server: Vec<Binding>, client: Vec<Binding>) -> (Result<(), BridgeError>, Result<(), BridgeError>) {
    let stop = Arc::new(AtomicBool::new(false));
    let listener = tcpbridge::listen("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    let s = stop.clone();
    let srv = thread::spawn(move || listener.accept(&server, &s).map(|_| ()));
    let cli = tcpbridge::connect("127.0.0.1", port, &client, &stop).map(|_| ());
    (srv.join().unwrap(), cli)
}

#[test]
fn handshake_mismatches_rejected() {
    let b = |l: &str, d| Binding::new(l, d, "/unused.q");
    use Direction::*;

    let (s, c) = handshake_result(
        vec![b("p", Outbound), b("q", Outbound), b("r", Inbound)],
        vec![b("p", Inbound), b("q", Inbound)],
    );
    assert!(matches!(s, Err(BridgeError::HandshakeMismatch(_))), "{s:?}");
    assert!(matches!(c, Err(BridgeError::HandshakeMismatch(_))), "{c:?}");

    let (s, c) = handshake_result(vec![b("p", Outbound)], vec![b("p", Outbound)]);
    assert!(matches!(s, Err(BridgeError::HandshakeMismatch(_))));
    assert!(matches!(c, Err(BridgeError::HandshakeMismatch(_))));

    let (s, c) = handshake_result(vec![b("p", Outbound)], vec![b("other", Inbound)]);
    assert!(matches!(s, Err(BridgeError::HandshakeMismatch(_))));
    assert!(matches!(c, Err(BridgeError::HandshakeMismatch(_))));

    let (s, c) = handshake_result(vec![b("x", Outbound)], vec![b("x", Inbound)]);
    assert!(s.is_ok() && c.is_ok());
}

#[test]
fn client_started_first_connects_later() {
    let dir = tempfile::tempdir().unwrap();
    let a = queue(dir.path(), "a.q");
    let b = queue(dir.path(), "b.q");
    let port = {
        let probe = tcpbridge::listen("127.0.0.1:0").unwrap();
        probe.local_addr().unwrap().port()
    };
    let stop = Arc::new(AtomicBool::new(false));
    let s = stop.clone();
    let client_b = vec![Binding::new("v", Direction::Inbound, &b)];
    let t0 = Instant::now();
    let client = thread::spawn(move || {
        let bridge = tcpbridge::connect("127.0.0.1", port, &client_b, &s)?;
        let connected = t0.elapsed();
        bridge.pump(s).map(|st| (st, connected))
    });
    thread::sleep(Duration::from_secs(2));
    let listener = tcpbridge::listen(("127.0.0.1", port)).unwrap();
    let s = stop.clone();
    let server_b = vec![Binding::new("v", Direction::Outbound, &a)];
    let server = thread::spawn(move || listener.accept(&server_b, &s)?.pump(s));

    let mut tx = Producer::open(&a, false).unwrap();
    let mut rx = Consumer::open(&b, false).unwrap();
    tx.send_blocking(&tagged(1, 1), WAIT).unwrap();
    assert_eq!(rx.recv_blocking(WAIT).unwrap(), tagged(1, 1));
    stop.store(true, Ordering::Relaxed);
    server.join().unwrap().unwrap();
    let (_, connected) = client.join().unwrap().unwrap();
    assert!(connected >= Duration::from_secs(2), "{connected:?}");
}

#[test]
fn stalled_consumer_loses_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let pair = start(dir.path(), &[("s", Direction::Outbound)]);
    let a = dir.path().join("a_s.q");
    let b = dir.path().join("b_s.q");
    // Enough to exceed the socket buffers so the sender must block.
    const N: u64 = 200_000;
    let sent = Arc::new(std::sync::atomic::AtomicU64::new(0));
    let counter = sent.clone();
    let producer = thread::spawn(move || {
        let mut tx = Producer::open(&a, false).unwrap();
        for n in 0..N {
            tx.send_blocking(&tagged(7, n), WAIT).unwrap();
            counter.store(n + 1, Ordering::Relaxed);
        }
    });
    thread::sleep(Duration::from_secs(1));
    let during_stall = sent.load(Ordering::Relaxed);
    assert!(during_stall < N, "sender never felt backpressure");
    let mut rx = Consumer::open(&b, false).unwrap();
    for n in 0..N {
        assert_eq!(rx.recv_blocking(WAIT).unwrap(), tagged(7, n));
    }
    producer.join().unwrap();
    assert!(rx.try_recv().is_none());
    let (server, client) = pair.finish();
    assert_eq!((server.sent, client.received), (N, N));
}

fn raw_handshake(stream: &mut TcpStream, bindings: &[(&str, u8)]) {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC.to_le_bytes());
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(bindings.len() as u32).to_le_bytes());
    for (label, dir) in bindings {
        out.extend_from_slice(&(label.len() as u16).to_le_bytes());
        out.extend_from_slice(label.as_bytes());
        out.push(*dir);
    }
    stream.write_all(&out).unwrap();
    // Server's reply: 12 bytes of header, then per binding 2 + len + 1.
    let reply = 12 + bindings.iter().map(|(l, _)| 3 + l.len()).sum::<usize>();
    let mut sink = vec![0u8; reply];
    stream.read_exact(&mut sink).unwrap();
}

fn bad_frame(index: u32) -> Result<PumpStats, BridgeError> {
    let dir = tempfile::tempdir().unwrap();
    let q = queue(dir.path(), "in.q");
    let o = queue(dir.path(), "out.q");
    let listener = tcpbridge::listen("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    let stop = Arc::new(AtomicBool::new(false));
    let s = stop.clone();
    let server = thread::spawn(move || {
        let bindings = [Binding::new("in", Direction::Inbound, q), Binding::new("out", Direction::Outbound, o)];
        listener.accept(&bindings, &s)?.pump(s)
    });
    let mut stream = TcpStream::connect(("127.0.0.1", port)).unwrap();
    raw_handshake(&mut stream, &[("in", 0), ("out", 1)]);
    let mut frame = [0u8; tcpbridge::FRAME_SIZE];
    frame[..4].copy_from_slice(&index.to_le_bytes());
    stream.write_all(&frame).unwrap();
    // The server closes its side; reading must end.
    stream.set_read_timeout(Some(WAIT)).unwrap();
    let mut rest = Vec::new();
    let _ = stream.read_to_end(&mut rest);
    let r = server.join().unwrap();
    stop.store(true, Ordering::Relaxed);
    r
}

#[test]
fn frame_index_out_of_range_closes_connection() {
    assert!(matches!(bad_frame(2), Err(BridgeError::Protocol(_))));
    assert!(matches!(bad_frame(u32::MAX), Err(BridgeError::Protocol(_))));
}

#[test]
fn frame_for_outbound_binding_rejected() {
    assert!(matches!(bad_frame(1), Err(BridgeError::Protocol(_))));
}
