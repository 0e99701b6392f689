//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! fails. Every criterion runs in its own scratch directory, and after each
//! one no process may still refer to it and no queue file may remain.

mod common;

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sbnet::blocks::memory::CHUNK_SIZE;
use sbnet::blocks::{BlockSpec, GridOptions, MemClient, MemError};
use sbnet::experiment::{self, run_matmul, Execution, Matrix, SweepSpec};
use sbnet::netgraph::{simulate, BlockDef, BuildOptions, LaunchOptions, Mode, NetError, NetworkGraph};
use sbnet::pacing::{
    actual_delay, ideal_delay, required_wall_ratio, wall_rate_bound, PerfParams, RateBound, RateLimiter, MAX_CATCH_UP,
};
use sbnet::shmq::{self, BenchOptions, Consumer, Producer, CAPACITY, NUM_SLOTS};
use sbnet::tcpbridge::{self, Binding, BridgeError, Direction};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn launch() -> LaunchOptions {
    LaunchOptions::new(common::bin())
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure!(elapsed < limit, "took {elapsed:.1?}, limit {limit:?}");
    Ok(())
}

// 1. Queue correctness.

fn head_tail(path: &Path) -> (u32, u32) {
    let raw = std::fs::read(path).unwrap();
    let word = |at: usize| u32::from_le_bytes(raw[at..at + 4].try_into().unwrap());
    (word(0), word(64))
}

fn queue_properties(dir: &Path) -> Result<(), String> {
    let mut runner = TestRunner::new(Config {
        cases: 256,
        failure_persistence: None,
        ..Config::default()
    });
    let path = dir.join("model.q");
    runner
        .run(&proptest::collection::vec(any::<bool>(), 0..1_000), |ops| {
            let mut tx = Producer::open(&path, true).unwrap();
            let mut rx = Consumer::open(&path, false).unwrap();
            let mut model = VecDeque::new();
            let mut next = 0u64;
            for send in ops {
                if send {
                    let p = shmq::stress_packet(next);
                    let room = model.len() < CAPACITY;
                    let before = (!room).then(|| std::fs::read(&path).unwrap());
                    prop_assert_eq!(tx.try_send(&p), room);
                    if let Some(before) = before {
                        prop_assert_eq!(std::fs::read(&path).unwrap(), before);
                    } else {
                        model.push_back(p);
                        next += 1;
                    }
                } else {
                    prop_assert_eq!(rx.try_recv(), model.pop_front());
                }
            }
            Ok(())
        })
        .map_err(|e| format!("FIFO model: {e}"))?;

    let cap = dir.join("cap.q");
    let mut tx = Producer::open(&cap, true).unwrap();
    let mut rx = Consumer::open(&cap, false).unwrap();
    for i in 0..61 {
        ensure!(tx.try_send(&shmq::stress_packet(i)), "send {i} refused below capacity");
    }
    ensure!(!tx.try_send(&shmq::stress_packet(61)), "62nd send accepted");
    rx.try_recv().unwrap();
    ensure!(tx.try_send(&shmq::stress_packet(62)), "send after one receive refused");

    ensure!(shmq::slot_offset(61) == 4032, "slot 61 offset");
    for k in 0..=3u32 {
        for r in 0..NUM_SLOTS {
            let wrap = dir.join("wrap.q");
            let mut tx = Producer::open(&wrap, true).unwrap();
            let mut rx = Consumer::open(&wrap, false).unwrap();
            for i in 0..(NUM_SLOTS * k + r) {
                let p = shmq::stress_packet(u64::from(i));
                tx.try_send(&p);
                ensure!(rx.try_recv() == Some(p), "wraparound lost packet {i}");
            }
            ensure!(head_tail(&wrap) == (r, r), "head after {}x62+{r}", k);
        }
    }
    let wrap = dir.join("slot61.q");
    let mut tx = Producer::open(&wrap, true).unwrap();
    let mut rx = Consumer::open(&wrap, false).unwrap();
    for i in 0..61 {
        tx.try_send(&shmq::stress_packet(i));
        rx.try_recv().unwrap();
    }
    let p = shmq::stress_packet(61);
    tx.try_send(&p);
    ensure!(std::fs::read(&wrap).unwrap()[4032..4096] == p.encode(), "slot 61 bytes");
    ensure!(head_tail(&wrap).0 == 0, "head did not wrap to 0");
    for name in ["model.q", "cap.q", "wrap.q", "slot61.q"] {
        std::fs::remove_file(dir.join(name)).unwrap();
    }
    Ok(())
}

fn criterion_1(dir: &Path) -> Check {
    let t0 = Instant::now();
    queue_properties(dir)?;
    const COUNT: &str = "10000000";
    let path = dir.join("stress.q");
    drop(Producer::open(&path, true).unwrap());
    let spawn = |role: &str| {
        Command::new(common::bin())
            .args(["qstress", "--role", role, "--path"])
            .arg(&path)
            .args(["--count", COUNT])
            .stdout(Stdio::piped())
            .spawn()
            .unwrap()
    };
    let consumer = spawn("consumer");
    let producer = spawn("producer");
    let p = producer.wait_with_output().unwrap();
    let c = consumer.wait_with_output().unwrap();
    let report = String::from_utf8_lossy(&c.stdout).trim().to_string();
    ensure!(p.status.success() && c.status.success(), "stress run failed: {report}");
    ensure!(report == format!("received {COUNT} torn 0 reordered 0"), "{report}");
    std::fs::remove_file(&path).unwrap();
    within(t0.elapsed(), Duration::from_secs(120))?;
    Ok(format!("{report}; {:.1?}", t0.elapsed()))
}

// 2. Queue performance.

fn criterion_2(dir: &Path) -> Check {
    let t0 = Instant::now();
    let mut opts = BenchOptions::new(dir, 5_000_000, common::bin());
    opts.latency_samples = 200_000;
    let r = shmq::bench(&opts).map_err(|e| e.to_string())?;
    let line = format!(
        "median RTT {:.0} ns (ref 213, bound 2000); {:.2}M pkt/s (ref 27, bound 5); {:.0} MB/s (ref 1400, bound 320)",
        r.round_trip_latency_ns,
        r.packets_per_second / 1e6,
        r.bytes_per_second / 1e6
    );
    ensure!(r.bytes_per_second == 64.0 * r.packets_per_second, "bytes != 64 x packets");
    ensure!(r.round_trip_latency_ns <= 2_000.0, "{line}");
    ensure!(r.packets_per_second >= 5e6, "{line}");
    ensure!(r.bytes_per_second >= 320e6, "{line}");
    within(t0.elapsed(), Duration::from_secs(60))?;
    Ok(line)
}

// 3. Performance equations, against hand-substituted values.

fn close(got: f64, want: f64) -> bool {
    (got - want).abs() <= 1e-12 * want.abs().max(1.0)
}

fn wall(n: f64, faw: f64, fbw: f64, t: f64, rx: u32, tx: u32) -> PerfParams {
    PerfParams {
        f_a_sim: 1.0,
        f_b_sim: 1.0,
        f_a_wall: faw,
        f_b_wall: fbw,
        t_comm: t,
        n_rx: rx,
        n_tx: tx,
        n,
    }
}

fn criterion_3(_: &Path) -> Check {
    let ideal = [
        ((100.0, 2.0, 1.0), 200.0),
        ((100.0, 1.0, 1.0), 100.0),
        ((100.0, 1.0, 2.0), 50.0),
        ((0.0, 5.0, 3.0), 0.0),
        ((48.0, 3e6, 1e6), 144.0),
    ];
    let mut checked = 0;
    for ((n, fa, fb), want) in ideal {
        let got = ideal_delay(&PerfParams::ideal(n, fa, fb)).unwrap();
        ensure!(close(got, want), "ideal_delay({n},{fa},{fb}) = {got}, want {want}");
        checked += 1;
    }
    let actual = [
        (wall(100.0, 7.0, 7.0, 0.0, 1, 1), 104.0),
        (wall(100.0, 1e3, 1e3, 1e-3, 0, 0), 102.0),
        (wall(50.0, 2e3, 1e3, 0.5e-3, 1, 2), 111.0),
        (wall(10.0, 500.0, 1e3, 4e-3, 0, 1), 10.5),
    ];
    for (p, want) in actual {
        let got = actual_delay(&p).unwrap();
        ensure!(close(got, want), "actual_delay({p:?}) = {got}, want {want}");
        checked += 1;
    }
    let bounds = [
        ((200.0, 1e-3), RateBound::Bounded(1e5)),
        ((1000.0, 50e-6), RateBound::Bounded(1e7)),
        ((24.0, 0.5), RateBound::Bounded(24.0)),
        ((200.0, 0.0), RateBound::Unbounded),
    ];
    for ((n, t), want) in bounds {
        let got = wall_rate_bound(n, t).unwrap();
        let ok = match (got, want) {
            (RateBound::Bounded(g), RateBound::Bounded(w)) => close(g, w),
            (g, w) => g == w,
        };
        ensure!(ok, "wall_rate_bound({n},{t}) = {got:?}, want {want:?}");
        checked += 1;
    }
    for ((fa, fb), want) in [((2.0, 1.0), 2.0), ((5.0, 5.0), 1.0), ((3.0, 12.0), 0.25)] {
        let got = required_wall_ratio(&PerfParams::ideal(1.0, fa, fb)).unwrap();
        ensure!(close(got, want), "required_wall_ratio({fa},{fb}) = {got}");
        let back = required_wall_ratio(&PerfParams::ideal(1.0, fb, fa)).unwrap();
        ensure!(close(got * back, 1.0), "ratio not reciprocal");
        checked += 1;
    }
    for (n, fa, fb) in [(100.0, 3.0, 2.0), (7.0, 1e6, 3e5), (0.0, 1.0, 9.0)] {
        let p = PerfParams::ideal(n, fa, fb);
        ensure!(
            actual_delay(&p).unwrap() == ideal_delay(&p).unwrap(),
            "degenerate point not exact for {p:?}"
        );
        checked += 1;
    }
    ensure!(ideal_delay(&PerfParams::ideal(1.0, 1.0, 0.0)).is_err(), "zero rate accepted");
    Ok(format!("{checked} parameter sets"))
}

// 4. Rate limiter.

fn pace_run(hz: f64, secs: f64) -> Result<String, String> {
    let n = (hz * secs) as usize;
    let mut r = RateLimiter::new(hz);
    let mut stamps = Vec::with_capacity(n);
    for _ in 0..n {
        r.pace();
        stamps.push(Instant::now());
    }
    let span = (stamps[n - 1] - stamps[0]).as_secs_f64();
    let achieved = (n - 1) as f64 / span;
    let err = (achieved - hz).abs() / hz;
    ensure!(err <= 0.02, "{hz} Hz target achieved {achieved:.1} Hz");
    let cap = (1.02 * hz).ceil() as usize + 1;
    let mut lo = 0;
    for hi in 0..n {
        while stamps[hi] - stamps[lo] >= Duration::from_secs(1) {
            lo += 1;
        }
        ensure!(hi - lo < cap, "{} cycles within one second at {hz} Hz", hi - lo + 1);
    }
    Ok(format!("{hz} Hz -> {achieved:.1} Hz"))
}

fn criterion_4(_: &Path) -> Check {
    let t0 = Instant::now();
    sbnet::pacing::set_timer_slack();
    let mut notes = Vec::new();
    for hz in [100.0, 1_000.0, 10_000.0] {
        notes.push(pace_run(hz, 5.0)?);
    }
    // After a stall the burst is clamped, then pacing resumes.
    let hz = 1_000.0;
    let mut r = RateLimiter::new(hz);
    for _ in 0..10 {
        r.pace();
    }
    thread::sleep(Duration::from_secs(1));
    let mut stamps = Vec::new();
    for _ in 0..400 {
        r.pace();
        stamps.push(Instant::now());
    }
    let half_period = Duration::from_secs_f64(0.5 / hz);
    let burst = 1 + stamps.windows(2).take_while(|w| w[1] - w[0] < half_period).count();
    let after = (stamps[399] - stamps[MAX_CATCH_UP as usize + 1]).as_secs_f64();
    let resumed = (400 - MAX_CATCH_UP as usize - 2) as f64 / after;
    ensure!(burst <= MAX_CATCH_UP as usize + 1, "burst of {burst} after stall");
    ensure!((resumed - hz).abs() / hz <= 0.02, "rate after stall {resumed:.1} Hz");
    within(t0.elapsed(), Duration::from_secs(30))?;
    notes.push(format!("stall burst {burst}, then {resumed:.1} Hz"));
    Ok(notes.join("; "))
}

// 5. Matmul exactness.

fn criterion_5(dir: &Path) -> Check {
    let t0 = Instant::now();
    let mut runs = 0;
    for k in [1usize, 2, 4, 8] {
        let a = Matrix::random(k, k, 1_000, 100 + k as u64);
        let b = Matrix::random(k, k, 1_000, 200 + k as u64);
        let want = common::reference_matmul(&a.to_rows(), &b.to_rows());
        let half = k.div_ceil(2);
        let flat = GridOptions::new(k, 2, 1);
        let nested = GridOptions::new(k, 2, 1).with_sub_grid(half, half);
        let dist = Execution::Distributed {
            launch: launch(),
            build: BuildOptions::new(dir),
            max_rate_hz: None,
            timeout: Duration::from_secs(60),
        };
        for (what, grid, exec) in [
            ("oracle", &flat, &Execution::Oracle),
            ("distributed", &flat, &dist),
            ("network-of-networks", &nested, &dist),
        ] {
            let out = run_matmul(&a, &b, grid, exec).map_err(|e| format!("k={k} {what}: {e}"))?;
            ensure!(out.y.to_rows() == want, "k={k} {what}: Y != A x B");
            if what != "oracle" {
                ensure!(out.processes >= 3, "k={k} {what}: only {} processes", out.processes);
            }
            runs += 1;
        }
    }
    within(t0.elapsed(), Duration::from_secs(120))?;
    Ok(format!("{runs} runs exact; {:.1?}", t0.elapsed()))
}

// 6. Accuracy convergence.

fn criterion_6(dir: &Path) -> Check {
    let t0 = Instant::now();
    let spec = SweepSpec::default();
    let processes = (spec.grid / spec.sub_grid).pow(2);
    ensure!(processes >= 4, "only {processes} tile processes");
    let rows = experiment::sweep(&spec, &launch(), dir, |_| ()).map_err(|e| e.to_string())?;
    let agg = experiment::aggregates(&rows);
    let highest = agg.first().unwrap();
    let lowest = agg.last().unwrap();
    ensure!(
        highest.max_rate_hz / lowest.max_rate_hz >= 1e3,
        "rates span less than three orders of magnitude"
    );
    let summary: Vec<String> = agg
        .iter()
        .map(|r| format!("{} Hz {:.2}%", r.max_rate_hz, 100.0 * r.relative_error))
        .collect();
    let summary = format!(
        "{}x{} grid, {processes} tile processes, oracle {:.2} cycles/row: {}",
        spec.grid,
        spec.grid,
        lowest.oracle_row_cycles,
        summary.join(", ")
    );
    ensure!(lowest.relative_error < highest.relative_error, "no convergence: {summary}");
    ensure!(lowest.relative_error < 0.05, "lowest-rate error too large: {summary}");
    within(t0.elapsed(), Duration::from_secs(600))?;
    Ok(summary)
}

// 7. TCP bridge.

fn fresh(dir: &Path, name: &str) -> PathBuf {
    let p = dir.join(name);
    drop(Producer::open(&p, true).unwrap());
    p
}

type PumpThread = thread::JoinHandle<Result<tcpbridge::PumpStats, BridgeError>>;

fn bridge_pair(dir: &Path, labels: &[&str], client_first: bool) -> (Arc<AtomicBool>, PumpThread, PumpThread) {
    let server_b: Vec<Binding> = labels
        .iter()
        .map(|l| Binding::new(*l, Direction::Outbound, fresh(dir, &format!("a_{l}.q"))))
        .collect();
    let client_b: Vec<Binding> = labels
        .iter()
        .map(|l| Binding::new(*l, Direction::Inbound, fresh(dir, &format!("b_{l}.q"))))
        .collect();
    let stop = Arc::new(AtomicBool::new(false));
    let port = {
        let probe = tcpbridge::listen("127.0.0.1:0").unwrap();
        probe.local_addr().unwrap().port()
    };
    let s = stop.clone();
    let client = thread::spawn(move || tcpbridge::connect("127.0.0.1", port, &client_b, &s)?.pump(s));
    if client_first {
        thread::sleep(Duration::from_millis(1_500));
    }
    let listener = tcpbridge::listen(("127.0.0.1", port)).unwrap();
    let s = stop.clone();
    let server = thread::spawn(move || listener.accept(&server_b, &s)?.pump(s));
    (stop, server, client)
}

fn finish(dir: &Path, stop: Arc<AtomicBool>, a: PumpThread, b: PumpThread) -> Result<(), String> {
    stop.store(true, Ordering::Relaxed);
    a.join().unwrap().map_err(|e| e.to_string())?;
    b.join().unwrap().map_err(|e| e.to_string())?;
    // The queues were made by hand here, so they are removed by hand.
    for f in common::leftover_files(dir) {
        if f.parent() == Some(dir) && f.extension().is_some_and(|e| e == "q") {
            std::fs::remove_file(f).unwrap();
        }
    }
    Ok(())
}

fn criterion_7(dir: &Path) -> Check {
    let t0 = Instant::now();
    const N: u64 = 10_000;
    let labels = ["x", "y"];
    let (stop, server, client) = bridge_pair(dir, &labels, false);
    let mut tx: Vec<Producer> = labels
        .iter()
        .map(|l| Producer::open(dir.join(format!("a_{l}.q")), false).unwrap())
        .collect();
    let mut rx: Vec<Consumer> = labels
        .iter()
        .map(|l| Consumer::open(dir.join(format!("b_{l}.q")), false).unwrap())
        .collect();
    let tag = |b: usize, n: u64| {
        let mut p = shmq::stress_packet(n);
        p.destination = b as u32;
        p
    };
    let mut sent = [0u64; 2];
    let mut got = [0u64; 2];
    while got.iter().any(|&g| g < N) {
        ensure!(t0.elapsed() < Duration::from_secs(30), "stalled at {got:?}");
        for b in 0..2 {
            if sent[b] < N && tx[b].try_send(&tag(b, sent[b])) {
                sent[b] += 1;
            }
            while let Some(p) = rx[b].try_recv() {
                ensure!(p == tag(b, got[b]), "binding {b} packet {} differs", got[b]);
                got[b] += 1;
            }
        }
        thread::yield_now();
    }
    finish(dir, stop, server, client)?;

    let b = |l: &str, d| Binding::new(l, d, "/unused.q");
    let listener = tcpbridge::listen("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    let stop = AtomicBool::new(false);
    let srv = thread::spawn(move || {
        let three = [b("p", Direction::Outbound), b("q", Direction::Outbound), b("r", Direction::Inbound)];
        listener.accept(&three, &AtomicBool::new(false)).map(|_| ())
    });
    let two = [b("p", Direction::Inbound), b("q", Direction::Inbound)];
    let cli = tcpbridge::connect("127.0.0.1", port, &two, &stop).map(|_| ());
    let srv = srv.join().unwrap();
    ensure!(
        matches!(cli, Err(BridgeError::HandshakeMismatch(_))) && matches!(srv, Err(BridgeError::HandshakeMismatch(_))),
        "mismatch accepted: {cli:?} {srv:?}"
    );

    let order = dir.join("order");
    std::fs::create_dir_all(&order).unwrap();
    let (stop, server, client) = bridge_pair(&order, &["o"], true);
    let mut tx = Producer::open(order.join("a_o.q"), false).unwrap();
    let mut rx = Consumer::open(order.join("b_o.q"), false).unwrap();
    tx.send_blocking(&tag(0, 1), Duration::from_secs(10)).unwrap();
    ensure!(rx.recv_blocking(Duration::from_secs(10)) == Ok(tag(0, 1)), "client-first link dead");
    finish(&order, stop, server, client)?;

    let stall = dir.join("stall");
    std::fs::create_dir_all(&stall).unwrap();
    let (stop, server, client) = bridge_pair(&stall, &["s"], false);
    const M: u64 = 200_000;
    let a = stall.join("a_s.q");
    let feeder = thread::spawn(move || {
        let mut tx = Producer::open(&a, false).unwrap();
        for n in 0..M {
            tx.send_blocking(&shmq::stress_packet(n), Duration::from_secs(30)).unwrap();
        }
    });
    thread::sleep(Duration::from_secs(1));
    let mut rx = Consumer::open(stall.join("b_s.q"), false).unwrap();
    for n in 0..M {
        let p = rx.recv_blocking(Duration::from_secs(30)).map_err(|_| format!("lost after {n}"))?;
        ensure!(shmq::check_stress_packet(&p) == Some(n), "stall test: packet {n} wrong");
    }
    feeder.join().unwrap();
    ensure!(rx.try_recv().is_none(), "duplicate after stall");
    finish(&stall, stop, server, client)?;
    within(t0.elapsed(), Duration::from_secs(60))?;
    Ok(format!(
        "2x{N} in order; mismatch rejected; client-first ok; {M} through 1 s stall, 0 lost"
    ))
}

// 8. Orchestration hygiene (post-conditions recorded by `main`) plus an
// injected crash.

fn inc_chain(n: usize) -> NetworkGraph {
    let mut g = NetworkGraph::new(Mode::Distributed);
    let def = BlockDef::new("inc", BlockSpec::Inc {}).unwrap();
    let ids: Vec<_> = (0..n).map(|k| g.instantiate(format!("i{k}"), &def).unwrap()).collect();
    for w in ids.windows(2) {
        g.connect(g.port(w[0], "out").unwrap(), g.port(w[1], "in").unwrap()).unwrap();
    }
    g.external(g.port(ids[0], "in").unwrap(), "stim").unwrap();
    g.external(g.port(ids[n - 1], "out").unwrap(), "result").unwrap();
    g
}

fn crash_run(dir: &Path) -> Check {
    let plan = inc_chain(4).build(&BuildOptions::new(dir)).map_err(|e| e.to_string())?;
    let mut run = simulate(&plan, &launch()).map_err(|e| e.to_string())?;
    let mut pids = run.child_pids().to_vec();
    let mut found = common::settled_procs(&dir.to_string_lossy(), pids.len());
    found.sort_unstable();
    pids.sort_unstable();
    ensure!(pids.len() == 4 && found == pids, "workers {pids:?}, processes seen {found:?}");
    let victim = run.child_pids()[1];
    unsafe {
        libc::kill(victim as i32, libc::SIGKILL);
    }
    let stim: BTreeMap<String, Vec<sbnet::Packet>> =
        [("stim".to_string(), (0..10_000).map(shmq::stress_packet).collect())].into();
    let expect: BTreeMap<String, usize> = [("result".to_string(), 10_000)].into();
    let r = run.exchange(&stim, &expect, Duration::from_secs(30));
    let named = matches!(&r, Err(NetError::WorkerExited { instance, .. }) if instance == "i1");
    ensure!(named, "crash not attributed: {r:?}");
    drop(run);
    Ok("killed i1 reported".into())
}

// 9. Transaction layer.

fn criterion_9(dir: &Path) -> Check {
    const SIZE: usize = 1 << 16;
    let mut g = NetworkGraph::new(Mode::Distributed);
    let def = BlockDef::new("ram", BlockSpec::Memory { size: SIZE }).unwrap();
    let ram = g.instantiate("ram", &def).unwrap();
    g.external(g.port(ram, "req").unwrap(), "req").unwrap();
    g.external(g.port(ram, "resp").unwrap(), "resp").unwrap();
    let plan = g.build(&BuildOptions::new(dir)).map_err(|e| e.to_string())?;
    let mut run = simulate(&plan, &launch()).map_err(|e| e.to_string())?;
    let (req, resp) = run.pair("req", "resp").map_err(|e| e.to_string())?;
    let mut mem = MemClient::new(req, resp);

    let listing: Vec<u8> = (0..84u8).collect();
    mem.write(0x1234, &listing).map_err(|e| e.to_string())?;
    ensure!(mem.read(0x1234, 84).map_err(|e| e.to_string())? == listing, "84 bytes at 0x1234");

    let mut shadow = vec![0u8; SIZE];
    shadow[0x1234..0x1234 + 84].copy_from_slice(&listing);
    let mut rng = ChaCha8Rng::seed_from_u64(0x1234);
    let lens = [1, 40, 41, 42, 82, 83, 2 * CHUNK_SIZE + 40];
    for round in 0..300 {
        let len = lens.get(round).copied().unwrap_or_else(|| rng.gen_range(1..=400));
        let addr = rng.gen_range(0..=SIZE - len);
        let bytes: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        mem.write(addr as u64, &bytes).map_err(|e| e.to_string())?;
        shadow[addr..addr + len].copy_from_slice(&bytes);
        let ra = rng.gen_range(0..SIZE);
        let rl = rng.gen_range(1..=(SIZE - ra).min(400));
        let got = mem.read(ra as u64, rl).map_err(|e| e.to_string())?;
        ensure!(got == shadow[ra..ra + rl], "read {rl} at {ra:#x} differs");
    }
    let end = SIZE as u64;
    ensure!(
        mem.write(end - 4, &[1; 8]) == Err(MemError::OutOfRange { addr: end - 4, len: 8 }),
        "out-of-range write accepted"
    );
    ensure!(
        mem.read(end, 1) == Err(MemError::OutOfRange { addr: end, len: 1 }),
        "out-of-range read accepted"
    );
    ensure!(mem.read(end - 4, 4).map_err(|e| e.to_string())? == shadow[SIZE - 4..], "rejected write leaked");
    drop(run);
    Ok("listing values, 300 random accesses, out-of-range rejected".into())
}

fn hygiene(dir: &Path) -> Result<(), String> {
    let deadline = Instant::now() + Duration::from_secs(2);
    loop {
        let procs = common::procs_mentioning(&dir.to_string_lossy());
        let queues: Vec<PathBuf> = common::leftover_files(dir)
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e == "q" || e == "json"))
            .collect();
        if procs.is_empty() && queues.is_empty() {
            return Ok(());
        }
        if Instant::now() >= deadline {
            return Err(format!("orphans {procs:?}, leftover {queues:?}"));
        }
        thread::sleep(Duration::from_millis(50));
    }
}

fn run_one(name: &str, dir: &Path, f: fn(&Path) -> Check) -> (Check, Result<(), String>) {
    std::fs::create_dir_all(dir).unwrap();
    let r = panic::catch_unwind(AssertUnwindSafe(|| f(dir)))
        .unwrap_or_else(|e| Err(format!("panicked: {}", panic_text(&e))));
    let h = hygiene(dir).map_err(|e| format!("{name}: {e}"));
    (r, h)
}

fn panic_text(e: &Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_default()
}

fn report(n: u32, title: &str, r: &Check) -> bool {
    let (tag, text) = match r {
        Ok(s) => ("PASS", s),
        Err(s) => ("FAIL", s),
    };
    println!("{tag} {n}. {title}: {text}");
    let _ = std::io::stdout().flush();
    r.is_ok()
}

fn main() -> ExitCode {
    panic::set_hook(Box::new(|_| {}));
    let root = tempfile::tempdir().unwrap();
    let criteria: [(u32, &str, fn(&Path) -> Check); 8] = [
        (1, "queue correctness", criterion_1),
        (2, "queue performance", criterion_2),
        (3, "performance equations", criterion_3),
        (4, "rate limiter", criterion_4),
        (5, "matmul exactness", criterion_5),
        (6, "accuracy convergence", criterion_6),
        (7, "tcp bridge", criterion_7),
        (9, "transaction layer", criterion_9),
    ];
    let mut ok = true;
    let mut dirty = Vec::new();
    for (n, title, f) in criteria {
        let (r, h) = run_one(title, &root.path().join(format!("c{n}")), f);
        ok &= report(n, title, &r);
        if let Err(e) = h {
            dirty.push(e);
        }
    }
    let (crash, h) = run_one("crash", &root.path().join("c8"), crash_run);
    if let Err(e) = h {
        dirty.push(e);
    }
    let hygiene_result = match (crash, dirty.is_empty()) {
        (Ok(c), true) => Ok(format!("{c}; no orphans or queue files after any criterion")),
        (Ok(_), false) => Err(dirty.join("; ")),
        (Err(e), _) => Err(e),
    };
    ok &= report(8, "orchestration hygiene", &hygiene_result);
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
