use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::Ordering;
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand, ValueEnum};

use sbnet::blocks::GridOptions;
use sbnet::experiment::{self, Execution, ExperimentError, Matrix, SweepSpec};
use sbnet::netgraph::config::NetworkConfig;
use sbnet::netgraph::{
    run_oracle, simulate, worker, BuildOptions, LaunchOptions, Mode, NetError, NetworkGraph, OracleOptions,
};
use sbnet::shmq::{self, BenchOptions, Consumer, Producer};
use sbnet::Packet;

const EXIT_USAGE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

const REFERENCE_LATENCY_NS: f64 = 213.0;
const REFERENCE_PPS: f64 = 27e6;
const REFERENCE_BPS: f64 = 1.4e9;

#[derive(Parser)]
#[command(name = "sbnet", version, about = "Multi-process cycle simulation over shared-memory queues")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Measure queue round-trip latency and throughput between two processes.
    Bench {
        #[arg(long, default_value_t = 1_000_000)]
        packets: u64,
        /// Directory for the two queue files (defaults to $SBQ_DIR or ./sbq).
        #[arg(long)]
        dir: Option<PathBuf>,
        /// Round trips timed for the latency figure.
        #[arg(long, default_value_t = 100_000)]
        samples: u64,
        /// Also write the report as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run a network described by a JSON config.
    Run {
        config: PathBuf,
        /// Global maximum cycle rate for every worker.
        #[arg(long)]
        max_rate: Option<f64>,
        /// Execute in one deterministic scheduler instead of processes.
        #[arg(long)]
        oracle: bool,
        /// Cycle budget for --oracle.
        #[arg(long, default_value_t = 1_000_000)]
        horizon: u64,
        /// Write each worker's stderr to <dir>/<worker>.log.
        #[arg(long)]
        log_dir: Option<PathBuf>,
        /// Without an io section, run this many seconds, then stop.
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Multiply A by B on a grid of tiles each holding one element of B.
    Matmul {
        /// Grid rows (rows of B). Inferred from --b when omitted.
        #[arg(long)]
        rows: Option<usize>,
        /// Grid columns (columns of B). Inferred from --b when omitted.
        #[arg(long)]
        cols: Option<usize>,
        #[arg(long, default_value_t = 1)]
        tiles_per_proc: usize,
        /// CSV of A; random when omitted.
        #[arg(long)]
        a: Option<PathBuf>,
        /// CSV of B; random when omitted.
        #[arg(long)]
        b: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Rows of a random A.
        #[arg(long)]
        a_rows: Option<usize>,
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        max_rate: Option<f64>,
        #[arg(long, default_value_t = 1)]
        compute_cycles: u32,
        /// Where to write Y (stdout when omitted).
        #[arg(long)]
        out_y: Option<PathBuf>,
        /// Where to write per-row cycle counts.
        #[arg(long)]
        out_cycles: Option<PathBuf>,
        #[arg(long)]
        log_dir: Option<PathBuf>,
    },
    /// Measure the cycles-per-row error against the oracle across rates.
    Sweep {
        #[arg(long, value_delimiter = ',', default_values_t = vec![100_000.0, 10_000.0, 1_000.0, 100.0])]
        rates: Vec<f64>,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long, default_value_t = 8)]
        grid: usize,
        /// Side of each square sub-grid run as one process.
        #[arg(long, default_value_t = 4)]
        sub: usize,
        #[arg(long, default_value_t = 8)]
        a_rows: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        compute_cycles: u32,
        /// Where to write the CSV (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    #[command(hide = true)]
    Worker { config: PathBuf },
    #[command(hide = true)]
    Echo {
        #[arg(long)]
        rx: PathBuf,
        #[arg(long)]
        tx: PathBuf,
    },
    #[command(hide = true)]
    Qstress {
        #[arg(long, value_enum)]
        role: Role,
        #[arg(long)]
        path: PathBuf,
        #[arg(long)]
        count: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Role {
    Producer,
    Consumer,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(e: impl std::fmt::Display) -> Self {
        Failure {
            code: EXIT_CONFIG,
            message: e.to_string(),
        }
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        Failure {
            code: EXIT_RUNTIME,
            message: e.to_string(),
        }
    }
}

impl From<NetError> for Failure {
    fn from(e: NetError) -> Self {
        use NetError::*;
        match e {
            Spawn { .. } | WorkerExited { .. } | HorizonExceeded { .. } | Timeout(..) | Io { .. } | Queue(_)
            | Bridge(_) => Failure::runtime(e),
            _ => Failure::config(e),
        }
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Net(n) => n.into(),
            ExperimentError::Matrix(_) | ExperimentError::Csv(_) => Failure::config(e),
            _ => Failure::runtime(e),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let result = match cli.cmd {
        Cmd::Bench {
            packets,
            dir,
            samples,
            csv,
        } => cmd_bench(packets, dir, samples, csv),
        Cmd::Run {
            config,
            max_rate,
            oracle,
            horizon,
            log_dir,
            duration,
        } => cmd_run(&config, max_rate, oracle, horizon, log_dir, duration),
        Cmd::Matmul {
            rows,
            cols,
            tiles_per_proc,
            a,
            b,
            seed,
            a_rows,
            oracle,
            max_rate,
            compute_cycles,
            out_y,
            out_cycles,
            log_dir,
        } => cmd_matmul(MatmulArgs {
            rows,
            cols,
            tiles_per_proc,
            a,
            b,
            seed,
            a_rows,
            oracle,
            max_rate,
            compute_cycles,
            out_y,
            out_cycles,
            log_dir,
        }),
        Cmd::Sweep {
            rates,
            reps,
            grid,
            sub,
            a_rows,
            seed,
            compute_cycles,
            out,
        } => cmd_sweep(
            SweepSpec {
                rates_hz: rates,
                repetitions: reps,
                grid,
                sub_grid: sub,
                a_rows,
                compute_cycles,
                seed,
            },
            out,
        ),
        Cmd::Worker { config } => cmd_worker(&config),
        Cmd::Echo { rx, tx } => shmq::echo_peer(&rx, &tx).map_err(Failure::runtime),
        Cmd::Qstress { role, path, count } => cmd_qstress(role, &path, count),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("sbnet: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn open_out(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(fs::File::create(p).map_err(|e| {
            Failure::runtime(format!("{}: {e}", p.display()))
        })?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn cmd_bench(packets: u64, dir: Option<PathBuf>, samples: u64, csv_path: Option<PathBuf>) -> CmdResult {
    let dir = dir.unwrap_or_else(shmq::queue_dir);
    fs::create_dir_all(&dir).map_err(|e| Failure::runtime(format!("{}: {e}", dir.display())))?;
    let exe = std::env::current_exe().map_err(Failure::runtime)?;
    let mut opts = BenchOptions::new(&dir, packets, exe);
    opts.latency_samples = samples;
    let r = shmq::bench(&opts).map_err(Failure::runtime)?;
    let rows = [
        ("round_trip_latency_ns", r.round_trip_latency_ns, REFERENCE_LATENCY_NS),
        ("packets_per_second", r.packets_per_second, REFERENCE_PPS),
        ("bytes_per_second", r.bytes_per_second, REFERENCE_BPS),
    ];
    println!("{:<24}{:>16}{:>16}", "metric", "measured", "reference");
    for (name, measured, reference) in rows {
        println!("{name:<24}{measured:>16.4e}{reference:>16.4e}");
    }
    println!(
        "p99 round trip {:.0} ns over {} samples; {} packets streamed",
        r.round_trip_p99_ns, r.latency_samples, r.packets
    );
    if let Some(p) = csv_path {
        let mut w = csv::Writer::from_writer(open_out(Some(&p))?);
        w.write_record(["metric", "measured", "reference"]).map_err(Failure::runtime)?;
        for (name, measured, reference) in rows {
            w.write_record([name.to_string(), measured.to_string(), reference.to_string()])
                .map_err(Failure::runtime)?;
        }
        w.flush().map_err(Failure::runtime)?;
    }
    Ok(())
}

/// Reads one packet per line as `destination flags hex-payload`; blank
/// lines and `#` comments are skipped.
fn read_packets(path: &Path) -> Result<Vec<Packet>, Failure> {
    let f = fs::File::open(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let p = t
            .parse::<Packet>()
            .map_err(|e| Failure::config(format!("{}: line {}: {e}", path.display(), n + 1)))?;
        out.push(p);
    }
    Ok(out)
}

fn write_packets(path: &Path, packets: &[Packet]) -> CmdResult {
    let mut w = open_out(Some(path))?;
    for p in packets {
        writeln!(w, "{p}").map_err(Failure::runtime)?;
    }
    w.flush().map_err(Failure::runtime)
}

fn cmd_run(
    config: &Path,
    max_rate: Option<f64>,
    oracle: bool,
    horizon: u64,
    log_dir: Option<PathBuf>,
    duration: Option<f64>,
) -> CmdResult {
    let cfg = NetworkConfig::load(config).map_err(Failure::config)?;
    let mut g = NetworkGraph::from_config(&cfg)?;
    if let Some(hz) = max_rate {
        if !(hz > 0.0 && hz.is_finite()) {
            return Err(Failure::config(format!("--max-rate must be positive, got {hz}")));
        }
        g.set_max_rate(Some(hz));
    }
    if oracle {
        g.set_mode(Mode::SingleNetlist);
    }
    g.validate()?;
    let base = config.parent().unwrap_or(Path::new("."));
    let io_cfg = cfg.io.clone().unwrap_or_default();
    let mut stimulus = BTreeMap::new();
    for (label, file) in &io_cfg.inputs {
        stimulus.insert(label.clone(), read_packets(&base.join(file))?);
    }
    let expect: BTreeMap<String, usize> = io_cfg.outputs.iter().map(|(l, o)| (l.clone(), o.count)).collect();

    let outputs = if g.mode() == Mode::SingleNetlist {
        let mut opts = OracleOptions::new(horizon);
        for (l, &n) in &expect {
            opts = opts.expect(l.clone(), n);
        }
        let trace = run_oracle(&g, &stimulus, &opts)?;
        eprintln!("oracle finished after {} cycles", trace.cycles);
        expect.keys().map(|l| (l.clone(), trace.packets(l))).collect()
    } else {
        let plan = g.build(&BuildOptions::default())?;
        let mut launch = LaunchOptions::current().map_err(Failure::runtime)?;
        launch.log_dir = log_dir;
        let mut run = simulate(&plan, &launch)?;
        let result = if cfg.io.is_some() {
            let timeout = Duration::from_secs_f64(io_cfg.timeout_s.unwrap_or(60.0));
            run.exchange(&stimulus, &expect, timeout)
        } else {
            wait_for(&mut run, duration).map(|()| BTreeMap::new())
        };
        let report = run.shutdown();
        if !report.killed().is_empty() {
            log::warn!("killed on shutdown: {}", report.killed().join(", "));
        }
        result?
    };
    for (label, out) in &io_cfg.outputs {
        write_packets(&base.join(&out.file), &outputs[label])?;
    }
    Ok(())
}

/// Runs until `duration` elapses or a worker exits; a clean exit, such as a
/// TCP bridge whose peer closed, ends the run normally.
fn wait_for(run: &mut sbnet::netgraph::RunHandle, duration: Option<f64>) -> Result<(), NetError> {
    let end = duration.map(|s| Instant::now() + Duration::from_secs_f64(s));
    loop {
        if let Some((instance, status)) = run.first_exit() {
            if status.success() {
                log::info!("worker {instance} finished");
                return Ok(());
            }
            return Err(NetError::WorkerExited {
                instance,
                status: status.to_string(),
            });
        }
        if end.is_some_and(|e| Instant::now() >= e) {
            return Ok(());
        }
        std::thread::sleep(Duration::from_millis(20));
    }
}

struct MatmulArgs {
    rows: Option<usize>,
    cols: Option<usize>,
    tiles_per_proc: usize,
    a: Option<PathBuf>,
    b: Option<PathBuf>,
    seed: u64,
    a_rows: Option<usize>,
    oracle: bool,
    max_rate: Option<f64>,
    compute_cycles: u32,
    out_y: Option<PathBuf>,
    out_cycles: Option<PathBuf>,
    log_dir: Option<PathBuf>,
}

fn read_matrix(path: &Path) -> Result<Matrix, Failure> {
    let f = fs::File::open(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    Matrix::read_csv(f).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

fn cmd_matmul(args: MatmulArgs) -> CmdResult {
    if args.compute_cycles == 0 {
        return Err(Failure::config("--compute-cycles must be positive"));
    }
    let b = match &args.b {
        Some(p) => read_matrix(p)?,
        None => {
            let (Some(r), Some(c)) = (args.rows, args.cols) else {
                return Err(Failure::config("give --b or both --rows and --cols"));
            };
            Matrix::random(r, c, 9, args.seed.wrapping_add(1))
        }
    };
    if args.rows.is_some_and(|r| r != b.rows()) || args.cols.is_some_and(|c| c != b.cols()) {
        return Err(Failure::config(format!(
            "shape mismatch: B is {}x{}, grid is {:?}x{:?}",
            b.rows(),
            b.cols(),
            args.rows,
            args.cols
        )));
    }
    let a = match &args.a {
        Some(p) => read_matrix(p)?,
        None => Matrix::random(args.a_rows.unwrap_or(b.rows()), b.rows(), 9, args.seed),
    };
    let grid = GridOptions::new(a.rows(), args.compute_cycles, args.tiles_per_proc);
    let exec = if args.oracle {
        Execution::Oracle
    } else {
        let mut launch = LaunchOptions::current().map_err(Failure::runtime)?;
        launch.log_dir = args.log_dir;
        Execution::Distributed {
            launch,
            build: BuildOptions::default(),
            max_rate_hz: args.max_rate,
            timeout: Duration::from_secs(600),
        }
    };
    let out = experiment::run_matmul(&a, &b, &grid, &exec)?;
    out.y.write_csv(open_out(args.out_y.as_deref())?)?;
    if let Some(p) = &args.out_cycles {
        let mut w = csv::Writer::from_writer(open_out(Some(p))?);
        w.write_record(["row", "cycles"]).map_err(Failure::runtime)?;
        for (row, cycles) in &out.row_cycles {
            w.write_record([row.to_string(), cycles.to_string()]).map_err(Failure::runtime)?;
        }
        w.flush().map_err(Failure::runtime)?;
    }
    let last = out.records.iter().map(|r| r.cycle).max().unwrap_or(0);
    eprintln!(
        "mean row cycles {:.2}; last output at cycle {last}; {} processes; wall {:.3} s",
        out.mean_row_cycles,
        out.processes,
        out.wall.as_secs_f64()
    );
    Ok(())
}

fn cmd_sweep(spec: SweepSpec, out: Option<PathBuf>) -> CmdResult {
    if spec.rates_hz.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
        return Err(Failure::config("rates must be positive"));
    }
    let launch = LaunchOptions::current().map_err(Failure::runtime)?;
    let rows = experiment::sweep(&spec, &launch, &shmq::queue_dir(), |r| {
        eprintln!(
            "{:>10} Hz  rep {:<4}  measured {:>9.2}  oracle {:>9.2}  error {:.4}",
            r.max_rate_hz, r.repetition, r.measured_row_cycles, r.oracle_row_cycles, r.relative_error
        );
    })?;
    experiment::write_sweep_csv(&rows, open_out(out.as_deref())?)?;
    Ok(())
}

fn cmd_worker(config: &Path) -> CmdResult {
    sbnet::pacing::set_timer_slack();
    let spec = worker::load_spec(config)?;
    let stop = worker::stop_on_stdin_eof();
    let r = worker::run(&spec, stop.clone());
    stop.store(true, Ordering::Relaxed);
    r.map(|_| ()).map_err(|e| Failure::runtime(format!("{}: {e}", spec.name)))
}

fn cmd_qstress(role: Role, path: &Path, count: u64) -> CmdResult {
    const STALL: Duration = Duration::from_secs(60);
    match role {
        Role::Producer => {
            let mut tx = Producer::open(path, false).map_err(Failure::runtime)?;
            for seq in 0..count {
                tx.send_blocking(&shmq::stress_packet(seq), STALL)
                    .map_err(|_| Failure::runtime(format!("consumer stalled at {seq}")))?;
            }
        }
        Role::Consumer => {
            let mut rx = Consumer::open(path, false).map_err(Failure::runtime)?;
            let (mut torn, mut reordered) = (0u64, 0u64);
            for want in 0..count {
                let p = rx
                    .recv_blocking(STALL)
                    .map_err(|_| Failure::runtime(format!("producer stalled at {want}")))?;
                match shmq::check_stress_packet(&p) {
                    None => torn += 1,
                    Some(seq) if seq != want => reordered += 1,
                    Some(_) => {}
                }
            }
            println!("received {count} torn {torn} reordered {reordered}");
            if torn + reordered > 0 {
                return Err(Failure::runtime("stream corrupted"));
            }
        }
    }
    Ok(())
}
