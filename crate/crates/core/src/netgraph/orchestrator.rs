//! Launches a plan's workers and owns them until shutdown.
//!
//! Each worker is this binary re-executed as `<exe> worker <config.json>`
//! with a piped stdin. Workers stop when stdin reaches end of file, so
//! closing the pipe is the shutdown signal and the death of the
//! orchestrator stops them too.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::PathBuf;
use std::process::{Child, Command, ExitStatus, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use super::{NetError, SpawnPlan};
use crate::packet::Packet;
use crate::shmq::{Consumer, Producer};

const GRACE: Duration = Duration::from_secs(5);

#[derive(Debug, Clone)]
pub struct LaunchOptions {
    /// Executable providing the `worker` subcommand.
    pub exe: PathBuf,
    /// When set, each worker's stderr goes to `<log_dir>/<name>.log`.
    pub log_dir: Option<PathBuf>,
}

impl LaunchOptions {
    pub fn new(exe: impl Into<PathBuf>) -> Self {
        LaunchOptions {
            exe: exe.into(),
            log_dir: None,
        }
    }

    /// Uses the running executable.
    pub fn current() -> std::io::Result<Self> {
        Ok(Self::new(std::env::current_exe()?))
    }
}

struct Worker {
    name: String,
    child: Child,
}

#[derive(Debug, Clone, Default)]
pub struct ShutdownReport {
    /// Exit status per worker; `None` when it had to be killed.
    pub statuses: Vec<(String, Option<ExitStatus>)>,
}

impl ShutdownReport {
    pub fn killed(&self) -> Vec<&str> {
        self.statuses
            .iter()
            .filter(|(_, s)| s.is_none())
            .map(|(n, _)| n.as_str())
            .collect()
    }
}

/// A running network. Dropping it shuts the network down.
pub struct RunHandle {
    run_dir: PathBuf,
    workers: Vec<Worker>,
    producers: HashMap<String, Producer>,
    consumers: HashMap<String, Consumer>,
    finished: bool,
}

fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> NetError + '_ {
    move |source| NetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Creates the run's queues, starts every worker, and opens the driver's
/// ends of the externals. Any failure tears down what was started.
pub fn simulate(plan: &SpawnPlan, opts: &LaunchOptions) -> Result<RunHandle, NetError> {
    fs::create_dir_all(&plan.run_dir).map_err(io_err(&plan.run_dir))?;
    let mut run = RunHandle {
        run_dir: plan.run_dir.clone(),
        workers: Vec::with_capacity(plan.workers.len()),
        producers: HashMap::new(),
        consumers: HashMap::new(),
        finished: false,
    };
    match launch(plan, opts, &mut run) {
        Ok(()) => Ok(run),
        Err(e) => {
            run.shutdown_inner();
            Err(e)
        }
    }
}

fn launch(plan: &SpawnPlan, opts: &LaunchOptions, run: &mut RunHandle) -> Result<(), NetError> {
    for q in &plan.queues {
        drop(Producer::open(q, true)?);
    }
    for q in &plan.inputs {
        run.producers.insert(q.label.clone(), Producer::open(&q.path, false)?);
    }
    for q in &plan.outputs {
        run.consumers.insert(q.label.clone(), Consumer::open(&q.path, false)?);
    }
    for (k, w) in plan.workers.iter().enumerate() {
        let cfg = plan.run_dir.join(format!("w{k}.json"));
        let text = serde_json::to_vec(w).expect("worker spec serializes");
        fs::write(&cfg, text).map_err(io_err(&cfg))?;
        let stderr = match &opts.log_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(io_err(dir))?;
                let path = dir.join(format!("{}.log", w.name));
                Stdio::from(fs::File::create(&path).map_err(io_err(&path))?)
            }
            None => Stdio::inherit(),
        };
        let child = Command::new(&opts.exe)
            .arg("worker")
            .arg(&cfg)
            .stdin(Stdio::piped())
            .stdout(Stdio::null())
            .stderr(stderr)
            .spawn()
            .map_err(|source| NetError::Spawn {
                instance: w.name.clone(),
                source,
            })?;
        run.workers.push(Worker {
            name: w.name.clone(),
            child,
        });
    }
    Ok(())
}

impl RunHandle {
    pub fn run_dir(&self) -> &std::path::Path {
        &self.run_dir
    }

    pub fn child_pids(&self) -> Vec<u32> {
        self.workers.iter().map(|w| w.child.id()).collect()
    }

    pub fn worker_names(&self) -> Vec<&str> {
        self.workers.iter().map(|w| w.name.as_str()).collect()
    }

    /// The driver's producer for an external input.
    pub fn producer(&mut self, label: &str) -> Result<&mut Producer, NetError> {
        self.producers
            .get_mut(label)
            .ok_or_else(|| NetError::UnknownExternal(label.to_string()))
    }

    /// The driver's consumer for an external output.
    pub fn consumer(&mut self, label: &str) -> Result<&mut Consumer, NetError> {
        self.consumers
            .get_mut(label)
            .ok_or_else(|| NetError::UnknownExternal(label.to_string()))
    }

    /// Both ends at once, for request/response drivers.
    pub fn pair(&mut self, input: &str, output: &str) -> Result<(&mut Producer, &mut Consumer), NetError> {
        let p = self
            .producers
            .get_mut(input)
            .ok_or_else(|| NetError::UnknownExternal(input.to_string()))?;
        let c = self
            .consumers
            .get_mut(output)
            .ok_or_else(|| NetError::UnknownExternal(output.to_string()))?;
        Ok((p, c))
    }

    /// The first worker found to have exited, with its status.
    pub fn first_exit(&mut self) -> Option<(String, ExitStatus)> {
        self.workers
            .iter_mut()
            .find_map(|w| match w.child.try_wait() {
                Ok(Some(status)) => Some((w.name.clone(), status)),
                _ => None,
            })
    }

    /// Fails if any worker has exited.
    pub fn check(&mut self) -> Result<(), NetError> {
        match self.first_exit() {
            Some((instance, status)) => Err(NetError::WorkerExited {
                instance,
                status: status.to_string(),
            }),
            None => Ok(()),
        }
    }

    /// Feeds `inputs` and collects `expect` packets per output label,
    /// interleaving both so neither side can deadlock on full queues.
    pub fn exchange(
        &mut self,
        inputs: &BTreeMap<String, Vec<Packet>>,
        expect: &BTreeMap<String, usize>,
        timeout: Duration,
    ) -> Result<BTreeMap<String, Vec<Packet>>, NetError> {
        for l in inputs.keys() {
            self.producer(l)?;
        }
        for l in expect.keys() {
            self.consumer(l)?;
        }
        let start = Instant::now();
        let mut sent: BTreeMap<&str, usize> = inputs.keys().map(|l| (l.as_str(), 0)).collect();
        let mut got: BTreeMap<String, Vec<Packet>> = expect.keys().map(|l| (l.clone(), Vec::new())).collect();
        let mut idle = 0u32;
        loop {
            let mut moved = false;
            for (label, packets) in inputs {
                let n = sent.get_mut(label.as_str()).unwrap();
                let tx = self.producers.get_mut(label).unwrap();
                while *n < packets.len() && tx.try_send(&packets[*n]) {
                    *n += 1;
                    moved = true;
                }
            }
            for (label, &want) in expect {
                let rx = self.consumers.get_mut(label).unwrap();
                let v = got.get_mut(label).unwrap();
                while v.len() < want {
                    match rx.try_recv() {
                        Some(p) => {
                            v.push(p);
                            moved = true;
                        }
                        None => break,
                    }
                }
            }
            let all_sent = inputs.iter().all(|(l, p)| sent[l.as_str()] == p.len());
            let all_got = expect.iter().all(|(l, &n)| got[l].len() >= n);
            if all_sent && all_got {
                return Ok(got);
            }
            if moved {
                idle = 0;
                continue;
            }
            idle += 1;
            if idle % 256 == 0 {
                self.check()?;
                if start.elapsed() > timeout {
                    let status: Vec<String> = expect
                        .iter()
                        .map(|(l, n)| format!("{l} {}/{n}", got[l].len()))
                        .collect();
                    return Err(NetError::Timeout(timeout, status.join(", ")));
                }
            }
            if idle < 64 {
                std::hint::spin_loop();
            } else if idle < 1024 {
                thread::yield_now();
            } else {
                thread::sleep(Duration::from_micros(100));
            }
        }
    }

    /// Stops every worker, waiting up to 5 s before killing, then removes
    /// the run directory.
    pub fn shutdown(mut self) -> ShutdownReport {
        self.shutdown_inner()
    }

    fn shutdown_inner(&mut self) -> ShutdownReport {
        if self.finished {
            return ShutdownReport::default();
        }
        self.finished = true;
        self.producers.clear();
        self.consumers.clear();
        for w in &mut self.workers {
            drop(w.child.stdin.take());
        }
        let deadline = Instant::now() + GRACE;
        let mut statuses: Vec<Option<ExitStatus>> = vec![None; self.workers.len()];
        loop {
            let mut pending = false;
            for (w, s) in self.workers.iter_mut().zip(statuses.iter_mut()) {
                if s.is_none() {
                    match w.child.try_wait() {
                        Ok(Some(st)) => *s = Some(st),
                        Ok(None) => pending = true,
                        Err(_) => {}
                    }
                }
            }
            if !pending || Instant::now() >= deadline {
                break;
            }
            thread::sleep(Duration::from_millis(5));
        }
        for (w, s) in self.workers.iter_mut().zip(&statuses) {
            if s.is_none() {
                log::warn!("worker {} did not stop in {GRACE:?}; killing", w.name);
                let _ = w.child.kill();
                let _ = w.child.wait();
            }
        }
        if let Err(e) = fs::remove_dir_all(&self.run_dir) {
            if e.kind() != std::io::ErrorKind::NotFound {
                log::warn!("cannot remove {}: {e}", self.run_dir.display());
            }
        }
        ShutdownReport {
            statuses: self
                .workers
                .iter()
                .map(|w| w.name.clone())
                .zip(statuses)
                .collect(),
        }
    }
}

impl Drop for RunHandle {
    fn drop(&mut self) {
        self.shutdown_inner();
    }
}
