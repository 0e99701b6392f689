use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{Endpoint, Mode, NetError, NetworkGraph, PortBinding, PortDir, PortRef};
use crate::blocks::BlockSpec;
use crate::tcpbridge::{Binding, Direction};

#[derive(Debug, Clone)]
pub struct BuildOptions {
    /// Spool directory; each run gets its own subdirectory.
    pub dir: PathBuf,
    /// Fixed run id. Identical graphs built with the same id get identical
    /// queue paths.
    pub run_id: Option<String>,
}

impl BuildOptions {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        BuildOptions {
            dir: dir.into(),
            run_id: None,
        }
    }

    pub fn with_run_id(mut self, id: impl Into<String>) -> Self {
        self.run_id = Some(id.into());
        self
    }
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions::new(crate::shmq::queue_dir())
    }
}

fn fresh_run_id() -> String {
    let nanos = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    format!("run-{}-{:x}", std::process::id(), nanos)
}

/// What one worker process executes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Job {
    /// A block model driven by the cycle loop. Queue paths are listed in
    /// port order.
    Block {
        spec: BlockSpec,
        inputs: Vec<PathBuf>,
        outputs: Vec<PathBuf>,
        #[serde(default)]
        max_rate_hz: Option<f64>,
    },
    Tcp {
        endpoint: Endpoint,
        bindings: Vec<Binding>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerSpec {
    pub name: String,
    pub job: Job,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExternalQueue {
    pub label: String,
    pub path: PathBuf,
}

/// The processes and queue files of one run.
#[derive(Debug, Clone)]
pub struct SpawnPlan {
    pub run_id: String,
    pub run_dir: PathBuf,
    pub mode: Mode,
    /// Every queue file of the run.
    pub queues: Vec<PathBuf>,
    pub workers: Vec<WorkerSpec>,
    /// External queues the driver produces into.
    pub inputs: Vec<ExternalQueue>,
    /// External queues the driver consumes from.
    pub outputs: Vec<ExternalQueue>,
}

impl SpawnPlan {
    pub fn connection_queues(&self) -> impl Iterator<Item = &PathBuf> {
        self.queues.iter().filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with('c'))
        })
    }
}

fn queue_path(dir: &Path, prefix: char, k: usize) -> PathBuf {
    dir.join(format!("{prefix}{k}.q"))
}

impl NetworkGraph {
    fn port_queue(&self, dir: &Path, p: PortRef) -> PathBuf {
        match self.binding(p).expect("validated") {
            PortBinding::Connection(k) => queue_path(dir, 'c', k),
            PortBinding::External(k) => queue_path(dir, 'e', k),
            PortBinding::Tcp(k) => queue_path(dir, 't', k),
        }
    }

    /// Validates the graph and assigns queue files and worker jobs.
    ///
    /// Queues are `<dir>/<run id>/c<k>.q` for connection `k`, `e<k>.q` for
    /// external `k`, and `t<k>.q` for TCP binding `k`, numbered in
    /// declaration order.
    pub fn build(&self, opts: &BuildOptions) -> Result<SpawnPlan, NetError> {
        self.validate()?;
        let run_id = opts.run_id.clone().unwrap_or_else(fresh_run_id);
        let run_dir = opts.dir.join(&run_id);

        let mut queues: Vec<PathBuf> = (0..self.connections().len())
            .map(|k| queue_path(&run_dir, 'c', k))
            .collect();
        queues.extend((0..self.externals().len()).map(|k| queue_path(&run_dir, 'e', k)));
        queues.extend((0..self.tcp().len()).map(|k| queue_path(&run_dir, 't', k)));

        let mut inputs = Vec::new();
        let mut outputs = Vec::new();
        for (k, e) in self.externals().iter().enumerate() {
            let q = ExternalQueue {
                label: e.label.clone(),
                path: queue_path(&run_dir, 'e', k),
            };
            match e.port.dir {
                PortDir::In => inputs.push(q),
                PortDir::Out => outputs.push(q),
            }
        }

        let workers = match self.mode() {
            Mode::SingleNetlist => vec![self.netlist_worker(&inputs, &outputs)],
            Mode::Distributed => {
                let mut w: Vec<WorkerSpec> = self
                    .instances()
                    .iter()
                    .map(|inst| {
                        let def = self.def_of(inst.id);
                        let port = |dir, index| self.port_queue(&run_dir, PortRef { instance: inst.id, dir, index });
                        WorkerSpec {
                            name: inst.name.clone(),
                            job: Job::Block {
                                spec: def.spec.clone(),
                                inputs: (0..def.inputs.len()).map(|i| port(PortDir::In, i)).collect(),
                                outputs: (0..def.outputs.len()).map(|i| port(PortDir::Out, i)).collect(),
                                max_rate_hz: self.instance_rate(inst.id),
                            },
                        }
                    })
                    .collect();
                w.extend(self.tcp_workers(&run_dir));
                w
            }
        };

        Ok(SpawnPlan {
            run_id,
            run_dir,
            mode: self.mode(),
            queues,
            workers,
            inputs,
            outputs,
        })
    }

    fn netlist_worker(&self, inputs: &[ExternalQueue], outputs: &[ExternalQueue]) -> WorkerSpec {
        WorkerSpec {
            name: "netlist".into(),
            job: Job::Block {
                spec: BlockSpec::Network {
                    network: Box::new(self.to_config()),
                },
                inputs: inputs.iter().map(|q| q.path.clone()).collect(),
                outputs: outputs.iter().map(|q| q.path.clone()).collect(),
                max_rate_hz: self.max_rate(),
            },
        }
    }

    // One bridge per distinct endpoint, bindings in attach order.
    fn tcp_workers(&self, run_dir: &Path) -> Vec<WorkerSpec> {
        let mut groups: Vec<(Endpoint, Vec<Binding>)> = Vec::new();
        for (k, t) in self.tcp().iter().enumerate() {
            // A block output feeds the bridge, which drains it onto the wire.
            let direction = match t.port.dir {
                PortDir::Out => Direction::Outbound,
                PortDir::In => Direction::Inbound,
            };
            let b = Binding::new(t.label.clone(), direction, queue_path(run_dir, 't', k));
            match groups.iter_mut().find(|(e, _)| *e == t.endpoint) {
                Some((_, v)) => v.push(b),
                None => groups.push((t.endpoint.clone(), vec![b])),
            }
        }
        groups
            .into_iter()
            .map(|(endpoint, bindings)| WorkerSpec {
                name: format!(
                    "tcp-{}-{}-{}",
                    match endpoint.mode {
                        super::TcpMode::Server => "server",
                        super::TcpMode::Client => "client",
                    },
                    endpoint.host,
                    endpoint.port
                ),
                job: Job::Tcp { endpoint, bindings },
            })
            .collect()
    }
}
