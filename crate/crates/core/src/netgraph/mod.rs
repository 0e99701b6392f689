//! Network description, queue planning, process orchestration, and the
//! single-process reference scheduler.
//!
//! A [`NetworkGraph`] holds block instances and the bindings of their ports.
//! Every port must end up bound exactly once: to a port of the opposite
//! direction, to a labelled external visible to the driver, or to a TCP
//! endpoint.

pub mod config;
mod oracle;
mod orchestrator;
mod plan;
pub mod worker;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{Endpoint, NetworkConfig, TcpMode};
pub use oracle::{run_oracle, Engine, OracleOptions, OracleTrace, LINK_DEPTH};
pub use orchestrator::{simulate, LaunchOptions, RunHandle, ShutdownReport};
pub use plan::{BuildOptions, ExternalQueue, Job, SpawnPlan, WorkerSpec};

use crate::blocks::BlockSpec;
use crate::shmq::QueueError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One process per instance.
    #[default]
    Distributed,
    /// One deterministic scheduler for the whole network.
    SingleNetlist,
}

#[derive(Debug, Error)]
pub enum NetError {
    #[error("unknown block {0:?}")]
    UnknownBlock(String),
    #[error("unknown instance {0:?}")]
    UnknownInstance(String),
    #[error("instance {instance:?} has no port {port:?}")]
    UnknownPort { instance: String, port: String },
    #[error("port reference {0:?} must look like instance.port")]
    BadPortRef(String),
    #[error("duplicate instance name {0:?}")]
    DuplicateInstance(String),
    #[error("block {block:?} declares port {port:?} twice")]
    DuplicatePort { block: String, port: String },
    #[error("block name {0:?} already defined differently")]
    DuplicateBlock(String),
    #[error("cannot connect {a} to {b}: need one output and one input")]
    DirectionMismatch { a: String, b: String },
    #[error("port {0} is already bound")]
    AlreadyBound(String),
    #[error("label {0:?} is already in use")]
    DuplicateLabel(String),
    #[error("unbound ports: {}", .0.join(", "))]
    UnboundPort(Vec<String>),
    #[error("{0}")]
    ModeMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid block parameters: {0}")]
    InvalidBlock(String),
    #[error("tcp endpoints cannot be used in a single-netlist network")]
    TcpInSingleNetlist,
    #[error("no external labelled {0:?}")]
    UnknownExternal(String),
    #[error("failed to start worker {instance}: {source}")]
    Spawn {
        instance: String,
        #[source]
        source: std::io::Error,
    },
    #[error("worker {instance} exited unexpectedly ({status})")]
    WorkerExited { instance: String, status: String },
    #[error("horizon of {cycles} cycles reached: {detail}")]
    HorizonExceeded { cycles: u64, detail: String },
    #[error("timed out after {0:?} waiting for {1}")]
    Timeout(std::time::Duration, String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Bridge(#[from] crate::tcpbridge::BridgeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PortDir {
    In,
    Out,
}

/// A block type: its parameters and derived port lists.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDef {
    pub name: String,
    pub spec: BlockSpec,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    /// Simulated clock rate, used only for reporting.
    pub clock_hz: f64,
}

impl BlockDef {
    pub fn new(name: impl Into<String>, spec: BlockSpec) -> Result<BlockDef, NetError> {
        let name = name.into();
        let (inputs, outputs) = spec.ports()?;
        let mut seen = HashSet::new();
        for p in inputs.iter().chain(&outputs) {
            if !seen.insert(p.as_str()) {
                return Err(NetError::DuplicatePort {
                    block: name,
                    port: p.clone(),
                });
            }
        }
        Ok(BlockDef {
            name,
            spec,
            inputs,
            outputs,
            clock_hz: 1.0,
        })
    }

    pub fn with_clock(mut self, hz: f64) -> Self {
        self.clock_hz = hz;
        self
    }
}

pub type InstanceId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PortRef {
    pub instance: InstanceId,
    pub dir: PortDir,
    pub index: usize,
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub id: InstanceId,
    pub name: String,
    def: usize,
    pub max_rate_hz: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Connection {
    pub from: PortRef,
    pub to: PortRef,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct External {
    pub port: PortRef,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TcpAttach {
    pub port: PortRef,
    pub label: String,
    pub endpoint: Endpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PortBinding {
    Connection(usize),
    External(usize),
    Tcp(usize),
}

#[derive(Debug, Clone, Default)]
pub struct NetworkGraph {
    mode: Mode,
    max_rate_hz: Option<f64>,
    defs: Vec<BlockDef>,
    instances: Vec<Instance>,
    connections: Vec<Connection>,
    externals: Vec<External>,
    tcp: Vec<TcpAttach>,
    bound: HashMap<PortRef, PortBinding>,
}

impl NetworkGraph {
    pub fn new(mode: Mode) -> Self {
        NetworkGraph {
            mode,
            ..Default::default()
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Default wall-rate ceiling for instances without their own.
    pub fn set_max_rate(&mut self, hz: Option<f64>) {
        self.max_rate_hz = hz;
    }

    pub fn max_rate(&self) -> Option<f64> {
        self.max_rate_hz
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn connections(&self) -> &[Connection] {
        &self.connections
    }

    pub fn externals(&self) -> &[External] {
        &self.externals
    }

    pub fn tcp(&self) -> &[TcpAttach] {
        &self.tcp
    }

    pub fn def_of(&self, id: InstanceId) -> &BlockDef {
        &self.defs[self.instances[id].def]
    }

    pub fn binding(&self, p: PortRef) -> Option<PortBinding> {
        self.bound.get(&p).copied()
    }

    pub fn instance_rate(&self, id: InstanceId) -> Option<f64> {
        self.instances[id].max_rate_hz.or(self.max_rate_hz)
    }

    pub fn instantiate(&mut self, name: impl Into<String>, def: &BlockDef) -> Result<InstanceId, NetError> {
        let name = name.into();
        if self.instances.iter().any(|i| i.name == name) {
            return Err(NetError::DuplicateInstance(name));
        }
        let def_index = match self.defs.iter().position(|d| d.name == def.name) {
            Some(k) if self.defs[k] == *def => k,
            Some(_) => return Err(NetError::DuplicateBlock(def.name.clone())),
            None => {
                self.defs.push(def.clone());
                self.defs.len() - 1
            }
        };
        let id = self.instances.len();
        self.instances.push(Instance {
            id,
            name,
            def: def_index,
            max_rate_hz: None,
        });
        Ok(id)
    }

    pub fn set_instance_rate(&mut self, id: InstanceId, hz: Option<f64>) {
        self.instances[id].max_rate_hz = hz;
    }

    pub fn find_instance(&self, name: &str) -> Result<InstanceId, NetError> {
        self.instances
            .iter()
            .position(|i| i.name == name)
            .ok_or_else(|| NetError::UnknownInstance(name.to_string()))
    }

    /// Looks a port up by name on instance `id`.
    pub fn port(&self, id: InstanceId, name: &str) -> Result<PortRef, NetError> {
        let def = self.def_of(id);
        if let Some(index) = def.inputs.iter().position(|p| p == name) {
            return Ok(PortRef {
                instance: id,
                dir: PortDir::In,
                index,
            });
        }
        if let Some(index) = def.outputs.iter().position(|p| p == name) {
            return Ok(PortRef {
                instance: id,
                dir: PortDir::Out,
                index,
            });
        }
        Err(NetError::UnknownPort {
            instance: self.instances[id].name.clone(),
            port: name.to_string(),
        })
    }

    /// Resolves `instance.port`.
    pub fn port_by_path(&self, path: &str) -> Result<PortRef, NetError> {
        let (inst, port) = path
            .split_once('.')
            .ok_or_else(|| NetError::BadPortRef(path.to_string()))?;
        self.port(self.find_instance(inst)?, port)
    }

    pub fn port_name(&self, p: PortRef) -> String {
        let def = self.def_of(p.instance);
        let port = match p.dir {
            PortDir::In => &def.inputs[p.index],
            PortDir::Out => &def.outputs[p.index],
        };
        format!("{}.{}", self.instances[p.instance].name, port)
    }

    fn ensure_unbound(&self, p: PortRef) -> Result<(), NetError> {
        if self.bound.contains_key(&p) {
            return Err(NetError::AlreadyBound(self.port_name(p)));
        }
        Ok(())
    }

    /// Joins an output to an input, in either argument order.
    pub fn connect(&mut self, a: PortRef, b: PortRef) -> Result<(), NetError> {
        let (from, to) = match (a.dir, b.dir) {
            (PortDir::Out, PortDir::In) => (a, b),
            (PortDir::In, PortDir::Out) => (b, a),
            _ => {
                return Err(NetError::DirectionMismatch {
                    a: self.port_name(a),
                    b: self.port_name(b),
                })
            }
        };
        self.ensure_unbound(from)?;
        self.ensure_unbound(to)?;
        let k = self.connections.len();
        self.connections.push(Connection { from, to });
        self.bound.insert(from, PortBinding::Connection(k));
        self.bound.insert(to, PortBinding::Connection(k));
        Ok(())
    }

    /// Exposes `p` to the driver under `label`.
    pub fn external(&mut self, p: PortRef, label: impl Into<String>) -> Result<(), NetError> {
        let label = label.into();
        self.ensure_unbound(p)?;
        if self.externals.iter().any(|e| e.label == label) {
            return Err(NetError::DuplicateLabel(label));
        }
        let k = self.externals.len();
        self.externals.push(External { port: p, label });
        self.bound.insert(p, PortBinding::External(k));
        Ok(())
    }

    /// Binds `p` to the bridge at `endpoint` as binding `label`.
    pub fn connect_tcp(&mut self, p: PortRef, label: impl Into<String>, endpoint: Endpoint) -> Result<(), NetError> {
        let label = label.into();
        self.ensure_unbound(p)?;
        if self.tcp.iter().any(|t| t.endpoint == endpoint && t.label == label) {
            return Err(NetError::DuplicateLabel(label));
        }
        let k = self.tcp.len();
        self.tcp.push(TcpAttach {
            port: p,
            label,
            endpoint,
        });
        self.bound.insert(p, PortBinding::Tcp(k));
        Ok(())
    }

    /// Every port of every instance, in instance then port order.
    pub fn all_ports(&self) -> impl Iterator<Item = PortRef> + '_ {
        self.instances.iter().flat_map(move |inst| {
            let def = self.def_of(inst.id);
            let ins = (0..def.inputs.len()).map(move |index| PortRef {
                instance: inst.id,
                dir: PortDir::In,
                index,
            });
            let outs = (0..def.outputs.len()).map(move |index| PortRef {
                instance: inst.id,
                dir: PortDir::Out,
                index,
            });
            ins.chain(outs)
        })
    }

    pub fn unbound_ports(&self) -> Vec<String> {
        self.all_ports()
            .filter(|p| !self.bound.contains_key(p))
            .map(|p| self.port_name(p))
            .collect()
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let unbound = self.unbound_ports();
        if !unbound.is_empty() {
            return Err(NetError::UnboundPort(unbound));
        }
        if self.mode == Mode::SingleNetlist && !self.tcp.is_empty() {
            return Err(NetError::TcpInSingleNetlist);
        }
        Ok(())
    }

    /// External labels whose ports are block inputs (driver sends) and
    /// block outputs (driver receives), in declaration order.
    pub fn boundary(&self) -> (Vec<String>, Vec<String>) {
        let mut ins = Vec::new();
        let mut outs = Vec::new();
        for e in &self.externals {
            match e.port.dir {
                PortDir::In => ins.push(e.label.clone()),
                PortDir::Out => outs.push(e.label.clone()),
            }
        }
        (ins, outs)
    }

    pub fn from_config(cfg: &NetworkConfig) -> Result<NetworkGraph, NetError> {
        let mut g = NetworkGraph::new(cfg.mode);
        g.max_rate_hz = cfg.max_rate_hz;
        let mut defs = BTreeMap::new();
        for (name, spec) in &cfg.blocks {
            defs.insert(name.as_str(), BlockDef::new(name.clone(), spec.clone())?);
        }
        for inst in &cfg.instances {
            let def = defs
                .get(inst.block.as_str())
                .ok_or_else(|| NetError::UnknownBlock(inst.block.clone()))?;
            let id = g.instantiate(inst.name.clone(), def)?;
            g.instances[id].max_rate_hz = inst.max_rate_hz;
        }
        for c in &cfg.connections {
            let a = g.port_by_path(&c.from)?;
            let b = g.port_by_path(&c.to)?;
            g.connect(a, b)?;
        }
        for e in &cfg.externals {
            let p = g.port_by_path(&e.port)?;
            g.external(p, e.label.clone())?;
        }
        for t in &cfg.tcp {
            let p = g.port_by_path(&t.port)?;
            g.connect_tcp(p, t.label.clone(), t.endpoint.clone())?;
        }
        Ok(g)
    }

    pub fn to_config(&self) -> NetworkConfig {
        let blocks = self
            .defs
            .iter()
            .map(|d| (d.name.clone(), d.spec.clone()))
            .collect();
        let instances = self
            .instances
            .iter()
            .map(|i| config::InstanceConfig {
                name: i.name.clone(),
                block: self.defs[i.def].name.clone(),
                max_rate_hz: i.max_rate_hz,
            })
            .collect();
        let connections = self
            .connections
            .iter()
            .map(|c| config::ConnectionConfig {
                from: self.port_name(c.from),
                to: self.port_name(c.to),
            })
            .collect();
        let externals = self
            .externals
            .iter()
            .map(|e| config::ExternalConfig {
                port: self.port_name(e.port),
                label: e.label.clone(),
            })
            .collect();
        let tcp = self
            .tcp
            .iter()
            .map(|t| config::TcpConfig {
                port: self.port_name(t.port),
                label: t.label.clone(),
                endpoint: t.endpoint.clone(),
            })
            .collect();
        NetworkConfig {
            mode: self.mode,
            max_rate_hz: self.max_rate_hz,
            blocks,
            instances,
            connections,
            externals,
            tcp,
            io: None,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Distributed => "distributed",
            Mode::SingleNetlist => "single_netlist",
        })
    }
}
