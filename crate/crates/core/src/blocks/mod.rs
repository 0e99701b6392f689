//! Built-in block models.

pub mod fifo;
pub mod grid;
pub mod inc;
pub mod matmul;
pub mod memory;

use serde::{Deserialize, Serialize};

pub use fifo::Fifo;
pub use grid::{build_matmul_grid, GridOptions, GridPorts};
pub use inc::IncLoopback;
pub use matmul::{Collector, MatmulTile, Record, Zeros};
pub use memory::{MemClient, MemError, Memory};

use crate::channel::BlockModel;
use crate::netgraph::{Engine, Mode, NetError, NetworkConfig, NetworkGraph};

/// Block type and parameters, as written in network configs under
/// `"type"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum BlockSpec {
    /// Ports `in` / `out`.
    Inc {},
    /// Ports `in` / `out`.
    Fifo { depth: usize },
    /// Ports `req` / `resp`.
    Memory { size: usize },
    /// Ports `west`, `north` / `east` (when `east`), `south`.
    MatmulTile {
        b: i64,
        #[serde(default = "default_compute")]
        compute_cycles: u32,
        #[serde(default = "yes")]
        east: bool,
    },
    /// Ports `n0..n{outputs-1}`.
    Zeros { outputs: usize, count: u64 },
    /// Ports `s0..s{inputs-1}` / `y`.
    Collector { inputs: usize },
    /// A single-netlist network run as one block; its ports are the inner
    /// network's external labels.
    Network { network: Box<NetworkConfig> },
}

fn default_compute() -> u32 {
    1
}

fn yes() -> bool {
    true
}

fn names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|k| format!("{prefix}{k}")).collect()
}

fn inner_graph(cfg: &NetworkConfig) -> Result<NetworkGraph, NetError> {
    if cfg.mode != Mode::SingleNetlist {
        return Err(NetError::ModeMismatch(
            "a network used as a block must be single_netlist".into(),
        ));
    }
    NetworkGraph::from_config(cfg)
}

impl BlockSpec {
    /// Input and output port names, in index order.
    pub fn ports(&self) -> Result<(Vec<String>, Vec<String>), NetError> {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        Ok(match self {
            BlockSpec::Inc {} | BlockSpec::Fifo { .. } => (s(&["in"]), s(&["out"])),
            BlockSpec::Memory { .. } => (s(&["req"]), s(&["resp"])),
            BlockSpec::MatmulTile { east, .. } => {
                let outs = if *east { s(&["east", "south"]) } else { s(&["south"]) };
                (s(&["west", "north"]), outs)
            }
            BlockSpec::Zeros { outputs, .. } => (Vec::new(), names("n", *outputs)),
            BlockSpec::Collector { inputs } => (names("s", *inputs), s(&["y"])),
            BlockSpec::Network { network } => inner_graph(network)?.boundary(),
        })
    }

    pub fn build(&self) -> Result<Box<dyn BlockModel>, NetError> {
        Ok(match self {
            BlockSpec::Inc {} => Box::new(IncLoopback),
            BlockSpec::Fifo { depth } => {
                if *depth == 0 {
                    return Err(NetError::InvalidBlock("fifo depth must be positive".into()));
                }
                Box::new(Fifo::new(*depth))
            }
            BlockSpec::Memory { size } => Box::new(Memory::new(*size)),
            BlockSpec::MatmulTile {
                b,
                compute_cycles,
                east,
            } => Box::new(MatmulTile::new(*b, *compute_cycles, *east)),
            BlockSpec::Zeros { outputs, count } => Box::new(Zeros::new(*outputs, *count)),
            BlockSpec::Collector { inputs } => Box::new(Collector::new(*inputs)),
            BlockSpec::Network { network } => Box::new(Engine::new(&inner_graph(network)?)?),
        })
    }
}
