//! Deterministic single-process execution of a whole network.
//!
//! Each cycle every instance is evaluated in id order against the state at
//! the start of the cycle; takes and offers are committed afterwards. Links
//! between instances are FIFOs of depth [`LINK_DEPTH`] whose pushes become
//! visible on the following cycle. A link is ready while it holds fewer than
//! `LINK_DEPTH` packets at the start of the cycle.

use std::collections::{BTreeMap, VecDeque};

use super::{Mode, NetError, NetworkGraph, PortBinding, PortDir, PortRef};
use crate::channel::{BlockModel, PortIo};
use crate::packet::Packet;

/// Matches the usable capacity of a shared-memory queue.
pub const LINK_DEPTH: usize = crate::shmq::CAPACITY;

#[derive(Debug, Clone, Copy)]
enum Src {
    Link(usize),
    Boundary(usize),
}

#[derive(Debug, Clone, Copy)]
enum Dst {
    Link(usize),
    Boundary(usize),
}

struct Slot {
    model: Box<dyn BlockModel>,
    srcs: Vec<Src>,
    dsts: Vec<Dst>,
    presented: Vec<Option<Packet>>,
    taken: Vec<bool>,
    ready: Vec<bool>,
    offers: Vec<Option<Packet>>,
}

/// A network evaluated as one block. Its inputs and outputs are the
/// network's externals, in declaration order.
pub struct Engine {
    slots: Vec<Slot>,
    links: Vec<VecDeque<Packet>>,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

impl Engine {
    pub fn new(g: &NetworkGraph) -> Result<Engine, NetError> {
        if !g.tcp().is_empty() {
            return Err(NetError::TcpInSingleNetlist);
        }
        let unbound = g.unbound_ports();
        if !unbound.is_empty() {
            return Err(NetError::UnboundPort(unbound));
        }
        let (inputs, outputs) = g.boundary();
        // Boundary index of each external, counted per direction.
        let mut boundary = Vec::with_capacity(g.externals().len());
        let (mut ni, mut no) = (0, 0);
        for e in g.externals() {
            match e.port.dir {
                PortDir::In => {
                    boundary.push(ni);
                    ni += 1;
                }
                PortDir::Out => {
                    boundary.push(no);
                    no += 1;
                }
            }
        }
        let mut slots = Vec::with_capacity(g.instances().len());
        for inst in g.instances() {
            let def = g.def_of(inst.id);
            let model = def.spec.build()?;
            let resolve = |dir, index| -> (bool, usize) {
                match g.binding(PortRef { instance: inst.id, dir, index }).expect("validated") {
                    PortBinding::Connection(k) => (true, k),
                    PortBinding::External(k) => (false, boundary[k]),
                    PortBinding::Tcp(_) => unreachable!("rejected above"),
                }
            };
            let srcs: Vec<Src> = (0..def.inputs.len())
                .map(|i| match resolve(PortDir::In, i) {
                    (true, k) => Src::Link(k),
                    (false, b) => Src::Boundary(b),
                })
                .collect();
            let dsts: Vec<Dst> = (0..def.outputs.len())
                .map(|o| match resolve(PortDir::Out, o) {
                    (true, k) => Dst::Link(k),
                    (false, b) => Dst::Boundary(b),
                })
                .collect();
            slots.push(Slot {
                model,
                presented: vec![None; srcs.len()],
                taken: vec![false; srcs.len()],
                ready: vec![false; dsts.len()],
                offers: vec![None; dsts.len()],
                srcs,
                dsts,
            });
        }
        Ok(Engine {
            slots,
            links: vec![VecDeque::with_capacity(LINK_DEPTH); g.connections().len()],
            inputs,
            outputs,
        })
    }

    pub fn inputs(&self) -> &[String] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[String] {
        &self.outputs
    }

    /// Packets currently buffered on internal links.
    pub fn in_flight(&self) -> usize {
        self.links.iter().map(VecDeque::len).sum()
    }
}

impl BlockModel for Engine {
    fn on_cycle(&mut self, io: &mut PortIo<'_>) {
        let cycle = io.cycle();
        for slot in &mut self.slots {
            for (p, src) in slot.presented.iter_mut().zip(&slot.srcs) {
                *p = match *src {
                    Src::Link(k) => self.links[k].front().copied(),
                    Src::Boundary(b) => io.peek(b).copied(),
                };
            }
            for (r, dst) in slot.ready.iter_mut().zip(&slot.dsts) {
                *r = match *dst {
                    Dst::Link(k) => self.links[k].len() < LINK_DEPTH,
                    Dst::Boundary(b) => io.ready(b),
                };
            }
            let mut inner = PortIo::new(cycle, &slot.presented, &mut slot.taken, &slot.ready, &mut slot.offers);
            slot.model.on_cycle(&mut inner);
        }
        for slot in &mut self.slots {
            for (&t, src) in slot.taken.iter().zip(&slot.srcs) {
                if !t {
                    continue;
                }
                match *src {
                    Src::Link(k) => {
                        self.links[k].pop_front();
                    }
                    Src::Boundary(b) => {
                        io.take(b);
                    }
                }
            }
            for (offer, dst) in slot.offers.iter_mut().zip(&slot.dsts) {
                let Some(p) = offer.take() else { continue };
                match *dst {
                    Dst::Link(k) => self.links[k].push_back(p),
                    Dst::Boundary(b) => {
                        let accepted = io.send(b, p);
                        debug_assert!(accepted, "boundary offer without ready");
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct OracleOptions {
    pub horizon: u64,
    /// Stop as soon as each listed output label has produced this many
    /// packets and all stimulus has been consumed.
    pub expect: BTreeMap<String, usize>,
}

impl OracleOptions {
    pub fn new(horizon: u64) -> Self {
        OracleOptions {
            horizon,
            expect: BTreeMap::new(),
        }
    }

    pub fn expect(mut self, label: impl Into<String>, count: usize) -> Self {
        self.expect.insert(label.into(), count);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct OracleTrace {
    /// Cycles executed.
    pub cycles: u64,
    /// Per output label, each packet with the cycle it left the network.
    pub outputs: BTreeMap<String, Vec<(u64, Packet)>>,
    /// Per input label, the cycle at which each stimulus packet was taken.
    pub consumed: BTreeMap<String, Vec<u64>>,
}

impl OracleTrace {
    pub fn packets(&self, label: &str) -> Vec<Packet> {
        self.outputs
            .get(label)
            .map(|v| v.iter().map(|&(_, p)| p).collect())
            .unwrap_or_default()
    }
}

/// Runs `g` to completion under the global synchronous clock.
///
/// Each external input is fed from a harness FIFO that admits one stimulus
/// packet per cycle. External outputs are always ready.
pub fn run_oracle(
    g: &NetworkGraph,
    stimulus: &BTreeMap<String, Vec<Packet>>,
    opts: &OracleOptions,
) -> Result<OracleTrace, NetError> {
    if g.mode() != Mode::SingleNetlist {
        log::debug!("running a {} graph under the reference scheduler", g.mode());
    }
    let mut engine = Engine::new(g)?;
    for label in stimulus.keys() {
        if !engine.inputs().contains(label) {
            return Err(NetError::UnknownExternal(label.clone()));
        }
    }
    for label in opts.expect.keys() {
        if !engine.outputs().contains(label) {
            return Err(NetError::UnknownExternal(label.clone()));
        }
    }
    let inputs = engine.inputs().to_vec();
    let outputs = engine.outputs().to_vec();
    let empty = Vec::new();
    let streams: Vec<&Vec<Packet>> = inputs.iter().map(|l| stimulus.get(l).unwrap_or(&empty)).collect();
    let mut fed = vec![0usize; inputs.len()];
    let mut fifos: Vec<VecDeque<Packet>> = vec![VecDeque::new(); inputs.len()];

    let mut trace = OracleTrace::default();
    for l in &inputs {
        trace.consumed.insert(l.clone(), Vec::new());
    }
    for l in &outputs {
        trace.outputs.insert(l.clone(), Vec::new());
    }
    let mut presented = vec![None; inputs.len()];
    let mut taken = vec![false; inputs.len()];
    let ready = vec![true; outputs.len()];
    let mut offers = vec![None; outputs.len()];

    let done = |fed: &[usize], fifos: &[VecDeque<Packet>], trace: &OracleTrace| {
        fed.iter().zip(&streams).all(|(&f, s)| f == s.len())
            && fifos.iter().all(VecDeque::is_empty)
            && opts.expect.iter().all(|(l, &n)| trace.outputs[l].len() >= n)
    };

    for cycle in 0..opts.horizon {
        for ((fifo, f), s) in fifos.iter_mut().zip(fed.iter_mut()).zip(&streams) {
            if *f < s.len() && fifo.len() < LINK_DEPTH {
                fifo.push_back(s[*f]);
                *f += 1;
            }
        }
        for (p, fifo) in presented.iter_mut().zip(&fifos) {
            *p = fifo.front().copied();
        }
        {
            let mut io = PortIo::new(cycle, &presented, &mut taken, &ready, &mut offers);
            engine.on_cycle(&mut io);
        }
        for (i, &t) in taken.iter().enumerate() {
            if t {
                fifos[i].pop_front();
                trace.consumed.get_mut(&inputs[i]).unwrap().push(cycle);
            }
        }
        for (o, offer) in offers.iter_mut().enumerate() {
            if let Some(p) = offer.take() {
                trace.outputs.get_mut(&outputs[o]).unwrap().push((cycle, p));
            }
        }
        trace.cycles = cycle + 1;
        if !opts.expect.is_empty() && done(&fed, &fifos, &trace) {
            return Ok(trace);
        }
    }
    let stimulus_left = fed.iter().zip(&streams).any(|(&f, s)| f < s.len()) || fifos.iter().any(|f| !f.is_empty());
    if stimulus_left || !done(&fed, &fifos, &trace) {
        let mut detail = Vec::new();
        for (i, l) in inputs.iter().enumerate() {
            let used = trace.consumed[l].len();
            if used < streams[i].len() {
                detail.push(format!("{l}: {used}/{} stimulus consumed", streams[i].len()));
            }
        }
        for (l, &n) in &opts.expect {
            let got = trace.outputs[l].len();
            if got < n {
                detail.push(format!("{l}: {got}/{n} outputs"));
            }
        }
        return Err(NetError::HorizonExceeded {
            cycles: opts.horizon,
            detail: detail.join("; "),
        });
    }
    Ok(trace)
}
