//! Systolic matrix-multiply tiles and their edge blocks.
//!
//! Operand and partial-sum packets carry the value as an `i64` at payload
//! offset 0 and the output row index as a `u64` at offset 8.

use std::collections::VecDeque;

use crate::channel::{BlockModel, PortIo};
use crate::packet::Packet;

pub const VALUE_AT: usize = 0;
pub const ROW_AT: usize = 8;
pub const COL_AT: usize = 16;
pub const CYCLE_AT: usize = 20;

pub fn value_packet(value: i64, row: u64) -> Packet {
    let mut p = Packet::default();
    p.write_i64(VALUE_AT, value);
    p.write_u64(ROW_AT, row);
    p
}

/// One output element as delivered by a [`Collector`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Record {
    pub value: i64,
    pub row: u64,
    pub col: u32,
    /// Collector-local cycle at which the element arrived.
    pub cycle: u64,
}

impl Record {
    pub fn encode(&self) -> Packet {
        let mut p = value_packet(self.value, self.row);
        p.data[COL_AT..COL_AT + 4].copy_from_slice(&self.col.to_le_bytes());
        p.write_u64(CYCLE_AT, self.cycle);
        p.destination = self.col;
        p
    }

    pub fn decode(p: &Packet) -> Record {
        Record {
            value: p.read_i64(VALUE_AT),
            row: p.read_u64(ROW_AT),
            col: u32::from_le_bytes(p.data[COL_AT..COL_AT + 4].try_into().unwrap()),
            cycle: p.read_u64(CYCLE_AT),
        }
    }
}

// Port indices.
const WEST: usize = 0;
const NORTH: usize = 1;
const EAST: usize = 0;

/// Holds one element of B. Ports: `west`, `north` in; `east` (optional),
/// `south` out.
///
/// Consumes a west operand and a north partial sum together, stays busy for
/// `compute_cycles`, then forwards the operand east and the updated sum
/// south. It accepts the next pair only after both outputs have left.
#[derive(Debug, Clone)]
pub struct MatmulTile {
    b: i64,
    compute_cycles: u32,
    has_east: bool,
    busy: u32,
    east_out: Option<Packet>,
    south_out: Option<Packet>,
    pairs: u64,
}

impl MatmulTile {
    pub fn new(b: i64, compute_cycles: u32, has_east: bool) -> Self {
        MatmulTile {
            b,
            compute_cycles,
            has_east,
            busy: 0,
            east_out: None,
            south_out: None,
            pairs: 0,
        }
    }

    pub fn pairs(&self) -> u64 {
        self.pairs
    }

    fn south(&self) -> usize {
        usize::from(self.has_east)
    }
}

impl BlockModel for MatmulTile {
    fn on_cycle(&mut self, io: &mut PortIo<'_>) {
        if self.busy > 0 {
            self.busy -= 1;
        }
        if self.busy == 0 {
            if let Some(p) = self.east_out {
                if io.send(EAST, p) {
                    self.east_out = None;
                }
            }
            if let Some(p) = self.south_out {
                if io.send(self.south(), p) {
                    self.south_out = None;
                }
            }
        }
        let idle = self.busy == 0 && self.east_out.is_none() && self.south_out.is_none();
        if idle && io.peek(WEST).is_some() && io.peek(NORTH).is_some() {
            let a = io.take(WEST).unwrap();
            let psum = io.take(NORTH).unwrap();
            let av = a.read_i64(VALUE_AT);
            let sum = psum.read_i64(VALUE_AT).wrapping_add(av.wrapping_mul(self.b));
            self.south_out = Some(value_packet(sum, a.read_u64(ROW_AT)));
            if self.has_east {
                self.east_out = Some(a);
            }
            self.busy = self.compute_cycles;
            self.pairs += 1;
        }
    }
}

/// Emits `count` zero partial sums, tagged with rows `0..count`, on each of
/// its outputs.
#[derive(Debug, Clone)]
pub struct Zeros {
    next: Vec<u64>,
    count: u64,
}

impl Zeros {
    pub fn new(outputs: usize, count: u64) -> Self {
        Zeros {
            next: vec![0; outputs],
            count,
        }
    }
}

impl BlockModel for Zeros {
    fn on_cycle(&mut self, io: &mut PortIo<'_>) {
        for (o, row) in self.next.iter_mut().enumerate() {
            if *row < self.count && io.send(o, value_packet(0, *row)) {
                *row += 1;
            }
        }
    }
}

/// Accepts every valid input each cycle, stamps it with the arrival cycle
/// and input index, and streams the records out of its single `y` output.
#[derive(Debug, Clone, Default)]
pub struct Collector {
    inputs: usize,
    buf: VecDeque<Packet>,
}

impl Collector {
    pub fn new(inputs: usize) -> Self {
        Collector {
            inputs,
            buf: VecDeque::new(),
        }
    }
}

impl BlockModel for Collector {
    fn on_cycle(&mut self, io: &mut PortIo<'_>) {
        if let Some(&front) = self.buf.front() {
            if io.send(0, front) {
                self.buf.pop_front();
            }
        }
        let cycle = io.cycle();
        for col in 0..self.inputs {
            if let Some(p) = io.take(col) {
                let rec = Record {
                    value: p.read_i64(VALUE_AT),
                    row: p.read_u64(ROW_AT),
                    col: col as u32,
                    cycle,
                };
                self.buf.push_back(rec.encode());
            }
        }
    }
}

/// Mean over rows of (last arrival - first arrival) in collector cycles.
/// Returns `None` when no row has any element.
pub fn mean_row_cycles(records: &[Record]) -> Option<f64> {
    let mut spans: std::collections::BTreeMap<u64, (u64, u64)> = Default::default();
    for r in records {
        let e = spans.entry(r.row).or_insert((r.cycle, r.cycle));
        e.0 = e.0.min(r.cycle);
        e.1 = e.1.max(r.cycle);
    }
    if spans.is_empty() {
        return None;
    }
    let total: u64 = spans.values().map(|(lo, hi)| hi - lo).sum();
    Some(total as f64 / spans.len() as f64)
}
