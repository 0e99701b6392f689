//! Ready-valid ports conveyed through queues, and the cycle contract that
//! every block model follows.
//!
//! A cycle has two phases. First the model sees a snapshot: for each input,
//! the packet currently presented (valid) and for each output whether it is
//! ready. The model then takes inputs and offers outputs. Second, the
//! takes and offers are committed. Because models only see the snapshot,
//! evaluation order between blocks never changes results.
//!
//! Bridge timing, as observed by a block:
//!
//! * [`TxBridge`] latches an accepted offer into a single pending slot and
//!   publishes it to the queue during the next cycle's commit (one cycle).
//! * [`RxBridge`] loads a packet from the queue into its held slot during a
//!   commit and presents it from the following cycle (one cycle).
//!
//! So a Tx, queue, Rx path that is stepped in lockstep, with the queue hop
//! counted as a cycle, delivers three cycles after the source handshake.

use std::sync::atomic::{AtomicBool, Ordering};
use std::thread;

use crate::pacing::RateLimiter;
use crate::packet::Packet;
use crate::shmq::{Consumer, Producer};

/// Bridge latencies exposed to the performance model, in cycles.
pub const N_TX: u32 = 1;
pub const N_RX: u32 = 1;

/// One cycle's view of a block's ports.
pub struct PortIo<'a> {
    cycle: u64,
    inputs: &'a [Option<Packet>],
    taken: &'a mut [bool],
    ready: &'a [bool],
    offers: &'a mut [Option<Packet>],
}

impl<'a> PortIo<'a> {
    pub fn new(
        cycle: u64,
        inputs: &'a [Option<Packet>],
        taken: &'a mut [bool],
        ready: &'a [bool],
        offers: &'a mut [Option<Packet>],
    ) -> Self {
        debug_assert_eq!(inputs.len(), taken.len());
        debug_assert_eq!(ready.len(), offers.len());
        taken.fill(false);
        offers.fill(None);
        PortIo {
            cycle,
            inputs,
            taken,
            ready,
            offers,
        }
    }

    /// The caller's local cycle number.
    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    pub fn num_inputs(&self) -> usize {
        self.inputs.len()
    }

    pub fn num_outputs(&self) -> usize {
        self.ready.len()
    }

    /// The packet presented on input `port`, if valid and not yet taken.
    pub fn peek(&self, port: usize) -> Option<&Packet> {
        if self.taken[port] {
            None
        } else {
            self.inputs[port].as_ref()
        }
    }

    /// Handshakes input `port`: at most one packet per input per cycle.
    pub fn take(&mut self, port: usize) -> Option<Packet> {
        let p = self.peek(port).copied()?;
        self.taken[port] = true;
        Some(p)
    }

    /// Whether output `port` can accept an offer this cycle.
    pub fn ready(&self, port: usize) -> bool {
        self.ready[port] && self.offers[port].is_none()
    }

    /// Offers `p` on output `port`; returns `false` if it was not ready.
    pub fn send(&mut self, port: usize, p: Packet) -> bool {
        if !self.ready(port) {
            return false;
        }
        self.offers[port] = Some(p);
        true
    }

    pub fn taken(&self) -> &[bool] {
        self.taken
    }

    pub fn offers(&self) -> &[Option<Packet>] {
        self.offers
    }
}

/// A cycle-driven block. Ports are addressed by index, in the order of the
/// block definition's input and output lists.
pub trait BlockModel: Send {
    fn on_cycle(&mut self, io: &mut PortIo<'_>);
}

impl<M: BlockModel + ?Sized> BlockModel for Box<M> {
    fn on_cycle(&mut self, io: &mut PortIo<'_>) {
        (**self).on_cycle(io)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TxStep {
    pub ready: bool,
    pub consumed: bool,
}

/// Transmit side: a ready-valid sink that feeds a queue producer.
pub struct TxBridge {
    producer: Producer,
    pending: Option<Packet>,
    accepted: u64,
}

impl TxBridge {
    pub fn new(producer: Producer) -> Self {
        TxBridge {
            producer,
            pending: None,
            accepted: 0,
        }
    }

    /// Ready for an offer this cycle: the pending slot is free, or the queue
    /// will accept the pending packet when this cycle commits.
    pub fn ready(&mut self) -> bool {
        self.pending.is_none() || self.producer.has_space()
    }

    /// Commits a cycle: flushes the pending packet, then latches `offer` if
    /// there is room for it.
    pub fn tx_step(&mut self, offer: Option<Packet>) -> TxStep {
        if let Some(p) = self.pending {
            if self.producer.try_send(&p) {
                self.pending = None;
            }
        }
        let mut consumed = false;
        if let Some(p) = offer {
            if self.pending.is_none() {
                self.pending = Some(p);
                self.accepted += 1;
                consumed = true;
            }
        }
        TxStep {
            ready: self.ready(),
            consumed,
        }
    }

    pub fn has_pending(&self) -> bool {
        self.pending.is_some()
    }

    /// Packets handshaken with the upstream block so far.
    pub fn accepted(&self) -> u64 {
        self.accepted
    }

    pub fn producer_mut(&mut self) -> &mut Producer {
        &mut self.producer
    }
}

/// Receive side: a ready-valid source fed by a queue consumer.
pub struct RxBridge {
    consumer: Consumer,
    held: Option<Packet>,
    delivered: u64,
}

impl RxBridge {
    pub fn new(consumer: Consumer) -> Self {
        RxBridge {
            consumer,
            held: None,
            delivered: 0,
        }
    }

    /// The packet presented this cycle (valid iff `Some`).
    pub fn peek(&self) -> Option<&Packet> {
        self.held.as_ref()
    }

    pub fn valid(&self) -> bool {
        self.held.is_some()
    }

    /// Commits a cycle: releases the held packet if downstream was ready,
    /// then refills from the queue for the next cycle.
    pub fn rx_step(&mut self, downstream_ready: bool) -> Option<Packet> {
        let out = if downstream_ready { self.held.take() } else { None };
        if out.is_some() {
            self.delivered += 1;
        }
        if self.held.is_none() {
            self.held = self.consumer.try_recv();
        }
        out
    }

    /// Packets handed downstream so far.
    pub fn delivered(&self) -> u64 {
        self.delivered
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunStats {
    pub cycles: u64,
    pub received: u64,
    pub sent: u64,
}

/// Drives `model` until `stop` is raised, one cycle per loop iteration.
///
/// Without a pacer the loop yields the CPU on cycles with no port traffic,
/// so idle blocks do not starve busy ones on oversubscribed hosts.
pub fn run_block<M: BlockModel + ?Sized>(
    model: &mut M,
    inputs: &mut [RxBridge],
    outputs: &mut [TxBridge],
    mut pacer: Option<&mut RateLimiter>,
    stop: &AtomicBool,
) -> RunStats {
    let mut presented: Vec<Option<Packet>> = vec![None; inputs.len()];
    let mut taken = vec![false; inputs.len()];
    let mut ready = vec![false; outputs.len()];
    let mut offers: Vec<Option<Packet>> = vec![None; outputs.len()];
    let mut stats = RunStats::default();

    // Prime the held slots so the first cycle can see queued packets.
    for rx in inputs.iter_mut() {
        rx.rx_step(false);
    }

    while !stop.load(Ordering::Relaxed) {
        for (slot, rx) in presented.iter_mut().zip(inputs.iter()) {
            *slot = rx.peek().copied();
        }
        for (r, tx) in ready.iter_mut().zip(outputs.iter_mut()) {
            *r = tx.ready();
        }
        {
            let mut io = PortIo::new(stats.cycles, &presented, &mut taken, &ready, &mut offers);
            model.on_cycle(&mut io);
        }
        let mut active = false;
        for (rx, &t) in inputs.iter_mut().zip(taken.iter()) {
            active |= rx.valid();
            if rx.rx_step(t).is_some() {
                stats.received += 1;
            }
        }
        for (tx, offer) in outputs.iter_mut().zip(offers.iter_mut()) {
            active |= tx.has_pending() || offer.is_some();
            if tx.tx_step(offer.take()).consumed {
                stats.sent += 1;
            }
        }
        stats.cycles += 1;
        match pacer.as_deref_mut() {
            Some(p) => p.pace(),
            None if !active => thread::yield_now(),
            None => {}
        }
    }
    stats
}
