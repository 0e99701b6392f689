use std::collections::VecDeque;

use crate::channel::{BlockModel, PortIo};
use crate::packet::Packet;

/// A registered FIFO of fixed depth; a packet taken at cycle `t` is offered
/// from cycle `t + 1`.
#[derive(Debug, Clone)]
pub struct Fifo {
    depth: usize,
    buf: VecDeque<Packet>,
}

impl Fifo {
    pub fn new(depth: usize) -> Self {
        assert!(depth > 0, "fifo depth must be positive");
        Fifo {
            depth,
            buf: VecDeque::with_capacity(depth),
        }
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }
}

impl BlockModel for Fifo {
    fn on_cycle(&mut self, io: &mut PortIo<'_>) {
        let had_room = self.buf.len() < self.depth;
        if let Some(&front) = self.buf.front() {
            if io.send(0, front) {
                self.buf.pop_front();
            }
        }
        if had_room {
            if let Some(p) = io.take(0) {
                self.buf.push_back(p);
            }
        }
    }
}
