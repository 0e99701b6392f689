//! A byte-addressed memory behind a packetized request/response protocol,
//! and a client that splits arbitrary reads and writes into bursts.
//!
//! Transaction payload layout:
//!
//! ```text
//! offset  size  field
//!      0     1  op    (0 read, 1 write, 2 read response, 3 write ack, 4 error)
//!      1     8  addr  (u64, little-endian)
//!      9     2  len   (u16, little-endian; bytes carried by this packet)
//!     11    41  data
//! ```
//!
//! Flag bit 0 marks the last packet of a burst. Reads get one response per
//! request packet; writes get a single ack after the last packet.

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::channel::{BlockModel, PortIo};
use crate::packet::{Packet, FLAG_LAST};
use crate::shmq::{Consumer, Producer};

pub const OP_READ: u8 = 0;
pub const OP_WRITE: u8 = 1;
pub const OP_READ_RESP: u8 = 2;
pub const OP_WRITE_ACK: u8 = 3;
pub const OP_ERROR: u8 = 4;

pub const HEADER_SIZE: usize = 11;
pub const CHUNK_SIZE: usize = crate::packet::PAYLOAD_SIZE - HEADER_SIZE;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Txn {
    pub op: u8,
    pub addr: u64,
    pub len: u16,
    pub last: bool,
}

pub fn encode_txn(t: Txn, data: &[u8]) -> Packet {
    debug_assert!(data.len() <= CHUNK_SIZE);
    let mut p = Packet::default();
    p.data[0] = t.op;
    p.data[1..9].copy_from_slice(&t.addr.to_le_bytes());
    p.data[9..11].copy_from_slice(&t.len.to_le_bytes());
    p.data[HEADER_SIZE..HEADER_SIZE + data.len()].copy_from_slice(data);
    if t.last {
        p.flags |= FLAG_LAST;
    }
    p
}

pub fn decode_txn(p: &Packet) -> (Txn, &[u8]) {
    let len = u16::from_le_bytes([p.data[9], p.data[10]]);
    let t = Txn {
        op: p.data[0],
        addr: u64::from_le_bytes(p.data[1..9].try_into().unwrap()),
        len,
        last: p.is_last(),
    };
    let n = (len as usize).min(CHUNK_SIZE);
    (t, &p.data[HEADER_SIZE..HEADER_SIZE + n])
}

/// Splits `[addr, addr + len)` into per-packet `(addr, len)` chunks.
pub fn chunks(addr: u64, len: usize) -> impl Iterator<Item = (u64, usize)> {
    let n = len.div_ceil(CHUNK_SIZE).max(1);
    (0..n).map(move |k| {
        let off = k * CHUNK_SIZE;
        (addr + off as u64, (len - off.min(len)).min(CHUNK_SIZE))
    })
}

/// Memory block with ports `req` (in) and `resp` (out).
#[derive(Debug, Clone)]
pub struct Memory {
    bytes: Vec<u8>,
    out: VecDeque<Packet>,
    burst_failed: bool,
}

impl Memory {
    pub fn new(size: usize) -> Self {
        Memory {
            bytes: vec![0; size],
            out: VecDeque::new(),
            burst_failed: false,
        }
    }

    fn range(&self, addr: u64, len: usize) -> Option<std::ops::Range<usize>> {
        let start = usize::try_from(addr).ok()?;
        let end = start.checked_add(len)?;
        (end <= self.bytes.len()).then_some(start..end)
    }

    fn handle(&mut self, p: &Packet) {
        let (t, data) = decode_txn(p);
        let len = t.len as usize;
        let reply = |op, data: &[u8]| {
            encode_txn(
                Txn {
                    op,
                    addr: t.addr,
                    len: data.len() as u16,
                    last: t.last,
                },
                data,
            )
        };
        match t.op {
            OP_READ => match self.range(t.addr, len).filter(|_| len <= CHUNK_SIZE) {
                Some(r) => {
                    let chunk = self.bytes[r].to_vec();
                    self.out.push_back(reply(OP_READ_RESP, &chunk));
                }
                None => self.out.push_back(reply(OP_ERROR, &[])),
            },
            OP_WRITE => {
                match self.range(t.addr, len).filter(|_| len <= CHUNK_SIZE) {
                    Some(r) => self.bytes[r].copy_from_slice(&data[..len]),
                    None => self.burst_failed = true,
                }
                if t.last {
                    let op = if self.burst_failed { OP_ERROR } else { OP_WRITE_ACK };
                    self.burst_failed = false;
                    self.out.push_back(reply(op, &[]));
                }
            }
            _ => self.out.push_back(reply(OP_ERROR, &[])),
        }
    }

    pub fn contents(&self) -> &[u8] {
        &self.bytes
    }
}

impl BlockModel for Memory {
    fn on_cycle(&mut self, io: &mut PortIo<'_>) {
        if let Some(&front) = self.out.front() {
            if io.send(0, front) {
                self.out.pop_front();
            }
        }
        // One response may be outstanding; more would grow without bound.
        if self.out.len() < 2 {
            if let Some(p) = io.take(0) {
                self.handle(&p);
            }
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MemError {
    #[error("access of {len} bytes at {addr:#x} is out of range")]
    OutOfRange { addr: u64, len: usize },
    #[error("memory did not respond within {0:?}")]
    Timeout(Duration),
    #[error("unexpected response op {0}")]
    BadResponse(u8),
}

/// Driver-side access to a memory block through its request and response
/// queues.
pub struct MemClient<'a> {
    req: &'a mut Producer,
    resp: &'a mut Consumer,
    timeout: Duration,
}

impl<'a> MemClient<'a> {
    pub fn new(req: &'a mut Producer, resp: &'a mut Consumer) -> Self {
        MemClient {
            req,
            resp,
            timeout: Duration::from_secs(10),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn write(&mut self, addr: u64, bytes: &[u8]) -> Result<(), MemError> {
        let parts: Vec<_> = chunks(addr, bytes.len()).collect();
        let n = parts.len();
        let packets = parts.iter().enumerate().map(|(k, &(a, len))| {
            let off = k * CHUNK_SIZE;
            let txn = Txn {
                op: OP_WRITE,
                addr: a,
                len: len as u16,
                last: k + 1 == n,
            };
            encode_txn(txn, &bytes[off..off + len])
        });
        let resp = self.exchange(packets.collect(), 1)?;
        match decode_txn(&resp[0]).0.op {
            OP_WRITE_ACK => Ok(()),
            OP_ERROR => Err(MemError::OutOfRange {
                addr,
                len: bytes.len(),
            }),
            op => Err(MemError::BadResponse(op)),
        }
    }

    pub fn read(&mut self, addr: u64, len: usize) -> Result<Vec<u8>, MemError> {
        let parts: Vec<_> = chunks(addr, len).collect();
        let n = parts.len();
        let packets = parts
            .iter()
            .enumerate()
            .map(|(k, &(a, l))| {
                let txn = Txn {
                    op: OP_READ,
                    addr: a,
                    len: l as u16,
                    last: k + 1 == n,
                };
                encode_txn(txn, &[])
            })
            .collect();
        let resp = self.exchange(packets, n)?;
        let mut out = Vec::with_capacity(len);
        let mut failed = false;
        for p in &resp {
            let (t, data) = decode_txn(p);
            match t.op {
                OP_READ_RESP => out.extend_from_slice(data),
                OP_ERROR => failed = true,
                op => return Err(MemError::BadResponse(op)),
            }
        }
        if failed {
            return Err(MemError::OutOfRange { addr, len });
        }
        Ok(out)
    }

    // Sends and receives interleaved so long bursts cannot deadlock on full
    // queues in both directions.
    fn exchange(&mut self, packets: Vec<Packet>, expect: usize) -> Result<Vec<Packet>, MemError> {
        let start = Instant::now();
        let mut sent = 0;
        let mut got = Vec::with_capacity(expect);
        let mut idle = 0u32;
        while got.len() < expect {
            let mut moved = false;
            if sent < packets.len() && self.req.try_send(&packets[sent]) {
                sent += 1;
                moved = true;
            }
            if let Some(p) = self.resp.try_recv() {
                got.push(p);
                moved = true;
            }
            if moved {
                idle = 0;
                continue;
            }
            idle += 1;
            if idle % 64 == 0 {
                if start.elapsed() > self.timeout {
                    return Err(MemError::Timeout(self.timeout));
                }
                std::thread::yield_now();
            }
        }
        Ok(got)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunking_counts() {
        assert_eq!(chunks(0, 100).count(), 3);
        assert_eq!(chunks(0, 41).count(), 1);
        assert_eq!(chunks(0, 42).count(), 2);
        assert_eq!(chunks(0, 0).count(), 1);
        let c: Vec<_> = chunks(0x1234, 84).collect();
        assert_eq!(c, vec![(0x1234, 41), (0x1234 + 41, 41), (0x1234 + 82, 2)]);
    }

    #[test]
    fn txn_roundtrip() {
        let t = Txn {
            op: OP_WRITE,
            addr: 0xdead_beef,
            len: 3,
            last: true,
        };
        let p = encode_txn(t, &[1, 2, 3]);
        let (u, data) = decode_txn(&p);
        assert_eq!(u, t);
        assert_eq!(data, &[1, 2, 3]);
    }

    #[test]
    fn ack_only_on_last() {
        let mut m = Memory::new(256);
        let w = |addr, last| {
            encode_txn(
                Txn {
                    op: OP_WRITE,
                    addr,
                    len: 2,
                    last,
                },
                &[9, 8],
            )
        };
        m.handle(&w(0, false));
        assert!(m.out.is_empty());
        m.handle(&w(2, true));
        assert_eq!(m.out.len(), 1);
        assert_eq!(decode_txn(&m.out[0]).0.op, OP_WRITE_ACK);
        assert_eq!(&m.contents()[..4], &[9, 8, 9, 8]);
    }

    #[test]
    fn burst_error_reported_at_last() {
        let mut m = Memory::new(16);
        let t = Txn {
            op: OP_WRITE,
            addr: 10,
            len: 10,
            last: false,
        };
        m.handle(&encode_txn(t, &[0; 10]));
        m.handle(&encode_txn(Txn { addr: 0, len: 1, last: true, ..t }, &[1]));
        assert_eq!(decode_txn(&m.out[0]).0.op, OP_ERROR);
        m.out.clear();
        m.handle(&encode_txn(Txn { addr: 0, len: 1, last: true, ..t }, &[1]));
        assert_eq!(decode_txn(&m.out[0]).0.op, OP_WRITE_ACK);
    }

    #[test]
    fn read_past_end_is_error() {
        let mut m = Memory::new(16);
        let t = Txn {
            op: OP_READ,
            addr: 15,
            len: 2,
            last: true,
        };
        m.handle(&encode_txn(t, &[]));
        assert_eq!(decode_txn(&m.out[0]).0.op, OP_ERROR);
        m.handle(&encode_txn(Txn { addr: u64::MAX, ..t }, &[]));
        assert_eq!(decode_txn(&m.out[1]).0.op, OP_ERROR);
    }
}
