//! File-backed single-producer/single-consumer packet queue.
//!
//! A queue is one 4096-byte file mapped shared by both ends:
//!
//! ```text
//! 0     head  (u32)  next slot to be written; owned by the producer
//! 64    tail  (u32)  next slot to be read; owned by the consumer
//! 128   slot[0..62]  64-byte encoded packets
//! ```
//!
//! `head` and `tail` sit on separate cache lines. The queue is full when
//! `(head + 1) % 62 == tail`, so at most 61 packets are buffered.
//!
//! Ordering contract: the producer writes a slot and then publishes `head`
//! with release ordering; the consumer reads `head` with acquire ordering
//! before decoding the slot. `tail` is published the same way in the other
//! direction, so a slot is never overwritten while it is being read.
//!
//! Each end keeps a cached copy of the other end's index and only reloads
//! it from shared memory when its local view reports full (producer) or
//! empty (consumer).
//!
//! There is exactly one producer and one consumer per queue file. This is a
//! convention: nothing in the file records ownership.

mod bench;

use std::fs::{File, OpenOptions};
use std::hint;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU32, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use memmap2::{MmapOptions, MmapRaw};
use thiserror::Error;

use crate::packet::{Packet, PACKET_SIZE};

pub use bench::{bench, check_stress_packet, echo_peer, stress_packet, BenchError, BenchOptions, BenchReport};

pub const QUEUE_FILE_SIZE: usize = 4096;
pub const NUM_SLOTS: u32 = 62;
/// Packets that can be buffered at once.
pub const CAPACITY: usize = NUM_SLOTS as usize - 1;
pub const HEAD_OFFSET: usize = 0;
pub const TAIL_OFFSET: usize = 64;
pub const SLOTS_OFFSET: usize = 128;

/// Spool directory used when no explicit path is given.
pub const DEFAULT_QUEUE_DIR: &str = "./sbq";
pub const QUEUE_DIR_ENV: &str = "SBQ_DIR";

const SPIN_LIMIT: u32 = 1_000;
const SLEEP_STEP: Duration = Duration::from_micros(10);

/// Byte offset of slot `index` within the queue file.
pub const fn slot_offset(index: u32) -> usize {
    SLOTS_OFFSET + PACKET_SIZE * index as usize
}

/// The spool directory: `$SBQ_DIR` if set, `./sbq` otherwise.
pub fn queue_dir() -> PathBuf {
    std::env::var_os(QUEUE_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_QUEUE_DIR))
}

#[derive(Debug, Error)]
pub enum QueueError {
    #[error("queue {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("queue {path}: file is {len} bytes, expected {QUEUE_FILE_SIZE}")]
    BadSize { path: PathBuf, len: u64 },
    #[error("queue {path}: stored index {value} is outside 0..{NUM_SLOTS}")]
    BadIndex { path: PathBuf, value: u32 },
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("queue operation timed out")]
pub struct TimedOut;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Producer,
    Consumer,
}

/// Spin briefly with a relax hint, then fall back to short sleeps.
#[derive(Default)]
pub(crate) struct Backoff {
    spins: u32,
}

impl Backoff {
    pub(crate) fn snooze(&mut self) {
        if self.spins < SPIN_LIMIT {
            self.spins += 1;
            hint::spin_loop();
        } else {
            thread::sleep(SLEEP_STEP);
        }
    }
}

struct Mapping {
    map: MmapRaw,
    path: PathBuf,
}

impl Mapping {
    fn open(path: &Path, fresh: bool) -> Result<Mapping, QueueError> {
        let io_err = |source| QueueError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(io_err)?;
        }
        let file = if fresh {
            let f = OpenOptions::new()
                .read(true)
                .write(true)
                .create(true)
                .truncate(true)
                .open(path)
                .map_err(io_err)?;
            f.set_len(QUEUE_FILE_SIZE as u64).map_err(io_err)?;
            f
        } else {
            let f = OpenOptions::new()
                .read(true)
                .write(true)
                .create(true)
                .truncate(false)
                .open(path)
                .map_err(io_err)?;
            let len = f.metadata().map_err(io_err)?.len();
            match len {
                // Freshly created by us (or by the peer a moment ago).
                0 => f.set_len(QUEUE_FILE_SIZE as u64).map_err(io_err)?,
                l if l == QUEUE_FILE_SIZE as u64 => {}
                l => {
                    return Err(QueueError::BadSize {
                        path: path.to_path_buf(),
                        len: l,
                    })
                }
            }
            f
        };
        let map = map_file(&file).map_err(io_err)?;
        let m = Mapping {
            map,
            path: path.to_path_buf(),
        };
        for value in [m.load_head(Ordering::Acquire), m.load_tail(Ordering::Acquire)] {
            if value >= NUM_SLOTS {
                return Err(QueueError::BadIndex {
                    path: path.to_path_buf(),
                    value,
                });
            }
        }
        Ok(m)
    }

    fn index(&self, offset: usize) -> &AtomicU32 {
        // SAFETY: the mapping is QUEUE_FILE_SIZE bytes, page aligned, and the
        // offsets are 4-byte aligned; AtomicU32 has the layout of u32.
        unsafe { &*(self.map.as_mut_ptr().add(offset) as *const AtomicU32) }
    }

    fn load_head(&self, order: Ordering) -> u32 {
        self.index(HEAD_OFFSET).load(order)
    }

    fn load_tail(&self, order: Ordering) -> u32 {
        self.index(TAIL_OFFSET).load(order)
    }

    fn write_slot(&self, index: u32, p: &Packet) {
        debug_assert!(index < NUM_SLOTS);
        let bytes = p.encode();
        // SAFETY: index < NUM_SLOTS keeps the slot inside the mapping, and the
        // SPSC protocol gives the producer exclusive access to slot `head`.
        unsafe {
            std::ptr::copy_nonoverlapping(
                bytes.as_ptr(),
                self.map.as_mut_ptr().add(slot_offset(index)),
                PACKET_SIZE,
            );
        }
    }

    fn read_slot(&self, index: u32) -> Packet {
        debug_assert!(index < NUM_SLOTS);
        let mut bytes = [0u8; PACKET_SIZE];
        // SAFETY: as in write_slot; the consumer owns slot `tail` until it
        // publishes the next tail value.
        unsafe {
            std::ptr::copy_nonoverlapping(
                self.map.as_ptr().add(slot_offset(index)),
                bytes.as_mut_ptr(),
                PACKET_SIZE,
            );
        }
        Packet::from_raw(&bytes)
    }
}

fn map_file(file: &File) -> io::Result<MmapRaw> {
    MmapOptions::new().len(QUEUE_FILE_SIZE).map_raw(file)
}

/// Write end of a queue.
pub struct Producer {
    m: Mapping,
    head: u32,
    cached_tail: u32,
}

// The mapping is only touched through the SPSC protocol; a handle can move
// between threads but is never shared.
unsafe impl Send for Producer {}
unsafe impl Send for Consumer {}

impl Producer {
    /// Opens (and with `fresh`, zero-initialises) the queue file at `path`.
    pub fn open(path: impl AsRef<Path>, fresh: bool) -> Result<Producer, QueueError> {
        let m = Mapping::open(path.as_ref(), fresh)?;
        let head = m.load_head(Ordering::Relaxed);
        let cached_tail = m.load_tail(Ordering::Acquire);
        Ok(Producer {
            m,
            head,
            cached_tail,
        })
    }

    pub fn path(&self) -> &Path {
        &self.m.path
    }

    /// Whether the next `try_send` would be accepted.
    pub fn has_space(&mut self) -> bool {
        let next = (self.head + 1) % NUM_SLOTS;
        if next == self.cached_tail {
            self.cached_tail = self.m.load_tail(Ordering::Acquire);
        }
        next != self.cached_tail
    }

    /// Returns `false` (and changes nothing) if the queue is full.
    pub fn try_send(&mut self, p: &Packet) -> bool {
        let next = (self.head + 1) % NUM_SLOTS;
        if next == self.cached_tail {
            self.cached_tail = self.m.load_tail(Ordering::Acquire);
            if next == self.cached_tail {
                return false;
            }
        }
        self.m.write_slot(self.head, p);
        self.m.index(HEAD_OFFSET).store(next, Ordering::Release);
        self.head = next;
        true
    }

    pub fn send_blocking(&mut self, p: &Packet, timeout: Duration) -> Result<(), TimedOut> {
        let start = Instant::now();
        let mut backoff = Backoff::default();
        loop {
            if self.try_send(p) {
                return Ok(());
            }
            if start.elapsed() >= timeout {
                return Err(TimedOut);
            }
            backoff.snooze();
        }
    }
}

/// Read end of a queue.
pub struct Consumer {
    m: Mapping,
    tail: u32,
    cached_head: u32,
}

impl Consumer {
    pub fn open(path: impl AsRef<Path>, fresh: bool) -> Result<Consumer, QueueError> {
        let m = Mapping::open(path.as_ref(), fresh)?;
        let tail = m.load_tail(Ordering::Relaxed);
        let cached_head = m.load_head(Ordering::Acquire);
        Ok(Consumer {
            m,
            tail,
            cached_head,
        })
    }

    pub fn path(&self) -> &Path {
        &self.m.path
    }

    pub fn try_recv(&mut self) -> Option<Packet> {
        if self.tail == self.cached_head {
            self.cached_head = self.m.load_head(Ordering::Acquire);
            if self.tail == self.cached_head {
                return None;
            }
        }
        let p = self.m.read_slot(self.tail);
        let next = (self.tail + 1) % NUM_SLOTS;
        self.m.index(TAIL_OFFSET).store(next, Ordering::Release);
        self.tail = next;
        Some(p)
    }

    pub fn recv_blocking(&mut self, timeout: Duration) -> Result<Packet, TimedOut> {
        let start = Instant::now();
        let mut backoff = Backoff::default();
        loop {
            if let Some(p) = self.try_recv() {
                return Ok(p);
            }
            if start.elapsed() >= timeout {
                return Err(TimedOut);
            }
            backoff.snooze();
        }
    }
}
