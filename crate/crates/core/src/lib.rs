//! Packet interconnect for modular hardware simulation: block models run as
//! separate processes and exchange 64-byte packets through file-backed
//! single-producer, single-consumer shared-memory queues.

pub mod blocks;
pub mod channel;
pub mod experiment;
pub mod netgraph;
pub mod packet;
pub mod pacing;
pub mod shmq;
pub mod tcpbridge;

pub use packet::Packet;
