//! The fixed 64-byte packet that every queue slot and TCP frame carries.
//!
//! ```text
//! offset  size  field
//!      0     4  flags        (u32, little-endian; bit 0 = last)
//!      4     4  destination  (u32, little-endian)
//!      8    52  data
//!     60     4  reserved     (written as zero, ignored on decode)
//! ```

use std::fmt;

use thiserror::Error;

/// Encoded size of a packet in bytes.
pub const PACKET_SIZE: usize = 64;
/// Number of payload bytes carried by a packet.
pub const PAYLOAD_SIZE: usize = 52;

const FLAGS_OFFSET: usize = 0;
const DEST_OFFSET: usize = 4;
const DATA_OFFSET: usize = 8;
const RESERVED_OFFSET: usize = DATA_OFFSET + PAYLOAD_SIZE;

/// Marks the final packet of a multi-packet burst.
pub const FLAG_LAST: u32 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PacketError {
    #[error("packet encoding must be {PACKET_SIZE} bytes, got {0}")]
    WrongLength(usize),
    #[error("payload holds at most {PAYLOAD_SIZE} bytes, got {0}")]
    PayloadTooLong(usize),
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Packet {
    pub flags: u32,
    pub destination: u32,
    pub data: [u8; PAYLOAD_SIZE],
}

impl Default for Packet {
    fn default() -> Self {
        Packet {
            flags: 0,
            destination: 0,
            data: [0; PAYLOAD_SIZE],
        }
    }
}

impl Packet {
    /// Builds a packet, zero-padding `data` up to the payload size.
    pub fn new(destination: u32, flags: u32, data: &[u8]) -> Result<Self, PacketError> {
        if data.len() > PAYLOAD_SIZE {
            return Err(PacketError::PayloadTooLong(data.len()));
        }
        let mut p = Packet {
            flags,
            destination,
            ..Packet::default()
        };
        p.data[..data.len()].copy_from_slice(data);
        Ok(p)
    }

    pub fn is_last(&self) -> bool {
        self.flags & FLAG_LAST != 0
    }

    pub fn encode(&self) -> [u8; PACKET_SIZE] {
        let mut out = [0u8; PACKET_SIZE];
        self.encode_into(&mut out);
        out
    }

    pub fn encode_into(&self, out: &mut [u8; PACKET_SIZE]) {
        out[FLAGS_OFFSET..DEST_OFFSET].copy_from_slice(&self.flags.to_le_bytes());
        out[DEST_OFFSET..DATA_OFFSET].copy_from_slice(&self.destination.to_le_bytes());
        out[DATA_OFFSET..RESERVED_OFFSET].copy_from_slice(&self.data);
        out[RESERVED_OFFSET..].fill(0);
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PacketError> {
        let raw: &[u8; PACKET_SIZE] = bytes
            .try_into()
            .map_err(|_| PacketError::WrongLength(bytes.len()))?;
        Ok(Self::from_raw(raw))
    }

    pub fn from_raw(raw: &[u8; PACKET_SIZE]) -> Self {
        let mut data = [0u8; PAYLOAD_SIZE];
        data.copy_from_slice(&raw[DATA_OFFSET..RESERVED_OFFSET]);
        Packet {
            flags: u32::from_le_bytes(raw[FLAGS_OFFSET..DEST_OFFSET].try_into().unwrap()),
            destination: u32::from_le_bytes(raw[DEST_OFFSET..DATA_OFFSET].try_into().unwrap()),
            data,
        }
    }

    /// Reads the little-endian `i64` stored at payload offset `at`.
    pub fn read_i64(&self, at: usize) -> i64 {
        i64::from_le_bytes(self.data[at..at + 8].try_into().unwrap())
    }

    pub fn write_i64(&mut self, at: usize, v: i64) {
        self.data[at..at + 8].copy_from_slice(&v.to_le_bytes());
    }

    pub fn read_u64(&self, at: usize) -> u64 {
        u64::from_le_bytes(self.data[at..at + 8].try_into().unwrap())
    }

    pub fn write_u64(&mut self, at: usize, v: u64) {
        self.data[at..at + 8].copy_from_slice(&v.to_le_bytes());
    }
}

impl fmt::Debug for Packet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Trailing zero bytes are elided to keep traces readable.
        let used = self
            .data
            .iter()
            .rposition(|&b| b != 0)
            .map_or(0, |i| i + 1);
        f.debug_struct("Packet")
            .field("flags", &format_args!("{:#x}", self.flags))
            .field("destination", &self.destination)
            .field("data", &&self.data[..used])
            .finish()
    }
}

/// Text form used by packet files: `<destination> <flags> <hex payload>`.
impl fmt::Display for Packet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} ", self.destination, self.flags)?;
        for b in &self.data {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl std::str::FromStr for Packet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut it = s.split_whitespace();
        let dest = it
            .next()
            .ok_or("missing destination")?
            .parse::<u32>()
            .map_err(|e| format!("bad destination: {e}"))?;
        let flags = it
            .next()
            .ok_or("missing flags")?
            .parse::<u32>()
            .map_err(|e| format!("bad flags: {e}"))?;
        let hex = it.next().unwrap_or("");
        if it.next().is_some() {
            return Err("trailing fields".into());
        }
        if hex.len() % 2 != 0 {
            return Err("odd-length hex payload".into());
        }
        let bytes = (0..hex.len())
            .step_by(2)
            .map(|i| u8::from_str_radix(&hex[i..i + 2], 16))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| format!("bad hex payload: {e}"))?;
        Packet::new(dest, flags, &bytes).map_err(|e| e.to_string())
    }
}
