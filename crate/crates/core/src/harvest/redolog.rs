//! Borrower-resident redo log page protecting one harvested DRAM segment.
//!
//! Layout (little-endian, 4096 bytes):
//!
//! | bytes      | field                                   |
//! |------------|-----------------------------------------|
//! | 0..4       | magic `XLOG`                            |
//! | 4..8       | segment id                              |
//! | 8..10      | record count                            |
//! | 10..32     | reserved, zero                          |
//! | 32..4096   | 254 records of 16 bytes                 |
//!
//! Record: entry offset within the segment (24 bits), new mapping value
//! (32 bits), sequence number (64 bits), checksum (8 bits).

use crate::error::{Result, SimError};

pub const LOG_PAGE_BYTES: usize = 4096;
pub const LOG_HEADER_BYTES: usize = 32;
pub const LOG_RECORD_BYTES: usize = 16;
pub const LOG_RECORD_SLOTS: usize = (LOG_PAGE_BYTES - LOG_HEADER_BYTES) / LOG_RECORD_BYTES;
pub const MAX_ENTRY_OFFSET: u32 = (1 << 24) - 1;
const MAGIC: &[u8; 4] = b"XLOG";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RedoRecord {
    pub entry_offset: u32,
    pub value: u32,
    pub seq: u64,
}

impl RedoRecord {
    fn payload(&self) -> [u8; 15] {
        let mut b = [0u8; 15];
        b[0..3].copy_from_slice(&self.entry_offset.to_le_bytes()[0..3]);
        b[3..7].copy_from_slice(&self.value.to_le_bytes());
        b[7..15].copy_from_slice(&self.seq.to_le_bytes());
        b
    }

    pub fn encode(&self) -> [u8; LOG_RECORD_BYTES] {
        let p = self.payload();
        let mut out = [0u8; LOG_RECORD_BYTES];
        out[..15].copy_from_slice(&p);
        out[15] = checksum(&p);
        out
    }

    /// `None` when the checksum does not match.
    pub fn decode(b: &[u8]) -> Option<Self> {
        let p: &[u8] = &b[..15];
        if checksum(p) != b[15] {
            return None;
        }
        let mut off = [0u8; 4];
        off[..3].copy_from_slice(&p[0..3]);
        Some(Self {
            entry_offset: u32::from_le_bytes(off),
            value: u32::from_le_bytes(p[3..7].try_into().unwrap()),
            seq: u64::from_le_bytes(p[7..15].try_into().unwrap()),
        })
    }
}

fn checksum(p: &[u8]) -> u8 {
    // Rotating xor with a nonzero seed so an all-zero slot never validates.
    p.iter().fold(0xA5u8, |acc, &x| acc.rotate_left(1) ^ x)
}

#[derive(Clone)]
pub struct RedoLogPage {
    bytes: Box<[u8; LOG_PAGE_BYTES]>,
    len: usize,
    closed: bool,
}

impl std::fmt::Debug for RedoLogPage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RedoLogPage")
            .field("segment", &self.segment_id())
            .field("len", &self.len)
            .field("closed", &self.closed)
            .finish()
    }
}

impl RedoLogPage {
    pub fn new(segment_id: u32) -> Self {
        let mut bytes = Box::new([0u8; LOG_PAGE_BYTES]);
        bytes[0..4].copy_from_slice(MAGIC);
        bytes[4..8].copy_from_slice(&segment_id.to_le_bytes());
        Self {
            bytes,
            len: 0,
            closed: false,
        }
    }

    pub fn segment_id(&self) -> u32 {
        u32::from_le_bytes(self.bytes[4..8].try_into().unwrap())
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_full(&self) -> bool {
        self.len == LOG_RECORD_SLOTS
    }

    pub fn close(&mut self) {
        self.closed = true;
    }

    /// Append one record. The caller flushes the segment and clears the page
    /// before appending to a full page.
    pub fn append(&mut self, rec: RedoRecord) -> Result<()> {
        if self.closed {
            return Err(SimError::SessionClosed);
        }
        assert!(!self.is_full(), "append to full redo log page");
        assert!(rec.entry_offset <= MAX_ENTRY_OFFSET, "entry offset exceeds 24 bits");
        let at = LOG_HEADER_BYTES + self.len * LOG_RECORD_BYTES;
        self.bytes[at..at + LOG_RECORD_BYTES].copy_from_slice(&rec.encode());
        self.len += 1;
        self.bytes[8..10].copy_from_slice(&(self.len as u16).to_le_bytes());
        Ok(())
    }

    /// Drop all records once the segment has been flushed to flash.
    pub fn clear(&mut self) {
        self.bytes[LOG_HEADER_BYTES..].fill(0);
        self.len = 0;
        self.bytes[8..10].copy_from_slice(&0u16.to_le_bytes());
    }

    /// Decode records in append order, stopping at the first record that
    /// fails its checksum (prefix semantics).
    pub fn replay(&self) -> Vec<RedoRecord> {
        let n = u16::from_le_bytes(self.bytes[8..10].try_into().unwrap()) as usize;
        let mut out = Vec::with_capacity(n);
        for i in 0..n.min(LOG_RECORD_SLOTS) {
            let at = LOG_HEADER_BYTES + i * LOG_RECORD_BYTES;
            match RedoRecord::decode(&self.bytes[at..at + LOG_RECORD_BYTES]) {
                Some(r) => out.push(r),
                None => break,
            }
        }
        out
    }

    pub fn as_bytes(&self) -> &[u8; LOG_PAGE_BYTES] {
        &self.bytes
    }

    /// Test hook: flip bits in the raw page.
    pub fn corrupt_byte(&mut self, offset: usize, mask: u8) {
        self.bytes[offset] ^= mask;
    }
}
