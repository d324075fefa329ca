//! Bitcoin block headers.
//!
//! Covers the 80-byte wire codec, compact (`nBits`) difficulty targets, the
//! proof-of-work check, and the compact chain-segment codec that ships runs of
//! consecutive headers at 40 bytes each after the first.
//!
//! Compact segment layout (all integers little-endian):
//!
//! ```text
//! [first header: 80 bytes]
//! [(n-1) reduced records: merkle_root(32) | timestamp(4) | nonce(4)]
//! [exception count: u16]
//! [exception records: index(u32) | tag(u8) | value(u32)]   tag 1 = version, tag 2 = nBits
//! ```
//!
//! The header count `n` is not part of the segment itself; the carrier (the
//! gossip payload range) supplies it.

use std::fmt;
use std::str::FromStr;

use num_bigint::BigUint;
use num_traits::Zero;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Size of a serialized Bitcoin header.
pub const HEADER_SIZE: usize = 80;
/// Size of a header with version, nBits and prevHash stripped.
pub const REDUCED_RECORD_SIZE: usize = 40;
/// Size of one version/nBits change record.
pub const EXCEPTION_RECORD_SIZE: usize = 9;

const TAG_VERSION: u8 = 1;
const TAG_BITS: u8 = 2;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HeaderError {
    #[error("expected {expected} bytes, got {actual}")]
    WrongLength { expected: usize, actual: usize },
    #[error("invalid compact target {0:#010x}")]
    InvalidCompact(u32),
    #[error("header {index} does not link to its predecessor")]
    BrokenLink { index: usize },
    #[error("cannot build a segment from an empty header list")]
    EmptySegment,
    #[error("malformed compact segment: {0}")]
    MalformedSegment(String),
}

/// Bitcoin double SHA-256.
pub fn sha256d(data: &[u8]) -> [u8; 32] {
    let once = Sha256::digest(data);
    let twice = Sha256::digest(once);
    let mut out = [0u8; 32];
    out.copy_from_slice(&twice);
    out
}

/// A 32-byte digest in internal (little-endian) byte order.
///
/// Displayed and parsed in the conventional reversed hex form used by block
/// explorers.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct BlockHash(pub [u8; 32]);

impl BlockHash {
    pub const ZERO: BlockHash = BlockHash([0u8; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    /// The digest read as a 256-bit little-endian integer, the quantity
    /// compared against the target.
    pub fn to_uint(&self) -> BigUint {
        BigUint::from_bytes_le(&self.0)
    }
}

impl fmt::Display for BlockHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0.iter().rev() {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for BlockHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BlockHash({self})")
    }
}

impl FromStr for BlockHash {
    type Err = HeaderError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 64 || !s.is_ascii() {
            return Err(HeaderError::WrongLength { expected: 64, actual: s.len() });
        }
        let mut out = [0u8; 32];
        for (i, chunk) in s.as_bytes().chunks(2).enumerate() {
            let text = std::str::from_utf8(chunk).expect("ascii checked");
            out[31 - i] = u8::from_str_radix(text, 16)
                .map_err(|_| HeaderError::MalformedSegment(format!("bad hex digit in {text:?}")))?;
        }
        Ok(BlockHash(out))
    }
}

impl Serialize for BlockHash {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BlockHash {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The header fields the protocol reads, in Bitcoin field order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockHeader {
    pub version: u32,
    pub prev_hash: BlockHash,
    pub merkle_root: [u8; 32],
    /// Seconds since the Unix epoch, as claimed by the miner.
    pub timestamp: u32,
    /// Compact difficulty target.
    pub bits: u32,
    pub nonce: u32,
}

impl BlockHeader {
    /// Serializes to the 80-byte Bitcoin wire format.
    pub fn encode(&self) -> [u8; HEADER_SIZE] {
        let mut out = [0u8; HEADER_SIZE];
        out[0..4].copy_from_slice(&self.version.to_le_bytes());
        out[4..36].copy_from_slice(&self.prev_hash.0);
        out[36..68].copy_from_slice(&self.merkle_root);
        out[68..72].copy_from_slice(&self.timestamp.to_le_bytes());
        out[72..76].copy_from_slice(&self.bits.to_le_bytes());
        out[76..80].copy_from_slice(&self.nonce.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, HeaderError> {
        if bytes.len() != HEADER_SIZE {
            return Err(HeaderError::WrongLength { expected: HEADER_SIZE, actual: bytes.len() });
        }
        Ok(Self::decode_unchecked(bytes))
    }

    fn decode_unchecked(bytes: &[u8]) -> Self {
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let mut prev = [0u8; 32];
        prev.copy_from_slice(&bytes[4..36]);
        let mut merkle_root = [0u8; 32];
        merkle_root.copy_from_slice(&bytes[36..68]);
        BlockHeader {
            version: u32_at(0),
            prev_hash: BlockHash(prev),
            merkle_root,
            timestamp: u32_at(68),
            bits: u32_at(72),
            nonce: u32_at(76),
        }
    }

    pub fn block_hash(&self) -> BlockHash {
        BlockHash(sha256d(&self.encode()))
    }

    pub fn target(&self) -> Result<Target, HeaderError> {
        Target::from_compact(self.bits)
    }

    /// True iff the header hash does not exceed the target encoded in `bits`.
    pub fn check_pow(&self) -> Result<bool, HeaderError> {
        self.check_pow_with(&self.block_hash())
    }

    /// [`check_pow`](Self::check_pow) against an already computed hash of this header.
    pub fn check_pow_with(&self, hash: &BlockHash) -> Result<bool, HeaderError> {
        let target = self.target()?;
        Ok(hash.to_uint() <= *target.value())
    }

    /// The Bitcoin mainnet genesis header.
    pub fn mainnet_genesis() -> Self {
        let merkle: BlockHash = "4a5e1e4baab89f3a32518a88c31bc87f618f76673e2cc77ab2127b7afdeda33b"
            .parse()
            .expect("constant");
        BlockHeader {
            version: 1,
            prev_hash: BlockHash::ZERO,
            merkle_root: merkle.0,
            timestamp: 1_231_006_505,
            bits: 0x1d00_ffff,
            nonce: 2_083_236_893,
        }
    }
}

/// A 256-bit proof-of-work target.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Target(BigUint);

impl Target {
    /// Expands a compact `nBits` value: `mantissa * 256^(exponent - 3)`.
    ///
    /// Rejects a zero mantissa, the sign bit, values that round to zero and
    /// values of 2^256 or more.
    pub fn from_compact(bits: u32) -> Result<Self, HeaderError> {
        let exponent = bits >> 24;
        let mantissa = bits & 0x007f_ffff;
        if bits & 0x0080_0000 != 0 || mantissa == 0 {
            return Err(HeaderError::InvalidCompact(bits));
        }
        let value = if exponent <= 3 {
            BigUint::from(mantissa >> (8 * (3 - exponent)))
        } else {
            BigUint::from(mantissa) << (8 * (exponent - 3) as usize)
        };
        if value.is_zero() || value.bits() > 256 {
            return Err(HeaderError::InvalidCompact(bits));
        }
        Ok(Target(value))
    }

    pub fn value(&self) -> &BigUint {
        &self.0
    }

    pub fn into_inner(self) -> BigUint {
        self.0
    }
}

/// A header with version, nBits and prevHash removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReducedRecord {
    pub merkle_root: [u8; 32],
    pub timestamp: u32,
    pub nonce: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldChange {
    Version(u32),
    Bits(u32),
}

/// Records that header `index` of the segment changes version or nBits
/// relative to its predecessor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentException {
    pub index: u32,
    pub change: FieldChange,
}

/// Run of consecutive headers stored as one full header plus reduced records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompactChainSegment {
    pub first: BlockHeader,
    pub rest: Vec<ReducedRecord>,
    pub exceptions: Vec<SegmentException>,
}

impl CompactChainSegment {
    /// Compresses a linked run of headers.
    pub fn compress(headers: &[BlockHeader]) -> Result<Self, HeaderError> {
        let (first, tail) = headers.split_first().ok_or(HeaderError::EmptySegment)?;
        let mut rest = Vec::with_capacity(tail.len());
        let mut exceptions = Vec::new();
        let mut prev = *first;
        for (offset, h) in tail.iter().enumerate() {
            let index = offset + 1;
            if h.prev_hash != prev.block_hash() {
                return Err(HeaderError::BrokenLink { index });
            }
            if h.version != prev.version {
                exceptions.push(SegmentException { index: index as u32, change: FieldChange::Version(h.version) });
            }
            if h.bits != prev.bits {
                exceptions.push(SegmentException { index: index as u32, change: FieldChange::Bits(h.bits) });
            }
            rest.push(ReducedRecord { merkle_root: h.merkle_root, timestamp: h.timestamp, nonce: h.nonce });
            prev = *h;
        }
        Ok(CompactChainSegment { first: *first, rest, exceptions })
    }

    /// Rebuilds the full header list, recomputing every prevHash link.
    pub fn expand(&self) -> Result<Vec<BlockHeader>, HeaderError> {
        let mut out = Vec::with_capacity(self.len());
        out.push(self.first);
        let mut pending = self.exceptions.iter().peekable();
        let mut last_index = 0u32;
        for (offset, rec) in self.rest.iter().enumerate() {
            let index = offset as u32 + 1;
            let prev = *out.last().expect("first pushed");
            let mut version = prev.version;
            let mut bits = prev.bits;
            while let Some(exc) = pending.next_if(|e| e.index == index) {
                match exc.change {
                    FieldChange::Version(v) => version = v,
                    FieldChange::Bits(b) => bits = b,
                }
            }
            if let Some(next) = pending.peek() {
                if next.index < index {
                    return Err(HeaderError::MalformedSegment(format!(
                        "exception index {} out of order",
                        next.index
                    )));
                }
            }
            last_index = index;
            out.push(BlockHeader {
                version,
                prev_hash: prev.block_hash(),
                merkle_root: rec.merkle_root,
                timestamp: rec.timestamp,
                bits,
                nonce: rec.nonce,
            });
        }
        if let Some(extra) = pending.next() {
            return Err(HeaderError::MalformedSegment(format!(
                "exception index {} outside segment of {} headers (last index {last_index})",
                extra.index,
                self.len()
            )));
        }
        Ok(out)
    }

    /// Number of headers in the segment.
    pub fn len(&self) -> usize {
        1 + self.rest.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_SIZE + REDUCED_RECORD_SIZE * self.rest.len() + 2 + EXCEPTION_RECORD_SIZE * self.exceptions.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&self.first.encode());
        for rec in &self.rest {
            out.extend_from_slice(&rec.merkle_root);
            out.extend_from_slice(&rec.timestamp.to_le_bytes());
            out.extend_from_slice(&rec.nonce.to_le_bytes());
        }
        let count = u16::try_from(self.exceptions.len()).expect("exception count exceeds u16");
        out.extend_from_slice(&count.to_le_bytes());
        for exc in &self.exceptions {
            out.extend_from_slice(&exc.index.to_le_bytes());
            let (tag, value) = match exc.change {
                FieldChange::Version(v) => (TAG_VERSION, v),
                FieldChange::Bits(b) => (TAG_BITS, b),
            };
            out.push(tag);
            out.extend_from_slice(&value.to_le_bytes());
        }
        out
    }

    /// Parses a segment holding `header_count` headers.
    pub fn decode(bytes: &[u8], header_count: usize) -> Result<Self, HeaderError> {
        if header_count == 0 {
            return Err(HeaderError::EmptySegment);
        }
        let records_end = (header_count - 1)
            .checked_mul(REDUCED_RECORD_SIZE)
            .and_then(|n| n.checked_add(HEADER_SIZE))
            .ok_or_else(|| HeaderError::MalformedSegment("header count overflows".into()))?;
        if bytes.len() < records_end + 2 {
            return Err(HeaderError::MalformedSegment(format!(
                "{} bytes cannot hold {header_count} headers",
                bytes.len()
            )));
        }
        let first = BlockHeader::decode_unchecked(&bytes[..HEADER_SIZE]);
        let rest = bytes[HEADER_SIZE..records_end]
            .chunks_exact(REDUCED_RECORD_SIZE)
            .map(|c| {
                let mut merkle_root = [0u8; 32];
                merkle_root.copy_from_slice(&c[..32]);
                ReducedRecord {
                    merkle_root,
                    timestamp: u32::from_le_bytes(c[32..36].try_into().unwrap()),
                    nonce: u32::from_le_bytes(c[36..40].try_into().unwrap()),
                }
            })
            .collect();
        let count = u16::from_le_bytes([bytes[records_end], bytes[records_end + 1]]) as usize;
        let body = &bytes[records_end + 2..];
        if body.len() != count * EXCEPTION_RECORD_SIZE {
            return Err(HeaderError::MalformedSegment(format!(
                "expected {count} exception records, found {} trailing bytes",
                body.len()
            )));
        }
        let exceptions = body
            .chunks_exact(EXCEPTION_RECORD_SIZE)
            .map(|c| {
                let index = u32::from_le_bytes(c[0..4].try_into().unwrap());
                let value = u32::from_le_bytes(c[5..9].try_into().unwrap());
                let change = match c[4] {
                    TAG_VERSION => FieldChange::Version(value),
                    TAG_BITS => FieldChange::Bits(value),
                    other => return Err(HeaderError::MalformedSegment(format!("unknown exception tag {other}"))),
                };
                Ok(SegmentException { index, change })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(CompactChainSegment { first, rest, exceptions })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Frozen from an independent hashlib script over the published genesis fields.
    const GENESIS_HEX: &str = "0100000000000000000000000000000000000000000000000000000000000000000000003ba3edfd7a7b12b27ac72c3e67768f617fc81bc3888a51323a9fb8aa4b1e5e4a29ab5f49ffff001d1dac2b7c";
    const GENESIS_HASH: &str = "000000000019d6689c085ae165831e934ff763ae46a2a6c172b3f1b60a8ce26f";

    fn hex(bytes: &[u8]) -> String {
        bytes.iter().map(|b| format!("{b:02x}")).collect()
    }

    #[test]
    fn genesis_wire_bytes_and_hash() {
        let g = BlockHeader::mainnet_genesis();
        assert_eq!(hex(&g.encode()), GENESIS_HEX);
        assert_eq!(g.block_hash().to_string(), GENESIS_HASH);
        assert_eq!(BlockHeader::decode(&g.encode()).unwrap(), g);
    }

    #[test]
    fn zero_header_is_zero_bytes() {
        let h = BlockHeader {
            version: 0,
            prev_hash: BlockHash::ZERO,
            merkle_root: [0; 32],
            timestamp: 0,
            bits: 0,
            nonce: 0,
        };
        assert_eq!(h.encode(), [0u8; 80]);
    }

    #[test]
    fn decode_rejects_wrong_length() {
        assert_eq!(
            BlockHeader::decode(&[0u8; 79]),
            Err(HeaderError::WrongLength { expected: 80, actual: 79 })
        );
    }

    #[test]
    fn compact_targets() {
        let t = Target::from_compact(0x1d00_ffff).unwrap();
        assert_eq!(*t.value(), BigUint::from(0xffffu32) << (8 * 26));
        assert_eq!(
            t.value().to_str_radix(16),
            "ffff0000000000000000000000000000000000000000000000000000"
        );
        assert_eq!(*Target::from_compact(0x0312_3456).unwrap().value(), BigUint::from(0x12_3456u32));
        assert_eq!(Target::from_compact(0x1d80_0000), Err(HeaderError::InvalidCompact(0x1d80_0000)));
        assert!(Target::from_compact(0x1d00_0000).is_err());
        assert!(Target::from_compact(0x2200_ffff).is_err());
        assert!(Target::from_compact(0x0100_00ff).is_err());
        assert!(Target::from_compact(0x207f_ffff).is_ok());
    }

    #[test]
    fn genesis_pow() {
        let mut g = BlockHeader::mainnet_genesis();
        assert!(g.check_pow().unwrap());
        g.nonce += 1;
        assert!(!g.check_pow().unwrap());
        g.bits = 0x1d80_0000;
        assert!(g.check_pow().is_err());
    }

    #[test]
    fn single_header_segment() {
        let g = BlockHeader::mainnet_genesis();
        let seg = CompactChainSegment::compress(&[g]).unwrap();
        assert_eq!(seg.len(), 1);
        assert!(seg.rest.is_empty() && seg.exceptions.is_empty());
        let bytes = seg.encode();
        assert_eq!(bytes.len(), 82);
        assert_eq!(&bytes[..80], &g.encode());
        assert_eq!(CompactChainSegment::decode(&bytes, 1).unwrap().expand().unwrap(), vec![g]);
    }

    #[test]
    fn broken_link_detected() {
        let g = BlockHeader::mainnet_genesis();
        let mut next = g;
        next.prev_hash = BlockHash([7; 32]);
        assert_eq!(
            CompactChainSegment::compress(&[g, next]),
            Err(HeaderError::BrokenLink { index: 1 })
        );
    }

    #[test]
    fn truncated_segment_is_malformed() {
        let g = BlockHeader::mainnet_genesis();
        let mut next = g;
        next.prev_hash = g.block_hash();
        let bytes = CompactChainSegment::compress(&[g, next]).unwrap().encode();
        assert!(matches!(
            CompactChainSegment::decode(&bytes[..bytes.len() - 5], 2),
            Err(HeaderError::MalformedSegment(_))
        ));
        assert!(matches!(
            CompactChainSegment::decode(&bytes, 3),
            Err(HeaderError::MalformedSegment(_))
        ));
    }

    #[test]
    fn exception_index_out_of_range_is_malformed() {
        let g = BlockHeader::mainnet_genesis();
        let seg = CompactChainSegment {
            first: g,
            rest: vec![],
            exceptions: vec![SegmentException { index: 3, change: FieldChange::Bits(1) }],
        };
        assert!(matches!(seg.expand(), Err(HeaderError::MalformedSegment(_))));
    }

    #[test]
    fn hash_hex_roundtrip() {
        let h: BlockHash = GENESIS_HASH.parse().unwrap();
        assert_eq!(h.to_string(), GENESIS_HASH);
        assert!("zz".parse::<BlockHash>().is_err());
    }
}
