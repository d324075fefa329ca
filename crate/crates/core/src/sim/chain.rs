//! Mining of low-difficulty chains for simulation and tests.

use rand::Rng;
use rand_distr::{Distribution, Exp};

use crate::headers::{BlockHash, BlockHeader, HeaderError};

/// nBits for a target of roughly 2^255: about every other nonce is a valid proof.
pub const EASY_BITS: u32 = 0x207f_ffff;

/// Searches nonces until the header satisfies its own target.
pub fn mine(mut header: BlockHeader) -> Result<BlockHeader, HeaderError> {
    let target = header.target()?;
    loop {
        if header.block_hash().to_uint() <= *target.value() {
            return Ok(header);
        }
        header.nonce = header.nonce.wrapping_add(1);
    }
}

/// Extends a chain one header at a time.
///
/// `tag` is mixed into every merkle root so that two builders forking from the
/// same parent never produce the same header.
#[derive(Debug, Clone)]
pub struct ChainBuilder {
    tip: Option<BlockHeader>,
    version: u32,
    bits: u32,
    tag: u32,
    count: u64,
}

impl ChainBuilder {
    pub fn new(bits: u32) -> Self {
        ChainBuilder { tip: None, version: 0x2000_0000, bits, tag: 0, count: 0 }
    }

    /// Continues from an existing header.
    pub fn from_tip(tip: BlockHeader, tag: u32) -> Self {
        ChainBuilder { tip: Some(tip), version: tip.version, bits: tip.bits, tag, count: 0 }
    }

    pub fn with_tag(mut self, tag: u32) -> Self {
        self.tag = tag;
        self
    }

    pub fn set_bits(&mut self, bits: u32) {
        self.bits = bits;
    }

    pub fn set_version(&mut self, version: u32) {
        self.version = version;
    }

    pub fn tip(&self) -> Option<&BlockHeader> {
        self.tip.as_ref()
    }

    /// Mines the next header with the given timestamp.
    pub fn next(&mut self, timestamp: u32) -> BlockHeader {
        let prev_hash = self.tip.map(|t| t.block_hash()).unwrap_or(BlockHash::ZERO);
        let mut merkle_root = [0u8; 32];
        merkle_root[..8].copy_from_slice(&self.count.to_le_bytes());
        merkle_root[8..12].copy_from_slice(&self.tag.to_le_bytes());
        merkle_root[12..16].copy_from_slice(&timestamp.to_le_bytes());
        merkle_root[16..32].copy_from_slice(&prev_hash.0[..16]);
        let header = mine(BlockHeader {
            version: self.version,
            prev_hash,
            merkle_root,
            timestamp,
            bits: self.bits,
            nonce: 0,
        })
        .expect("builder bits are validated on use");
        self.count += 1;
        self.tip = Some(header);
        header
    }

    /// Mines `n` headers spaced `spacing_secs` apart after the current tip.
    pub fn extend(&mut self, n: usize, spacing_secs: u32) -> Vec<BlockHeader> {
        let mut t = self.tip.map(|h| h.timestamp).unwrap_or(1_600_000_000);
        (0..n)
            .map(|_| {
                t += spacing_secs;
                self.next(t)
            })
            .collect()
    }
}

/// Generates `n_blocks` linked headers whose timestamps are cumulative sums of
/// exponential gaps with the given mean, starting after `start_time`.
pub fn generate_chain<R: Rng + ?Sized>(
    mean_minutes: f64,
    n_blocks: usize,
    bits: u32,
    start_time: u32,
    rng: &mut R,
) -> Result<Vec<BlockHeader>, HeaderError> {
    crate::headers::Target::from_compact(bits)?;
    let gaps = Exp::new(1.0 / (mean_minutes * 60.0)).expect("positive mean");
    let mut builder = ChainBuilder::new(bits);
    let mut t = start_time as f64;
    Ok((0..n_blocks)
        .map(|_| {
            t += gaps.sample(rng);
            builder.next(t.round() as u32)
        })
        .collect())
}
