//! Windowed chain views, view matching and strongest-chain selection.
//!
//! A [`HeaderWindow`] is the fixed-capacity FIFO of recent headers that both
//! clients and servers keep. Bitcoin headers carry no height, so the window
//! tracks heights explicitly from the first header it ever accepted.
//!
//! Strength follows the cumulative-target rule: over an identical height range
//! the view whose summed targets are *smaller* represents more work.

use std::collections::VecDeque;
use std::fmt;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::headers::{BlockHash, BlockHeader, HeaderError};

/// Default window capacity, about two weeks of blocks.
pub const DEFAULT_CAPACITY: usize = 2016;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ChainError {
    #[error("header at height {height} does not link to the window tip")]
    LinkMismatch { height: u64 },
    #[error("header at height {height} fails its proof-of-work check")]
    PowInvalid { height: u64 },
    #[error("expected height {expected}, got {actual}")]
    HeightGap { expected: u64, actual: u64 },
    #[error("views cover different height ranges: {local:?} vs {remote:?}")]
    RangeMismatch { local: Option<HeaderRange>, remote: Option<HeaderRange> },
    #[error("invalid remote headers: {0}")]
    InvalidRemote(String),
    #[error(transparent)]
    Header(#[from] HeaderError),
}

/// Inclusive range of heights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HeaderRange {
    pub beg: u64,
    pub end: u64,
}

impl HeaderRange {
    /// Returns `None` when `beg > end`.
    pub fn new(beg: u64, end: u64) -> Option<Self> {
        (beg <= end).then_some(HeaderRange { beg, end })
    }

    pub fn len(&self) -> u64 {
        (self.end - self.beg).saturating_add(1)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, height: u64) -> bool {
        self.beg <= height && height <= self.end
    }

    pub fn intersect(&self, other: &HeaderRange) -> Option<HeaderRange> {
        HeaderRange::new(self.beg.max(other.beg), self.end.min(other.end))
    }

    pub fn covers(&self, other: &HeaderRange) -> bool {
        self.beg <= other.beg && other.end <= self.end
    }
}

impl fmt::Display for HeaderRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.beg, self.end)
    }
}

/// A header together with the height it occupies in a view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexedHeader {
    pub height: u64,
    pub header: BlockHeader,
}

impl IndexedHeader {
    pub fn new(height: u64, header: BlockHeader) -> Self {
        IndexedHeader { height, header }
    }
}

/// Assigns consecutive heights starting at `start`.
pub fn index_from(start: u64, headers: &[BlockHeader]) -> Vec<IndexedHeader> {
    headers
        .iter()
        .enumerate()
        .map(|(i, h)| IndexedHeader::new(start + i as u64, *h))
        .collect()
}

/// Height range spanned by a consecutive run, `None` if empty.
pub fn run_range(run: &[IndexedHeader]) -> Option<HeaderRange> {
    match (run.first(), run.last()) {
        (Some(a), Some(b)) => HeaderRange::new(a.height, b.height),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct WindowEntry {
    height: u64,
    header: BlockHeader,
    hash: BlockHash,
}

/// Fixed-capacity FIFO of consecutive, linked, PoW-valid headers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeaderWindow {
    capacity: usize,
    entries: VecDeque<WindowEntry>,
}

impl Default for HeaderWindow {
    fn default() -> Self {
        HeaderWindow::new(DEFAULT_CAPACITY)
    }
}

impl HeaderWindow {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "window capacity must be positive");
        HeaderWindow { capacity, entries: VecDeque::with_capacity(capacity.min(4096)) }
    }

    /// Builds a window from a linked run starting at `start_height`, keeping
    /// the newest `capacity` headers.
    pub fn from_headers(capacity: usize, start_height: u64, headers: &[BlockHeader]) -> Result<Self, ChainError> {
        let mut w = HeaderWindow::new(capacity);
        for (i, h) in headers.iter().enumerate() {
            w.append(*h, start_height + i as u64)?;
        }
        Ok(w)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn head_height(&self) -> Option<u64> {
        self.entries.front().map(|e| e.height)
    }

    pub fn tail_height(&self) -> Option<u64> {
        self.entries.back().map(|e| e.height)
    }

    pub fn range(&self) -> Option<HeaderRange> {
        Some(HeaderRange { beg: self.head_height()?, end: self.tail_height()? })
    }

    pub fn tip(&self) -> Option<IndexedHeader> {
        self.entries.back().map(|e| IndexedHeader::new(e.height, e.header))
    }

    pub fn tip_hash(&self) -> Option<BlockHash> {
        self.entries.back().map(|e| e.hash)
    }

    fn entry(&self, height: u64) -> Option<&WindowEntry> {
        let head = self.head_height()?;
        let idx = height.checked_sub(head)?;
        self.entries.get(usize::try_from(idx).ok()?)
    }

    pub fn get(&self, height: u64) -> Option<&BlockHeader> {
        self.entry(height).map(|e| &e.header)
    }

    pub fn hash_at(&self, height: u64) -> Option<BlockHash> {
        self.entry(height).map(|e| e.hash)
    }

    pub fn iter(&self) -> impl Iterator<Item = IndexedHeader> + '_ {
        self.entries.iter().map(|e| IndexedHeader::new(e.height, e.header))
    }

    pub fn headers(&self) -> Vec<BlockHeader> {
        self.entries.iter().map(|e| e.header).collect()
    }

    /// Appends `header` at `height`, evicting the head once over capacity.
    ///
    /// An empty window accepts any PoW-valid header at any height; that header
    /// becomes the anchor.
    pub fn append(&mut self, header: BlockHeader, height: u64) -> Result<(), ChainError> {
        if let Some(tail) = self.entries.back() {
            if height != tail.height + 1 {
                return Err(ChainError::HeightGap { expected: tail.height + 1, actual: height });
            }
            if header.prev_hash != tail.hash {
                return Err(ChainError::LinkMismatch { height });
            }
        }
        let hash = header.block_hash();
        if !header.check_pow_with(&hash)? {
            return Err(ChainError::PowInvalid { height });
        }
        self.entries.push_back(WindowEntry { height, header, hash });
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }

    /// Drops every entry above `height`.
    fn truncate_above(&mut self, height: u64) {
        while self.entries.back().is_some_and(|e| e.height > height) {
            self.entries.pop_back();
        }
    }

    /// Headers whose height lies in `range`; heights the window lacks are
    /// simply absent from the result.
    pub fn slice(&self, range: &HeaderRange) -> Vec<IndexedHeader> {
        let Some(own) = self.range() else { return Vec::new() };
        let Some(clip) = own.intersect(range) else { return Vec::new() };
        let start = (clip.beg - own.beg) as usize;
        let end = (clip.end - own.beg) as usize;
        self.entries
            .range(start..=end)
            .map(|e| IndexedHeader::new(e.height, e.header))
            .collect()
    }

    /// Re-verifies every window invariant from scratch.
    pub fn audit(&self) -> Result<(), ChainError> {
        if self.entries.len() > self.capacity {
            return Err(ChainError::InvalidRemote(format!(
                "window holds {} entries, capacity {}",
                self.entries.len(),
                self.capacity
            )));
        }
        let run: Vec<IndexedHeader> = self.iter().collect();
        validate_run(&run)?;
        for e in &self.entries {
            if e.hash != e.header.block_hash() {
                return Err(ChainError::InvalidRemote(format!("stale cached hash at {}", e.height)));
            }
        }
        Ok(())
    }

    /// Cumulative target of the whole window.
    pub fn weight(&self) -> Result<ChainWeight, ChainError> {
        Ok(weight(self.entries.iter().map(|e| &e.header))?)
    }
}

/// Checks that a run has consecutive heights, internal links and valid PoW.
pub fn validate_run(run: &[IndexedHeader]) -> Result<(), ChainError> {
    let mut prev: Option<(u64, BlockHash)> = None;
    for ih in run {
        if let Some((height, hash)) = prev {
            if ih.height != height + 1 {
                return Err(ChainError::HeightGap { expected: height + 1, actual: ih.height });
            }
            if ih.header.prev_hash != hash {
                return Err(ChainError::LinkMismatch { height: ih.height });
            }
        }
        let hash = ih.header.block_hash();
        if !ih.header.check_pow_with(&hash)? {
            return Err(ChainError::PowInvalid { height: ih.height });
        }
        prev = Some((ih.height, hash));
    }
    Ok(())
}

/// Sum of per-header targets.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct ChainWeight(pub BigUint);

impl fmt::Display for ChainWeight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

pub fn weight<'a>(headers: impl IntoIterator<Item = &'a BlockHeader>) -> Result<ChainWeight, HeaderError> {
    let mut total = BigUint::default();
    for h in headers {
        total += h.target()?.into_inner();
    }
    Ok(ChainWeight(total))
}

/// Which of two matched views carries more work.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strongest {
    ClientStronger,
    ServerStronger,
    Tie,
}

impl Strongest {
    pub fn flip(self) -> Self {
        match self {
            Strongest::ClientStronger => Strongest::ServerStronger,
            Strongest::ServerStronger => Strongest::ClientStronger,
            Strongest::Tie => Strongest::Tie,
        }
    }
}

/// Compares two views covering the same heights by cumulative target: the
/// smaller sum wins, equal sums tie.
pub fn find_strongest_chain(client: &[IndexedHeader], server: &[IndexedHeader]) -> Result<Strongest, ChainError> {
    let (cr, sr) = (run_range(client), run_range(server));
    if cr != sr || client.len() != server.len() {
        return Err(ChainError::RangeMismatch { local: cr, remote: sr });
    }
    let client_weight = weight(client.iter().map(|ih| &ih.header))?;
    let server_weight = weight(server.iter().map(|ih| &ih.header))?;
    Ok(match client_weight.cmp(&server_weight) {
        std::cmp::Ordering::Greater => Strongest::ServerStronger,
        std::cmp::Ordering::Less => Strongest::ClientStronger,
        std::cmp::Ordering::Equal => Strongest::Tie,
    })
}

/// Local and remote views restricted to their common heights, plus the
/// remote headers left out of the comparison.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MatchedViews {
    pub local: Vec<IndexedHeader>,
    pub remote: Vec<IndexedHeader>,
    /// Remote headers outside the common range, kept for merging.
    pub excluded: Vec<IndexedHeader>,
}

impl MatchedViews {
    pub fn range(&self) -> Option<HeaderRange> {
        run_range(&self.local)
    }

    /// First common height at which the two views hold different headers.
    pub fn divergence(&self) -> Option<u64> {
        self.local
            .iter()
            .zip(&self.remote)
            .find(|(l, r)| l.header != r.header)
            .map(|(l, _)| l.height)
    }
}

/// Restricts both views to the heights they share.
///
/// Remote headers above the local tip (or below the local head) cannot be
/// compared and are returned in `excluded`.
pub fn match_views(local: &HeaderWindow, received: &[IndexedHeader]) -> Result<MatchedViews, ChainError> {
    validate_run(received).map_err(|e| ChainError::InvalidRemote(e.to_string()))?;
    let overlap = match (local.range(), run_range(received)) {
        (Some(l), Some(r)) => l.intersect(&r),
        _ => None,
    };
    let Some(overlap) = overlap else {
        return Ok(MatchedViews { excluded: received.to_vec(), ..Default::default() });
    };
    let (inside, excluded): (Vec<IndexedHeader>, Vec<IndexedHeader>) =
        received.iter().partition(|ih| overlap.contains(ih.height));
    Ok(MatchedViews { local: local.slice(&overlap), remote: inside, excluded })
}

/// Verdict of comparing a received run against the local window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Comparison {
    pub verdict: Strongest,
    /// First height where the views disagree, if they do.
    pub fork_height: Option<u64>,
}

/// Decides which side is stronger after matching.
///
/// Over the shared range the cumulative-target rule decides. When that ties
/// on a forked range, the side whose branch continues past the shared range
/// holds strictly more headers on its branch and wins.
///
/// Fails with `RangeMismatch` when the shared range starts at the local head
/// and no shared header agrees: the fork lies deeper than the window.
pub fn compare_matched(local: &HeaderWindow, matched: &MatchedViews) -> Result<Comparison, ChainError> {
    let Some(range) = matched.range() else {
        return Ok(Comparison { verdict: Strongest::Tie, fork_height: None });
    };
    let fork_height = matched.divergence();
    if fork_height == Some(range.beg) && local.head_height() == Some(range.beg) && range.beg > 0 {
        return Err(ChainError::RangeMismatch { local: local.range(), remote: Some(range) });
    }
    let mut verdict = find_strongest_chain(&matched.local, &matched.remote)?;
    if verdict == Strongest::Tie && fork_height.is_some() {
        let remote_tail = matched.remote.last().expect("nonempty range");
        let remote_continues = matched
            .excluded
            .iter()
            .any(|ih| ih.height == range.end + 1 && ih.header.prev_hash == remote_tail.header.block_hash());
        let local_continues = local.tail_height().is_some_and(|t| t > range.end);
        verdict = match (local_continues, remote_continues) {
            (true, false) => Strongest::ClientStronger,
            (false, true) => Strongest::ServerStronger,
            _ => Strongest::Tie,
        };
    }
    Ok(Comparison { verdict, fork_height })
}

/// Result of a merge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MergeReport {
    /// Headers newly placed into the window.
    pub learned: usize,
    /// Local headers replaced by the winning branch.
    pub replaced: usize,
    /// Offered headers that could not form a valid chain with the window.
    pub dropped: usize,
}

/// Makes `winner` the window's view over its heights, then extends the tip
/// with every excluded header that links.
///
/// When the winner diverges from the window, the local suffix from the
/// divergence point is discarded. A winner that cannot be spliced onto the
/// local history replaces the window outright. `winner` must be a linked run.
pub fn merge_strongest(
    window: &HeaderWindow,
    winner: &[IndexedHeader],
    excluded: &[IndexedHeader],
) -> (HeaderWindow, MergeReport) {
    let mut w = window.clone();
    let mut report = MergeReport::default();

    // In a linked run each hash but the last is the successor's prevHash.
    let hash_of = |i: usize| winner.get(i + 1).map_or_else(|| winner[i].header.block_hash(), |n| n.header.prev_hash);
    if let Some(first_diff) = (0..winner.len()).position(|i| w.hash_at(winner[i].height) != Some(hash_of(i))) {
        let start = &winner[first_diff];
        let splice_ok = start
            .height
            .checked_sub(1)
            .and_then(|h| w.hash_at(h))
            .is_some_and(|parent| parent == start.header.prev_hash);
        if splice_ok {
            report.replaced = w.iter().filter(|e| e.height >= start.height).count();
            w.truncate_above(start.height - 1);
        } else {
            report.replaced = w.len();
            w = HeaderWindow::new(w.capacity());
        }
        for ih in &winner[first_diff..] {
            match w.append(ih.header, ih.height) {
                Ok(()) => report.learned += 1,
                Err(e) => {
                    tracing::debug!(height = ih.height, error = %e, "winner header rejected");
                    report.dropped += 1;
                }
            }
        }
    }

    let mut extra: Vec<&IndexedHeader> = excluded.iter().collect();
    extra.sort_by_key(|ih| ih.height);
    for ih in extra {
        if w.hash_at(ih.height) == Some(ih.header.block_hash()) {
            continue;
        }
        let next = w.tail_height().map(|t| t + 1);
        if next.is_some() && next != Some(ih.height) {
            report.dropped += 1;
            continue;
        }
        match w.append(ih.header, ih.height) {
            Ok(()) => report.learned += 1,
            Err(e) => {
                tracing::debug!(height = ih.height, error = %e, "excluded header dropped");
                report.dropped += 1;
            }
        }
    }
    (w, report)
}

/// Outcome of [`resolve`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Resolution {
    pub window: HeaderWindow,
    pub comparison: Comparison,
    pub report: MergeReport,
}

/// Match, compare and merge in one step: the full view update a party runs
/// on headers received from its peer.
pub fn resolve(local: &HeaderWindow, received: &[IndexedHeader]) -> Result<Resolution, ChainError> {
    let matched = match_views(local, received)?;
    let comparison = compare_matched(local, &matched)?;
    let winner: &[IndexedHeader] = match comparison.verdict {
        Strongest::ServerStronger => &matched.remote,
        _ => &matched.local,
    };
    let excluded: &[IndexedHeader] = match comparison.verdict {
        // A losing branch's continuation never links to the local tip.
        Strongest::ClientStronger => &[],
        _ => &matched.excluded,
    };
    let (window, report) = merge_strongest(local, winner, excluded);
    Ok(Resolution { window, comparison, report })
}
