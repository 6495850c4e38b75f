//! Sender-side enforcement: message splitting with last-chunk completion,
//! credit-gated pacing, chunk spacing and its CPU accounting, and the
//! remote-share rate override.

use std::collections::{HashMap, VecDeque};

use num_rational::Ratio;

use crate::daemon::{ControlMessage, Token};
use crate::engine::SimTime;

pub const DEFAULT_CHUNK_WITH_LATENCY: u64 = 5_000;
pub const DEFAULT_CHUNK_WITHOUT: u64 = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChunkDictEntry {
    pub chunk_with_latency_flows: u64,
    pub chunk_without: u64,
}

impl Default for ChunkDictEntry {
    fn default() -> Self {
        ChunkDictEntry {
            chunk_with_latency_flows: DEFAULT_CHUNK_WITH_LATENCY,
            chunk_without: DEFAULT_CHUNK_WITHOUT,
        }
    }
}

/// Chunk sizes per RNIC profile.
#[derive(Clone, Debug, Default)]
pub struct ChunkDict {
    entries: HashMap<String, ChunkDictEntry>,
}

impl ChunkDict {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_default_profile(entry: ChunkDictEntry) -> Self {
        let mut d = Self::new();
        d.insert("default", entry);
        d
    }

    pub fn insert(&mut self, profile: &str, entry: ChunkDictEntry) {
        assert!(entry.chunk_with_latency_flows >= 1 && entry.chunk_with_latency_flows <= entry.chunk_without);
        self.entries.insert(profile.to_string(), entry);
    }

    pub fn get(&self, profile: &str) -> ChunkDictEntry {
        self.entries.get(profile).copied().unwrap_or_default()
    }
}

pub fn select_chunk_size(dict: &ChunkDict, profile: &str, latency_present: bool) -> u64 {
    let e = dict.get(profile);
    if latency_present {
        e.chunk_with_latency_flows
    } else {
        e.chunk_without
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    pub message_id: u64,
    pub original_size: u64,
    pub chunk_size: u64,
    pub chunks: Vec<u64>,
    pub last_chunk_index: usize,
}

impl SplitPlan {
    pub fn is_split(&self) -> bool {
        self.chunks.len() > 1
    }
}

pub fn split_message(message_id: u64, size: u64, chunk_size: u64) -> SplitPlan {
    assert!(size >= 1 && chunk_size >= 1);
    let full = size / chunk_size;
    let rem = size % chunk_size;
    let mut chunks = vec![chunk_size; full as usize];
    if rem > 0 {
        chunks.push(rem);
    }
    SplitPlan {
        message_id,
        original_size: size,
        chunk_size,
        last_chunk_index: chunks.len() - 1,
        chunks,
    }
}

/// Inter-post waiting interval `alpha * chunk / rate`.
pub fn pace_gap(alpha: Ratio<u64>, chunk: u64, rate: u64) -> SimTime {
    let ns = alpha * Ratio::from_integer(chunk) * Ratio::from_integer(1_000_000_000)
        / Ratio::from_integer(rate.max(1));
    SimTime(ns.round().to_integer())
}

/// Which queue pair a chunk goes to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChunkQueue {
    Split,
    App,
}

/// A chunk the pacer wants posted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChunkOut {
    pub message_id: u64,
    pub size: u64,
    pub is_last_chunk: bool,
    pub queue: ChunkQueue,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PostDecision {
    Post(ChunkOut),
    WaitUntil(SimTime),
    /// Out of credit until the next grant.
    Starved,
    Idle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PacerKind {
    /// Splits and spaces byte-heavy messages.
    Bandwidth,
    /// Whole small messages, counted against the op budget.
    Throughput,
}

#[derive(Clone, Copy, Debug)]
struct Pending {
    message_id: u64,
    remaining: u64,
    posted_any: bool,
}

/// Per-flow pacing state.
#[derive(Clone, Debug)]
pub struct PacerState {
    pub flow_id: usize,
    pub kind: PacerKind,
    pending: VecDeque<Pending>,
    pub bytes_credit: u64,
    pub ops_credit: u64,
    pub alpha: Ratio<u64>,
    pub rate_share: u64,
    pub chunk_size: u64,
    pub next_post_at: SimTime,
    pub last_share_at: Option<SimTime>,
    pub share_latency_present: bool,
    posted_bytes: u64,
    posted_ops: u64,
}

impl PacerState {
    pub fn new(flow_id: usize, kind: PacerKind, chunk_size: u64, rate_share: u64) -> Self {
        PacerState {
            flow_id,
            kind,
            pending: VecDeque::new(),
            bytes_credit: 0,
            ops_credit: 0,
            alpha: Ratio::from_integer(1),
            rate_share,
            chunk_size: chunk_size.max(1),
            next_post_at: SimTime::ZERO,
            last_share_at: None,
            share_latency_present: false,
            posted_bytes: 0,
            posted_ops: 0,
        }
    }

    pub fn cpu_te(&self) -> Ratio<u64> {
        self.alpha
    }

    pub fn enqueue(&mut self, message_id: u64, size: u64) {
        self.pending.push_back(Pending {
            message_id,
            remaining: size.max(1),
            posted_any: false,
        });
    }

    pub fn has_pending(&self) -> bool {
        !self.pending.is_empty()
    }

    pub fn pending_messages(&self) -> usize {
        self.pending.len()
    }

    pub fn clear_pending(&mut self) {
        self.pending.clear();
    }

    pub fn posted(&self) -> (u64, u64) {
        (self.posted_bytes, self.posted_ops)
    }

    /// Apply a fresh grant; what was left of the previous one expires.
    pub fn grant(&mut self, token: &Token) {
        self.bytes_credit = token.bytes_remaining;
        self.ops_credit = token.ops_remaining;
    }

    pub fn expire(&mut self) {
        self.bytes_credit = 0;
        self.ops_credit = 0;
    }

    /// Change the splitting granularity for bytes not yet posted.
    pub fn replan(&mut self, chunk_size: u64) {
        self.chunk_size = chunk_size.max(1);
    }

    pub fn next_post(&mut self, now: SimTime) -> PostDecision {
        let Some(front) = self.pending.front().copied() else {
            return PostDecision::Idle;
        };
        if now < self.next_post_at {
            return PostDecision::WaitUntil(self.next_post_at);
        }
        let size = match self.kind {
            PacerKind::Bandwidth => front.remaining.min(self.chunk_size),
            PacerKind::Throughput => front.remaining,
        };
        let byte_ok = match self.kind {
            PacerKind::Bandwidth => self.bytes_credit >= size,
            PacerKind::Throughput => true,
        };
        if !byte_ok || self.ops_credit == 0 {
            return PostDecision::Starved;
        }
        self.bytes_credit = self.bytes_credit.saturating_sub(size);
        self.ops_credit -= 1;
        self.posted_bytes += size;
        self.posted_ops += 1;
        let is_last = size == front.remaining;
        let queue = if is_last { ChunkQueue::App } else { ChunkQueue::Split };
        let p = self.pending.front_mut().unwrap();
        p.remaining -= size;
        p.posted_any = true;
        if is_last {
            self.pending.pop_front();
        }
        if self.kind == PacerKind::Bandwidth {
            self.next_post_at = now + pace_gap(self.alpha, size, self.rate_share);
        }
        PostDecision::Post(ChunkOut {
            message_id: front.message_id,
            size,
            is_last_chunk: is_last,
            queue,
        })
    }
}

/// Bandwidth pacing helper: drain `token` through `pacer` at `now`.
pub fn pace_bandwidth(pacer: &mut PacerState, token: &Token, now: SimTime) -> (Vec<ChunkOut>, PostDecision) {
    pacer.grant(token);
    drain(pacer, now)
}

pub fn pace_throughput(pacer: &mut PacerState, token: &Token, now: SimTime) -> (Vec<ChunkOut>, PostDecision) {
    pacer.grant(token);
    drain(pacer, now)
}

/// Post everything allowed at `now`; returns the posts and what stopped it.
pub fn drain(pacer: &mut PacerState, now: SimTime) -> (Vec<ChunkOut>, PostDecision) {
    let mut out = Vec::new();
    loop {
        match pacer.next_post(now) {
            PostDecision::Post(c) => out.push(c),
            stop => return (out, stop),
        }
    }
}

/// Apply a remote daemon's share; stale notifications are ignored.
pub fn enforce_remote_share(pacer: &mut PacerState, msg: &ControlMessage, max_rate: u64) -> bool {
    if pacer.last_share_at.is_some_and(|t| msg.issued_at < t) {
        return false;
    }
    pacer.last_share_at = Some(msg.issued_at);
    pacer.rate_share = share_rate(msg.share, max_rate);
    pacer.share_latency_present = msg.latency > 0;
    true
}

pub fn share_rate(share: Ratio<u32>, max_rate: u64) -> u64 {
    (max_rate as u128 * *share.numer() as u128 / (*share.denom()).max(1) as u128) as u64
}

/// Reassembly of one message from its chunks.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MessageAssembly {
    pub size: u64,
    pub posted_bytes: u64,
    pub serviced_bytes: u64,
    pub completed_bytes: u64,
    /// Chunks handed to the RNIC whose egress service has not finished.
    pub in_service: u32,
    pub last_posted: bool,
    pub completions: u32,
}

impl MessageAssembly {
    pub fn new(size: u64) -> Self {
        MessageAssembly {
            size,
            ..Default::default()
        }
    }

    /// The last chunk may be handed to the RNIC once every earlier chunk has
    /// finished service.
    pub fn last_chunk_ready(&self) -> bool {
        self.in_service == 0
    }

    pub fn on_posted(&mut self, size: u64, is_last: bool) {
        self.posted_bytes += size;
        self.in_service += 1;
        if is_last {
            self.last_posted = true;
        }
    }

    pub fn on_serviced(&mut self, size: u64) {
        self.serviced_bytes += size;
        self.in_service -= 1;
    }

    /// Record delivery of one chunk; true exactly when the message completes.
    pub fn on_completed(&mut self, size: u64, is_last: bool) -> bool {
        self.completed_bytes += size;
        if is_last {
            debug_assert_eq!(self.completed_bytes, self.size);
            self.completions += 1;
            return true;
        }
        false
    }
}

/// Step-wise search for the smallest spacing fraction past which the tail
/// stops improving.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaTuner {
    step: Ratio<u64>,
    threshold: Ratio<u64>,
    pub alpha: Ratio<u64>,
    prev: Option<SimTime>,
    pub frozen: bool,
    pub history: Vec<(Ratio<u64>, Option<SimTime>)>,
}

impl Default for AlphaTuner {
    fn default() -> Self {
        Self::new()
    }
}

impl AlphaTuner {
    pub fn new() -> Self {
        AlphaTuner {
            step: Ratio::new(1, 10),
            threshold: Ratio::new(5, 100),
            alpha: Ratio::from_integer(0),
            prev: None,
            frozen: false,
            history: Vec::new(),
        }
    }

    pub fn restart(&mut self) {
        *self = Self {
            step: self.step,
            threshold: self.threshold,
            ..Self::new()
        };
    }

    /// No latency-sensitive traffic: no spacing.
    pub fn disable(&mut self) {
        self.restart();
        self.frozen = true;
    }

    /// Feed the p99 observed while holding the current alpha; returns the
    /// alpha to use next.
    pub fn observe(&mut self, p99: Option<SimTime>) -> Ratio<u64> {
        if self.frozen {
            return self.alpha;
        }
        self.history.push((self.alpha, p99));
        let stop = match (self.prev, p99) {
            (Some(prev), Some(cur)) if prev.as_nanos() > 0 => {
                let gain = Ratio::new(prev.as_nanos().saturating_sub(cur.as_nanos()), prev.as_nanos());
                cur >= prev || gain < self.threshold
            }
            (Some(_), Some(_)) => true,
            _ => false,
        };
        let one = Ratio::from_integer(1);
        if stop || self.alpha >= one {
            self.frozen = true;
            return self.alpha;
        }
        self.prev = p99.or(self.prev);
        self.alpha = (self.alpha + self.step).min(one);
        self.alpha
    }
}
