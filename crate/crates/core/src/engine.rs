//! Deterministic discrete-event core.
//!
//! Time is an integer count of nanoseconds. Events with the same firing time
//! are dispatched in insertion order, so a run is a pure function of its
//! configuration and seed.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Nanoseconds since simulation start.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub const fn from_nanos(ns: u64) -> Self {
        SimTime(ns)
    }

    pub const fn from_micros(us: u64) -> Self {
        SimTime(us * 1_000)
    }

    pub const fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1_000_000)
    }

    pub fn from_micros_f64(us: f64) -> Self {
        SimTime((us * 1_000.0).round().max(0.0) as u64)
    }

    pub const fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn as_micros_f64(self) -> f64 {
        self.0 as f64 / 1_000.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e9
    }

    pub fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.checked_add(rhs.0).expect("simulation clock overflow"))
    }
}

impl AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        *self = *self + rhs;
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.checked_sub(rhs.0).expect("negative simulation interval"))
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ns", self.0)
    }
}

/// Handle returned by [`EventQueue::schedule`], usable for cancellation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EventHandle(u64);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("event scheduled at {at} but the clock is already at {now}")]
    InPast { at: SimTime, now: SimTime },
}

/// Short tag naming what an event does, used for dispatch traces.
pub trait EventTag {
    fn tag(&self) -> &'static str;
}

struct Entry<E> {
    fire_at: SimTime,
    seq: u64,
    payload: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.fire_at == other.fire_at && self.seq == other.seq
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    // BinaryHeap is a max-heap; invert so the earliest (fire_at, seq) pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .fire_at
            .cmp(&self.fire_at)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// A dispatched event as recorded in a trace.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEntry {
    pub fire_at: SimTime,
    pub seq: u64,
    pub tag: &'static str,
}

/// Ordered event queue plus the virtual clock.
pub struct EventQueue<E> {
    heap: BinaryHeap<Entry<E>>,
    cancelled: HashSet<u64>,
    now: SimTime,
    next_seq: u64,
    dispatched: u64,
    trace: Option<Vec<TraceEntry>>,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            cancelled: HashSet::new(),
            now: SimTime::ZERO,
            next_seq: 0,
            dispatched: 0,
            trace: None,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn dispatched(&self) -> u64 {
        self.dispatched
    }

    pub fn pending(&self) -> usize {
        self.heap.len().saturating_sub(self.cancelled.len())
    }

    /// Start recording every dispatched event.
    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn trace(&self) -> Option<&[TraceEntry]> {
        self.trace.as_deref()
    }

    pub fn schedule(&mut self, fire_at: SimTime, payload: E) -> Result<EventHandle, ScheduleError> {
        if fire_at < self.now {
            return Err(ScheduleError::InPast {
                at: fire_at,
                now: self.now,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Entry {
            fire_at,
            seq,
            payload,
        });
        Ok(EventHandle(seq))
    }

    /// Schedule `delay` after the current clock. Never fails.
    pub fn schedule_in(&mut self, delay: SimTime, payload: E) -> EventHandle {
        let at = self.now + delay;
        self.schedule(at, payload)
            .expect("relative schedule cannot be in the past")
    }

    /// Cancel a pending event. Returns false if it was already cancelled.
    /// Handles of events that already fired must not be passed here.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        if handle.0 >= self.next_seq {
            return false;
        }
        self.cancelled.insert(handle.0)
    }

    /// Pop the next event firing at or before `end`, advancing the clock to it.
    pub fn pop_until(&mut self, end: SimTime) -> Option<(SimTime, E)>
    where
        E: EventTag,
    {
        loop {
            let head = self.heap.peek()?;
            if head.fire_at > end {
                return None;
            }
            let entry = self.heap.pop().expect("peeked entry");
            if self.cancelled.remove(&entry.seq) {
                continue;
            }
            self.now = entry.fire_at;
            self.dispatched += 1;
            if let Some(trace) = self.trace.as_mut() {
                trace.push(TraceEntry {
                    fire_at: entry.fire_at,
                    seq: entry.seq,
                    tag: entry.payload.tag(),
                });
            }
            return Some((entry.fire_at, entry.payload));
        }
    }

    /// Advance the clock to `end` once no event at or before `end` remains.
    pub fn finish_at(&mut self, end: SimTime) -> SimTime {
        if end > self.now {
            self.now = end;
        }
        self.now
    }

    /// Dispatch every event up to `end` through `handler`, which may schedule
    /// further events. Returns the final clock value.
    pub fn run_until<F>(&mut self, end: SimTime, mut handler: F) -> SimTime
    where
        E: EventTag,
        F: FnMut(&mut Self, SimTime, E),
    {
        while let Some((at, ev)) = self.pop_until(end) {
            handler(self, at, ev);
        }
        self.finish_at(end)
    }
}

/// Seeded generator with a platform-independent stream.
#[derive(Clone, Debug)]
pub struct SimRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SimRng {
    pub fn new(seed: u64) -> Self {
        SimRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream derived from this seed, e.g. one per flow.
    pub fn fork(&self, stream: u64) -> SimRng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        SimRng {
            seed: self.seed,
            inner,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform integer in `[0, bound)`; zero when `bound` is zero.
    pub fn below(&mut self, bound: u64) -> u64 {
        if bound == 0 {
            0
        } else {
            self.inner.random_range(0..bound)
        }
    }

    pub fn unit_f64(&mut self) -> f64 {
        self.inner.random()
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.inner
    }
}
