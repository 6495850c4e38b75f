//! Multi-resource RNIC model.
//!
//! Each host has one egress and one ingress pipeline. A pipeline is a single
//! non-preemptive server that picks the next work request round-robin over
//! queue pairs with pending work. Serving a message of `size` bytes costs
//! `1/max_tput + size/line_rate`, so small messages are bound by the
//! execution units and large ones by the link.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::SimTime;

/// Static description of an RNIC.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RnicModel {
    /// Link bandwidth in bytes per second.
    pub line_rate: u64,
    /// Execution throughput in operations per second.
    pub max_tput: u64,
    /// One-way wire delay applied to every message and control record.
    pub propagation_delay: SimTime,
    /// Extra delay before an event-triggered poller observes a completion.
    pub completion_notify_delay: SimTime,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RnicError {
    #[error("line rate and execution throughput must be positive")]
    ZeroCapacity,
    #[error("queue pair {0} is not registered")]
    UnknownQp(usize),
    #[error("work requests must carry at least one byte")]
    EmptyWqe,
}

impl RnicModel {
    pub fn new(line_rate: u64, max_tput: u64) -> Result<Self, RnicError> {
        if line_rate == 0 || max_tput == 0 {
            return Err(RnicError::ZeroCapacity);
        }
        Ok(RnicModel {
            line_rate,
            max_tput,
            propagation_delay: SimTime::ZERO,
            completion_notify_delay: SimTime::from_micros(1),
        })
    }

    /// 48 Gbps application-level bandwidth and 30 Mops, the reference card.
    pub fn reference() -> Self {
        RnicModel::new(6_000_000_000, 30_000_000).expect("nonzero")
    }

    pub fn with_propagation_delay(mut self, d: SimTime) -> Self {
        self.propagation_delay = d;
        self
    }

    pub fn with_notify_delay(mut self, d: SimTime) -> Self {
        self.completion_notify_delay = d;
        self
    }

    /// Time the server is occupied by one message, rounded to the nearest
    /// nanosecond and never below 1 ns.
    pub fn service_time(&self, size: u64) -> SimTime {
        // 1e9 * (1/T + s/R) = 1e9 * (R + s*T) / (T*R)
        let r = self.line_rate as u128;
        let t = self.max_tput as u128;
        let num = 1_000_000_000u128 * (r + size.max(1) as u128 * t);
        let den = t * r;
        let ns = (num + den / 2) / den;
        SimTime(ns.max(1) as u64)
    }

    /// Extra delay an event-triggered completion pays.
    pub fn notify_delay(&self, mode: PollingMode) -> SimTime {
        match mode {
            PollingMode::Busy => SimTime::ZERO,
            PollingMode::EventTriggered => self.completion_notify_delay,
        }
    }
}

/// How an application learns about completions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PollingMode {
    #[default]
    Busy,
    #[serde(alias = "event")]
    EventTriggered,
}

/// A posted work request.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Wqe {
    pub flow_id: usize,
    pub size: u64,
    pub posted_at: SimTime,
    pub is_last_chunk: bool,
    pub parent_message: Option<u64>,
}

/// What the application eventually polls.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Completion {
    pub flow_id: usize,
    pub message_id: u64,
    pub completed_at: SimTime,
    pub latency: SimTime,
}

/// Apply the last-chunk rule: only the final WQE of a message yields an
/// application-visible completion. `message_posted_at` is when the
/// application handed the whole message over.
pub fn complete_wqe(
    wqe: &Wqe,
    finished_at: SimTime,
    message_posted_at: SimTime,
    polling: PollingMode,
    rnic: &RnicModel,
) -> Option<Completion> {
    if !wqe.is_last_chunk {
        return None;
    }
    let completed_at = finished_at + rnic.notify_delay(polling);
    Some(Completion {
        flow_id: wqe.flow_id,
        message_id: wqe.parent_message.unwrap_or(0),
        completed_at,
        latency: completed_at - message_posted_at,
    })
}

/// A queue-pair slot within one pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct QpSlot(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Queued<W> {
    item: W,
    size: u64,
    not_before: SimTime,
}

/// An item that just entered service.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Started<W> {
    pub item: W,
    pub qp: QpSlot,
    pub size: u64,
    pub start: SimTime,
    pub end: SimTime,
}

/// Non-preemptive round-robin server over queue pairs.
///
/// Generic over the queued item so the simulator can store whatever handle it
/// likes. `not_before` lets the ingress side model cut-through reception: an
/// item cannot finish before its last byte has arrived.
#[derive(Clone, Debug)]
pub struct Pipeline<W> {
    model: RnicModel,
    queues: Vec<VecDeque<Queued<W>>>,
    cursor: usize,
    in_service: Option<Started<W>>,
    busy_ns: u64,
    served_bytes: u64,
    served_ops: u64,
}

impl<W: Copy> Pipeline<W> {
    pub fn new(model: RnicModel) -> Self {
        Pipeline {
            model,
            queues: Vec::new(),
            cursor: 0,
            in_service: None,
            busy_ns: 0,
            served_bytes: 0,
            served_ops: 0,
        }
    }

    pub fn model(&self) -> &RnicModel {
        &self.model
    }

    pub fn register_qp(&mut self) -> QpSlot {
        self.queues.push(VecDeque::new());
        QpSlot(self.queues.len() - 1)
    }

    pub fn qp_count(&self) -> usize {
        self.queues.len()
    }

    pub fn is_idle(&self) -> bool {
        self.in_service.is_none()
    }

    pub fn in_service(&self) -> Option<&Started<W>> {
        self.in_service.as_ref()
    }

    pub fn queued(&self, qp: QpSlot) -> usize {
        self.queues.get(qp.0).map_or(0, VecDeque::len)
    }

    pub fn backlog(&self) -> usize {
        self.queues.iter().map(VecDeque::len).sum()
    }

    /// Total time spent serving, bytes and operations completed.
    pub fn stats(&self) -> (u64, u64, u64) {
        (self.busy_ns, self.served_bytes, self.served_ops)
    }

    /// Append a work request. If the server was idle it starts immediately and
    /// the started item is returned so the caller can schedule its end.
    pub fn post(
        &mut self,
        qp: QpSlot,
        item: W,
        size: u64,
        now: SimTime,
    ) -> Result<Option<Started<W>>, RnicError> {
        self.post_not_before(qp, item, size, now, SimTime::ZERO)
    }

    pub fn post_not_before(
        &mut self,
        qp: QpSlot,
        item: W,
        size: u64,
        now: SimTime,
        not_before: SimTime,
    ) -> Result<Option<Started<W>>, RnicError> {
        if size == 0 {
            return Err(RnicError::EmptyWqe);
        }
        let queue = self.queues.get_mut(qp.0).ok_or(RnicError::UnknownQp(qp.0))?;
        queue.push_back(Queued {
            item,
            size,
            not_before,
        });
        if self.in_service.is_none() {
            Ok(self.start_next(now))
        } else {
            Ok(None)
        }
    }

    /// Finish the item in service and start the next one, if any.
    pub fn complete(&mut self, now: SimTime) -> (Started<W>, Option<Started<W>>) {
        let done = self
            .in_service
            .take()
            .expect("complete called on an idle pipeline");
        debug_assert_eq!(done.end, now);
        self.busy_ns += (done.end - done.start).as_nanos();
        self.served_bytes += done.size;
        self.served_ops += 1;
        let next = self.start_next(now);
        (done, next)
    }

    /// Round-robin choice of the next non-empty queue after the cursor.
    pub fn next_qp_round_robin(&self) -> Option<QpSlot> {
        let n = self.queues.len();
        (0..n)
            .map(|k| (self.cursor + k) % n)
            .find(|&i| !self.queues[i].is_empty())
            .map(QpSlot)
    }

    fn start_next(&mut self, now: SimTime) -> Option<Started<W>> {
        let qp = self.next_qp_round_robin()?;
        let q = self.queues[qp.0].pop_front().expect("non-empty");
        self.cursor = (qp.0 + 1) % self.queues.len();
        let end = std::cmp::max(now + self.model.service_time(q.size), q.not_before);
        let started = Started {
            item: q.item,
            qp,
            size: q.size,
            start: now,
            end,
        };
        self.in_service = Some(started);
        Some(started)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oracle_ns(size: u64, line_rate: f64, max_tput: f64) -> f64 {
        1e9 / max_tput + size as f64 * 1e9 / line_rate
    }

    #[test]
    fn service_time_matches_hand_evaluation() {
        let m = RnicModel::reference();
        for (size, approx) in [(5120u64, 886.0), (16, 36.0), (1_048_576, 174_796.0)] {
            let want = oracle_ns(size, 6e9, 30e6);
            let got = m.service_time(size).as_nanos() as f64;
            assert!((got - want).abs() <= 0.5, "size {size}: {got} vs {want}");
            assert!((got - approx).abs() <= 1.5, "size {size}: {got} vs {approx}");
        }
        assert!((m.service_time(1_048_576).as_micros_f64() - 174.8).abs() < 0.05);
    }

    #[test]
    fn service_time_floor_is_one_ns() {
        let m = RnicModel::new(u64::MAX / 4, u64::MAX / 4).unwrap();
        assert_eq!(m.service_time(1), SimTime(1));
    }

    #[test]
    fn zero_capacity_rejected() {
        assert_eq!(RnicModel::new(0, 1), Err(RnicError::ZeroCapacity));
    }

    #[test]
    fn post_to_idle_starts_immediately() {
        let m = RnicModel::reference();
        let mut p = Pipeline::new(m);
        let qp = p.register_qp();
        let s = p.post(qp, 1u32, 16, SimTime(100)).unwrap().unwrap();
        assert_eq!(s.start, SimTime(100));
        assert_eq!(s.end, SimTime(100) + m.service_time(16));
    }

    #[test]
    fn unregistered_qp_fails() {
        let mut p: Pipeline<u32> = Pipeline::new(RnicModel::reference());
        assert_eq!(
            p.post(QpSlot(3), 0, 16, SimTime::ZERO),
            Err(RnicError::UnknownQp(3))
        );
    }

    #[test]
    fn small_message_waits_behind_large_one() {
        let m = RnicModel::reference();
        let mut p = Pipeline::new(m);
        let big = p.register_qp();
        let small = p.register_qp();
        let s = p.post(big, 0u32, 1_048_576, SimTime::ZERO).unwrap().unwrap();
        assert!(p.post(small, 1, 16, SimTime(10)).unwrap().is_none());
        let (_, next) = p.complete(s.end);
        let next = next.unwrap();
        assert_eq!(next.item, 1);
        let wait = next.start - SimTime(10);
        assert!((wait.as_micros_f64() - 174.8).abs() < 0.05);
    }

    #[test]
    fn fifo_within_qp() {
        let mut p = Pipeline::new(RnicModel::reference());
        let qp = p.register_qp();
        let mut s = p.post(qp, 0u32, 100, SimTime::ZERO).unwrap().unwrap();
        for i in 1..4 {
            p.post(qp, i, 100, SimTime::ZERO).unwrap();
        }
        let mut order = vec![s.item];
        while let (_, Some(n)) = p.complete(s.end) {
            order.push(n.item);
            s = n;
        }
        assert_eq!(order, vec![0, 1, 2, 3]);
    }

    #[test]
    fn round_robin_alternates_backlogged_qps() {
        let mut p = Pipeline::new(RnicModel::reference());
        let a = p.register_qp();
        let b = p.register_qp();
        let mut s = p.post(a, 'a', 100, SimTime::ZERO).unwrap().unwrap();
        for _ in 0..3 {
            p.post(a, 'a', 100, SimTime::ZERO).unwrap();
            p.post(b, 'b', 100, SimTime::ZERO).unwrap();
        }
        p.post(b, 'b', 100, SimTime::ZERO).unwrap();
        let mut order = vec![s.item];
        while let (_, Some(n)) = p.complete(s.end) {
            order.push(n.item);
            s = n;
        }
        assert_eq!(order.iter().collect::<String>(), "abababab");
    }

    #[test]
    fn rr_per_round_bytes_follow_message_size() {
        // One message per QP per round, so bytes split by message size.
        let mut p = Pipeline::new(RnicModel::reference());
        let a = p.register_qp();
        let b = p.register_qp();
        let (small, large) = (1_000_000u64, 1_000_000_000u64);
        let mut s = p.post(a, small, small, SimTime::ZERO).unwrap().unwrap();
        p.post(b, large, large, SimTime::ZERO).unwrap();
        let mut bytes = [0u64; 2];
        for _ in 0..20 {
            let (done, next) = p.complete(s.end);
            bytes[(done.item == large) as usize] += done.size;
            let qp = if done.item == small { a } else { b };
            p.post(qp, done.item, done.size, done.end).unwrap();
            s = next.unwrap();
        }
        assert_eq!(bytes[1] / bytes[0], 1000);
    }

    #[test]
    fn more_qps_more_bandwidth() {
        let mut p = Pipeline::new(RnicModel::reference());
        let x: Vec<_> = (0..16).map(|_| p.register_qp()).collect();
        let y = p.register_qp();
        let size = 1_000_000;
        let mut s = None;
        for &q in &x {
            s = s.or(p.post(q, 0usize, size, SimTime::ZERO).unwrap());
        }
        p.post(y, 1usize, size, SimTime::ZERO).unwrap();
        let mut s = s.unwrap();
        let mut bytes = [0u64; 2];
        for _ in 0..(17 * 20) {
            let (done, next) = p.complete(s.end);
            bytes[done.item] += done.size;
            p.post(done.qp, done.item, size, done.end).unwrap();
            s = next.unwrap();
        }
        assert_eq!(bytes[0], 16 * bytes[1]);
    }

    #[test]
    fn not_before_delays_finish_only() {
        let m = RnicModel::reference();
        let mut p = Pipeline::new(m);
        let qp = p.register_qp();
        let s = p
            .post_not_before(qp, (), 16, SimTime(0), SimTime(500))
            .unwrap()
            .unwrap();
        assert_eq!(s.start, SimTime(0));
        assert_eq!(s.end, SimTime(500));
    }

    #[test]
    fn last_chunk_rule() {
        let m = RnicModel::reference();
        let mut w = Wqe {
            flow_id: 3,
            size: 5000,
            posted_at: SimTime(10),
            is_last_chunk: false,
            parent_message: Some(9),
        };
        assert!(complete_wqe(&w, SimTime(900), SimTime(0), PollingMode::Busy, &m).is_none());
        w.is_last_chunk = true;
        let c = complete_wqe(&w, SimTime(900), SimTime(0), PollingMode::Busy, &m).unwrap();
        assert_eq!(c.completed_at, SimTime(900));
        assert_eq!(c.latency, SimTime(900));
        assert_eq!(c.message_id, 9);
        let c = complete_wqe(&w, SimTime(900), SimTime(0), PollingMode::EventTriggered, &m).unwrap();
        assert_eq!(c.completed_at, SimTime(1900));
    }
}
