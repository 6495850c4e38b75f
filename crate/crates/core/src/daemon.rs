//! Per-host isolation daemon.
//!
//! Probes latency with a reference flow, adjusts the aggregate cap for
//! resource-hungry flows (SafeUtil) with AIMD, hands out multi-resource tokens
//! round-robin at application granularity, and coordinates remote consumers by
//! broadcasting their guaranteed share.

use std::collections::BTreeMap;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{SimRng, SimTime};
use crate::scalar::Scalar;
use crate::sketch::{LatencySample, TailEstimator, TailEstimatorConfig};

/// What a flow asks of the RNIC.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowType {
    Latency,
    Throughput,
    #[default]
    Bandwidth,
}

impl FlowType {
    pub fn as_str(self) -> &'static str {
        match self {
            FlowType::Latency => "latency",
            FlowType::Throughput => "throughput",
            FlowType::Bandwidth => "bandwidth",
        }
    }

    pub fn is_resource_hungry(self) -> bool {
        !matches!(self, FlowType::Latency)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// Data leaves the registering host (WRITE/SEND).
    #[default]
    #[serde(alias = "write")]
    LocalSend,
    /// A remote host pulls data from the registering host.
    #[serde(alias = "read")]
    RemoteRead,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Admission {
    Ok,
    WarnLatencyTarget,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Normal,
    Utilization,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Normal => "normal",
            Mode::Utilization => "utilization",
        }
    }
}

/// Active flow counts: latency (L), bandwidth (B), throughput (T).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowCounts {
    pub latency: u32,
    pub bandwidth: u32,
    pub throughput: u32,
}

impl FlowCounts {
    pub fn new(latency: u32, bandwidth: u32, throughput: u32) -> Self {
        FlowCounts {
            latency,
            bandwidth,
            throughput,
        }
    }

    pub fn hungry(&self) -> u32 {
        self.bandwidth + self.throughput
    }

    pub fn total(&self) -> u32 {
        self.latency + self.hungry()
    }

    fn slot(&mut self, t: FlowType) -> &mut u32 {
        match t {
            FlowType::Latency => &mut self.latency,
            FlowType::Bandwidth => &mut self.bandwidth,
            FlowType::Throughput => &mut self.throughput,
        }
    }

    pub fn add(&mut self, t: FlowType) {
        *self.slot(t) += 1;
    }

    pub fn remove(&mut self, t: FlowType) {
        let s = self.slot(t);
        *s = s.saturating_sub(1);
    }

    /// L/(B+T); `None` stands for an unbounded ratio (no hungry flows).
    pub fn latency_ratio(&self) -> Option<Ratio<u32>> {
        (self.hungry() > 0).then(|| Ratio::new(self.latency, self.hungry()))
    }

    /// 1/(L+B+T), the share each remote consumer may use.
    pub fn share(&self) -> Ratio<u32> {
        Ratio::new(1, self.total().max(1))
    }
}

/// The lowest SafeUtil that still gives every flow 1/(L+B+T) of the link:
/// `max_rate * (B+T) / (L+B+T)`.
pub fn sharing_floor<S: Scalar>(max_rate: S, counts: FlowCounts) -> S {
    if counts.total() == 0 {
        return max_rate;
    }
    max_rate * S::from_u64(counts.hungry() as u64) / S::from_u64(counts.total() as u64)
}

/// `token_bytes * max_tput / max_rate`, rounded down and at least one.
pub fn compute_token_ops(token_bytes: u64, max_rate: u64, max_tput: u64) -> u64 {
    let ops = token_bytes as u128 * max_tput as u128 / max_rate.max(1) as u128;
    (ops as u64).max(1)
}

/// Token period `token_bytes / safe_util` as a scalar number of seconds.
pub fn tau_seconds<S: Scalar>(token_bytes: u64, safe_util: S) -> S {
    S::from_u64(token_bytes) / safe_util
}

/// Token period in whole nanoseconds (rounded down by integer scalars).
pub fn recompute_tau<S: Scalar>(token_bytes: u64, safe_util: S) -> SimTime {
    if safe_util <= S::zero() {
        return SimTime(u64::MAX);
    }
    let ns = S::from_u64(token_bytes) * S::from_u64(1_000_000_000) / safe_util;
    SimTime(ns.to_f64().max(1.0) as u64)
}

/// Static daemon knobs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DaemonParams {
    pub target99: SimTime,
    pub ref_period: SimTime,
    pub ref_count: usize,
    pub token_bytes: u64,
    /// Additive increase per update, bytes/s.
    pub aimd_step: u64,
    pub delta: SimTime,
    pub fallback_enabled: bool,
}

impl Default for DaemonParams {
    fn default() -> Self {
        DaemonParams {
            target99: SimTime::from_micros(2),
            ref_period: SimTime::from_micros(500),
            ref_count: 10_000,
            token_bytes: 1_000_000,
            aimd_step: 125_000_000,
            delta: SimTime::from_millis(5_000),
            fallback_enabled: false,
        }
    }
}

/// Controller state over a scalar rate type.
#[derive(Clone, Debug, PartialEq)]
pub struct DaemonState<S> {
    pub safe_util: S,
    pub max_rate: S,
    pub max_tput: u64,
    pub target99: SimTime,
    pub current99: Option<SimTime>,
    /// Locally initiated flows.
    pub counts: FlowCounts,
    /// Local flows plus remote READs served by this host.
    pub remote_counts: FlowCounts,
    pub token_bytes: u64,
    pub token_ops: u64,
    pub tau: SimTime,
    pub aimd_step: S,
    pub mode: Mode,
    pub violation_since: Option<SimTime>,
    pub delta: SimTime,
    pub ref_period: SimTime,
    pub ref_count: usize,
    pub last_ratio: Option<Ratio<u32>>,
    pub fallback_enabled: bool,
}

impl<S: Scalar> DaemonState<S> {
    pub fn new(params: DaemonParams, max_rate: u64, max_tput: u64) -> Self {
        let max = S::from_u64(max_rate);
        DaemonState {
            safe_util: max,
            max_rate: max,
            max_tput,
            target99: params.target99,
            current99: None,
            counts: FlowCounts::default(),
            remote_counts: FlowCounts::default(),
            token_bytes: params.token_bytes,
            token_ops: compute_token_ops(params.token_bytes, max_rate, max_tput),
            tau: recompute_tau(params.token_bytes, max),
            aimd_step: S::from_u64(params.aimd_step),
            mode: Mode::Normal,
            violation_since: None,
            delta: params.delta,
            ref_period: params.ref_period,
            ref_count: params.ref_count,
            last_ratio: None,
            fallback_enabled: params.fallback_enabled,
        }
    }

    /// The counts SafeUtil is computed against.
    pub fn control_counts(&self) -> FlowCounts {
        self.remote_counts
    }

    pub fn floor(&self) -> S {
        sharing_floor(self.max_rate, self.control_counts())
    }

    fn violated(&self) -> bool {
        self.current99.is_some_and(|c| c > self.target99)
    }

    /// Re-establish the bounds after the flow mix changed.
    pub fn rebase(&mut self) {
        let c = self.control_counts();
        if self.mode == Mode::Utilization || c.latency == 0 {
            self.safe_util = self.max_rate;
        } else {
            self.safe_util = S::min_of(S::max_of(self.safe_util, self.floor()), self.max_rate);
        }
        self.tau = recompute_tau(self.token_bytes, self.safe_util);
    }
}

/// One step of the SafeUtil controller.
///
/// With no latency-sensitive flows SafeUtil resets to the line rate. On a tail
/// violation it halves, but never below the sharing floor; otherwise it grows
/// by `aimd_step`. The result is capped at `max_rate` and τ is recomputed.
/// A missing estimate counts as meeting the target.
pub fn on_latency_flow_update<S: Scalar>(
    st: &mut DaemonState<S>,
    counts: FlowCounts,
    current99: Option<SimTime>,
) {
    st.remote_counts = counts;
    st.current99 = current99;
    if counts.latency == 0 {
        st.safe_util = st.max_rate;
    } else {
        let floor = sharing_floor(st.max_rate, counts);
        let next = if st.violated() {
            S::max_of(st.safe_util / S::from_u64(2), floor)
        } else {
            st.safe_util + st.aimd_step
        };
        st.safe_util = S::max_of(next, floor);
    }
    st.safe_util = S::min_of(st.safe_util, st.max_rate);
    st.tau = recompute_tau(st.token_bytes, st.safe_util);
}

/// A registered flow as the daemon sees it.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowRegistration {
    pub flow_id: usize,
    pub app_id: String,
    pub flow_type: FlowType,
    pub weight: Ratio<u64>,
    pub direction: Direction,
    pub admission: Admission,
}

impl FlowRegistration {
    pub fn new(flow_id: usize, app_id: impl Into<String>, flow_type: Option<FlowType>) -> Self {
        FlowRegistration {
            flow_id,
            app_id: app_id.into(),
            flow_type: flow_type.unwrap_or_default(),
            weight: Ratio::from_integer(1),
            direction: Direction::LocalSend,
            admission: Admission::Ok,
        }
    }

    pub fn with_weight(mut self, w: Ratio<u64>) -> Self {
        self.weight = w;
        self
    }

    pub fn with_direction(mut self, d: Direction) -> Self {
        self.direction = d;
        self
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DaemonError {
    #[error("flow {0} is already registered")]
    DuplicateFlow(usize),
    #[error("flow {0} is not registered")]
    UnknownFlow(usize),
    #[error("weight must be positive")]
    BadWeight,
}

/// A multi-resource grant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Token {
    pub bytes_remaining: u64,
    pub ops_remaining: u64,
    pub issued_to: usize,
    pub issued_at: SimTime,
}

impl Token {
    /// Spend `bytes` of one message; false if either dimension would go negative.
    pub fn try_spend(&mut self, bytes: u64) -> bool {
        if self.bytes_remaining < bytes || self.ops_remaining == 0 {
            return false;
        }
        self.bytes_remaining -= bytes;
        self.ops_remaining -= 1;
        true
    }

    pub fn exhausted(&self) -> bool {
        self.bytes_remaining == 0 || self.ops_remaining == 0
    }
}

#[derive(Clone, Debug)]
struct AppEntry {
    app_id: String,
    weight: Ratio<u64>,
    flows: Vec<usize>,
    flow_cursor: usize,
    deficit: Ratio<u64>,
}

impl AppEntry {
    fn has_active(&self, active: &impl Fn(usize) -> bool) -> bool {
        self.flows.iter().any(|&f| active(f))
    }

    fn pick(&mut self, active: &impl Fn(usize) -> bool) -> Option<usize> {
        let n = self.flows.len();
        for k in 0..n {
            let i = (self.flow_cursor + k) % n;
            if active(self.flows[i]) {
                self.flow_cursor = (i + 1) % n;
                return Some(self.flows[i]);
            }
        }
        None
    }
}

/// Weighted round-robin over applications, then round-robin over each
/// application's flows.
#[derive(Clone, Debug, Default)]
pub struct TokenDistributor {
    apps: Vec<AppEntry>,
    cursor: usize,
    turn: Option<usize>,
}

impl TokenDistributor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_flow(&mut self, app_id: &str, weight: Ratio<u64>, flow: usize) {
        match self.apps.iter_mut().find(|a| a.app_id == app_id) {
            Some(app) => {
                app.flows.push(flow);
                app.weight = weight;
            }
            None => self.apps.push(AppEntry {
                app_id: app_id.to_string(),
                weight,
                flows: vec![flow],
                flow_cursor: 0,
                deficit: Ratio::from_integer(0),
            }),
        }
    }

    pub fn remove_flow(&mut self, flow: usize) {
        for app in &mut self.apps {
            if let Some(pos) = app.flows.iter().position(|&f| f == flow) {
                app.flows.remove(pos);
                if app.flow_cursor > pos {
                    app.flow_cursor -= 1;
                }
                if app.flow_cursor >= app.flows.len() {
                    app.flow_cursor = 0;
                }
            }
        }
        let before = self.apps.len();
        let turn_app = self.turn.map(|i| self.apps[i].app_id.clone());
        self.apps.retain(|a| !a.flows.is_empty());
        if self.apps.len() != before {
            self.turn = turn_app.and_then(|id| self.apps.iter().position(|a| a.app_id == id));
            if self.apps.is_empty() {
                self.cursor = 0;
            } else {
                self.cursor %= self.apps.len();
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.apps.is_empty()
    }

    /// Choose the flow that receives the next token, or `None` when no
    /// registered flow is currently active.
    pub fn next_consumer(&mut self, active: impl Fn(usize) -> bool) -> Option<usize> {
        if !self.apps.iter().any(|a| a.has_active(&active)) {
            return None;
        }
        let one = Ratio::from_integer(1);
        let n = self.apps.len();
        loop {
            if let Some(i) = self.turn {
                let app = &mut self.apps[i];
                let live = app.has_active(&active);
                if live && app.deficit >= one {
                    app.deficit -= one;
                    return app.pick(&active);
                }
                if !live {
                    app.deficit = Ratio::from_integer(0);
                }
                self.turn = None;
                self.cursor = (i + 1) % n;
            }
            let i = self.cursor;
            let app = &mut self.apps[i];
            if app.has_active(&active) {
                app.deficit += app.weight;
                self.turn = Some(i);
            } else {
                app.deficit = Ratio::from_integer(0);
                self.cursor = (i + 1) % n;
            }
        }
    }
}

/// Share notification carried between daemons.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlMessage {
    pub sender_host: usize,
    pub latency: u32,
    pub bandwidth: u32,
    pub throughput: u32,
    pub share: Ratio<u32>,
    pub issued_at: SimTime,
}

impl ControlMessage {
    pub fn counts(&self) -> FlowCounts {
        FlowCounts::new(self.latency, self.bandwidth, self.throughput)
    }
}

/// Tracks one contended resource shared with remote consumers and emits a
/// share update whenever its counts change.
#[derive(Clone, Debug, Default)]
pub struct ShareBroadcaster {
    counts: FlowCounts,
    consumers: Vec<usize>,
    last_sent: Option<FlowCounts>,
}

impl ShareBroadcaster {
    pub fn add(&mut self, flow: usize, t: FlowType, remote_consumer: bool) {
        self.counts.add(t);
        if remote_consumer && t.is_resource_hungry() {
            self.consumers.push(flow);
        }
    }

    pub fn remove(&mut self, flow: usize, t: FlowType) {
        self.counts.remove(t);
        self.consumers.retain(|&f| f != flow);
    }

    pub fn counts(&self) -> FlowCounts {
        self.counts
    }

    pub fn consumers(&self) -> &[usize] {
        &self.consumers
    }

    /// Messages to send, one per remote consumer in registration order, or
    /// nothing when counts are unchanged since the last broadcast.
    pub fn broadcast_remote_share(
        &mut self,
        sender_host: usize,
        now: SimTime,
    ) -> Vec<(usize, ControlMessage)> {
        if self.last_sent == Some(self.counts) || self.consumers.is_empty() {
            return Vec::new();
        }
        self.last_sent = Some(self.counts);
        let c = self.counts;
        let msg = ControlMessage {
            sender_host,
            latency: c.latency,
            bandwidth: c.bandwidth,
            throughput: c.throughput,
            share: c.share(),
            issued_at: now,
        };
        self.consumers.iter().map(|&f| (f, msg)).collect()
    }
}

/// Result of a mode-machine evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeChange {
    EnteredUtilization,
    ReturnedToNormal,
}

/// A host's daemon over a scalar rate type.
#[derive(Clone, Debug)]
pub struct Daemon<S> {
    pub state: DaemonState<S>,
    params: DaemonParams,
    flows: BTreeMap<usize, FlowRegistration>,
    distributor: TokenDistributor,
    estimator: TailEstimator,
    /// Egress view shared with remote READ consumers.
    pub read_view: ShareBroadcaster,
    /// Ingress view shared with remote senders when receiver coordination is on.
    pub receiver_view: ShareBroadcaster,
    grants: u64,
}

impl<S: Scalar> Daemon<S> {
    pub fn new(params: DaemonParams, max_rate: u64, max_tput: u64, rng: &mut SimRng) -> Self {
        let est_cfg = TailEstimatorConfig {
            ref_count: params.ref_count.max(10),
            ..TailEstimatorConfig::default()
        };
        Daemon {
            state: DaemonState::new(params, max_rate, max_tput),
            params,
            flows: BTreeMap::new(),
            distributor: TokenDistributor::new(),
            estimator: TailEstimator::new(est_cfg, rng).expect("valid estimator config"),
            read_view: ShareBroadcaster::default(),
            receiver_view: ShareBroadcaster::default(),
            grants: 0,
        }
    }

    pub fn params(&self) -> &DaemonParams {
        &self.params
    }

    pub fn estimator(&self) -> &TailEstimator {
        &self.estimator
    }

    pub fn grants_issued(&self) -> u64 {
        self.grants
    }

    pub fn registration(&self, flow: usize) -> Option<&FlowRegistration> {
        self.flows.get(&flow)
    }

    /// Register a flow served by this host's egress. `token_consumer` marks
    /// flows that draw local tokens; remote READ consumers are paced by the
    /// broadcast share instead.
    pub fn register_flow(
        &mut self,
        mut reg: FlowRegistration,
        token_consumer: bool,
    ) -> Result<FlowRegistration, DaemonError> {
        if self.flows.contains_key(&reg.flow_id) {
            return Err(DaemonError::DuplicateFlow(reg.flow_id));
        }
        if *reg.weight.numer() == 0 {
            return Err(DaemonError::BadWeight);
        }
        reg.admission = if reg.flow_type == FlowType::Latency && self.state.violated() {
            Admission::WarnLatencyTarget
        } else {
            Admission::Ok
        };
        let remote = reg.direction == Direction::RemoteRead;
        if !remote {
            self.state.counts.add(reg.flow_type);
        }
        self.state.remote_counts.add(reg.flow_type);
        self.read_view.add(reg.flow_id, reg.flow_type, remote);
        if token_consumer && reg.flow_type.is_resource_hungry() {
            self.distributor.add_flow(&reg.app_id, reg.weight, reg.flow_id);
        }
        self.flows.insert(reg.flow_id, reg.clone());
        self.state.rebase();
        Ok(reg)
    }

    pub fn deregister_flow(&mut self, flow: usize) -> Result<FlowRegistration, DaemonError> {
        let reg = self.flows.remove(&flow).ok_or(DaemonError::UnknownFlow(flow))?;
        if reg.direction != Direction::RemoteRead {
            self.state.counts.remove(reg.flow_type);
        }
        self.state.remote_counts.remove(reg.flow_type);
        self.read_view.remove(flow, reg.flow_type);
        self.distributor.remove_flow(flow);
        self.state.rebase();
        Ok(reg)
    }

    /// Whether the reference flow should be probing.
    pub fn probing(&self) -> bool {
        self.state.control_counts().latency > 0
    }

    pub fn record_probe(&mut self, sample: LatencySample) {
        self.estimator.record(sample);
    }

    /// Periodic controller step driven by the latest tail estimate.
    pub fn aimd_update(&mut self) {
        let current = self.estimator.current_p99();
        if self.state.mode == Mode::Utilization {
            self.state.current99 = current;
            self.state.safe_util = self.state.max_rate;
            self.state.tau = recompute_tau(self.state.token_bytes, self.state.safe_util);
            return;
        }
        let counts = self.state.control_counts();
        if counts.hungry() == 0 {
            // nothing to cap; keep the floor from collapsing to zero
            self.state.current99 = current;
            self.state.safe_util = self.state.max_rate;
            self.state.tau = recompute_tau(self.state.token_bytes, self.state.safe_util);
            return;
        }
        on_latency_flow_update(&mut self.state, counts, current);
    }

    /// Track sustained violations and move between Normal and Utilization.
    pub fn fallback_check(&mut self, now: SimTime) -> Option<ModeChange> {
        if !self.state.fallback_enabled {
            self.state.violation_since = None;
            return None;
        }
        let counts = self.state.control_counts();
        match self.state.mode {
            Mode::Normal => {
                if counts.latency == 0 || !self.state.violated() {
                    self.state.violation_since = None;
                    return None;
                }
                let since = *self.state.violation_since.get_or_insert(now);
                if now - since >= self.state.delta {
                    self.state.mode = Mode::Utilization;
                    self.state.last_ratio = counts.latency_ratio();
                    self.state.violation_since = None;
                    self.state.rebase();
                    return Some(ModeChange::EnteredUtilization);
                }
                None
            }
            Mode::Utilization => {
                let rose = match (counts.latency_ratio(), self.state.last_ratio) {
                    (None, _) => true,
                    (Some(_), None) => false,
                    (Some(now_r), Some(then)) => now_r > then,
                };
                if rose {
                    self.state.mode = Mode::Normal;
                    self.state.violation_since = None;
                    self.state.rebase();
                    return Some(ModeChange::ReturnedToNormal);
                }
                None
            }
        }
    }

    /// Issue the next token to an active consumer, if any.
    pub fn distribute_token(&mut self, now: SimTime, active: impl Fn(usize) -> bool) -> Option<Token> {
        let flow = self.distributor.next_consumer(active)?;
        self.grants += 1;
        Some(Token {
            bytes_remaining: self.state.token_bytes,
            ops_remaining: self.state.token_ops,
            issued_to: flow,
            issued_at: now,
        })
    }

    /// Whether latency-sensitive traffic currently shapes chunk selection.
    pub fn latency_present(&self) -> bool {
        self.state.mode == Mode::Normal && self.state.control_counts().latency > 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GB: u64 = 1_000_000_000;

    fn state(safe_util: u64) -> DaemonState<u64> {
        let mut st = DaemonState::<u64>::new(DaemonParams::default(), 6 * GB, 30_000_000);
        st.safe_util = safe_util;
        st
    }

    fn us(n: u64) -> Option<SimTime> {
        Some(SimTime::from_micros(n))
    }

    #[test]
    fn worked_updates() {
        let mut st = state(6 * GB);
        on_latency_flow_update(&mut st, FlowCounts::new(0, 1, 0), us(3));
        assert_eq!(st.safe_util, 6 * GB);

        let mut st = state(6 * GB);
        on_latency_flow_update(&mut st, FlowCounts::new(1, 1, 0), us(3));
        assert_eq!(st.safe_util, 3 * GB);

        let mut st = state(1_600_000_000);
        on_latency_flow_update(&mut st, FlowCounts::new(3, 1, 0), us(3));
        assert_eq!(st.safe_util, 1_500_000_000);

        let mut st = state(3 * GB);
        st.aimd_step = 125_000_000;
        on_latency_flow_update(&mut st, FlowCounts::new(1, 1, 0), us(2));
        assert_eq!(st.safe_util, 3_125_000_000);
    }

    #[test]
    fn missing_estimate_counts_as_met() {
        let mut st = state(3 * GB);
        on_latency_flow_update(&mut st, FlowCounts::new(1, 1, 0), None);
        assert_eq!(st.safe_util, 3 * GB + 125_000_000);
    }

    #[test]
    fn increase_is_capped_at_line_rate() {
        let mut st = state(6 * GB - 1);
        on_latency_flow_update(&mut st, FlowCounts::new(1, 1, 0), us(1));
        assert_eq!(st.safe_util, 6 * GB);
    }

    #[test]
    fn token_math() {
        assert_eq!(compute_token_ops(1_000_000, 6 * GB, 30_000_000), 5000);
        assert_eq!(compute_token_ops(5_000, 6 * GB, 30_000_000), 25);
        assert_eq!(compute_token_ops(1, 6 * GB, 30_000_000), 1);
        let tau = recompute_tau(1_000_000, 6 * GB);
        assert!((tau.as_micros_f64() - 167.0).abs() <= 1.0);
        let tau = recompute_tau(5_120, 6 * GB);
        assert!((tau.as_micros_f64() - 0.853).abs() < 0.001);
        let tau = recompute_tau(5_000, 6 * GB);
        assert!((tau.as_micros_f64() - 0.833).abs() < 0.001);
    }

    #[test]
    fn tau_doubles_exactly_when_rate_halves() {
        type Q = Ratio<i128>;
        let r = Q::from_integer(6_000_000_000);
        let t1 = tau_seconds(1_000_000, r);
        let t2 = tau_seconds(1_000_000, r / Q::from_integer(2));
        assert_eq!(t2, t1 * Q::from_integer(2));
        let n1 = recompute_tau(1_000_000, 6 * GB).as_nanos();
        let n2 = recompute_tau(1_000_000, 3 * GB).as_nanos();
        assert!(n2.abs_diff(2 * n1) <= 1);
    }

    #[test]
    fn weighted_round_robin() {
        let mut d = TokenDistributor::new();
        d.add_flow("x", Ratio::from_integer(2), 1);
        d.add_flow("y", Ratio::from_integer(1), 2);
        let seq: Vec<_> = (0..6).map(|_| d.next_consumer(|_| true).unwrap()).collect();
        assert_eq!(seq, vec![1, 1, 2, 1, 1, 2]);
    }

    #[test]
    fn equal_apps_alternate() {
        let mut d = TokenDistributor::new();
        d.add_flow("x", Ratio::from_integer(1), 10);
        d.add_flow("y", Ratio::from_integer(1), 20);
        let seq: Vec<_> = (0..4).map(|_| d.next_consumer(|_| true).unwrap()).collect();
        assert_eq!(seq, vec![10, 20, 10, 20]);
    }

    #[test]
    fn many_flows_one_app_share_its_turns() {
        let mut d = TokenDistributor::new();
        for f in 0..16 {
            d.add_flow("x", Ratio::from_integer(1), f);
        }
        d.add_flow("y", Ratio::from_integer(1), 100);
        let mut x = 0;
        let mut y = 0;
        let mut per_flow = [0u32; 16];
        for _ in 0..320 {
            let f = d.next_consumer(|_| true).unwrap();
            if f == 100 {
                y += 1;
            } else {
                x += 1;
                per_flow[f] += 1;
            }
        }
        assert_eq!(x, y);
        assert!(per_flow.iter().all(|&n| n == 10));
    }

    #[test]
    fn fractional_weights_converge() {
        let mut d = TokenDistributor::new();
        d.add_flow("x", Ratio::new(3, 2), 1);
        d.add_flow("y", Ratio::from_integer(1), 2);
        let grants: Vec<_> = (0..500).map(|_| d.next_consumer(|_| true).unwrap()).collect();
        let x = grants.iter().filter(|&&f| f == 1).count();
        assert_eq!(x, 300);
    }

    #[test]
    fn inactive_consumers_skipped() {
        let mut d = TokenDistributor::new();
        d.add_flow("x", Ratio::from_integer(1), 1);
        d.add_flow("y", Ratio::from_integer(1), 2);
        assert_eq!(d.next_consumer(|f| f == 2), Some(2));
        assert_eq!(d.next_consumer(|f| f == 2), Some(2));
        assert_eq!(d.next_consumer(|_| false), None);
    }

    #[test]
    fn token_spends_one_dimension() {
        let mut t = Token {
            bytes_remaining: 10_000,
            ops_remaining: 25,
            issued_to: 0,
            issued_at: SimTime::ZERO,
        };
        assert!(t.try_spend(5_000));
        assert!(t.try_spend(5_000));
        assert!(!t.try_spend(1));
        assert!(t.exhausted());
        assert_eq!(t.ops_remaining, 23);
    }

    fn daemon() -> Daemon<u64> {
        let params = DaemonParams {
            fallback_enabled: true,
            delta: SimTime::from_millis(5_000),
            ..DaemonParams::default()
        };
        Daemon::new(params, 6 * GB, 30_000_000, &mut SimRng::new(1))
    }

    #[test]
    fn registration_and_admission() {
        let mut d = daemon();
        let r = d.register_flow(FlowRegistration::new(1, "a", Some(FlowType::Bandwidth)), true).unwrap();
        assert_eq!(r.admission, Admission::Ok);
        assert_eq!(d.state.counts.bandwidth, 1);
        let r = d.register_flow(FlowRegistration::new(2, "b", None), true).unwrap();
        assert_eq!(r.flow_type, FlowType::Bandwidth);
        assert_eq!(
            d.register_flow(FlowRegistration::new(2, "b", None), true),
            Err(DaemonError::DuplicateFlow(2))
        );
        d.state.current99 = us(3);
        let r = d.register_flow(FlowRegistration::new(3, "c", Some(FlowType::Latency)), true).unwrap();
        assert_eq!(r.admission, Admission::WarnLatencyTarget);
        assert_eq!(d.state.counts.latency, 1);
    }

    #[test]
    fn rebase_respects_floor_after_latency_leaves() {
        let mut d = daemon();
        d.register_flow(FlowRegistration::new(1, "a", Some(FlowType::Bandwidth)), true).unwrap();
        for f in 2..5 {
            d.register_flow(FlowRegistration::new(f, "l", Some(FlowType::Latency)), true).unwrap();
        }
        d.state.safe_util = d.state.floor();
        assert_eq!(d.state.safe_util, 1_500_000_000);
        d.deregister_flow(4).unwrap();
        assert_eq!(d.state.safe_util, 2 * GB);
        d.deregister_flow(3).unwrap();
        d.deregister_flow(2).unwrap();
        assert_eq!(d.state.safe_util, 6 * GB);
    }

    #[test]
    fn fallback_after_sustained_violation() {
        let mut d = daemon();
        d.register_flow(FlowRegistration::new(1, "a", Some(FlowType::Bandwidth)), true).unwrap();
        d.register_flow(FlowRegistration::new(2, "b", Some(FlowType::Bandwidth)), true).unwrap();
        d.register_flow(FlowRegistration::new(3, "l", Some(FlowType::Latency)), true).unwrap();
        d.state.current99 = us(10);
        assert_eq!(d.fallback_check(SimTime::ZERO), None);
        assert_eq!(d.fallback_check(SimTime::from_millis(4_999)), None);
        assert_eq!(
            d.fallback_check(SimTime::from_millis(5_000)),
            Some(ModeChange::EnteredUtilization)
        );
        assert_eq!(d.state.mode, Mode::Utilization);
        assert_eq!(d.state.safe_util, 6 * GB);
        assert_eq!(d.state.last_ratio, Some(Ratio::new(1, 2)));

        // more bandwidth flows lower the ratio: stay
        d.register_flow(FlowRegistration::new(4, "c", Some(FlowType::Bandwidth)), true).unwrap();
        assert_eq!(d.fallback_check(SimTime::from_millis(6_000)), None);
        d.deregister_flow(4).unwrap();
        // back to the same ratio: ties stay too
        assert_eq!(d.fallback_check(SimTime::from_millis(6_001)), None);
        d.register_flow(FlowRegistration::new(5, "l2", Some(FlowType::Latency)), true).unwrap();
        assert_eq!(
            d.fallback_check(SimTime::from_millis(6_002)),
            Some(ModeChange::ReturnedToNormal)
        );
    }

    #[test]
    fn met_sample_resets_violation_clock() {
        let mut d = daemon();
        d.register_flow(FlowRegistration::new(1, "a", Some(FlowType::Bandwidth)), true).unwrap();
        d.register_flow(FlowRegistration::new(3, "l", Some(FlowType::Latency)), true).unwrap();
        d.state.current99 = us(10);
        d.fallback_check(SimTime::ZERO);
        d.state.current99 = us(1);
        d.fallback_check(SimTime::from_millis(4_000));
        d.state.current99 = us(10);
        assert_eq!(d.fallback_check(SimTime::from_millis(4_001)), None);
        assert_eq!(d.fallback_check(SimTime::from_millis(9_000)), None);
        assert_eq!(
            d.fallback_check(SimTime::from_millis(9_001)),
            Some(ModeChange::EnteredUtilization)
        );
    }

    #[test]
    fn share_broadcast_on_change_only() {
        let mut b = ShareBroadcaster::default();
        b.add(1, FlowType::Bandwidth, true);
        b.add(2, FlowType::Bandwidth, true);
        b.add(3, FlowType::Bandwidth, false);
        b.add(4, FlowType::Throughput, true);
        let msgs = b.broadcast_remote_share(7, SimTime(5));
        assert_eq!(msgs.len(), 3);
        assert!(msgs.iter().all(|(_, m)| m.share == Ratio::new(1, 4) && m.sender_host == 7));
        assert!(b.broadcast_remote_share(7, SimTime(6)).is_empty());
        b.remove(3, FlowType::Bandwidth);
        let msgs = b.broadcast_remote_share(7, SimTime(7));
        assert_eq!(msgs[0].1.share, Ratio::new(1, 3));
    }

    #[test]
    fn control_message_wire_roundtrip() {
        let m = ControlMessage {
            sender_host: 1,
            latency: 0,
            bandwidth: 3,
            throughput: 1,
            share: Ratio::new(1, 4),
            issued_at: SimTime(42),
        };
        let s = serde_json::to_string(&m).unwrap();
        let back: ControlMessage = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
    }
}
