//! The simulated cluster: hosts with RNIC pipelines and daemons, flows with
//! their shapers, and the event loop tying them together.

use std::collections::VecDeque;

use num_rational::Ratio;
use slab::Slab;

use crate::daemon::{ControlMessage, Direction, FlowRegistration, FlowType, Mode, ModeChange, Token};
use crate::engine::{EventHandle, EventQueue, EventTag, SimRng, SimTime};
use crate::metrics::{sorted_percentile, MetricsRecord, Timeseries, TimeseriesRow};
use crate::rnic::{PollingMode, Pipeline, QpSlot, RnicModel, Started};
use crate::scenario::{ConfigError, ScenarioConfig, Verb};
use crate::shaper::{
    enforce_remote_share, select_chunk_size, AlphaTuner, ChunkDict, ChunkDictEntry, ChunkOut, ChunkQueue,
    MessageAssembly, PacerKind, PacerState, PostDecision,
};
use crate::sketch::{LatencySample, TailEstimator, TailEstimatorConfig};
use crate::daemon::{compute_token_ops, DaemonParams};
use crate::HostDaemon;

const PROBE_BYTES: u64 = 10;
const ALPHA_HOLD_PERIODS: u64 = 10;

#[derive(Clone, Copy, Debug)]
enum Ev {
    FlowStart(usize),
    FlowStop(usize),
    AppPost(usize),
    PacerPost(usize),
    TokenTick(usize),
    RemoteClock(usize),
    ReadArrive(usize),
    EgressDone(usize),
    IngressArrive(usize),
    IngressDone(usize),
    Complete(usize),
    Broadcast(usize),
    ControlArrive(usize, ControlMessage),
    RefProbe(usize),
    AimdUpdate(usize),
    FallbackCheck(usize),
    AlphaStep(usize),
    Sample,
}

impl EventTag for Ev {
    fn tag(&self) -> &'static str {
        match self {
            Ev::FlowStart(_) => "flow-start",
            Ev::FlowStop(_) => "flow-stop",
            Ev::AppPost(_) | Ev::PacerPost(_) | Ev::ReadArrive(_) | Ev::IngressArrive(_) => "wqe-post",
            Ev::TokenTick(_) | Ev::RemoteClock(_) => "token-tick",
            Ev::EgressDone(_) | Ev::IngressDone(_) | Ev::Complete(_) => "service-complete",
            Ev::Broadcast(_) | Ev::ControlArrive(..) => "control-msg-arrival",
            Ev::RefProbe(_) => "ref-probe",
            Ev::AimdUpdate(_) | Ev::AlphaStep(_) | Ev::Sample => "aimd-update",
            Ev::FallbackCheck(_) => "fallback-check",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Governor {
    Unpaced,
    /// Tokens from the initiator's daemon.
    Local,
    /// Share broadcast by this host's daemon.
    Remote(usize),
}

struct FlowRt {
    label: String,
    app: String,
    ftype: FlowType,
    verb: Verb,
    initiator: usize,
    src: usize,
    dst: usize,
    msg_bytes: u64,
    window: u32,
    polling: PollingMode,
    think_ns: u64,
    start: SimTime,
    stop: SimTime,
    weight: Ratio<u64>,
    app_qp: QpSlot,
    split_qp: QpSlot,
    active: bool,
    pacer: Option<PacerState>,
    governor: Governor,
    pacer_wake: Option<(SimTime, EventHandle)>,
    remote_clock: Option<EventHandle>,
    rng: SimRng,
    latencies: Vec<u64>,
    bytes_window: u64,
    msgs_window: u64,
    bytes_interval: u64,
}

impl FlowRt {
    fn measure_window(&self, warm: SimTime, end: SimTime) -> (SimTime, SimTime) {
        (self.start.max(warm), self.stop.min(end))
    }
}

struct MsgRt {
    flow: usize,
    posted_at: SimTime,
    asm: MessageAssembly,
    held: Option<usize>,
}

#[derive(Clone, Copy)]
struct WqeRt {
    flow: Option<usize>,
    msg: usize,
    size: u64,
    is_last: bool,
    src: usize,
    dst: usize,
    qp: QpSlot,
    read: bool,
    posted_at: SimTime,
    egress_end: SimTime,
}

struct Tuning {
    tuner: AlphaTuner,
    est: TailEstimator,
    step: Option<EventHandle>,
}

struct HostRt {
    name: String,
    egress: Pipeline<usize>,
    ingress: Pipeline<usize>,
    ingress_qp: QpSlot,
    probe_qp: QpSlot,
    probe_peer: Option<usize>,
    daemon: Option<HostDaemon>,
    local_consumers: Vec<usize>,
    tick: Option<(SimTime, EventHandle)>,
    last_tick: Option<SimTime>,
    probe_running: bool,
    broadcast_pending: bool,
    alpha: Ratio<u64>,
    tuning: Option<Tuning>,
    exact_window: VecDeque<u64>,
    sketch_checks: u64,
    sketch_agree: u64,
    first_violation: Option<SimTime>,
}

/// A daemon mode transition.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeEvent {
    pub time: SimTime,
    pub host: String,
    pub mode: Mode,
}

/// Steps taken by one host's spacing auto-tuner.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaTrace {
    pub host: String,
    pub frozen: bool,
    /// (alpha held, p99 observed in microseconds)
    pub steps: Vec<(f64, Option<f64>)>,
}

/// Everything a run produces.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub records: Vec<MetricsRecord>,
    pub timeseries: Timeseries,
    pub mode_changes: Vec<ModeEvent>,
    pub admission_warnings: Vec<String>,
    /// Per host: (sampling instants checked, instants within one bucket).
    pub sketch_checks: Vec<(String, u64, u64)>,
    /// First AIMD update per host that saw the target violated.
    pub first_violation: Vec<(String, Option<SimTime>)>,
    /// Spacing fraction in force per host at the end of the run.
    pub final_alpha: Vec<(String, f64)>,
    pub alpha_tuning: Vec<AlphaTrace>,
    pub events_dispatched: u64,
    /// Dispatch trace, when enabled with [`World::enable_trace`].
    pub trace: Option<Vec<crate::engine::TraceEntry>>,
}

impl RunOutput {
    pub fn record(&self, flow_id: &str) -> Option<&MetricsRecord> {
        self.records.iter().find(|r| r.flow_id == flow_id)
    }

    /// Fraction of sketch checks that agreed, over all hosts.
    pub fn sketch_agreement(&self) -> Option<f64> {
        let (n, ok) = self
            .sketch_checks
            .iter()
            .fold((0, 0), |(n, ok), (_, a, b)| (n + a, ok + b));
        (n > 0).then(|| ok as f64 / n as f64)
    }

    /// Mean of a flow's timeseries bandwidth over rows with `from <= t <= to`.
    pub fn mean_bandwidth_gbps(&self, flow_id: &str, from: SimTime, to: SimTime) -> Option<f64> {
        let col = self.timeseries.flow_ids.iter().position(|f| f == flow_id)?;
        let (lo, hi) = (from.as_micros_f64(), to.as_micros_f64());
        let vals: Vec<f64> = self
            .timeseries
            .rows
            .iter()
            .filter(|r| r.time_us >= lo && r.time_us <= hi)
            .map(|r| r.bandwidth_gbps[col])
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn write_metrics_csv<W: std::io::Write>(&self, out: W) -> Result<(), crate::metrics::MetricsError> {
        crate::metrics::write_metrics(out, &self.records)
    }

    pub fn write_timeseries_csv<W: std::io::Write>(&self, out: W) -> Result<(), crate::metrics::MetricsError> {
        self.timeseries.write_csv(out)
    }
}

pub struct World {
    cfg: ScenarioConfig,
    model: RnicModel,
    q: EventQueue<Ev>,
    hosts: Vec<HostRt>,
    flows: Vec<FlowRt>,
    msgs: Slab<MsgRt>,
    wqes: Slab<WqeRt>,
    dict: ChunkDict,
    end: SimTime,
    warm: SimTime,
    ref_period: SimTime,
    prop: SimTime,
    token_ops: u64,
    rng: SimRng,
    timeseries: Timeseries,
    last_sample: SimTime,
    mode_changes: Vec<ModeEvent>,
    warnings: Vec<String>,
}

fn gbps_to_bytes(g: f64) -> u64 {
    (g * 1e9 / 8.0).round() as u64
}

impl World {
    pub fn new(cfg: &ScenarioConfig) -> Result<World, ConfigError> {
        cfg.validate()?;
        let cfg = cfg.clone();
        let line_rate = gbps_to_bytes(cfg.rnic.line_rate_gbps);
        let max_tput = (cfg.rnic.max_tput_mops * 1e6).round() as u64;
        let model = RnicModel::new(line_rate, max_tput)
            .map_err(|e| ConfigError::Invalid {
                field: "rnic".into(),
                reason: e.to_string(),
            })?
            .with_propagation_delay(SimTime::from_micros_f64(cfg.rnic.propagation_delay_us))
            .with_notify_delay(SimTime::from_micros_f64(cfg.rnic.completion_notify_delay_us));
        let d = &cfg.daemon;
        let ref_period = SimTime::from_micros_f64(d.ref_period_us);
        let params = DaemonParams {
            target99: SimTime::from_micros_f64(d.target99_us),
            ref_period,
            ref_count: d.ref_count,
            token_bytes: d.token_bytes,
            aimd_step: gbps_to_bytes(d.aimd_step_gbps),
            delta: SimTime::from_micros_f64(d.delta_s * 1e6),
            fallback_enabled: d.fallback_enabled,
        };
        let rng = SimRng::new(cfg.sim.seed);
        let fixed_alpha = d.alpha.fixed_ratio().unwrap_or(Ratio::from_integer(0));
        let mut hosts: Vec<HostRt> = cfg
            .hosts
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let mut egress = Pipeline::new(model);
                let probe_qp = egress.register_qp();
                let mut ingress = Pipeline::new(model);
                let ingress_qp = ingress.register_qp();
                let daemon = cfg.justitia_enabled.then(|| {
                    let mut drng = rng.fork(10_000 + i as u64);
                    HostDaemon::new(params, line_rate, max_tput, &mut drng)
                });
                let tuning = (cfg.justitia_enabled && d.alpha.is_auto()).then(|| {
                    let mut trng = rng.fork(20_000 + i as u64);
                    // nothing to tune until a latency flow registers
                    let mut tuner = AlphaTuner::new();
                    tuner.disable();
                    Tuning {
                        tuner,
                        est: TailEstimator::new(
                            TailEstimatorConfig {
                                ref_count: d.ref_count,
                                ..TailEstimatorConfig::default()
                            },
                            &mut trng,
                        )
                        .expect("validated window"),
                        step: None,
                    }
                });
                HostRt {
                    name: name.clone(),
                    egress,
                    ingress,
                    ingress_qp,
                    probe_qp,
                    probe_peer: None,
                    daemon,
                    local_consumers: Vec::new(),
                    tick: None,
                    last_tick: None,
                    probe_running: false,
                    broadcast_pending: false,
                    alpha: fixed_alpha,
                    tuning,
                    exact_window: VecDeque::new(),
                    sketch_checks: 0,
                    sketch_agree: 0,
                    first_violation: None,
                }
            })
            .collect();

        let end = SimTime::from_micros_f64(cfg.sim.duration_us);
        let mut flows = Vec::new();
        for fc in &cfg.flows {
            let host = cfg.host_index(&fc.host).expect("validated");
            let peer = cfg.host_index(&fc.peer).expect("validated");
            if hosts[host].probe_peer.is_none() {
                hosts[host].probe_peer = Some(peer);
            }
            let (src, dst) = match fc.direction {
                Verb::Write => (host, peer),
                Verb::Read => (peer, host),
            };
            for k in 0..fc.qp_count {
                let label = if fc.qp_count > 1 {
                    format!("{}.{}", fc.label(), k)
                } else {
                    fc.label()
                };
                let app_qp = hosts[src].egress.register_qp();
                let split_qp = hosts[src].egress.register_qp();
                let idx = flows.len();
                let window = if fc.flow_type == FlowType::Latency { 1 } else { fc.batch_size };
                flows.push(FlowRt {
                    label,
                    app: fc.app_id.clone(),
                    ftype: fc.flow_type,
                    verb: fc.direction,
                    initiator: host,
                    src,
                    dst,
                    msg_bytes: fc.msg_bytes,
                    window,
                    polling: fc.polling_mode,
                    think_ns: SimTime::from_micros_f64(fc.think_us).as_nanos(),
                    start: SimTime::from_micros_f64(fc.start_us),
                    stop: fc.stop_us.map(SimTime::from_micros_f64).unwrap_or(end).min(end),
                    weight: Ratio::new((fc.weight * 1000.0).round().max(1.0) as u64, 1000),
                    app_qp,
                    split_qp,
                    active: false,
                    pacer: None,
                    governor: Governor::Unpaced,
                    pacer_wake: None,
                    remote_clock: None,
                    rng: rng.fork(idx as u64 + 1),
                    latencies: Vec::new(),
                    bytes_window: 0,
                    msgs_window: 0,
                    bytes_interval: 0,
                });
            }
        }
        let n = hosts.len();
        for (i, h) in hosts.iter_mut().enumerate() {
            if h.probe_peer.is_none() {
                h.probe_peer = (0..n).find(|&j| j != i);
            }
        }

        let dict = ChunkDict::with_default_profile(ChunkDictEntry {
            chunk_with_latency_flows: d.chunk_bytes_with_latency,
            chunk_without: d.chunk_bytes_without,
        });
        let warm = SimTime((end.as_nanos() as f64 * cfg.sim.warmup_fraction) as u64);
        let timeseries = Timeseries {
            flow_ids: flows.iter().map(|f| f.label.clone()).collect(),
            rows: Vec::new(),
        };
        Ok(World {
            token_ops: compute_token_ops(d.token_bytes, line_rate, max_tput),
            prop: model.propagation_delay,
            model,
            q: EventQueue::new(),
            hosts,
            flows,
            msgs: Slab::new(),
            wqes: Slab::new(),
            dict,
            end,
            warm,
            ref_period,
            rng,
            timeseries,
            last_sample: SimTime::ZERO,
            mode_changes: Vec::new(),
            warnings: Vec::new(),
            cfg,
        })
    }

    pub fn enable_trace(&mut self) {
        self.q.enable_trace();
    }

    fn now(&self) -> SimTime {
        self.q.now()
    }

    fn at(&mut self, t: SimTime, ev: Ev) -> EventHandle {
        self.q.schedule(t, ev).expect("events are never scheduled in the past")
    }

    pub fn run(mut self) -> RunOutput {
        for f in 0..self.flows.len() {
            let (start, stop) = (self.flows[f].start, self.flows[f].stop);
            if start < self.end {
                self.at(start, Ev::FlowStart(f));
                if stop < self.end {
                    self.at(stop, Ev::FlowStop(f));
                }
            }
        }
        if self.cfg.justitia_enabled {
            for h in 0..self.hosts.len() {
                self.at(self.ref_period, Ev::AimdUpdate(h));
                self.at(self.ref_period, Ev::FallbackCheck(h));
            }
        }
        self.at(self.ref_period, Ev::Sample);
        while let Some((_, ev)) = self.q.pop_until(self.end) {
            self.dispatch(ev);
        }
        self.q.finish_at(self.end);
        self.finish()
    }

    fn dispatch(&mut self, ev: Ev) {
        match ev {
            Ev::FlowStart(f) => self.flow_start(f),
            Ev::FlowStop(f) => self.flow_stop(f),
            Ev::AppPost(f) => {
                if self.flows[f].active {
                    self.post_new_message(f);
                }
            }
            Ev::PacerPost(f) => {
                self.flows[f].pacer_wake = None;
                self.run_pacer(f);
            }
            Ev::TokenTick(h) => self.token_tick(h),
            Ev::RemoteClock(f) => {
                self.flows[f].remote_clock = None;
                self.remote_tick(f);
            }
            Ev::ReadArrive(w) => {
                let (src, qp) = (self.wqes[w].src, self.wqes[w].qp);
                self.egress_post(src, qp, w);
            }
            Ev::EgressDone(h) => self.egress_done(h),
            Ev::IngressArrive(w) => self.ingress_arrive(w),
            Ev::IngressDone(h) => self.ingress_done(h),
            Ev::Complete(w) => self.complete(w),
            Ev::Broadcast(h) => self.broadcast(h),
            Ev::ControlArrive(f, msg) => self.control_arrive(f, msg),
            Ev::RefProbe(h) => self.ref_probe(h),
            Ev::AimdUpdate(h) => self.aimd_update(h),
            Ev::FallbackCheck(h) => self.fallback_check(h),
            Ev::AlphaStep(h) => self.alpha_step(h),
            Ev::Sample => self.sample(),
        }
    }

    // ---- flows -------------------------------------------------------------

    fn flow_start(&mut self, f: usize) {
        self.flows[f].active = true;
        if self.cfg.justitia_enabled {
            self.register(f);
        }
        for _ in 0..self.flows[f].window {
            self.post_new_message(f);
        }
    }

    fn register(&mut self, f: usize) {
        let fl = &self.flows[f];
        let (ftype, verb, initiator, src, dst) = (fl.ftype, fl.verb, fl.initiator, fl.src, fl.dst);
        let hungry = ftype.is_resource_hungry();
        let coord = self.cfg.daemon.receiver_coordination;
        let reg = FlowRegistration::new(f, fl.app.clone(), Some(ftype)).with_weight(fl.weight);
        let (owner, direction, consumer, governor) = match verb {
            Verb::Write => {
                let gov = match (hungry, coord) {
                    (false, _) => Governor::Unpaced,
                    (true, true) => Governor::Remote(dst),
                    (true, false) => Governor::Local,
                };
                (initiator, Direction::LocalSend, hungry && !coord, gov)
            }
            Verb::Read => {
                let gov = if hungry { Governor::Remote(src) } else { Governor::Unpaced };
                (src, Direction::RemoteRead, false, gov)
            }
        };
        let daemon = self.hosts[owner].daemon.as_mut().expect("daemon present");
        let out = daemon
            .register_flow(reg.with_direction(direction), consumer)
            .expect("flow ids are unique");
        if out.admission == crate::daemon::Admission::WarnLatencyTarget {
            self.warnings.push(self.flows[f].label.clone());
        }
        if verb == Verb::Read {
            self.request_broadcast(src);
        }
        if verb == Verb::Write && coord {
            let rd = self.hosts[dst].daemon.as_mut().expect("daemon present");
            rd.receiver_view.add(f, ftype, hungry);
            self.request_broadcast(dst);
        }
        self.flows[f].governor = governor;
        if hungry {
            let kind = match ftype {
                FlowType::Throughput => PacerKind::Throughput,
                _ => PacerKind::Bandwidth,
            };
            let mut pacer = PacerState::new(f, kind, self.cfg.daemon.chunk_bytes_without, 0);
            pacer.alpha = self.hosts[initiator].alpha;
            self.flows[f].pacer = Some(pacer);
        }
        if consumer {
            self.hosts[owner].local_consumers.push(f);
        }
        self.counts_changed(owner);
    }

    fn deregister(&mut self, f: usize) {
        let fl = &self.flows[f];
        let (verb, initiator, src, dst, ftype) = (fl.verb, fl.initiator, fl.src, fl.dst, fl.ftype);
        let owner = if verb == Verb::Read { src } else { initiator };
        let daemon = self.hosts[owner].daemon.as_mut().expect("daemon present");
        daemon.deregister_flow(f).expect("registered at start");
        self.hosts[owner].local_consumers.retain(|&x| x != f);
        if verb == Verb::Read {
            self.request_broadcast(src);
        }
        if verb == Verb::Write && self.cfg.daemon.receiver_coordination {
            let rd = self.hosts[dst].daemon.as_mut().expect("daemon present");
            rd.receiver_view.remove(f, ftype);
            self.request_broadcast(dst);
        }
        self.counts_changed(owner);
    }

    fn flow_stop(&mut self, f: usize) {
        self.flows[f].active = false;
        if let Some(p) = self.flows[f].pacer.as_mut() {
            p.clear_pending();
            p.expire();
        }
        if let Some((_, h)) = self.flows[f].pacer_wake.take() {
            self.q.cancel(h);
        }
        if let Some(h) = self.flows[f].remote_clock.take() {
            self.q.cancel(h);
        }
        if self.cfg.justitia_enabled {
            self.deregister(f);
        }
    }

    fn post_new_message(&mut self, f: usize) {
        let now = self.now();
        let size = self.flows[f].msg_bytes;
        let m = self.msgs.insert(MsgRt {
            flow: f,
            posted_at: now,
            asm: MessageAssembly::new(size),
            held: None,
        });
        if let Some(p) = self.flows[f].pacer.as_mut() {
            p.enqueue(m as u64, size);
            self.run_pacer(f);
        } else {
            self.post_chunk(
                f,
                ChunkOut {
                    message_id: m as u64,
                    size,
                    is_last_chunk: true,
                    queue: ChunkQueue::App,
                },
            );
        }
    }

    fn message_done(&mut self, f: usize, posted_at: SimTime) {
        let now = self.now();
        let (lo, hi) = self.flows[f].measure_window(self.warm, self.end);
        let fl = &mut self.flows[f];
        if now >= lo && now <= hi {
            fl.latencies.push((now - posted_at).as_nanos());
            fl.msgs_window += 1;
        }
        if !fl.active {
            return;
        }
        if fl.ftype == FlowType::Latency {
            let think = fl.rng.below(2 * fl.think_ns + 1);
            self.at(now + SimTime(think), Ev::AppPost(f));
        } else {
            self.post_new_message(f);
        }
    }

    // ---- shapers -----------------------------------------------------------

    fn run_pacer(&mut self, f: usize) {
        let now = self.now();
        loop {
            let Some(p) = self.flows[f].pacer.as_mut() else { return };
            match p.next_post(now) {
                PostDecision::Post(c) => self.post_chunk(f, c),
                PostDecision::WaitUntil(t) => {
                    match self.flows[f].pacer_wake {
                        Some((t0, _)) if t0 <= t => {}
                        other => {
                            if let Some((_, h)) = other {
                                self.q.cancel(h);
                            }
                            let h = self.at(t, Ev::PacerPost(f));
                            self.flows[f].pacer_wake = Some((t, h));
                        }
                    }
                    return;
                }
                PostDecision::Starved | PostDecision::Idle => return,
            }
        }
    }

    fn token_tick(&mut self, h: usize) {
        let now = self.now();
        self.hosts[h].tick = None;
        self.hosts[h].last_tick = Some(now);
        let consumers = self.hosts[h].local_consumers.clone();
        for &f in &consumers {
            if let Some(p) = self.flows[f].pacer.as_mut() {
                p.expire();
            }
        }
        let flows = &self.flows;
        let daemon = self.hosts[h].daemon.as_mut().expect("daemon present");
        let token = daemon.distribute_token(now, |f| {
            flows[f].active && flows[f].pacer.as_ref().is_some_and(PacerState::has_pending)
        });
        if let Some(tok) = token {
            let f = tok.issued_to;
            self.flows[f].pacer.as_mut().expect("consumer has a pacer").grant(&tok);
            self.run_pacer(f);
        }
        self.reschedule_tick(h);
    }

    /// Aggregate rate for this host's own token consumers.
    fn local_rate(&self, h: usize) -> u64 {
        let st = &self.hosts[h].daemon.as_ref().expect("daemon present").state;
        let local = st.counts.hungry() as u128;
        let all = st.remote_counts.hungry() as u128;
        if all > local && local > 0 {
            (st.safe_util as u128 * local / all) as u64
        } else {
            st.safe_util
        }
        .max(1)
    }

    fn reschedule_tick(&mut self, h: usize) {
        let now = self.now();
        if self.hosts[h].local_consumers.is_empty() {
            if let Some((_, ev)) = self.hosts[h].tick.take() {
                self.q.cancel(ev);
            }
            return;
        }
        let token_bytes = self.cfg.daemon.token_bytes;
        let tau = crate::daemon::recompute_tau(token_bytes, self.local_rate(h));
        let next = match self.hosts[h].last_tick {
            Some(t) => now.max(t + tau),
            None => now,
        };
        if let Some((t0, ev)) = self.hosts[h].tick {
            if t0 == next {
                return;
            }
            self.q.cancel(ev);
        }
        let ev = self.at(next, Ev::TokenTick(h));
        self.hosts[h].tick = Some((next, ev));
    }

    fn remote_tick(&mut self, f: usize) {
        let now = self.now();
        if !self.flows[f].active {
            return;
        }
        let Some(p) = self.flows[f].pacer.as_mut() else { return };
        if p.rate_share == 0 {
            return;
        }
        let token_bytes = self.cfg.daemon.token_bytes;
        let period = SimTime(((token_bytes as u128 * 1_000_000_000) / p.rate_share as u128).max(1) as u64);
        p.grant(&Token {
            bytes_remaining: token_bytes,
            ops_remaining: self.token_ops,
            issued_to: f,
            issued_at: now,
        });
        self.run_pacer(f);
        let ev = self.at(now + period, Ev::RemoteClock(f));
        self.flows[f].remote_clock = Some(ev);
    }

    fn request_broadcast(&mut self, h: usize) {
        if !self.hosts[h].broadcast_pending {
            self.hosts[h].broadcast_pending = true;
            let now = self.now();
            self.at(now, Ev::Broadcast(h));
        }
    }

    fn broadcast(&mut self, h: usize) {
        let now = self.now();
        self.hosts[h].broadcast_pending = false;
        let daemon = self.hosts[h].daemon.as_mut().expect("daemon present");
        let mut msgs = daemon.read_view.broadcast_remote_share(h, now);
        msgs.extend(daemon.receiver_view.broadcast_remote_share(h, now));
        let stagger = self.model.service_time(self.cfg.daemon.chunk_bytes_with_latency);
        for (k, (f, msg)) in msgs.into_iter().enumerate() {
            let offset = if msg.latency > 0 { SimTime(stagger.as_nanos() * k as u64) } else { SimTime::ZERO };
            self.at(now + self.prop + offset, Ev::ControlArrive(f, msg));
        }
    }

    fn control_arrive(&mut self, f: usize, msg: ControlMessage) {
        if !self.flows[f].active {
            return;
        }
        let line_rate = self.model.line_rate;
        let chunk = select_chunk_size(&self.dict, "default", msg.latency > 0);
        let Some(p) = self.flows[f].pacer.as_mut() else { return };
        if !enforce_remote_share(p, &msg, line_rate) {
            return;
        }
        p.replan(chunk);
        if let Some(ev) = self.flows[f].remote_clock.take() {
            self.q.cancel(ev);
        }
        self.remote_tick(f);
    }

    // ---- RNIC --------------------------------------------------------------

    fn post_chunk(&mut self, f: usize, c: ChunkOut) {
        let now = self.now();
        let fl = &self.flows[f];
        let qp = match c.queue {
            ChunkQueue::App => fl.app_qp,
            ChunkQueue::Split => fl.split_qp,
        };
        let m = c.message_id as usize;
        let w = self.wqes.insert(WqeRt {
            flow: Some(f),
            msg: m,
            size: c.size,
            is_last: c.is_last_chunk,
            src: fl.src,
            dst: fl.dst,
            qp,
            read: fl.verb == Verb::Read,
            posted_at: now,
            egress_end: SimTime::ZERO,
        });
        if c.is_last_chunk && !self.msgs[m].asm.last_chunk_ready() {
            self.msgs[m].held = Some(w);
            return;
        }
        self.submit(w);
    }

    fn submit(&mut self, w: usize) {
        let wq = self.wqes[w];
        if wq.flow.is_some() {
            self.msgs[wq.msg].asm.on_posted(wq.size, wq.is_last);
        }
        if wq.read {
            let t = self.now() + self.prop;
            self.at(t, Ev::ReadArrive(w));
        } else {
            self.egress_post(wq.src, wq.qp, w);
        }
    }

    fn egress_post(&mut self, h: usize, qp: QpSlot, w: usize) {
        let now = self.now();
        let size = self.wqes[w].size;
        let started = self.hosts[h].egress.post(qp, w, size, now).expect("registered qp");
        if let Some(st) = started {
            self.egress_started(h, st);
        }
    }

    fn egress_started(&mut self, h: usize, st: Started<usize>) {
        self.wqes[st.item].egress_end = st.end;
        self.at(st.end, Ev::EgressDone(h));
        self.at(st.start + self.prop, Ev::IngressArrive(st.item));
    }

    fn egress_done(&mut self, h: usize) {
        let now = self.now();
        let (done, next) = self.hosts[h].egress.complete(now);
        if let Some(st) = next {
            self.egress_started(h, st);
        }
        let wq = self.wqes[done.item];
        if wq.flow.is_none() {
            return;
        }
        let msg = &mut self.msgs[wq.msg];
        msg.asm.on_serviced(wq.size);
        if msg.asm.last_chunk_ready() {
            if let Some(held) = msg.held.take() {
                self.submit(held);
            }
        }
    }

    fn ingress_arrive(&mut self, w: usize) {
        let now = self.now();
        let wq = self.wqes[w];
        let host = &mut self.hosts[wq.dst];
        let started = host
            .ingress
            .post_not_before(host.ingress_qp, w, wq.size, now, wq.egress_end + self.prop)
            .expect("registered qp");
        if let Some(st) = started {
            self.at(st.end, Ev::IngressDone(wq.dst));
        }
    }

    fn ingress_done(&mut self, h: usize) {
        let now = self.now();
        let (done, next) = self.hosts[h].ingress.complete(now);
        if let Some(st) = next {
            self.at(st.end, Ev::IngressDone(h));
        }
        let w = done.item;
        let wq = self.wqes[w];
        let ack = if wq.read { SimTime::ZERO } else { self.prop };
        let Some(f) = wq.flow else {
            self.at(now + ack, Ev::Complete(w));
            return;
        };
        let (lo, hi) = self.flows[f].measure_window(self.warm, self.end);
        let fl = &mut self.flows[f];
        fl.bytes_interval += wq.size;
        if now >= lo && now <= hi {
            fl.bytes_window += wq.size;
        }
        let polling = fl.polling;
        if self.msgs[wq.msg].asm.on_completed(wq.size, wq.is_last) {
            let notify = self.model.notify_delay(polling);
            self.at(now + ack + notify, Ev::Complete(w));
        } else {
            self.wqes.remove(w);
        }
    }

    fn complete(&mut self, w: usize) {
        let now = self.now();
        let wq = self.wqes.remove(w);
        match wq.flow {
            None => self.probe_done(wq.src, LatencySample {
                value: now - wq.posted_at,
                recorded_at: now,
            }),
            Some(f) => {
                let m = self.msgs.remove(wq.msg);
                debug_assert_eq!(m.flow, f);
                debug_assert_eq!(m.asm.completions, 1);
                self.message_done(f, m.posted_at);
            }
        }
    }

    // ---- daemon ------------------------------------------------------------

    fn counts_changed(&mut self, h: usize) {
        self.refresh_host(h);
        self.start_probe(h);
        let latency = self.hosts[h]
            .daemon
            .as_ref()
            .is_some_and(|d| d.state.control_counts().latency > 0);
        let now = self.now();
        let hold = SimTime(self.ref_period.as_nanos() * ALPHA_HOLD_PERIODS);
        let Some(t) = self.hosts[h].tuning.as_mut() else { return };
        if let Some(ev) = t.step.take() {
            self.q.cancel(ev);
        }
        t.est.clear();
        if latency {
            t.tuner.restart();
            let ev = self.q.schedule(now + hold, Ev::AlphaStep(h)).expect("future");
            self.hosts[h].tuning.as_mut().unwrap().step = Some(ev);
        } else {
            t.tuner.disable();
        }
        let a = self.hosts[h].tuning.as_ref().unwrap().tuner.alpha;
        self.set_alpha(h, a);
    }

    fn set_alpha(&mut self, h: usize, alpha: Ratio<u64>) {
        self.hosts[h].alpha = alpha;
        for fl in self.flows.iter_mut().filter(|fl| fl.initiator == h) {
            if let Some(p) = fl.pacer.as_mut() {
                p.alpha = alpha;
            }
        }
    }

    /// Push chunk size, rate and token period to this host's consumers.
    fn refresh_host(&mut self, h: usize) {
        let Some(d) = self.hosts[h].daemon.as_ref() else { return };
        let chunk = select_chunk_size(&self.dict, "default", d.latency_present());
        let rate = self.local_rate(h);
        for &f in &self.hosts[h].local_consumers {
            if let Some(p) = self.flows[f].pacer.as_mut() {
                p.replan(chunk);
                p.rate_share = rate;
            }
        }
        self.reschedule_tick(h);
    }

    fn start_probe(&mut self, h: usize) {
        let probing = self.hosts[h].daemon.as_ref().is_some_and(|d| d.probing());
        if probing && !self.hosts[h].probe_running && self.hosts[h].probe_peer.is_some() {
            self.hosts[h].probe_running = true;
            let now = self.now();
            self.at(now, Ev::RefProbe(h));
        }
    }

    fn ref_probe(&mut self, h: usize) {
        let now = self.now();
        let probing = self.hosts[h].daemon.as_ref().is_some_and(|d| d.probing());
        if !probing {
            self.hosts[h].probe_running = false;
            return;
        }
        let peer = self.hosts[h].probe_peer.expect("checked at start");
        let qp = self.hosts[h].probe_qp;
        let w = self.wqes.insert(WqeRt {
            flow: None,
            msg: 0,
            size: PROBE_BYTES,
            is_last: true,
            src: h,
            dst: peer,
            qp,
            read: false,
            posted_at: now,
            egress_end: SimTime::ZERO,
        });
        self.egress_post(h, qp, w);
        let jitter = self.rng.below(self.ref_period.as_nanos() / 100 + 1);
        self.at(now + self.ref_period + SimTime(jitter), Ev::RefProbe(h));
    }

    fn probe_done(&mut self, h: usize, sample: LatencySample) {
        let host = &mut self.hosts[h];
        let Some(d) = host.daemon.as_mut() else { return };
        d.record_probe(sample);
        host.exact_window.push_back(sample.value.as_nanos());
        let cap = d.estimator().config().ref_count;
        while host.exact_window.len() > cap {
            host.exact_window.pop_front();
        }
        if let Some(t) = host.tuning.as_mut() {
            t.est.record(sample);
        }
    }

    fn aimd_update(&mut self, h: usize) {
        let now = self.now();
        self.at(now + self.ref_period, Ev::AimdUpdate(h));
        let host = &mut self.hosts[h];
        let d = host.daemon.as_mut().expect("daemon present");
        d.aimd_update();
        if d.state.current99.is_some_and(|c| c > d.state.target99) && host.first_violation.is_none() {
            host.first_violation = Some(now);
        }
        let est = d.estimator();
        if let Some(p99) = est.current_p99() {
            let n = est.total_in_window();
            let mut recent: Vec<u64> = host.exact_window.iter().rev().take(n).copied().collect();
            recent.sort_unstable();
            if let Some(exact) = sorted_percentile(&recent, 0.99) {
                let (a, b) = (p99.as_nanos() as f64, exact as f64);
                host.sketch_checks += 1;
                if a <= b * 1.1 + 1.0 && b <= a * 1.1 + 1.0 {
                    host.sketch_agree += 1;
                }
            }
        }
        self.refresh_host(h);
    }

    fn fallback_check(&mut self, h: usize) {
        let now = self.now();
        self.at(now + self.ref_period, Ev::FallbackCheck(h));
        let d = self.hosts[h].daemon.as_mut().expect("daemon present");
        if let Some(change) = d.fallback_check(now) {
            let mode = match change {
                ModeChange::EnteredUtilization => Mode::Utilization,
                ModeChange::ReturnedToNormal => Mode::Normal,
            };
            self.mode_changes.push(ModeEvent {
                time: now,
                host: self.hosts[h].name.clone(),
                mode,
            });
            self.refresh_host(h);
        }
    }

    fn alpha_step(&mut self, h: usize) {
        let now = self.now();
        let hold = SimTime(self.ref_period.as_nanos() * ALPHA_HOLD_PERIODS);
        let t = self.hosts[h].tuning.as_mut().expect("tuning enabled");
        t.step = None;
        let a = t.tuner.observe(t.est.current_p99());
        t.est.clear();
        if !t.tuner.frozen {
            let ev = self.q.schedule(now + hold, Ev::AlphaStep(h)).expect("future");
            self.hosts[h].tuning.as_mut().unwrap().step = Some(ev);
        }
        self.set_alpha(h, a);
    }

    fn sample(&mut self) {
        let now = self.now();
        self.at(now + self.ref_period, Ev::Sample);
        let interval = (now - self.last_sample).as_nanos().max(1) as f64;
        self.last_sample = now;
        let mon = self.cfg.monitor_index();
        let (safe, cur, mode) = match self.hosts[mon].daemon.as_ref() {
            Some(d) => (
                d.state.safe_util,
                d.state.current99.map(|c| c.as_micros_f64()),
                d.state.mode.as_str().to_string(),
            ),
            None => (self.model.line_rate, None, "off".to_string()),
        };
        let bandwidth_gbps = self
            .flows
            .iter_mut()
            .map(|f| {
                let g = f.bytes_interval as f64 * 8.0 / interval;
                f.bytes_interval = 0;
                g
            })
            .collect();
        self.timeseries.rows.push(TimeseriesRow {
            time_us: now.as_micros_f64(),
            safe_util_gbps: safe as f64 * 8.0 / 1e9,
            current99_us: cur,
            mode,
            bandwidth_gbps,
        });
    }

    fn finish(self) -> RunOutput {
        let mut records = Vec::with_capacity(self.flows.len());
        for f in &self.flows {
            let (lo, hi) = f.measure_window(self.warm, self.end);
            let span = hi.saturating_sub(lo).as_nanos().max(1) as f64;
            let mut lat = f.latencies.clone();
            lat.sort_unstable();
            let us = |v: u64| v as f64 / 1e3;
            let cpu = match f.pacer.as_ref() {
                Some(p) if f.ftype == FlowType::Bandwidth => {
                    *p.alpha.numer() as f64 / *p.alpha.denom() as f64
                }
                _ => 0.0,
            };
            records.push(MetricsRecord {
                flow_id: f.label.clone(),
                app_id: f.app.clone(),
                flow_type: f.ftype.as_str().to_string(),
                achieved_bandwidth_gbps: f.bytes_window as f64 * 8.0 / span,
                message_rate_mops: f.msgs_window as f64 * 1e3 / span,
                latency_p50_us: sorted_percentile(&lat, 0.5).map(us),
                latency_p99_us: sorted_percentile(&lat, 0.99).map(us),
                sample_count: lat.len() as u64,
                cpu_te_fraction: cpu,
            });
        }
        let ratio_f64 = |r: Ratio<u64>| *r.numer() as f64 / *r.denom() as f64;
        RunOutput {
            records,
            timeseries: self.timeseries,
            mode_changes: self.mode_changes,
            admission_warnings: self.warnings,
            sketch_checks: self
                .hosts
                .iter()
                .map(|h| (h.name.clone(), h.sketch_checks, h.sketch_agree))
                .collect(),
            first_violation: self.hosts.iter().map(|h| (h.name.clone(), h.first_violation)).collect(),
            final_alpha: self.hosts.iter().map(|h| (h.name.clone(), ratio_f64(h.alpha))).collect(),
            alpha_tuning: self
                .hosts
                .iter()
                .filter_map(|h| {
                    let t = h.tuning.as_ref()?;
                    Some(AlphaTrace {
                        host: h.name.clone(),
                        frozen: t.tuner.frozen,
                        steps: t
                            .tuner
                            .history
                            .iter()
                            .map(|(a, p)| (ratio_f64(*a), p.map(|v| v.as_micros_f64())))
                            .collect(),
                    })
                })
                .collect(),
            events_dispatched: self.q.dispatched(),
            trace: self.q.trace().map(<[_]>::to_vec),
        }
    }
}

/// Validate, build and run a scenario.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunOutput, ConfigError> {
    Ok(World::new(cfg)?.run())
}
