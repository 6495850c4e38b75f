//! Declarative experiment configuration and the built-in catalog.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::daemon::FlowType;
use crate::rnic::PollingMode;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error("unknown scenario `{name}`; valid names: {valid}")]
    UnknownScenario { name: String, valid: String },
    #[error("cannot parse config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ConfigError {
    fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        ConfigError::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Name of the offending field for validation errors.
    pub fn field(&self) -> Option<&str> {
        match self {
            ConfigError::Invalid { field, .. } => Some(field),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RnicConfig {
    pub line_rate_gbps: f64,
    pub max_tput_mops: f64,
    pub propagation_delay_us: f64,
    pub completion_notify_delay_us: f64,
}

impl Default for RnicConfig {
    fn default() -> Self {
        RnicConfig {
            line_rate_gbps: 48.0,
            max_tput_mops: 30.0,
            propagation_delay_us: 0.0,
            completion_notify_delay_us: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoKeyword {
    Auto,
}

/// Spacing fraction: a number in [0, 1] or `"auto"`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AlphaSetting {
    Fixed(f64),
    Tuned(AutoKeyword),
}

impl AlphaSetting {
    pub fn is_auto(&self) -> bool {
        matches!(self, AlphaSetting::Tuned(_))
    }

    /// Fixed value in thousandths.
    pub fn fixed_ratio(&self) -> Option<Ratio<u64>> {
        match *self {
            AlphaSetting::Fixed(a) => Some(Ratio::new((a * 1000.0).round() as u64, 1000)),
            AlphaSetting::Tuned(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DaemonConfig {
    pub target99_us: f64,
    pub ref_period_us: f64,
    pub ref_count: usize,
    pub token_bytes: u64,
    pub chunk_bytes_with_latency: u64,
    pub chunk_bytes_without: u64,
    pub aimd_step_gbps: f64,
    pub delta_s: f64,
    pub fallback_enabled: bool,
    pub alpha: AlphaSetting,
    /// Receivers broadcast their ingress share to incoming WRITE senders.
    pub receiver_coordination: bool,
}

impl Default for DaemonConfig {
    fn default() -> Self {
        DaemonConfig {
            target99_us: 2.0,
            ref_period_us: 500.0,
            ref_count: 10_000,
            token_bytes: 1_000_000,
            chunk_bytes_with_latency: 5_000,
            chunk_bytes_without: 1_000_000,
            aimd_step_gbps: 1.0,
            delta_s: 5.0,
            fallback_enabled: false,
            alpha: AlphaSetting::Fixed(1.0),
            receiver_coordination: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verb {
    #[default]
    Write,
    Read,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    /// Label used in outputs; defaults to the app id.
    pub id: Option<String>,
    pub app_id: String,
    /// Initiating host.
    pub host: String,
    pub peer: String,
    pub flow_type: FlowType,
    pub msg_bytes: u64,
    /// Messages kept outstanding (latency flows always keep one).
    pub batch_size: u32,
    pub qp_count: u32,
    pub direction: Verb,
    pub start_us: f64,
    /// `None` runs to the end.
    pub stop_us: Option<f64>,
    pub weight: f64,
    pub polling_mode: PollingMode,
    /// Mean think time between latency-flow messages.
    pub think_us: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            id: None,
            app_id: String::new(),
            host: String::new(),
            peer: String::new(),
            flow_type: FlowType::Bandwidth,
            msg_bytes: 1_000_000,
            batch_size: 2,
            qp_count: 1,
            direction: Verb::Write,
            start_us: 0.0,
            stop_us: None,
            weight: 1.0,
            polling_mode: PollingMode::Busy,
            think_us: 1.0,
        }
    }
}

impl FlowConfig {
    pub fn label(&self) -> String {
        self.id.clone().unwrap_or_else(|| self.app_id.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub duration_us: f64,
    pub seed: u64,
    pub warmup_fraction: f64,
    /// Host whose daemon the timeseries follows; defaults to the first.
    pub monitor_host: Option<String>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            duration_us: 100_000.0,
            seed: 1,
            warmup_fraction: 0.1,
            monitor_host: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub description: String,
    pub rnic: RnicConfig,
    pub daemon: DaemonConfig,
    pub hosts: Vec<String>,
    pub flows: Vec<FlowConfig>,
    pub sim: SimConfig,
    pub justitia_enabled: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            name: "custom".into(),
            description: String::new(),
            rnic: RnicConfig::default(),
            daemon: DaemonConfig::default(),
            hosts: Vec::new(),
            flows: Vec::new(),
            sim: SimConfig::default(),
            justitia_enabled: true,
        }
    }
}

fn positive(field: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(ConfigError::invalid(field, format!("must be positive, got {v}")))
    }
}

fn non_negative(field: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(ConfigError::invalid(field, format!("must be non-negative, got {v}")))
    }
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn host_index(&self, name: &str) -> Option<usize> {
        self.hosts.iter().position(|h| h == name)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let r = &self.rnic;
        positive("rnic.line_rate_gbps", r.line_rate_gbps)?;
        positive("rnic.max_tput_mops", r.max_tput_mops)?;
        non_negative("rnic.propagation_delay_us", r.propagation_delay_us)?;
        non_negative("rnic.completion_notify_delay_us", r.completion_notify_delay_us)?;

        let d = &self.daemon;
        positive("daemon.target99_us", d.target99_us)?;
        positive("daemon.ref_period_us", d.ref_period_us)?;
        if d.ref_count < 10 {
            return Err(ConfigError::invalid("daemon.ref_count", "must be at least 10"));
        }
        if d.token_bytes == 0 {
            return Err(ConfigError::invalid("daemon.token_bytes", "must be positive"));
        }
        if d.chunk_bytes_with_latency == 0 {
            return Err(ConfigError::invalid("daemon.chunk_bytes_with_latency", "must be positive"));
        }
        if d.chunk_bytes_without < d.chunk_bytes_with_latency {
            return Err(ConfigError::invalid(
                "daemon.chunk_bytes_without",
                "must be at least chunk_bytes_with_latency",
            ));
        }
        if d.chunk_bytes_without > d.token_bytes {
            return Err(ConfigError::invalid(
                "daemon.chunk_bytes_without",
                "must not exceed token_bytes",
            ));
        }
        positive("daemon.aimd_step_gbps", d.aimd_step_gbps)?;
        positive("daemon.delta_s", d.delta_s)?;
        if let AlphaSetting::Fixed(a) = d.alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(ConfigError::invalid("daemon.alpha", format!("must be in [0, 1] or \"auto\", got {a}")));
            }
        }

        let s = &self.sim;
        positive("sim.duration_us", s.duration_us)?;
        if !(0.0..1.0).contains(&s.warmup_fraction) {
            return Err(ConfigError::invalid("sim.warmup_fraction", "must be in [0, 1)"));
        }
        if let Some(m) = &s.monitor_host {
            if self.host_index(m).is_none() {
                return Err(ConfigError::invalid("sim.monitor_host", format!("unknown host `{m}`")));
            }
        }

        if self.hosts.is_empty() {
            return Err(ConfigError::invalid("hosts", "at least one host is required"));
        }
        for (i, h) in self.hosts.iter().enumerate() {
            if self.hosts[..i].contains(h) {
                return Err(ConfigError::invalid(format!("hosts[{i}]"), format!("duplicate host `{h}`")));
            }
        }
        if self.flows.is_empty() {
            return Err(ConfigError::invalid("flows", "at least one flow is required"));
        }
        let mut labels: Vec<String> = Vec::new();
        for (i, f) in self.flows.iter().enumerate() {
            let field = |name: &str| format!("flows[{i}].{name}");
            if f.app_id.is_empty() {
                return Err(ConfigError::invalid(field("app_id"), "must not be empty"));
            }
            if self.host_index(&f.host).is_none() {
                return Err(ConfigError::invalid(field("host"), format!("unknown host `{}`", f.host)));
            }
            if self.host_index(&f.peer).is_none() {
                return Err(ConfigError::invalid(field("peer"), format!("unknown host `{}`", f.peer)));
            }
            if f.peer == f.host {
                return Err(ConfigError::invalid(field("peer"), "must differ from host"));
            }
            if f.msg_bytes == 0 {
                return Err(ConfigError::invalid(field("msg_bytes"), "must be positive"));
            }
            if f.batch_size == 0 {
                return Err(ConfigError::invalid(field("batch_size"), "must be positive"));
            }
            if f.qp_count == 0 {
                return Err(ConfigError::invalid(field("qp_count"), "must be positive"));
            }
            non_negative(&field("start_us"), f.start_us)?;
            if let Some(stop) = f.stop_us {
                if stop.partial_cmp(&f.start_us) != Some(std::cmp::Ordering::Greater) {
                    return Err(ConfigError::invalid(field("stop_us"), "must be greater than start_us"));
                }
            }
            positive(&field("weight"), f.weight)?;
            non_negative(&field("think_us"), f.think_us)?;
            let label = f.label();
            if labels.contains(&label) {
                return Err(ConfigError::invalid(field("id"), format!("duplicate flow label `{label}`")));
            }
            labels.push(label);
        }
        Ok(())
    }

    /// Index of the host the timeseries follows.
    pub fn monitor_index(&self) -> usize {
        self.sim
            .monitor_host
            .as_deref()
            .and_then(|m| self.host_index(m))
            .unwrap_or(0)
    }
}

/// Set a dotted-path field (`daemon.alpha`, `flows.0.msg_bytes`) on a JSON
/// document. `raw` is parsed as JSON, falling back to a plain string.
pub fn apply_override(doc: &mut Value, path: &str, raw: &str) -> Result<(), ConfigError> {
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (k, part) in parts.iter().enumerate() {
        let last = k + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| ConfigError::invalid(path, format!("`{part}` is not an index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| ConfigError::invalid(path, format!("index {idx} out of range ({len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(ConfigError::invalid(path, format!("`{part}` is not a container"))),
        };
    }
    Err(ConfigError::invalid(path, "empty path"))
}

/// Rebuild a config after applying `overrides`.
pub fn with_overrides(cfg: &ScenarioConfig, overrides: &[(String, String)]) -> Result<ScenarioConfig, ConfigError> {
    let mut doc = serde_json::to_value(cfg)?;
    for (path, raw) in overrides {
        apply_override(&mut doc, path, raw)?;
    }
    let out: ScenarioConfig = serde_json::from_value(doc)?;
    out.validate()?;
    Ok(out)
}

fn flow(app: &str, host: &str, peer: &str, t: FlowType, msg_bytes: u64) -> FlowConfig {
    FlowConfig {
        app_id: app.into(),
        host: host.into(),
        peer: peer.into(),
        flow_type: t,
        msg_bytes,
        batch_size: match t {
            FlowType::Latency => 1,
            FlowType::Throughput => 64,
            FlowType::Bandwidth => 2,
        },
        ..FlowConfig::default()
    }
}

fn lat(app: &str, host: &str, peer: &str) -> FlowConfig {
    flow(app, host, peer, FlowType::Latency, 16)
}

fn bw(app: &str, host: &str, peer: &str, bytes: u64) -> FlowConfig {
    flow(app, host, peer, FlowType::Bandwidth, bytes)
}

fn tput(app: &str, host: &str, peer: &str) -> FlowConfig {
    flow(app, host, peer, FlowType::Throughput, 16)
}

fn base(name: &str, description: &str, hosts: &[&str], duration_us: f64) -> ScenarioConfig {
    ScenarioConfig {
        name: name.into(),
        description: description.into(),
        rnic: RnicConfig {
            propagation_delay_us: 1.0,
            ..RnicConfig::default()
        },
        daemon: DaemonConfig {
            target99_us: 3.0,
            ..DaemonConfig::default()
        },
        hosts: hosts.iter().map(|h| h.to_string()).collect(),
        sim: SimConfig {
            duration_us,
            ..SimConfig::default()
        },
        ..ScenarioConfig::default()
    }
}

const MB: u64 = 1_000_000;
const GB: u64 = 1_000_000_000;

/// Names of the built-in scenarios with a one-line description each.
pub fn catalog() -> Vec<(&'static str, &'static str)> {
    vec![
        ("lat-vs-bw", "16 B latency flow beside one backlogged 1 MB bandwidth flow"),
        ("tput-vs-bw", "64x16 B throughput batches beside one 1 MB bandwidth flow"),
        ("multi-elephant", "one latency flow beside 16 backlogged 1 MB bandwidth flows"),
        ("bw-1MB-vs-1GB", "1 MB-message flow against 1 GB-message flow"),
        ("multi-qp", "application with 16 QPs against one with a single QP"),
        ("dynamic-8x8", "8 bandwidth flows arriving in pairs, then 8 short-lived latency flows"),
        ("fallback", "unattainable latency target; utilization mode and its exit"),
        ("remote-read", "remote latency READs beside local bandwidth WRITEs"),
        ("remote-read-mirror", "local latency WRITEs beside remote bandwidth READs"),
        ("incast", "8 bandwidth senders and one latency sender into one receiver"),
    ]
}

pub fn builtin_names() -> Vec<&'static str> {
    catalog().into_iter().map(|(n, _)| n).collect()
}

fn describe(name: &str) -> &'static str {
    catalog().into_iter().find(|(n, _)| *n == name).map(|(_, d)| d).unwrap_or("")
}

pub fn builtin(name: &str) -> Option<ScenarioConfig> {
    let d = describe(name);
    let cfg = match name {
        "lat-vs-bw" => {
            let mut c = base(name, d, &["a", "b"], 200_000.0);
            c.flows = vec![lat("lat", "a", "b"), bw("bw", "a", "b", MB)];
            c
        }
        "tput-vs-bw" => {
            let mut c = base(name, d, &["a", "b"], 100_000.0);
            c.flows = vec![tput("tput", "a", "b"), bw("bw", "a", "b", MB)];
            c
        }
        "multi-elephant" => {
            let mut c = base(name, d, &["a", "b"], 100_000.0);
            c.flows.push(lat("lat", "a", "b"));
            for i in 0..16 {
                c.flows.push(bw(&format!("bw{i}"), "a", "b", MB));
            }
            c
        }
        "bw-1MB-vs-1GB" => {
            let mut c = base(name, d, &["a", "b"], 1_000_000.0);
            c.flows = vec![bw("small", "a", "b", MB), bw("large", "a", "b", GB)];
            c
        }
        "multi-qp" => {
            let mut c = base(name, d, &["a", "b"], 500_000.0);
            let mut x = bw("x", "a", "b", MB);
            x.qp_count = 16;
            c.flows = vec![x, bw("y", "a", "b", MB)];
            c
        }
        "dynamic-8x8" => {
            let mut c = base(name, d, &["a", "b"], 400_000.0);
            let sizes = [MB, MB, 10 * MB, 10 * MB, 100 * MB, 100 * MB, GB, GB];
            for (i, s) in sizes.iter().enumerate() {
                let mut f = bw(&format!("bw{i}"), "a", "b", *s);
                f.start_us = (i / 2) as f64 * 40_000.0;
                c.flows.push(f);
            }
            for i in 0..8 {
                let mut f = lat(&format!("lat{i}"), "a", "b");
                f.start_us = 200_000.0;
                f.stop_us = Some(350_000.0);
                c.flows.push(f);
            }
            c
        }
        "fallback" => {
            let mut c = base(name, d, &["a", "b"], 500_000.0);
            c.daemon.target99_us = 1.0;
            c.daemon.delta_s = 0.1;
            c.daemon.fallback_enabled = true;
            let mut lat2 = lat("lat2", "a", "b");
            lat2.start_us = 300_000.0;
            c.flows = vec![
                lat("lat1", "a", "b"),
                bw("bw1", "a", "b", MB),
                bw("bw2", "a", "b", MB),
                lat2,
            ];
            c
        }
        "remote-read" => {
            // a pulls from b while b writes to a; both contend for b's egress
            let mut c = base(name, d, &["a", "b"], 200_000.0);
            let mut r = lat("rlat", "a", "b");
            r.direction = Verb::Read;
            c.flows = vec![r, bw("wbw", "b", "a", MB)];
            c.sim.monitor_host = Some("b".into());
            c
        }
        "remote-read-mirror" => {
            let mut c = base(name, d, &["a", "b"], 200_000.0);
            let mut r = bw("rbw", "a", "b", MB);
            r.direction = Verb::Read;
            c.flows = vec![lat("wlat", "b", "a"), r];
            c.sim.monitor_host = Some("b".into());
            c
        }
        "incast" => {
            let hosts = ["r", "s1", "s2", "s3", "s4", "s5", "s6", "s7", "s8", "s9"];
            let mut c = base(name, d, &hosts, 200_000.0);
            c.daemon.receiver_coordination = true;
            let sizes = [MB, MB, 10 * MB, 10 * MB, 100 * MB, 100 * MB, GB, GB];
            for (i, s) in sizes.iter().enumerate() {
                let h = format!("s{}", i + 1);
                c.flows.push(bw(&h, &h, "r", *s));
            }
            c.flows.push(lat("s9", "s9", "r"));
            c.sim.monitor_host = Some("r".into());
            c
        }
        _ => return None,
    };
    Some(cfg)
}

/// Resolve a built-in name or a path to a JSON file.
pub fn load_scenario(arg: &str) -> Result<ScenarioConfig, ConfigError> {
    if let Some(cfg) = builtin(arg) {
        return Ok(cfg);
    }
    let path = std::path::Path::new(arg);
    if path.exists() {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: arg.to_string(),
            source,
        })?;
        return ScenarioConfig::from_json(&text);
    }
    Err(ConfigError::UnknownScenario {
        name: arg.to_string(),
        valid: builtin_names().join(", "),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_builtins_validate() {
        for name in builtin_names() {
            let c = builtin(name).unwrap();
            c.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(c.sim.duration_us <= 1_000_000.0);
        }
    }

    #[test]
    fn json_roundtrip_and_defaults() {
        let c = builtin("lat-vs-bw").unwrap();
        let back = ScenarioConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);

        let text = r#"{
            "hosts": ["a", "b"],
            "flows": [{"app_id": "x", "host": "a", "peer": "b"}],
            "daemon": {"alpha": "auto"}
        }"#;
        let c = ScenarioConfig::from_json(text).unwrap();
        assert_eq!(c.flows[0].flow_type, FlowType::Bandwidth);
        assert!(c.daemon.alpha.is_auto());
        assert_eq!(c.daemon.ref_period_us, 500.0);
    }

    #[test]
    fn validation_names_the_field() {
        let mut c = builtin("lat-vs-bw").unwrap();
        c.flows[1].peer = "a".into();
        let e = c.validate().unwrap_err();
        assert_eq!(e.field(), Some("flows[1].peer"));

        let mut c = builtin("lat-vs-bw").unwrap();
        c.flows[0].stop_us = Some(0.0);
        assert_eq!(c.validate().unwrap_err().field(), Some("flows[0].stop_us"));

        let mut c = builtin("lat-vs-bw").unwrap();
        c.rnic.line_rate_gbps = 0.0;
        assert_eq!(c.validate().unwrap_err().field(), Some("rnic.line_rate_gbps"));

        let text = r#"{"hosts": ["a"], "flows": [], "bogus": 1}"#;
        assert!(matches!(ScenarioConfig::from_json(text), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn overrides() {
        let c = builtin("lat-vs-bw").unwrap();
        let c2 = with_overrides(&c, &[("daemon.alpha".into(), "0.25".into())]).unwrap();
        assert_eq!(c2.daemon.alpha, AlphaSetting::Fixed(0.25));
        let c3 = with_overrides(&c, &[("daemon.alpha".into(), "auto".into())]).unwrap();
        assert!(c3.daemon.alpha.is_auto());
        let c4 = with_overrides(&c, &[("flows.1.msg_bytes".into(), "2000".into())]).unwrap();
        assert_eq!(c4.flows[1].msg_bytes, 2000);
        assert!(with_overrides(&c, &[("daemon.alpha".into(), "2".into())]).is_err());
        assert!(with_overrides(&c, &[("flows.9.msg_bytes".into(), "1".into())]).is_err());
    }

    #[test]
    fn unknown_name_lists_valid_ones() {
        let e = load_scenario("no-such-thing").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("lat-vs-bw") && msg.contains("incast"));
    }
}
