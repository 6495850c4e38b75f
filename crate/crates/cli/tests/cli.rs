use std::fs;
use std::process::Command;

fn justitia() -> Command {
    Command::new(env!("CARGO_BIN_EXE_justitia"))
}

#[test]
fn list_prints_the_catalog() {
    let out = justitia().arg("list").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["lat-vs-bw", "tput-vs-bw", "multi-elephant", "bw-1MB-vs-1GB", "multi-qp", "dynamic-8x8", "fallback", "remote-read", "incast"] {
        assert!(text.lines().any(|l| l.starts_with(name)), "missing {name}");
    }
}

#[test]
fn run_writes_both_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let out = justitia()
        .args(["run", "--scenario", "lat-vs-bw", "--seed", "3", "--justitia", "off", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(
        metrics.lines().next().unwrap(),
        "flow_id,app_id,flow_type,achieved_bandwidth_gbps,message_rate_mops,latency_p50_us,latency_p99_us,sample_count,cpu_te_fraction"
    );
    assert_eq!(metrics.lines().count(), 3);
    let ts = fs::read_to_string(dir.path().join("timeseries.csv")).unwrap();
    assert_eq!(ts.lines().next().unwrap(), "time_us,safe_util_gbps,current99_us,mode,lat,bw");
}

#[test]
fn same_seed_same_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let out = justitia()
            .args(["run", "--scenario", "remote-read", "--out"])
            .arg(d.path())
            .output()
            .unwrap();
        assert!(out.status.success());
    }
    for f in ["metrics.csv", "timeseries.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
    }
}

#[test]
fn run_accepts_a_json_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = justitia_core::scenario::builtin("lat-vs-bw").unwrap();
    cfg.sim.duration_us = 20_000.0;
    let path = dir.path().join("s.json");
    fs::write(&path, cfg.to_json()).unwrap();
    let out = justitia()
        .args(["run", "--scenario"])
        .arg(&path)
        .arg("--out")
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("o/metrics.csv").exists());
}

#[test]
fn sweep_writes_one_directory_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let out = justitia()
        .args(["sweep", "--scenario", "lat-vs-bw", "--param", "daemon.alpha", "--values", "0,0.25,0.5,0.75,1", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for v in ["0", "0.25", "0.5", "0.75", "1"] {
        let m = fs::read_to_string(dir.path().join(format!("daemon.alpha={v}/metrics.csv"))).unwrap();
        let bw = m.lines().find(|l| l.starts_with("bw,")).unwrap();
        let cpu: f64 = bw.rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(cpu, v.parse::<f64>().unwrap());
    }
}

#[test]
fn errors_exit_nonzero() {
    let out = justitia().args(["run", "--scenario", "no-such-thing"]).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("lat-vs-bw"), "error should list valid names: {err}");

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    let mut cfg = justitia_core::scenario::builtin("lat-vs-bw").unwrap();
    cfg.sim.duration_us = -1.0;
    fs::write(&bad, cfg.to_json()).unwrap();
    let out = justitia().args(["run", "--scenario"]).arg(&bad).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("duration_us"));

    let out = justitia()
        .args(["sweep", "--scenario", "lat-vs-bw", "--param", "daemon.alpha", "--values", "2"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
