use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use justitia_core::scenario::{catalog, load_scenario, with_overrides, ScenarioConfig};
use justitia_core::sim::{run_scenario, RunOutput};

#[derive(Parser)]
#[command(name = "justitia", version, about = "Run RNIC isolation scenarios and emit CSV metrics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write metrics.csv and timeseries.csv.
    Run {
        /// Built-in scenario name or path to a JSON config.
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, value_enum)]
        justitia: Option<Toggle>,
    },
    /// List the built-in scenarios.
    List,
    /// Run a scenario once per value of one config parameter.
    Sweep {
        #[arg(long)]
        scenario: String,
        /// Dotted config path, e.g. daemon.alpha.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn write_outputs(dir: &Path, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let metrics = dir.join("metrics.csv");
    out.write_metrics_csv(BufWriter::new(File::create(&metrics)?))
        .with_context(|| format!("writing {}", metrics.display()))?;
    let ts = dir.join("timeseries.csv");
    out.write_timeseries_csv(BufWriter::new(File::create(&ts)?))
        .with_context(|| format!("writing {}", ts.display()))?;
    Ok(())
}

fn print_summary(cfg: &ScenarioConfig, out: &RunOutput) {
    println!(
        "{} (seed {}, justitia {})",
        cfg.name,
        cfg.sim.seed,
        if cfg.justitia_enabled { "on" } else { "off" }
    );
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
    for r in &out.records {
        println!(
            "  {:<12} {:<10} {:>9.3} Gbps {:>8.3} Mops  p50 {:>8} us  p99 {:>8} us  n={}",
            r.flow_id,
            r.flow_type,
            r.achieved_bandwidth_gbps,
            r.message_rate_mops,
            fmt(r.latency_p50_us),
            fmt(r.latency_p99_us),
            r.sample_count
        );
    }
    for w in &out.admission_warnings {
        eprintln!("warning: flow {w} admitted with latency target already violated");
    }
}

fn configure(scenario: &str, seed: Option<u64>, justitia: Option<Toggle>) -> Result<ScenarioConfig> {
    let mut cfg = load_scenario(scenario)?;
    if let Some(s) = seed {
        cfg.sim.seed = s;
    }
    if let Some(t) = justitia {
        cfg.justitia_enabled = matches!(t, Toggle::On);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::List => {
            for (name, desc) in catalog() {
                println!("{name:<20} {desc}");
            }
        }
        Command::Run {
            scenario,
            seed,
            out,
            justitia,
        } => {
            let cfg = configure(&scenario, seed, justitia)?;
            let result = run_scenario(&cfg)?;
            write_outputs(&out, &result)?;
            print_summary(&cfg, &result);
        }
        Command::Sweep {
            scenario,
            param,
            values,
            out,
            seed,
        } => {
            let base = configure(&scenario, seed, None)?;
            let configs = values
                .iter()
                .map(|v| {
                    let cfg = with_overrides(&base, &[(param.clone(), v.clone())])
                        .with_context(|| format!("{param}={v}"))?;
                    Ok((v.clone(), cfg))
                })
                .collect::<Result<Vec<_>>>()?;
            if configs.is_empty() {
                bail!("--values is empty");
            }
            let results: Vec<_> = std::thread::scope(|s| {
                let handles: Vec<_> = configs
                    .iter()
                    .map(|(_, cfg)| s.spawn(move || run_scenario(cfg)))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
            });
            for ((v, cfg), res) in configs.iter().zip(results) {
                let res = res.with_context(|| format!("{param}={v}"))?;
                write_outputs(&out.join(format!("{param}={}", v.trim_matches('"'))), &res)?;
                print_summary(cfg, &res);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
