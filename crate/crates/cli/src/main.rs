//! `agentflow`: run scenarios, compare policies, and benchmark the control plane.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use agentflow::global::TickReport;
use agentflow::sim::bench::{self, GlobalLoopConfig, TwoLevelConfig};
use agentflow::sim::metrics::RunMetrics;
use agentflow::sim::Runtime;
use agentflow::workflow::scenario::{self, Scenario};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "agentflow",
    version,
    about = "Simulate multi-agent workflows under a two-level control plane"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario and write its metrics and event log.
    Run {
        /// Scenario TOML file or builtin name.
        scenario: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the policy list (repeatable).
        #[arg(long)]
        policy: Vec<String>,
    },
    /// Paired-seed A/B comparison of two policies.
    Compare {
        scenario: String,
        /// Exactly two policies; `+` joins a composite, e.g. `srtf+load_balance_routing`.
        #[arg(long, required = true, num_args = 1)]
        policy: Vec<String>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Also write the per-seed rows as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Check a scenario file and report errors with field paths.
    Validate { scenario: String },
    /// Print a builtin scenario as TOML.
    Show { name: String },
    /// Per-future routing latency with central versus local decisions.
    BenchTwoLevel {
        /// Future counts; defaults to 1K..131K in powers of two.
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 8)]
        controllers: usize,
        #[arg(long, default_value_t = 16)]
        instances: u32,
    },
    /// Global control-loop latency over emulated nodes.
    BenchGlobalLoop {
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "32,64")]
        nodes: Vec<usize>,
        #[arg(long, default_value_t = 5.0)]
        rtt_ms: f64,
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
}

fn load(arg: &str) -> Result<Scenario, String> {
    if let Some(s) = scenario::builtin(arg) {
        return Ok(s);
    }
    let path = Path::new(arg);
    if !path.exists() {
        return Err(format!(
            "{arg}: no such file or builtin (builtins: {})",
            scenario::BUILTIN_NAMES.join(", ")
        ));
    }
    Scenario::load(path).map_err(|e| e.to_string())
}

fn write_file(
    dir: &Path,
    name: &str,
    f: impl FnOnce(&mut dyn Write) -> io::Result<()>,
) -> Result<(), String> {
    let path = dir.join(name);
    let file = File::create(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut w = BufWriter::new(file);
    f(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| format!("{}: {e}", path.display()))
}

fn execute(s: Scenario) -> Result<(RunMetrics, String, Vec<TickReport>), String> {
    let mut rt = Runtime::new(s).map_err(|e| e.to_string())?;
    rt.schedule_arrivals();
    rt.run_to_end();
    let ticks = rt.tick_reports().to_vec();
    let (m, log) = rt.finish();
    Ok((m, log.to_text(), ticks))
}

fn summary(m: &RunMetrics) -> String {
    format!(
        "{} [{}] seed={} requests={} completed={} failed={} in_flight={} mean={:.2}ms p50={:.2} p95={:.2} p99={:.2} makespan={:.1}ms imbalance={:.3} migrations={} provisions={} kills={}",
        m.scenario,
        m.policy,
        m.seed,
        m.requests,
        m.completed,
        m.failed,
        m.in_flight,
        m.latency.mean,
        m.latency.p50,
        m.latency.p95,
        m.latency.p99,
        m.makespan_ms,
        m.imbalance_index,
        m.migrations,
        m.provisions,
        m.kills
    )
}

fn run(arg: &str, out: &Path, seed: Option<u64>, policy: Vec<String>) -> Result<bool, String> {
    let mut s = load(arg)?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    if !policy.is_empty() {
        s.policy.names = policy;
    }
    let (m, log, ticks) = execute(s)?;
    fs::create_dir_all(out).map_err(|e| format!("{}: {e}", out.display()))?;
    write_file(out, "metrics.json", |w| writeln!(w, "{}", m.to_json()))?;
    write_file(out, "latency.csv", |w| m.write_latency_csv(w))?;
    write_file(out, "timeline.csv", |w| m.write_timeline_csv(w))?;
    write_file(out, "instances.csv", |w| m.write_instances_csv(w))?;
    write_file(out, "ticks.csv", |w| TickReport::write_csv(&ticks, w))?;
    write_file(out, "events.log", |w| w.write_all(log.as_bytes()))?;
    println!("{}", summary(&m));
    for v in &m.violations {
        eprintln!("violation: {v}");
    }
    Ok(m.violations.is_empty())
}

fn policy_names(p: &str) -> Vec<String> {
    p.split('+').map(str::to_string).collect()
}

fn pct(a: f64, b: f64) -> f64 {
    if a == 0.0 {
        0.0
    } else {
        (b - a) / a * 100.0
    }
}

fn compare(
    arg: &str,
    policies: &[String],
    seeds: u64,
    json: Option<PathBuf>,
) -> Result<bool, String> {
    let [a, b] = policies else {
        return Err("compare takes exactly two --policy values".into());
    };
    let base = load(arg)?;
    let mut rows = Vec::new();
    let mut clean = true;
    println!("seed,policy,mean_ms,p50_ms,p95_ms,p99_ms,makespan_ms,imbalance,migrations");
    let (mut sum_a, mut sum_b) = ([0.0; 3], [0.0; 3]);
    for k in 0..seeds {
        let mut pair = Vec::new();
        for p in [a, b] {
            let mut s = base.clone();
            s.seed = base.seed + k;
            s.policy.names = policy_names(p);
            let (m, _, _) = execute(s)?;
            println!(
                "{},{},{:.3},{:.3},{:.3},{:.3},{:.3},{:.4},{}",
                m.seed,
                p,
                m.latency.mean,
                m.latency.p50,
                m.latency.p95,
                m.latency.p99,
                m.makespan_ms,
                m.imbalance_index,
                m.migrations
            );
            clean &= m.violations.is_empty();
            for v in &m.violations {
                eprintln!("violation ({p}, seed {}): {v}", m.seed);
            }
            pair.push(m);
        }
        for (acc, m) in [(&mut sum_a, &pair[0]), (&mut sum_b, &pair[1])] {
            acc[0] += m.latency.mean;
            acc[1] += m.latency.p99;
            acc[2] += m.makespan_ms;
        }
        rows.push(pair);
    }
    let n = seeds.max(1) as f64;
    println!(
        "# {b} vs {a} over {seeds} paired seeds: mean {:+.2}%, p99 {:+.2}%, makespan {:+.2}%",
        pct(sum_a[0] / n, sum_b[0] / n),
        pct(sum_a[1] / n, sum_b[1] / n),
        pct(sum_a[2] / n, sum_b[2] / n)
    );
    if let Some(path) = json {
        let text = serde_json::to_string_pretty(&rows).map_err(|e| e.to_string())?;
        fs::write(&path, text).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    Ok(clean)
}

fn sizes_or_default(sizes: Vec<usize>) -> Vec<usize> {
    if sizes.is_empty() {
        bench::DEFAULT_SIZES.to_vec()
    } else {
        sizes
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run {
            scenario,
            out,
            seed,
            policy,
        } => run(&scenario, &out, seed, policy),
        Cmd::Compare {
            scenario,
            policy,
            seeds,
            json,
        } => compare(&scenario, &policy, seeds, json),
        Cmd::Validate { scenario } => load(&scenario).map(|s| {
            println!(
                "ok: {} ({} agent types, policy {})",
                s.workflow.name,
                s.fleet.agents.len(),
                s.policy.names.join("+")
            );
            true
        }),
        Cmd::Show { name } => scenario::builtin(&name)
            .map(|s| {
                print!("{}", s.to_toml());
                true
            })
            .ok_or_else(|| format!("unknown builtin `{name}`")),
        Cmd::BenchTwoLevel {
            sizes,
            controllers,
            instances,
        } => {
            let cfg = TwoLevelConfig {
                controllers,
                instances,
            };
            println!("n_futures,one_level_ms,two_level_ms");
            for r in bench::bench_two_level(&sizes_or_default(sizes), cfg) {
                println!(
                    "{},{:.5},{:.5}",
                    r.n_futures, r.one_level_ms, r.two_level_ms
                );
            }
            Ok(true)
        }
        Cmd::BenchGlobalLoop {
            sizes,
            nodes,
            rtt_ms,
            reps,
        } => {
            let cfg = GlobalLoopConfig {
                rpc_rtt: Duration::from_secs_f64(rtt_ms.max(0.0) / 1000.0),
                reps,
                ..Default::default()
            };
            println!("n_nodes,n_futures,collect_ms,decide_ms,push_ms,total_ms");
            for r in bench::bench_global_loop(&sizes_or_default(sizes), &nodes, cfg) {
                println!(
                    "{},{},{:.3},{:.3},{:.3},{:.3}",
                    r.n_nodes, r.n_futures, r.collect_ms, r.decide_ms, r.push_ms, r.total_ms
                );
            }
            Ok(true)
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
