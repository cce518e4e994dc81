use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufReader};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use meterlora::airtime::{time_on_air, Ldro, RadioParams};
use meterlora::batch;
use meterlora::planner::{self, CapacityInputs, DailyMethod};
use meterlora::regulation::{wait_after, DutyCycle};
use meterlora::server::{self, PacketRecord};
use meterlora::sim::{self, presets, RunOutput, Scenario, Summary};
use meterlora::Micros;

#[derive(Debug, Parser)]
#[command(name = "meterlora", version, about = "LoRaWAN smart-meter simulator and planner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Time on air and duty-cycle waits for one frame.
    Toa(ToaArgs),
    /// Planning tables as CSV.
    Plan {
        #[command(subcommand)]
        kind: PlanKind,
    },
    /// Run a scenario file or preset and write the packet log and statistics.
    Simulate(SimulateArgs),
    /// Per-node or per-channel tables from a packet log.
    Report(ReportArgs),
    /// Check a scenario file without running it.
    Validate {
        scenario: PathBuf,
    },
}

#[derive(Debug, clap::Args)]
struct ToaArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(7..=12))]
    sf: u8,
    /// PHY payload length in bytes, frame overhead included.
    #[arg(long)]
    payload: usize,
    #[arg(long, default_value_t = 125_000)]
    bw: u32,
    /// Coding-rate denominator: 5..8 for 4/5..4/8.
    #[arg(long, default_value_t = 5)]
    cr: u8,
    #[arg(long, value_enum, default_value_t = LdroArg::Auto)]
    ldro: LdroArg,
    #[arg(long, default_value_t = 8)]
    preamble: u16,
    #[arg(long)]
    implicit_header: bool,
    #[arg(long)]
    no_crc: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LdroArg {
    Auto,
    On,
    Off,
}

#[derive(Debug, Subcommand)]
enum PlanKind {
    /// Wait after each frame per data rate and payload size.
    Wait {
        #[arg(long, default_value_t = 0.01)]
        duty: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bytes per day per data rate.
    Daily {
        #[arg(long, default_value_t = 0.01)]
        duty: f64,
        #[arg(long, value_enum, default_value_t = MethodArg::Airtime)]
        method: MethodArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Nodes one gateway can acknowledge per day.
    Capacity {
        #[arg(long, default_value_t = 1)]
        channels: u64,
        /// Packets per day requiring a response.
        #[arg(long)]
        r: u64,
        /// Edge-node packets per day requiring a response.
        #[arg(long, default_value_t = 0)]
        er: u64,
        #[arg(long, default_value_t = 2.0)]
        seconds_per_transaction: f64,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Airtime,
    Bitrate,
}

#[derive(Debug, clap::Args)]
struct SimulateArgs {
    /// Scenario file (JSON).
    #[arg(conflicts_with = "preset", required_unless_present = "preset")]
    scenario: Option<PathBuf>,
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(presets::PRESETS))]
    preset: Option<String>,
    /// Overrides the scenario seed. Mandatory when CI is set.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = "METERLORA_OUT_DIR", default_value = ".")]
    out: PathBuf,
    /// Runs this many consecutive seeds in parallel.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    batch: Option<u64>,
}

#[derive(Debug, clap::Args)]
struct ReportArgs {
    log: PathBuf,
    #[arg(long, value_enum)]
    metric: Metric,
    /// Scenario file whose node labels are shown.
    #[arg(long, conflicts_with = "preset")]
    scenario: Option<PathBuf>,
    /// Preset whose node labels are shown.
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(presets::PRESETS))]
    preset: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Metric {
    Per,
    Rssi,
    Snr,
    Ack,
    Channels,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Validation(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Validation(_) => 3,
            Failure::Runtime(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Validation(m) | Failure::Runtime(m) => m,
        }
    }
}

fn runtime(context: &str) -> impl FnOnce(io::Error) -> Failure + '_ {
    move |e| Failure::Runtime(format!("{context}: {e}"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Toa(a) => toa(&a),
        Command::Plan { kind } => plan(kind),
        Command::Simulate(a) => simulate(&a),
        Command::Report(a) => report(&a),
        Command::Validate { scenario } => validate(&scenario),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn toa(a: &ToaArgs) -> Result<(), Failure> {
    let params = RadioParams {
        sf: a.sf,
        bw_hz: a.bw,
        cr_denominator: a.cr,
        preamble_symbols: a.preamble,
        explicit_header: !a.implicit_header,
        ldro: match a.ldro {
            LdroArg::Auto => Ldro::Auto,
            LdroArg::On => Ldro::On,
            LdroArg::Off => Ldro::Off,
        },
        crc_on: !a.no_crc,
    };
    let toa = time_on_air(&params, a.payload).map_err(|e| Failure::Usage(e.to_string()))?;
    let wait = |d: DutyCycle| wait_after(toa, d).as_secs_f64();
    println!(
        "{:.3} ms, wait@1%: {:.2} s, wait@0.1%: {:.2} s, wait@10%: {:.2} s",
        toa.as_millis_f64(),
        wait(DutyCycle::ONE_PERCENT),
        wait(DutyCycle::TENTH_PERCENT),
        wait(DutyCycle::TEN_PERCENT),
    );
    Ok(())
}

fn duty(fraction: f64) -> Result<DutyCycle, Failure> {
    DutyCycle::from_fraction(fraction).map_err(|e| Failure::Usage(e.to_string()))
}

fn emit_csv<T: Serialize>(rows: &[T], out: Option<&Path>) -> Result<(), Failure> {
    match out {
        Some(p) => {
            let f = File::create(p).map_err(runtime("creating output"))?;
            planner::write_csv(rows, f).map_err(runtime("writing CSV"))
        }
        None => planner::write_csv(rows, io::stdout().lock()).map_err(runtime("writing CSV")),
    }
}

fn plan(kind: PlanKind) -> Result<(), Failure> {
    match kind {
        PlanKind::Wait { duty: d, out } => {
            emit_csv(&planner::wait_time_table(duty(d)?), out.as_deref())
        }
        PlanKind::Daily { duty: d, method, out } => {
            let method = match method {
                MethodArg::Airtime => DailyMethod::Airtime,
                MethodArg::Bitrate => DailyMethod::Bitrate,
            };
            emit_csv(&planner::daily_data_table(duty(d)?, method), out.as_deref())
        }
        PlanKind::Capacity {
            channels,
            r,
            er,
            seconds_per_transaction,
        } => {
            if !(seconds_per_transaction.is_finite() && seconds_per_transaction > 0.0) {
                return Err(Failure::Usage("--seconds-per-transaction must be positive".into()));
            }
            let inputs = CapacityInputs {
                r,
                er,
                channels,
                seconds_per_transaction: Micros::from_secs_f64(seconds_per_transaction),
            };
            let n = planner::node_capacity(inputs).map_err(|e| Failure::Usage(e.to_string()))?;
            println!("{n}");
            Ok(())
        }
    }
}

fn load_scenario(path: &Path) -> Result<Scenario, Failure> {
    let text = fs::read_to_string(path).map_err(runtime("reading scenario"))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let at = e.path().to_string();
        Failure::Validation(format!("{}: {at}: {}", path.display(), e.into_inner()))
    })
}

fn check(sc: &Scenario) -> Result<(), Failure> {
    sc.validate().map_err(|e| {
        let lines: Vec<String> = e.0.iter().map(|v| format!("  {v}")).collect();
        Failure::Validation(format!("invalid scenario:\n{}", lines.join("\n")))
    })
}

fn validate(path: &Path) -> Result<(), Failure> {
    let sc = load_scenario(path)?;
    check(&sc)?;
    println!("ok: {} gateways, {} nodes", sc.gateways.len(), sc.nodes.len());
    Ok(())
}

fn in_ci() -> bool {
    std::env::var_os("CI").is_some_and(|v| !v.is_empty() && v != "0" && v != "false")
}

fn write_run(dir: &Path, stem: &str, out: &RunOutput) -> Result<String, Failure> {
    let bytes = out.log_bytes();
    let digest = hex::encode(Sha256::digest(&bytes));
    fs::write(dir.join(format!("{stem}.log.jsonl")), &bytes).map_err(runtime("writing log"))?;
    let stats = serde_json::to_string_pretty(&out.stats)
        .map_err(|e| Failure::Runtime(format!("encoding stats: {e}")))?;
    fs::write(dir.join(format!("{stem}.stats.json")), stats + "\n")
        .map_err(runtime("writing stats"))?;
    Ok(digest)
}

fn simulate(a: &SimulateArgs) -> Result<(), Failure> {
    if a.seed.is_none() && in_ci() {
        return Err(Failure::Usage("--seed is required when CI is set".into()));
    }
    let mut sc = match (&a.scenario, &a.preset) {
        (Some(path), _) => load_scenario(path)?,
        (None, Some(name)) => presets::preset(name).expect("value parser admits only presets"),
        (None, None) => unreachable!("clap requires one of them"),
    };
    if let Some(seed) = a.seed {
        sc.seed = seed;
    }
    check(&sc)?;
    fs::create_dir_all(&a.out).map_err(runtime("creating output directory"))?;
    let stem = if sc.name.is_empty() {
        a.scenario
            .as_deref()
            .and_then(Path::file_stem)
            .map_or("run".to_owned(), |s| s.to_string_lossy().into_owned())
    } else {
        sc.name.clone()
    };
    match a.batch {
        None => {
            let out = sim::run(&sc).map_err(|e| Failure::Validation(e.to_string()))?;
            let digest = write_run(&a.out, &stem, &out)?;
            eprintln!(
                "{} transmissions, {} log rows -> {}",
                out.stats.transmissions,
                out.log.len(),
                a.out.display()
            );
            println!("{digest}  {stem}.log.jsonl");
        }
        Some(n) => {
            let runs = batch::seed_sweep(&sc, n);
            for (s, result) in runs.iter().zip(batch::run_batch(&runs)) {
                let out = result.map_err(|e| Failure::Validation(e.to_string()))?;
                let name = format!("{stem}-seed{}", s.seed);
                let digest = write_run(&a.out, &name, &out)?;
                println!("{digest}  {name}.log.jsonl");
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct PerRow<'a> {
    dev_eui: &'a str,
    label: &'a str,
    sent: u64,
    received: u64,
    per_percent: f64,
}

#[derive(Serialize)]
struct DistRow<'a> {
    dev_eui: &'a str,
    label: &'a str,
    count: usize,
    min: Option<f64>,
    q1: Option<f64>,
    median: Option<f64>,
    q3: Option<f64>,
    max: Option<f64>,
    mean: Option<f64>,
}

impl<'a> DistRow<'a> {
    fn new(dev_eui: &'a str, label: &'a str, s: Option<Summary>) -> Self {
        Self {
            dev_eui,
            label,
            count: s.map_or(0, |s| s.count),
            min: s.map(|s| s.min),
            q1: s.map(|s| s.q1),
            median: s.map(|s| s.median),
            q3: s.map(|s| s.q3),
            max: s.map(|s| s.max),
            mean: s.map(|s| (s.mean * 1000.0).round() / 1000.0),
        }
    }
}

#[derive(Serialize)]
struct AckRow<'a> {
    dev_eui: &'a str,
    label: &'a str,
    ack_requested: u64,
    ack_missed: u64,
}

#[derive(Serialize)]
struct ChannelRow {
    rank: usize,
    frequency_mhz: f64,
    received: u64,
    share_percent: f64,
}

fn report(a: &ReportArgs) -> Result<(), Failure> {
    let file = File::open(&a.log).map_err(runtime("opening log"))?;
    let log: Vec<PacketRecord> = server::read_log(BufReader::new(file))
        .map_err(|e| Failure::Validation(format!("{}: {e}", a.log.display())))?;
    let labels: BTreeMap<String, String> = match (&a.scenario, &a.preset) {
        (Some(p), _) => sim::labels(&load_scenario(p)?),
        (None, Some(name)) => sim::labels(&presets::preset(name).expect("known preset")),
        (None, None) => BTreeMap::new(),
    };
    let nodes = sim::node_stats_from_log(&log, &labels);
    match a.metric {
        Metric::Per => {
            let rows: Vec<_> = nodes
                .iter()
                .map(|n| PerRow {
                    dev_eui: &n.dev_eui,
                    label: &n.label,
                    sent: n.sent,
                    received: n.received,
                    per_percent: (n.per_percent * 100.0).round() / 100.0,
                })
                .collect();
            emit_csv(&rows, None)
        }
        Metric::Rssi | Metric::Snr => {
            let rows: Vec<_> = nodes
                .iter()
                .map(|n| {
                    let s = if matches!(a.metric, Metric::Rssi) { n.rssi } else { n.snr };
                    DistRow::new(&n.dev_eui, &n.label, s)
                })
                .collect();
            emit_csv(&rows, None)
        }
        Metric::Ack => {
            let rows: Vec<_> = nodes
                .iter()
                .map(|n| AckRow {
                    dev_eui: &n.dev_eui,
                    label: &n.label,
                    ack_requested: n.ack_requested,
                    ack_missed: n.ack_missed,
                })
                .collect();
            emit_csv(&rows, None)
        }
        Metric::Channels => {
            let hist = server::channel_histogram(&log);
            let total: u64 = hist.values().sum();
            let mut ranked: Vec<(u32, u64)> = hist.into_iter().collect();
            ranked.sort_by(|x, y| y.1.cmp(&x.1).then(x.0.cmp(&y.0)));
            let rows: Vec<_> = ranked
                .iter()
                .enumerate()
                .map(|(i, &(f, c))| ChannelRow {
                    rank: i + 1,
                    frequency_mhz: f64::from(f) / 1e6,
                    received: c,
                    share_percent: (1e4 * c as f64 / total.max(1) as f64).round() / 100.0,
                })
                .collect();
            emit_csv(&rows, None)
        }
    }
}
