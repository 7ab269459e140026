use std::fs::{self, File};
use std::io::{self, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::{info, warn};

use privapprox::aggregator::{serve_control, Aggregator, AggregatorConfig, AggregatorService, ControlClient};
use privapprox::client::{ClientAgent, ClientConfig, EpochOutcome, LocalStore, TcpRelays};
use privapprox::harness::{results_csv, run_seeds, sweep, Scenario, SWEEP_HEADER};
use privapprox::query::PublishedQuery;
use privapprox::transport::{Relay, RelayConfig, RelayServer};

#[derive(Parser)]
#[command(name = "privapprox", version, about = "Privacy-preserving approximate stream analytics")]
struct Cli {
    /// Write output here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the scenario seed (or the client rng seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario in-process and print one CSV row per window.
    Run { scenario: PathBuf },
    /// Sweep one parameter over comma-separated values.
    Sweep {
        param: String,
        values: String,
        scenario: PathBuf,
    },
    /// Publish a query block to the aggregator.
    Publish {
        query: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7400")]
        addr: String,
    },
    Status {
        id: u64,
        #[arg(long, default_value = "127.0.0.1:7400")]
        addr: String,
    },
    /// Switch a query to its inverted form.
    Invert {
        id: u64,
        #[arg(long, default_value = "127.0.0.1:7400")]
        addr: String,
    },
    /// Batch estimate over stored answers in `[from, to)`.
    Historical {
        id: u64,
        from: u64,
        to: u64,
        #[arg(default_value_t = 1.0)]
        sampling: f64,
        #[arg(long, default_value = "127.0.0.1:7400")]
        addr: String,
    },
    /// Latest window as a histogram with error bounds.
    Report {
        id: u64,
        #[arg(long, default_value = "127.0.0.1:7400")]
        addr: String,
    },
    ServeRelay {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        listen: Option<String>,
    },
    ServeAggregator {
        #[arg(long, default_value = "127.0.0.1:7400")]
        control: String,
        /// Relay addresses in share order, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        relays: Vec<String>,
        #[arg(long, default_value_t = 0.9)]
        p: f64,
        #[arg(long, default_value_t = 0.6)]
        q: f64,
        #[arg(long)]
        history_dir: Option<PathBuf>,
        #[arg(long)]
        no_feedback: bool,
        #[arg(long, default_value_t = 100)]
        tick_ms: u64,
    },
    /// Run one client against live relays, answering every published query.
    Client {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        relays: Vec<String>,
        #[arg(long)]
        aggregator: Option<String>,
        /// Records as `ts,key=value,...` lines.
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        stratum: u16,
        #[arg(long, default_value_t = 500)]
        poll_ms: u64,
    },
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

fn output(out: &Option<PathBuf>) -> Result<Box<dyn Write + Send>> {
    Ok(match out {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout()),
    })
}

fn load_scenario(path: &Path, seed: Option<u64>) -> Result<Scenario> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut sc = Scenario::parse(&text)?;
    if let Some(s) = seed {
        sc.seed = s;
    }
    Ok(sc)
}

fn control(addr: &str, command: &str, body: Option<&str>) -> Result<String> {
    let mut c = ControlClient::connect(addr).with_context(|| format!("connecting to {addr}"))?;
    match c.request(command, body)? {
        Ok(payload) => Ok(payload),
        Err(msg) => bail!("{msg}"),
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.cmd {
        Command::Run { scenario } => {
            let sc = load_scenario(&scenario, cli.seed)?;
            let t0 = Instant::now();
            let results = run_seeds(&sc)?;
            info!("{} windows in {:.2?}", results.len(), t0.elapsed());
            output(&cli.out)?.write_all(results_csv(&results).as_bytes())?;
        }
        Command::Sweep { param, values, scenario } => {
            let sc = load_scenario(&scenario, cli.seed)?;
            let values: Vec<f64> = values
                .split(',')
                .map(|v| v.trim().parse().with_context(|| format!("bad value {v:?}")))
                .collect::<Result<_>>()?;
            let t0 = Instant::now();
            let rows = sweep(&param, &values, &sc)?;
            info!("{} runs in {:.2?}", rows.len(), t0.elapsed());
            let mut w = output(&cli.out)?;
            writeln!(w, "{SWEEP_HEADER}")?;
            for r in rows {
                writeln!(w, "{r}")?;
            }
        }
        Command::Publish { query, addr } => {
            let body = fs::read_to_string(&query).with_context(|| format!("reading {}", query.display()))?;
            let reply = control(&addr, "PUBLISH", Some(&body))?;
            writeln!(output(&cli.out)?, "{reply}")?;
        }
        Command::Status { id, addr } => writeln!(output(&cli.out)?, "{}", control(&addr, &format!("STATUS {id}"), None)?)?,
        Command::Invert { id, addr } => writeln!(output(&cli.out)?, "{}", control(&addr, &format!("INVERT {id}"), None)?)?,
        Command::Historical { id, from, to, sampling, addr } => {
            let reply = control(&addr, &format!("HISTORICAL {id} {from} {to} {sampling}"), None)?;
            writeln!(output(&cli.out)?, "{reply}")?;
        }
        Command::Report { id, addr } => writeln!(output(&cli.out)?, "{}", control(&addr, &format!("REPORT {id}"), None)?)?,
        Command::ServeRelay { config, listen } => {
            let mut cfg = match config {
                Some(p) => RelayConfig::parse(&fs::read_to_string(&p)?).map_err(anyhow::Error::msg)?,
                None => RelayConfig::default(),
            };
            if let Some(l) = listen {
                cfg.listen = l;
            }
            let server = RelayServer::bind(&cfg.listen, Arc::new(Relay::new(cfg.topic.clone(), cfg.capacity)))?;
            info!("relay {} listening on {}", cfg.topic, server.local_addr());
            server.join();
        }
        Command::ServeAggregator { control, relays, p, q, history_dir, no_feedback, tick_ms } => {
            let mut config = AggregatorConfig { n_proxies: relays.len(), p, q, history_dir, ..Default::default() };
            if no_feedback {
                config.feedback = None;
            }
            let service = AggregatorService::new(Aggregator::new(config)?, relays, output(&cli.out)?)?;
            let listener = TcpListener::bind(&control)?;
            info!("control endpoint on {}", listener.local_addr()?);
            let ingest = {
                let s = service.clone();
                thread::spawn(move || s.run_ingest(Duration::from_millis(tick_ms)))
            };
            serve_control(listener, service)?;
            let _ = ingest.join();
        }
        Command::Client { config, relays, aggregator, store, stratum, poll_ms } => {
            let mut cfg = match config {
                Some(p) => ClientConfig::parse(&fs::read_to_string(&p)?)?,
                None => ClientConfig::new(format!("client-{}", std::process::id()), stratum, relays)?,
            };
            if let Some(s) = cli.seed {
                cfg = cfg.with_seed(s);
            }
            let aggregator = aggregator.or(cfg.aggregator.clone()).context("no aggregator address")?;
            let mut local = LocalStore::new();
            if let Some(p) = store {
                let n = local.ingest(BufReader::new(File::open(&p)?))?;
                info!("loaded {n} records");
            }
            control(&aggregator, &format!("REGISTER {}", cfg.stratum_id), None)?;
            let mut sink = TcpRelays::new(cfg.proxies.clone());
            let mut agent = ClientAgent::new(cfg, local);
            loop {
                match control(&aggregator, "QUERIES", None) {
                    Ok(blocks) => {
                        for block in blocks.split("---").filter(|b| !b.trim().is_empty()) {
                            match PublishedQuery::parse(block) {
                                Ok(pq) => {
                                    agent.subscribe(pq);
                                }
                                Err(e) => warn!("ignoring published query: {e}"),
                            }
                        }
                    }
                    Err(e) => warn!("polling queries: {e:#}"),
                }
                for (id, end, outcome) in agent.answer_due(now_ms(), &mut sink)? {
                    if matches!(outcome, EpochOutcome::Dropped) {
                        warn!("query {id}: answer for epoch ending {end} dropped");
                    }
                }
                thread::sleep(Duration::from_millis(poll_ms));
            }
        }
    }
    Ok(())
}
