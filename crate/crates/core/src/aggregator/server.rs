//! Line-protocol control endpoint and the relay-draining loop.
//!
//! Requests are one command line, optionally followed by a body terminated
//! by a line `END` (only `PUBLISH` takes a body). Every response starts with
//! `OK` or `ERR <message>`; an `OK` is followed by payload lines and `END`.
//!
//! ```text
//! PUBLISH            <query block> END
//! STATUS <id>
//! INVERT <id>
//! HISTORICAL <id> <from_ms> <to_ms> <sampling>
//! REPORT <id>
//! QUERIES
//! REGISTER <stratum> <count>
//! METRICS
//! ```

use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use log::{debug, info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Aggregator, WindowEstimate, CSV_HEADER};
use crate::query::QuerySubmission;
use crate::transport::DrainClient;

fn wall_clock_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Renders an estimate as a histogram table with error bounds.
pub fn render_report(est: &WindowEstimate) -> String {
    let mut out = format!(
        "window [{}, {})  responses {}  population {}  confidence {}  flags {}\n",
        est.start_ms,
        est.end_ms,
        est.responses,
        est.population,
        est.confidence_level,
        est.flags()
    );
    let max = est
        .buckets
        .iter()
        .map(|b| b.estimate_clamped)
        .fold(0.0f64, f64::max)
        .max(1.0);
    out.push_str("bucket      estimate    +/-  histogram\n");
    for (i, b) in est.buckets.iter().enumerate() {
        let bar = "#".repeat((40.0 * b.estimate_clamped / max).round() as usize);
        out.push_str(&format!("{i:>6} {:>13.1} {:>9.1}  {bar}\n", b.estimate_clamped, b.half_width));
    }
    out
}

/// An aggregator shared between the control endpoint and the ingest loop.
pub struct AggregatorService {
    agg: Mutex<Aggregator>,
    relays: Vec<String>,
    results: Mutex<Box<dyn Write + Send>>,
    stop: AtomicBool,
}

impl AggregatorService {
    /// `results` receives one CSV row per window and bucket.
    pub fn new(agg: Aggregator, relays: Vec<String>, mut results: Box<dyn Write + Send>) -> io::Result<Arc<Self>> {
        writeln!(results, "query_id,{CSV_HEADER}")?;
        Ok(Arc::new(AggregatorService {
            agg: Mutex::new(agg),
            relays,
            results: Mutex::new(results),
            stop: AtomicBool::new(false),
        }))
    }

    pub fn stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }

    pub fn with_aggregator<T>(&self, f: impl FnOnce(&mut Aggregator) -> T) -> T {
        f(&mut self.agg.lock().unwrap())
    }

    /// Drains every relay each `tick` and advances the windows on wall-clock time.
    pub fn run_ingest(&self, tick: Duration) {
        let mut drains: Vec<Option<DrainClient>> = self.relays.iter().map(|_| None).collect();
        while !self.stop.load(Ordering::SeqCst) {
            let mut shares = Vec::new();
            for (i, addr) in self.relays.iter().enumerate() {
                if drains[i].is_none() {
                    match DrainClient::connect(format!("relay-{}", i + 1), addr) {
                        Ok(c) => drains[i] = Some(c),
                        Err(e) => {
                            debug!("relay {addr} unreachable: {e}");
                            continue;
                        }
                    }
                }
                match drains[i].as_mut().unwrap().drain(u32::MAX) {
                    Ok(batch) => shares.extend(batch),
                    Err(e) => {
                        warn!("draining {addr} failed: {e}");
                        drains[i] = None;
                    }
                }
            }
            let now = wall_clock_ms();
            let estimates = {
                let mut agg = self.agg.lock().unwrap();
                agg.ingest(shares, now);
                agg.tick(now)
            };
            if !estimates.is_empty() {
                let mut out = self.results.lock().unwrap();
                for est in &estimates {
                    for row in est.csv_rows().lines() {
                        let _ = writeln!(out, "{},{row}", est.query_id);
                    }
                }
                let _ = out.flush();
            }
            thread::sleep(tick);
        }
    }

    /// Executes one control command.
    pub fn handle(&self, command: &str, body: &str) -> Result<String, String> {
        let mut words = command.split_whitespace();
        let verb = words.next().unwrap_or("").to_ascii_uppercase();
        let args: Vec<&str> = words.collect();
        let num = |i: usize| -> Result<u64, String> {
            args.get(i)
                .ok_or_else(|| format!("{verb}: missing argument {}", i + 1))?
                .parse()
                .map_err(|e| format!("{verb}: argument {}: {e}", i + 1))
        };
        let now = wall_clock_ms();
        let mut agg = self.agg.lock().unwrap();
        match verb.as_str() {
            "PUBLISH" => {
                let sub = QuerySubmission::parse(body).map_err(|e| e.to_string())?;
                let budget = sub.budget.ok_or("PUBLISH: the query block needs a budget")?;
                let pq = agg.publish_query(sub.query, budget, now).map_err(|e| e.to_string())?;
                Ok(pq.to_text())
            }
            "STATUS" => agg.status(num(0)?).map_err(|e| e.to_string()),
            "INVERT" => agg.invert(num(0)?, now).map(|pq| pq.to_text()).map_err(|e| e.to_string()),
            "HISTORICAL" => {
                let sampling: f64 = args
                    .get(3)
                    .unwrap_or(&"1")
                    .parse()
                    .map_err(|e| format!("HISTORICAL: sampling: {e}"))?;
                let mut rng = ChaCha8Rng::from_entropy();
                let est = agg
                    .historical(num(0)?, num(1)?, num(2)?, sampling, &mut rng)
                    .map_err(|e| e.to_string())?;
                Ok(format!("{CSV_HEADER}\n{}", est.csv_rows().trim_end()))
            }
            "REPORT" => {
                let id = num(0)?;
                agg.latest(id)
                    .map(render_report)
                    .map(|r| r.trim_end().to_string())
                    .ok_or_else(|| format!("no window emitted yet for query {id}"))
            }
            "QUERIES" => Ok(agg
                .all_published()
                .iter()
                .map(|p| p.to_text())
                .collect::<Vec<_>>()
                .join("---\n")
                .trim_end()
                .to_string()),
            "REGISTER" => {
                let stratum = u16::try_from(num(0)?).map_err(|e| e.to_string())?;
                let count = if args.len() > 1 { num(1)? } else { 1 };
                agg.register_clients(stratum, count);
                Ok(format!("registered {}", agg.registered().values().sum::<u64>()))
            }
            "METRICS" => Ok(agg.metrics().to_string()),
            "" => Err("empty command".into()),
            other => Err(format!("unknown command {other}")),
        }
    }
}

/// Accepts control connections until the service is stopped.
pub fn serve_control(listener: TcpListener, service: Arc<AggregatorService>) -> io::Result<()> {
    listener.set_nonblocking(true)?;
    info!("control endpoint on {}", listener.local_addr()?);
    while !service.stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                let service = service.clone();
                thread::spawn(move || {
                    if let Err(e) = control_connection(stream, &service) {
                        debug!("control connection closed: {e}");
                    }
                });
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(10)),
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

fn control_connection(stream: TcpStream, service: &AggregatorService) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        let command = line.trim().to_string();
        if command.is_empty() {
            continue;
        }
        let mut body = String::new();
        if command.eq_ignore_ascii_case("PUBLISH") {
            loop {
                let mut l = String::new();
                if reader.read_line(&mut l)? == 0 || l.trim() == "END" {
                    break;
                }
                body.push_str(&l);
            }
        }
        match service.handle(&command, &body) {
            Ok(payload) => {
                writeln!(writer, "OK")?;
                if !payload.is_empty() {
                    writeln!(writer, "{payload}")?;
                }
                writeln!(writer, "END")?;
            }
            Err(e) => writeln!(writer, "ERR {}", e.replace('\n', " "))?,
        }
        writer.flush()?;
    }
}

/// Analyst-side connection to the control endpoint.
pub struct ControlClient {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl ControlClient {
    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        Ok(ControlClient {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
        })
    }

    /// Sends one command (with a body for `PUBLISH`). The outer error is a
    /// connection failure, the inner one the server's `ERR` message.
    pub fn request(&mut self, command: &str, body: Option<&str>) -> io::Result<Result<String, String>> {
        writeln!(self.writer, "{command}")?;
        if let Some(body) = body {
            for l in body.lines() {
                writeln!(self.writer, "{l}")?;
            }
            writeln!(self.writer, "END")?;
        }
        self.writer.flush()?;
        let mut status = String::new();
        if self.reader.read_line(&mut status)? == 0 {
            return Err(io::ErrorKind::UnexpectedEof.into());
        }
        let status = status.trim_end();
        if let Some(msg) = status.strip_prefix("ERR") {
            return Ok(Err(msg.trim().to_string()));
        }
        if status != "OK" {
            return Err(io::Error::new(io::ErrorKind::InvalidData, format!("unexpected reply {status:?}")));
        }
        let mut payload = Vec::new();
        loop {
            let mut l = String::new();
            if self.reader.read_line(&mut l)? == 0 {
                return Err(io::ErrorKind::UnexpectedEof.into());
            }
            if l.trim_end() == "END" {
                break;
            }
            payload.push(l.trim_end().to_string());
        }
        Ok(Ok(payload.join("\n")))
    }
}
