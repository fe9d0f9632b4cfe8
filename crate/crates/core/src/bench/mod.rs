//! Benchmarks comparing out-of-place debugging with the remote baseline.
//!
//! Each benchmark runs a monitor and a manager in this process, connected
//! over loopback TCP, and returns a [`Report`]: long-format rows for CSV
//! output plus the bounds it checked.

mod bytes;
mod init;
mod latency;
mod overhead;
mod patch;
mod remote_read;

pub use bytes::{bytes_vs_sessions, bytes_vs_stack, inspect_all, STACK_GROUPS};
pub use init::session_init;
pub use latency::{step_latency, STEP_OPS};
pub use overhead::idle_overhead;
pub use patch::{patch_bytes, PatchKind};
pub use remote_read::remote_read;

use std::path::Path;
use std::sync::mpsc;
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::manager::{Manager, ManagerConfig, ManagerError, PushEvent, SessionInfo};
use crate::monitor::{Monitor, MonitorConfig, MonitorError, MonitorEvent, TaskOutcome};
use crate::vm::{LoadError, ProgramImage, TaskArgs};

pub const BENCHES: [&str; 8] = [
    "session-init",
    "bytes-vs-sessions",
    "bytes-vs-stack",
    "patch-bytes",
    "step-latency",
    "idle-overhead",
    "remote-read",
    "all",
];

/// Default sizes used by [`run`].
pub const INIT_RUNS: usize = 30;
pub const MAX_SESSIONS: usize = 600;
pub const SESSION_STEP: usize = 50;
pub const STACK_TWEETS: usize = 600;
pub const LATENCY_ROUNDS: usize = 15;
pub const IDLE_RUNS: usize = 11;
pub const READ_PATTERNS: usize = 100;

/// Runs a benchmark from [`BENCHES`] by name with the default sizes.
pub fn run(name: &str, cfg: &BenchConfig) -> Result<Report, BenchError> {
    match name {
        "session-init" => session_init(cfg, INIT_RUNS),
        "bytes-vs-sessions" => bytes_vs_sessions(cfg, MAX_SESSIONS, SESSION_STEP),
        "bytes-vs-stack" => bytes_vs_stack(cfg, STACK_TWEETS, &STACK_GROUPS),
        "patch-bytes" => patch_bytes(cfg, &PatchKind::ALL),
        "step-latency" => step_latency(cfg, LATENCY_ROUNDS),
        "idle-overhead" => idle_overhead(cfg, IDLE_RUNS),
        "remote-read" => remote_read(cfg, READ_PATTERNS),
        "all" => {
            let mut rep = Report::default();
            for b in BENCHES.iter().filter(|b| **b != "all") {
                rep.merge(run(b, cfg)?);
            }
            Ok(rep)
        }
        other => Err(BenchError::Unexpected(format!("unknown benchmark {other:?}"))),
    }
}

const WAIT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("cannot load workload: {0}")]
    Load(#[from] LoadError),
    #[error(transparent)]
    Manager(#[from] ManagerError),
    #[error(transparent)]
    Monitor(#[from] MonitorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("timed out waiting for {0}")]
    Timeout(&'static str),
    #[error("unexpected outcome: {0}")]
    Unexpected(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    Oop,
    Baseline,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Oop => "oop",
            Mode::Baseline => "baseline",
        }
    }

    /// `oop`, `baseline` or `both`.
    pub fn parse_set(s: &str) -> Option<Vec<Mode>> {
        match s {
            "oop" => Some(vec![Mode::Oop]),
            "baseline" => Some(vec![Mode::Baseline]),
            "both" => Some(vec![Mode::Oop, Mode::Baseline]),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub modes: Vec<Mode>,
    pub latency: Duration,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { modes: vec![Mode::Oop, Mode::Baseline], latency: Duration::ZERO, seed: 1 }
    }
}

impl BenchConfig {
    pub fn has(&self, m: Mode) -> bool {
        self.modes.contains(&m)
    }

    pub fn both(&self) -> bool {
        self.has(Mode::Oop) && self.has(Mode::Baseline)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub bench: String,
    pub mode: String,
    pub param: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub rows: Vec<Row>,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn row(&mut self, bench: &str, mode: &str, param: impl ToString, metric: &str, value: f64) {
        self.rows.push(Row {
            bench: bench.to_string(),
            mode: mode.to_string(),
            param: param.to_string(),
            metric: metric.to_string(),
            value,
        });
    }

    pub fn check(&mut self, name: impl Into<String>, pass: bool, detail: impl Into<String>) {
        self.checks.push(Check { name: name.into(), pass, detail: detail.into() });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failed(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }

    pub fn value(&self, mode: &str, param: &str, metric: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.mode == mode && r.param == param && r.metric == metric).map(|r| r.value)
    }

    /// `(param, value)` for every row of a mode and metric, in order.
    pub fn series(&self, mode: &str, metric: &str) -> Vec<(String, f64)> {
        self.rows.iter().filter(|r| r.mode == mode && r.metric == metric).map(|r| (r.param.clone(), r.value)).collect()
    }

    pub fn merge(&mut self, other: Report) {
        self.rows.extend(other.rows);
        self.checks.extend(other.checks);
    }

    /// Rows, then one `check` row per bound (1 = held).
    pub fn write_csv(&self, path: &Path) -> Result<(), BenchError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| BenchError::Io(e.into()))?;
        let checks = self.checks.iter().map(|c| Row {
            bench: "check".to_string(),
            mode: String::new(),
            param: c.name.clone(),
            metric: "pass".to_string(),
            value: if c.pass { 1.0 } else { 0.0 },
        });
        for row in self.rows.iter().cloned().chain(checks) {
            w.serialize(row).map_err(|e| BenchError::Io(e.into()))?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Coefficient of determination of the least-squares line through the
/// points.
pub fn r_squared(xs: &[f64], ys: &[f64]) -> f64 {
    let (mx, my) = (mean(xs), mean(ys));
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if syy == 0.0 {
        return 1.0;
    }
    let slope = sxy / sxx;
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - (my + slope * (x - mx))).powi(2)).sum();
    1.0 - ss_res / syy
}

pub(crate) fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// A monitor attached to a manager, both running `source`.
pub struct Pair {
    pub mgr: Manager,
    pub mon: Monitor,
    arrivals: mpsc::Receiver<PushEvent>,
}

impl Pair {
    pub fn new(source: &str, mode: Mode, latency: Duration) -> Result<Pair, BenchError> {
        let mgr = Manager::new(ProgramImage::load(source)?, ManagerConfig { latency, ..ManagerConfig::default() });
        let arrivals = mgr.subscribe();
        let addr = mgr.listen("127.0.0.1:0")?;
        let cfg = MonitorConfig { baseline: mode == Mode::Baseline, latency, ..MonitorConfig::default() };
        let mon = Monitor::new(ProgramImage::load(source)?, cfg);
        mon.attach(addr)?;
        Ok(Pair { mgr, mon, arrivals })
    }

    /// Bytes on the link in both directions so far.
    pub fn bytes(&self) -> u64 {
        self.mon.counters().snapshot().total()
    }

    /// Runs a task that must suspend, then waits until its session has been
    /// acknowledged by the manager.
    pub fn suspend(&self, class: &str, sel: &str, args: &TaskArgs) -> Result<Suspension, BenchError> {
        let mark = self.mon.events().len();
        let outcome = self.mon.run_task(class, sel, args)?;
        let t = Instant::now();
        let TaskOutcome::Suspended { session } = outcome else {
            return Err(BenchError::Unexpected(format!("{class}>>{sel} did not suspend: {outcome:?}")));
        };
        let (info, arrived) = loop {
            match self.arrivals.recv_timeout(WAIT) {
                Ok(PushEvent::SessionArrived { session: info }) => break (info, Instant::now()),
                Ok(_) => {}
                Err(_) => return Err(BenchError::Timeout("session arrival")),
            }
        };
        self.mon
            .wait_event(mark, WAIT, |e| matches!(e, MonitorEvent::SessionShipped { session: s, .. } if *s == session))
            .ok_or(BenchError::Timeout("session acknowledgement"))?;
        Ok(Suspension { at: t, arrived, info })
    }
}

pub struct Suspension {
    /// When the task returned suspended at the monitor.
    pub at: Instant,
    /// When the manager queued the session.
    pub arrived: Instant,
    pub info: SessionInfo,
}
