use std::collections::{BTreeSet, VecDeque};

use super::{mean, r_squared, BenchConfig, BenchError, Mode, Pair, Report};
use crate::manager::{Manager, ManagerError};
use crate::vm::image::ARRAY_CLASS;
use crate::wire::{Preview, ValueSummary};
use crate::workloads::{corpus, tweet_args, TWEETS};

pub const STACK_GROUPS: [usize; 6] = [1, 10, 20, 30, 40, 50];
pub const MIN_R2: f64 = 0.99;
pub const STACK_TOLERANCE: f64 = 0.20;

/// Walks everything reachable from the open session's frames through
/// inspection requests, fetching long strings in full. Returns the number
/// of inspection calls.
pub fn inspect_all(mgr: &Manager) -> Result<usize, ManagerError> {
    let frames = mgr.view()?.frames.len();
    let mut seen = BTreeSet::new();
    let mut queue = VecDeque::new();
    let mut calls = 0;
    let mut visit = |s: &ValueSummary, base: &str, queue: &mut VecDeque<u64>| -> Vec<String> {
        let ValueSummary::Object { oid, class, fields } = s else { return Vec::new() };
        let mut long = Vec::new();
        for (i, (name, p)) in fields.iter().enumerate() {
            match p {
                Preview::Handle { oid, .. } => {
                    if seen.insert(*oid) {
                        queue.push_back(*oid);
                    }
                }
                Preview::LongString { .. } => long.push(if *oid == 0 {
                    let step = if name == "self" { "receiver".to_string() } else { format!("local:{name}") };
                    format!("{base}/{step}")
                } else if class == ARRAY_CLASS {
                    format!("index:{i}")
                } else {
                    format!("field:{name}")
                }),
                Preview::Scalar(_) => {}
            }
        }
        long
    };
    for k in 0..frames {
        let base = format!("frame:{k}");
        let s = mgr.inspect(0, &base)?;
        calls += 1;
        for path in visit(&s, &base, &mut queue) {
            mgr.inspect(0, &path)?;
            calls += 1;
        }
    }
    while let Some(oid) = queue.pop_front() {
        let s = mgr.inspect(oid, "")?;
        calls += 1;
        for path in visit(&s, "", &mut queue) {
            mgr.inspect(oid, &path)?;
            calls += 1;
        }
    }
    Ok(calls)
}

/// Ships one session per batch. In baseline mode each session is also
/// opened and fully inspected; those bytes are tracked separately.
struct Shipper {
    pair: Pair,
    mode: Mode,
    inspect_bytes: u64,
}

impl Shipper {
    fn new(mode: Mode, cfg: &BenchConfig) -> Result<Shipper, BenchError> {
        Ok(Shipper { pair: Pair::new(TWEETS, mode, cfg.latency)?, mode, inspect_bytes: 0 })
    }

    fn ship(&mut self, tweets: &[&str]) -> Result<(), BenchError> {
        let s = self.pair.suspend("TwitterApplication", "analyze", &tweet_args(tweets))?;
        if self.mode == Mode::Baseline {
            let before = self.pair.bytes();
            self.pair.mgr.open(s.info.id)?;
            inspect_all(&self.pair.mgr)?;
            self.pair.mgr.close()?;
            self.inspect_bytes += self.pair.bytes() - before;
        }
        Ok(())
    }

    /// Rows for the totals so far.
    fn record(&self, rep: &mut Report, bench: &str, param: usize) -> (f64, f64) {
        let total = self.pair.bytes() as f64;
        let transfer = total - self.inspect_bytes as f64;
        match self.mode {
            Mode::Oop => rep.row(bench, "oop", param, "bytes", total),
            Mode::Baseline => {
                rep.row(bench, "baseline", param, "transfer_bytes", transfer);
                rep.row(bench, "baseline", param, "transfer_inspect_bytes", total);
            }
        }
        (transfer, total)
    }
}

/// Bytes exchanged after k single-tweet sessions, k = step, 2 step, ..
/// `max`.
pub fn bytes_vs_sessions(cfg: &BenchConfig, max: usize, step: usize) -> Result<Report, BenchError> {
    const BENCH: &str = "bytes-vs-sessions";
    let mut rep = Report::default();
    let tweets = corpus();
    let mut totals = Vec::new();
    for &mode in &cfg.modes {
        let mut sh = Shipper::new(mode, cfg)?;
        let mut series = Vec::new();
        for i in 0..max {
            sh.ship(&tweets[i % tweets.len()..][..1])?;
            if (i + 1) % step == 0 {
                series.push((i + 1, sh.record(&mut rep, BENCH, i + 1).1));
            }
        }
        totals.push((mode, series));
    }
    if let Some((_, oop)) = totals.iter().find(|(m, _)| *m == Mode::Oop) {
        let xs: Vec<f64> = oop.iter().map(|(k, _)| *k as f64).collect();
        let ys: Vec<f64> = oop.iter().map(|(_, b)| *b).collect();
        let r2 = r_squared(&xs, &ys);
        rep.row(BENCH, "oop", "fit", "r_squared", r2);
        rep.check(format!("oop: bytes linear in sessions (R^2 >= {MIN_R2})"), r2 >= MIN_R2, format!("R^2 = {r2:.5}"));
        if let Some((_, base)) = totals.iter().find(|(m, _)| *m == Mode::Baseline) {
            let below = oop.iter().zip(base).all(|((_, o), (_, b))| o < b);
            let last = oop.len().saturating_sub(1);
            rep.check(
                "oop below baseline transfer+inspect on 1-tweet stacks",
                below,
                format!("at k={}: {:.0} vs {:.0} bytes", oop[last].0, oop[last].1, base[last].1),
            );
        }
    }
    Ok(rep)
}

/// Bytes exchanged for `total` tweets shipped in sessions of g tweets each,
/// for each g in `groups`.
pub fn bytes_vs_stack(cfg: &BenchConfig, total: usize, groups: &[usize]) -> Result<Report, BenchError> {
    const BENCH: &str = "bytes-vs-stack";
    let mut rep = Report::default();
    let tweets = corpus();
    let mut oop = Vec::new();
    let mut base = Vec::new();
    for &g in groups {
        for &mode in &cfg.modes {
            let mut sh = Shipper::new(mode, cfg)?;
            for batch in tweets[..total.min(tweets.len())].chunks(g) {
                sh.ship(batch)?;
            }
            let (_, all) = sh.record(&mut rep, BENCH, g);
            match mode {
                Mode::Oop => oop.push((g, all)),
                Mode::Baseline => base.push((g, all)),
            }
        }
    }
    if !oop.is_empty() {
        let m = mean(&oop.iter().map(|(_, b)| *b).collect::<Vec<_>>());
        let worst = oop.iter().map(|(_, b)| (b - m).abs() / m).fold(0.0, f64::max);
        rep.row(BENCH, "oop", "all", "max_relative_deviation", worst);
        rep.check(
            format!("oop: totals across groupings within {:.0}% of their mean", STACK_TOLERANCE * 100.0),
            worst <= STACK_TOLERANCE,
            format!("mean {m:.0} bytes, worst deviation {:.1}%", worst * 100.0),
        );
    }
    if !oop.is_empty() && !base.is_empty() {
        let above = oop.iter().zip(&base).all(|((_, o), (_, b))| b > o);
        let detail = oop
            .iter()
            .zip(&base)
            .map(|((g, o), (_, b))| format!("g={g}: {o:.0}/{b:.0}"))
            .collect::<Vec<_>>()
            .join(", ");
        rep.check("baseline transfer+inspect exceeds oop at every grouping", above, detail);
    }
    Ok(rep)
}
