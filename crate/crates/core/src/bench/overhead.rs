use std::time::Instant;

use super::{median, ms, BenchConfig, BenchError, Report};
use crate::manager::{Manager, ManagerConfig};
use crate::monitor::{Monitor, MonitorConfig, TaskOutcome};
use crate::vm::{ProgramImage, TaskArgs, Value};
use crate::workloads::{CLBG, CLBG_TASKS};

const BENCH: &str = "idle-overhead";
pub const TOLERANCE: f64 = 0.10;

fn timed(mon: &Monitor, sel: &str, n: i64) -> Result<(f64, u64), BenchError> {
    let t = Instant::now();
    let out = mon.run_task("Suite", sel, &TaskArgs::scalars([Value::Int(n)]))?;
    let elapsed = ms(t.elapsed());
    match out {
        TaskOutcome::Completed { instructions, .. } => Ok((elapsed, instructions)),
        other => Err(BenchError::Unexpected(format!("{sel}: {other:?}"))),
    }
}

/// Runs the clbg-mini suite on a monitor with no manager and on one attached
/// to an idle manager, alternating, and compares instruction counts and wall
/// time. Each round runs both back to back. The checked ratio compares the
/// fastest run of each, since interference on a shared host only adds time.
pub fn idle_overhead(cfg: &BenchConfig, runs: usize) -> Result<Report, BenchError> {
    let mut rep = Report::default();
    let image = ProgramImage::load(CLBG)?;
    let detached = Monitor::new(image.clone(), MonitorConfig::default());
    let mgr = Manager::new(image.clone(), ManagerConfig { latency: cfg.latency, ..ManagerConfig::default() });
    let attached = Monitor::new(image, MonitorConfig { latency: cfg.latency, ..MonitorConfig::default() });
    attached.attach(mgr.listen("127.0.0.1:0")?)?;
    let mut same = true;
    let mut worst: f64 = 0.0;
    for (sel, n) in CLBG_TASKS {
        let (mut off, mut on) = (Vec::new(), Vec::new());
        let (mut i_off, mut i_on) = (0, 0);
        timed(&detached, sel, n)?;
        for r in 0..runs.max(1) {
            let order: [&Monitor; 2] = if r % 2 == 0 { [&detached, &attached] } else { [&attached, &detached] };
            for mon in order {
                let (t, instr) = timed(mon, sel, n)?;
                if std::ptr::eq(mon, &detached) {
                    off.push(t);
                    i_off = instr;
                } else {
                    on.push(t);
                    i_on = instr;
                }
            }
        }
        let rounds: Vec<f64> = on.iter().zip(&off).map(|(a, d)| a / d).collect();
        for (r, (d, a)) in off.iter().zip(&on).enumerate() {
            rep.row(BENCH, "detached", format!("{sel}#{r}"), "ms", *d);
            rep.row(BENCH, "attached", format!("{sel}#{r}"), "ms", *a);
        }
        let fastest = |xs: &[f64]| xs.iter().copied().fold(f64::INFINITY, f64::min);
        let ratio = fastest(&on) / fastest(&off);
        same &= i_off == i_on;
        worst = worst.max((ratio - 1.0).abs());
        rep.row(BENCH, "detached", sel, "instructions", i_off as f64);
        rep.row(BENCH, "attached", sel, "instructions", i_on as f64);
        rep.row(BENCH, "detached", sel, "median_ms", median(&off));
        rep.row(BENCH, "attached", sel, "median_ms", median(&on));
        rep.row(BENCH, "detached", sel, "min_ms", fastest(&off));
        rep.row(BENCH, "attached", sel, "min_ms", fastest(&on));
        rep.row(BENCH, "ratio", sel, "paired_median", median(&rounds));
        rep.row(BENCH, "ratio", sel, "attached_over_detached", ratio);
    }
    rep.check("instruction counts identical with an idle monitor", same, "all clbg-mini tasks");
    rep.check(
        format!("wall-clock ratio within {:.0}%", TOLERANCE * 100.0),
        worst <= TOLERANCE,
        format!("worst deviation {:.1}%", worst * 100.0),
    );
    Ok(rep)
}
