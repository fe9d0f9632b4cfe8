use std::time::Instant;

use super::{median, ms, BenchConfig, BenchError, Pair, Report};
use crate::vm::{StepOp, TaskArgs, Value};
use crate::workloads::STEPPER;

const BENCH: &str = "step-latency";
pub const STEP_OPS: [StepOp; 4] = [StepOp::Into, StepOp::Over, StepOp::Through, StepOp::Restart(0)];
pub const MIN_SPEEDUP: f64 = 100.0;

/// Wall time of each stepping operation on an open session, issued in a
/// fixed round-robin so both modes see the same sequence of states.
pub fn step_latency(cfg: &BenchConfig, rounds: usize) -> Result<Report, BenchError> {
    let mut rep = Report::default();
    let mut medians = Vec::new();
    for &mode in &cfg.modes {
        let pair = Pair::new(STEPPER, mode, cfg.latency)?;
        let s = pair.suspend("Stepper", "go", &TaskArgs::scalars([Value::Int(1 << 40)]))?;
        pair.mgr.open(s.info.id)?;
        let mut samples = vec![Vec::new(); STEP_OPS.len()];
        for _ in 0..rounds.max(1) {
            for (i, op) in STEP_OPS.iter().enumerate() {
                let t = Instant::now();
                pair.mgr.step(*op)?;
                samples[i].push(ms(t.elapsed()));
            }
        }
        for (i, op) in STEP_OPS.iter().enumerate() {
            for (j, v) in samples[i].iter().enumerate() {
                rep.row(BENCH, mode.name(), format!("{}#{j}", op.name()), "ms", *v);
            }
            let m = median(&samples[i]);
            rep.row(BENCH, mode.name(), op.name(), "median_ms", m);
            medians.push((mode, *op, m));
        }
    }
    if cfg.both() {
        for op in STEP_OPS {
            let get = |mode| medians.iter().find(|(m, o, _)| *m == mode && *o == op).map(|x| x.2).unwrap_or(f64::NAN);
            let (o, b) = (get(super::Mode::Oop), get(super::Mode::Baseline));
            let ratio = b / o;
            rep.row(BENCH, "ratio", op.name(), "baseline_over_oop", ratio);
            rep.check(
                format!("{}: baseline/oop median >= {MIN_SPEEDUP} at {} ms latency", op.name(), ms(cfg.latency)),
                ratio >= MIN_SPEEDUP,
                format!("{b:.3} ms / {o:.4} ms = {ratio:.0}"),
            );
        }
    }
    Ok(rep)
}
