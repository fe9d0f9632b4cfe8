//! End-to-end acceptance criteria. Runs sequentially in one test so the
//! timing-sensitive criteria do not compete with each other for cores, and
//! prints one PASS/FAIL line per criterion.

mod common;

use std::collections::HashMap;
use std::time::{Duration, Instant};

use oopdbg_core::bench::{self, BenchConfig, Mode, Pair, PatchKind, Report, STACK_GROUPS};
use oopdbg_core::monitor::MonitorEvent;
use oopdbg_core::serial::{blob_stats, materialize, snapshot, InertProxies};
use oopdbg_core::vm::{
    spawn, ChangeRecord, ExecutionState, NoFiles, Oid, ProgramImage, StepOp, TaskArgs, Value, Vm,
};
use oopdbg_core::wire::ResumeStrategy;
use oopdbg_core::workloads::{self, SENSOR, SENSOR_FIX, STEPPER};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 0x00d6_2019;
const WAIT: Duration = Duration::from_secs(5);

const ISOLATION_OPS: usize = 24;
const ISOLATION_LIMIT: Duration = Duration::from_secs(5);
const REPLAY_PROGRAMS: usize = 50;
const REPLAY_MAX_STEPS: usize = 30;
const REPLAY_LIMIT: Duration = Duration::from_secs(60);
const CLOSURE_GRAPHS: usize = 200;
const CLOSURE_MAX_NODES: usize = 500;
const CLOSURE_LIMIT: Duration = Duration::from_secs(30);
const LATENCY: Duration = Duration::from_millis(5);
const LATENCY_ROUNDS: usize = 15;
const LATENCY_LIMIT: Duration = Duration::from_secs(60);
const PATCH_LIMIT: Duration = Duration::from_secs(10);
const BYTES_LIMIT: Duration = Duration::from_secs(120);
const INIT_RUNS: usize = 30;
const INIT_LIMIT: Duration = Duration::from_secs(10);
const IDLE_RUNS: usize = 11;
const IDLE_LIMIT: Duration = Duration::from_secs(120);
const READ_PATTERNS: usize = 100;
const READ_LIMIT: Duration = Duration::from_secs(30);
const E2E_LIMIT: Duration = Duration::from_secs(10);
const FUEL: u64 = 200_000;

type Outcome = Result<String, String>;

fn from_report(rep: Result<Report, bench::BenchError>) -> Outcome {
    let rep = rep.map_err(|e| e.to_string())?;
    let failed: Vec<String> = rep.failed().iter().map(|c| format!("{}: {}", c.name, c.detail)).collect();
    if failed.is_empty() {
        Ok(rep.checks.iter().map(|c| c.detail.clone()).collect::<Vec<_>>().join("; "))
    } else {
        Err(failed.join("; "))
    }
}

fn isolation() -> Outcome {
    let mut out = Vec::new();
    for mode in [Mode::Oop, Mode::Baseline] {
        let pair = Pair::new(STEPPER, mode, Duration::ZERO).map_err(|e| e.to_string())?;
        let s = pair.suspend("Stepper", "go", &TaskArgs::scalars([Value::Int(1000)])).map_err(|e| e.to_string())?;
        let origin = pair.mon.retained_sessions()[0];
        let hash = || pair.mon.retained_fingerprint(origin).expect("retained");
        let before = hash();
        pair.mgr.open(s.info.id).map_err(|e| e.to_string())?;
        let mut mutated = None;
        for i in 0..ISOLATION_OPS {
            let r = match i % 8 {
                0 => pair.mgr.step(StepOp::Into).map(|_| ()),
                1 => pair.mgr.step(StepOp::Over).map(|_| ()),
                2 => pair.mgr.evaluate(0, "n + 1").map(|_| ()),
                3 => pair.mgr.step(StepOp::Through).map(|_| ()),
                4 => pair.mgr.inspect(0, "frame:0/local:i").map(|_| ()),
                5 => {
                    let h = hash();
                    let r = pair.mgr.evaluate(0, &format!("total := {i}")).map(|_| ());
                    mutated.get_or_insert((h, hash()));
                    r
                }
                6 => pair.mgr.step(StepOp::Restart(0)).map(|_| ()),
                _ => pair.mgr.step(StepOp::Over).map(|_| ()),
            };
            r.map_err(|e| format!("{} op {i}: {e}", mode.name()))?;
        }
        let after = hash();
        let (pre, post) = mutated.expect("mutating eval ran");
        match mode {
            Mode::Oop if before != after || pre != post => return Err("out-of-place: monitor state changed".into()),
            Mode::Baseline if pre == post => return Err("baseline: mutating eval left monitor state unchanged".into()),
            _ => out.push(format!("{}: {} ops, equal={}", mode.name(), ISOLATION_OPS, before == after)),
        }
    }
    Ok(out.join(", "))
}

fn halted(src: &str, arg: i64) -> Result<(ProgramImage, ExecutionState), String> {
    let img = ProgramImage::load(src).map_err(|e| format!("{e}\n{src}"))?;
    let mut st = spawn(&img, "P", "go", &TaskArgs::scalars([Value::Int(arg)])).map_err(|e| e.to_string())?;
    Vm::new(&img, &mut NoFiles::default()).with_fuel(FUEL).run(&mut st).map_err(|e| e.to_string())?;
    if !st.status.is_suspended() {
        return Err(format!("program did not suspend: {:?}\n{src}", st.status));
    }
    Ok((img, st))
}

fn replay_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut steps = 0;
    for p in 0..REPLAY_PROGRAMS {
        let src = common::ProgramGen::generate(&mut rng);
        let (img, mut direct) = halted(&src, rng.gen_range(0..50))?;
        let blob = snapshot(&direct, img.hash(), 1, 1, &mut []).map_err(|e| e.to_string())?;
        let mut copy = materialize(&blob, &img, &mut InertProxies).map_err(|e| e.to_string())?.state;
        common::isomorphic(&direct, &copy).map_err(|e| format!("program {p} after materialize: {e}"))?;
        for i in 0..rng.gen_range(1..=REPLAY_MAX_STEPS) {
            let op = match rng.gen_range(0..11) {
                0..=3 => StepOp::Into,
                4..=6 => StepOp::Over,
                7 | 8 => StepOp::Through,
                9 => StepOp::Restart(rng.gen_range(0..direct.depth().max(1))),
                _ => StepOp::Proceed,
            };
            let a = Vm::new(&img, &mut NoFiles::default()).with_fuel(FUEL).step(&mut direct, op);
            let b = Vm::new(&img, &mut NoFiles::default()).with_fuel(FUEL).step(&mut copy, op);
            if a != b {
                return Err(format!("program {p} step {i} {op:?}: {a:?} vs {b:?}"));
            }
            common::isomorphic(&direct, &copy).map_err(|e| format!("program {p} step {i} {op:?}: {e}"))?;
            steps += 1;
        }
    }
    Ok(format!("{REPLAY_PROGRAMS} programs, {steps} steps isomorphic"))
}

fn closure_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 1);
    let img = ProgramImage::load("class T { method go() { var a, b, c, d; halt; } }").map_err(|e| e.to_string())?;
    let mut records = 0;
    for g in 0..CLOSURE_GRAPHS {
        let mut st = spawn(&img, "T", "go", &TaskArgs::new()).map_err(|e| e.to_string())?;
        Vm::new(&img, &mut NoFiles::default()).run(&mut st).map_err(|e| e.to_string())?;
        let n = rng.gen_range(1..=CLOSURE_MAX_NODES);
        common::random_graph(&mut st, &mut rng, n);
        let roots = common::roots(&st);
        let order = common::bfs_closure(&st.heap, &roots);
        if order.iter().copied().collect::<std::collections::BTreeSet<_>>() != common::fixpoint_closure(&st.heap, &roots) {
            return Err(format!("graph {g}: oracles disagree"));
        }
        let blob = snapshot(&st, img.hash(), 1, 1, &mut []).map_err(|e| e.to_string())?;
        let stats = blob_stats(&blob).map_err(|e| e.to_string())?;
        if stats.object_count as usize != order.len() {
            return Err(format!("graph {g}: {} records, closure has {}", stats.object_count, order.len()));
        }
        // Record i is the i-th object discovered, with references renumbered.
        let local: HashMap<Oid, Oid> = order.iter().enumerate().map(|(i, o)| (*o, Oid(i as u64 + 1))).collect();
        let m = materialize(&blob, &img, &mut InertProxies).map_err(|e| e.to_string())?;
        for (i, oid) in order.iter().enumerate() {
            let want = &st.heap[oid];
            let got = &m.state.heap[&Oid(i as u64 + 1)];
            let renamed: Vec<Value> = want
                .fields
                .iter()
                .map(|v| match v {
                    Value::Ref(o) => Value::Ref(local[o]),
                    v => v.clone(),
                })
                .collect();
            if got.class != want.class || got.fields != renamed {
                return Err(format!("graph {g}: record {i} differs from {oid:?}"));
            }
        }
        records += order.len();
    }
    Ok(format!("{CLOSURE_GRAPHS} graphs, {records} records"))
}

fn e2e_sensor() -> Outcome {
    let pair = Pair::new(SENSOR, Mode::Oop, Duration::ZERO).map_err(|e| e.to_string())?;
    let err = |e: &dyn std::fmt::Display| e.to_string();
    let s = pair.suspend("Sensor", "average", &workloads::sensor_args(&["4", "nan", "8"])).map_err(|e| err(&e))?;
    let raised = |v: &oopdbg_core::manager::DebugView| v.exception.as_ref().is_some_and(|x| x.class == "NumberParseError");
    let first = pair.mgr.open(s.info.id).map_err(|e| err(&e))?;
    if !raised(&first) {
        return Err(format!("session did not carry the parse error: {:?}", first.exception));
    }
    let replayed = pair.mgr.replay(s.info.id).map_err(|e| err(&e))?;
    if !raised(&replayed) || replayed != first {
        return Err("replay did not reproduce the raise".into());
    }
    pair.mgr
        .record_change(ChangeRecord::ChangeMethod {
            class: "Sensor".into(),
            selector: "parse".into(),
            source: SENSOR_FIX.into(),
        })
        .map_err(|e| err(&e))?;
    let mark = pair.mon.events().len();
    pair.mgr.commit(None).map_err(|e| err(&e))?;
    if pair.mon.image().method("Sensor", "parse").is_none_or(|m| m.source != SENSOR_FIX) {
        return Err("fix not committed at the monitor".into());
    }
    pair.mgr.resume(s.info.id, ResumeStrategy::RestartTask).map_err(|e| err(&e))?;
    match pair.mon.wait_event(mark, WAIT, |e| matches!(e, MonitorEvent::TaskCompleted { .. } | MonitorEvent::TaskFailed { .. })) {
        Some(MonitorEvent::TaskCompleted { result, .. }) if result == "4" => Ok(format!("restarted task returned {result}")),
        other => Err(format!("restart did not complete: {other:?}")),
    }
}

#[test]
fn acceptance() {
    let cfg = BenchConfig { seed: SEED, ..BenchConfig::default() };
    let latency_cfg = BenchConfig { latency: LATENCY, ..cfg.clone() };
    type Criterion<'a> = (&'a str, Duration, Box<dyn Fn() -> Outcome + 'a>);
    let criteria: Vec<Criterion> = vec![
        ("isolation", ISOLATION_LIMIT, Box::new(isolation)),
        ("replay equivalence", REPLAY_LIMIT, Box::new(replay_equivalence)),
        ("closure exactness", CLOSURE_LIMIT, Box::new(closure_exactness)),
        ("step latency ratio", LATENCY_LIMIT, Box::new(|| from_report(bench::step_latency(&latency_cfg, LATENCY_ROUNDS)))),
        ("patch commit bytes", PATCH_LIMIT, Box::new(|| from_report(bench::patch_bytes(&cfg, &PatchKind::ALL)))),
        (
            "byte curve shapes",
            BYTES_LIMIT,
            Box::new(|| {
                let mut rep = bench::bytes_vs_sessions(&cfg, bench::MAX_SESSIONS, bench::SESSION_STEP);
                if let Ok(r) = &mut rep {
                    match bench::bytes_vs_stack(&cfg, bench::STACK_TWEETS, &STACK_GROUPS) {
                        Ok(more) => r.merge(more),
                        Err(e) => return Err(e.to_string()),
                    }
                }
                from_report(rep)
            }),
        ),
        ("session init", INIT_LIMIT, Box::new(|| from_report(bench::session_init(&cfg, INIT_RUNS)))),
        ("idle transparency", IDLE_LIMIT, Box::new(|| from_report(bench::idle_overhead(&cfg, IDLE_RUNS)))),
        ("remote resources", READ_LIMIT, Box::new(|| from_report(bench::remote_read(&cfg, READ_PATTERNS)))),
        ("end-to-end sensor fix", E2E_LIMIT, Box::new(e2e_sensor)),
    ];
    let mut failed = Vec::new();
    for (name, limit, run) in &criteria {
        let t = Instant::now();
        let outcome = run();
        let took = t.elapsed();
        let (pass, detail) = match outcome {
            Ok(d) if took <= *limit => (true, d),
            Ok(d) => (false, format!("took {took:.1?}, limit {limit:?}; {d}")),
            Err(d) => (false, d),
        };
        println!("{} {name} [{:.2}s / {}s]: {detail}", if pass { "PASS" } else { "FAIL" }, took.as_secs_f64(), limit.as_secs());
        if !pass {
            failed.push(*name);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
