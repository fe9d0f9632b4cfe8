//! Runs one guest task under a monitor attached to a manager.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::mpsc;
use std::time::Duration;

use clap::Parser;
use oopdbg_core::monitor::{Monitor, MonitorConfig, MonitorEvent, TaskOutcome};
use oopdbg_core::vm::{ProgramImage, TaskArgs, Value};
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "oopdbg-worker", version, about = "Run a guest task with a debugging monitor")]
struct Args {
    /// Guest program source.
    #[arg(long, env = "OOPDBG_PROGRAM")]
    program: PathBuf,
    /// Manager address to ship sessions to.
    #[arg(long, env = "OOPDBG_MANAGER")]
    manager: String,
    /// Ship empty sessions and serve remote debugging requests instead.
    #[arg(long, env = "OOPDBG_BASELINE")]
    baseline: bool,
    /// Delay added before every frame this process sends.
    #[arg(long, env = "OOPDBG_LATENCY_MS", default_value_t = 0)]
    latency_ms: u64,
    /// `Class>>selector`, or a selector defined by exactly one class.
    #[arg(long, env = "OOPDBG_TASK")]
    task: String,
    /// Task arguments: JSON scalars, bare words as strings, or
    /// `lines:FILE` for an Array of the file's lines.
    #[arg(long, env = "OOPDBG_TASK_ARGS", num_args = 0.., value_delimiter = ' ')]
    task_args: Vec<String>,
    #[arg(long, env = "OOPDBG_MONITOR_ID", default_value_t = 1)]
    monitor_id: u64,
    /// Give up if the manager cannot be reached within this many seconds.
    #[arg(long, env = "OOPDBG_CONNECT_TIMEOUT", default_value_t = 10)]
    connect_timeout: u64,
}

fn log(v: serde_json::Value) {
    println!("{v}");
}

fn scalar(s: &str) -> Value {
    match serde_json::from_str::<serde_json::Value>(s) {
        Ok(serde_json::Value::Null) => Value::Nil,
        Ok(serde_json::Value::Bool(b)) => Value::Bool(b),
        Ok(serde_json::Value::Number(n)) => n.as_i64().map_or_else(|| Value::Float(n.as_f64().unwrap_or(0.0)), Value::Int),
        Ok(serde_json::Value::String(s)) => Value::from(s),
        _ => Value::from(s),
    }
}

fn task_args(raw: &[String]) -> Result<TaskArgs, String> {
    let mut args = TaskArgs::new();
    for a in raw.iter().filter(|a| !a.is_empty()) {
        match a.strip_prefix("lines:") {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| format!("{path}: {e}"))?;
                let items = text.lines().filter(|l| !l.is_empty()).map(Value::from).collect();
                let arr = args.alloc("Array", items);
                args.push(Value::Ref(arr));
            }
            None => {
                args.push(scalar(a));
            }
        }
    }
    Ok(args)
}

fn run(a: Args) -> Result<bool, String> {
    let src = std::fs::read_to_string(&a.program).map_err(|e| format!("{}: {e}", a.program.display()))?;
    let image = ProgramImage::load(&src).map_err(|e| e.to_string())?;
    let (class, selector) = match a.task.split_once(">>") {
        Some((c, s)) => (c.to_string(), s.to_string()),
        None => {
            let c = image.class_defining(&a.task).ok_or(format!("no single class defines {:?}", a.task))?;
            (c.to_string(), a.task.clone())
        }
    };
    let args = task_args(&a.task_args)?;
    let cfg = MonitorConfig {
        monitor_id: a.monitor_id,
        baseline: a.baseline,
        latency: Duration::from_millis(a.latency_ms),
        echo_output: true,
        ..MonitorConfig::default()
    };
    let mon = Monitor::new(image, cfg);
    let (tx, rx) = mpsc::channel();
    mon.set_event_sink(move |e: &MonitorEvent| {
        log(serde_json::to_value(e).expect("serializable"));
        let _ = tx.send(e.clone());
    });
    let deadline = std::time::Instant::now() + Duration::from_secs(a.connect_timeout);
    loop {
        match mon.attach(a.manager.as_str()) {
            Ok(()) => break,
            Err(e) if std::time::Instant::now() < deadline => {
                log::debug!("attach failed, retrying: {e}");
                std::thread::sleep(Duration::from_millis(200));
            }
            Err(e) => return Err(e.to_string()),
        }
    }
    match mon.run_task(&class, &selector, &args).map_err(|e| e.to_string())? {
        TaskOutcome::Completed { .. } => return Ok(true),
        TaskOutcome::Failed(_) => return Ok(false),
        TaskOutcome::Suspended { .. } => {}
    }
    // Wait for the debugger to decide; a restart may suspend again.
    for e in rx {
        match e {
            MonitorEvent::TaskCompleted { .. } => return Ok(true),
            MonitorEvent::TaskFailed { .. } => return Ok(false),
            MonitorEvent::SessionResumed { ref strategy, .. } if strategy == "discard" => {
                if mon.retained_sessions().is_empty() {
                    return Ok(true);
                }
            }
            MonitorEvent::Disconnected if mon.retained_sessions().is_empty() => return Ok(false),
            _ => {}
        }
    }
    Ok(false)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Args::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            log(json!({ "event": "error", "message": e }));
            ExitCode::from(2)
        }
    }
}
