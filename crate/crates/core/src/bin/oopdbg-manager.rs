//! Debugger process: receives sessions, serves the control API and reads
//! gdb-style commands from stdin.

use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::Parser;
use oopdbg_core::manager::cli::{execute, CliState};
use oopdbg_core::manager::{api, Manager, ManagerConfig, PushEvent};
use oopdbg_core::vm::ProgramImage;

#[derive(Debug, Parser)]
#[command(name = "oopdbg-manager", version, about = "Receive and debug sessions shipped by workers")]
struct Args {
    /// Address monitors connect to.
    #[arg(long, env = "OOPDBG_LISTEN")]
    listen: String,
    /// Guest program source; must match the workers' program.
    #[arg(long, env = "OOPDBG_PROGRAM")]
    program: PathBuf,
    /// Address of the line-delimited JSON control API.
    #[arg(long, env = "OOPDBG_API")]
    api: String,
    #[arg(long, env = "OOPDBG_LATENCY_MS", default_value_t = 0)]
    latency_ms: u64,
    /// Do not read commands from stdin; serve until killed.
    #[arg(long, env = "OOPDBG_HEADLESS")]
    headless: bool,
}

fn notice(e: &PushEvent) -> String {
    match e {
        PushEvent::SessionArrived { session } => match &session.exception {
            Some(x) => format!("session {} arrived ({}: {})", session.id, x.class, x.message),
            None => format!("session {} arrived ({} frames)", session.id, session.frames),
        },
        other => serde_json::to_string(other).expect("serializable"),
    }
}

fn run(a: Args) -> Result<(), String> {
    let src = std::fs::read_to_string(&a.program).map_err(|e| format!("{}: {e}", a.program.display()))?;
    let image = ProgramImage::load(&src).map_err(|e| e.to_string())?;
    let cfg = ManagerConfig { latency: Duration::from_millis(a.latency_ms), ..ManagerConfig::default() };
    let mgr = Arc::new(Manager::new(image, cfg));
    let listen = mgr.listen(a.listen.as_str()).map_err(|e| format!("{}: {e}", a.listen))?;
    let api_addr = api::serve(Arc::clone(&mgr), a.api.as_str()).map_err(|e| format!("{}: {e}", a.api))?;
    eprintln!("listening for monitors on {listen}, control API on {api_addr}");
    let events = mgr.subscribe();
    std::thread::spawn(move || {
        for e in events {
            eprintln!("[{}]", notice(&e));
        }
    });
    if a.headless {
        loop {
            std::thread::park();
        }
    }
    let mut state = CliState::default();
    let stdin = std::io::stdin();
    let mut out = std::io::stdout();
    loop {
        print!("(oopdbg) ");
        out.flush().map_err(|e| e.to_string())?;
        let mut line = String::new();
        if stdin.lock().read_line(&mut line).map_err(|e| e.to_string())? == 0 {
            return Ok(());
        }
        match line.trim() {
            "quit" | "exit" => return Ok(()),
            cmd => match execute(&mgr, &mut state, cmd) {
                Ok(text) if text.is_empty() => {}
                Ok(text) => println!("{text}"),
                Err(e) => println!("error: {e}"),
            },
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("oopdbg-manager: {e}");
            ExitCode::from(2)
        }
    }
}
