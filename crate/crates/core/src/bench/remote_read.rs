use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BenchConfig, BenchError, Mode, Pair, Report};
use crate::remote::{ProxyHost, DEFAULT_BUFFER};
use crate::serial::{ProxyDescriptor, ProxyFactory, ResourceKind};
use crate::vm::{ResourceHost, StepOp, TaskArgs, Value};
use crate::wire::ValueSummary;
use crate::workloads::{FILE_HEADER, FILE_OPEN_LINE};

const BENCH: &str = "remote-read";
const FILE_SIZE: usize = 96 * 1024;
const MAX_READ: usize = 12_000;

fn listing(dir: &Path) -> Result<Vec<PathBuf>, BenchError> {
    let mut v = std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<Result<Vec<_>, _>>()?;
    v.sort();
    Ok(v)
}

/// One random sequential read pattern: a start offset and read lengths,
/// possibly running past the end.
fn pattern(rng: &mut ChaCha8Rng, size: usize) -> (usize, Vec<usize>) {
    let start = if rng.gen_bool(0.3) { 0 } else { rng.gen_range(0..=size) };
    let reads = (0..rng.gen_range(1..40)).map(|_| rng.gen_range(1..=MAX_READ)).collect();
    (start, reads)
}

/// Reads through a buffered remote stream compared with local positional
/// reads, plus the header-check program stepped over its file open.
pub fn remote_read(cfg: &BenchConfig, patterns: usize) -> Result<Report, BenchError> {
    let mut rep = Report::default();
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("tweets.bin");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut data: Vec<u8> = (0..FILE_SIZE).map(|_| rng.gen()).collect();
    data[..2].copy_from_slice(&[0, 1]);
    std::fs::write(&path, &data)?;
    let path_str = path.to_string_lossy().to_string();
    let before = listing(dir.path())?;
    let cwd = std::env::current_dir()?;
    let cwd_before = listing(&cwd)?;

    let pair = Pair::new(FILE_HEADER, Mode::Oop, cfg.latency)?;
    let conn = pair.mgr.connection(pair.mon.id()).ok_or(BenchError::Unexpected("monitor not linked".into()))?;
    let (mut identical, mut within) = (0, 0);
    let mut worst_excess: i64 = i64::MIN;
    for p in 0..patterns {
        let session = 1_000_000 + p as u64;
        let (rid, size) = pair.mon.resources().open_for(session, &path_str).map_err(BenchError::Unexpected)?;
        let mut host = ProxyHost::with_buffer(Some(conn.clone()), session, DEFAULT_BUFFER);
        let (start, reads) = pattern(&mut rng, FILE_SIZE);
        let desc = ProxyDescriptor {
            resource_id: rid,
            kind: ResourceKind::File,
            class: "FileStream".into(),
            path: path_str.clone(),
            position: start as u64,
            size: Some(size),
        };
        let tag = host.build(&desc).map_err(BenchError::Unexpected)?.external.expect("open proxy");
        let (mut pos, mut got, mut want) = (start, Vec::new(), Vec::new());
        let mut ok = true;
        for n in reads {
            let chunk = host.read_at(tag, pos as u64, n).map_err(BenchError::Unexpected)?;
            let local = &data[pos.min(FILE_SIZE)..(pos + n).min(FILE_SIZE)];
            ok &= chunk == local;
            pos += chunk.len();
            got.extend(chunk);
            want.extend_from_slice(local);
        }
        let b = got.len() as u64;
        let bound = b.div_ceil(DEFAULT_BUFFER as u64) + 1;
        let trips = host.round_trips();
        identical += usize::from(ok && got == want);
        within += usize::from(trips <= bound);
        worst_excess = worst_excess.max(trips as i64 - bound as i64);
        rep.row(BENCH, "oop", p, "bytes_read", b as f64);
        rep.row(BENCH, "oop", p, "round_trips", trips as f64);
        rep.row(BENCH, "oop", p, "round_trip_bound", bound as f64);
        pair.mon.resources().release_session(session);
    }
    rep.check(
        format!("{patterns} read patterns byte-identical to local reads"),
        identical == patterns,
        format!("{identical}/{patterns}"),
    );
    rep.check(
        "round trips <= ceil(B/4096) + 1",
        within == patterns,
        format!("{within}/{patterns}, worst margin {worst_excess}"),
    );

    // Stepping over the open in the debugger opens the file at the monitor.
    let table_before = pair.mon.resources().len();
    let s = pair.suspend("TwitterApplication", "analyzeFileNamed", &TaskArgs::scalars([Value::from(path_str.as_str())]))?;
    let mut line = pair.mgr.open(s.info.id)?.frames[0].line;
    while line <= FILE_OPEN_LINE {
        line = pair.mgr.step(StepOp::Over)?.frames[0].line;
    }
    let opened_at_monitor = pair.mon.resources().len() == table_before + 1;
    let proxied = matches!(pair.mgr.inspect(0, "frame:0/local:aFileStream")?, ValueSummary::Proxy { .. });
    let done = pair.mgr.step(StepOp::Proceed)?;
    let result = pair.mgr.live_state().and_then(|st| st.result);
    let expected: String = data[2..12].iter().map(|&b| char::from(b)).collect();
    rep.check(
        format!("stepping over line {FILE_OPEN_LINE} opens the file at the monitor"),
        opened_at_monitor && proxied && done.status == "completed" && result == Some(Value::from(expected.as_str())),
        format!("table grew: {opened_at_monitor}, proxy: {proxied}, status {}", done.status),
    );
    let created = listing(dir.path())? != before || listing(&cwd)? != cwd_before;
    rep.check("no files created by the debugger", !created, format!("{} checked", dir.path().display()));
    Ok(rep)
}
