use std::time::Instant;

use super::{median, ms, BenchConfig, BenchError, Mode, Pair, Report};
use crate::workloads::{corpus, tweet_args, TWEETS};

const BENCH: &str = "session-init";
pub const MAX_OBJECTS: u32 = 100;
pub const BUDGET_MS: f64 = 10.0;
pub const REPLAYS: usize = 10;

/// Time from suspension to a ready debug view for single-tweet sessions,
/// split into queueing, materialization and replay.
pub fn session_init(cfg: &BenchConfig, runs: usize) -> Result<Report, BenchError> {
    let mut rep = Report::default();
    let tweets = corpus();
    for &mode in &cfg.modes {
        let pair = Pair::new(TWEETS, mode, cfg.latency)?;
        let mut build = Vec::new();
        let mut init_covers = true;
        let mut max_objects = 0;
        for i in 0..runs.max(1) {
            let tweet = &tweets[i % tweets.len()..][..1];
            let s = pair.suspend("TwitterApplication", "analyze", &tweet_args(tweet))?;
            pair.mgr.open(s.info.id)?;
            let ready = Instant::now();
            let t = pair.mgr.last_timings();
            let (queue, init) = (ms(s.arrived - s.at), ms(ready - s.at));
            let (mat, rep_ms) = (ms(t.materialize), ms(t.replay));
            init_covers &= init >= mat + rep_ms;
            max_objects = max_objects.max(s.info.objects);
            build.push(mat + rep_ms);
            for (metric, v) in
                [("t_queue_ms", queue), ("t_materialize_ms", mat), ("t_replay_ms", rep_ms), ("t_init_ms", init)]
            {
                rep.row(BENCH, mode.name(), i, metric, v);
            }
            rep.row(BENCH, mode.name(), i, "objects", f64::from(s.info.objects));
            if mode == Mode::Oop && i == 0 {
                let first = pair.mgr.view()?;
                let mut same = true;
                for _ in 0..REPLAYS {
                    same &= pair.mgr.replay(s.info.id)? == first;
                }
                rep.check(
                    format!("{}: view identical across {REPLAYS} replays", mode.name()),
                    same,
                    format!("session {}", s.info.id),
                );
            }
            pair.mgr.close()?;
        }
        let med = median(&build);
        rep.row(BENCH, mode.name(), "median", "t_materialize_plus_replay_ms", med);
        rep.check(
            format!("{}: t_init covers materialize + replay", mode.name()),
            init_covers,
            "every sample",
        );
        if mode == Mode::Oop {
            rep.check(
                format!("oop: median materialize + replay < {BUDGET_MS} ms"),
                med < BUDGET_MS && max_objects <= MAX_OBJECTS,
                format!("median {med:.3} ms over {} runs, at most {max_objects} objects", build.len()),
            );
        }
    }
    Ok(rep)
}
