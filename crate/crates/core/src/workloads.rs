//! Built-in guest programs and their inputs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::vm::{TaskArgs, Value};

/// Tweet analysis: `TwitterApplication>>analyze:` over an array of tweet
/// JSON strings. Halts after processing its batch.
pub const TWEETS: &str = include_str!("../workloads/tweets.gst");
/// Header check over a file; halts before (`analyzeFileNamed`) or after
/// (`analyzeOpenedFileNamed`) opening it.
pub const FILE_HEADER: &str = include_str!("../workloads/fileheader.gst");
/// `Sensor>>average:` over reading strings; `"nan"` raises.
pub const SENSOR: &str = include_str!("../workloads/sensor.gst");
/// `Stepper>>go:`, a long loop with sends and blocks to step through.
pub const STEPPER: &str = include_str!("../workloads/stepper.gst");
/// Small compute suite on `Suite`.
pub const CLBG: &str = include_str!("../workloads/clbg.gst");

/// Line of `analyzeFileNamed` that opens the file.
pub const FILE_OPEN_LINE: u32 = 4;

/// Corrected `Sensor>>parse:` used by the bug-fix scenario.
pub const SENSOR_FIX: &str =
    "method parse(raw) { if (raw == \"nan\") { return 0; } return @parseNumber(raw); }";

/// The checked-in tweet corpus, one JSON document per line.
pub const TWEET_CORPUS: &str = include_str!("../data/tweets.jsonl");
pub const CORPUS_SEED: u64 = 2019;
pub const CORPUS_SIZE: usize = 600;

/// `(selector, argument)` of each clbg-mini task.
pub const CLBG_TASKS: [(&str, i64); 4] = [("nbody", 2000), ("spectral", 24), ("fannkuch", 7), ("binarytrees", 9)];

const WORDS: &[&str] = &[
    "the", "a", "debugging", "cluster", "node", "stream", "data", "latency", "remote", "session", "bug", "fix",
    "deploy", "today", "again", "why", "is", "my", "job", "failing", "on", "prod", "works", "locally", "love",
    "coffee", "morning", "release", "new", "version", "out", "now", "check", "this", "thread", "about", "memory",
    "leak", "in", "our", "parser", "sensor", "reading", "weird", "values", "after", "update", "great", "talk",
    "conference", "slides", "online", "team", "shipping", "faster", "than", "ever", "rust", "smalltalk", "pharo",
];
const TAGS: &[&str] = &["debugging", "devops", "iot", "pharo", "bigdata", "cloud", "programming", "opensource"];
const PLACES: &[&str] = &["Brussels", "Lille", "Santiago", "Paris", "Ghent", "Berlin", "Montreal", ""];
const SOURCES: &[&str] = &[
    "<a href=\"http://twitter.com/download/android\" rel=\"nofollow\">Twitter for Android</a>",
    "<a href=\"http://twitter.com/download/iphone\" rel=\"nofollow\">Twitter for iPhone</a>",
    "<a href=\"https://mobile.twitter.com\" rel=\"nofollow\">Twitter Web App</a>",
];
const MONTHS: &[&str] = &["Jan", "Feb", "Mar", "Apr", "May", "Jun", "Jul", "Aug", "Sep", "Oct", "Nov", "Dec"];
const DAYS: &[&str] = &["Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun"];

fn sentence(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> String {
    let n = rng.gen_range(lo..=hi);
    (0..n).map(|_| *WORDS.choose(rng).expect("nonempty")).collect::<Vec<_>>().join(" ")
}

fn date(rng: &mut ChaCha8Rng, year: u32) -> String {
    format!(
        "{} {} {:02} {:02}:{:02}:{:02} +0000 {year}",
        DAYS.choose(rng).expect("nonempty"),
        MONTHS.choose(rng).expect("nonempty"),
        rng.gen_range(1..=28),
        rng.gen_range(0..24),
        rng.gen_range(0..60),
        rng.gen_range(0..60)
    )
}

/// Synthetic tweets shaped like the public v1.1 status JSON.
pub fn generate_tweets(seed: u64, n: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let id: u64 = 1_100_000_000_000_000_000 + i as u64 * 7919 + rng.gen_range(0..7919);
            let uid: u64 = rng.gen_range(10_000..5_000_000_000);
            let screen = format!("{}_{}", WORDS.choose(&mut rng).expect("nonempty"), rng.gen_range(1..9999));
            let tag = *TAGS.choose(&mut rng).expect("nonempty");
            let mention = format!("{}{}", WORDS.choose(&mut rng).expect("nonempty"), rng.gen_range(1..999));
            let mut text = sentence(&mut rng, 8, 18);
            text.push_str(&format!(" #{tag} @{mention}"));
            let tag_at = text.len() - tag.len() - mention.len() - 3;
            let doc = json!({
                "created_at": date(&mut rng, 2019),
                "id": id,
                "id_str": id.to_string(),
                "text": text,
                "source": SOURCES.choose(&mut rng).expect("nonempty"),
                "truncated": false,
                "in_reply_to_status_id": null,
                "in_reply_to_user_id": null,
                "in_reply_to_screen_name": null,
                "user": {
                    "id": uid,
                    "id_str": uid.to_string(),
                    "name": sentence(&mut rng, 2, 3),
                    "screen_name": screen,
                    "location": PLACES.choose(&mut rng).expect("nonempty"),
                    "url": format!("https://example.org/{screen}"),
                    "description": sentence(&mut rng, 6, 16),
                    "protected": false,
                    "verified": rng.gen_bool(0.05),
                    "followers_count": rng.gen_range(0..100_000),
                    "friends_count": rng.gen_range(0..5_000),
                    "listed_count": rng.gen_range(0..300),
                    "favourites_count": rng.gen_range(0..50_000),
                    "statuses_count": rng.gen_range(1..200_000),
                    "created_at": date(&mut rng, 2012),
                    "lang": null,
                    "profile_background_color": "C0DEED",
                    "profile_image_url_https": format!("https://pbs.example.org/profile_images/{uid}/photo_normal.jpg"),
                    "profile_link_color": "1DA1F2",
                    "default_profile": rng.gen_bool(0.5),
                },
                "geo": null,
                "coordinates": null,
                "place": null,
                "is_quote_status": false,
                "quote_count": rng.gen_range(0..20),
                "reply_count": rng.gen_range(0..50),
                "retweet_count": rng.gen_range(0..500),
                "favorite_count": rng.gen_range(0..2_000),
                "entities": {
                    "hashtags": [{ "text": tag, "indices": [tag_at, tag_at + tag.len() + 1] }],
                    "urls": [],
                    "user_mentions": [{
                        "screen_name": mention,
                        "name": sentence(&mut rng, 1, 2),
                        "id": rng.gen_range(10_000u64..5_000_000_000),
                        "indices": [tag_at + tag.len() + 2, text.len()],
                    }],
                    "symbols": [],
                },
                "favorited": false,
                "retweeted": false,
                "filter_level": "low",
                "lang": "en",
                "timestamp_ms": (1_546_300_800_000u64 + i as u64 * 60_000).to_string(),
            });
            doc.to_string()
        })
        .collect()
}

/// The corpus tweets, in order.
pub fn corpus() -> Vec<&'static str> {
    TWEET_CORPUS.lines().filter(|l| !l.is_empty()).collect()
}

/// Arguments for `TwitterApplication>>analyze:` over `tweets`.
pub fn tweet_args<S: AsRef<str>>(tweets: &[S]) -> TaskArgs {
    strings_arg(tweets)
}

/// Arguments for `Sensor>>average:` over raw readings.
pub fn sensor_args<S: AsRef<str>>(readings: &[S]) -> TaskArgs {
    strings_arg(readings)
}

fn strings_arg<S: AsRef<str>>(items: &[S]) -> TaskArgs {
    let mut args = TaskArgs::new();
    let arr = args.alloc("Array", items.iter().map(|s| Value::from(s.as_ref())).collect());
    args.push(Value::Ref(arr));
    args
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_matches_generator() {
        let generated = generate_tweets(CORPUS_SEED, CORPUS_SIZE);
        assert_eq!(corpus(), generated.iter().map(String::as_str).collect::<Vec<_>>());
    }
}
