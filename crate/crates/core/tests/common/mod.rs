#![allow(dead_code)]

use eventline::corpus::CorpusRecord;
use eventline::timeline::{Event, Timeline};
use rand::seq::IndexedRandom;
use rand::Rng;

pub const WORDS: [&str; 16] = [
    "dough", "knead", "bowl", "bike", "wheel", "paint", "brush", "guitar", "string", "river", "boat", "camera", "lens",
    "hammer", "nail", "board",
];

/// A random exact tiling of `[0, duration)` into `n` events, bounds on a 10 ms grid.
pub fn random_timeline<R: Rng>(rng: &mut R, video_id: &str, n: usize) -> Timeline {
    let duration_cs: u64 = rng.random_range((n as u64 * 100)..=(n as u64 * 2_000));
    let mut cuts: Vec<u64> = Vec::new();
    while cuts.len() < n - 1 {
        let c = rng.random_range(1..duration_cs);
        if !cuts.contains(&c) {
            cuts.push(c);
        }
    }
    cuts.sort_unstable();
    let mut bounds = vec![0];
    bounds.extend(cuts);
    bounds.push(duration_cs);
    let events = bounds
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let words: Vec<&str> = (0..3).map(|_| *WORDS.choose(rng).unwrap()).collect();
            Event::new(i as u32, w[0] as f64 / 100.0, w[1] as f64 / 100.0, words.join(" "))
        })
        .collect();
    Timeline::new(video_id, duration_cs as f64 / 100.0, events)
}

/// `n` events of equal length whose captions all mention `topic`.
pub fn uniform_timeline(video_id: &str, n: usize, seconds_each: f64, topic: &str) -> Timeline {
    let events = (0..n)
        .map(|i| Event::new(i as u32, i as f64 * seconds_each, (i + 1) as f64 * seconds_each, format!("{topic} step {i}")))
        .collect();
    Timeline::new(video_id, n as f64 * seconds_each, events)
}

pub fn record_line(record: &CorpusRecord) -> String {
    serde_json::to_string(record).unwrap()
}
