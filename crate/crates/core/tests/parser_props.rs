mod common;

use eventline::parser::{parse_events, parse_single_window, render_events, to_timeline};
use proptest::prelude::*;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::random_timeline;

const PIECES: [&str; 24] = [
    "0", "1", "59", "60", "99999999999999999999", ":", "::", ".", "-", "–", "—", "~", " to ", "from ", "seconds", "s", "(",
    ")", "[", "]", "\n", " ", "é", "cut onions",
];

#[test]
fn ten_thousand_fuzz_strings_never_abort() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..10_000 {
        let len = rng.random_range(0..40);
        let text: String = (0..len)
            .map(|_| {
                if rng.random_bool(0.2) {
                    char::from_u32(rng.random_range(0..0x2FFF)).unwrap_or('?').to_string()
                } else {
                    PIECES.choose(&mut rng).unwrap().to_string()
                }
            })
            .collect();
        let (events, _) = parse_events(&text);
        for e in events {
            assert!(e.interval.is_valid(), "{text:?}");
            assert!(text.get(e.source_span.clone()).is_some());
        }
        let _ = parse_single_window(&text);
    }
}

#[test]
fn render_parse_round_trip_on_thousand_timelines() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..1000 {
        let n = rng.random_range(1..15);
        let t = random_timeline(&mut rng, &format!("v{case}"), n);
        let text = render_events(&t.events);
        let (parsed, diags) = parse_events(&text);
        assert!(diags.is_empty(), "case {case}: {diags:?}");
        assert_eq!(to_timeline(&t.video_id, Some(t.duration), &parsed), t, "case {case}");
    }
}

proptest! {
    #[test]
    fn arbitrary_text_is_total(text in "\\PC{0,200}") {
        let (events, _) = parse_events(&text);
        for e in events {
            prop_assert!(e.interval.is_valid());
            let line = &text[e.source_span.clone()];
            prop_assert!(line.contains(e.caption.as_str()));
        }
    }

    #[test]
    fn spans_point_at_their_lines(
        noise in prop::collection::vec("[a-z ]{0,20}", 0..5),
        starts in prop::collection::vec(0u32..5000, 1..6),
    ) {
        let mut text = String::new();
        let mut expected = Vec::new();
        for (i, s) in starts.iter().enumerate() {
            if let Some(n) = noise.get(i) {
                text.push_str(n);
                text.push('\n');
            }
            let line = format!("{}.00 - {}.50: step {i}", s, s + 3);
            expected.push(line.clone());
            text.push_str(&line);
            text.push('\n');
        }
        let (events, _) = parse_events(&text);
        let got: Vec<_> = events.iter().filter(|e| e.caption.starts_with("step ")).map(|e| &text[e.source_span.clone()]).collect();
        prop_assert_eq!(got, expected.iter().map(String::as_str).collect::<Vec<_>>());
    }
}
