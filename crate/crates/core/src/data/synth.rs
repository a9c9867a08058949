//! Deterministic synthetic short stories for desk-scale training.
//!
//! The stories use a small vocabulary of simple sentences and reuse the IOI
//! name, place and object pools, including sentences of the IOI form, so a
//! model trained on them has something to say on the IOI task.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::ioi::{render, Template, NAMES, OBJECTS, PLACES};

const ANIMALS: &[&str] = &["cat", "dog", "bird", "bunny", "fox", "bear", "duck", "frog"];
const ADJECTIVES: &[&str] = &[
    "little", "happy", "small", "brave", "kind", "funny", "sleepy", "shy",
];
const FEELINGS: &[&str] = &["happy", "sad", "excited", "tired", "surprised", "proud", "glad"];
const COLORS: &[&str] = &["red", "blue", "green", "yellow", "pink", "big", "shiny"];
const ACTIVITIES: &[&str] = &["run", "jump", "sing", "read", "draw", "dance", "swim", "play"];

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str]) -> &'a str {
    pool.choose(rng).expect("nonempty pool")
}

fn two_names<'a>(rng: &mut ChaCha8Rng) -> (&'a str, &'a str) {
    loop {
        let (a, b) = (pick(rng, NAMES), pick(rng, NAMES));
        if a != b {
            return (a, b);
        }
    }
}

fn story(rng: &mut ChaCha8Rng) -> String {
    let (a, b) = two_names(rng);
    let mut s = Vec::new();
    s.push(match rng.random_range(0..3) {
        0 => format!(
            "Once upon a time, there was a {} {} named {a}.",
            pick(rng, ADJECTIVES),
            pick(rng, ANIMALS)
        ),
        1 => format!("One day, {a} and {b} were playing together."),
        _ => format!("{a} had a friend named {b}."),
    });
    let n = rng.random_range(3..8);
    for _ in 0..n {
        let place = pick(rng, PLACES);
        let object = pick(rng, OBJECTS);
        let sentence = match rng.random_range(0..14) {
            // half the sentences are IOI-form; either friend can be the
            // recipient, so only the sentence itself says who receives the object
            0..=6 => {
                let t = if rng.random() {
                    Template::Abba
                } else {
                    Template::Baba
                };
                let (io, s) = if rng.random() { (a, b) } else { (b, a) };
                format!("{} {io}.", render(t, io, s, s, place, object))
            }
            7 => format!("{a} liked to {} in the {place}.", pick(rng, ACTIVITIES)),
            8 => format!("{b} found a {} {object} at the {place}.", pick(rng, COLORS)),
            9 => format!("{a} was very {}.", pick(rng, FEELINGS)),
            10 => format!("When {a} and {b} went to the {place}, {b} gave the {object} to {a}."),
            11 => format!("\"Can I have the {object}?\" asked {b}."),
            12 => format!("{a} and {b} played with the {object} all day."),
            _ => format!("{b} said, \"Thank you, {a}!\""),
        };
        s.push(sentence);
    }
    s.push(match rng.random_range(0..3) {
        0 => "They were best friends forever.".to_string(),
        1 => format!("{a} and {b} went home happy."),
        _ => "The end.".to_string(),
    });
    s.join(" ")
}

/// Stories totalling at least `min_bytes` bytes, deterministic in `seed`.
pub fn synth_stories(seed: u64, min_bytes: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut docs = Vec::new();
    let mut total = 0;
    while total < min_bytes {
        let d = story(&mut rng);
        total += d.len() + 1;
        docs.push(d);
    }
    docs
}

/// The stories as a plain-text corpus, one story per paragraph.
pub fn synth_corpus_text(seed: u64, min_bytes: usize) -> String {
    let mut out = synth_stories(seed, min_bytes).join("\n\n");
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::parse_plain;

    #[test]
    fn deterministic_and_sized() {
        let a = synth_corpus_text(1, 20_000);
        assert_eq!(a, synth_corpus_text(1, 20_000));
        assert_ne!(a, synth_corpus_text(2, 20_000));
        assert!(a.len() >= 20_000);
        assert_eq!(parse_plain(&a), synth_stories(1, 20_000));
        assert!(a.contains("Then, "));
    }
}
