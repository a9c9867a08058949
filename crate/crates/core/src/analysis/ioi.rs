//! Indirect-object identification prompts.
//!
//! Each prompt pairs a clean sentence with a corrupted one of the same byte
//! length, so clean and corrupt runs align position by position. The model
//! reads the prompt plus a trailing space and is scored on the first byte of
//! the indirect-object name.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::tokenizer::encode;
use crate::error::{Error, Result};

pub const NAMES: &[&str] = &[
    "Tom", "Sam", "Max", "Ben", "Amy", "Eve", "Mia", "Zoe", "Leo", "Kim", "Joe", "Dan", "Lily", "Anna",
    "Jack", "Emma", "Jake", "Mark", "Lucy", "Rose", "Kate", "John", "Sara", "Paul", "Sarah", "Emily",
    "James", "David", "Alice", "Grace", "Oscar", "Henry",
];
pub const PLACES: &[&str] = &[
    "park", "store", "school", "beach", "garden", "zoo", "lake", "market", "library", "forest",
];
pub const OBJECTS: &[&str] = &[
    "ball", "book", "cake", "flower", "toy", "hat", "drink", "kite", "gift", "cookie",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoiPools {
    pub names: Vec<String>,
    pub places: Vec<String>,
    pub objects: Vec<String>,
}

impl Default for IoiPools {
    fn default() -> Self {
        let own = |s: &[&str]| s.iter().map(|x| x.to_string()).collect();
        Self {
            names: own(NAMES),
            places: own(PLACES),
            objects: own(OBJECTS),
        }
    }
}

impl IoiPools {
    /// Reads `{"names": [...], "places": [...], "objects": [...]}`.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn validate(&self) -> Result<()> {
        if self.places.is_empty() || self.objects.is_empty() {
            return Err(Error::InvalidArgument(
                "place and object pools must be nonempty".into(),
            ));
        }
        if self.names.len() < 3 {
            return Err(Error::InvalidArgument("need at least three names".into()));
        }
        if self
            .names
            .iter()
            .any(|n| n.is_empty() || n.contains(char::is_whitespace))
        {
            return Err(Error::InvalidArgument(
                "names must be single nonempty words".into(),
            ));
        }
        if !self.by_length().values().any(|g| g.len() >= 2) {
            return Err(Error::InvalidArgument(
                "need two names of equal byte length for corruption".into(),
            ));
        }
        Ok(())
    }

    fn by_length(&self) -> BTreeMap<usize, Vec<&str>> {
        let mut groups: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
        for n in &self.names {
            groups.entry(n.len()).or_default().push(n);
        }
        groups
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Template {
    Abba,
    Baba,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    /// The two names trade places everywhere.
    Swap,
    /// The repeated subject is replaced by a third name.
    Replace,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoiPrompt {
    pub clean: String,
    pub corrupt: String,
    /// Indirect object with a leading space.
    pub answer: String,
    /// Repeated subject with a leading space.
    pub distractor: String,
    pub template: Template,
    pub corruption: Corruption,
}

pub fn render(template: Template, a: &str, b: &str, s2: &str, place: &str, object: &str) -> String {
    let (first, second) = match template {
        Template::Abba => (a, b),
        Template::Baba => (b, a),
    };
    format!("Then, {first} and {second} went to the {place}. {s2} gave a {object} to")
}

impl IoiPrompt {
    /// Token ids of the clean and corrupt model inputs, trailing space included.
    pub fn token_pair(&self) -> (Vec<u32>, Vec<u32>) {
        (
            encode(&format!("{} ", self.clean)),
            encode(&format!("{} ", self.corrupt)),
        )
    }

    /// First byte of the indirect-object name, the token scored at the last position.
    pub fn answer_token(&self) -> u32 {
        u32::from(self.answer.as_bytes()[1])
    }

    pub fn distractor_token(&self) -> u32 {
        u32::from(self.distractor.as_bytes()[1])
    }
}

/// `n` prompts alternating ABBA and BABA, deterministic in `seed`.
pub fn generate_ioi(n: usize, seed: u64, pools: &IoiPools) -> Result<Vec<IoiPrompt>> {
    pools.validate()?;
    let groups = pools.by_length();
    let pairable: Vec<&Vec<&str>> = groups.values().filter(|g| g.len() >= 2).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let template = if i % 2 == 0 {
            Template::Abba
        } else {
            Template::Baba
        };
        let mut attempts = 0;
        let (a, b, c) = loop {
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::InvalidArgument(
                    "name pool cannot supply distinct names with distinct initials".into(),
                ));
            }
            let group = pairable.choose(&mut rng).expect("validated");
            let b = *group.choose(&mut rng).expect("nonempty");
            let c = *group.choose(&mut rng).expect("nonempty");
            let a = pools.names.choose(&mut rng).expect("nonempty").as_str();
            let initial = |s: &str| s.as_bytes()[0];
            if a != b && c != b && c != a && initial(a) != initial(b) {
                break (a, b, c);
            }
        };
        let place = pools.places.choose(&mut rng).expect("validated");
        let object = pools.objects.choose(&mut rng).expect("validated");
        let want_swap: bool = rng.random();
        let corruption = if want_swap && a.len() == b.len() {
            Corruption::Swap
        } else {
            Corruption::Replace
        };
        let clean = render(template, a, b, b, place, object);
        let corrupt = match corruption {
            Corruption::Swap => render(template, b, a, a, place, object),
            Corruption::Replace => render(template, a, b, c, place, object),
        };
        out.push(IoiPrompt {
            clean,
            corrupt,
            answer: format!(" {a}"),
            distractor: format!(" {b}"),
            template,
            corruption,
        });
    }
    Ok(out)
}

pub fn save_prompts(prompts: &[IoiPrompt], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(prompts)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_prompts(path: impl AsRef<Path>) -> Result<Vec<IoiPrompt>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
