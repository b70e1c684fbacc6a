//! Writes a deterministic English-like training corpus.
//!
//! ```text
//! cargo run --release --example make_corpus -- data/corpus.txt [bytes] [seed]
//! ```

use std::env;
use std::fs;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NAMES: &[&str] = &[
    "Ada", "Basil", "Clara", "Dmitri", "Elena", "Farid", "Greta", "Hugo", "Ines", "Jonah", "Keiko",
    "Lionel", "Mara", "Nils", "Odile", "Pavel", "Quinn", "Rosa", "Silas", "Tomas", "Una", "Viktor",
    "Wren", "Yusuf", "Zora",
];
const NOUNS: &[&str] = &[
    "river", "lantern", "harbor", "orchard", "village", "mountain", "letter", "garden", "window",
    "market", "bridge", "forest", "engine", "library", "kitchen", "meadow", "island", "station",
    "tower", "workshop", "violin", "map", "compass", "ship", "basket", "candle", "clock", "road",
    "field", "well", "storm", "winter", "summer", "teacher", "farmer", "sailor", "painter",
    "doctor", "merchant", "child", "stranger", "neighbor", "horse", "fox", "owl", "raven", "wolf",
    "cat", "dog", "bell",
];
const ADJECTIVES: &[&str] = &[
    "old", "quiet", "bright", "narrow", "distant", "cold", "warm", "small", "heavy", "green",
    "golden", "broken", "hidden", "patient", "careful", "ancient", "gentle", "restless", "empty",
    "crowded", "silver", "dark", "soft", "strange", "tired",
];
const VERBS_T: &[(&str, &str)] = &[
    ("carried", "carries"),
    ("found", "finds"),
    ("watched", "watches"),
    ("opened", "opens"),
    ("repaired", "repairs"),
    ("painted", "paints"),
    ("followed", "follows"),
    ("remembered", "remembers"),
    ("crossed", "crosses"),
    ("visited", "visits"),
    ("built", "builds"),
    ("sold", "sells"),
    ("lost", "loses"),
    ("described", "describes"),
    ("closed", "closes"),
];
const VERBS_I: &[(&str, &str)] = &[
    ("waited", "waits"),
    ("slept", "sleeps"),
    ("laughed", "laughs"),
    ("arrived", "arrives"),
    ("wandered", "wanders"),
    ("listened", "listens"),
    ("worked", "works"),
    ("sang", "sings"),
    ("returned", "returns"),
    ("hesitated", "hesitates"),
];
const ADVERBS: &[&str] = &[
    "slowly",
    "quietly",
    "again",
    "carefully",
    "at last",
    "once more",
    "without a word",
    "before dawn",
    "after supper",
    "in the rain",
];
const PREPS: &[&str] = &[
    "near", "behind", "beyond", "under", "across", "beside", "toward", "inside",
];
const TIMES: &[&str] = &[
    "In the morning",
    "Later that day",
    "Every spring",
    "Long ago",
    "That evening",
    "By noon",
    "Years later",
    "On Sundays",
];
const CONNECTIVES: &[&str] = &["and", "but", "so", "while", "because"];

struct Gen {
    rng: ChaCha8Rng,
}

impl Gen {
    fn pick<'a>(&mut self, xs: &'a [&'a str]) -> &'a str {
        xs.choose(&mut self.rng).expect("non-empty")
    }

    fn noun_phrase(&mut self) -> String {
        let n = self.pick(NOUNS);
        match self.rng.random_range(0..4) {
            0 => format!("the {n}"),
            1 => format!("the {} {n}", self.pick(ADJECTIVES)),
            2 => format!("a {} {n}", self.pick(ADJECTIVES)),
            _ => format!("{}'s {n}", self.pick(NAMES)),
        }
    }

    fn subject(&mut self, plural: &mut bool) -> String {
        *plural = false;
        match self.rng.random_range(0..5) {
            0 | 1 => self.pick(NAMES).to_string(),
            2 => {
                *plural = true;
                format!("{} and {}", self.pick(NAMES), self.pick(NAMES))
            }
            _ => self.noun_phrase(),
        }
    }

    fn clause(&mut self, present: bool) -> String {
        let mut plural = false;
        let subj = self.subject(&mut plural);
        let verb = |(past, pres): (&str, &str)| -> String {
            if !present {
                past.to_string()
            } else if plural {
                pres.strip_suffix("es")
                    .filter(|s| s.ends_with("ch") || s.ends_with("ss") || s.ends_with("sh"))
                    .or_else(|| pres.strip_suffix('s'))
                    .unwrap_or(pres)
                    .to_string()
            } else {
                pres.to_string()
            }
        };
        let mut s = if self.rng.random_bool(0.6) {
            let v = *VERBS_T.choose(&mut self.rng).expect("non-empty");
            format!("{subj} {} {}", verb(v), self.noun_phrase())
        } else {
            let v = *VERBS_I.choose(&mut self.rng).expect("non-empty");
            format!("{subj} {}", verb(v))
        };
        if self.rng.random_bool(0.4) {
            s.push_str(&format!(" {} {}", self.pick(PREPS), self.noun_phrase()));
        }
        if self.rng.random_bool(0.3) {
            s.push(' ');
            s.push_str(self.pick(ADVERBS));
        }
        s
    }

    fn sentence(&mut self) -> String {
        let present = self.rng.random_bool(0.3);
        let mut s = match self.rng.random_range(0..6) {
            0 => format!("{}, {}", self.pick(TIMES), self.clause(present)),
            1 => {
                let c = self.pick(CONNECTIVES);
                format!("{}, {c} {}", self.clause(present), self.clause(present))
            }
            2 => format!(
                "\"Where is {}?\" asked {}",
                self.noun_phrase(),
                self.pick(NAMES)
            ),
            _ => self.clause(present),
        };
        let first = s.remove(0).to_ascii_uppercase();
        s.insert(0, first);
        if !s.ends_with('?') {
            s.push('.');
        }
        s
    }
}

fn main() {
    let args: Vec<String> = env::args().skip(1).collect();
    let path = args
        .first()
        .map(String::as_str)
        .unwrap_or("data/corpus.txt");
    let target: usize = args
        .get(1)
        .map(|s| s.parse().expect("byte count"))
        .unwrap_or(1 << 20);
    let seed: u64 = args.get(2).map(|s| s.parse().expect("seed")).unwrap_or(0);

    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let mut out = String::with_capacity(target + 1024);
    while out.len() < target {
        let sentences = g.rng.random_range(3..8);
        let para: Vec<String> = (0..sentences).map(|_| g.sentence()).collect();
        out.push_str(&para.join(" "));
        out.push_str("\n\n");
    }
    out.truncate(target);
    if let Some(dir) = std::path::Path::new(path).parent() {
        fs::create_dir_all(dir).expect("create output directory");
    }
    fs::write(path, out).expect("write corpus");
    eprintln!("wrote {target} bytes to {path}");
}
