//! Deterministic toy corpora: a "general" English-like corpus and a
//! "domain" corpus of laboratory notes built around invented terminology
//! with fixed associations, so retrieval over the domain training split
//! has something to remember.

use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    /// Characters across all three general splits.
    pub general_chars: usize,
    /// Characters across all three domain splits.
    pub domain_chars: usize,
    pub valid_frac: f64,
    pub test_frac: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            general_chars: 300_000,
            domain_chars: 200_000,
            valid_frac: 0.075,
            test_frac: 0.075,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: String,
    pub valid: String,
    pub test: String,
}

impl Splits {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("train.txt"), &self.train)?;
        fs::write(dir.join("valid.txt"), &self.valid)?;
        fs::write(dir.join("test.txt"), &self.test)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Ok(Splits {
            train: fs::read_to_string(dir.join("train.txt"))?,
            valid: fs::read_to_string(dir.join("valid.txt"))?,
            test: fs::read_to_string(dir.join("test.txt"))?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpora {
    pub general: Splits,
    pub domain: Splits,
}

impl Corpora {
    /// Writes `dir/general/*.txt` and `dir/domain/*.txt`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        self.general.write(&dir.join("general"))?;
        self.domain.write(&dir.join("domain"))
    }
}

const ADJ: &[&str] = &[
    "old", "small", "quiet", "bright", "heavy", "green", "cold", "tall", "young", "broken",
    "warm", "empty", "narrow", "loud", "gentle", "dark", "early", "simple",
];
const NOUN: &[&str] = &[
    "farmer", "child", "river", "market", "house", "dog", "teacher", "road", "garden",
    "window", "letter", "village", "boat", "storm", "table", "friend", "mountain", "song",
    "door", "city", "horse", "book",
];
const VERB: &[&str] = &[
    "walked", "found", "watched", "carried", "opened", "followed", "painted", "left",
    "reached", "crossed", "heard", "built", "closed", "visited",
];
const PREP: &[&str] = &["to", "near", "behind", "across", "under", "beside", "toward", "past"];
const NAME: &[&str] = &["anna", "peter", "maria", "john", "lucy", "tom", "clara", "henry"];
const TIME: &[&str] = &["morning", "evening", "winter", "spring", "night", "summer"];
const PRON: &[&str] = &["she", "he", "they", "we"];

/// Invented terms that never occur in the general corpus.
pub const RARE_TERMS: &[&str] = &[
    "quarnitol", "zephyrin", "halvane", "morvexate", "triquolide", "ostrabine", "velcanthin",
    "drimozole", "pexaferrin", "kulavine", "sondrathic acid", "yttrovane", "brelquinol",
    "fanzidium", "glorapine", "umbrexol", "nistraline", "corvantide", "lumephrin",
    "xandolase",
];
const RECEPTOR: &[&str] = &[
    "kappa-7", "delta-3", "theta-11", "sigma-5", "omega-2", "lambda-9", "rho-4", "gamma-8",
];
const DISCOVERER: &[&str] = &[
    "okonkwo", "varga", "lindqvist", "takahashi", "moreau", "castellanos", "ferreira",
];
const SOURCE: &[&str] = &[
    "marine sponges", "alpine moss", "soil bacteria", "tree bark", "cave fungi",
    "coral extract",
];
const COLOR: &[&str] = &["amber", "violet", "pale blue", "cloudy", "clear", "crimson"];
const ASSAY_VERB: &[&str] = &["rose", "fell", "stabilized", "doubled", "dropped", "peaked"];

/// Fixed facts for one rare term.
struct Fact {
    term: &'static str,
    receptor: &'static str,
    dose: u32,
    discoverer: &'static str,
    source: &'static str,
}

fn facts(rng: &mut ChaCha8Rng) -> Vec<Fact> {
    RARE_TERMS
        .iter()
        .map(|&term| Fact {
            term,
            receptor: RECEPTOR.choose(rng).unwrap(),
            dose: rng.random_range(2..=95) * 5,
            discoverer: DISCOVERER.choose(rng).unwrap(),
            source: SOURCE.choose(rng).unwrap(),
        })
        .collect()
}

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).unwrap()
}

fn general_sentence(rng: &mut ChaCha8Rng) -> String {
    match rng.random_range(0..5) {
        0 => format!(
            "the {} {} {} {} the {}.",
            pick(rng, ADJ),
            pick(rng, NOUN),
            pick(rng, VERB),
            pick(rng, PREP),
            pick(rng, NOUN)
        ),
        1 => format!(
            "{} said that the {} was {}.",
            pick(rng, NAME),
            pick(rng, NOUN),
            pick(rng, ADJ)
        ),
        2 => format!(
            "in the {}, {} {} the {} {}.",
            pick(rng, TIME),
            pick(rng, PRON),
            pick(rng, VERB),
            pick(rng, ADJ),
            pick(rng, NOUN)
        ),
        4 => format!(
            "the {} was {} miles from the {}.",
            pick(rng, NOUN),
            rng.random_range(2..=90),
            pick(rng, NOUN)
        ),
        _ => format!(
            "{} and {} {} the {} {} the {}.",
            pick(rng, NAME),
            pick(rng, NAME),
            pick(rng, VERB),
            pick(rng, NOUN),
            pick(rng, PREP),
            pick(rng, ADJ)
        ),
    }
}

/// Zipf-like draw so later terms are rare.
fn zipf_term<'a>(rng: &mut ChaCha8Rng, facts: &'a [Fact]) -> &'a Fact {
    let h: f64 = (1..=facts.len()).map(|r| 1.0 / r as f64).sum();
    let mut u = rng.random::<f64>() * h;
    for (r, f) in facts.iter().enumerate() {
        u -= 1.0 / (r + 1) as f64;
        if u <= 0.0 {
            return f;
        }
    }
    facts.last().unwrap()
}

fn domain_sentence(rng: &mut ChaCha8Rng, facts: &[Fact]) -> String {
    let f = zipf_term(rng, facts);
    match rng.random_range(0..7) {
        0 => format!("{} binds the {} receptor with high affinity.", f.term, f.receptor),
        1 => format!("the {} assay was calibrated at {} mg per litre.", f.term, f.dose),
        2 => format!("{} first isolated {} from {}.", f.discoverer, f.term, f.source),
        3 => format!(
            "after {} hours the {} signal {} in the {} sample.",
            rng.random_range(1..=48),
            f.term,
            pick(rng, ASSAY_VERB),
            pick(rng, ADJ)
        ),
        5 => format!(
            "sample {} of {} was stored at {} degrees for {} days.",
            rng.random_range(1..=400),
            f.term,
            rng.random_range(-80..=30),
            rng.random_range(1..=60)
        ),
        6 => format!(
            "{} and {} were mixed, and the {} solution turned {}.",
            f.term,
            zipf_term(rng, facts).term,
            pick(rng, ADJ),
            pick(rng, COLOR)
        ),
        _ => format!(
            "we dosed {} at {} mg and the {} receptor responded.",
            f.term, f.dose, f.receptor
        ),
    }
}

fn stream(
    rng: &mut ChaCha8Rng,
    chars: usize,
    mut sentence: impl FnMut(&mut ChaCha8Rng) -> String,
) -> String {
    let mut out = String::with_capacity(chars + 128);
    let mut in_par = 0;
    while out.len() < chars {
        if in_par > 0 {
            out.push(' ');
        }
        out.push_str(&sentence(rng));
        in_par += 1;
        if in_par == 6 {
            out.push('\n');
            in_par = 0;
        }
    }
    if !out.ends_with('\n') {
        out.push('\n');
    }
    out
}

fn splits(
    rng: &mut ChaCha8Rng,
    total: usize,
    cfg: &SynthConfig,
    mut sentence: impl FnMut(&mut ChaCha8Rng) -> String,
) -> Splits {
    let valid = (total as f64 * cfg.valid_frac) as usize;
    let test = (total as f64 * cfg.test_frac) as usize;
    let train = total.saturating_sub(valid + test);
    Splits {
        train: stream(rng, train, &mut sentence),
        valid: stream(rng, valid, &mut sentence),
        test: stream(rng, test, &mut sentence),
    }
}

pub fn generate(cfg: &SynthConfig) -> Corpora {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let general = splits(&mut rng, cfg.general_chars, cfg, general_sentence);
    let facts = facts(&mut rng);
    let domain = splits(&mut rng, cfg.domain_chars, cfg, |r| {
        // one sentence in four is ordinary prose
        if r.random_range(0..4) == 0 {
            general_sentence(r)
        } else {
            domain_sentence(r, &facts)
        }
    });
    Corpora { general, domain }
}
