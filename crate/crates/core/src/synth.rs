//! Synthetic speech task: transcripts from a small grammar and feature
//! frames built from a fixed per-character codebook plus Gaussian noise.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::seed::rng_for;
use crate::tokenizer::CharTokenizer;

/// Seed of the codebook; independent of any run seed so that noise-free
/// features of a string never change.
const CODEBOOK_SEED: u64 = 0x5eed_c0de;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Structured,
    Diverse,
}

impl Mode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "structured" => Some(Mode::Structured),
            "diverse" => Some(Mode::Diverse),
            _ => None,
        }
    }
}

/// Slot-filling templates. `{name}` in a template is replaced by a random
/// entry of `slots[name]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grammar {
    pub templates: Vec<String>,
    pub slots: BTreeMap<String, Vec<String>>,
}

const CITIES: &[&str] = &[
    "boston", "denver", "dallas", "atlanta", "seattle", "miami", "chicago", "houston", "phoenix", "austin", "newark", "tampa", "oakland",
    "detroit", "memphis", "orlando", "toronto", "reno", "tucson", "omaha",
];
const DAYS: &[&str] = &["monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"];
const TIMES: &[&str] = &["morning", "afternoon", "evening", "night"];
const AIRLINES: &[&str] = &["delta", "united", "american", "alaska", "frontier"];
const TEMPLATES: &[&str] = &[
    "flights from {city} to {city}",
    "show me flights to {city}",
    "i'd like a flight to {city}",
    "list {time} flights to {city}",
    "fares from {city} to {city}",
    "{airline} flights to {city}",
    "what flights leave {city} {day}",
    "i'd like to fly {day} {time}",
    "show {airline} flights on {day}",
    "cheapest fare to {city}",
    "is there a {time} flight",
    "flights to {city} on {day}",
    "what's the fare to {city}",
    "i need a flight {day} {time}",
];

const WORDS: &[&str] = &[
    "the",
    "of",
    "and",
    "to",
    "in",
    "is",
    "you",
    "that",
    "it",
    "he",
    "was",
    "for",
    "on",
    "are",
    "as",
    "with",
    "his",
    "they",
    "at",
    "be",
    "this",
    "have",
    "from",
    "or",
    "one",
    "had",
    "by",
    "word",
    "but",
    "not",
    "what",
    "all",
    "were",
    "we",
    "when",
    "your",
    "can",
    "said",
    "there",
    "use",
    "an",
    "each",
    "which",
    "she",
    "do",
    "how",
    "their",
    "if",
    "will",
    "up",
    "other",
    "about",
    "out",
    "many",
    "then",
    "them",
    "these",
    "so",
    "some",
    "her",
    "would",
    "make",
    "like",
    "him",
    "into",
    "time",
    "has",
    "look",
    "two",
    "more",
    "write",
    "go",
    "see",
    "number",
    "no",
    "way",
    "could",
    "people",
    "my",
    "than",
    "first",
    "water",
    "been",
    "call",
    "who",
    "oil",
    "its",
    "now",
    "find",
    "long",
    "down",
    "day",
    "did",
    "get",
    "come",
    "made",
    "may",
    "part",
    "over",
    "new",
    "sound",
    "take",
    "only",
    "little",
    "work",
    "know",
    "place",
    "year",
    "live",
    "me",
    "back",
    "give",
    "most",
    "very",
    "after",
    "thing",
    "our",
    "just",
    "name",
    "good",
    "sentence",
    "man",
    "think",
    "say",
    "great",
    "where",
    "help",
    "through",
    "much",
    "before",
    "line",
    "right",
    "too",
    "mean",
    "old",
    "any",
    "same",
    "tell",
    "boy",
    "follow",
    "came",
    "want",
    "show",
    "also",
    "around",
    "form",
    "three",
    "small",
    "set",
    "put",
    "end",
    "does",
    "another",
    "well",
    "large",
    "must",
    "big",
    "even",
    "such",
    "because",
    "turn",
    "here",
    "why",
    "ask",
    "went",
    "men",
    "read",
    "need",
    "land",
    "different",
    "home",
    "us",
    "move",
    "try",
    "kind",
    "hand",
    "picture",
    "again",
    "change",
    "off",
    "play",
    "spell",
    "air",
    "away",
    "animal",
    "house",
    "point",
    "page",
    "letter",
    "mother",
    "answer",
    "found",
    "study",
    "still",
    "learn",
    "should",
    "world",
    "high",
    "every",
    "near",
    "add",
    "food",
    "between",
    "own",
    "below",
    "country",
    "plant",
    "last",
    "school",
    "father",
    "keep",
    "tree",
    "never",
    "start",
    "city",
    "earth",
    "eye",
    "light",
    "thought",
    "head",
    "under",
    "story",
    "saw",
    "left",
    "don't",
    "few",
    "while",
    "along",
    "might",
    "close",
    "something",
    "seem",
    "next",
    "hard",
    "open",
    "example",
    "begin",
    "life",
    "always",
    "those",
    "both",
    "paper",
    "together",
    "got",
    "group",
    "often",
    "run",
    "important",
    "until",
    "children",
    "side",
    "feet",
    "car",
    "mile",
    "night",
    "walk",
    "white",
    "sea",
    "began",
    "grow",
    "took",
    "river",
    "four",
    "carry",
    "state",
    "once",
    "book",
    "hear",
    "stop",
    "without",
    "second",
    "later",
    "miss",
    "idea",
    "enough",
    "eat",
    "face",
    "watch",
    "far",
    "indian",
    "really",
    "almost",
    "let",
    "above",
    "girl",
    "sometimes",
    "mountain",
    "cut",
    "young",
    "talk",
    "soon",
    "list",
    "song",
    "being",
    "leave",
    "family",
    "it's",
];

impl Grammar {
    /// ATIS-like flight queries.
    pub fn flights() -> Self {
        let own = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let slots = [("city", CITIES), ("day", DAYS), ("time", TIMES), ("airline", AIRLINES)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), own(v)))
            .collect();
        Self { templates: own(TEMPLATES), slots }
    }

    fn expand(&self, template: &str, rng: &mut impl Rng) -> String {
        let mut out = String::new();
        let mut rest = template;
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let close = rest[open..].find('}').map(|c| open + c).unwrap_or(rest.len() - 1);
            let name = &rest[open + 1..close];
            match self.slots.get(name).filter(|v| !v.is_empty()) {
                Some(values) => out.push_str(values.choose(rng).expect("non-empty")),
                None => out.push_str(&rest[open..=close]),
            }
            rest = &rest[close + 1..];
        }
        out.push_str(rest);
        out
    }
}

/// Everything that decides the transcripts and features of a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub mode: Mode,
    pub grammar: Grammar,
    pub feat_dim: usize,
    pub frames: usize,
    pub noise_sigma: f64,
    /// Spread of letters inside a confusion cluster; smaller means more confusable.
    pub cluster_spread: f64,
    pub id_prefix: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Structured,
            grammar: Grammar::flights(),
            feat_dim: 8,
            frames: 32,
            noise_sigma: 0.5,
            cluster_spread: 0.45,
            id_prefix: "utt".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticUtterance {
    pub id: String,
    pub ground_truth: String,
    /// `[frames, feat_dim]`.
    pub features: Tensor,
}

/// Letters that share a cluster centre and so get confused under noise.
const CLUSTERS: &[&str] = &["aeiouy", "bp", "dt", "ckgq", "fv", "szx", "mn", "lr", "whj", " ", "'-.?"];

/// One vector per acoustic character, plus a trailing silence vector for
/// padding frames.
pub fn codebook(feat_dim: usize, cluster_spread: f64) -> Vec<Vec<f64>> {
    let mut rng = rng_for(CODEBOOK_SEED, "codebook", "");
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let tok = CharTokenizer::acoustic();
    let centres: Vec<Vec<f64>> = CLUSTERS.iter().map(|_| (0..feat_dim).map(|_| normal.sample(&mut rng)).collect()).collect();
    let mut book = vec![vec![0.0; feat_dim]; tok.vocab_size() + 1];
    for (ci, cluster) in CLUSTERS.iter().enumerate() {
        for c in cluster.chars() {
            let id = tok.tokenize(&c.to_string())[0];
            book[id] = centres[ci].iter().map(|&m| m + cluster_spread * normal.sample(&mut rng)).collect();
        }
    }
    let silence = book.len() - 1;
    book[silence] = (0..feat_dim).map(|_| normal.sample(&mut rng)).collect();
    book
}

/// Features for one transcript: codebook rows per character, silence after
/// the end, i.i.d. `N(0, σ²)` noise on every entry drawn from `rng`.
pub fn render_features(text: &str, config: &SynthConfig, book: &[Vec<f64>], rng: &mut impl Rng) -> Tensor {
    let tok = CharTokenizer::acoustic();
    let ids = tok.tokenize(text);
    let silence = book.len() - 1;
    let noise = Normal::new(0.0, config.noise_sigma.max(0.0)).expect("valid sigma");
    let mut data = Vec::with_capacity(config.frames * config.feat_dim);
    for t in 0..config.frames {
        let row = &book[ids.get(t).copied().unwrap_or(silence)];
        for &v in row {
            let n = if config.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            data.push(v + n);
        }
    }
    Tensor::new(vec![config.frames, config.feat_dim], data).expect("frame shape")
}

fn transcript(config: &SynthConfig, rng: &mut impl Rng) -> String {
    for _ in 0..1000 {
        let text = match config.mode {
            Mode::Structured => {
                let t = config.grammar.templates.choose(rng).map(String::as_str).unwrap_or("");
                config.grammar.expand(t, rng)
            }
            Mode::Diverse => {
                let n = rng.gen_range(2..=6);
                (0..n).map(|_| *WORDS.choose(rng).expect("words")).collect::<Vec<_>>().join(" ")
            }
        };
        if text.chars().count() <= config.frames {
            return text;
        }
    }
    String::new()
}

/// `n` utterances with ids `{prefix}-{i:05}`. Transcript and noise streams
/// are keyed by id, so a corpus is a prefix of any larger one.
pub fn synth_corpus(config: &SynthConfig, n: usize, seed: u64) -> Vec<SyntheticUtterance> {
    let book = codebook(config.feat_dim, config.cluster_spread);
    (0..n)
        .map(|i| {
            let id = format!("{}-{i:05}", config.id_prefix);
            let ground_truth = transcript(config, &mut rng_for(seed, "transcript", &id));
            let features = render_features(&ground_truth, config, &book, &mut rng_for(seed, "features", &id));
            SyntheticUtterance { id, ground_truth, features }
        })
        .collect()
}

/// Transcript text only, for language-model pretraining.
pub fn synth_texts(config: &SynthConfig, n: usize, seed: u64, tag: &str) -> Vec<String> {
    (0..n).map(|i| transcript(config, &mut rng_for(seed, tag, &i.to_string()))).collect()
}
