//! Deterministic synthetic retrieval corpus.
//!
//! Passages are built from pronounceable pseudo-words: each passage has a
//! handful of key words drawn from a shared inventory plus common filler
//! words. A query names a few key words of exactly one passage, so lexical
//! overlap identifies the relevant passage and BM25 does well. Training
//! queries use different key-word subsets of the same passages.
//!
//! A WordPiece vocabulary is derived from the corpus: every corpus word as a
//! whole token, plus short word-initial and continuation pieces, so a
//! misspelt word splits into several sub-tokens.

use std::collections::{BTreeSet, HashSet};

use rand::seq::{index::sample, IndexedRandom, SliceRandom};
use rand::RngExt;

use crate::eval::Qrels;
use crate::rng::{derived_rng, Pcg64, SeedPart};
use crate::tokenizer::{WordPieceVocab, CLS, PAD, SEP, UNK};
use crate::typo_gen::default_stopwords;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub passages: usize,
    pub queries: usize,
    pub train_queries_per_passage: usize,
    pub inventory: usize,
    pub key_words: usize,
    pub filler_words: usize,
    pub query_words: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            passages: 500,
            queries: 200,
            train_queries_per_passage: 2,
            inventory: 800,
            key_words: 5,
            filler_words: 4,
            query_words: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub collection: Vec<(String, String)>,
    pub queries: Vec<(String, String)>,
    pub qrels: Qrels,
    pub train_queries: Vec<(String, String)>,
    pub train_qrels: Qrels,
    pub vocab: WordPieceVocab,
}

const CONSONANTS: &[u8] = b"bcdfghjklmnprstvwz";
const VOWELS: &[u8] = b"aeiou";
const FILLERS: [&str; 24] = [
    "report", "notes", "general", "section", "summary", "details", "overview", "record", "entry", "listing",
    "article", "chapter", "review", "account", "digest", "bulletin", "journal", "register", "archive", "memo",
    "brief", "paper", "draft", "outline",
];
const QUERY_PREFIXES: [&str; 4] = ["what is", "how does the", "where are", "define"];

fn pseudo_word(rng: &mut Pcg64) -> String {
    let syllables = rng.random_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(*CONSONANTS.choose(rng).unwrap() as char);
        w.push(*VOWELS.choose(rng).unwrap() as char);
        if rng.random::<f64>() < 0.35 {
            w.push(*CONSONANTS.choose(rng).unwrap() as char);
        }
    }
    w
}

/// `n` distinct pseudo-words of at least four letters that are neither
/// stopwords nor filler words.
fn inventory(n: usize, rng: &mut Pcg64) -> Vec<String> {
    let stop = default_stopwords();
    let fillers: HashSet<&str> = FILLERS.iter().copied().collect();
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = pseudo_word(rng);
        if w.len() >= 4 && !stop.contains(&w) && !fillers.contains(w.as_str()) && seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn query_text(words: &[&str], rng: &mut Pcg64) -> String {
    let body = words.join(" ");
    if rng.random::<f64>() < 0.5 {
        format!("{} {body}", QUERY_PREFIXES.choose(rng).unwrap())
    } else {
        body
    }
}

pub fn make_toy_corpus(seed: u64, config: &ToyConfig) -> ToyCorpus {
    assert!(config.query_words <= config.key_words, "queries draw from passage key words");
    assert!(config.queries <= config.passages, "one query per distinct passage");
    let mut rng = derived_rng(seed, &[SeedPart::Str("toy-corpus")]);
    let words = inventory(config.inventory, &mut rng);
    let mut keys: Vec<Vec<usize>> = Vec::with_capacity(config.passages);
    let mut collection = Vec::with_capacity(config.passages);
    for i in 0..config.passages {
        let k: Vec<usize> = sample(&mut rng, words.len(), config.key_words).into_vec();
        let mut tokens: Vec<&str> = k.iter().map(|&w| words[w].as_str()).collect();
        for _ in 0..config.filler_words {
            tokens.push(FILLERS.choose(&mut rng).unwrap());
        }
        tokens.shuffle(&mut rng);
        collection.push((i.to_string(), tokens.join(" ")));
        keys.push(k);
    }

    let mut queries = Vec::with_capacity(config.queries);
    let mut qrels = Qrels::new();
    let mut eval_sets: Vec<Option<BTreeSet<usize>>> = vec![None; config.passages];
    for (n, p) in sample(&mut rng, config.passages, config.queries).into_iter().enumerate() {
        let chosen: Vec<usize> = sample(&mut rng, config.key_words, config.query_words)
            .into_iter()
            .map(|j| keys[p][j])
            .collect();
        let text_words: Vec<&str> = chosen.iter().map(|&w| words[w].as_str()).collect();
        let qid = (1000 + n).to_string();
        queries.push((qid.clone(), query_text(&text_words, &mut rng)));
        qrels.insert(&qid, &p.to_string(), 1).expect("grade in range");
        eval_sets[p] = Some(chosen.into_iter().collect());
    }

    let mut train_queries = Vec::new();
    let mut train_qrels = Qrels::new();
    for p in 0..config.passages {
        let mut used: Vec<BTreeSet<usize>> = eval_sets[p].iter().cloned().collect();
        for r in 0..config.train_queries_per_passage {
            // a different key-word subset than any eval or earlier training query
            let chosen = loop {
                let c: Vec<usize> = sample(&mut rng, config.key_words, config.query_words)
                    .into_iter()
                    .map(|j| keys[p][j])
                    .collect();
                let set: BTreeSet<usize> = c.iter().copied().collect();
                if !used.contains(&set) || used.len() >= 10 {
                    used.push(set);
                    break c;
                }
            };
            let text_words: Vec<&str> = chosen.iter().map(|&w| words[w].as_str()).collect();
            let qid = format!("t{p}_{r}");
            train_queries.push((qid.clone(), query_text(&text_words, &mut rng)));
            train_qrels.insert(&qid, &p.to_string(), 1).expect("grade in range");
        }
    }

    let vocab = corpus_vocab(collection.iter().map(|(_, t)| t.as_str()).chain(QUERY_PREFIXES));
    ToyCorpus {
        collection,
        queries,
        qrels,
        train_queries,
        train_qrels,
        vocab,
    }
}

/// Specials, single characters (initial and `##` forms), every word of
/// `texts`, word-initial pieces of 2–3 letters and continuation pieces of
/// 2–3 letters.
pub fn corpus_vocab<'a>(texts: impl IntoIterator<Item = &'a str>) -> WordPieceVocab {
    let mut words = BTreeSet::new();
    for t in texts {
        for w in crate::tokenizer::basic_tokenize(t) {
            words.insert(w);
        }
    }
    let mut pieces = BTreeSet::new();
    for w in &words {
        let chars: Vec<char> = w.chars().collect();
        for len in 2..=3 {
            if chars.len() > len {
                pieces.insert(chars[..len].iter().collect::<String>());
            }
            for start in 1..chars.len() {
                if start + len <= chars.len() {
                    pieces.insert(format!("##{}", chars[start..start + len].iter().collect::<String>()));
                }
            }
        }
    }
    let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP, "[MASK]"].iter().map(|s| s.to_string()).collect();
    for c in ('a'..='z').chain('0'..='9') {
        tokens.push(c.to_string());
    }
    for c in ('a'..='z').chain('0'..='9') {
        tokens.push(format!("##{c}"));
    }
    let mut seen: HashSet<String> = tokens.iter().cloned().collect();
    for t in words.into_iter().chain(pieces) {
        if seen.insert(t.clone()) {
            tokens.push(t);
        }
    }
    WordPieceVocab::from_tokens(tokens).expect("specials present, tokens unique")
}
