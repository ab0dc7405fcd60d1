//! Synthetic single-typo query variants.
//!
//! One word per query is altered by one of five character-level generators.
//! Only words with enough alphabetic characters that are not stopwords are
//! candidates. All sampling is driven by an explicit [`Pcg64`] stream, and
//! replica `k` of query `q` always uses the stream derived from
//! `(seed, k, q)`, so replicas can be generated in any order.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::RngExt;
use thiserror::Error;

use crate::rng::{derived_rng, Pcg64, SeedPart};

const DEFAULT_STOPWORDS: &str = include_str!("../data/stopwords_en.txt");
const QWERTY_ADJACENCY: &str = include_str!("../data/qwerty_adjacency.txt");
const LETTERS: &[u8; 26] = b"abcdefghijklmnopqrstuvwxyz";

#[derive(Debug, Error)]
pub enum TypoError {
    #[error("query {query_id:?} has no word eligible for a typo")]
    NoEligibleWord { query_id: String },
    #[error("no {kind} outcome of {word:?} differs from the word")]
    DegenerateWord { word: String, kind: TypoKind },
    #[error("invalid typo config: {0}")]
    InvalidConfig(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TypoKind {
    RandInsert,
    RandDelete,
    RandSub,
    SwapNeighbor,
    SwapAdjacent,
}

impl TypoKind {
    pub const ALL: [TypoKind; 5] = [
        TypoKind::RandInsert,
        TypoKind::RandDelete,
        TypoKind::RandSub,
        TypoKind::SwapNeighbor,
        TypoKind::SwapAdjacent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TypoKind::RandInsert => "RandInsert",
            TypoKind::RandDelete => "RandDelete",
            TypoKind::RandSub => "RandSub",
            TypoKind::SwapNeighbor => "SwapNeighbor",
            TypoKind::SwapAdjacent => "SwapAdjacent",
        }
    }

    fn index(self) -> usize {
        Self::ALL.iter().position(|k| *k == self).unwrap()
    }

    /// Smallest word length (in characters) the kind accepts.
    pub fn min_len(self) -> usize {
        match self {
            TypoKind::RandInsert => 1,
            _ => 3,
        }
    }
}

impl fmt::Display for TypoKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TypoKind {
    type Err = TypoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| TypoError::InvalidConfig(format!("unknown typo kind {s:?}")))
    }
}

#[derive(Debug, Clone)]
pub struct TypoConfig {
    pub min_word_length: usize,
    pub stopwords: HashSet<String>,
    /// Selection probabilities, indexed in [`TypoKind::ALL`] order.
    pub kind_weights: [f64; 5],
    pub seed: u64,
}

impl Default for TypoConfig {
    fn default() -> Self {
        Self {
            min_word_length: 3,
            stopwords: default_stopwords(),
            kind_weights: [0.2; 5],
            seed: 0,
        }
    }
}

impl TypoConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TypoError> {
        if self.min_word_length < 1 {
            return Err(TypoError::InvalidConfig("min_word_length must be >= 1".into()));
        }
        if self.kind_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(TypoError::InvalidConfig("kind weights must be non-negative".into()));
        }
        let sum: f64 = self.kind_weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(TypoError::InvalidConfig(format!("kind weights sum to {sum}, expected 1")));
        }
        Ok(())
    }

    /// Parse `w1,w2,w3,w4,w5` and normalise to a probability vector.
    pub fn parse_kind_weights(spec: &str) -> Result<[f64; 5], TypoError> {
        let parts: Vec<f64> = spec
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|_| TypoError::InvalidConfig(format!("bad kind weight {p:?}")))
            })
            .collect::<Result<_, _>>()?;
        if parts.len() != 5 {
            return Err(TypoError::InvalidConfig(format!(
                "expected 5 kind weights, got {}",
                parts.len()
            )));
        }
        let sum: f64 = parts.iter().sum();
        if !(sum > 0.0) || parts.iter().any(|w| *w < 0.0) {
            return Err(TypoError::InvalidConfig("kind weights must be non-negative with a positive sum".into()));
        }
        let mut out = [0.0; 5];
        for (o, p) in out.iter_mut().zip(&parts) {
            *o = p / sum;
        }
        Ok(out)
    }
}

/// The bundled English stopword list.
pub fn default_stopwords() -> HashSet<String> {
    parse_stopwords(DEFAULT_STOPWORDS)
}

pub fn parse_stopwords(text: &str) -> HashSet<String> {
    text.lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect()
}

fn keyboard_neighbors(c: char) -> &'static str {
    QWERTY_ADJACENCY
        .lines()
        .find_map(|line| {
            let (key, rest) = line.split_once(' ')?;
            (key.chars().next() == Some(c)).then_some(rest.trim())
        })
        .unwrap_or("")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryPair {
    pub query_id: String,
    pub clean_text: String,
    pub typo_text: String,
    pub word_index: usize,
    pub kind: TypoKind,
}

/// Byte ranges of whitespace-delimited words.
fn word_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        if c.is_ascii_whitespace() {
            if let Some(s) = start.take() {
                spans.push((s, i));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

fn stopword_key(word: &str) -> String {
    word.trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase()
}

pub fn is_eligible(word: &str, config: &TypoConfig) -> bool {
    let alpha = word.chars().filter(|c| c.is_alphabetic()).count();
    alpha >= config.min_word_length && !config.stopwords.contains(&stopword_key(word))
}

pub fn eligible_word_indices(query_text: &str, config: &TypoConfig) -> Vec<usize> {
    query_text
        .split_ascii_whitespace()
        .enumerate()
        .filter(|(_, w)| is_eligible(w, config))
        .map(|(i, _)| i)
        .collect()
}

fn degenerate(word: &str, kind: TypoKind) -> TypoError {
    TypoError::DegenerateWord {
        word: word.to_string(),
        kind,
    }
}

/// Apply one typo of `kind` to `word`.
///
/// Draws are taken uniformly from the outcomes that differ from `word`,
/// which is the distribution obtained by re-drawing identity outcomes.
pub fn apply_typo(word: &str, kind: TypoKind, rng: &mut Pcg64) -> Result<String, TypoError> {
    let chars: Vec<char> = word.chars().collect();
    let n = chars.len();
    if n < kind.min_len() {
        return Err(degenerate(word, kind));
    }
    let alpha: Vec<usize> = (0..n).filter(|&i| chars[i].is_alphabetic()).collect();
    let mut out = chars.clone();
    match kind {
        TypoKind::RandInsert => {
            let pos = rng.random_range(0..=n);
            let letter = LETTERS[rng.random_range(0..26)] as char;
            out.insert(pos, letter);
        }
        TypoKind::RandDelete => {
            if alpha.is_empty() {
                return Err(degenerate(word, kind));
            }
            let pos = alpha[rng.random_range(0..alpha.len())];
            out.remove(pos);
        }
        TypoKind::RandSub => {
            if alpha.is_empty() {
                return Err(degenerate(word, kind));
            }
            let pos = alpha[rng.random_range(0..alpha.len())];
            let orig = chars[pos].to_ascii_lowercase();
            let choices: Vec<u8> = LETTERS.iter().copied().filter(|&l| l as char != orig).collect();
            out[pos] = choices[rng.random_range(0..choices.len())] as char;
        }
        TypoKind::SwapNeighbor => {
            let swaps: Vec<usize> = (0..n - 1)
                .filter(|&i| {
                    chars[i].is_alphabetic() && chars[i + 1].is_alphabetic() && chars[i] != chars[i + 1]
                })
                .collect();
            if swaps.is_empty() {
                return Err(degenerate(word, kind));
            }
            let i = swaps[rng.random_range(0..swaps.len())];
            out.swap(i, i + 1);
        }
        TypoKind::SwapAdjacent => {
            let keys: Vec<usize> = alpha
                .iter()
                .copied()
                .filter(|&i| !keyboard_neighbors(chars[i].to_ascii_lowercase()).is_empty())
                .collect();
            if keys.is_empty() {
                return Err(degenerate(word, kind));
            }
            let pos = keys[rng.random_range(0..keys.len())];
            let neighbors: Vec<char> = keyboard_neighbors(chars[pos].to_ascii_lowercase()).chars().collect();
            out[pos] = neighbors[rng.random_range(0..neighbors.len())];
        }
    }
    let result: String = out.into_iter().collect();
    debug_assert_ne!(result, word);
    Ok(result)
}

fn sample_weighted(weights: &[f64], rng: &mut Pcg64) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let mut x = rng.random::<f64>() * total;
    let mut last = None;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        last = Some(i);
        if x < w {
            return Some(i);
        }
        x -= w;
    }
    last
}

pub fn generate_typo_pair(
    query_id: &str,
    query_text: &str,
    config: &TypoConfig,
    rng: &mut Pcg64,
) -> Result<QueryPair, TypoError> {
    let spans = word_spans(query_text);
    let mut candidates = eligible_word_indices(query_text, config);
    while !candidates.is_empty() {
        let pick = rng.random_range(0..candidates.len());
        let word_index = candidates[pick];
        let (start, end) = spans[word_index];
        let word = &query_text[start..end];
        let mut weights = config.kind_weights;
        while let Some(k) = sample_weighted(&weights, rng) {
            let kind = TypoKind::ALL[k];
            match apply_typo(word, kind, rng) {
                Ok(typo_word) => {
                    let typo_text = format!("{}{}{}", &query_text[..start], typo_word, &query_text[end..]);
                    return Ok(QueryPair {
                        query_id: query_id.to_string(),
                        clean_text: query_text.to_string(),
                        typo_text,
                        word_index,
                        kind,
                    });
                }
                Err(TypoError::DegenerateWord { .. }) => weights[kind.index()] = 0.0,
                Err(e) => return Err(e),
            }
        }
        candidates.remove(pick);
    }
    Err(TypoError::NoEligibleWord {
        query_id: query_id.to_string(),
    })
}

/// The stream used for replica `replica` of query `query_id`.
pub fn replica_rng(seed: u64, replica: usize, query_id: &str) -> Pcg64 {
    derived_rng(
        seed,
        &[SeedPart::Str("typo-replica"), SeedPart::Int(replica as u64), SeedPart::Str(query_id)],
    )
}

/// `n` independent typo replicas of `queries`; queries without an eligible
/// word are left out of every replica.
pub fn generate_replicas(
    queries: &[(String, String)],
    n: usize,
    config: &TypoConfig,
    seed: u64,
) -> Result<Vec<Vec<QueryPair>>, TypoError> {
    config.validate()?;
    if n == 0 {
        return Err(TypoError::InvalidConfig("replica count must be >= 1".into()));
    }
    let mut replicas = Vec::with_capacity(n);
    for k in 0..n {
        let mut pairs = Vec::with_capacity(queries.len());
        for (qid, text) in queries {
            let mut rng = replica_rng(seed, k, qid);
            match generate_typo_pair(qid, text, config, &mut rng) {
                Ok(p) => pairs.push(p),
                Err(TypoError::NoEligibleWord { .. }) => {
                    if k == 0 {
                        log::info!("query {qid} has no eligible word, skipped");
                    }
                }
                Err(e) => return Err(e),
            }
        }
        replicas.push(pairs);
    }
    Ok(replicas)
}

pub fn write_pairs_tsv<W: Write>(mut w: W, pairs: &[QueryPair]) -> std::io::Result<()> {
    for p in pairs {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            p.query_id, p.clean_text, p.typo_text, p.word_index, p.kind
        )?;
    }
    Ok(())
}

pub fn read_pairs_tsv<R: BufRead>(r: R) -> Result<Vec<QueryPair>, TypoError> {
    let mut pairs = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(TypoError::Parse {
                line: i + 1,
                msg: format!("expected 5 tab-separated fields, got {}", fields.len()),
            });
        }
        let word_index = fields[3].parse().map_err(|_| TypoError::Parse {
            line: i + 1,
            msg: format!("bad word index {:?}", fields[3]),
        })?;
        pairs.push(QueryPair {
            query_id: fields[0].to_string(),
            clean_text: fields[1].to_string(),
            typo_text: fields[2].to_string(),
            word_index,
            kind: fields[4].parse()?,
        });
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use std::collections::BTreeSet;

    /// Every outcome of a kind, including identities.
    fn enumerate_outcomes(word: &str, kind: TypoKind) -> BTreeSet<String> {
        let chars: Vec<char> = word.chars().collect();
        let n = chars.len();
        let mut out = BTreeSet::new();
        match kind {
            TypoKind::RandInsert => {
                for pos in 0..=n {
                    for &l in LETTERS {
                        let mut c = chars.clone();
                        c.insert(pos, l as char);
                        out.insert(c.into_iter().collect());
                    }
                }
            }
            TypoKind::RandDelete => {
                for pos in 0..n {
                    let mut c = chars.clone();
                    c.remove(pos);
                    out.insert(c.into_iter().collect());
                }
            }
            TypoKind::RandSub => {
                for pos in 0..n {
                    for &l in LETTERS {
                        let mut c = chars.clone();
                        c[pos] = l as char;
                        out.insert(c.into_iter().collect());
                    }
                }
            }
            TypoKind::SwapNeighbor => {
                for i in 0..n - 1 {
                    let mut c = chars.clone();
                    c.swap(i, i + 1);
                    out.insert(c.into_iter().collect());
                }
            }
            TypoKind::SwapAdjacent => {
                for pos in 0..n {
                    for nb in keyboard_neighbors(chars[pos]).chars() {
                        let mut c = chars.clone();
                        c[pos] = nb;
                        out.insert(c.into_iter().collect());
                    }
                }
            }
        }
        out.remove(word);
        out
    }

    #[test]
    fn eligible_indices_examples() {
        let cfg = TypoConfig::default();
        assert_eq!(eligible_word_indices("what is information", &cfg), vec![2]);
        assert!(eligible_word_indices("a an the", &cfg).is_empty());
        assert_eq!(eligible_word_indices("apple pie recipe", &cfg), vec![0, 1, 2]);
    }

    #[test]
    fn delete_outcomes_of_cat() {
        let allowed: BTreeSet<String> = ["at", "ct", "ca"].iter().map(|s| s.to_string()).collect();
        let mut seen = BTreeSet::new();
        for s in 0..200 {
            let out = apply_typo("cat", TypoKind::RandDelete, &mut rng_from_seed(s)).unwrap();
            assert!(allowed.contains(&out), "{out}");
            seen.insert(out);
        }
        assert_eq!(seen, allowed);
    }

    #[test]
    fn swap_neighbor_rejects_identity() {
        let allowed: BTreeSet<String> = ["paple", "aplpe", "appel"].iter().map(|s| s.to_string()).collect();
        assert_eq!(enumerate_outcomes("apple", TypoKind::SwapNeighbor), allowed);
        let mut seen = BTreeSet::new();
        for s in 0..300 {
            seen.insert(apply_typo("apple", TypoKind::SwapNeighbor, &mut rng_from_seed(s)).unwrap());
        }
        assert_eq!(seen, allowed);
    }

    #[test]
    fn degenerate_swap() {
        let err = apply_typo("aaa", TypoKind::SwapNeighbor, &mut rng_from_seed(1)).unwrap_err();
        assert!(matches!(err, TypoError::DegenerateWord { .. }));
    }

    #[test]
    fn outcomes_stay_in_enumerated_sets() {
        for word in ["cat", "apple", "keyboard", "zzzq"] {
            for kind in TypoKind::ALL {
                let set = enumerate_outcomes(word, kind);
                for s in 0..100 {
                    let out = apply_typo(word, kind, &mut rng_from_seed(s)).unwrap();
                    assert!(set.contains(&out), "{word} {kind} -> {out}");
                }
            }
        }
    }

    #[test]
    fn no_eligible_word() {
        let err = generate_typo_pair("1", "a an the", &TypoConfig::default(), &mut rng_from_seed(0)).unwrap_err();
        assert!(matches!(err, TypoError::NoEligibleWord { .. }));
    }

    #[test]
    fn single_candidate_forces_choice() {
        for s in 0..50 {
            let p = generate_typo_pair("3", "apple", &TypoConfig::default(), &mut rng_from_seed(s)).unwrap();
            assert_eq!(p.word_index, 0);
        }
    }

    #[test]
    fn one_word_differs_over_many_seeds() {
        let cfg = TypoConfig::default();
        for s in 0..1000 {
            let p = generate_typo_pair("2", "information retrieval", &cfg, &mut rng_from_seed(s)).unwrap();
            let a: Vec<&str> = p.clean_text.split_ascii_whitespace().collect();
            let b: Vec<&str> = p.typo_text.split_ascii_whitespace().collect();
            assert_eq!(a.len(), b.len());
            assert_eq!(a.iter().zip(&b).filter(|(x, y)| x != y).count(), 1);
            assert_ne!(a[p.word_index], b[p.word_index]);
        }
    }

    #[test]
    fn altered_characters_are_lowercase() {
        let cfg = TypoConfig::default();
        for s in 0..200 {
            let p = generate_typo_pair("q", "INFORMATION", &cfg, &mut rng_from_seed(s)).unwrap();
            if matches!(p.kind, TypoKind::RandInsert | TypoKind::RandSub | TypoKind::SwapAdjacent) {
                assert_eq!(p.typo_text.chars().filter(|c| c.is_lowercase()).count(), 1, "{}", p.typo_text);
            }
        }
    }

    #[test]
    fn replicas_are_deterministic_and_skip_consistently() {
        let queries = vec![
            ("1".to_string(), "cheap flights to paris".to_string()),
            ("2".to_string(), "a an the".to_string()),
            ("3".to_string(), "symptoms of influenza".to_string()),
        ];
        let cfg = TypoConfig::default();
        let a = generate_replicas(&queries, 4, &cfg, 11).unwrap();
        let b = generate_replicas(&queries, 4, &cfg, 11).unwrap();
        assert_eq!(a, b);
        for r in &a {
            let ids: Vec<&str> = r.iter().map(|p| p.query_id.as_str()).collect();
            assert_eq!(ids, vec!["1", "3"]);
        }
        let empty = generate_replicas(&[("x".into(), "a an the".into())], 3, &cfg, 0).unwrap();
        assert_eq!(empty.len(), 3);
        assert!(empty.iter().all(|r| r.is_empty()));
    }

    #[test]
    fn kind_weights_parse_and_validate() {
        let w = TypoConfig::parse_kind_weights("1,1,1,1,0").unwrap();
        assert_eq!(w, [0.25, 0.25, 0.25, 0.25, 0.0]);
        assert!(TypoConfig::parse_kind_weights("1,1").is_err());
        let mut cfg = TypoConfig::default();
        cfg.kind_weights = [0.5, 0.5, 0.5, 0.0, 0.0];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn weighted_kind_is_respected() {
        let mut cfg = TypoConfig::default();
        cfg.kind_weights = [0.0, 0.0, 0.0, 1.0, 0.0];
        for s in 0..50 {
            let p = generate_typo_pair("q", "retrieval", &cfg, &mut rng_from_seed(s)).unwrap();
            assert_eq!(p.kind, TypoKind::SwapNeighbor);
        }
        // The only kind allowed cannot alter "aaa"; with nothing else left the query fails.
        let err = generate_typo_pair("q", "aaaa", &cfg, &mut rng_from_seed(0)).unwrap_err();
        assert!(matches!(err, TypoError::NoEligibleWord { .. }));
    }

    #[test]
    fn pairs_tsv_roundtrip() {
        let queries = vec![("7".to_string(), "dense passage retrieval".to_string())];
        let pairs = generate_replicas(&queries, 1, &TypoConfig::default(), 5).unwrap().remove(0);
        let mut buf = Vec::new();
        write_pairs_tsv(&mut buf, &pairs).unwrap();
        assert_eq!(read_pairs_tsv(&buf[..]).unwrap(), pairs);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn length_change_matches_kind(word in "[a-z]{3,12}", seed in any::<u64>(), k in 0usize..5) {
                let kind = TypoKind::ALL[k];
                match apply_typo(&word, kind, &mut rng_from_seed(seed)) {
                    Ok(out) => {
                        let (n, m) = (word.chars().count(), out.chars().count());
                        let expected = match kind {
                            TypoKind::RandInsert => n + 1,
                            TypoKind::RandDelete => n - 1,
                            _ => n,
                        };
                        prop_assert_eq!(m, expected);
                        prop_assert_ne!(out, word);
                    }
                    Err(TypoError::DegenerateWord { .. }) => {
                        prop_assert!(enumerate_outcomes(&word, kind).is_empty());
                    }
                    Err(e) => prop_assert!(false, "{e}"),
                }
            }

            #[test]
            fn altered_word_is_eligible(text in "[a-z]{1,8}( [a-z]{1,8}){0,5}", seed in any::<u64>()) {
                let cfg = TypoConfig::default();
                if let Ok(p) = generate_typo_pair("q", &text, &cfg, &mut rng_from_seed(seed)) {
                    let clean: Vec<&str> = p.clean_text.split_ascii_whitespace().collect();
                    let typo: Vec<&str> = p.typo_text.split_ascii_whitespace().collect();
                    prop_assert_eq!(clean.len(), typo.len());
                    let diffs: Vec<usize> = (0..clean.len()).filter(|&i| clean[i] != typo[i]).collect();
                    prop_assert_eq!(diffs, vec![p.word_index]);
                    prop_assert!(is_eligible(clean[p.word_index], &cfg));
                }
            }
        }
    }
}
