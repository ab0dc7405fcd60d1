//! WordPiece and character-level front-ends, plus the tokenization
//! difference between a clean query and its typo variant.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;
use std::ops::Range;
use std::path::Path;

use thiserror::Error;

use crate::typo_gen::QueryPair;

pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const PAD: &str = "[PAD]";
pub const CONTINUATION: &str = "##";
pub const MAX_WORDPIECE_CHARS: usize = 100;

/// Character id space: 256 byte values followed by six specials.
pub const CHAR_VOCAB_SIZE: usize = 262;
pub const CHAR_PAD: u16 = 256;
pub const CHAR_BOW: u16 = 257;
pub const CHAR_EOW: u16 = 258;
pub const CHAR_CLS: u16 = 259;
pub const CHAR_SEP: u16 = 260;
pub const CHAR_MASK: u16 = 261;
pub const DEFAULT_MAX_WORD_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("vocabulary is missing special token {0}")]
    MissingSpecial(&'static str),
    #[error("duplicate vocabulary entry {token:?} at line {line}")]
    DuplicateToken { token: String, line: usize },
    #[error("max word length must be at least 3, got {0}")]
    WordLength(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(c as u32, 0x2000..=0x206F | 0x3000..=0x303F | 0xFF01..=0xFF0F)
}

/// Lowercase, split on whitespace, and split punctuation into single-character words.
pub fn basic_tokenize(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    for chunk in text.split_whitespace() {
        let mut current = String::new();
        for c in chunk.chars() {
            if c.is_control() {
                continue;
            }
            if is_punctuation(c) {
                if !current.is_empty() {
                    words.push(std::mem::take(&mut current));
                }
                words.push(c.to_string());
            } else {
                current.extend(c.to_lowercase());
            }
        }
        if !current.is_empty() {
            words.push(current);
        }
    }
    words
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordPieceVocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    unk_id: u32,
    cls_id: u32,
    sep_id: u32,
    pad_id: u32,
}

impl WordPieceVocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, TokenizerError> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(TokenizerError::DuplicateToken {
                    token: t.clone(),
                    line: i + 1,
                });
            }
        }
        let get = |s: &'static str| ids.get(s).copied().ok_or(TokenizerError::MissingSpecial(s));
        let (unk_id, cls_id, sep_id, pad_id) = (get(UNK)?, get(CLS)?, get(SEP)?, get(PAD)?);
        Ok(Self {
            tokens,
            ids,
            unk_id,
            cls_id,
            sep_id,
            pad_id,
        })
    }

    /// `vocab.txt` layout: one token per line, line number is the id.
    pub fn from_reader<R: BufRead>(r: R) -> Result<Self, TokenizerError> {
        let tokens = r
            .lines()
            .map(|l| l.map(|s| s.trim_end_matches(['\r', '\n']).to_string()))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_tokens(tokens)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TokenizerError> {
        let f = std::fs::File::open(path)?;
        Self::from_reader(std::io::BufReader::new(f))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn unk_id(&self) -> u32 {
        self.unk_id
    }
    pub fn cls_id(&self) -> u32 {
        self.cls_id
    }
    pub fn sep_id(&self) -> u32 {
        self.sep_id
    }
    pub fn pad_id(&self) -> u32 {
        self.pad_id
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
    pub ids: Vec<u32>,
    /// `(word index, sub-token range)` for every input word, in order.
    pub word_spans: Vec<(usize, Range<usize>)>,
    /// Indices of words replaced by `[UNK]` for exceeding the length limit.
    pub too_long: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Greedy longest-match-first split of one word, or `None` when some
/// position has no matching vocabulary entry.
fn split_word(word: &str, vocab: &WordPieceVocab) -> Option<Vec<(String, u32)>> {
    let chars: Vec<(usize, char)> = word.char_indices().collect();
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while start < end {
            let s = chars[start].0;
            let e = if end == chars.len() { word.len() } else { chars[end].0 };
            let candidate = if start > 0 {
                format!("{CONTINUATION}{}", &word[s..e])
            } else {
                word[s..e].to_string()
            };
            if let Some(id) = vocab.id(&candidate) {
                found = Some((candidate, id));
                break;
            }
            end -= 1;
        }
        let piece = found?;
        pieces.push(piece);
        start = end;
    }
    Some(pieces)
}

pub fn wordpiece_tokenize<S: AsRef<str>>(words: &[S], vocab: &WordPieceVocab) -> TokenSequence {
    let mut seq = TokenSequence::default();
    for (wi, word) in words.iter().enumerate() {
        let word = word.as_ref();
        let start = seq.tokens.len();
        let pieces = if word.chars().count() > MAX_WORDPIECE_CHARS {
            seq.too_long.push(wi);
            None
        } else {
            split_word(word, vocab)
        };
        match pieces {
            Some(pieces) => {
                for (t, id) in pieces {
                    seq.tokens.push(t);
                    seq.ids.push(id);
                }
            }
            None => {
                seq.tokens.push(UNK.to_string());
                seq.ids.push(vocab.unk_id());
            }
        }
        seq.word_spans.push((wi, start..seq.tokens.len()));
    }
    seq
}

/// Basic tokenization followed by WordPiece.
pub fn tokenize_text(text: &str, vocab: &WordPieceVocab) -> TokenSequence {
    wordpiece_tokenize(&basic_tokenize(text), vocab)
}

/// Fixed-width character codes, one row per word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharWordCodes {
    pub max_word_len: usize,
    pub codes: Vec<Vec<u16>>,
}

impl CharWordCodes {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

fn frame(inner: impl IntoIterator<Item = u16>, max_word_len: usize) -> Vec<u16> {
    let mut row = Vec::with_capacity(max_word_len);
    row.push(CHAR_BOW);
    row.extend(inner.into_iter().take(max_word_len - 2));
    row.push(CHAR_EOW);
    row.resize(max_word_len, CHAR_PAD);
    row
}

pub fn char_encode_word(word: &str, max_word_len: usize) -> Vec<u16> {
    frame(word.bytes().map(u16::from), max_word_len)
}

/// The sentence-start and sentence-end marker words.
pub fn char_special_word(id: u16, max_word_len: usize) -> Vec<u16> {
    frame([id], max_word_len)
}

pub fn char_encode<S: AsRef<str>>(words: &[S], max_word_len: usize) -> Result<CharWordCodes, TokenizerError> {
    if max_word_len < 3 {
        return Err(TokenizerError::WordLength(max_word_len));
    }
    Ok(CharWordCodes {
        max_word_len,
        codes: words.iter().map(|w| char_encode_word(w.as_ref(), max_word_len)).collect(),
    })
}

/// Tokens of `typo` left over after matching them one-to-one against equal
/// tokens of `orig` (multiset difference, counted on the typo side).
pub fn tokenization_difference(orig: &TokenSequence, typo: &TokenSequence) -> usize {
    let mut available: HashMap<&str, usize> = HashMap::new();
    for t in &orig.tokens {
        *available.entry(t.as_str()).or_default() += 1;
    }
    typo.tokens
        .iter()
        .filter(|t| match available.get_mut(t.as_str()) {
            Some(n) if *n > 0 => {
                *n -= 1;
                false
            }
            _ => true,
        })
        .count()
}

pub fn pair_token_difference(pair: &QueryPair, vocab: &WordPieceVocab) -> usize {
    tokenization_difference(&tokenize_text(&pair.clean_text, vocab), &tokenize_text(&pair.typo_text, vocab))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DifferenceHistogram {
    /// Counts over all supplied pairs.
    pub counts: BTreeMap<usize, usize>,
    /// Counts divided by the number of replicas.
    pub per_replica_mean: BTreeMap<usize, f64>,
    pub replicas: usize,
    pub total_pairs: usize,
}

impl DifferenceHistogram {
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (d, c) in &self.per_replica_mean {
            s.push_str(&format!("{d}\t{c}\n"));
        }
        s
    }

    pub fn to_table(&self) -> String {
        let keys: Vec<usize> = self.per_replica_mean.keys().copied().collect();
        let mut header = format!("{:>8}", "Diff");
        let mut row = format!("{:>8}", "Count");
        for k in &keys {
            header.push_str(&format!(" {k:>9}"));
            row.push_str(&format!(" {:>9.1}", self.per_replica_mean[k]));
        }
        let total = self.total_pairs as f64 / self.replicas.max(1) as f64;
        header.push_str(&format!(" {:>9}", "Total"));
        row.push_str(&format!(" {total:>9.1}"));
        format!("{header}\n{row}\n")
    }
}

/// Histogram of tokenization differences over one or more replicas.
pub fn difference_histogram(replicas: &[Vec<QueryPair>], vocab: &WordPieceVocab) -> DifferenceHistogram {
    let mut counts = BTreeMap::new();
    let mut total = 0;
    for pair in replicas.iter().flatten() {
        *counts.entry(pair_token_difference(pair, vocab)).or_insert(0) += 1;
        total += 1;
    }
    let n = replicas.iter().filter(|r| !r.is_empty()).count().max(usize::from(total > 0));
    let per_replica_mean = counts.iter().map(|(k, v)| (*k, *v as f64 / n as f64)).collect();
    DifferenceHistogram {
        counts,
        per_replica_mean,
        replicas: n,
        total_pairs: total,
    }
}
