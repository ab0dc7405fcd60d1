//! BM25 over an in-memory inverted index.
//!
//! Passages are numbered in [`compare_ids`] order, so postings sorted by
//! document number are also sorted by passage id and score ties resolve to
//! the smaller id by comparing document numbers.
//!
//! Index file layout (little-endian `u32` integers, strings as length +
//! UTF-8 bytes):
//!
//! ```text
//! "TGIX" | version | stopword flag (u8) [| n_stopwords | word*]
//!        | n_docs | (pid | length)*
//!        | n_terms | (term | df | (doc | tf)*)*
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::binio::{put_str, put_u32, ByteReader};
use crate::data::compare_ids;
use crate::tokenizer::basic_tokenize;

pub const MAGIC: &[u8; 4] = b"TGIX";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SparseError {
    #[error("duplicate passage id {0:?}")]
    DuplicatePid(String),
    #[error("the index contains no passages")]
    EmptyIndex,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("bad index file: {0}")]
    BadIndex(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 0.9, b: 0.4 }
    }
}

/// Lowercased word tokens with punctuation-only tokens removed and,
/// optionally, stopwords.
pub fn analyze(text: &str, stopwords: Option<&HashSet<String>>) -> Vec<String> {
    basic_tokenize(text)
        .into_iter()
        .filter(|t| t.chars().any(char::is_alphanumeric))
        .filter(|t| stopwords.is_none_or(|s| !s.contains(t)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    pids: Vec<String>,
    lengths: Vec<u32>,
    postings: BTreeMap<String, Vec<Posting>>,
    stopwords: Option<HashSet<String>>,
    avg_len: f64,
}

impl InvertedIndex {
    /// Build from `(pid, text)` rows. With `stopwords` set, those terms are
    /// removed from passages and queries alike.
    pub fn build(collection: &[(String, String)], stopwords: Option<HashSet<String>>) -> Result<Self, SparseError> {
        let mut order: Vec<usize> = (0..collection.len()).collect();
        order.sort_by(|&a, &b| compare_ids(&collection[a].0, &collection[b].0));
        for w in order.windows(2) {
            if collection[w[0]].0 == collection[w[1]].0 {
                return Err(SparseError::DuplicatePid(collection[w[0]].0.clone()));
            }
        }
        let mut pids = Vec::with_capacity(order.len());
        let mut lengths = Vec::with_capacity(order.len());
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        for (doc, &i) in order.iter().enumerate() {
            let (pid, text) = &collection[i];
            let terms = analyze(text, stopwords.as_ref());
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in &terms {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for (t, n) in tf {
                postings.entry(t).or_default().push(Posting { doc: doc as u32, tf: n });
            }
            pids.push(pid.clone());
            lengths.push(terms.len() as u32);
        }
        Ok(Self::assemble(pids, lengths, postings, stopwords))
    }

    fn assemble(
        pids: Vec<String>,
        lengths: Vec<u32>,
        postings: BTreeMap<String, Vec<Posting>>,
        stopwords: Option<HashSet<String>>,
    ) -> Self {
        let avg_len = if lengths.is_empty() {
            0.0
        } else {
            lengths.iter().map(|&l| l as f64).sum::<f64>() / lengths.len() as f64
        };
        Self {
            pids,
            lengths,
            postings,
            stopwords,
            avg_len,
        }
    }

    pub fn len(&self) -> usize {
        self.pids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pids.is_empty()
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn pid(&self, doc: u32) -> &str {
        &self.pids[doc as usize]
    }

    pub fn doc_len(&self, doc: u32) -> u32 {
        self.lengths[doc as usize]
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map_or(&[], Vec::as_slice)
    }

    pub fn df(&self, term: &str) -> usize {
        self.postings(term).len()
    }

    pub fn tf(&self, term: &str, pid: &str) -> u32 {
        self.postings(term)
            .iter()
            .find(|p| self.pid(p.doc) == pid)
            .map_or(0, |p| p.tf)
    }

    /// `ln(1 + (N − df + 0.5) / (df + 0.5))`, never negative.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.len() as f64;
        let df = self.df(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Top `k` passages by BM25, ties broken by ascending passage id. Each
    /// distinct query term contributes once.
    pub fn search(&self, query: &str, k: usize, params: Bm25Params) -> Result<Vec<(String, f64)>, SparseError> {
        if k == 0 {
            return Err(SparseError::ZeroK);
        }
        if self.is_empty() {
            return Err(SparseError::EmptyIndex);
        }
        let mut terms = analyze(query, self.stopwords.as_ref());
        terms.sort();
        terms.dedup();
        let mut acc: HashMap<u32, f64> = HashMap::new();
        for t in &terms {
            let idf = self.idf(t);
            for p in self.postings(t) {
                let tf = p.tf as f64;
                let norm = params.k1 * (1.0 - params.b + params.b * self.doc_len(p.doc) as f64 / self.avg_len);
                *acc.entry(p.doc).or_default() += idf * tf * (params.k1 + 1.0) / (tf + norm);
            }
        }
        let mut hits: Vec<(u32, f64)> = acc.into_iter().collect();
        let cmp = |a: &(u32, f64), b: &(u32, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
        if hits.len() > k {
            hits.select_nth_unstable_by(k - 1, cmp);
            hits.truncate(k);
        }
        hits.sort_unstable_by(cmp);
        Ok(hits.into_iter().map(|(d, s)| (self.pid(d).to_string(), s)).collect())
    }

    /// Search many queries in parallel; output order follows `queries`.
    pub fn search_all(
        &self,
        queries: &[(String, String)],
        k: usize,
        params: Bm25Params,
    ) -> Result<Vec<(String, Vec<(String, f64)>)>, SparseError> {
        queries
            .par_iter()
            .map(|(qid, text)| Ok((qid.clone(), self.search(text, k, params)?)))
            .collect()
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), SparseError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, VERSION);
        match &self.stopwords {
            None => buf.push(0),
            Some(set) => {
                buf.push(1);
                let mut words: Vec<&String> = set.iter().collect();
                words.sort();
                put_u32(&mut buf, words.len() as u32);
                for word in words {
                    put_str(&mut buf, word);
                }
            }
        }
        put_u32(&mut buf, self.pids.len() as u32);
        for (pid, &len) in self.pids.iter().zip(&self.lengths) {
            put_str(&mut buf, pid);
            put_u32(&mut buf, len);
        }
        put_u32(&mut buf, self.postings.len() as u32);
        for (term, list) in &self.postings {
            put_str(&mut buf, term);
            put_u32(&mut buf, list.len() as u32);
            for p in list {
                put_u32(&mut buf, p.doc);
                put_u32(&mut buf, p.tf);
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, SparseError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::parse(&mut ByteReader::new(&bytes)).map_err(SparseError::BadIndex)
    }

    fn parse(cur: &mut ByteReader) -> Result<Self, String> {
        if cur.take(4)? != MAGIC {
            return Err("bad magic".into());
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let stopwords = match cur.u8()? {
            0 => None,
            1 => {
                let n = cur.u32()?;
                Some((0..n).map(|_| cur.string()).collect::<Result<HashSet<_>, _>>()?)
            }
            f => return Err(format!("bad stopword flag {f}")),
        };
        let n_docs = cur.u32()? as usize;
        let mut pids = Vec::new();
        let mut lengths = Vec::new();
        for _ in 0..n_docs {
            pids.push(cur.string()?);
            lengths.push(cur.u32()?);
        }
        let n_terms = cur.u32()?;
        let mut postings = BTreeMap::new();
        for _ in 0..n_terms {
            let term = cur.string()?;
            let df = cur.u32()?;
            let mut list: Vec<Posting> = Vec::new();
            for _ in 0..df {
                let doc = cur.u32()?;
                let tf = cur.u32()?;
                if doc as usize >= n_docs || list.last().is_some_and(|p| p.doc >= doc) {
                    return Err(format!("postings of {term:?} are out of order"));
                }
                list.push(Posting { doc, tf });
            }
            postings.insert(term, list);
        }
        cur.finish()?;
        Ok(Self::assemble(pids, lengths, postings, stopwords))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SparseError> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SparseError> {
        Self::read(std::fs::File::open(path)?)
    }
}
