//! Bi-encoder with two interchangeable embedding front-ends.
//!
//! A text is turned into an [`EncoderInput`] (WordPiece ids for the lookup
//! front-end, fixed-width character codes per word for the character CNN),
//! framed by CLS/SEP, embedded, passed through a small post-norm transformer
//! and reduced to the output vector at the CLS position. Relevance is the
//! dot product of query and passage vectors.
//!
//! Gradients are computed by hand-written reverse passes; the model is
//! generic over [`Real`] so the same code runs in `f32` for training and in
//! `f64` for finite-difference checks.

mod checkpoint;
mod params;
mod real;
mod tower;

use std::collections::BTreeMap;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1};
use thiserror::Error;

pub use checkpoint::{fingerprint, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, MAGIC};
pub use params::{is_no_decay, Tensor, INIT_STD};
pub use real::Real;
pub use tower::SeqCache;

use crate::rng::{derived_rng, SeedPart};
use crate::tokenizer::{
    basic_tokenize, char_encode_word, char_special_word, wordpiece_tokenize, TokenizerError, WordPieceVocab,
    CHAR_CLS, CHAR_SEP, CHAR_VOCAB_SIZE,
};
use params::{ParamBuilder, TowerIdx};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("loss is not finite: {0}")]
    NonFiniteLoss(f64),
    #[error("a lookup front-end needs a WordPiece vocabulary")]
    MissingVocab,
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FrontEnd {
    Lookup,
    CharCnn,
}

impl FrontEnd {
    pub fn name(self) -> &'static str {
        match self {
            FrontEnd::Lookup => "lookup",
            FrontEnd::CharCnn => "charcnn",
        }
    }
}

impl FromStr for FrontEnd {
    type Err = EncoderError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lookup" => Ok(FrontEnd::Lookup),
            "charcnn" => Ok(FrontEnd::CharCnn),
            _ => Err(EncoderError::InvalidConfig(format!("unknown front-end {s:?}"))),
        }
    }
}

impl std::fmt::Display for FrontEnd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which side of the bi-encoder a text is encoded with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Query,
    Passage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub front_end: FrontEnd,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub char_dim: usize,
    pub max_word_len: usize,
    /// `(width, count)` per convolution bank.
    pub filters: Vec<(usize, usize)>,
    pub highway_layers: usize,
    /// Queries and passages share one parameter set. When false, queries use
    /// a character-CNN tower and passages a separate lookup tower.
    pub tied_encoders: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            front_end: FrontEnd::Lookup,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_seq_len: 32,
            char_dim: 16,
            max_word_len: crate::tokenizer::DEFAULT_MAX_WORD_LEN,
            filters: vec![(1, 8), (2, 8), (3, 16)],
            highway_layers: 1,
            tied_encoders: true,
        }
    }
}

impl EncoderConfig {
    pub fn filter_total(&self) -> usize {
        self.filters.iter().map(|f| f.1).sum()
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: String| Err(EncoderError::InvalidConfig(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads));
        }
        if self.max_seq_len < 2 {
            return bad("max_seq_len must be at least 2".into());
        }
        if self.d_ff == 0 {
            return bad("d_ff must be positive".into());
        }
        if self.uses_charcnn() {
            if self.filters.is_empty() || self.filters.iter().any(|&(w, c)| w == 0 || c == 0) {
                return bad("filter bank needs positive widths and counts".into());
            }
            if self.max_word_len < 3 || self.filters.iter().any(|&(w, _)| w > self.max_word_len) {
                return bad("filter width exceeds max_word_len".into());
            }
            if self.char_dim == 0 {
                return bad("char_dim must be positive".into());
            }
        }
        if !self.tied_encoders && self.front_end != FrontEnd::CharCnn {
            return bad("untied encoders pair a charcnn query tower with a lookup passage tower; set front_end = charcnn".into());
        }
        Ok(())
    }

    fn uses_charcnn(&self) -> bool {
        self.front_end == FrontEnd::CharCnn || !self.tied_encoders
    }

    fn needs_vocab(&self) -> bool {
        self.front_end == FrontEnd::Lookup || !self.tied_encoders
    }

    pub fn query_front_end(&self) -> FrontEnd {
        if self.tied_encoders {
            self.front_end
        } else {
            FrontEnd::CharCnn
        }
    }

    pub fn passage_front_end(&self) -> FrontEnd {
        if self.tied_encoders {
            self.front_end
        } else {
            FrontEnd::Lookup
        }
    }

    /// Closed-form parameter count (see README).
    pub fn parameter_count(&self, vocab_size: usize) -> usize {
        let d = self.d_model;
        let front = |fe: FrontEnd| match fe {
            FrontEnd::Lookup => vocab_size * d,
            FrontEnd::CharCnn => {
                let nf = self.filter_total();
                CHAR_VOCAB_SIZE * self.char_dim
                    + self
                        .filters
                        .iter()
                        .map(|&(w, c)| c * (w * self.char_dim + 1))
                        .sum::<usize>()
                    + self.highway_layers * 2 * (nf * nf + nf)
                    + d * nf
                    + d
            }
        };
        let body = self.max_seq_len * d
            + 2 * d
            + self.n_layers * (4 * (d * d + d) + 4 * d + (self.d_ff * d + self.d_ff) + (d * self.d_ff + d));
        if self.tied_encoders {
            front(self.front_end) + body
        } else {
            front(FrontEnd::CharCnn) + front(FrontEnd::Lookup) + 2 * body
        }
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let filters = self
            .filters
            .iter()
            .map(|(w, c)| format!("{w}x{c}"))
            .collect::<Vec<_>>()
            .join(",");
        BTreeMap::from([
            ("front_end".into(), self.front_end.to_string()),
            ("d_model".into(), self.d_model.to_string()),
            ("n_layers".into(), self.n_layers.to_string()),
            ("n_heads".into(), self.n_heads.to_string()),
            ("d_ff".into(), self.d_ff.to_string()),
            ("max_seq_len".into(), self.max_seq_len.to_string()),
            ("char_dim".into(), self.char_dim.to_string()),
            ("max_word_len".into(), self.max_word_len.to_string()),
            ("filters".into(), filters),
            ("highway_layers".into(), self.highway_layers.to_string()),
            ("tied_encoders".into(), self.tied_encoders.to_string()),
        ])
    }

    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), EncoderError> {
        let num = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| EncoderError::InvalidConfig(format!("{key}: expected an integer, got {v:?}")))
        };
        match key {
            "front_end" => self.front_end = value.parse()?,
            "d_model" => self.d_model = num(value)?,
            "n_layers" => self.n_layers = num(value)?,
            "n_heads" => self.n_heads = num(value)?,
            "d_ff" => self.d_ff = num(value)?,
            "max_seq_len" => self.max_seq_len = num(value)?,
            "char_dim" => self.char_dim = num(value)?,
            "max_word_len" => self.max_word_len = num(value)?,
            "highway_layers" => self.highway_layers = num(value)?,
            "tied_encoders" => {
                self.tied_encoders = value
                    .parse()
                    .map_err(|_| EncoderError::InvalidConfig(format!("tied_encoders: bad bool {value:?}")))?
            }
            "filters" => {
                self.filters = value
                    .split(',')
                    .map(|f| {
                        let (w, c) = f
                            .trim()
                            .split_once('x')
                            .ok_or_else(|| EncoderError::InvalidConfig(format!("filters: bad entry {f:?}")))?;
                        Ok((num(w)?, num(c)?))
                    })
                    .collect::<Result<_, EncoderError>>()?
            }
            _ => return Err(EncoderError::InvalidConfig(format!("unknown encoder key {key:?}"))),
        }
        Ok(())
    }

    pub fn from_kv<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self, EncoderError> {
        let mut c = Self::default();
        for (k, v) in pairs {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Model input for one text, already framed by CLS and SEP.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EncoderInput {
    Tokens(Vec<u32>),
    Chars(Vec<Vec<u16>>),
}

impl EncoderInput {
    pub fn len(&self) -> usize {
        match self {
            EncoderInput::Tokens(t) => t.len(),
            EncoderInput::Chars(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A query or passage vector.
pub type Embedding<F = f32> = Vec<F>;

pub fn score<F: Real>(q: &[F], p: &[F]) -> Result<F, EncoderError> {
    if q.len() != p.len() {
        return Err(EncoderError::DimensionMismatch(q.len(), p.len()));
    }
    Ok(q.iter().zip(p).map(|(&a, &b)| a * b).sum())
}

/// Per-parameter gradients, shaped like the model's tensors.
pub type Gradients<F> = Vec<Tensor<F>>;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel<F = f32> {
    config: EncoderConfig,
    vocab: Option<WordPieceVocab>,
    names: Vec<String>,
    params: Vec<Tensor<F>>,
    query: TowerIdx,
    passage: Option<TowerIdx>,
}

impl<F: Real> EncoderModel<F> {
    fn build(
        config: EncoderConfig,
        vocab: Option<WordPieceVocab>,
        rng: Option<&mut crate::rng::Pcg64>,
    ) -> Result<Self, EncoderError> {
        config.validate()?;
        if config.needs_vocab() && vocab.is_none() {
            return Err(EncoderError::MissingVocab);
        }
        let vocab_size = vocab.as_ref().map_or(0, |v| v.len());
        let mut b = ParamBuilder::new(rng);
        let (query, passage) = if config.tied_encoders {
            (b.tower("encoder", config.front_end, &config, vocab_size), None)
        } else {
            let q = b.tower("query", FrontEnd::CharCnn, &config, vocab_size);
            let p = b.tower("passage", FrontEnd::Lookup, &config, vocab_size);
            (q, Some(p))
        };
        Ok(Self {
            config,
            vocab,
            names: b.names,
            params: b.tensors,
            query,
            passage,
        })
    }

    /// Fresh model: truncated normal (std 0.02) weights, zero biases, unit norm scales.
    pub fn init(config: EncoderConfig, vocab: Option<WordPieceVocab>, seed: u64) -> Result<Self, EncoderError> {
        let mut rng = derived_rng(seed, &[SeedPart::Str("encoder-init")]);
        Self::build(config, vocab, Some(&mut rng))
    }

    /// Same architecture with every parameter replaced by `values`.
    pub fn with_params(
        config: EncoderConfig,
        vocab: Option<WordPieceVocab>,
        named: Vec<(String, Tensor<F>)>,
    ) -> Result<Self, EncoderError> {
        let mut m = Self::build(config, vocab, None)?;
        if named.len() != m.params.len() {
            return Err(EncoderError::BadCheckpoint(format!(
                "expected {} tensors, found {}",
                m.params.len(),
                named.len()
            )));
        }
        for ((name, t), (want, slot)) in named.into_iter().zip(m.names.iter().zip(m.params.iter_mut())) {
            if &name != want || t.shape != slot.shape {
                return Err(EncoderError::BadCheckpoint(format!(
                    "tensor {name} {:?} does not match expected {want} {:?}",
                    t.shape, slot.shape
                )));
            }
            *slot = t;
        }
        Ok(m)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn vocab(&self) -> Option<&WordPieceVocab> {
        self.vocab.as_ref()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|t| t.len()).sum()
    }

    pub fn zero_gradients(&self) -> Gradients<F> {
        self.params.iter().map(|t| Tensor::zeros(&t.shape)).collect()
    }

    pub fn cast<G: Real>(&self) -> EncoderModel<G> {
        EncoderModel {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(|t| t.cast()).collect(),
            query: self.query.clone(),
            passage: self.passage.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    fn tower(&self, role: Role) -> &TowerIdx {
        match role {
            Role::Query => &self.query,
            Role::Passage => self.passage.as_ref().unwrap_or(&self.query),
        }
    }

    fn front_end_for(&self, role: Role) -> FrontEnd {
        match role {
            Role::Query => self.config.query_front_end(),
            Role::Passage => self.config.passage_front_end(),
        }
    }

    /// Tokenize and frame `text` for the tower used by `role`, truncating to
    /// `max_seq_len` while keeping CLS and SEP.
    pub fn prepare(&self, text: &str, role: Role) -> EncoderInput {
        let words = basic_tokenize(text);
        let room = self.config.max_seq_len - 2;
        match self.front_end_for(role) {
            FrontEnd::Lookup => {
                let vocab = self.vocab.as_ref().expect("validated at construction");
                let mut ids = wordpiece_tokenize(&words, vocab).ids;
                if ids.len() > room {
                    log::warn!("sequence of {} tokens truncated to {}", ids.len() + 2, self.config.max_seq_len);
                    ids.truncate(room);
                }
                let mut framed = Vec::with_capacity(ids.len() + 2);
                framed.push(vocab.cls_id());
                framed.extend(ids);
                framed.push(vocab.sep_id());
                EncoderInput::Tokens(framed)
            }
            FrontEnd::CharCnn => {
                let w = self.config.max_word_len;
                if words.len() > room {
                    log::warn!("sequence of {} words truncated to {}", words.len() + 2, self.config.max_seq_len);
                }
                let mut rows = Vec::with_capacity(words.len().min(room) + 2);
                rows.push(char_special_word(CHAR_CLS, w));
                rows.extend(words.iter().take(room).map(|word| char_encode_word(word, w)));
                rows.push(char_special_word(CHAR_SEP, w));
                EncoderInput::Chars(rows)
            }
        }
    }

    fn check_input(&self, input: &EncoderInput, role: Role) -> Result<(), EncoderError> {
        if input.len() > self.config.max_seq_len || input.is_empty() {
            return Err(EncoderError::InvalidConfig(format!(
                "input length {} outside 1..={}",
                input.len(),
                self.config.max_seq_len
            )));
        }
        let ok = match (self.front_end_for(role), input) {
            (FrontEnd::Lookup, EncoderInput::Tokens(ids)) => {
                let v = self.vocab.as_ref().map_or(0, |v| v.len());
                ids.iter().all(|&i| (i as usize) < v)
            }
            (FrontEnd::CharCnn, EncoderInput::Chars(rows)) => rows.iter().all(|r| {
                r.len() == self.config.max_word_len && r.iter().all(|&c| (c as usize) < CHAR_VOCAB_SIZE)
            }),
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(EncoderError::InvalidConfig("input does not match the front-end".into()))
        }
    }

    /// Front-end rows with position embeddings added, `[seq_len, d_model]`.
    pub fn embed_front_end(&self, input: &EncoderInput, role: Role) -> Result<Array2<F>, EncoderError> {
        self.check_input(input, role)?;
        Ok(tower::embed_with_positions(self.tower(role), &self.params, input, self.config.d_model))
    }

    /// Front-end rows without position embeddings.
    pub fn context_free_embeddings(&self, input: &EncoderInput, role: Role) -> Result<Array2<F>, EncoderError> {
        self.check_input(input, role)?;
        Ok(tower::front_end_forward(self.tower(role), &self.params, input, self.config.d_model))
    }

    pub fn encode_input(&self, input: &EncoderInput, role: Role) -> Result<Embedding<F>, EncoderError> {
        self.check_input(input, role)?;
        let (v, _) = tower::forward(
            self.tower(role),
            &self.params,
            input,
            self.config.d_model,
            self.config.n_heads,
            false,
        );
        Ok(v)
    }

    pub fn encode(&self, text: &str, role: Role) -> Result<Embedding<F>, EncoderError> {
        self.encode_input(&self.prepare(text, role), role)
    }

    /// Forward pass that keeps what the reverse pass needs.
    pub fn forward_cached(
        &self,
        input: &EncoderInput,
        role: Role,
    ) -> Result<(Embedding<F>, SeqCache<F>), EncoderError> {
        self.check_input(input, role)?;
        let (v, cache) = tower::forward(
            self.tower(role),
            &self.params,
            input,
            self.config.d_model,
            self.config.n_heads,
            true,
        );
        Ok((v, cache.expect("cache requested")))
    }

    /// Accumulate into `grads` the gradient of `upstream · encode(input)`.
    pub fn backward(
        &self,
        upstream: &[F],
        input: &EncoderInput,
        role: Role,
        cache: &SeqCache<F>,
        grads: &mut Gradients<F>,
    ) {
        if upstream.iter().all(|g| *g == F::zero()) {
            return;
        }
        tower::backward(
            ArrayView1::from(upstream),
            self.tower(role),
            &self.params,
            grads,
            input,
            cache,
            self.config.n_heads,
        );
    }

    /// Loss and exact parameter gradients for a loss defined over the
    /// encodings of `inputs`.
    ///
    /// `loss_fn` receives one embedding per input and returns the loss with
    /// its gradient with respect to each embedding. Returning a zero gradient
    /// for an embedding detaches it (stop-gradient).
    pub fn gradients<L>(&self, inputs: &[(Role, EncoderInput)], loss_fn: L) -> Result<(F, Gradients<F>), EncoderError>
    where
        L: FnOnce(&[Embedding<F>]) -> (F, Vec<Vec<F>>),
    {
        let mut embeddings = Vec::with_capacity(inputs.len());
        let mut caches = Vec::with_capacity(inputs.len());
        for (role, input) in inputs {
            let (e, c) = self.forward_cached(input, *role)?;
            embeddings.push(e);
            caches.push(c);
        }
        let (loss, upstream) = loss_fn(&embeddings);
        if !loss.is_finite() {
            return Err(EncoderError::NonFiniteLoss(loss.to_f64().unwrap_or(f64::NAN)));
        }
        assert_eq!(upstream.len(), inputs.len(), "one upstream gradient per input");
        let mut grads = self.zero_gradients();
        for (((role, input), cache), up) in inputs.iter().zip(&caches).zip(&upstream) {
            if up.len() != self.config.d_model {
                return Err(EncoderError::DimensionMismatch(up.len(), self.config.d_model));
            }
            self.backward(up, input, *role, cache, &mut grads);
        }
        Ok((loss, grads))
    }
}
