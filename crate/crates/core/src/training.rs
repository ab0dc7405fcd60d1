//! Contrastive training of the bi-encoder with BM25 hard negatives and
//! in-batch negatives, plus the typo-aware objectives: augmentation with
//! typo queries, and self-teaching, where the score distribution of a typo
//! query is pulled towards the (stop-gradient) distribution of its clean
//! query.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::{index::sample, SliceRandom};
use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{is_no_decay, EncoderError, EncoderInput, EncoderModel, Gradients, Real, Role};
use crate::eval::Qrels;
use crate::rng::{derived_rng, SeedPart};
use crate::tokenizer::WordPieceVocab;
use crate::typo_gen::{generate_typo_pair, TypoConfig, TypoError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("query {qid}: only {available} negatives available, {needed} needed")]
    InsufficientNegatives { qid: String, available: usize, needed: usize },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training set line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Typo(#[from] TypoError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub pid: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub qid: String,
    pub query: String,
    pub pos: Passage,
    pub negs: Vec<Passage>,
}

/// Sample `h` hard negatives for one query from its BM25 ranking, excluding
/// every judged-relevant passage.
pub fn sample_negatives<R: Rng + ?Sized>(
    qid: &str,
    ranking: &[String],
    positives: &[&str],
    h: usize,
    rng: &mut R,
) -> Result<Vec<String>, TrainError> {
    let pool: Vec<&String> = ranking.iter().filter(|p| !positives.contains(&p.as_str())).collect();
    if pool.len() < h {
        return Err(TrainError::InsufficientNegatives {
            qid: qid.to_string(),
            available: pool.len(),
            needed: h,
        });
    }
    Ok(sample(rng, pool.len(), h).into_iter().map(|i| pool[i].clone()).collect())
}

/// One sample per judged query: a uniformly chosen relevant passage and `h`
/// negatives drawn without replacement from the query's BM25 top-K minus
/// its relevant passages. Queries without judgments or with too few
/// candidates are skipped and logged. Each query draws from its own stream
/// derived from `seed`, so the result does not depend on query order.
pub fn build_training_set(
    queries: &[(String, String)],
    qrels: &Qrels,
    bm25: &BTreeMap<String, Vec<String>>,
    passages: &HashMap<String, String>,
    h: usize,
    seed: u64,
) -> Vec<TrainingSample> {
    let mut out = Vec::new();
    for (qid, text) in queries {
        let positives = qrels.relevant(qid, 1);
        if positives.is_empty() {
            log::info!("query {qid} has no relevant passage, skipped");
            continue;
        }
        let mut rng = derived_rng(seed, &[SeedPart::Str("train-set"), SeedPart::Str(qid)]);
        let pos = positives[rng.random_range(0..positives.len())];
        let empty = Vec::new();
        let ranking = bm25.get(qid).unwrap_or(&empty);
        let negs = match sample_negatives(qid, ranking, &positives, h, &mut rng) {
            Ok(n) => n,
            Err(e) => {
                log::info!("{e}; skipped");
                continue;
            }
        };
        let lookup = |pid: &str| {
            passages.get(pid).map(|t| Passage {
                pid: pid.to_string(),
                text: t.clone(),
            })
        };
        let (Some(pos), Some(negs)) = (lookup(pos), negs.iter().map(|p| lookup(p)).collect::<Option<Vec<_>>>()) else {
            log::warn!("query {qid} references passages missing from the collection, skipped");
            continue;
        };
        out.push(TrainingSample {
            qid: qid.clone(),
            query: text.clone(),
            pos,
            negs,
        });
    }
    out
}

pub fn write_training_set<W: Write>(mut w: W, samples: &[TrainingSample]) -> Result<(), TrainError> {
    for s in samples {
        serde_json::to_writer(&mut w, s).map_err(|e| TrainError::Io(e.into()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_training_set<R: BufRead>(r: R) -> Result<Vec<TrainingSample>, TrainError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| TrainError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn load_training_set(path: impl AsRef<Path>) -> Result<Vec<TrainingSample>, TrainError> {
    read_training_set(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Size of each query's candidate set with in-batch negatives.
pub fn candidate_count(batch_size: usize, hard_negatives: usize) -> usize {
    1 + hard_negatives + (batch_size - 1) * (hard_negatives + 1)
}

/// Candidate lists over the flattened batch passages, where sample `i`
/// owns its positive followed by its negatives. Each list starts with the
/// sample's own positive (index 0 is therefore always the positive), then
/// its own negatives, then every passage of the other samples in batch
/// order.
pub fn assemble_candidates(batch: &[TrainingSample]) -> Vec<Vec<usize>> {
    let mut offsets = Vec::with_capacity(batch.len());
    let mut total = 0;
    for s in batch {
        offsets.push(total);
        total += 1 + s.negs.len();
    }
    batch
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let own = offsets[i]..offsets[i] + 1 + s.negs.len();
            let mut list: Vec<usize> = own.clone().collect();
            list.extend((0..total).filter(|j| !own.contains(j)));
            list
        })
        .collect()
}

/// Softmax with max subtraction.
pub fn softmax_normalize(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / z).collect()
}

pub fn log_softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lz = scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln() + max;
    scores.iter().map(|s| s - lz).collect()
}

/// `−log softmax(scores)[positive]`.
pub fn ce_loss(scores: &[f64], positive: usize) -> f64 {
    -log_softmax(scores)[positive]
}

/// Cross-entropy and its gradient with respect to the scores.
pub fn ce_loss_grad(scores: &[f64], positive: usize) -> (f64, Vec<f64>) {
    let mut g = softmax_normalize(scores);
    let loss = ce_loss(scores, positive);
    g[positive] -= 1.0;
    (loss, g)
}

/// `KL(p_typo ‖ p_clean) = Σ p_typo · ln(p_typo / p_clean)`; zero-probability
/// entries of `p_typo` contribute nothing.
pub fn kl_loss(p_typo: &[f64], p_clean: &[f64]) -> f64 {
    assert_eq!(p_typo.len(), p_clean.len(), "distributions over the same candidates");
    p_typo
        .iter()
        .zip(p_clean)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a.ln() - b.ln()))
        .sum()
}

/// KL between the softmax of `typo_scores` and a fixed distribution given
/// by its log-probabilities, with the gradient with respect to
/// `typo_scores`.
pub fn kl_loss_grad(typo_scores: &[f64], target_log: &[f64]) -> (f64, Vec<f64>) {
    let lp = log_softmax(typo_scores);
    let p: Vec<f64> = lp.iter().map(|x| x.exp()).collect();
    let terms: Vec<f64> = lp.iter().zip(target_log).map(|(&a, &b)| a - b).collect();
    let loss: f64 = p.iter().zip(&terms).map(|(a, t)| a * t).sum();
    let grad = p.iter().zip(&terms).map(|(a, t)| a * (t - loss)).collect();
    (loss, grad)
}

/// Replace each query by a typo variant with probability `p_aug`. Queries
/// without an eligible word stay clean.
pub fn aug_transform<R: Rng + ?Sized>(
    queries: &[(String, String)],
    p_aug: f64,
    typo: &TypoConfig,
    rng: &mut R,
) -> Result<Vec<String>, TrainError> {
    let mut out = Vec::with_capacity(queries.len());
    for (qid, text) in queries {
        if rng.random::<f64>() < p_aug {
            let mut sub = derived_rng(rng.random::<u64>(), &[]);
            match generate_typo_pair(qid, text, typo, &mut sub) {
                Ok(pair) => out.push(pair.typo_text),
                Err(TypoError::NoEligibleWord { .. }) => out.push(text.clone()),
                Err(e) => return Err(e.into()),
            }
        } else {
            out.push(text.clone());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    Ce,
    Aug,
    St,
}

impl LossMode {
    pub fn name(self) -> &'static str {
        match self {
            LossMode::Ce => "ce",
            LossMode::Aug => "aug",
            LossMode::St => "st",
        }
    }
}

impl FromStr for LossMode {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ce" => Ok(LossMode::Ce),
            "aug" => Ok(LossMode::Aug),
            "st" => Ok(LossMode::St),
            _ => Err(TrainError::InvalidConfig(format!("unknown loss mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// The per-batch objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Cross-entropy on the clean queries.
    Ce,
    /// KL of the typo distribution against the clean distribution.
    Kl,
    /// Cross-entropy on the clean queries plus the KL term.
    St,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObjectiveOptions {
    /// Also apply cross-entropy to the typo queries (ablation).
    pub ce_on_typo: bool,
    /// Treat the clean distribution as a constant in the KL term.
    pub stop_gradient: bool,
}

impl Default for ObjectiveOptions {
    fn default() -> Self {
        Self {
            ce_on_typo: false,
            stop_gradient: true,
        }
    }
}

/// Texts of one batch: queries, optional typo queries, flattened passages
/// and per-query candidate lists (positive first).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTexts {
    pub queries: Vec<String>,
    pub typo_queries: Option<Vec<String>>,
    pub passages: Vec<String>,
    pub candidates: Vec<Vec<usize>>,
}

impl BatchTexts {
    pub fn from_samples(batch: &[TrainingSample], typo_queries: Option<Vec<String>>) -> Self {
        Self {
            queries: batch.iter().map(|s| s.query.clone()).collect(),
            typo_queries,
            passages: batch
                .iter()
                .flat_map(|s| std::iter::once(&s.pos).chain(&s.negs).map(|p| p.text.clone()))
                .collect(),
            candidates: assemble_candidates(batch),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ObjectiveOutput<F> {
    pub loss: f64,
    pub grads: Gradients<F>,
    /// Clean-query score distributions at the current parameters.
    pub clean_distributions: Vec<Vec<f64>>,
    /// Gradient of the loss with respect to each clean query embedding.
    pub clean_query_upstream: Vec<Vec<f64>>,
}

fn dot64<F: Real>(a: &[F], b: &[F]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.to_f64().unwrap() * y.to_f64().unwrap()).sum()
}

/// Mean loss over the batch and its parameter gradients.
///
/// With `frozen_clean` set, the KL term compares against those
/// distributions instead of the current clean ones; this evaluates the
/// stop-gradient objective at perturbed parameters for finite differences.
pub fn batch_objective<F: Real>(
    model: &EncoderModel<F>,
    batch: &BatchTexts,
    objective: Objective,
    options: ObjectiveOptions,
    frozen_clean: Option<&[Vec<f64>]>,
) -> Result<ObjectiveOutput<F>, EncoderError> {
    let b = batch.queries.len();
    let needs_typo = objective != Objective::Ce || options.ce_on_typo;
    let typo = match (&batch.typo_queries, needs_typo) {
        (Some(t), true) => Some(t),
        (None, true) => {
            return Err(EncoderError::InvalidConfig("objective needs typo queries".into()));
        }
        _ => None,
    };
    let mut inputs: Vec<(Role, EncoderInput)> = Vec::new();
    for q in &batch.queries {
        inputs.push((Role::Query, model.prepare(q, Role::Query)));
    }
    if let Some(t) = typo {
        for q in t {
            inputs.push((Role::Query, model.prepare(q, Role::Query)));
        }
    }
    let p0 = inputs.len();
    for p in &batch.passages {
        inputs.push((Role::Passage, model.prepare(p, Role::Passage)));
    }
    let d = model.config().d_model;
    let n_typo = typo.map_or(0, |t| t.len());
    let mut clean_distributions = Vec::new();
    let mut clean_upstream = Vec::new();
    let (loss, grads) = model.gradients(&inputs, |emb| {
        let scale = 1.0 / b as f64;
        let mut up = vec![vec![0.0f64; d]; emb.len()];
        let mut loss = 0.0;
        // accumulate d loss / d score into query and passage upstreams
        let push = |up: &mut Vec<Vec<f64>>, qi: usize, cands: &[usize], g: &[f64]| {
            for (&c, &gs) in cands.iter().zip(g) {
                if gs == 0.0 {
                    continue;
                }
                let gs = gs * scale;
                for k in 0..d {
                    up[qi][k] += gs * emb[p0 + c][k].to_f64().unwrap();
                    up[p0 + c][k] += gs * emb[qi][k].to_f64().unwrap();
                }
            }
        };
        for i in 0..b {
            let cands = &batch.candidates[i];
            let clean: Vec<f64> = cands.iter().map(|&c| dot64(&emb[i], &emb[p0 + c])).collect();
            let lp_clean = log_softmax(&clean);
            let p_clean: Vec<f64> = lp_clean.iter().map(|x| x.exp()).collect();
            if objective != Objective::Kl {
                let (l, g) = ce_loss_grad(&clean, 0);
                loss += l;
                push(&mut up, i, cands, &g);
            }
            if n_typo > 0 {
                let ti = b + i;
                let typo_s: Vec<f64> = cands.iter().map(|&c| dot64(&emb[ti], &emb[p0 + c])).collect();
                if options.ce_on_typo {
                    let (l, g) = ce_loss_grad(&typo_s, 0);
                    loss += l;
                    push(&mut up, ti, cands, &g);
                }
                if objective != Objective::Ce {
                    let frozen_log: Option<Vec<f64>> = frozen_clean.map(|f| f[i].iter().map(|x| x.ln()).collect());
                    let (l, g) = kl_loss_grad(&typo_s, frozen_log.as_ref().unwrap_or(&lp_clean));
                    loss += l;
                    push(&mut up, ti, cands, &g);
                    if !options.stop_gradient {
                        let p_typo = softmax_normalize(&typo_s);
                        let gc: Vec<f64> = p_clean.iter().zip(&p_typo).map(|(a, b)| a - b).collect();
                        push(&mut up, i, cands, &gc);
                    }
                }
            }
            clean_distributions.push(p_clean);
        }
        clean_upstream = up[..b].to_vec();
        let up_f = up
            .into_iter()
            .map(|v| v.into_iter().map(|x| F::from_f64(x).unwrap()).collect())
            .collect();
        (F::from_f64(loss * scale).unwrap(), up_f)
    })?;
    Ok(ObjectiveOutput {
        loss: loss.to_f64().unwrap(),
        grads,
        clean_distributions,
        clean_query_upstream: clean_upstream,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: LossMode,
    pub batch_size: usize,
    pub hard_negatives: usize,
    pub learning_rate: f64,
    pub total_updates: usize,
    pub warmup_updates: usize,
    pub weight_decay: f64,
    pub p_aug: f64,
    pub ce_on_typo: bool,
    pub stop_gradient: bool,
    /// Depth of the BM25 ranking negatives are drawn from.
    pub bm25_depth: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: LossMode::Ce,
            batch_size: 8,
            hard_negatives: 4,
            learning_rate: 1e-3,
            total_updates: 2000,
            warmup_updates: 0,
            weight_decay: 0.01,
            p_aug: 0.5,
            ce_on_typo: false,
            stop_gradient: true,
            bm25_depth: 200,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.p_aug) {
            return bad("p_aug must lie in [0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if self.weight_decay < 0.0 {
            return bad("weight decay must be non-negative");
        }
        if self.warmup_updates > self.total_updates {
            return bad("warmup exceeds total updates");
        }
        if self.bm25_depth < self.hard_negatives {
            return bad("bm25 depth is smaller than the number of hard negatives");
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        let err = || TrainError::InvalidConfig(format!("{key}: bad value {value:?}"));
        fn p<T: FromStr>(v: &str, e: impl Fn() -> TrainError) -> Result<T, TrainError> {
            v.parse().map_err(|_| e())
        }
        match key {
            "mode" => self.mode = value.parse()?,
            "batch_size" => self.batch_size = p(value, err)?,
            "hard_negatives" => self.hard_negatives = p(value, err)?,
            "learning_rate" => self.learning_rate = p(value, err)?,
            "total_updates" => self.total_updates = p(value, err)?,
            "warmup_updates" => self.warmup_updates = p(value, err)?,
            "weight_decay" => self.weight_decay = p(value, err)?,
            "p_aug" => self.p_aug = p(value, err)?,
            "ce_on_typo" => self.ce_on_typo = p(value, err)?,
            "stop_gradient" => self.stop_gradient = p(value, err)?,
            "bm25_depth" => self.bm25_depth = p(value, err)?,
            "seed" => self.seed = p(value, err)?,
            _ => return Err(TrainError::InvalidConfig(format!("unknown training key {key:?}"))),
        }
        Ok(())
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("mode".into(), self.mode.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("hard_negatives".into(), self.hard_negatives.to_string()),
            ("learning_rate".into(), self.learning_rate.to_string()),
            ("total_updates".into(), self.total_updates.to_string()),
            ("warmup_updates".into(), self.warmup_updates.to_string()),
            ("weight_decay".into(), self.weight_decay.to_string()),
            ("p_aug".into(), self.p_aug.to_string()),
            ("ce_on_typo".into(), self.ce_on_typo.to_string()),
            ("stop_gradient".into(), self.stop_gradient.to_string()),
            ("bm25_depth".into(), self.bm25_depth.to_string()),
            ("seed".into(), self.seed.to_string()),
        ])
    }

    /// Learning rate for update `step` (0-based): linear warmup, then linear
    /// decay reaching zero at `total_updates`.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        if step < self.warmup_updates {
            self.learning_rate * (step + 1) as f64 / self.warmup_updates as f64
        } else {
            let rest = (self.total_updates - self.warmup_updates) as f64;
            self.learning_rate * (1.0 - (step - self.warmup_updates) as f64 / rest)
        }
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    decay: Vec<bool>,
    t: i32,
}

impl AdamW {
    pub fn new(model: &EncoderModel<f32>, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: model.params().iter().map(|t| vec![0.0; t.len()]).collect(),
            v: model.params().iter().map(|t| vec![0.0; t.len()]).collect(),
            decay: model.names().iter().map(|n| !is_no_decay(n)).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut EncoderModel<f32>, grads: &Gradients<f32>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = self.eps as f32;
        let wd = (lr * self.weight_decay) as f32;
        for (i, t) in model.params_mut().iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i].data);
            let decay = self.decay[i];
            for j in 0..t.data.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mut p = t.data[j];
                if decay {
                    p -= wd * p;
                }
                p -= step * m[j] / (v[j].sqrt() / bc2_sqrt + eps);
                t.data[j] = p;
            }
        }
    }
}

/// Typo variant of one training query for an epoch; falls back to the
/// clean text when the query has no eligible word.
pub fn epoch_typo(seed: u64, epoch: usize, qid: &str, text: &str, typo: &TypoConfig) -> Result<String, TrainError> {
    let mut rng = derived_rng(
        seed,
        &[SeedPart::Str("train-typo"), SeedPart::Int(epoch as u64), SeedPart::Str(qid)],
    );
    match generate_typo_pair(qid, text, typo, &mut rng) {
        Ok(p) => Ok(p.typo_text),
        Err(TypoError::NoEligibleWord { .. }) => Ok(text.to_string()),
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: EncoderModel<f32>,
    /// Batch loss of every update.
    pub losses: Vec<f64>,
}

pub fn write_loss_trace<W: Write>(mut w: W, losses: &[f64], every: usize) -> std::io::Result<()> {
    writeln!(w, "step\tloss")?;
    let every = every.max(1);
    for (i, l) in losses.iter().enumerate() {
        if (i + 1) % every == 0 || i + 1 == losses.len() {
            writeln!(w, "{}\t{l:.6}", i + 1)?;
        }
    }
    Ok(())
}

/// Train a fresh model. Batches are consecutive slices of a per-epoch
/// shuffle; a trailing partial batch is dropped.
pub fn train(
    samples: &[TrainingSample],
    model: EncoderModel<f32>,
    config: &TrainConfig,
    typo: &TypoConfig,
) -> Result<TrainOutput, TrainError> {
    config.validate()?;
    let mut model = model;
    if config.total_updates == 0 {
        return Ok(TrainOutput { model, losses: Vec::new() });
    }
    if samples.len() < config.batch_size {
        return Err(TrainError::InvalidConfig(format!(
            "{} training samples cannot fill a batch of {}",
            samples.len(),
            config.batch_size
        )));
    }
    if let Some(s) = samples.iter().find(|s| s.negs.len() != config.hard_negatives) {
        return Err(TrainError::InvalidConfig(format!(
            "sample {} has {} negatives, config expects {}",
            s.qid,
            s.negs.len(),
            config.hard_negatives
        )));
    }
    let objective = match config.mode {
        LossMode::Ce | LossMode::Aug => Objective::Ce,
        LossMode::St => Objective::St,
    };
    let options = ObjectiveOptions {
        ce_on_typo: config.ce_on_typo && config.mode == LossMode::St,
        stop_gradient: config.stop_gradient,
    };
    let batches_per_epoch = samples.len() / config.batch_size;
    let mut opt = AdamW::new(&model, config.weight_decay);
    let mut losses = Vec::with_capacity(config.total_updates);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for step in 0..config.total_updates {
        let epoch = step / batches_per_epoch;
        let slot = step % batches_per_epoch;
        if slot == 0 {
            order = (0..samples.len()).collect();
            order.shuffle(&mut derived_rng(
                config.seed,
                &[SeedPart::Str("batch-order"), SeedPart::Int(epoch as u64)],
            ));
        }
        let batch: Vec<TrainingSample> = order[slot * config.batch_size..(slot + 1) * config.batch_size]
            .iter()
            .map(|&i| samples[i].clone())
            .collect();
        let texts = match config.mode {
            LossMode::Ce => BatchTexts::from_samples(&batch, None),
            LossMode::Aug => {
                let qs: Vec<(String, String)> = batch.iter().map(|s| (s.qid.clone(), s.query.clone())).collect();
                let mut rng = derived_rng(config.seed, &[SeedPart::Str("aug"), SeedPart::Int(step as u64)]);
                let mut texts = BatchTexts::from_samples(&batch, None);
                texts.queries = aug_transform(&qs, config.p_aug, typo, &mut rng)?;
                texts
            }
            LossMode::St => {
                let typos = batch
                    .iter()
                    .map(|s| epoch_typo(config.seed, epoch, &s.qid, &s.query, typo))
                    .collect::<Result<Vec<_>, _>>()?;
                BatchTexts::from_samples(&batch, Some(typos))
            }
        };
        let out = match batch_objective(&model, &texts, objective, options, None) {
            Ok(o) => o,
            Err(EncoderError::NonFiniteLoss(_)) => return Err(TrainError::NonFiniteLoss { step }),
            Err(e) => return Err(e.into()),
        };
        opt.step(&mut model, &out.grads, config.learning_rate_at(step));
        if !model.is_finite() {
            return Err(TrainError::NonFiniteLoss { step });
        }
        losses.push(out.loss);
        if (step + 1) % 100 == 0 {
            let recent = &losses[losses.len().saturating_sub(100)..];
            log::debug!(
                "{} step {}: mean loss {:.4}",
                config.mode,
                step + 1,
                recent.iter().sum::<f64>() / recent.len() as f64
            );
        }
    }
    Ok(TrainOutput { model, losses })
}

/// Initialise and train in one call.
pub fn train_new(
    samples: &[TrainingSample],
    encoder: crate::encoder::EncoderConfig,
    vocab: Option<WordPieceVocab>,
    config: &TrainConfig,
    typo: &TypoConfig,
) -> Result<TrainOutput, TrainError> {
    let model = EncoderModel::init(encoder, vocab, config.seed)?;
    train(samples, model, config, typo)
}

/// Worst relative disagreement between analytic and central-difference
/// gradients of [`batch_objective`], over about `n_params` parameter
/// entries spread across every tensor. The clean distributions are frozen at
/// the unperturbed parameters, which is what the stop-gradient means.
/// Relative error is `|a − n| / max(|a|, |n|, floor)`.
pub fn finite_difference_check(
    model: &EncoderModel<f64>,
    batch: &BatchTexts,
    objective: Objective,
    n_params: usize,
    eps: f64,
    floor: f64,
    seed: u64,
) -> Result<FdReport, EncoderError> {
    let options = ObjectiveOptions::default();
    let base = batch_objective(model, batch, objective, options, None)?;
    let frozen = base.clean_distributions.clone();
    let n_tensors = model.params().len();
    let per_tensor = n_params.div_ceil(n_tensors).max(1);
    let mut rng = derived_rng(seed, &[SeedPart::Str("fd-check")]);
    let mut probe = model.clone();
    let mut report = FdReport::default();
    for ti in 0..n_tensors {
        let len = model.params()[ti].len();
        for j in sample(&mut rng, len, per_tensor.min(len)) {
            let orig = probe.params()[ti].data[j];
            probe.params_mut()[ti].data[j] = orig + eps;
            let up = batch_objective(&probe, batch, objective, options, Some(&frozen))?.loss;
            probe.params_mut()[ti].data[j] = orig - eps;
            let down = batch_objective(&probe, batch, objective, options, Some(&frozen))?.loss;
            probe.params_mut()[ti].data[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = base.grads[ti].data[j];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = Some((model.names()[ti].clone(), j, analytic, numeric));
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FdReport {
    pub checked: usize,
    pub max_relative_error: f64,
    /// Parameter name, entry, analytic and numeric gradient of the worst case.
    pub worst: Option<(String, usize, f64, f64)>,
}

#[cfg(test)]
mod tests;
