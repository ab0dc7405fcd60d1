//! The end-to-end experiment: typo replicas, BM25 and hard negatives,
//! training of every configured model, dense indexes, clean and typo runs,
//! and the reports built from them.
//!
//! Every stage writes its artifacts under the output directory and records
//! their SHA-256 digests in `manifest.json`. A rerun with the same
//! configuration skips each stage whose recorded outputs are still present
//! and unchanged; once one stage runs, every later stage runs too.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::ConfigFile;
use crate::data::{load_id_text, write_id_text};
use crate::dense_index::{encode_texts, encoding_similarity, DenseIndex};
use crate::encoder::{load_checkpoint, save_checkpoint, EncoderConfig, EncoderModel, FrontEnd, Role};
use crate::eval::{
    bin_by_token_difference, bins_to_tsv, bonferroni, mrr_drop_rate, ols_slope, paired_t_test, parse_metrics,
    per_query_metrics, replica_average, spearman, write_trec_ranking, BinRow, Metric, MetricReport, PairMeasure,
    Qrels, RunFile,
};
use crate::sparse::{Bm25Params, InvertedIndex};
use crate::tokenizer::{pair_token_difference, WordPieceVocab};
use crate::toy::{make_toy_corpus, ToyConfig};
use crate::training::{build_training_set, load_training_set, train, write_loss_trace, write_training_set, LossMode, TrainConfig};
use crate::typo_gen::{
    generate_replicas, parse_stopwords, read_pairs_tsv, write_pairs_tsv, QueryPair, TypoConfig,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: String, message: String },
}

impl ExperimentError {
    pub fn is_validation(&self) -> bool {
        matches!(self, ExperimentError::Config(_))
    }
}

fn config_err(e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Config(e.to_string())
}

type StageResult<T = ()> = Result<T, Box<dyn std::error::Error + Send + Sync>>;

/// A trained system: its objective and its embedding front-end.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    pub mode: LossMode,
    pub front_end: FrontEnd,
    /// Charcnn query tower with a lookup passage tower.
    pub untied: bool,
}

impl ModelSpec {
    /// `mode-frontend`, e.g. `st-charcnn`; the front-end is `lookup`,
    /// `charcnn` or `untied`.
    pub fn parse(name: &str) -> Result<Self, ExperimentError> {
        let (mode, fe) = name
            .split_once('-')
            .ok_or_else(|| config_err(format!("model {name:?} is not of the form mode-frontend")))?;
        let mode: LossMode = mode.parse().map_err(config_err)?;
        let (front_end, untied) = match fe {
            "untied" => (FrontEnd::CharCnn, true),
            other => (other.parse().map_err(config_err)?, false),
        };
        Ok(Self {
            name: name.to_string(),
            mode,
            front_end,
            untied,
        })
    }

    pub fn encoder_config(&self, base: &EncoderConfig) -> EncoderConfig {
        EncoderConfig {
            front_end: self.front_end,
            tied_encoders: !self.untied,
            ..base.clone()
        }
    }

    pub fn needs_vocab(&self) -> bool {
        self.front_end == FrontEnd::Lookup || self.untied
    }
}

#[derive(Debug, Clone)]
pub struct Paths {
    pub collection: PathBuf,
    pub queries: PathBuf,
    pub qrels: PathBuf,
    pub train_queries: Option<PathBuf>,
    pub train_qrels: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub stopwords: Option<PathBuf>,
    pub output: PathBuf,
}

#[derive(Debug, Clone)]
pub struct EvalSettings {
    pub metrics: Vec<Metric>,
    pub depth: usize,
    pub rr_cutoff: usize,
    pub threshold: u8,
    /// System every other system is tested against.
    pub baseline: Option<String>,
    /// Number of comparisons for the Bonferroni correction; defaults to the
    /// number of tests reported.
    pub bonferroni: Option<usize>,
    /// `(ce, st)` systems for the typo-robustness comparison.
    pub st_pair: (String, String),
    /// `(baseline, robust)` systems for the difference-trend comparison.
    pub trend_pair: (String, String),
}

/// Reference thresholds for the typo-robustness comparison, fixed after a
/// reference run on the toy corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub min_ce_delta_mrr: f64,
    pub min_relative_reduction: f64,
    pub max_clean_mrr_gap: f64,
}

pub const REFERENCE_THRESHOLDS: Thresholds = Thresholds {
    min_ce_delta_mrr: 0.15,
    min_relative_reduction: 0.25,
    max_clean_mrr_gap: 0.05,
};

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub paths: Paths,
    pub typo: TypoConfig,
    pub replicas: usize,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub models: Vec<ModelSpec>,
    pub workers: usize,
}

const KNOWN_SECTIONS: [&str; 6] = ["paths", "experiment", "typo", "encoder", "train", "eval"];

impl ExperimentConfig {
    /// Build and validate a configuration. Relative paths are resolved
    /// against `base_dir`. Every referenced input must exist.
    pub fn from_config(cf: &ConfigFile, base_dir: &Path) -> Result<Self, ExperimentError> {
        for (name, entries) in cf.sections() {
            if !KNOWN_SECTIONS.contains(&name.as_str()) && !entries.is_empty() {
                return Err(config_err(format!("unknown section [{name}]")));
            }
        }
        let resolve = |v: &str| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base_dir.join(p)
            }
        };
        let section = |s: &str| cf.sections().get(s).cloned().unwrap_or_default();

        let mut paths = Paths {
            collection: PathBuf::new(),
            queries: PathBuf::new(),
            qrels: PathBuf::new(),
            train_queries: None,
            train_qrels: None,
            vocab: None,
            stopwords: None,
            output: PathBuf::new(),
        };
        let mut required = BTreeMap::new();
        for (k, v) in section("paths") {
            let p = resolve(&v);
            match k.as_str() {
                "collection" | "queries" | "qrels" | "output" => {
                    required.insert(k.clone(), p);
                }
                "train_queries" => paths.train_queries = Some(p),
                "train_qrels" => paths.train_qrels = Some(p),
                "vocab" => paths.vocab = Some(p),
                "stopwords" => paths.stopwords = Some(p),
                _ => return Err(config_err(format!("unknown key paths.{k}"))),
            }
        }
        for key in ["collection", "queries", "qrels", "output"] {
            if !required.contains_key(key) {
                return Err(config_err(format!("paths.{key} is required")));
            }
        }
        paths.collection = required.remove("collection").unwrap();
        paths.queries = required.remove("queries").unwrap();
        paths.qrels = required.remove("qrels").unwrap();
        paths.output = required.remove("output").unwrap();
        if paths.train_queries.is_some() != paths.train_qrels.is_some() {
            return Err(config_err("paths.train_queries and paths.train_qrels go together"));
        }
        let inputs = [
            Some(&paths.collection),
            Some(&paths.queries),
            Some(&paths.qrels),
            paths.train_queries.as_ref(),
            paths.train_qrels.as_ref(),
            paths.vocab.as_ref(),
            paths.stopwords.as_ref(),
        ];
        for p in inputs.into_iter().flatten() {
            if !p.is_file() {
                return Err(config_err(format!("input file {} does not exist", p.display())));
            }
        }

        let mut seed = 0u64;
        let mut models = vec!["ce-lookup", "st-lookup", "ce-charcnn", "st-charcnn"]
            .into_iter()
            .map(ModelSpec::parse)
            .collect::<Result<Vec<_>, _>>()?;
        let mut replicas = 10;
        let mut workers = 1;
        let num = |k: &str, v: &str| {
            v.parse::<u64>()
                .map_err(|_| config_err(format!("{k}: expected a non-negative integer, got {v:?}")))
        };
        for (k, v) in section("experiment") {
            match k.as_str() {
                "seed" => seed = num(&k, &v)?,
                "replicas" => replicas = num(&k, &v)? as usize,
                "workers" => workers = num(&k, &v)? as usize,
                "models" => {
                    models = v
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(ModelSpec::parse)
                        .collect::<Result<_, _>>()?
                }
                _ => return Err(config_err(format!("unknown key experiment.{k}"))),
            }
        }
        if replicas == 0 {
            return Err(config_err("experiment.replicas must be at least 1"));
        }
        let mut seen = HashSet::new();
        for m in &models {
            if !seen.insert(&m.name) {
                return Err(config_err(format!("model {} listed twice", m.name)));
            }
            if m.name == "bm25" {
                return Err(config_err("bm25 is reserved for the sparse baseline"));
            }
        }

        let mut typo = TypoConfig::with_seed(seed);
        if let Some(p) = &paths.stopwords {
            let text = std::fs::read_to_string(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?;
            typo.stopwords = parse_stopwords(&text);
        }
        for (k, v) in section("typo") {
            match k.as_str() {
                "min_word_length" => typo.min_word_length = num(&k, &v)? as usize,
                "kind_weights" => typo.kind_weights = TypoConfig::parse_kind_weights(&v).map_err(config_err)?,
                _ => return Err(config_err(format!("unknown key typo.{k}"))),
            }
        }
        typo.validate().map_err(config_err)?;

        let mut encoder = EncoderConfig::default();
        for (k, v) in section("encoder") {
            if k == "front_end" || k == "tied_encoders" {
                return Err(config_err(format!("encoder.{k} is set per model through experiment.models")));
            }
            encoder.set(&k, &v).map_err(config_err)?;
        }
        for m in &models {
            m.encoder_config(&encoder).validate().map_err(config_err)?;
        }

        let mut train = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        for (k, v) in section("train") {
            if k == "mode" || k == "seed" {
                return Err(config_err(format!(
                    "train.{k} is not configurable here; use experiment.models or experiment.seed"
                )));
            }
            train.set(&k, &v).map_err(config_err)?;
        }
        train.validate().map_err(config_err)?;

        let mut eval = EvalSettings {
            metrics: parse_metrics("mrr@10,r@1000,ndcg@10,map").expect("valid default"),
            depth: 1000,
            rr_cutoff: 10,
            threshold: 1,
            baseline: None,
            bonferroni: None,
            st_pair: ("ce-charcnn".into(), "st-charcnn".into()),
            trend_pair: ("ce-lookup".into(), "st-charcnn".into()),
        };
        let pair = |k: &str, v: &str| {
            v.split_once(',')
                .map(|(a, b)| (a.trim().to_string(), b.trim().to_string()))
                .ok_or_else(|| config_err(format!("eval.{k}: expected two comma-separated systems")))
        };
        for (k, v) in section("eval") {
            match k.as_str() {
                "metrics" => eval.metrics = parse_metrics(&v).map_err(config_err)?,
                "depth" => eval.depth = num(&k, &v)? as usize,
                "rr_cutoff" => eval.rr_cutoff = num(&k, &v)? as usize,
                "threshold" => {
                    eval.threshold = v
                        .parse()
                        .map_err(|_| config_err(format!("eval.threshold: bad grade {v:?}")))?
                }
                "baseline" => eval.baseline = Some(v.clone()),
                "bonferroni" => eval.bonferroni = Some(num(&k, &v)? as usize),
                "st_pair" => eval.st_pair = pair(&k, &v)?,
                "trend_pair" => eval.trend_pair = pair(&k, &v)?,
                _ => return Err(config_err(format!("unknown key eval.{k}"))),
            }
        }
        if eval.depth == 0 || eval.rr_cutoff == 0 {
            return Err(config_err("eval.depth and eval.rr_cutoff must be positive"));
        }
        if !eval.metrics.contains(&Metric::RR(eval.rr_cutoff)) {
            eval.metrics.insert(0, Metric::RR(eval.rr_cutoff));
        }
        if let Some(b) = &eval.baseline {
            if b != "bm25" && !models.iter().any(|m| &m.name == b) {
                return Err(config_err(format!("eval.baseline {b:?} is not a configured system")));
            }
        }
        if models.iter().any(ModelSpec::needs_vocab) && paths.vocab.is_none() {
            return Err(config_err("lookup models need paths.vocab"));
        }

        Ok(Self {
            seed,
            paths,
            typo,
            replicas,
            encoder,
            train,
            eval,
            models,
            workers: workers.max(1),
        })
    }

    /// Load `path` and apply `overrides` (`section.key=value`) before
    /// validation. Relative paths in the file resolve against its directory;
    /// relative paths given as overrides resolve against the working
    /// directory.
    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self, ExperimentError> {
        let path = path.as_ref();
        let mut cf = ConfigFile::load(path).map_err(config_err)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let cwd = std::env::current_dir().map_err(config_err)?;
        for o in overrides {
            let mut o = o.clone();
            if let Some(rest) = o.strip_prefix("paths.") {
                if let Some((k, v)) = rest.split_once('=') {
                    let p = PathBuf::from(v.trim());
                    let abs = if p.is_absolute() { p } else { cwd.join(p) };
                    o = format!("paths.{}={}", k.trim(), abs.display());
                }
            }
            cf.apply_override(&o).map_err(config_err)?;
        }
        Self::from_config(&cf, &base)
    }

    /// Every setting that influences results, in canonical order. Paths are
    /// left out; input contents are covered by their digests instead.
    pub fn canonical(&self) -> BTreeMap<String, BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        out.insert(
            "experiment".to_string(),
            BTreeMap::from([
                ("seed".to_string(), self.seed.to_string()),
                ("replicas".to_string(), self.replicas.to_string()),
                (
                    "models".to_string(),
                    self.models.iter().map(|m| m.name.as_str()).collect::<Vec<_>>().join(","),
                ),
            ]),
        );
        let mut stop: Vec<&String> = self.typo.stopwords.iter().collect();
        stop.sort();
        let stop_text: String = stop.iter().map(|s| format!("{s}\n")).collect();
        out.insert(
            "typo".to_string(),
            BTreeMap::from([
                ("min_word_length".to_string(), self.typo.min_word_length.to_string()),
                (
                    "kind_weights".to_string(),
                    self.typo.kind_weights.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","),
                ),
                ("stopwords_sha256".to_string(), sha256_hex(stop_text.as_bytes())),
            ]),
        );
        let mut enc = self.encoder.to_kv();
        enc.remove("front_end");
        enc.remove("tied_encoders");
        out.insert("encoder".to_string(), enc);
        let mut tr = self.train.to_kv();
        tr.remove("mode");
        out.insert("train".to_string(), tr);
        out.insert(
            "eval".to_string(),
            BTreeMap::from([
                (
                    "metrics".to_string(),
                    self.eval.metrics.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(","),
                ),
                ("depth".to_string(), self.eval.depth.to_string()),
                ("rr_cutoff".to_string(), self.eval.rr_cutoff.to_string()),
                ("threshold".to_string(), self.eval.threshold.to_string()),
                ("baseline".to_string(), self.eval.baseline.clone().unwrap_or_default()),
                (
                    "bonferroni".to_string(),
                    self.eval.bonferroni.map(|b| b.to_string()).unwrap_or_default(),
                ),
                ("st_pair".to_string(), format!("{},{}", self.eval.st_pair.0, self.eval.st_pair.1)),
                (
                    "trend_pair".to_string(),
                    format!("{},{}", self.eval.trend_pair.0, self.eval.trend_pair.1),
                ),
            ]),
        );
        out
    }

    fn input_files(&self) -> Vec<(&'static str, &Path)> {
        let p = &self.paths;
        let mut v: Vec<(&'static str, &Path)> = vec![
            ("collection", &p.collection),
            ("queries", &p.queries),
            ("qrels", &p.qrels),
        ];
        for (name, opt) in [
            ("train_queries", &p.train_queries),
            ("train_qrels", &p.train_qrels),
            ("vocab", &p.vocab),
            ("stopwords", &p.stopwords),
        ] {
            if let Some(path) = opt {
                v.push((name, path));
            }
        }
        v
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn file_sha256(path: &Path) -> std::io::Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    /// Output path relative to the output directory → SHA-256.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: BTreeMap<String, BTreeMap<String, String>>,
    /// Input role → SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub stages: Vec<StageRecord>,
    pub thresholds: Option<Thresholds>,
    /// Headline numbers of the typo-robustness and trend comparisons.
    pub checks: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Option<Self> {
        let text = std::fs::read_to_string(path).ok()?;
        serde_json::from_str(&text).ok()
    }

    fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        text.push('\n');
        std::fs::write(path, text)
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }
}

pub const MANIFEST: &str = "manifest.json";

fn replica_file(k: usize) -> String {
    format!("typos/replica_{:02}.tsv", k + 1)
}

fn typo_run_file(system: &str, k: usize) -> String {
    format!("runs/{system}/typo_{:02}.trec", k + 1)
}

fn clean_run_file(system: &str) -> String {
    format!("runs/{system}/clean.trec")
}

/// Inputs loaded once per invocation.
struct Inputs {
    collection: Vec<(String, String)>,
    queries: Vec<(String, String)>,
    qrels: Qrels,
    train_queries: Vec<(String, String)>,
    train_qrels: Qrels,
    vocab: Option<WordPieceVocab>,
}

fn load_inputs(cfg: &ExperimentConfig) -> StageResult<Inputs> {
    let p = &cfg.paths;
    let collection = load_id_text(&p.collection)?;
    let queries = load_id_text(&p.queries)?;
    let qrels = Qrels::load(&p.qrels)?;
    let (train_queries, train_qrels) = match (&p.train_queries, &p.train_qrels) {
        (Some(q), Some(r)) => (load_id_text(q)?, Qrels::load(r)?),
        _ => {
            log::warn!("no separate training queries configured; training on the evaluation queries");
            (queries.clone(), qrels.clone())
        }
    };
    let vocab = p.vocab.as_ref().map(WordPieceVocab::load).transpose()?;
    Ok(Inputs {
        collection,
        queries,
        qrels,
        train_queries,
        train_qrels,
        vocab,
    })
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    out: PathBuf,
    manifest: Manifest,
    previous: Option<Manifest>,
    dirty: bool,
}

impl Runner<'_> {
    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn is_current(&self, name: &str, outputs: &[String]) -> bool {
        let Some(rec) = self.previous.as_ref().and_then(|m| m.stage(name)) else {
            return false;
        };
        outputs.len() == rec.outputs.len()
            && outputs.iter().all(|o| {
                rec.outputs
                    .get(o)
                    .is_some_and(|h| file_sha256(&self.path(o)).is_ok_and(|actual| &actual == h))
            })
    }

    fn stage(
        &mut self,
        name: &str,
        outputs: Vec<String>,
        body: impl FnOnce(&Self) -> StageResult,
    ) -> Result<(), ExperimentError> {
        let fail = |e: &dyn std::fmt::Display| ExperimentError::Stage {
            stage: name.to_string(),
            message: e.to_string(),
        };
        if !self.dirty && self.is_current(name, &outputs) {
            log::info!("stage {name}: up to date");
            let rec = self.previous.as_ref().and_then(|m| m.stage(name)).cloned().unwrap();
            self.manifest.stages.push(rec);
            return Ok(());
        }
        self.dirty = true;
        let start = Instant::now();
        log::info!("stage {name}: running");
        for o in &outputs {
            if let Some(parent) = self.path(o).parent() {
                std::fs::create_dir_all(parent).map_err(|e| fail(&e))?;
            }
        }
        body(self).map_err(|e| fail(&e))?;
        let mut rec = StageRecord {
            name: name.to_string(),
            outputs: BTreeMap::new(),
        };
        for o in outputs {
            let h = file_sha256(&self.path(&o)).map_err(|e| fail(&format!("output {o}: {e}")))?;
            rec.outputs.insert(o, h);
        }
        self.manifest.stages.push(rec);
        self.manifest.save(&self.path(MANIFEST)).map_err(|e| fail(&e))?;
        log::info!("stage {name}: done in {:.1}s", start.elapsed().as_secs_f64());
        Ok(())
    }
}

pub fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<std::fs::File>) -> std::io::Result<()>) -> std::io::Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    f(&mut w)?;
    w.flush()
}

/// Write ranked results per query as a TREC run.
pub fn save_run(path: &Path, tag: &str, results: &[(String, Vec<(String, f64)>)]) -> std::io::Result<()> {
    write_file(path, |w| {
        for (qid, ranking) in results {
            write_trec_ranking(&mut *w, qid, ranking.iter().map(|(p, s)| (p.as_str(), *s)), tag)?;
        }
        Ok(())
    })
}

fn load_replicas(runner: &Runner, n: usize) -> StageResult<Vec<Vec<QueryPair>>> {
    (0..n)
        .map(|k| {
            let f = std::fs::File::open(runner.path(&replica_file(k)))?;
            Ok(read_pairs_tsv(std::io::BufReader::new(f))?)
        })
        .collect()
}

/// Outcome of a run: the artifacts directory and the headline checks.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub output: PathBuf,
    pub manifest: Manifest,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome, ExperimentError> {
    let out = cfg.paths.output.clone();
    std::fs::create_dir_all(&out).map_err(|e| ExperimentError::Stage {
        stage: "setup".into(),
        message: format!("{}: {e}", out.display()),
    })?;
    let setup_err = |e: &dyn std::fmt::Display| ExperimentError::Stage {
        stage: "setup".into(),
        message: e.to_string(),
    };
    let mut inputs_hash = BTreeMap::new();
    for (role, p) in cfg.input_files() {
        inputs_hash.insert(role.to_string(), file_sha256(p).map_err(|e| setup_err(&e))?);
    }
    let config = cfg.canonical();
    let config_hash = {
        let text = serde_json::to_string(&(&config, &inputs_hash)).map_err(|e| setup_err(&e))?;
        sha256_hex(text.as_bytes())
    };
    let previous = Manifest::load(&out.join(MANIFEST)).filter(|m| {
        let same = m.config_hash == config_hash;
        if !same {
            log::warn!("existing manifest has a different configuration; rebuilding every stage");
        }
        same
    });
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash,
        seed: cfg.seed,
        config,
        inputs: inputs_hash,
        stages: Vec::new(),
        thresholds: None,
        checks: BTreeMap::new(),
    };
    let inputs = load_inputs(cfg).map_err(|e| setup_err(&e))?;
    let mut runner = Runner {
        cfg,
        out,
        manifest,
        previous,
        dirty: false,
    };
    let n = cfg.replicas;

    runner.stage("typos", (0..n).map(replica_file).collect(), |r| {
        let replicas = generate_replicas(&inputs.queries, n, &cfg.typo, cfg.seed)?;
        for (k, pairs) in replicas.iter().enumerate() {
            write_file(&r.path(&replica_file(k)), |w| write_pairs_tsv(w, pairs))?;
        }
        Ok(())
    })?;

    let mut bm25_outputs = vec!["bm25/index.tgix".to_string(), "train/bm25_train.trec".to_string()];
    bm25_outputs.push(clean_run_file("bm25"));
    bm25_outputs.extend((0..n).map(|k| typo_run_file("bm25", k)));
    runner.stage("bm25", bm25_outputs, |r| {
        let index = InvertedIndex::build(&inputs.collection, Some(cfg.typo.stopwords.clone()))?;
        index.save(r.path("bm25/index.tgix"))?;
        let params = Bm25Params::default();
        let train_run = index.search_all(&inputs.train_queries, cfg.train.bm25_depth, params)?;
        save_run(&r.path("train/bm25_train.trec"), "bm25", &train_run)?;
        let clean = index.search_all(&inputs.queries, cfg.eval.depth, params)?;
        save_run(&r.path(&clean_run_file("bm25")), "bm25", &clean)?;
        for (k, pairs) in load_replicas(r, n)?.iter().enumerate() {
            let qs: Vec<(String, String)> = pairs.iter().map(|p| (p.query_id.clone(), p.typo_text.clone())).collect();
            save_run(&r.path(&typo_run_file("bm25", k)), "bm25", &index.search_all(&qs, cfg.eval.depth, params)?)?;
        }
        Ok(())
    })?;

    runner.stage("trainset", vec!["train/train.jsonl".into()], |r| {
        let run = RunFile::load(r.path("train/bm25_train.trec"))?;
        let bm25: BTreeMap<String, Vec<String>> = run
            .queries
            .into_iter()
            .map(|(q, list)| (q, list.into_iter().map(|x| x.pid).collect()))
            .collect();
        let passages: HashMap<String, String> = inputs.collection.iter().cloned().collect();
        let samples = build_training_set(
            &inputs.train_queries,
            &inputs.train_qrels,
            &bm25,
            &passages,
            cfg.train.hard_negatives,
            cfg.seed,
        );
        log::info!("{} training samples", samples.len());
        write_file(&r.path("train/train.jsonl"), |w| {
            write_training_set(w, &samples).map_err(std::io::Error::other)
        })?;
        Ok(())
    })?;

    for spec in &cfg.models {
        let name = &spec.name;
        let model_file = format!("models/{name}.tgdr");
        let loss_file = format!("models/{name}.loss.tsv");
        runner.stage(&format!("train:{name}"), vec![model_file.clone(), loss_file.clone()], |r| {
            let samples = load_training_set(r.path("train/train.jsonl"))?;
            let tc = TrainConfig {
                mode: spec.mode,
                ..cfg.train.clone()
            };
            let vocab = if spec.needs_vocab() { inputs.vocab.clone() } else { None };
            let model = EncoderModel::init(spec.encoder_config(&cfg.encoder), vocab, cfg.seed)?;
            let start = Instant::now();
            let outcome = train(&samples, model, &tc, &cfg.typo)?;
            log::info!(
                "{name}: {} updates in {:.1}s",
                outcome.losses.len(),
                start.elapsed().as_secs_f64()
            );
            save_checkpoint(&outcome.model, r.path(&model_file))?;
            write_file(&r.path(&loss_file), |w| write_loss_trace(w, &outcome.losses, 10))?;
            Ok(())
        })?;

        let index_file = format!("indexes/{name}.tgdx");
        runner.stage(&format!("index:{name}"), vec![index_file.clone()], |r| {
            let model = load_checkpoint(r.path(&model_file))?;
            let index = DenseIndex::encode_collection(&model, &inputs.collection, cfg.workers)?;
            index.save(r.path(&index_file))?;
            Ok(())
        })?;

        let mut run_outputs = vec![clean_run_file(name), format!("runs/{name}/cosine.tsv")];
        run_outputs.extend((0..n).map(|k| typo_run_file(name, k)));
        runner.stage(&format!("runs:{name}"), run_outputs, |r| {
            let model = load_checkpoint(r.path(&model_file))?;
            let index = DenseIndex::load(r.path(&index_file))?;
            if !index.check_model(&model) {
                return Err(format!("{index_file} was not built with {model_file}").into());
            }
            let depth = cfg.eval.depth.min(index.len());
            let search = |texts: &[(String, String)]| -> StageResult<(Vec<(String, Vec<(String, f64)>)>, HashMap<String, Vec<f32>>)> {
                let vecs = encode_texts(&model, texts, Role::Query, cfg.workers)?;
                let mut results = Vec::new();
                let mut by_id = HashMap::new();
                for ((qid, _), v) in texts.iter().zip(vecs) {
                    if let Some(v) = v {
                        let hits = index.search(&v, depth)?;
                        results.push((qid.clone(), hits.into_iter().map(|(p, s)| (p, s as f64)).collect()));
                        by_id.insert(qid.clone(), v);
                    }
                }
                Ok((results, by_id))
            };
            let (clean, clean_vecs) = search(&inputs.queries)?;
            save_run(&r.path(&clean_run_file(name)), name, &clean)?;
            let mut cosine = String::from("replica\tqid\tcosine\n");
            for (k, pairs) in load_replicas(r, n)?.iter().enumerate() {
                let qs: Vec<(String, String)> =
                    pairs.iter().map(|p| (p.query_id.clone(), p.typo_text.clone())).collect();
                let (typo, typo_vecs) = search(&qs)?;
                save_run(&r.path(&typo_run_file(name, k)), name, &typo)?;
                for p in pairs {
                    if let (Some(a), Some(b)) = (clean_vecs.get(&p.query_id), typo_vecs.get(&p.query_id)) {
                        let _ = writeln!(cosine, "{}\t{}\t{:.9}", k + 1, p.query_id, encoding_similarity(a, b)?);
                    }
                }
            }
            std::fs::write(r.path(&format!("runs/{name}/cosine.tsv")), cosine)?;
            Ok(())
        })?;
    }

    let systems: Vec<String> = std::iter::once("bm25".to_string())
        .chain(cfg.models.iter().map(|m| m.name.clone()))
        .collect();
    let mut report_outputs: Vec<String> = [
        "reports/metrics.tsv",
        "reports/drop.tsv",
        "reports/significance.tsv",
        "reports/trend.tsv",
        "reports/summary.txt",
        "reports/checks.tsv",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for s in &systems {
        report_outputs.push(format!("reports/per_query/{s}.clean.tsv"));
        report_outputs.push(format!("reports/per_query/{s}.typo.tsv"));
        if s != "bm25" && inputs.vocab.is_some() {
            report_outputs.push(format!("reports/bins/{s}.tsv"));
        }
    }
    let mut checks = BTreeMap::new();
    runner.stage("report", report_outputs, |r| {
        checks = build_reports(r, &inputs, &systems)?;
        Ok(())
    })?;
    if checks.is_empty() {
        checks = read_checks(&runner.path("reports/checks.tsv")).unwrap_or_default();
    }
    runner.manifest.thresholds = Some(REFERENCE_THRESHOLDS);
    runner.manifest.checks = checks;
    runner
        .manifest
        .save(&runner.path(MANIFEST))
        .map_err(|e| setup_err(&e))?;
    Ok(ExperimentOutcome {
        output: runner.out.clone(),
        manifest: runner.manifest,
    })
}

/// Per-query values on the clean queries and replica-averaged values on
/// the typo queries of one system.
pub struct SystemEval {
    pub clean: MetricReport,
    pub typo: MetricReport,
    /// Per-replica reciprocal ranks at the configured cutoff.
    pub typo_rr: Vec<BTreeMap<String, f64>>,
}

/// Add zero rows for judged queries the run did not return anything for.
pub fn complete_report(mut report: MetricReport, qids: &[String], qrels: &Qrels) -> MetricReport {
    for q in qids {
        if qrels.get(q).is_some() && !report.per_query.contains_key(q) {
            report.per_query.insert(q.clone(), vec![0.0; report.metrics.len()]);
        }
    }
    report
}

pub fn evaluate_system(
    clean: &RunFile,
    typo: &[RunFile],
    replicas: &[Vec<QueryPair>],
    queries: &[(String, String)],
    qrels: &Qrels,
    metrics: &[Metric],
    threshold: u8,
    rr_cutoff: usize,
) -> Result<SystemEval, crate::eval::EvalError> {
    let qids: Vec<String> = queries.iter().map(|(q, _)| q.clone()).collect();
    let clean = complete_report(per_query_metrics(clean, qrels, metrics, threshold), &qids, qrels);
    let mut reports = Vec::with_capacity(typo.len());
    for (run, pairs) in typo.iter().zip(replicas) {
        let pq: Vec<String> = pairs.iter().map(|p| p.query_id.clone()).collect();
        let mut rep = complete_report(per_query_metrics(run, qrels, metrics, threshold), &pq, qrels);
        rep.per_query.retain(|q, _| pq.contains(q));
        reports.push(rep);
    }
    let typo_rr = reports.iter().map(|r| r.values(Metric::RR(rr_cutoff))).collect();
    Ok(SystemEval {
        clean,
        typo: replica_average(&reports)?,
        typo_rr,
    })
}

/// One measurement per clean/typo pair over every replica. `cosines[k]`
/// maps a query id to its clean/typo cosine in replica `k`; pairs without a
/// cosine get `NaN`.
pub fn pair_measures(
    clean_rr: &BTreeMap<String, f64>,
    typo_rr: &[BTreeMap<String, f64>],
    replicas: &[Vec<QueryPair>],
    vocab: &WordPieceVocab,
    cosines: Option<&[BTreeMap<String, f64>]>,
) -> Vec<PairMeasure> {
    let mut out = Vec::new();
    for (k, pairs) in replicas.iter().enumerate() {
        for p in pairs {
            let (Some(&c), Some(&t)) = (clean_rr.get(&p.query_id), typo_rr[k].get(&p.query_id)) else {
                continue;
            };
            let cosine = cosines
                .and_then(|cs| cs.get(k))
                .and_then(|m| m.get(&p.query_id))
                .copied()
                .unwrap_or(f64::NAN);
            out.push(PairMeasure {
                difference: pair_token_difference(p, vocab),
                rr_clean: c,
                rr_typo: t,
                cosine,
            });
        }
    }
    out
}

/// Rank correlation and slope of Δ_MRR and mean cosine against the bin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trend {
    pub spearman_delta: f64,
    pub slope_delta: f64,
    pub spearman_cosine: f64,
    pub slope_cosine: f64,
}

pub fn bin_trend(rows: &[BinRow]) -> Trend {
    let with_delta: Vec<&BinRow> = rows.iter().filter(|r| r.delta_mrr.is_some()).collect();
    let xd: Vec<f64> = with_delta.iter().map(|r| r.bin as f64).collect();
    let yd: Vec<f64> = with_delta.iter().map(|r| r.delta_mrr.unwrap()).collect();
    let xc: Vec<f64> = rows.iter().map(|r| r.bin as f64).collect();
    let yc: Vec<f64> = rows.iter().map(|r| r.cosine_mean).collect();
    let corr = |x: &[f64], y: &[f64]| if x.len() >= 2 { spearman(x, y) } else { f64::NAN };
    let slope = |x: &[f64], y: &[f64]| if x.len() >= 2 { ols_slope(x, y) } else { f64::NAN };
    Trend {
        spearman_delta: corr(&xd, &yd),
        slope_delta: slope(&xd, &yd),
        spearman_cosine: corr(&xc, &yc),
        slope_cosine: slope(&xc, &yc),
    }
}

/// Whether the robust system's trends reverse or flatten relative to the
/// baseline's: opposite (or zero) rank-correlation sign, or a slope at most
/// half the baseline's in magnitude.
pub fn trend_reversed(baseline: &Trend, robust: &Trend) -> (bool, bool) {
    let delta = robust.spearman_delta * baseline.spearman_delta.signum() <= 0.0
        || robust.slope_delta.abs() <= 0.5 * baseline.slope_delta.abs();
    let cosine = robust.spearman_cosine * baseline.spearman_cosine.signum() <= 0.0
        || robust.slope_cosine.abs() <= 0.5 * baseline.slope_cosine.abs();
    (delta, cosine)
}

fn read_cosines(path: &Path, n: usize) -> StageResult<Vec<BTreeMap<String, f64>>> {
    let mut out = vec![BTreeMap::new(); n];
    for line in std::fs::read_to_string(path)?.lines().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(format!("{}: malformed line {line:?}", path.display()).into());
        }
        let k: usize = f[0].parse()?;
        if k == 0 || k > n {
            return Err(format!("{}: replica {k} out of range", path.display()).into());
        }
        out[k - 1].insert(f[1].to_string(), f[2].parse()?);
    }
    Ok(out)
}

fn read_checks(path: &Path) -> Option<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).ok()?;
    Some(
        text.lines()
            .skip(1)
            .filter_map(|l| l.split_once('\t'))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect(),
    )
}

fn fmt_opt(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else {
        format!("{x:.6}")
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn build_reports(r: &Runner, inputs: &Inputs, systems: &[String]) -> StageResult<BTreeMap<String, String>> {
    let cfg = r.cfg;
    let n = cfg.replicas;
    let replicas = load_replicas(r, n)?;
    let rr = Metric::RR(cfg.eval.rr_cutoff);
    let typo_qids: Vec<String> = replicas[0].iter().map(|p| p.query_id.clone()).collect();

    let mut evals = BTreeMap::new();
    let mut cosines = BTreeMap::new();
    for s in systems {
        let clean = RunFile::load(r.path(&clean_run_file(s)))?;
        let typo = (0..n)
            .map(|k| RunFile::load(r.path(&typo_run_file(s, k))))
            .collect::<Result<Vec<_>, _>>()?;
        let ev = evaluate_system(
            &clean,
            &typo,
            &replicas,
            &inputs.queries,
            &inputs.qrels,
            &cfg.eval.metrics,
            cfg.eval.threshold,
            cfg.eval.rr_cutoff,
        )?;
        std::fs::write(r.path(&format!("reports/per_query/{s}.clean.tsv")), ev.clean.to_tsv())?;
        std::fs::write(r.path(&format!("reports/per_query/{s}.typo.tsv")), ev.typo.to_tsv())?;
        if s != "bm25" {
            cosines.insert(s.clone(), read_cosines(&r.path(&format!("runs/{s}/cosine.tsv")), n)?);
        }
        evals.insert(s.clone(), ev);
    }

    let mut metrics_tsv = String::from("system\tqueries");
    for m in &cfg.eval.metrics {
        let _ = write!(metrics_tsv, "\t{m}");
    }
    metrics_tsv.push_str("\tcount\n");
    for s in systems {
        let ev = &evals[s];
        for (label, rep) in [("clean", &ev.clean), ("typo", &ev.typo)] {
            let _ = write!(metrics_tsv, "{s}\t{label}");
            for &m in &cfg.eval.metrics {
                let _ = write!(metrics_tsv, "\t{:.6}", rep.mean(m));
            }
            let _ = writeln!(metrics_tsv, "\t{}", rep.per_query.len());
        }
    }
    std::fs::write(r.path("reports/metrics.tsv"), &metrics_tsv)?;

    #[derive(Clone, Copy)]
    struct Drop {
        clean: f64,
        typo: f64,
        delta: f64,
        cosine: f64,
    }
    let mut drops = BTreeMap::new();
    let mut drop_tsv = format!("system\tmrr_clean\tmrr_typo\tdelta_mrr\tcosine_mean\n");
    let mut trend_tsv = String::from("system\tbins\tspearman_delta\tslope_delta\tspearman_cosine\tslope_cosine\n");
    let mut trends = BTreeMap::new();
    for s in systems {
        let ev = &evals[s];
        let clean_all = ev.clean.values(rr);
        let clean_rr: BTreeMap<String, f64> = clean_all
            .iter()
            .filter(|(q, _)| ev.typo.per_query.contains_key(*q))
            .map(|(q, v)| (q.clone(), *v))
            .collect();
        let typo_rr = ev.typo.values(rr);
        let delta = mrr_drop_rate(&clean_rr, &typo_rr).unwrap_or(f64::NAN);
        let cosine = cosines.get(s).map_or(f64::NAN, |cs: &Vec<BTreeMap<String, f64>>| {
            // per-query mean over replicas, then over queries
            mean(typo_qids.iter().filter_map(|q| {
                let v: Vec<f64> = cs.iter().filter_map(|m| m.get(q).copied()).collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            }))
        });
        let d = Drop {
            clean: ev.clean.mean(rr),
            typo: ev.typo.mean(rr),
            delta,
            cosine,
        };
        let _ = writeln!(
            drop_tsv,
            "{s}\t{:.6}\t{:.6}\t{}\t{}",
            d.clean,
            d.typo,
            fmt_opt(d.delta),
            fmt_opt(d.cosine)
        );
        drops.insert(s.clone(), d);
        if let (Some(vocab), Some(cs)) = (&inputs.vocab, cosines.get(s)) {
            let pairs = pair_measures(&clean_all, &ev.typo_rr, &replicas, vocab, Some(cs));
            let bins = bin_by_token_difference(&pairs);
            std::fs::write(r.path(&format!("reports/bins/{s}.tsv")), bins_to_tsv(&bins))?;
            let t = bin_trend(&bins);
            let _ = writeln!(
                trend_tsv,
                "{s}\t{}\t{}\t{}\t{}\t{}",
                bins.len(),
                fmt_opt(t.spearman_delta),
                fmt_opt(t.slope_delta),
                fmt_opt(t.spearman_cosine),
                fmt_opt(t.slope_cosine)
            );
            trends.insert(s.clone(), t);
        }
    }
    std::fs::write(r.path("reports/drop.tsv"), &drop_tsv)?;
    std::fs::write(r.path("reports/trend.tsv"), &trend_tsv)?;

    let baseline = cfg.eval.baseline.clone().unwrap_or_else(|| systems[1.min(systems.len() - 1)].clone());
    let mut tests = Vec::new();
    for s in systems.iter().filter(|s| **s != baseline) {
        for label in ["clean", "typo"] {
            let pick = |ev: &SystemEval| if label == "clean" { ev.clean.values(rr) } else { ev.typo.values(rr) };
            let a = pick(&evals[s]);
            let b = pick(&evals[&baseline]);
            let keys: Vec<&String> = a.keys().filter(|q| b.contains_key(*q)).collect();
            let av: Vec<f64> = keys.iter().map(|q| a[*q]).collect();
            let bv: Vec<f64> = keys.iter().map(|q| b[*q]).collect();
            if let Ok(t) = paired_t_test(&av, &bv) {
                tests.push((s.clone(), label, keys.len(), mean(av.into_iter()), mean(bv.into_iter()), t));
            }
        }
    }
    let m = cfg.eval.bonferroni.unwrap_or(tests.len()).max(1);
    let mut sig_tsv = format!("system\tbaseline\tqueries\tn\tmetric\tmean\tmean_baseline\tt\tp\tp_bonferroni\n");
    for (s, label, count, ma, mb, t) in &tests {
        let _ = writeln!(
            sig_tsv,
            "{s}\t{baseline}\t{label}\t{count}\t{rr}\t{ma:.6}\t{mb:.6}\t{:.6}\t{:.6e}\t{:.6e}",
            t.t,
            t.p,
            bonferroni(t.p, m)
        );
    }
    std::fs::write(r.path("reports/significance.tsv"), &sig_tsv)?;

    let mut checks = BTreeMap::new();
    let (ce, st) = &cfg.eval.st_pair;
    if let (Some(a), Some(b)) = (drops.get(ce), drops.get(st)) {
        let th = REFERENCE_THRESHOLDS;
        let reduction = (a.delta - b.delta) / a.delta;
        checks.insert("st_effect.ce_delta_mrr".into(), format!("{:.6}", a.delta));
        checks.insert("st_effect.st_delta_mrr".into(), format!("{:.6}", b.delta));
        checks.insert("st_effect.relative_reduction".into(), format!("{reduction:.6}"));
        checks.insert("st_effect.ce_cosine".into(), format!("{:.6}", a.cosine));
        checks.insert("st_effect.st_cosine".into(), format!("{:.6}", b.cosine));
        checks.insert("st_effect.ce_clean_mrr".into(), format!("{:.6}", a.clean));
        checks.insert("st_effect.st_clean_mrr".into(), format!("{:.6}", b.clean));
        checks.insert("st_effect.a_ce_delta".into(), (a.delta > th.min_ce_delta_mrr).to_string());
        checks.insert(
            "st_effect.b_reduction".into(),
            (b.delta < a.delta && reduction >= th.min_relative_reduction).to_string(),
        );
        checks.insert("st_effect.c_cosine".into(), (b.cosine > a.cosine).to_string());
        checks.insert(
            "st_effect.d_clean_gap".into(),
            ((b.clean - a.clean).abs() <= th.max_clean_mrr_gap).to_string(),
        );
    }
    let (base, robust) = &cfg.eval.trend_pair;
    if let (Some(a), Some(b)) = (trends.get(base), trends.get(robust)) {
        let (flip_delta, flip_cos) = trend_reversed(a, b);
        checks.insert("trend.baseline_spearman_delta".into(), fmt_opt(a.spearman_delta));
        checks.insert("trend.baseline_spearman_cosine".into(), fmt_opt(a.spearman_cosine));
        checks.insert("trend.robust_spearman_delta".into(), fmt_opt(b.spearman_delta));
        checks.insert("trend.robust_spearman_cosine".into(), fmt_opt(b.spearman_cosine));
        checks.insert(
            "trend.baseline_signs".into(),
            (a.spearman_delta > 0.0 && a.spearman_cosine < 0.0).to_string(),
        );
        checks.insert("trend.robust_reversed".into(), (flip_delta && flip_cos).to_string());
    }
    let mut checks_tsv = String::from("key\tvalue\n");
    for (k, v) in &checks {
        let _ = writeln!(checks_tsv, "{k}\t{v}");
    }
    std::fs::write(r.path("reports/checks.tsv"), checks_tsv)?;

    let mut summary = format!(
        "{:<14} {:>10} {:>10} {:>9} {:>8}\n",
        "system",
        format!("{rr} cl"),
        format!("{rr} ty"),
        "dMRR",
        "cosine"
    );
    for s in systems {
        let d = drops[s];
        let _ = writeln!(
            summary,
            "{:<14} {:>10.4} {:>10.4} {:>9} {:>8}",
            s,
            d.clean,
            d.typo,
            if d.delta.is_nan() { "-".into() } else { format!("{:.4}", d.delta) },
            if d.cosine.is_nan() { "-".into() } else { format!("{:.4}", d.cosine) }
        );
    }
    summary.push('\n');
    let _ = writeln!(summary, "significance against {baseline} (Bonferroni m = {m}):");
    for (s, label, _, ma, mb, t) in &tests {
        let _ = writeln!(
            summary,
            "  {:<14} {:<6} {ma:.4} vs {mb:.4}  t = {:>8.3}  p = {:.3e}",
            s,
            label,
            t.t,
            bonferroni(t.p, m)
        );
    }
    std::fs::write(r.path("reports/summary.txt"), summary)?;
    Ok(checks)
}

/// The configuration written next to a generated toy corpus.
pub fn toy_experiment_config(seed: u64) -> ConfigFile {
    let text = format!(
        r#"[paths]
collection = "collection.tsv"
queries = "queries.tsv"
qrels = "qrels.txt"
train_queries = "train_queries.tsv"
train_qrels = "train_qrels.txt"
vocab = "vocab.txt"
output = "out"

[experiment]
seed = {seed}
models = ["ce-lookup", "st-lookup", "ce-charcnn", "st-charcnn"]
replicas = 10

[encoder]
d_model = 64
n_layers = 1
n_heads = 4
d_ff = 128
max_seq_len = 24

[train]
batch_size = 8
hard_negatives = 3
learning_rate = 0.001
total_updates = 6000
warmup_updates = 50
bm25_depth = 200

[eval]
metrics = ["mrr@10", "r@1000", "ndcg@10", "map"]
baseline = "ce-lookup"
"#
    );
    ConfigFile::parse(&text).expect("static configuration parses")
}

/// Write a toy corpus and its experiment configuration to `dir`.
pub fn write_toy_corpus(dir: &Path, seed: u64, toy: &ToyConfig) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let c = make_toy_corpus(seed, toy);
    write_file(&dir.join("collection.tsv"), |w| write_id_text(w, &c.collection))?;
    write_file(&dir.join("queries.tsv"), |w| write_id_text(w, &c.queries))?;
    write_file(&dir.join("qrels.txt"), |w| c.qrels.write(w))?;
    write_file(&dir.join("train_queries.tsv"), |w| write_id_text(w, &c.train_queries))?;
    write_file(&dir.join("train_qrels.txt"), |w| c.train_qrels.write(w))?;
    std::fs::write(dir.join("vocab.txt"), c.vocab.to_text())?;
    std::fs::write(dir.join("experiment.toml"), toy_experiment_config(seed).to_text())
}

#[cfg(test)]
mod tests;
