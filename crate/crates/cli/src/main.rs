use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use typodr::config::ConfigFile;
use typodr::data::load_id_text;
use typodr::dense_index::{encode_texts, encoding_similarity, DenseIndex};
use typodr::encoder::{load_checkpoint, save_checkpoint, EncoderConfig, EncoderModel, FrontEnd, Role};
use typodr::eval::{
    bin_by_token_difference, bins_to_tsv, bonferroni, mrr_drop_rate, paired_t_test, parse_metrics,
    per_query_metrics, Metric, Qrels, RunFile,
};
use typodr::experiment::{
    evaluate_system, pair_measures, run_experiment, save_run, write_file, write_toy_corpus, ExperimentConfig,
};
use typodr::sparse::{Bm25Params, InvertedIndex};
use typodr::tokenizer::{difference_histogram, WordPieceVocab};
use typodr::toy::ToyConfig;
use typodr::training::{build_training_set, load_training_set, train, write_loss_trace, write_training_set, TrainConfig};
use typodr::typo_gen::{generate_replicas, parse_stopwords, read_pairs_tsv, write_pairs_tsv, QueryPair, TypoConfig};

#[derive(Parser)]
#[command(name = "typodr", version, about = "Typo-robust dense retrieval experiments")]
struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate typo replicas of a query set.
    TypoGen(TypoGenArgs),
    /// Histogram of WordPiece tokenization differences over replica files.
    TokenizeDiff(TokenizeDiffArgs),
    /// Build a BM25 index over a collection.
    Bm25Index(Bm25IndexArgs),
    /// Rank queries with a BM25 index.
    Bm25Search(Bm25SearchArgs),
    /// Train a bi-encoder.
    Train(TrainArgs),
    /// Encode a collection into a dense index.
    Index(IndexArgs),
    /// Rank queries against a dense index.
    Search(SearchArgs),
    /// Evaluate a run against qrels.
    Eval(EvalArgs),
    /// Clean versus typo evaluation with the tokenization-difference breakdown.
    EvalPairs(EvalPairsArgs),
    /// Paired two-tailed t-test between two per-query result files.
    Sigtest(SigtestArgs),
    /// Write the synthetic toy corpus and its experiment configuration.
    ToyCorpus(ToyCorpusArgs),
    /// Run the configured end-to-end experiment.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct TypoGenArgs {
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = 10)]
    replicas: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    stopwords: Option<PathBuf>,
    /// Selection weights of the five typo kinds.
    #[arg(long)]
    kinds: Option<String>,
    #[arg(long)]
    min_word_length: Option<usize>,
}

#[derive(Args)]
struct TokenizeDiffArgs {
    /// Replica files, or directories holding `replica_*.tsv`.
    #[arg(long, required = true, num_args = 1..)]
    pairs: Vec<PathBuf>,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    tsv: bool,
}

#[derive(Args)]
struct Bm25IndexArgs {
    #[arg(long)]
    collection: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Stopword list; the bundled English list is used otherwise.
    #[arg(long)]
    stopwords: Option<PathBuf>,
    #[arg(long, conflicts_with = "stopwords")]
    keep_stopwords: bool,
}

#[derive(Args)]
struct Bm25SearchArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    k: usize,
    #[arg(long, default_value_t = 0.9)]
    k1: f64,
    #[arg(long, default_value_t = 0.4)]
    b: f64,
    #[arg(long, default_value = "bm25")]
    tag: String,
}

#[derive(Args)]
struct TrainArgs {
    /// Training samples (JSONL). Alternatively give queries, qrels,
    /// collection and a BM25 run to build them.
    #[arg(long)]
    training_set: Option<PathBuf>,
    #[arg(long, requires_all = ["qrels", "collection", "bm25_run"])]
    queries: Option<PathBuf>,
    #[arg(long)]
    qrels: Option<PathBuf>,
    #[arg(long)]
    collection: Option<PathBuf>,
    #[arg(long)]
    bm25_run: Option<PathBuf>,
    /// Save the built training samples here.
    #[arg(long)]
    write_training_set: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Config file with [encoder], [train] and [typo] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// ce, aug or st.
    #[arg(long)]
    mode: Option<String>,
    /// lookup or charcnn.
    #[arg(long)]
    front_end: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `section.key=value` settings.
    #[arg(long = "set")]
    sets: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    loss_trace: Option<PathBuf>,
}

#[derive(Args)]
struct IndexArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    collection: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    k: usize,
    #[arg(long, default_value = "dense")]
    tag: String,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    #[arg(long, default_value = "mrr@10,r@1000,ndcg@10,map")]
    metrics: String,
    /// Minimum grade counted as relevant for binary metrics.
    #[arg(long, default_value_t = 1)]
    threshold: u8,
    /// Write per-query values as TSV.
    #[arg(long)]
    per_query: Option<PathBuf>,
}

#[derive(Args)]
struct EvalPairsArgs {
    #[arg(long)]
    clean_run: PathBuf,
    /// A typo run file, or a directory of `typo_*.trec` files.
    #[arg(long)]
    typo_runs: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    /// A replica file, or a directory of `replica_*.tsv` files matching the
    /// typo runs in sorted order.
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Model for clean/typo encoding similarity.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    cutoff: usize,
    #[arg(long, default_value_t = 1)]
    threshold: u8,
    /// Write the binned analysis TSV here.
    #[arg(long)]
    bins: Option<PathBuf>,
}

#[derive(Args)]
struct SigtestArgs {
    /// Per-query TSV (`qid<TAB>metric...`), as written by `eval --per-query`.
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// Column to compare; the first metric column by default.
    #[arg(long)]
    metric: Option<String>,
    #[arg(long, default_value_t = 1)]
    bonferroni: usize,
}

#[derive(Args)]
struct ToyCorpusArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 13)]
    seed: u64,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides paths.output.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Overrides experiment.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides experiment.models.
    #[arg(long)]
    models: Option<String>,
    /// Overrides experiment.replicas.
    #[arg(long)]
    replicas: Option<usize>,
    /// Overrides experiment.workers.
    #[arg(long)]
    workers: Option<usize>,
    /// Any other `section.key=value` override.
    #[arg(long = "set")]
    sets: Vec<String>,
}

/// Errors are split by exit code: bad input or configuration (2) versus a
/// failure while doing the work (1).
enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn invalid(msg: impl std::fmt::Display) -> Failure {
    Failure::Validation(anyhow!("{msg}"))
}

fn require_files(paths: &[&Path]) -> Result<(), Failure> {
    for p in paths {
        if !p.exists() {
            return Err(invalid(format!("{} does not exist", p.display())));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::TypoGen(a) => typo_gen(a),
        Command::TokenizeDiff(a) => tokenize_diff(a),
        Command::Bm25Index(a) => bm25_index(a),
        Command::Bm25Search(a) => bm25_search(a),
        Command::Train(a) => train_cmd(a),
        Command::Index(a) => index(a),
        Command::Search(a) => search(a),
        Command::Eval(a) => eval(a),
        Command::EvalPairs(a) => eval_pairs(a),
        Command::Sigtest(a) => sigtest(a),
        Command::ToyCorpus(a) => toy_corpus(a),
        Command::Experiment(a) => experiment(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_stopwords(path: &Option<PathBuf>) -> anyhow::Result<Option<std::collections::HashSet<String>>> {
    path.as_ref()
        .map(|p| {
            std::fs::read_to_string(p)
                .map(|t| parse_stopwords(&t))
                .with_context(|| format!("reading {}", p.display()))
        })
        .transpose()
}

fn typo_gen(a: TypoGenArgs) -> CmdResult {
    require_files(&[&a.queries])?;
    let mut cfg = TypoConfig::with_seed(a.seed);
    if let Some(s) = load_stopwords(&a.stopwords)? {
        cfg.stopwords = s;
    }
    if let Some(k) = &a.kinds {
        cfg.kind_weights = TypoConfig::parse_kind_weights(k).map_err(invalid)?;
    }
    if let Some(m) = a.min_word_length {
        cfg.min_word_length = m;
    }
    cfg.validate().map_err(invalid)?;
    if a.replicas == 0 {
        return Err(invalid("--replicas must be at least 1"));
    }
    let queries = load_id_text(&a.queries)?;
    let replicas = generate_replicas(&queries, a.replicas, &cfg, a.seed)?;
    std::fs::create_dir_all(&a.out_dir)?;
    for (k, pairs) in replicas.iter().enumerate() {
        let path = a.out_dir.join(format!("replica_{:02}.tsv", k + 1));
        write_file(&path, |w| write_pairs_tsv(w, pairs))?;
    }
    println!(
        "{} replicas of {} pairs ({} queries without an eligible word)",
        replicas.len(),
        replicas[0].len(),
        queries.len() - replicas[0].len()
    );
    Ok(())
}

/// Files of a directory whose names start with `prefix`, sorted; or the
/// path itself when it is a file.
fn expand(path: &Path, prefix: &str) -> anyhow::Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .with_context(|| format!("listing {}", path.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with(prefix)))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no {prefix}* files in {}", path.display());
    }
    Ok(files)
}

fn read_pairs(path: &Path) -> anyhow::Result<Vec<QueryPair>> {
    let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_pairs_tsv(std::io::BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn tokenize_diff(a: TokenizeDiffArgs) -> CmdResult {
    let mut paths: Vec<&Path> = a.pairs.iter().map(PathBuf::as_path).collect();
    paths.push(&a.vocab);
    require_files(&paths)?;
    let vocab = WordPieceVocab::load(&a.vocab).map_err(invalid)?;
    let mut replicas = Vec::new();
    for p in &a.pairs {
        for f in expand(p, "replica_")? {
            replicas.push(read_pairs(&f)?);
        }
    }
    let h = difference_histogram(&replicas, &vocab);
    print!("{}", if a.tsv { h.to_tsv() } else { h.to_table() });
    Ok(())
}

fn bm25_index(a: Bm25IndexArgs) -> CmdResult {
    require_files(&[&a.collection])?;
    let collection = load_id_text(&a.collection)?;
    let stop = if a.keep_stopwords {
        None
    } else {
        Some(load_stopwords(&a.stopwords)?.unwrap_or_else(typodr::typo_gen::default_stopwords))
    };
    let index = InvertedIndex::build(&collection, stop)?;
    index.save(&a.out)?;
    println!("indexed {} passages, average length {:.2}", index.len(), index.avg_len());
    Ok(())
}

fn bm25_search(a: Bm25SearchArgs) -> CmdResult {
    require_files(&[&a.index, &a.queries])?;
    if a.k == 0 {
        return Err(invalid("--k must be positive"));
    }
    let index = InvertedIndex::load(&a.index)?;
    let queries = load_id_text(&a.queries)?;
    let results = index.search_all(&queries, a.k, Bm25Params { k1: a.k1, b: a.b })?;
    save_run(&a.out, &a.tag, &results)?;
    Ok(())
}

fn train_cmd(a: TrainArgs) -> CmdResult {
    let mut cf = match &a.config {
        Some(p) => {
            require_files(&[p])?;
            ConfigFile::load(p).map_err(invalid)?
        }
        None => ConfigFile::new(),
    };
    for s in &a.sets {
        cf.apply_override(s).map_err(invalid)?;
    }
    if let Some(m) = &a.mode {
        cf.set("train", "mode", m);
    }
    if let Some(f) = &a.front_end {
        cf.set("encoder", "front_end", f);
    }
    if let Some(s) = a.seed {
        cf.set("train", "seed", &s.to_string());
    }
    let empty = BTreeMap::new();
    let section = |s: &str| cf.sections().get(s).unwrap_or(&empty);
    let mut enc = EncoderConfig::default();
    for (k, v) in section("encoder") {
        enc.set(k, v).map_err(invalid)?;
    }
    enc.validate().map_err(invalid)?;
    let mut tc = TrainConfig::default();
    for (k, v) in section("train") {
        tc.set(k, v).map_err(invalid)?;
    }
    tc.validate().map_err(invalid)?;
    let mut typo = TypoConfig::with_seed(tc.seed);
    for (k, v) in section("typo") {
        match k.as_str() {
            "min_word_length" => typo.min_word_length = v.parse().map_err(|_| invalid(format!("typo.{k}: {v:?}")))?,
            "kind_weights" => typo.kind_weights = TypoConfig::parse_kind_weights(v).map_err(invalid)?,
            _ => return Err(invalid(format!("unknown key typo.{k}"))),
        }
    }
    for s in cf.sections().keys() {
        if !["", "encoder", "train", "typo"].contains(&s.as_str()) {
            log::warn!("section [{s}] is ignored by train");
        }
    }
    let needs_vocab = enc.front_end == FrontEnd::Lookup || !enc.tied_encoders;
    let vocab = match (&a.vocab, needs_vocab) {
        (Some(p), _) => {
            require_files(&[p])?;
            Some(WordPieceVocab::load(p).map_err(invalid)?)
        }
        (None, true) => return Err(invalid("the lookup front-end needs --vocab")),
        (None, false) => None,
    };

    let samples = match (&a.training_set, &a.queries) {
        (Some(ts), None) => {
            require_files(&[ts])?;
            load_training_set(ts)?
        }
        (None, Some(q)) => {
            let (qrels, coll, run) = (a.qrels.as_ref().unwrap(), a.collection.as_ref().unwrap(), a.bm25_run.as_ref().unwrap());
            require_files(&[q, qrels, coll, run])?;
            let queries = load_id_text(q)?;
            let qrels = Qrels::load(qrels)?;
            let passages: HashMap<String, String> = load_id_text(coll)?.into_iter().collect();
            let bm25: BTreeMap<String, Vec<String>> = RunFile::load(run)?
                .queries
                .into_iter()
                .map(|(q, l)| (q, l.into_iter().take(tc.bm25_depth).map(|r| r.pid).collect()))
                .collect();
            let s = build_training_set(&queries, &qrels, &bm25, &passages, tc.hard_negatives, tc.seed);
            if let Some(out) = &a.write_training_set {
                write_file(out, |w| write_training_set(w, &s).map_err(std::io::Error::other))?;
            }
            s
        }
        _ => return Err(invalid("give either --training-set or --queries/--qrels/--collection/--bm25-run")),
    };
    log::info!("{} training samples", samples.len());
    let model = EncoderModel::init(enc, vocab, tc.seed)?;
    let out = train(&samples, model, &tc, &typo)?;
    save_checkpoint(&out.model, &a.out)?;
    if let Some(p) = &a.loss_trace {
        write_file(p, |w| write_loss_trace(w, &out.losses, 10))?;
    }
    if let Some(last) = out.losses.last() {
        println!("{} updates, final batch loss {last:.4}", out.losses.len());
    }
    Ok(())
}

fn index(a: IndexArgs) -> CmdResult {
    require_files(&[&a.model, &a.collection])?;
    let model = load_checkpoint(&a.model)?;
    let collection = load_id_text(&a.collection)?;
    let index = DenseIndex::encode_collection(&model, &collection, a.workers)?;
    index.save(&a.out)?;
    println!("encoded {} of {} passages", index.len(), collection.len());
    Ok(())
}

fn search(a: SearchArgs) -> CmdResult {
    require_files(&[&a.model, &a.index, &a.queries])?;
    if a.k == 0 {
        return Err(invalid("--k must be positive"));
    }
    let model = load_checkpoint(&a.model)?;
    let index = DenseIndex::load(&a.index)?;
    if !index.check_model(&model) {
        return Err(invalid(format!(
            "{} was not built with {}",
            a.index.display(),
            a.model.display()
        )));
    }
    let queries = load_id_text(&a.queries)?;
    let vecs = encode_texts(&model, &queries, Role::Query, a.workers)?;
    let mut results = Vec::new();
    for ((qid, _), v) in queries.iter().zip(vecs) {
        if let Some(v) = v {
            let hits = index.search(&v, a.k)?;
            results.push((qid.clone(), hits.into_iter().map(|(p, s)| (p, s as f64)).collect()));
        }
    }
    save_run(&a.out, &a.tag, &results)?;
    Ok(())
}

fn eval(a: EvalArgs) -> CmdResult {
    require_files(&[&a.run, &a.qrels])?;
    let metrics = parse_metrics(&a.metrics).map_err(invalid)?;
    if metrics.is_empty() {
        return Err(invalid("no metrics given"));
    }
    let run = RunFile::load(&a.run).map_err(invalid)?;
    let qrels = Qrels::load(&a.qrels).map_err(invalid)?;
    let report = per_query_metrics(&run, &qrels, &metrics, a.threshold);
    if !report.unjudged.is_empty() {
        log::warn!("{} run queries have no judgments and were skipped", report.unjudged.len());
    }
    if let Some(p) = &a.per_query {
        std::fs::write(p, report.to_tsv())?;
    }
    print!("{}", report.to_table());
    Ok(())
}

fn eval_pairs(a: EvalPairsArgs) -> CmdResult {
    require_files(&[&a.clean_run, &a.typo_runs, &a.qrels, &a.pairs, &a.vocab])?;
    let vocab = WordPieceVocab::load(&a.vocab).map_err(invalid)?;
    let qrels = Qrels::load(&a.qrels).map_err(invalid)?;
    let clean = RunFile::load(&a.clean_run).map_err(invalid)?;
    let run_files = expand(&a.typo_runs, "typo_")?;
    let pair_files = expand(&a.pairs, "replica_")?;
    if run_files.len() != pair_files.len() {
        return Err(invalid(format!(
            "{} typo runs but {} replica files",
            run_files.len(),
            pair_files.len()
        )));
    }
    let typo = run_files
        .iter()
        .map(|p| RunFile::load(p).with_context(|| p.display().to_string()))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let replicas = pair_files.iter().map(|p| read_pairs(p)).collect::<anyhow::Result<Vec<_>>>()?;
    let queries: Vec<(String, String)> = {
        let mut seen = BTreeMap::new();
        for p in replicas.iter().flatten() {
            seen.entry(p.query_id.clone()).or_insert_with(|| p.clean_text.clone());
        }
        seen.into_iter().collect()
    };
    let rr = Metric::RR(a.cutoff);
    let ev = evaluate_system(&clean, &typo, &replicas, &queries, &qrels, &[rr], a.threshold, a.cutoff)?;
    let clean_rr = ev.clean.values(rr);
    let delta = mrr_drop_rate(&clean_rr, &ev.typo.values(rr))?;
    let cosines = match &a.model {
        Some(m) => {
            require_files(&[m])?;
            let model = load_checkpoint(m)?;
            let clean_v: HashMap<String, Vec<f32>> = queries
                .iter()
                .zip(encode_texts(&model, &queries, Role::Query, 1)?)
                .filter_map(|((q, _), v)| v.map(|v| (q.clone(), v)))
                .collect();
            let mut all = Vec::new();
            for pairs in &replicas {
                let texts: Vec<(String, String)> = pairs.iter().map(|p| (p.query_id.clone(), p.typo_text.clone())).collect();
                let mut m = BTreeMap::new();
                for ((q, _), v) in texts.iter().zip(encode_texts(&model, &texts, Role::Query, 1)?) {
                    if let (Some(v), Some(c)) = (v, clean_v.get(q)) {
                        m.insert(q.clone(), encoding_similarity(c, &v)?);
                    }
                }
                all.push(m);
            }
            Some(all)
        }
        None => None,
    };
    let measures = pair_measures(&clean_rr, &ev.typo_rr, &replicas, &vocab, cosines.as_deref());
    let bins = bin_by_token_difference(&measures);
    println!("{rr} clean   {:.4}", ev.clean.mean(rr));
    println!("{rr} typo    {:.4}", ev.typo.mean(rr));
    println!("dMRR        {delta:.4}");
    println!("replicas    {}", replicas.len());
    println!();
    print!("{}", bins_to_tsv(&bins));
    if let Some(p) = &a.bins {
        std::fs::write(p, bins_to_tsv(&bins))?;
    }
    Ok(())
}

/// `qid -> value` from a per-query TSV, skipping the `all` summary row.
fn read_per_query(path: &Path, metric: Option<&str>) -> Result<(String, BTreeMap<String, f64>), Failure> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| invalid(format!("{} is empty", path.display())))?
        .split('\t')
        .collect();
    if header.len() < 2 {
        return Err(invalid(format!("{}: expected qid and at least one metric column", path.display())));
    }
    let col = match metric {
        None => 1,
        Some(m) => {
            let want: Metric = m.parse().map_err(invalid)?;
            header
                .iter()
                .position(|h| h.parse::<Metric>().is_ok_and(|x| x == want))
                .ok_or_else(|| invalid(format!("{}: no {want} column", path.display())))?
        }
    };
    let mut out = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != header.len() {
            return Err(invalid(format!("{} line {}: wrong field count", path.display(), i + 2)));
        }
        if f[0] == "all" {
            continue;
        }
        let v: f64 = f[col]
            .parse()
            .map_err(|_| invalid(format!("{} line {}: bad value {:?}", path.display(), i + 2, f[col])))?;
        out.insert(f[0].to_string(), v);
    }
    Ok((header[col].to_string(), out))
}

fn sigtest(a: SigtestArgs) -> CmdResult {
    require_files(&[&a.a, &a.b])?;
    if a.bonferroni == 0 {
        return Err(invalid("--bonferroni must be at least 1"));
    }
    let (name, va) = read_per_query(&a.a, a.metric.as_deref())?;
    let (_, vb) = read_per_query(&a.b, a.metric.as_deref())?;
    if va.keys().ne(vb.keys()) {
        return Err(invalid("the two files cover different queries"));
    }
    let x: Vec<f64> = va.values().copied().collect();
    let y: Vec<f64> = vb.values().copied().collect();
    let t = paired_t_test(&x, &y).map_err(invalid)?;
    println!("metric        {name}");
    println!("queries       {}", x.len());
    println!("mean a        {:.6}", x.iter().sum::<f64>() / x.len() as f64);
    println!("mean b        {:.6}", y.iter().sum::<f64>() / y.len() as f64);
    println!("t             {:.6}", t.t);
    println!("df            {}", t.df);
    println!("p             {:.6e}", t.p);
    println!("p_bonferroni  {:.6e}  (m = {})", bonferroni(t.p, a.bonferroni), a.bonferroni);
    Ok(())
}

fn toy_corpus(a: ToyCorpusArgs) -> CmdResult {
    write_toy_corpus(&a.out, a.seed, &ToyConfig::default())?;
    println!("toy corpus written to {}", a.out.display());
    Ok(())
}

fn experiment(a: ExperimentArgs) -> CmdResult {
    require_files(&[&a.config])?;
    let mut overrides = Vec::new();
    if let Some(o) = &a.output {
        overrides.push(format!("paths.output={}", o.display()));
    }
    if let Some(s) = a.seed {
        overrides.push(format!("experiment.seed={s}"));
    }
    if let Some(m) = &a.models {
        overrides.push(format!("experiment.models={m}"));
    }
    if let Some(r) = a.replicas {
        overrides.push(format!("experiment.replicas={r}"));
    }
    if let Some(w) = a.workers {
        overrides.push(format!("experiment.workers={w}"));
    }
    overrides.extend(a.sets.iter().cloned());
    let cfg = ExperimentConfig::load(&a.config, &overrides).map_err(invalid)?;
    let outcome = run_experiment(&cfg).map_err(|e| {
        if e.is_validation() {
            invalid(e)
        } else {
            Failure::Runtime(e.into())
        }
    })?;
    let summary = std::fs::read_to_string(outcome.output.join("reports/summary.txt"))?;
    print!("{summary}");
    std::io::stdout().flush()?;
    Ok(())
}
