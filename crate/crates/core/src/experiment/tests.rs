use super::*;
use crate::typo_gen::TypoKind;

fn small_toy() -> ToyConfig {
    ToyConfig {
        passages: 60,
        queries: 20,
        train_queries_per_passage: 1,
        inventory: 150,
        ..ToyConfig::default()
    }
}

fn small_config(dir: &Path) -> ExperimentConfig {
    write_toy_corpus(dir, 5, &small_toy()).unwrap();
    let overrides: Vec<String> = [
        "experiment.replicas=2",
        "experiment.models=ce-lookup,st-charcnn",
        "encoder.d_model=16",
        "encoder.d_ff=32",
        "encoder.n_heads=2",
        "train.total_updates=12",
        "train.warmup_updates=2",
        "eval.trend_pair=ce-lookup,st-charcnn",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    ExperimentConfig::load(dir.join("experiment.toml"), &overrides).unwrap()
}

#[test]
fn model_names() {
    let m = ModelSpec::parse("st-charcnn").unwrap();
    assert_eq!((m.mode, m.front_end, m.untied), (LossMode::St, FrontEnd::CharCnn, false));
    assert!(!m.needs_vocab());
    let u = ModelSpec::parse("aug-untied").unwrap();
    assert!(u.untied && u.needs_vocab());
    assert!(!u.encoder_config(&EncoderConfig::default()).tied_encoders);
    for bad in ["st", "xx-lookup", "ce-bert"] {
        assert!(ModelSpec::parse(bad).unwrap_err().is_validation(), "{bad}");
    }
}

#[test]
fn validation_happens_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    write_toy_corpus(dir.path(), 1, &small_toy()).unwrap();
    let mut cf = ConfigFile::load(dir.path().join("experiment.toml")).unwrap();
    let mut missing = cf.clone();
    missing.remove("paths", "qrels");
    let err = ExperimentConfig::from_config(&missing, dir.path()).unwrap_err();
    assert!(err.is_validation());
    assert!(err.to_string().contains("qrels"), "{err}");
    assert!(!dir.path().join("out").exists());

    cf.set("paths", "qrels", "nope.txt");
    let err = ExperimentConfig::from_config(&cf, dir.path()).unwrap_err();
    assert!(err.to_string().contains("does not exist"), "{err}");

    for (s, k, v) in [
        ("train", "mode", "st"),
        ("train", "bogus", "1"),
        ("encoder", "front_end", "lookup"),
        ("experiment", "replicas", "0"),
        ("experiment", "models", "ce-lookup,ce-lookup"),
        ("eval", "baseline", "st-untied"),
        ("nosuch", "x", "1"),
    ] {
        let mut c = ConfigFile::load(dir.path().join("experiment.toml")).unwrap();
        c.set(s, k, v);
        assert!(ExperimentConfig::from_config(&c, dir.path()).unwrap_err().is_validation(), "{s}.{k}");
    }
}

#[test]
fn seed_reaches_every_component() {
    let dir = tempfile::tempdir().unwrap();
    write_toy_corpus(dir.path(), 1, &small_toy()).unwrap();
    let cfg = ExperimentConfig::load(dir.path().join("experiment.toml"), &["experiment.seed=77".into()]).unwrap();
    assert_eq!((cfg.seed, cfg.typo.seed, cfg.train.seed), (77, 77, 77));
    let a = cfg.canonical();
    let cfg2 = ExperimentConfig::load(dir.path().join("experiment.toml"), &["experiment.seed=78".into()]).unwrap();
    assert_ne!(a, cfg2.canonical());
}

#[test]
fn trends_and_reversal() {
    let row = |bin, d: f64, c| BinRow {
        bin,
        count: 10,
        delta_mrr: Some(d),
        cosine_mean: c,
        cosine_sd: 0.0,
    };
    let rising: Vec<BinRow> = (1..=5).map(|b| row(b, 0.1 * b as f64, 1.0 - 0.1 * b as f64)).collect();
    let t = bin_trend(&rising);
    assert!((t.spearman_delta - 1.0).abs() < 1e-12 && (t.spearman_cosine + 1.0).abs() < 1e-12);
    assert!((t.slope_delta - 0.1).abs() < 1e-12 && (t.slope_cosine + 0.1).abs() < 1e-12);
    assert_eq!(trend_reversed(&t, &t), (false, false));
    let falling: Vec<BinRow> = (1..=5).map(|b| row(b, 0.5 - 0.1 * b as f64, 0.5 + 0.1 * b as f64)).collect();
    assert_eq!(trend_reversed(&t, &bin_trend(&falling)), (true, true));
    // same sign but much flatter
    let flat: Vec<BinRow> = (1..=5).map(|b| row(b, 0.01 * b as f64, 1.0 - 0.01 * b as f64)).collect();
    assert_eq!(trend_reversed(&t, &bin_trend(&flat)), (true, true));
    // bins without a defined Δ are left out of the Δ trend only
    let mut holes = rising.clone();
    holes[2].delta_mrr = None;
    let th = bin_trend(&holes);
    assert!((th.spearman_delta - 1.0).abs() < 1e-12);
    assert!(bin_trend(&rising[..1]).spearman_delta.is_nan());
}

#[test]
fn missing_queries_count_as_zero() {
    let mut qrels = Qrels::new();
    qrels.insert("1", "a", 1).unwrap();
    qrels.insert("2", "b", 1).unwrap();
    let mut run = RunFile::new("x");
    run.insert("1", vec![("a".into(), 1.0)]);
    let rep = per_query_metrics(&run, &qrels, &[Metric::RR(10)], 1);
    let full = complete_report(rep, &["1".into(), "2".into(), "3".into()], &qrels);
    assert_eq!(full.per_query.len(), 2);
    assert_eq!(full.mean(Metric::RR(10)), 0.5);
}

#[test]
fn pair_measures_join_replicas() {
    let vocab = crate::toy::corpus_vocab(["alpha beta"]);
    let pair = |q: &str, typo: &str| QueryPair {
        query_id: q.into(),
        clean_text: "alpha beta".into(),
        typo_text: typo.into(),
        word_index: 0,
        kind: TypoKind::RandInsert,
    };
    let replicas = vec![vec![pair("1", "alpxha beta"), pair("2", "alpha beta")], vec![pair("1", "alpha betx")]];
    let clean = BTreeMap::from([("1".to_string(), 1.0), ("2".to_string(), 0.5)]);
    let typo = vec![
        BTreeMap::from([("1".to_string(), 0.5), ("2".to_string(), 0.5)]),
        BTreeMap::from([("1".to_string(), 0.25)]),
    ];
    let cos = vec![BTreeMap::from([("1".to_string(), 0.9)]), BTreeMap::new()];
    let m = pair_measures(&clean, &typo, &replicas, &vocab, Some(&cos));
    assert_eq!(m.len(), 3);
    assert_eq!((m[0].rr_clean, m[0].rr_typo, m[0].cosine), (1.0, 0.5, 0.9));
    assert!(m[0].difference >= 1);
    assert_eq!(m[1].difference, 0);
    assert!(m[2].cosine.is_nan());
    assert_eq!(m[2].rr_typo, 0.25);
}

fn reports(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.join("reports")];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn small_experiment_runs_resumes_and_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    let first = run_experiment(&cfg).unwrap();
    let out = first.output.clone();
    for f in [
        "models/ce-lookup.tgdr",
        "models/st-charcnn.tgdr",
        "indexes/st-charcnn.tgdx",
        "runs/bm25/typo_02.trec",
        "runs/st-charcnn/clean.trec",
        "runs/st-charcnn/typo_01.trec",
        "reports/metrics.tsv",
        "reports/bins/ce-lookup.tsv",
        "reports/significance.tsv",
        "reports/summary.txt",
        MANIFEST,
    ] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let metrics = std::fs::read_to_string(out.join("reports/metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 2 * 3);
    assert!(first.manifest.checks.contains_key("trend.robust_reversed"));
    assert_eq!(first.manifest.stages.len(), 3 + 3 * 2 + 1);
    let before = reports(&out);
    let manifest_text = std::fs::read(out.join(MANIFEST)).unwrap();

    // nothing changed: every stage is skipped and nothing is rewritten
    let model_mtime = std::fs::metadata(out.join("models/ce-lookup.tgdr")).unwrap().modified().unwrap();
    run_experiment(&cfg).unwrap();
    assert_eq!(
        std::fs::metadata(out.join("models/ce-lookup.tgdr")).unwrap().modified().unwrap(),
        model_mtime
    );
    assert_eq!(std::fs::read(out.join(MANIFEST)).unwrap(), manifest_text);

    // a deleted downstream artifact is rebuilt identically
    std::fs::remove_file(out.join("indexes/st-charcnn.tgdx")).unwrap();
    std::fs::remove_file(out.join("reports/drop.tsv")).unwrap();
    run_experiment(&cfg).unwrap();
    assert_eq!(reports(&out), before);
    assert_eq!(std::fs::read(out.join(MANIFEST)).unwrap(), manifest_text);

    // a fresh directory reproduces the reports byte for byte
    cfg.paths.output = dir.path().join("again");
    let again = run_experiment(&cfg).unwrap();
    assert_eq!(reports(&again.output), before);
    assert_eq!(again.manifest, first.manifest);
}

#[test]
fn stage_failure_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.train.hard_negatives = 500;
    cfg.train.bm25_depth = 1000;
    let err = run_experiment(&cfg).unwrap_err();
    assert!(!err.is_validation());
    match err {
        ExperimentError::Stage { stage, .. } => assert_eq!(stage, "train:ce-lookup"),
        other => panic!("{other}"),
    }
    // earlier stages were recorded and are reused after the fix
    let m = Manifest::load(&cfg.paths.output.join(MANIFEST)).unwrap();
    assert_eq!(m.stages.iter().map(|s| s.name.as_str()).collect::<Vec<_>>(), ["typos", "bm25", "trainset"]);
}
