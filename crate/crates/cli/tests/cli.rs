use std::path::Path;
use std::process::{Command, Output};

fn typodr(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_typodr"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

#[test]
fn sparse_pipeline_from_toy_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ok = |args: &[&str]| {
        let out = typodr(args, d);
        assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    ok(&["toy-corpus", "--out", "toy", "--seed", "3"]);
    for f in ["collection.tsv", "queries.tsv", "qrels.txt", "vocab.txt", "experiment.toml"] {
        assert!(d.join("toy").join(f).is_file(), "{f}");
    }
    ok(&["typo-gen", "--queries", "toy/queries.tsv", "--replicas", "2", "--seed", "4", "--out-dir", "typos"]);
    let r1 = std::fs::read_to_string(d.join("typos/replica_01.tsv")).unwrap();
    assert_eq!(r1.lines().count(), 200);

    ok(&["bm25-index", "--collection", "toy/collection.tsv", "--out", "bm25.idx"]);
    ok(&["bm25-search", "--index", "bm25.idx", "--queries", "toy/queries.tsv", "--out", "clean.trec", "--k", "10"]);
    let table = ok(&["eval", "--run", "clean.trec", "--qrels", "toy/qrels.txt", "--metrics", "mrr@10"]);
    assert!(table.contains("RR@10"), "{table}");

    // the same typo files are produced again for the same seed
    ok(&["typo-gen", "--queries", "toy/queries.tsv", "--replicas", "2", "--seed", "4", "--out-dir", "typos2"]);
    assert_eq!(std::fs::read(d.join("typos2/replica_01.tsv")).unwrap(), r1.into_bytes());
}

#[test]
fn exit_codes_separate_bad_input_from_failures() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&typodr(&["no-such-command"], d)), 2);
    assert_eq!(code(&typodr(&["eval", "--run", "missing.trec", "--qrels", "missing.txt"], d)), 2);
    assert_eq!(code(&typodr(&["experiment", "--config", "missing.toml"], d)), 2);

    std::fs::write(d.join("queries.tsv"), "1\thello world\n").unwrap();
    std::fs::write(d.join("broken.idx"), b"not an index").unwrap();
    let out = typodr(&["bm25-search", "--index", "broken.idx", "--queries", "queries.tsv", "--out", "x.trec"], d);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}
