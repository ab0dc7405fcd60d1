use std::collections::{BTreeMap, HashMap};

use typodr::dense_index::{encode_texts, DenseIndex};
use typodr::encoder::{EncoderConfig, FrontEnd, Role};
use typodr::eval::{mrr_drop_rate, per_query_metrics, Metric, RunFile};
use typodr::sparse::{Bm25Params, InvertedIndex};
use typodr::toy::{make_toy_corpus, ToyConfig};
use typodr::training::{build_training_set, train_new, LossMode, TrainConfig};
use typodr::typo_gen::{generate_replicas, TypoConfig};

fn run_from(tag: &str, results: Vec<(String, Vec<(String, f32)>)>) -> RunFile {
    let mut run = RunFile::new(tag);
    for (q, r) in results {
        run.insert(&q, r.into_iter().map(|(p, s)| (p, s as f64)).collect());
    }
    run
}

#[test]
fn toy_corpus_through_bm25_training_and_dense_search() {
    let toy = make_toy_corpus(
        4,
        &ToyConfig {
            passages: 40,
            queries: 12,
            train_queries_per_passage: 1,
            inventory: 120,
            ..ToyConfig::default()
        },
    );
    let index = InvertedIndex::build(&toy.collection, None).unwrap();
    let bm25 = index.search_all(&toy.queries, 10, Bm25Params::default()).unwrap();
    let mut sparse = RunFile::new("bm25");
    for (q, r) in &bm25 {
        sparse.insert(q, r.iter().map(|(p, s)| (p.clone(), *s)).collect());
    }
    let sparse_mrr = per_query_metrics(&sparse, &toy.qrels, &[Metric::RR(10)], 1).mean(Metric::RR(10));
    assert!(sparse_mrr > 0.9, "bm25 MRR@10 {sparse_mrr}");

    let negatives: BTreeMap<String, Vec<String>> = index
        .search_all(&toy.train_queries, 20, Bm25Params::default())
        .unwrap()
        .into_iter()
        .map(|(q, r)| (q, r.into_iter().map(|x| x.0).collect()))
        .collect();
    let passages: HashMap<String, String> = toy.collection.iter().cloned().collect();
    let samples = build_training_set(&toy.train_queries, &toy.train_qrels, &negatives, &passages, 2, 1);
    // queries whose BM25 list has fewer than two non-relevant hits are skipped
    assert!(samples.len() > toy.train_queries.len() * 9 / 10);
    assert!(samples.len() <= toy.train_queries.len());
    assert!(samples.iter().all(|s| s.negs.len() == 2 && s.negs.iter().all(|n| n.pid != s.pos.pid)));

    let encoder = EncoderConfig {
        front_end: FrontEnd::CharCnn,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 16,
        ..EncoderConfig::default()
    };
    let train = TrainConfig {
        mode: LossMode::St,
        batch_size: 4,
        hard_negatives: 2,
        total_updates: 20,
        warmup_updates: 2,
        seed: 8,
        ..TrainConfig::default()
    };
    let typo = TypoConfig::default();
    let out = train_new(&samples, encoder, None, &train, &typo).unwrap();
    assert_eq!(out.losses.len(), 20);
    assert!(out.losses.iter().all(|l| l.is_finite()));

    let dense = DenseIndex::encode_collection(&out.model, &toy.collection, 1).unwrap();
    assert_eq!(dense.len(), toy.collection.len());
    assert!(dense.check_model(&out.model));
    let search = |queries: &[(String, String)]| -> RunFile {
        let vecs = encode_texts(&out.model, queries, Role::Query, 1).unwrap();
        let results = queries
            .iter()
            .zip(vecs)
            .map(|((q, _), v)| (q.clone(), dense.search(&v.unwrap(), 10).unwrap()))
            .collect();
        run_from("dense", results)
    };
    let clean = per_query_metrics(&search(&toy.queries), &toy.qrels, &[Metric::RR(10)], 1).values(Metric::RR(10));
    assert_eq!(clean.len(), toy.queries.len());

    let replica = &generate_replicas(&toy.queries, 1, &typo, 3).unwrap()[0];
    let typo_queries: Vec<(String, String)> = replica.iter().map(|p| (p.query_id.clone(), p.typo_text.clone())).collect();
    assert!(replica.iter().all(|p| p.typo_text != p.clean_text));
    let typo_rr = per_query_metrics(&search(&typo_queries), &toy.qrels, &[Metric::RR(10)], 1).values(Metric::RR(10));
    let drop = mrr_drop_rate(&clean, &typo_rr).unwrap();
    assert!(drop.is_finite() && drop <= 1.0, "{drop}");
}
