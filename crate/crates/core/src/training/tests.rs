use super::*;
use crate::encoder::{EncoderConfig, FrontEnd};
use crate::rng::rng_from_seed;
use approx::assert_abs_diff_eq;
use proptest::prelude::*;

fn sample_with(qid: &str, pos: &str, negs: &[&str]) -> TrainingSample {
    let p = |id: &str| Passage {
        pid: id.to_string(),
        text: format!("passage {id}"),
    };
    TrainingSample {
        qid: qid.to_string(),
        query: format!("query {qid}"),
        pos: p(pos),
        negs: negs.iter().map(|n| p(n)).collect(),
    }
}

fn uniform_batch(b: usize, h: usize) -> Vec<TrainingSample> {
    (0..b)
        .map(|i| {
            let negs: Vec<String> = (0..h).map(|j| format!("n{i}_{j}")).collect();
            let refs: Vec<&str> = negs.iter().map(String::as_str).collect();
            sample_with(&i.to_string(), &format!("p{i}"), &refs)
        })
        .collect()
}

#[test]
fn candidate_arithmetic() {
    assert_eq!(candidate_count(16, 7), 128);
    assert_eq!(candidate_count(1, 7), 8);
    assert_eq!(candidate_count(2, 1), 4);
    let c = assemble_candidates(&uniform_batch(16, 7));
    assert!(c.iter().all(|l| l.len() == 128));
    let c = assemble_candidates(&uniform_batch(2, 1));
    assert_eq!(c, vec![vec![0, 1, 2, 3], vec![2, 3, 0, 1]]);
}

proptest! {
    #[test]
    fn candidate_sets_are_permutations(b in 1usize..12, h in 0usize..9) {
        let batch = uniform_batch(b, h);
        let lists = assemble_candidates(&batch);
        let total = b * (h + 1);
        for (i, l) in lists.iter().enumerate() {
            prop_assert_eq!(l.len(), candidate_count(b, h));
            prop_assert_eq!(l[0], i * (h + 1));
            let mut sorted = l.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..total).collect::<Vec<_>>());
        }
    }

    #[test]
    fn softmax_sums_to_one(scores in prop::collection::vec(-1e4f64..1e4, 1..64)) {
        let p = softmax_normalize(&scores);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&x| x >= 0.0 && x.is_finite()));
    }

    #[test]
    fn ce_is_shift_invariant(scores in prop::collection::vec(-50f64..50.0, 2..32), c in -1e3f64..1e3) {
        let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
        prop_assert!((ce_loss(&scores, 0) - ce_loss(&shifted, 0)).abs() < 1e-9);
    }

    #[test]
    fn kl_is_non_negative(a in prop::collection::vec(-5f64..5.0, 2..16), seed in 0u64..1000) {
        let mut rng = rng_from_seed(seed);
        let b: Vec<f64> = a.iter().map(|_| rng.random::<f64>() * 10.0 - 5.0).collect();
        let (p, q) = (softmax_normalize(&a), softmax_normalize(&b));
        prop_assert!(kl_loss(&p, &q) >= -1e-15);
        prop_assert!(kl_loss(&p, &p).abs() <= 1e-12);
    }
}

#[test]
fn loss_examples() {
    assert_eq!(softmax_normalize(&[0.0; 4]), vec![0.25; 4]);
    let p = softmax_normalize(&[2f64.ln(), 0.0]);
    assert_abs_diff_eq!(p[0], 2.0 / 3.0, epsilon = 1e-15);
    assert_abs_diff_eq!(p[1], 1.0 / 3.0, epsilon = 1e-15);
    let a = softmax_normalize(&[0.3, -1.0, 2.0]);
    let b = softmax_normalize(&[1000.3, 999.0, 1002.0]);
    for (x, y) in a.iter().zip(&b) {
        assert_abs_diff_eq!(x, y, epsilon = 1e-12);
    }
    for m in [2usize, 5, 128] {
        assert_abs_diff_eq!(ce_loss(&vec![0.7; m], 0), (m as f64).ln(), epsilon = 1e-12);
    }
    assert_abs_diff_eq!(ce_loss(&[2.0, 0.0], 0), (1.0 + (-2f64).exp()).ln(), epsilon = 1e-15);
    assert_abs_diff_eq!(ce_loss(&[2.0, 0.0], 0), 0.126928, epsilon = 1e-6);
    let mut prev = f64::INFINITY;
    for s in [0.0, 1.0, 5.0, 20.0, 100.0] {
        let l = ce_loss(&[s, 0.0, 0.5], 0);
        assert!(l < prev && l >= 0.0);
        prev = l;
    }
    assert_abs_diff_eq!(kl_loss(&[0.5, 0.5], &[0.9, 0.1]), 0.5 * (5.0f64 / 9.0).ln() + 0.5 * 5f64.ln(), epsilon = 1e-15);
    assert_abs_diff_eq!(kl_loss(&[0.5, 0.5], &[0.9, 0.1]), 0.510826, epsilon = 1e-6);
}

#[test]
fn score_gradients_match_differences() {
    let s = [0.4, -1.2, 2.0, 0.1];
    let target = softmax_normalize(&[1.0, 0.0, -0.5, 0.3]);
    let (_, gc) = ce_loss_grad(&s, 1);
    let target_log: Vec<f64> = target.iter().map(|x| x.ln()).collect();
    let (lk, gk) = kl_loss_grad(&s, &target_log);
    assert_abs_diff_eq!(lk, kl_loss(&softmax_normalize(&s), &target), epsilon = 1e-14);
    let h = 1e-6;
    for j in 0..4 {
        let mut up = s;
        let mut down = s;
        up[j] += h;
        down[j] -= h;
        assert_abs_diff_eq!(gc[j], (ce_loss(&up, 1) - ce_loss(&down, 1)) / (2.0 * h), epsilon = 1e-8);
        let f = |x: &[f64]| kl_loss(&softmax_normalize(x), &target);
        assert_abs_diff_eq!(gk[j], (f(&up) - f(&down)) / (2.0 * h), epsilon = 1e-8);
    }
}

fn qrels_single(rows: &[(&str, &str)]) -> Qrels {
    let mut q = Qrels::new();
    for (a, b) in rows {
        q.insert(a, b, 1).unwrap();
    }
    q
}

#[test]
fn training_set_negatives() {
    let ranking: Vec<String> = (0..200).map(|i| format!("d{i}")).collect();
    let passages: HashMap<String, String> = ranking.iter().map(|p| (p.clone(), format!("text {p}"))).collect();
    let bm25 = BTreeMap::from([("q1".to_string(), ranking.clone()), ("q2".to_string(), ranking[..3].to_vec())]);
    let queries = vec![
        ("q1".to_string(), "first".to_string()),
        ("q2".to_string(), "second".to_string()),
        ("q3".to_string(), "unjudged".to_string()),
    ];
    let qrels = qrels_single(&[("q1", "d17"), ("q2", "d0")]);
    let set = build_training_set(&queries, &qrels, &bm25, &passages, 7, 3);
    // q2 has only 2 negatives left, q3 has no judgments
    assert_eq!(set.len(), 1);
    let s = &set[0];
    assert_eq!(s.pos.pid, "d17");
    assert_eq!(s.negs.len(), 7);
    let mut ids: Vec<&str> = s.negs.iter().map(|n| n.pid.as_str()).collect();
    assert!(!ids.contains(&"d17"));
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 7);
    assert_eq!(build_training_set(&queries, &qrels, &bm25, &passages, 7, 3), set);
    let zero = build_training_set(&queries, &qrels, &bm25, &passages, 0, 3);
    assert_eq!(zero.len(), 2);
    assert!(zero.iter().all(|s| s.negs.is_empty()));
    assert!(matches!(
        sample_negatives("q", &ranking[..3], &["d0"], 7, &mut rng_from_seed(0)),
        Err(TrainError::InsufficientNegatives { available: 2, .. })
    ));
}

#[test]
fn negatives_are_uniform() {
    let ranking: Vec<String> = (0..10).map(|i| i.to_string()).collect();
    let mut counts = [0usize; 10];
    let mut rng = rng_from_seed(11);
    for _ in 0..20_000 {
        for n in sample_negatives("q", &ranking, &["3"], 3, &mut rng).unwrap() {
            counts[n.parse::<usize>().unwrap()] += 1;
        }
    }
    assert_eq!(counts[3], 0);
    // each of the 9 candidates is drawn with probability 1/3 per query
    for (i, &c) in counts.iter().enumerate() {
        if i != 3 {
            assert!((c as f64 / 20_000.0 - 1.0 / 3.0).abs() < 0.015, "{i}: {c}");
        }
    }
}

#[test]
fn jsonl_roundtrip() {
    let set = uniform_batch(3, 2);
    let mut buf = Vec::new();
    write_training_set(&mut buf, &set).unwrap();
    let first = String::from_utf8(buf.clone()).unwrap();
    assert!(first.starts_with(r#"{"qid":"0","query":"query 0","pos":{"pid":"p0","text":"passage p0"},"negs":[{"pid":"#));
    assert_eq!(read_training_set(&buf[..]).unwrap(), set);
    assert!(matches!(read_training_set("{".as_bytes()), Err(TrainError::Parse { line: 1, .. })));
}

#[test]
fn augmentation_rates() {
    let typo = TypoConfig::default();
    let qs: Vec<(String, String)> = (0..10_000).map(|i| (i.to_string(), "retrieval systems matter".to_string())).collect();
    let mut rng = rng_from_seed(1);
    assert!(aug_transform(&qs[..100], 0.0, &typo, &mut rng)
        .unwrap()
        .iter()
        .zip(&qs)
        .all(|(a, q)| a == &q.1));
    assert!(aug_transform(&qs[..100], 1.0, &typo, &mut rng)
        .unwrap()
        .iter()
        .zip(&qs)
        .all(|(a, q)| a != &q.1));
    let half = aug_transform(&qs, 0.5, &typo, &mut rng).unwrap();
    let frac = half.iter().zip(&qs).filter(|(a, q)| *a != &q.1).count() as f64 / qs.len() as f64;
    assert!((0.48..=0.52).contains(&frac), "{frac}");
    let stop_only = vec![("x".to_string(), "the of and".to_string())];
    assert_eq!(aug_transform(&stop_only, 1.0, &typo, &mut rng).unwrap(), vec!["the of and".to_string()]);
}

fn tiny_model(front_end: FrontEnd, seed: u64) -> EncoderModel<f64> {
    let cfg = EncoderConfig {
        front_end,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 12,
        char_dim: 4,
        max_word_len: 10,
        filters: vec![(1, 3), (2, 3), (3, 4)],
        highway_layers: 1,
        tied_encoders: true,
    };
    let mut m = EncoderModel::<f64>::init(cfg, Some(crate::encoder::tests::tiny_vocab()), seed).unwrap();
    crate::encoder::tests::perturbed(&mut m, seed + 1, 0.2);
    m
}

fn tiny_batch() -> BatchTexts {
    let mut b = uniform_batch(2, 1);
    b[0].query = "cat information".into();
    b[1].query = "dog retrieval".into();
    b[0].pos.text = "information about cats".into();
    b[0].negs[0].text = "dogs".into();
    b[1].pos.text = "retrieval of dogs".into();
    b[1].negs[0].text = "a cat".into();
    BatchTexts::from_samples(&b, Some(vec!["cat infromation".into(), "dgo retrieval".into()]))
}

#[test]
fn st_with_identical_typo_equals_ce() {
    let m = tiny_model(FrontEnd::Lookup, 2);
    let mut batch = tiny_batch();
    batch.typo_queries = Some(batch.queries.clone());
    let opts = ObjectiveOptions::default();
    let st = batch_objective(&m, &batch, Objective::St, opts, None).unwrap();
    let ce = batch_objective(&m, &batch, Objective::Ce, opts, None).unwrap();
    assert_eq!(st.loss, ce.loss);
    let kl = batch_objective(&m, &batch, Objective::Kl, opts, None).unwrap();
    assert!(kl.loss.abs() < 1e-15);
}

#[test]
fn st_is_ce_plus_kl() {
    for fe in [FrontEnd::Lookup, FrontEnd::CharCnn] {
        let m = tiny_model(fe, 3);
        let batch = tiny_batch();
        let opts = ObjectiveOptions::default();
        let st = batch_objective(&m, &batch, Objective::St, opts, None).unwrap();
        // independent recomputation from encodings
        let enc = |t: &str, r| m.encode(t, r).unwrap();
        let mut want = 0.0;
        for i in 0..2 {
            let q = enc(&batch.queries[i], Role::Query);
            let qt = enc(&batch.typo_queries.as_ref().unwrap()[i], Role::Query);
            let ps: Vec<Vec<f64>> = batch.candidates[i].iter().map(|&c| enc(&batch.passages[c], Role::Passage)).collect();
            let s: Vec<f64> = ps.iter().map(|p| crate::encoder::score(&q, p).unwrap()).collect();
            let st_: Vec<f64> = ps.iter().map(|p| crate::encoder::score(&qt, p).unwrap()).collect();
            want += ce_loss(&s, 0) + kl_loss(&softmax_normalize(&st_), &softmax_normalize(&s));
        }
        assert_abs_diff_eq!(st.loss, want / 2.0, epsilon = 1e-10);
        // stop-gradient: nothing flows into the clean queries from the KL term
        let kl = batch_objective(&m, &batch, Objective::Kl, opts, None).unwrap();
        assert!(kl.clean_query_upstream.iter().flatten().all(|&g| g == 0.0));
        let no_sg = ObjectiveOptions {
            stop_gradient: false,
            ..opts
        };
        let kl2 = batch_objective(&m, &batch, Objective::Kl, no_sg, None).unwrap();
        assert!(kl2.clean_query_upstream.iter().flatten().any(|&g| g != 0.0));
    }
}

#[test]
fn gradients_match_finite_differences() {
    for fe in [FrontEnd::Lookup, FrontEnd::CharCnn] {
        let m = tiny_model(fe, 5);
        for obj in [Objective::Ce, Objective::Kl, Objective::St] {
            let r = finite_difference_check(&m, &tiny_batch(), obj, 120, 1e-4, 1e-6, 9).unwrap();
            assert!(r.max_relative_error < 1e-4, "{fe} {obj:?}: {r:?}");
        }
    }
}

#[test]
fn schedule_and_config() {
    let c = TrainConfig {
        learning_rate: 1.0,
        total_updates: 10,
        ..TrainConfig::default()
    };
    assert_eq!(c.learning_rate_at(0), 1.0);
    assert_abs_diff_eq!(c.learning_rate_at(5), 0.5, epsilon = 1e-15);
    assert_abs_diff_eq!(c.learning_rate_at(9), 0.1, epsilon = 1e-15);
    let w = TrainConfig {
        warmup_updates: 4,
        ..c.clone()
    };
    assert_eq!(w.learning_rate_at(0), 0.25);
    assert_eq!(w.learning_rate_at(3), 1.0);
    assert_eq!(w.learning_rate_at(4), 1.0);
    assert_abs_diff_eq!(w.learning_rate_at(7), 0.5, epsilon = 1e-15);
    let mut bad = TrainConfig::default();
    bad.set("p_aug", "1.5").unwrap();
    assert!(bad.validate().is_err());
    assert!(bad.set("learning_rate", "x").is_err());
    assert!(bad.set("nope", "1").is_err());
    let mut c2 = TrainConfig::default();
    for (k, v) in c.to_kv() {
        c2.set(&k, &v).unwrap();
    }
    assert_eq!(c2, c);
}

#[test]
fn adamw_first_step() {
    let cfg = EncoderConfig {
        front_end: FrontEnd::CharCnn,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        ..EncoderConfig::default()
    };
    let mut m = EncoderModel::<f32>::init(cfg, None, 0).unwrap();
    let before = m.clone();
    let mut g = m.zero_gradients();
    for t in g.iter_mut() {
        t.data.fill(0.5);
    }
    let mut opt = AdamW::new(&m, 0.1);
    opt.step(&mut m, &g, 0.01);
    for ((name, a), b) in m.names().iter().zip(m.params()).zip(before.params()) {
        for (x, y) in a.data.iter().zip(&b.data) {
            // first step moves by lr · m̂/(√v̂ + eps) = lr · sign(g), plus decay
            let decay = if is_no_decay(name) { 0.0 } else { 0.01 * 0.1 * y };
            assert!((x - (y - decay - 0.01)).abs() < 1e-6, "{name}");
        }
    }
}

fn toy_samples() -> Vec<TrainingSample> {
    let words = ["apple", "river", "stone", "cloud", "maple", "tiger", "piano", "lemon"];
    (0..8)
        .map(|i| {
            let p = |j: usize| Passage {
                pid: format!("{j}"),
                text: format!("{} {} story", words[j], words[(j + 3) % 8]),
            };
            TrainingSample {
                qid: format!("q{i}"),
                query: format!("{} {}", words[i], words[(i + 3) % 8]),
                pos: p(i),
                negs: vec![p((i + 1) % 8)],
            }
        })
        .collect()
}

#[test]
fn training_is_deterministic_and_zero_steps_is_identity() {
    let cfg = EncoderConfig {
        front_end: FrontEnd::CharCnn,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        ..EncoderConfig::default()
    };
    let tc = TrainConfig {
        mode: LossMode::St,
        batch_size: 4,
        hard_negatives: 1,
        total_updates: 6,
        seed: 3,
        ..TrainConfig::default()
    };
    let typo = TypoConfig::default();
    let init = EncoderModel::<f32>::init(cfg.clone(), None, 3).unwrap();
    let zero = TrainConfig {
        total_updates: 0,
        ..tc.clone()
    };
    assert_eq!(train(&toy_samples(), init.clone(), &zero, &typo).unwrap().model, init);
    let a = train_new(&toy_samples(), cfg.clone(), None, &tc, &typo).unwrap();
    let b = train_new(&toy_samples(), cfg.clone(), None, &tc, &typo).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.losses.len(), 6);
    assert_ne!(a.model, init);
    for mode in [LossMode::Ce, LossMode::Aug] {
        let t = TrainConfig { mode, ..tc.clone() };
        assert!(train_new(&toy_samples(), cfg.clone(), None, &t, &typo).is_ok());
    }
    let mut trace = Vec::new();
    write_loss_trace(&mut trace, &a.losses, 4).unwrap();
    assert_eq!(String::from_utf8(trace).unwrap().lines().count(), 3);
}

#[test]
fn exploding_learning_rate_reports_step() {
    let cfg = EncoderConfig {
        front_end: FrontEnd::CharCnn,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        ..EncoderConfig::default()
    };
    let tc = TrainConfig {
        batch_size: 4,
        hard_negatives: 1,
        total_updates: 50,
        learning_rate: 1e30,
        ..TrainConfig::default()
    };
    match train_new(&toy_samples(), cfg, None, &tc, &TypoConfig::default()) {
        Err(TrainError::NonFiniteLoss { step }) => assert!(step < 50),
        other => panic!("expected a non-finite loss, got {:?}", other.map(|o| o.losses)),
    }
}
