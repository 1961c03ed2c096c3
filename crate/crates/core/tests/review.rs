use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use groov_core::corpus::{Corpus, Instance};
use groov_core::decoding::{Prediction, RankingMode, ScoredLabel};
use groov_core::exec::Exec;
use groov_core::metrics::{compute_propensities, evaluate, Embeddings, EvalConfig, MatchRule, Matcher};
use groov_core::review::{build_review_items, review_stats, ReviewStore};

fn prediction(id: &str, labels: &[String]) -> Prediction {
    Prediction {
        id: id.into(),
        ranking_mode: RankingMode::Marginal,
        predicted: labels
            .iter()
            .enumerate()
            .map(|(i, l)| ScoredLabel {
                label: l.clone(),
                score: 1.0 / (i + 1) as f64,
            })
            .collect(),
        beams: None,
    }
}

#[test]
fn hand_built_store_matches_hand_computed_table() {
    // c1..c3 embed like their gold label (semantic match), c4 and c5 do not.
    let test = Corpus::from_instances(
        (1..=5)
            .map(|i| Instance::new(format!("i{i}"), "t", vec![format!("g{i}")]))
            .collect(),
    );
    let preds: Vec<Prediction> = (1..=5).map(|i| prediction(&format!("i{i}"), &[format!("c{i}")])).collect();
    let mut pairs = Vec::new();
    for i in 1..=5 {
        let mut g = vec![0.0; 10];
        g[i - 1] = 1.0;
        let mut c = vec![0.0; 10];
        c[if i <= 3 { i - 1 } else { i + 4 }] = 1.0;
        pairs.push((format!("g{i}"), g));
        pairs.push((format!("c{i}"), c));
    }
    let emb = Embeddings::from_pairs(pairs).unwrap();
    let matcher = Matcher::new(MatchRule::Semantic { threshold: 0.94 }, Some(&emb)).unwrap();
    let seen = test.label_set();
    let items = build_review_items(&preds, &test, &seen, Some(&matcher)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("store.jsonl");
    let judgments = [(1, true, true), (2, true, false), (3, false, false), (4, true, true), (5, false, true)];
    let lines: Vec<String> = judgments
        .iter()
        .map(|(i, s, inf)| {
            format!(
                "{{\"instance_id\":\"i{i}\",\"label\":\"c{i}\",\"sensible\":{s},\"informative\":{inf},\"reviewer\":\"r\",\"timestamp\":{i}}}"
            )
        })
        .collect();
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    let (_, book, replay) = ReviewStore::open(&path, &items).unwrap();
    assert_eq!(replay.applied, 5);

    let stats = review_stats(&items, &book);
    let table: Vec<(&str, usize, Option<u32>, Option<u32>)> = stats
        .rows
        .iter()
        .map(|r| (r.semantic_match.as_str(), r.n_labels, r.sensible_pct, r.informative_pct))
        .collect();
    // yes: 2/3 sensible, 1/3 informative; no: 1/2, 2/2; total: 3/5, 3/5.
    assert_eq!(
        table,
        vec![
            ("yes", 3, Some(67), Some(33)),
            ("no", 2, Some(50), Some(100)),
            ("total", 5, Some(60), Some(60)),
        ]
    );
    assert_eq!(stats.coverage.reviewed, 5);
}

#[test]
fn served_candidates_match_the_offline_novel_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let pool: Vec<String> = (0..30).map(|i| format!("l{i}")).collect();
    let seen: BTreeSet<String> = pool[..15].iter().cloned().collect();
    let mut instances = Vec::new();
    let mut preds = Vec::new();
    for i in 0..200 {
        let id = format!("x{i:03}");
        let k = rng.gen_range(1..=3);
        let gold: Vec<String> = pool.choose_multiple(&mut rng, k).cloned().collect();
        instances.push(Instance::new(&id, "t", gold));
        if rng.gen_bool(0.9) {
            let n = rng.gen_range(0..=6);
            let ranked: Vec<String> = pool.choose_multiple(&mut rng, n).cloned().collect();
            preds.push(prediction(&id, &ranked));
        }
    }
    let test = Corpus::from_instances(instances);
    let items = build_review_items(&preds, &test, &seen, None).unwrap();
    let served: usize = items.values().map(|i| i.candidates.len()).sum();
    assert!(items.values().flat_map(|i| &i.candidates).all(|c| !seen.contains(&c.label)));

    let freq = seen.iter().map(|l| (l.clone(), 1)).collect();
    let prop = compute_propensities(&freq, 100, 0.55, 1.5).unwrap();
    let report = evaluate(&preds, &test, &seen, &prop, &EvalConfig::default(), None, Exec::Sequential).unwrap();
    assert_eq!(served, report.novel_predictions);
    assert!(served > 0);
}
