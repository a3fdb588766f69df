use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use stepalign::losses::Direction;
use stepalign::metrics::{auroc, average_index_error, recall_at_k, summarize_retrieval, top1_accuracy, RetrievalQuery};

fn query_strategy() -> impl Strategy<Value = RetrievalQuery> {
    (1usize..12).prop_flat_map(|n| {
        (
            prop::collection::vec(prop::sample::select(vec![-1.0, -0.5, 0.0, 0.25, 0.5, 1.0]), n),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_map(move |(scores, pos)| {
                let pool: Vec<String> = (0..n).map(|i| format!("c{i:02}")).collect();
                let positives: BTreeSet<String> = pool
                    .iter()
                    .zip(&pos)
                    .filter(|(_, &p)| p)
                    .map(|(id, _)| id.clone())
                    .collect();
                RetrievalQuery::new(Direction::I2V, "q", pool, scores, positives).unwrap()
            })
    })
}

proptest! {
    #[test]
    fn auroc_ignores_monotone_transforms(q in query_strategy(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let mut t = q.clone();
        t.scores = q.scores.iter().map(|s| (a * s + b).exp()).collect();
        prop_assert!((auroc(&q) - auroc(&t)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&auroc(&q)));
    }

    #[test]
    fn recall_does_not_drop_with_k(q in query_strategy()) {
        let mut last = false;
        for k in 1..=q.pool.len() + 1 {
            match recall_at_k(&q, k) {
                None => prop_assert!(!q.has_positives()),
                Some(hit) => {
                    prop_assert!(hit || !last);
                    last = hit;
                }
            }
        }
        if q.has_positives() {
            prop_assert!(last);
        }
    }

    #[test]
    fn zero_index_error_iff_perfect(
        pairs in prop::collection::vec((1usize..8, 1usize..8), 1..40),
    ) {
        let (preds, gts): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let top1 = top1_accuracy(&preds, &gts).unwrap();
        let aie = average_index_error(&preds, &gts).unwrap();
        prop_assert!((0.0..=100.0).contains(&top1));
        prop_assert!(aie >= 0.0);
        prop_assert_eq!(aie == 0.0, top1 == 100.0);
    }

    #[test]
    fn metrics_ignore_query_order(
        queries in prop::collection::vec(query_strategy(), 1..10),
        pairs in prop::collection::vec((1usize..8, 1usize..8), 1..40),
        seed in any::<u64>(),
    ) {
        let mut r = stepalign::rng::rng(seed);
        let mut shuffled = queries.clone();
        shuffled.shuffle(&mut r);
        let a = summarize_retrieval(&queries);
        let b = summarize_retrieval(&shuffled);
        prop_assert_eq!(a.queries, b.queries);
        prop_assert_eq!(a.r1, b.r1);
        prop_assert_eq!(a.r3, b.r3);
        prop_assert!((a.auroc.unwrap() - b.auroc.unwrap()).abs() < 1e-12);

        let mut p2 = pairs.clone();
        p2.shuffle(&mut r);
        let (p, g): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let (p2, g2): (Vec<usize>, Vec<usize>) = p2.into_iter().unzip();
        prop_assert_eq!(top1_accuracy(&p, &g).unwrap(), top1_accuracy(&p2, &g2).unwrap());
        prop_assert!((average_index_error(&p, &g).unwrap() - average_index_error(&p2, &g2).unwrap()).abs() < 1e-12);
    }
}

fn ranked(scores: &[f64], positive: usize) -> RetrievalQuery {
    let pool: Vec<String> = (0..scores.len()).map(|i| format!("c{i}")).collect();
    let positives = [pool[positive].clone()].into_iter().collect();
    RetrievalQuery::new(Direction::I2V, "q", pool, scores.to_vec(), positives).unwrap()
}

#[test]
fn recall_examples() {
    assert_eq!(recall_at_k(&ranked(&[0.9, 0.1, 0.2], 0), 1), Some(true));
    assert_eq!(recall_at_k(&ranked(&[0.9, 0.8, 0.7, 0.1, 0.2], 2), 3), Some(true));
    assert_eq!(recall_at_k(&ranked(&[0.9, 0.8, 0.7, 0.3, 0.2], 3), 3), Some(false));
}

#[test]
fn auroc_examples() {
    assert_eq!(auroc(&ranked(&[0.9, 0.1, 0.2], 0)), 1.0);
    assert_eq!(auroc(&ranked(&[0.5, 0.5], 0)), 0.5);
    let none = RetrievalQuery::new(Direction::I2V, "q", vec!["a".into()], vec![0.3], BTreeSet::new()).unwrap();
    assert_eq!(auroc(&none), 0.0);
}

#[test]
fn unlabeled_segments_are_pool_negatives_only() {
    use stepalign::data::{parse_manifest, Granularity, Split};
    use stepalign::metrics::{evaluate_granularity, i2v_queries, VideoScores};
    let ds = parse_manifest(
        r#"{
      "manuals": [{"manual_id": "m", "furniture_id": "f",
        "steps": [{"diagram_id": "s1", "index": 1}, {"diagram_id": "s2", "index": 2}]}],
      "videos": [{"video_id": "v", "manual_id": "m", "duration": 30.0, "segments": [
        {"segment_id": "a", "t_start": 0.0, "t_end": 10.0, "gt_step_index": 1},
        {"segment_id": "talk", "t_start": 10.0, "t_end": 20.0},
        {"segment_id": "b", "t_start": 20.0, "t_end": 30.0, "gt_step_index": 2}]}],
      "splits": {"test": ["v"]}
    }"#,
    )
    .unwrap();
    let scores = ndarray::arr2(&[[0.9, 0.1], [0.95, 0.2], [0.1, 0.8]]);
    let videos = [VideoScores {
        video_id: "v".into(),
        segments: vec!["a".into(), "talk".into(), "b".into()],
        assignment: vec![1, 1, 2],
        scores,
    }];
    let m = evaluate_granularity(&ds, Split::Test, Granularity::Step, &videos).unwrap();
    assert_eq!(m.segments, 2);
    assert_eq!(m.top1, 100.0);
    let queries = i2v_queries(&ds, Split::Test, Granularity::Step, &videos).unwrap();
    assert_eq!(queries[0].pool.len(), 3);
    // The unlabeled segment outranks the true match for the first diagram.
    assert_eq!(recall_at_k(&queries[0], 1), Some(false));
    assert_eq!(auroc(&queries[0]), 0.5);
}
