mod common;

use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use recloop_core::corpus::{InteractionSequence, ItemId, Split, SplitSample};
use recloop_core::eval::{evaluate_retriever, evaluate_trajectories, metrics_from_ranks};
use recloop_core::retrieval::{EmbeddingKind, EmbeddingMatrix, HashedEmbedder, HistoryEncoder, IndexConfig};
use recloop_core::retrieval::{RetrievalIndex, Retriever};

/// Ten items on a circle: item `i` sits at angle `i * 10` degrees, so a
/// query at angle 0 ranks items by id.
fn circle_retriever() -> Retriever {
    let rows: Vec<Vec<f32>> = (0..10)
        .map(|i| {
            let a = (i as f64 * 10.0).to_radians();
            vec![a.cos() as f32, a.sin() as f32]
        })
        .collect();
    let index = RetrievalIndex::new(
        Arc::new(titled_catalog(10)),
        EmbeddingMatrix::from_rows(EmbeddingKind::Collaborative, &rows).unwrap(),
        EmbeddingMatrix::from_rows(EmbeddingKind::Textual, &rows).unwrap(),
        IndexConfig::default(),
    )
    .unwrap();
    Retriever::new(Arc::new(index), Arc::new(HashedEmbedder::new(2)), HistoryEncoder::DecayedMean, false).unwrap()
}

#[test]
fn label_at_rank_three_scores_half() {
    let retriever = circle_retriever();
    // history of item 0 alone; label item 2 sits third (0, 1, 2)
    let sample = SplitSample {
        history: InteractionSequence::new("u", vec![ItemId(0)]),
        label: ItemId(2),
        split: Split::Test,
        difficulty_rank: None,
    };
    let report = evaluate_retriever(&retriever, &[sample], &[1, 3, 5]).unwrap();
    assert_eq!(report.at[&1].recall, 0.0);
    assert_eq!(report.at[&3].recall, 1.0);
    assert!((report.at[&5].ndcg - 0.5).abs() < 1e-12);
    assert!((report.at[&3].ndcg - 0.5).abs() < 1e-12);
}

#[test]
fn metrics_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    for _ in 0..50 {
        let ranks: Vec<Option<usize>> = (0..rng.gen_range(1..200))
            .map(|_| rng.gen_bool(0.8).then(|| rng.gen_range(1..40)))
            .collect();
        let ks = [1, 5, 10, 20];
        let got = metrics_from_ranks(&ranks, &ks);
        for k in ks {
            let (r, n) = brute_metrics(&ranks, k);
            assert!((got[&k].recall - r).abs() < 1e-12);
            assert!((got[&k].ndcg - n).abs() < 1e-12);
        }
    }
}

#[test]
fn trajectory_metrics_only_count_valid_lists() {
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let k = 5;
    let fx = random_fixture(&mut rng, 300, 8, 0, k);
    let catalog = fx.env.catalog();
    let mut results = Vec::new();
    let mut ranks = Vec::new();
    for _ in 0..200 {
        let label = ItemId(rng.gen_range(0..300));
        let g = gen_episode(&mut rng, catalog, k, label, 0.7);
        let (trajectory, report) = recloop_core::protocol::parse_trajectory(&g.text, catalog, k);
        let rewards = recloop_core::rewards::score_trajectory(&trajectory, &report, label, fx.env.retriever(), &fx.env.rewards)
            .unwrap();
        ranks.push(if g.format_ok {
            g.final_items.iter().position(|&i| i == label).map(|p| p + 1)
        } else {
            None
        });
        results.push(recloop_core::EpisodeResult {
            label,
            trajectory,
            report,
            rewards,
            truncated: false,
        });
    }
    let report = evaluate_trajectories(&results, &[1, 5]);
    for k in [1, 5] {
        let (r, n) = brute_metrics(&ranks, k);
        assert!((report.at[&k].recall - r).abs() < 1e-12);
        assert!((report.at[&k].ndcg - n).abs() < 1e-12);
    }
    assert_eq!(report.n_samples, 200);
}

proptest! {
    #[test]
    fn larger_cutoffs_never_score_lower(ranks in prop::collection::vec(prop::option::of(1usize..50), 1..100)) {
        let m = metrics_from_ranks(&ranks, &[1, 5, 10, 20]);
        for (a, b) in [(1, 5), (5, 10), (10, 20)] {
            prop_assert!(m[&a].recall <= m[&b].recall);
            prop_assert!(m[&a].ndcg <= m[&b].ndcg);
            prop_assert!(m[&a].ndcg <= m[&a].recall);
        }
    }
}
