mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use recloop_core::corpus::ItemId;
use recloop_core::protocol::parse_trajectory;
use recloop_core::retrieval::{PreferenceVector, VectorSource};
use recloop_core::rewards::{
    point_from_similarities, reward_diversity, reward_hit, reward_invocation, reward_rank, score_trajectory,
};

#[test]
fn generated_trajectories_match_reference_scorer() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let k = 5;
    let fx = random_fixture(&mut rng, 400, 16, 0, k);
    let env = &fx.env;
    let catalog = env.catalog();
    let mut invalid = 0;
    for _ in 0..300 {
        let label = ItemId(rng.gen_range(0..400));
        let g = gen_episode(&mut rng, catalog, k, label, 0.6);
        let (traj, report) = parse_trajectory(&g.text, catalog, k);
        assert_eq!(report.overall_ok, g.format_ok, "{}", g.text);
        assert_eq!(traj.m, g.preferences.len());
        assert_eq!(traj.final_items, g.final_items);
        let prefs: Vec<Vec<f32>> = g
            .preferences
            .iter()
            .map(|p| env.retriever().embed_text(p).unwrap().values)
            .collect();
        let want = reference_rewards(&g, label, &fx.collab, &fx.text, &prefs, 3, k, 0.2);
        let got = score_trajectory(&traj, &report, label, env.retriever(), &env.rewards).unwrap();
        let got = [
            got.format,
            got.invocation,
            got.diversity,
            got.point,
            got.hit,
            got.rank,
            got.cold_total,
            got.rec_total,
        ];
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() <= 1e-9, "{got:?} vs {want:?}");
        }
        invalid += usize::from(!g.format_ok);
    }
    assert!(invalid > 50);
}

fn pv(values: Vec<f32>) -> PreferenceVector {
    PreferenceVector {
        values,
        source: VectorSource::ExternalFile,
    }
}

#[test]
fn closed_form_points() {
    let ids = |v: &[u32]| v.iter().copied().map(ItemId).collect::<Vec<_>>();
    let list = ids(&[4, 7, 1, 9, 2, 8, 0, 3, 6, 5]);
    assert!((reward_rank(&list, ItemId(4), 10, 0.2) - 2.0).abs() < 1e-12);
    assert!((reward_rank(&list, ItemId(1), 10, 0.2) - 1.6).abs() < 1e-12);
    assert!((reward_rank(&list, ItemId(5), 10, 0.2) - 0.2).abs() < 1e-12);
    assert_eq!(reward_rank(&list, ItemId(11), 10, 0.2), 0.0);
    assert_eq!(reward_hit(&list, ItemId(9)), 1.0);
    assert_eq!(reward_hit(&list, ItemId(11)), 0.0);

    assert_eq!(reward_invocation(0, 3), 0.0);
    assert_eq!(reward_invocation(1, 3), 0.0);
    assert_eq!(reward_invocation(2, 3), 0.5);
    assert_eq!(reward_invocation(3, 3), 1.0);
    assert_eq!(reward_invocation(4, 3), 1.0);

    let same = vec![pv(vec![1.0, 0.0]), pv(vec![1.0, 0.0])];
    assert!(reward_diversity(&same).abs() < 1e-12);
    let orth = vec![pv(vec![1.0, 0.0]), pv(vec![0.0, 1.0])];
    assert!((reward_diversity(&orth) - 1.0).abs() < 1e-12);
    let opposite = vec![pv(vec![1.0, 0.0]), pv(vec![-1.0, 0.0])];
    assert!((reward_diversity(&opposite) - 2.0).abs() < 1e-12);
    assert_eq!(reward_diversity(&same[..1]), 0.0);

    // weights 4, 1 over a two-item list
    let p = point_from_similarities(&[(1.0, 0.5), (0.0, 0.0)]);
    assert!((p - (4.0 * 1.5) / (2.0 * 5.0)).abs() < 1e-12);
    assert_eq!(point_from_similarities(&[(1.0, 1.0); 10]), 1.0);
}
