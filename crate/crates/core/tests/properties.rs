//! Property tests over the public API.

use std::collections::BTreeSet;
use std::sync::Arc;

use frameoracle::backends::{AgentBackend, PlantedAgent, PlantedConfig, PlantedWorld};
use frameoracle::harness::io::{decode_embeddings, encode_embeddings};
use frameoracle::harness::{dataset_stats, select, EmbeddingDtype};
use frameoracle::objectives::{class_target, kstar_from_losses, pairwise_labels, ranknet_loss, zscore};
use frameoracle::pipeline::{
    choose_segment, deepen, dense_anchors, filter_keyframes, initial_probe, mine, MiningConfig, PromptTemplates,
};
use frameoracle::selector::{init_params, SelectorConfig};
use frameoracle::tensor::Matrix;
use frameoracle::types::{AnnotatedExample, CandidateSet, KDistribution, PromptEncoding, ScoreVector};
use proptest::prelude::*;

fn scores(n: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0..5.0f64, n)
}

fn mining_world() -> Arc<PlantedWorld> {
    Arc::new(PlantedWorld::generate(PlantedConfig::mining(21, 40)).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ranknet_ignores_a_common_shift(y in scores(2..=10), c in -50.0..50.0f64, seed in any::<u64>()) {
        let teacher: Vec<f64> = (0..y.len()).map(|i| ((seed >> (i % 60)) & 3) as f64).collect();
        let labels = pairwise_labels(&ScoreVector::new(teacher).unwrap());
        let shifted: Vec<f64> = y.iter().map(|v| v + c).collect();
        let a = ranknet_loss(&ScoreVector::new(y).unwrap(), &labels).unwrap();
        let b = ranknet_loss(&ScoreVector::new(shifted).unwrap(), &labels).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
    }

    #[test]
    fn class_target_is_a_distribution_peaked_at_k_star(k_max in 1usize..40, pick in 0.0..1.0f64, sigma in 0.1..10.0f64) {
        let k_star = 1 + ((k_max - 1) as f64 * pick) as usize;
        let t = class_target(k_star, k_max, sigma).unwrap();
        let sum: f64 = t.probs().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert_eq!(t.argmax(), k_star);
    }

    #[test]
    fn zscores_are_centred(v in scores(1..=20)) {
        let z = zscore(&v);
        let mean: f64 = z.iter().sum::<f64>() / z.len() as f64;
        prop_assert!(mean.abs() < 1e-9);
    }

    #[test]
    fn k_star_is_on_the_grid_and_affine_invariant(
        losses in scores(1..=16),
        lambda in 0.0..0.1f64,
        a in 0.5..4.0f64,
        b in -10.0..10.0f64,
    ) {
        let grid: Vec<usize> = (1..=losses.len()).collect();
        let k = kstar_from_losses(&grid, &losses, lambda).unwrap();
        prop_assert!(grid.contains(&k));
        let moved: Vec<f64> = losses.iter().map(|l| a * l + b).collect();
        let k2 = kstar_from_losses(&grid, &moved, lambda).unwrap();
        if k2 != k {
            // only a float-level near tie may flip the choice
            let z = zscore(&losses);
            let gap = (z[k - 1] + lambda * k as f64) - (z[k2 - 1] + lambda * k2 as f64);
            prop_assert!(gap.abs() < 1e-9);
        }
    }

    #[test]
    fn dense_anchors_stay_inside_and_avoid_visited(
        start in 0usize..60,
        width in 2usize..40,
        visited in prop::collection::btree_set(0usize..64, 0..20),
        count in 1usize..6,
    ) {
        let end = (start + width).min(63);
        prop_assume!(end > start + 1);
        let picks = dense_anchors(start, end, &visited, count);
        let free = (start + 1..end).filter(|i| !visited.contains(i)).count();
        prop_assert_eq!(picks.len(), free.min(count));
        prop_assert!(picks.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(picks.iter().all(|p| *p > start && *p < end && !visited.contains(p)));
    }

    #[test]
    fn selection_respects_count_and_order(seed in 0u64..1000, n in 1usize..=16, t in 1usize..=4) {
        let cfg = SelectorConfig::compact(4, 4, 8);
        let params = init_params(&cfg, seed).unwrap();
        let vals: Vec<f64> = (0..n * 4 + t * 4).map(|i| ((i as u64 * 7919 + seed) % 97) as f64 / 48.0 - 1.0).collect();
        let frames = CandidateSet::uniform("v", Matrix::from_vec(n, 4, vals[..n * 4].to_vec()), 1000, 25.0).unwrap();
        let prompt = PromptEncoding::new("q", Matrix::from_vec(t, 4, vals[n * 4..].to_vec())).unwrap();
        let sel = select(&params, &frames, &prompt).unwrap();
        prop_assert!(sel.chosen_k() >= 1 && sel.chosen_k() <= n.min(8));
        prop_assert_eq!(sel.selected_indices().len(), sel.chosen_k());
        prop_assert!(sel.selected_indices().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn logits_give_distributions(logits in scores(1..=16)) {
        let d = KDistribution::from_logits(&logits).unwrap();
        prop_assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(d.expectation() >= 1.0 && d.expectation() <= logits.len() as f64);
    }

    #[test]
    fn dataset_stats_ignore_record_order(counts in prop::collection::vec(1usize..40, 1..60), rot in 0usize..60) {
        let records: Vec<AnnotatedExample> = counts
            .iter()
            .enumerate()
            .map(|(i, &k)| AnnotatedExample {
                id: i as u64,
                question: "q".into(),
                ground_truth_answer: "a".into(),
                video: format!("{i}.mp4"),
                keyframes_dir: format!("kf/{i}"),
                duration: 10.0 + i as f64,
                num_selected_frames: k,
                keyframe_indices: None,
            })
            .collect();
        let mut permuted = records.clone();
        permuted.reverse();
        let r = rot % permuted.len();
        permuted.rotate_left(r);
        prop_assert_eq!(dataset_stats(&records).unwrap(), dataset_stats(&permuted).unwrap());
    }

    #[test]
    fn embedding_files_round_trip(rows in 1usize..10, cols in 1usize..10, seed in any::<u32>()) {
        let data: Vec<f64> = (0..rows * cols).map(|i| ((i as u32).wrapping_mul(2654435761) ^ seed) as f64 / 1e6).collect();
        let m = Matrix::from_vec(rows, cols, data);
        let back = decode_embeddings(&encode_embeddings(&m, EmbeddingDtype::F64).unwrap()).unwrap();
        prop_assert_eq!(back, m);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn exploration_only_grows_and_nests(id in 0u64..40, flip in 0.0..0.3f64) {
        let world = mining_world();
        let agent = PlantedAgent::new(world.clone()).with_flip_prob(flip);
        let record = world.task_record(id).unwrap();
        let cfg = MiningConfig::default();
        let templates = PromptTemplates::default();
        let duration = world.example(id).unwrap().duration_s;
        let mut state = initial_probe(&record, duration, &agent as &dyn AgentBackend, &templates, &cfg).unwrap();
        for _ in 0..cfg.max_iterations {
            let before = state.visited();
            let gap = choose_segment(&state);
            if !deepen(&mut state, &agent, &templates, &cfg).unwrap() {
                prop_assert!(gap.is_none());
                break;
            }
            let gap = gap.unwrap();
            prop_assert_eq!(state.current_segment(), gap);
            let after = state.visited();
            prop_assert!(after.is_superset(&before) && after.len() > before.len());
            prop_assert!(after.difference(&before).all(|i| *i > gap.0 && *i < gap.1));
            for w in state.segments.windows(2) {
                prop_assert!(w[0].0 <= w[1].0 && w[1].1 <= w[0].1);
            }
        }
        prop_assert!(state.trajectory.violations().is_empty());
    }

    #[test]
    fn filtered_keyframes_are_visited_and_relevant(id in 0u64..40, lambda in 1u8..=5) {
        let world = mining_world();
        let agent = PlantedAgent::new(world.clone());
        let record = world.task_record(id).unwrap();
        let out = mine(&record, 60.0, &agent, &PromptTemplates::default(), &MiningConfig::default()).unwrap();
        let kept = filter_keyframes(&out.trajectory, lambda);
        let visited: BTreeSet<usize> = out.trajectory.visited.keys().copied().collect();
        prop_assert!(kept.iter().all(|k| visited.contains(k)));
        prop_assert!(kept.iter().all(|k| out.trajectory.relevance(*k).unwrap() >= lambda));
        prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
    }
}
