use proptest::prelude::*;

use seqmd::datasets::{FunnelLabels, InteractionRecord, Platform, QueryGroup, Task};
use seqmd::evaluation::{ndcg_for_task, ndcg_oracle, GainScheme, ndcg_from_gains, ndcg_oracle_gains};
use seqmd::models::{
    BaselineConfig, BaselineKind, BaselineModel, FeatureLayout, MdAdaptor, MdConfig, MdPlacement, RankingModel,
    SeqModel, SeqModelConfig,
};
use seqmd::tensorcore::Init;
use seqmd::{Graph, Tensor};

fn group(labels: &[(bool, bool, bool)]) -> QueryGroup {
    let records = labels
        .iter()
        .map(|&(c, a, p)| InteractionRecord {
            query_id: "q".into(),
            region: 0,
            platform: Platform::Web,
            listing_region: 0,
            x_user: vec![0.0],
            x_listing: vec![0.0],
            labels: FunnelLabels::new(c, c && a, c && a && p).unwrap(),
        })
        .collect();
    QueryGroup::new("q", 0, Platform::Web, records).unwrap()
}

fn funnel() -> impl Strategy<Value = (bool, bool, bool)> {
    (any::<bool>(), any::<bool>(), any::<bool>())
}

fn seq_model(k: usize, d: usize, seed: u64) -> SeqModel<f64> {
    SeqModel::new(
        SeqModelConfig {
            tasks: Task::standard(k).unwrap(),
            input_dim: d,
            hidden: 6,
            ..Default::default()
        },
        seed,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn descending_probs_are_cumulative_products(
        k in 2usize..=3,
        seed in 0u64..1000,
        xs in prop::collection::vec(-50.0f64..50.0, 4 * 5),
    ) {
        let m = seq_model(k, 5, seed);
        let x = Tensor::matrix(4, 5, xs).unwrap();
        for row in seqmd::models::predict(&m, &x).unwrap() {
            let mut cum = 1.0;
            for t in 0..k {
                cum *= 1.0 / (1.0 + (-row.logits[t]).exp());
                prop_assert!((row.probs[t] - cum).abs() <= 1e-12);
                if t > 0 {
                    prop_assert!(row.probs[t] <= row.probs[t - 1]);
                }
            }
        }
    }

    #[test]
    fn ndcg_matches_exhaustive_oracle(
        rows in prop::collection::vec((funnel(), -3i32..3), 1..=6),
        depth in 1usize..8,
        task in prop::sample::select(Task::FUNNEL.to_vec()),
    ) {
        let labels: Vec<_> = rows.iter().map(|r| r.0).collect();
        // small integer scores produce ties
        let scores: Vec<f64> = rows.iter().map(|r| r.1 as f64).collect();
        let g = group(&labels);
        let fast = ndcg_for_task(&g, &scores, task, depth).unwrap();
        let slow = ndcg_oracle(&g, &scores, task, depth).unwrap();
        match (fast, slow) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}"),
            (a, b) => prop_assert_eq!(a, b),
        }
    }

    #[test]
    fn graded_ndcg_matches_oracle(
        rows in prop::collection::vec((funnel(), -1.0f64..1.0), 1..=6),
        depth in 1usize..8,
    ) {
        let labels: Vec<_> = rows.iter().map(|r| r.0).collect();
        let scores: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let g = group(&labels);
        let gains = GainScheme::Graded.gains(&g, Task::Purchase);
        let fast = ndcg_from_gains(&gains, &scores, depth).unwrap();
        let slow = ndcg_oracle_gains(&gains, &scores, depth).unwrap();
        match (fast, slow) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-12),
            (a, b) => prop_assert_eq!(a, b),
        }
    }

    #[test]
    fn ndcg_invariant_under_monotone_transform(
        rows in prop::collection::vec((funnel(), -5.0f64..5.0), 1..=12),
        scale in 0.1f64..10.0,
        shift in -3.0f64..3.0,
    ) {
        let labels: Vec<_> = rows.iter().map(|r| r.0).collect();
        let scores: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let moved: Vec<f64> = scores.iter().map(|s| (s * scale + shift).exp()).collect();
        let g = group(&labels);
        for task in Task::FUNNEL {
            prop_assert_eq!(
                ndcg_for_task(&g, &scores, task, 48).unwrap(),
                ndcg_for_task(&g, &moved, task, 48).unwrap()
            );
        }
    }

    #[test]
    fn ndcg_invariant_under_candidate_order(
        rows in prop::collection::vec((funnel(), -5.0f64..5.0), 1..=12),
        seed in any::<u64>(),
    ) {
        use rand::{seq::SliceRandom, SeedableRng};
        let mut perm = rows.clone();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let split = |r: &[((bool, bool, bool), f64)]| {
            (group(&r.iter().map(|x| x.0).collect::<Vec<_>>()), r.iter().map(|x| x.1).collect::<Vec<f64>>())
        };
        let (g1, s1) = split(&rows);
        let (g2, s2) = split(&perm);
        for task in Task::FUNNEL {
            // continuous scores are distinct, so tie-breaking never matters
            let a = ndcg_for_task(&g1, &s1, task, 48).unwrap();
            let b = ndcg_for_task(&g2, &s2, task, 48).unwrap();
            match (a, b) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-12),
                (a, b) => prop_assert_eq!(a, b),
            }
            if let Some(v) = a {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
            }
        }
    }

    #[test]
    fn mask_width_equals_dependent_count(
        assignment in prop::collection::vec(0u8..3, 3..12),
        hidden in prop::collection::vec(1usize..6, 0..2),
        in_sequence in any::<bool>(),
    ) {
        let mut layout = FeatureLayout { country_idx: vec![], dependent_idx: vec![], invariant_idx: vec![] };
        for (i, a) in assignment.iter().enumerate() {
            match a {
                0 => layout.country_idx.push(i),
                1 => layout.dependent_idx.push(i),
                _ => layout.invariant_idx.push(i),
            }
        }
        prop_assume!(!layout.country_idx.is_empty() && !layout.dependent_idx.is_empty());
        let placement = if in_sequence { MdPlacement::InSequence } else { MdPlacement::InputPlug };
        let tasks = Task::standard(3).unwrap();
        let cfg = MdConfig { placement, layout: layout.clone(), mask_hidden: hidden, ..Default::default() };
        let a = MdAdaptor::<f64>::new(&Init::new(1), cfg, &tasks).unwrap();
        prop_assert_eq!(a.masks().len(), if in_sequence { 3 } else { 1 });
        let d = layout.input_dim();
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, d, vec![0.5; 2 * d]).unwrap()).unwrap();
        let (_, country, _) = a.split_input(&mut g, x).unwrap();
        for m in a.masks() {
            prop_assert_eq!(m.d_out(), layout.dependent_idx.len());
            let out = m.forward(&mut g, country).unwrap();
            prop_assert_eq!(g.value(out).shape(), &[2, layout.dependent_idx.len()][..]);
        }
    }

    #[test]
    fn gates_are_distributions(
        kind in prop::sample::select(vec![BaselineKind::Mlmmoe, BaselineKind::Ple, BaselineKind::AdattSp]),
        seed in 0u64..500,
        xs in prop::collection::vec(-20.0f64..20.0, 3 * 6),
    ) {
        let m = BaselineModel::<f64>::new(
            BaselineConfig { expert_widths: vec![4, 3], tower_hidden: vec![4], ..BaselineConfig::new(kind, Task::FUNNEL.to_vec(), 6) },
            seed,
        )
        .unwrap();
        let weights = m.gate_weights(&Tensor::matrix(3, 6, xs).unwrap()).unwrap();
        prop_assert!(!weights.is_empty());
        for (name, w) in weights {
            let (n, e) = w.dims2().unwrap();
            for r in 0..n {
                let row: Vec<f64> = (0..e).map(|c| w.at(r, c)).collect();
                prop_assert!(row.iter().all(|v| *v >= 0.0), "{name}");
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12, "{name}");
            }
        }
    }

    #[test]
    fn plugged_output_shape_matches_inner(
        kind in prop::sample::select(BaselineKind::ALL.to_vec()),
        n in 1usize..6,
    ) {
        let layout = FeatureLayout { country_idx: vec![0, 1], dependent_idx: vec![2, 3], invariant_idx: vec![4, 5, 6] };
        let base = BaselineConfig { expert_widths: vec![4, 3], tower_hidden: vec![4], ..BaselineConfig::new(kind, Task::FUNNEL.to_vec(), 7) };
        let md = MdConfig { placement: MdPlacement::InputPlug, layout, ..Default::default() };
        let plain = BaselineModel::<f64>::new(base.clone(), 0).unwrap();
        let plugged = seqmd::models::PluggedModel::<f64>::build(&base, &md, 0).unwrap();
        prop_assert_eq!(plain.input_dim(), plugged.input_dim());
        let x = Tensor::matrix(n, 7, vec![0.3; n * 7]).unwrap();
        let a = seqmd::models::predict(&plain, &x).unwrap();
        let b = seqmd::models::predict(&plugged, &x).unwrap();
        prop_assert_eq!(a.len(), b.len());
        prop_assert!(a.iter().zip(&b).all(|(p, q)| p.probs.len() == q.probs.len()));
    }
}
