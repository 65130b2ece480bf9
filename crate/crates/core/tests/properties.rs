use proptest::prelude::*;

use hierfl::generalization::{update_all_levels, update_group_gmp, within_hull};
use hierfl::hierarchy::{distance, GroupNode, Hierarchy};
use hierfl::model::{loss, loss_gradient, predict, LabeledExample, ModelSpec};
use hierfl::specialized::{local_update, objective_gradient, objective_value, AncestorContext, LocalSolverConfig, ShufflePolicy};
use hierfl::{DatasetShard, MetaLawSchedule, ModelParams};

fn vec_of(dim: usize, scale: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-scale..scale, dim)
}

fn shard(features: usize, classes: usize) -> impl Strategy<Value = DatasetShard> {
    prop::collection::vec((vec_of(features, 3.0), 0..classes), 1..10)
        .prop_map(|rows| DatasetShard::new(0, rows.into_iter().map(|(features, label)| LabeledExample { features, label }).collect()))
}

fn params_cloud(n: std::ops::Range<usize>, dim: usize) -> impl Strategy<Value = Vec<ModelParams>> {
    prop::collection::vec(vec_of(dim, 5.0).prop_map(ModelParams), n)
}

fn sched() -> MetaLawSchedule {
    MetaLawSchedule { max_levels: 2, thresholds: vec![1.5, 4.0], ..Default::default() }
}

const SPEC: ModelSpec = ModelSpec { kind: hierfl::ModelKind::SoftmaxLinear, features: 3, classes: 3, hidden: 0 };

proptest! {
    #[test]
    fn loss_nonnegative_and_descends(w in vec_of(12, 2.0), s in shard(3, 3)) {
        let w = ModelParams(w);
        let l0 = loss(&SPEC, &w, &s).unwrap();
        prop_assert!(l0 >= 0.0);
        let g = loss_gradient(&SPEC, &w, &s).unwrap();
        let mut step = w.clone();
        step.axpy(-1e-4, &g);
        prop_assert!(loss(&SPEC, &step, &s).unwrap() <= l0 + 1e-12);
    }

    #[test]
    fn argmax_survives_positive_scaling(w in vec_of(12, 2.0), x in vec_of(3, 3.0), c in 0.1f64..10.0) {
        let w = ModelParams(w);
        let mut scaled = w.clone();
        scaled.iter_mut().for_each(|v| *v *= c);
        // ties can break differently after rounding, so only check clear winners
        let logits: Vec<f64> = (0..3).map(|k| {
            let b = &w[k * 4..k * 4 + 4];
            b[..3].iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + b[3]
        }).collect();
        let mut sorted = logits.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assume!(sorted[2] - sorted[1] > 1e-9);
        prop_assert_eq!(predict(&SPEC, &w, &x), predict(&SPEC, &scaled, &x));
    }

    #[test]
    fn distance_is_symmetric(a in vec_of(5, 5.0), b in vec_of(5, 5.0)) {
        let (a, b) = (ModelParams(a), ModelParams(b));
        prop_assert_eq!(distance(&a, &b).unwrap(), distance(&b, &a).unwrap());
        prop_assert_eq!(distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn objective_gradient_matches_differences(
        w in vec_of(12, 1.0),
        s in shard(3, 3),
        g1 in vec_of(12, 1.0),
        g2 in vec_of(12, 1.0),
        n1 in 1usize..10,
        n2 in 1usize..30,
        alpha in 0.1f64..1.0,
        beta in 0.0f64..1.0,
    ) {
        let w = ModelParams(w);
        let ctx = AncestorContext::new([(ModelParams(g1), n1), (ModelParams(g2), n2)]);
        let g = objective_gradient(&SPEC, &w, &s, &ctx, alpha, beta).unwrap();
        let h = 1e-5;
        for j in 0..w.dim() {
            let mut p = w.clone();
            p[j] += h;
            let mut m = w.clone();
            m[j] -= h;
            let fd = (objective_value(&SPEC, &p, &s, &ctx, alpha, beta).unwrap()
                - objective_value(&SPEC, &m, &s, &ctx, alpha, beta).unwrap()) / (2.0 * h);
            prop_assert!((fd - g[j]).abs() <= 1e-6 * (1.0 + g[j].abs()), "coordinate {}: {} vs {}", j, fd, g[j]);
        }
    }

    #[test]
    fn gmp_update_stays_in_hull(
        old in vec_of(4, 10.0),
        kids in prop::collection::vec((vec_of(4, 10.0), 1usize..6), 1..5),
        gamma in 0.0f64..=1.0,
    ) {
        let node = GroupNode {
            id: 0,
            level: 2,
            gmp: ModelParams(old),
            member_count: kids.iter().map(|k| k.1).sum(),
            children: vec![],
            parent: None,
        };
        let kids: Vec<(ModelParams, usize)> = kids.into_iter().map(|(p, c)| (ModelParams(p), c)).collect();
        let refs: Vec<(&ModelParams, usize)> = kids.iter().map(|(p, c)| (p, *c)).collect();
        let out = update_group_gmp(&node, &refs, gamma).unwrap();
        prop_assert!(within_hull(&out, &node.gmp, &refs));
    }

    #[test]
    fn child_weight_is_its_count_share(
        base in prop::collection::vec(1usize..6, 2..5),
        gamma in 0.0f64..=1.0,
        eps in -1.0f64..1.0,
    ) {
        let kids: Vec<ModelParams> = (0..base.len()).map(|i| ModelParams(vec![i as f64])).collect();
        let total: usize = base.iter().sum();
        let node = GroupNode { id: 0, level: 2, gmp: ModelParams(vec![0.5]), member_count: total, children: vec![], parent: None };
        let refs: Vec<(&ModelParams, usize)> = kids.iter().zip(&base).map(|(p, &c)| (p, c)).collect();
        let before = update_group_gmp(&node, &refs, gamma).unwrap()[0];
        let bumped = ModelParams(vec![kids[0][0] + eps]);
        let mut refs2 = refs.clone();
        refs2[0].0 = &bumped;
        let after = update_group_gmp(&node, &refs2, gamma).unwrap()[0];
        let expected = gamma * base[0] as f64 / total as f64 * eps;
        prop_assert!((after - before - expected).abs() < 1e-12);
    }

    #[test]
    fn operations_keep_the_hierarchy_valid(
        params in params_cloud(2..12, 2),
        extra in params_cloud(1..4, 2),
        drift in params_cloud(12..13, 2),
        t in 0usize..60,
    ) {
        let s = sched();
        let mut h = Hierarchy::build_initial(&params, &s).unwrap();
        prop_assert!(h.validate().is_ok());
        let mut all = params.clone();
        for (i, p) in all.iter_mut().enumerate() {
            p.axpy(0.3, &drift[i]);
        }
        h.adapt(&all, t, &s).unwrap();
        prop_assert!(h.validate().is_ok());
        h.eliminate_outliers(&all, &s).unwrap();
        prop_assert!(h.validate().is_ok());
        for p in extra {
            h.place_new_agent(all.len(), &p).unwrap();
            all.push(p);
            prop_assert!(h.validate().is_ok());
        }
        update_all_levels(&mut h, &all, 0.5).unwrap();
        prop_assert!(h.validate().is_ok());
        let level1: usize = h.level_nodes(1).iter().map(|&id| h.node(id).unwrap().member_count).sum();
        prop_assert_eq!(level1, all.len());
        prop_assert_eq!(h.root().unwrap().member_count, all.len());
    }

    #[test]
    fn placement_leaves_existing_members_alone(params in params_cloud(2..12, 2), newcomer in vec_of(2, 8.0)) {
        let mut h = Hierarchy::build_initial(&params, &sched()).unwrap();
        let before = h.level1_labels();
        h.place_new_agent(params.len(), &ModelParams(newcomer)).unwrap();
        let after = h.level1_labels();
        for (a, g) in before {
            prop_assert_eq!(after[&a], g);
        }
    }

    #[test]
    fn higher_resistance_moves_a_subset(params in params_cloud(4..12, 2), drift in params_cloud(12..13, 2)) {
        let s = sched();
        let h = Hierarchy::build_initial(&params, &s).unwrap();
        let moved: Vec<Vec<usize>> = [4usize, 12, 20].iter().map(|&t| {
            let mut hh = h.clone();
            let mut p = params.clone();
            for (i, q) in p.iter_mut().enumerate() {
                q.axpy(1.0, &drift[i]);
            }
            let mut m: Vec<usize> = hh.adapt(&p, t, &s).unwrap().into_iter().map(|c| c.agent).collect();
            m.sort_unstable();
            m
        }).collect();
        // all three are adaptation-stage rounds with rising resistance
        prop_assert!(moved[1].iter().all(|a| moved[0].contains(a)));
        prop_assert!(moved[2].iter().all(|a| moved[1].contains(a)));
    }

    #[test]
    fn larger_beta_pulls_closer_to_the_group(
        start in vec_of(12, 2.0),
        g in vec_of(12, 2.0),
        s in shard(3, 3),
        b1 in 0.05f64..0.5,
        extra in 0.01f64..1.0,
    ) {
        let ctx = AncestorContext::new([(ModelParams(g.clone()), 1)]);
        // run to convergence: the exact minimizer's distance to g is monotone in beta
        let cfg = LocalSolverConfig { epochs: 3000, batch_size: usize::MAX, learning_rate: 0.05, shuffle: ShufflePolicy::None };
        let start = ModelParams(start);
        let gmp = ModelParams(g);
        let w1 = local_update(&SPEC, &start, &s, &ctx, 1.0, b1, &cfg, 0).unwrap();
        let w2 = local_update(&SPEC, &start, &s, &ctx, 1.0, b1 + extra, &cfg, 0).unwrap();
        prop_assert!(distance(&w2, &gmp).unwrap() <= distance(&w1, &gmp).unwrap() + 1e-6);
    }
}
