//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.

mod common;

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hierfl::config::RunConfig;
use hierfl::data::{generate_population, AgentData, PopulationConfig};
use hierfl::engine::{run, run_fedavg_baseline, Simulation};
use hierfl::eval::adjusted_rand_index;
use hierfl::generalization::{update_all_levels, update_group_gmp, within_hull};
use hierfl::hierarchy::{distance, GroupNode, Hierarchy};
use hierfl::model::{accuracy, init_params, LabeledExample, ModelSpec};
use hierfl::report::metrics_csv;
use hierfl::specialized::{local_update, objective_gradient, objective_value, AncestorContext, LocalSolverConfig, ShufflePolicy};
use hierfl::{DatasetShard, ModelParams};

use common::{benchmark, SEEDS};

const FD_INSTANCES: usize = 120;
const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-5;
const GMP_FIXTURE_TOL: f64 = 1e-12;
const HULL_INSTANCES: usize = 1000;
const FEDAVG_TOL: f64 = 1e-10;
const PROX_TOL: f64 = 1e-6;
/// Full-batch steps given to the pure proximal solve (learning rate 0.1,
/// beta 1, at most 3 ancestor levels with counts in 1..=10).
const PROX_STEP_BUDGET: usize = 1000;
const FUZZ_ROUNDS: usize = 200;
const ONBOARD_ROUND: usize = 40;
const ONBOARD_WINDOW: usize = 10;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn random_shard(rng: &mut ChaCha8Rng, owner: usize, features: usize, classes: usize, n: usize) -> DatasetShard {
    let examples = (0..n)
        .map(|_| LabeledExample {
            features: (0..features).map(|_| rng.random_range(-2.0..2.0)).collect(),
            label: rng.random_range(0..classes),
        })
        .collect();
    DatasetShard::new(owner, examples)
}

fn random_params(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> ModelParams {
    ModelParams((0..dim).map(|_| rng.random_range(-scale..scale)).collect())
}

fn random_context(rng: &mut ChaCha8Rng, dim: usize, max_count: usize) -> AncestorContext {
    let levels = rng.random_range(1..=3);
    AncestorContext::new((0..levels).map(|_| (random_params(rng, dim, 1.0), rng.random_range(1..=max_count))))
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for i in 0..FD_INSTANCES {
        let features = rng.random_range(1..=5);
        let classes = rng.random_range(2..=4);
        let spec = if i % 2 == 0 {
            ModelSpec::softmax(features, classes)
        } else {
            ModelSpec::hidden_layer(features, classes, rng.random_range(1..=4))
        };
        let n = rng.random_range(1..=12);
        let shard = random_shard(&mut rng, i, features, classes, n);
        let w = random_params(&mut rng, spec.dim(), 1.0);
        let ctx = random_context(&mut rng, spec.dim(), 20);
        let alpha = rng.random_range(0.05..1.0);
        let beta = rng.random_range(0.0..1.0);
        let g = objective_gradient(&spec, &w, &shard, &ctx, alpha, beta).unwrap();
        let mut fd = vec![0.0; g.len()];
        for j in 0..g.len() {
            let mut plus = w.clone();
            plus[j] += FD_STEP;
            let mut minus = w.clone();
            minus[j] -= FD_STEP;
            let fp = objective_value(&spec, &plus, &shard, &ctx, alpha, beta).unwrap();
            let fm = objective_value(&spec, &minus, &shard, &ctx, alpha, beta).unwrap();
            fd[j] = (fp - fm) / (2.0 * FD_STEP);
        }
        let diff: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(fd.iter().map(|v| v * v).sum::<f64>().sqrt()).max(1e-8);
        worst = worst.max(diff / scale);
    }
    outcome(worst < FD_REL_TOL, format!("{FD_INSTANCES} instances, worst relative error {worst:.2e}"))
}

fn criterion_2() -> Outcome {
    let node = GroupNode { id: 0, level: 2, gmp: ModelParams(vec![0.0, 0.0]), member_count: 4, children: vec![], parent: None };
    let a = ModelParams(vec![1.0, 1.0]);
    let b = ModelParams(vec![5.0, 5.0]);
    let out = update_group_gmp(&node, &[(&a, 3), (&b, 1)], 0.5).unwrap();
    let fixture_err = out.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);

    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut hull_failures = 0;
    for _ in 0..HULL_INSTANCES {
        let dim = rng.random_range(1..=6);
        let k = rng.random_range(1..=5);
        let kids: Vec<(ModelParams, usize)> = (0..k).map(|_| (random_params(&mut rng, dim, 10.0), rng.random_range(1..=7))).collect();
        let node = GroupNode {
            id: 1,
            level: 2,
            gmp: random_params(&mut rng, dim, 10.0),
            member_count: kids.iter().map(|k| k.1).sum(),
            children: vec![],
            parent: None,
        };
        let refs: Vec<(&ModelParams, usize)> = kids.iter().map(|(p, c)| (p, *c)).collect();
        let gamma = rng.random_range(0.0..=1.0);
        let out = update_group_gmp(&node, &refs, gamma).unwrap();
        // exact bound, no slack
        let strict = out.iter().enumerate().all(|(i, &v)| {
            let lo = refs.iter().map(|c| c.0[i]).fold(node.gmp[i], f64::min);
            let hi = refs.iter().map(|c| c.0[i]).fold(node.gmp[i], f64::max);
            v >= lo - 1e-12 * (1.0 + lo.abs()) && v <= hi + 1e-12 * (1.0 + hi.abs())
        });
        if !strict || !within_hull(&out, &node.gmp, &refs) {
            hull_failures += 1;
        }
    }
    outcome(
        fixture_err <= GMP_FIXTURE_TOL && hull_failures == 0,
        format!("fixture error {fixture_err:.1e}, hull violations {hull_failures}/{HULL_INSTANCES}"),
    )
}

fn criterion_3() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.run.rounds = 10;
    cfg.run.participation = 1.0;
    cfg.run.seed = 33;
    cfg.schedule.max_levels = 1;
    cfg.schedule.thresholds = vec![1e6];
    cfg.schedule.warmup_rounds = 0;
    cfg.schedule.alpha_start = 1.0;
    cfg.schedule.alpha_end = 1.0;
    cfg.schedule.beta_start = 0.0;
    cfg.schedule.gamma_start = 1.0;
    cfg.schedule.gamma_decay = 1.0;
    cfg.population = Some(PopulationConfig { num_agents: 8, samples_min: 120, samples_max: 120, seed: 33, ..PopulationConfig::default() });
    let (data, _) = cfg.load_agents().unwrap();
    let base = run_fedavg_baseline(&cfg, &data).unwrap();
    let mut sim = Simulation::new(cfg.clone(), data).unwrap();
    let mut worst: f64 = 0.0;
    for t in 0..cfg.run.rounds {
        sim.step().unwrap();
        let root = &sim.hierarchy().expect("built at round 0").root().unwrap().gmp;
        let err = root.iter().zip(base.global_trajectory[t].iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(err);
    }
    outcome(worst <= FEDAVG_TOL, format!("8 agents x 10 rounds, max coordinate gap {worst:.1e}"))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let solver = LocalSolverConfig { epochs: PROX_STEP_BUDGET, batch_size: usize::MAX, learning_rate: 0.1, shuffle: ShufflePolicy::None };
    let mut worst: f64 = 0.0;
    for i in 0..25 {
        let spec = ModelSpec::softmax(3, 3);
        let shard = random_shard(&mut rng, i, 3, 3, 10);
        let ctx = random_context(&mut rng, spec.dim(), 10);
        let start = random_params(&mut rng, spec.dim(), 3.0);
        let w = local_update(&spec, &start, &shard, &ctx, 0.0, 1.0, &solver, 7).unwrap();
        let target = ctx.proximal_center().unwrap();
        worst = worst.max(distance(&w, &target).unwrap());
    }
    outcome(worst <= PROX_TOL, format!("{PROX_STEP_BUDGET} full-batch steps, worst distance to closed form {worst:.1e}"))
}

fn criterion_5() -> Outcome {
    let mut exact = 0;
    let mut notes = Vec::new();
    for seed in SEEDS {
        let mut cfg = RunConfig::default();
        cfg.run.seed = seed;
        cfg.run.rounds = 3;
        cfg.schedule.warmup_rounds = 3;
        cfg.population = Some(PopulationConfig {
            num_agents: 12,
            num_clusters: 3,
            separation: 8.0,
            samples_min: 200,
            samples_max: 200,
            seed,
            ..PopulationConfig::default()
        });
        let (data, planted) = cfg.load_agents().unwrap();
        let planted = planted.unwrap();
        let mut sim = Simulation::new(cfg.clone(), data).unwrap();
        sim.run_to_end().unwrap();
        let params: Vec<ModelParams> = sim.agents().iter().map(|a| a.params.clone()).collect();

        // brute-force distance table: largest within-cluster vs smallest cross-cluster gap
        let (mut within, mut across) = (0.0f64, f64::INFINITY);
        for i in 0..params.len() {
            for j in i + 1..params.len() {
                let d = distance(&params[i], &params[j]).unwrap();
                if planted.0[i] == planted.0[j] {
                    within = within.max(d);
                } else {
                    across = across.min(d);
                }
            }
        }
        let h = Hierarchy::build_initial(&params, &cfg.schedule).unwrap();
        let labels: Vec<usize> = h.level1_labels().values().copied().collect();
        let ari = adjusted_rand_index(&labels, &planted.0);
        if ari == 1.0 {
            exact += 1;
        }
        notes.push(format!("seed {seed}: ari {ari:.2} (within {within:.2}, across {across:.2})"));
    }
    outcome(exact >= 4, format!("{exact}/5 exact; {}", notes.join("; ")))
}

struct BenchmarkRun {
    seed: u64,
    dem_acc: f64,
    fedavg_acc: f64,
    changes: Vec<usize>,
}

fn run_benchmarks() -> Vec<BenchmarkRun> {
    SEEDS
        .iter()
        .map(|&seed| {
            let cfg = benchmark(seed);
            let (data, _) = cfg.load_agents().unwrap();
            let base = run_fedavg_baseline(&cfg, &data).unwrap();
            let out = run(cfg, data).unwrap();
            BenchmarkRun {
                seed,
                dem_acc: out.metrics.last().unwrap().mean_personal_acc,
                fedavg_acc: base.metrics.last().unwrap().mean_personal_acc,
                changes: out.metrics.iter().map(|m| m.group_changes).collect(),
            }
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn criterion_6(runs: &[BenchmarkRun]) -> Outcome {
    let dem = median(runs.iter().map(|r| r.dem_acc).collect());
    let fed = median(runs.iter().map(|r| r.fedavg_acc).collect());
    let strictly = runs.iter().filter(|r| r.dem_acc > r.fedavg_acc).count();
    let per_seed: Vec<String> = runs.iter().map(|r| format!("{}: {:.4} vs {:.4}", r.seed, r.dem_acc, r.fedavg_acc)).collect();
    outcome(dem >= fed && strictly >= 3, format!("median {dem:.4} vs {fed:.4}, strictly better on {strictly}/5 ({})", per_seed.join(", ")))
}

fn criterion_7(runs: &[BenchmarkRun]) -> Outcome {
    let adapt = benchmark(1).schedule.adapt_round;
    let mut bad = Vec::new();
    for r in runs {
        let tail = &r.changes[adapt..];
        let monotone = tail.windows(10).all(|w| w.windows(2).all(|p| p[1] <= p[0]));
        let settles = tail.contains(&0);
        if !(monotone && settles) {
            bad.push(format!("seed {}: {:?}", r.seed, tail));
        }
    }
    let total: usize = runs.iter().map(|r| r.changes.iter().sum::<usize>()).sum();
    outcome(bad.is_empty(), format!("{} seeds ok, {total} changes in total {}", runs.len() - bad.len(), bad.join("; ")))
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut sched = hierfl::MetaLawSchedule {
        max_levels: 3,
        thresholds: vec![1.0, 3.0, 8.0],
        adapt_round: 20,
        special_round: 100,
        ..Default::default()
    };
    sched.warmup_rounds = 0;
    let dim = 3;
    let centers: Vec<ModelParams> = (0..4).map(|_| random_params(&mut rng, dim, 6.0)).collect();
    let near = |rng: &mut ChaCha8Rng, c: &ModelParams| {
        let mut p = c.clone();
        p.iter_mut().for_each(|v| *v += rng.random_range(-0.6..0.6));
        p
    };
    let mut params: Vec<ModelParams> = (0..16).map(|i| near(&mut rng, &centers[i % 4])).collect();
    let mut h = Hierarchy::build_initial(&params, &sched).unwrap();
    let mut violations = 0;
    for t in 0..FUZZ_ROUNDS {
        // drift, sometimes a jump to another cluster
        for p in params.iter_mut() {
            if rng.random_bool(0.05) {
                *p = {
                    let c = rng.random_range(0..4);
                    near(&mut rng, &centers[c])
                };
            } else {
                p.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
            }
        }
        match rng.random_range(0..4) {
            0 => {
                h.adapt(&params, t, &sched).unwrap();
            }
            1 => {
                h.eliminate_outliers(&params, &sched).unwrap();
            }
            2 => {
                let p = {
                    let c = rng.random_range(0..4);
                    near(&mut rng, &centers[c])
                };
                h.place_new_agent(params.len(), &p).unwrap();
                params.push(p);
            }
            _ => {
                update_all_levels(&mut h, &params, rng.random_range(0.0..=1.0)).unwrap();
            }
        }
        let level1: usize = h.level_nodes(1).iter().map(|&id| h.node(id).unwrap().member_count).sum();
        if h.validate().is_err() || level1 != params.len() || h.agent_count() != params.len() {
            violations += 1;
        }
    }
    outcome(violations == 0, format!("{FUZZ_ROUNDS} rounds, {} agents at end, {violations} violations", params.len()))
}

fn criterion_9() -> Outcome {
    let mut outputs = Vec::new();
    for workers in [1, 4, 8] {
        let mut cfg = benchmark(9);
        cfg.run.rounds = 30;
        cfg.run.participation = 0.5;
        cfg.run.workers = workers;
        let (data, _) = cfg.load_agents().unwrap();
        let out = run(cfg.clone(), data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        hierfl::report::write_run_dir(dir.path(), &cfg, &out, None).unwrap();
        let bytes = std::fs::read(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(bytes, metrics_csv(&out.metrics).into_bytes());
        outputs.push(bytes);
    }
    let same = outputs.windows(2).all(|p| p[0] == p[1]);
    outcome(same, format!("workers 1/4/8, {} bytes each", outputs[0].len()))
}

fn isolated_accuracy(cfg: &RunConfig, agent: &AgentData) -> f64 {
    let mut w = init_params(&cfg.model, cfg.run.seed);
    for t in 0..ONBOARD_WINDOW {
        w = local_update(&cfg.model, &w, &agent.train, &AncestorContext::default(), 1.0, 0.0, &cfg.solver, 1000 + t as u64).unwrap();
    }
    accuracy(&cfg.model, &w, &agent.test).unwrap()
}

fn criterion_10() -> Outcome {
    let mut wins = 0;
    let mut notes = Vec::new();
    for seed in SEEDS {
        let mut cfg = benchmark(seed);
        let mut pop = cfg.population.clone().unwrap();
        pop.num_agents += 1;
        let (mut data, _) = generate_population(&pop).unwrap();
        let newcomer = data.pop().unwrap();
        let id = newcomer.id;
        cfg.run.rounds = ONBOARD_ROUND + ONBOARD_WINDOW;
        let mut sim = Simulation::new(cfg.clone(), data).unwrap();
        while sim.next_round() < ONBOARD_ROUND {
            sim.step().unwrap();
        }
        let alone = isolated_accuracy(&cfg, &newcomer);
        sim.onboard_agents(vec![newcomer]).unwrap();
        sim.run_to_end().unwrap();
        let a = &sim.agents()[id];
        let joined = accuracy(&cfg.model, &a.params, &a.test).unwrap();
        if joined >= alone {
            wins += 1;
        }
        notes.push(format!("{seed}: {joined:.3} vs {alone:.3}"));
    }
    outcome(wins >= 3, format!("onboarded >= isolated on {wins}/5 ({})", notes.join(", ")))
}

fn timed(budget: Duration, f: impl FnOnce() -> Outcome) -> (Outcome, Duration) {
    let start = Instant::now();
    let mut o = f();
    let took = start.elapsed();
    if took > budget {
        o.pass = false;
        o.detail += &format!("; over budget {:.1}s > {:.0}s", took.as_secs_f64(), budget.as_secs_f64());
    }
    (o, took)
}

#[test]
fn acceptance() {
    let secs = Duration::from_secs;
    let mut results: Vec<(usize, Outcome, Duration)> = Vec::new();
    let mut record = |n: usize, (o, d): (Outcome, Duration)| results.push((n, o, d));

    record(1, timed(secs(10), criterion_1));
    record(2, timed(secs(5), criterion_2));
    record(3, timed(secs(30), criterion_3));
    record(4, timed(secs(5), criterion_4));
    record(5, timed(secs(60), criterion_5));
    let start = Instant::now();
    let runs = run_benchmarks();
    let bench_time = start.elapsed();
    // criteria 6 and 7 share the benchmark runs
    let (o6, d6) = timed(secs(300).saturating_sub(bench_time), || criterion_6(&runs));
    record(6, (o6, d6 + bench_time));
    let (o7, d7) = timed(secs(300).saturating_sub(bench_time), || criterion_7(&runs));
    record(7, (o7, d7 + bench_time));
    record(8, timed(secs(60), criterion_8));
    record(9, timed(secs(60), criterion_9));
    record(10, timed(secs(300), criterion_10));

    let mut failed = Vec::new();
    for (n, o, d) in &results {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2}: {tag} [{:.2}s] {}", d.as_secs_f64(), o.detail);
        if !o.pass {
            failed.push(*n);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
