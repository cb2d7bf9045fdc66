use std::collections::{HashSet, VecDeque};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::genome::decoding_seed;
use crate::latency::flop_model;
use crate::operators::OperatorKind::{DeltaNet, FullAttention, Mamba2};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn latency_metric(space: &SearchSpace) -> EfficiencyMetric {
    let mut kinds = space.ops.clone();
    kinds.push(OperatorKind::Ffn);
    let lut = flop_model(&kinds, &space.ladder, 256, 1e-9).unwrap();
    EfficiencyMetric::Latency {
        lut,
        gen_len: 1,
        ctx: 2048,
    }
}

/// All feasible repaired genomes of the space with their surrogate PPL,
/// best first.
fn enumerate_objective(space: &SearchSpace, metric: &EfficiencyMetric, budget: f64) -> Vec<(f64, ArchitectureGenome)> {
    let sur = AnalyticSurrogate::default();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for g in space.enumerate() {
        let g = repair(&g).unwrap();
        let (g, _, feasible) = assign_width(&g, space, metric, budget).unwrap();
        if feasible && seen.insert(g) {
            out.push((sur.evaluate(&g, &decode(&g).unwrap(), 0).unwrap(), g));
        }
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

fn ind(id: usize, ppl: f64, eff: f64, feasible: bool) -> Individual {
    Individual {
        id,
        genome: decoding_seed(32),
        proxy_ppl: ppl,
        efficiency: eff,
        feasible,
    }
}

#[test]
fn spearman_examples() {
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
    assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
    assert!(spearman(&[1.0, 2.0], &[1.0]).is_err());
    assert!(spearman(&[1.0], &[1.0]).is_err());
}

#[test]
fn restricted_space_has_3375_genomes() {
    let space = SearchSpace::restricted();
    assert_eq!(space.stage_choices().len(), 15);
    assert_eq!(space.enumerate().len(), 3375);
}

#[test]
fn population_ages_in_birth_order() {
    let mut pop = Population::new(4);
    pop.admit((0..3).map(|i| ind(i, 1.0, 1.0, true)).collect());
    let evicted = pop.admit((3..6).map(|i| ind(i, 0.5, 1.0, true)).collect());
    assert_eq!(evicted.iter().map(|m| m.id).collect::<Vec<_>>(), vec![0, 1]);
    assert_eq!(pop.members().map(|m| m.id).collect::<Vec<_>>(), vec![2, 3, 4, 5]);
    assert_eq!(pop.len(), pop.capacity());
}

#[test]
fn tournament_picks_best_feasible_or_cheapest() {
    let mut pop = Population::new(8);
    pop.admit(vec![ind(0, 5.0, 3.0, false), ind(1, 9.0, 1.0, false)]);
    let (m, fallback) = tournament_select(&pop, 2, &mut rng(0)).unwrap();
    assert!(fallback);
    assert_eq!(m.id, 1);

    let (m, fallback) = tournament_select(&pop, 1, &mut rng(3)).unwrap();
    assert!(fallback && m.id < 2);
    assert!(tournament_select(&Population::new(2), 1, &mut rng(0)).is_err());
}

#[test]
fn planted_winner_wins_every_tournament_it_enters() {
    let mut pop = Population::new(32);
    let mut members: Vec<_> = (0..32).map(|i| ind(i, 10.0 + i as f64, 1.0, true)).collect();
    members[17].proxy_ppl = 1.0;
    members[5].feasible = false;
    members[5].proxy_ppl = 0.1;
    pop.admit(members);
    let mut r = rng(9);
    let mut entered = 0;
    for _ in 0..1000 {
        // S = 8 of 32: the planted member is drawn in about a quarter of them
        let (m, _) = tournament_select(&pop, 8, &mut r).unwrap();
        assert_ne!(m.id, 5);
        if m.id == 17 {
            entered += 1;
        }
    }
    // winners equal entries: count how often 17 was sampled with the same stream
    let mut r = rng(9);
    let mut sampled = 0;
    for _ in 0..1000 {
        if sample(&mut r, 32, 8).iter().any(|i| i == 17) {
            sampled += 1;
        }
    }
    assert_eq!(entered, sampled);
    assert!(entered > 150);
}

/// The partner operator belongs to the ratio factor when the ratio moves
/// to or from 0:1, so it is only compared when both sides have one.
fn factors(g: &ArchitectureGenome, other: &ArchitectureGenome) -> [Vec<String>; 4] {
    [
        g.stages
            .iter()
            .zip(&other.stages)
            .map(|(s, o)| format!("{}/{:?}", s.op_a, s.op_b.filter(|_| o.op_b.is_some())))
            .collect(),
        g.stages.iter().map(|s| s.ratio.to_string()).collect(),
        g.stages.iter().map(|s| s.ffn.to_string()).collect(),
        g.stages.iter().map(|s| s.blocks.to_string()).collect(),
    ]
}

#[test]
fn ratio_mutation_never_keeps_the_ratio() {
    let space = SearchSpace {
        blocks: vec![1],
        ..SearchSpace::default()
    };
    let parent = ArchitectureGenome::new([StageSpec::pair(DeltaNet, Mamba2, Ratio::OneOne, 1, 1); 3], 32);
    let mut r = rng(4);
    let mut seen = HashSet::new();
    for _ in 0..400 {
        let m = mutate(&parent, &space, &mut r).unwrap();
        if m.kind == MutationKind::Ratio {
            let new = m.genome.stages[m.stage].ratio;
            assert_ne!(new, Ratio::OneOne);
            seen.insert(new);
        }
    }
    assert_eq!(seen.len(), 3);
}

#[test]
fn blocks_mutation_overflow_is_repaired() {
    let space = SearchSpace {
        blocks: vec![1, 5],
        ..SearchSpace::default()
    };
    let parent = ArchitectureGenome::new(
        [
            StageSpec::pair(DeltaNet, Mamba2, Ratio::OneOne, 1, 1),
            StageSpec::single(FullAttention, 1, 1),
            StageSpec::single(Mamba2, 1, 1),
        ],
        32,
    );
    let mut r = rng(1);
    let mut hits = 0;
    for _ in 0..300 {
        let m = mutate(&parent, &space, &mut r).unwrap();
        assert!(m.genome.op_count() <= m.genome.max_operators);
        if m.kind == MutationKind::Blocks && m.stage == 0 {
            // 5 blocks of 4 = 20 in stage one, 2 + 2 after it = 24
            assert_eq!(m.genome.stages[0].blocks, 5);
            hits += 1;
        }
        if m.kind == MutationKind::Blocks && m.stage == 1 {
            // 4 + 10 + 2 = 16 fits; nothing to repair
            assert_eq!(m.genome.stages[2].blocks, 1);
        }
    }
    assert!(hits > 0);
    let heavy = ArchitectureGenome::new(
        [
            StageSpec::pair(DeltaNet, Mamba2, Ratio::OneOne, 1, 5),
            StageSpec::single(FullAttention, 1, 1),
            StageSpec::single(Mamba2, 1, 3),
        ],
        32,
    );
    let heavy = repair(&heavy).unwrap();
    assert_eq!(heavy.stages[2].blocks, 3);
    let space = SearchSpace {
        blocks: vec![5],
        ops: vec![DeltaNet, FullAttention, Mamba2],
        ..SearchSpace::default()
    };
    for _ in 0..300 {
        let m = mutate(&heavy, &space, &mut r).unwrap();
        if m.kind == MutationKind::Blocks && m.stage == 1 {
            // stage two grows to 10, so stage three drops to nothing
            assert_eq!(m.genome.stages[1].blocks, 5);
            assert_eq!(m.genome.stages[2].blocks, 0);
        }
    }
}

#[test]
fn no_legal_mutation_is_an_error() {
    let space = SearchSpace {
        ops: vec![DeltaNet],
        ratios: vec![Ratio::ZeroOne],
        ffns: vec![1],
        blocks: vec![1],
        ..SearchSpace::default()
    };
    let g = ArchitectureGenome::new([StageSpec::single(DeltaNet, 1, 1); 3], 32);
    assert!(matches!(mutate(&g, &space, &mut rng(0)), Err(Error::Genome(_))));
}

#[test]
fn mutation_closure_reaches_every_stage_assignment() {
    let space = SearchSpace {
        ratios: vec![Ratio::ZeroOne, Ratio::OneOne],
        blocks: vec![1],
        ffns: vec![1, 2],
        ..SearchSpace::default()
    };
    let start = ArchitectureGenome::new([StageSpec::single(DeltaNet, 1, 1); 3], 32);
    let mut seen: HashSet<ArchitectureGenome> = HashSet::from([start]);
    let mut queue = VecDeque::from([start]);
    let mut r = rng(2);
    while let Some(g) = queue.pop_front() {
        for _ in 0..200 {
            let m = mutate(&g, &space, &mut r).unwrap();
            if seen.insert(m.genome) {
                queue.push_back(m.genome);
            }
        }
    }
    let all: HashSet<_> = space.enumerate().into_iter().map(|g| repair(&g).unwrap()).collect();
    assert!(all.is_subset(&seen), "{} of {} reached", seen.len(), all.len());
}

#[test]
fn search_config_invariants() {
    let mut cfg = SearchConfig::new(1.0, 0);
    assert!(cfg.validate().is_ok());
    cfg.sample = 33;
    assert!(cfg.validate().is_err());
    cfg.sample = 8;
    cfg.offspring = 40;
    assert!(cfg.validate().is_err());
    cfg.offspring = 10;
    cfg.budget = 0.0;
    assert!(cfg.validate().is_err());
}

#[test]
fn decoding_seed_evaluates_without_repair() {
    let space = SearchSpace::default();
    let metric = latency_metric(&space);
    let g = decoding_seed(32);
    assert_eq!(repair(&g).unwrap(), g);
    let cfg = SearchConfig {
        cycles: 0,
        population: 2,
        sample: 1,
        offspring: 1,
        ..SearchConfig::new(1.0, 0)
    };
    let out = run_search(&cfg, &space, &metric, &AnalyticSurrogate::default(), &[g, g]).unwrap();
    assert_eq!(out.trajectory.records.len(), 2);
    // duplicates are evaluated separately
    assert_eq!(
        out.trajectory.records[0].genome.stages,
        out.trajectory.records[1].genome.stages
    );
    assert_eq!(out.best.id, 0);
}

#[test]
fn zero_cycles_return_best_seed() {
    let space = SearchSpace::restricted();
    let metric = latency_metric(&space);
    let cfg = SearchConfig {
        cycles: 0,
        ..SearchConfig::new(2e-3, 3)
    };
    let out = run_search(&cfg, &space, &metric, &AnalyticSurrogate::default(), &[]).unwrap();
    assert_eq!(out.trajectory.records.len(), 32);
    let best = out
        .trajectory
        .records
        .iter()
        .filter(|r| r.feasible)
        .map(|r| r.proxy_ppl.unwrap())
        .fold(f64::INFINITY, f64::min);
    assert_eq!(out.best.proxy_ppl, best);
}

#[test]
fn infeasible_budget_refuses_to_start() {
    let space = SearchSpace::restricted();
    let metric = latency_metric(&space);
    let cfg = SearchConfig::new(1e-12, 0);
    assert!(matches!(
        run_search(&cfg, &space, &metric, &AnalyticSurrogate::default(), &[]),
        Err(Error::Config(_))
    ));
}

#[test]
fn missing_latency_coverage_refuses_to_start() {
    let space = SearchSpace::restricted();
    let lut = flop_model(&[DeltaNet, OperatorKind::Ffn], &space.ladder, 256, 1e-9).unwrap();
    let metric = EfficiencyMetric::Latency {
        lut,
        gen_len: 1,
        ctx: 512,
    };
    let err = run_search(
        &SearchConfig::new(1.0, 0),
        &space,
        &metric,
        &AnalyticSurrogate::default(),
        &[],
    );
    assert!(matches!(err, Err(Error::Coverage(_))));
}

struct Flaky;

impl Evaluator for Flaky {
    fn evaluate(&self, g: &ArchitectureGenome, spec: &ModelSpec, seed: u64) -> crate::error::Result<f64> {
        if seed.is_multiple_of(3) {
            Err(Error::Contract("diverged".into()))
        } else {
            AnalyticSurrogate::default().evaluate(g, spec, seed)
        }
    }
}

#[test]
fn failed_evaluations_do_not_abort() {
    let space = SearchSpace::restricted();
    let metric = latency_metric(&space);
    let cfg = SearchConfig {
        cycles: 5,
        ..SearchConfig::new(2e-3, 1)
    };
    let out = run_search(&cfg, &space, &metric, &Flaky, &[]).unwrap();
    let failed = out.trajectory.records.iter().filter(|r| r.proxy_ppl.is_none()).count();
    assert!(failed > 0);
    assert!(out.best.proxy_ppl.is_finite());
}

#[test]
fn search_is_replayable_and_monotone() {
    let space = SearchSpace::restricted();
    let metric = latency_metric(&space);
    let cfg = SearchConfig {
        cycles: 8,
        ..SearchConfig::new(2e-3, 11)
    };
    let a = run_search(&cfg, &space, &metric, &AnalyticSurrogate::default(), &[]).unwrap();
    let b = run_search(
        &SearchConfig {
            exec: Execution::Sequential,
            ..cfg.clone()
        },
        &space,
        &metric,
        &AnalyticSurrogate::default(),
        &[],
    )
    .unwrap();
    assert_eq!(a.trajectory.to_jsonl().unwrap(), b.trajectory.to_jsonl().unwrap());
    let best = a.trajectory.best_so_far();
    assert_eq!(best.len(), 9);
    assert!(best.windows(2).all(|w| w[1].unwrap() <= w[0].unwrap()));
    assert!(a.population.len() <= cfg.population);
    let ids: Vec<_> = a.trajectory.records.iter().map(|r| r.id).collect();
    assert!(ids.windows(2).all(|w| w[1] == w[0] + 1));
    for r in &a.trajectory.records {
        assert!(r.genome.op_count() <= r.genome.max_operators);
        assert!(decode(&r.genome).is_ok());
    }
    let line: serde_json::Value =
        serde_json::from_str(a.trajectory.to_jsonl().unwrap().lines().last().unwrap()).unwrap();
    for key in [
        "cycle",
        "genome",
        "proxy_ppl",
        "efficiency",
        "feasible",
        "parent_id",
        "mutation_kind",
    ] {
        assert!(line.get(key).is_some(), "{key}");
    }
}

#[test]
fn search_finds_top_percent_on_surrogate() {
    let space = SearchSpace::restricted();
    let metric = latency_metric(&space);
    let budget = 2e-3;
    let table = enumerate_objective(&space, &metric, budget);
    assert!(table.len() > 200, "{}", table.len());
    let threshold = table[(table.len() as f64 * 0.01).ceil() as usize - 1].0;
    let mut hits = 0;
    for seed in 0..10 {
        let cfg = SearchConfig::new(budget, seed);
        let out = run_search(&cfg, &space, &metric, &AnalyticSurrogate::default(), &[]).unwrap();
        if out.best.proxy_ppl <= threshold {
            hits += 1;
        }
    }
    assert!(hits >= 9, "{hits}/10 within the top 1%");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mutation_changes_exactly_one_factor(seed in 0u64..10_000) {
        let space = SearchSpace { blocks: vec![1, 2], ..SearchSpace::default() };
        let mut r = rng(seed);
        let parent = loop {
            let g = space.random(&mut r).unwrap();
            if g.op_count() <= 12 { break g; }
        };
        let m = mutate(&parent, &space, &mut r).unwrap();
        let (a, b) = (factors(&parent, &m.genome), factors(&m.genome, &parent));
        let changed: Vec<_> = (0..4).filter(|&i| a[i] != b[i]).collect();
        prop_assert_eq!(changed.len(), 1);
        prop_assert_eq!(m.genome.hidden, parent.hidden);
    }

    #[test]
    fn assigned_width_is_largest_feasible(seed in 0u64..1000, budget in 1e-4f64..4e-3) {
        let space = SearchSpace::restricted();
        let metric = latency_metric(&space);
        let g = space.random(&mut rng(seed)).unwrap();
        let (out, cost, feasible) = assign_width(&g, &space, &metric, budget).unwrap();
        if feasible {
            prop_assert!(cost <= budget);
            for &w in space.ladder.iter().filter(|&&w| w > out.hidden) {
                let c = metric.cost(&decode(&ArchitectureGenome { hidden: w, ..g }).unwrap()).unwrap();
                prop_assert!(c > budget);
            }
        } else {
            prop_assert_eq!(out.hidden, space.ladder[0]);
        }
    }
}
