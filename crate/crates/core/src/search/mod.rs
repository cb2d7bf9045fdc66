//! Aging evolution over [`ArchitectureGenome`]s: tournament selection
//! under an efficiency budget, single-factor mutation, oldest-out
//! replacement and a per-genome trajectory log.

mod evaluator;
#[cfg(test)]
mod tests;

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::genome::{decode, repair, stage_choices, ArchitectureGenome, ModelSpec, Ratio, StageSpec, DESK_LADDER};
use crate::latency::{param_cost, LatencyLut};
use crate::operators::OperatorKind;

pub use evaluator::{AnalyticSurrogate, Evaluator, ProxyEvaluator};

/// Rank correlation with average-rank ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Contract(format!(
            "spearman over {} vs {} values",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::Contract("spearman needs at least two pairs".into()));
    }
    crate::stats::spearman(xs, ys).ok_or_else(|| Error::Contract("spearman of a constant sequence".into()))
}

/// Choices each mutation may draw from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub ops: Vec<OperatorKind>,
    pub ratios: Vec<Ratio>,
    pub ffns: Vec<usize>,
    pub blocks: Vec<usize>,
    /// Hidden sizes; offspring take the largest one within budget.
    pub ladder: Vec<usize>,
    pub max_operators: usize,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            ops: OperatorKind::SEARCHABLE.to_vec(),
            ratios: Ratio::ALL.to_vec(),
            ffns: vec![1, 2],
            blocks: vec![1, 2, 3],
            ladder: DESK_LADDER.to_vec(),
            max_operators: crate::genome::DEFAULT_MAX_OPERATORS,
        }
    }
}

impl SearchSpace {
    /// 15 stage choices per stage, 3375 genomes: small enough to enumerate.
    pub fn restricted() -> Self {
        SearchSpace {
            ratios: vec![Ratio::ZeroOne, Ratio::OneOne, Ratio::OneTwo],
            ffns: vec![1],
            blocks: vec![2],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ops.is_empty() || self.ratios.is_empty() || self.ffns.is_empty() || self.blocks.is_empty() {
            return Err(Error::Config("search space has an empty choice list".into()));
        }
        if self.ladder.is_empty() || self.ladder.contains(&0) {
            return Err(Error::Config("search ladder needs positive widths".into()));
        }
        if self.ops.len() < 2 && self.ratios.iter().any(|&r| r != Ratio::ZeroOne) {
            return Err(Error::Config("mixed ratios need at least two operators".into()));
        }
        for &op in &self.ops {
            op.validate()?;
            if !op.is_mixer() {
                return Err(Error::Config(format!("{op} is not a token mixer")));
            }
        }
        Ok(())
    }

    pub fn stage_choices(&self) -> Vec<StageSpec> {
        stage_choices(&self.ops, &self.ratios, &self.ffns, &self.blocks)
    }

    /// Every raw genome (before repair) at the smallest ladder width.
    pub fn enumerate(&self) -> Vec<ArchitectureGenome> {
        let st = self.stage_choices();
        let mut out = Vec::with_capacity(st.len().pow(3));
        for &a in &st {
            for &b in &st {
                for &c in &st {
                    let mut g = ArchitectureGenome::new([a, b, c], self.ladder[0]);
                    g.max_operators = self.max_operators;
                    out.push(g);
                }
            }
        }
        out
    }

    pub fn random(&self, rng: &mut impl Rng) -> Result<ArchitectureGenome> {
        let st = self.stage_choices();
        for _ in 0..MUTATION_RETRIES {
            let mut pick = || st[rng.gen_range(0..st.len())];
            let mut g = ArchitectureGenome::new([pick(), pick(), pick()], self.ladder[0]);
            g.max_operators = self.max_operators;
            if let Ok(g) = repair(&g) {
                return Ok(g);
            }
        }
        Err(Error::Config(format!(
            "no random genome fits {} operators after {MUTATION_RETRIES} draws",
            self.max_operators
        )))
    }
}

/// How offspring cost is measured against the budget.
#[derive(Debug, Clone, PartialEq)]
pub enum EfficiencyMetric {
    /// Estimated seconds to decode `gen_len` tokens after `ctx` context.
    Latency {
        lut: LatencyLut,
        gen_len: usize,
        ctx: usize,
    },
    /// Operator parameter count.
    Params,
}

impl EfficiencyMetric {
    pub fn cost(&self, spec: &ModelSpec) -> Result<f64> {
        match self {
            EfficiencyMetric::Latency { lut, gen_len, ctx } => Ok(lut.estimate(spec, *gen_len, *ctx)?.seconds()),
            EfficiencyMetric::Params => Ok(param_cost(spec) as f64),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EfficiencyMetric::Latency { .. } => "latency",
            EfficiencyMetric::Params => "params",
        }
    }

    fn check_coverage(&self, space: &SearchSpace) -> Result<()> {
        if let EfficiencyMetric::Latency { lut, ctx, .. } = self {
            let mut kinds = space.ops.clone();
            kinds.push(OperatorKind::Ffn);
            lut.check_coverage(&kinds, &space.ladder, *ctx)?;
        }
        Ok(())
    }
}

/// Re-select the hidden size as the largest ladder width within `budget`.
/// Returns the genome, its cost and whether it is feasible; when no width
/// fits, the smallest width is kept and flagged infeasible.
pub fn assign_width(
    g: &ArchitectureGenome,
    space: &SearchSpace,
    metric: &EfficiencyMetric,
    budget: f64,
) -> Result<(ArchitectureGenome, f64, bool)> {
    let mut widths = space.ladder.clone();
    widths.sort_unstable();
    let mut smallest = None;
    for &w in widths.iter().rev() {
        let cand = ArchitectureGenome { hidden: w, ..*g };
        let cost = metric.cost(&decode(&cand)?)?;
        if cost <= budget {
            return Ok((cand, cost, true));
        }
        smallest = Some((cand, cost, false));
    }
    Ok(smallest.expect("ladder validated non-empty"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutationKind {
    Operator,
    Ratio,
    Ffn,
    Blocks,
}

impl MutationKind {
    pub const ALL: [MutationKind; 4] = [
        MutationKind::Operator,
        MutationKind::Ratio,
        MutationKind::Ffn,
        MutationKind::Blocks,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mutation {
    pub genome: ArchitectureGenome,
    pub kind: MutationKind,
    pub stage: usize,
}

/// Change one factor of one stage, drawing a different legal value.
/// `None` when the drawn kind has no legal alternative in that stage.
fn mutate_stage(s: &StageSpec, kind: MutationKind, space: &SearchSpace, rng: &mut impl Rng) -> Option<StageSpec> {
    fn draw<T: Copy>(xs: &[T], rng: &mut impl Rng) -> Option<T> {
        (!xs.is_empty()).then(|| xs[rng.gen_range(0..xs.len())])
    }
    let mut out = *s;
    match kind {
        MutationKind::Operator => {
            let slot_b = s.op_b.is_some() && rng.gen_bool(0.5);
            let (cur, other) = if slot_b {
                (s.op_b.unwrap(), Some(s.op_a))
            } else {
                (s.op_a, s.op_b)
            };
            let legal: Vec<_> = space
                .ops
                .iter()
                .copied()
                .filter(|&o| o != cur && Some(o) != other)
                .collect();
            let new = draw(&legal, rng)?;
            if slot_b {
                out.op_b = Some(new);
            } else {
                out.op_a = new;
            }
        }
        MutationKind::Ratio => {
            let legal: Vec<_> = space.ratios.iter().copied().filter(|&r| r != s.ratio).collect();
            out.ratio = draw(&legal, rng)?;
            match (s.op_b, out.ratio) {
                (_, Ratio::ZeroOne) => out.op_b = None,
                (None, _) => {
                    let partners: Vec<_> = space.ops.iter().copied().filter(|&o| o != s.op_a).collect();
                    out.op_b = Some(draw(&partners, rng)?);
                }
                _ => {}
            }
        }
        MutationKind::Ffn => {
            let legal: Vec<_> = space.ffns.iter().copied().filter(|&f| f != s.ffn).collect();
            out.ffn = draw(&legal, rng)?;
        }
        MutationKind::Blocks => {
            let legal: Vec<_> = space.blocks.iter().copied().filter(|&b| b != s.blocks).collect();
            out.blocks = draw(&legal, rng)?;
        }
    }
    Some(out)
}

const MUTATION_RETRIES: usize = 64;

/// One-factor mutation followed by repair. The hidden size is left to
/// [`assign_width`].
pub fn mutate(parent: &ArchitectureGenome, space: &SearchSpace, rng: &mut impl Rng) -> Result<Mutation> {
    parent.validate()?;
    for _ in 0..MUTATION_RETRIES {
        let kind = MutationKind::ALL[rng.gen_range(0..4)];
        let stage = rng.gen_range(0..3);
        let Some(new_stage) = mutate_stage(&parent.stages[stage], kind, space, rng) else {
            continue;
        };
        let mut g = *parent;
        g.stages[stage] = new_stage;
        if let Ok(g) = repair(&g) {
            return Ok(Mutation { genome: g, kind, stage });
        }
    }
    Err(Error::Genome(format!(
        "no legal mutation of {parent} after {MUTATION_RETRIES} draws"
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    /// Birth index, strictly increasing over the run.
    pub id: usize,
    pub genome: ArchitectureGenome,
    /// `f64::INFINITY` when the evaluation failed.
    pub proxy_ppl: f64,
    pub efficiency: f64,
    pub feasible: bool,
}

/// Fixed-capacity ring evicting in birth order.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    capacity: usize,
    members: VecDeque<Individual>,
}

impl Population {
    pub fn new(capacity: usize) -> Self {
        Population {
            capacity,
            members: VecDeque::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn members(&self) -> impl Iterator<Item = &Individual> {
        self.members.iter()
    }

    /// Append in one step, evicting the oldest members to make room.
    pub fn admit(&mut self, batch: Vec<Individual>) -> Vec<Individual> {
        let overflow = (self.members.len() + batch.len()).saturating_sub(self.capacity);
        let evicted: Vec<_> = self.members.drain(..overflow.min(self.members.len())).collect();
        let skip = batch.len().saturating_sub(self.capacity);
        self.members.extend(batch.into_iter().skip(skip));
        evicted
    }
}

/// Lowest proxy PPL among `s` uniformly sampled feasible members. When no
/// sampled member is feasible, the cheapest one is returned and the flag
/// is set.
pub fn tournament_select<'a>(pop: &'a Population, s: usize, rng: &mut impl Rng) -> Result<(&'a Individual, bool)> {
    if pop.is_empty() {
        return Err(Error::Contract("tournament over an empty population".into()));
    }
    let picks = sample(rng, pop.len(), s.clamp(1, pop.len()));
    let sampled: Vec<&Individual> = picks.iter().map(|i| &pop.members[i]).collect();
    let best = sampled
        .iter()
        .filter(|m| m.feasible)
        .min_by(|a, b| a.proxy_ppl.total_cmp(&b.proxy_ppl).then(a.id.cmp(&b.id)));
    Ok(match best {
        Some(m) => (m, false),
        None => (
            sampled
                .iter()
                .min_by(|a, b| a.efficiency.total_cmp(&b.efficiency).then(a.id.cmp(&b.id)))
                .expect("nonempty sample"),
            true,
        ),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    #[serde(default = "default_population")]
    pub population: usize,
    #[serde(default = "default_sample")]
    pub sample: usize,
    #[serde(default = "default_cycles")]
    pub cycles: usize,
    #[serde(default = "default_offspring")]
    pub offspring: usize,
    /// Seconds for the latency metric, parameters for the params metric.
    pub budget: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub exec: Execution,
}

fn default_population() -> usize {
    32
}
fn default_sample() -> usize {
    8
}
fn default_cycles() -> usize {
    30
}
fn default_offspring() -> usize {
    10
}

impl SearchConfig {
    pub fn new(budget: f64, seed: u64) -> Self {
        SearchConfig {
            population: default_population(),
            sample: default_sample(),
            cycles: default_cycles(),
            offspring: default_offspring(),
            budget,
            seed,
            exec: Execution::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.population == 0 || self.sample == 0 || self.sample > self.population {
            return Err(Error::Config(format!(
                "need 1 ≤ sample ({}) ≤ population ({})",
                self.sample, self.population
            )));
        }
        if self.offspring == 0 || self.offspring > self.population {
            return Err(Error::Config(format!(
                "offspring per cycle ({}) must be in 1..={}",
                self.offspring, self.population
            )));
        }
        if !(self.budget > 0.0) {
            return Err(Error::Config(format!("budget must be positive, got {}", self.budget)));
        }
        Ok(())
    }
}

/// One line of the trajectory file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// 0 for the seeded population.
    pub cycle: usize,
    pub id: usize,
    pub genome: ArchitectureGenome,
    pub ops: String,
    /// `None` for failed evaluations.
    pub proxy_ppl: Option<f64>,
    pub efficiency: f64,
    pub feasible: bool,
    pub parent_id: Option<usize>,
    pub mutation_kind: Option<MutationKind>,
    /// Parent came from the all-infeasible tournament fallback.
    pub fallback_parent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleSummary {
    pub cycle: usize,
    pub best_so_far: Option<f64>,
    pub mutations: Vec<MutationKind>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub records: Vec<EvalRecord>,
    pub cycles: Vec<CycleSummary>,
}

impl Trajectory {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(self.to_jsonl()?.as_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn best_so_far(&self) -> Vec<Option<f64>> {
        self.cycles.iter().map(|c| c.best_so_far).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub best: Individual,
    pub trajectory: Trajectory,
    pub population: Population,
}

/// Independent evaluation seed per birth index.
fn offspring_seed(seed: u64, id: usize) -> u64 {
    let mut z = seed ^ (id as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Candidate {
    id: usize,
    genome: ArchitectureGenome,
    parent: Option<(usize, MutationKind, bool)>,
}

struct Searcher<'a> {
    cfg: &'a SearchConfig,
    space: &'a SearchSpace,
    metric: &'a EfficiencyMetric,
    evaluator: &'a dyn Evaluator,
}

impl Searcher<'_> {
    /// Width-assign and evaluate a batch in parallel; order preserved.
    fn evaluate(&self, batch: Vec<Candidate>, cycle: usize) -> Result<Vec<(Individual, EvalRecord)>> {
        let results = self.cfg.exec.map(&batch, |c| -> Result<(Individual, EvalRecord)> {
            let (genome, efficiency, feasible) = assign_width(&c.genome, self.space, self.metric, self.cfg.budget)?;
            let spec = decode(&genome)?;
            let ppl = self
                .evaluator
                .evaluate(&genome, &spec, offspring_seed(self.cfg.seed, c.id))
                .ok()
                .filter(|p| p.is_finite());
            let ind = Individual {
                id: c.id,
                genome,
                proxy_ppl: ppl.unwrap_or(f64::INFINITY),
                efficiency,
                feasible,
            };
            let rec = EvalRecord {
                cycle,
                id: c.id,
                genome,
                ops: spec.codes(),
                proxy_ppl: ppl,
                efficiency,
                feasible,
                parent_id: c.parent.map(|p| p.0),
                mutation_kind: c.parent.map(|p| p.1),
                fallback_parent: c.parent.is_some_and(|p| p.2),
            };
            Ok((ind, rec))
        });
        results.into_iter().collect()
    }
}

fn better(a: &Individual, best: &Option<Individual>) -> bool {
    a.feasible && a.proxy_ppl.is_finite() && best.as_ref().is_none_or(|b| a.proxy_ppl < b.proxy_ppl)
}

/// Seed the population with `seeds` plus random genomes up to `P`, then
/// run `C` cycles of aging evolution. Returns the lowest-PPL feasible
/// genome ever evaluated.
pub fn run_search(
    cfg: &SearchConfig,
    space: &SearchSpace,
    metric: &EfficiencyMetric,
    evaluator: &dyn Evaluator,
    seeds: &[ArchitectureGenome],
) -> Result<SearchOutcome> {
    cfg.validate()?;
    space.validate()?;
    metric.check_coverage(space)?;
    let searcher = Searcher {
        cfg,
        space,
        metric,
        evaluator,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut next_id = 0;
    let mut initial = Vec::with_capacity(cfg.population);
    for s in seeds.iter().take(cfg.population) {
        let mut g = *s;
        g.max_operators = space.max_operators;
        initial.push(Candidate {
            id: next_id,
            genome: repair(&g)?,
            parent: None,
        });
        next_id += 1;
    }
    while initial.len() < cfg.population {
        initial.push(Candidate {
            id: next_id,
            genome: space.random(&mut rng)?,
            parent: None,
        });
        next_id += 1;
    }

    let mut trajectory = Trajectory::default();
    let mut best: Option<Individual> = None;
    let mut pop = Population::new(cfg.population);
    let seeded = searcher.evaluate(initial, 0)?;
    if !seeded.iter().any(|(i, _)| i.feasible && i.proxy_ppl.is_finite()) {
        return Err(Error::Config(format!(
            "no seeded genome meets the {} budget {} with a successful evaluation",
            metric.name(),
            cfg.budget
        )));
    }
    let mut admit = |evaluated: Vec<(Individual, EvalRecord)>, pop: &mut Population, traj: &mut Trajectory| {
        let mut batch = Vec::with_capacity(evaluated.len());
        for (ind, rec) in evaluated {
            if better(&ind, &best) {
                best = Some(ind.clone());
            }
            traj.records.push(rec);
            batch.push(ind);
        }
        pop.admit(batch);
        best.as_ref().map(|b| b.proxy_ppl)
    };
    let b0 = admit(seeded, &mut pop, &mut trajectory);
    trajectory.cycles.push(CycleSummary {
        cycle: 0,
        best_so_far: b0,
        mutations: Vec::new(),
    });

    for cycle in 1..=cfg.cycles {
        let mut batch = Vec::with_capacity(cfg.offspring);
        for _ in 0..cfg.offspring {
            let (parent, fallback) = tournament_select(&pop, cfg.sample, &mut rng)?;
            let m = mutate(&parent.genome, space, &mut rng)?;
            batch.push(Candidate {
                id: next_id,
                genome: m.genome,
                parent: Some((parent.id, m.kind, fallback)),
            });
            next_id += 1;
        }
        let mutations = batch.iter().filter_map(|c| c.parent.map(|p| p.1)).collect();
        let evaluated = searcher.evaluate(batch, cycle)?;
        let b = admit(evaluated, &mut pop, &mut trajectory);
        trajectory.cycles.push(CycleSummary {
            cycle,
            best_so_far: b,
            mutations,
        });
    }
    let best = best.expect("a feasible seed was evaluated");
    Ok(SearchOutcome {
        best,
        trajectory,
        population: pop,
    })
}
