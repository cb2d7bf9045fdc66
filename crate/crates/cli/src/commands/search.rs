//! `profile` builds the latency table; `search` runs aging evolution
//! against it (or against the parameter count).

use std::path::Path;

use anyhow::{bail, Result};
use serde::Serialize;
use slmlab::genome::{decode, decoding_seed, ArchitectureGenome};
use slmlab::latency::{flop_model, host_fingerprint, profile as profile_ops, LatencyLut, ProfileOptions};
use slmlab::search::{
    run_search, AnalyticSurrogate, EfficiencyMetric, Evaluator, ProxyEvaluator, SearchConfig, SearchSpace,
};
use slmlab::trainer::Budget;

use super::snapshot;
use crate::config::{EvaluatorChoice, ExperimentConfig, MetricChoice, SpaceChoice};
use crate::output::{markdown_table, opt, OutDir};
use crate::{Invalid, Prerequisite};

pub fn profile(cfg: &ExperimentConfig, root: &Path) -> Result<()> {
    let out = OutDir::create(root, "profile")?;
    snapshot(&out, cfg)?;
    let p = &cfg.profile;
    let lut = if p.flop_model {
        flop_model(&p.kinds, &p.widths, slmlab::corpus::VOCAB, p.secs_per_flop)?
    } else {
        let opts = ProfileOptions {
            reps: p.reps,
            warmup: p.warmup,
            min_rep_s: p.min_rep_s,
            buckets: p.buckets.clone(),
            seed: cfg.seed,
            ..ProfileOptions::default()
        };
        profile_ops(&p.kinds, &p.widths, p.regime, &opts)?
    };
    out.write("lut.json", &(lut.to_json()? + "\n"))?;
    let header = ["kind", "W", "regime", "ctx_bucket", "median_us", "iqr_over_median"];
    let rows: Vec<Vec<String>> = lut
        .entries
        .values()
        .map(|e| {
            vec![
                e.kind.to_string(),
                e.width.to_string(),
                format!("{:?}", e.regime).to_lowercase(),
                e.ctx_bucket.to_string(),
                format!("{:.3}", e.median_s * 1e6),
                format!("{:.3}", e.iqr_s / e.median_s),
            ]
        })
        .collect();
    let table = markdown_table(&header, &rows);
    out.write(
        "summary.md",
        &format!("# Latency table\n\nhost: {}\n\n{table}", lut.host),
    )?;
    print!("{table}");
    Ok(())
}

#[derive(Serialize)]
struct BestFile<'a> {
    genome: &'a ArchitectureGenome,
    ops: String,
    #[serde(rename = "D")]
    depth: usize,
    #[serde(rename = "W")]
    width: usize,
    attention_layers: usize,
    operator_params: usize,
    proxy_ppl: f64,
    efficiency: f64,
    metric: &'static str,
    budget: f64,
}

pub fn search(cfg: &ExperimentConfig, root: &Path) -> Result<()> {
    let s = &cfg.search;
    let budget = s
        .budget
        .ok_or_else(|| Invalid("search needs a budget (--budget or search.budget)".into()))?;
    let space = match s.space {
        SpaceChoice::Default => SearchSpace::default(),
        SpaceChoice::Restricted => SearchSpace::restricted(),
    };
    let metric = match s.metric {
        MetricChoice::Params => EfficiencyMetric::Params,
        MetricChoice::Latency => {
            let path = s.lut.clone().unwrap_or_else(|| root.join("profile").join("lut.json"));
            let text = std::fs::read_to_string(&path).map_err(|_| Prerequisite {
                path: path.clone(),
                producer: "profile".into(),
            })?;
            let lut = LatencyLut::from_json(&text)?;
            if lut.host != "flop-model" {
                lut.check_host(&host_fingerprint())?;
            }
            EfficiencyMetric::Latency {
                lut,
                gen_len: s.gen_len,
                ctx: s.ctx,
            }
        }
    };
    let out = OutDir::create(root, "search")?;
    snapshot(&out, cfg)?;
    let sc = SearchConfig {
        population: s.population,
        sample: s.sample,
        cycles: s.cycles,
        offspring: s.offspring,
        budget,
        seed: cfg.seed,
        exec: s.exec,
    };
    let seeds: Vec<ArchitectureGenome> = if s.seed_decoding {
        vec![decoding_seed(space.ladder[0])]
    } else {
        Vec::new()
    };
    let corpus;
    let surrogate = AnalyticSurrogate::default();
    let proxy;
    let evaluator: &dyn Evaluator = match s.evaluator {
        EvaluatorChoice::Surrogate => &surrogate,
        EvaluatorChoice::Proxy => {
            corpus = cfg.corpus.load()?;
            proxy = ProxyEvaluator {
                corpus: &corpus,
                cfg: s.optim.clone(),
                budget: Budget::Steps(s.proxy_steps),
            };
            &proxy
        }
    };
    let result = run_search(&sc, &space, &metric, evaluator, &seeds)?;
    let best = &result.best;
    let bs = decode(&best.genome)?;
    if result.trajectory.best_so_far().windows(2).any(|w| w[1] > w[0]) {
        bail!("best-so-far increased during the search");
    }
    out.write("trajectory.jsonl", &result.trajectory.to_jsonl()?)?;
    out.write_json(
        "best.json",
        &BestFile {
            genome: &best.genome,
            ops: bs.codes(),
            depth: bs.depth(),
            width: bs.width(),
            attention_layers: bs.attention_layers(),
            operator_params: bs.operator_params(),
            proxy_ppl: best.proxy_ppl,
            efficiency: best.efficiency,
            metric: metric.name(),
            budget,
        },
    )?;
    let header = ["cycle", "best_so_far", "mutations"];
    let rows: Vec<Vec<String>> = result
        .trajectory
        .cycles
        .iter()
        .map(|c| {
            let m: Vec<String> = c.mutations.iter().map(|k| format!("{k:?}").to_lowercase()).collect();
            vec![c.cycle.to_string(), opt(c.best_so_far), m.join(" ")]
        })
        .collect();
    out.write_csv("cycles.csv", &header, &rows)?;
    let md = format!(
        "# Search ({} budget {budget})\n\nbest: {} (D = {}, attention layers = {}, proxy PPL {:.4}, cost {:.6})\n\n{}",
        metric.name(),
        best.genome,
        bs.depth(),
        bs.attention_layers(),
        best.proxy_ppl,
        best.efficiency,
        markdown_table(&header, &rows)
    );
    out.write("summary.md", &md)?;
    println!(
        "best: {} proxy PPL {:.4}, {} {:.6}",
        best.genome,
        best.proxy_ppl,
        metric.name(),
        best.efficiency
    );
    Ok(())
}
