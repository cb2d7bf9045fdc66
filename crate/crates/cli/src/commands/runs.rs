//! Training recipes (`train`, `ablate-attn`, `meta-eval`) and `report`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use slmlab::corpus::Corpus;
use slmlab::genome::{ArchitectureGenome, ModelSpec};
use slmlab::operators::OperatorKind;
use slmlab::stats::median;
use slmlab::trainer::{probe, train as train_model, write_telemetry_csv, TrainConfig};

use super::{seeds_or, snapshot, RunFile};
use crate::config::ExperimentConfig;
use crate::output::{markdown_table, num, opt, OutDir};
use crate::{Invalid, Prerequisite};

struct Variant {
    label: String,
    spec: ModelSpec,
    genome: Option<ArchitectureGenome>,
    optim: TrainConfig,
}

fn run_variants(
    out: &OutDir,
    corpus: &Corpus,
    variants: &[Variant],
    seeds: &[u64],
    windows: usize,
) -> Result<Vec<RunFile>> {
    let mut runs = Vec::new();
    for v in variants {
        for &seed in seeds {
            let tag = format!("{}-s{seed}", v.label.replace('=', ""));
            let optim = TrainConfig {
                seed,
                ..v.optim.clone()
            };
            let outcome = train_model(&v.spec, &optim, corpus)?;
            let telemetry = format!("{tag}.telemetry.csv");
            write_telemetry_csv(&out.path(&telemetry), &outcome.telemetry)?;
            let mut record = outcome.record;
            record.telemetry_path = Some(out.relative(&telemetry));
            record.genome = v.genome;
            let probes = if record.ok() {
                Some(probe(&outcome.model, corpus, windows, optim.context)?)
            } else {
                None
            };
            let run = RunFile {
                variant: v.label.clone(),
                record,
                probes,
            };
            out.write_json(&format!("{tag}.run.json"), &run)?;
            eprintln!("{tag}: final ppl {}", opt(run.record.final_ppl));
            runs.push(run);
        }
    }
    Ok(runs)
}

const RUN_HEADER: [&str; 13] = [
    "variant",
    "ops",
    "D",
    "W",
    "params",
    "seed",
    "wnorm",
    "steps",
    "final_ppl",
    "next_token_acc",
    "copy_acc",
    "recall_acc",
    "avg_acc",
];

fn run_row(r: &RunFile) -> Vec<String> {
    let p = r.probes;
    vec![
        r.variant.clone(),
        r.record.ops.clone(),
        r.record.depth.to_string(),
        r.record.width.to_string(),
        r.record.params.to_string(),
        r.record.seed.to_string(),
        r.record.wnorm.to_string(),
        r.record.steps.to_string(),
        opt(r.record.final_ppl),
        opt(p.map(|p| p.next_token)),
        opt(p.and_then(|p| p.copy)),
        opt(p.and_then(|p| p.recall)),
        opt(p.map(|p| p.average())),
    ]
}

/// Median final PPL and mean probe accuracy per variant, in first-seen order.
fn variant_summary(runs: &[RunFile]) -> String {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&RunFile>> = BTreeMap::new();
    for r in runs {
        if !groups.contains_key(r.variant.as_str()) {
            order.push(&r.variant);
        }
        groups.entry(&r.variant).or_default().push(r);
    }
    let rows: Vec<Vec<String>> = order
        .iter()
        .map(|v| {
            let g = &groups[v];
            let ppl: Vec<f64> = g.iter().filter_map(|r| r.record.final_ppl).collect();
            let acc: Vec<f64> = g.iter().filter_map(|r| r.probes.map(|p| p.average())).collect();
            vec![
                v.to_string(),
                g.len().to_string(),
                (g.len() - ppl.len()).to_string(),
                if ppl.is_empty() { "-".into() } else { num(median(&ppl)) },
                if acc.is_empty() {
                    "-".into()
                } else {
                    num(acc.iter().sum::<f64>() / acc.len() as f64)
                },
            ]
        })
        .collect();
    markdown_table(
        &["variant", "runs", "failed", "median_final_ppl", "mean_avg_acc"],
        &rows,
    )
}

fn write_runs(out: &OutDir, title: &str, runs: &[RunFile]) -> Result<()> {
    let rows: Vec<_> = runs.iter().map(run_row).collect();
    out.write_csv("runs.csv", &RUN_HEADER, &rows)?;
    let md = format!(
        "# {title}\n\n{}\n## Runs\n\n{}",
        variant_summary(runs),
        markdown_table(&RUN_HEADER, &rows)
    );
    out.write("summary.md", &md)?;
    print!("{}", variant_summary(runs));
    Ok(())
}

pub fn train(cfg: &ExperimentConfig, root: &Path) -> Result<()> {
    let out = OutDir::create(root, "train")?;
    snapshot(&out, cfg)?;
    let t = &cfg.train;
    let corpus = cfg.corpus.load()?;
    let (spec, genome) = t.model.resolve()?;
    let arms = if t.wnorm_ab {
        vec![true, false]
    } else {
        vec![t.optim.wnorm]
    };
    let variants: Vec<Variant> = arms
        .into_iter()
        .map(|wnorm| Variant {
            label: if wnorm { "wnorm".into() } else { "baseline".into() },
            spec: spec.clone(),
            genome,
            optim: TrainConfig {
                wnorm,
                weight_decay: if wnorm { 0.0 } else { t.optim.weight_decay },
                ..t.optim.clone()
            },
        })
        .collect();
    let runs = run_variants(&out, &corpus, &variants, &seeds_or(&t.seeds, cfg.seed), t.probe_windows)?;
    write_runs(&out, "Training runs", &runs)
}

/// Keep `k` of the model's attention layers as full attention, spread
/// evenly; the rest become sliding-window attention.
fn attention_variant(ops: &[OperatorKind], k: usize, window: usize) -> Result<Vec<OperatorKind>> {
    let slots: Vec<usize> = (0..ops.len()).filter(|&i| ops[i].is_attention()).collect();
    if k > slots.len() {
        bail!(Invalid(format!(
            "{k} full attention layers requested, model has {} attention layers",
            slots.len()
        )));
    }
    let keep: Vec<usize> = (0..k).map(|j| slots[(2 * j + 1) * slots.len() / (2 * k)]).collect();
    Ok(ops
        .iter()
        .enumerate()
        .map(|(i, &op)| match (op.is_attention(), keep.contains(&i)) {
            (true, true) => OperatorKind::FullAttention,
            (true, false) => OperatorKind::SlidingWindowAttention { window },
            _ => op,
        })
        .collect())
}

pub fn ablate_attn(cfg: &ExperimentConfig, root: &Path) -> Result<()> {
    let out = OutDir::create(root, "ablate-attn")?;
    snapshot(&out, cfg)?;
    let a = &cfg.ablate_attn;
    let corpus = cfg.corpus.load()?;
    let (base, _) = a.model.resolve()?;
    let variants = a
        .full_attention
        .iter()
        .map(|&k| {
            let ops = attention_variant(&base.ops, k, a.window)?;
            Ok(Variant {
                label: format!("full={k}"),
                spec: ModelSpec::new(ops, base.mixer_config(), base.meta_tokens)?,
                genome: None,
                optim: a.optim.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let runs = run_variants(&out, &corpus, &variants, &seeds_or(&a.seeds, cfg.seed), a.probe_windows)?;
    write_runs(&out, &format!("Attention ablation (window {})", a.window), &runs)
}

pub fn meta_eval(cfg: &ExperimentConfig, root: &Path) -> Result<()> {
    let out = OutDir::create(root, "meta-eval")?;
    snapshot(&out, cfg)?;
    let m = &cfg.meta_eval;
    let corpus = cfg.corpus.load()?;
    let (base, genome) = m.model.resolve()?;
    let variants: Vec<Variant> = m
        .meta_tokens
        .iter()
        .map(|&n| Variant {
            label: format!("meta={n}"),
            spec: ModelSpec {
                meta_tokens: n,
                ..base.clone()
            },
            genome: genome.map(|g| ArchitectureGenome { meta_tokens: n, ..g }),
            optim: m.optim.clone(),
        })
        .collect();
    let runs = run_variants(&out, &corpus, &variants, &seeds_or(&m.seeds, cfg.seed), m.probe_windows)?;
    write_runs(&out, "Meta-token evaluation", &runs)
}

fn collect_runs(inputs: &[PathBuf]) -> Result<Vec<(PathBuf, RunFile)>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|e| e.to_string_lossy().ends_with(".run.json"))
                .collect();
            entries.sort();
            files.extend(entries);
        } else if p.is_file() {
            files.push(p.clone());
        } else {
            bail!(Prerequisite {
                path: p.clone(),
                producer: "train".into()
            });
        }
    }
    files
        .into_iter()
        .map(|f| {
            let text = std::fs::read_to_string(&f)?;
            let run: RunFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", f.display()))?;
            Ok((f, run))
        })
        .collect()
}

/// Two-sided sign test p-value for `wins` of `n` non-tied pairs.
fn sign_test(wins: usize, n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let k = wins.min(n - wins);
    let mut c = 1.0;
    let mut tail = 0.0;
    for i in 0..=k {
        if i > 0 {
            c = c * (n - i + 1) as f64 / i as f64;
        }
        tail += c;
    }
    (2.0 * tail / 2f64.powi(n as i32)).min(1.0)
}

pub fn report(cfg: &ExperimentConfig, root: &Path) -> Result<()> {
    let inputs = if cfg.report.inputs.is_empty() {
        vec![root.join("train")]
    } else {
        cfg.report.inputs.clone()
    };
    let runs = collect_runs(&inputs)?;
    if runs.is_empty() {
        bail!(Prerequisite {
            path: inputs[0].clone(),
            producer: "train".into()
        });
    }
    let out = OutDir::create(root, "report")?;
    snapshot(&out, cfg)?;
    let runs: Vec<RunFile> = runs.into_iter().map(|(_, r)| r).collect();
    let rows: Vec<_> = runs.iter().map(run_row).collect();
    out.write_csv("report.csv", &RUN_HEADER, &rows)?;

    // wnorm vs baseline pairs sharing architecture and seed
    let mut pairs: BTreeMap<(String, usize, u64), [Option<f64>; 2]> = BTreeMap::new();
    for r in &runs {
        let slot = &mut pairs
            .entry((r.record.ops.clone(), r.record.width, r.record.seed))
            .or_default()[r.record.wnorm as usize];
        *slot = r.record.final_ppl.or(Some(f64::INFINITY));
    }
    let paired: Vec<_> = pairs
        .into_iter()
        .filter_map(|(k, [base, wn])| Some((k, wn?, base?)))
        .collect();
    let mut md = format!("# Report\n\n{}\n", variant_summary(&runs));
    if !paired.is_empty() {
        let header = ["ops", "W", "seed", "wnorm_ppl", "baseline_ppl", "wnorm_better_or_equal"];
        let prow: Vec<Vec<String>> = paired
            .iter()
            .map(|((ops, w, seed), wn, base)| {
                vec![
                    ops.clone(),
                    w.to_string(),
                    seed.to_string(),
                    num(*wn),
                    num(*base),
                    (wn <= base).to_string(),
                ]
            })
            .collect();
        out.write_csv("paired.csv", &header, &prow)?;
        let wins = paired.iter().filter(|(_, wn, base)| wn < base).count();
        let losses = paired.iter().filter(|(_, wn, base)| wn > base).count();
        let ties = paired.len() - wins - losses;
        let line = format!(
            "wnorm ≤ baseline in {}/{} pairs ({wins} wins, {ties} ties, {losses} losses); sign test p = {:.4}\n",
            wins + ties,
            paired.len(),
            sign_test(wins, wins + losses)
        );
        print!("{line}");
        md.push_str(&format!(
            "## Weight normalization pairs\n\n{line}\n{}\n",
            markdown_table(&header, &prow)
        ));
    }
    md.push_str(&format!("## Runs\n\n{}", markdown_table(&RUN_HEADER, &rows)));
    out.write("report.md", &md)?;
    print!("{}", variant_summary(&runs));
    Ok(())
}
