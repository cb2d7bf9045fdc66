//! `sweep` trains the depth x width grid; `fit` turns it into a scaling
//! law, extrapolation errors and an optional latency sweet spot.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use slmlab::latency::LatencyLut;
use slmlab::scaling::{fit as fit_law, fit_fixed_n, sweet_spot, FitMethod, FitOptions, ScalingPoint, SweetSpotResult};
use slmlab::trainer::{llama_spec, sweep_depth_width, train as train_model, RunRecord, RunStatus};

use super::snapshot;
use crate::config::ExperimentConfig;
use crate::output::{markdown_table, num, opt, OutDir};
use crate::{Invalid, Prerequisite};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepFile {
    pub records: Vec<RunRecord>,
}

pub fn sweep(cfg: &ExperimentConfig, root: &Path) -> Result<()> {
    let out = OutDir::create(root, "sweep")?;
    snapshot(&out, cfg)?;
    let s = &cfg.sweep;
    let corpus = cfg.corpus.load()?;
    let optim = slmlab::trainer::TrainConfig {
        seed: cfg.seed,
        ..s.optim.clone()
    };
    let mut records = sweep_depth_width(&s.depths, &s.widths, &optim, &corpus, s.exec)?;
    for &[d, w] in &s.extra_cells {
        if records.iter().any(|r| r.depth == d && r.width == w) {
            continue;
        }
        let rec = llama_spec(d, w)
            .and_then(|spec| train_model(&spec, &optim, &corpus))
            .map(|o| o.record)
            .with_context(|| format!("training extra cell D={d} W={w}"))?;
        records.push(rec);
    }
    let header = ["D", "W", "params", "tokens", "steps", "final_ppl", "status"];
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            vec![
                r.depth.to_string(),
                r.width.to_string(),
                r.params.to_string(),
                r.tokens_seen.to_string(),
                r.steps.to_string(),
                opt(r.final_ppl),
                if r.ok() { "ok".into() } else { "failed".into() },
            ]
        })
        .collect();
    out.write_json("sweep.json", &SweepFile { records })?;
    out.write_csv("points.csv", &header, &rows)?;
    let table = markdown_table(&header, &rows);
    out.write("summary.md", &format!("# Depth/width sweep\n\n{table}"))?;
    print!("{table}");
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    #[serde(rename = "D")]
    pub depth: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub observed: f64,
    pub predicted: f64,
    pub rel_err: f64,
    pub held_out: bool,
}

fn point(r: &RunRecord) -> Option<ScalingPoint> {
    let ppl = r.final_ppl.filter(|_| r.status == RunStatus::Ok)?;
    Some(ScalingPoint {
        depth: r.depth as f64,
        width: r.width as f64,
        tokens: r.tokens_seen as f64,
        loss: ppl,
    })
}

pub fn fit(cfg: &ExperimentConfig, root: &Path) -> Result<()> {
    let f = &cfg.fit;
    let input = f.input.clone().unwrap_or_else(|| root.join("sweep").join("sweep.json"));
    let text = std::fs::read_to_string(&input).map_err(|_| Prerequisite {
        path: input.clone(),
        producer: "sweep".into(),
    })?;
    let sweep: SweepFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", input.display()))?;
    let out = OutDir::create(root, "fit")?;
    snapshot(&out, cfg)?;

    let is_held = |r: &RunRecord| f.holdout.iter().any(|&[d, w]| d == r.depth && w == r.width);
    for &[d, w] in &f.holdout {
        if !sweep.records.iter().any(|r| r.depth == d && r.width == w) {
            bail!(Invalid(format!(
                "held-out cell D={d} W={w} is not in the sweep; add it to sweep.extra_cells"
            )));
        }
    }
    let train_pts: Vec<ScalingPoint> = sweep.records.iter().filter(|r| !is_held(r)).filter_map(point).collect();
    let single_n = train_pts.windows(2).all(|p| p[0].tokens == p[1].tokens);
    let method = f
        .method
        .unwrap_or(if single_n { FitMethod::FixedN } else { FitMethod::Full });
    let opts = FitOptions {
        starts: f.starts,
        seed: cfg.seed,
        ..FitOptions::default()
    };
    let law = match method {
        FitMethod::Full => fit_law(&train_pts, &opts)?,
        FitMethod::FixedN => fit_fixed_n(&train_pts, &opts)?,
    };
    out.write("fit.json", &(law.to_json()? + "\n"))?;

    let mut preds = Vec::new();
    for r in &sweep.records {
        let Some(p) = point(r) else { continue };
        let predicted = law.predict(p.depth, p.width, p.tokens)?;
        preds.push(Prediction {
            depth: r.depth,
            width: r.width,
            observed: p.loss,
            predicted,
            rel_err: (predicted - p.loss).abs() / p.loss,
            held_out: is_held(r),
        });
    }
    let header = ["D", "W", "observed_ppl", "predicted_ppl", "rel_err", "held_out"];
    let rows: Vec<Vec<String>> = preds
        .iter()
        .map(|p| {
            vec![
                p.depth.to_string(),
                p.width.to_string(),
                num(p.observed),
                num(p.predicted),
                num(p.rel_err),
                p.held_out.to_string(),
            ]
        })
        .collect();
    out.write_csv("predictions.csv", &header, &rows)?;
    let lp = law.params;
    let mut md = format!(
        "# Scaling-law fit ({method:?})\n\nL0 = {:.4}, a = {:.4}, alpha = {:.4}, b = {:.4}, beta = {:.4}, c = {:.4}, gamma = {:.4}; log-residual RMSE {:.4} over {} points\n\n{}",
        lp.l0, lp.a, lp.alpha, lp.b, lp.beta, lp.c, lp.gamma, law.residual, train_pts.len(),
        markdown_table(&header, &rows)
    );

    if let Some(ss) = &f.sweet_spot {
        let lut_path = ss.lut.clone().unwrap_or_else(|| root.join("profile").join("lut.json"));
        let text = std::fs::read_to_string(&lut_path).map_err(|_| Prerequisite {
            path: lut_path.clone(),
            producer: "profile".into(),
        })?;
        let lut = LatencyLut::from_json(&text)?;
        let grid: Vec<(usize, usize)> = ss
            .depths
            .iter()
            .flat_map(|&d| ss.widths.iter().map(move |&w| (d, w)))
            .collect();
        let tokens = ss.tokens.unwrap_or_else(|| train_pts.first().map_or(1.0, |p| p.tokens));
        let result = sweet_spot(
            &law,
            |d, w| Ok(lut.estimate(&llama_spec(d, w)?, ss.gen_len, ss.ctx)?.seconds()),
            ss.budget,
            &grid,
            tokens,
        )?;
        out.write_json("sweet_spot.json", &result)?;
        md.push_str(&match result {
            SweetSpotResult::Feasible(s) => format!(
                "\nSweet spot under {:.6} s: D = {}, W = {}, predicted PPL {:.4}, latency {:.6} s\n",
                s.budget, s.depth, s.width, s.predicted, s.latency
            ),
            SweetSpotResult::Infeasible { budget, min_latency } => {
                format!("\nNo grid cell fits {budget:.6} s; the fastest needs {min_latency:.6} s\n")
            }
        });
    }
    out.write("summary.md", &md)?;
    print!("{md}");
    Ok(())
}
