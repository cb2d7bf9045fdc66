//! Augmented depth/width scaling law
//! `L(D, W, N) = L0 + a·D^-α + b·W^-β + c·N^-γ`: fitting, prediction and
//! latency-constrained sweet-spot selection.
//!
//! Fits minimize a Huber loss on log-space residuals `ln pred - ln obs`
//! with Levenberg-Marquardt over softplus-reparameterized coefficients and
//! exponents, restarted from many seeded initial points.

mod lm;
#[cfg(test)]
mod tests;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;

pub const MIN_POINTS: usize = 7;
pub const DEFAULT_STARTS: usize = 24;
/// Huber transition on log residuals.
pub const HUBER_DELTA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    #[serde(rename = "D")]
    pub depth: f64,
    #[serde(rename = "W")]
    pub width: f64,
    #[serde(rename = "N")]
    pub tokens: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LawParams {
    #[serde(rename = "L0")]
    pub l0: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl LawParams {
    pub fn predict(&self, d: f64, w: f64, n: f64) -> f64 {
        self.l0 + self.a * d.powf(-self.alpha) + self.b * w.powf(-self.beta) + self.c * n.powf(-self.gamma)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    /// All seven parameters.
    Full,
    /// Data term dropped; `L0` absorbs it. For records sharing one N.
    FixedN,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingLawFit {
    pub params: LawParams,
    /// RMSE of `ln pred - ln obs` over the fitted points.
    pub residual: f64,
    pub points: Vec<ScalingPoint>,
    pub seed: u64,
    pub method: FitMethod,
}

impl ScalingLawFit {
    pub fn predict(&self, d: f64, w: f64, n: f64) -> Result<f64> {
        if !(d > 0.0 && w > 0.0 && n > 0.0) {
            return Err(Error::Config(format!(
                "prediction needs positive D, W, N; got {d}, {w}, {n}"
            )));
        }
        Ok(self.params.predict(d, w, n))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub starts: usize,
    pub seed: u64,
    pub exec: Execution,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            starts: DEFAULT_STARTS,
            seed: 0,
            exec: Execution::default(),
        }
    }
}

fn distinct(xs: impl Iterator<Item = f64>) -> usize {
    let mut v: Vec<f64> = xs.collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v.len()
}

fn check_points(points: &[ScalingPoint], min_points: usize) -> Result<()> {
    if points.len() < min_points {
        return Err(Error::GridCoverage(format!(
            "{} points given, at least {min_points} needed",
            points.len()
        )));
    }
    if let Some(p) = points
        .iter()
        .find(|p| !(p.depth > 0.0 && p.width > 0.0 && p.tokens > 0.0 && p.loss > 0.0 && p.loss.is_finite()))
    {
        return Err(Error::Config(format!("fit point {p:?} must be positive and finite")));
    }
    let nd = distinct(points.iter().map(|p| p.depth));
    let nw = distinct(points.iter().map(|p| p.width));
    if nd < 2 || nw < 2 {
        return Err(Error::GridCoverage(format!(
            "{nd} distinct depths and {nw} distinct widths; at least 2 of each needed"
        )));
    }
    Ok(())
}

/// Fit all seven parameters. Needs ≥ 7 points with ≥ 2 distinct D and W.
pub fn fit(points: &[ScalingPoint], opts: &FitOptions) -> Result<ScalingLawFit> {
    check_points(points, MIN_POINTS)?;
    if distinct(points.iter().map(|p| p.tokens)) < 2 {
        return Err(Error::GridCoverage(
            "a single token count cannot identify the data term; use the fixed-N fit".into(),
        ));
    }
    fit_with(points, opts, FitMethod::Full)
}

/// Fit `L0 + a·D^-α + b·W^-β` on records that share one token budget.
pub fn fit_fixed_n(points: &[ScalingPoint], opts: &FitOptions) -> Result<ScalingLawFit> {
    check_points(points, lm::free_params(FitMethod::FixedN))?;
    fit_with(points, opts, FitMethod::FixedN)
}

fn fit_with(points: &[ScalingPoint], opts: &FitOptions, method: FitMethod) -> Result<ScalingLawFit> {
    if opts.starts == 0 {
        return Err(Error::Config("fit needs at least one start".into()));
    }
    let (lo, hi) = points
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), p| (lo.min(p.loss), hi.max(p.loss)));
    let span = (hi - lo).max(lo * 0.1);
    let starts: Vec<[f64; 7]> = {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        (0..opts.starts)
            .map(|_| {
                let u = |rng: &mut ChaCha8Rng, a: f64, b: f64| a + (b - a) * rng.gen::<f64>();
                let log_u =
                    |rng: &mut ChaCha8Rng, a: f64, b: f64| (a.ln() + (b.ln() - a.ln()) * rng.gen::<f64>()).exp();
                [
                    u(&mut rng, 0.5 * lo, lo),
                    log_u(&mut rng, 0.1 * span, 100.0 * span),
                    log_u(&mut rng, 0.1 * span, 100.0 * span),
                    log_u(&mut rng, 0.1 * span, 100.0 * span),
                    u(&mut rng, 0.1, 2.0),
                    u(&mut rng, 0.1, 2.0),
                    u(&mut rng, 0.1, 2.0),
                ]
            })
            .collect()
    };
    let results = opts.exec.map(&starts, |s| lm::solve(points, method, s));
    // Lowest cost wins; `min_by` keeps the earliest start on ties.
    let (best, _) = results
        .into_iter()
        .filter(|(_, c)| c.is_finite())
        .min_by(|(_, a), (_, b)| a.total_cmp(b))
        .ok_or_else(|| Error::Contract("every fit start diverged".into()))?;
    let residual = (points
        .iter()
        .map(|p| (best.predict(p.depth, p.width, p.tokens).ln() - p.loss.ln()).powi(2))
        .sum::<f64>()
        / points.len() as f64)
        .sqrt();
    Ok(ScalingLawFit {
        params: best,
        residual,
        points: points.to_vec(),
        seed: opts.seed,
        method,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweetSpot {
    #[serde(rename = "D")]
    pub depth: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub predicted: f64,
    pub latency: f64,
    pub budget: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "result")]
pub enum SweetSpotResult {
    Feasible(SweetSpot),
    Infeasible { budget: f64, min_latency: f64 },
}

/// Among `(D, W)` candidates whose latency is within `budget`, pick the
/// lowest predicted loss at `tokens`; ties go to lower latency, then
/// smaller D, then smaller W.
pub fn sweet_spot<F>(
    fit: &ScalingLawFit,
    latency: F,
    budget: f64,
    grid: &[(usize, usize)],
    tokens: f64,
) -> Result<SweetSpotResult>
where
    F: Fn(usize, usize) -> Result<f64>,
{
    if grid.is_empty() {
        return Err(Error::Config("sweet-spot grid is empty".into()));
    }
    let mut best: Option<SweetSpot> = None;
    let mut min_latency = f64::INFINITY;
    for &(d, w) in grid {
        let lat = latency(d, w)?;
        min_latency = min_latency.min(lat);
        if lat > budget {
            continue;
        }
        let cand = SweetSpot {
            depth: d,
            width: w,
            predicted: fit.predict(d as f64, w as f64, tokens)?,
            latency: lat,
            budget,
        };
        let better = match &best {
            None => true,
            Some(b) => cand
                .predicted
                .total_cmp(&b.predicted)
                .then(cand.latency.total_cmp(&b.latency))
                .then(cand.depth.cmp(&b.depth))
                .then(cand.width.cmp(&b.width))
                .is_lt(),
        };
        if better {
            best = Some(cand);
        }
    }
    Ok(match best {
        Some(s) => SweetSpotResult::Feasible(s),
        None => SweetSpotResult::Infeasible { budget, min_latency },
    })
}
