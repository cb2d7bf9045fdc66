//! Toy-scale training loop: Adam, cosine schedule, weight-norm projection,
//! telemetry and proxy evaluation.

mod probes;
mod wnorm;

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, VOCAB};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::genome::{default_head_dim, ArchitectureGenome, ModelSpec, FFN_MULT};
use crate::graph::Graph;
use crate::model::Model;
use crate::operators::{MixerConfig, OperatorKind, WnormCase};
use crate::tensor::DType;

pub use probes::{probe, Probes};
pub use wnorm::{wnorm_project, wnorm_project_in_place};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.95;
pub const ADAM_EPS: f64 = 1e-8;
/// Desk-scale proxy and full budgets in optimizer steps.
pub const SHORT_STEPS: usize = 2_000;
pub const FULL_STEPS: usize = 20_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_init: f64,
    /// Cosine floor; `lr_init / 100` when absent.
    pub lr_min: Option<f64>,
    pub steps: usize,
    /// Tokens per optimizer step; a multiple of `context`.
    pub batch_tokens: usize,
    pub context: usize,
    pub weight_decay: f64,
    pub wnorm: bool,
    pub seed: u64,
    /// Telemetry row every this many steps (and at the last step).
    pub log_every: usize,
    /// Validation windows of length `context`.
    pub eval_windows: usize,
    pub dtype: DType,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_init: 1e-3,
            lr_min: None,
            steps: SHORT_STEPS,
            batch_tokens: 128,
            context: 32,
            weight_decay: 0.0,
            wnorm: true,
            seed: 0,
            log_every: 10,
            eval_windows: 64,
            dtype: DType::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.wnorm && self.weight_decay != 0.0 {
            return bad("weight decay must be 0 when weight normalization is on".into());
        }
        if !(self.lr_init > 0.0 && self.lr_init.is_finite()) {
            return bad(format!("lr_init {} must be positive", self.lr_init));
        }
        if let Some(m) = self.lr_min {
            if !(0.0..=self.lr_init).contains(&m) {
                return bad(format!("lr_min {m} must lie in [0, lr_init]"));
            }
        }
        if self.context == 0 || self.batch_tokens == 0 || !self.batch_tokens.is_multiple_of(self.context) {
            return bad(format!(
                "batch_tokens {} must be a positive multiple of context {}",
                self.batch_tokens, self.context
            ));
        }
        if self.log_every == 0 || self.eval_windows == 0 {
            return bad("log_every and eval_windows must be positive".into());
        }
        if self.weight_decay < 0.0 {
            return bad("weight decay must be non-negative".into());
        }
        Ok(())
    }

    pub fn lr_floor(&self) -> f64 {
        self.lr_min.unwrap_or(self.lr_init / 100.0)
    }

    /// Cosine decay from `lr_init` at step 0 to the floor at the last step.
    pub fn lr_at(&self, step: usize) -> f64 {
        let lo = self.lr_floor();
        if self.steps <= 1 {
            return self.lr_init;
        }
        let frac = step.min(self.steps - 1) as f64 / (self.steps - 1) as f64;
        lo + 0.5 * (self.lr_init - lo) * (1.0 + (std::f64::consts::PI * frac).cos())
    }

    pub fn sequences(&self) -> usize {
        self.batch_tokens / self.context
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub step: usize,
    pub loss: f64,
    /// Mean absolute gradient entry over all trainable tensors.
    pub grad_norm: f64,
    /// Mean Frobenius norm of the Case1/Case2 matrices.
    pub weight_norm: f64,
    pub lr: f64,
}

pub fn write_telemetry_csv(path: &Path, rows: &[Telemetry]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,loss,grad_norm,weight_norm,lr")?;
    for r in rows {
        writeln!(
            f,
            "{},{:e},{:e},{:e},{:e}",
            r.step, r.loss, r.grad_norm, r.weight_norm, r.lr
        )?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state")]
pub enum RunStatus {
    Ok,
    Failed { last_good_step: Option<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub genome: Option<ArchitectureGenome>,
    pub ops: String,
    #[serde(rename = "D")]
    pub depth: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub params: usize,
    pub tokens_seen: usize,
    pub steps: usize,
    pub initial_ppl: Option<f64>,
    pub final_ppl: Option<f64>,
    pub proxy_ppl: Option<f64>,
    pub telemetry_path: Option<String>,
    pub seed: u64,
    pub wnorm: bool,
    pub status: RunStatus,
    /// All-zero rows/columns left unprojected by the norm guard.
    pub wnorm_zero_guards: usize,
}

impl RunRecord {
    pub fn ok(&self) -> bool {
        self.status == RunStatus::Ok
    }
}

pub struct TrainOutcome {
    pub record: RunRecord,
    pub telemetry: Vec<Telemetry>,
    pub model: Model,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(model: &Model) -> Self {
        let zeros = || model.params.iter().map(|p| vec![0.0; p.len()]).collect();
        Adam {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    fn step(&mut self, model: &mut Model, grads: &[Vec<f64>], lr: f64, wd: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (i, p) in model.params.iter_mut().enumerate() {
            let decay = wd > 0.0 && model.specs[i].case != WnormCase::Exempt;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let g = grads[i][j];
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
                if decay {
                    *w -= lr * wd * *w;
                }
                *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

fn project_model(model: &mut Model) -> usize {
    let mut guards = 0;
    for (p, s) in model.params.iter_mut().zip(&model.specs) {
        guards += wnorm_project_in_place(p, s.case);
    }
    guards
}

fn mean_weight_norm(model: &Model) -> f64 {
    let norms: Vec<f64> = model
        .params
        .iter()
        .zip(&model.specs)
        .filter(|(_, s)| s.case != WnormCase::Exempt)
        .map(|(p, _)| p.l2_norm())
        .collect();
    norms.iter().sum::<f64>() / norms.len().max(1) as f64
}

/// Validation perplexity with the plain forward forms.
pub fn evaluate(model: &Model, corpus: &Corpus, cfg: &TrainConfig) -> Result<f64> {
    let v = corpus.validation(cfg.eval_windows, cfg.context)?;
    Ok(model.nll(&v)?.exp())
}

/// Train `spec` from scratch. Deterministic in `cfg.seed`.
pub fn train(spec: &ModelSpec, cfg: &TrainConfig, corpus: &Corpus) -> Result<TrainOutcome> {
    train_observed(spec, cfg, corpus, |_, _| {})
}

/// [`train`] with `observe(step, model)` called after every completed
/// optimizer step (post-projection).
pub fn train_observed<F>(spec: &ModelSpec, cfg: &TrainConfig, corpus: &Corpus, mut observe: F) -> Result<TrainOutcome>
where
    F: FnMut(usize, &Model),
{
    cfg.validate()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    data_rng.set_stream(1);
    let mut model = Model::init(spec.clone(), VOCAB, &mut init_rng)?;
    let mut guards = 0;
    if cfg.wnorm {
        guards += project_model(&mut model);
    }
    let initial = evaluate(&model, corpus, cfg)?;
    let mut adam = Adam::new(&model);
    let mut telemetry = Vec::new();
    let mut last_good = None;
    let mut failed = false;
    let mut tokens = 0;
    for step in 0..cfg.steps {
        let batch = corpus.sample(&mut data_rng, cfg.sequences(), cfg.context)?;
        let mut g = Graph::with_dtype(cfg.dtype);
        let (loss, vars) = model.loss_graph(&mut g, &batch)?;
        let loss_val = g.value(loss).data()[0];
        let grads = g.backward(loss)?;
        let grads: Vec<Vec<f64>> = vars
            .iter()
            .zip(&model.params)
            .map(|(v, p)| grads.raw(*v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
            .collect();
        let finite = loss_val.is_finite() && grads.iter().flatten().all(|x| x.is_finite());
        if !finite {
            failed = true;
            break;
        }
        let lr = cfg.lr_at(step);
        adam.step(&mut model, &grads, lr, cfg.weight_decay);
        if cfg.wnorm {
            guards += project_model(&mut model);
        }
        if model.params.iter().any(|p| !p.all_finite()) {
            failed = true;
            break;
        }
        tokens += cfg.batch_tokens;
        last_good = Some(step);
        observe(step, &model);
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            let count: usize = grads.iter().map(Vec::len).sum();
            let grad_norm = grads.iter().flatten().map(|x| x.abs()).sum::<f64>() / count as f64;
            telemetry.push(Telemetry {
                step,
                loss: loss_val,
                grad_norm,
                weight_norm: mean_weight_norm(&model),
                lr,
            });
        }
    }
    let final_ppl = if failed {
        None
    } else {
        Some(evaluate(&model, corpus, cfg)?)
    };
    let final_ppl = final_ppl.filter(|p| p.is_finite());
    let status = if final_ppl.is_some() {
        RunStatus::Ok
    } else {
        RunStatus::Failed {
            last_good_step: last_good,
        }
    };
    let record = RunRecord {
        genome: None,
        ops: spec.codes(),
        depth: spec.depth(),
        width: spec.width(),
        params: model.params_count(),
        tokens_seen: tokens,
        steps: last_good.map_or(0, |s| s + 1),
        initial_ppl: Some(initial).filter(|p| p.is_finite()),
        final_ppl,
        proxy_ppl: None,
        telemetry_path: None,
        seed: cfg.seed,
        wnorm: cfg.wnorm,
        status,
        wnorm_zero_guards: guards,
    };
    Ok(TrainOutcome {
        record,
        telemetry,
        model,
    })
}

/// Training budget for proxy evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    Short,
    Full,
    Steps(usize),
}

impl Budget {
    pub fn steps(self) -> usize {
        match self {
            Budget::Short => SHORT_STEPS,
            Budget::Full => FULL_STEPS,
            Budget::Steps(n) => n,
        }
    }
}

/// Validation PPL after training for `budget`; the search fitness.
pub fn proxy_eval(spec: &ModelSpec, budget: Budget, cfg: &TrainConfig, corpus: &Corpus) -> Result<f64> {
    let cfg = TrainConfig {
        steps: budget.steps(),
        ..cfg.clone()
    };
    let out = train(spec, &cfg, corpus)?;
    out.record.final_ppl.ok_or_else(|| {
        Error::Contract(format!(
            "proxy run diverged after step {:?}",
            match out.record.status {
                RunStatus::Failed { last_good_step } => last_good_step,
                RunStatus::Ok => None,
            }
        ))
    })
}

/// Attention+FFN model with `depth` blocks at `width`, the family of the
/// depth/width sweeps.
pub fn llama_spec(depth: usize, width: usize) -> Result<ModelSpec> {
    let ops = (0..depth)
        .flat_map(|_| [OperatorKind::FullAttention, OperatorKind::Ffn])
        .collect();
    ModelSpec::new(ops, MixerConfig::for_width(width, default_head_dim(width), FFN_MULT), 0)
}

/// Train every `(depth, width)` cell with the same token budget. Failed
/// cells are recorded and the grid continues.
pub fn sweep_depth_width(
    depths: &[usize],
    widths: &[usize],
    cfg: &TrainConfig,
    corpus: &Corpus,
    exec: Execution,
) -> Result<Vec<RunRecord>> {
    if depths.is_empty() || widths.is_empty() {
        return Err(Error::Config("depth/width grid is empty".into()));
    }
    cfg.validate()?;
    let cells: Vec<(usize, usize)> = depths
        .iter()
        .flat_map(|&d| widths.iter().map(move |&w| (d, w)))
        .collect();
    let runs = exec.map(&cells, |&(d, w)| -> RunRecord {
        let spec = llama_spec(d, w);
        match spec.and_then(|s| train(&s, cfg, corpus)) {
            Ok(out) => out.record,
            Err(_) => RunRecord {
                genome: None,
                ops: String::new(),
                depth: d,
                width: w,
                params: 0,
                tokens_seen: 0,
                steps: 0,
                initial_ppl: None,
                final_ppl: None,
                proxy_ppl: None,
                telemetry_path: None,
                seed: cfg.seed,
                wnorm: cfg.wnorm,
                status: RunStatus::Failed { last_good_step: None },
                wnorm_zero_guards: 0,
            },
        }
    });
    Ok(runs)
}
