//! Fitness sources for the search: real short training or an analytic
//! stand-in with the same shape.

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::Result;
use crate::genome::{ArchitectureGenome, ModelSpec};
use crate::operators::OperatorKind;
use crate::trainer::{proxy_eval, Budget, TrainConfig};

/// Proxy PPL of one decoded genome; lower is better. `seed` is unique per
/// evaluated genome so repeated genomes train independently.
pub trait Evaluator: Sync {
    fn evaluate(&self, genome: &ArchitectureGenome, spec: &ModelSpec, seed: u64) -> Result<f64>;
}

/// Short training on the toy corpus.
pub struct ProxyEvaluator<'a> {
    pub corpus: &'a Corpus,
    pub cfg: TrainConfig,
    pub budget: Budget,
}

impl Evaluator for ProxyEvaluator<'_> {
    fn evaluate(&self, _genome: &ArchitectureGenome, spec: &ModelSpec, seed: u64) -> Result<f64> {
        let cfg = TrainConfig {
            seed,
            ..self.cfg.clone()
        };
        proxy_eval(spec, self.budget, &cfg, self.corpus)
    }
}

/// `exp(L0 + a·D^-α + b·W^-β + mix)`: the depth/width law at fixed data
/// plus an operator-mix term that rewards a few attention layers, DeltaNet
/// over Mamba2 and FFN capacity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyticSurrogate {
    pub l0: f64,
    pub a: f64,
    pub alpha: f64,
    pub b: f64,
    pub beta: f64,
    /// Log-loss reward per attention layer, up to `attn_cap` layers.
    pub attn_gain: f64,
    pub attn_cap: usize,
    /// Penalty for a model with no attention at all.
    pub no_attn_penalty: f64,
    /// Reward scaled by the DeltaNet share of the mixers.
    pub delta_gain: f64,
    /// Reward scaled by FFNs per mixer.
    pub ffn_gain: f64,
}

impl Default for AnalyticSurrogate {
    fn default() -> Self {
        AnalyticSurrogate {
            l0: 1.0,
            a: 2.0,
            alpha: 0.5,
            b: 8.0,
            beta: 0.5,
            attn_gain: 0.05,
            attn_cap: 4,
            no_attn_penalty: 0.2,
            delta_gain: 0.1,
            ffn_gain: 0.05,
        }
    }
}

impl AnalyticSurrogate {
    pub fn log_ppl(&self, spec: &ModelSpec) -> f64 {
        let mixers = spec.ops.iter().filter(|o| o.is_mixer()).count().max(1) as f64;
        let d = spec.depth() as f64;
        let w = spec.hidden as f64;
        let count = |k: OperatorKind| spec.ops.iter().filter(|&&o| o == k).count();
        let attn = spec.attention_layers();
        let mut mix = -self.attn_gain * attn.min(self.attn_cap) as f64;
        if attn == 0 {
            mix += self.no_attn_penalty;
        }
        mix -= self.delta_gain * count(OperatorKind::DeltaNet) as f64 / mixers;
        mix -= self.ffn_gain * count(OperatorKind::Ffn) as f64 / mixers;
        self.l0 + self.a * d.powf(-self.alpha) + self.b * w.powf(-self.beta) + mix
    }
}

impl Evaluator for AnalyticSurrogate {
    fn evaluate(&self, _genome: &ArchitectureGenome, spec: &ModelSpec, _seed: u64) -> Result<f64> {
        Ok(self.log_ppl(spec).exp())
    }
}
