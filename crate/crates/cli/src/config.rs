//! Declarative experiment file. Every section is optional; unknown keys
//! are rejected so typos fail loudly.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use slmlab::corpus::{Corpus, CorpusKind, DEFAULT_TOKENS};
use slmlab::exec::Execution;
use slmlab::genome::{decode, preset, ArchitectureGenome, ModelSpec, DESK_LADDER, FFN_MULT};
use slmlab::latency::{ProfileOptions, Regime};
use slmlab::operators::{parse_ops, MixerConfig, OperatorKind};
use slmlab::scaling::FitMethod;
use slmlab::trainer::TrainConfig;

use crate::Invalid;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub profile: ProfileSection,
    #[serde(default)]
    pub search: SearchSection,
    #[serde(default)]
    pub report: ReportSection,
    #[serde(default, rename = "ablate-attn")]
    pub ablate_attn: AblateAttnSection,
    #[serde(default, rename = "meta-eval")]
    pub meta_eval: MetaEvalSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).map_err(|e| Invalid(format!("config {}: {e}", path.display())).into())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub kind: CorpusKind,
    pub tokens: usize,
    /// Data seed, kept apart from the run seed so runs share one corpus.
    pub seed: u64,
    /// Raw byte file used instead of the synthetic generator.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            kind: CorpusKind::Mixed,
            tokens: DEFAULT_TOKENS / 10,
            seed: 0,
            path: None,
        }
    }
}

impl CorpusSection {
    pub fn load(&self) -> Result<Corpus> {
        match &self.path {
            Some(p) => {
                let bytes = std::fs::read(p).map_err(|_| crate::Prerequisite {
                    path: p.clone(),
                    producer: "a corpus file (bytes)".into(),
                })?;
                Ok(Corpus::from_bytes(bytes))
            }
            None => Ok(Corpus::synthetic(self.kind, self.seed, self.tokens)),
        }
    }
}

/// Which model to build: a preset name, an operator list at a width, or a
/// genome file: at most one of `preset`, `ops`, `genome`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelChoice {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ops: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub genome: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub meta_tokens: Option<usize>,
}

/// Used when a model table names none of `preset`, `ops`, `genome`.
pub const DEFAULT_PRESET: &str = "toy-hybrid";

impl ModelChoice {
    pub fn ops(ops: &str, width: usize) -> Self {
        ModelChoice {
            preset: None,
            ops: Some(ops.into()),
            width: Some(width),
            genome: None,
            meta_tokens: None,
        }
    }

    pub fn resolve(&self) -> Result<(ModelSpec, Option<ArchitectureGenome>)> {
        let given = [self.preset.is_some(), self.ops.is_some(), self.genome.is_some()];
        if given.iter().filter(|&&g| g).count() > 1 {
            bail!(Invalid("model takes only one of preset, ops, genome".into()));
        }
        if self.width.is_some() && self.ops.is_none() {
            bail!(Invalid("model width only applies to an ops list".into()));
        }
        let (mut spec, genome) = if let Some(ops) = &self.ops {
            let w = self.width.ok_or_else(|| Invalid("an ops list needs a width".into()))?;
            let cfg = MixerConfig::for_width(w, slmlab::genome::default_head_dim(w), FFN_MULT);
            (ModelSpec::new(parse_ops(ops)?, cfg, 0)?, None)
        } else if let Some(path) = &self.genome {
            let text = std::fs::read_to_string(path).map_err(|_| crate::Prerequisite {
                path: path.clone(),
                producer: "search (best.json) or a hand-written genome".into(),
            })?;
            let g = read_genome(&text)?;
            (decode(&g)?, Some(g))
        } else {
            (preset(self.preset.as_deref().unwrap_or(DEFAULT_PRESET))?, None)
        };
        if let Some(m) = self.meta_tokens {
            spec.meta_tokens = m;
        }
        Ok((spec, genome))
    }
}

/// A bare genome, or any JSON object carrying one under `genome`.
pub fn read_genome(text: &str) -> Result<ArchitectureGenome> {
    let v: serde_json::Value = serde_json::from_str(text)?;
    let inner = v.get("genome").cloned().unwrap_or(v);
    Ok(ArchitectureGenome::from_json(&inner.to_string())?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Run seeds; the global seed when empty.
    pub seeds: Vec<u64>,
    /// Train every seed twice, with and without weight normalization.
    pub wnorm_ab: bool,
    pub probe_windows: usize,
    pub model: ModelChoice,
    pub optim: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            seeds: Vec::new(),
            wnorm_ab: false,
            probe_windows: 32,
            model: ModelChoice::default(),
            optim: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub depths: Vec<usize>,
    pub widths: Vec<usize>,
    /// Cells trained beside the grid, typically held out of the fit.
    pub extra_cells: Vec<[usize; 2]>,
    pub exec: Execution,
    pub optim: TrainConfig,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            depths: vec![2, 3, 4, 6],
            widths: vec![32, 48, 64],
            extra_cells: Vec::new(),
            exec: Execution::default(),
            optim: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    /// Sweep file; `<out>/sweep/sweep.json` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    /// `fixed_n` when every record saw the same tokens, else `full`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<FitMethod>,
    pub starts: usize,
    /// `[D, W]` cells excluded from the fit and scored as extrapolation.
    pub holdout: Vec<[usize; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweet_spot: Option<SweetSpotSection>,
}

impl Default for FitSection {
    fn default() -> Self {
        FitSection {
            input: None,
            method: None,
            starts: slmlab::scaling::DEFAULT_STARTS,
            holdout: Vec::new(),
            sweet_spot: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweetSpotSection {
    /// Latency table; `<out>/profile/lut.json` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lut: Option<PathBuf>,
    pub budget: f64,
    #[serde(default = "default_gen_len")]
    pub gen_len: usize,
    #[serde(default = "default_ctx")]
    pub ctx: usize,
    pub depths: Vec<usize>,
    pub widths: Vec<usize>,
    /// Token count for prediction; the sweep's when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<f64>,
}

fn default_gen_len() -> usize {
    64
}
fn default_ctx() -> usize {
    512
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileSection {
    pub kinds: Vec<OperatorKind>,
    pub widths: Vec<usize>,
    pub regime: Regime,
    pub reps: usize,
    pub warmup: usize,
    pub min_rep_s: f64,
    pub buckets: Vec<usize>,
    /// Write the deterministic multiply-add model instead of timing.
    pub flop_model: bool,
    pub secs_per_flop: f64,
}

impl Default for ProfileSection {
    fn default() -> Self {
        let mut kinds = OperatorKind::SEARCHABLE.to_vec();
        kinds.push(OperatorKind::Ffn);
        let opts = ProfileOptions::default();
        ProfileSection {
            kinds,
            widths: DESK_LADDER.to_vec(),
            regime: Regime::Decode,
            reps: opts.reps,
            warmup: opts.warmup,
            min_rep_s: opts.min_rep_s,
            buckets: opts.buckets,
            flop_model: false,
            secs_per_flop: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum MetricChoice {
    Latency,
    Params,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpaceChoice {
    Default,
    Restricted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvaluatorChoice {
    Surrogate,
    Proxy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    pub metric: MetricChoice,
    /// Seconds (latency) or operator parameters (params).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget: Option<f64>,
    pub cycles: usize,
    pub population: usize,
    pub sample: usize,
    pub offspring: usize,
    pub space: SpaceChoice,
    pub evaluator: EvaluatorChoice,
    /// Latency table; `<out>/profile/lut.json` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lut: Option<PathBuf>,
    pub gen_len: usize,
    pub ctx: usize,
    /// Include the decoding-latency seed genome in the initial population.
    pub seed_decoding: bool,
    pub proxy_steps: usize,
    pub exec: Execution,
    pub optim: TrainConfig,
}

impl Default for SearchSection {
    fn default() -> Self {
        SearchSection {
            metric: MetricChoice::Latency,
            budget: None,
            cycles: 30,
            population: 32,
            sample: 8,
            offspring: 10,
            space: SpaceChoice::Default,
            evaluator: EvaluatorChoice::Surrogate,
            lut: None,
            gen_len: 1,
            ctx: 2048,
            seed_decoding: false,
            proxy_steps: 200,
            exec: Execution::default(),
            optim: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    /// Run files or directories of them; `<out>/train` when empty.
    pub inputs: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateAttnSection {
    /// Full-attention layer counts to try; the other attention layers of
    /// the model become sliding-window.
    pub full_attention: Vec<usize>,
    pub window: usize,
    pub seeds: Vec<u64>,
    pub probe_windows: usize,
    pub model: ModelChoice,
    pub optim: TrainConfig,
}

impl Default for AblateAttnSection {
    fn default() -> Self {
        AblateAttnSection {
            full_attention: vec![0, 1, 2, 3],
            window: 8,
            seeds: Vec::new(),
            probe_windows: 32,
            model: ModelChoice::ops("a, f, d, f, a, f, d, f, a, f, d, f", 32),
            optim: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaEvalSection {
    pub meta_tokens: Vec<usize>,
    pub seeds: Vec<u64>,
    pub probe_windows: usize,
    pub model: ModelChoice,
    pub optim: TrainConfig,
}

impl Default for MetaEvalSection {
    fn default() -> Self {
        MetaEvalSection {
            meta_tokens: vec![0, 4],
            seeds: Vec::new(),
            probe_windows: 32,
            model: ModelChoice::default(),
            optim: TrainConfig::default(),
        }
    }
}
