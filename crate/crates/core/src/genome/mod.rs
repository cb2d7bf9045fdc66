//! Three-stage hybrid search space and its decoding into flat operator lists.
//!
//! A stage repeats a block `blocks` times. A block holds one `op_a` followed
//! by the `op_b` operators of its ratio (1:2 gives `a, b, b`), and every mixer
//! is followed by `ffn` FFNs.

mod presets;
#[cfg(test)]
mod tests;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::operators::{format_ops, AttentionConfig, MixerConfig, OperatorKind};

pub use presets::{preset, PRESET_NAMES};

/// Hidden sizes the full-scale search chooses from.
pub const FULL_LADDER: [usize; 7] = [1024, 1280, 1536, 1792, 2048, 2304, 2560];
/// Desk-scale analog of [`FULL_LADDER`].
pub const DESK_LADDER: [usize; 5] = [32, 48, 64, 96, 128];
pub const DEFAULT_MAX_OPERATORS: usize = 30;
pub const MAX_FFN_PER_MIXER: usize = 2;
pub const FFN_MULT: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Ratio {
    /// `op_a` alone.
    ZeroOne,
    OneOne,
    OneTwo,
    OneThree,
}

impl Ratio {
    pub const ALL: [Ratio; 4] = [Ratio::ZeroOne, Ratio::OneOne, Ratio::OneTwo, Ratio::OneThree];

    /// Number of `op_b` mixers per `op_a`.
    pub fn b_count(self) -> usize {
        match self {
            Ratio::ZeroOne => 0,
            Ratio::OneOne => 1,
            Ratio::OneTwo => 2,
            Ratio::OneThree => 3,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Ratio::ZeroOne => "0:1",
            Ratio::OneOne => "1:1",
            Ratio::OneTwo => "1:2",
            Ratio::OneThree => "1:3",
        }
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Ratio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ratio::ALL
            .into_iter()
            .find(|r| r.code() == s.trim())
            .ok_or_else(|| Error::Genome(format!("unknown ratio {s:?}")))
    }
}

impl Serialize for Ratio {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.code())
    }
}

impl<'de> Deserialize<'de> for Ratio {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub op_a: OperatorKind,
    #[serde(default)]
    pub op_b: Option<OperatorKind>,
    pub ratio: Ratio,
    pub ffn: usize,
    pub blocks: usize,
}

impl StageSpec {
    pub fn single(op: OperatorKind, ffn: usize, blocks: usize) -> Self {
        StageSpec {
            op_a: op,
            op_b: None,
            ratio: Ratio::ZeroOne,
            ffn,
            blocks,
        }
    }

    pub fn pair(op_a: OperatorKind, op_b: OperatorKind, ratio: Ratio, ffn: usize, blocks: usize) -> Self {
        StageSpec {
            op_a,
            op_b: Some(op_b),
            ratio,
            ffn,
            blocks,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for op in std::iter::once(self.op_a).chain(self.op_b) {
            op.validate()?;
            if !op.is_mixer() {
                return Err(Error::Genome(format!("{op} is not a token mixer")));
            }
        }
        match (self.op_b, self.ratio) {
            (None, Ratio::ZeroOne) => {}
            (None, r) => return Err(Error::Genome(format!("ratio {r} needs a second operator"))),
            (Some(_), Ratio::ZeroOne) => return Err(Error::Genome("ratio 0:1 cannot carry a second operator".into())),
            (Some(b), _) if b == self.op_a => {
                return Err(Error::Genome(format!("stage repeats {b} as both operators")))
            }
            _ => {}
        }
        if self.ffn > MAX_FFN_PER_MIXER {
            return Err(Error::Genome(format!(
                "{} FFNs per mixer exceeds {MAX_FFN_PER_MIXER}",
                self.ffn
            )));
        }
        Ok(())
    }

    pub fn mixers_per_block(&self) -> usize {
        1 + self.ratio.b_count()
    }

    pub fn ops_per_block(&self) -> usize {
        self.mixers_per_block() * (1 + self.ffn)
    }

    pub fn op_count(&self) -> usize {
        self.ops_per_block() * self.blocks
    }

    /// Operators of one block in canonical order.
    pub fn block_ops(&self) -> Vec<OperatorKind> {
        let mut out = Vec::with_capacity(self.ops_per_block());
        let mixers = std::iter::once(self.op_a).chain(std::iter::repeat_n(self.op_b, self.ratio.b_count()).flatten());
        for m in mixers {
            out.push(m);
            out.extend(std::iter::repeat_n(OperatorKind::Ffn, self.ffn));
        }
        out
    }

    pub fn expand(&self) -> Vec<OperatorKind> {
        let block = self.block_ops();
        (0..self.blocks).flat_map(|_| block.iter().copied()).collect()
    }
}

fn default_max_operators() -> usize {
    DEFAULT_MAX_OPERATORS
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureGenome {
    pub stages: [StageSpec; 3],
    pub hidden: usize,
    #[serde(default)]
    pub meta_tokens: usize,
    #[serde(default = "default_max_operators")]
    pub max_operators: usize,
}

impl ArchitectureGenome {
    pub fn new(stages: [StageSpec; 3], hidden: usize) -> Self {
        ArchitectureGenome {
            stages,
            hidden,
            meta_tokens: 0,
            max_operators: DEFAULT_MAX_OPERATORS,
        }
    }

    pub fn op_count(&self) -> usize {
        self.stages.iter().map(StageSpec::op_count).sum()
    }

    pub fn operators(&self) -> Vec<OperatorKind> {
        self.stages.iter().flat_map(StageSpec::expand).collect()
    }

    /// Structural checks that hold regardless of the operator cap.
    fn validate_structure(&self) -> Result<()> {
        for (i, s) in self.stages.iter().enumerate() {
            s.validate()
                .map_err(|e| Error::Genome(format!("stage {}: {e}", i + 1)))?;
        }
        if self.stages.iter().all(|s| s.blocks == 0) {
            return Err(Error::Genome("all stages are empty".into()));
        }
        if self.hidden == 0 {
            return Err(Error::Genome("hidden size must be positive".into()));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_structure()?;
        let n = self.op_count();
        if n > self.max_operators {
            return Err(Error::Genome(format!(
                "{n} operators exceed the cap of {} by {}",
                self.max_operators,
                n - self.max_operators
            )));
        }
        Ok(())
    }

    /// Hidden size must come from `ladder`.
    pub fn validate_ladder(&self, ladder: &[usize]) -> Result<()> {
        if !ladder.contains(&self.hidden) {
            return Err(Error::Genome(format!(
                "hidden size {} not in ladder {ladder:?}",
                self.hidden
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let g: ArchitectureGenome = serde_json::from_str(s)?;
        g.validate_structure()?;
        Ok(g)
    }
}

impl fmt::Display for ArchitectureGenome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "W={} {}", self.hidden, format_ops(&self.operators()))
    }
}

/// Drop last-stage blocks until the operator cap holds.
pub fn repair(g: &ArchitectureGenome) -> Result<ArchitectureGenome> {
    g.validate_structure()?;
    let mut out = *g;
    while out.op_count() > out.max_operators {
        if out.stages[2].blocks == 0 {
            return Err(Error::Genome(format!(
                "{} operators exceed the cap of {} with the last stage already empty",
                out.op_count(),
                out.max_operators
            )));
        }
        out.stages[2].blocks -= 1;
    }
    out.validate()?;
    Ok(out)
}

/// Head size used when a genome is decoded at `hidden`: 128 at full
/// scale, 16 at desk scale, otherwise the largest power of two ≤ 16 that
/// divides the width.
pub fn default_head_dim(hidden: usize) -> usize {
    if hidden >= 1024 && hidden.is_multiple_of(128) {
        return 128;
    }
    [16, 8, 4, 2, 1]
        .into_iter()
        .find(|&d| hidden.is_multiple_of(d) && hidden / d >= 2)
        .unwrap_or(1)
}

/// Flat, executable model description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub ops: Vec<OperatorKind>,
    pub hidden: usize,
    pub ffn_dim: usize,
    pub attn: AttentionConfig,
    pub meta_tokens: usize,
}

impl ModelSpec {
    pub fn new(ops: Vec<OperatorKind>, mixer: MixerConfig, meta_tokens: usize) -> Result<Self> {
        mixer.validate()?;
        if ops.is_empty() {
            return Err(Error::Genome("model has no operators".into()));
        }
        for op in &ops {
            op.validate()?;
        }
        Ok(ModelSpec {
            ops,
            hidden: mixer.width,
            ffn_dim: mixer.ffn_dim,
            attn: mixer.attn,
            meta_tokens,
        })
    }

    pub fn mixer_config(&self) -> MixerConfig {
        MixerConfig {
            width: self.hidden,
            ffn_dim: self.ffn_dim,
            attn: self.attn,
        }
    }

    /// Depth D: mixer/FFN block pairs, counted as mixers (FFNs when the
    /// list has no mixers).
    pub fn depth(&self) -> usize {
        let mixers = self.ops.iter().filter(|o| o.is_mixer()).count();
        if mixers > 0 {
            mixers
        } else {
            self.ops.len()
        }
    }

    /// Width W.
    pub fn width(&self) -> usize {
        self.hidden
    }

    pub fn attention_layers(&self) -> usize {
        self.ops.iter().filter(|o| o.is_attention()).count()
    }

    /// Trainable parameters of the operator stack alone.
    pub fn operator_params(&self) -> usize {
        let cfg = self.mixer_config();
        self.ops.iter().map(|&k| crate::operators::params_count(k, &cfg)).sum()
    }

    pub fn codes(&self) -> String {
        format_ops(&self.ops)
    }
}

/// Expand a genome at its own hidden size with the default head size and a
/// 3x FFN.
pub fn decode(g: &ArchitectureGenome) -> Result<ModelSpec> {
    decode_with(g, default_head_dim(g.hidden), FFN_MULT)
}

pub fn decode_with(g: &ArchitectureGenome, head_dim: usize, ffn_mult: usize) -> Result<ModelSpec> {
    g.validate()?;
    let cfg = MixerConfig::for_width(g.hidden, head_dim, ffn_mult);
    ModelSpec::new(g.operators(), cfg, g.meta_tokens)
}

/// Every stage over `ops` (plus the single-operator stages) with the given
/// ratio, FFN and block choices; the enumeration unit for exhaustive tests
/// and mutation.
pub fn stage_choices(ops: &[OperatorKind], ratios: &[Ratio], ffns: &[usize], blocks: &[usize]) -> Vec<StageSpec> {
    let mut out = Vec::new();
    for &a in ops {
        for &ratio in ratios {
            let partners: Vec<Option<OperatorKind>> = if ratio == Ratio::ZeroOne {
                vec![None]
            } else {
                ops.iter().filter(|&&b| b != a).map(|&b| Some(b)).collect()
            };
            for op_b in partners {
                for &ffn in ffns {
                    for &n in blocks {
                        out.push(StageSpec {
                            op_a: a,
                            op_b,
                            ratio,
                            ffn,
                            blocks: n,
                        });
                    }
                }
            }
        }
    }
    out
}

/// Closest genome to the decoding-latency architecture of the searched
/// family: D/M2 blocks around A/M2 blocks, 24 operators, 2 attention layers.
pub fn decoding_seed(hidden: usize) -> ArchitectureGenome {
    use OperatorKind::{DeltaNet, FullAttention, Mamba2};
    ArchitectureGenome::new(
        [
            StageSpec::pair(DeltaNet, Mamba2, Ratio::OneOne, 1, 1),
            StageSpec::pair(FullAttention, Mamba2, Ratio::OneOne, 1, 2),
            StageSpec::pair(DeltaNet, Mamba2, Ratio::OneOne, 1, 3),
        ],
        hidden,
    )
}
