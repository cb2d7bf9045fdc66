//! Token-mixing operators and the FFN.
//!
//! Every operator has three entry points sharing one parameter layout:
//! a graph form ([`forward_graph`]) used for training, a parallel sequence
//! form ([`Operator::sequence`]) and a recurrent decoding form
//! ([`Operator::step`]). The latter two must agree to 1e-6.
//!
//! The linear mixers use simplified single-projection forms (no short
//! convolutions or output gates): DeltaNet applies the delta rule,
//! Gated DeltaNet a decayed delta rule, GLA a per-channel decay and Mamba2 a
//! scalar-per-head decay over the same `dk × dv` associative state. Queries
//! and keys are L2-normalized per head and the mixed output is RMS-normalized
//! per head before the output projection.

mod graph_form;
mod plain;
mod state;


use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::kernels::scan::Rule;
use crate::tensor::Tensor;

pub use graph_form::forward_graph;
pub use state::{KvCache, OpState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OperatorKind {
    FullAttention,
    SlidingWindowAttention { window: usize },
    Mamba2,
    DeltaNet,
    GatedDeltaNet,
    Gla,
    Ffn,
}

impl OperatorKind {
    /// Operators the architecture search may place.
    pub const SEARCHABLE: [OperatorKind; 3] = [
        OperatorKind::DeltaNet,
        OperatorKind::FullAttention,
        OperatorKind::Mamba2,
    ];

    pub fn is_mixer(self) -> bool {
        self != OperatorKind::Ffn
    }

    pub fn is_attention(self) -> bool {
        matches!(
            self,
            OperatorKind::FullAttention | OperatorKind::SlidingWindowAttention { .. }
        )
    }

    pub fn window(self) -> Option<usize> {
        match self {
            OperatorKind::SlidingWindowAttention { window } => Some(window),
            _ => None,
        }
    }

    /// Recurrence rule for linear mixers.
    pub fn rule(self) -> Option<Rule> {
        match self {
            OperatorKind::DeltaNet => Some(Rule::Delta),
            OperatorKind::GatedDeltaNet => Some(Rule::GatedDelta),
            OperatorKind::Gla => Some(Rule::ChannelDecay),
            OperatorKind::Mamba2 => Some(Rule::ScalarDecay),
            _ => None,
        }
    }

    /// Letter code used in operator lists: `d`, `f`, `m2`, `a`, plus `swa<w>`,
    /// `gdn` and `gla` for the operators outside the search space.
    pub fn code(self) -> String {
        match self {
            OperatorKind::FullAttention => "a".into(),
            OperatorKind::SlidingWindowAttention { window } => format!("swa{window}"),
            OperatorKind::Mamba2 => "m2".into(),
            OperatorKind::DeltaNet => "d".into(),
            OperatorKind::GatedDeltaNet => "gdn".into(),
            OperatorKind::Gla => "gla".into(),
            OperatorKind::Ffn => "f".into(),
        }
    }

    pub fn validate(self) -> Result<()> {
        if self == (OperatorKind::SlidingWindowAttention { window: 0 }) {
            return Err(Error::Config("sliding window must be at least 1 token".into()));
        }
        Ok(())
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.code())
    }
}

impl FromStr for OperatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let kind = match lower.as_str() {
            "a" | "attn" | "attention" => OperatorKind::FullAttention,
            "m2" | "mamba2" => OperatorKind::Mamba2,
            "d" | "deltanet" => OperatorKind::DeltaNet,
            "gdn" | "gated_deltanet" => OperatorKind::GatedDeltaNet,
            "gla" => OperatorKind::Gla,
            "f" | "ffn" => OperatorKind::Ffn,
            other => match other.strip_prefix("swa") {
                Some(w) => {
                    let window = w
                        .trim_start_matches(':')
                        .parse()
                        .map_err(|_| Error::Config(format!("bad window in operator code {s:?}")))?;
                    OperatorKind::SlidingWindowAttention { window }
                }
                None => return Err(Error::Config(format!("unknown operator code {s:?}"))),
            },
        };
        kind.validate()?;
        Ok(kind)
    }
}

impl Serialize for OperatorKind {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.code())
    }
}

impl<'de> Deserialize<'de> for OperatorKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Format an operator list as `[d, f, m2, f]`.
pub fn format_ops(ops: &[OperatorKind]) -> String {
    let codes: Vec<String> = ops.iter().map(|o| o.code()).collect();
    format!("[{}]", codes.join(", "))
}

pub fn parse_ops(s: &str) -> Result<Vec<OperatorKind>> {
    s.trim()
        .trim_start_matches('[')
        .trim_end_matches(']')
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(str::parse)
        .collect()
}

/// Shared shape configuration for all operators of one model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.head_dim == 0 || self.n_kv_heads == 0 {
            return Err(Error::Config("attention heads and head_dim must be positive".into()));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::Config(format!(
                "{} heads not divisible by {} kv heads",
                self.n_heads, self.n_kv_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixerConfig {
    pub width: usize,
    pub ffn_dim: usize,
    pub attn: AttentionConfig,
}

impl MixerConfig {
    /// Heads of `head_dim` covering the width, grouped-query ratio 4 when
    /// the head count allows it, otherwise a single kv head.
    pub fn for_width(width: usize, head_dim: usize, ffn_mult: usize) -> Self {
        let heads = (width / head_dim).max(1);
        let kv = if heads.is_multiple_of(4) { heads / 4 } else { 1 };
        MixerConfig {
            width,
            ffn_dim: width * ffn_mult,
            attn: AttentionConfig {
                n_heads: heads,
                n_kv_heads: kv,
                head_dim,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attn.validate()?;
        if self.width == 0 {
            return Err(Error::Config("width must be positive".into()));
        }
        if !self.width.is_multiple_of(self.attn.head_dim) {
            return Err(Error::Config(format!(
                "width {} not a multiple of head_dim {}",
                self.width, self.attn.head_dim
            )));
        }
        Ok(())
    }

    /// Head count of the linear mixers (`dk = dv = head_dim`).
    pub fn linear_heads(&self) -> usize {
        self.width / self.attn.head_dim
    }
}

/// Role of a weight matrix under weight normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WnormCase {
    /// Reads the residual stream: rows normalized over `C_in`.
    Case1,
    /// Writes into the residual stream: columns normalized over `C_out`.
    Case2,
    Exempt,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub case: WnormCase,
}

impl ParamSpec {
    fn new(name: &'static str, shape: &[usize], case: WnormCase) -> Self {
        ParamSpec {
            name,
            shape: shape.to_vec(),
            case,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Parameter layout of one operator instance, in the order every forward
/// form expects them.
pub fn param_specs(kind: OperatorKind, cfg: &MixerConfig) -> Vec<ParamSpec> {
    use WnormCase::*;
    let w = cfg.width;
    let a = &cfg.attn;
    match kind {
        OperatorKind::FullAttention | OperatorKind::SlidingWindowAttention { .. } => {
            let qd = a.n_heads * a.head_dim;
            let kd = a.n_kv_heads * a.head_dim;
            vec![
                ParamSpec::new("wq", &[qd, w], Case1),
                ParamSpec::new("wk", &[kd, w], Case1),
                ParamSpec::new("wv", &[kd, w], Case1),
                ParamSpec::new("wo", &[w, qd], Case2),
            ]
        }
        OperatorKind::Ffn => vec![
            ParamSpec::new("w_up", &[cfg.ffn_dim, w], Case1),
            ParamSpec::new("w_gate", &[cfg.ffn_dim, w], Case1),
            ParamSpec::new("w_down", &[w, cfg.ffn_dim], Case2),
        ],
        linear => {
            let h = cfg.linear_heads();
            let mut v = vec![
                ParamSpec::new("wq", &[w, w], Case1),
                ParamSpec::new("wk", &[w, w], Case1),
                ParamSpec::new("wv", &[w, w], Case1),
                ParamSpec::new("wo", &[w, w], Case2),
            ];
            let rule = linear.rule().expect("linear mixer");
            if matches!(rule, Rule::Delta | Rule::GatedDelta) {
                v.push(ParamSpec::new("w_beta", &[h, w], Case1));
            }
            let dw = rule.decay_width(a.head_dim) * h;
            if dw > 0 {
                v.push(ParamSpec::new("w_decay", &[dw, w], Exempt));
                v.push(ParamSpec::new("b_decay", &[dw], Exempt));
            }
            v
        }
    }
}

/// Exact trainable-parameter count of one operator instance.
pub fn params_count(kind: OperatorKind, cfg: &MixerConfig) -> usize {
    param_specs(kind, cfg).iter().map(ParamSpec::numel).sum()
}

/// An operator with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Operator {
    pub kind: OperatorKind,
    pub cfg: MixerConfig,
    pub params: Vec<Tensor>,
}

/// Initial value of `b_decay`: decays spread over roughly [0.9, 0.99].
pub(crate) fn decay_bias_init(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let frac = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
            let alpha: f64 = 0.9 + 0.09 * frac;
            (alpha / (1.0 - alpha)).ln()
        })
        .collect()
}

impl Operator {
    /// Truncated-normal (±2σ) init with σ = 0.02, scaled by `1/√(2·depth)`
    /// for matrices writing into the residual stream.
    pub fn init(kind: OperatorKind, cfg: MixerConfig, depth: usize, rng: &mut impl Rng) -> Result<Self> {
        kind.validate()?;
        cfg.validate()?;
        let residual_scale = 1.0 / (2.0 * depth.max(1) as f64).sqrt();
        let params = param_specs(kind, &cfg)
            .into_iter()
            .map(|spec| {
                if spec.name == "b_decay" {
                    return Tensor::new(spec.shape.clone(), decay_bias_init(spec.numel())).unwrap();
                }
                let std = match spec.case {
                    WnormCase::Case2 => 0.02 * residual_scale,
                    _ => 0.02,
                };
                Tensor::from_fn(&spec.shape, |_| truncated_normal(rng) * std)
            })
            .collect();
        Ok(Operator { kind, cfg, params })
    }

    pub fn from_params(kind: OperatorKind, cfg: MixerConfig, params: Vec<Tensor>) -> Result<Self> {
        kind.validate()?;
        cfg.validate()?;
        let specs = param_specs(kind, &cfg);
        if specs.len() != params.len() {
            return Err(Error::Config(format!(
                "{kind} expects {} parameter tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for (s, p) in specs.iter().zip(&params) {
            if s.shape != p.shape() {
                return Err(Error::Shape {
                    op: s.name,
                    lhs: s.shape.clone(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        Ok(Operator { kind, cfg, params })
    }

    pub fn params_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }
}

/// Standard normal truncated to ±2.
pub(crate) fn truncated_normal(rng: &mut impl Rng) -> f64 {
    loop {
        // Box-Muller
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

/// Causal softmax attention over a `T × d` input.
pub fn attention_forward(x: &Tensor, op: &Operator) -> Result<Tensor> {
    if !op.kind.is_attention() {
        return Err(Error::Config(format!("{} is not an attention operator", op.kind)));
    }
    Ok(op.sequence(x, None)?.0)
}

pub fn delta_net_parallel(x: &Tensor, op: &Operator) -> Result<Tensor> {
    if op.kind != OperatorKind::DeltaNet {
        return Err(Error::Config(format!("{} is not DeltaNet", op.kind)));
    }
    Ok(op.sequence(x, None)?.0)
}

pub fn delta_net_step(state: &mut OpState, x_t: &[f64], op: &Operator) -> Result<Vec<f64>> {
    expect_kind(op, OperatorKind::DeltaNet)?;
    op.step(state, x_t)
}

pub fn gated_delta_net_step(state: &mut OpState, x_t: &[f64], op: &Operator) -> Result<Vec<f64>> {
    expect_kind(op, OperatorKind::GatedDeltaNet)?;
    op.step(state, x_t)
}

pub fn gla_step(state: &mut OpState, x_t: &[f64], op: &Operator) -> Result<Vec<f64>> {
    expect_kind(op, OperatorKind::Gla)?;
    op.step(state, x_t)
}

pub fn mamba2_step(state: &mut OpState, x_t: &[f64], op: &Operator) -> Result<Vec<f64>> {
    expect_kind(op, OperatorKind::Mamba2)?;
    op.step(state, x_t)
}

pub fn ffn_forward(x: &Tensor, op: &Operator) -> Result<Tensor> {
    expect_kind(op, OperatorKind::Ffn)?;
    Ok(op.sequence(x, None)?.0)
}

fn expect_kind(op: &Operator, kind: OperatorKind) -> Result<()> {
    if op.kind != kind {
        return Err(Error::Config(format!("expected {kind}, got {}", op.kind)));
    }
    Ok(())
}
