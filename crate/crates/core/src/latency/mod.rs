//! Host latency lookup table: per-operator decode cost by width and
//! context bucket, composed additively into architecture estimates.

mod measure;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::genome::ModelSpec;
use crate::operators::OperatorKind;

pub use measure::{dispersion, gate_entry, host_fingerprint, measure_decode, profile, ProfileOptions};

pub const PROTOCOL_VERSION: u32 = 1;
/// Desk-scale KV-length buckets for attention decode cost.
pub const CTX_BUCKETS: [usize; 3] = [512, 2048, 8192];
pub const MAX_DISPERSION: f64 = 0.25;
pub const MIN_WARMUP: usize = 3;
/// Tokens per prefill measurement.
pub const PREFILL_LEN: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Decode,
    Prefill,
}

/// What a table row measures: one operator block (pre-norm, operator,
/// residual add) or the fixed per-token overhead (embedding, final norm,
/// LM head).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CostKind {
    Op(OperatorKind),
    Overhead,
}

impl fmt::Display for CostKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CostKind::Op(k) => write!(f, "{k}"),
            CostKind::Overhead => f.write_str("head"),
        }
    }
}

impl FromStr for CostKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "head" {
            Ok(CostKind::Overhead)
        } else {
            Ok(CostKind::Op(s.parse()?))
        }
    }
}

impl Serialize for CostKind {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for CostKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LutKey {
    pub kind: CostKind,
    pub width: usize,
    pub regime: Regime,
    /// KV length for attention; 0 for context-independent costs.
    pub ctx_bucket: usize,
}

impl fmt::Display for LutKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} W={} {:?} ctx={}",
            self.kind, self.width, self.regime, self.ctx_bucket
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LutEntry {
    pub kind: CostKind,
    pub width: usize,
    pub regime: Regime,
    pub ctx_bucket: usize,
    /// Seconds per token, median over repetitions.
    pub median_s: f64,
    pub iqr_s: f64,
    pub reps: usize,
}

impl LutEntry {
    pub fn key(&self) -> LutKey {
        LutKey {
            kind: self.kind,
            width: self.width,
            regime: self.regime,
            ctx_bucket: self.ctx_bucket,
        }
    }

    /// Cost in integer picoseconds so estimates add up exactly.
    pub fn picos(&self) -> u64 {
        (self.median_s * 1e12).round() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyLut {
    pub host: String,
    pub version: u32,
    #[serde(serialize_with = "ser_entries", deserialize_with = "de_entries")]
    pub entries: BTreeMap<LutKey, LutEntry>,
}

fn ser_entries<S: Serializer>(m: &BTreeMap<LutKey, LutEntry>, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(m.values())
}

fn de_entries<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<BTreeMap<LutKey, LutEntry>, D::Error> {
    let v = Vec::<LutEntry>::deserialize(d)?;
    Ok(v.into_iter().map(|e| (e.key(), e)).collect())
}

/// Bucket used for a context length: the smallest bucket that holds it,
/// or the largest bucket.
pub fn bucket_for(ctx: usize) -> usize {
    CTX_BUCKETS
        .into_iter()
        .find(|&b| ctx <= b)
        .unwrap_or(CTX_BUCKETS[CTX_BUCKETS.len() - 1])
}

/// Table key of one operator at `width` for a decode at context `ctx`.
pub fn op_key(kind: OperatorKind, width: usize, regime: Regime, ctx: usize) -> LutKey {
    let ctx_bucket = match (kind.is_attention(), regime) {
        (false, _) => 0,
        (true, Regime::Prefill) => PREFILL_LEN,
        (true, Regime::Decode) => bucket_for(ctx),
    };
    LutKey {
        kind: CostKind::Op(kind),
        width,
        regime,
        ctx_bucket,
    }
}

pub fn overhead_key(width: usize, regime: Regime) -> LutKey {
    LutKey {
        kind: CostKind::Overhead,
        width,
        regime,
        ctx_bucket: 0,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCost {
    pub kind: OperatorKind,
    pub picos: u64,
}

/// Latency of generating `gen_len` tokens at batch 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyEstimate {
    pub gen_len: usize,
    pub overhead_picos: u64,
    pub breakdown: Vec<OpCost>,
    pub total_picos: u64,
}

impl LatencyEstimate {
    pub fn seconds(&self) -> f64 {
        self.total_picos as f64 * 1e-12
    }
}

impl LatencyLut {
    pub fn new(host: String) -> Self {
        LatencyLut {
            host,
            version: PROTOCOL_VERSION,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, e: LutEntry) -> Result<()> {
        if !(e.median_s > 0.0 && e.median_s.is_finite()) {
            return Err(Error::Config(format!(
                "{} has non-positive cost {}",
                e.key(),
                e.median_s
            )));
        }
        self.entries.insert(e.key(), e);
        Ok(())
    }

    pub fn get(&self, key: &LutKey) -> Result<&LutEntry> {
        self.entries.get(key).ok_or_else(|| Error::Coverage(key.to_string()))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Every operator × width (and the overhead per width) is present for
    /// decoding at `ctx`.
    pub fn check_coverage(&self, kinds: &[OperatorKind], widths: &[usize], ctx: usize) -> Result<()> {
        for &w in widths {
            self.get(&overhead_key(w, Regime::Decode))?;
            for &k in kinds {
                self.get(&op_key(k, w, Regime::Decode, ctx))?;
            }
        }
        Ok(())
    }

    /// Additive decode estimate: per-token operator costs and overhead,
    /// each times `gen_len`.
    pub fn estimate(&self, spec: &ModelSpec, gen_len: usize, ctx: usize) -> Result<LatencyEstimate> {
        self.estimate_ops(&spec.ops, spec.hidden, gen_len, ctx)
    }

    pub fn estimate_ops(
        &self,
        ops: &[OperatorKind],
        width: usize,
        gen_len: usize,
        ctx: usize,
    ) -> Result<LatencyEstimate> {
        let n = gen_len as u64;
        let overhead_picos = self.get(&overhead_key(width, Regime::Decode))?.picos() * n;
        let breakdown = ops
            .iter()
            .map(|&k| {
                Ok(OpCost {
                    kind: k,
                    picos: self.get(&op_key(k, width, Regime::Decode, ctx))?.picos() * n,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let total_picos = overhead_picos + breakdown.iter().map(|c| c.picos).sum::<u64>();
        Ok(LatencyEstimate {
            gen_len,
            overhead_picos,
            breakdown,
            total_picos,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let lut: LatencyLut = serde_json::from_str(s)?;
        if lut.version != PROTOCOL_VERSION {
            return Err(Error::Config(format!(
                "latency table protocol {} does not match {PROTOCOL_VERSION}",
                lut.version
            )));
        }
        for e in lut.entries.values() {
            if !(e.median_s > 0.0) {
                return Err(Error::Config(format!("{} has non-positive cost", e.key())));
            }
        }
        Ok(lut)
    }

    /// Reject tables measured on another machine.
    pub fn check_host(&self, host: &str) -> Result<()> {
        if self.host != host {
            return Err(Error::Config(format!(
                "latency table was profiled on {:?}, this host is {host:?}",
                self.host
            )));
        }
        Ok(())
    }
}

/// Parameter-count efficiency metric: operator parameters only.
pub fn param_cost(spec: &ModelSpec) -> usize {
    spec.operator_params()
}

/// Deterministic stand-in for a profiled table: cost proportional to the
/// multiply-adds of one decode step (weights plus attention over the KV
/// length), `secs_per_flop` seconds each. Used where replayable results
/// matter more than host timings.
pub fn flop_model(kinds: &[OperatorKind], widths: &[usize], vocab: usize, secs_per_flop: f64) -> Result<LatencyLut> {
    use crate::genome::{default_head_dim, FFN_MULT};
    use crate::operators::{params_count, MixerConfig};

    let mut lut = LatencyLut::new("flop-model".into());
    if kinds.is_empty() {
        return Ok(lut);
    }
    for &w in widths {
        let cfg = MixerConfig::for_width(w, default_head_dim(w), FFN_MULT);
        cfg.validate()?;
        let mut add = |key: LutKey, flops: usize| {
            lut.insert(LutEntry {
                kind: key.kind,
                width: key.width,
                regime: key.regime,
                ctx_bucket: key.ctx_bucket,
                median_s: 2.0 * flops as f64 * secs_per_flop,
                iqr_s: 0.0,
                reps: 1,
            })
        };
        add(overhead_key(w, Regime::Decode), vocab * w + w)?;
        for &k in kinds {
            let weights = params_count(k, &cfg) + w;
            if k.is_attention() {
                let kv = cfg.attn.n_heads * cfg.attn.head_dim;
                for b in CTX_BUCKETS {
                    let len = k.window().map_or(b, |win| win.min(b));
                    add(op_key(k, w, Regime::Decode, b), weights + 2 * len * kv)?;
                }
            } else {
                add(op_key(k, w, Regime::Decode, 0), weights)?;
            }
        }
    }
    Ok(lut)
}
