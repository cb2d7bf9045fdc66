//! Named model presets.

use crate::error::{Error, Result};
use crate::operators::{parse_ops, AttentionConfig, MixerConfig};

use super::ModelSpec;

pub const PRESET_NAMES: [&str; 5] = ["nf-1b", "nf-3b", "toy-hybrid", "toy-1b", "toy-3b"];

const NF_1B_OPS: &str = "d, f, m2, f, a, f, m2, f, d, f, m2, f, a, f, m2, f, d, f, m2, f, d, f, m2, f";
const NF_3B_OPS: &str = "d, f, m2, f, a, f, m2, f, d, f, m2, f, a, f, m2, f, d, f, m2, f, \
                         a, f, m2, f, d, f, m2, f, d, f, m2, f, d, f, m2, f";
const TOY_HYBRID_OPS: &str = "d, f, m2, f, a, f, m2, f";
pub(crate) const PRESET_META_TOKENS: usize = 256;
const TOY_META_TOKENS: usize = 4;

fn spec(ops: &str, width: usize, ffn_dim: usize, heads: usize, kv_heads: usize, meta: usize) -> Result<ModelSpec> {
    let cfg = MixerConfig {
        width,
        ffn_dim,
        attn: AttentionConfig {
            n_heads: heads,
            n_kv_heads: kv_heads,
            head_dim: width / heads,
        },
    };
    ModelSpec::new(parse_ops(ops)?, cfg, meta)
}

/// Look up a preset. The `nf-*` presets carry their operator lists verbatim;
/// `toy-*` presets keep the lists and shrink the width.
pub fn preset(name: &str) -> Result<ModelSpec> {
    match name {
        "nf-1b" => spec(NF_1B_OPS, 2048, 6144, 16, 4, PRESET_META_TOKENS),
        "nf-3b" => spec(NF_3B_OPS, 3072, 9216, 24, 6, PRESET_META_TOKENS),
        "toy-hybrid" => spec(TOY_HYBRID_OPS, 32, 96, 4, 1, TOY_META_TOKENS),
        "toy-1b" => spec(NF_1B_OPS, 32, 96, 4, 1, TOY_META_TOKENS),
        "toy-3b" => spec(NF_3B_OPS, 48, 144, 6, 1, TOY_META_TOKENS),
        other => Err(Error::Config(format!(
            "unknown preset {other:?}; known: {}",
            PRESET_NAMES.join(", ")
        ))),
    }
}
