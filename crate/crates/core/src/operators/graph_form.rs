//! Operator forward passes recorded on the autodiff tape.

use crate::error::{contract, Result};
use crate::graph::{Graph, Var};
use crate::kernels::attention::AttnDims;
use crate::kernels::scan::{Rule, ScanDims};

use super::{param_specs, MixerConfig, OperatorKind};

/// Record `kind` applied to `x` (`batch·len × width`, sequences stacked) on
/// the tape. `params` follow [`param_specs`] order.
pub fn forward_graph(
    g: &mut Graph,
    kind: OperatorKind,
    cfg: &MixerConfig,
    x: Var,
    params: &[Var],
    batch: usize,
    len: usize,
) -> Result<Var> {
    let want = param_specs(kind, cfg).len();
    if params.len() != want {
        return Err(contract(format!("{kind} expects {want} params, got {}", params.len())));
    }
    let rows = batch * len;
    if g.value(x).rows() != rows {
        return Err(contract(format!(
            "input has {} rows, expected batch {batch} × len {len}",
            g.value(x).rows()
        )));
    }
    let a = &cfg.attn;
    match kind {
        OperatorKind::Ffn => {
            let up = g.linear(x, params[0])?;
            let gate = g.linear(x, params[1])?;
            let gate = g.silu(gate);
            let h = g.mul(gate, up)?;
            g.linear(h, params[2])
        }
        k if k.is_attention() => {
            let q = g.linear(x, params[0])?;
            let kk = g.linear(x, params[1])?;
            let v = g.linear(x, params[2])?;
            let dims = AttnDims {
                batch,
                len,
                heads: a.n_heads,
                kv_heads: a.n_kv_heads,
                head_dim: a.head_dim,
                window: k.window(),
            };
            let y = g.attention(q, kk, v, dims)?;
            g.linear(y, params[3])
        }
        k => {
            let rule = k.rule().expect("linear mixer");
            let hd = a.head_dim;
            let heads = cfg.linear_heads();
            let width = cfg.width;
            let per_head = |g: &mut Graph, t: Var, f: fn(&mut Graph, Var) -> Result<Var>| -> Result<Var> {
                let r = g.reshape(t, &[rows * heads, hd])?;
                let n = f(g, r)?;
                g.reshape(n, &[rows, width])
            };
            let q = g.linear(x, params[0])?;
            let q = per_head(g, q, Graph::l2_norm_rows)?;
            let kk = g.linear(x, params[1])?;
            let kk = per_head(g, kk, Graph::l2_norm_rows)?;
            let v = g.linear(x, params[2])?;
            let mut next = 4;
            let beta = if matches!(rule, Rule::Delta | Rule::GatedDelta) {
                let b = g.linear(x, params[next])?;
                next += 1;
                Some(g.sigmoid(b))
            } else {
                None
            };
            let decay = if rule.decay_width(hd) > 0 {
                let z = g.linear(x, params[next])?;
                let z = g.add_cols(z, params[next + 1])?;
                Some(g.sigmoid(z))
            } else {
                None
            };
            let dims = ScanDims {
                batch,
                len,
                heads,
                dk: hd,
                dv: hd,
            };
            let y = g.scan(rule, dims, q, kk, v, beta, decay)?;
            let y = per_head(g, y, Graph::rms_norm)?;
            g.linear(y, params[3])
        }
    }
}
