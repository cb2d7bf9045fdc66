//! Graph-free sequence and step forms.

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::graph::{sigmoid, softmax_into, L2_EPS, RMS_EPS};
use crate::kernels::attention::{self, dot, AttnDims};
use crate::kernels::scan::{self, Rule, ScanDims, ScanInput, Token, CHUNK};
use crate::kernels::{gemm, Mat};
use crate::tensor::Tensor;

use super::state::{KvCache, OpState};
use super::{Operator, OperatorKind};

/// `x (rows × in) · wᵀ` for `w: out × in`.
pub(crate) fn project(x: &[f64], rows: usize, w: &Tensor) -> Vec<f64> {
    let (out, inp) = w.dims2();
    let mut y = vec![0.0; rows * out];
    gemm(
        rows,
        inp,
        out,
        1.0,
        Mat::row_major(x, inp),
        Mat::transposed(w.data(), inp),
        0.0,
        &mut y,
    );
    y
}

pub(crate) fn l2_groups(buf: &mut [f64], dim: usize) {
    for g in buf.chunks_mut(dim) {
        let n = g.iter().map(|x| x * x).sum::<f64>().sqrt().max(L2_EPS);
        g.iter_mut().for_each(|x| *x /= n);
    }
}

pub(crate) fn rms_groups(buf: &mut [f64], dim: usize) {
    for g in buf.chunks_mut(dim) {
        let ms = g.iter().map(|x| x * x).sum::<f64>() / dim as f64;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        g.iter_mut().for_each(|x| *x *= inv);
    }
}

/// Projected inputs of a linear mixer for `rows` tokens.
struct LinearInputs {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    beta: Option<Vec<f64>>,
    decay: Option<Vec<f64>>,
}

impl Operator {
    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.cfg.width {
            return Err(Error::Shape {
                op: "operator input",
                lhs: vec![cols],
                rhs: vec![self.cfg.width],
            });
        }
        Ok(())
    }

    fn linear_inputs(&self, x: &[f64], rows: usize) -> LinearInputs {
        let rule = self.kind.rule().expect("linear mixer");
        let hd = self.cfg.attn.head_dim;
        let p = &self.params;
        let mut q = project(x, rows, &p[0]);
        let mut k = project(x, rows, &p[1]);
        l2_groups(&mut q, hd);
        l2_groups(&mut k, hd);
        let v = project(x, rows, &p[2]);
        let mut next = 4;
        let beta = matches!(rule, Rule::Delta | Rule::GatedDelta).then(|| {
            let b = project(x, rows, &p[next]).into_iter().map(sigmoid).collect();
            next += 1;
            b
        });
        let decay = (rule.decay_width(hd) > 0).then(|| {
            let raw = project(x, rows, &p[next]);
            let bias = p[next + 1].data();
            raw.iter()
                .enumerate()
                .map(|(i, z)| sigmoid(z + bias[i % bias.len()]))
                .collect()
        });
        LinearInputs { q, k, v, beta, decay }
    }

    fn ffn_rows(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let up = project(x, rows, &self.params[0]);
        let gate = project(x, rows, &self.params[1]);
        let h: Vec<f64> = up.iter().zip(&gate).map(|(u, g)| g * sigmoid(*g) * u).collect();
        project(&h, rows, &self.params[2])
    }

    pub fn new_state(&self) -> OpState {
        let a = &self.cfg.attn;
        match self.kind {
            OperatorKind::Ffn => OpState::Stateless,
            k if k.is_attention() => OpState::Kv(KvCache::new(a.n_kv_heads * a.head_dim, k.window())),
            _ => {
                let heads = self.cfg.linear_heads();
                OpState::Memory {
                    heads,
                    dk: a.head_dim,
                    dv: a.head_dim,
                    s: vec![0.0; heads * a.head_dim * a.head_dim],
                }
            }
        }
    }

    /// Parallel form over a whole `T × d` sequence, optionally continuing
    /// from `init`. Returns the outputs and the state after the last token.
    pub fn sequence(&self, x: &Tensor, init: Option<&OpState>) -> Result<(Tensor, OpState)> {
        self.sequence_with(x, init, Execution::Parallel)
    }

    pub fn sequence_with(&self, x: &Tensor, init: Option<&OpState>, exec: Execution) -> Result<(Tensor, OpState)> {
        let (t, cols) = x.dims2();
        self.check_input(cols)?;
        let w = self.cfg.width;
        match self.kind {
            OperatorKind::Ffn => Ok((Tensor::new(vec![t, w], self.ffn_rows(x.data(), t))?, OpState::Stateless)),
            kind if kind.is_attention() => {
                if let Some(OpState::Kv(cache)) = init {
                    if !cache.is_empty() {
                        // Prefix continuation goes through the recurrent form.
                        let mut state = OpState::Kv(cache.clone());
                        let mut out = Vec::with_capacity(t * w);
                        for r in 0..t {
                            out.extend(self.step(&mut state, x.row(r))?);
                        }
                        return Ok((Tensor::new(vec![t, w], out)?, state));
                    }
                }
                let a = &self.cfg.attn;
                let q = project(x.data(), t, &self.params[0]);
                let k = project(x.data(), t, &self.params[1]);
                let v = project(x.data(), t, &self.params[2]);
                let dims = AttnDims {
                    batch: 1,
                    len: t,
                    heads: a.n_heads,
                    kv_heads: a.n_kv_heads,
                    head_dim: a.head_dim,
                    window: kind.window(),
                };
                let y = attention::forward(&dims, &q, &k, &v)?.y;
                let out = project(&y, t, &self.params[3]);
                let kw = a.n_kv_heads * a.head_dim;
                let mut cache = KvCache::new(kw, kind.window());
                let first = kind.window().map_or(0, |win| t.saturating_sub(win));
                for r in first..t {
                    cache.push(&k[r * kw..(r + 1) * kw], &v[r * kw..(r + 1) * kw]);
                }
                Ok((Tensor::new(vec![t, w], out)?, OpState::Kv(cache)))
            }
            kind => {
                let rule = kind.rule().expect("linear mixer");
                let hd = self.cfg.attn.head_dim;
                let heads = self.cfg.linear_heads();
                let li = self.linear_inputs(x.data(), t);
                let dims = ScanDims {
                    batch: 1,
                    len: t,
                    heads,
                    dk: hd,
                    dv: hd,
                };
                let init_s = match init {
                    Some(OpState::Memory { s, .. }) => Some(s.as_slice()),
                    Some(other) => {
                        return Err(Error::Config(format!("{kind} cannot resume from {other:?}")));
                    }
                    None => None,
                };
                let inp = ScanInput {
                    rule,
                    dims,
                    q: &li.q,
                    k: &li.k,
                    v: &li.v,
                    beta: li.beta.as_deref(),
                    decay: li.decay.as_deref(),
                };
                let out = scan::chunked(&inp, init_s, CHUNK, exec)?;
                let mut y = out.y;
                rms_groups(&mut y, hd);
                let proj = project(&y, t, &self.params[3]);
                let state = OpState::Memory {
                    heads,
                    dk: hd,
                    dv: hd,
                    s: out.last,
                };
                Ok((Tensor::new(vec![t, w], proj)?, state))
            }
        }
    }

    /// Recurrent form: consume one token, update `state`, return its output.
    pub fn step(&self, state: &mut OpState, x_t: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x_t.len())?;
        match (self.kind, state) {
            (OperatorKind::Ffn, _) => Ok(self.ffn_rows(x_t, 1)),
            (kind, OpState::Kv(cache)) if kind.is_attention() => {
                let a = &self.cfg.attn;
                let hd = a.head_dim;
                let q = project(x_t, 1, &self.params[0]);
                let k = project(x_t, 1, &self.params[1]);
                let v = project(x_t, 1, &self.params[2]);
                cache.push(&k, &v);
                let group = a.n_heads / a.n_kv_heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let mut y = vec![0.0; a.n_heads * hd];
                let mut scores = vec![0.0; cache.len()];
                let mut probs = vec![0.0; cache.len()];
                for h in 0..a.n_heads {
                    let kh = h / group;
                    let qh = &q[h * hd..(h + 1) * hd];
                    for (j, (kk, _)) in cache.iter().enumerate() {
                        scores[j] = scale * dot(qh, &kk[kh * hd..(kh + 1) * hd]);
                    }
                    softmax_into(&scores, &mut probs);
                    let out = &mut y[h * hd..(h + 1) * hd];
                    for (j, (_, vv)) in cache.iter().enumerate() {
                        for (o, val) in out.iter_mut().zip(&vv[kh * hd..(kh + 1) * hd]) {
                            *o += probs[j] * val;
                        }
                    }
                }
                Ok(project(&y, 1, &self.params[3]))
            }
            (kind, OpState::Memory { heads, dk, dv, s }) if kind.rule().is_some() => {
                let rule = kind.rule().unwrap();
                let li = self.linear_inputs(x_t, 1);
                let dw = rule.decay_width(*dk);
                let sl = *dk * *dv;
                let mut y = vec![0.0; *heads * *dv];
                for h in 0..*heads {
                    let tok = Token {
                        q: &li.q[h * *dk..(h + 1) * *dk],
                        k: &li.k[h * *dk..(h + 1) * *dk],
                        v: &li.v[h * *dv..(h + 1) * *dv],
                        beta: li.beta.as_ref().map_or(1.0, |b| b[h]),
                        decay: li.decay.as_ref().map(|a| &a[h * dw..(h + 1) * dw]),
                    };
                    scan::step_head(rule, &mut s[h * sl..(h + 1) * sl], tok, &mut y[h * *dv..(h + 1) * *dv]);
                }
                rms_groups(&mut y, *dv);
                Ok(project(&y, 1, &self.params[3]))
            }
            (kind, st) => Err(Error::Config(format!("{kind} cannot step with state {st:?}"))),
        }
    }
}
