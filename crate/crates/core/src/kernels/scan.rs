//! Linear recurrences over a matrix-valued associative memory.
//!
//! All linear-attention and state-space mixers share one update family, per
//! head, with state `S` of shape `dk × dv`:
//!
//! ```text
//! S_t = D_t (I - e_t k_t k_tᵀ) S_{t-1} + w_t k_t v_tᵀ
//! y_t = S_tᵀ q_t
//! ```
//!
//! | rule          | D_t (decay)          | e_t (erase) | w_t (write) |
//! |---------------|----------------------|-------------|-------------|
//! | `Delta`       | 1                    | β_t         | β_t         |
//! | `GatedDelta`  | α_t (scalar / head)  | β_t         | β_t         |
//! | `ChannelDecay`| diag(α_t) over dk    | 0           | 1           |
//! | `ScalarDecay` | α_t (scalar / head)  | 0           | 1           |
//!
//! Two forward routes exist: [`sequential`] iterates [`step_head`], and
//! [`chunked`] composes per-chunk transition operators independently of the
//! incoming state before stitching chunks together. They must agree.

use crate::error::{contract, Result};
use crate::exec::Execution;

pub const CHUNK: usize = 16;

/// Keys fed to a delta rule must satisfy ‖k‖ ≤ 1 + this (checked in debug builds).
pub const KEY_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    Delta,
    GatedDelta,
    ChannelDecay,
    ScalarDecay,
}

impl Rule {
    fn erases(self) -> bool {
        matches!(self, Rule::Delta | Rule::GatedDelta)
    }
    fn has_beta(self) -> bool {
        self.erases()
    }
    /// Number of decay values per head per token (0 when ungated).
    pub fn decay_width(self, dk: usize) -> usize {
        match self {
            Rule::Delta => 0,
            Rule::GatedDelta | Rule::ScalarDecay => 1,
            Rule::ChannelDecay => dk,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanDims {
    pub batch: usize,
    pub len: usize,
    pub heads: usize,
    pub dk: usize,
    pub dv: usize,
}

impl ScanDims {
    pub fn rows(&self) -> usize {
        self.batch * self.len
    }
    pub fn state_len(&self) -> usize {
        self.dk * self.dv
    }
}

/// Borrowed inputs for one scan. Row `r = b * len + t`; within a row, heads
/// are contiguous blocks of `dk` (q, k), `dv` (v), 1 (beta) or
/// `decay_width` (decay) values.
#[derive(Clone, Copy)]
pub struct ScanInput<'a> {
    pub rule: Rule,
    pub dims: ScanDims,
    pub q: &'a [f64],
    pub k: &'a [f64],
    pub v: &'a [f64],
    pub beta: Option<&'a [f64]>,
    pub decay: Option<&'a [f64]>,
}

impl<'a> ScanInput<'a> {
    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        let rows = d.rows();
        let check = |name: &str, got: usize, want: usize| {
            if got != want {
                Err(contract(format!("scan input {name}: {got} values, expected {want}")))
            } else {
                Ok(())
            }
        };
        check("q", self.q.len(), rows * d.heads * d.dk)?;
        check("k", self.k.len(), rows * d.heads * d.dk)?;
        check("v", self.v.len(), rows * d.heads * d.dv)?;
        match (self.rule.has_beta(), self.beta) {
            (true, Some(b)) => check("beta", b.len(), rows * d.heads)?,
            (true, None) => return Err(contract("delta rule needs beta")),
            (false, Some(_)) => return Err(contract("beta given to a non-delta rule")),
            (false, None) => {}
        }
        if cfg!(debug_assertions) && self.rule.erases() {
            for key in self.k.chunks(d.dk) {
                let n = key.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 1.0 + KEY_NORM_TOL {
                    return Err(contract(format!("delta-rule key norm {n} exceeds 1")));
                }
            }
        }
        let dw = self.rule.decay_width(d.dk);
        match (dw, self.decay) {
            (0, None) => {}
            (0, Some(_)) => return Err(contract("decay given to an ungated rule")),
            (_, None) => return Err(contract("gated rule needs decay")),
            (w, Some(a)) => {
                check("decay", a.len(), rows * d.heads * w)?;
                if let Some(bad) = a.iter().find(|x| !(**x > 0.0 && **x <= 1.0)) {
                    // decay = 0 is allowed as a limit case
                    if *bad != 0.0 {
                        return Err(contract(format!("decay {bad} outside (0, 1]")));
                    }
                }
            }
        }
        Ok(())
    }

    #[inline]
    fn token(&self, row: usize, h: usize) -> Token<'a> {
        let d = &self.dims;
        let qk = (row * d.heads + h) * d.dk;
        let vv = (row * d.heads + h) * d.dv;
        let dw = self.rule.decay_width(d.dk);
        Token {
            q: &self.q[qk..qk + d.dk],
            k: &self.k[qk..qk + d.dk],
            v: &self.v[vv..vv + d.dv],
            beta: self.beta.map_or(1.0, |b| b[row * d.heads + h]),
            decay: self
                .decay
                .map(|a| &a[(row * d.heads + h) * dw..(row * d.heads + h + 1) * dw]),
        }
    }
}

/// One head's inputs at one position.
#[derive(Clone, Copy)]
pub struct Token<'a> {
    pub q: &'a [f64],
    pub k: &'a [f64],
    pub v: &'a [f64],
    pub beta: f64,
    pub decay: Option<&'a [f64]>,
}

/// Advance one head's state by one token and write `y = S_tᵀ q` into `y`.
pub fn step_head(rule: Rule, s: &mut [f64], tok: Token, y: &mut [f64]) {
    let dk = tok.k.len();
    let dv = tok.v.len();
    debug_assert_eq!(s.len(), dk * dv);
    if rule.erases() {
        let e = tok.beta;
        let mut u = vec![0.0; dv];
        for i in 0..dk {
            let ki = tok.k[i];
            for j in 0..dv {
                u[j] += ki * s[i * dv + j];
            }
        }
        for i in 0..dk {
            let c = e * tok.k[i];
            for j in 0..dv {
                s[i * dv + j] -= c * u[j];
            }
        }
    }
    apply_decay(s, tok.decay, dk, dv);
    let w = if rule.erases() { tok.beta } else { 1.0 };
    for i in 0..dk {
        let c = w * tok.k[i];
        for j in 0..dv {
            s[i * dv + j] += c * tok.v[j];
        }
    }
    y.iter_mut().for_each(|x| *x = 0.0);
    for i in 0..dk {
        let qi = tok.q[i];
        for j in 0..dv {
            y[j] += s[i * dv + j] * qi;
        }
    }
}

#[inline]
fn apply_decay(s: &mut [f64], decay: Option<&[f64]>, dk: usize, dv: usize) {
    match decay {
        None => {}
        Some([a]) => s.iter_mut().for_each(|x| *x *= a),
        Some(a) => {
            for i in 0..dk {
                let ai = a[i];
                s[i * dv..(i + 1) * dv].iter_mut().for_each(|x| *x *= ai);
            }
        }
    }
}

/// Output of a forward scan.
#[derive(Debug, Clone)]
pub struct ScanOutput {
    /// rows × heads·dv
    pub y: Vec<f64>,
    /// Final state per (sequence, head), each `dk·dv`.
    pub last: Vec<f64>,
    /// When requested: states `S_0..S_T` per (sequence, head), used by the
    /// backward pass. Layout `[(b*heads + h) * (len+1) + t] * dk*dv`.
    pub history: Option<Vec<f64>>,
}

/// Step-by-step scan. `init` holds one state per (sequence, head); `None`
/// starts from zero.
pub fn sequential(inp: &ScanInput, init: Option<&[f64]>, keep_history: bool) -> Result<ScanOutput> {
    inp.validate()?;
    let d = inp.dims;
    let sl = d.state_len();
    let mut y = vec![0.0; d.rows() * d.heads * d.dv];
    let mut last = init
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; d.batch * d.heads * sl]);
    if last.len() != d.batch * d.heads * sl {
        return Err(contract("initial state has wrong size"));
    }
    let mut history = keep_history.then(|| vec![0.0; d.batch * d.heads * (d.len + 1) * sl]);
    let mut yt = vec![0.0; d.dv];
    for b in 0..d.batch {
        for h in 0..d.heads {
            let bh = b * d.heads + h;
            let s = &mut last[bh * sl..(bh + 1) * sl];
            if let Some(hist) = history.as_mut() {
                hist[bh * (d.len + 1) * sl..][..sl].copy_from_slice(s);
            }
            for t in 0..d.len {
                let row = b * d.len + t;
                step_head(inp.rule, s, inp.token(row, h), &mut yt);
                let off = (row * d.heads + h) * d.dv;
                y[off..off + d.dv].copy_from_slice(&yt);
                if let Some(hist) = history.as_mut() {
                    hist[(bh * (d.len + 1) + t + 1) * sl..][..sl].copy_from_slice(s);
                }
            }
        }
    }
    Ok(ScanOutput { y, last, history })
}

/// Per-chunk quantities that do not depend on the incoming state.
struct ChunkSummary {
    /// Composed transition M = A_end … A_start (dk × dk).
    m: Vec<f64>,
    /// Zero-start accumulated state B (dk × dv).
    b: Vec<f64>,
    /// Per position: r_t = M_tᵀ q_t (dk) and c_t = B_tᵀ q_t (dv).
    r: Vec<f64>,
    c: Vec<f64>,
}

/// Left-multiply `x` (dk × n) by A_t = D_t (I - e k kᵀ) in place.
fn apply_transition(rule: Rule, tok: &Token, x: &mut [f64], dk: usize, n: usize) {
    if rule.erases() {
        let e = tok.beta;
        let mut u = vec![0.0; n];
        for i in 0..dk {
            for j in 0..n {
                u[j] += tok.k[i] * x[i * n + j];
            }
        }
        for i in 0..dk {
            let c = e * tok.k[i];
            for j in 0..n {
                x[i * n + j] -= c * u[j];
            }
        }
    }
    apply_decay(x, tok.decay, dk, n);
}

fn summarize_chunk(inp: &ScanInput, b: usize, h: usize, t0: usize, t1: usize) -> ChunkSummary {
    let d = inp.dims;
    let (dk, dv) = (d.dk, d.dv);
    let mut m = vec![0.0; dk * dk];
    for i in 0..dk {
        m[i * dk + i] = 1.0;
    }
    let mut acc = vec![0.0; dk * dv];
    let n = t1 - t0;
    let mut r = vec![0.0; n * dk];
    let mut c = vec![0.0; n * dv];
    for (slot, t) in (t0..t1).enumerate() {
        let tok = inp.token(b * d.len + t, h);
        apply_transition(inp.rule, &tok, &mut m, dk, dk);
        apply_transition(inp.rule, &tok, &mut acc, dk, dv);
        let w = if inp.rule.erases() { tok.beta } else { 1.0 };
        for i in 0..dk {
            let ci = w * tok.k[i];
            for j in 0..dv {
                acc[i * dv + j] += ci * tok.v[j];
            }
        }
        for i in 0..dk {
            let qi = tok.q[i];
            for j in 0..dk {
                r[slot * dk + j] += m[i * dk + j] * qi;
            }
            for j in 0..dv {
                c[slot * dv + j] += acc[i * dv + j] * qi;
            }
        }
    }
    ChunkSummary { m, b: acc, r, c }
}

/// Blocked scan: chunk summaries are computed independently (in parallel
/// when `exec` allows), then stitched with one pass over chunk boundaries.
pub fn chunked(inp: &ScanInput, init: Option<&[f64]>, chunk: usize, exec: Execution) -> Result<ScanOutput> {
    inp.validate()?;
    if chunk == 0 {
        return Err(contract("chunk size must be positive"));
    }
    let d = inp.dims;
    let (dk, dv) = (d.dk, d.dv);
    let sl = d.state_len();
    let n_chunks = d.len.div_ceil(chunk);
    let jobs: Vec<(usize, usize, usize)> = (0..d.batch)
        .flat_map(|b| (0..d.heads).flat_map(move |h| (0..n_chunks).map(move |c| (b, h, c))))
        .collect();
    let summaries = exec.map(&jobs, |&(b, h, c)| {
        summarize_chunk(inp, b, h, c * chunk, ((c + 1) * chunk).min(d.len))
    });
    let mut last = init
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; d.batch * d.heads * sl]);
    if last.len() != d.batch * d.heads * sl {
        return Err(contract("initial state has wrong size"));
    }
    let mut y = vec![0.0; d.rows() * d.heads * dv];
    for (idx, &(b, h, c)) in jobs.iter().enumerate() {
        let sum = &summaries[idx];
        let bh = b * d.heads + h;
        let s_in = last[bh * sl..(bh + 1) * sl].to_vec();
        let t0 = c * chunk;
        let t1 = ((c + 1) * chunk).min(d.len);
        for (slot, t) in (t0..t1).enumerate() {
            let off = ((b * d.len + t) * d.heads + h) * dv;
            let out = &mut y[off..off + dv];
            out.copy_from_slice(&sum.c[slot * dv..(slot + 1) * dv]);
            for i in 0..dk {
                let ri = sum.r[slot * dk + i];
                for j in 0..dv {
                    out[j] += s_in[i * dv + j] * ri;
                }
            }
        }
        let s_out = &mut last[bh * sl..(bh + 1) * sl];
        s_out.copy_from_slice(&sum.b);
        for i in 0..dk {
            for p in 0..dk {
                let mip = sum.m[i * dk + p];
                if mip != 0.0 {
                    for j in 0..dv {
                        s_out[i * dv + j] += mip * s_in[p * dv + j];
                    }
                }
            }
        }
    }
    Ok(ScanOutput { y, last, history: None })
}

/// Gradients of a scan with respect to its inputs.
#[derive(Debug, Clone)]
pub struct ScanGrads {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub beta: Option<Vec<f64>>,
    pub decay: Option<Vec<f64>>,
}

/// Reverse pass through the recurrence given the stored state history.
pub fn backward(inp: &ScanInput, history: &[f64], dy: &[f64]) -> Result<ScanGrads> {
    let d = inp.dims;
    let (dk, dv) = (d.dk, d.dv);
    let sl = d.state_len();
    if history.len() != d.batch * d.heads * (d.len + 1) * sl {
        return Err(contract("scan history has wrong size"));
    }
    if dy.len() != d.rows() * d.heads * dv {
        return Err(contract("scan upstream gradient has wrong size"));
    }
    let rule = inp.rule;
    let dw = rule.decay_width(dk);
    let mut gq = vec![0.0; inp.q.len()];
    let mut gk = vec![0.0; inp.k.len()];
    let mut gv = vec![0.0; inp.v.len()];
    let mut gbeta = inp.beta.map(|b| vec![0.0; b.len()]);
    let mut gdecay = inp.decay.map(|a| vec![0.0; a.len()]);

    let mut g = vec![0.0; sl];
    let mut gp = vec![0.0; sl];
    let mut p = vec![0.0; sl];
    let mut u = vec![0.0; dv];
    let mut z = vec![0.0; dv];
    for b in 0..d.batch {
        for h in 0..d.heads {
            let bh = b * d.heads + h;
            g.iter_mut().for_each(|x| *x = 0.0);
            for t in (0..d.len).rev() {
                let row = b * d.len + t;
                let tok = inp.token(row, h);
                let s_prev = &history[(bh * (d.len + 1) + t) * sl..][..sl];
                let s_cur = &history[(bh * (d.len + 1) + t + 1) * sl..][..sl];
                let dyt = &dy[(row * d.heads + h) * dv..][..dv];
                let qk_off = (row * d.heads + h) * dk;
                let v_off = (row * d.heads + h) * dv;

                for i in 0..dk {
                    let mut acc = 0.0;
                    for j in 0..dv {
                        g[i * dv + j] += tok.q[i] * dyt[j];
                        acc += s_cur[i * dv + j] * dyt[j];
                    }
                    gq[qk_off + i] += acc;
                }

                let w = if rule.erases() { tok.beta } else { 1.0 };
                let mut dwrite = 0.0;
                for i in 0..dk {
                    let mut gv_i = 0.0;
                    for j in 0..dv {
                        let gij = g[i * dv + j];
                        gv_i += gij * tok.v[j];
                        gv[v_off + j] += w * gij * tok.k[i];
                    }
                    dwrite += tok.k[i] * gv_i;
                    gk[qk_off + i] += w * gv_i;
                }

                // P = (I - e k kᵀ) S_prev
                p.copy_from_slice(s_prev);
                let e = if rule.erases() { tok.beta } else { 0.0 };
                if rule.erases() {
                    u.iter_mut().for_each(|x| *x = 0.0);
                    for i in 0..dk {
                        for j in 0..dv {
                            u[j] += tok.k[i] * s_prev[i * dv + j];
                        }
                    }
                    for i in 0..dk {
                        for j in 0..dv {
                            p[i * dv + j] -= e * tok.k[i] * u[j];
                        }
                    }
                }

                match tok.decay {
                    None => gp.copy_from_slice(&g),
                    Some([a]) => {
                        let mut da = 0.0;
                        for x in 0..sl {
                            da += g[x] * p[x];
                            gp[x] = a * g[x];
                        }
                        gdecay.as_mut().unwrap()[row * d.heads + h] += da;
                    }
                    Some(a) => {
                        let gd = gdecay.as_mut().unwrap();
                        for i in 0..dk {
                            let mut da = 0.0;
                            for j in 0..dv {
                                da += g[i * dv + j] * p[i * dv + j];
                                gp[i * dv + j] = a[i] * g[i * dv + j];
                            }
                            gd[(row * d.heads + h) * dw + i] += da;
                        }
                    }
                }

                if rule.erases() {
                    z.iter_mut().for_each(|x| *x = 0.0);
                    for i in 0..dk {
                        for j in 0..dv {
                            z[j] += tok.k[i] * gp[i * dv + j];
                        }
                    }
                    let derase: f64 = -z.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>();
                    for i in 0..dk {
                        let mut acc = 0.0;
                        for j in 0..dv {
                            acc += gp[i * dv + j] * u[j] + s_prev[i * dv + j] * z[j];
                        }
                        gk[qk_off + i] -= e * acc;
                    }
                    for i in 0..dk {
                        for j in 0..dv {
                            g[i * dv + j] = gp[i * dv + j] - e * tok.k[i] * z[j];
                        }
                    }
                    gbeta.as_mut().unwrap()[row * d.heads + h] += derase + dwrite;
                } else {
                    g.copy_from_slice(&gp);
                }
            }
        }
    }
    Ok(ScanGrads {
        q: gq,
        k: gk,
        v: gv,
        beta: gbeta,
        decay: gdecay,
    })
}
