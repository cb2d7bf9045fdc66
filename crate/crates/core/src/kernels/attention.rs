//! Causal softmax attention with grouped-query heads and an optional
//! sliding window. Position `t` attends to `max(0, t-w+1) ..= t`.

use crate::error::{contract, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnDims {
    pub batch: usize,
    pub len: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub window: Option<usize>,
}

impl AttnDims {
    pub fn validate(&self) -> Result<()> {
        if self.window == Some(0) {
            return Err(contract("attention window must be at least 1"));
        }
        if self.kv_heads == 0 || !self.heads.is_multiple_of(self.kv_heads) {
            return Err(contract(format!(
                "{} query heads not divisible into {} kv heads",
                self.heads, self.kv_heads
            )));
        }
        Ok(())
    }

    /// First attended position for query position `t`.
    #[inline]
    pub fn start(&self, t: usize) -> usize {
        match self.window {
            Some(w) => (t + 1).saturating_sub(w),
            None => 0,
        }
    }

    fn group(&self) -> usize {
        self.heads / self.kv_heads
    }
}

pub struct AttnOutput {
    /// rows × heads·head_dim
    pub y: Vec<f64>,
    /// Attention probabilities, `[(b*heads + h) * len + t] * len + j`.
    pub probs: Vec<f64>,
}

pub fn forward(d: &AttnDims, q: &[f64], k: &[f64], v: &[f64]) -> Result<AttnOutput> {
    d.validate()?;
    let (hd, len) = (d.head_dim, d.len);
    let rows = d.batch * len;
    if q.len() != rows * d.heads * hd || k.len() != rows * d.kv_heads * hd || v.len() != k.len() {
        return Err(contract("attention inputs have inconsistent sizes"));
    }
    let scale = 1.0 / (hd as f64).sqrt();
    let mut y = vec![0.0; q.len()];
    let mut probs = vec![0.0; d.batch * d.heads * len * len];
    for b in 0..d.batch {
        for h in 0..d.heads {
            let kh = h / d.group();
            for t in 0..len {
                let qrow = &q[((b * len + t) * d.heads + h) * hd..][..hd];
                let p = &mut probs[((b * d.heads + h) * len + t) * len..][..len];
                let lo = d.start(t);
                let mut max = f64::NEG_INFINITY;
                for j in lo..=t {
                    let krow = &k[((b * len + j) * d.kv_heads + kh) * hd..][..hd];
                    let s = scale * dot(qrow, krow);
                    p[j] = s;
                    max = max.max(s);
                }
                let mut z = 0.0;
                for pj in &mut p[lo..=t] {
                    *pj = (*pj - max).exp();
                    z += *pj;
                }
                let out = &mut y[((b * len + t) * d.heads + h) * hd..][..hd];
                for j in lo..=t {
                    p[j] /= z;
                    let vrow = &v[((b * len + j) * d.kv_heads + kh) * hd..][..hd];
                    for (o, vv) in out.iter_mut().zip(vrow) {
                        *o += p[j] * vv;
                    }
                }
            }
        }
    }
    Ok(AttnOutput { y, probs })
}

pub struct AttnGrads {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
}

pub fn backward(d: &AttnDims, q: &[f64], k: &[f64], v: &[f64], probs: &[f64], dy: &[f64]) -> AttnGrads {
    let (hd, len) = (d.head_dim, d.len);
    let scale = 1.0 / (hd as f64).sqrt();
    let mut gq = vec![0.0; q.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gv = vec![0.0; v.len()];
    let mut dp = vec![0.0; len];
    for b in 0..d.batch {
        for h in 0..d.heads {
            let kh = h / d.group();
            for t in 0..len {
                let p = &probs[((b * d.heads + h) * len + t) * len..][..len];
                let dyt = &dy[((b * len + t) * d.heads + h) * hd..][..hd];
                let lo = d.start(t);
                let mut inner = 0.0;
                for j in lo..=t {
                    let voff = ((b * len + j) * d.kv_heads + kh) * hd;
                    dp[j] = dot(dyt, &v[voff..voff + hd]);
                    inner += p[j] * dp[j];
                    for x in 0..hd {
                        gv[voff + x] += p[j] * dyt[x];
                    }
                }
                let qoff = ((b * len + t) * d.heads + h) * hd;
                for j in lo..=t {
                    let ds = p[j] * (dp[j] - inner) * scale;
                    let koff = ((b * len + j) * d.kv_heads + kh) * hd;
                    for x in 0..hd {
                        gq[qoff + x] += ds * k[koff + x];
                        gk[koff + x] += ds * q[qoff + x];
                    }
                }
            }
        }
    }
    AttnGrads { q: gq, k: gk, v: gv }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
