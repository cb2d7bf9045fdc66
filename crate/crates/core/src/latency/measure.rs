//! Timing harness behind [`profile`] and end-to-end decode measurement.

use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::genome::{default_head_dim, ModelSpec, FFN_MULT};
use crate::kernels::{gemm, Mat};
use crate::model::Model;
use crate::operators::{MixerConfig, OpState, Operator, OperatorKind};
use crate::stats::{iqr, median};

use super::{
    op_key, overhead_key, LatencyLut, LutEntry, LutKey, Regime, CTX_BUCKETS, MAX_DISPERSION, MIN_WARMUP, PREFILL_LEN,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileOptions {
    pub reps: usize,
    pub warmup: usize,
    /// Each repetition loops until it spans at least this long.
    pub min_rep_s: f64,
    pub vocab: usize,
    pub buckets: Vec<usize>,
    pub seed: u64,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        ProfileOptions {
            reps: 15,
            warmup: MIN_WARMUP,
            min_rep_s: 5e-3,
            vocab: crate::corpus::VOCAB,
            buckets: CTX_BUCKETS.to_vec(),
            seed: 0,
        }
    }
}

/// CPU model, logical core count and target triple.
pub fn host_fingerprint() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown-cpu".into());
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{cpu} | {cores} cores | {}-{}",
        std::env::consts::ARCH,
        std::env::consts::OS
    )
}

fn rms_gain(x: &mut [f64]) {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + crate::graph::RMS_EPS).sqrt();
    x.iter_mut().for_each(|v| *v *= inv);
}

/// Seconds per call of `f`, one sample per repetition.
fn sample<F: FnMut()>(opts: &ProfileOptions, mut f: F) -> Vec<f64> {
    let mut inner = 1usize;
    for _ in 0..opts.warmup {
        loop {
            let t = Instant::now();
            for _ in 0..inner {
                f();
            }
            if t.elapsed().as_secs_f64() >= opts.min_rep_s || inner >= 1 << 20 {
                break;
            }
            inner *= 2;
        }
    }
    (0..opts.reps)
        .map(|_| {
            let t = Instant::now();
            for _ in 0..inner {
                f();
            }
            t.elapsed().as_secs_f64() / inner as f64
        })
        .collect()
}

fn mixer_at(width: usize) -> MixerConfig {
    MixerConfig::for_width(width, default_head_dim(width), FFN_MULT)
}

/// Decode state with `len` cached tokens (attention) or a random memory.
fn warm_state(op: &Operator, len: usize, rng: &mut ChaCha8Rng) -> OpState {
    let mut st = op.new_state();
    match &mut st {
        OpState::Kv(cache) => {
            let a = &op.cfg.attn;
            let kw = a.n_kv_heads * a.head_dim;
            let mut k = vec![0.0; kw];
            let mut v = vec![0.0; kw];
            for _ in 0..len {
                k.iter_mut()
                    .chain(v.iter_mut())
                    .for_each(|x| *x = rng.gen_range(-1.0..1.0));
                cache.push(&k, &v);
            }
        }
        OpState::Memory { s, .. } => s.iter_mut().for_each(|x| *x = rng.gen_range(-0.1..0.1)),
        OpState::Stateless => {}
    }
    st
}

fn measure_key(key: &LutKey, opts: &ProfileOptions) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let w = key.width;
    let cfg = mixer_at(w);
    let x: Vec<f64> = (0..w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    match key.kind {
        super::CostKind::Overhead => {
            let v = opts.vocab;
            let emb: Vec<f64> = (0..v * w).map(|_| rng.gen_range(-0.1..0.1)).collect();
            let head = emb.clone();
            let mut logits = vec![0.0; v];
            let mut tok = 0usize;
            Ok(sample(opts, || {
                let mut h = emb[tok * w..(tok + 1) * w].to_vec();
                rms_gain(&mut h);
                gemm(
                    1,
                    w,
                    v,
                    1.0,
                    Mat::row_major(&h, w),
                    Mat::transposed(&head, w),
                    0.0,
                    &mut logits,
                );
                tok = (tok + 1) % v;
                black_box(&logits);
            }))
        }
        super::CostKind::Op(kind) => {
            // Full attention at KV length L costs what a window of L costs
            // with a full cache; the ring buffer keeps L fixed while timing.
            let timed_kind = match (kind.is_attention(), key.regime) {
                (true, Regime::Decode) => {
                    let len = kind.window().map_or(key.ctx_bucket, |win| win.min(key.ctx_bucket));
                    OperatorKind::SlidingWindowAttention { window: len }
                }
                _ => kind,
            };
            let op = Operator::init(timed_kind, cfg, 1, &mut rng)?;
            match key.regime {
                Regime::Decode => {
                    let fill = timed_kind.window().unwrap_or(0);
                    let mut st = warm_state(&op, fill, &mut rng);
                    let mut h = x.clone();
                    Ok(sample(opts, || {
                        let mut normed = h.clone();
                        rms_gain(&mut normed);
                        let y = op.step(&mut st, &normed).expect("shapes fixed at init");
                        h.iter_mut().zip(&y).for_each(|(a, b)| *a = 0.5 * (*a + b));
                        black_box(&h);
                    }))
                }
                Regime::Prefill => {
                    let xs = crate::tensor::Tensor::from_fn(&[PREFILL_LEN, w], |_| rng.gen_range(-1.0..1.0));
                    let per_call = sample(opts, || {
                        black_box(op.sequence(&xs, None).expect("shapes fixed at init"));
                    });
                    Ok(per_call.into_iter().map(|s| s / PREFILL_LEN as f64).collect())
                }
            }
        }
    }
}

/// IQR over median; infinite for a non-positive median.
pub fn dispersion(samples: &[f64]) -> f64 {
    let med = median(samples);
    if med > 0.0 {
        iqr(samples) / med
    } else {
        f64::INFINITY
    }
}

fn stable_entry(key: LutKey, opts: &ProfileOptions) -> Result<LutEntry> {
    gate_entry(key, || measure_key(&key, opts))
}

/// Dispersion gate: accept the first of at most two sample sets with
/// IQR/median within [`MAX_DISPERSION`], otherwise fail with the last
/// dispersion seen.
pub fn gate_entry<F>(key: LutKey, mut measure: F) -> Result<LutEntry>
where
    F: FnMut() -> Result<Vec<f64>>,
{
    let mut last = 0.0;
    for _ in 0..2 {
        let samples = measure()?;
        let (med, spread) = (median(&samples), iqr(&samples));
        last = dispersion(&samples);
        if med > 0.0 && last <= MAX_DISPERSION {
            return Ok(LutEntry {
                kind: key.kind,
                width: key.width,
                regime: key.regime,
                ctx_bucket: key.ctx_bucket,
                median_s: med,
                iqr_s: spread,
                reps: samples.len(),
            });
        }
    }
    Err(Error::Unstable {
        key: key.to_string(),
        dispersion: last,
        limit: MAX_DISPERSION,
    })
}

/// Measure every operator kind at every width (attention at every context
/// bucket), plus the per-token overhead at each width. Single-threaded.
pub fn profile(kinds: &[OperatorKind], widths: &[usize], regime: Regime, opts: &ProfileOptions) -> Result<LatencyLut> {
    if opts.warmup < MIN_WARMUP || opts.reps < 4 {
        return Err(Error::Config(format!(
            "profiling needs ≥ {MIN_WARMUP} warmup and ≥ 4 timed repetitions"
        )));
    }
    let mut lut = LatencyLut::new(host_fingerprint());
    if kinds.is_empty() {
        return Ok(lut);
    }
    let mut keys = Vec::new();
    for &w in widths {
        mixer_at(w).validate()?;
        keys.push(overhead_key(w, regime));
        for &k in kinds {
            k.validate()?;
            if k.is_attention() && regime == Regime::Decode {
                keys.extend(opts.buckets.iter().map(|&b| LutKey {
                    ctx_bucket: b,
                    ..op_key(k, w, regime, 0)
                }));
            } else {
                keys.push(op_key(k, w, regime, 0));
            }
        }
    }
    keys.sort();
    keys.dedup();
    for key in keys {
        lut.insert(stable_entry(key, opts)?)?;
    }
    Ok(lut)
}

/// Measured seconds to decode `gen_len` tokens after a context of `ctx`
/// cached tokens (random cache contents), median over `reps`.
pub fn measure_decode(
    spec: &ModelSpec,
    vocab: usize,
    ctx: usize,
    gen_len: usize,
    reps: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::init(spec.clone(), vocab, &mut rng)?;
    let fresh: Vec<OpState> = (0..spec.ops.len())
        .map(|i| {
            let op = model.operator(i);
            let fill = if op.kind.is_attention() {
                op.kind.window().map_or(ctx, |w| w.min(ctx))
            } else {
                0
            };
            warm_state(&op, fill, &mut rng)
        })
        .collect();
    let mut times = Vec::with_capacity(reps);
    for rep in 0..reps + 1 {
        let mut states = fresh.clone();
        let t = Instant::now();
        let mut tok = 0;
        for _ in 0..gen_len {
            let logits = model.step(&mut states, tok)?;
            tok = (black_box(logits[0]).to_bits() as usize) % vocab;
        }
        // first pass warms caches
        if rep > 0 {
            times.push(t.elapsed().as_secs_f64());
        }
    }
    Ok(median(&times))
}
