//! Decoder-only language model assembled from a [`ModelSpec`].
//!
//! Layout: token embedding, optional learned meta tokens prepended to every
//! sequence, a pre-norm residual stack (`h += op(rms(h) * gain)`), a final
//! gained RMS norm and an untied LM head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::genome::ModelSpec;
use crate::graph::{softmax_into, Graph, Var, RMS_EPS};
use crate::operators::{forward_graph, param_specs, truncated_normal, OpState, Operator, WnormCase};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

/// Name, shape and weight-norm role of one trainable tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub case: WnormCase,
}

/// Full parameter layout of a model, in storage order.
pub fn weight_specs(spec: &ModelSpec, vocab: usize) -> Vec<WeightSpec> {
    let w = spec.hidden;
    let ex = |name: String, shape: Vec<usize>| WeightSpec {
        name,
        shape,
        case: WnormCase::Exempt,
    };
    let mut out = vec![ex("emb".into(), vec![vocab, w])];
    if spec.meta_tokens > 0 {
        out.push(ex("meta".into(), vec![spec.meta_tokens, w]));
    }
    let cfg = spec.mixer_config();
    for (i, &kind) in spec.ops.iter().enumerate() {
        out.push(ex(format!("op{i}.norm"), vec![w]));
        for p in param_specs(kind, &cfg) {
            out.push(WeightSpec {
                name: format!("op{i}.{}", p.name),
                shape: p.shape,
                case: p.case,
            });
        }
    }
    out.push(ex("final_norm".into(), vec![w]));
    out.push(ex("head".into(), vec![vocab, w]));
    out
}

/// Trainable parameter count including embedding, meta tokens, gains and head.
pub fn params_count(spec: &ModelSpec, vocab: usize) -> usize {
    weight_specs(spec, vocab)
        .iter()
        .map(|s| s.shape.iter().product::<usize>())
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub vocab: usize,
    pub specs: Vec<WeightSpec>,
    pub params: Vec<Tensor>,
    /// Index of each operator's norm gain in `params`; its weights follow.
    op_offsets: Vec<usize>,
}

/// Token ids of a batch of equal-length sequences, row-major `batch × len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub batch: usize,
    pub len: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

fn rms_gain_rows(x: &mut [f64], gain: &[f64]) {
    let w = gain.len();
    for row in x.chunks_mut(w) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / w as f64;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        row.iter_mut().zip(gain).for_each(|(v, g)| *v *= inv * g);
    }
}

impl Model {
    /// Truncated-normal init (std 0.02, Case2 matrices scaled by
    /// `1/√(2·depth)`), unit gains, decay biases from the operator init.
    pub fn init(spec: ModelSpec, vocab: usize, rng: &mut impl Rng) -> Result<Self> {
        spec.mixer_config().validate()?;
        if vocab == 0 {
            return Err(Error::Config("vocabulary must be nonempty".into()));
        }
        let depth = spec.depth();
        let cfg = spec.mixer_config();
        let mut params = vec![Tensor::from_fn(&[vocab, spec.hidden], |_| {
            truncated_normal(rng) * INIT_STD
        })];
        if spec.meta_tokens > 0 {
            params.push(Tensor::from_fn(&[spec.meta_tokens, spec.hidden], |_| {
                truncated_normal(rng) * INIT_STD
            }));
        }
        for &kind in &spec.ops {
            params.push(Tensor::full(&[spec.hidden], 1.0));
            params.extend(Operator::init(kind, cfg, depth, rng)?.params);
        }
        params.push(Tensor::full(&[spec.hidden], 1.0));
        params.push(Tensor::from_fn(&[vocab, spec.hidden], |_| {
            truncated_normal(rng) * INIT_STD
        }));
        Self::from_params(spec, vocab, params)
    }

    pub fn from_params(spec: ModelSpec, vocab: usize, params: Vec<Tensor>) -> Result<Self> {
        let specs = weight_specs(&spec, vocab);
        if specs.len() != params.len() {
            return Err(contract(format!(
                "model expects {} tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for (s, p) in specs.iter().zip(&params) {
            if s.shape != p.shape() {
                return Err(Error::Shape {
                    op: "model parameter",
                    lhs: s.shape.clone(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let mut op_offsets = Vec::with_capacity(spec.ops.len());
        let mut at = 1 + usize::from(spec.meta_tokens > 0);
        let cfg = spec.mixer_config();
        for &kind in &spec.ops {
            op_offsets.push(at);
            at += 1 + param_specs(kind, &cfg).len();
        }
        Ok(Model {
            spec,
            vocab,
            specs,
            params,
            op_offsets,
        })
    }

    pub fn params_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.specs
            .iter()
            .map(|s| s.name.clone())
            .zip(self.params.iter().cloned())
            .collect()
    }

    /// Operator `i` with its own parameters.
    pub fn operator(&self, i: usize) -> Operator {
        let kind = self.spec.ops[i];
        let at = self.op_offsets[i] + 1;
        let n = param_specs(kind, &self.spec.mixer_config()).len();
        Operator {
            kind,
            cfg: self.spec.mixer_config(),
            params: self.params[at..at + n].to_vec(),
        }
    }

    fn gain(&self, i: usize) -> &[f64] {
        self.params[self.op_offsets[i]].data()
    }

    fn meta_len(&self) -> usize {
        self.spec.meta_tokens
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&t| t >= self.vocab) {
            Some(t) => Err(contract(format!("token {t} outside vocabulary {}", self.vocab))),
            None => Ok(()),
        }
    }

    /// Record the mean next-token loss of `b` on `g`. Returns the loss and the
    /// parameter leaves in storage order.
    pub fn loss_graph(&self, g: &mut Graph, b: &Batch) -> Result<(Var, Vec<Var>)> {
        let vars: Vec<Var> = self.params.iter().map(|p| g.param(p.clone())).collect();
        Ok((self.loss_with(g, &vars, b)?, vars))
    }

    /// As [`Model::loss_graph`] over caller-provided parameter nodes, whose
    /// values must match the layout of this model.
    pub fn loss_with(&self, g: &mut Graph, vars: &[Var], b: &Batch) -> Result<Var> {
        if vars.len() != self.params.len() {
            return Err(contract(format!(
                "{} parameter nodes for {} tensors",
                vars.len(),
                self.params.len()
            )));
        }
        let n = b.batch * b.len;
        if b.inputs.len() != n || b.targets.len() != n || n == 0 {
            return Err(contract(format!(
                "batch {}x{} with {} inputs and {} targets",
                b.batch,
                b.len,
                b.inputs.len(),
                b.targets.len()
            )));
        }
        self.check_ids(&b.inputs)?;
        self.check_ids(&b.targets)?;
        let m = self.meta_len();
        let seq = m + b.len;
        // Meta token j is row vocab + j of the stacked table.
        let (table, mut next) = if m > 0 {
            (g.concat_rows(vars[0], vars[1])?, 2)
        } else {
            (vars[0], 1)
        };
        let mut ids = Vec::with_capacity(b.batch * seq);
        for r in 0..b.batch {
            ids.extend((0..m).map(|j| self.vocab + j));
            ids.extend_from_slice(&b.inputs[r * b.len..(r + 1) * b.len]);
        }
        let mut h = g.gather_rows(table, &ids)?;
        let cfg = self.spec.mixer_config();
        for &kind in &self.spec.ops {
            let gain = vars[next];
            let np = param_specs(kind, &cfg).len();
            let op_params = &vars[next + 1..next + 1 + np];
            next += 1 + np;
            let normed = g.rms_norm(h)?;
            let normed = g.mul_cols(normed, gain)?;
            let y = forward_graph(g, kind, &cfg, normed, op_params, b.batch, seq)?;
            h = g.add(h, y)?;
        }
        if m > 0 {
            let keep: Vec<usize> = (0..b.batch).flat_map(|r| (m..seq).map(move |t| r * seq + t)).collect();
            h = g.gather_rows(h, &keep)?;
        }
        let h = g.rms_norm(h)?;
        let h = g.mul_cols(h, vars[next])?;
        let logits = g.linear(h, vars[next + 1])?;
        g.cross_entropy(logits, &b.targets)
    }

    fn embed(&self, ids: &[usize]) -> Vec<f64> {
        let w = self.spec.hidden;
        let emb = self.params[0].data();
        ids.iter()
            .flat_map(|&t| emb[t * w..(t + 1) * w].iter().copied())
            .collect()
    }

    fn head_rows(&self, h: &mut [f64], rows: usize) -> Result<Tensor> {
        let n = self.params.len();
        rms_gain_rows(h, self.params[n - 2].data());
        let x = Tensor::new(vec![rows, self.spec.hidden], h.to_vec())?;
        x.matmul(&self.params[n - 1].transpose())
    }

    /// Push hidden rows through the operator stack with the sequence forms,
    /// starting from `init` states (fresh when `None`).
    fn run_stack(&self, mut h: Vec<f64>, rows: usize, init: Option<&[OpState]>) -> Result<(Vec<f64>, Vec<OpState>)> {
        let w = self.spec.hidden;
        let mut states = Vec::with_capacity(self.spec.ops.len());
        for i in 0..self.spec.ops.len() {
            let mut normed = h.clone();
            rms_gain_rows(&mut normed, self.gain(i));
            let x = Tensor::new(vec![rows, w], normed)?;
            let (y, st) = self.operator(i).sequence(&x, init.map(|s| &s[i]))?;
            h.iter_mut().zip(y.data()).for_each(|(a, b)| *a += b);
            states.push(st);
        }
        Ok((h, states))
    }

    /// Per-operator states after reading the meta-token prefix: the learned
    /// cache initialization. Fresh states when there are no meta tokens.
    pub fn fold_meta(&self) -> Result<Vec<OpState>> {
        let m = self.meta_len();
        if m == 0 {
            return Ok((0..self.spec.ops.len()).map(|i| self.operator(i).new_state()).collect());
        }
        let h = self.params[1].data().to_vec();
        Ok(self.run_stack(h, m, None)?.1)
    }

    /// Logits of one sequence with the meta prefix run in-line and its
    /// outputs discarded.
    pub fn logits_prefixed(&self, ids: &[usize]) -> Result<Tensor> {
        self.check_ids(ids)?;
        let m = self.meta_len();
        let w = self.spec.hidden;
        let mut h = if m > 0 {
            self.params[1].data().to_vec()
        } else {
            Vec::new()
        };
        h.extend(self.embed(ids));
        let (mut out, _) = self.run_stack(h, m + ids.len(), None)?;
        self.head_rows(&mut out[m * w..], ids.len())
    }

    /// Logits of one sequence continuing from `states` (for example the
    /// result of [`Model::fold_meta`]); returns the advanced states.
    pub fn logits_from_states(&self, states: &[OpState], ids: &[usize]) -> Result<(Tensor, Vec<OpState>)> {
        self.check_ids(ids)?;
        if states.len() != self.spec.ops.len() {
            return Err(contract(format!(
                "{} states for {} operators",
                states.len(),
                self.spec.ops.len()
            )));
        }
        let (mut out, next) = self.run_stack(self.embed(ids), ids.len(), Some(states))?;
        Ok((self.head_rows(&mut out, ids.len())?, next))
    }

    /// Decode one token with the recurrent forms.
    pub fn step(&self, states: &mut [OpState], id: usize) -> Result<Vec<f64>> {
        self.check_ids(&[id])?;
        let mut h = self.embed(&[id]);
        for (i, st) in states.iter_mut().enumerate() {
            let mut normed = h.clone();
            rms_gain_rows(&mut normed, self.gain(i));
            let y = self.operator(i).step(st, &normed)?;
            h.iter_mut().zip(&y).for_each(|(a, b)| *a += b);
        }
        Ok(self.head_rows(&mut h, 1)?.into_data())
    }

    /// Mean next-token negative log-likelihood of `b` with the plain forms.
    pub fn nll(&self, b: &Batch) -> Result<f64> {
        let mut total = 0.0;
        let mut probs = vec![0.0; self.vocab];
        for r in 0..b.batch {
            let logits = self.logits_prefixed(&b.inputs[r * b.len..(r + 1) * b.len])?;
            for t in 0..b.len {
                softmax_into(logits.row(t), &mut probs);
                total -= probs[b.targets[r * b.len + t]].max(f64::MIN_POSITIVE).ln();
            }
        }
        Ok(total / (b.batch * b.len) as f64)
    }
}
