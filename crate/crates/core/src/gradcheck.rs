//! Central finite-difference oracle for graph-built functions.
//!
//! The check only evaluates forward values, so it stays independent of the
//! hand-written adjoints it verifies.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Per input: max |analytic - numeric| / max |numeric|.
    pub rel_errors: Vec<f64>,
}

impl GradCheck {
    pub fn worst(&self) -> f64 {
        self.rel_errors.iter().cloned().fold(0.0, f64::max)
    }
}

/// Compare graph adjoints of the scalar returned by `build` against central
/// differences with step `h`, for every element of every input.
pub fn check<F>(inputs: &[Tensor], h: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut rel_errors = Vec::with_capacity(inputs.len());
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).unwrap_or_else(|| Tensor::zeros(inputs[which].shape()));
        let mut worst_diff: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for i in 0..inputs[which].len() {
            let orig = inputs[which].data()[i];
            work[which].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[which].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[which].data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * h);
            worst_diff = worst_diff.max((fd - analytic.data()[i]).abs());
            scale = scale.max(fd.abs());
        }
        rel_errors.push(if scale > 0.0 { worst_diff / scale } else { worst_diff });
    }
    Ok(GradCheck { rel_errors })
}
