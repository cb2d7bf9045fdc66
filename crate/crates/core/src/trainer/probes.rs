//! Greedy-accuracy probes on the validation stream, the desk-scale stand-in
//! for downstream task accuracy.

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::Result;
use crate::model::Model;

/// Argmax accuracy at three kinds of target position. `None` when the
/// validation windows hold no position of that kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Probes {
    /// Every position.
    pub next_token: f64,
    /// Second half of a copy line (after `|`).
    pub copy: Option<f64>,
    /// The value after a `?k=` query.
    pub recall: Option<f64>,
}

impl Probes {
    /// Mean of the available accuracies.
    pub fn average(&self) -> f64 {
        let xs: Vec<f64> = [Some(self.next_token), self.copy, self.recall]
            .into_iter()
            .flatten()
            .collect();
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

#[derive(Default)]
struct Tally {
    hit: usize,
    n: usize,
}

impl Tally {
    fn add(&mut self, ok: bool) {
        self.n += 1;
        self.hit += ok as usize;
    }

    fn rate(&self) -> Option<f64> {
        (self.n > 0).then(|| self.hit as f64 / self.n as f64)
    }
}

pub fn probe(model: &Model, corpus: &Corpus, windows: usize, len: usize) -> Result<Probes> {
    let v = corpus.validation(windows, len)?;
    let (mut all, mut copy, mut recall) = (Tally::default(), Tally::default(), Tally::default());
    for r in 0..v.batch {
        let ids = &v.inputs[r * v.len..(r + 1) * v.len];
        let logits = model.logits_prefixed(ids)?;
        let mut after_bar = false;
        for t in 0..v.len {
            match ids[t] as u8 {
                b'\n' => after_bar = false,
                b'|' => after_bar = true,
                _ => {}
            }
            let row = logits.row(t);
            let guess = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
            let target = v.targets[r * v.len + t];
            let ok = guess == target;
            all.add(ok);
            if after_bar && target != b'\n' as usize {
                copy.add(ok);
            }
            if t >= 2 && ids[t] == b'=' as usize && ids[t - 2] == b'?' as usize {
                recall.add(ok);
            }
        }
    }
    Ok(Probes {
        next_token: all.rate().unwrap_or(0.0),
        copy: copy.rate(),
        recall: recall.rate(),
    })
}
