//! Decoding state carried between recurrent steps.

use serde::{Deserialize, Serialize};

/// Key/value cache. With a window it is a ring buffer that never holds more
/// than `window` entries; without one it grows without bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvCache {
    window: Option<usize>,
    width: usize,
    keys: Vec<f64>,
    values: Vec<f64>,
    len: usize,
    oldest: usize,
}

impl KvCache {
    /// `width` is the per-token key (and value) size, `kv_heads · head_dim`.
    pub fn new(width: usize, window: Option<usize>) -> Self {
        KvCache {
            window,
            width,
            keys: Vec::new(),
            values: Vec::new(),
            len: 0,
            oldest: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn window(&self) -> Option<usize> {
        self.window
    }

    pub fn push(&mut self, k: &[f64], v: &[f64]) {
        debug_assert_eq!(k.len(), self.width);
        debug_assert_eq!(v.len(), self.width);
        match self.window {
            Some(w) if self.len == w => {
                let slot = self.oldest * self.width;
                self.keys[slot..slot + self.width].copy_from_slice(k);
                self.values[slot..slot + self.width].copy_from_slice(v);
                self.oldest = (self.oldest + 1) % w;
            }
            _ => {
                self.keys.extend_from_slice(k);
                self.values.extend_from_slice(v);
                self.len += 1;
            }
        }
    }

    /// Entries from oldest to newest as `(key, value)` slices.
    pub fn iter(&self) -> impl Iterator<Item = (&[f64], &[f64])> + '_ {
        let cap = self.len.max(1);
        (0..self.len).map(move |i| {
            let slot = ((self.oldest + i) % cap) * self.width;
            (
                &self.keys[slot..slot + self.width],
                &self.values[slot..slot + self.width],
            )
        })
    }
}

/// State of one operator instance during decoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OpState {
    Kv(KvCache),
    /// Per-head `dk × dv` associative memory, heads concatenated.
    Memory {
        heads: usize,
        dk: usize,
        dv: usize,
        s: Vec<f64>,
    },
    Stateless,
}

impl OpState {
    pub fn memory_norm(&self) -> Option<f64> {
        match self {
            OpState::Memory { s, .. } => Some(s.iter().map(|x| x * x).sum::<f64>().sqrt()),
            _ => None,
        }
    }
}
