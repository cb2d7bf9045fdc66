//! Deterministic synthetic byte-level corpus.
//!
//! Three interleaved document types: Markov word text (local statistics),
//! copy lines (`abcde|abcde`, long-range exact recall) and key-value
//! listings followed by a query (associative recall).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::model::Batch;

pub const VOCAB: usize = 256;
pub const DEFAULT_TOKENS: usize = 2_000_000;
/// Fraction of the stream held out for validation.
const VALID_FRAC: f64 = 0.05;

const ONSETS: [&str; 12] = ["b", "d", "f", "k", "l", "m", "n", "p", "r", "s", "t", "v"];
const NUCLEI: [&str; 5] = ["a", "e", "i", "o", "u"];
const WORDS: usize = 160;
/// Successors each word may have.
const FANOUT: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    /// All three document types.
    Mixed,
    /// Copy lines only.
    Shift,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub train: Vec<u8>,
    pub valid: Vec<u8>,
}

struct Lexicon {
    words: Vec<String>,
    next: Vec<[usize; FANOUT]>,
}

impl Lexicon {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let mut words = Vec::with_capacity(WORDS);
        while words.len() < WORDS {
            let syl = rng.gen_range(1..=3);
            let w: String = (0..syl)
                .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), NUCLEI.choose(rng).unwrap()))
                .collect();
            if !words.contains(&w) {
                words.push(w);
            }
        }
        let next = (0..WORDS)
            .map(|_| std::array::from_fn(|_| rng.gen_range(0..WORDS)))
            .collect();
        Lexicon { words, next }
    }

    fn sentence(&self, rng: &mut ChaCha8Rng, out: &mut Vec<u8>) {
        let len = rng.gen_range(4..12);
        let mut w = rng.gen_range(0..WORDS);
        for i in 0..len {
            if i > 0 {
                out.push(b' ');
            }
            out.extend_from_slice(self.words[w].as_bytes());
            // Zipf-like preference for the first successors.
            let pick = (rng.gen::<f64>().powi(2) * FANOUT as f64) as usize;
            w = self.next[w][pick.min(FANOUT - 1)];
        }
        out.extend_from_slice(b".\n");
    }
}

fn random_token(rng: &mut ChaCha8Rng, alphabet: &[u8], len: usize) -> Vec<u8> {
    (0..len).map(|_| *alphabet.choose(rng).unwrap()).collect()
}

fn copy_line(rng: &mut ChaCha8Rng, out: &mut Vec<u8>) {
    let len = rng.gen_range(4..13);
    let s = random_token(rng, b"abcdefghijklmnopqrstuvwxyz", len);
    out.extend_from_slice(&s);
    out.push(b'|');
    out.extend_from_slice(&s);
    out.push(b'\n');
}

fn recall_line(rng: &mut ChaCha8Rng, out: &mut Vec<u8>) {
    let n = rng.gen_range(2..6);
    let keys: Vec<u8> = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ".choose_multiple(rng, n).copied().collect();
    let vals: Vec<u8> = (0..n).map(|_| b'0' + rng.gen_range(0..10)).collect();
    for (k, v) in keys.iter().zip(&vals) {
        out.extend_from_slice(&[*k, b'=', *v, b' ']);
    }
    let q = rng.gen_range(0..n);
    out.extend_from_slice(&[b'?', keys[q], b'=', vals[q], b'\n']);
}

impl Corpus {
    /// Generate about `tokens` bytes from `seed`.
    pub fn synthetic(kind: CorpusKind, seed: u64, tokens: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lex = Lexicon::new(&mut rng);
        let mut all = Vec::with_capacity(tokens + 64);
        while all.len() < tokens {
            match kind {
                CorpusKind::Shift => copy_line(&mut rng, &mut all),
                CorpusKind::Mixed => match rng.gen_range(0..10) {
                    0..=5 => lex.sentence(&mut rng, &mut all),
                    6..=7 => copy_line(&mut rng, &mut all),
                    _ => recall_line(&mut rng, &mut all),
                },
            }
        }
        all.truncate(tokens);
        Self::split(all)
    }

    /// Split raw bytes into train and validation streams.
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Self::split(bytes)
    }

    fn split(all: Vec<u8>) -> Self {
        let cut = all.len() - (all.len() as f64 * VALID_FRAC) as usize;
        Corpus {
            valid: all[cut..].to_vec(),
            train: all[..cut].to_vec(),
        }
    }

    fn windows(stream: &[u8], len: usize) -> Result<usize> {
        if len == 0 || stream.len() < len + 1 {
            return Err(contract(format!(
                "stream of {} bytes cannot hold a window of {len}",
                stream.len()
            )));
        }
        Ok(stream.len() - len)
    }

    fn gather(stream: &[u8], starts: &[usize], len: usize) -> Batch {
        let mut inputs = Vec::with_capacity(starts.len() * len);
        let mut targets = Vec::with_capacity(starts.len() * len);
        for &s in starts {
            inputs.extend(stream[s..s + len].iter().map(|&b| b as usize));
            targets.extend(stream[s + 1..s + len + 1].iter().map(|&b| b as usize));
        }
        Batch {
            batch: starts.len(),
            len,
            inputs,
            targets,
        }
    }

    /// Random training windows.
    pub fn sample(&self, rng: &mut impl Rng, batch: usize, len: usize) -> Result<Batch> {
        let n = Self::windows(&self.train, len)?;
        let starts: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..n)).collect();
        Ok(Self::gather(&self.train, &starts, len))
    }

    /// Fixed, evenly spaced validation windows.
    pub fn validation(&self, count: usize, len: usize) -> Result<Batch> {
        let n = Self::windows(&self.valid, len)?;
        let starts: Vec<usize> = (0..count).map(|i| i * n / count.max(1)).collect();
        Ok(Self::gather(&self.valid, &starts, len))
    }
}
