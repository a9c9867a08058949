//! Fixed-length training windows and a seeded, resumable batch order.
//!
//! Documents are tokenized and joined with `EOS` into one stream, which is cut
//! into non-overlapping windows of `seq_len + 1` tokens. Each epoch visits
//! every window once in an order drawn from `(seed, epoch)`, so the batch for
//! any step can be rebuilt without replaying earlier steps.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tokenizer::{encode, EOS};
use crate::error::{Error, Result};
use crate::model::TokenBatch;

/// Inputs `[batch, seq]` and next-token targets of the same shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: TokenBatch,
    pub targets: Vec<u32>,
}

pub fn token_stream(docs: &[String]) -> Vec<u32> {
    let mut out = Vec::new();
    for (i, d) in docs.iter().enumerate() {
        if i > 0 {
            out.push(EOS);
        }
        out.extend(encode(d));
    }
    out
}

/// Non-overlapping windows of `seq_len + 1` tokens; the ragged tail is dropped.
pub fn windows(stream: &[u32], seq_len: usize) -> Result<Vec<Vec<u32>>> {
    if seq_len == 0 {
        return Err(Error::InvalidArgument("seq_len must be positive".into()));
    }
    let w = seq_len + 1;
    if stream.len() < w {
        return Err(Error::InvalidArgument(format!(
            "corpus has {} tokens, fewer than one window of {w}",
            stream.len()
        )));
    }
    Ok(stream.chunks_exact(w).map(<[u32]>::to_vec).collect())
}

#[derive(Clone, Debug)]
pub struct BatchStream {
    windows: Vec<Vec<u32>>,
    seq_len: usize,
    batch_size: usize,
    seed: u64,
    cached: Option<(u64, Vec<usize>)>,
}

impl BatchStream {
    pub fn new(windows: Vec<Vec<u32>>, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        let Some(first) = windows.first() else {
            return Err(Error::InvalidArgument("no training windows".into()));
        };
        let seq_len = first.len().saturating_sub(1);
        if seq_len == 0 || windows.iter().any(|w| w.len() != seq_len + 1) {
            return Err(Error::InvalidArgument(
                "windows must share a length of at least 2".into(),
            ));
        }
        Ok(Self {
            windows,
            seq_len,
            batch_size,
            seed,
            cached: None,
        })
    }

    pub fn n_windows(&self) -> usize {
        self.windows.len()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    fn order(&mut self, epoch: u64) -> &[usize] {
        if self.cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(epoch);
            let mut idx: Vec<usize> = (0..self.windows.len()).collect();
            idx.shuffle(&mut rng);
            self.cached = Some((epoch, idx));
        }
        &self.cached.as_ref().expect("just filled").1
    }

    /// The batch consumed at optimizer step `step` (0-based).
    pub fn batch_at(&mut self, step: u64) -> Batch {
        let n = self.windows.len() as u64;
        let (b, t) = (self.batch_size, self.seq_len);
        let mut inputs = Vec::with_capacity(b * t);
        let mut targets = Vec::with_capacity(b * t);
        for j in 0..b as u64 {
            let i = step * b as u64 + j;
            let w = self.order(i / n)[(i % n) as usize];
            let win = &self.windows[w];
            inputs.extend_from_slice(&win[..t]);
            targets.extend_from_slice(&win[1..]);
        }
        Batch {
            inputs: TokenBatch::new(inputs, b, t).expect("consistent window sizes"),
            targets,
        }
    }
}

/// Tokenized, windowed corpus with a held-out tail.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub train: BatchStream,
    /// Validation windows in corpus order.
    pub valid: Vec<Vec<u32>>,
}

/// Builds the training stream from `docs`, holding out the last
/// `valid_fraction` of windows (at least one when the fraction is positive
/// and two or more windows exist).
pub fn make_batches(
    docs: &[String],
    seq_len: usize,
    batch_size: usize,
    seed: u64,
    valid_fraction: f64,
) -> Result<SplitData> {
    if !(0.0..1.0).contains(&valid_fraction) {
        return Err(Error::InvalidArgument(format!(
            "valid_fraction {valid_fraction} outside [0, 1)"
        )));
    }
    let mut all = windows(&token_stream(docs), seq_len)?;
    let mut n_valid = (all.len() as f64 * valid_fraction).round() as usize;
    if valid_fraction > 0.0 && all.len() > 1 {
        n_valid = n_valid.clamp(1, all.len() - 1);
    }
    let valid = all.split_off(all.len() - n_valid);
    Ok(SplitData {
        train: BatchStream::new(all, batch_size, seed)?,
        valid,
    })
}

/// Groups windows into sequential batches of at most `batch_size` for evaluation.
pub fn eval_batches(windows: &[Vec<u32>], batch_size: usize) -> Vec<Batch> {
    windows
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let t = chunk[0].len() - 1;
            let inputs = chunk.iter().flat_map(|w| w[..t].iter().copied()).collect();
            let targets = chunk.iter().flat_map(|w| w[1..].iter().copied()).collect();
            Batch {
                inputs: TokenBatch::new(inputs, chunk.len(), t).expect("consistent window sizes"),
                targets,
            }
        })
        .collect()
}
