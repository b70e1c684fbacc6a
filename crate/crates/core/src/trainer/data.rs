//! Byte-level batching over a text corpus.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Stream of `(inputs, targets)` batches.
///
/// The corpus is cut into contiguous, non-overlapping windows of
/// `seq_len` input bytes; targets are the same window shifted by one byte.
/// Window order is reshuffled every epoch.
pub struct Batcher<'a> {
    corpus: &'a [u8],
    seq_len: usize,
    batch: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

/// Seed of the data-order stream, distinct from the weight streams.
pub fn data_seed(seed: u64) -> u64 {
    seed ^ 0xDA7A_5EED_0000_0000
}

impl<'a> Batcher<'a> {
    pub fn new(corpus: &'a [u8], seq_len: usize, batch_tokens: usize, seed: u64) -> Result<Self> {
        if seq_len == 0 {
            return Err(Error::InvalidConfig("seq_len must be positive".into()));
        }
        if batch_tokens < seq_len {
            return Err(Error::InvalidConfig(format!(
                "batch_tokens ({batch_tokens}) must be at least seq_len ({seq_len})"
            )));
        }
        let windows = corpus.len().saturating_sub(1) / seq_len;
        if windows == 0 {
            return Err(Error::InvalidConfig(format!(
                "corpus has {} bytes; need at least {}",
                corpus.len(),
                seq_len + 1
            )));
        }
        let mut b = Self {
            corpus,
            seq_len,
            batch: batch_tokens / seq_len,
            order: (0..windows).collect(),
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(data_seed(seed)),
        };
        b.order.shuffle(&mut b.rng);
        Ok(b)
    }

    pub fn windows(&self) -> usize {
        self.order.len()
    }

    pub fn sequences_per_batch(&self) -> usize {
        self.batch
    }

    pub fn next_batch(&mut self) -> (Vec<usize>, Vec<usize>) {
        let n = self.batch * self.seq_len;
        let mut inputs = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        for _ in 0..self.batch {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let start = self.order[self.cursor] * self.seq_len;
            self.cursor += 1;
            let w = &self.corpus[start..start + self.seq_len + 1];
            inputs.extend(w[..self.seq_len].iter().map(|&b| b as usize));
            targets.extend(w[1..].iter().map(|&b| b as usize));
        }
        (inputs, targets)
    }
}
