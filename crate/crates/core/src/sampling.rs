//! Seeded mini-batch sampling.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Cycles through shuffled epochs of `0..n`.
pub(crate) struct CyclicSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl CyclicSampler {
    pub(crate) fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            pos: n,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    pub(crate) fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let n = self.order.len();
        let size = size.min(n);
        let mut rows = Vec::with_capacity(size);
        while rows.len() < size {
            if self.pos == n {
                self.reshuffle();
            }
            rows.push(self.order[self.pos]);
            self.pos += 1;
        }
        rows
    }
}
