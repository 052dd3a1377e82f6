use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Worker-count-aware split of a sample set into mini-batches.
///
/// Global mini-batch `n` covers positions `n * b_s .. min((n + 1) * b_s, N_s)`
/// of the epoch ordering and is cut into `p` contiguous, equally sized local
/// batches, worker 0 first. Positions at or beyond the original sample count
/// wrap around to the start.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub workers: usize,
    /// Sample count before padding.
    pub original_samples: usize,
    pub samples: usize,
    pub batch_size: usize,
    pub local_samples: usize,
    pub local_batch: usize,
    pub batches: usize,
}

/// Adjusts `(N_s, b_s)` to be divisible by `p` and derives the local sizes.
pub fn partition(samples: usize, batch_size: usize, workers: usize) -> Result<Partition> {
    let bad = |msg: String| Err(Error::invalid("partition", msg));
    if samples == 0 || batch_size == 0 || workers == 0 {
        return bad(format!(
            "sample count, batch size and worker count must be positive, found {samples}, {batch_size}, {workers}"
        ));
    }
    if batch_size > samples {
        return bad(format!("batch size {batch_size} exceeds sample count {samples}"));
    }
    if batch_size < workers {
        return bad(format!("batch size {batch_size} leaves some of {workers} workers without samples"));
    }
    let b = workers * (batch_size / workers);
    let n = workers * samples.div_ceil(workers);
    Ok(Partition {
        workers,
        original_samples: samples,
        samples: n,
        batch_size: b,
        local_samples: n / workers,
        local_batch: b / workers,
        batches: n.div_ceil(b),
    })
}

impl Partition {
    /// Positions of global mini-batch `n` in the epoch ordering.
    pub fn global_batch(&self, n: usize) -> Range<usize> {
        let start = n * self.batch_size;
        start..(start + self.batch_size).min(self.samples)
    }

    /// Positions of worker `rank`'s share of mini-batch `n`.
    pub fn local_batch(&self, n: usize, rank: usize) -> Range<usize> {
        let g = self.global_batch(n);
        let size = g.len() / self.workers;
        let start = g.start + rank * size;
        start..start + size
    }

    /// Sample index stored at an epoch position, after wrap-around padding.
    pub fn sample_at(&self, position: usize) -> usize {
        position % self.original_samples
    }
}
