//! Four-dimensional Sobol sequence in Gray-code order.
//!
//! Direction numbers are the first rows of Joe & Kuo's `new-joe-kuo-6.21201`
//! table; the first dimension is the van der Corput sequence.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BITS: usize = 32;

/// `(degree, polynomial coefficients, initial direction integers)` per dimension.
const PRIMITIVES: [(usize, u32, &[u32]); 3] = [(1, 0, &[1]), (2, 1, &[1, 3]), (3, 1, &[1, 3, 1])];

pub struct Sobol4 {
    directions: [[u32; BITS]; 4],
    shift: [u32; 4],
    state: [u32; 4],
    index: u64,
}

fn directions(dim: usize) -> [u32; BITS] {
    let mut v = [0u32; BITS];
    if dim == 0 {
        for (k, v) in v.iter_mut().enumerate() {
            *v = 1 << (BITS - 1 - k);
        }
        return v;
    }
    let (s, a, m) = PRIMITIVES[dim - 1];
    for k in 0..s {
        v[k] = m[k] << (BITS - 1 - k);
    }
    for k in s..BITS {
        let j = k - s;
        v[k] = v[j] ^ (v[j] >> s);
        for bit in 0..s - 1 {
            if (a >> bit) & 1 == 1 {
                v[k] ^= v[j + 1 + bit];
            }
        }
    }
    v
}

impl Sobol4 {
    /// Unscrambled sequence starting at the origin.
    pub fn new() -> Self {
        Self::with_shift([0; 4])
    }

    /// Sequence with a random digital (XOR) shift drawn from `seed`.
    /// Seed 0 leaves the sequence unscrambled.
    pub fn seeded(seed: u64) -> Self {
        if seed == 0 {
            return Self::new();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shift = [0u32; 4];
        for s in &mut shift {
            *s = rng.next_u32();
        }
        Self::with_shift(shift)
    }

    fn with_shift(shift: [u32; 4]) -> Self {
        Sobol4 {
            directions: [directions(0), directions(1), directions(2), directions(3)],
            shift,
            state: [0; 4],
            index: 0,
        }
    }
}

impl Default for Sobol4 {
    fn default() -> Self {
        Self::new()
    }
}

impl Iterator for Sobol4 {
    type Item = [f64; 4];

    fn next(&mut self) -> Option<[f64; 4]> {
        if self.index >= 1 << BITS {
            return None;
        }
        let mut point = [0.0; 4];
        for d in 0..4 {
            point[d] = f64::from(self.state[d] ^ self.shift[d]) / 4294967296.0;
        }
        // Gray code: flip the direction of the lowest zero bit of the index.
        let c = self.index.trailing_ones() as usize;
        if c < BITS {
            for d in 0..4 {
                self.state[d] ^= self.directions[d][c];
            }
        }
        self.index += 1;
        Some(point)
    }
}
