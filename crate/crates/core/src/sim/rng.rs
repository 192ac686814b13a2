//! Per-path random streams.
//!
//! Each path owns a ChaCha8 stream selected by `(seed, stream id)`, so a
//! path's draws do not depend on which thread runs it or in what order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Normal source for one path. With antithetic pairing, paths `2k` and
/// `2k+1` share stream `k` and the odd path negates every draw.
pub struct PathNormals {
    rng: ChaCha8Rng,
    sign: f64,
}

impl PathNormals {
    pub fn new(seed: u64, path: u64, antithetic: bool) -> Self {
        let (stream, sign) = if antithetic {
            (path / 2, if path % 2 == 1 { -1.0 } else { 1.0 })
        } else {
            (path, 1.0)
        };
        Self {
            rng: stream_rng(seed, stream),
            sign,
        }
    }

    pub fn next(&mut self) -> f64 {
        let z: f64 = self.rng.sample(StandardNormal);
        self.sign * z
    }
}

/// ChaCha8 generator for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
