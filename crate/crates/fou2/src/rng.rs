//! Reproducible random number streams.
//!
//! Every Monte Carlo path gets its own counter-based stream keyed by
//! (seed, path index), so results are independent of scheduling order and
//! of how work is chunked across threads.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stream for one simulated path: ChaCha12 seeded by the run seed with the
/// path index selecting the stream.
pub fn path_rng(seed: u64, path_index: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(path_index);
    rng
}

/// Fill an n×m matrix with i.i.d. standard normals, one column per path,
/// column j drawn from the (seed, first_path + j) stream.
pub fn normal_columns(seed: u64, first_path: u64, n: usize, m: usize) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((n, m));
    for j in 0..m {
        let mut rng = path_rng(seed, first_path + j as u64);
        for i in 0..n {
            out[[i, j]] = StandardNormal.sample(&mut rng);
        }
    }
    out
}
