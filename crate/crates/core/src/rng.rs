//! Seeded, worker-count independent sampling.
//!
//! Work is cut into fixed-size blocks; block `b` draws from a ChaCha stream
//! keyed by `(seed, b)`, so the result never depends on the thread pool.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub const BLOCK: usize = 1024;

pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Runs `f(rng, start, len)` over `n` items in blocks and returns the
/// per-block results in block order.
pub fn blocks<R, F>(seed: u64, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(&mut ChaCha8Rng, usize, usize) -> R + Sync,
{
    let nb = n.div_ceil(BLOCK);
    (0..nb)
        .into_par_iter()
        .map(|b| {
            let start = b * BLOCK;
            let len = BLOCK.min(n - start);
            let mut rng = stream(seed, b as u64);
            f(&mut rng, start, len)
        })
        .collect()
}

/// Standard normal draw (Box-Muller).
pub fn gauss<R: rand::Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn unit_vector<R: rand::Rng>(rng: &mut R, m: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..m).map(|_| gauss(rng)).collect();
        let n = crate::scalar::norm2(&v);
        if n > 1e-12 {
            return v.into_iter().map(|c| c / n).collect();
        }
    }
}

/// Uniform point in the Euclidean ball of radius `r` in R^d.
pub fn in_ball<R: rand::Rng>(rng: &mut R, d: usize, r: f64) -> Vec<f64> {
    let dir = unit_vector(rng, d);
    let s = r * rng.gen::<f64>().powf(1.0 / d as f64);
    dir.into_iter().map(|c| c * s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn blocks_are_pool_independent() {
        let run = || {
            blocks(7, 5000, |rng, _, len| (0..len).map(|_| rng.gen::<f64>()).sum::<f64>())
        };
        let a = run();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(run);
        assert_eq!(a, b);
    }
}
