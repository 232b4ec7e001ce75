//! Counter-based random number generation.
//!
//! Every draw is a pure function of `(key, counter)`, so a consumer can fork
//! an independent substream per `(tag, index)` without disturbing any other
//! consumer's sequence. The mixing function is the SplitMix64 finalizer.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Substream tags used by the training loop and evaluation.
pub mod stream {
    pub const INIT_ENCODER: u64 = 1;
    pub const INIT_HEAD: u64 = 2;
    pub const DATA: u64 = 3;
    pub const SCHEDULE: u64 = 4;
    pub const BATCH: u64 = 5;
    pub const PFI: u64 = 6;
    pub const MI_STREAM: u64 = 7;
    pub const MI_MEMORY: u64 = 8;
    pub const MEMORY: u64 = 9;
    pub const EVAL: u64 = 10;
    pub const PROBE: u64 = 11;
    pub const TEST_DATA: u64 = 12;
}

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    seed: u64,
    key: u64,
    counter: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            key: mix64(seed ^ GOLDEN),
            counter: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Independent generator for `(tag, index)`. Depends only on the key, not
    /// on how many values this generator has already produced.
    pub fn substream(&self, tag: u64, index: u64) -> RngState {
        let k = mix64(self.key ^ mix64(tag.wrapping_mul(GOLDEN).wrapping_add(1)));
        RngState {
            seed: self.seed,
            key: mix64(k ^ mix64(index.wrapping_add(GOLDEN))),
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let c = self.counter;
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(c.wrapping_mul(GOLDEN)))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `(0, 1]`.
    fn uniform_open0(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller; the sine branch is discarded so each
    /// draw consumes exactly two counters.
    pub fn gaussian(&mut self) -> f64 {
        let u1 = self.uniform_open0();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Gamma(shape, 1) by Marsaglia-Tsang, boosted for shape < 1.
    pub fn gamma(&mut self, shape: f64) -> f64 {
        if shape < 1.0 {
            let g = self.gamma(shape + 1.0);
            return g * self.uniform_open0().powf(1.0 / shape);
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let (x, v) = loop {
                let x = self.gaussian();
                let v = 1.0 + c * x;
                if v > 0.0 {
                    break (x, v * v * v);
                }
            };
            let u = self.uniform_open0();
            if u < 1.0 - 0.0331 * x * x * x * x || u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
                return d * v;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }
}

/// Tensor of i.i.d. standard normal entries.
pub fn sample_gaussian(rng: &mut RngState, shape: &[usize]) -> Result<Tensor> {
    if shape.is_empty() {
        return Err(Error::Shape("empty shape".into()));
    }
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.gaussian()).collect();
    Tensor::from_vec(shape, data)
}

/// Beta(alpha, beta) draw as a ratio of two Gamma draws.
pub fn sample_beta(rng: &mut RngState, alpha: f64, beta: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) || !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Parameter(format!(
            "beta parameters must be positive, got ({alpha}, {beta})"
        )));
    }
    let x = rng.gamma(alpha);
    let y = rng.gamma(beta);
    let s = x + y;
    if s > 0.0 {
        Ok((x / s).clamp(0.0, 1.0))
    } else {
        // both gamma draws underflowed (tiny shapes): fall back to the limiting Bernoulli
        Ok(if rng.uniform() < alpha / (alpha + beta) { 1.0 } else { 0.0 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moments(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        (mean, var)
    }

    #[test]
    fn gaussian_is_reproducible() {
        let a = sample_gaussian(&mut RngState::new(42), &[4]).unwrap();
        let b = sample_gaussian(&mut RngState::new(42), &[4]).unwrap();
        assert_eq!(a, b);
        let c = sample_gaussian(&mut RngState::new(43), &[4]).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn gaussian_shape_contract() {
        let t = sample_gaussian(&mut RngState::new(1), &[2, 3]).unwrap();
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.len(), 6);
        assert!(sample_gaussian(&mut RngState::new(1), &[]).is_err());
    }

    #[test]
    fn gaussian_moments() {
        // CLT: sd of the mean is 1/sqrt(1e5) ~ 0.0032, of the variance ~ 0.0045.
        let t = sample_gaussian(&mut RngState::new(7), &[100_000]).unwrap();
        let (m, v) = moments(t.data());
        assert!(m.abs() < 0.02, "mean {m}");
        assert!((v - 1.0).abs() < 0.03, "var {v}");
    }

    #[test]
    fn beta_uniform_case() {
        let mut rng = RngState::new(3);
        let xs: Vec<f64> = (0..100_000).map(|_| sample_beta(&mut rng, 1.0, 1.0).unwrap()).collect();
        assert!(xs.iter().all(|x| (0.0..=1.0).contains(x)));
        let (m, v) = moments(&xs);
        assert!((m - 0.5).abs() < 0.01, "mean {m}");
        assert!((v - 1.0 / 12.0).abs() < 0.003, "var {v}");
    }

    #[test]
    fn beta_skewed_mean() {
        let mut rng = RngState::new(4);
        let xs: Vec<f64> = (0..100_000).map(|_| sample_beta(&mut rng, 5.0, 1.0).unwrap()).collect();
        let (m, _) = moments(&xs);
        assert!((m - 5.0 / 6.0).abs() < 0.01, "mean {m}");
    }

    #[test]
    fn beta_small_shapes_stay_in_support() {
        let mut rng = RngState::new(5);
        for _ in 0..10_000 {
            let x = sample_beta(&mut rng, 0.05, 0.2).unwrap();
            assert!((0.0..=1.0).contains(&x));
        }
    }

    #[test]
    fn beta_rejects_bad_params() {
        let mut rng = RngState::new(0);
        assert!(sample_beta(&mut rng, 0.0, 1.0).is_err());
        assert!(sample_beta(&mut rng, 1.0, -2.0).is_err());
        assert!(sample_beta(&mut rng, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn substreams_are_independent_of_parent_position() {
        let root = RngState::new(9);
        let mut advanced = root.clone();
        for _ in 0..17 {
            advanced.next_u64();
        }
        let mut a = root.substream(stream::PFI, 5);
        let mut b = advanced.substream(stream::PFI, 5);
        assert_eq!(a.next_u64(), b.next_u64());
        let mut c = root.substream(stream::PFI, 6);
        let mut d = root.substream(stream::BATCH, 5);
        let x = root.substream(stream::PFI, 5).next_u64();
        assert_ne!(x, c.next_u64());
        assert_ne!(x, d.next_u64());
    }

    #[test]
    fn below_covers_range() {
        let mut rng = RngState::new(11);
        let mut seen = [0usize; 5];
        for _ in 0..5000 {
            seen[rng.below(5)] += 1;
        }
        assert!(seen.iter().all(|&n| n > 800));
    }
}
