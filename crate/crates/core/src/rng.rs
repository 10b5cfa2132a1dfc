//! Seeded random streams.
//!
//! Every stochastic choice in the crate (initialisation, augmentation,
//! mixing boxes, λ draws, batch order) goes through [`SeededRng`], which
//! wraps ChaCha8 so streams are identical across platforms and runs.
//! Independent streams are fanned out from a master seed with
//! [`derive_seed`].

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Child stream keyed by `parts`; does not advance `self`.
    pub fn fork(&self, parts: &[u64]) -> Self {
        let mut all = Vec::with_capacity(parts.len() + 1);
        all.push(self.seed);
        all.extend_from_slice(parts);
        Self::new(derive_seed(&all))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(&mut self.inner);
        p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// Gamma(shape, 1) via Marsaglia–Tsang; shapes below one use the
    /// `Gamma(a + 1) · U^(1/a)` boost.
    pub fn gamma(&mut self, shape: f64) -> Result<f64> {
        if !(shape > 0.0) || !shape.is_finite() {
            return Err(Error::Parameter(format!(
                "gamma shape must be positive and finite, got {shape}"
            )));
        }
        if shape < 1.0 {
            let boosted = self.gamma(shape + 1.0)?;
            let u = self.open_uniform();
            return Ok(boosted * u.powf(1.0 / shape));
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.normal();
            let t = 1.0 + c * x;
            if t <= 0.0 {
                continue;
            }
            let v = t * t * t;
            let u = self.open_uniform();
            if u < 1.0 - 0.0331 * x.powi(4) {
                return Ok(d * v);
            }
            if u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
                return Ok(d * v);
            }
        }
    }

    /// Uniform in `(0, 1)`.
    fn open_uniform(&mut self) -> f64 {
        loop {
            let u = self.uniform();
            if u > 0.0 {
                return u;
            }
        }
    }
}

/// Symmetric Beta(α, α) draw from two Gamma variates.
pub fn beta_sample(alpha: f64, rng: &mut SeededRng) -> Result<f64> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Parameter(format!(
            "beta alpha must be positive and finite, got {alpha}"
        )));
    }
    loop {
        let x = rng.gamma(alpha)?;
        let y = rng.gamma(alpha)?;
        let s = x + y;
        // Both variates can underflow for very small alpha.
        if s > 0.0 {
            return Ok((x / s).clamp(0.0, 1.0));
        }
    }
}

/// SplitMix64 finaliser.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a seed path, e.g. `[master, stage, epoch, batch]`.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5354_434D_4958_u64, |acc, &p| mix64(acc ^ mix64(p)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moments(alpha: f64, n: usize, seed: u64) -> (f64, f64) {
        let mut rng = SeededRng::new(seed);
        let xs: Vec<f64> = (0..n)
            .map(|_| beta_sample(alpha, &mut rng).unwrap())
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        (mean, var)
    }

    #[test]
    fn beta_one_is_uniform() {
        let mut rng = SeededRng::new(3);
        for _ in 0..10_000 {
            let x = beta_sample(1.0, &mut rng).unwrap();
            assert!((0.0..=1.0).contains(&x));
        }
        let (mean, var) = moments(1.0, 100_000, 11);
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
        assert!((var - 1.0 / 12.0).abs() < 0.002, "var {var}");
    }

    #[test]
    fn beta_variance_matches_closed_form() {
        // Var[Beta(a, b)] = ab / ((a + b)^2 (a + b + 1)), so Var[Beta(a, a)] = 1 / (4 (2a + 1)).
        let alpha: f64 = 0.2;
        let expected = 1.0 / (4.0 * (2.0 * alpha + 1.0));
        assert!((expected - 0.178_571).abs() < 1e-6);
        let (mean, var) = moments(alpha, 100_000, 5);
        assert!((mean - 0.5).abs() < 0.01);
        assert!((var - expected).abs() < 0.002, "var {var} vs {expected}");
    }

    #[test]
    fn beta_rejects_bad_alpha() {
        let mut rng = SeededRng::new(0);
        assert!(matches!(
            beta_sample(0.0, &mut rng),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            beta_sample(-1.0, &mut rng),
            Err(Error::Parameter(_))
        ));
        assert!(beta_sample(f64::NAN, &mut rng).is_err());
    }

    #[test]
    fn gamma_mean_matches_shape() {
        for shape in [0.3f64, 1.0, 2.5] {
            let mut rng = SeededRng::new(9);
            let n = 50_000;
            let mean = (0..n).map(|_| rng.gamma(shape).unwrap()).sum::<f64>() / n as f64;
            assert!(
                (mean - shape).abs() < 0.03 * shape.max(1.0),
                "shape {shape} mean {mean}"
            );
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
        assert_eq!(a.fork(&[1, 2]).next_u64(), b.fork(&[1, 2]).next_u64());
        assert_ne!(a.fork(&[1, 2]).next_u64(), a.fork(&[2, 1]).next_u64());
    }

    #[test]
    fn derive_seed_is_order_sensitive() {
        assert_ne!(derive_seed(&[1, 2, 3]), derive_seed(&[3, 2, 1]));
        assert_eq!(derive_seed(&[7, 8]), derive_seed(&[7, 8]));
    }
}
