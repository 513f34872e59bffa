//! Seeded, platform-independent randomness.
//!
//! The generator is ChaCha8 in counter mode: a 64-bit seed is expanded to the
//! 256-bit key, and independent streams are selected through the ChaCha stream
//! id, so `(seed, stream)` pins the whole sequence on every platform.
//!
//! Gaussians use Box–Muller (both outputs consumed). Beta draws use Jöhnk's
//! rejection method when `α < 1 + β` and a ratio of Marsaglia–Tsang gammas
//! otherwise.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    /// Independent stream `stream` under the same seed.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            inner,
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives a child generator; the child stream depends only on this
    /// generator's next output, so forks are reproducible.
    pub fn fork(&mut self) -> Rng {
        let s = self.inner.next_u64();
        Rng::new(s)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - U keeps the log argument in (0, 1].
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * angle.sin());
        r * angle.cos()
    }

    pub fn gaussian(&mut self, shape: &[usize], std: f64) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for x in t.data_mut() {
            *x = std * self.normal();
        }
        t
    }

    pub fn gamma(&mut self, shape_k: f64) -> f64 {
        if shape_k < 1.0 {
            // Boost: Gamma(k) = Gamma(k + 1) * U^(1/k).
            let u = 1.0 - self.uniform();
            return self.gamma(shape_k + 1.0) * u.powf(1.0 / shape_k);
        }
        let d = shape_k - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.normal();
            let v = (1.0 + c * x).powi(3);
            if v <= 0.0 {
                continue;
            }
            let u = 1.0 - self.uniform();
            if u.ln() < 0.5 * x * x + d - d * v + d * v.ln() {
                return d * v;
            }
        }
    }

    pub fn beta(&mut self, alpha: f64, beta: f64) -> Result<f64> {
        if !(alpha > 0.0 && beta > 0.0) {
            return Err(contract_err!("beta parameters must be positive, got ({alpha}, {beta})"));
        }
        if alpha < 1.0 + beta {
            loop {
                let x = self.uniform().powf(1.0 / alpha);
                let y = self.uniform().powf(1.0 / beta);
                let s = x + y;
                if s <= 1.0 && s > 0.0 {
                    return Ok(x / s);
                }
            }
        }
        let x = self.gamma(alpha);
        let y = self.gamma(beta);
        Ok(x / (x + y))
    }
}

pub fn sample_gaussian(rng: &mut Rng, shape: &[usize]) -> Tensor {
    rng.gaussian(shape, 1.0)
}

pub fn sample_beta(rng: &mut Rng, alpha: f64, beta: f64) -> Result<f64> {
    rng.beta(alpha, beta)
}
