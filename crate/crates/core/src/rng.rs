use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::Real;

/// All randomness in the crate flows through ChaCha8 streams created here,
/// so a fixed seed reproduces runs bit for bit on any platform.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Samples `n` values from N(0, std^2) truncated at two standard deviations,
/// via Box-Muller with rejection of |z| > 2.
pub fn truncated_normal<F: Real>(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<F> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        // u1 in (0, 1] keeps the log finite.
        let u1: f64 = 1.0 - rng.gen::<f64>();
        let u2: f64 = rng.gen();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        for z in [r * theta.cos(), r * theta.sin()] {
            if z.abs() <= 2.0 && out.len() < n {
                out.push(F::from_f64(z * std));
            }
        }
    }
    out
}

/// Inverted-dropout mask source: kept positions are pre-scaled by
/// `1 / (1 - rate)` so inference needs no rescaling.
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Dropout { rate, rng: seeded(seed) }
    }

    pub fn mask<F: Real>(&mut self, n: usize) -> Vec<F> {
        let keep = F::from_f64(1.0 / (1.0 - self.rate));
        (0..n)
            .map(|_| if self.rng.gen::<f64>() < self.rate { F::zero() } else { keep })
            .collect()
    }
}
