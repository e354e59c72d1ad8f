//! Noise schedule, seeded noise stream and the forward process.

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backend::Latent;
use crate::error::{Error, Result};

const TRAIN_STEPS: usize = 1000;
const BETA_START: f64 = 0.00085;
const BETA_END: f64 = 0.012;

/// Cumulative signal fractions `ᾱ_0 .. ᾱ_T` over the sampling steps.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Stable-Diffusion "scaled linear" betas over 1000 training steps,
    /// subsampled at `steps` evenly spaced timesteps. `ᾱ_0 = 1` exactly.
    pub fn scaled_linear(steps: usize) -> Result<Self> {
        if steps == 0 || steps > TRAIN_STEPS {
            return Err(Error::invalid(format!(
                "step count must be in 1..={TRAIN_STEPS}, got {steps}"
            )));
        }
        let (lo, hi) = (BETA_START.sqrt(), BETA_END.sqrt());
        let mut cumulative = Vec::with_capacity(TRAIN_STEPS);
        let mut acc = 1.0;
        for i in 0..TRAIN_STEPS {
            let b = lo + (hi - lo) * i as f64 / (TRAIN_STEPS - 1) as f64;
            acc *= 1.0 - b * b;
            cumulative.push(acc);
        }
        let mut alpha_bar = vec![1.0];
        for t in 1..=steps {
            let tau = t * TRAIN_STEPS / steps - 1;
            alpha_bar.push(cumulative[tau]);
        }
        Self::from_alpha_bar(alpha_bar)
    }

    /// Validate an explicit schedule.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if (alpha_bar[0] - 1.0).abs() > 1e-4 {
            return Err(Error::invalid(format!(
                "alpha_bar[0] must be within 1e-4 of 1, got {}",
                alpha_bar[0]
            )));
        }
        if alpha_bar.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::invalid("alpha_bar values must lie in (0, 1]"));
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid("alpha_bar must be strictly decreasing"));
        }
        Ok(Self { alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar.get(t).copied().ok_or_else(|| {
            Error::invalid(format!("step {t} outside 0..={}", self.steps()))
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// Gaussian noise keyed by `(seed, t)`.
///
/// Every draw for step `t` is the same regardless of how many other draws
/// happened before it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseStream {
    seed: u64,
}

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn noise(&self, t: usize, shape: (usize, usize, usize)) -> Latent {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(t as u64);
        Array3::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng))
    }
}

/// `√ᾱ · z + √(1 − ᾱ) · ε` for an explicit `ᾱ` and noise.
pub fn noised(z: &Latent, alpha_bar: f64, eps: &Latent) -> Latent {
    if alpha_bar == 1.0 {
        return z.clone();
    }
    z * alpha_bar.sqrt() + eps * (1.0 - alpha_bar).sqrt()
}

/// Sample `q(z_t | z)` with the run's noise for step `t`.
pub fn forward_noise(
    z: &Latent,
    t: usize,
    schedule: &NoiseSchedule,
    stream: &NoiseStream,
) -> Result<Latent> {
    let a = schedule.alpha_bar(t)?;
    Ok(noised(z, a, &stream.noise(t, z.dim())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaled_linear_is_valid() {
        for steps in [1, 10, 50, 1000] {
            let s = NoiseSchedule::scaled_linear(steps).unwrap();
            assert_eq!(s.steps(), steps);
            assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        }
        assert!(NoiseSchedule::scaled_linear(0).is_err());
        assert!(NoiseSchedule::scaled_linear(1001).is_err());
    }

    #[test]
    fn rejects_bad_schedules() {
        assert!(NoiseSchedule::from_alpha_bar(vec![1.0]).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![0.9, 0.5]).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![1.0, 0.5, 0.5]).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![1.0, 0.0]).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![1.0, 0.5, 0.1]).is_ok());
    }

    #[test]
    fn identity_at_full_signal() {
        let sched = NoiseSchedule::from_alpha_bar(vec![1.0, 0.5]).unwrap();
        let z = NoiseStream::new(9).noise(100, (2, 2, 3));
        assert_eq!(forward_noise(&z, 0, &sched, &NoiseStream::new(1)).unwrap(), z);
        assert!(forward_noise(&z, 2, &sched, &NoiseStream::new(1)).is_err());
    }

    #[test]
    fn pure_noise_at_zero_signal() {
        let z = Array3::from_elem((2, 3, 4), 5.0);
        let eps = NoiseStream::new(4).noise(3, z.dim());
        assert_eq!(noised(&z, 0.0, &eps), eps);
    }

    #[test]
    fn stream_is_keyed_by_step() {
        let s = NoiseStream::new(11);
        assert_eq!(s.noise(3, (2, 2, 2)), s.noise(3, (2, 2, 2)));
        assert_ne!(s.noise(3, (2, 2, 2)), s.noise(4, (2, 2, 2)));
        assert_ne!(s.noise(3, (2, 2, 2)), NoiseStream::new(12).noise(3, (2, 2, 2)));
    }

    #[test]
    fn variance_of_noised_zero() {
        // z = 0, ᾱ = 0.25: output = √0.75 · ε, variance 0.75.
        let sched = NoiseSchedule::from_alpha_bar(vec![1.0, 0.25]).unwrap();
        let z = Array3::zeros((100, 100, 1));
        let out = forward_noise(&z, 1, &sched, &NoiseStream::new(5)).unwrap();
        let n = out.len() as f64;
        let mean = out.sum() / n;
        let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var - 0.75).abs() < 0.75 * 0.05, "variance {var}");
    }
}
