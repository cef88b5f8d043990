//! Linear DDPM noise schedule and the closed-form forward process.

use serde::{Deserialize, Serialize};

use crate::codec::Latent;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Per-step noise levels. Index `t - 1` holds the values for step `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl Schedule {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// Cumulative signal fraction at step `t`; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }
}

pub fn make_schedule(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Schedule> {
    if timesteps == 0 {
        return Err(Error::Validation("schedule needs at least one step".into()));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Validation(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas: Vec<f64> = if timesteps == 1 {
        vec![beta_start]
    } else {
        (0..timesteps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64)
            .collect()
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(Schedule {
        betas,
        alphas,
        alpha_bars,
    })
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<Schedule> {
        make_schedule(self.timesteps, self.beta_start, self.beta_end)
    }
}

/// `sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps` on raw arrays.
pub(crate) fn noise_tensor(z0: &Tensor, t: usize, eps: &Tensor, sched: &Schedule) -> Tensor {
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = z0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(z, e)| a * z + b * e)
        .collect();
    Tensor::from_raw(z0.shape().to_vec(), data)
}

pub fn forward_noise(z0: &Latent, t: usize, eps: &Tensor, sched: &Schedule) -> Result<Latent> {
    if t == 0 || t > sched.len() {
        return Err(Error::Validation(format!(
            "timestep {t} outside 1..={}",
            sched.len()
        )));
    }
    if eps.shape() != z0.tensor().shape() {
        return Err(Error::Dimension(format!(
            "noise shape {:?} differs from latent {:?}",
            eps.shape(),
            z0.tensor().shape()
        )));
    }
    Latent::new(noise_tensor(z0.tensor(), t, eps, sched), z0.patch_size())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_schedule_values() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.betas[0], 1e-4);
        assert!((s.betas[999] - 0.02).abs() < 1e-15);
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bars[999] < 1e-4);
        let mut prod = 1.0;
        for t in 1..=10 {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 999.0);
        }
        assert!((s.alpha_bar(10) - prod).abs() < 1e-15);
    }

    #[test]
    fn schedule_bounds() {
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 0.1, 0.05).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn forward_noise_limits() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z0 = Latent::new(Tensor::randn(&[1, 4, 2, 2], 1.0, &mut rng), 1).unwrap();
        let eps = Tensor::randn(&[1, 4, 2, 2], 1.0, &mut rng);
        let t = 300;
        let a = forward_noise(&z0, t, &Tensor::zeros(&[1, 4, 2, 2]), &s).unwrap();
        for (x, z) in a.tensor().data().iter().zip(z0.tensor().data()) {
            assert_eq!(*x, s.alpha_bar(t).sqrt() * z);
        }
        let zero = Latent::new(Tensor::zeros(&[1, 4, 2, 2]), 1).unwrap();
        let b = forward_noise(&zero, t, &eps, &s).unwrap();
        for (x, e) in b.tensor().data().iter().zip(eps.data()) {
            assert_eq!(*x, (1.0 - s.alpha_bar(t)).sqrt() * e);
        }
        assert!(forward_noise(&z0, 0, &eps, &s).is_err());
        assert!(forward_noise(&z0, 1001, &eps, &s).is_err());
    }
}
