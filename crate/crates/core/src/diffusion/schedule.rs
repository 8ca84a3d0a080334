use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Parameters of a linear β schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleConfig {
    /// The DDPM range `1e-4..0.02` over 1000 steps, stretched to `steps`
    /// steps so that the terminal `ᾱ_T` stays near zero.
    pub fn rescaled(steps: usize) -> Self {
        let scale = 1000.0 / steps.max(1) as f64;
        Self {
            steps,
            beta_start: (1e-4 * scale).min(0.999),
            beta_end: (0.02 * scale).min(0.999),
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

/// β, α and ᾱ tables indexed `1..=T`; `alpha_bar(0)` is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        config: ScheduleConfig {
            steps,
            beta_start,
            beta_end,
        },
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Variance of the true reverse posterior `q(x_{t-1} | x_t, x_0)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }

    /// `round(frac * T)`, at least 1.
    pub fn step_for_fraction(&self, frac: f64) -> usize {
        ((frac * self.steps() as f64).round() as usize).clamp(1, self.steps())
    }
}

/// `sqrt(ᾱ_t) x0 + sqrt(1 - ᾱ_t) eps`.
pub fn forward_noise<S: Scalar>(x0: &Tensor<S>, t: usize, eps: &Tensor<S>, sched: &NoiseSchedule) -> Result<Tensor<S>> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    x0.axpby(S::of(ab.sqrt()), eps, S::of((1.0 - ab).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step() {
        let s = make_linear_schedule(1, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert_eq!(s.alpha(1), 1.0 - s.beta(1));
    }

    #[test]
    fn ddpm_range_matches_direct_product() {
        let s = make_linear_schedule(200, 1e-4, 0.02).unwrap();
        // independent product in the opposite order
        let mut prod = 1.0f64;
        for i in (0..200).rev() {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 199.0);
        }
        assert!((s.alpha_bar(200) - prod).abs() < 1e-14);
        assert!((s.alpha_bar(200) - 0.132_182_754).abs() < 1e-6, "{}", s.alpha_bar(200));
        for t in 1..200 {
            assert!(s.alpha_bar(t + 1) < s.alpha_bar(t));
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
        }
    }

    #[test]
    fn invalid_ranges() {
        assert!(make_linear_schedule(0, 0.1, 0.2).is_err());
        assert!(make_linear_schedule(10, 0.2, 0.1).is_err());
        assert!(make_linear_schedule(10, 0.0, 0.1).is_err());
        assert!(make_linear_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn rescaled_terminal_is_near_zero() {
        for steps in [50, 100, 200] {
            let s = ScheduleConfig::rescaled(steps).build().unwrap();
            assert!(s.alpha_bar(steps) < 1e-3, "T={steps}: {}", s.alpha_bar(steps));
        }
    }

    #[test]
    fn forward_noise_edges() {
        let s = ScheduleConfig::rescaled(50).build().unwrap();
        let x0 = Tensor::<f64>::from_fn(vec![3, 2, 2], |i| i as f64 / 12.0).unwrap();
        let eps = Tensor::<f64>::from_fn(vec![3, 2, 2], |i| (i as f64).sin()).unwrap();
        let zero = Tensor::zeros(vec![3, 2, 2]);
        let t = 17;
        let a = forward_noise(&x0, t, &zero, &s).unwrap();
        assert_eq!(a, x0.scale(s.alpha_bar(t).sqrt()).unwrap());
        let b = forward_noise(&zero, t, &eps, &s).unwrap();
        assert_eq!(b, eps.scale((1.0 - s.alpha_bar(t)).sqrt()).unwrap());

        let end = forward_noise(&x0, 50, &eps, &s).unwrap();
        let ab = s.alpha_bar(50);
        let bound = ab.sqrt() * x0.max_abs() + (1.0 - (1.0 - ab).sqrt()).abs() * eps.max_abs();
        assert!(end.sub(&eps).unwrap().max_abs() <= bound + 1e-15);
        assert!(forward_noise(&x0, 0, &eps, &s).is_err());
        assert!(forward_noise(&x0, 3, &Tensor::zeros(vec![3]), &s).is_err());
    }
}
