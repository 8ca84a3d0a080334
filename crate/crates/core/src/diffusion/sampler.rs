use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{EpsModel, NoiseSchedule};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Reverse update used by the attack loop and by purification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    /// `(x_t + β_t score) / sqrt(α_t)` with no added noise.
    #[default]
    DdpmMean,
    /// As `DdpmMean` plus `sqrt(β_t) z` for `t > 1`.
    DdpmNoise,
    /// Deterministic DDIM (`eta = 0`) between consecutive steps.
    Ddim,
    /// `-sqrt(1 - ᾱ_t) score`; experimental, does not denoise.
    Prose,
}

impl SamplerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ddpm-mean" => Ok(Self::DdpmMean),
            "ddpm-noise" => Ok(Self::DdpmNoise),
            "ddim" => Ok(Self::Ddim),
            "prose" => Ok(Self::Prose),
            other => Err(Error::Config(format!("unknown sampler '{other}'"))),
        }
    }

    /// One step `t -> t-1` driven by a score estimate.
    pub fn step<S: Scalar, R: Rng + ?Sized>(
        self,
        x_t: &Tensor<S>,
        score: &Tensor<S>,
        t: usize,
        sched: &NoiseSchedule,
        rng: &mut R,
    ) -> Result<Tensor<S>> {
        match self {
            Self::DdpmMean => ddpm_step(x_t, score, t, sched, None),
            Self::DdpmNoise => {
                let z = Tensor::randn(x_t.shape().to_vec(), rng);
                ddpm_step(x_t, score, t, sched, Some(&z))
            }
            Self::Ddim => {
                sched.check_t(t)?;
                let eps = score.scale(S::of(-(1.0 - sched.alpha_bar(t)).sqrt()))?;
                ddim_step(x_t, &eps, t, t - 1, sched, 0.0, None)
            }
            Self::Prose => prose_step(score, t, sched),
        }
    }
}

/// `(x_t + (1 - α_t) score) / sqrt(α_t)`, plus `sqrt(β_t) z` when noise is
/// supplied and `t > 1`.
pub fn ddpm_step<S: Scalar>(
    x_t: &Tensor<S>,
    score: &Tensor<S>,
    t: usize,
    sched: &NoiseSchedule,
    noise: Option<&Tensor<S>>,
) -> Result<Tensor<S>> {
    sched.check_t(t)?;
    let inv = 1.0 / sched.alpha(t).sqrt();
    let mean = x_t.axpby(S::of(inv), score, S::of(sched.beta(t) * inv))?;
    match noise {
        Some(z) if t > 1 => mean.axpby(S::one(), z, S::of(sched.beta(t).sqrt())),
        Some(z) if z.shape() != x_t.shape() => shape_err("ddpm_step", format!("noise {:?}", z.shape())),
        _ => Ok(mean),
    }
}

/// Generalised DDIM update from `t` to `t_prev`; `z` is required only when
/// `eta > 0` contributes noise (missing `z` counts as zero).
pub fn ddim_step<S: Scalar>(
    x_t: &Tensor<S>,
    eps_hat: &Tensor<S>,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    eta: f64,
    z: Option<&Tensor<S>>,
) -> Result<Tensor<S>> {
    sched.check_t(t)?;
    if t_prev >= t {
        return Err(Error::InvalidArgument(format!("ddim needs t_prev < t, got {t_prev} >= {t}")));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidArgument(format!("eta {eta} outside [0, 1]")));
    }
    let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt();
    let x0 = x_t.axpby(S::of(1.0 / ab.sqrt()), eps_hat, S::of(-(1.0 - ab).sqrt() / ab.sqrt()))?;
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let out = x0.axpby(S::of(ab_prev.sqrt()), eps_hat, S::of(dir))?;
    match z {
        Some(z) if sigma > 0.0 => out.axpby(S::one(), z, S::of(sigma)),
        _ => Ok(out),
    }
}

/// Literal prose form `-sqrt(1 - ᾱ_t) score`.
pub fn prose_step<S: Scalar>(score: &Tensor<S>, t: usize, sched: &NoiseSchedule) -> Result<Tensor<S>> {
    sched.check_t(t)?;
    score.scale(S::of(-(1.0 - sched.alpha_bar(t)).sqrt()))
}

/// Unguided reverse chain from `x_start` at step `t_start` down to step 0.
pub fn reverse_chain<S: Scalar, M: EpsModel<S> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    x_start: &Tensor<S>,
    t_start: usize,
    sched: &NoiseSchedule,
    kind: SamplerKind,
    rng: &mut R,
) -> Result<Tensor<S>> {
    sched.check_t(t_start)?;
    let mut x = x_start.clone();
    for t in (1..=t_start).rev() {
        let eps = model.predict_eps(&x, t, sched)?;
        let score = eps.scale(S::of(-1.0 / (1.0 - sched.alpha_bar(t)).sqrt()))?;
        x = kind.step(&x, &score, t, sched, rng)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{forward_noise, make_linear_schedule, GaussianOracle, ScheduleConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sched() -> NoiseSchedule {
        make_linear_schedule(40, 1e-3, 0.2).unwrap()
    }

    #[test]
    fn zero_score_rescales() {
        let s = sched();
        let x = Tensor::<f64>::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let out = ddpm_step(&x, &Tensor::zeros(vec![3]), 5, &s, None).unwrap();
        for (o, v) in out.data().iter().zip(x.data()) {
            assert!((o - v / s.alpha(5).sqrt()).abs() < 1e-15);
        }
        assert!(ddpm_step(&x, &x, 0, &s, None).is_err());
        assert!(ddpm_step(&x, &x, 41, &s, None).is_err());
    }

    #[test]
    fn eps_score_gives_posterior_mean_form() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(vec![10], &mut rng);
        let eps = Tensor::<f64>::randn(vec![10], &mut rng);
        for t in [1, 17, 40] {
            let k = (1.0 - s.alpha_bar(t)).sqrt();
            let score = eps.scale(-1.0 / k).unwrap();
            let out = ddpm_step(&x, &score, t, &s, None).unwrap();
            for i in 0..10 {
                let expect = (x.data()[i] - s.beta(t) / k * eps.data()[i]) / s.alpha(t).sqrt();
                assert!((out.data()[i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn noise_is_skipped_on_the_last_step() {
        let s = sched();
        let x = Tensor::<f64>::ones(vec![2]);
        let z = Tensor::<f64>::ones(vec![2]);
        let zero = Tensor::zeros(vec![2]);
        assert_eq!(
            ddpm_step(&x, &zero, 1, &s, Some(&z)).unwrap(),
            ddpm_step(&x, &zero, 1, &s, None).unwrap()
        );
        let noisy = ddpm_step(&x, &zero, 2, &s, Some(&z)).unwrap();
        let mean = ddpm_step(&x, &zero, 2, &s, None).unwrap();
        assert!((noisy.data()[0] - mean.data()[0] - s.beta(2).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ddim_inverts_known_noise() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = Tensor::<f64>::rand_uniform(vec![12], 0.0, 1.0, &mut rng);
        let eps = Tensor::<f64>::randn(vec![12], &mut rng);
        for (t, tp) in [(40, 39), (30, 10), (5, 0)] {
            let xt = forward_noise(&x0, t, &eps, &s).unwrap();
            let out = ddim_step(&xt, &eps, t, tp, &s, 0.0, None).unwrap();
            let expect = if tp == 0 { x0.clone() } else { forward_noise(&x0, tp, &eps, &s).unwrap() };
            for (a, b) in out.data().iter().zip(expect.data()) {
                assert!((a - b).abs() < 1e-12, "{t}->{tp}: {a} vs {b}");
            }
        }
        assert!(ddim_step(&x0, &eps, 5, 5, &s, 0.0, None).is_err());
        assert!(ddim_step(&x0, &eps, 5, 4, &s, 1.5, None).is_err());
    }

    #[test]
    fn ddim_eta_one_matches_posterior_variance() {
        let s = sched();
        let x = Tensor::<f64>::zeros(vec![1]);
        let e = Tensor::<f64>::zeros(vec![1]);
        let z = Tensor::<f64>::ones(vec![1]);
        for t in 2..=40 {
            let base = ddim_step(&x, &e, t, t - 1, &s, 1.0, None).unwrap();
            let shifted = ddim_step(&x, &e, t, t - 1, &s, 1.0, Some(&z)).unwrap();
            let sigma = shifted.data()[0] - base.data()[0];
            assert!((sigma * sigma - s.posterior_variance(t)).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn sampler_names_round_trip() {
        for k in [SamplerKind::DdpmMean, SamplerKind::DdpmNoise, SamplerKind::Ddim, SamplerKind::Prose] {
            let name = serde_json::to_value(k).unwrap();
            assert_eq!(SamplerKind::parse(name.as_str().unwrap()).unwrap(), k);
        }
        assert!(SamplerKind::parse("euler").is_err());
    }

    #[test]
    fn chains_started_at_the_mode_end_at_the_mean() {
        let s = ScheduleConfig::rescaled(200).build().unwrap();
        let mu = Tensor::<f64>::new(vec![3], vec![0.2, 0.5, 0.9]).unwrap();
        let o = GaussianOracle::new(mu.clone(), Tensor::full(vec![3], 0.1).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let start = mu.scale(s.alpha_bar(40).sqrt()).unwrap();
        for kind in [SamplerKind::DdpmMean, SamplerKind::Ddim] {
            let out = reverse_chain(&o, &start, 40, &s, kind, &mut rng).unwrap();
            assert!(out.sub(&mu).unwrap().max_abs() < 1e-12, "{kind:?}");
        }
    }
}
