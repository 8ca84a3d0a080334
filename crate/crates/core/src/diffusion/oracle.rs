use rand::Rng;

use super::{EpsModel, NoiseSchedule};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Data distribution `N(mu0, diag(var0))` whose noisy marginals, and hence
/// exact scores, are available in closed form:
/// `p_t = N(sqrt(ᾱ_t) mu0, ᾱ_t var0 + 1 - ᾱ_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianOracle<S: Scalar = f32> {
    mu0: Tensor<S>,
    var0: Tensor<S>,
}

impl<S: Scalar> GaussianOracle<S> {
    pub fn new(mu0: Tensor<S>, var0: Tensor<S>) -> Result<Self> {
        if mu0.shape() != var0.shape() {
            return shape_err("GaussianOracle", format!("{:?} vs {:?}", mu0.shape(), var0.shape()));
        }
        if var0.data().iter().any(|&v| v <= S::zero()) {
            return Err(Error::InvalidArgument("oracle variance must be positive".into()));
        }
        Ok(Self { mu0, var0 })
    }

    /// Per-coordinate mean and variance of a set of equally shaped samples,
    /// with the variance floored at `min_var`.
    pub fn fit(samples: &[Tensor<S>], min_var: f64) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot fit an oracle to no samples".into()))?;
        let n = samples.len() as f64;
        let mut mean = vec![0.0f64; first.numel()];
        for s in samples {
            if s.shape() != first.shape() {
                return shape_err("GaussianOracle::fit", format!("{:?} vs {:?}", s.shape(), first.shape()));
            }
            mean.iter_mut().zip(s.data()).for_each(|(m, &v)| *m += v.f64() / n);
        }
        let mut var = vec![0.0f64; first.numel()];
        for s in samples {
            var.iter_mut()
                .zip(s.data())
                .zip(&mean)
                .for_each(|((acc, &v), &m)| *acc += (v.f64() - m).powi(2) / n);
        }
        let shape = first.shape().to_vec();
        Self::new(
            Tensor::new(shape.clone(), mean.into_iter().map(S::of).collect())?,
            Tensor::new(shape, var.into_iter().map(|v| S::of(v.max(min_var))).collect())?,
        )
    }

    pub fn mu0(&self) -> &Tensor<S> {
        &self.mu0
    }

    pub fn var0(&self) -> &Tensor<S> {
        &self.var0
    }

    pub fn cast<T: Scalar>(&self) -> GaussianOracle<T> {
        GaussianOracle {
            mu0: self.mu0.cast(),
            var0: self.var0.cast(),
        }
    }

    /// `∇ log p_t(x_t)`.
    pub fn score(&self, sched: &NoiseSchedule, x_t: &Tensor<S>, t: usize) -> Result<Tensor<S>> {
        if x_t.shape() != self.mu0.shape() {
            return shape_err("oracle score", format!("{:?} vs {:?}", x_t.shape(), self.mu0.shape()));
        }
        let ab = sched.alpha_bar(t);
        let sab = ab.sqrt();
        let data = x_t
            .data()
            .iter()
            .zip(self.mu0.data())
            .zip(self.var0.data())
            .map(|((&x, &m), &v)| {
                let var_t = ab * v.f64() + (1.0 - ab);
                S::of(-(x.f64() - sab * m.f64()) / var_t)
            })
            .collect();
        Tensor::from_op("oracle score", x_t.shape().to_vec(), data)
    }

    /// Samples from `p_0`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor<S> {
        let z = Tensor::<f64>::randn(self.mu0.shape().to_vec(), rng);
        let data = z
            .data()
            .iter()
            .zip(self.mu0.data())
            .zip(self.var0.data())
            .map(|((&z, &m), &v)| S::of(m.f64() + v.f64().sqrt() * z))
            .collect();
        Tensor::new(self.mu0.shape().to_vec(), data).expect("finite oracle sample")
    }
}

/// Exact noise prediction `-sqrt(1 - ᾱ_t) ∇ log p_t(x_t)`.
pub fn analytic_eps<S: Scalar>(
    oracle: &GaussianOracle<S>,
    sched: &NoiseSchedule,
    x_t: &Tensor<S>,
    t: usize,
) -> Result<Tensor<S>> {
    sched.check_t(t)?;
    let k = S::of(-(1.0 - sched.alpha_bar(t)).sqrt());
    oracle.score(sched, x_t, t)?.scale(k)
}

impl<S: Scalar> EpsModel<S> for GaussianOracle<S> {
    fn predict_eps(&self, x_t: &Tensor<S>, t: usize, sched: &NoiseSchedule) -> Result<Tensor<S>> {
        analytic_eps(self, sched, x_t, t)
    }
}
