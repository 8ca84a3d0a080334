//! Adaptive ensemble gradient estimation: loss-ratio weights over the
//! surrogate ensemble, the weighted cosine objective, clipped gradients and
//! score composition.

use crate::autodiff::{Tape, Var};
use crate::diffusion::NoiseSchedule;
use crate::encoders::EncoderEnsemble;
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_TAU: f64 = 2.0;
pub const DEFAULT_S: f64 = 35.0;
pub const DEFAULT_DELTA: f64 = 0.0025;

/// Guard added to `|L(t+2)|` in loss ratios.
const RATIO_EPS: f64 = 1e-8;

/// `w_i = Σ_j exp(τ r_j) / (N exp(τ r_i))` with `r = L(t+1) / (|L(t+2)| + 1e-8)`,
/// i.e. `1 / w_i = N softmax(τ r)_i`.
pub fn adaptive_weights(prev1: &[f64], prev2: &[f64], tau: f64) -> Result<Vec<f64>> {
    if prev1.len() != prev2.len() || prev1.is_empty() {
        return shape_err("adaptive_weights", format!("{} vs {} losses", prev1.len(), prev2.len()));
    }
    if prev1.iter().chain(prev2).any(|l| !l.is_finite()) {
        return Err(Error::NonFinite { op: "adaptive_weights" });
    }
    if prev2.iter().any(|&l| l == 0.0) {
        return Err(Error::InvalidArgument("zero loss in the ratio denominator".into()));
    }
    let r: Vec<f64> = prev1
        .iter()
        .zip(prev2)
        .map(|(a, b)| tau * a / (b.abs() + RATIO_EPS))
        .collect();
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "adaptive_weights" });
    }
    let n = r.len() as f64;
    let top = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = r.iter().map(|v| (v - top).exp()).sum();
    let w: Vec<f64> = r.iter().map(|v| total / (n * (v - top).exp())).collect();
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "adaptive_weights" });
    }
    Ok(w)
}

/// Per-attack weight and loss-history state. Both history slots start at 1,
/// so the first two steps use unit weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AegeState {
    pub tau: f64,
    pub s: f64,
    pub delta: f64,
    w: Vec<f64>,
    prev1: Vec<f64>,
    prev2: Vec<f64>,
    recorded: usize,
}

impl AegeState {
    pub fn new(members: usize, tau: f64, s: f64, delta: f64) -> Self {
        Self {
            tau,
            s,
            delta,
            w: vec![1.0; members],
            prev1: vec![1.0; members],
            prev2: vec![1.0; members],
            recorded: 0,
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn history(&self) -> (&[f64], &[f64]) {
        (&self.prev1, &self.prev2)
    }

    /// Recomputes `w` from the history; unit weights until two steps exist.
    pub fn update_weights(&mut self) -> Result<&[f64]> {
        if self.recorded >= 2 {
            self.w = adaptive_weights(&self.prev1, &self.prev2, self.tau)?;
        }
        Ok(&self.w)
    }

    /// Pushes this step's per-member losses into the history.
    pub fn record(&mut self, losses: &[f64]) -> Result<()> {
        if losses.len() != self.w.len() {
            return shape_err("AegeState::record", format!("{} losses for {} members", losses.len(), self.w.len()));
        }
        if losses.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite { op: "AegeState::record" });
        }
        self.prev2 = std::mem::replace(&mut self.prev1, losses.to_vec());
        self.recorded += 1;
        Ok(())
    }
}

/// Traced `Σ_i w_i cos(φ_i(x), e_i)` plus the per-member cosines, where
/// `targets[i]` is member `i`'s embedding of the target image.
pub fn ensemble_objective<'t, S: Scalar>(
    ensemble: &EncoderEnsemble<S>,
    w: &[f64],
    x: &Var<'t, S>,
    targets: &[Tensor<S>],
) -> Result<(Var<'t, S>, Vec<f64>)> {
    if w.len() != ensemble.len() || targets.len() != ensemble.len() {
        return shape_err(
            "ensemble_objective",
            format!("{} weights, {} targets, {} members", w.len(), targets.len(), ensemble.len()),
        );
    }
    let tape = x.tape();
    let mut total: Option<Var<'t, S>> = None;
    let mut cosines = Vec::with_capacity(w.len());
    for ((enc, &wi), tar) in ensemble.members().iter().zip(w).zip(targets) {
        let cs = enc.embed_var(x)?.cosine(&tape.constant(tar.clone()))?;
        cosines.push(cs.value().item()?.f64());
        let term = cs.scale(S::of(wi))?;
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    Ok((total.expect("non-empty ensemble"), cosines))
}

/// Result of one gradient estimate at `x̂_t`.
#[derive(Debug, Clone)]
pub struct GradientEstimate<S: Scalar = f32> {
    /// Gradient clipped elementwise to `[-δ, δ]`.
    pub g: Tensor<S>,
    pub raw_linf: f64,
    pub objective: f64,
    /// Per-member cosine similarities.
    pub cosines: Vec<f64>,
    /// Per-member losses `1 - cos`, the quantities fed to the weight history.
    pub losses: Vec<f64>,
}

/// Gradient of the weighted objective at `x_hat` under the state's current
/// weights, clipped to `±delta`.
pub fn estimate_gradient<S: Scalar>(
    ensemble: &EncoderEnsemble<S>,
    state: &AegeState,
    x_hat: &Tensor<S>,
    targets: &[Tensor<S>],
) -> Result<GradientEstimate<S>> {
    let tape = Tape::new();
    let x = tape.leaf(x_hat.clone());
    let (obj, cosines) = ensemble_objective(ensemble, state.weights(), &x, targets)?;
    let objective = obj.value().item()?.f64();
    let raw = tape.backward(obj, &[x])?.remove(0);
    let d = S::of(state.delta);
    Ok(GradientEstimate {
        raw_linf: raw.max_abs().f64(),
        g: raw.clamp(-d, d)?,
        objective,
        losses: cosines.iter().map(|c| 1.0 - c).collect(),
        cosines,
    })
}

/// `-eps_hat / sqrt(1 - ᾱ_t) + s g`. With `s = 0` the guidance term is not
/// added at all, so the result is the unguided score bit for bit.
pub fn compose_score<S: Scalar>(eps_hat: &Tensor<S>, g: &Tensor<S>, t: usize, sched: &NoiseSchedule, s: f64) -> Result<Tensor<S>> {
    sched.check_t(t)?;
    if eps_hat.shape() != g.shape() {
        return shape_err("compose_score", format!("{:?} vs {:?}", eps_hat.shape(), g.shape()));
    }
    let unguided = eps_hat.scale(S::of(-1.0 / (1.0 - sched.alpha_bar(t)).sqrt()))?;
    if s == 0.0 {
        return Ok(unguided);
    }
    unguided.axpby(S::one(), g, S::of(s))
}
