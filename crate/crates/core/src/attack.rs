//! The guided diffusion attack loop and the MI-FGSM ensemble baseline.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aege::{compose_score, estimate_gradient, AegeState, DEFAULT_DELTA, DEFAULT_S, DEFAULT_TAU};
use crate::autodiff::Tape;
use crate::diffusion::{forward_noise, EpsModel, NoiseSchedule, SamplerKind};
use crate::encoders::EncoderEnsemble;
use crate::error::{shape_err, Error, Result};
use crate::gcmg::{blend, cam_to_prob, gradcam, sample_mask, ClassifierModel, Mask, MaskConfig};
use crate::tensor::Tensor;

/// How the per-step revert mask is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// Patches sampled from the clipped class activation map.
    #[default]
    Cam,
    /// `m = 1` everywhere: every step restarts from `q(x_t | x)`.
    Full,
    /// `m = 0` everywhere: no reverting.
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub s: f64,
    pub delta: f64,
    pub t_star_frac: f64,
    pub k: usize,
    pub tau: f64,
    /// Outer iterations `N`.
    pub n_outer: usize,
    /// Diffusion steps `T`.
    pub steps: usize,
    pub sampler: SamplerKind,
    pub seed: u64,
    pub patches_per_step: usize,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub mask_mode: MaskMode,
    /// Flips the sign of the guidance term.
    pub negate_guidance: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            s: DEFAULT_S,
            delta: DEFAULT_DELTA,
            t_star_frac: 0.2,
            k: 8,
            tau: DEFAULT_TAU,
            n_outer: 10,
            steps: 200,
            sampler: SamplerKind::DdpmMean,
            seed: 0,
            patches_per_step: 1,
            clip_lo: 0.3,
            clip_hi: 0.7,
            mask_mode: MaskMode::Cam,
            negate_guidance: false,
        }
    }
}

impl AttackConfig {
    pub fn mask(&self) -> MaskConfig {
        MaskConfig {
            k: self.k,
            clip_lo: self.clip_lo,
            clip_hi: self.clip_hi,
            patches_per_step: self.patches_per_step,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_star_frac > 0.0 && self.t_star_frac <= 1.0) {
            return Err(Error::Config(format!("t_star_frac {} outside (0, 1]", self.t_star_frac)));
        }
        if self.n_outer == 0 || self.steps == 0 {
            return Err(Error::Config("n_outer and steps must be at least 1".into()));
        }
        if !(self.delta >= 0.0 && self.s.is_finite() && self.tau.is_finite()) {
            return Err(Error::Config("delta must be >= 0; s and tau finite".into()));
        }
        Ok(())
    }

    /// Number of reverse steps per outer iteration.
    pub fn inner_steps(&self) -> usize {
        ((self.t_star_frac * self.steps as f64).round() as usize).clamp(1, self.steps)
    }
}

/// Models the attack draws on. The victim inside `ensemble` is never used.
#[derive(Clone, Copy)]
pub struct AttackModels<'a> {
    pub ensemble: &'a EncoderEnsemble,
    pub classifier: &'a ClassifierModel,
    pub eps: &'a dyn EpsModel,
    pub sched: &'a NoiseSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub n: usize,
    pub t: usize,
    pub objective: f64,
    pub losses: Vec<f64>,
    pub weights: Vec<f64>,
    pub linf_g: f64,
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub x_adv: Tensor<f32>,
    pub trace: Vec<TraceRecord>,
    /// Label whose activation map shaped the masks.
    pub label: usize,
    pub wall_time_s: f64,
}

impl AttackResult {
    /// `n,t,objective,w_1..w_N,linf_g`.
    pub fn trace_csv(&self) -> String {
        let members = self.trace.first().map_or(0, |r| r.weights.len());
        let mut out = String::from("n,t,objective");
        for i in 1..=members {
            write!(out, ",w_{i}").expect("string write");
        }
        out.push_str(",linf_g\n");
        for r in &self.trace {
            write!(out, "{},{},{}", r.n, r.t, r.objective).expect("string write");
            for w in &r.weights {
                write!(out, ",{w}").expect("string write");
            }
            writeln!(out, ",{}", r.linf_g).expect("string write");
        }
        out
    }
}

fn check_pair(x: &Tensor<f32>, x_tar: &Tensor<f32>) -> Result<()> {
    if x.shape() != x_tar.shape() {
        return shape_err("attack", format!("{:?} vs {:?}", x.shape(), x_tar.shape()));
    }
    x.dims3("attack")?;
    Ok(())
}

/// Runs the guided reverse process. Each outer iteration re-noises the
/// current `x_0` to `t*`; each inner step reverts a masked region to a
/// fresh sample of `q(x_t | x)`, updates the ensemble weights, takes the
/// clipped ensemble gradient at the blended latent and applies one reverse
/// step with the guided score. `x_0` is clamped to `[0, 1]` after every
/// outer iteration.
///
/// Random draws per inner step, in order: mask centres, the `q(x_t | x)`
/// noise, then any sampler noise. Each outer iteration first draws the
/// noise for `x̃_{t*}`.
pub fn advdiffvlm_attack<R: Rng + ?Sized>(
    x: &Tensor<f32>,
    x_tar: &Tensor<f32>,
    models: AttackModels<'_>,
    cfg: &AttackConfig,
    label: Option<usize>,
    rng: &mut R,
) -> Result<AttackResult> {
    let start = Instant::now();
    cfg.validate()?;
    check_pair(x, x_tar)?;
    let sched = models.sched;
    if sched.steps() != cfg.steps {
        return Err(Error::Config(format!(
            "schedule has {} steps, config expects {}",
            sched.steps(),
            cfg.steps
        )));
    }
    let (_, h, w) = x.dims3("attack")?;
    let mask_cfg = cfg.mask();
    mask_cfg.validate(h, w)?;
    let label = match label {
        Some(l) => l,
        None => models.classifier.predict(x)?,
    };
    let prob = match cfg.mask_mode {
        MaskMode::Cam => Some(cam_to_prob(&gradcam(models.classifier, x, label)?, cfg.clip_lo, cfg.clip_hi)?),
        _ => None,
    };
    let targets = models.ensemble.member_embeddings(x_tar)?;
    let scale = if cfg.negate_guidance { -cfg.s } else { cfg.s };
    let t_star = cfg.inner_steps();
    let mut x0 = x.clone();
    let mut trace = Vec::with_capacity(cfg.n_outer * t_star);
    for n in 1..=cfg.n_outer {
        let mut state = AegeState::new(models.ensemble.len(), cfg.tau, cfg.s, cfg.delta);
        let mut x_tilde = forward_noise(&x0, t_star, &Tensor::randn(x.shape().to_vec(), rng), sched)?;
        for t in (1..=t_star).rev() {
            let mask = match (&prob, cfg.mask_mode) {
                (Some(p), _) => sample_mask(p, cfg.k, rng, cfg.patches_per_step),
                (None, MaskMode::Full) => Mask::filled(h, w, true),
                (None, _) => Mask::filled(h, w, false),
            };
            let x_t = forward_noise(x, t, &Tensor::randn(x.shape().to_vec(), rng), sched)?;
            let x_hat = blend(&x_t, &x_tilde, &mask)?;
            let weights = state.update_weights()?.to_vec();
            let est = estimate_gradient(models.ensemble, &state, &x_hat, &targets)?;
            state.record(&est.losses)?;
            let eps = models.eps.predict_eps(&x_hat, t, sched)?;
            let score = compose_score(&eps, &est.g, t, sched, scale)?;
            x_tilde = cfg.sampler.step(&x_hat, &score, t, sched, rng)?;
            trace.push(TraceRecord {
                n,
                t,
                objective: est.objective,
                losses: est.losses,
                weights,
                linf_g: est.g.max_abs() as f64,
            });
        }
        x0 = x_tilde.clamp(0.0, 1.0)?;
    }
    Ok(AttackResult {
        x_adv: x0,
        trace,
        label,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Equal-weight ensemble objective `Σ_i cos(φ_i(x), φ_i(x_tar))` and its
/// gradient.
pub fn ensemble_value_and_grad(ensemble: &EncoderEnsemble, x: &Tensor<f32>, targets: &[Tensor<f32>]) -> Result<(f64, Tensor<f32>)> {
    let tape = Tape::new();
    let v = tape.leaf(x.clone());
    let ones = vec![1.0; ensemble.len()];
    let (obj, _) = crate::aege::ensemble_objective(ensemble, &ones, &v, targets)?;
    let value = obj.value().item()? as f64;
    Ok((value, tape.backward(obj, &[v])?.remove(0)))
}

/// Equal-weight ensemble objective of `x` against `x_tar`.
pub fn ensemble_score(ensemble: &EncoderEnsemble, x: &Tensor<f32>, x_tar: &Tensor<f32>) -> Result<f64> {
    let targets = ensemble.member_embeddings(x_tar)?;
    Ok(ensemble
        .members()
        .iter()
        .zip(&targets)
        .map(|(m, e)| m.embed(x).and_then(|v| v.cosine(e)).map(|c| c as f64))
        .collect::<Result<Vec<_>>>()?
        .iter()
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MifgsmConfig {
    pub steps: usize,
    pub eps_budget: f64,
    pub mu: f64,
    /// Defaults to `2 eps_budget / steps` when absent.
    pub step_size: Option<f64>,
}

impl Default for MifgsmConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            eps_budget: 16.0 / 255.0,
            mu: 1.0,
            step_size: None,
        }
    }
}

impl MifgsmConfig {
    pub fn step_size(&self) -> f64 {
        self.step_size
            .unwrap_or(2.0 * self.eps_budget / self.steps.max(1) as f64)
    }
}

/// Momentum iterative FGSM ascending the equal-weight ensemble objective;
/// after each step the perturbation is projected onto the ℓ∞ ball and the
/// image clamped to `[0, 1]`.
pub fn mifgsm_ens_attack(
    x: &Tensor<f32>,
    x_tar: &Tensor<f32>,
    ensemble: &EncoderEnsemble,
    cfg: &MifgsmConfig,
) -> Result<Tensor<f32>> {
    check_pair(x, x_tar)?;
    let targets = ensemble.member_embeddings(x_tar)?;
    let eps = cfg.eps_budget as f32;
    let alpha = cfg.step_size() as f32;
    let mu = cfg.mu as f32;
    let mut momentum = vec![0.0f32; x.numel()];
    let mut adv = x.clone();
    for _ in 0..cfg.steps {
        let (_, grad) = ensemble_value_and_grad(ensemble, &adv, &targets)?;
        let l1: f32 = grad.data().iter().map(|v| v.abs()).sum();
        let inv = if l1 > 0.0 { 1.0 / l1 } else { 0.0 };
        for (m, g) in momentum.iter_mut().zip(grad.data()) {
            *m = mu * *m + g * inv;
        }
        let data = adv
            .data()
            .iter()
            .zip(&momentum)
            .zip(x.data())
            .map(|((&a, &m), &orig)| {
                let stepped = a + alpha * if m > 0.0 { 1.0 } else if m < 0.0 { -1.0 } else { 0.0 };
                stepped.clamp(orig - eps, orig + eps).clamp(0.0, 1.0)
            })
            .collect();
        adv = Tensor::new(x.shape().to_vec(), data)?;
    }
    Ok(adv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{gen_toy_dataset, DatasetSpec};
    use crate::diffusion::{GaussianOracle, ScheduleConfig};
    use crate::encoders::EnsembleConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        ens: EncoderEnsemble,
        clf: ClassifierModel,
        oracle: GaussianOracle,
        sched: NoiseSchedule,
        images: Vec<Tensor<f32>>,
    }

    fn fixture(steps: usize) -> Fixture {
        let ds = gen_toy_dataset(&DatasetSpec { count: 16, size: 16, seed: 1 }).unwrap();
        Fixture {
            ens: EncoderEnsemble::from_config(&EnsembleConfig::default()).unwrap(),
            clf: ClassifierModel::init(8, 2),
            oracle: GaussianOracle::fit(&ds.images, 1e-3).unwrap(),
            sched: ScheduleConfig::rescaled(steps).build().unwrap(),
            images: ds.images,
        }
    }

    impl Fixture {
        fn models(&self) -> AttackModels<'_> {
            AttackModels {
                ensemble: &self.ens,
                classifier: &self.clf,
                eps: &self.oracle,
                sched: &self.sched,
            }
        }
    }

    #[test]
    fn trace_length_is_outer_times_inner() {
        let f = fixture(50);
        let cfg = AttackConfig { n_outer: 3, steps: 50, t_star_frac: 0.2, ..Default::default() };
        let r = advdiffvlm_attack(&f.images[0], &f.images[1], f.models(), &cfg, None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(r.trace.len(), 30);
        assert!(r.x_adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(r.trace.iter().all(|t| t.linf_g <= cfg.delta));
        let csv = r.trace_csv();
        assert!(csv.starts_with("n,t,objective,w_1,w_2,w_3,w_4,linf_g\n"));
        assert_eq!(csv.lines().count(), 31);
    }

    #[test]
    fn deterministic_for_a_seed() {
        let f = fixture(50);
        let cfg = AttackConfig { n_outer: 2, steps: 50, ..Default::default() };
        let run = || advdiffvlm_attack(&f.images[2], &f.images[5], f.models(), &cfg, Some(2), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(run().x_adv, run().x_adv);
    }

    #[test]
    fn config_errors() {
        let f = fixture(50);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad_steps = AttackConfig { steps: 60, ..Default::default() };
        assert!(advdiffvlm_attack(&f.images[0], &f.images[1], f.models(), &bad_steps, None, &mut rng).is_err());
        let bad_frac = AttackConfig { steps: 50, t_star_frac: 0.0, ..Default::default() };
        assert!(advdiffvlm_attack(&f.images[0], &f.images[1], f.models(), &bad_frac, None, &mut rng).is_err());
        let small = Tensor::zeros(vec![3, 8, 8]);
        let ok = AttackConfig { steps: 50, ..Default::default() };
        assert!(advdiffvlm_attack(&f.images[0], &small, f.models(), &ok, None, &mut rng).is_err());
    }

    #[test]
    fn mifgsm_respects_budget_and_ascends() {
        let f = fixture(50);
        let (x, tar) = (&f.images[0], &f.images[3]);
        let cfg = MifgsmConfig { steps: 20, ..Default::default() };
        let adv = mifgsm_ens_attack(x, tar, &f.ens, &cfg).unwrap();
        assert!(adv.sub(x).unwrap().max_abs() as f64 <= 16.0 / 255.0 + 1e-6);
        assert!(ensemble_score(&f.ens, &adv, tar).unwrap() > ensemble_score(&f.ens, x, tar).unwrap());
        let none = mifgsm_ens_attack(x, tar, &f.ens, &MifgsmConfig { steps: 0, ..Default::default() }).unwrap();
        assert_eq!(&none, x);
    }
}
