use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{forward_noise, EpsModel, NoiseSchedule};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{batch_gradients, conv, init_conv, init_linear, Adam, ConvSpec, ParamSet, WeightManifest};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DENOISER_ARCH: &str = "conv4-c32-temb";

const WIDTH: usize = 32;
const CONVS: [ConvSpec; 4] = [
    ConvSpec::new(3, WIDTH, 3, 1, 1),
    ConvSpec::new(WIDTH, WIDTH, 3, 1, 1),
    ConvSpec::new(WIDTH, WIDTH, 3, 1, 1),
    ConvSpec::new(WIDTH, 3, 3, 1, 1),
];

/// Four 3×3 convolutions with a learned projection of a sinusoidal
/// timestep embedding added per channel after the first.
#[derive(Debug, Clone)]
pub struct DenoiserModel<S: Scalar = f32> {
    params: ParamSet<S>,
    seed: u64,
}

fn param_names() -> Vec<String> {
    let mut names = vec!["conv1.w", "conv1.b", "temb.w", "temb.b"];
    names.extend(["conv2.w", "conv2.b", "conv3.w", "conv3.b", "conv4.w", "conv4.b"]);
    names.into_iter().map(String::from).collect()
}

/// `[sin(t f_0), cos(t f_0), ...]` with `f_k = 10000^(-2k / WIDTH)`.
fn time_embedding<S: Scalar>(t: usize) -> Tensor<S> {
    let data = (0..WIDTH)
        .map(|i| {
            let f = 10000f64.powf(-((i / 2 * 2) as f64) / WIDTH as f64);
            let a = t as f64 * f;
            S::of(if i % 2 == 0 { a.sin() } else { a.cos() })
        })
        .collect();
    Tensor::new(vec![1, WIDTH], data).expect("finite embedding")
}

impl<S: Scalar> DenoiserModel<S> {
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let names = param_names();
        let mut name = names.iter();
        let mut push = |p: &mut ParamSet<S>, (w, b): (Tensor<S>, Tensor<S>)| {
            p.push(name.next().unwrap().clone(), w);
            p.push(name.next().unwrap().clone(), b);
        };
        push(&mut params, init_conv(CONVS[0], 2f64.sqrt(), &mut rng));
        push(&mut params, init_linear(WIDTH, WIDTH, 1.0, &mut rng));
        for spec in &CONVS[1..3] {
            push(&mut params, init_conv(*spec, 2f64.sqrt(), &mut rng));
        }
        push(&mut params, init_conv(CONVS[3], 0.1, &mut rng));
        Self { params, seed }
    }

    pub fn from_params(params: ParamSet<S>, seed: u64) -> Result<Self> {
        let reference = Self::init(0);
        if params.names() != reference.params.names() || !params.matches_layout(&reference.params) {
            return Err(Error::Config(format!("parameters do not fit {DENOISER_ARCH}")));
        }
        Ok(Self { params, seed })
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn manifest(&self, sched: &NoiseSchedule) -> WeightManifest {
        WeightManifest {
            architecture: DENOISER_ARCH.into(),
            seed: self.seed,
            params: self.params.names().to_vec(),
            schedule: Some(sched.config()),
            extra: serde_json::Value::Null,
        }
    }

    pub fn save(&self, dir: impl AsRef<std::path::Path>, sched: &NoiseSchedule) -> Result<()> {
        crate::nn::save_weights(dir, &self.manifest(sched), &self.params)
    }

    /// Loads weights and the schedule they were trained with.
    pub fn load(dir: impl AsRef<std::path::Path>) -> Result<(Self, Option<super::ScheduleConfig>)> {
        let (manifest, params) = crate::nn::load_weights(dir)?;
        if manifest.architecture != DENOISER_ARCH {
            return Err(Error::Config(format!("expected {DENOISER_ARCH}, found {}", manifest.architecture)));
        }
        Ok((Self::from_params(params, manifest.seed)?, manifest.schedule))
    }

    pub fn cast<T: Scalar>(&self) -> DenoiserModel<T> {
        DenoiserModel {
            params: self.params.cast(),
            seed: self.seed,
        }
    }

    /// Traced forward pass on a `[3, H, W]` image.
    pub fn forward<'t>(&self, p: &[Var<'t, S>], x: &Var<'t, S>, t: usize) -> Result<Var<'t, S>> {
        let shape = x.shape();
        let tape = x.tape();
        let mut batched = shape.clone();
        batched.insert(0, 1);
        let h = conv(&x.reshape(batched)?, CONVS[0], &p[0], &p[1])?;
        let emb = tape.constant(time_embedding(t)).linear(&p[2], &p[3])?;
        let mut h = h.add_bias(&emb)?.relu()?;
        h = conv(&h, CONVS[1], &p[4], &p[5])?.relu()?;
        h = conv(&h, CONVS[2], &p[6], &p[7])?.relu()?;
        conv(&h, CONVS[3], &p[8], &p[9])?.reshape(shape)
    }
}

impl<S: Scalar> EpsModel<S> for DenoiserModel<S> {
    fn predict_eps(&self, x_t: &Tensor<S>, t: usize, sched: &NoiseSchedule) -> Result<Tensor<S>> {
        sched.check_t(t)?;
        let tape = Tape::new();
        let p = self.params.bind_constants(&tape);
        let x = tape.constant(x_t.clone());
        Ok(self.forward(&p, &x, t)?.value().as_ref().clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Cosine-anneal the learning rate to zero over `steps`.
    pub cosine_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1200,
            batch: 8,
            lr: 2e-3,
            seed: 0,
            cosine_decay: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

/// One `(x0, t, eps)` draw for the simple noise-prediction loss.
fn draw<S: Scalar>(data: &[Tensor<S>], sched: &NoiseSchedule, rng: &mut ChaCha8Rng) -> (usize, usize, Tensor<S>) {
    let i = rng.random_range(0..data.len());
    let t = rng.random_range(1..=sched.steps());
    let eps = Tensor::randn(data[i].shape().to_vec(), rng);
    (i, t, eps)
}

fn simple_loss<'t, S: Scalar>(
    model: &DenoiserModel<S>,
    p: &[Var<'t, S>],
    tape: &'t Tape<S>,
    x0: &Tensor<S>,
    t: usize,
    eps: &Tensor<S>,
    sched: &NoiseSchedule,
) -> Result<Var<'t, S>> {
    let xt = tape.constant(forward_noise(x0, t, eps, sched)?);
    let diff = model.forward(p, &xt, t)?.sub(&tape.constant(eps.clone()))?;
    diff.mul(&diff)?.mean()
}

/// Trains an ε-predictor with Adam on the simple noise-prediction loss.
pub fn train_denoiser<S: Scalar>(
    data: &[Tensor<S>],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(DenoiserModel<S>, TrainReport)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut model = DenoiserModel::init(cfg.seed);
    let mut opt = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if cfg.cosine_decay {
            opt.lr = 0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos());
        }
        let draws: Vec<_> = (0..cfg.batch.max(1)).map(|_| draw(data, sched, &mut rng)).collect();
        let diverged = |e| match e {
            Error::NonFinite { .. } => Error::Diverged { step },
            other => other,
        };
        let (loss, grads) = batch_gradients(&model.params, draws.len(), |k, tape, p| {
            let (i, t, eps) = &draws[k];
            simple_loss(&model, p, tape, &data[*i], *t, eps, sched)
        })
        .map_err(diverged)?;
        opt.step(&mut model.params, &grads).map_err(diverged)?;
        losses.push(loss);
    }
    Ok((model, TrainReport { losses }))
}

/// Mean simple loss over `draws` seeded `(x0, t, eps)` triples.
pub fn validation_loss<S: Scalar>(
    model: &DenoiserModel<S>,
    data: &[Tensor<S>],
    sched: &NoiseSchedule,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    if data.is_empty() || draws == 0 {
        return Err(Error::InvalidArgument("validation needs data and draws".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<_> = (0..draws).map(|_| draw(data, sched, &mut rng)).collect();
    let losses: Vec<f64> = picks
        .par_iter()
        .map(|(i, t, eps)| {
            let tape = Tape::new();
            let p = model.params.bind_constants(&tape);
            Ok(simple_loss(model, &p, &tape, &data[*i], *t, eps, sched)?.value().item()?.f64())
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / draws as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleConfig;
    use crate::nn::{load_weights, save_weights};

    fn small_sched() -> NoiseSchedule {
        ScheduleConfig::rescaled(50).build().unwrap()
    }

    #[test]
    fn output_shape_matches_input() {
        let m = DenoiserModel::<f32>::init(1);
        let x = Tensor::zeros(vec![3, 8, 8]);
        assert_eq!(m.predict_eps(&x, 3, &small_sched()).unwrap().shape(), &[3, 8, 8]);
        assert!(m.predict_eps(&x, 0, &small_sched()).is_err());
    }

    #[test]
    fn one_step_changes_parameters() {
        let data = vec![Tensor::<f32>::full(vec![3, 8, 8], 0.5).unwrap()];
        let cfg = TrainConfig { steps: 1, batch: 2, lr: 1e-3, seed: 4, cosine_decay: false };
        let (m, report) = train_denoiser(&data, &small_sched(), &cfg).unwrap();
        let init = DenoiserModel::<f32>::init(4);
        assert_eq!(report.losses.len(), 1);
        assert!(m.params().iter().zip(init.params().iter()).any(|(a, b)| a.1 != b.1));
        assert!(train_denoiser::<f32>(&[], &small_sched(), &cfg).is_err());
    }

    #[test]
    fn zero_dataset_loss_decreases_over_windows() {
        let data = vec![Tensor::<f32>::zeros(vec![3, 8, 8])];
        let cfg = TrainConfig { steps: 160, batch: 4, lr: 3e-3, seed: 9, cosine_decay: false };
        let (_, report) = train_denoiser(&data, &small_sched(), &cfg).unwrap();
        let windows: Vec<f64> = report.losses.chunks(40).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
        assert!(windows.windows(2).all(|w| w[1] < w[0]), "{windows:?}");
    }

    #[test]
    fn weights_round_trip_through_a_directory() {
        let dir = tempfile::tempdir().unwrap();
        let m = DenoiserModel::<f32>::init(11);
        let s = small_sched();
        save_weights(dir.path(), &m.manifest(&s), m.params()).unwrap();
        let (manifest, params) = load_weights::<f32>(dir.path()).unwrap();
        assert_eq!(manifest.schedule, Some(s.config()));
        let back = DenoiserModel::from_params(params, manifest.seed).unwrap();
        let x = Tensor::full(vec![3, 8, 8], 0.3).unwrap();
        assert_eq!(m.predict_eps(&x, 7, &s).unwrap(), back.predict_eps(&x, 7, &s).unwrap());
    }
}
