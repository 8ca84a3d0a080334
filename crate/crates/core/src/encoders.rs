//! Fixed random convolutional image encoders: the attack-side surrogate
//! ensemble and a held-out victim of a different layout.

use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{conv, init_conv, init_linear, load_weights, save_weights, ConvSpec, ParamSet, WeightManifest};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_DIM: usize = 64;
const CONV_GAIN: f64 = 1.5;
const BIAS_STD: f64 = 0.5;
const CALIBRATION_IMAGES: usize = 16;
const CALIBRATION_SIZE: usize = 32;
pub const DEFAULT_MEMBERS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderArch {
    /// Two 3×3 layers, 16 and 32 channels, second strided.
    ConvA,
    /// 5×5 strided stem with 12 channels, then a 3×3 layer to 24.
    ConvB,
    /// Three 3×3 layers, 8/16/32 channels, two strided.
    ConvC,
    /// A single wide 7×7 strided layer with 32 channels.
    ConvD,
    /// 4×4 strided stem with 24 channels, then 3×3 to 32. Never a member.
    Victim,
}

impl EncoderArch {
    pub const MEMBERS: [EncoderArch; 4] = [Self::ConvA, Self::ConvB, Self::ConvC, Self::ConvD];

    pub fn id(self) -> &'static str {
        match self {
            Self::ConvA => "enc-conv-a",
            Self::ConvB => "enc-conv-b",
            Self::ConvC => "enc-conv-c",
            Self::ConvD => "enc-conv-d",
            Self::Victim => "enc-victim",
        }
    }

    pub fn from_id(id: &str) -> Result<Self> {
        [Self::ConvA, Self::ConvB, Self::ConvC, Self::ConvD, Self::Victim]
            .into_iter()
            .find(|a| a.id() == id)
            .ok_or_else(|| Error::Config(format!("unknown encoder architecture '{id}'")))
    }

    pub fn layers(self) -> &'static [ConvSpec] {
        const A: [ConvSpec; 2] = [ConvSpec::new(3, 16, 3, 1, 1), ConvSpec::new(16, 32, 3, 2, 1)];
        const B: [ConvSpec; 2] = [ConvSpec::new(3, 12, 5, 2, 2), ConvSpec::new(12, 24, 3, 1, 1)];
        const C: [ConvSpec; 3] = [
            ConvSpec::new(3, 8, 3, 1, 1),
            ConvSpec::new(8, 16, 3, 2, 1),
            ConvSpec::new(16, 32, 3, 2, 1),
        ];
        const D: [ConvSpec; 1] = [ConvSpec::new(3, 32, 7, 2, 3)];
        const V: [ConvSpec; 2] = [ConvSpec::new(3, 24, 4, 2, 1), ConvSpec::new(24, 32, 3, 1, 1)];
        match self {
            Self::ConvA => &A,
            Self::ConvB => &B,
            Self::ConvC => &C,
            Self::ConvD => &D,
            Self::Victim => &V,
        }
    }
}

/// Conv stack with tanh activations, global average pooling and a linear
/// head, followed by L2 normalisation. Inputs are centred by subtracting 0.5.
#[derive(Debug, Clone)]
pub struct Encoder<S: Scalar = f32> {
    arch: EncoderArch,
    seed: u64,
    dim: usize,
    params: ParamSet<S>,
}

impl<S: Scalar> Encoder<S> {
    pub fn new(arch: EncoderArch, seed: u64, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (i, spec) in arch.layers().iter().enumerate() {
            let (w, _) = init_conv(*spec, CONV_GAIN, &mut rng);
            let b = Tensor::randn(vec![spec.cout], &mut rng).scale(S::of(BIAS_STD)).expect("finite bias");
            params.push(format!("conv{}.w", i + 1), w);
            params.push(format!("conv{}.b", i + 1), b);
        }
        let last = arch.layers().last().expect("non-empty layout").cout;
        let (w, b) = init_linear(last, dim, 1.0, &mut rng);
        params.push("head.w", w);
        params.push("head.b", b);
        let mut enc = Self { arch, seed, dim, params };
        enc.centre_head(seed);
        enc
    }

    /// Sets the head bias to `-W mean(pooled)` over a seeded set of random
    /// two-colour images, so embeddings measure deviation from a typical
    /// image rather than a shared offset.
    fn centre_head(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xca1b);
        let images = calibration_images(&mut rng);
        let mut mean: Option<Tensor<S>> = None;
        for img in &images {
            let tape = Tape::new();
            let pooled = self.pooled_var(&tape.constant(img.clone())).expect("calibration forward");
            let v = pooled.value().as_ref().clone();
            mean = Some(match mean {
                Some(m) => m.add(&v).expect("same shape"),
                None => v,
            });
        }
        let mean = mean.expect("non-empty calibration set").scale(S::of(1.0 / images.len() as f64)).expect("finite");
        let n = self.params.len();
        let bias = mean.matmul(self.params.get(n - 2)).expect("head shape").scale(S::of(-1.0)).expect("finite");
        self.params.set(n - 1, bias.reshape(vec![self.dim]).expect("head bias")).expect("head bias");
    }

    pub fn arch(&self) -> EncoderArch {
        self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    pub fn cast<T: Scalar>(&self) -> Encoder<T> {
        Encoder {
            arch: self.arch,
            seed: self.seed,
            dim: self.dim,
            params: self.params.cast(),
        }
    }

    pub fn manifest(&self) -> WeightManifest {
        WeightManifest {
            architecture: self.arch.id().into(),
            seed: self.seed,
            params: self.params.names().to_vec(),
            schedule: None,
            extra: serde_json::json!({ "dim": self.dim }),
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        save_weights(dir, &self.manifest(), &self.params)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let (manifest, params) = load_weights::<S>(dir)?;
        let arch = EncoderArch::from_id(&manifest.architecture)?;
        let dim = manifest.extra["dim"]
            .as_u64()
            .ok_or_else(|| Error::Config("encoder manifest lacks 'dim'".into()))? as usize;
        let fresh = Self::new(arch, manifest.seed, dim);
        if !fresh.params.matches_layout(&params) {
            return Err(Error::Config(format!("weights do not fit {}", arch.id())));
        }
        Ok(Self {
            arch,
            seed: manifest.seed,
            dim,
            params,
        })
    }

    /// Globally pooled features `[1, C]` of the last convolution.
    fn pooled_var<'t>(&self, x: &Var<'t, S>) -> Result<Var<'t, S>> {
        let p = self.params.bind_constants(x.tape());
        let mut shape = x.shape();
        if shape.len() != 3 {
            return crate::error::shape_err("embed", format!("expected [C, H, W], got {shape:?}"));
        }
        shape.insert(0, 1);
        let mut h = x.add_scalar(S::of(-0.5))?.reshape(shape)?;
        for (i, spec) in self.arch.layers().iter().enumerate() {
            h = conv(&h, *spec, &p[2 * i], &p[2 * i + 1])?.tanh()?;
        }
        h.global_avg_pool()
    }

    /// Traced embedding of a `[3, H, W]` image; parameters enter as constants.
    pub fn embed_var<'t>(&self, x: &Var<'t, S>) -> Result<Var<'t, S>> {
        let p = self.params.bind_constants(x.tape());
        let n = p.len();
        self.pooled_var(x)?.linear(&p[n - 2], &p[n - 1])?.l2_normalize()
    }

    /// Untraced unit-norm embedding, shape `[1, dim]`.
    pub fn embed(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let tape = Tape::new();
        let v = tape.constant(x.clone());
        Ok(Arc::unwrap_or_clone(self.embed_var(&v)?.value()))
    }
}

/// Uniform background with one axis-aligned rectangle of another colour.
fn calibration_images<S: Scalar>(rng: &mut ChaCha8Rng) -> Vec<Tensor<S>> {
    let n = CALIBRATION_SIZE;
    (0..CALIBRATION_IMAGES)
        .map(|_| {
            let bg: [f64; 3] = std::array::from_fn(|_| rng.random());
            let fg: [f64; 3] = std::array::from_fn(|_| rng.random());
            let (r0, c0) = (rng.random_range(0..n / 2), rng.random_range(0..n / 2));
            let (r1, c1) = (rng.random_range(r0 + 4..=n), rng.random_range(c0 + 4..=n));
            Tensor::from_fn(vec![3, n, n], |i| {
                let (c, r, col) = (i / (n * n), (i / n) % n, i % n);
                let inside = (r0..r1).contains(&r) && (c0..c1).contains(&col);
                S::of(if inside { fg[c] } else { bg[c] })
            })
            .expect("finite calibration image")
        })
        .collect()
}

/// Cosine similarity clamped to `[-1, 1]`; zero vectors are an error.
pub fn cosine<S: Scalar>(e1: &Tensor<S>, e2: &Tensor<S>) -> Result<S> {
    e1.cosine(e2)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    pub members: usize,
    pub dim: usize,
    /// Member seeds are `seed, seed + 1, ...`; the victim uses `seed + 1000`.
    pub seed: u64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            members: DEFAULT_MEMBERS,
            dim: DEFAULT_DIM,
            seed: 100,
        }
    }
}

impl EnsembleConfig {
    pub fn member_seeds(&self) -> Vec<u64> {
        (0..self.members as u64).map(|i| self.seed + i).collect()
    }

    pub fn victim_seed(&self) -> u64 {
        self.seed + 1000
    }
}

#[derive(Debug, Clone)]
pub struct EncoderEnsemble<S: Scalar = f32> {
    members: Vec<Encoder<S>>,
    victim: Encoder<S>,
}

/// Members cycle through the four surrogate layouts.
pub fn build_ensemble<S: Scalar>(cfg: &EnsembleConfig, member_seeds: &[u64], victim_seed: u64) -> Result<EncoderEnsemble<S>> {
    if cfg.members == 0 || member_seeds.len() != cfg.members {
        return Err(Error::Config(format!(
            "ensemble needs {} >= 1 member seeds, got {}",
            cfg.members,
            member_seeds.len()
        )));
    }
    let members = member_seeds
        .iter()
        .enumerate()
        .map(|(i, &s)| Encoder::new(EncoderArch::MEMBERS[i % 4], s, cfg.dim))
        .collect();
    EncoderEnsemble::from_parts(members, Encoder::new(EncoderArch::Victim, victim_seed, cfg.dim))
}

impl<S: Scalar> EncoderEnsemble<S> {
    pub fn from_config(cfg: &EnsembleConfig) -> Result<Self> {
        build_ensemble(cfg, &cfg.member_seeds(), cfg.victim_seed())
    }

    /// Rejects duplicate member seeds and any victim sharing a member's
    /// layout or seed.
    pub fn from_parts(members: Vec<Encoder<S>>, victim: Encoder<S>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Config("ensemble needs at least one member".into()));
        }
        let mut seen = HashSet::new();
        if !members.iter().all(|m| seen.insert(m.seed)) {
            return Err(Error::Config("duplicate member seeds".into()));
        }
        if members.iter().any(|m| m.arch == victim.arch || m.seed == victim.seed) {
            return Err(Error::Config("victim overlaps the attack ensemble".into()));
        }
        if members.iter().any(|m| m.dim != victim.dim) {
            return Err(Error::Config("embedding dimensions differ".into()));
        }
        Ok(Self { members, victim })
    }

    pub fn members(&self) -> &[Encoder<S>] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn victim(&self) -> &Encoder<S> {
        &self.victim
    }

    /// Restricts the ensemble to its first `n` members.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        Self::from_parts(self.members[..n.min(self.len())].to_vec(), self.victim.clone())
    }

    pub fn cast<T: Scalar>(&self) -> EncoderEnsemble<T> {
        EncoderEnsemble {
            members: self.members.iter().map(Encoder::cast).collect(),
            victim: self.victim.cast(),
        }
    }

    /// Member embeddings of one image, in member order.
    pub fn member_embeddings(&self, x: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
        self.members.iter().map(|m| m.embed(x)).collect()
    }

    /// Saves members under `member_<i>/` and the victim under `victim/`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for (i, m) in self.members.iter().enumerate() {
            m.save(dir.join(format!("member_{i}")))?;
        }
        self.victim.save(dir.join("victim"))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut members = Vec::new();
        while dir.join(format!("member_{}", members.len())).is_dir() {
            members.push(Encoder::load(dir.join(format!("member_{}", members.len())))?);
        }
        Self::from_parts(members, Encoder::load(dir.join("victim"))?)
    }
}
