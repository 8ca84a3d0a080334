//! Class-activation-guided mask generation: a small classifier, GradCAM,
//! the clipped sampling distribution, patch masks and latent blending.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{batch_gradients, conv, init_conv, init_linear, load_weights, save_weights, Adam, ConvSpec, ParamSet, WeightManifest};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CLASSIFIER_ARCH: &str = "cls-c16-c32-gap";
pub const NUM_CLASSES: usize = 8;

const CONV1: ConvSpec = ConvSpec::new(3, 16, 3, 1, 1);
const CONV2: ConvSpec = ConvSpec::new(16, 32, 3, 2, 1);

/// `conv3(3→16) → relu → conv3/2(16→32) → relu → GAP → linear`. The second
/// convolution's activations feed GradCAM.
#[derive(Debug, Clone)]
pub struct ClassifierModel<S: Scalar = f32> {
    params: ParamSet<S>,
    classes: usize,
    seed: u64,
}

impl<S: Scalar> ClassifierModel<S> {
    pub fn init(classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, (w, b)) in [
            ("conv1", init_conv(CONV1, 2f64.sqrt(), &mut rng)),
            ("conv2", init_conv(CONV2, 2f64.sqrt(), &mut rng)),
            ("head", init_linear(CONV2.cout, classes, 1.0, &mut rng)),
        ] {
            params.push(format!("{name}.w"), w);
            params.push(format!("{name}.b"), b);
        }
        Self { params, classes, seed }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn save(&self, dir: impl AsRef<std::path::Path>) -> Result<()> {
        let manifest = WeightManifest {
            architecture: CLASSIFIER_ARCH.into(),
            seed: self.seed,
            params: self.params.names().to_vec(),
            schedule: None,
            extra: serde_json::json!({ "classes": self.classes }),
        };
        save_weights(dir, &manifest, &self.params)
    }

    pub fn load(dir: impl AsRef<std::path::Path>) -> Result<Self> {
        let (manifest, params) = load_weights::<S>(dir)?;
        if manifest.architecture != CLASSIFIER_ARCH {
            return Err(Error::Config(format!("expected {CLASSIFIER_ARCH}, found {}", manifest.architecture)));
        }
        let classes = manifest.extra["classes"]
            .as_u64()
            .ok_or_else(|| Error::Config("classifier manifest lacks 'classes'".into()))? as usize;
        if !Self::init(classes, 0).params.matches_layout(&params) {
            return Err(Error::Config(format!("weights do not fit {CLASSIFIER_ARCH}")));
        }
        Ok(Self {
            params,
            classes,
            seed: manifest.seed,
        })
    }

    /// Activations of the designated layer, `[1, 32, H/2, W/2]`.
    pub fn features<'t>(&self, p: &[Var<'t, S>], x: &Var<'t, S>) -> Result<Var<'t, S>> {
        let mut shape = x.shape();
        shape.insert(0, 1);
        let h = conv(&x.reshape(shape)?, CONV1, &p[0], &p[1])?.relu()?;
        conv(&h, CONV2, &p[2], &p[3])?.relu()
    }

    /// Logits `[1, C]` from designated-layer activations.
    pub fn head<'t>(&self, p: &[Var<'t, S>], a: &Var<'t, S>) -> Result<Var<'t, S>> {
        a.global_avg_pool()?.linear(&p[4], &p[5])
    }

    pub fn logits(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let tape = Tape::new();
        let p = self.params.bind_constants(&tape);
        let a = self.features(&p, &tape.constant(x.clone()))?;
        Ok(self.head(&p, &a)?.value().as_ref().clone())
    }

    pub fn predict(&self, x: &Tensor<S>) -> Result<usize> {
        let logits = self.logits(x)?;
        Ok(argmax(logits.data()))
    }
}

fn argmax<S: Scalar>(v: &[S]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, S::neg_infinity()), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            steps: 150,
            batch: 16,
            lr: 1e-2,
            seed: 0,
        }
    }
}

/// Adam on mean cross-entropy; returns the model and the loss trace.
pub fn train_classifier<S: Scalar>(
    images: &[Tensor<S>],
    labels: &[usize],
    classes: usize,
    cfg: &ClassifierTrainConfig,
) -> Result<(ClassifierModel<S>, Vec<f64>)> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::InvalidArgument("classifier needs matching non-empty images and labels".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!("label {bad} outside 0..{classes}")));
    }
    let mut model = ClassifierModel::init(classes, cfg.seed);
    let mut opt = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc1a5);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let picks: Vec<usize> = (0..cfg.batch.max(1)).map(|_| rng.random_range(0..images.len())).collect();
        let (loss, grads) = batch_gradients(&model.params, picks.len(), |k, tape, p| {
            let a = model.features(p, &tape.constant(images[picks[k]].clone()))?;
            model.head(p, &a)?.cross_entropy(&[labels[picks[k]]])
        })
        .map_err(|e| match e {
            Error::NonFinite { .. } => Error::Diverged { step },
            other => other,
        })?;
        opt.step(&mut model.params, &grads)?;
        losses.push(loss);
    }
    Ok((model, losses))
}

/// Class activation map normalised to `[0, 1]`, row-major `h × w`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cam {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Cam {
    /// Min-max normalises a raw map; a constant map becomes all 0.5.
    pub fn normalized(h: usize, w: usize, raw: Vec<f64>) -> Result<Self> {
        if raw.len() != h * w || raw.is_empty() {
            return shape_err("Cam", format!("{} values for {h}x{w}", raw.len()));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "Cam" });
        }
        let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let data = if hi - lo <= 1e-12 {
            vec![0.5; raw.len()]
        } else {
            raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
        };
        Ok(Self { h, w, data })
    }
}

/// GradCAM at the classifier's designated layer: channel weights are the
/// spatial mean of `∂logit_y/∂A`, the map is `relu(Σ_k weight_k A_k)`,
/// nearest-upsampled to the image size and min-max normalised.
pub fn gradcam<S: Scalar>(classifier: &ClassifierModel<S>, x: &Tensor<S>, y: usize) -> Result<Cam> {
    if y >= classifier.classes {
        return Err(Error::InvalidArgument(format!("class {y} outside 0..{}", classifier.classes)));
    }
    let (_, img_h, img_w) = x.dims3("gradcam")?;
    let acts = {
        let tape = Tape::new();
        let p = classifier.params.bind_constants(&tape);
        classifier.features(&p, &tape.constant(x.clone()))?.value()
    };
    let tape = Tape::new();
    let p = classifier.params.bind_constants(&tape);
    let a = tape.leaf_shared(acts.clone());
    let logits = classifier.head(&p, &a)?;
    let mut onehot = vec![S::zero(); classifier.classes];
    onehot[y] = S::one();
    let pick = logits
        .mul(&tape.constant(Tensor::new(vec![1, classifier.classes], onehot)?))?
        .sum()?;
    let grad = tape.backward(pick, &[a])?.remove(0);
    let (_, c, h, w) = acts.dims4("gradcam")?;
    let hw = h * w;
    let weights: Vec<f64> = grad
        .data()
        .chunks(hw)
        .map(|g| g.iter().map(|v| v.f64()).sum::<f64>() / hw as f64)
        .collect();
    let mut small = vec![0.0f64; hw];
    for (k, plane) in acts.data().chunks(hw).enumerate().take(c) {
        for (acc, v) in small.iter_mut().zip(plane) {
            *acc += weights[k] * v.f64();
        }
    }
    let raw = (0..img_h * img_w)
        .map(|i| {
            let (r, col) = (i / img_w, i % img_w);
            small[(r * h / img_h) * w + col * w / img_w].max(0.0)
        })
        .collect();
    Cam::normalized(img_h, img_w, raw)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    pub k: usize,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub patches_per_step: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            k: 8,
            clip_lo: 0.3,
            clip_hi: 0.7,
            patches_per_step: 1,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.k == 0 || self.k > h.min(w) {
            return Err(Error::Config(format!("patch side {} outside 1..={}", self.k, h.min(w))));
        }
        if !(0.0 <= self.clip_lo && self.clip_lo < self.clip_hi && self.clip_hi <= 1.0) {
            return Err(Error::Config(format!("invalid CAM clip range [{}, {}]", self.clip_lo, self.clip_hi)));
        }
        Ok(())
    }
}

/// Sampling distribution over pixel positions.
#[derive(Debug, Clone)]
pub struct ProbMap {
    pub h: usize,
    pub w: usize,
    pub p: Vec<f64>,
    index: WeightedIndex<f64>,
}

impl ProbMap {
    pub fn new(h: usize, w: usize, p: Vec<f64>) -> Result<Self> {
        if p.len() != h * w {
            return shape_err("ProbMap", format!("{} values for {h}x{w}", p.len()));
        }
        let index = WeightedIndex::new(&p).map_err(|e| Error::InvalidArgument(format!("bad distribution: {e}")))?;
        Ok(Self { h, w, p, index })
    }

    /// Draws a `(row, col)` position.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let i = self.index.sample(rng);
        (i / self.w, i % self.w)
    }
}

/// `clamp(cam, lo, hi) / Σ clamp(cam, lo, hi)`.
pub fn cam_to_prob(cam: &Cam, clip_lo: f64, clip_hi: f64) -> Result<ProbMap> {
    if !(0.0 <= clip_lo && clip_lo < clip_hi && clip_hi <= 1.0) {
        return Err(Error::InvalidArgument(format!("invalid clip range [{clip_lo}, {clip_hi}]")));
    }
    let clipped: Vec<f64> = cam.data.iter().map(|v| v.clamp(clip_lo, clip_hi)).collect();
    let total: f64 = clipped.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument("clip range leaves no probability mass".into()));
    }
    ProbMap::new(cam.h, cam.w, clipped.iter().map(|v| v / total).collect())
}

/// Binary spatial mask, row-major `h × w`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn filled(h: usize, w: usize, value: bool) -> Self {
        Self {
            h,
            w,
            bits: vec![value; h * w],
        }
    }

    pub fn ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Sets rows `[r - k/2, r - k/2 + k)` and the same column range, clipped
    /// to the grid.
    pub fn set_patch(&mut self, center: (usize, usize), k: usize) {
        let span = |c: usize, n: usize| {
            let start = c as isize - (k / 2) as isize;
            (start.max(0) as usize)..((start + k as isize).clamp(0, n as isize) as usize)
        };
        for r in span(center.0, self.h) {
            for c in span(center.1, self.w) {
                self.bits[r * self.w + c] = true;
            }
        }
    }
}

/// Draws `patches` centres from `p` and marks a `k × k` patch around each.
pub fn sample_mask<R: Rng + ?Sized>(p: &ProbMap, k: usize, rng: &mut R, patches: usize) -> Mask {
    let mut m = Mask::filled(p.h, p.w, false);
    for _ in 0..patches {
        m.set_patch(p.sample(rng), k);
    }
    m
}

/// `m ⊙ x_t + (1 - m) ⊙ x̃_t`, with the spatial mask shared by all channels.
pub fn blend<S: Scalar>(x_t: &Tensor<S>, x_tilde: &Tensor<S>, m: &Mask) -> Result<Tensor<S>> {
    if x_t.shape() != x_tilde.shape() {
        return shape_err("blend", format!("{:?} vs {:?}", x_t.shape(), x_tilde.shape()));
    }
    let (c, h, w) = x_t.dims3("blend")?;
    if (h, w) != (m.h, m.w) {
        return shape_err("blend", format!("mask {}x{} for image {h}x{w}", m.h, m.w));
    }
    let data = (0..c * h * w)
        .map(|i| {
            if m.bits[i % (h * w)] {
                x_t.data()[i]
            } else {
                x_tilde.data()[i]
            }
        })
        .collect();
    Tensor::new(x_t.shape().to_vec(), data)
}
