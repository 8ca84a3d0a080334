//! Input purification: bit-depth reduction, block DCT quantization and a
//! diffusion round trip.

use std::f64::consts::PI;
use std::sync::OnceLock;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_noise, reverse_chain, EpsModel, NoiseSchedule, SamplerKind};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    BitReduction,
    Jpeg,
    Diffpure,
}

impl DefenseKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::BitReduction => "bit_reduction",
            Self::Jpeg => "jpeg",
            Self::Diffpure => "diffpure",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefenseConfig {
    pub kind: DefenseKind,
    #[serde(default = "default_bits")]
    pub bits: u32,
    #[serde(default = "default_quality")]
    pub jpeg_quality: u32,
    #[serde(default = "default_t_frac")]
    pub diffpure_t_frac: f64,
    #[serde(default = "default_purify_sampler")]
    pub diffpure_sampler: SamplerKind,
}

fn default_bits() -> u32 {
    4
}

fn default_quality() -> u32 {
    50
}

fn default_t_frac() -> f64 {
    0.15
}

fn default_purify_sampler() -> SamplerKind {
    SamplerKind::DdpmNoise
}

impl DefenseConfig {
    pub fn new(kind: DefenseKind) -> Self {
        Self {
            kind,
            bits: default_bits(),
            jpeg_quality: default_quality(),
            diffpure_t_frac: default_t_frac(),
            diffpure_sampler: default_purify_sampler(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=8).contains(&self.bits) {
            return Err(Error::Config(format!("bits {} outside [1, 8]", self.bits)));
        }
        if !(1..=100).contains(&self.jpeg_quality) {
            return Err(Error::Config(format!("jpeg_quality {} outside [1, 100]", self.jpeg_quality)));
        }
        if !(self.diffpure_t_frac > 0.0 && self.diffpure_t_frac <= 1.0) {
            return Err(Error::Config(format!("diffpure_t_frac {} outside (0, 1]", self.diffpure_t_frac)));
        }
        Ok(())
    }
}

/// `round(x (2^bits - 1)) / (2^bits - 1)`.
pub fn bit_reduction<S: Scalar>(x: &Tensor<S>, bits: u32) -> Result<Tensor<S>> {
    if !(1..=8).contains(&bits) {
        return Err(Error::InvalidArgument(format!("bits {bits} outside [1, 8]")));
    }
    let levels = ((1u32 << bits) - 1) as f64;
    x.map("bit_reduction", |v| S::of((v.f64() * levels).round() / levels))
}

const LUMA_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, 12, 12, 14, 19, 26, 58, 60, 55, 14, 13, 16, 24, 40, 57, 69, 56, 14, 17, 22, 29, 51, 87,
    80, 62, 18, 22, 37, 56, 68, 109, 103, 77, 24, 35, 55, 64, 81, 104, 113, 92, 49, 64, 78, 87, 103, 121, 120, 101, 72,
    92, 95, 98, 112, 100, 103, 99,
];

/// Luminance quantization table at `quality` (IJG scaling).
pub fn quant_table(quality: u32) -> [f64; 64] {
    let q = quality.clamp(1, 100);
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0.0; 64];
    for (o, &t) in out.iter_mut().zip(&LUMA_TABLE) {
        *o = ((t as u32 * scale + 50) / 100).clamp(1, 255) as f64;
    }
    out
}

fn dct_basis() -> &'static [[f64; 8]; 8] {
    static BASIS: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut b = [[0.0; 8]; 8];
        for (u, row) in b.iter_mut().enumerate() {
            let c = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
            for (x, v) in row.iter_mut().enumerate() {
                *v = c * ((2 * x + 1) as f64 * u as f64 * PI / 16.0).cos();
            }
        }
        b
    })
}

/// Orthonormal 2-D DCT-II of an 8×8 block (row-major).
pub fn dct8(block: &[f64; 64]) -> [f64; 64] {
    let b = dct_basis();
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|x| b[u][x] * block[y * 8 + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for v in 0..8 {
        for u in 0..8 {
            out[v * 8 + u] = (0..8).map(|y| b[v][y] * tmp[y * 8 + u]).sum();
        }
    }
    out
}

pub fn idct8(coef: &[f64; 64]) -> [f64; 64] {
    let b = dct_basis();
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|v| b[v][y] * coef[v * 8 + u]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            out[y * 8 + x] = (0..8).map(|u| b[u][x] * tmp[y * 8 + u]).sum();
        }
    }
    out
}

/// Mirror index into `[0, n)` without repeating the edge sample.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Per-channel 8×8 DCT quantization on the 0..255 scale. Sizes that are not
/// multiples of 8 are reflect-padded and cropped back.
pub fn jpeg_compress<S: Scalar>(x: &Tensor<S>, quality: u32) -> Result<Tensor<S>> {
    if !(1..=100).contains(&quality) {
        return Err(Error::InvalidArgument(format!("quality {quality} outside [1, 100]")));
    }
    let (c, h, w) = x.dims3("jpeg_compress")?;
    let q = quant_table(quality);
    let ph = h.div_ceil(8) * 8;
    let pw = w.div_ceil(8) * 8;
    let src = x.data();
    let mut out = vec![S::zero(); x.numel()];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for by in (0..ph).step_by(8) {
            for bx in (0..pw).step_by(8) {
                let mut block = [0.0; 64];
                for dy in 0..8 {
                    let yy = reflect(by + dy, h);
                    for dx in 0..8 {
                        block[dy * 8 + dx] = plane[yy * w + reflect(bx + dx, w)].f64() * 255.0 - 128.0;
                    }
                }
                let mut coef = dct8(&block);
                for (cv, qv) in coef.iter_mut().zip(&q) {
                    *cv = (*cv / qv).round() * qv;
                }
                let rec = idct8(&coef);
                for dy in 0..8.min(h.saturating_sub(by)) {
                    for dx in 0..8.min(w.saturating_sub(bx)) {
                        let v = ((rec[dy * 8 + dx] + 128.0) / 255.0).clamp(0.0, 1.0);
                        out[ch * h * w + (by + dy) * w + bx + dx] = S::of(v);
                    }
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Noise `x` to step `round(t_frac T)` with fresh noise, run the unguided
/// reverse chain back to 0 and clamp.
pub fn diffpure<S: Scalar, M: EpsModel<S> + ?Sized, R: Rng + ?Sized>(
    x: &Tensor<S>,
    t_frac: f64,
    eps_model: &M,
    sched: &NoiseSchedule,
    kind: SamplerKind,
    rng: &mut R,
) -> Result<Tensor<S>> {
    if !(t_frac > 0.0 && t_frac <= 1.0) {
        return Err(Error::InvalidArgument(format!("t_frac {t_frac} outside (0, 1]")));
    }
    let t = sched.step_for_fraction(t_frac);
    let x_t = forward_noise(x, t, &Tensor::randn(x.shape().to_vec(), rng), sched)?;
    reverse_chain(eps_model, &x_t, t, sched, kind, rng)?.clamp(S::zero(), S::one())
}

/// Dispatches on `cfg.kind`; diffpure needs a noise model and schedule.
pub fn apply_defense<R: Rng + ?Sized>(
    x: &Tensor<f32>,
    cfg: &DefenseConfig,
    purifier: Option<(&dyn EpsModel, &NoiseSchedule)>,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    cfg.validate()?;
    match cfg.kind {
        DefenseKind::BitReduction => bit_reduction(x, cfg.bits),
        DefenseKind::Jpeg => jpeg_compress(x, cfg.jpeg_quality),
        DefenseKind::Diffpure => {
            let (model, sched) =
                purifier.ok_or_else(|| Error::Config("diffpure needs a noise model and schedule".into()))?;
            diffpure(x, cfg.diffpure_t_frac, model, sched, cfg.diffpure_sampler, rng)
        }
    }
}
