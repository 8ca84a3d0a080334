//! Victim-side transfer metrics, image quality metrics and the evaluation
//! report.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::encoders::{Encoder, EncoderEnsemble};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Reported PSNR for identical images.
pub const PSNR_MAX_DB: f64 = 100.0;

pub const SSIM_NOTE: &str = "SSIM: 8x8 uniform sliding window, K1=0.01, K2=0.03, peak 1.0, population statistics, mean over windows and channels";
pub const ASR_NOTE: &str = "ASR: success iff the victim embedding's nearest class prototype (cosine) is the target class";

fn same_shape<S: Scalar>(op: &'static str, x: &Tensor<S>, y: &Tensor<S>) -> Result<()> {
    if x.shape() != y.shape() {
        return shape_err(op, format!("{:?} vs {:?}", x.shape(), y.shape()));
    }
    Ok(())
}

/// Mean SSIM over all 8×8 windows (stride 1) of each channel of `[C, H, W]`
/// images.
pub fn ssim<S: Scalar>(x: &Tensor<S>, y: &Tensor<S>) -> Result<f64> {
    same_shape("ssim", x, y)?;
    let (c, h, w) = x.dims3("ssim")?;
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return shape_err("ssim", format!("image {h}x{w} smaller than the {k}x{k} window"));
    }
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = (k * k) as f64;
    let (xd, yd) = (x.data(), y.data());
    let mut total = 0.0;
    for ch in 0..c {
        let off = ch * h * w;
        let mut acc = 0.0;
        for r in 0..=h - k {
            for col in 0..=w - k {
                let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dr in 0..k {
                    for dc in 0..k {
                        let i = off + (r + dr) * w + col + dc;
                        let (a, b) = (xd[i].f64(), yd[i].f64());
                        sx += a;
                        sy += b;
                        sxx += a * a;
                        syy += b * b;
                        sxy += a * b;
                    }
                }
                let (mx, my) = (sx / n, sy / n);
                let vx = (sxx / n - mx * mx).max(0.0);
                let vy = (syy / n - my * my).max(0.0);
                let cov = sxy / n - mx * my;
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
        total += acc / ((h - k + 1) * (w - k + 1)) as f64;
    }
    Ok(total / c as f64)
}

/// PSNR with peak 1.0; identical inputs give [`PSNR_MAX_DB`].
pub fn psnr<S: Scalar>(x: &Tensor<S>, y: &Tensor<S>) -> Result<f64> {
    same_shape("psnr", x, y)?;
    let mse = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a.f64() - b.f64()).powi(2))
        .sum::<f64>()
        / x.numel().max(1) as f64;
    if mse == 0.0 {
        return Ok(PSNR_MAX_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_MAX_DB))
}

/// `(‖x - y‖∞, ‖x - y‖₂)`.
pub fn lp_norms<S: Scalar>(x: &Tensor<S>, y: &Tensor<S>) -> Result<(f64, f64)> {
    same_shape("lp_norms", x, y)?;
    let (mut linf, mut sq) = (0.0f64, 0.0f64);
    for (a, b) in x.data().iter().zip(y.data()) {
        let d = (a.f64() - b.f64()).abs();
        linf = linf.max(d);
        sq += d * d;
    }
    Ok((linf, sq.sqrt()))
}

/// Errors when `victim` shares an architecture and seed with any member.
pub fn check_victim<S: Scalar>(victim: &Encoder<S>, members: &[Encoder<S>]) -> Result<()> {
    if members
        .iter()
        .any(|m| m.arch() == victim.arch() && m.seed() == victim.seed())
    {
        return Err(Error::Config("victim encoder is part of the attack ensemble".into()));
    }
    Ok(())
}

/// Cosine between the victim embeddings of `x_adv` and `x_tar`.
pub fn transfer_similarity(ensemble: &EncoderEnsemble, x_adv: &Tensor<f32>, x_tar: &Tensor<f32>) -> Result<f64> {
    check_victim(ensemble.victim(), ensemble.members())?;
    same_shape("transfer_similarity", x_adv, x_tar)?;
    let v = ensemble.victim();
    Ok(v.embed(x_adv)?.cosine(&v.embed(x_tar)?)? as f64)
}

/// Per-class mean victim embeddings of clean images.
#[derive(Debug, Clone)]
pub struct Prototypes {
    pub classes: Vec<usize>,
    pub embeddings: Vec<Tensor<f32>>,
}

impl Prototypes {
    /// Class of the prototype nearest to `x` in cosine.
    pub fn nearest(&self, victim: &Encoder, x: &Tensor<f32>) -> Result<usize> {
        if self.classes.is_empty() {
            return Err(Error::InvalidArgument("empty prototype set".into()));
        }
        let e = victim.embed(x)?;
        let mut best = (f32::NEG_INFINITY, self.classes[0]);
        for (c, p) in self.classes.iter().zip(&self.embeddings) {
            let s = e.cosine(p)?;
            if s > best.0 {
                best = (s, *c);
            }
        }
        Ok(best.1)
    }
}

pub fn class_prototypes(victim: &Encoder, images: &[Tensor<f32>], labels: &[usize]) -> Result<Prototypes> {
    if images.len() != labels.len() {
        return shape_err("class_prototypes", format!("{} images, {} labels", images.len(), labels.len()));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut embeddings = Vec::with_capacity(classes.len());
    for &c in &classes {
        let mut sum: Option<Tensor<f32>> = None;
        let mut count = 0usize;
        for (img, _) in images.iter().zip(labels).filter(|(_, &l)| l == c) {
            let e = victim.embed(img)?;
            sum = Some(match sum {
                Some(s) => s.add(&e)?,
                None => e,
            });
            count += 1;
        }
        embeddings.push(sum.expect("class has an image").scale(1.0 / count as f32)?);
    }
    Ok(Prototypes { classes, embeddings })
}

/// True iff the victim's nearest prototype for `x_adv` is `target_class`.
pub fn embed_asr(victim: &Encoder, x_adv: &Tensor<f32>, prototypes: &Prototypes, target_class: usize) -> Result<bool> {
    Ok(prototypes.nearest(victim, x_adv)? == target_class)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub transfer_sim: f64,
    pub embed_asr: bool,
    pub ssim: f64,
    pub psnr: f64,
    pub linf: f64,
    pub l2: f64,
    /// Equal-weight surrogate ensemble objective.
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub index: usize,
    pub source: usize,
    pub target: usize,
    pub target_class: usize,
    pub method: String,
    pub defense: Option<String>,
    pub metrics: Option<ImageMetrics>,
    pub error: Option<String>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample standard deviation; zero for fewer than two values.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub defense: Option<String>,
    pub count: usize,
    pub errors: usize,
    pub transfer_sim: Option<MeanStd>,
    pub asr: Option<f64>,
    pub ssim: Option<MeanStd>,
    pub psnr: Option<MeanStd>,
    pub linf: Option<MeanStd>,
    pub l2: Option<MeanStd>,
    pub objective: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub notes: Vec<String>,
    pub config: serde_json::Value,
    pub records: Vec<EvalRecord>,
    pub aggregates: Vec<Aggregate>,
}

/// Groups by `(method, defense)` in first-seen order.
pub fn aggregate(records: &[EvalRecord]) -> Vec<Aggregate> {
    let mut keys: Vec<(String, Option<String>)> = Vec::new();
    for r in records {
        let key = (r.method.clone(), r.defense.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(method, defense)| {
            let group: Vec<&EvalRecord> = records
                .iter()
                .filter(|r| r.method == method && r.defense == defense)
                .collect();
            let ok: Vec<&ImageMetrics> = group.iter().filter_map(|r| r.metrics.as_ref()).collect();
            let col = |f: fn(&ImageMetrics) -> f64| MeanStd::of(&ok.iter().map(|m| f(m)).collect::<Vec<_>>());
            Aggregate {
                count: group.len(),
                errors: group.len() - ok.len(),
                transfer_sim: col(|m| m.transfer_sim),
                asr: MeanStd::of(&ok.iter().map(|m| m.embed_asr as u8 as f64).collect::<Vec<_>>()).map(|s| s.mean),
                ssim: col(|m| m.ssim),
                psnr: col(|m| m.psnr),
                linf: col(|m| m.linf),
                l2: col(|m| m.l2),
                objective: col(|m| m.objective),
                method,
                defense,
            }
        })
        .collect()
}

impl EvalReport {
    pub fn new(config: serde_json::Value, records: Vec<EvalRecord>) -> Self {
        let aggregates = aggregate(&records);
        Self {
            notes: vec![SSIM_NOTE.into(), ASR_NOTE.into()],
            config,
            records,
            aggregates,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// JSON with every `wall_time_s` field removed.
    pub fn to_json_without_timing(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        strip_timing(&mut v);
        Ok(serde_json::to_string_pretty(&v)?)
    }

    /// One flat row per record.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "index,source,target,target_class,method,defense,transfer_sim,embed_asr,ssim,psnr,linf,l2,objective,wall_time_s,error\n",
        );
        for r in &self.records {
            write!(
                out,
                "{},{},{},{},{},{},",
                r.index,
                r.source,
                r.target,
                r.target_class,
                r.method,
                r.defense.as_deref().unwrap_or("")
            )
            .expect("string write");
            match &r.metrics {
                Some(m) => write!(
                    out,
                    "{},{},{},{},{},{},{}",
                    m.transfer_sim, m.embed_asr as u8, m.ssim, m.psnr, m.linf, m.l2, m.objective
                ),
                None => write!(out, ",,,,,,"),
            }
            .expect("string write");
            let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
            writeln!(out, ",{},{}", r.wall_time_s, err).expect("string write");
        }
        out
    }
}

fn strip_timing(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(map) => {
            map.remove("wall_time_s");
            map.values_mut().for_each(strip_timing);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_timing),
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EnsembleConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img(seed: u64, h: usize, w: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform([3, h, w], 0.0, 1.0, &mut rng)
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let x = img(0, 12, 10);
        let y = img(1, 12, 10);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let (a, b) = (ssim(&x, &y).unwrap(), ssim(&y, &x).unwrap());
        assert!((a - b).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&a));
        assert!(ssim(&img(0, 6, 6), &img(1, 6, 6)).is_err());
        assert!(ssim(&x, &img(0, 10, 12)).is_err());
    }

    #[test]
    fn ssim_of_inverted_binary_image_matches_direct_formula() {
        // One 8x8 window, so the mean over windows is the single window value.
        let bits: Vec<f64> = (0..192).map(|i| ((i * 7 + i / 5) % 3 == 0) as u8 as f64).collect();
        let x = Tensor::new([3, 8, 8], bits.clone()).unwrap();
        let y = x.map("inv", |v| 1.0 - v).unwrap();
        let mut expected = 0.0;
        for ch in 0..3 {
            let a = &bits[ch * 64..(ch + 1) * 64];
            let b: Vec<f64> = a.iter().map(|v| 1.0 - v).collect();
            let ma = a.iter().sum::<f64>() / 64.0;
            let mb = b.iter().sum::<f64>() / 64.0;
            let va = a.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / 64.0;
            let vb = b.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / 64.0;
            let cov = a.iter().zip(&b).map(|(p, q)| (p - ma) * (q - mb)).sum::<f64>() / 64.0;
            let (c1, c2) = (1e-4, 9e-4);
            expected += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)) / 3.0;
        }
        let got = ssim(&x, &y).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        assert!(got < 0.0);
    }

    #[test]
    fn ssim_degrades_with_noise() {
        let x = Tensor::<f64>::from_fn([3, 16, 16], |i| 0.5 + 0.3 * ((i % 16) as f64 * 0.4).sin()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Tensor::<f64>::randn([3, 16, 16], &mut rng);
        let mut prev = f64::INFINITY;
        for amp in [0.0, 0.01, 0.03, 0.1, 0.3] {
            let s = ssim(&x, &x.axpby(1.0, &z, amp).unwrap()).unwrap();
            assert!(s <= prev + 1e-12, "{amp}: {s} > {prev}");
            prev = s;
        }
    }

    #[test]
    fn psnr_and_norms() {
        let x = img(2, 4, 4);
        assert_eq!(psnr(&x, &x).unwrap(), PSNR_MAX_DB);
        let y = x.add_scalar(0.1).unwrap();
        assert!((psnr(&x, &y).unwrap() - 20.0).abs() < 1e-9);
        let (linf, l2) = lp_norms(&x, &y).unwrap();
        assert!((linf - 0.1).abs() < 1e-12);
        assert!((l2 - 0.1 * 48f64.sqrt()).abs() < 1e-9);
        assert_eq!(lp_norms(&x, &x).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn l2_triangle_inequality() {
        for s in 0..20 {
            let (a, b, c) = (img(3 * s, 4, 4), img(3 * s + 1, 4, 4), img(3 * s + 2, 4, 4));
            let ab = lp_norms(&a, &b).unwrap().1;
            let bc = lp_norms(&b, &c).unwrap().1;
            let ac = lp_norms(&a, &c).unwrap().1;
            assert!(ac <= ab + bc + 1e-12);
        }
    }

    #[test]
    fn transfer_and_prototypes() {
        let ens = EncoderEnsemble::from_config(&EnsembleConfig { members: 2, ..Default::default() }).unwrap();
        let x = img(4, 16, 16).cast::<f32>();
        let t = img(5, 16, 16).cast::<f32>();
        assert!((transfer_similarity(&ens, &t, &t).unwrap() - 1.0).abs() < 1e-6);
        assert!(transfer_similarity(&ens, &x, &t).unwrap() < 1.0);
        let images = vec![x.clone(), t.clone()];
        let protos = class_prototypes(ens.victim(), &images, &[3, 6]).unwrap();
        assert_eq!(protos.classes, vec![3, 6]);
        assert!(embed_asr(ens.victim(), &t, &protos, 6).unwrap());
        assert!(embed_asr(ens.victim(), &x, &protos, 3).unwrap());
        let empty = Prototypes { classes: vec![], embeddings: vec![] };
        assert!(embed_asr(ens.victim(), &x, &empty, 0).is_err());
        assert!(check_victim(ens.victim(), std::slice::from_ref(ens.victim())).is_err());
    }

    fn record(method: &str, m: Option<(f64, bool)>) -> EvalRecord {
        EvalRecord {
            index: 0,
            source: 0,
            target: 1,
            target_class: 1,
            method: method.into(),
            defense: None,
            metrics: m.map(|(v, asr)| ImageMetrics {
                transfer_sim: v,
                embed_asr: asr,
                ssim: v,
                psnr: v,
                linf: v,
                l2: v,
                objective: v,
            }),
            error: m.is_none().then(|| "poisoned".into()),
            wall_time_s: 0.5,
        }
    }

    #[test]
    fn aggregates_are_recomputable() {
        let recs = vec![
            record("a", Some((0.2, true))),
            record("a", Some((0.4, false))),
            record("a", None),
            record("b", Some((1.0, true))),
        ];
        let report = EvalReport::new(serde_json::json!({"seed": 1}), recs.clone());
        let a = &report.aggregates[0];
        assert_eq!((a.count, a.errors), (3, 1));
        let ts = a.transfer_sim.unwrap();
        assert!((ts.mean - 0.3).abs() < 1e-12);
        assert!((ts.std - 0.02f64.sqrt()).abs() < 1e-12);
        assert_eq!(a.asr, Some(0.5));
        assert_eq!(report.aggregates[1].asr, Some(1.0));
        let back: EvalReport = serde_json::from_str(&report.to_json().unwrap()).unwrap();
        assert_eq!(back.aggregates, aggregate(&back.records));
        assert!(!report.to_json_without_timing().unwrap().contains("wall_time_s"));
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().nth(3).unwrap().ends_with(",0.5,poisoned"));
    }
}
