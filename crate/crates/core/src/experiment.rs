//! Batch orchestration: model preparation, per-image attack pipelines and
//! report persistence.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{advdiffvlm_attack, ensemble_score, mifgsm_ens_attack, AttackConfig, AttackModels, MifgsmConfig};
use crate::dataset::{gen_toy_dataset, DatasetSpec, Split, ToyDataset};
use crate::defenses::{apply_defense, DefenseConfig};
use crate::diffusion::{
    train_denoiser, DenoiserModel, EpsModel, GaussianOracle, NoiseSchedule, ScheduleConfig, TrainConfig,
};
use crate::encoders::{EncoderEnsemble, EnsembleConfig};
use crate::error::{Error, Result};
use crate::gcmg::{train_classifier, ClassifierModel, ClassifierTrainConfig, NUM_CLASSES};
use crate::io::save_image;
use crate::metrics::{class_prototypes, embed_asr, lp_norms, psnr, ssim, transfer_similarity, EvalRecord, EvalReport, ImageMetrics, Prototypes};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpsSource {
    #[default]
    Denoiser,
    /// Closed-form Gaussian fitted to the training images.
    Oracle,
}

/// Weight directories; absent entries are built or trained from config.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelPaths {
    pub denoiser: Option<PathBuf>,
    pub classifier: Option<PathBuf>,
    pub ensemble: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImagePair {
    pub source: usize,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub baseline: Option<MifgsmConfig>,
    #[serde(default)]
    pub defenses: Vec<DefenseConfig>,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub models: ModelPaths,
    #[serde(default)]
    pub eps_source: EpsSource,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub denoiser_train: TrainConfig,
    #[serde(default)]
    pub classifier_train: ClassifierTrainConfig,
    /// Explicit dataset index pairs; by default every test-split image is
    /// paired with a training image of class `label + target_offset`.
    #[serde(default)]
    pub pairs: Option<Vec<ImagePair>>,
    #[serde(default = "default_offset")]
    pub target_offset: usize,
    #[serde(default)]
    pub max_images: Option<usize>,
    /// Extra outer-iteration counts evaluated per image.
    #[serde(default)]
    pub n_sweep: Vec<usize>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_true")]
    pub save_images: bool,
}

fn default_offset() -> usize {
    5
}

fn default_parallelism() -> usize {
    1
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    pub fn new(seed: u64) -> Self {
        serde_json::from_value(serde_json::json!({ "seed": seed })).expect("defaults deserialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("malformed experiment config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.attack.validate()?;
        for d in &self.defenses {
            d.validate()?;
        }
        if self.parallelism == 0 {
            return Err(Error::Config("parallelism must be at least 1".into()));
        }
        if self.n_sweep.contains(&0) {
            return Err(Error::Config("n_sweep entries must be at least 1".into()));
        }
        if self.dataset.count == 0 {
            return Err(Error::Config("dataset count must be at least 1".into()));
        }
        for p in [&self.models.denoiser, &self.models.classifier, &self.models.ensemble].into_iter().flatten() {
            if !p.is_dir() {
                return Err(Error::Config(format!("model directory {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        ScheduleConfig::rescaled(self.attack.steps).build()
    }
}

/// Everything a pipeline needs, prepared once per run.
pub struct ExperimentModels {
    pub ensemble: EncoderEnsemble,
    pub classifier: ClassifierModel,
    pub eps: Box<dyn EpsModel>,
    pub sched: NoiseSchedule,
    pub prototypes: Prototypes,
}

impl ExperimentModels {
    pub fn attack_models(&self) -> AttackModels<'_> {
        AttackModels {
            ensemble: &self.ensemble,
            classifier: &self.classifier,
            eps: self.eps.as_ref(),
            sched: &self.sched,
        }
    }
}

fn train_split(data: &ToyDataset) -> (Vec<Tensor<f32>>, Vec<usize>) {
    let idx: Vec<usize> = (0..data.len()).filter(|&i| data.splits[i] == Split::Train).collect();
    (
        idx.iter().map(|&i| data.images[i].clone()).collect(),
        idx.iter().map(|&i| data.labels[i]).collect(),
    )
}

/// Loads models from `cfg.models` or builds and trains them on the training
/// split of `data`.
pub fn prepare_models(cfg: &ExperimentConfig, data: &ToyDataset) -> Result<ExperimentModels> {
    let sched = cfg.schedule()?;
    let (images, labels) = train_split(data);
    if images.is_empty() {
        return Err(Error::Config("dataset has no training images".into()));
    }
    let ensemble = match &cfg.models.ensemble {
        Some(p) => EncoderEnsemble::load(p)?,
        None => EncoderEnsemble::from_config(&cfg.ensemble)?,
    };
    let classifier = match &cfg.models.classifier {
        Some(p) => ClassifierModel::load(p)?,
        None => train_classifier(&images, &labels, NUM_CLASSES, &cfg.classifier_train)?.0,
    };
    let eps: Box<dyn EpsModel> = match (cfg.eps_source, &cfg.models.denoiser) {
        (EpsSource::Oracle, _) => Box::new(GaussianOracle::fit(&images, 1e-4)?),
        (EpsSource::Denoiser, Some(p)) => {
            let (model, trained_with) = DenoiserModel::load(p)?;
            if let Some(s) = trained_with {
                if s != sched.config() {
                    return Err(Error::Config(format!(
                        "denoiser was trained with {s:?}, the run uses {:?}",
                        sched.config()
                    )));
                }
            }
            Box::new(model)
        }
        (EpsSource::Denoiser, None) => Box::new(train_denoiser(&images, &sched, &cfg.denoiser_train)?.0),
    };
    let prototypes = class_prototypes(ensemble.victim(), &images, &labels)?;
    Ok(ExperimentModels {
        ensemble,
        classifier,
        eps,
        sched,
        prototypes,
    })
}

/// One source image with raw pixels; validated inside its own pipeline.
#[derive(Debug, Clone)]
pub struct PipelineInput {
    pub index: usize,
    pub source: usize,
    pub target: usize,
    pub target_class: usize,
    pub shape: Vec<usize>,
    pub pixels: Vec<f32>,
    pub x_tar: Tensor<f32>,
}

/// Source/target pairs from the config, resolved against `data`.
pub fn build_inputs(cfg: &ExperimentConfig, data: &ToyDataset) -> Result<Vec<PipelineInput>> {
    let pairs = match &cfg.pairs {
        Some(p) => p.clone(),
        None => {
            let mut out = Vec::new();
            for (i, split) in data.splits.iter().enumerate() {
                if *split != Split::Test {
                    continue;
                }
                let want = (data.labels[i] + cfg.target_offset) % NUM_CLASSES;
                let target = (0..data.len()).find(|&j| data.splits[j] == Split::Train && data.labels[j] == want);
                if let Some(target) = target {
                    out.push(ImagePair { source: i, target });
                }
            }
            out
        }
    };
    let limit = cfg.max_images.unwrap_or(usize::MAX);
    pairs
        .into_iter()
        .take(limit)
        .enumerate()
        .map(|(index, p)| {
            if p.source >= data.len() || p.target >= data.len() {
                return Err(Error::Config(format!("pair {p:?} outside dataset of {}", data.len())));
            }
            let x = &data.images[p.source];
            Ok(PipelineInput {
                index,
                source: p.source,
                target: p.target,
                target_class: data.labels[p.target],
                shape: x.shape().to_vec(),
                pixels: x.data().to_vec(),
                x_tar: data.images[p.target].clone(),
            })
        })
        .collect()
}

fn evaluate(models: &ExperimentModels, x: &Tensor<f32>, out: &Tensor<f32>, input: &PipelineInput) -> Result<ImageMetrics> {
    let (linf, l2) = lp_norms(x, out)?;
    Ok(ImageMetrics {
        transfer_sim: transfer_similarity(&models.ensemble, out, &input.x_tar)?,
        embed_asr: embed_asr(models.ensemble.victim(), out, &models.prototypes, input.target_class)?,
        ssim: ssim(x, out)?,
        psnr: psnr(x, out)?,
        linf,
        l2,
        objective: ensemble_score(&models.ensemble, out, &input.x_tar)?,
    })
}

/// A named output image produced by a pipeline.
pub struct PipelineImage {
    pub name: String,
    pub image: Tensor<f32>,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Runs every method and defense for one image. Failures become error
/// records; nothing here aborts the batch.
pub fn run_pipeline(cfg: &ExperimentConfig, models: &ExperimentModels, input: &PipelineInput) -> (Vec<EvalRecord>, Vec<PipelineImage>) {
    let seed = cfg.seed.wrapping_add(input.index as u64);
    let record = |method: &str, defense: Option<String>, res: Result<ImageMetrics>, t: f64| {
        let (metrics, error) = match res {
            Ok(m) => (Some(m), None),
            Err(e) => (None, Some(e.to_string())),
        };
        EvalRecord {
            index: input.index,
            source: input.source,
            target: input.target,
            target_class: input.target_class,
            method: method.into(),
            defense,
            metrics,
            error,
            wall_time_s: t,
        }
    };
    let x_owned = match Tensor::new(input.shape.clone(), input.pixels.clone()) {
        Ok(x) => x,
        Err(e) => return (vec![record("advdiffvlm", None, Err(e), 0.0)], Vec::new()),
    };
    let x = &x_owned;
    let mut methods: Vec<(String, Box<dyn Fn() -> Result<Tensor<f32>> + '_>)> = vec![
        ("clean".into(), Box::new(|| Ok(x.clone()))),
        (
            "advdiffvlm".into(),
            Box::new(move || {
                advdiffvlm_attack(x, &input.x_tar, models.attack_models(), &cfg.attack, None, &mut rng_for(seed, 0))
                    .map(|r| r.x_adv)
            }),
        ),
    ];
    for (j, &n) in cfg.n_sweep.iter().enumerate() {
        let attack = AttackConfig { n_outer: n, ..cfg.attack.clone() };
        methods.push((
            format!("advdiffvlm-n{n}"),
            Box::new(move || {
                advdiffvlm_attack(x, &input.x_tar, models.attack_models(), &attack, None, &mut rng_for(seed, 1 + j as u64))
                    .map(|r| r.x_adv)
            }),
        ));
    }
    if let Some(b) = cfg.baseline {
        methods.push(("mifgsm".into(), Box::new(move || mifgsm_ens_attack(x, &input.x_tar, &models.ensemble, &b))));
    }
    let mut records = Vec::new();
    let mut images = Vec::new();
    for (mi, (name, run)) in methods.iter().enumerate() {
        let start = Instant::now();
        let out = run();
        let elapsed = start.elapsed().as_secs_f64();
        let out = match out {
            Ok(o) => o,
            Err(e) => {
                records.push(record(name, None, Err(e), elapsed));
                continue;
            }
        };
        records.push(record(name, None, evaluate(models, x, &out, input), elapsed));
        for (di, d) in cfg.defenses.iter().enumerate() {
            let mut rng = rng_for(seed, ((mi as u64 + 1) << 32) | di as u64);
            let start = Instant::now();
            let purified = apply_defense(&out, d, Some((models.eps.as_ref(), &models.sched)), &mut rng);
            let res = purified.and_then(|p| {
                let m = evaluate(models, x, &p, input);
                images.push(PipelineImage {
                    name: format!("{:04}_{name}_{}", input.index, d.kind.name()),
                    image: p,
                });
                m
            });
            records.push(record(name, Some(d.kind.name().into()), res, start.elapsed().as_secs_f64()));
        }
        if name != "clean" {
            images.push(PipelineImage {
                name: format!("{:04}_{name}", input.index),
                image: out,
            });
        }
    }
    (records, images)
}

/// Runs all inputs on a pool of `cfg.parallelism` threads; record order is
/// input order regardless of scheduling.
pub fn run_inputs(cfg: &ExperimentConfig, models: &ExperimentModels, inputs: &[PipelineInput]) -> Result<EvalReport> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<_> = pool.install(|| inputs.par_iter().map(|inp| run_pipeline(cfg, models, inp)).collect());
    let mut records = Vec::new();
    let mut images = Vec::new();
    for (r, i) in results {
        records.extend(r);
        images.extend(i);
    }
    let report = EvalReport::new(serde_json::to_value(cfg)?, records);
    if let Some(dir) = &cfg.out_dir {
        write_report(&report, dir)?;
        if cfg.save_images {
            for img in &images {
                save_image(&img.image, dir.join("images").join(format!("{}.png", img.name)))?;
            }
        }
    }
    Ok(report)
}

pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), report.to_json()? + "\n")?;
    fs::write(dir.join("report.csv"), report.to_csv())?;
    Ok(())
}

/// Generates the dataset, prepares models and runs every pair.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let data = gen_toy_dataset(&cfg.dataset)?;
    let inputs = build_inputs(cfg, &data)?;
    if inputs.is_empty() {
        let report = EvalReport::new(serde_json::to_value(cfg)?, Vec::new());
        if let Some(dir) = &cfg.out_dir {
            write_report(&report, dir)?;
        }
        return Ok(report);
    }
    let models = prepare_models(cfg, &data)?;
    run_inputs(cfg, &models, &inputs)
}
