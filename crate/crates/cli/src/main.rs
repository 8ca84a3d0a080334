use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use advdiff_core::attack::{advdiffvlm_attack, mifgsm_ens_attack, AttackConfig};
use advdiff_core::dataset::{gen_toy_dataset, DatasetSpec, Split, ToyDataset};
use advdiff_core::defenses::{apply_defense, DefenseConfig, DefenseKind};
use advdiff_core::diffusion::{train_denoiser, SamplerKind, ScheduleConfig, TrainConfig};
use advdiff_core::experiment::{prepare_models, run_experiment, ExperimentConfig, ExperimentModels};
use advdiff_core::gcmg::{train_classifier, ClassifierTrainConfig, NUM_CLASSES};
use advdiff_core::io::{load_image, save_image};
use advdiff_core::metrics::{embed_asr, lp_norms, psnr, ssim, transfer_similarity, EvalReport};
use advdiff_core::{Error, Tensor};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser, Debug)]
#[command(name = "advdiff", version, about = "Adversarial diffusion sampling against toy image encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Guided diffusion attack on one image pair.
    Attack(PairArgs),
    /// MI-FGSM ensemble attack on one image pair.
    Baseline(PairArgs),
    /// Purify one image.
    Defend(DefendArgs),
    /// Batch experiment over the procedural dataset.
    Evaluate(EvaluateArgs),
    /// Train the noise-prediction network and save its weights.
    TrainDenoiser(TrainDenoiserArgs),
    /// Train the CAM classifier and save its weights.
    TrainClassifier(TrainClassifierArgs),
    /// Write the procedural dataset as PNGs plus labels.csv.
    GenData(GenDataArgs),
    /// Summarise a report.json.
    Report(ReportArgs),
}

#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long, value_parser = parse_sampler)]
    sampler: Option<SamplerKind>,
    #[arg(long)]
    s: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    /// Fraction of T used as the re-noising depth.
    #[arg(long = "t-star")]
    t_star: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    /// Outer iterations.
    #[arg(long = "N", alias = "n-outer")]
    n_outer: Option<usize>,
    /// Diffusion steps.
    #[arg(long = "T", alias = "steps")]
    steps: Option<usize>,
}

fn parse_sampler(s: &str) -> Result<SamplerKind, String> {
    SamplerKind::parse(s).map_err(|e| e.to_string())
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.parallelism {
            cfg.parallelism = v;
        }
        let a = &mut cfg.attack;
        if let Some(v) = self.sampler {
            a.sampler = v;
        }
        if let Some(v) = self.s {
            a.s = v;
        }
        if let Some(v) = self.delta {
            a.delta = v;
        }
        if let Some(v) = self.t_star {
            a.t_star_frac = v;
        }
        if let Some(v) = self.k {
            a.k = v;
        }
        if let Some(v) = self.tau {
            a.tau = v;
        }
        if let Some(v) = self.n_outer {
            a.n_outer = v;
        }
        if let Some(v) = self.steps {
            a.steps = v;
        }
    }
}

#[derive(Args, Debug)]
struct PairArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindArg {
    BitReduction,
    Jpeg,
    Diffpure,
}

#[derive(Args, Debug)]
struct DefendArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    kind: KindArg,
    #[arg(long)]
    bits: Option<u32>,
    #[arg(long)]
    quality: Option<u32>,
    #[arg(long)]
    t_frac: Option<f64>,
    /// Required for diffpure (supplies the noise model and schedule).
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct TrainDenoiserArgs {
    /// Dataset directory from gen-data; generated from --seed when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "T", alias = "steps", default_value_t = AttackConfig::default().steps)]
    t: usize,
    #[arg(long)]
    train_steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainClassifierArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    train_steps: Option<usize>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// A report.json, or a directory containing one.
    #[arg(long)]
    input: PathBuf,
    /// Also write the flat CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Bad input detected before any work starts (exit 1) vs. a failure while
/// running (exit 2).
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn load_config(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = ExperimentConfig::from_json(&text).map_err(|e| Failure::Usage(e.to_string()))?;
    overrides.apply(&mut cfg);
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn dataset_from(data: Option<&Path>, seed: u64) -> advdiff_core::Result<ToyDataset> {
    match data {
        Some(dir) => ToyDataset::load(dir),
        None => gen_toy_dataset(&DatasetSpec {
            seed,
            ..DatasetSpec::default()
        }),
    }
}

struct Pair {
    cfg: ExperimentConfig,
    models: ExperimentModels,
    x: Tensor<f32>,
    x_tar: Tensor<f32>,
}

fn load_pair(args: &PairArgs) -> Result<Pair, Failure> {
    let cfg = load_config(&args.config, &args.overrides)?;
    let size = cfg.dataset.size;
    let x = load_image(&args.image, Some((size, size)))?;
    let x_tar = load_image(&args.target, Some((size, size)))?;
    let data = gen_toy_dataset(&cfg.dataset)?;
    let models = prepare_models(&cfg, &data)?;
    Ok(Pair { cfg, models, x, x_tar })
}

fn pair_metrics(p: &Pair, out: &Tensor<f32>) -> advdiff_core::Result<serde_json::Value> {
    let target_class = p.models.prototypes.nearest(p.models.ensemble.victim(), &p.x_tar)?;
    let (linf, l2) = lp_norms(&p.x, out)?;
    Ok(serde_json::json!({
        "target_class": target_class,
        "transfer_sim_before": transfer_similarity(&p.models.ensemble, &p.x, &p.x_tar)?,
        "transfer_sim": transfer_similarity(&p.models.ensemble, out, &p.x_tar)?,
        "embed_asr": embed_asr(p.models.ensemble.victim(), out, &p.models.prototypes, target_class)?,
        "objective_before": advdiff_core::attack::ensemble_score(&p.models.ensemble, &p.x, &p.x_tar)?,
        "objective": advdiff_core::attack::ensemble_score(&p.models.ensemble, out, &p.x_tar)?,
        "ssim": ssim(&p.x, out)?,
        "psnr": psnr(&p.x, out)?,
        "linf": linf,
        "l2": l2,
    }))
}

fn write_json(path: &Path, value: &serde_json::Value) -> CmdResult {
    fs::write(path, serde_json::to_string_pretty(value).map_err(Error::from)? + "\n")?;
    Ok(())
}

fn cmd_attack(args: &PairArgs) -> CmdResult {
    let p = load_pair(args)?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.cfg.seed);
    let res = advdiffvlm_attack(&p.x, &p.x_tar, p.models.attack_models(), &p.cfg.attack, None, &mut rng)?;
    fs::create_dir_all(&args.out)?;
    save_image(&res.x_adv, args.out.join("x_adv.png"))?;
    fs::write(args.out.join("trace.csv"), res.trace_csv())?;
    let report = serde_json::json!({
        "method": "advdiffvlm",
        "config": p.cfg,
        "label": res.label,
        "metrics": pair_metrics(&p, &res.x_adv)?,
        "wall_time_s": res.wall_time_s,
    });
    write_json(&args.out.join("report.json"), &report)
}

fn cmd_baseline(args: &PairArgs) -> CmdResult {
    let p = load_pair(args)?;
    let b = p.cfg.baseline.unwrap_or_default();
    let start = std::time::Instant::now();
    let x_adv = mifgsm_ens_attack(&p.x, &p.x_tar, &p.models.ensemble, &b)?;
    let elapsed = start.elapsed().as_secs_f64();
    fs::create_dir_all(&args.out)?;
    save_image(&x_adv, args.out.join("x_adv.png"))?;
    let report = serde_json::json!({
        "method": "mifgsm",
        "config": p.cfg,
        "baseline": b,
        "metrics": pair_metrics(&p, &x_adv)?,
        "wall_time_s": elapsed,
    });
    write_json(&args.out.join("report.json"), &report)
}

fn cmd_defend(args: &DefendArgs) -> CmdResult {
    let kind = match args.kind {
        KindArg::BitReduction => DefenseKind::BitReduction,
        KindArg::Jpeg => DefenseKind::Jpeg,
        KindArg::Diffpure => DefenseKind::Diffpure,
    };
    let mut d = DefenseConfig::new(kind);
    if let Some(v) = args.bits {
        d.bits = v;
    }
    if let Some(v) = args.quality {
        d.jpeg_quality = v;
    }
    if let Some(v) = args.t_frac {
        d.diffpure_t_frac = v;
    }
    if let Some(v) = args.overrides.sampler {
        d.diffpure_sampler = v;
    }
    d.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let x = load_image(&args.image, None)?;
    let (out, seed) = if kind == DefenseKind::Diffpure {
        let path = args
            .config
            .as_ref()
            .ok_or_else(|| Failure::Usage("diffpure needs --config".into()))?;
        let cfg = load_config(path, &args.overrides)?;
        let data = gen_toy_dataset(&cfg.dataset)?;
        let models = prepare_models(&cfg, &data)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        (apply_defense(&x, &d, Some((models.eps.as_ref(), &models.sched)), &mut rng)?, cfg.seed)
    } else {
        let seed = args.overrides.seed.unwrap_or(0);
        (apply_defense(&x, &d, None, &mut ChaCha8Rng::seed_from_u64(seed))?, seed)
    };
    save_image(&out, &args.out)?;
    eprintln!("{} (seed {seed}) -> {}", kind.name(), args.out.display());
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> CmdResult {
    let mut cfg = load_config(&args.config, &args.overrides)?;
    if let Some(out) = &args.out {
        cfg.out_dir = Some(out.clone());
    }
    let report = run_experiment(&cfg)?;
    print_summary(&report);
    Ok(())
}

fn cmd_train_denoiser(args: &TrainDenoiserArgs) -> CmdResult {
    let data = dataset_from(args.data.as_deref(), args.seed)?;
    let images: Vec<Tensor<f32>> = (0..data.len())
        .filter(|&i| data.splits[i] == Split::Train)
        .map(|i| data.images[i].clone())
        .collect();
    let sched = ScheduleConfig::rescaled(args.t).build().map_err(|e| Failure::Usage(e.to_string()))?;
    let mut tc = TrainConfig {
        seed: args.seed,
        ..TrainConfig::default()
    };
    if let Some(v) = args.train_steps {
        tc.steps = v;
    }
    if let Some(v) = args.lr {
        tc.lr = v;
    }
    if let Some(v) = args.batch {
        tc.batch = v;
    }
    let (model, report) = train_denoiser(&images, &sched, &tc)?;
    model.save(&args.out, &sched)?;
    let csv: String = std::iter::once("step,loss\n".to_string())
        .chain(report.losses.iter().enumerate().map(|(i, l)| format!("{i},{l}\n")))
        .collect();
    fs::write(args.out.join("losses.csv"), csv)?;
    eprintln!("final loss {:.5}", report.losses.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

fn cmd_train_classifier(args: &TrainClassifierArgs) -> CmdResult {
    let data = dataset_from(args.data.as_deref(), args.seed)?;
    let idx: Vec<usize> = (0..data.len()).filter(|&i| data.splits[i] == Split::Train).collect();
    let images: Vec<Tensor<f32>> = idx.iter().map(|&i| data.images[i].clone()).collect();
    let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
    let mut tc = ClassifierTrainConfig {
        seed: args.seed,
        ..ClassifierTrainConfig::default()
    };
    if let Some(v) = args.train_steps {
        tc.steps = v;
    }
    let (model, losses) = train_classifier(&images, &labels, NUM_CLASSES, &tc)?;
    model.save(&args.out)?;
    let test: Vec<usize> = (0..data.len()).filter(|&i| data.splits[i] == Split::Test).collect();
    let correct = test
        .iter()
        .map(|&i| model.predict(&data.images[i]).map(|p| (p == data.labels[i]) as usize))
        .sum::<advdiff_core::Result<usize>>()?;
    eprintln!(
        "final loss {:.4}, test accuracy {}/{}",
        losses.last().copied().unwrap_or(f64::NAN),
        correct,
        test.len()
    );
    Ok(())
}

fn cmd_gen_data(args: &GenDataArgs) -> CmdResult {
    if args.count == 0 {
        return Err(Failure::Usage("--count must be at least 1".into()));
    }
    let data = gen_toy_dataset(&DatasetSpec {
        count: args.count,
        size: args.size,
        seed: args.seed,
    })?;
    data.save(&args.out)?;
    Ok(())
}

fn print_summary(report: &EvalReport) {
    println!("{:<18} {:<14} {:>5} {:>6} {:>9} {:>6} {:>7} {:>7}", "method", "defense", "n", "errors", "transfer", "asr", "ssim", "linf");
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    for a in &report.aggregates {
        println!(
            "{:<18} {:<14} {:>5} {:>6} {:>9} {:>6} {:>7} {:>7}",
            a.method,
            a.defense.as_deref().unwrap_or("-"),
            a.count,
            a.errors,
            fmt(a.transfer_sim.map(|m| m.mean)),
            fmt(a.asr),
            fmt(a.ssim.map(|m| m.mean)),
            fmt(a.linf.map(|m| m.mean)),
        );
    }
}

fn cmd_report(args: &ReportArgs) -> CmdResult {
    let path = if args.input.is_dir() {
        args.input.join("report.json")
    } else {
        args.input.clone()
    };
    let text = fs::read_to_string(&path)?;
    let report: EvalReport = serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    print_summary(&report);
    if let Some(out) = &args.out {
        fs::write(out, report.to_csv())?;
    }
    Ok(())
}

fn run(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Attack(a) => cmd_attack(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Defend(a) => cmd_defend(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::TrainDenoiser(a) => cmd_train_denoiser(a),
        Command::TrainClassifier(a) => cmd_train_classifier(a),
        Command::GenData(a) => cmd_gen_data(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
