//! Acceptance suite. Runs as a plain binary so that every criterion prints a
//! PASS/FAIL line in `cargo test` output; exits non-zero if any fail.

use std::process::ExitCode;
use std::time::Instant;

use advdiff_core::aege::{adaptive_weights, compose_score, ensemble_objective};
use advdiff_core::attack::{advdiffvlm_attack, ensemble_score, mifgsm_ens_attack, AttackConfig, AttackModels, MaskMode, MifgsmConfig, TraceRecord};
use advdiff_core::autodiff::{max_relative_error, numeric_gradient};
use advdiff_core::dataset::{gen_toy_dataset, DatasetSpec, Split, ToyDataset};
use advdiff_core::defenses::{bit_reduction, diffpure, jpeg_compress, DefenseConfig, DefenseKind};
use advdiff_core::diffusion::{
    reverse_chain, train_denoiser, DenoiserModel, GaussianOracle, NoiseSchedule, SamplerKind, ScheduleConfig, TrainConfig,
};
use advdiff_core::encoders::{EncoderEnsemble, EnsembleConfig};
use advdiff_core::experiment::{run_experiment, EpsSource, ExperimentConfig};
use advdiff_core::gcmg::{blend, cam_to_prob, sample_mask, train_classifier, Cam, ClassifierModel, ClassifierTrainConfig, Mask, NUM_CLASSES};
use advdiff_core::metrics::{ssim, transfer_similarity};
use advdiff_core::{Result, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Frozen from the seeded run below (16 seeds, T=50, N=4, defaults otherwise):
// mean objective gain 0.6505, victim improved on 16/16.
const GUIDANCE_MARGIN: f64 = 0.3;
// Observed RMS between the identity-configuration attack and the closed-form
// posterior mean: about 5e-8 (f32 rounding).
const IDENTITY_RMS_MAX: f64 = 1e-5;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome { pass, detail: detail.into() })
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rms(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let sq: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum();
    (sq / a.numel() as f64).sqrt()
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Models shared by the seeded desk-scale criteria.
struct DeskScale {
    data: ToyDataset,
    ensemble: EncoderEnsemble,
    classifier: ClassifierModel,
    denoiser: DenoiserModel,
    sched: NoiseSchedule,
    setup_s: f64,
}

impl DeskScale {
    fn build() -> Result<Self> {
        let start = Instant::now();
        let data = gen_toy_dataset(&DatasetSpec { count: 64, size: 32, seed: 0 })?;
        let ensemble = EncoderEnsemble::from_config(&EnsembleConfig::default())?;
        let train: Vec<usize> = (0..data.len()).filter(|&i| data.splits[i] == Split::Train).collect();
        let imgs: Vec<Tensor<f32>> = train.iter().map(|&i| data.images[i].clone()).collect();
        let labels: Vec<usize> = train.iter().map(|&i| data.labels[i]).collect();
        let (classifier, _) = train_classifier(&imgs, &labels, NUM_CLASSES, &ClassifierTrainConfig::default())?;
        let sched = ScheduleConfig::rescaled(50).build()?;
        let (denoiser, _) = train_denoiser(&data.images, &sched, &TrainConfig::default())?;
        Ok(Self {
            data,
            ensemble,
            classifier,
            denoiser,
            sched,
            setup_s: start.elapsed().as_secs_f64(),
        })
    }

    fn models(&self) -> AttackModels<'_> {
        AttackModels {
            ensemble: &self.ensemble,
            classifier: &self.classifier,
            eps: &self.denoiser,
            sched: &self.sched,
        }
    }

    /// Source `seed`, target of a different shape and the other palette.
    fn pair(&self, seed: u64) -> (&Tensor<f32>, &Tensor<f32>, usize) {
        let i = seed as usize;
        (&self.data.images[i], &self.data.images[(i + 5) % 64 + 8], self.data.labels[i])
    }

    fn config(&self, seed: u64, n_outer: usize) -> AttackConfig {
        AttackConfig {
            steps: 50,
            n_outer,
            seed,
            ..AttackConfig::default()
        }
    }
}

fn criterion_1() -> Result<Outcome> {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst = 0.0f64;
    let mut equal_ok = true;
    for case in 0..1000 {
        let n = [2usize, 4, 8][case % 3];
        let prev1: Vec<f64> = (0..n).map(|_| r.random_range(0.05..2.0)).collect();
        let prev2: Vec<f64> = (0..n).map(|_| r.random_range(0.05..2.0)).collect();
        let tau = r.random_range(0.5..4.0);
        let w = adaptive_weights(&prev1, &prev2, tau)?;
        let inv: f64 = w.iter().map(|v| 1.0 / v).sum();
        worst = worst.max((inv - n as f64).abs());
        let (a, b) = (prev1[0], prev2[0]);
        let eq = adaptive_weights(&vec![a; n], &vec![b; n], tau)?;
        equal_ok &= eq.iter().all(|&v| v == 1.0);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-6 && equal_ok && secs < 1.0,
        format!("max |sum 1/w - N| = {worst:.2e}, equal ratios exact: {equal_ok}, {secs:.3}s"),
    )
}

fn criterion_2() -> Result<Outcome> {
    let start = Instant::now();
    let ens64: EncoderEnsemble<f64> = EncoderEnsemble::from_config(&EnsembleConfig::default())?;
    let ens32: EncoderEnsemble<f32> = ens64.cast();
    let (mut worst64, mut worst32) = (0.0f64, 0.0f64);
    for seed in 0..20u64 {
        let mut r = rng(200 + seed);
        let x = Tensor::<f64>::rand_uniform([3, 8, 8], 0.0, 1.0, &mut r);
        let tar = Tensor::<f64>::rand_uniform([3, 8, 8], 0.0, 1.0, &mut r);
        let w: Vec<f64> = (0..ens64.len()).map(|_| r.random_range(0.5..2.0)).collect();
        let targets64 = ens64.member_embeddings(&tar)?;
        let targets32: Vec<Tensor<f32>> = targets64.iter().map(|t| t.cast()).collect();
        let numeric = numeric_gradient(
            |p| {
                let tape = Tape::new();
                let v = tape.leaf(p.clone());
                Ok(ensemble_objective(&ens64, &w, &v, &targets64)?.0.value().item()?)
            },
            &x,
            1e-5,
        )?;
        let analytic64 = {
            let tape = Tape::new();
            let v = tape.leaf(x.clone());
            let (obj, _) = ensemble_objective(&ens64, &w, &v, &targets64)?;
            tape.backward(obj, &[v])?.remove(0)
        };
        let analytic32 = {
            let tape = Tape::new();
            let v = tape.leaf(x.cast::<f32>());
            let (obj, _) = ensemble_objective(&ens32, &w, &v, &targets32)?;
            tape.backward(obj, &[v])?.remove(0)
        };
        worst64 = worst64.max(max_relative_error(&analytic64, &numeric)?);
        worst32 = worst32.max(max_relative_error(&analytic32, &numeric)?);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst64 < 1e-4 && worst32 < 5e-3 && secs < 30.0,
        format!("max relative error f64 {worst64:.2e}, f32 {worst32:.2e}, {secs:.2}s"),
    )
}

fn criterion_3() -> Result<Outcome> {
    let start = Instant::now();
    let (n, mu0, var0) = (10_000usize, 0.5, 0.25);
    let sched = ScheduleConfig::rescaled(100).build()?;
    let oracle = GaussianOracle::<f64>::new(Tensor::full([n], mu0)?, Tensor::full([n], var0)?)?;
    let mut r = rng(3);
    let x_t = Tensor::<f64>::randn([n], &mut r);
    let x0 = reverse_chain(&oracle, &x_t, 100, &sched, SamplerKind::DdpmNoise, &mut r)?;
    let mean = x0.data().iter().sum::<f64>() / n as f64;
    let var = x0.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    let mean_tol = 4.0 * var0.sqrt() / (n as f64).sqrt();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        (mean - mu0).abs() < mean_tol && (var / var0 - 1.0).abs() < 0.1 && secs < 30.0,
        format!("mean {mean:.4} (tol {mean_tol:.4}), variance {var:.4} vs {var0}, {secs:.2}s"),
    )
}

fn criterion_4() -> Result<Outcome> {
    // s = 0: guidance never touches the score.
    let sched = ScheduleConfig::rescaled(50).build()?;
    let mut r = rng(4);
    let mut bit_exact = true;
    for t in 1..=50 {
        let eps = Tensor::<f32>::randn([3, 8, 8], &mut r);
        let g = Tensor::<f32>::randn([3, 8, 8], &mut r);
        let plain = eps.scale((-1.0 / (1.0 - sched.alpha_bar(t)).sqrt()) as f32)?;
        bit_exact &= compose_score(&eps, &g, t, &sched, 0.0)? == plain;
    }

    // m = 1 everywhere, N = 1: every step restarts from q(x_t | x), so the
    // output is the t = 1 posterior mean of the last fresh draw.
    let data = gen_toy_dataset(&DatasetSpec { count: 16, size: 16, seed: 4 })?;
    let oracle = GaussianOracle::fit(&data.images, 1e-3)?;
    let ens = EncoderEnsemble::from_config(&EnsembleConfig { members: 2, ..Default::default() })?;
    let clf = ClassifierModel::init(NUM_CLASSES, 0);
    let models = AttackModels { ensemble: &ens, classifier: &clf, eps: &oracle, sched: &sched };
    let mut worst = 0.0f64;
    for seed in 0..4u64 {
        let x = &data.images[seed as usize];
        let tar = &data.images[seed as usize + 5];
        let cfg = AttackConfig { s: 0.0, n_outer: 1, steps: 50, mask_mode: MaskMode::Full, seed, ..Default::default() };
        let res = advdiffvlm_attack(x, tar, models, &cfg, Some(0), &mut rng(seed))?;
        // Same draws: x̃_{t*} noise, then one q(x_t | x) draw per inner step.
        let mut replay = rng(seed);
        let mut eps1 = Tensor::<f32>::randn([3, 16, 16], &mut replay);
        for _ in 0..cfg.inner_steps() {
            eps1 = Tensor::randn([3, 16, 16], &mut replay);
        }
        let ab = sched.alpha_bar(1);
        let expected: Vec<f32> = (0..x.numel())
            .map(|i| {
                let (m, v) = (oracle.mu0().data()[i] as f64, oracle.var0().data()[i] as f64);
                let x1 = ab.sqrt() * x.data()[i] as f64 + (1.0 - ab).sqrt() * eps1.data()[i] as f64;
                let post = m + v * ab.sqrt() / (ab * v + 1.0 - ab) * (x1 - ab.sqrt() * m);
                post.clamp(0.0, 1.0) as f32
            })
            .collect();
        worst = worst.max(rms(&res.x_adv, &Tensor::new([3, 16, 16], expected)?));
    }
    outcome(
        bit_exact && worst < IDENTITY_RMS_MAX,
        format!("s=0 bit-identical: {bit_exact}; identity round-trip RMS {worst:.2e} (threshold {IDENTITY_RMS_MAX:.0e})"),
    )
}

fn criterion_5(desk: &DeskScale, traces: &mut Vec<TraceRecord>, attack_times: &mut Vec<f64>) -> Result<Outcome> {
    let start = Instant::now();
    let (mut gain, mut improved) = (0.0, 0);
    for seed in 0..16u64 {
        let (x, tar, label) = desk.pair(seed);
        let res = advdiffvlm_attack(x, tar, desk.models(), &desk.config(seed, 4), Some(label), &mut rng(seed))?;
        attack_times.push(res.wall_time_s);
        gain += ensemble_score(&desk.ensemble, &res.x_adv, tar)? - ensemble_score(&desk.ensemble, x, tar)?;
        let floor = transfer_similarity(&desk.ensemble, x, tar)?;
        if transfer_similarity(&desk.ensemble, &res.x_adv, tar)? > floor {
            improved += 1;
        }
        traces.extend(res.trace);
    }
    let mean_gain = gain / 16.0;
    let attack_s = start.elapsed().as_secs_f64();
    let total = attack_s + desk.setup_s;
    outcome(
        mean_gain > GUIDANCE_MARGIN && improved * 10 >= 16 * 7 && total < 300.0,
        format!(
            "mean objective gain {mean_gain:.4} (margin {GUIDANCE_MARGIN}), victim improved {improved}/16, attacks {attack_s:.1}s + model setup {:.1}s",
            desk.setup_s
        ),
    )
}

fn criterion_6(desk: &DeskScale, traces: &mut Vec<TraceRecord>) -> Result<Outcome> {
    let ns = [1usize, 2, 4, 8];
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    let mut means = Vec::new();
    for &n in &ns {
        let mut total = 0.0;
        for seed in 0..8u64 {
            let (x, tar, label) = desk.pair(seed);
            let res = advdiffvlm_attack(x, tar, desk.models(), &desk.config(seed, n), Some(label), &mut rng(seed))?;
            let obj = ensemble_score(&desk.ensemble, &res.x_adv, tar)?;
            xs.push(n as f64);
            ys.push(obj);
            total += obj;
            traces.extend(res.trace);
        }
        means.push(total / 8.0);
    }
    let monotone = means.windows(2).all(|w| w[1] >= w[0]);
    let rho = spearman(&xs, &ys);
    let shown: Vec<String> = means.iter().map(|m| format!("{m:.3}")).collect();
    outcome(
        monotone && rho > 0.0,
        format!("mean objective over N=1,2,4,8: [{}], Spearman rho {rho:.3}", shown.join(", ")),
    )
}

fn criterion_7() -> Result<Outcome> {
    let (h, w, k, draws) = (12usize, 12usize, 4usize, 100_000usize);
    let mut r = rng(7);
    // Peaked, seeded activation map.
    let (cr, cc) = (3.0, 8.0);
    let raw: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            (-((y - cr).powi(2) + (x - cc).powi(2)) / 8.0).exp() + 0.3 * r.random::<f64>()
        })
        .collect();
    let p = cam_to_prob(&Cam::normalized(h, w, raw)?, 0.0, 1.0)?;
    let mut counts = vec![0usize; h * w];
    let mut interior_ok = true;
    let mut binary_ok = true;
    let ones = Tensor::<f32>::ones([1, h, w]);
    let zeros = Tensor::<f32>::zeros([1, h, w]);
    let mut centres = rng(70);
    let mut masks = rng(70);
    for _ in 0..draws {
        let (row, col) = p.sample(&mut centres);
        counts[row * w + col] += 1;
        let m = sample_mask(&p, k, &mut masks, 1);
        let mut expected = Mask::filled(h, w, false);
        expected.set_patch((row, col), k);
        interior_ok &= m == expected;
        let interior = row >= k / 2 && row - k / 2 + k <= h && col >= k / 2 && col - k / 2 + k <= w;
        if interior {
            interior_ok &= m.ones() == k * k;
        }
        binary_ok &= blend(&ones, &zeros, &m)?.data().iter().all(|&v| v == 0.0 || v == 1.0);
    }
    let tv = 0.5
        * counts
            .iter()
            .zip(&p.p)
            .map(|(&c, &q)| (c as f64 / draws as f64 - q).abs())
            .sum::<f64>();
    let spread = p.p.iter().cloned().fold(0.0, f64::max) / p.p.iter().cloned().fold(1.0, f64::min).max(1e-12);
    outcome(
        tv < 0.02 && interior_ok && binary_ok && spread > 1.5,
        format!("TV {tv:.4} over {draws} draws, masks binary: {binary_ok}, interior patches k^2 and centred: {interior_ok}"),
    )
}

fn criterion_8(traces: &[TraceRecord]) -> Result<Outcome> {
    let worst = traces.iter().map(|r| r.linf_g).fold(0.0, f64::max);
    let delta = AttackConfig::default().delta;
    outcome(
        !traces.is_empty() && worst <= delta,
        format!("max ||g||_inf {worst:.6} over {} records (delta {delta})", traces.len()),
    )
}

fn criterion_9(desk: &DeskScale) -> Result<Outcome> {
    let cfg = MifgsmConfig::default();
    let mut worst = 0.0f64;
    for seed in 0..16u64 {
        let (x, tar, _) = desk.pair(seed);
        let adv = mifgsm_ens_attack(x, tar, &desk.ensemble, &cfg)?;
        worst = worst.max(adv.sub(x)?.max_abs() as f64);
    }
    let bound = 16.0 / 255.0 + 1e-6;
    outcome(worst <= bound, format!("max ||x_adv - x||_inf {worst:.6} (bound {bound:.6}) over 16 images"))
}

fn criterion_10() -> Result<Outcome> {
    let mut r = rng(10);
    let mut idempotent = true;
    for bits in 1..=8 {
        let x = Tensor::<f32>::rand_uniform([3, 16, 16], 0.0, 1.0, &mut r);
        let once = bit_reduction(&x, bits)?;
        idempotent &= bit_reduction(&once, bits)? == once;
    }
    let mut jpeg_err = 0.0f64;
    for seed in 0..8u64 {
        let mut s = rng(100 + seed);
        let (fx, fy, ph): (f64, f64, f64) = (s.random_range(0.05..0.3), s.random_range(0.05..0.3), s.random_range(0.0..6.0));
        let x = Tensor::<f32>::from_fn([3, 32, 32], |i| {
            let (c, y, xx) = (i / 1024, (i / 32) % 32, i % 32);
            (0.5 + 0.35 * (fx * xx as f64 + fy * y as f64 + ph + c as f64).sin()) as f32
        })?;
        jpeg_err = jpeg_err.max(jpeg_compress(&x, 100)?.sub(&x)?.max_abs() as f64);
    }
    // Moments are asserted on the standard 1000-step schedule; the reverse
    // chain's variance error is a discretisation effect that grows with the
    // step size, so the desk-scale 50-step value is reported only.
    let (n, mu0, var0) = (10_000usize, 0.5, 0.01);
    let cfg = DefenseConfig::new(DefenseKind::Diffpure);
    let oracle = GaussianOracle::<f64>::new(Tensor::full([n], mu0)?, Tensor::full([n], var0)?)?;
    let mut purified = |steps: usize| -> Result<(f64, f64)> {
        let sched = ScheduleConfig::rescaled(steps).build()?;
        let clean = oracle.sample(&mut r).clamp(0.0, 1.0)?;
        let out = diffpure(&clean, cfg.diffpure_t_frac, &oracle, &sched, cfg.diffpure_sampler, &mut r)?;
        let mean = out.data().iter().sum::<f64>() / n as f64;
        let var = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        Ok((mean, var))
    };
    let (mean, var) = purified(1000)?;
    let (_, desk_var) = purified(50)?;
    let moments_ok = (mean / mu0 - 1.0).abs() < 0.1 && (var / var0 - 1.0).abs() < 0.1;
    outcome(
        idempotent && jpeg_err <= 0.02 && moments_ok,
        format!(
            "bit_reduction idempotent: {idempotent}; jpeg q100 max error {jpeg_err:.4}; diffpure t=0.15 T=1000 mean {mean:.4}, variance {var:.5} (p0: {mu0}, {var0}); T=50 variance {desk_var:.5} (reported)"
        ),
    )
}

fn criterion_11(desk: &DeskScale) -> Result<Outcome> {
    let x = &desk.data.images[3];
    let self_ssim = ssim(x, x)?;
    let mut r = rng(11);
    let z = Tensor::<f32>::randn([3, 32, 32], &mut r);
    let mut prev = f64::INFINITY;
    let mut monotone = true;
    for amp in [0.0f32, 0.01, 0.02, 0.05, 0.1, 0.2, 0.4] {
        let noisy = x.axpby(1.0, &z, amp)?.clamp(0.0, 1.0)?;
        let s = ssim(x, &noisy)?;
        monotone &= s <= prev;
        prev = s;
    }
    let tar = &desk.data.images[9];
    let ts = transfer_similarity(&desk.ensemble, tar, tar)?;
    outcome(
        (self_ssim - 1.0).abs() < 1e-6 && monotone && (ts - 1.0).abs() < 1e-6,
        format!("ssim(x,x) = {self_ssim}, non-increasing under noise: {monotone}, transfer_similarity(x_tar,x_tar) = {ts:.7}"),
    )
}

fn criterion_12(attack_times: &[f64], desk: &DeskScale) -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let mut cfg = ExperimentConfig::new(12);
    cfg.attack.steps = 50;
    cfg.attack.n_outer = 1;
    cfg.eps_source = EpsSource::Oracle;
    cfg.max_images = Some(2);
    cfg.n_sweep = vec![2];
    cfg.baseline = Some(MifgsmConfig { steps: 10, ..Default::default() });
    cfg.defenses = vec![
        DefenseConfig::new(DefenseKind::BitReduction),
        DefenseConfig::new(DefenseKind::Jpeg),
        DefenseConfig::new(DefenseKind::Diffpure),
    ];
    cfg.parallelism = 1;
    cfg.out_dir = Some(dir.path().join("run"));
    let csv_path = dir.path().join("run").join("report.csv");
    let mut runs = Vec::new();
    let mut csvs = Vec::new();
    for _ in 0..2 {
        runs.push(run_experiment(&cfg)?.to_json_without_timing()?);
        csvs.push(std::fs::read_to_string(&csv_path)?);
    }
    let identical = runs[0] == runs[1];
    // wall_time_s is the second-to-last column.
    let strip = |s: &str| -> String {
        s.lines()
            .map(|l| {
                let cells: Vec<&str> = l.split(',').collect();
                let n = cells.len();
                cells.iter().enumerate().filter(|(i, _)| *i != n - 2).map(|(_, c)| *c).collect::<Vec<_>>().join(",")
            })
            .collect::<Vec<_>>()
            .join("\n")
    };
    let csv_identical = strip(&csvs[0]) == strip(&csvs[1]);

    // Single-threaded default desk-scale attack.
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("pool");
    let (x, tar, label) = desk.pair(0);
    let res = pool.install(|| advdiffvlm_attack(x, tar, desk.models(), &desk.config(0, 4), Some(label), &mut rng(0)))?;
    let slowest = attack_times.iter().cloned().fold(res.wall_time_s, f64::max);
    outcome(
        identical && csv_identical && res.wall_time_s < 60.0,
        format!(
            "report JSON identical: {identical}, CSV identical modulo timing: {csv_identical}; single-thread attack {:.2}s (slowest seen {slowest:.2}s)",
            res.wall_time_s
        ),
    )
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |id: usize, name: &str, r: Result<Outcome>| {
        let (pass, detail) = match r {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!("criterion {id:>2} {:<28} {}  {detail}", name, if pass { "PASS" } else { "FAIL" });
    };
    report(1, "aege weight identity", criterion_1());
    report(2, "autodiff correctness", criterion_2());
    report(3, "sampler correctness", criterion_3());
    report(4, "identity configuration", criterion_4());
    report(7, "gcmg distribution", criterion_7());
    report(10, "defense suite", criterion_10());
    match DeskScale::build() {
        Ok(desk) => {
            let mut traces = Vec::new();
            let mut times = Vec::new();
            report(5, "guidance effectiveness", criterion_5(&desk, &mut traces, &mut times));
            report(6, "outer-iteration trend", criterion_6(&desk, &mut traces));
            report(8, "gradient clipping", criterion_8(&traces));
            report(9, "baseline budget", criterion_9(&desk));
            report(11, "metrics", criterion_11(&desk));
            report(12, "determinism and performance", criterion_12(&times, &desk));
        }
        Err(e) => {
            for (id, name) in [(5, "guidance effectiveness"), (6, "outer-iteration trend"), (8, "gradient clipping"), (9, "baseline budget"), (11, "metrics"), (12, "determinism and performance")] {
                report(id, name, Err(advdiff_core::Error::Config(format!("model setup failed: {e}"))));
            }
        }
    }
    println!("acceptance: {} failed", failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
