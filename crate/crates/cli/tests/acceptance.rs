//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Run a subset with `cargo test --test acceptance -- c3 c5`.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use losatok::config::{AudioConfig, Config, KL_SWEEP_GRID};
use losatok::corpus::{load_corpus, make_corpus, Split};
use losatok::dsp::{istft, stft, AudioBuffer};
use losatok::evalkit::{
    linear_probe, make_probe_dataset, measure_rtf, measure_rtf_with, mel_distance, pooled_features, Clock,
    FeatureKind, ProbeOptions,
};
use losatok::grad::{grad_check, GradError, Graph, OptimizerSettings, Var};
use losatok::rng::stream;
use losatok::sembo::{
    evaluate_sembo, loss_time_relation, recon_loss_var, synthetic_low_rank, time_relation_var, train_sembo,
    train_sembo_with, SemboConfig, SemboModel,
};
use losatok::spectral::{eig_sym, effective_rank, SymMatrix};
use losatok::tokenizer::losses::{
    feature_matching_var, hinge_g_var, kl_var, log_mel_plain, mel_multiscale_var, mel_scales, semantic_var,
    MEL_LOSS_WINDOWS,
};
use losatok::tokenizer::{
    disc_plans, discriminate_var, generator_objective_var, init_discriminator, kl_divergence, prepare_item,
    train_tokenizer, Frontend, KlMode, LossWeights, Plans, TeacherConfig, TeacherEncoder, TokenizerConfig,
    TokenizerError, TokenizerModel, Topology, TrainOptions, TrainState,
};
use losatok::{FeatureSequence, Tensor};

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
const FD_SEEDS: u64 = 10;
const FD_BUDGET_SECS: f64 = 300.0;
const EFFECTIVE_RANK_TOL: f64 = 1e-6;
const UNIFORM_RANK_TOL: f64 = 1e-9;
const JACOBI_TOL: f64 = 1e-8;
const GRAM_TOL: f64 = 1e-10;
const KL_MC_SAMPLES: usize = 1_000_000;
const KL_MC_REL_TOL: f64 = 0.01;
const ISTFT_TOL: f64 = 1e-6;
const SEMBO_RECON_RATIO: f64 = 0.1;
const SEMBO_TR_RATIO: f64 = 0.3;
const SEMBO_BUDGET_SECS: f64 = 600.0;
const TOKENIZER_STEPS: u64 = 5000;
const TOKENIZER_MEL_RATIO: f64 = 0.5;
const TOKENIZER_DISTANCE_GAIN: f64 = 2.0;
const TOKENIZER_BUDGET_SECS: f64 = 3600.0;
const PROBE_MARGIN: f64 = 0.10;
const RTF_FIXTURE: f64 = 0.2;
const RTF_FIXTURE_TOL: f64 = 1e-12;

struct Outcome {
    id: &'static str,
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(id: &'static str, pass: bool, detail: impl Into<String>) -> Self {
        Self { id, pass, detail: detail.into() }
    }
}

fn gauss(rng: &mut impl Rng) -> f64 {
    Distribution::<f64>::sample(&StandardNormal, rng)
}

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = stream(seed, &[0xACC]);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * gauss(&mut rng)).collect()).unwrap()
}

fn noise_audio(len: usize, seed: u64, amp: f64) -> AudioBuffer {
    let mut rng = stream(seed, &[0xA0D]);
    AudioBuffer::new((0..len).map(|_| amp * gauss(&mut rng)).collect(), 16_000).unwrap()
}

/// Orthogonal matrix from Gram-Schmidt on Gaussian rows, row-major `n×n`.
fn random_orthogonal(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream(seed, &[0x0E7]);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| gauss(&mut rng)).collect();
        for _ in 0..2 {
            for r in &rows {
                let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    rows.concat()
}

/// `Q diag(λ) Qᵀ`.
fn with_spectrum(q: &[f64], lam: &[f64]) -> SymMatrix {
    let n = lam.len();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = (0..n).map(|k| q[i * n + k] * lam[k] * q[j * n + k]).sum();
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            let m = 0.5 * (a[i * n + j] + a[j * n + i]);
            a[i * n + j] = m;
            a[j * n + i] = m;
        }
    }
    SymMatrix::new(n, a).unwrap()
}

fn exp_entropy(lam: &[f64]) -> f64 {
    let total: f64 = lam.iter().sum();
    (-lam.iter().filter(|&&l| l > 0.0).map(|l| (l / total) * (l / total).ln()).sum::<f64>()).exp()
}

fn tiny_audio() -> AudioConfig {
    AudioConfig { sample_rate: 16_000, window_size: 64, hop: 4, mel_bins: 8 }
}

fn tiny_tokenizer() -> TokenizerConfig {
    TokenizerConfig {
        d: 4,
        decoder_channels: 6,
        decoder_blocks: 1,
        decoder_kernel: 3,
        disc_windows: vec![32, 64],
        disc_channels: 2,
        batch: 1,
        crop_seconds: 128.0 / 16_000.0,
        steps: 6,
        optimizer: OptimizerSettings { warmup_steps: 2, base_lr: 1e-3, ..OptimizerSettings::default() },
        ..TokenizerConfig::default()
    }
}

fn tiny_model(config: &TokenizerConfig, seed: u64) -> TokenizerModel {
    let teacher = TeacherConfig { seed: 3, d_high: 8 };
    let sembo_cfg = SemboConfig { d_high: 8, hidden: 8, d_low: config.d, ..SemboConfig::default() };
    let sembo = SemboModel::new(&sembo_cfg, seed).unwrap();
    TokenizerModel::new(&tiny_audio(), &teacher, sembo, config, seed).unwrap()
}

fn grad_only(e: TokenizerError) -> GradError {
    match e {
        TokenizerError::Grad(g) => g,
        other => GradError::NonFinite(other.to_string()),
    }
}

type Objective<'a> = dyn for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Result<Var<'g, f64>, GradError> + 'a;

fn value(f: &Objective, x: &Tensor<f64>) -> f64 {
    let g = Graph::new();
    let v = g.constant(x.clone());
    f(&g, v).map(|l| l.item()).unwrap_or(f64::NAN)
}

/// False if some coordinate's central difference at the checking step
/// disagrees with the one at a tenth of it, i.e. a kink of an L1 or
/// (leaky) ReLU term lies inside the stencil. Uses no analytic gradient.
fn smooth_over_stencil(f: &Objective, x: &Tensor<f64>) -> bool {
    let mut probe = x.clone();
    (0..x.len()).all(|i| {
        let x0 = x.data()[i];
        let mut fd = |h: f64| {
            let s = h * (1.0 + x0.abs());
            probe.data_mut()[i] = x0 + s;
            let up = value(f, &probe);
            probe.data_mut()[i] = x0 - s;
            let down = value(f, &probe);
            probe.data_mut()[i] = x0;
            (up - down) / (2.0 * s)
        };
        let (coarse, fine) = (fd(FD_STEP), fd(FD_STEP / 10.0));
        (coarse - fine).abs() / (coarse.abs() + fine.abs() + 1e-12) < FD_TOL / 2.0
    })
}

/// Gradient-check error at `x`, or `None` if `x` sits on a kink.
fn fd_instance(f: &Objective, x: &Tensor<f64>, piecewise: bool) -> Option<f64> {
    if piecewise && !smooth_over_stencil(f, x) {
        return None;
    }
    Some(grad_check(f, x, FD_STEP).map(|r| r.max_rel_error).unwrap_or(f64::INFINITY))
}

#[derive(Default)]
struct TermStats {
    accepted: u64,
    rejected: u64,
    worst: f64,
}

fn c1_gradients() -> Outcome {
    const TERMS: [&str; 9] = ["L_recon", "L_tr", "L_H", "L_L", "L_KL", "L_mel", "L_fm", "g_loss", "generator objective"];
    const MAX_DRAWS: u64 = 40;
    let t0 = Instant::now();
    let mut stats: Vec<TermStats> = TERMS.iter().map(|_| TermStats::default()).collect();
    let scales = mel_scales::<f64>(16_000);
    let disc = init_discriminator(2, 2, &mut stream(4, &[])).cast::<f64>();
    let dplans = disc_plans::<f64>(&[32, 64]);
    let objective_params = ["decoder.head.w", "encoder.patch.w", "kl.logvar.w", "kl.mu.w", "encoder.fc.w"];
    for seed in 0..MAX_DRAWS {
        let open = |t: usize, stats: &[TermStats]| stats[t].accepted < FD_SEEDS;
        let record = |t: usize, r: Option<f64>, stats: &mut [TermStats]| match r {
            Some(e) => {
                stats[t].accepted += 1;
                stats[t].worst = stats[t].worst.max(e);
            }
            None => stats[t].rejected += 1,
        };
        if open(0, &stats) {
            let target = random(&[6, 8], 10 + seed, 1.0);
            let r = fd_instance(&|g, x| recon_loss_var(x, g.constant(target.clone())), &random(&[6, 8], 20 + seed, 1.0), false);
            record(0, r, &mut stats);
        }
        if open(1, &stats) {
            let high = random(&[7, 8], 30 + seed, 1.0);
            let r = fd_instance(&|g, x| time_relation_var(x, g.constant(high.clone())), &random(&[7, 4], 40 + seed, 1.0), false);
            record(1, r, &mut stats);
        }
        let s_high = random(&[6, 8], 50 + seed, 1.0);
        let s_low = random(&[6, 4], 60 + seed, 1.0);
        let low = random(&[6, 4], 70 + seed, 1.0);
        if open(2, &stats) {
            let r = fd_instance(
                &|g, x| Ok(semantic_var(x, g.constant(low.clone()), g.constant(s_high.clone()), g.constant(s_low.clone()))?.0),
                &random(&[6, 8], 80 + seed, 1.0),
                false,
            );
            record(2, r, &mut stats);
        }
        if open(3, &stats) {
            let r = fd_instance(
                &|g, x| Ok(semantic_var(g.constant(s_high.clone()), x, g.constant(s_high.clone()), g.constant(s_low.clone()))?.1),
                &low,
                false,
            );
            record(3, r, &mut stats);
        }
        if open(4, &stats) {
            let mu = random(&[4, 3], 90 + seed, 1.0);
            let lv = random(&[4, 3], 100 + seed, 0.7);
            let a = fd_instance(&|g, x| kl_var(x, g.constant(lv.clone())), &mu, false);
            let b = fd_instance(&|g, x| kl_var(g.constant(mu.clone()), x), &lv, false);
            record(4, a.zip(b).map(|(a, b)| a.max(b)), &mut stats);
        }
        if open(5, &stats) {
            let target = noise_audio(400, 110 + seed, 0.3);
            let targets: Vec<_> = scales.iter().map(|s| log_mel_plain(s, target.samples())).collect();
            let x = Tensor::vector(noise_audio(400, 120 + seed, 0.3).into_samples());
            record(5, fd_instance(&|_, v| mel_multiscale_var(v, &targets, &scales), &x, true), &mut stats);
        }
        let real = Tensor::vector(noise_audio(160, 130 + seed, 0.3).into_samples());
        let fake = Tensor::vector(noise_audio(160, 140 + seed, 0.3).into_samples());
        if open(6, &stats) {
            let r = fd_instance(
                &|g, x| {
                    let b = disc.bind_frozen(g);
                    let rf = discriminate_var(&b, g.constant(real.clone()), &dplans)?.features;
                    let ff = discriminate_var(&b, x, &dplans)?.features;
                    feature_matching_var(&rf, &ff)
                },
                &fake,
                true,
            );
            record(6, r, &mut stats);
        }
        if open(7, &stats) {
            let r = fd_instance(
                &|g, x| {
                    let b = disc.bind_frozen(g);
                    hinge_g_var(&discriminate_var(&b, x, &dplans)?.logits)
                },
                &fake,
                true,
            );
            record(7, r, &mut stats);
        }
        if open(8, &stats) {
            let model = tiny_model(&tiny_tokenizer(), seed);
            let plans = Plans::<f64>::new(&model.audio, &model.dims, &model.config.disc_windows).unwrap();
            let crop = noise_audio(128, 150 + seed, 0.3);
            let items = vec![prepare_item::<f64>(&model, &crop, &plans, seed, 1, 0).unwrap()];
            let gen = model.generator.cast::<f64>();
            let dstore = model.discriminator.cast::<f64>();
            let param = objective_params[seed as usize % objective_params.len()];
            let point = gen.get(param).unwrap().clone();
            let r = fd_instance(
                &|g, x| {
                    let mut b = gen.bind_frozen(g);
                    b.replace(param, x)?;
                    let d = dstore.bind_frozen(g);
                    Ok(generator_objective_var(&b, &d, &model.dims, &model.config.weights, &items, &plans)
                        .map_err(grad_only)?
                        .0)
                },
                &point,
                true,
            );
            record(8, r, &mut stats);
        }
        if stats.iter().all(|s| s.accepted >= FD_SEEDS) {
            break;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = stats.iter().all(|s| s.accepted == FD_SEEDS && s.worst < FD_TOL) && secs < FD_BUDGET_SECS;
    let detail = TERMS
        .iter()
        .zip(&stats)
        .map(|(n, s)| {
            let skipped = if s.rejected > 0 { format!(" ({} kink draws redrawn)", s.rejected) } else { String::new() };
            format!("{n} {:.1e} over {}{skipped}", s.worst, s.accepted)
        })
        .collect::<Vec<_>>()
        .join(", ");
    Outcome::new("c1", pass, format!("gradient checks, max rel err: {detail}; {secs:.1}s"))
}

fn c2_effective_rank() -> Outcome {
    let mut worst = 0.0f64;
    let mut worst_uniform = 0.0f64;
    for seed in 0..12u64 {
        let n = 8 + (seed as usize * 5) % 40;
        let q = random_orthogonal(n, seed);
        let k = 1 + seed as usize % n.min(9);
        let uniform: Vec<f64> = (0..n).map(|i| if i < k { 2.5 } else { 0.0 }).collect();
        let ratio = 0.5 + 0.04 * seed as f64;
        let geometric: Vec<f64> = (0..n).map(|i| ratio.powi(i as i32)).collect();
        let one_hot: Vec<f64> = (0..n).map(|i| if i == seed as usize % n { 3.0 } else { 0.0 }).collect();
        for (lam, is_uniform) in [(&uniform, true), (&geometric, false), (&one_hot, false)] {
            let eig = eig_sym(&with_spectrum(&q, lam)).unwrap();
            let r = effective_rank(&eig.values).unwrap();
            let err = (r - exp_entropy(lam)).abs();
            worst = worst.max(err);
            if is_uniform {
                worst_uniform = worst_uniform.max((r - k as f64).abs());
            }
        }
    }
    Outcome::new(
        "c2",
        worst < EFFECTIVE_RANK_TOL && worst_uniform <= UNIFORM_RANK_TOL,
        format!("effective rank vs closed form: max err {worst:.1e}; uniform-k max |r-k| {worst_uniform:.1e}"),
    )
}

fn c3_eigensolver() -> Outcome {
    let mut worst = 0.0f64;
    let mut rng = stream(3, &[0xE16]);
    for _ in 0..50 {
        let n = rng.gen_range(2..=64);
        let b: Vec<f64> = (0..n * n).map(|_| gauss(&mut rng)).collect();
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = (0..n).map(|k| b[i * n + k] * b[j * n + k]).sum::<f64>() + if i == j { 1e-3 } else { 0.0 };
            }
        }
        let matrix = SymMatrix::new(n, a.clone()).unwrap();
        let eig = eig_sym(&matrix).unwrap();
        let mut diff = 0.0;
        for i in 0..n {
            for j in 0..n {
                let r: f64 = (0..n).map(|k| eig.vectors[k][i] * eig.values[k] * eig.vectors[k][j]).sum();
                diff += (a[i * n + j] - r).powi(2);
            }
        }
        let rel = diff.sqrt() / matrix.frobenius();
        worst = worst.max(rel);
    }
    Outcome::new("c3", worst < JACOBI_TOL, format!("Jacobi reconstruction, 50 SPD matrices, max residual {worst:.1e}"))
}

fn c4_gram_invariance() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let (t, d) = (5 + seed as usize % 20, 3 + seed as usize % 30);
        let z = random(&[t, d], 500 + seed, 1.0);
        let q = random_orthogonal(d, 600 + seed);
        let mut zq = vec![0.0; t * d];
        for i in 0..t {
            for j in 0..d {
                zq[i * d + j] = (0..d).map(|k| z.data()[i * d + k] * q[k * d + j]).sum();
            }
        }
        let a = FeatureSequence::new(zq, d, 25.0).unwrap();
        let b = FeatureSequence::from_tensor(&z, 25.0);
        worst = worst.max(loss_time_relation(&a, &b).unwrap());
    }
    Outcome::new("c4", worst < GRAM_TOL, format!("time-relation loss under rotation, 20 pairs, max {worst:.1e}"))
}

fn c5_kl() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..5u64 {
        let (t, d) = (2 + seed as usize, 3);
        let mu = random(&[t, d], 700 + seed, 0.8);
        let lv = random(&[t, d], 800 + seed, 0.6);
        let closed = kl_divergence(&FeatureSequence::from_tensor(&mu, 25.0), &FeatureSequence::from_tensor(&lv, 25.0)).unwrap();
        // E_q[log q(z) - log p(z)], summed over dims and averaged over frames
        let mut rng = stream(900 + seed, &[]);
        let mut acc = 0.0;
        for _ in 0..KL_MC_SAMPLES {
            for (m, l) in mu.data().iter().zip(lv.data()) {
                let e = gauss(&mut rng);
                let z = m + (l / 2.0).exp() * e;
                acc += -0.5 * (l + e * e) + 0.5 * z * z;
            }
        }
        let mc = acc / KL_MC_SAMPLES as f64 / t as f64;
        worst = worst.max((mc - closed).abs() / closed);
    }
    let zeros = FeatureSequence::new(vec![0.0; 12], 4, 25.0).unwrap();
    let at_prior = kl_divergence(&zeros, &zeros).unwrap();
    Outcome::new(
        "c5",
        worst < KL_MC_REL_TOL && at_prior == 0.0,
        format!("closed-form KL vs {KL_MC_SAMPLES} samples, 5 fields, max rel err {worst:.2e}; KL(0, 1) = {at_prior}"),
    )
}

fn c6_istft() -> Outcome {
    let x = noise_audio(16_000, 1000, 0.3);
    let mut worst = 0.0f64;
    for &w in &MEL_LOSS_WINDOWS {
        let frames = stft(&x, w, w / 4).unwrap();
        let y = istft(&frames).unwrap();
        let err = x.samples()[w..x.len() - w]
            .iter()
            .zip(&y.samples()[w..x.len() - w])
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        worst = worst.max(err);
    }
    Outcome::new("c6", worst < ISTFT_TOL, format!("STFT/ISTFT round trip, windows {MEL_LOSS_WINDOWS:?}, interior max err {worst:.1e}"))
}

fn c7_sembo() -> Outcome {
    let corpus = synthetic_low_rank(7, 32, 100, 64, 8);
    let cfg = SemboConfig {
        d_high: 64,
        d_low: 16,
        steps: 2000,
        optimizer: OptimizerSettings { beta1: 0.8, beta2: 0.99, warmup_steps: 1000, ..SemboConfig::default().optimizer },
        ..SemboConfig::default()
    };
    let t0 = Instant::now();
    let init = SemboModel::new(&cfg, 11).unwrap();
    let before = evaluate_sembo(&init, &corpus, cfg.lambda_recon).unwrap();
    let run = train_sembo(&corpus, &cfg, 11).unwrap();
    let after = evaluate_sembo(&run.model, &corpus, cfg.lambda_recon).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let (rr, tr) = (after.loss_recon / before.loss_recon, after.loss_tr / before.loss_tr);
    Outcome::new(
        "c7",
        rr <= SEMBO_RECON_RATIO && tr <= SEMBO_TR_RATIO && secs < SEMBO_BUDGET_SECS,
        format!("semantic bottleneck, 2000 steps: L_recon ratio {rr:.4}, L_tr ratio {tr:.4}; {secs:.1}s"),
    )
}

struct Desk {
    config: Config,
    train: Vec<AudioBuffer>,
    sembo: SemboModel,
    _dir: tempfile::TempDir,
    heldout: AudioBuffer,
}

fn desk() -> Desk {
    let config = Config::default();
    let dir = tempfile::tempdir().unwrap();
    make_corpus(config.seed, &config.corpus, dir.path()).unwrap();
    let (_, train) = load_corpus(dir.path(), Some(Split::Train)).unwrap();
    let (_, heldout) = load_corpus(dir.path(), Some(Split::Heldout)).unwrap();
    let frontend = Frontend::new(&config.audio).unwrap();
    let teacher = TeacherEncoder::new(&config.teacher, config.audio.mel_bins, frontend.mel_rate());
    let feats: Vec<_> = train.iter().map(|a| teacher.encode(&frontend.log_mel(a).unwrap()).unwrap()).collect();
    let sembo = train_sembo_with(&feats, &config.sembo, config.seed, |_| {}).unwrap().model;
    Desk { config, train, sembo, _dir: dir, heldout: heldout[0].clone() }
}

fn train_desk(desk: &Desk, weights: LossWeights) -> (TokenizerModel, TrainState, f64) {
    let mut tok = desk.config.tokenizer.clone();
    tok.steps = TOKENIZER_STEPS;
    tok.weights = weights;
    let c = &desk.config;
    let untrained = TokenizerModel::new(&c.audio, &c.teacher, desk.sembo.clone(), &tok, c.seed).unwrap();
    let t0 = Instant::now();
    let state = train_tokenizer(&desk.train, TrainState::new(untrained.clone(), c.seed), &TrainOptions::default(), |_| {})
        .unwrap();
    (untrained, state, t0.elapsed().as_secs_f64())
}

fn c8_tokenizer(desk: &Desk, untrained: &TokenizerModel, state: &TrainState, secs: f64) -> Outcome {
    let at = |step: u64| state.history.iter().find(|r| r.step == step).map(|r| r.losses.mel).unwrap_or(f64::NAN);
    let (early, last) = (at(100), at(TOKENIZER_STEPS));
    let x = &desk.heldout;
    let before = mel_distance(x, &untrained.reconstruct(x).unwrap());
    let after = mel_distance(x, &state.model.reconstruct(x).unwrap());
    let window = |lo: u64, hi: u64| {
        let v: Vec<f64> = state.history.iter().filter(|r| r.step >= lo && r.step <= hi).map(|r| r.losses.mel).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let pass = last <= TOKENIZER_MEL_RATIO * early && after * TOKENIZER_DISTANCE_GAIN <= before && secs < TOKENIZER_BUDGET_SECS;
    Outcome::new(
        "c8",
        pass,
        format!(
            "tokenizer, {TOKENIZER_STEPS} steps: L_mel step 100 {early:.4} final {last:.4} (ratio {:.3}; 100-step means {:.4} -> {:.4}); \
             held-out mel_distance untrained {before:.4} trained {after:.4} (gain {:.2}x); {secs:.0}s",
            last / early,
            window(51, 150),
            window(TOKENIZER_STEPS - 99, TOKENIZER_STEPS),
            before / after
        ),
    )
}

fn c9_probe(desk: &Desk, full: &TokenizerModel, ablated: &TokenizerModel) -> Outcome {
    let ev = &desk.config.eval;
    let data = make_probe_dataset(desk.config.seed, 4, ev.probe_items_per_class).unwrap();
    let opts = ProbeOptions { steps: ev.probe_steps, optimizer: ev.probe_optimizer };
    let probe = |m: &TokenizerModel, kind| {
        let f: Vec<_> = data.items.iter().map(|(a, _)| pooled_features(m, a, kind).unwrap()).collect();
        linear_probe(&f, &data, None, &opts).unwrap()
    };
    let a = probe(full, FeatureKind::Unified);
    let b = probe(ablated, FeatureKind::Unified);
    let fa = probe(full, FeatureKind::Acoustic);
    let ba = probe(ablated, FeatureKind::Acoustic);
    let chance = a.chance;
    Outcome::new(
        "c9",
        a.accuracy - b.accuracy >= PROBE_MARGIN && a.accuracy > chance && b.accuracy > chance,
        format!(
            "4-class probe on z_uni: full {:.3}, without semantic loss {:.3}, chance {chance:.2} (acoustic branch: {:.3} vs {:.3})",
            a.accuracy, b.accuracy, fa.accuracy, ba.accuracy
        ),
    )
}

fn c10_config() -> Outcome {
    let cfg = TokenizerConfig {
        weights: LossWeights { kl: 0.0, ..tiny_tokenizer().weights },
        kl_mode: KlMode::Deterministic,
        ..tiny_tokenizer()
    };
    let ae = tiny_model(&cfg, 1);
    let x = noise_audio(640, 5, 0.3);
    let enc = ae.encode_audio(&x).unwrap();
    let no_head = ae.generator.names().all(|n| !n.starts_with("kl."));
    let identity = enc.latent == enc.z_uni;
    let (z, kl) = ae.kl_bottleneck(&enc.z_uni, Some(&mut stream(0, &[]) as &mut dyn rand::RngCore)).unwrap();
    let ae_ok = ae.dims.topology == Topology::Autoencoder && no_head && identity && z == enc.z_uni && kl == 0.0;
    let vae_when_sampling = tiny_model(&TokenizerConfig { kl_mode: KlMode::Sample, ..cfg.clone() }, 1).dims.topology == Topology::Vae;

    let grid = Config::from_json(r#"{"kl_sweep": [0, 0.0001, 0.001, 0.01]}"#, true).unwrap();
    let kls: Vec<f64> = grid.sweep_configs().iter().map(|c| c.tokenizer.weights.kl).collect();
    let accepted = kls == KL_SWEEP_GRID.to_vec();
    let rejected = ["[0, 0.1]", "[0.002]", "[1e-5, 0.001]", "[-0.001]", "[]"]
        .iter()
        .all(|bad| Config::from_json(&format!(r#"{{"kl_sweep": {bad}}}"#), true).is_err());
    Outcome::new(
        "c10",
        ae_ok && vae_when_sampling && accepted && rejected,
        format!(
            "lambda_kl=0 + deterministic: autoencoder {ae_ok}; sampling keeps the Gaussian head {vae_when_sampling}; \
             sweep grid accepted {accepted}, off-grid rejected {rejected}"
        ),
    )
}

const PIPELINE_CONFIG: &str = r#"{
  "seed": 5,
  "corpus": {"hours": 0.006, "holdout_every": 2},
  "sembo": {"steps": 30, "batch": 2},
  "tokenizer": {"steps": 6, "batch": 1, "crop_seconds": 0.25, "checkpoint_every": 3,
                "optimizer": {"warmup_steps": 2}},
  "eval": {"suites": ["recon", "probe"], "probe_items_per_class": 5, "probe_steps": 40}
}"#;

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_losatok")).args(args).arg("--quiet").output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn pipeline(root: &Path, config: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>, String> {
    let p = |name: &str| root.join(name).to_string_lossy().into_owned();
    let cfg = config.to_string_lossy().into_owned();
    cli(&["--config", &cfg, "make-corpus", "--out", &p("corpus")])?;
    cli(&["--config", &cfg, "train-sembo", "--corpus", &p("corpus"), "--out", &p("sembo.ckpt")])?;
    cli(&[
        "--config", &cfg, "train-tokenizer", "--corpus", &p("corpus"), "--sembo", &p("sembo.ckpt"), "--out",
        &p("tokenizer.ckpt"), "--checkpoint-dir", &p("checkpoints"),
    ])?;
    cli(&["--config", &cfg, "evaluate", "--model", &p("tokenizer.ckpt"), "--corpus", &p("corpus"), "--out", &p("report.json")])?;
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
                files.push((path.strip_prefix(root).unwrap().to_path_buf(), bytes));
            }
        }
    }
    files.sort();
    Ok(files)
}

fn c11_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("config.json");
    std::fs::write(&config, PIPELINE_CONFIG).unwrap();
    let run = |name: &str| {
        let root = tmp.path().join(name);
        std::fs::create_dir_all(&root).unwrap();
        pipeline(&root, &config)
    };
    match (run("a"), run("b")) {
        (Ok(a), Ok(b)) => {
            let differing: Vec<String> =
                a.iter().zip(&b).filter(|(x, y)| x != y).map(|(x, _)| x.0.display().to_string()).collect();
            let same_set = a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.0 == y.0);
            let pass = same_set && differing.is_empty() && a.iter().any(|(p, _)| p.ends_with("report.json"));
            Outcome::new("c11", pass, format!("two CLI pipeline runs: {} files compared, differing {differing:?}", a.len()))
        }
        (Err(e), _) | (_, Err(e)) => Outcome::new("c11", false, format!("pipeline failed: {e}")),
    }
}

struct FakeClock {
    t: std::rc::Rc<std::cell::Cell<f64>>,
}

impl Clock for FakeClock {
    fn now(&mut self) -> f64 {
        self.t.get()
    }
}

fn c12_rtf() -> Outcome {
    let t = std::rc::Rc::new(std::cell::Cell::new(0.0));
    let mut clock = FakeClock { t: t.clone() };
    let audio = vec![AudioBuffer::silence(160_000, 16_000)];
    let mut calls = 0;
    let fixture = measure_rtf_with(&mut clock, &audio, 2, |_| -> Result<(), TokenizerError> {
        calls += 1;
        // warm-up runs take far longer; they must not show up in the result
        t.set(t.get() + if calls <= 2 { 100.0 } else { 2.0 });
        Ok(())
    })
    .unwrap();
    let model = tiny_model(&tiny_tokenizer(), 0);
    let real = measure_rtf(&model, &[noise_audio(4000, 1, 0.2), noise_audio(3000, 2, 0.2)], 1).unwrap();
    let fixture_ok = (fixture.rtf - RTF_FIXTURE).abs() <= RTF_FIXTURE_TOL && fixture.warmup_runs == 2;
    let real_ok = real.rtf.is_finite() && real.rtf > 0.0;
    Outcome::new(
        "c12",
        fixture_ok && real_ok,
        format!("fake clock 2 s / 10 s after warm-up: {:.6}; wall-clock RTF {:.4e}", fixture.rtf, real.rtf),
    )
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |id: &str| filters.is_empty() || filters.iter().any(|f| f == id);
    let mut outcomes = Vec::new();
    let mut report = |o: Outcome| {
        println!("{} {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.id, o.detail);
        outcomes.push(o.pass);
    };
    type Quick = fn() -> Outcome;
    let quick: [(&str, Quick); 8] = [
        ("c2", c2_effective_rank),
        ("c3", c3_eigensolver),
        ("c4", c4_gram_invariance),
        ("c5", c5_kl),
        ("c6", c6_istft),
        ("c10", c10_config),
        ("c12", c12_rtf),
        ("c1", c1_gradients),
    ];
    for (id, f) in quick {
        if wanted(id) {
            report(f());
        }
    }
    if wanted("c7") {
        report(c7_sembo());
    }
    if wanted("c11") {
        report(c11_determinism());
    }
    if wanted("c8") || wanted("c9") {
        let desk = desk();
        let weights = desk.config.tokenizer.weights;
        let (untrained, full, secs) = train_desk(&desk, weights);
        if wanted("c8") {
            report(c8_tokenizer(&desk, &untrained, &full, secs));
        }
        if wanted("c9") {
            let (_, ablated, _) = train_desk(&desk, LossWeights { sem: 0.0, ..weights });
            report(c9_probe(&desk, &full.model, &ablated.model));
        }
    }
    let failed = outcomes.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", outcomes.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
