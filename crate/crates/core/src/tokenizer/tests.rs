use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::grad::{grad_check, GradError};
use crate::rng::stream;

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

fn tiny_audio() -> AudioConfig {
    AudioConfig { sample_rate: 16_000, window_size: 64, hop: 4, mel_bins: 8 }
}

fn tiny_config() -> TokenizerConfig {
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
        checkpoint_every: 3,
        optimizer: OptimizerSettings { warmup_steps: 2, base_lr: 1e-3, ..OptimizerSettings::default() },
        ..TokenizerConfig::default()
    }
}

fn tiny_model(config: &TokenizerConfig, seed: u64) -> TokenizerModel {
    let teacher = TeacherConfig { seed: 3, d_high: 8 };
    let sembo_cfg = crate::sembo::SemboConfig { d_high: 8, hidden: 8, d_low: config.d, ..Default::default() };
    let sembo = SemboModel::new(&sembo_cfg, seed).unwrap();
    TokenizerModel::new(&tiny_audio(), &teacher, sembo, config, seed).unwrap()
}

fn noise_audio(len: usize, seed: u64, amp: f64) -> AudioBuffer {
    let mut rng = stream(seed, &[77]);
    let x = (0..len).map(|_| amp * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
    AudioBuffer::new(x, 16_000).unwrap()
}

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = stream(seed, &[78]);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect())
        .unwrap()
}

fn grad_only(e: TokenizerError) -> GradError {
    match e {
        TokenizerError::Grad(g) => g,
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn desk_shapes() {
    let cfg = crate::config::Config::default();
    let sembo = SemboModel::new(&cfg.sembo, 0).unwrap();
    let model = TokenizerModel::new(&cfg.audio, &cfg.teacher, sembo, &cfg.tokenizer, 0).unwrap();
    let x = noise_audio(16_000, 1, 0.1);
    let enc = model.encode_audio(&x).unwrap();
    assert_eq!((enc.z_a_high.num_frames(), enc.z_a_high.dim()), (26, 64));
    assert_eq!((enc.z_a_low.num_frames(), enc.z_a_low.dim()), (26, 16));
    assert_eq!((enc.z_s_high.num_frames(), enc.z_s_high.dim()), (26, 64));
    assert_eq!((enc.z_uni.num_frames(), enc.z_uni.dim()), (26, 16));
    assert!((enc.z_uni.frame_rate() - 25.0).abs() < 1e-12);
    assert_eq!(model.decode(&enc.latent).unwrap().len(), 26 * 640);
    assert_eq!(model.reconstruct(&x).unwrap().len(), 16_000);
}

#[test]
fn unify_is_a_sum() {
    let a = FeatureSequence::new(vec![1.0, 2.0, 3.0, 4.0], 2, 25.0).unwrap();
    let b = FeatureSequence::new(vec![0.5, -2.0, 1.0, 0.0], 2, 25.0).unwrap();
    assert_eq!(unify(&a, &b).unwrap().values(), &[1.5, 0.0, 4.0, 4.0]);
    let c = FeatureSequence::new(vec![1.0; 3], 3, 25.0).unwrap();
    assert!(matches!(unify(&a, &c), Err(TokenizerError::ShapeMismatch { .. })));
}

#[test]
fn autoencoder_topology_has_no_gaussian_head() {
    let cfg = TokenizerConfig {
        weights: LossWeights { kl: 0.0, ..LossWeights::default() },
        kl_mode: KlMode::Deterministic,
        ..tiny_config()
    };
    let model = tiny_model(&cfg, 1);
    assert_eq!(model.dims.topology, Topology::Autoencoder);
    assert!(!model.generator.contains("kl.mu.w"));
    let z = FeatureSequence::new(random(&[5, 4], 2, 1.0).into_data(), 4, 25.0).unwrap();
    let (out, kl) = model.kl_bottleneck(&z, None).unwrap();
    assert_eq!(out, z);
    assert_eq!(kl, 0.0);
    let vae = tiny_model(&tiny_config(), 1);
    assert!(vae.generator.contains("kl.mu.w") && vae.generator.contains("kl.logvar.w"));
}

#[test]
fn kl_of_standard_normal_is_zero() {
    let zeros = FeatureSequence::new(vec![0.0; 12], 4, 25.0).unwrap();
    assert_eq!(kl_divergence(&zeros, &zeros).unwrap(), 0.0);
}

#[test]
fn closed_form_kl_matches_monte_carlo() {
    let mu = random(&[3, 2], 5, 0.8);
    let lv = random(&[3, 2], 6, 0.5);
    let to_seq = |t: &Tensor<f64>| FeatureSequence::from_tensor(t, 25.0);
    let closed = kl_divergence(&to_seq(&mu), &to_seq(&lv)).unwrap();
    // E_q[log q - log p], summed over dims and averaged over frames
    let mut rng = stream(9, &[]);
    let samples = 200_000;
    let mut acc = 0.0;
    for _ in 0..samples {
        for (m, l) in mu.data().iter().zip(lv.data()) {
            let e: f64 = StandardNormal.sample(&mut rng);
            let z = m + (l / 2.0).exp() * e;
            acc += -0.5 * (l + e * e) + 0.5 * z * z;
        }
    }
    let mc = acc / samples as f64 / 3.0;
    assert!((mc - closed).abs() / closed < 0.02, "mc {mc} closed {closed}");
}

#[test]
fn semantic_losses_vanish_on_targets() {
    let h = FeatureSequence::from_tensor(&random(&[5, 8], 1, 1.0), 25.0);
    let l = FeatureSequence::from_tensor(&random(&[5, 4], 2, 1.0), 25.0);
    assert_eq!(loss_semantic(&h, &l, &h, &l).unwrap(), (0.0, 0.0));
    let shifted = FeatureSequence::new(h.values().iter().map(|v| v + 2.0).collect(), 8, 25.0).unwrap();
    let (lh, ll) = loss_semantic(&shifted, &l, &h, &l).unwrap();
    assert!((lh - 2.0).abs() < 1e-12 && ll == 0.0);
}

#[test]
fn semantic_targets_get_no_gradient() {
    let g = Graph::<f64>::new();
    let a = g.param(random(&[5, 8], 1, 1.0));
    let s = g.param(random(&[5, 8], 2, 1.0));
    let b = g.param(random(&[5, 4], 3, 1.0));
    let t = g.param(random(&[5, 4], 4, 1.0));
    let (lh, ll) = losses::semantic_var(a, b, s, t).unwrap();
    let grads = g.backward(lh.add(ll).unwrap()).unwrap();
    assert!(grads.get_or_zeros(s).data().iter().all(|v| *v == 0.0));
    assert!(grads.get_or_zeros(t).data().iter().all(|v| *v == 0.0));
    assert!(grads.get_or_zeros(a).data().iter().any(|v| *v != 0.0));
}

#[test]
fn mel_loss_is_zero_on_identity_and_pads() {
    let x = noise_audio(3000, 4, 0.2);
    assert_eq!(loss_mel_multiscale(&x, &x).unwrap(), 0.0);
    let y = x.fit_to(2500);
    assert_eq!(loss_mel_multiscale(&x, &y).unwrap(), loss_mel_multiscale(&x, &y.fit_to(3000)).unwrap());
    assert!(loss_mel_multiscale(&x, &noise_audio(3000, 5, 0.2)).unwrap() > 0.0);
}

#[test]
fn adversarial_losses() {
    let real = vec![Tensor::vector(vec![2.0, 0.5]), Tensor::vector(vec![1.0])];
    let fake = vec![Tensor::vector(vec![-2.0, 0.0]), Tensor::vector(vec![-0.5])];
    let (d, g) = loss_adversarial(&real, &fake).unwrap();
    // res 0: relu(1-r) = [0, 0.5] -> 0.25; relu(1+f) = [0, 1] -> 0.5. res 1: 0 + 0.5
    assert!((d - (0.75 + 0.5) / 2.0).abs() < 1e-12);
    assert!((g - (1.0 + 0.5) / 2.0).abs() < 1e-12);
    let feats = vec![vec![Tensor::vector(vec![1.0, -1.0])]];
    assert_eq!(loss_feature_matching(&feats, &feats).unwrap(), 0.0);
    let other = vec![vec![Tensor::vector(vec![0.0, -1.0])]];
    assert!((loss_feature_matching(&feats, &other).unwrap() - 0.5).abs() < 1e-6);
}

#[test]
fn fd_semantic_terms() {
    for seed in 0..2 {
        let s_high = random(&[6, 8], 100 + seed, 1.0);
        let s_low = random(&[6, 4], 200 + seed, 1.0);
        let low = random(&[6, 4], 300 + seed, 1.0);
        let r = grad_check(
            |g, x| Ok(losses::semantic_var(x, g.constant(low.clone()), g.constant(s_high.clone()), g.constant(s_low.clone()))?.0),
            &random(&[6, 8], seed, 1.0),
            FD_STEP,
        )
        .unwrap();
        assert!(r.max_rel_error < FD_TOL, "L_H {r:?}");
        let r = grad_check(
            |g, x| Ok(losses::semantic_var(g.constant(s_high.clone()), x, g.constant(s_high.clone()), g.constant(s_low.clone()))?.1),
            &low,
            FD_STEP,
        )
        .unwrap();
        assert!(r.max_rel_error < FD_TOL, "L_L {r:?}");
    }
}

#[test]
fn fd_kl() {
    let mu = random(&[4, 3], 1, 1.0);
    let lv = random(&[4, 3], 2, 0.7);
    let r = grad_check(|g, x| losses::kl_var(x, g.constant(lv.clone())), &mu, FD_STEP).unwrap();
    assert!(r.max_rel_error < FD_TOL, "{r:?}");
    let r = grad_check(|g, x| losses::kl_var(g.constant(mu.clone()), x), &lv, FD_STEP).unwrap();
    assert!(r.max_rel_error < FD_TOL, "{r:?}");
}

#[test]
fn fd_mel_loss() {
    let scales = losses::mel_scales::<f64>(16_000);
    let target = noise_audio(400, 8, 0.3);
    let targets: Vec<_> = scales.iter().map(|s| losses::log_mel_plain(s, target.samples())).collect();
    let x = Tensor::vector(noise_audio(400, 9, 0.3).into_samples());
    let r = grad_check(|_, v| losses::mel_multiscale_var(v, &targets, &scales), &x, FD_STEP).unwrap();
    assert!(r.max_rel_error < FD_TOL, "{r:?}");
}

fn tiny_disc() -> (ParamStore<f64>, Vec<Arc<StftPlan<f64>>>) {
    let store = init_discriminator(2, 2, &mut stream(4, &[])).cast::<f64>();
    (store, disc_plans(&[32, 64]))
}

#[test]
fn fd_adversarial_and_feature_matching() {
    let (store, plans) = tiny_disc();
    let real = Tensor::vector(noise_audio(160, 10, 0.3).into_samples());
    let fake = Tensor::vector(noise_audio(160, 11, 0.3).into_samples());
    let r = grad_check(
        |g, x| {
            let b = store.bind_frozen(g);
            losses::hinge_g_var(&discriminate_var(&b, x, &plans)?.logits)
        },
        &fake,
        FD_STEP,
    )
    .unwrap();
    assert!(r.max_rel_error < FD_TOL, "g_loss {r:?}");
    let r = grad_check(
        |g, x| {
            let b = store.bind_frozen(g);
            let rf = discriminate_var(&b, g.constant(real.clone()), &plans)?.features;
            let ff = discriminate_var(&b, x, &plans)?.features;
            losses::feature_matching_var(&rf, &ff)
        },
        &fake,
        FD_STEP,
    )
    .unwrap();
    assert!(r.max_rel_error < FD_TOL, "L_fm {r:?}");
}

fn objective_check(model: &TokenizerModel, param: &str, seed: u64) -> f64 {
    let plans = Plans::<f64>::new(&model.audio, &model.dims, &model.config.disc_windows).unwrap();
    let crop = noise_audio(128, seed, 0.3);
    let items = vec![prepare_item::<f64>(model, &crop, &plans, seed, 1, 0).unwrap()];
    let gen = model.generator.cast::<f64>();
    let disc = model.discriminator.cast::<f64>();
    let point = gen.get(param).unwrap().clone();
    let r = grad_check(
        |g, x| {
            let mut b = gen.bind_frozen(g);
            b.replace(param, x)?;
            let d = disc.bind_frozen(g);
            Ok(generator_objective_var(&b, &d, &model.dims, &model.config.weights, &items, &plans).map_err(grad_only)?.0)
        },
        &point,
        FD_STEP,
    )
    .unwrap();
    r.max_rel_error
}

#[test]
fn fd_full_objective() {
    let model = tiny_model(&tiny_config(), 2);
    for name in ["decoder.head.w", "encoder.patch.w", "kl.logvar.w"] {
        let err = objective_check(&model, name, 12);
        assert!(err < FD_TOL, "{name}: {err}");
    }
}

#[test]
fn zero_weights_give_zero_objective() {
    let cfg = TokenizerConfig {
        weights: LossWeights { mel: 0.0, sem: 0.0, kl: 0.0, fm: 0.0, adv: 0.0 },
        ..tiny_config()
    };
    let model = tiny_model(&cfg, 3);
    let b = model.total_objective(&[noise_audio(128, 1, 0.3)], 0).unwrap();
    assert_eq!(b.generator, 0.0);
    assert!(b.mel > 0.0);
}

#[test]
fn breakdown_is_weighted_sum() {
    let model = tiny_model(&tiny_config(), 4);
    let b = model.total_objective(&[noise_audio(128, 1, 0.3), noise_audio(128, 2, 0.3)], 0).unwrap();
    let w = model.config.weights;
    let expect = w.mel * b.mel + w.sem * (b.l_h + b.l_l) + w.kl * b.kl + w.fm * b.fm + w.adv * b.adv;
    assert!((b.generator - expect).abs() < 1e-9 * expect.abs().max(1.0));
    assert!(b.d_loss.is_finite() && b.kl > 0.0);
}

fn tiny_corpus() -> Vec<AudioBuffer> {
    (0..3).map(|i| noise_audio(400, 50 + i, 0.3)).collect()
}

#[test]
fn zero_steps_keep_initialization() {
    let cfg = TokenizerConfig { steps: 0, ..tiny_config() };
    let model = tiny_model(&cfg, 5);
    let out = train_tokenizer(&tiny_corpus(), TrainState::new(model.clone(), 5), &TrainOptions::default(), |_| {}).unwrap();
    assert_eq!(out.model.generator, model.generator);
    assert!(out.history.is_empty());
}

#[test]
fn empty_corpus_is_rejected() {
    let model = tiny_model(&tiny_config(), 5);
    let r = train_tokenizer(&[], TrainState::new(model, 5), &TrainOptions::default(), |_| {});
    assert!(matches!(r, Err(TokenizerError::EmptyCorpus)));
}

#[test]
fn resume_is_bit_identical() {
    let corpus = tiny_corpus();
    let model = tiny_model(&tiny_config(), 6);
    let full = train_tokenizer(&corpus, TrainState::new(model.clone(), 6), &TrainOptions::default(), |_| {}).unwrap();
    assert_eq!(full.step, 6);
    assert!(full.history.iter().all(|r| r.losses.non_finite().is_none()));

    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions { checkpoint_dir: Some(dir.path().to_path_buf()), stop_after: Some(3) };
    let half = train_tokenizer(&corpus, TrainState::new(model, 6), &opts, |_| {}).unwrap();
    let ck = crate::checkpoint::Checkpoint::load(dir.path().join("step_000003.ckpt")).unwrap();
    assert_eq!(ck.to_bytes(), half.to_checkpoint().to_bytes());
    let resumed = load_tokenizer(&ck).unwrap();
    assert_eq!(resumed.config_echo(), half.config_echo());
    let finished = train_tokenizer(&corpus, resumed, &TrainOptions::default(), |_| {}).unwrap();
    assert_eq!(finished.to_checkpoint().to_bytes(), full.to_checkpoint().to_bytes());
    assert_eq!(full.history, finished.history);
}

#[test]
fn training_changes_both_networks() {
    let model = tiny_model(&tiny_config(), 7);
    let out = train_tokenizer(&tiny_corpus(), TrainState::new(model.clone(), 7), &TrainOptions::default(), |_| {}).unwrap();
    assert_ne!(out.model.generator, model.generator);
    assert_ne!(out.model.discriminator, model.discriminator);
    assert_eq!(out.model.sembo, model.sembo);
    assert_eq!(out.opt_g.step_count, 6);
    assert!(history_csv(&out.history).starts_with(HISTORY_HEADER));
}

#[test]
fn rate_mismatch_is_reported() {
    let model = tiny_model(&tiny_config(), 8);
    let x = AudioBuffer::new(vec![0.0; 400], 8000).unwrap();
    assert!(matches!(model.encode_audio(&x), Err(TokenizerError::RateMismatch { .. })));
}
