use lgcaa_core::codec::Latent;
use lgcaa_core::commands::{cmd_eval, cmd_train, load_model};
use lgcaa_core::config::RunConfig;
use lgcaa_core::degradation::{sha256_hex, synth_dataset};
use lgcaa_core::diffusion::{ddpm_sample, forward_noise, train, Model};
use lgcaa_core::losses::LossWeights;
use lgcaa_core::params::ParamRole;
use lgcaa_core::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A model small enough to train for a few steps inside a unit test.
fn tiny() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.dataset.count = 2;
    cfg.dataset.hr_size = 16;
    cfg.model.width = 8;
    cfg.model.time_dim = 8;
    cfg.train.steps = 6;
    cfg.train.eval_size = 2;
    cfg.sample.steps = 4;
    cfg
}

fn dataset(cfg: &RunConfig) -> lgcaa_core::degradation::PairDataset {
    synth_dataset(
        cfg.dataset.count,
        cfg.dataset.hr_size,
        &cfg.degradation,
        cfg.seed,
    )
    .unwrap()
}

fn model(cfg: &RunConfig) -> Model {
    Model::new(&cfg.model, cfg.degradation.scale_factor, cfg.model_seed()).unwrap()
}

#[test]
fn forward_noise_marginal_matches_schedule() {
    let m = model(&tiny());
    let z0 = Latent::new(
        Tensor::new(vec![1, 4, 1, 1], vec![0.3, -0.7, 0.0, 0.9]).unwrap(),
        2,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for t in [10, 250, 900] {
        let ab = m.schedule.alpha_bar(t);
        let draws = 25_000;
        let mut sum = [0.0; 4];
        let mut sq = [0.0; 4];
        for _ in 0..draws {
            let eps = Tensor::randn(&[1, 4, 1, 1], 1.0, &mut rng);
            let zt = forward_noise(&z0, t, &eps, &m.schedule).unwrap();
            for i in 0..4 {
                let v = zt.tensor().data()[i];
                sum[i] += v;
                sq[i] += v * v;
            }
        }
        let n = draws as f64;
        let (mut mean_err, mut var) = (0.0f64, 0.0);
        for i in 0..4 {
            let mean = sum[i] / n;
            mean_err = mean_err.max((mean - ab.sqrt() * z0.tensor().data()[i]).abs());
            var += (sq[i] / n - mean * mean) / 4.0;
        }
        // 10^5 pooled draws
        assert!(
            (var / (1.0 - ab) - 1.0).abs() < 0.02,
            "t={t} var {var} vs {}",
            1.0 - ab
        );
        assert!(
            mean_err < 4.0 * ((1.0 - ab) / n).sqrt(),
            "t={t} mean error {mean_err}"
        );
    }
}

#[test]
fn forward_noise_edge_cases() {
    let m = model(&tiny());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z0 = Latent::new(Tensor::randn(&[1, 4, 2, 2], 1.0, &mut rng), 2).unwrap();
    let zero = Tensor::zeros(&[1, 4, 2, 2]);
    let t = 40;
    let s = m.schedule.alpha_bar(t).sqrt();
    let a = forward_noise(&z0, t, &zero, &m.schedule).unwrap();
    assert!(a.tensor().bit_eq(&z0.tensor().map(|v| s * v)));
    let eps = Tensor::randn(&[1, 4, 2, 2], 1.0, &mut rng);
    let zl = Latent::new(zero, 2).unwrap();
    let b = forward_noise(&zl, t, &eps, &m.schedule).unwrap();
    let n = (1.0 - m.schedule.alpha_bar(t)).sqrt();
    assert!(b.tensor().bit_eq(&eps.map(|v| n * v)));
    assert!(forward_noise(&zl, 0, &eps, &m.schedule).is_err());
    assert!(forward_noise(&zl, 1001, &eps, &m.schedule).is_err());
}

#[test]
fn untrained_sampler_is_finite_and_deterministic() {
    let cfg = tiny();
    let ds = dataset(&cfg);
    let m = model(&cfg);
    let y = ds.lr_batch(&[0, 1]).unwrap();
    for seed in 0..5 {
        let (z, x) = ddpm_sample(&m, &y, 5, seed).unwrap();
        assert!(z.tensor().is_finite());
        assert_eq!(x.dims(), [2, 3, 16, 16]);
        assert!(x.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let (z2, _) = ddpm_sample(&m, &y, 5, seed).unwrap();
        assert!(z.tensor().bit_eq(z2.tensor()));
    }
    assert!(ddpm_sample(&m, &y, 0, 0).is_err());
}

#[test]
fn frozen_backbone_and_features_survive_training() {
    let cfg = tiny();
    let ds = dataset(&cfg);
    let mut m = model(&cfg);
    let before = m.store.clone();
    let tokens = |m: &Model| {
        let t = m.features.encode(&ds.pairs[0].lr);
        let bytes: Vec<String> = t
            .tensor()
            .data()
            .iter()
            .map(|v| format!("{:016x}", v.to_bits()))
            .collect();
        sha256_hex(&bytes.concat())
    };
    let hash = tokens(&m);
    train(&mut m, &ds, &cfg.train_config()).unwrap();
    assert_eq!(tokens(&m), hash);
    let mut moved = 0;
    for id in m.store.ids() {
        let e = m.store.entry(id);
        if e.role == ParamRole::Backbone {
            assert!(e.value.bit_eq(before.get(id)), "{} changed", e.name);
        } else if !e.value.bit_eq(before.get(id)) {
            moved += 1;
        }
    }
    assert!(moved > 0, "no trainable tensor moved");
}

#[test]
fn zero_weights_log_plain_denoising_loss() {
    let mut cfg = tiny();
    cfg.train.loss_weights = LossWeights {
        lambda_l: 0.0,
        lambda_w: 0.0,
    };
    let ds = dataset(&cfg);
    let rep = train(&mut model(&cfg), &ds, &cfg.train_config()).unwrap();
    for row in &rep.log {
        assert_eq!(row.loss_total, row.loss_eps);
    }
}

#[test]
fn training_is_deterministic() {
    let cfg = tiny();
    let ds = dataset(&cfg);
    let a = train(&mut model(&cfg), &ds, &cfg.train_config()).unwrap();
    let b = train(&mut model(&cfg), &ds, &cfg.train_config()).unwrap();
    assert_eq!(a.loss_csv("h"), b.loss_csv("h"));
}

#[test]
fn single_pair_overfits() {
    let mut cfg = RunConfig::default();
    cfg.dataset.count = 1;
    cfg.train.steps = 500;
    cfg.train.eval_size = 8;
    cfg.train.freeze_non_attention = false;
    let ds = dataset(&cfg);
    let rep = train(&mut model(&cfg), &ds, &cfg.train_config()).unwrap();
    let ratio = rep.final_eval.loss_total / rep.initial_eval.loss_total;
    assert!(ratio < 0.2, "final/initial = {ratio}");
}

#[test]
fn evaluation_reads_persisted_training_artifacts() {
    let cfg = tiny();
    let out = tempfile::tempdir().unwrap();
    let run = cmd_train(&cfg, None, out.path(), false).unwrap();
    assert!(run.dir.join("train_log.csv").exists());
    let log = std::fs::read_to_string(run.dir.join("train_log.csv")).unwrap();
    assert!(log.starts_with(&format!("# config_hash={}\n", cfg.hash())));
    assert_eq!(log.lines().count(), 2 + cfg.train.steps);

    let (loaded, m) = load_model(&run.checkpoint).unwrap();
    assert_eq!(loaded, cfg);
    assert_eq!(m.features.seed(), model(&cfg).features.seed());

    let s = cmd_eval(&run.checkpoint, None, out.path(), false).unwrap();
    assert!(s.psnr_db.is_finite() && s.ssim.is_finite() && s.hist_w1.is_finite());
    let csv = std::fs::read_to_string(out.path().join(&cfg.run_name).join("eval").join("eval.csv"))
        .unwrap();
    assert!(csv.starts_with("# config_hash="));

    // a second run into the same place needs --force
    assert!(cmd_train(&cfg, None, out.path(), false).is_err());
    assert!(cmd_train(&cfg, None, out.path(), true).is_ok());
}
