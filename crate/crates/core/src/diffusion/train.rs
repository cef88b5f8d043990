//! Training loop for the combined denoising / perceptual / distribution objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::codec::encode;
use crate::conditioning::{anchor_latent, cond_to_rgb, embed_condition, feature_input};
use crate::degradation::{mix_seed, PairDataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::image::Image;
use crate::losses::{
    denoising_loss, distribution_loss, perceptual_loss, total_loss_node, LossWeights,
};
use crate::params::{Adam, AdamConfig, ParamStore};
use crate::tensor::Tensor;

use super::denoiser::{denoiser_forward, Model};
use super::schedule::noise_tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub loss_weights: LossWeights,
    /// Drawn from the run seed rather than the config file.
    #[serde(skip)]
    pub seed: u64,
    pub freeze_non_attention: bool,
    /// Number of fixed (pair, timestep, noise) draws used to measure the
    /// loss before and after training.
    pub eval_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 2,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            loss_weights: LossWeights::default(),
            seed: 0,
            freeze_non_attention: true,
            eval_size: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 || self.eval_size == 0 {
            return Err(Error::Validation(
                "steps, batch and eval_size must be >= 1".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Validation(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Validation("Adam betas must lie in [0, 1)".into()));
        }
        self.loss_weights.validate()
    }
}

/// Loss components of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub loss_eps: f64,
    pub loss_perceptual: f64,
    pub loss_distribution: f64,
    pub loss_total: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,loss_eps,loss_perceptual,loss_distribution,loss_total";

impl LossRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e}",
            self.step, self.loss_eps, self.loss_perceptual, self.loss_distribution, self.loss_total
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<LossRow>,
    /// Mean losses on the fixed evaluation draws before the first update.
    pub initial_eval: LossRow,
    /// The same after the last update.
    pub final_eval: LossRow,
}

impl TrainReport {
    pub fn loss_csv(&self, config_hash: &str) -> String {
        let mut s = format!("# config_hash={config_hash}\n{LOSS_CSV_HEADER}\n");
        for row in &self.log {
            s.push_str(&row.csv());
            s.push('\n');
        }
        s
    }
}

/// Per-pair tensors that never change during training.
pub(crate) struct Prepared {
    pub z0: Vec<Tensor>,
    pub lr: Vec<Tensor>,
    pub hr: Vec<Tensor>,
    pub tokens: Vec<Tensor>,
    pub anchor: Vec<Tensor>,
}

pub(crate) fn prepare(model: &Model, ds: &PairDataset) -> Result<Prepared> {
    if ds.is_empty() {
        return Err(Error::Validation("training dataset is empty".into()));
    }
    if ds.scale_factor() != model.scale_factor {
        return Err(Error::Dimension(format!(
            "dataset scale factor {} differs from model scale factor {}",
            ds.scale_factor(),
            model.scale_factor
        )));
    }
    let mut p = Prepared {
        z0: vec![],
        lr: vec![],
        hr: vec![],
        tokens: vec![],
        anchor: vec![],
    };
    for pair in &ds.pairs {
        p.z0.push(encode(&pair.hr, model.config.patch_size)?.into_tensor());
        p.tokens.push(
            model
                .features
                .encode(&feature_input(&pair.lr, model.scale_factor))
                .tensor()
                .clone(),
        );
        p.anchor.push(anchor_latent(
            &pair.lr,
            model.scale_factor,
            model.config.patch_size,
        )?);
        p.lr.push(pair.lr.tensor().clone());
        p.hr.push(pair.hr.tensor().clone());
    }
    Ok(p)
}

struct Batch {
    z0: Tensor,
    lr: Tensor,
    hr: Tensor,
    tokens: Tensor,
    anchor: Tensor,
    t: Vec<usize>,
    eps: Tensor,
}

fn pick(v: &[Tensor], idx: &[usize]) -> Result<Tensor> {
    Tensor::stack_batch(&idx.iter().map(|&i| v[i].clone()).collect::<Vec<_>>())
}

fn draw_batch(
    p: &Prepared,
    idx: Vec<usize>,
    timesteps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let (z0, lr, hr) = (pick(&p.z0, &idx)?, pick(&p.lr, &idx)?, pick(&p.hr, &idx)?);
    let (tokens, anchor) = (pick(&p.tokens, &idx)?, pick(&p.anchor, &idx)?);
    let t = idx.iter().map(|_| rng.gen_range(1..=timesteps)).collect();
    let eps = Tensor::randn(z0.shape(), 1.0, rng);
    Ok(Batch {
        z0,
        lr,
        hr,
        tokens,
        anchor,
        t,
        eps,
    })
}

/// One forward pass of the full objective. Returns the graph, loss vars and
/// the bound parameters.
fn objective(
    model: &Model,
    batch: &Batch,
    w: &LossWeights,
    freeze: bool,
    with_grad: bool,
) -> Result<(LossRow, Option<Vec<(crate::params::ParamId, Tensor)>>)> {
    let mut g = Graph::new();
    let bound = model
        .store
        .bind(&mut g, |e| with_grad && Model::is_trainable(e.role, freeze));
    let n = batch.t.len();
    let zt: Vec<Tensor> = (0..n)
        .map(|i| {
            noise_tensor(
                &batch.z0.select_batch(i),
                batch.t[i],
                &batch.eps.select_batch(i),
                &model.schedule,
            )
        })
        .collect();
    let zt = g.constant(Tensor::stack_batch(&zt)?);
    let y = g.constant(batch.lr.clone());
    let cd = g.constant(batch.tokens.clone());
    let cf = embed_condition(&mut g, y, &model.cond, &bound)?;
    let anchor = g.constant(batch.anchor.clone());
    let eps_hat = denoiser_forward(
        &mut g,
        zt,
        &batch.t,
        cd,
        cf,
        anchor,
        &model.denoiser,
        &bound,
        &model.config.attention,
        true,
    )?;
    let eps = g.constant(batch.eps.clone());
    let l_eps = denoising_loss(&mut g, eps_hat, eps)?;
    let x_rgb = cond_to_rgb(&mut g, cf, &model.cond, &bound)?;
    let hr = g.constant(batch.hr.clone());
    let l_perc = perceptual_loss(&mut g, hr, x_rgb, &model.perceptual)?;
    let l_dist = distribution_loss(&mut g, hr, x_rgb)?;
    let total = total_loss_node(&mut g, l_eps, l_perc, l_dist, w);
    let row = LossRow {
        step: 0,
        loss_eps: g.value(l_eps).item(),
        loss_perceptual: g.value(l_perc).item(),
        loss_distribution: g.value(l_dist).item(),
        loss_total: g.value(total).item(),
    };
    let grads = if with_grad && row.loss_total.is_finite() {
        let mut gr = g.backward(total);
        Some(bound.collect(&mut gr))
    } else {
        None
    };
    Ok((row, grads))
}

/// Mean losses over fixed evaluation draws, without gradients.
fn evaluate(model: &Model, p: &Prepared, cfg: &TrainConfig) -> Result<LossRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xE7A1));
    let n = p.z0.len();
    let mut acc = LossRow {
        step: 0,
        loss_eps: 0.0,
        loss_perceptual: 0.0,
        loss_distribution: 0.0,
        loss_total: 0.0,
    };
    let chunk = 4;
    let mut done = 0;
    while done < cfg.eval_size {
        let m = chunk.min(cfg.eval_size - done);
        let idx: Vec<usize> = (done..done + m).map(|i| i % n).collect();
        let batch = draw_batch(p, idx, model.schedule.len(), &mut rng)?;
        let (row, _) = objective(
            model,
            &batch,
            &cfg.loss_weights,
            cfg.freeze_non_attention,
            false,
        )?;
        let f = m as f64 / cfg.eval_size as f64;
        acc.loss_eps += f * row.loss_eps;
        acc.loss_perceptual += f * row.loss_perceptual;
        acc.loss_distribution += f * row.loss_distribution;
        acc.loss_total += f * row.loss_total;
        done += m;
    }
    Ok(acc)
}

/// Trains `model` in place. On a non-finite loss, or weights too large to
/// checkpoint, the parameters from the last good step come back inside [`Error::Diverged`]; that checkpoint
/// carries no config text, callers attach their own.
pub fn train(model: &mut Model, ds: &PairDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let p = prepare(model, ds)?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            ..Default::default()
        },
        &model.store,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x7EA1));
    let mut initial_eval = evaluate(model, &p, cfg)?;
    initial_eval.step = 0;
    let mut log = Vec::with_capacity(cfg.steps);
    let mut last_good: Option<ParamStore> = None;
    for step in 1..=cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch)
            .map(|_| rng.gen_range(0..p.z0.len()))
            .collect();
        let batch = draw_batch(&p, idx, model.schedule.len(), &mut rng)?;
        let (mut row, grads) = match objective(
            model,
            &batch,
            &cfg.loss_weights,
            cfg.freeze_non_attention,
            true,
        ) {
            Ok(r) => r,
            // a blown-up forward pass counts as a NaN loss
            Err(Error::NonFinite { stage }) => {
                log::warn!("step {step}: non-finite values at {stage}");
                let nan = LossRow {
                    step,
                    loss_eps: f64::NAN,
                    loss_perceptual: f64::NAN,
                    loss_distribution: f64::NAN,
                    loss_total: f64::NAN,
                };
                (nan, None)
            }
            Err(e) => return Err(e),
        };
        row.step = step;
        // checkpoints hold f32, so weights past its range count as diverged too
        let storable = model.store.entries().iter().all(|e| {
            e.value
                .data()
                .iter()
                .all(|v| v.is_finite() && v.abs() <= f32::MAX as f64)
        });
        if !row.loss_total.is_finite() || !storable {
            let store = last_good.as_ref().unwrap_or(&model.store);
            return Err(Error::Diverged {
                step,
                loss: row.loss_total,
                last_good: Box::new(Checkpoint::capture(
                    store,
                    String::new(),
                    model.config.feature_seed,
                )),
            });
        }
        log::debug!("step {step}: total {:.5}", row.loss_total);
        log.push(row);
        last_good = Some(model.store.clone());
        adam.step(&mut model.store, grads.as_deref().unwrap_or_default());
    }
    let mut final_eval = evaluate(model, &p, cfg)?;
    final_eval.step = cfg.steps;
    Ok(TrainReport {
        log,
        initial_eval,
        final_eval,
    })
}

/// LR images of a dataset as one batch.
pub fn lr_batch(ds: &PairDataset) -> Result<Image> {
    ds.lr_batch(&(0..ds.len()).collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degradation::{synth_dataset, DegradationConfig};
    use crate::diffusion::denoiser::ModelConfig;
    use crate::lgcaa::AttentionConfig;
    use crate::params::ParamRole;

    fn tiny() -> (Model, PairDataset) {
        let cfg = ModelConfig {
            width: 8,
            time_dim: 8,
            attention: AttentionConfig {
                num_heads: 1,
                ..Default::default()
            },
            ..Default::default()
        };
        let ds = synth_dataset(2, 16, &DegradationConfig::default(), 3).unwrap();
        (Model::new(&cfg, 4, 1).unwrap(), ds)
    }

    fn quick(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            lr: 1e-3,
            eval_size: 2,
            ..Default::default()
        }
    }

    #[test]
    fn freezing_keeps_backbone_bit_identical() {
        let (mut m, ds) = tiny();
        let before = m.store.clone();
        train(&mut m, &ds, &quick(3)).unwrap();
        let mut moved = 0;
        for id in m.store.ids() {
            let (a, b) = (before.get(id), m.store.get(id));
            if m.store.entry(id).role == ParamRole::Backbone {
                assert!(a.bit_eq(b), "{}", m.store.entry(id).name);
            } else if !a.bit_eq(b) {
                moved += 1;
            }
        }
        assert!(moved > 0);
    }

    #[test]
    fn zero_weights_reduce_total_to_eps_loss() {
        let (mut m, ds) = tiny();
        let cfg = TrainConfig {
            loss_weights: LossWeights {
                lambda_l: 0.0,
                lambda_w: 0.0,
            },
            ..quick(3)
        };
        let r = train(&mut m, &ds, &cfg).unwrap();
        assert!(r.log.iter().all(|row| row.loss_total == row.loss_eps));
    }

    #[test]
    fn training_is_deterministic() {
        let (mut a, ds) = tiny();
        let (mut b, _) = tiny();
        let ra = train(&mut a, &ds, &quick(2)).unwrap();
        let rb = train(&mut b, &ds, &quick(2)).unwrap();
        assert_eq!(ra.loss_csv("x"), rb.loss_csv("x"));
    }

    #[test]
    fn diverged_run_returns_last_good_parameters() {
        let (mut m, ds) = tiny();
        // an absurd step size blows the parameters up within a few updates
        let cfg = TrainConfig {
            lr: 1e150,
            ..quick(50)
        };
        match train(&mut m, &ds, &cfg) {
            Err(Error::Diverged {
                step, last_good, ..
            }) => {
                assert!(step > 1);
                assert!(last_good.tensors.iter().all(|(_, t)| t.is_finite()));
            }
            other => panic!("expected divergence, got {:?}", other.map(|r| r.log.len())),
        }
    }
}
