//! Ancestral DDPM sampling over an evenly strided subset of the schedule.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{decode, Latent};
use crate::conditioning::{anchor_latent, embed_condition, feature_input};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::image::Image;
use crate::tensor::Tensor;

use super::denoiser::{denoiser_forward, Model};

/// Retained timesteps `round(k T / steps)` for `k = 1..=steps`, ascending.
pub fn strided_timesteps(total: usize, steps: usize) -> Vec<usize> {
    (1..=steps)
        .map(|k| ((k * total) as f64 / steps as f64).round() as usize)
        .collect()
}

/// Samples latents conditioned on the LR batch `y`, starting from seeded
/// pure noise. Returns the final latent and its decoded image.
pub fn ddpm_sample(model: &Model, y: &Image, steps: usize, seed: u64) -> Result<(Latent, Image)> {
    let total = model.schedule.len();
    if steps == 0 || steps > total {
        return Err(Error::Validation(format!(
            "sampling steps must lie in 1..={total}, got {steps}"
        )));
    }
    y.validate()?;
    let [b, c, h, w] = y.dims();
    if c != 3 {
        return Err(Error::Dimension(format!(
            "LR input must have 3 channels, got {c}"
        )));
    }
    let p = model.config.patch_size;
    let (hh, hw) = (h * model.scale_factor, w * model.scale_factor);
    if hh % p != 0 || hw % p != 0 {
        return Err(Error::Dimension(format!(
            "HR size {hh}x{hw} not divisible by patch size {p}"
        )));
    }
    let shape = [b, model.config.latent_channels(), hh / p, hw / p];

    let c_f = {
        let mut g = Graph::new();
        let bound = model.store.bind_frozen(&mut g);
        let yv = g.constant(y.tensor().clone());
        let cf = embed_condition(&mut g, yv, &model.cond, &bound)?;
        g.value(cf).clone()
    };
    let anchor = anchor_latent(y, model.scale_factor, p)?;
    let c_d = model
        .features
        .encode(&feature_input(y, model.scale_factor))
        .tensor()
        .clone();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Tensor::randn(&shape, 1.0, &mut rng);
    let taus = strided_timesteps(total, steps);
    for k in (0..steps).rev() {
        let t = taus[k];
        let t_prev = if k == 0 { 0 } else { taus[k - 1] };
        let eps_hat = {
            let mut g = Graph::new();
            let bound = model.store.bind_frozen(&mut g);
            let (xv, cd, cf, an) = (
                g.constant(x.clone()),
                g.constant(c_d.clone()),
                g.constant(c_f.clone()),
                g.constant(anchor.clone()),
            );
            let e = denoiser_forward(
                &mut g,
                xv,
                &vec![t; b],
                cd,
                cf,
                an,
                &model.denoiser,
                &bound,
                &model.config.attention,
                true,
            )?;
            g.value(e).clone()
        };
        let ab = model.schedule.alpha_bar(t);
        let ab_prev = model.schedule.alpha_bar(t_prev);
        let beta = 1.0 - ab / ab_prev;
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
        let noise = (k > 0).then(|| Tensor::randn(&shape, 1.0, &mut rng));
        let xd = x.data_mut();
        for (i, v) in xd.iter_mut().enumerate() {
            let x0 = ((*v - (1.0 - ab).sqrt() * eps_hat.data()[i]) / ab.sqrt()).clamp(-1.0, 1.0);
            let mut next = c0 * x0 + ct * *v;
            if let Some(n) = &noise {
                next += sigma * n.data()[i];
            }
            *v = next;
        }
        if !x.is_finite() {
            return Err(Error::NonFinite {
                stage: format!("sampler step {t}"),
            });
        }
    }
    let z = Latent::from_sampler(x, p)?;
    let img = decode(&z)?;
    Ok((z, img))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strides_are_distinct_and_end_at_total() {
        for steps in [1, 5, 30, 40, 50, 999, 1000] {
            let t = strided_timesteps(1000, steps);
            assert_eq!(t.len(), steps);
            assert_eq!(*t.last().unwrap(), 1000);
            assert!(t[0] >= 1);
            assert!(t.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
