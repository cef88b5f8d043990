//! Denoising, perceptual and distribution losses and their weighted sum.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::params::lecun;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the perceptual term.
    pub lambda_l: f64,
    /// Weight of the distribution term.
    pub lambda_w: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_l: 2.0,
            lambda_w: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_l", self.lambda_l), ("lambda_w", self.lambda_w)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Validation(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Frozen seeded convolutional feature stack standing in for a pretrained
/// perceptual network. Level 1 keeps resolution, levels 2 and 3 halve it.
#[derive(Clone, Debug)]
pub struct PerceptualExtractor {
    seed: u64,
    tap: usize,
    layers: Vec<(Tensor, Tensor, usize)>,
}

pub const DEFAULT_TAP: usize = 2;

impl PerceptualExtractor {
    pub fn new(seed: u64) -> Self {
        Self::with_tap(seed, DEFAULT_TAP)
    }

    pub fn with_tap(seed: u64, tap: usize) -> Self {
        assert!((1..=3).contains(&tap), "tap level must be 1..=3");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = [(3, 8, 1), (8, 16, 2), (16, 32, 2)];
        let layers = spec
            .iter()
            .map(|&(cin, cout, stride)| {
                let w = lecun(&[cout, cin, 3, 3], cin * 9, 1.5, &mut rng);
                let b = Tensor::randn(&[cout], 0.1, &mut rng);
                (w, b, stride)
            })
            .collect();
        Self { seed, tap, layers }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn tap(&self) -> usize {
        self.tap
    }

    /// Weights `(w, b, stride)` of every level.
    pub fn layers(&self) -> &[(Tensor, Tensor, usize)] {
        &self.layers
    }

    /// Features at the tap level.
    pub fn features(&self, g: &mut Graph, x: Var) -> Var {
        let mut h = x;
        for (w, b, stride) in &self.layers[..self.tap] {
            let (w, b) = (g.constant(w.clone()), g.constant(b.clone()));
            h = g.conv2d(h, w, Some(b), *stride, 1);
            h = g.tanh(h);
        }
        h
    }
}

fn same_shape(g: &Graph, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

/// Mean squared error between predicted and true noise.
pub fn denoising_loss(g: &mut Graph, eps_hat: Var, eps: Var) -> Result<Var> {
    same_shape(g, eps_hat, eps, "denoising loss")?;
    let d = g.sub(eps_hat, eps);
    let d = g.square(d);
    Ok(g.mean(d))
}

/// Mean squared distance between tap features. `x` is the target; only
/// `x_rgb` should carry gradient.
pub fn perceptual_loss(
    g: &mut Graph,
    x: Var,
    x_rgb: Var,
    phi: &PerceptualExtractor,
) -> Result<Var> {
    same_shape(g, x, x_rgb, "perceptual loss")?;
    let fx = phi.features(g, x);
    let fr = phi.features(g, x_rgb);
    let d = g.sub(fr, fx);
    let d = g.square(d);
    Ok(g.mean(d))
}

/// Mean absolute per-pixel difference.
pub fn distribution_loss(g: &mut Graph, x: Var, x_rgb: Var) -> Result<Var> {
    same_shape(g, x, x_rgb, "distribution loss")?;
    let d = g.sub(x_rgb, x);
    let d = g.abs(d);
    Ok(g.mean(d))
}

pub fn total_loss(l_eps: f64, l_perc: f64, l_dist: f64, w: &LossWeights) -> f64 {
    l_eps + w.lambda_l * l_perc + w.lambda_w * l_dist
}

/// [`total_loss`] on the tape.
pub fn total_loss_node(
    g: &mut Graph,
    l_eps: Var,
    l_perc: Var,
    l_dist: Var,
    w: &LossWeights,
) -> Var {
    let p = g.scale(l_perc, w.lambda_l);
    let d = g.scale(l_dist, w.lambda_w);
    let s = g.add(l_eps, p);
    g.add(s, d)
}

/// Perceptual distance between two images, without gradients.
pub fn perceptual_distance(x: &Image, y: &Image, phi: &PerceptualExtractor) -> Result<f64> {
    let mut g = Graph::new();
    let (a, b) = (
        g.constant(x.tensor().clone()),
        g.constant(y.tensor().clone()),
    );
    let l = perceptual_loss(&mut g, a, b, phi)?;
    Ok(g.value(l).item())
}

/// Distribution loss between two arrays of equal shape, without gradients.
pub fn distribution_distance(x: &Tensor, y: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(x.clone()), g.constant(y.clone()));
    let l = distribution_loss(&mut g, a, b)?;
    Ok(g.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn scalar2(f: impl Fn(&mut Graph, Var, Var) -> Result<Var>, a: &Tensor, b: &Tensor) -> f64 {
        let mut g = Graph::new();
        let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
        let l = f(&mut g, x, y).unwrap();
        g.value(l).item()
    }

    #[test]
    fn denoising_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        assert_eq!(scalar2(denoising_loss, &e, &e), 0.0);
        let shifted = e.map(|v| v + 1.0);
        assert!((scalar2(denoising_loss, &shifted, &e) - 1.0).abs() < 1e-12);
        let other = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let mut acc = 0.0;
        for i in 0..24 {
            acc += (other.data()[i] - e.data()[i]).powi(2);
        }
        assert!((scalar2(denoising_loss, &other, &e) - acc / 24.0).abs() < 1e-12);
    }

    #[test]
    fn distribution_loss_cases() {
        let ones = Tensor::full(&[1, 3, 2, 2], 1.0);
        let zeros = Tensor::zeros(&[1, 3, 2, 2]);
        assert_eq!(distribution_distance(&ones, &ones).unwrap(), 0.0);
        assert_eq!(distribution_distance(&ones, &zeros).unwrap(), 1.0);
        let x = Tensor::new(vec![2], vec![0.0, 0.5]).unwrap();
        let y = Tensor::new(vec![2], vec![0.25, 0.25]).unwrap();
        assert!((distribution_distance(&x, &y).unwrap() - 0.25).abs() < 1e-12);
        assert!(distribution_distance(&x, &ones).is_err());
    }

    #[test]
    fn distribution_loss_subgradient_at_ties_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[4], 0.3));
        let y = g.leaf(Tensor::full(&[4], 0.3));
        let l = distribution_loss(&mut g, x, y).unwrap();
        assert!(g
            .backward(l)
            .get(y)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    /// Direct convolution loops, independent of the im2col kernels.
    fn conv_ref(
        x: &[f64],
        cin: usize,
        h: usize,
        w: usize,
        wt: &Tensor,
        b: &Tensor,
        stride: usize,
    ) -> (Vec<f64>, usize, usize) {
        let cout = wt.shape()[0];
        let oh = (h + 2 - 3) / stride + 1;
        let ow = (w + 2 - 3) / stride + 1;
        let mut out = vec![0.0; cout * oh * ow];
        for o in 0..cout {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.data()[o];
                    for c in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (y * stride + ky) as isize - 1;
                                let ix = (xx * stride + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += wt.data()[((o * cin + c) * 3 + ky) * 3 + kx]
                                    * x[(c * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[(o * oh + y) * ow + xx] = acc.tanh();
                }
            }
        }
        (out, oh, ow)
    }

    #[test]
    fn perceptual_matches_feature_loop_oracle() {
        let phi = PerceptualExtractor::new(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = Image::new(Tensor::uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut rng)).unwrap();
        let b = Image::new(Tensor::uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut rng)).unwrap();
        let feats = |img: &Image| {
            let (mut x, mut c, mut h, mut w) = (img.data().to_vec(), 3, 8, 8);
            for (wt, bias, stride) in &phi.layers()[..phi.tap()] {
                let (y, oh, ow) = conv_ref(&x, c, h, w, wt, bias, *stride);
                x = y;
                c = wt.shape()[0];
                h = oh;
                w = ow;
            }
            x
        };
        let (fa, fb) = (feats(&a), feats(&b));
        let expect = fa
            .iter()
            .zip(&fb)
            .map(|(u, v)| (u - v).powi(2))
            .sum::<f64>()
            / fa.len() as f64;
        let got = perceptual_distance(&a, &b, &phi).unwrap();
        assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
        assert!(got > 0.0);
        assert_eq!(perceptual_distance(&a, &a, &phi).unwrap(), 0.0);
        assert!((perceptual_distance(&b, &a, &phi).unwrap() - got).abs() < 1e-15);
    }

    #[test]
    fn perceptual_gradient_routes_to_prediction_only() {
        let phi = PerceptualExtractor::new(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let x = g.constant(Tensor::uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut rng));
        let r = g.leaf(Tensor::uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut rng));
        let l = perceptual_loss(&mut g, x, r, &phi).unwrap();
        let grads = g.backward(l);
        assert!(grads.get(x).is_none());
        assert!(grads.get(r).unwrap().max_abs() > 0.0);
    }

    #[test]
    fn total_loss_cases() {
        let w = LossWeights::default();
        assert_eq!(
            total_loss(
                0.7,
                0.4,
                0.9,
                &LossWeights {
                    lambda_l: 0.0,
                    lambda_w: 0.0
                }
            ),
            0.7
        );
        assert!((total_loss(1.0, 0.5, 0.2, &w) - 2.06).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (a, b, c): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
            let once = total_loss(a, b, c, &w);
            assert!((total_loss(2.0 * a, 2.0 * b, 2.0 * c, &w) - 2.0 * once).abs() < 1e-12);
        }
        assert!(LossWeights {
            lambda_l: -1.0,
            lambda_w: 0.0
        }
        .validate()
        .is_err());
    }
}
