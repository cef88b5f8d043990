//! Conditioning paths derived from the LR image: the trainable embedder,
//! its RGB projection, the frozen feature encoder and zero convolutions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::encode;
use crate::degradation::bicubic_upsample;
use crate::error::{Error, Result};
use crate::graph::{upsample_nearest, Graph, Var};
use crate::image::Image;
use crate::params::{lecun, Bound, ParamId, ParamRole, ParamStore};
use crate::tensor::Tensor;

/// Hidden width of the embedder.
pub const EMBED_HIDDEN: usize = 16;
/// Token width of the frozen feature encoder.
pub const FEATURE_DIM: usize = 64;

/// Embedder and RGB-head tensors.
#[derive(Clone, Debug)]
pub struct ConditionParams {
    pub scale_factor: usize,
    pub patch_size: usize,
    pub latent_channels: usize,
    pub embed1: (ParamId, ParamId),
    pub embed2: (ParamId, ParamId),
    pub rgb: (ParamId, ParamId),
}

impl ConditionParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        scale_factor: usize,
        patch_size: usize,
        rng: &mut R,
    ) -> Self {
        let lc = 3 * patch_size * patch_size;
        let role = ParamRole::Conditioning;
        let mut conv = |name: &str, cout: usize, cin: usize, k: usize| {
            let w = store.add(
                format!("{name}.w"),
                lecun(&[cout, cin, k, k], cin * k * k, 1.0, rng),
                role,
            );
            let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout]), role);
            (w, b)
        };
        let embed1 = conv("cond.embed1", EMBED_HIDDEN, 3, 3);
        let embed2 = conv("cond.embed2", lc, EMBED_HIDDEN, patch_size);
        let rgb = conv("cond.rgb", 3, lc, 1);
        Self {
            scale_factor,
            patch_size,
            latent_channels: lc,
            embed1,
            embed2,
            rgb,
        }
    }
}

/// Maps the LR image to an embedding on the latent grid: nearest upsample to
/// HR size, 3x3 conv, SiLU, then a stride-`p` patch conv.
pub fn embed_condition(g: &mut Graph, y: Var, p: &ConditionParams, bound: &Bound) -> Result<Var> {
    let dims = g
        .value(y)
        .dims4()
        .map_err(|_| Error::Dimension(format!("LR image must be rank 4, got {:?}", g.shape(y))))?;
    if dims[1] != 3 {
        return Err(Error::Dimension(format!(
            "LR image must have 3 channels, got {}",
            dims[1]
        )));
    }
    let (hh, hw) = (dims[2] * p.scale_factor, dims[3] * p.scale_factor);
    if hh % p.patch_size != 0 || hw % p.patch_size != 0 {
        return Err(Error::Dimension(format!(
            "HR size {hh}x{hw} is not on the latent grid of patch size {}",
            p.patch_size
        )));
    }
    let up = g.upsample_nearest(y, p.scale_factor);
    let h = g.conv2d(up, bound.var(p.embed1.0), Some(bound.var(p.embed1.1)), 1, 1);
    let h = g.silu(h);
    let c = g.conv2d(
        h,
        bound.var(p.embed2.0),
        Some(bound.var(p.embed2.1)),
        p.patch_size,
        0,
    );
    g.check_finite(c, "conditioning.embed")?;
    Ok(c)
}

/// Projects the embedding back to an RGB image at HR resolution, squashed
/// into `[0, 1]` by a sigmoid.
pub fn cond_to_rgb(g: &mut Graph, c_f: Var, p: &ConditionParams, bound: &Bound) -> Result<Var> {
    let dims = g.value(c_f).dims4()?;
    if dims[1] != p.latent_channels {
        return Err(Error::Dimension(format!(
            "embedding has {} channels, expected {}",
            dims[1], p.latent_channels
        )));
    }
    let x = g.conv2d(c_f, bound.var(p.rgb.0), Some(bound.var(p.rgb.1)), 1, 0);
    let x = g.sigmoid(x);
    Ok(g.upsample_nearest(x, p.patch_size))
}

/// Latent of the bicubic-upsampled LR batch: the fixed clean-latent prior
/// the denoiser refines.
pub fn anchor_latent(lr: &Image, scale_factor: usize, patch_size: usize) -> Result<Tensor> {
    Ok(encode(&bicubic_upsample(lr, scale_factor), patch_size)?.into_tensor())
}

/// Frozen feature tokens `(batch, tokens, FEATURE_DIM)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTokens {
    data: Tensor,
}

impl FeatureTokens {
    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    /// Always true: nothing ever updates the encoder that made these.
    pub fn frozen(&self) -> bool {
        true
    }
}

/// Seeded random-weight encoder: three stride-2 3x3 convolutions with tanh.
#[derive(Clone, Debug)]
pub struct FeatureEncoder {
    seed: u64,
    layers: Vec<(Tensor, Tensor)>,
}

impl FeatureEncoder {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [3, 16, 32, FEATURE_DIM];
        let layers = widths
            .windows(2)
            .map(|wc| {
                let (cin, cout) = (wc[0], wc[1]);
                let w = lecun(&[cout, cin, 3, 3], cin * 9, 1.0, &mut rng);
                let b = Tensor::randn(&[cout], 0.1, &mut rng);
                (w, b)
            })
            .collect();
        Self { seed, layers }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn encode(&self, y: &Image) -> FeatureTokens {
        let mut g = Graph::new();
        let mut h = g.constant(y.tensor().clone());
        for (w, b) in &self.layers {
            let (w, b) = (g.constant(w.clone()), g.constant(b.clone()));
            h = g.conv2d(h, w, Some(b), 2, 1);
            h = g.tanh(h);
        }
        let [n, c, hh, ww] = g.value(h).dims4().expect("rank 4");
        let t = g
            .value(h)
            .clone()
            .reshape(&[n, c, hh * ww])
            .expect("same size");
        FeatureTokens {
            data: t.permute(&[0, 2, 1]),
        }
    }
}

pub fn image_features(y: &Image, seed: u64) -> FeatureTokens {
    FeatureEncoder::new(seed).encode(y)
}

/// The image the feature encoder sees: the LR image at HR size.
pub fn feature_input(lr: &Image, scale_factor: usize) -> Image {
    Image::new(upsample_nearest(lr.tensor(), scale_factor)).expect("rank 4")
}

/// A 1x1 convolution whose weights start at zero.
#[derive(Clone, Copy, Debug)]
pub struct ZeroConv {
    pub w: ParamId,
    pub b: ParamId,
}

impl ZeroConv {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            w: store.add(
                format!("{name}.w"),
                Tensor::zeros(&[cout, cin, 1, 1]),
                ParamRole::ZeroConv,
            ),
            b: store.add(
                format!("{name}.b"),
                Tensor::zeros(&[cout]),
                ParamRole::ZeroConv,
            ),
        }
    }
}

pub fn zero_conv(g: &mut Graph, x: Var, zc: &ZeroConv, bound: &Bound) -> Var {
    g.conv2d(x, bound.var(zc.w), Some(bound.var(zc.b)), 1, 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (ParamStore, ConditionParams) {
        let mut store = ParamStore::new();
        let p = ConditionParams::new(&mut store, 4, 2, &mut ChaCha8Rng::seed_from_u64(0));
        (store, p)
    }

    #[test]
    fn embed_shapes_and_zero_input() {
        let (mut store, p) = setup();
        let mut g = Graph::new();
        let bound = store.bind_frozen(&mut g);
        let y = g.constant(Tensor::full(&[2, 3, 8, 8], 0.4));
        let c = embed_condition(&mut g, y, &p, &bound).unwrap();
        assert_eq!(g.shape(c), &[2, 12, 16, 16]);
        let rgb = cond_to_rgb(&mut g, c, &p, &bound).unwrap();
        assert_eq!(g.shape(rgb), &[2, 3, 32, 32]);

        // biases are zero-initialized, so a zero image embeds to zero
        for id in [p.embed1.1, p.embed2.1, p.rgb.1] {
            assert!(store.get(id).data().iter().all(|&v| v == 0.0));
        }
        let mut g = Graph::new();
        let bound = store.bind_frozen(&mut g);
        let y = g.constant(Tensor::zeros(&[1, 3, 8, 8]));
        let c = embed_condition(&mut g, y, &p, &bound).unwrap();
        assert!(g.value(c).data().iter().all(|&v| v == 0.0));
        let rgb = cond_to_rgb(&mut g, c, &p, &bound).unwrap();
        assert!(g.value(rgb).data().iter().all(|&v| v == 0.5));

        *store.get_mut(p.rgb.0) = Tensor::zeros(&[3, 12, 1, 1]);
        let mut g = Graph::new();
        let bound = store.bind_frozen(&mut g);
        let c = g.constant(Tensor::full(&[1, 12, 2, 2], 7.0));
        let rgb = cond_to_rgb(&mut g, c, &p, &bound).unwrap();
        assert!(g.value(rgb).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn embed_rejects_wrong_channels() {
        let (store, p) = setup();
        let mut g = Graph::new();
        let bound = store.bind_frozen(&mut g);
        let y = g.constant(Tensor::zeros(&[1, 1, 8, 8]));
        assert!(matches!(
            embed_condition(&mut g, y, &p, &bound),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn features_are_deterministic_and_seeded() {
        let y = Image::new(Tensor::uniform(
            &[2, 3, 32, 32],
            0.0,
            1.0,
            &mut ChaCha8Rng::seed_from_u64(1),
        ))
        .unwrap();
        let a = image_features(&y, 7);
        let b = image_features(&y, 7);
        assert!(a.tensor().bit_eq(b.tensor()));
        assert!(a.frozen());
        assert_eq!(a.tensor().shape(), &[2, 16, FEATURE_DIM]);
        let c = image_features(&y, 8);
        assert!(!c.tensor().bit_eq(a.tensor()));
    }

    #[test]
    fn zero_conv_contract() {
        let mut store = ParamStore::new();
        let zc = ZeroConv::new(&mut store, "zc", 4, 4);
        let x = Tensor::randn(&[1, 4, 3, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let mut g = Graph::new();
        let bound = store.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let y = zero_conv(&mut g, xv, &zc, &bound);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let mut eye = Tensor::zeros(&[4, 4, 1, 1]);
        for i in 0..4 {
            eye.data_mut()[i * 4 + i] = 1.0;
        }
        *store.get_mut(zc.w) = eye;
        let mut g = Graph::new();
        let bound = store.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let y = zero_conv(&mut g, xv, &zc, &bound);
        assert!(g.value(y).bit_eq(&x));
    }

    #[test]
    fn zero_conv_weights_receive_gradient() {
        use crate::gradcheck::finite_diff;
        let mut store = ParamStore::new();
        let zc = ZeroConv::new(&mut store, "zc", 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[1, 3, 2, 2], 1.0, &mut rng);
        let target = Tensor::randn(&[1, 2, 2, 2], 1.0, &mut rng);
        let loss = |w: &Tensor| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let wv = g.leaf(w.clone());
            let bv = g.constant(Tensor::zeros(&[2]));
            let y = g.conv2d(xv, wv, Some(bv), 1, 0);
            let t = g.constant(target.clone());
            let d = g.sub(y, t);
            let d = g.square(d);
            let l = g.mean(d);
            (g.value(l).item(), g.backward(l).get(wv).unwrap().clone())
        };
        let w0 = store.get(zc.w).clone();
        let (_, grad) = loss(&w0);
        let fd = finite_diff(
            |v| loss(&Tensor::new(w0.shape().to_vec(), v.to_vec()).unwrap()).0,
            w0.data(),
            1e-5,
        )
        .unwrap();
        assert!(grad.max_abs() > 1e-3);
        for (a, b) in grad.data().iter().zip(&fd) {
            assert!((a - b).abs() < 1e-8);
        }
    }
}
