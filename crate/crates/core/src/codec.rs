//! Lossless patchify codec standing in for a learned VAE.
//!
//! `encode` is space-to-depth with patch size `p` followed by the affine map
//! `z = 2x - 1`; `decode` is its exact inverse. Latent channel `c*p*p + dy*p + dx`
//! holds pixel `(dy, dx)` of each `p x p` patch of image channel `c`.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::Tensor;

pub const DEFAULT_PATCH_SIZE: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    data: Tensor,
    patch_size: usize,
    from_sampler: bool,
}

impl Latent {
    pub fn new(data: Tensor, patch_size: usize) -> Result<Self> {
        let [_, c, _, _] = data.dims4()?;
        if patch_size == 0 || c % (patch_size * patch_size) != 0 {
            return Err(Error::Dimension(format!(
                "latent with {c} channels is incompatible with patch size {patch_size}"
            )));
        }
        if !data.is_finite() {
            return Err(Error::Validation(
                "latent contains non-finite values".into(),
            ));
        }
        Ok(Self {
            data,
            patch_size,
            from_sampler: false,
        })
    }

    /// A latent produced by the sampler; decoding clips it into `[0, 1]`.
    pub fn from_sampler(data: Tensor, patch_size: usize) -> Result<Self> {
        let mut z = Self::new(data, patch_size)?;
        z.from_sampler = true;
        Ok(z)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn is_from_sampler(&self) -> bool {
        self.from_sampler
    }

    pub fn dims(&self) -> [usize; 4] {
        self.data.dims4().expect("latent is rank 4")
    }
}

pub fn encode(x: &Image, p: usize) -> Result<Latent> {
    let [b, c, h, w] = x.dims();
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Dimension(format!(
            "image {h}x{w} is not divisible by patch size {p}"
        )));
    }
    let (lh, lw, lc) = (h / p, w / p, c * p * p);
    let src = x.data();
    let mut out = vec![0.0; b * lc * lh * lw];
    for n in 0..b {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let oc = ch * p * p + (y % p) * p + xx % p;
                    let v = src[((n * c + ch) * h + y) * w + xx];
                    out[((n * lc + oc) * lh + y / p) * lw + xx / p] = 2.0 * v - 1.0;
                }
            }
        }
    }
    Latent::new(Tensor::from_raw(vec![b, lc, lh, lw], out), p)
}

pub fn decode(z: &Latent) -> Result<Image> {
    let p = z.patch_size;
    let [b, lc, lh, lw] = z.dims();
    if lc % (p * p) != 0 {
        return Err(Error::Dimension(format!(
            "latent channels {lc} not divisible by {}",
            p * p
        )));
    }
    let (c, h, w) = (lc / (p * p), lh * p, lw * p);
    let src = z.data.data();
    let mut out = vec![0.0; b * c * h * w];
    for n in 0..b {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let oc = ch * p * p + (y % p) * p + xx % p;
                    let v = (src[((n * lc + oc) * lh + y / p) * lw + xx / p] + 1.0) / 2.0;
                    out[((n * c + ch) * h + y) * w + xx] =
                        if z.from_sampler { v.clamp(0.0, 1.0) } else { v };
                }
            }
        }
    }
    Image::new(Tensor::from_raw(vec![b, c, h, w], out))
}
