//! Procedural HR image synthesis and a composable blur / downsample / noise
//! degradation pipeline producing paired datasets.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::DEFAULT_PATCH_SIZE;
use crate::error::{Error, Result};
use crate::image::{read_ppm, write_ppm, Image};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Blur,
    Downsample,
    Noise,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlurKind {
    #[default]
    Gaussian,
    /// Uniform average over `blur_kernel` taps; `blur_sigma` is ignored.
    Box,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationConfig {
    pub blur_sigma: f64,
    pub blur_kernel: usize,
    #[serde(default)]
    pub blur_kind: BlurKind,
    pub scale_factor: usize,
    pub noise_sigma: f64,
    pub stage_order: Vec<Stage>,
    pub seed: u64,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self {
            blur_sigma: 1.0,
            blur_kernel: 5,
            blur_kind: BlurKind::Gaussian,
            scale_factor: 4,
            noise_sigma: 0.01,
            stage_order: vec![Stage::Blur, Stage::Downsample, Stage::Noise],
            seed: 0,
        }
    }
}

impl DegradationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        match self.blur_kind {
            BlurKind::Gaussian => {
                if !(self.blur_sigma > 0.0 && self.blur_sigma.is_finite()) {
                    return bad(format!(
                        "blur_sigma must be positive, got {}",
                        self.blur_sigma
                    ));
                }
                if self.blur_kernel < 3 || self.blur_kernel.is_multiple_of(2) {
                    return bad(format!(
                        "blur_kernel must be odd and >= 3, got {}",
                        self.blur_kernel
                    ));
                }
            }
            BlurKind::Box => {
                if self.blur_kernel == 0 {
                    return bad("box blur_kernel must be >= 1".into());
                }
            }
        }
        if self.scale_factor < 1 {
            return bad("scale_factor must be >= 1".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            ));
        }
        for (i, s) in self.stage_order.iter().enumerate() {
            if self.stage_order[..i].contains(s) {
                return bad(format!("stage {s:?} appears more than once"));
            }
        }
        if self.scale_factor > 1 && !self.stage_order.contains(&Stage::Downsample) {
            return bad("scale_factor > 1 requires a downsample stage".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON text.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_string(self).expect("config serializes"))
    }
}

pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Normalized 1-D taps and the offset of the first tap relative to the
/// output pixel. Even-length kernels lean right: taps cover
/// `[-(k/2 - 1), k/2]`.
fn kernel_taps(cfg: &DegradationConfig) -> (Vec<f64>, isize) {
    let k = cfg.blur_kernel;
    let first = -(((k - 1) / 2) as isize);
    let taps: Vec<f64> = match cfg.blur_kind {
        BlurKind::Box => vec![1.0 / k as f64; k],
        BlurKind::Gaussian => {
            let raw: Vec<f64> = (0..k)
                .map(|i| {
                    let d = (first + i as isize) as f64;
                    (-d * d / (2.0 * cfg.blur_sigma * cfg.blur_sigma)).exp()
                })
                .collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect()
        }
    };
    (taps, first)
}

/// Mirror index without repeating the edge sample (`-1 -> 1`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

fn blur(x: &Tensor, cfg: &DegradationConfig) -> Tensor {
    let [b, c, h, w] = x.dims4().expect("image rank");
    let (taps, first) = kernel_taps(cfg);
    let mut tmp = vec![0.0; x.numel()];
    let mut out = vec![0.0; x.numel()];
    for p in 0..b * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let t = &mut tmp[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for (i, tap) in taps.iter().enumerate() {
                    acc += tap * src[y * w + reflect(xx as isize + first + i as isize, w)];
                }
                t[y * w + xx] = acc;
            }
        }
        let o = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for (i, tap) in taps.iter().enumerate() {
                    acc += tap * t[reflect(y as isize + first + i as isize, h) * w + xx];
                }
                o[y * w + xx] = acc;
            }
        }
    }
    Tensor::from_raw(vec![b, c, h, w], out)
}

/// Stride-`s` decimation sampling the pixel at offset `(s - 1) / 2` of each block.
fn downsample(x: &Tensor, s: usize) -> Tensor {
    let [b, c, h, w] = x.dims4().expect("image rank");
    let (oh, ow) = (h / s, w / s);
    let phase = (s - 1) / 2;
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for p in 0..b * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                out.push(src[(y * s + phase) * w + xx * s + phase]);
            }
        }
    }
    Tensor::from_raw(vec![b, c, oh, ow], out)
}

fn add_noise(x: &Tensor, sigma: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = x.clone();
    for v in out.data_mut() {
        *v += sigma * rng.sample::<f64, _>(StandardNormal);
    }
    out
}

/// Applies the configured stages in order and clips the result to `[0, 1]`.
pub fn degrade(hr: &Image, cfg: &DegradationConfig) -> Result<Image> {
    cfg.validate()?;
    hr.validate()?;
    let [_, _, h, w] = hr.dims();
    let s = cfg.scale_factor;
    if h % s != 0 || w % s != 0 {
        return Err(Error::Dimension(format!(
            "image {h}x{w} is not divisible by scale factor {s}"
        )));
    }
    let mut x = hr.tensor().clone();
    for stage in &cfg.stage_order {
        x = match stage {
            Stage::Blur => blur(&x, cfg),
            Stage::Downsample => downsample(&x, s),
            Stage::Noise if cfg.noise_sigma > 0.0 => add_noise(&x, cfg.noise_sigma, cfg.seed),
            Stage::Noise => x,
        };
    }
    Ok(Image::new(x)?.clip_unit())
}

/// Keys cubic convolution kernel (a = -0.5).
fn cubic(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

fn cubic_weights(n_in: usize, n_out: usize) -> Vec<[(usize, f64); 4]> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let frac = src - base;
            let mut taps = [(0usize, 0.0f64); 4];
            for (k, tap) in taps.iter_mut().enumerate() {
                let idx = (base as isize + k as isize - 1).clamp(0, n_in as isize - 1) as usize;
                *tap = (idx, cubic(frac - (k as f64 - 1.0)));
            }
            taps
        })
        .collect()
}

/// Bicubic interpolation by an integer factor (half-pixel centers, edge
/// clamping), clipped to `[0, 1]`. The interpolation baseline for evaluation.
pub fn bicubic_upsample(x: &Image, factor: usize) -> Image {
    let [b, c, h, w] = x.dims();
    let (oh, ow) = (h * factor, w * factor);
    let wx = cubic_weights(w, ow);
    let wy = cubic_weights(h, oh);
    let mut out = vec![0.0; b * c * oh * ow];
    let mut rows = vec![0.0; h * ow];
    for p in 0..b * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for (ox, taps) in wx.iter().enumerate() {
                rows[y * ow + ox] = taps.iter().map(|&(i, wt)| wt * src[y * w + i]).sum();
            }
        }
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, taps) in wy.iter().enumerate() {
            for ox in 0..ow {
                let v: f64 = taps.iter().map(|&(i, wt)| wt * rows[i * ow + ox]).sum();
                dst[oy * ow + ox] = v.clamp(0.0, 1.0);
            }
        }
    }
    Image::new(Tensor::from_raw(vec![b, c, oh, ow], out)).expect("rank 4")
}

/// Procedural HR image families, cycled by pair index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    LinearGradient,
    Checkerboard,
    GaussianBlobs,
    Rectangles,
}

impl Generator {
    pub const ALL: [Generator; 4] = [
        Generator::LinearGradient,
        Generator::Checkerboard,
        Generator::GaussianBlobs,
        Generator::Rectangles,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Generator::LinearGradient => "linear_gradient",
            Generator::Checkerboard => "checkerboard",
            Generator::GaussianBlobs => "gaussian_blobs",
            Generator::Rectangles => "rectangles",
        }
    }

    pub fn render(self, size: usize, rng: &mut impl Rng) -> Image {
        let color = |rng: &mut dyn rand::RngCore| -> [f64; 3] { [rng.gen(), rng.gen(), rng.gen()] };
        let mut data = vec![0.0; 3 * size * size];
        let mut put = |y: usize, x: usize, c: [f64; 3]| {
            for (ch, v) in c.iter().enumerate() {
                data[(ch * size + y) * size + x] = v.clamp(0.0, 1.0);
            }
        };
        let n = size as f64;
        match self {
            Generator::LinearGradient => {
                let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let (c0, c1) = (color(rng), color(rng));
                let (dx, dy) = (theta.cos(), theta.sin());
                let span = (dx.abs() + dy.abs()) * (n - 1.0);
                let offset = dx.min(0.0) * (n - 1.0) + dy.min(0.0) * (n - 1.0);
                for y in 0..size {
                    for x in 0..size {
                        let t = ((x as f64 * dx + y as f64 * dy) - offset) / span;
                        put(y, x, std::array::from_fn(|i| c0[i] + (c1[i] - c0[i]) * t));
                    }
                }
            }
            Generator::Checkerboard => {
                let cell = [4usize, 8][rng.gen_range(0..2)];
                let (ox, oy) = (rng.gen_range(0..cell), rng.gen_range(0..cell));
                let (c0, c1) = (color(rng), color(rng));
                for y in 0..size {
                    for x in 0..size {
                        let odd = ((x + ox) / cell + (y + oy) / cell) % 2 == 1;
                        put(y, x, if odd { c1 } else { c0 });
                    }
                }
            }
            Generator::GaussianBlobs => {
                let bg = color(rng);
                let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
                    .map(|_| {
                        let cx = rng.gen_range(0.0..n);
                        let cy = rng.gen_range(0.0..n);
                        let s = rng.gen_range(n / 16.0..n / 5.0);
                        let c: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.6..0.6));
                        (cx, cy, s, c)
                    })
                    .collect();
                for y in 0..size {
                    for x in 0..size {
                        let mut px = bg;
                        for &(cx, cy, s, c) in &blobs {
                            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                            let g = (-d2 / (2.0 * s * s)).exp();
                            for i in 0..3 {
                                px[i] += c[i] * g;
                            }
                        }
                        put(y, x, px);
                    }
                }
            }
            Generator::Rectangles => {
                let bg = color(rng);
                for y in 0..size {
                    for x in 0..size {
                        put(y, x, bg);
                    }
                }
                for _ in 0..4 {
                    let x0 = rng.gen_range(0..size - 2);
                    let y0 = rng.gen_range(0..size - 2);
                    let x1 = rng.gen_range(x0 + 2..=size);
                    let y1 = rng.gen_range(y0 + 2..=size);
                    let c = color(rng);
                    for y in y0..y1 {
                        for x in x0..x1 {
                            put(y, x, c);
                        }
                    }
                }
            }
        }
        Image::new(Tensor::from_raw(vec![1, 3, size, size], data)).expect("rank 4")
    }
}

/// SplitMix64 finalizer, used to derive independent per-item seeds.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        ^ index
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub generator: String,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub hr: Image,
    pub lr: Image,
    pub record: PairRecord,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairDataset {
    pub pairs: Vec<Pair>,
    pub config: DegradationConfig,
    pub hr_size: usize,
    pub seed: u64,
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn scale_factor(&self) -> usize {
        self.config.scale_factor
    }

    pub fn hr_batch(&self, indices: &[usize]) -> Result<Image> {
        let items: Vec<Image> = indices.iter().map(|&i| self.pairs[i].hr.clone()).collect();
        Image::stack(&items)
    }

    pub fn lr_batch(&self, indices: &[usize]) -> Result<Image> {
        let items: Vec<Image> = indices.iter().map(|&i| self.pairs[i].lr.clone()).collect();
        Image::stack(&items)
    }
}

pub fn synth_dataset(
    count: usize,
    hr_size: usize,
    cfg: &DegradationConfig,
    seed: u64,
) -> Result<PairDataset> {
    cfg.validate()?;
    if count == 0 {
        return Err(Error::Validation("dataset count must be >= 1".into()));
    }
    if hr_size == 0 || !hr_size.is_multiple_of(cfg.scale_factor) || !hr_size.is_multiple_of(DEFAULT_PATCH_SIZE) {
        return Err(Error::Dimension(format!(
            "hr_size {hr_size} must be divisible by scale factor {} and patch size {}",
            cfg.scale_factor, DEFAULT_PATCH_SIZE
        )));
    }
    if hr_size < 4 {
        return Err(Error::Dimension(format!(
            "hr_size {hr_size} is too small (minimum 4)"
        )));
    }
    let config_hash = cfg.hash();
    let mut pairs = Vec::with_capacity(count);
    for i in 0..count {
        let generator = Generator::ALL[i % Generator::ALL.len()];
        let item_seed = mix_seed(seed, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed);
        let hr = generator.render(hr_size, &mut rng).quantize8();
        let item_cfg = DegradationConfig {
            seed: mix_seed(item_seed, cfg.seed.wrapping_add(1)),
            ..cfg.clone()
        };
        let lr = degrade(&hr, &item_cfg)?.quantize8();
        pairs.push(Pair {
            hr,
            lr,
            record: PairRecord {
                generator: generator.name().to_string(),
                seed: item_seed,
                config_hash: config_hash.clone(),
            },
        });
    }
    Ok(PairDataset {
        pairs,
        config: cfg.clone(),
        hr_size,
        seed,
    })
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    hr_size: usize,
    seed: u64,
    config: DegradationConfig,
    config_hash: String,
    pairs: Vec<ManifestPair>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestPair {
    hr: String,
    lr: String,
    #[serde(flatten)]
    record: PairRecord,
}

/// Writes every pair as PPM files plus `manifest.json`; returns the manifest path.
pub fn save_pairs(ds: &PairDataset, dir: &Path) -> Result<std::path::PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(ds.len());
    for (i, pair) in ds.pairs.iter().enumerate() {
        let hr = format!("pair_{i:04}_hr.ppm");
        let lr = format!("pair_{i:04}_lr.ppm");
        write_ppm(&dir.join(&hr), &pair.hr)?;
        write_ppm(&dir.join(&lr), &pair.lr)?;
        entries.push(ManifestPair {
            hr,
            lr,
            record: pair.record.clone(),
        });
    }
    let manifest = Manifest {
        version: 1,
        hr_size: ds.hr_size,
        seed: ds.seed,
        config: ds.config.clone(),
        config_hash: ds.config.hash(),
        pairs: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// A recoverable inconsistency found while loading a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct IntegrityWarning(pub String);

/// Loads a dataset, logging integrity warnings.
pub fn load_pairs(dir: &Path) -> Result<PairDataset> {
    let (ds, warnings) = load_pairs_checked(dir)?;
    for w in warnings {
        log::warn!("{}", w.0);
    }
    Ok(ds)
}

/// Loads a dataset and reports config-hash mismatches instead of logging them.
pub fn load_pairs_checked(dir: &Path) -> Result<(PairDataset, Vec<IntegrityWarning>)> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(Error::NoManifest(dir.to_path_buf()));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    manifest
        .config
        .validate()
        .map_err(|e| Error::format(&path, e.to_string()))?;
    let mut warnings = Vec::new();
    let recomputed = manifest.config.hash();
    if recomputed != manifest.config_hash {
        warnings.push(IntegrityWarning(format!(
            "{}: manifest config_hash {} does not match recomputed {}",
            path.display(),
            manifest.config_hash,
            recomputed
        )));
    }
    let s = manifest.config.scale_factor;
    let mut pairs = Vec::with_capacity(manifest.pairs.len());
    for entry in manifest.pairs {
        let hr = read_ppm(&dir.join(&entry.hr))?;
        let lr = read_ppm(&dir.join(&entry.lr))?;
        let [_, _, hh, hw] = hr.dims();
        let [_, _, lh, lw] = lr.dims();
        if hh != manifest.hr_size || hw != manifest.hr_size || lh * s != hh || lw * s != hw {
            return Err(Error::format(
                &path,
                format!("pair {} / {} has inconsistent sizes", entry.hr, entry.lr),
            ));
        }
        if entry.record.config_hash != recomputed {
            warnings.push(IntegrityWarning(format!(
                "{}: pair {} was produced under config {}",
                path.display(),
                entry.hr,
                entry.record.config_hash
            )));
        }
        pairs.push(Pair {
            hr,
            lr,
            record: entry.record,
        });
    }
    if pairs.is_empty() {
        return Err(Error::format(&path, "manifest lists no pairs"));
    }
    Ok((
        PairDataset {
            pairs,
            config: manifest.config,
            hr_size: manifest.hr_size,
            seed: manifest.seed,
        },
        warnings,
    ))
}
