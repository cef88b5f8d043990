//! Noise-prediction network: a two-level UNet with an attention block at
//! every level, feature modulation from frozen image tokens, and a
//! control copy of the down path fed through zero convolutions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{zero_conv, ConditionParams, FeatureEncoder, ZeroConv, FEATURE_DIM};
use crate::degradation::mix_seed;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::lgcaa::{lgcaa_forward, AttentionConfig, AttentionParams};
use crate::losses::PerceptualExtractor;
use crate::params::{lecun, Bound, ParamId, ParamRole, ParamStore};
use crate::tensor::Tensor;

use super::schedule::{Schedule, ScheduleConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub width: usize,
    pub time_dim: usize,
    pub patch_size: usize,
    pub attention: AttentionConfig,
    pub schedule: ScheduleConfig,
    /// Seed of the frozen image-feature encoder.
    pub feature_seed: u64,
    /// Seed of the frozen perceptual extractor.
    pub perceptual_seed: u64,
    /// Expected spread of clean latents around the bicubic anchor.
    pub prior_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 32,
            time_dim: 32,
            patch_size: crate::codec::DEFAULT_PATCH_SIZE,
            attention: AttentionConfig::default(),
            schedule: ScheduleConfig::default(),
            feature_seed: 1234,
            perceptual_seed: 4321,
            prior_std: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn latent_channels(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Validation(format!(
                "width must be >= 1 and time_dim even and >= 2 (got {}, {})",
                self.width, self.time_dim
            )));
        }
        if !(self.prior_std > 0.0 && self.prior_std.is_finite()) {
            return Err(Error::Validation(format!(
                "prior_std must be positive, got {}",
                self.prior_std
            )));
        }
        if self.patch_size == 0 {
            return Err(Error::Validation("patch_size must be >= 1".into()));
        }
        self.attention.validate(self.width)
    }
}

/// One resolution level: conv, time shift, SiLU, optional residual, feature
/// modulation, then `h + attention(h)`.
#[derive(Clone, Debug)]
pub struct LevelParams {
    pub cin: usize,
    pub cout: usize,
    pub conv: (ParamId, ParamId),
    pub time: (ParamId, ParamId),
    pub film_scale: (ParamId, ParamId),
    pub film_shift: (ParamId, ParamId),
    pub attn: AttentionParams,
}

/// Weight of a 3x3 conv or a linear layer, with its bias.
type Layer = (ParamId, ParamId);

#[derive(Clone, Debug)]
pub struct ControlParams {
    pub cond_in: ZeroConv,
    pub conv_in: Layer,
    pub d1: LevelParams,
    pub down1: Layer,
    pub d2: LevelParams,
    pub link1: ZeroConv,
    pub link2: ZeroConv,
}

#[derive(Clone, Debug)]
pub struct DenoiserParams {
    pub latent_channels: usize,
    pub width: usize,
    pub time_dim: usize,
    pub time: Layer,
    pub conv_in: Layer,
    pub d1: LevelParams,
    pub down1: Layer,
    pub d2: LevelParams,
    pub down2: Layer,
    pub mid: LevelParams,
    pub u2: LevelParams,
    pub u1: LevelParams,
    pub conv_out: Layer,
    pub control: ControlParams,
    /// Zero-initialized gate on the backbone output, so a fresh model
    /// predicts the prior estimate alone.
    pub head_gate: ZeroConv,
    /// `sqrt(abar_t)` for `t = 0..=T`, used by the output head.
    pub signal: Vec<f64>,
    pub prior_std: f64,
}

struct Builder<'a, R: Rng> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
    time_dim: usize,
    attention: &'a AttentionConfig,
}

impl<R: Rng> Builder<'_, R> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, role: ParamRole) -> Layer {
        let w = lecun(&[cout, cin, k, k], cin * k * k, 1.0, self.rng);
        (
            self.store.add(format!("{name}.w"), w, role),
            self.store
                .add(format!("{name}.b"), Tensor::zeros(&[cout]), role),
        )
    }

    fn linear(
        &mut self,
        name: &str,
        fin: usize,
        fout: usize,
        role: ParamRole,
        zero: bool,
    ) -> Layer {
        let w = if zero {
            Tensor::zeros(&[fin, fout])
        } else {
            lecun(&[fin, fout], fin, 1.0, self.rng)
        };
        (
            self.store.add(format!("{name}.w"), w, role),
            self.store
                .add(format!("{name}.b"), Tensor::zeros(&[fout]), role),
        )
    }

    fn level(&mut self, name: &str, cin: usize, cout: usize) -> LevelParams {
        let conv = self.conv(&format!("{name}.conv"), cin, cout, 3, ParamRole::Backbone);
        let time = self.linear(
            &format!("{name}.time"),
            self.time_dim,
            cout,
            ParamRole::Backbone,
            false,
        );
        let film_scale = self.linear(
            &format!("{name}.film_scale"),
            FEATURE_DIM,
            cout,
            ParamRole::Conditioning,
            true,
        );
        let film_shift = self.linear(
            &format!("{name}.film_shift"),
            FEATURE_DIM,
            cout,
            ParamRole::Conditioning,
            true,
        );
        let attn = AttentionParams::new(
            self.store,
            &format!("{name}.attn"),
            cout,
            self.attention,
            ParamRole::Attention,
            self.rng,
        );
        LevelParams {
            cin,
            cout,
            conv,
            time,
            film_scale,
            film_shift,
            attn,
        }
    }
}

/// Duplicates a tensor under a new name prefix with the control role.
fn copy_tensor(store: &mut ParamStore, id: ParamId, prefix: &str) -> ParamId {
    let e = store.entry(id).clone();
    store.add(format!("{prefix}.{}", e.name), e.value, ParamRole::Control)
}

/// Duplicates both tensors of a layer.
fn copy_layer(store: &mut ParamStore, (w, b): Layer, prefix: &str) -> Layer {
    (copy_tensor(store, w, prefix), copy_tensor(store, b, prefix))
}

fn copy_level(store: &mut ParamStore, src: &LevelParams, prefix: &str) -> LevelParams {
    let a = &src.attn;
    let mut attn = a.clone();
    let pairs: [(&mut Layer, Layer); 13] = [
        (&mut attn.ln1, a.ln1),
        (&mut attn.q, a.q),
        (&mut attn.v, a.v),
        (&mut attn.proj_out, a.proj_out),
        (&mut attn.ln2, a.ln2),
        (&mut attn.ga_in, a.ga_in),
        (&mut attn.ga_q, a.ga_q),
        (&mut attn.ga_v, a.ga_v),
        (&mut attn.ga_out, a.ga_out),
        (&mut attn.ga_back, a.ga_back),
        (&mut attn.ln3, a.ln3),
        (&mut attn.mlp_in, a.mlp_in),
        (&mut attn.mlp_out, a.mlp_out),
    ];
    for (dst, layer) in pairs {
        *dst = copy_layer(store, layer, prefix);
    }
    attn.k = copy_tensor(store, a.k, prefix);
    attn.ga_k = copy_tensor(store, a.ga_k, prefix);
    LevelParams {
        cin: src.cin,
        cout: src.cout,
        conv: copy_layer(store, src.conv, prefix),
        time: copy_layer(store, src.time, prefix),
        film_scale: copy_layer(store, src.film_scale, prefix),
        film_shift: copy_layer(store, src.film_shift, prefix),
        attn,
    }
}

impl DenoiserParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        schedule: &Schedule,
        rng: &mut R,
    ) -> Self {
        let (lc, c) = (cfg.latent_channels(), cfg.width);
        let mut b = Builder {
            store,
            rng,
            time_dim: cfg.time_dim,
            attention: &cfg.attention,
        };
        let time = b.linear(
            "time",
            cfg.time_dim,
            cfg.time_dim,
            ParamRole::Backbone,
            false,
        );
        let conv_in = b.conv("conv_in", lc, c, 3, ParamRole::Backbone);
        let d1 = b.level("d1", c, c);
        let down1 = b.conv("down1", c, c, 3, ParamRole::Backbone);
        let d2 = b.level("d2", c, c);
        let down2 = b.conv("down2", c, c, 3, ParamRole::Backbone);
        let mid = b.level("mid", c, c);
        let u2 = b.level("u2", 2 * c, c);
        let u1 = b.level("u1", 2 * c, c);
        let conv_out = b.conv("conv_out", c, lc, 3, ParamRole::Backbone);

        let control = ControlParams {
            cond_in: ZeroConv::new(store, "control.cond_in", lc, lc),
            conv_in: copy_layer(store, conv_in, "control"),
            d1: copy_level(store, &d1, "control"),
            down1: copy_layer(store, down1, "control"),
            d2: copy_level(store, &d2, "control"),
            link1: ZeroConv::new(store, "control.link1", c, c),
            link2: ZeroConv::new(store, "control.link2", c, c),
        };
        Self {
            latent_channels: lc,
            width: c,
            time_dim: cfg.time_dim,
            time,
            conv_in,
            d1,
            down1,
            d2,
            down2,
            mid,
            u2,
            u1,
            conv_out,
            control,
            head_gate: ZeroConv::new(store, "head_gate", lc, lc),
            signal: (0..=schedule.len())
                .map(|t| schedule.alpha_bar(t).sqrt())
                .collect(),
            prior_std: cfg.prior_std,
        }
    }
}

/// Sinusoidal embedding `[sin(t f_i), cos(t f_i)]` with geometric frequencies.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| t as f64 * f).collect();
        out.extend(args.iter().map(|a| a.sin()));
        out.extend(args.iter().map(|a| a.cos()));
    }
    Tensor::from_raw(vec![ts.len(), dim], out)
}

struct Ctx<'a> {
    bound: &'a Bound,
    temb: Var,
    pooled: Var,
    attention: &'a AttentionConfig,
}

fn conv(g: &mut Graph, ctx: &Ctx, x: Var, p: Layer, stride: usize) -> Var {
    g.conv2d(x, ctx.bound.var(p.0), Some(ctx.bound.var(p.1)), stride, 1)
}

fn lin(g: &mut Graph, ctx: &Ctx, x: Var, p: Layer) -> Var {
    g.linear(x, ctx.bound.var(p.0), Some(ctx.bound.var(p.1)))
}

fn level(g: &mut Graph, ctx: &Ctx, x: Var, p: &LevelParams, name: &str) -> Result<Var> {
    let h = conv(g, ctx, x, p.conv, 1);
    let shift = lin(g, ctx, ctx.temb, p.time);
    let h = g.channel_affine(h, None, Some(shift));
    let mut h = g.silu(h);
    if p.cin == p.cout {
        h = g.add(h, x);
    }
    let scale = lin(g, ctx, ctx.pooled, p.film_scale);
    let shift = lin(g, ctx, ctx.pooled, p.film_shift);
    let h = g.channel_affine(h, Some(scale), Some(shift));
    let a = lgcaa_forward(g, h, &p.attn, ctx.bound, ctx.attention).map_err(|e| match e {
        Error::NonFinite { stage } => Error::NonFinite {
            stage: format!("{name}.{stage}"),
        },
        other => other,
    })?;
    let out = g.add(h, a);
    g.check_finite(out, name)?;
    Ok(out)
}

/// Predicts the injected noise for `z_t` at timesteps `t` (one per batch
/// item), given frozen feature tokens `c_d`, the condition embedding `c_f`
/// and the anchor latent (see [`anchor_latent`]). With `use_control` false
/// the control branch is skipped entirely.
///
/// The output is the posterior-mean noise under a Gaussian prior of width
/// `prior_std` around the anchor, plus the gated backbone correction. With
/// `s = sqrt(abar_t)` and `n = sqrt(1 - abar_t)` the prior term is
/// `n (z_t - s anchor) / (s^2 prior_std^2 + n^2)`.
///
/// [`anchor_latent`]: crate::conditioning::anchor_latent
#[allow(clippy::too_many_arguments)]
pub fn denoiser_forward(
    g: &mut Graph,
    z_t: Var,
    t: &[usize],
    c_d: Var,
    c_f: Var,
    anchor: Var,
    p: &DenoiserParams,
    bound: &Bound,
    attention: &AttentionConfig,
    use_control: bool,
) -> Result<Var> {
    let [b, lc, h, w] = g
        .value(z_t)
        .dims4()
        .map_err(|_| Error::Dimension(format!("latent must be rank 4, got {:?}", g.shape(z_t))))?;
    if lc != p.latent_channels {
        return Err(Error::Dimension(format!(
            "latent has {lc} channels, model expects {}",
            p.latent_channels
        )));
    }
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::Dimension(format!(
            "latent grid {h}x{w} must be divisible by 4"
        )));
    }
    if t.len() != b {
        return Err(Error::Dimension(format!(
            "{} timesteps for batch {b}",
            t.len()
        )));
    }
    if g.shape(c_f) != g.shape(z_t) {
        return Err(Error::Dimension(format!(
            "condition embedding {:?} does not match latent {:?}",
            g.shape(c_f),
            g.shape(z_t)
        )));
    }
    if g.shape(anchor) != g.shape(z_t) {
        return Err(Error::Dimension(format!(
            "anchor {:?} does not match latent {:?}",
            g.shape(anchor),
            g.shape(z_t)
        )));
    }
    let cd_shape = g.shape(c_d).to_vec();
    if cd_shape.len() != 3 || cd_shape[0] != b || cd_shape[2] != FEATURE_DIM {
        return Err(Error::Dimension(format!(
            "feature tokens must be ({b}, n, {FEATURE_DIM}), got {cd_shape:?}"
        )));
    }

    let temb = g.constant(timestep_embedding(t, p.time_dim));
    let temb = g.linear(temb, bound.var(p.time.0), Some(bound.var(p.time.1)));
    let temb = g.silu(temb);
    let pooled = g.mean_tokens(c_d);
    let ctx = Ctx {
        bound,
        temb,
        pooled,
        attention,
    };

    let x0 = conv(g, &ctx, z_t, p.conv_in, 1);
    let mut skip1 = level(g, &ctx, x0, &p.d1, "d1")?;
    let x = conv(g, &ctx, skip1, p.down1, 2);
    let mut skip2 = level(g, &ctx, x, &p.d2, "d2")?;

    if use_control {
        let cp = &p.control;
        let cin = zero_conv(g, c_f, &cp.cond_in, bound);
        let cx = g.add(z_t, cin);
        let cx = conv(g, &ctx, cx, cp.conv_in, 1);
        let c1 = level(g, &ctx, cx, &cp.d1, "control.d1")?;
        let cx = conv(g, &ctx, c1, cp.down1, 2);
        let c2 = level(g, &ctx, cx, &cp.d2, "control.d2")?;
        let r1 = zero_conv(g, c1, &cp.link1, bound);
        let r2 = zero_conv(g, c2, &cp.link2, bound);
        skip1 = g.add(skip1, r1);
        skip2 = g.add(skip2, r2);
    }

    let x = conv(g, &ctx, skip2, p.down2, 2);
    let x = level(g, &ctx, x, &p.mid, "mid")?;
    let x = g.upsample_nearest(x, 2);
    let x = g.concat_channels(x, skip2);
    let x = level(g, &ctx, x, &p.u2, "u2")?;
    let x = g.upsample_nearest(x, 2);
    let x = g.concat_channels(x, skip1);
    let x = level(g, &ctx, x, &p.u1, "u1")?;
    let x = g.silu(x);
    let head = conv(g, &ctx, x, p.conv_out, 1);
    let head = zero_conv(g, head, &p.head_gate, bound);
    let per_item = h * w * lc;
    let tau2 = p.prior_std * p.prior_std;
    let mut gain = Vec::with_capacity(b * per_item);
    let mut shrunk = Vec::with_capacity(b * per_item);
    for &ti in t {
        let s = *p.signal.get(ti).ok_or_else(|| {
            Error::Validation(format!("timestep {ti} outside 0..{}", p.signal.len()))
        })?;
        let n2 = (1.0 - s * s).max(0.0);
        let k = n2.sqrt() / (s * s * tau2 + n2);
        gain.extend(std::iter::repeat_n(k, per_item));
        shrunk.extend(std::iter::repeat_n(-k * s, per_item));
    }
    let shape = [b, lc, h, w];
    let gain = g.constant(Tensor::from_raw(shape.to_vec(), gain));
    let shrunk = g.constant(Tensor::from_raw(shape.to_vec(), shrunk));
    let a = g.mul(z_t, gain);
    let c = g.mul(anchor, shrunk);
    let prior = g.add(a, c);
    let out = g.add(prior, head);
    g.check_finite(out, "conv_out")?;
    Ok(out)
}

/// Everything needed to train and sample: parameters, schedule and the
/// frozen auxiliary networks.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub scale_factor: usize,
    pub store: ParamStore,
    pub denoiser: DenoiserParams,
    pub cond: ConditionParams,
    pub schedule: Schedule,
    pub features: FeatureEncoder,
    pub perceptual: PerceptualExtractor,
}

impl Model {
    pub fn new(config: &ModelConfig, scale_factor: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if scale_factor == 0 {
            return Err(Error::Validation("scale_factor must be >= 1".into()));
        }
        let schedule = config.schedule.build()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x1417));
        let mut store = ParamStore::new();
        let denoiser = DenoiserParams::new(&mut store, config, &schedule, &mut rng);
        let cond = ConditionParams::new(&mut store, scale_factor, config.patch_size, &mut rng);
        Ok(Self {
            config: config.clone(),
            scale_factor,
            store,
            denoiser,
            cond,
            schedule,
            features: FeatureEncoder::new(config.feature_seed),
            perceptual: PerceptualExtractor::new(config.perceptual_seed),
        })
    }

    /// Frozen tensors stay constants on the tape when `freeze` is set.
    pub fn is_trainable(role: ParamRole, freeze: bool) -> bool {
        !(freeze && role == ParamRole::Backbone)
    }

    /// Control branch minus the zero links: copies of the backbone down path.
    pub fn control_ids(&self) -> Vec<ParamId> {
        self.store
            .ids()
            .filter(|&id| self.store.entry(id).role == ParamRole::Control)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mini() -> ModelConfig {
        ModelConfig {
            width: 8,
            time_dim: 8,
            attention: AttentionConfig {
                num_heads: 2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn forward(m: &Model, z: &Tensor, use_control: bool) -> Tensor {
        let mut g = Graph::new();
        let bound = m.store.bind_frozen(&mut g);
        let zt = g.constant(z.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cd = g.constant(Tensor::randn(
            &[z.shape()[0], 4, FEATURE_DIM],
            1.0,
            &mut rng,
        ));
        let cf = g.constant(Tensor::randn(z.shape(), 1.0, &mut rng));
        let anchor = g.constant(Tensor::randn(z.shape(), 0.5, &mut rng));
        let ts = vec![17; z.shape()[0]];
        let y = denoiser_forward(
            &mut g,
            zt,
            &ts,
            cd,
            cf,
            anchor,
            &m.denoiser,
            &bound,
            &m.config.attention,
            use_control,
        )
        .unwrap();
        g.value(y).clone()
    }

    #[test]
    fn output_matches_latent_shape() {
        let m = Model::new(&mini(), 4, 0).unwrap();
        let z = Tensor::randn(&[1, 12, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let y = forward(&m, &z, true);
        assert_eq!(y.shape(), z.shape());
        assert!(y.is_finite());
    }

    #[test]
    fn fresh_control_branch_is_silent() {
        let m = Model::new(&mini(), 4, 3).unwrap();
        let z = Tensor::randn(&[2, 12, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        assert!(forward(&m, &z, true).bit_eq(&forward(&m, &z, false)));
    }

    #[test]
    fn control_starts_as_exact_copy() {
        let m = Model::new(&mini(), 4, 5).unwrap();
        let copies = m.control_ids();
        assert!(!copies.is_empty());
        for id in copies {
            let e = m.store.entry(id);
            let src = m
                .store
                .find(e.name.strip_prefix("control.").unwrap())
                .unwrap();
            assert!(m.store.get(src).bit_eq(&e.value), "{}", e.name);
        }
        for id in m.store.ids() {
            let e = m.store.entry(id);
            if e.role == ParamRole::ZeroConv {
                assert!(e.value.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn timestep_embedding_layout() {
        let e = timestep_embedding(&[0, 5], 4);
        assert_eq!(e.data()[..4], [0.0, 0.0, 1.0, 1.0]);
        assert!((e.data()[4] - 5f64.sin()).abs() < 1e-15);
        assert!((e.data()[5] - (5.0f64 * 0.01).sin()).abs() < 1e-15);
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let m = Model::new(&mini(), 4, 0).unwrap();
        let mut g = Graph::new();
        let bound = m.store.bind_frozen(&mut g);
        let z = g.constant(Tensor::zeros(&[1, 12, 6, 6]));
        let cd = g.constant(Tensor::zeros(&[1, 1, FEATURE_DIM]));
        let r = denoiser_forward(
            &mut g,
            z,
            &[1],
            cd,
            z,
            z,
            &m.denoiser,
            &bound,
            &m.config.attention,
            true,
        );
        assert!(matches!(r, Err(Error::Dimension(_))));
    }
}
