//! Local-global context-aware attention block.
//!
//! Tokens are layer-normed and projected to queries, keys and values. Queries
//! and keys are divided by their per-head maximum magnitude (floored at `eps`)
//! before scaled dot-product attention. The merged result is projected,
//! normalized, mixed by a global attention stage in a smaller embedding space
//! whose output is clamped, normalized once more, and passed through an MLP.
//! The block has no internal residual; the host network adds one.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{lecun, Bound, ParamId, ParamRole, ParamStore};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalMode {
    /// Softmax over every spatial position.
    #[default]
    FullSequence,
    /// Softmax restricted to non-overlapping `window x window` tiles.
    Windowed,
}

/// Which parts of the block are active. Everything except `Full` exists for
/// ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    /// Standard softmax attention: no max-normalization, no global stage, no
    /// post-projection norm.
    Plain,
    /// Normalized local attention without the global stage.
    LocalOnly,
    /// Global stage only, applied straight after the input norm.
    GlobalOnly,
    /// Local and global stages without the final norm before the MLP.
    NoFinalNorm,
    #[default]
    Full,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 5] = [
        AttentionVariant::Plain,
        AttentionVariant::LocalOnly,
        AttentionVariant::GlobalOnly,
        AttentionVariant::NoFinalNorm,
        AttentionVariant::Full,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AttentionVariant::Plain => "No LGCAA",
            AttentionVariant::LocalOnly => "Local",
            AttentionVariant::GlobalOnly => "Global",
            AttentionVariant::NoFinalNorm => "L+G w/o norm",
            AttentionVariant::Full => "LGCAA",
        }
    }

    fn uses_local(self) -> bool {
        !matches!(self, AttentionVariant::GlobalOnly)
    }

    fn uses_global(self) -> bool {
        matches!(
            self,
            AttentionVariant::GlobalOnly | AttentionVariant::NoFinalNorm | AttentionVariant::Full
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    pub num_heads: usize,
    pub eps: f64,
    pub clamp_lo: f64,
    pub clamp_hi: f64,
    pub local_mode: LocalMode,
    pub window: usize,
    /// Width of the global-attention embedding; 0 means half the channels.
    pub global_embed_dim: usize,
    pub variant: AttentionVariant,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            num_heads: 2,
            eps: 1e-6,
            clamp_lo: -1.0,
            clamp_hi: 1.0,
            local_mode: LocalMode::FullSequence,
            window: 4,
            global_embed_dim: 0,
            variant: AttentionVariant::Full,
        }
    }
}

impl AttentionConfig {
    pub fn embed_dim(&self, channels: usize) -> usize {
        if self.global_embed_dim == 0 {
            (channels / 2).max(self.num_heads)
        } else {
            self.global_embed_dim
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.num_heads == 0 || !channels.is_multiple_of(self.num_heads) {
            return Err(Error::Validation(format!(
                "{channels} channels are not divisible by {} heads",
                self.num_heads
            )));
        }
        if !self.embed_dim(channels).is_multiple_of(self.num_heads) {
            return Err(Error::Validation(format!(
                "global embedding width {} is not divisible by {} heads",
                self.embed_dim(channels),
                self.num_heads
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Validation("attention eps must be positive".into()));
        }
        if !(self.clamp_lo < self.clamp_hi) {
            return Err(Error::Validation(format!(
                "clamp bounds [{}, {}] are empty",
                self.clamp_lo, self.clamp_hi
            )));
        }
        if self.local_mode == LocalMode::Windowed && self.window == 0 {
            return Err(Error::Validation("window must be >= 1".into()));
        }
        Ok(())
    }
}

/// Handles to the tensors of one block inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub channels: usize,
    pub embed: usize,
    pub ln1: (ParamId, ParamId),
    pub q: (ParamId, ParamId),
    /// Key projections carry no bias. A key bias shifts every logit of a
    /// row equally (up to the max-normalization scale), which the softmax
    /// ignores, so it would receive next to no gradient.
    pub k: ParamId,
    pub v: (ParamId, ParamId),
    pub proj_out: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
    pub ga_in: (ParamId, ParamId),
    pub ga_q: (ParamId, ParamId),
    pub ga_k: ParamId,
    pub ga_v: (ParamId, ParamId),
    pub ga_out: (ParamId, ParamId),
    pub ga_back: (ParamId, ParamId),
    pub ln3: (ParamId, ParamId),
    pub mlp_in: (ParamId, ParamId),
    pub mlp_out: (ParamId, ParamId),
}

impl AttentionParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        cfg: &AttentionConfig,
        role: ParamRole,
        rng: &mut R,
    ) -> Self {
        let c = channels;
        let e = cfg.embed_dim(c);
        let k = store.add(format!("{prefix}.k.w"), lecun(&[c, c], c, 1.0, rng), role);
        let ga_k = store.add(
            format!("{prefix}.ga_k.w"),
            lecun(&[e, e], e, 1.0, rng),
            role,
        );
        let mut linear = |name: &str, fin: usize, fout: usize, gain: f64| {
            let w = store.add(
                format!("{prefix}.{name}.w"),
                lecun(&[fin, fout], fin, gain, rng),
                role,
            );
            let b = store.add(format!("{prefix}.{name}.b"), Tensor::zeros(&[fout]), role);
            (w, b)
        };
        let q = linear("q", c, c, 1.0);
        let v = linear("v", c, c, 1.0);
        let proj_out = linear("proj_out", c, c, 1.0);
        let ga_in = linear("ga_in", c, e, 1.0);
        let ga_q = linear("ga_q", e, e, 1.0);
        let ga_v = linear("ga_v", e, e, 1.0);
        let ga_out = linear("ga_out", e, e, 1.0);
        let ga_back = linear("ga_back", e, c, 1.0);
        let mlp_in = linear("mlp_in", c, 4 * c, 1.0);
        // keep the residual contribution small at init
        let mlp_out = linear("mlp_out", 4 * c, c, 0.1);
        let mut norm = |name: &str| {
            let g = store.add(
                format!("{prefix}.{name}.gain"),
                Tensor::full(&[c], 1.0),
                role,
            );
            let b = store.add(format!("{prefix}.{name}.bias"), Tensor::zeros(&[c]), role);
            (g, b)
        };
        let ln1 = norm("ln1");
        let ln2 = norm("ln2");
        let ln3 = norm("ln3");
        Self {
            channels: c,
            embed: e,
            ln1,
            q,
            k,
            v,
            proj_out,
            ln2,
            ga_in,
            ga_q,
            ga_k,
            ga_v,
            ga_out,
            ga_back,
            ln3,
            mlp_in,
            mlp_out,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [
            self.ln1,
            self.q,
            self.v,
            self.proj_out,
            self.ln2,
            self.ga_in,
            self.ga_q,
            self.ga_v,
            self.ga_out,
            self.ga_back,
            self.ln3,
            self.mlp_in,
            self.mlp_out,
        ]
        .iter()
        .flat_map(|&(a, b)| [a, b])
        .chain([self.k, self.ga_k])
        .collect()
    }
}

fn lin(g: &mut Graph, bound: &Bound, x: Var, p: (ParamId, ParamId)) -> Var {
    g.linear(x, bound.var(p.0), Some(bound.var(p.1)))
}

fn norm(g: &mut Graph, bound: &Bound, x: Var, p: (ParamId, ParamId)) -> Var {
    g.layer_norm(x, bound.var(p.0), bound.var(p.1), LN_EPS)
}

/// `(b, n, c)` tokens to `(b * heads, n, c / heads)`.
fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Var {
    let [b, n, c] = g.value(x).dims3().expect("token rank");
    let d = c / heads;
    let x = g.reshape(x, &[b, n, heads, d]);
    let x = g.permute(x, &[0, 2, 1, 3]);
    g.reshape(x, &[b * heads, n, d])
}

fn merge_heads(g: &mut Graph, x: Var, heads: usize) -> Var {
    let [bh, n, d] = g.value(x).dims3().expect("head rank");
    let b = bh / heads;
    let x = g.reshape(x, &[b, heads, n, d]);
    let x = g.permute(x, &[0, 2, 1, 3]);
    g.reshape(x, &[b, n, heads * d])
}

fn check_heads(g: &Graph, q: Var, k: Var, v: Var) -> Result<[usize; 4]> {
    let shape = g.shape(q).to_vec();
    if shape.len() != 4 {
        return Err(Error::Dimension(format!(
            "queries must be (batch, heads, tokens, dim), got {shape:?}"
        )));
    }
    if g.shape(k) != shape.as_slice() || g.shape(v) != shape.as_slice() {
        return Err(Error::Dimension(format!(
            "q/k/v shapes differ: {:?} {:?} {:?}",
            shape,
            g.shape(k),
            g.shape(v)
        )));
    }
    Ok([shape[0], shape[1], shape[2], shape[3]])
}

/// Softmax(q k^T / sqrt(d)) rows over `(groups, n, d)` inputs, with optional
/// per-group max-normalization of q and k.
fn weights_3d(g: &mut Graph, q: Var, k: Var, eps: Option<f64>) -> Var {
    let [_, n, d] = g.value(q).dims3().expect("head rank");
    let (q, k) = match eps {
        Some(eps) => (g.max_norm(q, n * d, eps), g.max_norm(k, n * d, eps)),
        None => (q, k),
    };
    let s = g.bmm(q, k, true);
    let s = g.scale(s, 1.0 / (d as f64).sqrt());
    g.softmax(s)
}

fn attend_3d(g: &mut Graph, q: Var, k: Var, v: Var, eps: Option<f64>) -> Var {
    let a = weights_3d(g, q, k, eps);
    g.bmm(a, v, false)
}

/// Attention weights `(b, heads, n, n)` of the normalized local stage.
pub fn local_attention_weights(g: &mut Graph, q: Var, k: Var, eps: f64) -> Result<Var> {
    let [b, h, n, d] = check_heads(g, q, k, k)?;
    let q = g.reshape(q, &[b * h, n, d]);
    let k = g.reshape(k, &[b * h, n, d]);
    let a = weights_3d(g, q, k, Some(eps));
    Ok(g.reshape(a, &[b, h, n, n]))
}

/// Normalized scaled dot-product attention over `(b, heads, n, d)` arrays.
pub fn local_attention(g: &mut Graph, q: Var, k: Var, v: Var, eps: f64) -> Result<Var> {
    if !(eps > 0.0) {
        return Err(Error::Validation("eps must be positive".into()));
    }
    let [b, h, n, d] = check_heads(g, q, k, v)?;
    let q = g.reshape(q, &[b * h, n, d]);
    let k = g.reshape(k, &[b * h, n, d]);
    let v = g.reshape(v, &[b * h, n, d]);
    let out = attend_3d(g, q, k, v, Some(eps));
    Ok(g.reshape(out, &[b, h, n, d]))
}

/// Projects `(b, n, c)` tokens into the global embedding, runs multi-head
/// self-attention over the whole sequence, projects back and clamps.
pub fn global_attention(
    g: &mut Graph,
    tokens: Var,
    p: &AttentionParams,
    bound: &Bound,
    cfg: &AttentionConfig,
) -> Result<Var> {
    let shape = g.shape(tokens).to_vec();
    if shape.len() != 3 || shape[2] != p.channels {
        return Err(Error::Dimension(format!(
            "global attention expects (batch, tokens, {}), got {shape:?}",
            p.channels
        )));
    }
    let e = lin(g, bound, tokens, p.ga_in);
    let q = lin(g, bound, e, p.ga_q);
    let k = g.linear(e, bound.var(p.ga_k), None);
    let v = lin(g, bound, e, p.ga_v);
    let heads = cfg.num_heads;
    let (q, k, v) = (
        split_heads(g, q, heads),
        split_heads(g, k, heads),
        split_heads(g, v, heads),
    );
    let o = attend_3d(g, q, k, v, None);
    let o = merge_heads(g, o, heads);
    let o = lin(g, bound, o, p.ga_out);
    let o = lin(g, bound, o, p.ga_back);
    Ok(g.clamp(o, cfg.clamp_lo, cfg.clamp_hi))
}

/// Feature map `(b, c, h, w)` to token groups. Full-sequence mode gives
/// `(b, h*w, c)` in raster order; windowed mode gives one group per tile.
fn to_tokens(g: &mut Graph, s: Var, cfg: &AttentionConfig) -> Var {
    let [b, c, h, w] = g.value(s).dims4().expect("feature rank");
    match cfg.local_mode {
        LocalMode::FullSequence => {
            let t = g.reshape(s, &[b, c, h * w]);
            g.permute(t, &[0, 2, 1])
        }
        LocalMode::Windowed => {
            let r = cfg.window;
            let t = g.reshape(s, &[b * c * (h / r), r, w / r, r]);
            // (b c hb) r wb r -> (b c hb) wb r r
            let t = g.permute(t, &[0, 2, 1, 3]);
            let t = g.reshape(t, &[b, c, (h / r) * (w / r), r * r]);
            let t = g.permute(t, &[0, 2, 3, 1]);
            g.reshape(t, &[b * (h / r) * (w / r), r * r, c])
        }
    }
}

/// Inverse of [`to_tokens`] for windowed groups, back to raster `(b, h*w, c)`.
fn windows_to_raster(g: &mut Graph, t: Var, dims: [usize; 4], r: usize) -> Var {
    let [b, c, h, w] = dims;
    let t = g.reshape(t, &[b, (h / r) * (w / r), r * r, c]);
    let t = g.permute(t, &[0, 3, 1, 2]);
    let t = g.reshape(t, &[b * c * (h / r), w / r, r, r]);
    let t = g.permute(t, &[0, 2, 1, 3]);
    let t = g.reshape(t, &[b, c, h * w]);
    g.permute(t, &[0, 2, 1])
}

/// Runs the block on a `(b, c, h, w)` feature map and returns the same shape.
pub fn lgcaa_forward(
    g: &mut Graph,
    s: Var,
    p: &AttentionParams,
    bound: &Bound,
    cfg: &AttentionConfig,
) -> Result<Var> {
    let dims = g.value(s).dims4().map_err(|_| {
        Error::Dimension(format!(
            "attention input must be rank 4, got {:?}",
            g.shape(s)
        ))
    })?;
    let [b, c, h, w] = dims;
    if c != p.channels {
        return Err(Error::Dimension(format!(
            "attention built for {} channels, got {c}",
            p.channels
        )));
    }
    if h * w == 0 {
        return Err(Error::Dimension(
            "attention input has no spatial positions".into(),
        ));
    }
    cfg.validate(c)?;
    let windowed = cfg.local_mode == LocalMode::Windowed;
    if windowed && (h % cfg.window != 0 || w % cfg.window != 0) {
        return Err(Error::Dimension(format!(
            "window {} does not divide {h}x{w}",
            cfg.window
        )));
    }
    let variant = cfg.variant;

    let tokens = to_tokens(g, s, cfg);
    let mut x = norm(g, bound, tokens, p.ln1);

    if variant.uses_local() {
        let heads = cfg.num_heads;
        let q = lin(g, bound, x, p.q);
        let k = g.linear(x, bound.var(p.k), None);
        let v = lin(g, bound, x, p.v);
        let (q, k, v) = (
            split_heads(g, q, heads),
            split_heads(g, k, heads),
            split_heads(g, v, heads),
        );
        let eps = (variant != AttentionVariant::Plain).then_some(cfg.eps);
        let o = attend_3d(g, q, k, v, eps);
        let o = merge_heads(g, o, heads);
        x = lin(g, bound, o, p.proj_out);
        if variant != AttentionVariant::Plain {
            x = norm(g, bound, x, p.ln2);
        }
        g.check_finite(x, "lgcaa.local_attention")?;
    }
    if windowed {
        x = windows_to_raster(g, x, dims, cfg.window);
    }
    if variant.uses_global() {
        x = global_attention(g, x, p, bound, cfg)?;
        g.check_finite(x, "lgcaa.global_attention")?;
    }
    if variant != AttentionVariant::NoFinalNorm {
        x = norm(g, bound, x, p.ln3);
    }
    let hdn = lin(g, bound, x, p.mlp_in);
    let hdn = g.silu(hdn);
    let y = lin(g, bound, hdn, p.mlp_out);
    g.check_finite(y, "lgcaa.mlp")?;
    let y = g.permute(y, &[0, 2, 1]);
    Ok(g.reshape(y, &[b, c, h, w]))
}
