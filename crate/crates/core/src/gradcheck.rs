//! Finite-difference gradient oracle and a registry of differentiable ops
//! that can be checked against it at miniature sizes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conditioning::{cond_to_rgb, embed_condition, ConditionParams, FEATURE_DIM};
use crate::diffusion::denoiser::{denoiser_forward, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::lgcaa::{
    global_attention, lgcaa_forward, local_attention, AttentionConfig, AttentionParams,
};
use crate::losses::{distribution_loss, perceptual_loss, PerceptualExtractor};
use crate::params::{Bound, ParamRole, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

pub const REGISTERED_OPS: [&str; 8] = [
    "lgcaa_forward",
    "local_attention",
    "global_attention",
    "embed_condition",
    "cond_to_rgb",
    "perceptual_loss",
    "distribution_loss",
    "denoiser_forward",
];

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn finite_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::Validation(format!("step must be positive, got {h}")));
    }
    let mut buf = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        buf[i] = x[i] + h;
        let up = f(&buf);
        if !up.is_finite() {
            return Err(Error::FiniteDiff {
                index: i,
                direction: "+h",
            });
        }
        buf[i] = x[i] - h;
        let down = f(&buf);
        if !down.is_finite() {
            return Err(Error::FiniteDiff {
                index: i,
                direction: "-h",
            });
        }
        buf[i] = x[i];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub op_name: String,
    pub max_rel_err: f64,
    /// Tensor name and flat index of the worst coordinate.
    pub worst_index: (String, usize),
    pub tolerance: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<18} {} max_rel_err={:.3e} at {}[{}] tol={:.1e}",
            self.op_name,
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_err,
            self.worst_index.0,
            self.worst_index.1,
            self.tolerance
        )
    }
}

/// Miniature sizes for [`check_op`]. Each op reads the fields it needs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeSpec {
    pub batch: usize,
    pub heads: usize,
    pub tokens: usize,
    pub head_dim: usize,
    pub channels: usize,
    pub size: usize,
}

impl Default for ShapeSpec {
    fn default() -> Self {
        Self {
            batch: 1,
            heads: 2,
            tokens: 3,
            head_dim: 2,
            channels: 4,
            size: 4,
        }
    }
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// Named leaf tensors plus a closure that builds the op's output from them.
struct Case {
    leaves: Vec<(String, Tensor)>,
    build: Build,
}

/// Replaces zero-initialized tensors with small random values so every path
/// carries gradient, and jitters layer-norm gains away from one. Weights are
/// scaled by fan-in so activations stay of order one; large intermediates
/// would bury the difference quotients in rounding noise.
fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let t = store.get_mut(id);
        let fan_in = match t.shape() {
            [i, _] => Some(*i),
            [_, c, kh, kw] => Some(c * kh * kw),
            _ => None,
        };
        if let Some(fan_in) = fan_in {
            *t = Tensor::randn(t.shape(), 1.0 / (fan_in as f64).sqrt(), rng);
        } else if t.data().iter().all(|&v| v == 1.0) {
            for v in t.data_mut() {
                *v += 0.2 * (rng.gen::<f64>() - 0.5);
            }
        } else {
            *t = Tensor::randn(t.shape(), 0.1, rng);
        }
    }
}

fn store_leaves(store: &ParamStore) -> Vec<(String, Tensor)> {
    store
        .entries()
        .iter()
        .map(|e| (e.name.clone(), e.value.clone()))
        .collect()
}

fn bound_from(vars: &[Var]) -> Bound {
    Bound::from_vars(vars.to_vec())
}

fn make_case(op: &str, s: &ShapeSpec, rng: &mut ChaCha8Rng) -> Result<Case> {
    let case = match op {
        "local_attention" => {
            let shape = [s.batch, s.heads, s.tokens, s.head_dim];
            let leaves = ["q", "k", "v"]
                .iter()
                .map(|n| (n.to_string(), Tensor::randn(&shape, 1.0, rng)))
                .collect();
            Case {
                leaves,
                build: Box::new(|g, v| local_attention(g, v[0], v[1], v[2], 1e-6)),
            }
        }
        "global_attention" | "lgcaa_forward" => {
            let cfg = AttentionConfig {
                num_heads: s.heads,
                global_embed_dim: s.heads * s.head_dim,
                ..Default::default()
            };
            let mut store = ParamStore::new();
            let p = AttentionParams::new(
                &mut store,
                "attn",
                s.channels,
                &cfg,
                ParamRole::Attention,
                rng,
            );
            randomize(&mut store, rng);
            let mut leaves = if op == "global_attention" {
                vec![(
                    "tokens".to_string(),
                    Tensor::randn(&[s.batch, s.tokens, s.channels], 1.0, rng),
                )]
            } else {
                let side = (s.size / 2).max(1);
                vec![(
                    "s".to_string(),
                    Tensor::randn(&[s.batch, s.channels, side, side], 1.0, rng),
                )]
            };
            leaves.extend(store_leaves(&store));
            let global = op == "global_attention";
            Case {
                leaves,
                build: Box::new(move |g, v| {
                    let bound = bound_from(&v[1..]);
                    if global {
                        global_attention(g, v[0], &p, &bound, &cfg)
                    } else {
                        lgcaa_forward(g, v[0], &p, &bound, &cfg)
                    }
                }),
            }
        }
        "embed_condition" | "cond_to_rgb" => {
            let mut store = ParamStore::new();
            let p = ConditionParams::new(&mut store, 2, 2, rng);
            randomize(&mut store, rng);
            let side = (s.size / 2).max(1);
            let embed = op == "embed_condition";
            let mut leaves = if embed {
                vec![(
                    "y".to_string(),
                    Tensor::uniform(&[s.batch, 3, side, side], 0.0, 1.0, rng),
                )]
            } else {
                vec![(
                    "c_f".to_string(),
                    Tensor::randn(&[s.batch, 12, side, side], 1.0, rng),
                )]
            };
            leaves.extend(store_leaves(&store));
            Case {
                leaves,
                build: Box::new(move |g, v| {
                    let bound = bound_from(&v[1..]);
                    if embed {
                        embed_condition(g, v[0], &p, &bound)
                    } else {
                        cond_to_rgb(g, v[0], &p, &bound)
                    }
                }),
            }
        }
        "perceptual_loss" => {
            let phi = PerceptualExtractor::new(rng.gen());
            let shape = [s.batch, 3, 2 * s.size, 2 * s.size];
            let target = Tensor::uniform(&shape, 0.0, 1.0, rng);
            Case {
                leaves: vec![("x_rgb".to_string(), Tensor::uniform(&shape, 0.0, 1.0, rng))],
                build: Box::new(move |g, v| {
                    let x = g.constant(target.clone());
                    perceptual_loss(g, x, v[0], &phi)
                }),
            }
        }
        "distribution_loss" => {
            let shape = [s.batch, 3, s.size, s.size];
            Case {
                leaves: vec![
                    ("x".to_string(), Tensor::uniform(&shape, 0.0, 1.0, rng)),
                    ("x_rgb".to_string(), Tensor::uniform(&shape, 0.0, 1.0, rng)),
                ],
                build: Box::new(|g, v| distribution_loss(g, v[0], v[1])),
            }
        }
        "denoiser_forward" => {
            let cfg = ModelConfig {
                width: s.channels,
                time_dim: 8,
                attention: AttentionConfig {
                    num_heads: 1,
                    global_embed_dim: (s.channels / 2).max(1),
                    ..Default::default()
                },
                ..Default::default()
            };
            let mut model = Model::new(&cfg, 2, rng.gen())?;
            randomize(&mut model.store, rng);
            let lc = cfg.latent_channels();
            let shape = [s.batch, lc, s.size, s.size];
            let mut leaves = vec![
                ("z_t".to_string(), Tensor::randn(&shape, 1.0, rng)),
                (
                    "c_d".to_string(),
                    Tensor::randn(&[s.batch, 2, FEATURE_DIM], 1.0, rng),
                ),
                ("c_f".to_string(), Tensor::randn(&shape, 1.0, rng)),
                ("anchor".to_string(), Tensor::randn(&shape, 0.5, rng)),
            ];
            leaves.extend(store_leaves(&model.store));
            let t: Vec<usize> = (0..s.batch)
                .map(|_| rng.gen_range(1..=model.schedule.len()))
                .collect();
            Case {
                leaves,
                build: Box::new(move |g, v| {
                    let bound = bound_from(&v[4..]);
                    denoiser_forward(
                        g,
                        v[0],
                        &t,
                        v[1],
                        v[2],
                        v[3],
                        &model.denoiser,
                        &bound,
                        &cfg.attention,
                        true,
                    )
                }),
            }
        }
        _ => {
            return Err(Error::UnknownOp {
                name: op.to_string(),
                registered: REGISTERED_OPS.join(", "),
            })
        }
    };
    Ok(case)
}

/// Fixed random output weights, plus the output at the unperturbed point.
#[derive(Clone)]
struct Probe {
    weights: Tensor,
    center: Tensor,
}

/// Scalar objective: the output, minus its value at the base point, weighted
/// by fixed random coefficients. Centering leaves the gradient unchanged but
/// keeps the final sum small, so difference quotients lose fewer bits.
fn objective(
    g: &mut Graph,
    case: &Case,
    probe: &mut Option<Probe>,
    leaves: &[Tensor],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, Vec<Var>)> {
    let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
    let out = (case.build)(g, &vars)?;
    if probe.is_none() {
        let rng = rng.expect("weights drawn on first evaluation");
        *probe = Some(Probe {
            weights: Tensor::randn(g.shape(out), 1.0, rng),
            center: g.value(out).clone(),
        });
    }
    let p = probe.as_ref().expect("probe set");
    let (w, c) = (g.constant(p.weights.clone()), g.constant(p.center.clone()));
    let d = g.sub(out, c);
    let prod = g.mul(d, w);
    Ok((g.sum(prod), vars))
}

/// Compares analytic and central-difference gradients of `op` with respect
/// to all its inputs and parameters. Inputs are redrawn until every kink on
/// the tape is at least `10 h` away.
pub fn check_op(op: &str, spec: &ShapeSpec, tol: f64, seed: u64) -> Result<GradReport> {
    check_op_with_step(op, spec, tol, seed, DEFAULT_STEP)
}

pub fn check_op_with_step(
    op: &str,
    spec: &ShapeSpec,
    tol: f64,
    seed: u64,
    h: f64,
) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut attempt = 0;
    let (case, probe) = loop {
        attempt += 1;
        let case = make_case(op, spec, &mut rng)?;
        let leaves: Vec<Tensor> = case.leaves.iter().map(|(_, t)| t.clone()).collect();
        let mut g = Graph::new();
        let mut probe = None;
        objective(&mut g, &case, &mut probe, &leaves, Some(&mut rng))?;
        if g.kink_margin() >= 10.0 * h {
            break (case, probe);
        }
        if attempt >= 100 {
            return Err(Error::Validation(format!(
                "{op}: could not draw inputs away from kinks"
            )));
        }
    };
    let mut probe = probe;
    let leaves: Vec<Tensor> = case.leaves.iter().map(|(_, t)| t.clone()).collect();
    let mut g = Graph::new();
    let (root, vars) = objective(&mut g, &case, &mut probe, &leaves, None)?;
    let grads = g.backward(root);

    let mut worst = (0.0f64, (String::new(), 0usize));
    for (k, (name, t)) in case.leaves.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape()));
        let f = |x: &[f64]| {
            let mut local = leaves.clone();
            local[k] = Tensor::new(t.shape().to_vec(), x.to_vec()).expect("same size");
            let mut g = Graph::new();
            let mut w = probe.clone();
            match objective(&mut g, &case, &mut w, &local, None) {
                Ok((root, _)) => g.value(root).item(),
                Err(_) => f64::NAN,
            }
        };
        let fd = finite_diff(f, t.data(), h)?;
        for (i, (a, b)) in analytic.data().iter().zip(&fd).enumerate() {
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
            if rel > worst.0 || worst.1 .0.is_empty() {
                worst = (rel.max(worst.0), (name.clone(), i));
            }
        }
    }
    Ok(GradReport {
        op_name: op.to_string(),
        max_rel_err: worst.0,
        worst_index: worst.1,
        tolerance: tol,
        passed: worst.0 < tol,
    })
}

/// Runs every registered op once per seed.
pub fn check_all(seeds: &[u64], tol: f64) -> Result<Vec<GradReport>> {
    let mut out = Vec::new();
    for op in REGISTERED_OPS {
        for &seed in seeds {
            out.push(check_op(op, &ShapeSpec::default(), tol, seed)?);
        }
    }
    Ok(out)
}
