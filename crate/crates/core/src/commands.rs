//! Experiment drivers behind the command-line subcommands. Each writes into
//! `<out>/<run_name>/<command>/` together with a copy of the run config and
//! its hash, and refuses to reuse an existing directory unless forced.

use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::codec::encode;
use crate::config::RunConfig;
use crate::degradation::{bicubic_upsample, load_pairs, save_pairs, synth_dataset, PairDataset};
use crate::diffusion::{ddpm_sample, train, Model, TrainReport};
use crate::error::{Error, Result};
use crate::gradcheck::{check_all, GradReport};
use crate::image::{read_ppm, write_ppm_with_comment};
use crate::lgcaa::AttentionVariant;
use crate::losses::LossWeights;
use crate::metrics::{
    evaluate_samples, latent_hist_report, pd_sweep, psnr, ssim, sweep_csv, MetricsRecord,
};
use crate::tensor::Tensor;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.json";
pub const CONFIG_HASH_FILE: &str = "config_hash.txt";

/// Creates `<out>/<run_name>/<command>`, failing if it exists and `force` is
/// not set. Writes the config copy and hash.
pub fn prepare_dir(cfg: &RunConfig, out: &Path, command: &str, force: bool) -> Result<PathBuf> {
    let dir = out.join(&cfg.run_name).join(command);
    if dir.exists() {
        if !force {
            return Err(Error::Validation(format!(
                "output directory {} already exists (use --force to overwrite)",
                dir.display()
            )));
        }
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let pretty = serde_json::to_string_pretty(cfg).expect("config serializes");
    write_text(&dir.join(CONFIG_FILE), &(pretty + "\n"))?;
    write_text(&dir.join(CONFIG_HASH_FILE), &format!("{}\n", cfg.hash()))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Rebuilds the model a checkpoint was trained with.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<(RunConfig, Model)> {
    let cfg = RunConfig::from_json(&ck.config_json, "checkpoint config")?;
    let mut model = Model::new(&cfg.model, cfg.degradation.scale_factor, cfg.model_seed())?;
    if ck.encoder_seed != model.config.feature_seed {
        return Err(Error::Validation(format!(
            "checkpoint encoder seed {} does not match its config ({})",
            ck.encoder_seed, model.config.feature_seed
        )));
    }
    ck.apply(&mut model.store)?;
    Ok((cfg, model))
}

pub fn load_model(path: &Path) -> Result<(RunConfig, Model)> {
    model_from_checkpoint(&Checkpoint::load(path)?)
}

/// Synthesizes the dataset described by `cfg` and saves it.
pub fn cmd_degrade(cfg: &RunConfig, out: &Path, force: bool) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = prepare_dir(cfg, out, "degrade", force)?;
    let ds = synth_dataset(
        cfg.dataset.count,
        cfg.dataset.hr_size,
        &cfg.degradation,
        cfg.seed,
    )?;
    save_pairs(&ds, &dir)?;
    log::info!("wrote {} pairs to {}", ds.len(), dir.display());
    Ok(dir)
}

/// The dataset from `data_dir`, or a fresh one from the config when absent.
fn dataset_for(cfg: &RunConfig, data_dir: Option<&Path>) -> Result<PairDataset> {
    match data_dir {
        Some(d) => load_pairs(d),
        None => synth_dataset(
            cfg.dataset.count,
            cfg.dataset.hr_size,
            &cfg.degradation,
            cfg.seed,
        ),
    }
}

#[derive(Debug)]
pub struct TrainOutput {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub report: TrainReport,
}

/// Trains a fresh model and persists the checkpoint and loss log. A
/// diverged run still saves its last finite parameters before failing.
pub fn cmd_train(
    cfg: &RunConfig,
    data_dir: Option<&Path>,
    out: &Path,
    force: bool,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let ds = dataset_for(cfg, data_dir)?;
    if ds.scale_factor() != cfg.degradation.scale_factor {
        return Err(Error::Validation(format!(
            "dataset scale factor {} differs from config ({})",
            ds.scale_factor(),
            cfg.degradation.scale_factor
        )));
    }
    let dir = prepare_dir(cfg, out, "train", force)?;
    let mut model = Model::new(&cfg.model, cfg.degradation.scale_factor, cfg.model_seed())?;
    let ck_path = dir.join(CHECKPOINT_FILE);
    let report = match train(&mut model, &ds, &cfg.train_config()) {
        Ok(r) => r,
        Err(Error::Diverged {
            step,
            loss,
            last_good,
        }) => {
            let ck = Checkpoint::new(
                cfg.canonical_json(),
                last_good.encoder_seed,
                last_good.tensors,
            );
            ck.save(&ck_path)?;
            log::error!("saved last finite parameters to {}", ck_path.display());
            return Err(Error::Diverged {
                step,
                loss,
                last_good: Box::new(ck),
            });
        }
        Err(e) => return Err(e),
    };
    Checkpoint::capture(
        &model.store,
        cfg.canonical_json(),
        model.config.feature_seed,
    )
    .save(&ck_path)?;
    write_text(&dir.join("train_log.csv"), &report.loss_csv(&cfg.hash()))?;
    log::info!(
        "trained {} steps: eval loss {:.5} -> {:.5}",
        cfg.train.steps,
        report.initial_eval.loss_total,
        report.final_eval.loss_total
    );
    Ok(TrainOutput {
        dir,
        checkpoint: ck_path,
        report,
    })
}

/// PPM files to upscale: `input` itself or the sorted `.ppm` files inside it.
fn input_images(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| Error::io(input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Validation(format!(
            "no .ppm files in {}",
            input.display()
        )));
    }
    Ok(files)
}

/// Upscales each input image. Writes `<stem>_sr.ppm` files and the sampled
/// latents (`latents.bin`, one tensor per stem).
pub fn cmd_sample(
    checkpoint: &Path,
    input: &Path,
    steps: Option<usize>,
    seed: Option<u64>,
    out: &Path,
    force: bool,
) -> Result<PathBuf> {
    let (cfg, model) = load_model(checkpoint)?;
    let files = input_images(input)?;
    let steps = steps.unwrap_or(cfg.sample.steps);
    let seed = seed.unwrap_or(cfg.seed);
    let dir = prepare_dir(&cfg, out, "sample", force)?;
    let note = format!("config_hash={}", cfg.hash());
    let mut latents = Vec::with_capacity(files.len());
    for f in &files {
        let y = read_ppm(f)?;
        let (z, x) = ddpm_sample(&model, &y, steps, seed)?;
        let stem = f
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        write_ppm_with_comment(
            &dir.join(format!("{stem}_sr.ppm")),
            &x.quantize8(),
            Some(&note),
        )?;
        latents.push((stem, z.into_tensor()));
    }
    // stored at f32 precision, like parameters
    let ck = Checkpoint::new(cfg.canonical_json(), model.config.feature_seed, latents);
    ck.save(&dir.join("latents.bin"))?;
    log::info!("upscaled {} images into {}", files.len(), dir.display());
    Ok(dir)
}

/// Dataset-wide means from [`evaluate_model`].
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub psnr_db: f64,
    pub ssim: f64,
    pub bicubic_psnr_db: f64,
    pub bicubic_ssim: f64,
    pub hist_w1: f64,
    /// Per pair: `(psnr, ssim, bicubic psnr, bicubic ssim)`.
    pub per_pair: Vec<[f64; 4]>,
    pub sampled_latents: Tensor,
    pub clean_latents: Tensor,
}

/// Samples every pair and scores it against HR, alongside the bicubic
/// baseline.
pub fn evaluate_model(
    model: &Model,
    ds: &PairDataset,
    steps: usize,
    seed: u64,
) -> Result<EvalSummary> {
    let all: Vec<usize> = (0..ds.len()).collect();
    let y = ds.lr_batch(&all)?;
    let hr = ds.hr_batch(&all)?;
    let (z_hat, x_hat) = ddpm_sample(model, &y, steps, seed)?;
    let z0 = encode(&hr, model.config.patch_size)?;
    let bic = bicubic_upsample(&y, model.scale_factor);
    let mut per_pair = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let (h, s, b) = (hr.select(i), x_hat.select(i), bic.select(i));
        per_pair.push([psnr(&s, &h)?, ssim(&s, &h)?, psnr(&b, &h)?, ssim(&b, &h)?]);
    }
    let n = ds.len() as f64;
    let mean = |k: usize| per_pair.iter().map(|r| r[k]).sum::<f64>() / n;
    Ok(EvalSummary {
        psnr_db: mean(0),
        ssim: mean(1),
        bicubic_psnr_db: mean(2),
        bicubic_ssim: mean(3),
        hist_w1: crate::metrics::hist_w1(z_hat.tensor().data(), z0.tensor().data())?,
        per_pair,
        sampled_latents: z_hat.into_tensor(),
        clean_latents: z0.into_tensor(),
    })
}

pub const EVAL_CSV_HEADER: &str = "pair,psnr_db,ssim,bicubic_psnr_db,bicubic_ssim";

/// Scores a checkpoint on a dataset. Writes `eval.csv` (per pair plus a
/// `mean` row, with the latent W1 in a comment) and `latent_hist.csv`.
pub fn cmd_eval(
    checkpoint: &Path,
    data_dir: Option<&Path>,
    out: &Path,
    force: bool,
) -> Result<EvalSummary> {
    let (cfg, model) = load_model(checkpoint)?;
    let ds = dataset_for(&cfg, data_dir)?;
    let dir = prepare_dir(&cfg, out, "eval", force)?;
    let hash = cfg.hash();
    let sum = evaluate_model(&model, &ds, cfg.sample.steps, cfg.seed)?;
    let mut s = format!(
        "# config_hash={hash}\n# hist_w1={:.17e}\n{EVAL_CSV_HEADER}\n",
        sum.hist_w1
    );
    for (i, r) in sum.per_pair.iter().enumerate() {
        s.push_str(&format!(
            "{i},{:.6},{:.6},{:.6},{:.6}\n",
            r[0], r[1], r[2], r[3]
        ));
    }
    s.push_str(&format!(
        "mean,{:.6},{:.6},{:.6},{:.6}\n",
        sum.psnr_db, sum.ssim, sum.bicubic_psnr_db, sum.bicubic_ssim
    ));
    write_text(&dir.join("eval.csv"), &s)?;
    let hist = latent_hist_report(
        sum.sampled_latents.data(),
        sum.clean_latents.data(),
        cfg.metrics.hist_bins,
    )?;
    write_text(&dir.join("latent_hist.csv"), &hist.csv(&hash))?;
    log::info!(
        "psnr {:.3} dB (bicubic {:.3} dB), ssim {:.4}, latent W1 {:.5}",
        sum.psnr_db,
        sum.bicubic_psnr_db,
        sum.ssim,
        sum.hist_w1
    );
    Ok(sum)
}

/// Perception-distortion sweep over sampling steps and seeds. Empty lists
/// fall back to the config.
pub fn cmd_sweep(
    checkpoint: &Path,
    data_dir: Option<&Path>,
    steps: &[usize],
    seeds: &[u64],
    out: &Path,
    force: bool,
) -> Result<(PathBuf, Vec<MetricsRecord>)> {
    let (cfg, model) = load_model(checkpoint)?;
    let ds = dataset_for(&cfg, data_dir)?;
    let steps = if steps.is_empty() {
        &cfg.metrics.sweep_steps[..]
    } else {
        steps
    };
    let seeds = if seeds.is_empty() {
        &cfg.metrics.sweep_seeds[..]
    } else {
        seeds
    };
    let dir = prepare_dir(&cfg, out, "sweep", force)?;
    let records = pd_sweep(&model, &ds, steps, seeds)?;
    write_text(&dir.join("sweep.csv"), &sweep_csv(&records, &cfg.hash()))?;
    Ok((dir, records))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    /// `attention` or `loss`.
    pub group: &'static str,
    pub label: &'static str,
    pub psnr_db: f64,
    pub ssim: f64,
    pub hist_w1: f64,
    pub final_loss_eps: f64,
    pub final_loss_total: f64,
}

pub const ABLATION_CSV_HEADER: &str =
    "group,variant,psnr_db,ssim,hist_w1,final_loss_eps,final_loss_total";

/// The loss-term variants and the weights each trains with.
pub fn loss_variants(full: &LossWeights) -> [(&'static str, LossWeights); 4] {
    [
        (
            "No DPACM",
            LossWeights {
                lambda_l: 0.0,
                lambda_w: 0.0,
            },
        ),
        (
            "Perceptual",
            LossWeights {
                lambda_l: full.lambda_l,
                lambda_w: 0.0,
            },
        ),
        (
            "Wasserstein",
            LossWeights {
                lambda_l: 0.0,
                lambda_w: full.lambda_w,
            },
        ),
        ("DPACM", *full),
    ]
}

fn ablation_cell(
    cfg: &RunConfig,
    ds: &PairDataset,
    group: &'static str,
    label: &'static str,
) -> Result<AblationRow> {
    let mut model = Model::new(&cfg.model, cfg.degradation.scale_factor, cfg.model_seed())?;
    let report = train(&mut model, ds, &cfg.train_config())?;
    let rec = evaluate_samples(&model, ds, cfg.ablation.sample_steps, cfg.seed)?;
    log::info!(
        "ablation {label}: psnr {:.3} dB, latent W1 {:.5}",
        rec.psnr_db,
        rec.hist_w1
    );
    Ok(AblationRow {
        group,
        label,
        psnr_db: rec.psnr_db,
        ssim: rec.ssim,
        hist_w1: rec.hist_w1,
        final_loss_eps: report.final_eval.loss_eps,
        final_loss_total: report.final_eval.loss_total,
    })
}

/// Attention variants (full loss) and loss variants (full attention), each
/// trained from the same initialization for a fraction of the step budget.
pub fn ablation_rows(cfg: &RunConfig, ds: &PairDataset) -> Result<Vec<AblationRow>> {
    let mut base = cfg.clone();
    base.train.steps =
        ((cfg.train.steps as f64 * cfg.ablation.budget_fraction).round() as usize).max(1);
    let mut rows = Vec::with_capacity(9);
    for v in AttentionVariant::ALL {
        let mut c = base.clone();
        c.model.attention.variant = v;
        rows.push(ablation_cell(&c, ds, "attention", v.label())?);
    }
    let mut c = base.clone();
    c.model.attention.variant = AttentionVariant::Full;
    for (label, w) in loss_variants(&cfg.train.loss_weights) {
        c.train.loss_weights = w;
        rows.push(ablation_cell(&c, ds, "loss", label)?);
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow], config_hash: &str) -> String {
    let mut s = format!("# config_hash={config_hash}\n{ABLATION_CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6e},{:.6e},{:.6e}\n",
            r.group, r.label, r.psnr_db, r.ssim, r.hist_w1, r.final_loss_eps, r.final_loss_total
        ));
    }
    s
}

pub fn cmd_ablate(
    cfg: &RunConfig,
    data_dir: Option<&Path>,
    out: &Path,
    force: bool,
) -> Result<(PathBuf, Vec<AblationRow>)> {
    cfg.validate()?;
    let ds = dataset_for(cfg, data_dir)?;
    let dir = prepare_dir(cfg, out, "ablate", force)?;
    let rows = ablation_rows(cfg, &ds)?;
    write_text(&dir.join("ablation.csv"), &ablation_csv(&rows, &cfg.hash()))?;
    Ok((dir, rows))
}

/// Runs every registered gradient check; the caller decides what a failure
/// means.
pub fn cmd_gradcheck(seeds: &[u64], tol: f64) -> Result<Vec<GradReport>> {
    let reports = check_all(seeds, tol)?;
    for r in &reports {
        log::info!("{r}");
    }
    Ok(reports)
}
