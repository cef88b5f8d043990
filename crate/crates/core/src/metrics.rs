//! Full-reference image metrics, latent histogram diagnostics and the
//! sampling-steps sweep.

use std::time::Instant;

use crate::codec::encode;
use crate::degradation::PairDataset;
use crate::diffusion::train::lr_batch;
use crate::diffusion::{ddpm_sample, Model};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::perceptual_distance;

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn same_dims(x: &Image, y: &Image) -> Result<()> {
    if x.dims() != y.dims() {
        return Err(Error::Dimension(format!(
            "image shapes {:?} and {:?} differ",
            x.dims(),
            y.dims()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio for unit dynamic range, capped at 100 dB.
pub fn psnr(x: &Image, y: &Image) -> Result<f64> {
    same_dims(x, y)?;
    let mse = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Mean SSIM over non-overlapping 8x8 windows of every channel.
pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    same_dims(x, y)?;
    let [b, c, h, w] = x.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Validation(format!(
            "image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let (mut total, mut count) = (0.0, 0usize);
    for p in 0..b * c {
        let xs = &x.data()[p * h * w..(p + 1) * h * w];
        let ys = &y.data()[p * h * w..(p + 1) * h * w];
        for wy in 0..h / SSIM_WINDOW {
            for wx in 0..w / SSIM_WINDOW {
                let idx = |k: usize| {
                    (wy * SSIM_WINDOW + k / SSIM_WINDOW) * w + wx * SSIM_WINDOW + k % SSIM_WINDOW
                };
                let k = SSIM_WINDOW * SSIM_WINDOW;
                let mx = (0..k).map(|i| xs[idx(i)]).sum::<f64>() / n;
                let my = (0..k).map(|i| ys[idx(i)]).sum::<f64>() / n;
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for i in 0..k {
                    let (dx, dy) = (xs[idx(i)] - mx, ys[idx(i)] - my);
                    vx += dx * dx;
                    vy += dy * dy;
                    cxy += dx * dy;
                }
                let (vx, vy, cxy) = (vx / n, vy / n, cxy / n);
                total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Exact 1-D Wasserstein-1 distance between two equal-size samples: the
/// mean absolute difference of their sorted values.
pub fn hist_w1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "sample sizes {} and {} differ",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let sorted = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        s
    };
    let (sa, sb) = (sorted(a), sorted(b));
    Ok(sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistRow {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub density_a: f64,
    pub density_b: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistReport {
    pub rows: Vec<HistRow>,
    /// Exact distance from sorted values.
    pub w1: f64,
    /// Distance between the binned distributions (CDF difference times bin width).
    pub w1_binned: f64,
}

impl HistReport {
    pub fn csv(&self, config_hash: &str) -> String {
        let mut s = format!(
            "# config_hash={config_hash}\n# hist_w1={:.17e} hist_w1_binned={:.17e}\nbin_lo,bin_hi,density_a,density_b\n",
            self.w1, self.w1_binned
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:.17e},{:.17e},{:.17e},{:.17e}\n",
                r.bin_lo, r.bin_hi, r.density_a, r.density_b
            ));
        }
        s
    }
}

/// Normalized histograms of two samples over shared, equal-width bins
/// spanning both, plus their exact and binned W1 distances.
pub fn latent_hist_report(a: &[f64], b: &[f64], bins: usize) -> Result<HistReport> {
    if bins < 2 {
        return Err(Error::Validation(format!(
            "need at least 2 bins, got {bins}"
        )));
    }
    let w1 = hist_w1(a, b)?;
    if a.is_empty() {
        return Err(Error::Validation("cannot histogram empty samples".into()));
    }
    let lo = a.iter().chain(b).cloned().fold(f64::INFINITY, f64::min);
    let mut hi = a.iter().chain(b).cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        hi = lo + 1.0;
    }
    let width = (hi - lo) / bins as f64;
    let count = |v: &[f64]| {
        let mut c = vec![0.0; bins];
        for &x in v {
            let k = (((x - lo) / width) as usize).min(bins - 1);
            c[k] += 1.0;
        }
        let n = v.len() as f64;
        c.into_iter().map(|k| k / n).collect::<Vec<f64>>()
    };
    let (da, db) = (count(a), count(b));
    let mut cdf = 0.0;
    let mut w1_binned = 0.0;
    let mut rows = Vec::with_capacity(bins);
    for k in 0..bins {
        cdf += da[k] - db[k];
        w1_binned += cdf.abs() * width;
        rows.push(HistRow {
            bin_lo: lo + k as f64 * width,
            bin_hi: if k + 1 == bins {
                hi
            } else {
                lo + (k + 1) as f64 * width
            },
            density_a: da[k],
            density_b: db[k],
        });
    }
    Ok(HistReport {
        rows,
        w1,
        w1_binned,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub psnr_db: f64,
    pub ssim: f64,
    pub hist_w1: f64,
    /// Perceptual distance under the frozen surrogate extractor.
    pub perc_dist: f64,
    pub steps: usize,
    pub seed: u64,
    /// Not written to CSV, so sweeps stay byte-reproducible.
    pub wallclock_s: f64,
}

pub const SWEEP_CSV_HEADER: &str = "steps,seed,psnr_db,perc_dist";

/// Sweep table. The perceptual column is the surrogate extractor distance,
/// not LPIPS.
pub fn sweep_csv(records: &[MetricsRecord], config_hash: &str) -> String {
    let mut s = format!("# config_hash={config_hash}\n# perc_dist: surrogate-LPIPS (frozen random-feature extractor)\n{SWEEP_CSV_HEADER}\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{:.17e},{:.17e}\n",
            r.steps, r.seed, r.psnr_db, r.perc_dist
        ));
    }
    s
}

/// Samples every pair of `ds` in one batch and scores the result.
pub fn evaluate_samples(
    model: &Model,
    ds: &PairDataset,
    steps: usize,
    seed: u64,
) -> Result<MetricsRecord> {
    let start = Instant::now();
    let y = lr_batch(ds)?;
    let (z_hat, x_hat) = ddpm_sample(model, &y, steps, seed)?;
    let hr = ds.hr_batch(&(0..ds.len()).collect::<Vec<_>>())?;
    let z0 = encode(&hr, model.config.patch_size)?;
    let n = ds.len() as f64;
    let (mut p, mut s, mut d) = (0.0, 0.0, 0.0);
    for i in 0..ds.len() {
        let (a, b) = (x_hat.select(i), hr.select(i));
        p += psnr(&a, &b)? / n;
        s += ssim(&a, &b)? / n;
        d += perceptual_distance(&a, &b, &model.perceptual)? / n;
    }
    Ok(MetricsRecord {
        psnr_db: p,
        ssim: s,
        hist_w1: hist_w1(z_hat.tensor().data(), z0.tensor().data())?,
        perc_dist: d,
        steps,
        seed,
        wallclock_s: start.elapsed().as_secs_f64(),
    })
}

/// One record per `(steps, seed)` combination, steps-major.
pub fn pd_sweep(
    model: &Model,
    ds: &PairDataset,
    steps_list: &[usize],
    seeds: &[u64],
) -> Result<Vec<MetricsRecord>> {
    if steps_list.is_empty() || seeds.is_empty() {
        return Err(Error::Validation(
            "sweep needs at least one step count and one seed".into(),
        ));
    }
    let mut out = Vec::with_capacity(steps_list.len() * seeds.len());
    for &steps in steps_list {
        for &seed in seeds {
            let r = evaluate_samples(model, ds, steps, seed)?;
            log::info!("sweep steps={steps} seed={seed}: psnr {:.3} dB", r.psnr_db);
            out.push(r);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img(t: Tensor) -> Image {
        Image::new(t).unwrap()
    }

    #[test]
    fn psnr_cases() {
        let x = img(Tensor::full(&[1, 3, 4, 4], 0.3));
        assert_eq!(psnr(&x, &x).unwrap(), 100.0);
        let y = img(Tensor::full(&[1, 3, 4, 4], 0.4));
        assert!((psnr(&x, &y).unwrap() - 20.0).abs() < 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = img(Tensor::uniform(&[1, 3, 5, 5], 0.0, 1.0, &mut rng));
        let b = img(Tensor::uniform(&[1, 3, 5, 5], 0.0, 1.0, &mut rng));
        let mut se = 0.0;
        for i in 0..75 {
            se += (a.data()[i] - b.data()[i]).powi(2);
        }
        assert!((psnr(&a, &b).unwrap() - 10.0 * (75.0 / se).log10()).abs() < 1e-9);
    }

    #[test]
    fn ssim_closed_form_for_constants() {
        let a = img(Tensor::full(&[1, 1, 8, 8], 0.2));
        let b = img(Tensor::full(&[1, 1, 8, 8], 0.8));
        // zero variances: (2*0.16 + C1) / (0.04 + 0.64 + C1)
        let expect = (2.0 * 0.2 * 0.8 + SSIM_C1) / (0.2 * 0.2 + 0.8 * 0.8 + SSIM_C1);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-15);
        assert!(ssim(
            &img(Tensor::zeros(&[1, 1, 4, 4])),
            &img(Tensor::zeros(&[1, 1, 4, 4]))
        )
        .is_err());
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = img(Tensor::uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rng));
        let b = img(Tensor::uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rng));
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
    }

    #[test]
    fn hist_w1_cases() {
        assert_eq!(hist_w1(&[0.3, 0.1, 0.2], &[0.2, 0.3, 0.1]).unwrap(), 0.0);
        assert_eq!(hist_w1(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(hist_w1(&[0.0, 1.0], &[0.5, 0.5]).unwrap(), 0.5);
        assert!(hist_w1(&[0.0], &[]).is_err());
    }

    #[test]
    fn histogram_report() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[500], 1.0, &mut rng);
        let b = Tensor::randn(&[500], 0.7, &mut rng);
        let same = latent_hist_report(a.data(), a.data(), 16).unwrap();
        assert_eq!(same.w1, 0.0);
        assert_eq!(same.w1_binned, 0.0);
        assert!(same.rows.iter().all(|r| r.density_a == r.density_b));
        let r = latent_hist_report(a.data(), b.data(), 40).unwrap();
        let sa: f64 = r.rows.iter().map(|r| r.density_a).sum();
        let sb: f64 = r.rows.iter().map(|r| r.density_b).sum();
        assert!((sa - 1.0).abs() < 1e-9 && (sb - 1.0).abs() < 1e-9);
        let width = r.rows[0].bin_hi - r.rows[0].bin_lo;
        assert!((r.w1 - r.w1_binned).abs() <= width);
        assert!(latent_hist_report(a.data(), b.data(), 1).is_err());
        assert!(r.csv("h").starts_with("# config_hash=h\n"));
    }
}
