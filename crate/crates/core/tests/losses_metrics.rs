use lgcaa_core::graph::Graph;
use lgcaa_core::image::Image;
use lgcaa_core::losses::{
    denoising_loss, distribution_distance, perceptual_distance, total_loss, LossWeights,
    PerceptualExtractor,
};
use lgcaa_core::metrics::{hist_w1, psnr, ssim};
use lgcaa_core::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_image(dims: [usize; 4], rng: &mut ChaCha8Rng) -> Image {
    let data = (0..dims.iter().product::<usize>())
        .map(|_| rng.gen::<f64>())
        .collect();
    Image::new(Tensor::new(dims.to_vec(), data).unwrap()).unwrap()
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn distribution_loss_bounds_exact_w1(n in 1usize..64, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn(&[n], 1.0, &mut rng);
        let b = Tensor::randn(&[n], 2.0, &mut rng);
        let d = distribution_distance(&a, &b).unwrap();
        let w = hist_w1(a.data(), b.data()).unwrap();
        prop_assert!(d >= w - 1e-9);
    }

    #[test]
    fn distribution_loss_is_symmetric_and_nonnegative(n in 1usize..64, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn(&[n], 1.0, &mut rng);
        let b = Tensor::randn(&[n], 1.0, &mut rng);
        let ab = distribution_distance(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, distribution_distance(&b, &a).unwrap());
        prop_assert_eq!(distribution_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn hist_w1_ignores_order(mut a in values(20), seed in any::<u64>()) {
        let b = a.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::seq::SliceRandom;
        a.shuffle(&mut rng);
        prop_assert_eq!(hist_w1(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn hist_w1_translation_is_shift(a in values(16), shift in -3.0f64..3.0) {
        let b: Vec<f64> = a.iter().map(|v| v + shift).collect();
        prop_assert!((hist_w1(&a, &b).unwrap() - shift.abs()).abs() < 1e-12);
    }

    #[test]
    fn hist_w1_triangle_inequality(a in values(12), b in values(12), c in values(12)) {
        let ab = hist_w1(&a, &b).unwrap();
        let bc = hist_w1(&b, &c).unwrap();
        let ac = hist_w1(&a, &c).unwrap();
        prop_assert!(ac <= ab + bc + 1e-12);
    }

    #[test]
    fn total_loss_is_linear(e in 0.0f64..5.0, p in 0.0f64..5.0, d in 0.0f64..5.0,
                            l in 0.0f64..4.0, w in 0.0f64..4.0) {
        let wts = LossWeights { lambda_l: l, lambda_w: w };
        let one = total_loss(e, p, d, &wts);
        let two = total_loss(2.0 * e, 2.0 * p, 2.0 * d, &wts);
        prop_assert!((two - 2.0 * one).abs() <= 1e-12 * (1.0 + one));
        prop_assert_eq!(total_loss(e, p, d, &LossWeights { lambda_l: 0.0, lambda_w: 0.0 }), e);
    }

    #[test]
    fn denoising_loss_matches_loop(n in 1usize..50, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn(&[1, n], 1.0, &mut rng);
        let b = Tensor::randn(&[1, n], 1.0, &mut rng);
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let l = denoising_loss(&mut g, av, bv).unwrap();
        let oracle: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64;
        prop_assert!((g.value(l).item() - oracle).abs() < 1e-12);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_image([1, 3, 16, 16], &mut rng);
        let y = rand_image([1, 3, 16, 16], &mut rng);
        let s = ssim(&x, &y).unwrap();
        prop_assert_eq!(s, ssim(&y, &x).unwrap());
        prop_assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn perceptual_distance_is_symmetric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi = PerceptualExtractor::new(seed);
        let x = rand_image([1, 3, 8, 8], &mut rng);
        let y = rand_image([1, 3, 8, 8], &mut rng);
        let a = perceptual_distance(&x, &y, &phi).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - perceptual_distance(&y, &x, &phi).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn hand_cases() {
    let t = |v: &[f64]| Tensor::new(vec![v.len()], v.to_vec()).unwrap();
    assert_eq!(
        distribution_distance(&t(&[0.5; 4]), &t(&[0.5; 4])).unwrap(),
        0.0
    );
    assert_eq!(
        distribution_distance(&t(&[1.0; 4]), &t(&[0.0; 4])).unwrap(),
        1.0
    );
    assert!(
        (distribution_distance(&t(&[0.0, 0.5]), &t(&[0.25, 0.25])).unwrap() - 0.25).abs() < 1e-12
    );
    assert_eq!(hist_w1(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
    assert_eq!(hist_w1(&[0.0, 1.0], &[0.5, 0.5]).unwrap(), 0.5);
    let w = LossWeights::default();
    assert!((total_loss(1.0, 0.5, 0.2, &w) - 2.06).abs() < 1e-12);
}

#[test]
fn psnr_falls_as_noise_grows() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let clean = Image::filled([1, 3, 16, 16], 0.5);
    let mut last = f64::INFINITY;
    for sigma in [0.01, 0.02, 0.05, 0.1, 0.2] {
        let noisy: Vec<f64> = clean
            .data()
            .iter()
            .map(|v| {
                let n: f64 = rng.sample(rand_distr::StandardNormal);
                v + sigma * n
            })
            .collect();
        let noisy = Image::new(Tensor::new(vec![1, 3, 16, 16], noisy).unwrap()).unwrap();
        let p = psnr(&noisy, &clean).unwrap();
        assert!(
            p < last,
            "psnr {p} at sigma {sigma} did not fall below {last}"
        );
        last = p;
    }
}

#[test]
fn psnr_of_uniform_offset_is_twenty_db() {
    let x = Image::filled([1, 3, 8, 8], 0.3);
    let y = Image::filled([1, 3, 8, 8], 0.4);
    assert!((psnr(&x, &y).unwrap() - 20.0).abs() < 1e-9);
    assert_eq!(psnr(&x, &x).unwrap(), 100.0);
}
