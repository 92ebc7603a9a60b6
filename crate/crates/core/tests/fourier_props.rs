//! Property tests for the spectral kernels.

use ndarray::Array3;
use posegraft_core::fourier::{
    amp_distance, amplitude, fft2, grad_amp_distance, grad_phase_distance, ifft2, phase,
    phase_distance, phase_score,
};
use posegraft_core::tensor::ImageTensor;
use proptest::prelude::*;

fn arb_tensor(max_c: usize, max_hw: usize) -> impl Strategy<Value = ImageTensor> {
    (1..=max_c, 2..=max_hw, 2..=max_hw)
        .prop_flat_map(|(c, h, w)| {
            (
                Just((c, h, w)),
                proptest::collection::vec(-1.0..1.0f64, c * h * w),
            )
        })
        .prop_map(|((c, h, w), values)| {
            ImageTensor::new(Array3::from_shape_vec((c, h, w), values).expect("sized to fit"))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn round_trip_recovers_input(img in arb_tensor(3, 24)) {
        let back = ifft2(&fft2(&img).unwrap());
        for (a, b) in img.data.iter().zip(back.data.iter()) {
            prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
    }

    #[test]
    fn parseval_holds(img in arb_tensor(2, 24)) {
        let (_, h, w) = img.shape();
        let amp = amplitude(&fft2(&img).unwrap());
        let spectral: f64 = amp.values.iter().map(|v| v * v).sum::<f64>() / (h * w) as f64;
        let spatial = img.sq_norm();
        prop_assert!((spectral - spatial).abs() <= 1e-6 * spatial.max(1.0));
    }

    #[test]
    fn phase_score_bounded_and_symmetric(
        a in arb_tensor(3, 12),
        b in arb_tensor(3, 12),
    ) {
        // phase_score only needs matching spatial shape; force it.
        let (_, h, w) = a.shape();
        let b = ImageTensor::from_fn(1, h, w, |_, y, x| {
            b.data[[0, y % b.height(), x % b.width()]]
        });
        let ab = phase_score(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&ab));
        let ba = phase_score(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn distances_non_negative_and_zero_at_their_minima(img in arb_tensor(1, 12)) {
        let spec = fft2(&img).unwrap();
        let d_amp = amp_distance(&img, &amplitude(&spec)).unwrap();
        let d_phase = phase_distance(&img, &phase(&spec)).unwrap();
        prop_assert!(d_amp >= 0.0 && d_amp < 1e-12);
        prop_assert!(d_phase >= 0.0 && d_phase < 1e-12);
        let g_amp = grad_amp_distance(&img, &amplitude(&spec)).unwrap();
        let g_phase = grad_phase_distance(&img, &phase(&spec)).unwrap();
        prop_assert!(g_amp.data.iter().all(|v| v.abs() < 1e-9));
        prop_assert!(g_phase.data.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn distances_positive_away_from_minima(
        img in arb_tensor(1, 12),
        other in arb_tensor(1, 12),
    ) {
        let (_, h, w) = img.shape();
        let other = ImageTensor::from_fn(1, h, w, |_, y, x| {
            1.7 + other.data[[0, y % other.height(), x % other.width()]]
        });
        let d_amp = amp_distance(&img, &amplitude(&fft2(&other).unwrap())).unwrap();
        let d_phase = phase_distance(&img, &phase(&fft2(&other).unwrap())).unwrap();
        prop_assert!(d_amp >= 0.0);
        prop_assert!(d_phase >= 0.0);
    }
}

/// The gradient-check acceptance statement at full spec strength: 20 seeds,
/// 1x8x8, h = 1e-4, max relative error < 1e-3.
#[test]
fn gradients_match_finite_differences_twenty_seeds() {
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    let mut failures = Vec::new();
    for seed in 0..20u64 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let z = ImageTensor::from_fn(1, 8, 8, |_, _, _| rng.gen_range(-1.0..1.0));
        let reference = ImageTensor::from_fn(1, 8, 8, |_, _, _| rng.gen_range(-1.0..1.0));
        let ref_amp = amplitude(&fft2(&reference).unwrap());
        let ref_phase = phase(&fft2(&reference).unwrap());

        let check = |analytic: &ImageTensor, f: &dyn Fn(&ImageTensor) -> f64| -> f64 {
            let h = 1e-4;
            let mut max_rel: f64 = 0.0;
            let scale = analytic
                .data
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()))
                .max(1e-9);
            for c in 0..1 {
                for y in 0..8 {
                    for x in 0..8 {
                        let mut plus = z.clone();
                        plus.data[[c, y, x]] += h;
                        let mut minus = z.clone();
                        minus.data[[c, y, x]] -= h;
                        let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                        max_rel = max_rel.max((analytic.data[[c, y, x]] - fd).abs() / scale);
                    }
                }
            }
            max_rel
        };

        let ga = grad_amp_distance(&z, &ref_amp).unwrap();
        let ra = check(&ga, &|t| amp_distance(t, &ref_amp).unwrap());
        let gp = grad_phase_distance(&z, &ref_phase).unwrap();
        let rp = check(&gp, &|t| phase_distance(t, &ref_phase).unwrap());
        if ra >= 1e-3 || rp >= 1e-3 {
            failures.push((seed, ra, rp));
        }
    }
    assert!(failures.is_empty(), "failures: {failures:?}");
}
