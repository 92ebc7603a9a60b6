//! 2D spectral transforms, amplitude/phase decomposition, the two guidance
//! distance functions with their analytic gradients, and the phase-score
//! metric.
//!
//! Convention: unnormalized forward transform, 1/(H*W) on the inverse. All
//! transforms are per-channel. Under this convention Parseval reads
//! `sum(z^2) = sum(|F(z)|^2) / (H*W)`.

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;
use ndarray::Array3;
use num_complex::Complex64;
use rustfft::FftPlanner;
use std::cell::RefCell;
use std::f64::consts::PI;

/// Bins with amplitude below this are excluded from both gradients: the
/// phase is undefined there and the amplitude gradient is non-differentiable.
pub const EPS_AMP: f64 = 1e-8;

/// Per-channel complex 2D spectrum of an [`ImageTensor`].
#[derive(Debug, Clone)]
pub struct SpectralMap {
    pub data: Array3<Complex64>,
}

/// Per-bin modulus of a [`SpectralMap`]; entries are >= 0.
#[derive(Debug, Clone)]
pub struct AmplitudeMap {
    pub values: Array3<f64>,
}

/// Per-bin argument of a [`SpectralMap`]; entries lie in (-pi, pi], with the
/// phase of an exactly-zero bin defined as 0.
#[derive(Debug, Clone)]
pub struct PhaseMap {
    pub values: Array3<f64>,
}

impl SpectralMap {
    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn real_part(&self) -> Array3<f64> {
        self.data.mapv(|c| c.re)
    }

    pub fn imag_part(&self) -> Array3<f64> {
        self.data.mapv(|c| c.im)
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// In-place 2D transform of one channel stored row-major as h rows of w.
fn fft2_channel(buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    PLANNER.with(|p| {
        let mut planner = p.borrow_mut();
        let row_fft = if inverse {
            planner.plan_fft_inverse(w)
        } else {
            planner.plan_fft_forward(w)
        };
        let col_fft = if inverse {
            planner.plan_fft_inverse(h)
        } else {
            planner.plan_fft_forward(h)
        };
        drop(planner);

        for row in buf.chunks_exact_mut(w) {
            row_fft.process(row);
        }
        // Columns via transpose, row FFTs, transpose back.
        let mut t = vec![Complex64::default(); buf.len()];
        for y in 0..h {
            for x in 0..w {
                t[x * h + y] = buf[y * w + x];
            }
        }
        for col in t.chunks_exact_mut(h) {
            col_fft.process(col);
        }
        for y in 0..h {
            for x in 0..w {
                buf[y * w + x] = t[x * h + y];
            }
        }
    });
}

/// Forward 2D transform of every channel. Unnormalized.
pub fn fft2(img: &ImageTensor) -> Result<SpectralMap> {
    img.validate_for_fft()?;
    let (c, h, w) = img.shape();
    let mut out = Array3::from_elem((c, h, w), Complex64::default());
    for ch in 0..c {
        let mut buf: Vec<Complex64> = img
            .data
            .index_axis(ndarray::Axis(0), ch)
            .iter()
            .map(|&v| Complex64::new(v, 0.0))
            .collect();
        fft2_channel(&mut buf, h, w, false);
        for y in 0..h {
            for x in 0..w {
                out[[ch, y, x]] = buf[y * w + x];
            }
        }
    }
    Ok(SpectralMap { data: out })
}

/// Inverse 2D transform, normalized by 1/(H*W). Returns the real part; for a
/// spectrum of a real tensor the imaginary part vanishes to rounding error.
pub fn ifft2(spec: &SpectralMap) -> ImageTensor {
    let (c, h, w) = spec.shape();
    let norm = 1.0 / (h * w) as f64;
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        let mut buf: Vec<Complex64> = spec
            .data
            .index_axis(ndarray::Axis(0), ch)
            .iter()
            .copied()
            .collect();
        fft2_channel(&mut buf, h, w, true);
        for y in 0..h {
            for x in 0..w {
                out[[ch, y, x]] = buf[y * w + x].re * norm;
            }
        }
    }
    ImageTensor::new(out)
}

/// Like [`ifft2`] but keeps the imaginary part; used by the gradient kernels.
fn ifft2_complex(spec: &Array3<Complex64>) -> Array3<Complex64> {
    let (c, h, w) = spec.dim();
    let norm = 1.0 / (h * w) as f64;
    let mut out = Array3::from_elem((c, h, w), Complex64::default());
    for ch in 0..c {
        let mut buf: Vec<Complex64> = spec
            .index_axis(ndarray::Axis(0), ch)
            .iter()
            .copied()
            .collect();
        fft2_channel(&mut buf, h, w, true);
        for y in 0..h {
            for x in 0..w {
                out[[ch, y, x]] = buf[y * w + x] * norm;
            }
        }
    }
    out
}

pub fn amplitude(spec: &SpectralMap) -> AmplitudeMap {
    AmplitudeMap {
        values: spec.data.mapv(|z| z.norm()),
    }
}

/// Per-bin argument in (-pi, pi]; an exactly-zero bin maps to 0.
pub fn phase(spec: &SpectralMap) -> PhaseMap {
    PhaseMap {
        values: spec.data.mapv(|z| {
            if z.re == 0.0 && z.im == 0.0 {
                0.0
            } else {
                let p = z.im.atan2(z.re);
                if p == -PI {
                    PI
                } else {
                    p
                }
            }
        }),
    }
}

/// Rebuilds the complex spectrum from its polar decomposition.
pub fn reconstruct(amp: &AmplitudeMap, ph: &PhaseMap) -> SpectralMap {
    let mut data = Array3::from_elem(amp.values.dim(), Complex64::default());
    ndarray::Zip::from(&mut data)
        .and(&amp.values)
        .and(&ph.values)
        .for_each(|d, &a, &p| *d = Complex64::from_polar(a, p));
    SpectralMap { data }
}

/// Inverse transform of a unit-amplitude spectrum carrying `img`'s phase.
/// Bins whose original amplitude is below [`EPS_AMP`] carry no energy (their
/// phase is a tie-break, not information). Output is min-max normalized to
/// [0,1] per channel; a flat channel maps to all zeros.
pub fn phase_only_reconstruct(img: &ImageTensor) -> Result<ImageTensor> {
    let spec = fft2(img)?;
    let unit = spec.data.mapv(|z| {
        if z.norm() < EPS_AMP {
            Complex64::new(0.0, 0.0)
        } else {
            z / z.norm()
        }
    });
    let rec = ifft2(&SpectralMap { data: unit });
    let mut out = rec.data;
    for ch in 0..out.dim().0 {
        let mut lane = out.index_axis_mut(ndarray::Axis(0), ch);
        let min = lane.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max - min < 1e-15 {
            lane.fill(0.0);
        } else {
            lane.mapv_inplace(|v| (v - min) / (max - min));
        }
    }
    Ok(ImageTensor::new(out))
}

fn check_spec_shape(spec: &SpectralMap, reference: ndarray::Ix3) -> Result<()> {
    if spec.data.raw_dim() != reference {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", reference),
            got: format!("{:?}", spec.data.raw_dim()),
        });
    }
    Ok(())
}

/// Amplitude distance to a reference: `sum_bins (|F(z)| - ref)^2`.
pub fn amp_distance(z: &ImageTensor, ref_amp: &AmplitudeMap) -> Result<f64> {
    let spec = fft2(z)?;
    check_spec_shape(&spec, ref_amp.values.raw_dim())?;
    let mut total = 0.0;
    ndarray::Zip::from(&spec.data)
        .and(&ref_amp.values)
        .for_each(|f, &a| {
            let d = f.norm() - a;
            total += d * d;
        });
    Ok(total)
}

/// Phase distance to a reference on the unit circle:
/// `sum_bins |e^{i phi(z)} - e^{i ref}|^2 = sum_bins 2 (1 - cos(phi(z) - ref))`.
/// Smooth everywhere and equal to the raw angular L2 to second order for
/// small differences, which a distance on wrapped angles is not.
pub fn phase_distance(z: &ImageTensor, ref_phase: &PhaseMap) -> Result<f64> {
    let spec = fft2(z)?;
    check_spec_shape(&spec, ref_phase.values.raw_dim())?;
    let ph = phase(&spec);
    let mut total = 0.0;
    ndarray::Zip::from(&ph.values)
        .and(&ref_phase.values)
        .for_each(|&p, &r| {
            total += 2.0 * (1.0 - (p - r).cos());
        });
    Ok(total)
}

/// Analytic gradient of [`amp_distance`] with respect to every entry of `z`.
///
/// With `W_k = (|F_k| - A_k) * F_k / |F_k|` on bins above [`EPS_AMP`] (zero
/// on guarded bins), the chain rule through the linear transform gives
/// `grad(x) = 2 * H * W * Re[ ifft2(W)(x) ]`.
pub fn grad_amp_distance(z: &ImageTensor, ref_amp: &AmplitudeMap) -> Result<ImageTensor> {
    let spec = fft2(z)?;
    check_spec_shape(&spec, ref_amp.values.raw_dim())?;
    let (_, h, w) = spec.shape();
    let hw = (h * w) as f64;
    let mut weighted = Array3::from_elem(spec.data.raw_dim(), Complex64::default());
    ndarray::Zip::from(&mut weighted)
        .and(&spec.data)
        .and(&ref_amp.values)
        .for_each(|out, &f, &a| {
            let m = f.norm();
            *out = if m < EPS_AMP {
                Complex64::new(0.0, 0.0)
            } else {
                f * ((m - a) / m)
            };
        });
    let grad = ifft2_complex(&weighted).mapv(|c| 2.0 * hw * c.re);
    Ok(ImageTensor::new(grad))
}

/// Analytic gradient of [`phase_distance`] with respect to every entry of `z`.
///
/// With `V_k = i * sin(phi_k - ref_k) * F_k / |F_k|^2` on bins above
/// [`EPS_AMP`] (zero on guarded bins),
/// `grad(x) = 2 * H * W * Re[ ifft2(V)(x) ]`.
pub fn grad_phase_distance(z: &ImageTensor, ref_phase: &PhaseMap) -> Result<ImageTensor> {
    let spec = fft2(z)?;
    check_spec_shape(&spec, ref_phase.values.raw_dim())?;
    let (_, h, w) = spec.shape();
    let hw = (h * w) as f64;
    let ph = phase(&spec);
    let mut weighted = Array3::from_elem(spec.data.raw_dim(), Complex64::default());
    ndarray::Zip::from(&mut weighted)
        .and(&spec.data)
        .and(&ph.values)
        .and(&ref_phase.values)
        .for_each(|out, &f, &p, &r| {
            let m2 = f.norm_sqr();
            *out = if m2 < EPS_AMP * EPS_AMP {
                Complex64::new(0.0, 0.0)
            } else {
                Complex64::new(0.0, (p - r).sin()) * f / m2
            };
        });
    let grad = ifft2_complex(&weighted).mapv(|c| 2.0 * hw * c.re);
    Ok(ImageTensor::new(grad))
}

/// Cosine similarity between the flattened Fourier-phase maps of two images,
/// both reduced to luminance first. Value in [-1, 1]; a zero-norm phase
/// vector (e.g. from a constant image) scores 0.
pub fn phase_score(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let (_, ha, wa) = a.shape();
    let (_, hb, wb) = b.shape();
    if (ha, wa) != (hb, wb) {
        return Err(Error::ShapeMismatch {
            expected: format!("spatial {:?}", (ha, wa)),
            got: format!("spatial {:?}", (hb, wb)),
        });
    }
    let pa = phase(&fft2(&a.to_luminance())?);
    let pb = phase(&fft2(&b.to_luminance())?);
    let dot: f64 = pa
        .values
        .iter()
        .zip(pb.values.iter())
        .map(|(x, y)| x * y)
        .sum();
    let na: f64 = pa.values.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = pb.values.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(c: usize, h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_fn(c, h, w, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    /// Independent O(N^2) reference transform.
    fn naive_dft(img: &ImageTensor) -> Array3<Complex64> {
        let (c, h, w) = img.shape();
        let mut out = Array3::from_elem((c, h, w), Complex64::default());
        for ch in 0..c {
            for ky in 0..h {
                for kx in 0..w {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for y in 0..h {
                        for x in 0..w {
                            let ang = -2.0
                                * PI
                                * (ky as f64 * y as f64 / h as f64
                                    + kx as f64 * x as f64 / w as f64);
                            acc += img.data[[ch, y, x]] * Complex64::new(ang.cos(), ang.sin());
                        }
                    }
                    out[[ch, ky, kx]] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn constant_image_is_dc_only() {
        let c = 0.7;
        let img = ImageTensor::from_fn(1, 4, 4, |_, _, _| c);
        let spec = fft2(&img).unwrap();
        assert!((spec.data[[0, 0, 0]].re - 16.0 * c).abs() < 1e-12);
        assert!(spec.data[[0, 0, 0]].im.abs() < 1e-12);
        for y in 0..4 {
            for x in 0..4 {
                if (y, x) != (0, 0) {
                    assert!(spec.data[[0, y, x]].norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn round_trip_identity() {
        let img = random_tensor(3, 8, 8, 11);
        let back = ifft2(&fft2(&img).unwrap());
        for (a, b) in img.data.iter().zip(back.data.iter()) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
    }

    #[test]
    fn impulse_has_flat_unit_amplitude() {
        let img =
            ImageTensor::from_fn(1, 4, 4, |_, y, x| if y == 0 && x == 0 { 1.0 } else { 0.0 });
        let amp = amplitude(&fft2(&img).unwrap());
        for v in amp.values.iter() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fft_matches_naive_dft() {
        let img = random_tensor(2, 6, 5, 3);
        let spec = fft2(&img).unwrap();
        let naive = naive_dft(&img);
        for (a, b) in spec.data.iter().zip(naive.iter()) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn degenerate_axis_rejected() {
        assert!(fft2(&ImageTensor::zeros(1, 1, 8)).is_err());
        assert!(fft2(&ImageTensor::zeros(1, 8, 1)).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        let mut img = ImageTensor::zeros(1, 4, 4);
        img.data[[0, 2, 2]] = f64::NAN;
        assert!(fft2(&img).is_err());
    }

    #[test]
    fn pythagorean_bin() {
        let data = Array3::from_elem((1, 2, 2), Complex64::new(3.0, 4.0));
        let spec = SpectralMap { data };
        let amp = amplitude(&spec);
        let ph = phase(&spec);
        assert!((amp.values[[0, 0, 0]] - 5.0).abs() < 1e-12);
        assert!((ph.values[[0, 0, 0]] - 4.0f64.atan2(3.0)).abs() < 1e-12);
    }

    #[test]
    fn real_positive_spectrum_has_zero_phase() {
        let data = Array3::from_elem((1, 3, 3), Complex64::new(2.5, 0.0));
        let ph = phase(&SpectralMap { data });
        assert!(ph.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_bin_convention() {
        let mut data = Array3::from_elem((1, 2, 2), Complex64::new(1.0, 0.0));
        data[[0, 1, 1]] = Complex64::new(0.0, 0.0);
        data[[0, 0, 1]] = Complex64::new(-0.0, 0.0);
        let spec = SpectralMap { data };
        assert_eq!(amplitude(&spec).values[[0, 1, 1]], 0.0);
        assert_eq!(phase(&spec).values[[0, 1, 1]], 0.0);
        assert_eq!(phase(&spec).values[[0, 0, 1]], 0.0);
    }

    #[test]
    fn phase_in_half_open_interval() {
        // A bin on the negative real axis must report +pi, never -pi.
        let data = Array3::from_elem((1, 2, 2), Complex64::new(-1.0, -0.0));
        let ph = phase(&SpectralMap { data });
        assert_eq!(ph.values[[0, 0, 0]], PI);
    }

    #[test]
    fn polar_reconstruction_round_trip() {
        let img = random_tensor(1, 8, 8, 5);
        let spec = fft2(&img).unwrap();
        let rec = reconstruct(&amplitude(&spec), &phase(&spec));
        for (a, b) in spec.data.iter().zip(rec.data.iter()) {
            assert!((a - b).norm() <= 1e-6 * a.norm().max(1.0));
        }
    }

    #[test]
    fn conjugate_symmetry_of_real_input() {
        let img = random_tensor(1, 6, 8, 9);
        let spec = fft2(&img).unwrap();
        let (_, h, w) = spec.shape();
        for y in 0..h {
            for x in 0..w {
                let mirror = spec.data[[0, (h - y) % h, (w - x) % w]];
                let here = spec.data[[0, y, x]];
                assert!((here - mirror.conj()).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn phase_only_constant_image_is_constant() {
        let img = ImageTensor::from_fn(2, 8, 8, |c, _, _| 0.3 + 0.2 * c as f64);
        let rec = phase_only_reconstruct(&img).unwrap();
        for ch in 0..2 {
            let lane = rec.data.index_axis(ndarray::Axis(0), ch);
            let first = lane[[0, 0]];
            assert!(lane.iter().all(|&v| (v - first).abs() < 1e-12));
        }
    }

    #[test]
    fn phase_only_translation_equivariance() {
        let img = random_tensor(1, 8, 8, 21);
        let (dy, dx) = (3usize, 5usize);
        let shifted = ImageTensor::from_fn(1, 8, 8, |c, y, x| {
            img.data[[c, (y + 8 - dy) % 8, (x + 8 - dx) % 8]]
        });
        let rec = phase_only_reconstruct(&img).unwrap();
        let rec_shifted = phase_only_reconstruct(&shifted).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let expect = rec.data[[0, (y + 8 - dy) % 8, (x + 8 - dx) % 8]];
                assert!((rec_shifted.data[[0, y, x]] - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn amp_distance_zero_at_match() {
        let img = random_tensor(1, 8, 8, 2);
        let ref_amp = amplitude(&fft2(&img).unwrap());
        assert!(amp_distance(&img, &ref_amp).unwrap() < 1e-18);
    }

    #[test]
    fn amp_distance_parseval_against_zero_reference() {
        let img = random_tensor(2, 8, 8, 13);
        let zero_ref = AmplitudeMap {
            values: Array3::zeros((2, 8, 8)),
        };
        let d = amp_distance(&img, &zero_ref).unwrap();
        let parseval = 64.0 * img.sq_norm();
        assert!((d - parseval).abs() < 1e-6 * parseval.max(1.0));
    }

    #[test]
    fn amp_distance_matches_direct_summation() {
        let z = random_tensor(1, 8, 8, 17);
        let reference = random_tensor(1, 8, 8, 18);
        let ref_amp = amplitude(&fft2(&reference).unwrap());
        // Independent route: naive DFT plus explicit summation.
        let naive = naive_dft(&z);
        let mut expected = 0.0;
        for (f, a) in naive.iter().zip(ref_amp.values.iter()) {
            let d = f.norm() - a;
            expected += d * d;
        }
        let got = amp_distance(&z, &ref_amp).unwrap();
        assert!((got - expected).abs() <= 1e-8 * expected.max(1.0));
    }

    #[test]
    fn amp_distance_shape_mismatch() {
        let z = random_tensor(1, 8, 8, 1);
        let ref_amp = AmplitudeMap {
            values: Array3::zeros((1, 4, 4)),
        };
        assert!(amp_distance(&z, &ref_amp).is_err());
    }

    #[test]
    fn phase_distance_zero_at_match() {
        let img = random_tensor(1, 8, 8, 4);
        let ref_phase = phase(&fft2(&img).unwrap());
        assert!(phase_distance(&img, &ref_phase).unwrap() < 1e-18);
    }

    #[test]
    fn phase_distance_antipodal_bin_contributes_four() {
        let img = random_tensor(1, 4, 4, 6);
        let mut ref_phase = phase(&fft2(&img).unwrap());
        // Flip one bin by pi: antipodal unit vectors are distance 2 apart.
        let old = ref_phase.values[[0, 1, 2]];
        ref_phase.values[[0, 1, 2]] = old + PI;
        let d = phase_distance(&img, &ref_phase).unwrap();
        assert!((d - 4.0).abs() < 1e-9);
    }

    #[test]
    fn phase_distance_matches_direct_summation() {
        let z = random_tensor(1, 8, 8, 31);
        let reference = random_tensor(1, 8, 8, 32);
        let ref_phase = phase(&fft2(&reference).unwrap());
        let naive = naive_dft(&z);
        let mut expected = 0.0;
        for (f, r) in naive.iter().zip(ref_phase.values.iter()) {
            let p = f.im.atan2(f.re);
            expected += 2.0 * (1.0 - (p - r).cos());
        }
        let got = phase_distance(&z, &ref_phase).unwrap();
        assert!((got - expected).abs() <= 1e-8 * expected.max(1.0));
    }

    /// Central finite differences of a scalar function of the tensor.
    fn finite_diff(z: &ImageTensor, f: &dyn Fn(&ImageTensor) -> f64, h: f64) -> ImageTensor {
        let mut grad = ImageTensor::zeros(z.channels(), z.height(), z.width());
        let (c, hh, ww) = z.shape();
        for ch in 0..c {
            for y in 0..hh {
                for x in 0..ww {
                    let mut plus = z.clone();
                    plus.data[[ch, y, x]] += h;
                    let mut minus = z.clone();
                    minus.data[[ch, y, x]] -= h;
                    grad.data[[ch, y, x]] = (f(&plus) - f(&minus)) / (2.0 * h);
                }
            }
        }
        grad
    }

    fn max_rel_err(analytic: &ImageTensor, numeric: &ImageTensor) -> f64 {
        let scale = numeric
            .data
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-9);
        analytic
            .data
            .iter()
            .zip(numeric.data.iter())
            .map(|(a, n)| (a - n).abs() / scale)
            .fold(0.0, f64::max)
    }

    #[test]
    fn grad_amp_zero_at_minimum() {
        let img = random_tensor(1, 8, 8, 40);
        let ref_amp = amplitude(&fft2(&img).unwrap());
        let g = grad_amp_distance(&img, &ref_amp).unwrap();
        assert!(g.data.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn grad_amp_matches_finite_differences() {
        for seed in 0..5 {
            let z = random_tensor(1, 8, 8, 100 + seed);
            let reference = random_tensor(1, 8, 8, 200 + seed);
            let ref_amp = amplitude(&fft2(&reference).unwrap());
            let analytic = grad_amp_distance(&z, &ref_amp).unwrap();
            let numeric = finite_diff(&z, &|t| amp_distance(t, &ref_amp).unwrap(), 1e-4);
            assert!(
                max_rel_err(&analytic, &numeric) < 1e-3,
                "seed {seed}: rel err {}",
                max_rel_err(&analytic, &numeric)
            );
        }
    }

    #[test]
    fn grad_amp_update_points_back_toward_reference() {
        let z = random_tensor(1, 8, 8, 55);
        let ref_amp = amplitude(&fft2(&z).unwrap());
        let doubled = z.map(|v| 2.0 * v);
        let g = grad_amp_distance(&doubled, &ref_amp).unwrap();
        let offset = &doubled - &z;
        let inner: f64 = g
            .data
            .iter()
            .zip(offset.data.iter())
            .map(|(a, b)| a * b)
            .sum();
        // The descent step -grad must shrink the offset from z.
        assert!(-inner < 0.0, "inner product {}", inner);
    }

    #[test]
    fn grad_phase_zero_at_minimum() {
        let img = random_tensor(1, 8, 8, 60);
        let ref_phase = phase(&fft2(&img).unwrap());
        let g = grad_phase_distance(&img, &ref_phase).unwrap();
        assert!(g.data.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn grad_phase_matches_finite_differences() {
        for seed in 0..5 {
            let z = random_tensor(1, 8, 8, 300 + seed);
            let reference = random_tensor(1, 8, 8, 400 + seed);
            let ref_phase = phase(&fft2(&reference).unwrap());
            let analytic = grad_phase_distance(&z, &ref_phase).unwrap();
            let numeric = finite_diff(&z, &|t| phase_distance(t, &ref_phase).unwrap(), 1e-4);
            assert!(
                max_rel_err(&analytic, &numeric) < 1e-3,
                "seed {seed}: rel err {}",
                max_rel_err(&analytic, &numeric)
            );
        }
    }

    #[test]
    fn grad_phase_inverse_scaling_homogeneity() {
        let z = random_tensor(1, 8, 8, 70);
        let reference = random_tensor(1, 8, 8, 71);
        let ref_phase = phase(&fft2(&reference).unwrap());
        let g1 = grad_phase_distance(&z, &ref_phase).unwrap();
        let g3 = grad_phase_distance(&z.map(|v| 3.0 * v), &ref_phase).unwrap();
        for (a, b) in g3.data.iter().zip(g1.data.iter()) {
            assert!((a - b / 3.0).abs() < 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn phase_score_self_similarity() {
        let img = random_tensor(3, 8, 8, 80);
        assert!((phase_score(&img, &img).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn phase_score_symmetric() {
        let a = random_tensor(3, 8, 8, 81);
        let b = random_tensor(3, 8, 8, 82);
        let ab = phase_score(&a, &b).unwrap();
        let ba = phase_score(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn phase_score_constant_image_scores_zero() {
        let flat = ImageTensor::from_fn(1, 8, 8, |_, _, _| 0.4);
        let other = random_tensor(1, 8, 8, 83);
        assert_eq!(phase_score(&flat, &other).unwrap(), 0.0);
    }

    #[test]
    fn phase_score_channel_counts_may_differ() {
        let a = random_tensor(3, 8, 8, 84);
        let b = random_tensor(1, 8, 8, 85);
        assert!(phase_score(&a, &b).is_ok());
    }
}
