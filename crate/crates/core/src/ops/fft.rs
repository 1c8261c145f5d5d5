//! Unitary 2-D discrete Fourier transform of a single H×W plane.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

pub use rustfft::num_complex::Complex64 as Complex;

fn transform(data: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    assert_eq!(data.len(), h * w, "plane length must be h*w");
    if data.is_empty() {
        return;
    }
    let mut planner = FftPlanner::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for r in data.chunks_mut(w) {
        row.process(r);
    }
    let mut column = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = data[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            data[y * w + x] = column[y];
        }
    }
    let norm = 1.0 / ((h * w) as f64).sqrt();
    data.iter_mut().for_each(|v| *v *= norm);
}

/// Forward DFT of a real plane with 1/√(HW) scaling.
pub fn fft2(plane: &[f64], h: usize, w: usize) -> Vec<Complex64> {
    let mut data: Vec<Complex64> = plane.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    transform(&mut data, h, w, false);
    data
}

pub fn fft2_complex(plane: &[Complex64], h: usize, w: usize) -> Vec<Complex64> {
    let mut data = plane.to_vec();
    transform(&mut data, h, w, false);
    data
}

/// Inverse of [`fft2`], same scaling.
pub fn ifft2(spectrum: &[Complex64], h: usize, w: usize) -> Vec<Complex64> {
    let mut data = spectrum.to_vec();
    transform(&mut data, h, w, true);
    data
}

/// Angular frequency of DFT bin `k` of an `n`-point transform, in (-π, π].
pub fn bin_frequency(k: usize, n: usize) -> f64 {
    let k = if 2 * k > n { k as f64 - n as f64 } else { k as f64 };
    2.0 * std::f64::consts::PI * k / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_has_flat_spectrum() {
        let mut x = vec![0.0; 12];
        x[0] = 1.0;
        let s = fft2(&x, 3, 4);
        let m = 1.0 / 12f64.sqrt();
        assert!(s.iter().all(|v| (v.norm() - m).abs() < 1e-14));
    }

    #[test]
    fn constant_has_only_dc() {
        let s = fft2(&[2.0; 20], 4, 5);
        assert!((s[0].re - 2.0 * 20f64.sqrt()).abs() < 1e-12);
        assert!(s[1..].iter().all(|v| v.norm() < 1e-12));
    }

    #[test]
    fn bin_frequencies_wrap() {
        assert_eq!(bin_frequency(0, 8), 0.0);
        assert!((bin_frequency(4, 8) - std::f64::consts::PI).abs() < 1e-15);
        assert!((bin_frequency(6, 8) + std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        assert!(bin_frequency(3, 5) < 0.0);
    }
}
