//! Low-pass filters applied before stride-2 subsampling, and kernel spectra.

use std::fmt::Write as _;

use crate::attention::mh_dw_conv;
use crate::error::{config_err, ensure, Result};
use crate::ops::fft::{bin_frequency, fft2, fft2_complex, ifft2, Complex};
use crate::ops::{avg_pool, Pool2d};
use crate::tensor::{Scalar, Shape, Tensor};

use std::f64::consts::FRAC_PI_2;

/// Pass-band geometry of the FFT filters. Both keep the half band in each axis;
/// `Ideal` drops the cutoff bins at exactly `π/2`, `Box` keeps them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BandMask {
    Ideal,
    Box,
}

impl BandMask {
    pub fn passes(self, fy: f64, fx: f64) -> bool {
        let tol = 1e-12;
        match self {
            BandMask::Ideal => fy.abs() < FRAC_PI_2 - tol && fx.abs() < FRAC_PI_2 - tol,
            BandMask::Box => fy.abs() <= FRAC_PI_2 + tol && fx.abs() <= FRAC_PI_2 + tol,
        }
    }
}

/// Applies `mask` in the frequency domain to every channel and keeps the real part.
pub fn fft_lowpass<T: Scalar>(input: &Tensor<T>, mask: BandMask) -> Tensor<T> {
    let s = input.shape();
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let plane: Vec<f64> = input.plane(n, c).iter().map(|v| v.as_f64()).collect();
            let filtered = mask_plane(&plane, s.h, s.w, mask);
            for (o, v) in out.plane_mut(n, c).iter_mut().zip(filtered) {
                *o = T::of(v);
            }
        }
    }
    out
}

fn mask_plane(plane: &[f64], h: usize, w: usize, mask: BandMask) -> Vec<f64> {
    let mut spec = fft2(plane, h, w);
    for y in 0..h {
        let fy = bin_frequency(y, h);
        for x in 0..w {
            if !mask.passes(fy, bin_frequency(x, w)) {
                spec[y * w + x] = Complex::new(0.0, 0.0);
            }
        }
    }
    ifft2(&spec, h, w).into_iter().map(|z| z.re).collect()
}

pub fn ideal_lowpass<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    fft_lowpass(input, BandMask::Ideal)
}

pub fn box_lowpass<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    fft_lowpass(input, BandMask::Box)
}

/// Normalized 1-D binomial coefficients of length `k`.
pub fn binomial_row(k: usize) -> Vec<f64> {
    let mut row = vec![1.0];
    for _ in 1..k {
        let mut next = vec![1.0; row.len() + 1];
        for i in 1..row.len() {
            next[i] = row[i - 1] + row[i];
        }
        row = next;
    }
    let total: f64 = row.iter().sum();
    row.iter().map(|v| v / total).collect()
}

/// `k×k` binomial kernel, row-major, summing to 1.
pub fn binomial_kernel(k: usize) -> Vec<f64> {
    let row = binomial_row(k);
    row.iter().flat_map(|a| row.iter().map(move |b| a * b)).collect()
}

/// Depthwise `[1,2,1]ᵀ[1,2,1] / 16` blur with zero padding 1.
pub fn binomial3<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let k: Vec<T> = binomial_kernel(3).into_iter().map(T::of).collect();
    let weight = Tensor::from_vec(Shape::new(1, 1, 3, 3), k)?;
    mh_dw_conv(input, &weight, None, input.shape().c, 1)
}

/// Size-preserving `k×k` average pooling.
pub fn avgpool<T: Scalar>(input: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    ensure!(matches!(k, 2 | 3 | 5), "average-pool low-pass size {} must be 2, 3 or 5", k);
    avg_pool(input, Pool2d::same(k))
}

/// DC-centred magnitude response of a kernel, normalized to peak 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub grid: usize,
    /// Row-major `grid×grid`; DC sits at `(grid/2, grid/2)`.
    pub values: Vec<f64>,
    /// Set for an all-zero kernel, in which case `values` are all zero.
    pub degenerate: bool,
}

/// Zero-padded DFT magnitude of a `rows×cols` kernel on a `grid×grid` lattice.
pub fn spectrum(kernel: &[f64], rows: usize, cols: usize, grid: usize) -> Result<Spectrum> {
    ensure!(kernel.len() == rows * cols, "kernel has {} taps, expected {}x{}", kernel.len(), rows, cols);
    ensure!(grid >= rows && grid >= cols && grid > 0, "grid {} is smaller than the {}x{} kernel", grid, rows, cols);
    let mut padded = vec![Complex::new(0.0, 0.0); grid * grid];
    for r in 0..rows {
        for c in 0..cols {
            padded[r * grid + c] = Complex::new(kernel[r * cols + c], 0.0);
        }
    }
    let spec = fft2_complex(&padded, grid, grid);
    let half = grid / 2;
    let mut values = vec![0.0; grid * grid];
    for r in 0..grid {
        for c in 0..grid {
            let src = ((r + grid - half) % grid) * grid + (c + grid - half) % grid;
            values[r * grid + c] = spec[src].norm();
        }
    }
    let peak = values.iter().cloned().fold(0.0, f64::max);
    let degenerate = kernel.iter().all(|&v| v == 0.0) || peak == 0.0;
    if degenerate {
        values.fill(0.0);
    } else {
        values.iter_mut().for_each(|v| *v /= peak);
    }
    Ok(Spectrum { grid, values, degenerate })
}

impl Spectrum {
    /// Angular frequency of centred row or column index `i`.
    pub fn frequency(&self, i: usize) -> f64 {
        2.0 * std::f64::consts::PI * (i as f64 - (self.grid / 2) as f64) / self.grid as f64
    }

    /// One comma-separated row per grid row, shortest round-trip float formatting.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.values.chunks(self.grid) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{}", line.join(","));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut values = Vec::new();
        let mut grid = 0;
        for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let row: Vec<f64> = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| config_err!("spectrum row {}: {e}", i + 1))?;
            if grid == 0 {
                grid = row.len();
            }
            ensure!(row.len() == grid, "spectrum row {} has {} values, expected {}", i + 1, row.len(), grid);
            values.extend(row);
        }
        ensure!(grid > 0 && values.len() == grid * grid, "spectrum is not square");
        let degenerate = values.iter().all(|&v| v == 0.0);
        Ok(Spectrum { grid, values, degenerate })
    }

    /// Binary 8-bit PGM (`P5`), row-major.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.grid, self.grid).into_bytes();
        out.extend(self.values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }
}
