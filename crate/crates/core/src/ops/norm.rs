//! Per-channel batch normalization.

use crate::error::{ensure, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

/// What the backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mode: Mode,
}

/// Normalizes each channel. Train mode uses batch statistics and folds them into
/// `stats` with momentum 0.1 (unbiased variance); eval mode uses `stats` as is.
pub fn batch_norm<T: Scalar>(
    input: &Tensor<T>,
    scale: &[T],
    shift: &[T],
    stats: &mut RunningStats<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let s = input.shape();
    ensure!(
        scale.len() == s.c && shift.len() == s.c && stats.mean.len() == s.c && stats.var.len() == s.c,
        "batch norm over {} channels given parameters for {}",
        s.c,
        scale.len()
    );
    let eps = T::of(BN_EPS);
    let m = s.n * s.h * s.w;
    let (mean, var) = match mode {
        Mode::Train => {
            ensure!(m > 0, "batch norm on an empty batch");
            let mut mean = vec![T::zero(); s.c];
            let mut var = vec![T::zero(); s.c];
            for c in 0..s.c {
                let mut acc = T::zero();
                for n in 0..s.n {
                    acc += input.plane(n, c).iter().copied().sum::<T>();
                }
                let mu = acc / T::of(m as f64);
                let mut sq = T::zero();
                for n in 0..s.n {
                    for &x in input.plane(n, c) {
                        sq += (x - mu) * (x - mu);
                    }
                }
                mean[c] = mu;
                var[c] = sq / T::of(m as f64);
            }
            let mom = T::of(BN_MOMENTUM);
            let unbias = if m > 1 { T::of(m as f64 / (m - 1) as f64) } else { T::one() };
            for c in 0..s.c {
                stats.mean[c] = (T::one() - mom) * stats.mean[c] + mom * mean[c];
                stats.var[c] = (T::one() - mom) * stats.var[c] + mom * var[c] * unbias;
            }
            (mean, var)
        }
        Mode::Eval => (stats.mean.clone(), stats.var.clone()),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(s);
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let (mu, is, g, b) = (mean[c], inv_std[c], scale[c], shift[c]);
            let src = input.plane(n, c);
            let xh = xhat.plane_mut(n, c);
            for (d, &x) in xh.iter_mut().zip(src) {
                *d = (x - mu) * is;
            }
            let xh = xhat.plane(n, c).to_vec();
            for (o, x) in out.plane_mut(n, c).iter_mut().zip(xh) {
                *o = g * x + b;
            }
        }
    }
    Ok((out, BnCache { xhat, inv_std, mode }))
}

pub struct BnGrads<T> {
    pub input: Tensor<T>,
    pub scale: Vec<T>,
    pub shift: Vec<T>,
}

pub fn batch_norm_backward<T: Scalar>(grad_out: &Tensor<T>, cache: &BnCache<T>, scale: &[T]) -> Result<BnGrads<T>> {
    let s = grad_out.shape();
    ensure!(
        s == cache.xhat.shape(),
        "batch norm gradient shape {} does not match forward {}",
        s,
        cache.xhat.shape()
    );
    let m = T::of((s.n * s.h * s.w) as f64);
    let mut gscale = vec![T::zero(); s.c];
    let mut gshift = vec![T::zero(); s.c];
    for c in 0..s.c {
        for n in 0..s.n {
            for (&g, &xh) in grad_out.plane(n, c).iter().zip(cache.xhat.plane(n, c)) {
                gscale[c] += g * xh;
                gshift[c] += g;
            }
        }
    }
    let mut gin = Tensor::zeros(s);
    for c in 0..s.c {
        let k = scale[c] * cache.inv_std[c];
        for n in 0..s.n {
            let go = grad_out.plane(n, c).to_vec();
            let xh = cache.xhat.plane(n, c).to_vec();
            let gi = gin.plane_mut(n, c);
            match cache.mode {
                Mode::Eval => {
                    for (d, g) in gi.iter_mut().zip(go) {
                        *d = k * g;
                    }
                }
                Mode::Train => {
                    for ((d, g), x) in gi.iter_mut().zip(go).zip(xh) {
                        *d = k / m * (m * g - gshift[c] - x * gscale[c]);
                    }
                }
            }
        }
    }
    Ok(BnGrads {
        input: gin,
        scale: gscale,
        shift: gshift,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn standardized_input_is_preserved() {
        // each channel: values -1, 1 repeated => mean 0, variance 1
        let x = Tensor::from_fn(Shape::new(2, 3, 2, 2), |n, _, h, w| if (n + h + w) % 2 == 0 { 1.0 } else { -1.0 });
        let mut st = RunningStats::new(3);
        let (y, _) = batch_norm(&x, &[1.0; 3], &[0.0; 3], &mut st, Mode::Train).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn eval_matches_hand_formula() {
        let x = Tensor::from_fn(Shape::new(1, 2, 2, 3), |_, c, h, w| (c * 6 + h * 3 + w) as f64 - 2.5);
        let mut st = RunningStats {
            mean: vec![0.3, -1.2],
            var: vec![2.0, 0.5],
        };
        let scale = [1.7, -0.4];
        let shift = [0.25, 3.0];
        let (y, _) = batch_norm(&x, &scale, &shift, &mut st, Mode::Eval).unwrap();
        for c in 0..2 {
            for h in 0..2 {
                for w in 0..3 {
                    let xv = x.at(0, c, h, w);
                    let e = scale[c] * (xv - st.mean[c]) / (st.var[c] + 1e-5).sqrt() + shift[c];
                    assert!((y.at(0, c, h, w) - e).abs() < 1e-12);
                }
            }
        }
        // eval mode must not touch running statistics
        assert_eq!(st.mean, vec![0.3, -1.2]);
    }

    #[test]
    fn running_stats_use_momentum() {
        let x = Tensor::from_vec(Shape::new(2, 1, 1, 1), vec![1.0, 3.0]).unwrap();
        let mut st = RunningStats::<f64>::new(1);
        batch_norm(&x, &[1.0], &[0.0], &mut st, Mode::Train).unwrap();
        assert!((st.mean[0] - 0.2).abs() < 1e-12);
        // batch variance 1, unbiased 2
        assert!((st.var[0] - (0.9 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 2, 2, 2));
        let mut st = RunningStats::new(3);
        assert!(batch_norm(&x, &[1.0; 3], &[0.0; 3], &mut st, Mode::Eval).is_err());
    }
}
