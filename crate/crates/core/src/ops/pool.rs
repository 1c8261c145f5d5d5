use crate::error::{ensure, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Square pooling window. Padding may be asymmetric so even windows can keep size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pool2d {
    pub k: usize,
    pub stride: usize,
    pub pad_begin: usize,
    pub pad_end: usize,
}

impl Pool2d {
    pub fn new(k: usize, stride: usize, pad: usize) -> Self {
        Pool2d {
            k,
            stride,
            pad_begin: pad,
            pad_end: pad,
        }
    }

    /// Stride-1 window whose output has the input's spatial size.
    pub fn same(k: usize) -> Self {
        let pad_begin = (k - 1) / 2;
        Pool2d {
            k,
            stride: 1,
            pad_begin,
            pad_end: k - 1 - pad_begin,
        }
    }

    fn out_len(&self, len: usize) -> Option<usize> {
        let padded = len + self.pad_begin + self.pad_end;
        (padded >= self.k && self.stride > 0).then(|| (padded - self.k) / self.stride + 1)
    }

    pub fn output_shape(&self, s: Shape) -> Result<Shape> {
        ensure!(self.k >= 1, "pooling window must be positive");
        match (self.out_len(s.h), self.out_len(s.w)) {
            (Some(h), Some(w)) => Ok(Shape::new(s.n, s.c, h, w)),
            _ => Err(crate::error::config_err!("input {} smaller than {}x{} pooling window", s, self.k, self.k)),
        }
    }

    /// In-bounds input coordinates covered by output position `o` along one axis.
    fn window(&self, o: usize, len: usize) -> std::ops::Range<usize> {
        let start = (o * self.stride) as isize - self.pad_begin as isize;
        let lo = start.max(0) as usize;
        let hi = ((start + self.k as isize).max(0) as usize).min(len);
        lo..hi.max(lo)
    }
}

/// Average pooling; the divisor is always k² so padded taps count as zeros.
pub fn avg_pool<T: Scalar>(input: &Tensor<T>, pool: Pool2d) -> Result<Tensor<T>> {
    let s = input.shape();
    let os = pool.output_shape(s)?;
    let inv = T::one() / T::of((pool.k * pool.k) as f64);
    let mut out = Tensor::zeros(os);
    for n in 0..s.n {
        for c in 0..s.c {
            let x = input.plane(n, c);
            let o = out.plane_mut(n, c);
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let mut acc = T::zero();
                    for iy in pool.window(oy, s.h) {
                        for ix in pool.window(ox, s.w) {
                            acc += x[iy * s.w + ix];
                        }
                    }
                    o[oy * os.w + ox] = acc * inv;
                }
            }
        }
    }
    Ok(out)
}

pub fn avg_pool_backward<T: Scalar>(grad_out: &Tensor<T>, input_shape: Shape, pool: Pool2d) -> Result<Tensor<T>> {
    let os = pool.output_shape(input_shape)?;
    ensure!(grad_out.shape() == os, "pool gradient shape {} != {}", grad_out.shape(), os);
    let s = input_shape;
    let inv = T::one() / T::of((pool.k * pool.k) as f64);
    let mut gin = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let g = grad_out.plane(n, c).to_vec();
            let gi = gin.plane_mut(n, c);
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let v = g[oy * os.w + ox] * inv;
                    for iy in pool.window(oy, s.h) {
                        for ix in pool.window(ox, s.w) {
                            gi[iy * s.w + ix] += v;
                        }
                    }
                }
            }
        }
    }
    Ok(gin)
}

/// Max pooling; padded taps never win. Returns the winning flat plane index per output.
pub fn max_pool<T: Scalar>(input: &Tensor<T>, pool: Pool2d) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = input.shape();
    let os = pool.output_shape(s)?;
    let mut out = Tensor::zeros(os);
    let mut arg = Vec::with_capacity(os.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            let x = input.plane(n, c);
            let o = out.plane_mut(n, c);
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    for iy in pool.window(oy, s.h) {
                        for ix in pool.window(ox, s.w) {
                            let v = x[iy * s.w + ix];
                            if best_i == usize::MAX || v > best {
                                best = v;
                                best_i = iy * s.w + ix;
                            }
                        }
                    }
                    ensure!(best_i != usize::MAX, "max pooling window lies entirely in padding");
                    o[oy * os.w + ox] = best;
                    arg.push(best_i);
                }
            }
        }
    }
    Ok((out, arg))
}

pub fn max_pool_backward<T: Scalar>(grad_out: &Tensor<T>, input_shape: Shape, argmax: &[usize]) -> Result<Tensor<T>> {
    ensure!(
        argmax.len() == grad_out.numel() && grad_out.shape().n == input_shape.n && grad_out.shape().c == input_shape.c,
        "max pool gradient does not match its forward pass"
    );
    let os = grad_out.shape();
    let mut gin = Tensor::zeros(input_shape);
    let mut k = 0;
    for n in 0..os.n {
        for c in 0..os.c {
            let g = grad_out.plane(n, c).to_vec();
            let gi = gin.plane_mut(n, c);
            for v in g {
                gi[argmax[k]] += v;
                k += 1;
            }
        }
    }
    Ok(gin)
}

pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let inv = T::one() / T::of(s.plane() as f64);
    Tensor::from_fn(Shape::new(s.n, s.c, 1, 1), |n, c, _, _| input.plane(n, c).iter().copied().sum::<T>() * inv)
}

pub fn global_avg_pool_backward<T: Scalar>(grad_out: &Tensor<T>, input_shape: Shape) -> Result<Tensor<T>> {
    ensure!(
        grad_out.shape() == Shape::new(input_shape.n, input_shape.c, 1, 1),
        "global pool gradient shape {} does not match input {}",
        grad_out.shape(),
        input_shape
    );
    let inv = T::one() / T::of(input_shape.plane() as f64);
    Ok(Tensor::from_fn(input_shape, |n, c, _, _| grad_out.at(n, c, 0, 0) * inv))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn avg_pool_of_constant_is_constant() {
        let x = Tensor::full(Shape::new(1, 2, 6, 6), 2.5f64);
        let y = avg_pool(&x, Pool2d::new(2, 2, 0)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 2, 3, 3));
        assert!(y.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn avg_pool_counts_padding() {
        let x = Tensor::full(Shape::new(1, 1, 3, 3), 1.0f64);
        let y = avg_pool(&x, Pool2d::new(3, 1, 1)).unwrap();
        assert!((y.at(0, 0, 0, 0) - 4.0 / 9.0).abs() < 1e-15);
        assert!((y.at(0, 0, 1, 1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn same_pool_keeps_size_for_even_windows() {
        for k in [2, 3, 4, 5] {
            let s = Pool2d::same(k).output_shape(Shape::new(1, 1, 7, 8)).unwrap();
            assert_eq!((s.h, s.w), (7, 8));
        }
    }

    #[test]
    fn max_pool_picks_maximum() {
        let x = Tensor::from_fn(Shape::new(1, 1, 4, 4), |_, _, h, w| (h * 4 + w) as f64);
        let (y, arg) = max_pool(&x, Pool2d::new(3, 2, 1)).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
        let g = max_pool_backward(&Tensor::full(y.shape(), 1.0), x.shape(), &arg).unwrap();
        assert_eq!(g.sum(), 4.0);
        assert_eq!(g.at(0, 0, 3, 3), 1.0);
    }
}
