//! Naive nested-loop implementations used as oracles for the optimized kernels.

use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

use crate::attention::{self, AccumulationParams, AttentionMaps, BaseKernelBank};
use crate::backbone::{SpatialFilter, SpatialFilterKind};
use crate::canet::{CaNetworkA, CaSpec, Sharing};
use crate::error::Result;
use crate::nn::{EntryMut, Initializer, Mode, Module, Rng};
use crate::ops::{self, fft::Complex, ConvParams};
use crate::tensor::{Scalar, Shape, Tensor};

fn padded_at<T: Scalar>(x: &Tensor<T>, n: usize, c: usize, y: isize, xx: isize) -> T {
    let s = x.shape();
    if y < 0 || xx < 0 || y >= s.h as isize || xx >= s.w as isize {
        T::zero()
    } else {
        x.at(n, c, y as usize, xx as usize)
    }
}

pub fn conv2d<T: Scalar>(input: &Tensor<T>, p: &ConvParams<T>) -> Tensor<T> {
    let s = input.shape();
    let ws = p.weight.shape();
    let ho = (s.h + 2 * p.padding - ws.h) / p.stride + 1;
    let wo = (s.w + 2 * p.padding - ws.w) / p.stride + 1;
    let cin_g = s.c / p.groups;
    let cout_g = ws.n / p.groups;
    Tensor::from_fn(Shape::new(s.n, ws.n, ho, wo), |n, co, oy, ox| {
        let g = co / cout_g;
        let mut acc = p.bias.as_ref().map_or(T::zero(), |b| b.data()[co]);
        for ci in 0..cin_g {
            for kh in 0..ws.h {
                for kw in 0..ws.w {
                    let y = (oy * p.stride + kh) as isize - p.padding as isize;
                    let x = (ox * p.stride + kw) as isize - p.padding as isize;
                    acc += p.weight.at(co, ci, kh, kw) * padded_at(input, n, g * cin_g + ci, y, x);
                }
            }
        }
        acc
    })
}

/// `maps` shaped `(N, heads·G², H_out, W_out)`.
pub fn aggregate<T: Scalar>(input: &Tensor<T>, maps: &Tensor<T>, size: usize, c_h: usize, stride: usize) -> Tensor<T> {
    let s = input.shape();
    let ms = maps.shape();
    let pad = (size / 2) as isize;
    Tensor::from_fn(Shape::new(s.n, s.c, ms.h, ms.w), |n, c, oy, ox| {
        let h = c / c_h;
        let mut acc = T::zero();
        for kh in 0..size {
            for kw in 0..size {
                let y = (oy * stride + kh) as isize - pad;
                let x = (ox * stride + kw) as isize - pad;
                acc += maps.at(n, h * size * size + kh * size + kw, oy, ox) * padded_at(input, n, c, y, x);
            }
        }
        acc
    })
}

/// `alpha` shaped `(N, A·b, H, W)`; `base` `(heads, b, G, G)` and `pos` `(heads, G, G)` flat.
pub fn construct_maps<T: Scalar>(
    alpha: &Tensor<T>,
    groups: usize,
    heads: usize,
    bases: usize,
    size: usize,
    base: &[T],
    pos: Option<&[T]>,
) -> Tensor<T> {
    let s = alpha.shape();
    let g2 = size * size;
    Tensor::from_fn(Shape::new(s.n, heads * g2, s.h, s.w), |n, c, y, x| {
        let (h, k) = (c / g2, c % g2);
        let a = if groups == 1 { 0 } else { h };
        let mut acc = pos.map_or(T::zero(), |p| p[h * g2 + k]);
        for i in 0..bases {
            acc += alpha.at(n, a * bases + i, y, x) * base[(h * bases + i) * g2 + k];
        }
        acc
    })
}

/// Multi-head depthwise convolution with `weight` shaped `(heads, 1, G, G)`.
pub fn depthwise<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, c_h: usize, stride: usize) -> Tensor<T> {
    let s = input.shape();
    let g = weight.shape().h;
    let pad = (g / 2) as isize;
    let ho = (s.h + 2 * (g / 2) - g) / stride + 1;
    let wo = (s.w + 2 * (g / 2) - g) / stride + 1;
    Tensor::from_fn(Shape::new(s.n, s.c, ho, wo), |n, c, oy, ox| {
        let mut acc = T::zero();
        for kh in 0..g {
            for kw in 0..g {
                let y = (oy * stride + kh) as isize - pad;
                let x = (ox * stride + kw) as isize - pad;
                acc += weight.at(c / c_h, 0, kh, kw) * padded_at(input, n, c, y, x);
            }
        }
        acc
    })
}

/// Direct `O((HW)²)` unitary DFT.
pub fn dft2(plane: &[Complex], h: usize, w: usize, inverse: bool) -> Vec<Complex> {
    let sign = if inverse { 1.0 } else { -1.0 };
    let scale = 1.0 / ((h * w) as f64).sqrt();
    let tau = 2.0 * std::f64::consts::PI;
    let mut out = vec![Complex::new(0.0, 0.0); h * w];
    for u in 0..h {
        for v in 0..w {
            let mut acc = Complex::new(0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let phase = sign * tau * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                    acc += plane[y * w + x] * Complex::from_polar(1.0, phase);
                }
            }
            out[u * w + v] = acc * scale;
        }
    }
    out
}

/// Worst absolute deviation of an optimized kernel from its naive reference.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleCheck {
    pub name: String,
    pub cases: usize,
    pub max_abs: f64,
}

impl OracleCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_abs <= tol && self.cases > 0
    }
}

pub const ORACLE_TOLERANCE: f64 = 1e-12;

fn randn(shape: Shape, rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| StandardNormal.sample(rng))
}

fn record(name: &str, cases: usize, mut case: impl FnMut() -> Result<f64>) -> Result<OracleCheck> {
    let mut max_abs = 0.0f64;
    for _ in 0..cases {
        max_abs = max_abs.max(case()?);
    }
    Ok(OracleCheck { name: name.to_string(), cases, max_abs })
}

/// Runs every optimized kernel against its reference on `cases` random shapes each.
pub fn oracle_suite(seed: u64, cases: usize) -> Result<Vec<OracleCheck>> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut init = Initializer::seeded(seed ^ 3);
    let mut out = Vec::new();
    let r = &mut rng;

    out.push(record("conv2d", cases, || {
        let groups = [1, 2, 3][r.random_range(0..3)];
        let cin = groups * r.random_range(1..4);
        let cout = groups * r.random_range(1..4);
        let k = [1, 3, 5][r.random_range(0..3)];
        let stride = r.random_range(1..3);
        let padding = r.random_range(0..=k / 2);
        let hw = r.random_range(k.max(3)..9);
        let x = randn(Shape::new(r.random_range(1..3), cin, hw, hw + 1), r);
        let p = ConvParams {
            weight: randn(Shape::new(cout, cin / groups, k, k), r),
            bias: r.random_bool(0.5).then(|| randn(Shape::new(cout, 1, 1, 1), r)),
            stride,
            padding,
            groups,
        };
        Ok(ops::conv2d(&x, &p)?.max_abs_diff(&conv2d(&x, &p)))
    })?);

    out.push(record("aggregate", cases, || {
        let c_h = [1, 2, 4][r.random_range(0..3)];
        let heads = r.random_range(1..4);
        let g = [1, 3, 5, 7][r.random_range(0..4)];
        let stride = r.random_range(1..3);
        let hw = r.random_range(3..9);
        let x = randn(Shape::new(r.random_range(1..3), heads * c_h, hw, hw), r);
        let ho = attention::aggregate_output_len(hw, g, stride);
        let maps = randn(Shape::new(x.shape().n, heads * g * g, ho, ho), r);
        let fast = attention::aggregate(&x, &AttentionMaps::new(maps.clone(), heads, g)?, c_h, stride)?;
        Ok(fast.max_abs_diff(&aggregate(&x, &maps, g, c_h, stride)))
    })?);

    out.push(record("construct_maps", cases, || {
        let heads = r.random_range(1..4);
        let bases = r.random_range(1..5);
        let g = [3, 5, 7][r.random_range(0..3)];
        let groups = if r.random_bool(0.5) { heads } else { 1 };
        let alpha = randn(Shape::new(2, groups * bases, 4, 3), r);
        let base: Vec<f64> = randn(Shape::new(heads, bases, g, g), r).into_vec();
        let pos: Vec<f64> = randn(Shape::new(heads, 1, g, g), r).into_vec();
        let bank = BaseKernelBank::from_parts(heads, bases, g, base.clone(), Some(pos.clone()))?;
        let fast = attention::construct_maps(&AccumulationParams::new(alpha.clone(), groups, bases)?, &bank)?;
        Ok(fast.maps.max_abs_diff(&construct_maps(&alpha, groups, heads, bases, g, &base, Some(&pos))))
    })?);

    out.push(record("mh_dw_conv", cases, || {
        let c_h = [1, 2, 3][r.random_range(0..3)];
        let heads = r.random_range(1..4);
        let g = [1, 3, 5][r.random_range(0..3)];
        let stride = r.random_range(1..3);
        let x = randn(Shape::new(2, heads * c_h, 6, 5), r);
        let w = randn(Shape::new(heads, 1, g, g), r);
        Ok(attention::mh_dw_conv(&x, &w, None, c_h, stride)?.max_abs_diff(&depthwise(&x, &w, c_h, stride)))
    })?);

    out.push(record("mh_dw_conv c_h=1 vs grouped conv2d", cases, || {
        let c = r.random_range(1..6);
        let g = [1, 3, 5, 7][r.random_range(0..4)];
        let stride = r.random_range(1..3);
        let x = randn(Shape::new(2, c, 7, 6), r);
        let w = randn(Shape::new(c, 1, g, g), r);
        let p = ConvParams { weight: w.clone(), bias: None, stride, padding: g / 2, groups: c };
        Ok(attention::mh_dw_conv(&x, &w, None, 1, stride)?.max_abs_diff(&ops::conv2d(&x, &p)?))
    })?);

    out.push(record("ca_forward fused vs explicit", cases, || {
        let heads = r.random_range(1..4);
        let c_h = r.random_range(1..3);
        let sharing = if r.random_bool(0.5) { Sharing::PerHead } else { Sharing::Shared };
        let spec = CaSpec {
            width: heads * c_h,
            heads,
            bases: r.random_range(1..5),
            ca_kernel: [1, 3][r.random_range(0..2)],
            size: [3, 5, 7][r.random_range(0..3)],
            stride: r.random_range(1..3),
            sharing,
            pos: r.random_bool(0.7),
        };
        let mut net = CaNetworkA::<f64>::new(spec, &mut init)?;
        let x = randn(Shape::new(2, spec.width, 6, 6), r);
        let fused = net.ca_forward(&x, Mode::Eval)?;
        let explicit = net.ca_forward_explicit(&x, Mode::Eval)?;
        Ok(fused.maps.max_abs_diff(&explicit.maps))
    })?);

    out.push(record("cada alpha=0 vs mh_dw_conv(pos)", cases, || {
        let heads = r.random_range(1..4);
        let c_h = r.random_range(1..4);
        let (g, stride) = ([3, 5, 7][r.random_range(0..3)], r.random_range(1..3));
        let kind = if r.random_bool(0.5) { SpatialFilterKind::Cada } else { SpatialFilterKind::CadaSp };
        let mut f = SpatialFilter::<f64>::build(kind, heads * c_h, stride, 2, c_h, 3, g, true, &mut init)?;
        f.visit_mut("", &mut |name, e| {
            if let EntryMut::Param(p) = e {
                if name.ends_with("conv1.weight") {
                    p.value.fill(0.0);
                } else if name.ends_with("bn.shift") {
                    p.value.fill(-1.0);
                } else {
                    for v in p.value.data_mut() {
                        *v = StandardNormal.sample(&mut *r);
                    }
                }
            }
        });
        let bank = f.bank().expect("attention filter has a bank").bank().to_bank();
        let pos = Tensor::from_vec(Shape::new(heads, 1, g, g), bank.pos().to_vec())?;
        let x = randn(Shape::new(2, heads * c_h, 6, 7), r);
        let y = f.forward(&x, Mode::Train)?;
        Ok(y.max_abs_diff(&attention::mh_dw_conv(&x, &pos, None, c_h, stride)?))
    })?);

    out.push(record("fft2 vs direct dft", cases, || {
        let (h, w) = (r.random_range(1..9), r.random_range(1..9));
        let plane: Vec<Complex> = (0..h * w).map(|_| Complex::new(StandardNormal.sample(&mut *r), StandardNormal.sample(&mut *r))).collect();
        let fast = ops::fft::fft2_complex(&plane, h, w);
        let slow = dft2(&plane, h, w, false);
        Ok(fast.iter().zip(&slow).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max))
    })?);

    Ok(out)
}
