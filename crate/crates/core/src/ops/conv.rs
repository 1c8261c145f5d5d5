//! Grouped 2-D cross-correlation with zero padding.

use rayon::prelude::*;

use crate::error::{ensure, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Convolution weights and geometry.
///
/// `weight` is shaped `(C_out, C_in / groups, kH, kW)`; `bias`, when present,
/// is shaped `(C_out, 1, 1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvDims {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    pub fn out_shape(&self) -> Shape {
        Shape::new(self.n, self.cout, self.ho, self.wo)
    }
}

/// Output length of a strided window sweep, or `None` if the window never fits.
pub fn out_len(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Range of output positions `o` for which `o * stride + offset` lands inside `[0, len)`.
#[inline]
pub(crate) fn valid_range(out: usize, len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(stride)
    };
    let max_idx = len as isize - 1 - offset;
    if max_idx < 0 {
        return (0, 0);
    }
    let hi = ((max_idx as usize) / stride + 1).min(out);
    (lo.min(hi), hi)
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>, stride: usize, padding: usize, groups: usize) -> Result<Self> {
        let p = ConvParams {
            weight,
            bias,
            stride,
            padding,
            groups,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c * self.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape().h, self.weight.shape().w)
    }

    pub fn validate(&self) -> Result<()> {
        let ws = self.weight.shape();
        ensure!(self.stride >= 1, "convolution stride must be positive");
        ensure!(self.groups >= 1, "convolution groups must be positive");
        ensure!(
            ws.n % self.groups == 0,
            "groups {} does not divide output channels {}",
            self.groups,
            ws.n
        );
        ensure!(ws.h >= 1 && ws.w >= 1 && ws.c >= 1, "empty convolution kernel {}", ws);
        if let Some(b) = &self.bias {
            ensure!(
                b.numel() == ws.n,
                "bias length {} does not match output channels {}",
                b.numel(),
                ws.n
            );
        }
        Ok(())
    }

    pub(crate) fn dims(&self, input: Shape) -> Result<ConvDims> {
        self.validate()?;
        let ws = self.weight.shape();
        ensure!(
            input.c % self.groups == 0,
            "groups {} does not divide input channels {}",
            self.groups,
            input.c
        );
        ensure!(
            input.c == ws.c * self.groups,
            "input has {} channels but the convolution expects {}",
            input.c,
            ws.c * self.groups
        );
        let ho = out_len(input.h, ws.h, self.stride, self.padding);
        let wo = out_len(input.w, ws.w, self.stride, self.padding);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(crate::error::config_err!(
                "input {} is smaller than the {}x{} kernel with padding {}",
                input,
                ws.h,
                ws.w,
                self.padding
            ));
        };
        Ok(ConvDims {
            n: input.n,
            cin: input.c,
            h: input.h,
            w: input.w,
            cout: ws.n,
            kh: ws.h,
            kw: ws.w,
            ho,
            wo,
            stride: self.stride,
            pad: self.padding,
            groups: self.groups,
        })
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        Ok(self.dims(input)?.out_shape())
    }
}

pub fn conv2d<T: Scalar>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    let d = params.dims(input.shape())?;
    let mut out = Tensor::zeros(d.out_shape());
    let out_sample = d.cout * d.ho * d.wo;
    if out_sample == 0 {
        return Ok(out);
    }
    let weight = params.weight.data();
    let bias = params.bias.as_ref().map(|b| b.data());
    out.data_mut()
        .par_chunks_mut(out_sample)
        .enumerate()
        .for_each(|(n, o)| forward_sample(input.sample(n), weight, bias, &d, o));
    Ok(out)
}

/// Unrolled patches of one group, laid out `(output position, cin_g·kh·kw)` to match weight rows.
fn im2col<T: Scalar>(inp: &[T], d: &ConvDims, group: usize, col: &mut [T]) {
    let cin_g = d.cin_g();
    let plane_in = d.h * d.w;
    let r_len = cin_g * d.kh * d.kw;
    col.fill(T::zero());
    for icl in 0..cin_g {
        let x = &inp[(group * cin_g + icl) * plane_in..][..plane_in];
        for kh in 0..d.kh {
            let oy_off = kh as isize - d.pad as isize;
            let (y0, y1) = valid_range(d.ho, d.h, d.stride, oy_off);
            for kw in 0..d.kw {
                let r = (icl * d.kh + kh) * d.kw + kw;
                let ox_off = kw as isize - d.pad as isize;
                let (x0, x1) = valid_range(d.wo, d.w, d.stride, ox_off);
                for oy in y0..y1 {
                    let iy = ((oy * d.stride) as isize + oy_off) as usize;
                    for ox in x0..x1 {
                        let ix = ((ox * d.stride) as isize + ox_off) as usize;
                        col[(oy * d.wo + ox) * r_len + r] = x[iy * d.w + ix];
                    }
                }
            }
        }
    }
}

/// Scatter-adds unrolled patch gradients back onto the input plane of one group.
fn col2im<T: Scalar>(gcol: &[T], d: &ConvDims, group: usize, gi: &mut [T]) {
    let cin_g = d.cin_g();
    let plane_in = d.h * d.w;
    let r_len = cin_g * d.kh * d.kw;
    for icl in 0..cin_g {
        let gx = &mut gi[(group * cin_g + icl) * plane_in..][..plane_in];
        for kh in 0..d.kh {
            let oy_off = kh as isize - d.pad as isize;
            let (y0, y1) = valid_range(d.ho, d.h, d.stride, oy_off);
            for kw in 0..d.kw {
                let r = (icl * d.kh + kh) * d.kw + kw;
                let ox_off = kw as isize - d.pad as isize;
                let (x0, x1) = valid_range(d.wo, d.w, d.stride, ox_off);
                for oy in y0..y1 {
                    let iy = ((oy * d.stride) as isize + oy_off) as usize;
                    for ox in x0..x1 {
                        let ix = ((ox * d.stride) as isize + ox_off) as usize;
                        gx[iy * d.w + ix] += gcol[(oy * d.wo + ox) * r_len + r];
                    }
                }
            }
        }
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

fn forward_sample<T: Scalar>(inp: &[T], weight: &[T], bias: Option<&[T]>, d: &ConvDims, out: &mut [T]) {
    let cout_g = d.cout_g();
    let plane_out = d.ho * d.wo;
    let r_len = d.cin_g() * d.kh * d.kw;
    let mut col = vec![T::zero(); plane_out * r_len];
    for g in 0..d.groups {
        im2col(inp, d, g, &mut col);
        for oc in g * cout_g..(g + 1) * cout_g {
            let wrow = &weight[oc * r_len..][..r_len];
            let b = bias.map_or(T::zero(), |b| b[oc]);
            for (p, o) in out[oc * plane_out..][..plane_out].iter_mut().enumerate() {
                *o = b + dot(wrow, &col[p * r_len..][..r_len]);
            }
        }
    }
}

/// Gradients of [`conv2d`] with respect to its input, weight and bias.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    params: &ConvParams<T>,
) -> Result<ConvGrads<T>> {
    let d = params.dims(input.shape())?;
    ensure!(
        grad_out.shape() == d.out_shape(),
        "gradient shape {} does not match convolution output {}",
        grad_out.shape(),
        d.out_shape()
    );
    let weight = params.weight.data();
    let wlen = weight.len();
    let partials: Vec<(Vec<T>, Vec<T>)> = (0..d.n)
        .into_par_iter()
        .map(|n| {
            let mut gi = vec![T::zero(); d.cin * d.h * d.w];
            let mut gw = vec![T::zero(); wlen];
            backward_sample(grad_out.sample(n), input.sample(n), weight, &d, &mut gi, &mut gw);
            (gi, gw)
        })
        .collect();

    let mut grad_input = Vec::with_capacity(input.numel());
    let mut grad_weight = vec![T::zero(); wlen];
    for (gi, gw) in partials {
        grad_input.extend_from_slice(&gi);
        for (a, b) in grad_weight.iter_mut().zip(gw) {
            *a += b;
        }
    }
    let grad_bias = params.bias.as_ref().map(|b| {
        let plane = d.ho * d.wo;
        let mut gb = Tensor::zeros(b.shape());
        for n in 0..d.n {
            let go = grad_out.sample(n);
            for oc in 0..d.cout {
                gb.data_mut()[oc] += go[oc * plane..(oc + 1) * plane].iter().copied().sum::<T>();
            }
        }
        gb
    });
    Ok(ConvGrads {
        input: Tensor::from_vec(input.shape(), grad_input)?,
        weight: Tensor::from_vec(params.weight.shape(), grad_weight)?,
        bias: grad_bias,
    })
}

fn backward_sample<T: Scalar>(go: &[T], inp: &[T], weight: &[T], d: &ConvDims, gi: &mut [T], gw: &mut [T]) {
    let cout_g = d.cout_g();
    let plane_out = d.ho * d.wo;
    let r_len = d.cin_g() * d.kh * d.kw;
    let mut col = vec![T::zero(); plane_out * r_len];
    let mut gcol = vec![T::zero(); plane_out * r_len];
    for g in 0..d.groups {
        im2col(inp, d, g, &mut col);
        gcol.fill(T::zero());
        for oc in g * cout_g..(g + 1) * cout_g {
            let wrow = &weight[oc * r_len..][..r_len];
            let gwrow = &mut gw[oc * r_len..][..r_len];
            for (p, &gv) in go[oc * plane_out..][..plane_out].iter().enumerate() {
                axpy(gv, &col[p * r_len..][..r_len], gwrow);
                axpy(gv, wrow, &mut gcol[p * r_len..][..r_len]);
            }
        }
        col2im(&gcol, d, g, gi);
    }
}
