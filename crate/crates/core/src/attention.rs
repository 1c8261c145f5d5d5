//! Decomposed attention maps and the per-location multi-head aggregation.
//!
//! An attention map for output location `l` and head `h` is
//! `F = p_h + sum_i alpha_{l,h,i} * k_{h,i}`: a position-encoding kernel plus a
//! location-dependent mix of `b` shared base kernels. Aggregation applies `F` to
//! the zero-padded `G×G` neighbourhood of every channel in the head. Maps are
//! not normalized.

use rayon::prelude::*;

use crate::error::{ensure, Result};
use crate::ops::conv::valid_range;
use crate::tensor::{Scalar, Shape, Tensor};

/// Per-head position-encoding kernel plus `b` base kernels, each `G×G`.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseKernelBank<T> {
    heads: usize,
    bases: usize,
    size: usize,
    /// (heads, b, G, G)
    base: Vec<T>,
    /// (heads, G, G); identically zero when position encoding is disabled.
    pos: Vec<T>,
    pos_enabled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankGrads<T> {
    pub base: Vec<T>,
    pub pos: Vec<T>,
}

const BANK_MAGIC: &[u8; 4] = b"BANK";

impl<T: Scalar> BaseKernelBank<T> {
    pub fn zeros(heads: usize, bases: usize, size: usize, pos_enabled: bool) -> Result<Self> {
        ensure!(heads >= 1, "a kernel bank needs at least one head");
        ensure!(size % 2 == 1, "aggregation kernel size {} must be odd", size);
        Ok(BaseKernelBank {
            heads,
            bases,
            size,
            base: vec![T::zero(); heads * bases * size * size],
            pos: vec![T::zero(); heads * size * size],
            pos_enabled,
        })
    }

    pub fn from_parts(heads: usize, bases: usize, size: usize, base: Vec<T>, pos: Option<Vec<T>>) -> Result<Self> {
        let mut bank = Self::zeros(heads, bases, size, pos.is_some())?;
        ensure!(base.len() == bank.base.len(), "base kernel data has {} values, expected {}", base.len(), bank.base.len());
        bank.base = base;
        if let Some(p) = pos {
            ensure!(p.len() == bank.pos.len(), "position kernel data has {} values, expected {}", p.len(), bank.pos.len());
            bank.pos = p;
        }
        Ok(bank)
    }

    pub fn heads(&self) -> usize {
        self.heads
    }
    pub fn bases(&self) -> usize {
        self.bases
    }
    pub fn size(&self) -> usize {
        self.size
    }
    pub fn pos_enabled(&self) -> bool {
        self.pos_enabled
    }

    pub fn base(&self) -> &[T] {
        &self.base
    }
    pub fn pos(&self) -> &[T] {
        &self.pos
    }

    pub fn kernel(&self, head: usize, i: usize) -> &[T] {
        let g2 = self.size * self.size;
        let start = (head * self.bases + i) * g2;
        &self.base[start..start + g2]
    }

    pub fn kernel_mut(&mut self, head: usize, i: usize) -> &mut [T] {
        let g2 = self.size * self.size;
        let start = (head * self.bases + i) * g2;
        &mut self.base[start..start + g2]
    }

    pub fn pos_kernel(&self, head: usize) -> &[T] {
        let g2 = self.size * self.size;
        &self.pos[head * g2..(head + 1) * g2]
    }

    pub fn pos_kernel_mut(&mut self, head: usize) -> &mut [T] {
        let g2 = self.size * self.size;
        &mut self.pos[head * g2..(head + 1) * g2]
    }

    /// Trainable values held by the bank; position kernels count only when enabled.
    pub fn param_count(&self) -> usize {
        self.base.len() + if self.pos_enabled { self.pos.len() } else { 0 }
    }

    /// Little-endian binary encoding: magic, dims, flag, then the raw values as f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 8 * (self.base.len() + self.pos.len()));
        out.extend_from_slice(BANK_MAGIC);
        for d in [self.heads, self.bases, self.size] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(self.pos_enabled as u8);
        for v in self.base.iter().chain(&self.pos) {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        ensure!(bytes.len() >= 17 && &bytes[..4] == BANK_MAGIC, "not a kernel bank encoding");
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (heads, bases, size) = (dim(0), dim(1), dim(2));
        let pos_enabled = bytes[16] != 0;
        let mut bank = Self::zeros(heads, bases, size, pos_enabled)?;
        let n = bank.base.len() + bank.pos.len();
        let body = &bytes[17..];
        ensure!(body.len() == 8 * n, "kernel bank body has {} bytes, expected {}", body.len(), 8 * n);
        let mut values = body.chunks_exact(8).map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())));
        bank.base.iter_mut().for_each(|v| *v = values.next().unwrap());
        bank.pos.iter_mut().for_each(|v| *v = values.next().unwrap());
        Ok(bank)
    }
}

/// Accumulation parameters shaped `(N, A·b, H_out, W_out)`, where `A` is the
/// number of heads (one mix per head) or 1 (one mix shared by every head).
#[derive(Debug, Clone, PartialEq)]
pub struct AccumulationParams<T> {
    pub alpha: Tensor<T>,
    pub groups: usize,
    pub bases: usize,
}

impl<T: Scalar> AccumulationParams<T> {
    pub fn new(alpha: Tensor<T>, groups: usize, bases: usize) -> Result<Self> {
        ensure!(
            groups >= 1 && alpha.shape().c == groups * bases,
            "accumulation tensor has {} channels, expected {} groups x {} bases",
            alpha.shape().c,
            groups,
            bases
        );
        Ok(AccumulationParams { alpha, groups, bases })
    }
}

/// Per-location `G×G` maps shaped `(N, heads·G·G, H_out, W_out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps<T> {
    pub maps: Tensor<T>,
    pub heads: usize,
    pub size: usize,
}

impl<T: Scalar> AttentionMaps<T> {
    pub fn new(maps: Tensor<T>, heads: usize, size: usize) -> Result<Self> {
        ensure!(size % 2 == 1, "aggregation kernel size {} must be odd", size);
        ensure!(
            heads >= 1 && maps.shape().c == heads * size * size,
            "attention maps have {} channels, expected {} heads x {}x{}",
            maps.shape().c,
            heads,
            size,
            size
        );
        Ok(AttentionMaps { maps, heads, size })
    }

    /// The `G×G` map of head `h` at output location `(y, x)` of sample `n`.
    pub fn kernel_at(&self, n: usize, h: usize, y: usize, x: usize) -> Vec<T> {
        let g2 = self.size * self.size;
        (0..g2).map(|k| self.maps.at(n, h * g2 + k, y, x)).collect()
    }
}

pub fn construct_maps<T: Scalar>(alpha: &AccumulationParams<T>, bank: &BaseKernelBank<T>) -> Result<AttentionMaps<T>> {
    check_alpha(alpha, bank)?;
    let s = alpha.alpha.shape();
    let g2 = bank.size * bank.size;
    let b = bank.bases;
    let out_shape = Shape::new(s.n, bank.heads * g2, s.h, s.w);
    let mut maps = Tensor::zeros(out_shape);
    for n in 0..s.n {
        for h in 0..bank.heads {
            let a = if alpha.groups == 1 { 0 } else { h };
            for k in 0..g2 {
                let plane = maps.plane_mut(n, h * g2 + k);
                if bank.pos_enabled {
                    plane.fill(bank.pos[h * g2 + k]);
                }
                for i in 0..b {
                    let coef = bank.base[(h * b + i) * g2 + k];
                    for (m, &al) in plane.iter_mut().zip(alpha.alpha.plane(n, a * b + i)) {
                        *m += coef * al;
                    }
                }
            }
        }
    }
    AttentionMaps::new(maps, bank.heads, bank.size)
}

pub fn construct_maps_backward<T: Scalar>(
    grad_maps: &Tensor<T>,
    alpha: &AccumulationParams<T>,
    bank: &BaseKernelBank<T>,
) -> Result<(Tensor<T>, BankGrads<T>)> {
    check_alpha(alpha, bank)?;
    let s = alpha.alpha.shape();
    let g2 = bank.size * bank.size;
    let b = bank.bases;
    ensure!(
        grad_maps.shape() == Shape::new(s.n, bank.heads * g2, s.h, s.w),
        "map gradient shape {} does not match construction output",
        grad_maps.shape()
    );
    let mut grad_alpha = Tensor::zeros(s);
    let mut gbase = vec![T::zero(); bank.base.len()];
    let mut gpos = vec![T::zero(); bank.pos.len()];
    for n in 0..s.n {
        for h in 0..bank.heads {
            let a = if alpha.groups == 1 { 0 } else { h };
            for k in 0..g2 {
                let gp = grad_maps.plane(n, h * g2 + k);
                if bank.pos_enabled {
                    gpos[h * g2 + k] += gp.iter().copied().sum::<T>();
                }
                for i in 0..b {
                    let bidx = (h * b + i) * g2 + k;
                    let coef = bank.base[bidx];
                    let ap = alpha.alpha.plane(n, a * b + i);
                    gbase[bidx] += gp.iter().zip(ap).map(|(&g, &al)| g * al).sum::<T>();
                    for (ga, &g) in grad_alpha.plane_mut(n, a * b + i).iter_mut().zip(gp) {
                        *ga += coef * g;
                    }
                }
            }
        }
    }
    Ok((grad_alpha, BankGrads { base: gbase, pos: gpos }))
}

fn check_alpha<T: Scalar>(alpha: &AccumulationParams<T>, bank: &BaseKernelBank<T>) -> Result<()> {
    ensure!(
        alpha.bases == bank.bases,
        "accumulation parameters mix {} bases but the bank holds {}",
        alpha.bases,
        bank.bases
    );
    ensure!(
        alpha.groups == 1 || alpha.groups == bank.heads,
        "accumulation head axis {} must be 1 or {}",
        alpha.groups,
        bank.heads
    );
    Ok(())
}

/// Output size of a `G×G` window sweep with padding `G/2`.
pub fn aggregate_output_len(len: usize, size: usize, stride: usize) -> usize {
    (len + 2 * (size / 2) - size) / stride + 1
}

fn check_aggregate<T: Scalar>(input: Shape, maps: &AttentionMaps<T>, c_h: usize, stride: usize) -> Result<Shape> {
    ensure!(stride >= 1, "aggregation stride must be positive");
    ensure!(c_h >= 1 && input.c % c_h == 0, "head size {} does not divide {} channels", c_h, input.c);
    ensure!(
        input.c / c_h == maps.heads,
        "{} channels with {} per head make {} heads, maps have {}",
        input.c,
        c_h,
        input.c / c_h,
        maps.heads
    );
    let out = Shape::new(
        input.n,
        input.c,
        aggregate_output_len(input.h, maps.size, stride),
        aggregate_output_len(input.w, maps.size, stride),
    );
    let ms = maps.maps.shape();
    ensure!(
        ms.n == input.n && ms.h == out.h && ms.w == out.w,
        "maps {} do not cover the strided output {}",
        ms,
        out
    );
    Ok(out)
}

/// Applies each location's map to the `G×G` zero-padded neighbourhood of every channel of its head.
pub fn aggregate<T: Scalar>(input: &Tensor<T>, maps: &AttentionMaps<T>, c_h: usize, stride: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    let os = check_aggregate(s, maps, c_h, stride)?;
    let mut out = Tensor::zeros(os);
    if os.numel() == 0 {
        return Ok(out);
    }
    let g = maps.size;
    let pad = (g / 2) as isize;
    out.data_mut().par_chunks_mut(os.sample()).enumerate().for_each(|(n, o)| {
        let x = input.sample(n);
        for c in 0..s.c {
            let h = c / c_h;
            let xp = &x[c * s.plane()..(c + 1) * s.plane()];
            let op = &mut o[c * os.plane()..(c + 1) * os.plane()];
            for kh in 0..g {
                let yoff = kh as isize - pad;
                let (y0, y1) = valid_range(os.h, s.h, stride, yoff);
                for kw in 0..g {
                    let xoff = kw as isize - pad;
                    let (x0, x1) = valid_range(os.w, s.w, stride, xoff);
                    let fp = maps.maps.plane(n, h * g * g + kh * g + kw);
                    for oy in y0..y1 {
                        let iy = ((oy * stride) as isize + yoff) as usize;
                        for ox in x0..x1 {
                            let ix = ((ox * stride) as isize + xoff) as usize;
                            op[oy * os.w + ox] += fp[oy * os.w + ox] * xp[iy * s.w + ix];
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Adjoints of [`aggregate`]: `(grad_input, grad_maps)`. Map gradients sum over the channels of each head.
pub fn aggregate_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    maps: &AttentionMaps<T>,
    c_h: usize,
    stride: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = input.shape();
    let os = check_aggregate(s, maps, c_h, stride)?;
    ensure!(grad_out.shape() == os, "aggregation gradient {} does not match output {}", grad_out.shape(), os);
    let g = maps.size;
    let pad = (g / 2) as isize;
    let ms = maps.maps.shape();
    let mut grad_in = Tensor::zeros(s);
    let mut grad_maps = Tensor::zeros(ms);
    if os.numel() == 0 {
        return Ok((grad_in, grad_maps));
    }
    grad_in
        .data_mut()
        .par_chunks_mut(s.sample())
        .zip(grad_maps.data_mut().par_chunks_mut(ms.sample()))
        .enumerate()
        .for_each(|(n, (gi, gm))| {
            let x = input.sample(n);
            let go = grad_out.sample(n);
            for c in 0..s.c {
                let h = c / c_h;
                let xp = &x[c * s.plane()..(c + 1) * s.plane()];
                let gip = &mut gi[c * s.plane()..(c + 1) * s.plane()];
                let gop = &go[c * os.plane()..(c + 1) * os.plane()];
                for kh in 0..g {
                    let yoff = kh as isize - pad;
                    let (y0, y1) = valid_range(os.h, s.h, stride, yoff);
                    for kw in 0..g {
                        let xoff = kw as isize - pad;
                        let (x0, x1) = valid_range(os.w, s.w, stride, xoff);
                        let mc = h * g * g + kh * g + kw;
                        let fp = maps.maps.plane(n, mc);
                        let gmp = &mut gm[mc * ms.plane()..(mc + 1) * ms.plane()];
                        for oy in y0..y1 {
                            let iy = ((oy * stride) as isize + yoff) as usize;
                            for ox in x0..x1 {
                                let ix = ((ox * stride) as isize + xoff) as usize;
                                let o = oy * os.w + ox;
                                let gv = gop[o];
                                gmp[o] += gv * xp[iy * s.w + ix];
                                gip[iy * s.w + ix] += gv * fp[o];
                            }
                        }
                    }
                }
            }
        });
    Ok((grad_in, grad_maps))
}

fn check_mh_dw<T: Scalar>(input: Shape, weight: &Tensor<T>, bias: Option<&Tensor<T>>, c_h: usize, stride: usize) -> Result<Shape> {
    let ws = weight.shape();
    ensure!(ws.c == 1 && ws.h == ws.w, "multi-head depthwise weight must be (heads, 1, G, G), got {}", ws);
    ensure!(ws.h % 2 == 1, "kernel size {} must be odd", ws.h);
    ensure!(stride >= 1, "stride must be positive");
    ensure!(c_h >= 1 && input.c % c_h == 0, "head size {} does not divide {} channels", c_h, input.c);
    ensure!(input.c / c_h == ws.n, "{} heads expected, weight has {}", input.c / c_h, ws.n);
    if let Some(b) = bias {
        ensure!(b.numel() == input.c, "bias length {} != {} channels", b.numel(), input.c);
    }
    Ok(Shape::new(
        input.n,
        input.c,
        aggregate_output_len(input.h, ws.h, stride),
        aggregate_output_len(input.w, ws.h, stride),
    ))
}

/// Depthwise convolution where each head's `G×G` kernel is shared by its `c_h` channels.
/// `weight` is shaped `(heads, 1, G, G)`; `bias` is per channel.
pub fn mh_dw_conv<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    c_h: usize,
    stride: usize,
) -> Result<Tensor<T>> {
    let s = input.shape();
    let os = check_mh_dw(s, weight, bias, c_h, stride)?;
    let g = weight.shape().h;
    let pad = (g / 2) as isize;
    let mut out = Tensor::zeros(os);
    if os.numel() == 0 {
        return Ok(out);
    }
    out.data_mut().par_chunks_mut(os.sample()).enumerate().for_each(|(n, o)| {
        let x = input.sample(n);
        for c in 0..s.c {
            let wk = &weight.data()[(c / c_h) * g * g..(c / c_h + 1) * g * g];
            let xp = &x[c * s.plane()..(c + 1) * s.plane()];
            let op = &mut o[c * os.plane()..(c + 1) * os.plane()];
            if let Some(b) = bias {
                op.fill(b.data()[c]);
            }
            for kh in 0..g {
                let yoff = kh as isize - pad;
                let (y0, y1) = valid_range(os.h, s.h, stride, yoff);
                for kw in 0..g {
                    let xoff = kw as isize - pad;
                    let (x0, x1) = valid_range(os.w, s.w, stride, xoff);
                    let wv = wk[kh * g + kw];
                    for oy in y0..y1 {
                        let iy = ((oy * stride) as isize + yoff) as usize;
                        for ox in x0..x1 {
                            let ix = ((ox * stride) as isize + xoff) as usize;
                            op[oy * os.w + ox] += wv * xp[iy * s.w + ix];
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

pub struct MhDwGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

pub fn mh_dw_conv_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    with_bias: bool,
    c_h: usize,
    stride: usize,
) -> Result<MhDwGrads<T>> {
    let s = input.shape();
    let os = check_mh_dw(s, weight, None, c_h, stride)?;
    ensure!(grad_out.shape() == os, "depthwise gradient {} does not match output {}", grad_out.shape(), os);
    let g = weight.shape().h;
    let pad = (g / 2) as isize;
    let wlen = weight.numel();
    let partials: Vec<(Vec<T>, Vec<T>)> = (0..s.n)
        .into_par_iter()
        .map(|n| {
            let mut gi = vec![T::zero(); s.sample()];
            let mut gw = vec![T::zero(); wlen];
            let x = input.sample(n);
            let go = grad_out.sample(n);
            for c in 0..s.c {
                let head = c / c_h;
                let xp = &x[c * s.plane()..(c + 1) * s.plane()];
                let gop = &go[c * os.plane()..(c + 1) * os.plane()];
                let gip = &mut gi[c * s.plane()..(c + 1) * s.plane()];
                for kh in 0..g {
                    let yoff = kh as isize - pad;
                    let (y0, y1) = valid_range(os.h, s.h, stride, yoff);
                    for kw in 0..g {
                        let xoff = kw as isize - pad;
                        let (x0, x1) = valid_range(os.w, s.w, stride, xoff);
                        let widx = head * g * g + kh * g + kw;
                        let wv = weight.data()[widx];
                        let mut acc = T::zero();
                        for oy in y0..y1 {
                            let iy = ((oy * stride) as isize + yoff) as usize;
                            for ox in x0..x1 {
                                let ix = ((ox * stride) as isize + xoff) as usize;
                                let gv = gop[oy * os.w + ox];
                                acc += gv * xp[iy * s.w + ix];
                                gip[iy * s.w + ix] += gv * wv;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
            (gi, gw)
        })
        .collect();
    let mut gi_all = Vec::with_capacity(input.numel());
    let mut gw_all = vec![T::zero(); wlen];
    for (gi, gw) in partials {
        gi_all.extend_from_slice(&gi);
        for (a, b) in gw_all.iter_mut().zip(gw) {
            *a += b;
        }
    }
    let bias = with_bias.then(|| {
        Tensor::from_fn(Shape::new(s.c, 1, 1, 1), |c, _, _, _| {
            (0..s.n).map(|n| grad_out.plane(n, c).iter().copied().sum::<T>()).sum()
        })
    });
    Ok(MhDwGrads {
        input: Tensor::from_vec(s, gi_all)?,
        weight: Tensor::from_vec(weight.shape(), gw_all)?,
        bias,
    })
}
