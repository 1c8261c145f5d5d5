use crate::analysis::profile::ProfileReport;
use crate::attention::{aggregate, aggregate_backward, aggregate_output_len, mh_dw_conv, mh_dw_conv_backward, AttentionMaps};
use crate::canet::{CaNetworkA, CaSpec, DaNetworkD, HasBank, Sharing};
use crate::error::{config_err, Result};
use crate::lowpass::{binomial_kernel, BandMask};
use crate::nn::{join, Conv2d, Entry, EntryMut, Initializer, MhDwConv, Mode, Module};
use crate::ops::{avg_pool, avg_pool_backward, Pool2d};
use crate::tensor::{Scalar, Shape, Tensor};

use super::config::{DownsamplingFilterKind, SpatialFilterKind};

/// Attention filter: a CA network produces per-location maps which are then aggregated.
#[derive(Debug, Clone)]
pub struct CadaFilter<T> {
    pub net: CaNetworkA<T>,
    pub c_h: usize,
    pub stride: usize,
    cache: Option<(Tensor<T>, AttentionMaps<T>)>,
}

impl<T: Scalar> CadaFilter<T> {
    pub fn new(spec: CaSpec, c_h: usize, init: &mut Initializer) -> Result<Self> {
        Ok(CadaFilter { net: CaNetworkA::new(spec, init)?, c_h, stride: spec.stride, cache: None })
    }
}

/// Attention filter whose maps come from a trainable seed, so they are location-constant.
#[derive(Debug, Clone)]
pub struct DaFilter<T> {
    pub net: DaNetworkD<T>,
    pub c_h: usize,
    pub stride: usize,
    cache: Option<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> DaFilter<T> {
    pub fn new(spec: CaSpec, c_h: usize, init: &mut Initializer) -> Result<Self> {
        Ok(DaFilter { net: DaNetworkD::new(spec, init)?, c_h, stride: spec.stride, cache: None })
    }
}

#[derive(Debug, Clone)]
pub enum SpatialFilter<T> {
    Conv(Conv2d<T>),
    MhDw(MhDwConv<T>),
    Cada(Box<CadaFilter<T>>),
    Da(Box<DaFilter<T>>),
}

fn missing(what: &str) -> crate::error::Error {
    config_err!("{what}: backward called before forward")
}

impl<T: Scalar> SpatialFilter<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        kind: SpatialFilterKind,
        width: usize,
        stride: usize,
        b: usize,
        c_h: usize,
        t: usize,
        g: usize,
        pos: bool,
        init: &mut Initializer,
    ) -> Result<Self> {
        let spec = |sharing| CaSpec {
            width,
            heads: width / c_h,
            bases: b,
            ca_kernel: t,
            size: g,
            stride,
            sharing,
            pos,
        };
        Ok(match kind {
            SpatialFilterKind::Conv3x3 => SpatialFilter::Conv(Conv2d::new(width, width, 3, stride, 1, false, init)?),
            SpatialFilterKind::MhDwConv => SpatialFilter::MhDw(MhDwConv::new(width, c_h, g, stride, init)?),
            SpatialFilterKind::Cada => SpatialFilter::Cada(Box::new(CadaFilter::new(spec(Sharing::PerHead), c_h, init)?)),
            SpatialFilterKind::CadaSp => SpatialFilter::Cada(Box::new(CadaFilter::new(spec(Sharing::Shared), c_h, init)?)),
            SpatialFilterKind::Da => SpatialFilter::Da(Box::new(DaFilter::new(spec(Sharing::PerHead), c_h, init)?)),
            SpatialFilterKind::DaSp => SpatialFilter::Da(Box::new(DaFilter::new(spec(Sharing::Shared), c_h, init)?)),
        })
    }

    pub fn bank(&self) -> Option<&dyn HasBank<T>> {
        match self {
            SpatialFilter::Cada(f) => Some(&f.net),
            SpatialFilter::Da(f) => Some(&f.net),
            _ => None,
        }
    }

    pub fn bank_mut(&mut self) -> Option<&mut dyn HasBank<T>> {
        match self {
            SpatialFilter::Cada(f) => Some(&mut f.net),
            SpatialFilter::Da(f) => Some(&mut f.net),
            _ => None,
        }
    }
}

impl<T: Scalar> Module<T> for SpatialFilter<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match self {
            SpatialFilter::Conv(c) => c.forward(x, mode),
            SpatialFilter::MhDw(d) => d.forward(x, mode),
            SpatialFilter::Cada(f) => {
                let maps = f.net.ca_forward(x, mode)?;
                let y = aggregate(x, &maps, f.c_h, f.stride)?;
                f.cache = Some((x.clone(), maps));
                Ok(y)
            }
            SpatialFilter::Da(f) => {
                let kernel = f.net.kernel()?;
                let y = mh_dw_conv(x, &kernel, None, f.c_h, f.stride)?;
                f.cache = Some((x.clone(), kernel));
                Ok(y)
            }
        }
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            SpatialFilter::Conv(c) => c.backward(grad),
            SpatialFilter::MhDw(d) => d.backward(grad),
            SpatialFilter::Cada(f) => {
                let (x, maps) = f.cache.as_ref().ok_or_else(|| missing("CADA filter"))?;
                let (mut gx, gmaps) = aggregate_backward(grad, x, maps, f.c_h, f.stride)?;
                gx.add_assign(&f.net.ca_backward(&gmaps)?)?;
                Ok(gx)
            }
            SpatialFilter::Da(f) => {
                let (x, kernel) = f.cache.as_ref().ok_or_else(|| missing("DA filter"))?;
                let g = mh_dw_conv_backward(grad, x, kernel, false, f.c_h, f.stride)?;
                f.net.kernel_backward(&g.weight)?;
                Ok(g.input)
            }
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        match self {
            SpatialFilter::Conv(c) => c.visit(prefix, f),
            SpatialFilter::MhDw(d) => d.visit(prefix, f),
            SpatialFilter::Cada(c) => c.net.visit(prefix, f),
            SpatialFilter::Da(d) => d.net.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        match self {
            SpatialFilter::Conv(c) => c.visit_mut(prefix, f),
            SpatialFilter::MhDw(d) => d.visit_mut(prefix, f),
            SpatialFilter::Cada(c) => c.net.visit_mut(prefix, f),
            SpatialFilter::Da(d) => d.net.visit_mut(prefix, f),
        }
    }

    fn profile(&self, name: &str, input: Shape, report: &mut ProfileReport) -> Result<Shape> {
        let (size, stride) = match self {
            SpatialFilter::Conv(c) => return c.profile(name, input, report),
            SpatialFilter::MhDw(d) => return d.profile(name, input, report),
            SpatialFilter::Cada(c) => {
                c.net.profile(name, input, report)?;
                (c.net.spec.size, c.stride)
            }
            SpatialFilter::Da(d) => {
                d.net.profile(name, report)?;
                (d.net.spec.size, d.stride)
            }
        };
        let out = Shape::new(
            input.n,
            input.c,
            aggregate_output_len(input.h, size, stride),
            aggregate_output_len(input.w, size, stride),
        );
        report.push(&join(name, "aggregate"), 0, out.c * out.h * out.w * size * size);
        Ok(out)
    }
}

/// Size-preserving low-pass filter applied before subsampling.
#[derive(Debug, Clone)]
pub enum DownsampleFilter<T> {
    Fft(BandMask),
    /// Fixed depthwise kernel shared by all channels (binomial blur).
    Fixed(MhDwConv<T>),
    AvgPool(usize),
    /// Trainable depthwise or attention filter.
    Learned(SpatialFilter<T>),
}

impl<T: Scalar> DownsampleFilter<T> {
    pub fn build(kind: DownsamplingFilterKind, channels: usize, init: &mut Initializer) -> Result<Option<Self>> {
        let kernel = |k: usize| -> Vec<T> { binomial_kernel(k).into_iter().map(T::of).collect() };
        Ok(Some(match kind {
            DownsamplingFilterKind::None => return Ok(None),
            DownsamplingFilterKind::Ideal => DownsampleFilter::Fft(BandMask::Ideal),
            DownsamplingFilterKind::Box => DownsampleFilter::Fft(BandMask::Box),
            DownsamplingFilterKind::Binomial3 => {
                DownsampleFilter::Fixed(MhDwConv::with_kernel(channels, channels, 3, 1, &kernel(3))?)
            }
            DownsamplingFilterKind::AvgPool(k) => DownsampleFilter::AvgPool(k),
            DownsamplingFilterKind::DwConv { k, c_h } => {
                DownsampleFilter::Learned(SpatialFilter::MhDw(MhDwConv::with_kernel(channels, c_h, k, 1, &kernel(k))?))
            }
            DownsamplingFilterKind::CadaSp { k, t, b, c_h } => {
                let c_h = c_h.unwrap_or(channels);
                DownsampleFilter::Learned(SpatialFilter::build(SpatialFilterKind::CadaSp, channels, 1, b, c_h, t, k, true, init)?)
            }
        }))
    }

    /// Spatial kernels per head (side, row-major taps), for spectra.
    pub fn kernels(&self) -> Vec<(usize, Vec<f64>)> {
        let dw = |d: &MhDwConv<T>| -> Vec<(usize, Vec<f64>)> {
            (0..d.heads()).map(|h| (d.size(), d.kernel(h).iter().map(|v| v.as_f64()).collect())).collect()
        };
        match self {
            DownsampleFilter::Fixed(d) => dw(d).into_iter().take(1).collect(),
            DownsampleFilter::AvgPool(k) => vec![(*k, vec![1.0 / (k * k) as f64; k * k])],
            DownsampleFilter::Learned(SpatialFilter::MhDw(d)) => dw(d),
            _ => Vec::new(),
        }
    }
}

impl<T: Scalar> Module<T> for DownsampleFilter<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match self {
            DownsampleFilter::Fft(mask) => Ok(crate::lowpass::fft_lowpass(x, *mask)),
            DownsampleFilter::Fixed(d) => d.forward_fixed(x),
            DownsampleFilter::AvgPool(k) => avg_pool(x, Pool2d::same(*k)),
            DownsampleFilter::Learned(f) => f.forward(x, mode),
        }
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            // A real symmetric band mask is self-adjoint.
            DownsampleFilter::Fft(mask) => Ok(crate::lowpass::fft_lowpass(grad, *mask)),
            DownsampleFilter::Fixed(d) => d.backward_fixed(grad, false),
            DownsampleFilter::AvgPool(k) => avg_pool_backward(grad, grad.shape(), Pool2d::same(*k)),
            DownsampleFilter::Learned(f) => f.backward(grad),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        if let DownsampleFilter::Learned(l) = self {
            l.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        if let DownsampleFilter::Learned(l) = self {
            l.visit_mut(prefix, f);
        }
    }

    fn profile(&self, name: &str, input: Shape, report: &mut ProfileReport) -> Result<Shape> {
        match self {
            DownsampleFilter::Fixed(d) => d.dw_profile(name, input, false, report),
            DownsampleFilter::Learned(l) => l.profile(name, input, report),
            _ => {
                report.push(name, 0, 0);
                Ok(input)
            }
        }
    }
}
