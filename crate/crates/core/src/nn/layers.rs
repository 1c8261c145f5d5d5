use std::f64::consts::SQRT_2;

use super::{join, Entry, EntryMut, Initializer, Mode, Module, ParamGroup, ParamMut};
use crate::analysis::profile::ProfileReport;
use crate::attention::{mh_dw_conv, mh_dw_conv_backward};
use crate::error::{config_err, ensure, Result};
use crate::ops::norm::BnCache;
use crate::ops::{self, ConvParams, RunningStats};
use crate::tensor::{Scalar, Shape, Tensor};

fn missing_forward(layer: &str) -> crate::error::Error {
    config_err!("{layer}: backward called before forward")
}

/// Convolution with "same"-style padding `k / 2`.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub params: ConvParams<T>,
    grad_weight: Tensor<T>,
    grad_bias: Option<Tensor<T>>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
        bias: bool,
        init: &mut Initializer,
    ) -> Result<Self> {
        ensure!(groups >= 1 && cin % groups == 0, "groups {} does not divide {} input channels", groups, cin);
        let wshape = Shape::new(cout, cin / groups, k, k);
        let weight = init.kaiming(wshape, (cin / groups) * k * k, SQRT_2);
        let bias = bias.then(|| Tensor::zeros(Shape::new(cout, 1, 1, 1)));
        Self::from_params(ConvParams::new(weight, bias, stride, k / 2, groups)?)
    }

    pub fn from_params(params: ConvParams<T>) -> Result<Self> {
        params.validate()?;
        Ok(Conv2d {
            grad_weight: Tensor::zeros(params.weight.shape()),
            grad_bias: params.bias.as_ref().map(|b| Tensor::zeros(b.shape())),
            params,
            cache: None,
        })
    }

    pub fn grad_weight(&self) -> &Tensor<T> {
        &self.grad_weight
    }

    pub(crate) fn conv_profile(params: &ConvParams<T>, name: &str, input: Shape, report: &mut ProfileReport) -> Result<Shape> {
        let out = params.output_shape(input.with_batch(1))?;
        let ws = params.weight.shape();
        let flops = out.numel() * ws.c * ws.h * ws.w;
        let n_params = ws.numel() + params.bias.as_ref().map_or(0, |b| b.numel());
        report.push(name, n_params, flops);
        Ok(out.with_batch(input.n))
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let y = ops::conv2d(x, &self.params)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.cache.as_ref().ok_or_else(|| missing_forward("conv"))?;
        let g = ops::conv2d_backward(grad, x, &self.params)?;
        self.grad_weight.add_assign(&g.weight)?;
        if let (Some(acc), Some(gb)) = (&mut self.grad_bias, &g.bias) {
            acc.add_assign(gb)?;
        }
        Ok(g.input)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        f(&join(prefix, "weight"), Entry::Param { value: &self.params.weight, group: ParamGroup::Weight });
        if let Some(b) = &self.params.bias {
            f(&join(prefix, "bias"), Entry::Param { value: b, group: ParamGroup::NormOrBias });
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        f(
            &join(prefix, "weight"),
            EntryMut::Param(ParamMut { value: &mut self.params.weight, grad: &mut self.grad_weight, group: ParamGroup::Weight }),
        );
        if let (Some(b), Some(gb)) = (&mut self.params.bias, &mut self.grad_bias) {
            f(&join(prefix, "bias"), EntryMut::Param(ParamMut { value: b, grad: gb, group: ParamGroup::NormOrBias }));
        }
    }

    fn profile(&self, name: &str, input: Shape, report: &mut ProfileReport) -> Result<Shape> {
        Self::conv_profile(&self.params, name, input, report)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub stats: RunningStats<T>,
    grad_scale: Tensor<T>,
    grad_shift: Tensor<T>,
    cache: Option<BnCache<T>>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        let s = Shape::new(channels, 1, 1, 1);
        BatchNorm2d {
            scale: Tensor::full(s, T::one()),
            shift: Tensor::zeros(s),
            stats: RunningStats::new(channels),
            grad_scale: Tensor::zeros(s),
            grad_shift: Tensor::zeros(s),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.numel()
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (y, cache) = ops::batch_norm(x, self.scale.data(), self.shift.data(), &mut self.stats, mode)?;
        self.cache = Some(cache);
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.as_ref().ok_or_else(|| missing_forward("batch norm"))?;
        let g = ops::batch_norm_backward(grad, cache, self.scale.data())?;
        for (a, b) in self.grad_scale.data_mut().iter_mut().zip(g.scale) {
            *a += b;
        }
        for (a, b) in self.grad_shift.data_mut().iter_mut().zip(g.shift) {
            *a += b;
        }
        Ok(g.input)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        f(&join(prefix, "scale"), Entry::Param { value: &self.scale, group: ParamGroup::NormOrBias });
        f(&join(prefix, "shift"), Entry::Param { value: &self.shift, group: ParamGroup::NormOrBias });
        f(&join(prefix, "running_mean"), Entry::Buffer(&self.stats.mean));
        f(&join(prefix, "running_var"), Entry::Buffer(&self.stats.var));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        f(
            &join(prefix, "scale"),
            EntryMut::Param(ParamMut { value: &mut self.scale, grad: &mut self.grad_scale, group: ParamGroup::NormOrBias }),
        );
        f(
            &join(prefix, "shift"),
            EntryMut::Param(ParamMut { value: &mut self.shift, grad: &mut self.grad_shift, group: ParamGroup::NormOrBias }),
        );
        f(&join(prefix, "running_mean"), EntryMut::Buffer(&mut self.stats.mean));
        f(&join(prefix, "running_var"), EntryMut::Buffer(&mut self.stats.var));
    }

    fn profile(&self, name: &str, input: Shape, report: &mut ProfileReport) -> Result<Shape> {
        ensure!(input.c == self.channels(), "{name}: batch norm over {} channels fed {}", self.channels(), input.c);
        report.push(name, 2 * self.channels(), 0);
        Ok(input)
    }
}

/// Fully connected classifier over flattened features.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    grad_weight: Tensor<T>,
    grad_bias: Tensor<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(fin: usize, fout: usize, init: &mut Initializer) -> Self {
        let ws = Shape::new(fout, fin, 1, 1);
        let bs = Shape::new(fout, 1, 1, 1);
        Linear {
            weight: init.kaiming(ws, fin, 1.0),
            bias: Tensor::zeros(bs),
            grad_weight: Tensor::zeros(ws),
            grad_bias: Tensor::zeros(bs),
            cache: None,
        }
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let y = ops::linear(x, &self.weight, Some(&self.bias))?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.cache.as_ref().ok_or_else(|| missing_forward("linear"))?;
        let g = ops::linear_backward(grad, x, &self.weight)?;
        self.grad_weight.add_assign(&g.weight)?;
        self.grad_bias.add_assign(&g.bias)?;
        Ok(g.input)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        f(&join(prefix, "weight"), Entry::Param { value: &self.weight, group: ParamGroup::Weight });
        f(&join(prefix, "bias"), Entry::Param { value: &self.bias, group: ParamGroup::NormOrBias });
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        f(
            &join(prefix, "weight"),
            EntryMut::Param(ParamMut { value: &mut self.weight, grad: &mut self.grad_weight, group: ParamGroup::Weight }),
        );
        f(
            &join(prefix, "bias"),
            EntryMut::Param(ParamMut { value: &mut self.bias, grad: &mut self.grad_bias, group: ParamGroup::NormOrBias }),
        );
    }

    fn profile(&self, name: &str, input: Shape, report: &mut ProfileReport) -> Result<Shape> {
        let ws = self.weight.shape();
        ensure!(input.sample() == ws.c, "{name}: classifier expects {} features, got {}", ws.c, input.sample());
        report.push(name, ws.numel() + self.bias.numel(), ws.numel());
        Ok(Shape::new(input.n, ws.n, 1, 1))
    }
}

/// Multi-head depthwise convolution without bias; `c_h = 1` is plain depthwise convolution.
#[derive(Debug, Clone)]
pub struct MhDwConv<T> {
    pub weight: Tensor<T>,
    pub c_h: usize,
    pub stride: usize,
    grad_weight: Tensor<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> MhDwConv<T> {
    pub fn new(channels: usize, c_h: usize, size: usize, stride: usize, init: &mut Initializer) -> Result<Self> {
        ensure!(c_h >= 1 && channels % c_h == 0, "head size {} does not divide {} channels", c_h, channels);
        ensure!(size % 2 == 1, "depthwise kernel size {} must be odd", size);
        let ws = Shape::new(channels / c_h, 1, size, size);
        Ok(MhDwConv {
            weight: init.kaiming(ws, size * size, SQRT_2),
            c_h,
            stride,
            grad_weight: Tensor::zeros(ws),
            cache: None,
        })
    }

    /// A fixed or trainable filter whose every head starts from `kernel` (row-major `G×G`).
    pub fn with_kernel(channels: usize, c_h: usize, size: usize, stride: usize, kernel: &[T]) -> Result<Self> {
        let mut layer = Self::new(channels, c_h, size, stride, &mut Initializer::zeros())?;
        ensure!(kernel.len() == size * size, "kernel has {} taps, expected {}", kernel.len(), size * size);
        for head in layer.weight.data_mut().chunks_mut(size * size) {
            head.copy_from_slice(kernel);
        }
        Ok(layer)
    }

    pub fn heads(&self) -> usize {
        self.weight.shape().n
    }

    pub fn size(&self) -> usize {
        self.weight.shape().h
    }

    /// Kernel of one head, row-major.
    pub fn kernel(&self, head: usize) -> &[T] {
        let g2 = self.size() * self.size();
        &self.weight.data()[head * g2..(head + 1) * g2]
    }

    pub(crate) fn forward_fixed(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = mh_dw_conv(x, &self.weight, None, self.c_h, self.stride)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub(crate) fn backward_fixed(&mut self, grad: &Tensor<T>, accumulate: bool) -> Result<Tensor<T>> {
        let x = self.cache.as_ref().ok_or_else(|| missing_forward("depthwise conv"))?;
        let g = mh_dw_conv_backward(grad, x, &self.weight, false, self.c_h, self.stride)?;
        if accumulate {
            self.grad_weight.add_assign(&g.weight)?;
        }
        Ok(g.input)
    }

    pub(crate) fn dw_profile(&self, name: &str, input: Shape, counted_params: bool, report: &mut ProfileReport) -> Result<Shape> {
        ensure!(input.c == self.heads() * self.c_h, "{name}: depthwise filter for {} channels fed {}", self.heads() * self.c_h, input.c);
        let g = self.size();
        let out = Shape::new(
            input.n,
            input.c,
            crate::attention::aggregate_output_len(input.h, g, self.stride),
            crate::attention::aggregate_output_len(input.w, g, self.stride),
        );
        let params = if counted_params { self.weight.numel() } else { 0 };
        report.push(name, params, out.c * out.h * out.w * g * g);
        Ok(out)
    }
}

impl<T: Scalar> Module<T> for MhDwConv<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        self.forward_fixed(x)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        self.backward_fixed(grad, true)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        f(&join(prefix, "weight"), Entry::Param { value: &self.weight, group: ParamGroup::Weight });
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        f(
            &join(prefix, "weight"),
            EntryMut::Param(ParamMut { value: &mut self.weight, grad: &mut self.grad_weight, group: ParamGroup::Weight }),
        );
    }

    fn profile(&self, name: &str, input: Shape, report: &mut ProfileReport) -> Result<Shape> {
        self.dw_profile(name, input, true, report)
    }
}
