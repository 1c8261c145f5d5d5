//! Networks producing attention maps: context-aware network A (maps from input
//! features) and non-context-aware network D (maps from a trainable seed).
//!
//! Both end in a 1×1 accumulation convolution whose weight holds the base
//! kernels and whose bias holds the position encoding. The convolution output
//! is exactly the decomposed map, so forward runs the convolution directly
//! while backward goes through [`construct_maps_backward`].

use crate::analysis::profile::ProfileReport;
use crate::attention::{construct_maps, construct_maps_backward, AccumulationParams, AttentionMaps, BaseKernelBank};
use crate::error::{config_err, ensure, Result};
use crate::nn::{join, BatchNorm2d, Conv2d, Entry, EntryMut, Initializer, Mode, Module, ParamGroup, ParamMut};
use crate::ops::{self, ConvParams};
use crate::tensor::{Scalar, Shape, Tensor};

/// Whether accumulation parameters are produced per head or shared by all heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sharing {
    PerHead,
    Shared,
}

impl Sharing {
    /// Number of accumulation groups `A`.
    pub fn groups(self, heads: usize) -> usize {
        match self {
            Sharing::PerHead => heads,
            Sharing::Shared => 1,
        }
    }
}

/// Read-only view of the base kernels stored in an accumulation convolution.
#[derive(Clone, Copy)]
pub struct BankView<'a, T> {
    weight: &'a Tensor<T>,
    bias: Option<&'a Tensor<T>>,
    heads: usize,
    bases: usize,
    size: usize,
}

impl<'a, T: Scalar> BankView<'a, T> {
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
        self.bias.is_some()
    }

    /// Tap `k` (row-major in `G×G`) of base kernel `i` of head `h`.
    pub fn base(&self, h: usize, i: usize, k: usize) -> T {
        let g2 = self.size * self.size;
        self.weight.data()[(h * g2 + k) * self.bases + i]
    }

    pub fn pos(&self, h: usize, k: usize) -> T {
        let g2 = self.size * self.size;
        self.bias.map_or(T::zero(), |b| b.data()[h * g2 + k])
    }

    pub fn kernel(&self, h: usize, i: usize) -> Vec<T> {
        (0..self.size * self.size).map(|k| self.base(h, i, k)).collect()
    }

    pub fn pos_kernel(&self, h: usize) -> Vec<T> {
        (0..self.size * self.size).map(|k| self.pos(h, k)).collect()
    }

    pub fn l1(&self, h: usize, i: usize) -> f64 {
        (0..self.size * self.size).map(|k| self.base(h, i, k).as_f64().abs()).sum()
    }

    /// Copies the view into a standalone bank.
    pub fn to_bank(&self) -> BaseKernelBank<T> {
        let base = (0..self.heads)
            .flat_map(|h| (0..self.bases).flat_map(move |i| (0..self.size * self.size).map(move |k| (h, i, k))))
            .map(|(h, i, k)| self.base(h, i, k))
            .collect();
        let pos = self.bias.map(|_| (0..self.heads).flat_map(|h| self.pos_kernel(h)).collect());
        BaseKernelBank::from_parts(self.heads, self.bases, self.size, base, pos).expect("view dimensions are consistent")
    }
}

/// Mutable view of the base kernels stored in an accumulation convolution.
pub struct BankViewMut<'a, T> {
    weight: &'a mut Tensor<T>,
    bias: Option<&'a mut Tensor<T>>,
    heads: usize,
    bases: usize,
    size: usize,
}

impl<'a, T: Scalar> BankViewMut<'a, T> {
    pub fn view(&self) -> BankView<'_, T> {
        BankView {
            weight: self.weight,
            bias: self.bias.as_deref(),
            heads: self.heads,
            bases: self.bases,
            size: self.size,
        }
    }

    pub fn set_base(&mut self, h: usize, i: usize, k: usize, v: T) {
        let g2 = self.size * self.size;
        self.weight.data_mut()[(h * g2 + k) * self.bases + i] = v;
    }

    pub fn set_pos(&mut self, h: usize, k: usize, v: T) {
        let g2 = self.size * self.size;
        if let Some(b) = self.bias.as_deref_mut() {
            b.data_mut()[h * g2 + k] = v;
        }
    }

    pub fn zero_kernel(&mut self, h: usize, i: usize) {
        for k in 0..self.size * self.size {
            self.set_base(h, i, k, T::zero());
        }
    }

    /// Overwrites every kernel with the contents of `bank`.
    pub fn load(&mut self, bank: &BaseKernelBank<T>) -> Result<()> {
        ensure!(
            bank.heads() == self.heads && bank.bases() == self.bases && bank.size() == self.size,
            "bank {}x{}x{} does not fit a {}x{}x{} slot",
            bank.heads(),
            bank.bases(),
            bank.size(),
            self.heads,
            self.bases,
            self.size
        );
        ensure!(bank.pos_enabled() == self.bias.is_some(), "position encoding flag does not match");
        for h in 0..self.heads {
            for i in 0..self.bases {
                for (k, &v) in bank.kernel(h, i).iter().enumerate() {
                    self.set_base(h, i, k, v);
                }
            }
            if bank.pos_enabled() {
                for (k, &v) in bank.pos_kernel(h).iter().enumerate() {
                    self.set_pos(h, k, v);
                }
            }
        }
        Ok(())
    }
}

/// Anything holding a live base-kernel bank.
pub trait HasBank<T: Scalar> {
    fn bank(&self) -> BankView<'_, T>;
    fn bank_mut(&mut self) -> BankViewMut<'_, T>;
}

/// Standalone copy of a network's bank.
pub fn extract_bank<T: Scalar, N: HasBank<T> + ?Sized>(net: &N) -> BaseKernelBank<T> {
    net.bank().to_bank()
}

/// The 1×1 accumulation convolution: weight `(heads·G², b, 1, 1)` with groups `A`.
#[derive(Debug, Clone)]
struct AccumulationConv<T> {
    params: ConvParams<T>,
    grad_weight: Tensor<T>,
    grad_bias: Option<Tensor<T>>,
    heads: usize,
    bases: usize,
    size: usize,
    sharing: Sharing,
}

impl<T: Scalar> AccumulationConv<T> {
    fn new(heads: usize, bases: usize, size: usize, sharing: Sharing, pos: bool, init: &mut Initializer) -> Result<Self> {
        ensure!(bases >= 1, "at least one base kernel is required");
        ensure!(size % 2 == 1, "aggregation kernel size {} must be odd", size);
        let g2 = size * size;
        let ws = Shape::new(heads * g2, bases, 1, 1);
        let weight = init.kaiming(ws, bases, 1.0);
        let bias = pos.then(|| Tensor::zeros(Shape::new(heads * g2, 1, 1, 1)));
        let params = ConvParams::new(weight, bias, 1, 0, sharing.groups(heads))?;
        Ok(AccumulationConv {
            grad_weight: Tensor::zeros(ws),
            grad_bias: pos.then(|| Tensor::zeros(Shape::new(heads * g2, 1, 1, 1))),
            params,
            heads,
            bases,
            size,
            sharing,
        })
    }

    fn view(&self) -> BankView<'_, T> {
        BankView {
            weight: &self.params.weight,
            bias: self.params.bias.as_ref(),
            heads: self.heads,
            bases: self.bases,
            size: self.size,
        }
    }

    fn view_mut(&mut self) -> BankViewMut<'_, T> {
        BankViewMut {
            weight: &mut self.params.weight,
            bias: self.params.bias.as_mut(),
            heads: self.heads,
            bases: self.bases,
            size: self.size,
        }
    }

    fn accumulation(&self, alpha: Tensor<T>) -> Result<AccumulationParams<T>> {
        AccumulationParams::new(alpha, self.sharing.groups(self.heads), self.bases)
    }

    fn forward(&self, alpha: &Tensor<T>) -> Result<AttentionMaps<T>> {
        AttentionMaps::new(ops::conv2d(alpha, &self.params)?, self.heads, self.size)
    }

    fn forward_explicit(&self, alpha: &Tensor<T>) -> Result<AttentionMaps<T>> {
        construct_maps(&self.accumulation(alpha.clone())?, &self.view().to_bank())
    }

    /// Accumulates kernel gradients and returns the gradient wrt `alpha`.
    fn backward(&mut self, grad_maps: &Tensor<T>, alpha: &Tensor<T>) -> Result<Tensor<T>> {
        let acc = self.accumulation(alpha.clone())?;
        let (grad_alpha, g) = construct_maps_backward(grad_maps, &acc, &self.view().to_bank())?;
        let (g2, b) = (self.size * self.size, self.bases);
        let gw = self.grad_weight.data_mut();
        for h in 0..self.heads {
            for i in 0..b {
                for k in 0..g2 {
                    gw[(h * g2 + k) * b + i] += g.base[(h * b + i) * g2 + k];
                }
            }
        }
        if let Some(gb) = &mut self.grad_bias {
            for (a, v) in gb.data_mut().iter_mut().zip(&g.pos) {
                *a += *v;
            }
        }
        Ok(grad_alpha)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        f(&join(prefix, "base"), Entry::Param { value: &self.params.weight, group: ParamGroup::Weight });
        if let Some(b) = &self.params.bias {
            f(&join(prefix, "pos"), Entry::Param { value: b, group: ParamGroup::NormOrBias });
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        f(
            &join(prefix, "base"),
            EntryMut::Param(ParamMut { value: &mut self.params.weight, grad: &mut self.grad_weight, group: ParamGroup::Weight }),
        );
        if let (Some(b), Some(gb)) = (&mut self.params.bias, &mut self.grad_bias) {
            f(&join(prefix, "pos"), EntryMut::Param(ParamMut { value: b, grad: gb, group: ParamGroup::NormOrBias }));
        }
    }

    fn profile(&self, name: &str, input: Shape, report: &mut ProfileReport) -> Result<Shape> {
        Conv2d::conv_profile(&self.params, name, input, report)
    }
}

/// Shape of a context-aware or seed network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaSpec {
    /// Input feature channels.
    pub width: usize,
    pub heads: usize,
    pub bases: usize,
    /// CA kernel side `T`.
    pub ca_kernel: usize,
    /// Aggregation kernel side `G`.
    pub size: usize,
    pub stride: usize,
    pub sharing: Sharing,
    pub pos: bool,
}

impl CaSpec {
    fn validate(&self) -> Result<()> {
        ensure!(self.heads >= 1 && self.width % self.heads == 0, "{} heads do not divide width {}", self.heads, self.width);
        ensure!(self.ca_kernel % 2 == 1, "CA kernel size {} must be odd", self.ca_kernel);
        ensure!(self.size % 2 == 1, "aggregation kernel size {} must be odd", self.size);
        ensure!(self.stride >= 1, "stride must be positive");
        ensure!(self.bases >= 1, "at least one base kernel is required");
        Ok(())
    }

    fn alpha_channels(&self) -> usize {
        self.sharing.groups(self.heads) * self.bases
    }
}

#[derive(Debug, Clone)]
struct CaCache<T> {
    pre_act: Tensor<T>,
    alpha: Tensor<T>,
}

/// Context-aware network A: `T×T` conv → BN → ReLU gives `alpha`; the
/// accumulation convolution turns `alpha` into maps.
#[derive(Debug, Clone)]
pub struct CaNetworkA<T> {
    pub spec: CaSpec,
    first: Conv2d<T>,
    norm: BatchNorm2d<T>,
    second: AccumulationConv<T>,
    cache: Option<CaCache<T>>,
}

impl<T: Scalar> CaNetworkA<T> {
    pub fn new(spec: CaSpec, init: &mut Initializer) -> Result<Self> {
        spec.validate()?;
        let a = spec.alpha_channels();
        let groups = spec.sharing.groups(spec.heads);
        let first = Conv2d::new(spec.width, a, spec.ca_kernel, spec.stride, groups, false, init)?;
        Ok(CaNetworkA {
            spec,
            first,
            norm: BatchNorm2d::new(a),
            second: AccumulationConv::new(spec.heads, spec.bases, spec.size, spec.sharing, spec.pos, init)?,
            cache: None,
        })
    }

    /// `relu(bn(first_conv(x)))`, shaped `(N, A·b, H_out, W_out)`.
    pub fn alpha(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let pre = self.norm.forward(&self.first.forward(x, mode)?, mode)?;
        let alpha = ops::relu(&pre);
        self.cache = Some(CaCache { pre_act: pre, alpha: alpha.clone() });
        Ok(alpha)
    }

    /// Maps via the fused accumulation convolution.
    pub fn ca_forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<AttentionMaps<T>> {
        ensure!(x.shape().c == self.spec.width, "CA network expects {} channels, got {}", self.spec.width, x.shape().c);
        let alpha = self.alpha(x, mode)?;
        self.second.forward(&alpha)
    }

    /// Maps via `alpha` followed by explicit map construction.
    pub fn ca_forward_explicit(&mut self, x: &Tensor<T>, mode: Mode) -> Result<AttentionMaps<T>> {
        ensure!(x.shape().c == self.spec.width, "CA network expects {} channels, got {}", self.spec.width, x.shape().c);
        let alpha = self.alpha(x, mode)?;
        self.second.forward_explicit(&alpha)
    }

    /// Accumulates parameter gradients and returns the gradient wrt the input features.
    pub fn ca_backward(&mut self, grad_maps: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or_else(|| config_err!("CA network backward called before forward"))?;
        let grad_alpha = self.second.backward(grad_maps, &cache.alpha)?;
        let grad_pre = ops::relu_backward(&grad_alpha, &cache.pre_act)?;
        let g = self.norm.backward(&grad_pre)?;
        let out = self.first.backward(&g);
        self.cache = Some(cache);
        out
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        self.first.visit(&join(prefix, "conv1"), f);
        self.norm.visit(&join(prefix, "bn"), f);
        self.second.visit(prefix, f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        self.first.visit_mut(&join(prefix, "conv1"), f);
        self.norm.visit_mut(&join(prefix, "bn"), f);
        self.second.visit_mut(prefix, f);
    }

    /// Profiles the network and returns the map shape.
    pub fn profile(&self, name: &str, input: Shape, report: &mut ProfileReport) -> Result<Shape> {
        let s = self.first.profile(&join(name, "conv1"), input, report)?;
        let s = self.norm.profile(&join(name, "bn"), s, report)?;
        self.second.profile(&join(name, "acc"), s, report)
    }
}

impl<T: Scalar> HasBank<T> for CaNetworkA<T> {
    fn bank(&self) -> BankView<'_, T> {
        self.second.view()
    }
    fn bank_mut(&mut self) -> BankViewMut<'_, T> {
        self.second.view_mut()
    }
}

/// Non-context-aware network D: a trainable `(1, width, 1, 1)` seed replaces the
/// input features, so maps are the same at every location and for every sample.
/// The seed network is 1×1 conv → ReLU → accumulation conv.
#[derive(Debug, Clone)]
pub struct DaNetworkD<T> {
    pub spec: CaSpec,
    pub seed: Tensor<T>,
    grad_seed: Tensor<T>,
    first: Conv2d<T>,
    second: AccumulationConv<T>,
    cache: Option<CaCache<T>>,
}

impl<T: Scalar> DaNetworkD<T> {
    pub fn new(spec: CaSpec, init: &mut Initializer) -> Result<Self> {
        spec.validate()?;
        let a = spec.alpha_channels();
        let groups = spec.sharing.groups(spec.heads);
        let ss = Shape::new(1, spec.width, 1, 1);
        Ok(DaNetworkD {
            spec,
            seed: init.normal(ss, 1.0),
            grad_seed: Tensor::zeros(ss),
            first: Conv2d::new(spec.width, a, 1, 1, groups, false, init)?,
            second: AccumulationConv::new(spec.heads, spec.bases, spec.size, spec.sharing, spec.pos, init)?,
            cache: None,
        })
    }

    /// The location-constant maps as a `(heads, 1, G, G)` kernel.
    pub fn kernel(&mut self) -> Result<Tensor<T>> {
        let pre = self.first.forward(&self.seed, Mode::Eval)?;
        let alpha = ops::relu(&pre);
        let maps = self.second.forward(&alpha)?;
        self.cache = Some(CaCache { pre_act: pre, alpha });
        let g = self.spec.size;
        maps.maps.reshape(Shape::new(self.spec.heads, 1, g, g))
    }

    /// Maps broadcast to `batch` samples of `out_hw` locations.
    pub fn da_forward(&mut self, batch: usize, out_hw: (usize, usize)) -> Result<AttentionMaps<T>> {
        let kernel = self.kernel()?;
        let (h, w) = out_hw;
        let maps = Tensor::from_fn(Shape::new(batch, kernel.numel(), h, w), |_, c, _, _| kernel.data()[c]);
        AttentionMaps::new(maps, self.spec.heads, self.spec.size)
    }

    /// Backward from a gradient wrt the `(heads, 1, G, G)` kernel.
    pub fn kernel_backward(&mut self, grad_kernel: &Tensor<T>) -> Result<()> {
        let cache = self.cache.take().ok_or_else(|| config_err!("DA network backward called before forward"))?;
        let c = self.spec.heads * self.spec.size * self.spec.size;
        ensure!(grad_kernel.numel() == c, "kernel gradient has {} values, expected {}", grad_kernel.numel(), c);
        let gm = grad_kernel.clone().reshape(Shape::new(1, c, 1, 1))?;
        let grad_alpha = self.second.backward(&gm, &cache.alpha)?;
        let grad_pre = ops::relu_backward(&grad_alpha, &cache.pre_act)?;
        let gs = self.first.backward(&grad_pre)?;
        self.grad_seed.add_assign(&gs)?;
        self.cache = Some(cache);
        Ok(())
    }

    /// Backward from a gradient wrt broadcast maps.
    pub fn da_backward(&mut self, grad_maps: &Tensor<T>) -> Result<()> {
        let s = grad_maps.shape();
        let mut gk = Tensor::zeros(Shape::new(self.spec.heads, 1, self.spec.size, self.spec.size));
        ensure!(s.c == gk.numel(), "map gradient has {} channels, expected {}", s.c, gk.numel());
        for n in 0..s.n {
            for c in 0..s.c {
                gk.data_mut()[c] += grad_maps.plane(n, c).iter().copied().sum::<T>();
            }
        }
        self.kernel_backward(&gk)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        f(&join(prefix, "seed"), Entry::Param { value: &self.seed, group: ParamGroup::Weight });
        self.first.visit(&join(prefix, "conv1"), f);
        self.second.visit(prefix, f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        f(
            &join(prefix, "seed"),
            EntryMut::Param(ParamMut { value: &mut self.seed, grad: &mut self.grad_seed, group: ParamGroup::Weight }),
        );
        self.first.visit_mut(&join(prefix, "conv1"), f);
        self.second.visit_mut(prefix, f);
    }

    /// Counts parameters; the seed network runs once per forward pass, so it is
    /// profiled on its `1×1` seed.
    pub fn profile(&self, name: &str, report: &mut ProfileReport) -> Result<()> {
        report.push(&join(name, "seed"), self.seed.numel(), 0);
        let s = self.first.profile(&join(name, "conv1"), self.seed.shape(), report)?;
        self.second.profile(&join(name, "acc"), s, report)?;
        Ok(())
    }
}

impl<T: Scalar> HasBank<T> for DaNetworkD<T> {
    fn bank(&self) -> BankView<'_, T> {
        self.second.view()
    }
    fn bank_mut(&mut self) -> BankViewMut<'_, T> {
        self.second.view_mut()
    }
}
