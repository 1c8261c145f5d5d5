use crate::analysis::profile::ProfileReport;
use crate::error::{config_err, Result};
use crate::nn::{join, BatchNorm2d, Conv2d, Entry, EntryMut, Initializer, Mode, Module};
use crate::ops::{self, avg_pool, avg_pool_backward, max_pool, max_pool_backward, Pool2d};
use crate::tensor::{Scalar, Shape, Tensor};

use super::config::{BackboneConfig, NormAct, StageConfig, Stem, Variant};
use super::filter::SpatialFilter;

/// Optional batch norm followed by optional ReLU.
#[derive(Debug, Clone)]
pub struct NormActLayer<T> {
    pub bn: Option<BatchNorm2d<T>>,
    pub relu: bool,
    pre: Option<Tensor<T>>,
}

impl<T: Scalar> NormActLayer<T> {
    pub fn new(channels: usize, kind: NormAct) -> Self {
        NormActLayer {
            bn: kind.has_bn().then(|| BatchNorm2d::new(channels)),
            relu: kind.has_relu(),
            pre: None,
        }
    }
}

impl<T: Scalar> Module<T> for NormActLayer<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = match &mut self.bn {
            Some(bn) => bn.forward(x, mode)?,
            None => x.clone(),
        };
        if self.relu {
            let out = ops::relu(&y);
            self.pre = Some(y);
            Ok(out)
        } else {
            Ok(y)
        }
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let g = if self.relu {
            let pre = self.pre.as_ref().ok_or_else(|| config_err!("activation backward called before forward"))?;
            ops::relu_backward(grad, pre)?
        } else {
            grad.clone()
        };
        match &mut self.bn {
            Some(bn) => bn.backward(&g),
            None => Ok(g),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        if let Some(bn) = &self.bn {
            bn.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        if let Some(bn) = &mut self.bn {
            bn.visit_mut(prefix, f);
        }
    }

    fn profile(&self, name: &str, input: Shape, report: &mut ProfileReport) -> Result<Shape> {
        match &self.bn {
            Some(bn) => bn.profile(name, input, report),
            None => Ok(input),
        }
    }
}

/// Convolution, batch norm and optional ReLU.
#[derive(Debug, Clone)]
pub struct ConvBn<T> {
    pub conv: Conv2d<T>,
    pub post: NormActLayer<T>,
}

impl<T: Scalar> ConvBn<T> {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, relu: bool, init: &mut Initializer) -> Result<Self> {
        let kind = if relu { NormAct::BnRelu } else { NormAct::Bn };
        Ok(ConvBn {
            conv: Conv2d::new(cin, cout, k, stride, 1, false, init)?,
            post: NormActLayer::new(cout, kind),
        })
    }
}

impl<T: Scalar> Module<T> for ConvBn<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.conv.forward(x, mode)?;
        self.post.forward(&y, mode)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.post.backward(grad)?;
        self.conv.backward(&g)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        self.conv.visit(prefix, f);
        self.post.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        self.conv.visit_mut(prefix, f);
        self.post.visit_mut(&join(prefix, "bn"), f);
    }

    fn profile(&self, name: &str, input: Shape, report: &mut ProfileReport) -> Result<Shape> {
        let s = self.conv.profile(name, input, report)?;
        self.post.profile(&join(name, "bn"), s, report)
    }
}

/// 2×2 stride-2 pooling that rounds odd sizes up, matching strided 1×1 sampling.
pub(crate) fn skip_pool() -> Pool2d {
    Pool2d { k: 2, stride: 2, pad_begin: 0, pad_end: 1 }
}

#[derive(Debug, Clone)]
pub struct Skip<T> {
    pub pool: bool,
    pub proj: ConvBn<T>,
    pool_input: Option<Shape>,
}

#[derive(Debug, Clone)]
pub struct Bottleneck<T> {
    pub conv1: Conv2d<T>,
    pub pre: NormActLayer<T>,
    pub filter: SpatialFilter<T>,
    pub post: NormActLayer<T>,
    pub conv3: ConvBn<T>,
    pub skip: Option<Skip<T>>,
    sum: Option<Tensor<T>>,
}

impl<T: Scalar> Bottleneck<T> {
    pub fn new(variant: Variant, cin: usize, cfg: &StageConfig, stride: usize, expansion: usize, init: &mut Initializer) -> Result<Self> {
        let width = cfg.width;
        let cout = width * expansion;
        let (s1, s2) = match variant {
            Variant::Original | Variant::E => (stride, 1),
            Variant::B | Variant::D => (1, stride),
        };
        let conv1 = Conv2d::new(cin, width, 1, s1, 1, false, init)?;
        let filter = SpatialFilter::build(cfg.filter, width, s2, cfg.b, cfg.c_h, cfg.t, cfg.g, cfg.pos, init)?;
        let skip = if stride != 1 || cin != cout {
            let pool = variant == Variant::D && stride != 1;
            let proj_stride = if pool { 1 } else { stride };
            Some(Skip { pool, proj: ConvBn::new(cin, cout, 1, proj_stride, false, init)?, pool_input: None })
        } else {
            None
        };
        Ok(Bottleneck {
            conv1,
            pre: NormActLayer::new(width, cfg.norm_act),
            filter,
            post: NormActLayer::new(width, NormAct::BnRelu),
            conv3: ConvBn::new(width, cout, 1, 1, false, init)?,
            skip,
            sum: None,
        })
    }
}

impl<T: Scalar> Module<T> for Bottleneck<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.conv1.forward(x, mode)?;
        let y = self.pre.forward(&y, mode)?;
        let y = self.filter.forward(&y, mode)?;
        let y = self.post.forward(&y, mode)?;
        let mut y = self.conv3.forward(&y, mode)?;
        let s = match &mut self.skip {
            None => x.clone(),
            Some(skip) => {
                let z = if skip.pool {
                    skip.pool_input = Some(x.shape());
                    avg_pool(x, skip_pool())?
                } else {
                    x.clone()
                };
                skip.proj.forward(&z, mode)?
            }
        };
        y.add_assign(&s)
            .map_err(|_| config_err!("residual shapes differ: main {} vs skip {}", y.shape(), s.shape()))?;
        let out = ops::relu(&y);
        self.sum = Some(y);
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let sum = self.sum.as_ref().ok_or_else(|| config_err!("bottleneck backward called before forward"))?;
        let g = ops::relu_backward(grad, sum)?;
        let gm = self.conv3.backward(&g)?;
        let gm = self.post.backward(&gm)?;
        let gm = self.filter.backward(&gm)?;
        let gm = self.pre.backward(&gm)?;
        let mut gx = self.conv1.backward(&gm)?;
        let gs = match &mut self.skip {
            None => g,
            Some(skip) => {
                let gz = skip.proj.backward(&g)?;
                if skip.pool {
                    let shape = skip.pool_input.ok_or_else(|| config_err!("skip pool backward called before forward"))?;
                    avg_pool_backward(&gz, shape, skip_pool())?
                } else {
                    gz
                }
            }
        };
        gx.add_assign(&gs)?;
        Ok(gx)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.pre.visit(&join(prefix, "pre"), f);
        self.filter.visit(&join(prefix, "filter"), f);
        self.post.visit(&join(prefix, "bn2"), f);
        self.conv3.visit(&join(prefix, "conv3"), f);
        if let Some(s) = &self.skip {
            s.proj.visit(&join(prefix, "skip"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.pre.visit_mut(&join(prefix, "pre"), f);
        self.filter.visit_mut(&join(prefix, "filter"), f);
        self.post.visit_mut(&join(prefix, "bn2"), f);
        self.conv3.visit_mut(&join(prefix, "conv3"), f);
        if let Some(s) = &mut self.skip {
            s.proj.visit_mut(&join(prefix, "skip"), f);
        }
    }

    fn profile(&self, name: &str, input: Shape, report: &mut ProfileReport) -> Result<Shape> {
        let s = self.conv1.profile(&join(name, "conv1"), input, report)?;
        let s = self.pre.profile(&join(name, "pre"), s, report)?;
        let s = self.filter.profile(&join(name, "filter"), s, report)?;
        let s = self.post.profile(&join(name, "bn2"), s, report)?;
        let out = self.conv3.profile(&join(name, "conv3"), s, report)?;
        if let Some(skip) = &self.skip {
            let z = if skip.pool { skip_pool().output_shape(input)? } else { input };
            let s = skip.proj.profile(&join(name, "skip"), z, report)?;
            if s != out {
                return Err(config_err!("{name}: residual shapes differ: main {out} vs skip {s}"));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct StemLayer<T> {
    pub convs: Vec<ConvBn<T>>,
    pub max_pool: bool,
    argmax: Option<(Shape, Vec<usize>)>,
}

fn stem_pool() -> Pool2d {
    Pool2d::new(3, 2, 1)
}

impl<T: Scalar> StemLayer<T> {
    pub fn new(cfg: &BackboneConfig, init: &mut Initializer) -> Result<Self> {
        let sw = cfg.stem_width;
        let convs = match cfg.stem {
            Stem::Classic => vec![ConvBn::new(cfg.in_channels, 2 * sw, 7, 2, true, init)?],
            Stem::Deep | Stem::DeepNoMaxPool => vec![
                ConvBn::new(cfg.in_channels, sw, 3, 2, true, init)?,
                ConvBn::new(sw, sw, 3, 1, true, init)?,
                ConvBn::new(sw, 2 * sw, 3, 1, true, init)?,
            ],
        };
        Ok(StemLayer { convs, max_pool: cfg.stem != Stem::DeepNoMaxPool, argmax: None })
    }
}

impl<T: Scalar> Module<T> for StemLayer<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut y = x.clone();
        for c in &mut self.convs {
            y = c.forward(&y, mode)?;
        }
        if self.max_pool {
            let (p, arg) = max_pool(&y, stem_pool())?;
            self.argmax = Some((y.shape(), arg));
            y = p;
        }
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = if self.max_pool {
            let (shape, arg) = self.argmax.as_ref().ok_or_else(|| config_err!("stem backward called before forward"))?;
            max_pool_backward(grad, *shape, arg)?
        } else {
            grad.clone()
        };
        for c in self.convs.iter_mut().rev() {
            g = c.backward(&g)?;
        }
        Ok(g)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&join(prefix, &format!("conv{}", i + 1)), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("conv{}", i + 1)), f);
        }
    }

    fn profile(&self, name: &str, input: Shape, report: &mut ProfileReport) -> Result<Shape> {
        let mut s = input;
        for (i, c) in self.convs.iter().enumerate() {
            s = c.profile(&join(name, &format!("conv{}", i + 1)), s, report)?;
        }
        if self.max_pool {
            s = stem_pool().output_shape(s)?;
        }
        Ok(s)
    }
}
