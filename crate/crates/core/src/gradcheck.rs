//! Central finite-difference checks of every backward pass (64-bit).
//!
//! Relative error is `|a - n| / max(|a|, |n|, FLOOR)`. Coordinates whose one-sided
//! differences disagree sharply straddle a ReLU or max-pool kink and are skipped.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::{aggregate, aggregate_backward, construct_maps, construct_maps_backward, AccumulationParams, AttentionMaps, BaseKernelBank};
use crate::backbone::{Backbone, BackboneConfig};
use crate::canet::{CaNetworkA, CaSpec, DaNetworkD, Sharing};
use crate::error::Result;
use crate::nn::{join, zero_grad, BatchNorm2d, Conv2d, Entry, EntryMut, Initializer, Linear, MhDwConv, Mode, Module, ParamGroup, ParamMut, Rng};
use crate::ops::{self, Pool2d};
use crate::tensor::{Shape, Tensor};
use crate::analysis::profile::ProfileReport;

pub const STEP: f64 = 1e-5;
pub const FLOOR: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_rel: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl GradCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel < tol && self.checked > 0
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

pub fn randn(shape: Shape, rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| StandardNormal.sample(rng))
}

/// Perturbs coordinates of `originals` and compares against `analytic`.
/// `eval(slot, index, value, compute)` writes the coordinate and, if `compute`, returns the
/// outputs; the loss is `sum(w ⊙ outputs)`, differenced output-wise before reduction.
#[allow(clippy::too_many_arguments)]
fn probe(
    name: &str,
    originals: &[Vec<f64>],
    analytic: &[Vec<f64>],
    y0: &[f64],
    w: &[f64],
    points: usize,
    rng: &mut Rng,
    mut eval: impl FnMut(usize, usize, f64, bool) -> Result<Vec<f64>>,
) -> Result<GradCheck> {
    let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).zip(w).map(|((a, b), w)| w * (a - b)).sum::<f64>();
    let mut out = GradCheck { name: name.to_string(), max_rel: 0.0, checked: 0, skipped: 0 };
    for (s, orig) in originals.iter().enumerate() {
        let idx: Vec<usize> = if orig.len() <= points { (0..orig.len()).collect() } else { sample(rng, orig.len(), points).into_vec() };
        for i in idx {
            let v = orig[i];
            let yp = eval(s, i, v + STEP, true)?;
            let ym = eval(s, i, v - STEP, true)?;
            eval(s, i, v, false)?;
            let central = diff(&yp, &ym) / (2.0 * STEP);
            let (fwd, bwd) = (diff(&yp, y0) / STEP, diff(y0, &ym) / STEP);
            if (fwd - bwd).abs() > 1e-3 * central.abs().max(1.0) {
                out.skipped += 1;
                continue;
            }
            out.max_rel = out.max_rel.max(rel_err(analytic[s][i], central));
            out.checked += 1;
        }
    }
    Ok(out)
}

fn param_values<M: Module<f64> + ?Sized>(m: &mut M) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let (mut vals, mut grads) = (Vec::new(), Vec::new());
    m.visit_mut("", &mut |_, e| {
        if let EntryMut::Param(p) = e {
            vals.push(p.value.data().to_vec());
            grads.push(p.grad.data().to_vec());
        }
    });
    (vals, grads)
}

fn set_param<M: Module<f64> + ?Sized>(m: &mut M, slot: usize, i: usize, v: f64) {
    let mut k = 0;
    m.visit_mut("", &mut |_, e| {
        if let EntryMut::Param(p) = e {
            if k == slot {
                p.value.data_mut()[i] = v;
            }
            k += 1;
        }
    });
}

/// Checks input and parameter gradients of `m` under the loss `sum(w ⊙ m(x))`.
pub fn check_module<M: Module<f64> + ?Sized>(name: &str, m: &mut M, x: &Tensor<f64>, mode: Mode, points: usize, rng: &mut Rng) -> Result<GradCheck> {
    let y = m.forward(x, mode)?;
    let w = randn(y.shape(), rng);
    zero_grad(m);
    let gx = m.backward(&w)?;
    let (pvals, pgrads) = param_values(m);
    let mut originals = vec![x.data().to_vec()];
    originals.extend(pvals);
    let mut analytic = vec![gx.data().to_vec()];
    analytic.extend(pgrads);
    let mut xp = x.clone();
    probe(name, &originals, &analytic, y.data(), w.data(), points, rng, |s, i, v, compute| {
        if s == 0 {
            xp.data_mut()[i] = v;
        } else {
            set_param(m, s - 1, i, v);
        }
        if compute {
            Ok(m.forward(&xp, mode)?.into_vec())
        } else {
            Ok(Vec::new())
        }
    })
}

/// Gradient of the mean cross-entropy wrt input and parameters of a whole model.
pub fn check_model(name: &str, model: &mut Backbone<f64>, x: &Tensor<f64>, labels: &[usize], points: usize, rng: &mut Rng) -> Result<GradCheck> {
    let loss_of = |m: &mut Backbone<f64>, x: &Tensor<f64>| -> Result<f64> {
        let logits = m.forward(x, Mode::Train)?;
        Ok(ops::softmax_cross_entropy(&logits, labels)?.0)
    };
    zero_grad(model);
    let logits = model.forward(x, Mode::Train)?;
    let (f0, g) = ops::softmax_cross_entropy(&logits, labels)?;
    let gx = model.backward(&g)?;
    let (pvals, pgrads) = param_values(model);
    let mut originals = vec![x.data().to_vec()];
    originals.extend(pvals);
    let mut analytic = vec![gx.data().to_vec()];
    analytic.extend(pgrads);
    let mut xp = x.clone();
    probe(name, &originals, &analytic, &[f0], &[1.0], points, rng, |s, i, v, compute| {
        if s == 0 {
            xp.data_mut()[i] = v;
        } else {
            set_param(model, s - 1, i, v);
        }
        if compute {
            Ok(vec![loss_of(model, &xp)?])
        } else {
            Ok(Vec::new())
        }
    })
}

/// Parameter-free layer wrapper around a pure op and its adjoint.
struct OpProbe<F, B> {
    forward: F,
    backward: B,
    input: Option<Tensor<f64>>,
}

impl<F, B> Module<f64> for OpProbe<F, B>
where
    F: FnMut(&Tensor<f64>) -> Result<Tensor<f64>>,
    B: FnMut(&Tensor<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
{
    fn forward(&mut self, x: &Tensor<f64>, _mode: Mode) -> Result<Tensor<f64>> {
        self.input = Some(x.clone());
        (self.forward)(x)
    }
    fn backward(&mut self, grad: &Tensor<f64>) -> Result<Tensor<f64>> {
        let x = self.input.as_ref().expect("forward first");
        (self.backward)(grad, x)
    }
    fn visit(&self, _: &str, _: &mut dyn FnMut(&str, Entry<'_, f64>)) {}
    fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, EntryMut<'_, f64>)) {}
    fn profile(&self, _: &str, input: Shape, _: &mut ProfileReport) -> Result<Shape> {
        Ok(input)
    }
}

fn op_probe<F, B>(forward: F, backward: B) -> OpProbe<F, B> {
    OpProbe { forward, backward, input: None }
}

/// Map construction with `alpha` as input and the bank as parameters.
struct ConstructProbe {
    groups: usize,
    heads: usize,
    bases: usize,
    size: usize,
    base: Tensor<f64>,
    pos: Tensor<f64>,
    gbase: Tensor<f64>,
    gpos: Tensor<f64>,
    alpha: Option<Tensor<f64>>,
}

impl ConstructProbe {
    fn bank(&self) -> BaseKernelBank<f64> {
        BaseKernelBank::from_parts(self.heads, self.bases, self.size, self.base.data().to_vec(), Some(self.pos.data().to_vec())).expect("consistent bank")
    }
}

impl Module<f64> for ConstructProbe {
    fn forward(&mut self, x: &Tensor<f64>, _mode: Mode) -> Result<Tensor<f64>> {
        self.alpha = Some(x.clone());
        Ok(construct_maps(&AccumulationParams::new(x.clone(), self.groups, self.bases)?, &self.bank())?.maps)
    }
    fn backward(&mut self, grad: &Tensor<f64>) -> Result<Tensor<f64>> {
        let a = AccumulationParams::new(self.alpha.clone().expect("forward first"), self.groups, self.bases)?;
        let (ga, gb) = construct_maps_backward(grad, &a, &self.bank())?;
        self.gbase.add_assign(&Tensor::from_vec(self.base.shape(), gb.base)?)?;
        self.gpos.add_assign(&Tensor::from_vec(self.pos.shape(), gb.pos)?)?;
        Ok(ga)
    }
    fn visit(&self, _: &str, _: &mut dyn FnMut(&str, Entry<'_, f64>)) {}
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, f64>)) {
        f(&join(prefix, "base"), EntryMut::Param(ParamMut { value: &mut self.base, grad: &mut self.gbase, group: ParamGroup::Weight }));
        f(&join(prefix, "pos"), EntryMut::Param(ParamMut { value: &mut self.pos, grad: &mut self.gpos, group: ParamGroup::NormOrBias }));
    }
    fn profile(&self, _: &str, input: Shape, _: &mut ProfileReport) -> Result<Shape> {
        Ok(input)
    }
}

/// Aggregation with the features as input and the maps as parameters.
struct AggregateProbe {
    maps: Tensor<f64>,
    gmaps: Tensor<f64>,
    heads: usize,
    size: usize,
    c_h: usize,
    stride: usize,
    input: Option<Tensor<f64>>,
}

impl Module<f64> for AggregateProbe {
    fn forward(&mut self, x: &Tensor<f64>, _mode: Mode) -> Result<Tensor<f64>> {
        self.input = Some(x.clone());
        aggregate(x, &AttentionMaps::new(self.maps.clone(), self.heads, self.size)?, self.c_h, self.stride)
    }
    fn backward(&mut self, grad: &Tensor<f64>) -> Result<Tensor<f64>> {
        let maps = AttentionMaps::new(self.maps.clone(), self.heads, self.size)?;
        let (gx, gm) = aggregate_backward(grad, self.input.as_ref().expect("forward first"), &maps, self.c_h, self.stride)?;
        self.gmaps.add_assign(&gm)?;
        Ok(gx)
    }
    fn visit(&self, _: &str, _: &mut dyn FnMut(&str, Entry<'_, f64>)) {}
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, f64>)) {
        f(&join(prefix, "maps"), EntryMut::Param(ParamMut { value: &mut self.maps, grad: &mut self.gmaps, group: ParamGroup::Weight }));
    }
    fn profile(&self, _: &str, input: Shape, _: &mut ProfileReport) -> Result<Shape> {
        Ok(input)
    }
}

/// Context-aware network producing maps from its input.
struct CaProbe(CaNetworkA<f64>);

impl Module<f64> for CaProbe {
    fn forward(&mut self, x: &Tensor<f64>, mode: Mode) -> Result<Tensor<f64>> {
        Ok(self.0.ca_forward(x, mode)?.maps)
    }
    fn backward(&mut self, grad: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.0.ca_backward(grad)
    }
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, f64>)) {
        self.0.visit(prefix, f)
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, f64>)) {
        self.0.visit_mut(prefix, f)
    }
    fn profile(&self, _: &str, input: Shape, _: &mut ProfileReport) -> Result<Shape> {
        Ok(input)
    }
}

/// Seed network; the input only fixes batch size and map resolution.
struct DaProbe(DaNetworkD<f64>);

impl Module<f64> for DaProbe {
    fn forward(&mut self, x: &Tensor<f64>, _mode: Mode) -> Result<Tensor<f64>> {
        let s = x.shape();
        Ok(self.0.da_forward(s.n, (s.h, s.w))?.maps)
    }
    fn backward(&mut self, grad: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.0.da_backward(grad)?;
        Ok(Tensor::zeros(Shape::new(grad.shape().n, self.0.spec.width, grad.shape().h, grad.shape().w)))
    }
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, f64>)) {
        self.0.visit(prefix, f)
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, f64>)) {
        self.0.visit_mut(prefix, f)
    }
    fn profile(&self, _: &str, input: Shape, _: &mut ProfileReport) -> Result<Shape> {
        Ok(input)
    }
}

fn randomize<M: Module<f64> + ?Sized>(m: &mut M, rng: &mut Rng) {
    m.visit_mut("", &mut |_, e| {
        if let EntryMut::Param(p) = e {
            for v in p.value.data_mut() {
                *v = StandardNormal.sample(rng);
            }
        }
    });
}

/// One point of the attention configuration matrix.
#[derive(Debug, Clone, Copy)]
pub struct MatrixPoint {
    pub c_h: usize,
    pub b: usize,
    pub t: usize,
    pub g: usize,
    pub stride: usize,
}

pub fn config_matrix() -> Vec<MatrixPoint> {
    let mut out = Vec::new();
    for c_h in [1, 2, 4] {
        for b in [1, 2, 4] {
            for t in [1, 3] {
                for g in [3, 5] {
                    for stride in [1, 2] {
                        out.push(MatrixPoint { c_h, b, t, g, stride });
                    }
                }
            }
        }
    }
    out
}

/// Core layer checks on small random shapes.
pub fn layer_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut init = Initializer::seeded(seed ^ 1);
    let mut out = Vec::new();
    let x = randn(Shape::new(2, 6, 5, 5), &mut rng);
    for (groups, stride, k) in [(1, 1, 3), (3, 2, 3), (2, 1, 1), (6, 2, 5)] {
        let mut c = Conv2d::<f64>::new(6, 6, k, stride, groups, true, &mut init)?;
        randomize(&mut c, &mut rng);
        out.push(check_module(&format!("conv2d g{groups} s{stride} k{k}"), &mut c, &x, Mode::Train, 10_000, &mut rng)?);
    }
    let mut bn = BatchNorm2d::<f64>::new(6);
    randomize(&mut bn, &mut rng);
    out.push(check_module("batch_norm", &mut bn, &x, Mode::Train, 10_000, &mut rng)?);
    let mut lin = Linear::<f64>::new(6 * 25, 5, &mut init);
    randomize(&mut lin, &mut rng);
    out.push(check_module("linear", &mut lin, &x, Mode::Train, 10_000, &mut rng)?);
    let mut relu = op_probe(|x: &Tensor<f64>| Ok(ops::relu(x)), |g: &Tensor<f64>, x: &Tensor<f64>| ops::relu_backward(g, x));
    out.push(check_module("relu", &mut relu, &x, Mode::Train, 10_000, &mut rng)?);
    for pool in [Pool2d::new(2, 2, 0), Pool2d::new(3, 2, 1), Pool2d::same(2), Pool2d::same(5)] {
        let mut avg = op_probe(move |x: &Tensor<f64>| ops::avg_pool(x, pool), move |g: &Tensor<f64>, x: &Tensor<f64>| ops::avg_pool_backward(g, x.shape(), pool));
        out.push(check_module(&format!("avg_pool k{} s{}", pool.k, pool.stride), &mut avg, &x, Mode::Train, 10_000, &mut rng)?);
    }
    let mpool = Pool2d::new(3, 2, 1);
    let mut maxp = op_probe(
        move |x: &Tensor<f64>| Ok(ops::max_pool(x, mpool)?.0),
        move |g: &Tensor<f64>, x: &Tensor<f64>| {
            let (_, arg) = ops::max_pool(x, mpool)?;
            ops::max_pool_backward(g, x.shape(), &arg)
        },
    );
    out.push(check_module("max_pool k3 s2", &mut maxp, &x, Mode::Train, 10_000, &mut rng)?);
    let mut gap = op_probe(|x: &Tensor<f64>| Ok(ops::global_avg_pool(x)), |g: &Tensor<f64>, x: &Tensor<f64>| ops::pool::global_avg_pool_backward(g, x.shape()));
    out.push(check_module("global_avg_pool", &mut gap, &x, Mode::Train, 10_000, &mut rng)?);
    let logits = randn(Shape::new(4, 7, 1, 1), &mut rng);
    let labels = [0usize, 3, 6, 2];
    let (f0, g) = ops::softmax_cross_entropy(&logits, &labels)?;
    let mut lp = logits.clone();
    out.push(probe("softmax_cross_entropy", &[logits.data().to_vec()], &[g.data().to_vec()], &[f0], &[1.0], 10_000, &mut rng, |_, i, v, compute| {
        lp.data_mut()[i] = v;
        if compute {
            Ok(vec![ops::softmax_cross_entropy(&lp, &labels)?.0])
        } else {
            Ok(Vec::new())
        }
    })?);
    for (c_h, stride) in [(1, 1), (2, 2), (3, 1)] {
        let mut dw = MhDwConv::<f64>::new(6, c_h, 3, stride, &mut init)?;
        randomize(&mut dw, &mut rng);
        out.push(check_module(&format!("mh_dw_conv ch{c_h} s{stride}"), &mut dw, &x, Mode::Train, 10_000, &mut rng)?);
    }
    Ok(out)
}

/// Map construction, aggregation, CA and DA networks over the full configuration matrix.
pub fn attention_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut init = Initializer::seeded(seed ^ 2);
    let width = 4;
    let mut out = Vec::new();
    for p in config_matrix() {
        let heads = width / p.c_h;
        let tag = format!("ch{} b{} t{} g{} s{}", p.c_h, p.b, p.t, p.g, p.stride);
        let x = randn(Shape::new(2, width, 5, 5), &mut rng);
        let ho = crate::attention::aggregate_output_len(5, p.g, p.stride);
        if p.t == 1 {
            for groups in [heads, 1] {
                let mut cp = ConstructProbe {
                    groups,
                    heads,
                    bases: p.b,
                    size: p.g,
                    base: randn(Shape::new(heads, p.b, p.g, p.g), &mut rng),
                    pos: randn(Shape::new(heads, 1, p.g, p.g), &mut rng),
                    gbase: Tensor::zeros(Shape::new(heads, p.b, p.g, p.g)),
                    gpos: Tensor::zeros(Shape::new(heads, 1, p.g, p.g)),
                    alpha: None,
                };
                let alpha = randn(Shape::new(2, groups * p.b, ho, ho), &mut rng);
                out.push(check_module(&format!("construct_maps A{groups} {tag}"), &mut cp, &alpha, Mode::Train, 10_000, &mut rng)?);
            }
            if p.b == 1 {
                let mut ap = AggregateProbe {
                    maps: randn(Shape::new(2, heads * p.g * p.g, ho, ho), &mut rng),
                    gmaps: Tensor::zeros(Shape::new(2, heads * p.g * p.g, ho, ho)),
                    heads,
                    size: p.g,
                    c_h: p.c_h,
                    stride: p.stride,
                    input: None,
                };
                out.push(check_module(&format!("aggregate ch{} g{} s{}", p.c_h, p.g, p.stride), &mut ap, &x, Mode::Train, 10_000, &mut rng)?);
            }
        }
        for sharing in [Sharing::PerHead, Sharing::Shared] {
            let spec = CaSpec { width, heads, bases: p.b, ca_kernel: p.t, size: p.g, stride: p.stride, sharing, pos: true };
            let kind = if sharing == Sharing::PerHead { "" } else { "sp" };
            let mut ca = CaProbe(CaNetworkA::new(spec, &mut init)?);
            randomize(&mut ca, &mut rng);
            out.push(check_module(&format!("ca_forward{kind} {tag}"), &mut ca, &x, Mode::Train, 10_000, &mut rng)?);
            let mut da = DaProbe(DaNetworkD::new(spec, &mut init)?);
            randomize(&mut da, &mut rng);
            let xm = Tensor::zeros(Shape::new(2, width, ho, ho));
            let mut r = check_module(&format!("da_forward{kind} {tag}"), &mut da, &xm, Mode::Train, 10_000, &mut rng)?;
            // The seed network ignores its input, so only parameter coordinates are meaningful.
            r.name.push_str(" (params)");
            out.push(r);
        }
    }
    Ok(out)
}

/// End-to-end check of a model built from `config` (64-bit, train mode).
pub fn model_check(config: &BackboneConfig, batch: usize, points: usize, seed: u64) -> Result<GradCheck> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut model = Backbone::<f64>::build(config, seed)?;
    let (h, w) = config.input_hw;
    let x = randn(Shape::new(batch, config.in_channels, h, w), &mut rng);
    let labels: Vec<usize> = (0..batch).map(|i| i % config.num_classes).collect();
    check_model("model", &mut model, &x, &labels, points, &mut rng)
}
