//! Configurable bottleneck backbones with pluggable spatial and downsampling filters.

mod block;
pub mod checkpoint;
mod config;
mod filter;

pub use block::{Bottleneck, ConvBn, NormActLayer, Skip, StemLayer};
pub use config::{BackboneConfig, DownsamplingFilterKind, NormAct, SpatialFilterKind, StageConfig, Stem, Variant};
pub use filter::{CadaFilter, DaFilter, DownsampleFilter, SpatialFilter};

use crate::analysis::profile::ProfileReport;
use crate::canet::HasBank;
use crate::error::{config_err, ensure, Result};
use crate::nn::{join, Entry, EntryMut, Initializer, Linear, Mode, Module};
use crate::ops::{global_avg_pool, pool::global_avg_pool_backward, softmax_cross_entropy};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Debug, Clone)]
pub struct Stage<T> {
    pub down: Option<DownsampleFilter<T>>,
    pub blocks: Vec<Bottleneck<T>>,
}

/// Stem → stages → global average pooling → linear classifier.
#[derive(Debug, Clone)]
pub struct Backbone<T> {
    pub config: BackboneConfig,
    pub stem: StemLayer<T>,
    pub stages: Vec<Stage<T>>,
    pub fc: Linear<T>,
    pooled: Option<Shape>,
}

impl<T: Scalar> Backbone<T> {
    pub fn build(config: &BackboneConfig, seed: u64) -> Result<Self> {
        Self::build_with(config, &mut Initializer::seeded(seed))
    }

    /// All parameters zero; enough for profiling or as a target for loading state.
    pub fn build_uninit(config: &BackboneConfig) -> Result<Self> {
        Self::build_with(config, &mut Initializer::zeros())
    }

    fn build_with(config: &BackboneConfig, init: &mut Initializer) -> Result<Self> {
        config.validate()?;
        let stem = StemLayer::new(config, init)?;
        let mut stages = Vec::with_capacity(config.stages.len());
        for (cfg, cin) in config.stages.iter().zip(config.stage_inputs()) {
            let down = DownsampleFilter::build(cfg.downsample, cin, init)?;
            let mut blocks = Vec::with_capacity(cfg.blocks);
            let mut c = cin;
            for j in 0..cfg.blocks {
                let stride = if j == 0 { cfg.stride } else { 1 };
                blocks.push(Bottleneck::new(config.variant, c, cfg, stride, config.expansion, init)?);
                c = cfg.width * config.expansion;
            }
            stages.push(Stage { down, blocks });
        }
        let fc = Linear::new(config.out_channels(), config.num_classes, init);
        Ok(Backbone { config: config.clone(), stem, stages, fc, pooled: None })
    }

    /// Mean cross-entropy of a batch; in train mode, also backpropagates it.
    pub fn loss(&mut self, x: &Tensor<T>, labels: &[usize], mode: Mode) -> Result<(T, Tensor<T>)> {
        let logits = self.forward(x, mode)?;
        let (loss, grad) = softmax_cross_entropy(&logits, labels)?;
        if mode == Mode::Train {
            self.backward(&grad)?;
        }
        Ok((loss, logits))
    }

    pub fn profile_report(&self, input_hw: (usize, usize)) -> Result<ProfileReport> {
        let mut report = ProfileReport { rows: Vec::new(), input_hw };
        self.profile("", Shape::new(1, self.config.in_channels, input_hw.0, input_hw.1), &mut report)?;
        Ok(report)
    }

    fn stage_name(i: usize) -> String {
        format!("stage{}", i + 1)
    }

    fn block_name(i: usize, j: usize) -> String {
        format!("stage{}.block{}", i + 1, j + 1)
    }

    /// Every base-kernel bank, named by its layer.
    pub fn banks(&self) -> Vec<(String, &dyn HasBank<T>)> {
        let mut out = Vec::new();
        for (i, st) in self.stages.iter().enumerate() {
            if let Some(DownsampleFilter::Learned(f)) = &st.down {
                if let Some(b) = f.bank() {
                    out.push((join(&Self::stage_name(i), "down"), b));
                }
            }
            for (j, blk) in st.blocks.iter().enumerate() {
                if let Some(b) = blk.filter.bank() {
                    out.push((join(&Self::block_name(i, j), "filter"), b));
                }
            }
        }
        out
    }

    pub fn banks_mut(&mut self) -> Vec<(String, &mut dyn HasBank<T>)> {
        let mut out = Vec::new();
        for (i, st) in self.stages.iter_mut().enumerate() {
            if let Some(DownsampleFilter::Learned(f)) = &mut st.down {
                if let Some(b) = f.bank_mut() {
                    out.push((join(&Self::stage_name(i), "down"), b));
                }
            }
            for (j, blk) in st.blocks.iter_mut().enumerate() {
                if let Some(b) = blk.filter.bank_mut() {
                    out.push((join(&Self::block_name(i, j), "filter"), b));
                }
            }
        }
        out
    }

    /// Depthwise and downsampling kernels as `(name, side, taps)`, one per head.
    pub fn spatial_kernels(&mut self) -> Result<Vec<(String, usize, Vec<f64>)>> {
        let mut out = Vec::new();
        for (i, st) in self.stages.iter_mut().enumerate() {
            if let Some(d) = &st.down {
                for (h, (side, k)) in d.kernels().into_iter().enumerate() {
                    out.push((format!("{}.down.head{h}", Self::stage_name(i)), side, k));
                }
            }
            for (j, blk) in st.blocks.iter_mut().enumerate() {
                let name = join(&Self::block_name(i, j), "filter");
                match &mut blk.filter {
                    SpatialFilter::MhDw(d) => {
                        for h in 0..d.heads() {
                            out.push((format!("{name}.head{h}"), d.size(), d.kernel(h).iter().map(|v| v.as_f64()).collect()));
                        }
                    }
                    SpatialFilter::Da(d) => {
                        let g = d.net.spec.size;
                        let k = d.net.kernel()?;
                        for (h, taps) in k.data().chunks(g * g).enumerate() {
                            out.push((format!("{name}.head{h}"), g, taps.iter().map(|v| v.as_f64()).collect()));
                        }
                    }
                    _ => {}
                }
            }
        }
        Ok(out)
    }
}

impl<T: Scalar> Module<T> for Backbone<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let s = x.shape();
        ensure!(
            s.c == self.config.in_channels,
            "model expects {} input channels, got {}",
            self.config.in_channels,
            s.c
        );
        let mut y = self.stem.forward(x, mode)?;
        for st in &mut self.stages {
            if let Some(d) = &mut st.down {
                y = d.forward(&y, mode)?;
            }
            for b in &mut st.blocks {
                y = b.forward(&y, mode)?;
            }
        }
        self.pooled = Some(y.shape());
        let p = global_avg_pool(&y);
        self.fc.forward(&p, mode)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.pooled.ok_or_else(|| config_err!("model backward called before forward"))?;
        let g = self.fc.backward(grad)?;
        let mut g = global_avg_pool_backward(&g, shape)?;
        for st in self.stages.iter_mut().rev() {
            for b in st.blocks.iter_mut().rev() {
                g = b.backward(&g)?;
            }
            if let Some(d) = &mut st.down {
                g = d.backward(&g)?;
            }
        }
        self.stem.backward(&g)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, st) in self.stages.iter().enumerate() {
            if let Some(d) = &st.down {
                d.visit(&join(prefix, &join(&Self::stage_name(i), "down")), f);
            }
            for (j, b) in st.blocks.iter().enumerate() {
                b.visit(&join(prefix, &Self::block_name(i, j)), f);
            }
        }
        self.fc.visit(&join(prefix, "fc"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (i, st) in self.stages.iter_mut().enumerate() {
            if let Some(d) = &mut st.down {
                d.visit_mut(&join(prefix, &join(&Self::stage_name(i), "down")), f);
            }
            for (j, b) in st.blocks.iter_mut().enumerate() {
                b.visit_mut(&join(prefix, &Self::block_name(i, j)), f);
            }
        }
        self.fc.visit_mut(&join(prefix, "fc"), f);
    }

    fn profile(&self, name: &str, input: Shape, report: &mut ProfileReport) -> Result<Shape> {
        let mut s = self.stem.profile(&join(name, "stem"), input, report)?;
        for (i, st) in self.stages.iter().enumerate() {
            if let Some(d) = &st.down {
                s = d.profile(&join(name, &join(&Self::stage_name(i), "down")), s, report)?;
            }
            for (j, b) in st.blocks.iter().enumerate() {
                s = b.profile(&join(name, &Self::block_name(i, j)), s, report)?;
            }
        }
        self.fc.profile(&join(name, "fc"), Shape::new(s.n, s.c, 1, 1), report)
    }
}
