use std::fmt;
use std::str::FromStr;

use crate::error::{config_err, ensure, Error, Result};

/// Where a bottleneck backbone places its stride-2 subsampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Stride in the first 1×1 convolution.
    Original,
    /// Stride in the spatial filter.
    B,
    /// B plus 2×2 average pooling before the strided skip projection.
    D,
    /// Original stride placement with a low-pass filter before each subsampling stage.
    E,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stem {
    /// 7×7 stride-2 convolution then 3×3 max pooling.
    Classic,
    /// Three 3×3 convolutions (first strided) then 3×3 max pooling.
    Deep,
    /// The deep stem without the max pooling.
    DeepNoMaxPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpatialFilterKind {
    Conv3x3,
    MhDwConv,
    Cada,
    CadaSp,
    Da,
    DaSp,
}

impl SpatialFilterKind {
    pub fn uses_bank(self) -> bool {
        !matches!(self, SpatialFilterKind::Conv3x3 | SpatialFilterKind::MhDwConv)
    }

    /// BN+ReLU before a 3×3 convolution, nothing before depthwise or attention filters.
    pub fn default_norm_act(self) -> NormAct {
        match self {
            SpatialFilterKind::Conv3x3 => NormAct::BnRelu,
            _ => NormAct::None,
        }
    }
}

/// What sits between the first 1×1 convolution and the spatial filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormAct {
    None,
    Bn,
    Relu,
    BnRelu,
}

impl NormAct {
    pub fn has_bn(self) -> bool {
        matches!(self, NormAct::Bn | NormAct::BnRelu)
    }
    pub fn has_relu(self) -> bool {
        matches!(self, NormAct::Relu | NormAct::BnRelu)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DownsamplingFilterKind {
    None,
    Ideal,
    Box,
    Binomial3,
    AvgPool(usize),
    /// Trainable multi-head depthwise `k×k`, initialized to the binomial kernel.
    DwConv { k: usize, c_h: usize },
    /// Shared-accumulation attention filter; `c_h: None` means a single head.
    CadaSp { k: usize, t: usize, b: usize, c_h: Option<usize> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageConfig {
    pub blocks: usize,
    /// Channels of the bottleneck's spatial path.
    pub width: usize,
    pub stride: usize,
    pub filter: SpatialFilterKind,
    /// Base kernels per head.
    pub b: usize,
    /// Channels per head.
    pub c_h: usize,
    /// CA kernel side.
    pub t: usize,
    /// Aggregation (or depthwise) kernel side.
    pub g: usize,
    pub norm_act: NormAct,
    pub pos: bool,
    pub downsample: DownsamplingFilterKind,
}

impl StageConfig {
    pub fn new(blocks: usize, width: usize, stride: usize, filter: SpatialFilterKind) -> Self {
        StageConfig {
            blocks,
            width,
            stride,
            filter,
            b: 4,
            c_h: 8,
            t: 3,
            g: 7,
            norm_act: filter.default_norm_act(),
            pos: true,
            downsample: DownsamplingFilterKind::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub variant: Variant,
    pub stem: Stem,
    /// Width of the deep stem's first convolutions; the stem outputs twice this.
    pub stem_width: usize,
    pub expansion: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub input_hw: (usize, usize),
    pub stages: Vec<StageConfig>,
}

impl BackboneConfig {
    /// ResNet-50 layout (3,4,6,3 blocks, widths 64..512) with `filter` in every bottleneck.
    pub fn resnet50(variant: Variant, stem: Stem, filter: SpatialFilterKind) -> Self {
        let stages = [(3, 64, 1), (4, 128, 2), (6, 256, 2), (3, 512, 2)]
            .into_iter()
            .map(|(blocks, width, stride)| StageConfig::new(blocks, width, stride, filter))
            .collect();
        BackboneConfig {
            variant,
            stem,
            stem_width: 32,
            expansion: 4,
            in_channels: 3,
            num_classes: 1000,
            input_hw: (224, 224),
            stages,
        }
    }

    /// Small four-stage network for 32×32 inputs.
    pub fn toy(filter: SpatialFilterKind) -> Self {
        let stages = [(1, 16, 1), (1, 32, 2), (1, 64, 2), (1, 128, 2)]
            .into_iter()
            .map(|(blocks, width, stride)| {
                let mut s = StageConfig::new(blocks, width, stride, filter);
                s.g = 3;
                s
            })
            .collect();
        BackboneConfig {
            variant: Variant::D,
            stem: Stem::Deep,
            stem_width: 8,
            expansion: 4,
            in_channels: 3,
            num_classes: 4,
            input_hw: (32, 32),
            stages,
        }
    }

    pub fn stem_channels(&self) -> usize {
        2 * self.stem_width
    }

    /// Channels entering each stage.
    pub fn stage_inputs(&self) -> Vec<usize> {
        let mut c = self.stem_channels();
        self.stages
            .iter()
            .map(|s| {
                let cin = c;
                c = s.width * self.expansion;
                cin
            })
            .collect()
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(self.stem_channels(), |s| s.width * self.expansion)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.stages.is_empty(), "at least one stage is required");
        ensure!(self.stem_width >= 1 && self.expansion >= 1, "stem width and expansion must be positive");
        ensure!(self.in_channels >= 1 && self.num_classes >= 1, "input channels and classes must be positive");
        ensure!(self.input_hw.0 >= 1 && self.input_hw.1 >= 1, "input size must be positive");
        for (i, (s, cin)) in self.stages.iter().zip(self.stage_inputs()).enumerate() {
            let stage = i + 1;
            ensure!(s.blocks >= 1 && s.width >= 1, "stage {stage}: blocks and width must be positive");
            ensure!(s.stride == 1 || s.stride == 2, "stage {stage}: stride {} must be 1 or 2", s.stride);
            if s.filter != SpatialFilterKind::Conv3x3 {
                ensure!(s.g % 2 == 1, "stage {stage}: aggregation kernel G={} must be odd", s.g);
                ensure!(s.c_h >= 1 && s.width % s.c_h == 0, "stage {stage}: C_h={} must divide width {}", s.c_h, s.width);
            }
            if s.filter.uses_bank() {
                ensure!(s.t % 2 == 1, "stage {stage}: CA kernel T={} must be odd", s.t);
                ensure!(s.b >= 1, "stage {stage}: b must be at least 1");
            }
            let has_down = s.downsample != DownsamplingFilterKind::None;
            if self.variant == Variant::E {
                if s.stride == 2 {
                    ensure!(has_down, "stage {stage}: variant E requires a downsampling filter before stride-2 subsampling");
                } else {
                    ensure!(!has_down, "stage {stage}: variant E places downsampling filters only on stride-2 stages");
                }
            } else {
                ensure!(!has_down, "stage {stage}: downsampling filters require variant E (got {})", self.variant);
            }
            match s.downsample {
                DownsamplingFilterKind::AvgPool(k) => {
                    ensure!(matches!(k, 2 | 3 | 5), "stage {stage}: average-pool downsampling size {k} must be 2, 3 or 5")
                }
                DownsamplingFilterKind::DwConv { k, c_h } => {
                    ensure!(k % 2 == 1, "stage {stage}: downsampling kernel size {k} must be odd");
                    ensure!(c_h >= 1 && cin % c_h == 0, "stage {stage}: downsampling C_h={c_h} must divide {cin} channels");
                }
                DownsamplingFilterKind::CadaSp { k, t, b, c_h } => {
                    ensure!(k % 2 == 1 && t % 2 == 1, "stage {stage}: downsampling kernel sizes must be odd");
                    ensure!(b >= 1, "stage {stage}: downsampling b must be at least 1");
                    if let Some(c) = c_h {
                        ensure!(c >= 1 && cin % c == 0, "stage {stage}: downsampling C_h={c} must divide {cin} channels");
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn parse_err(msg: String) -> Error {
    Error::Config(msg)
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Original => "original",
            Variant::B => "b",
            Variant::D => "d",
            Variant::E => "e",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "original" | "a" => Variant::Original,
            "b" => Variant::B,
            "d" => Variant::D,
            "e" => Variant::E,
            _ => return Err(parse_err(format!("unknown variant `{s}` (original, b, d, e)"))),
        })
    }
}

impl fmt::Display for Stem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stem::Classic => "classic",
            Stem::Deep => "deep",
            Stem::DeepNoMaxPool => "deep-nomaxpool",
        })
    }
}

impl FromStr for Stem {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "classic" => Stem::Classic,
            "deep" => Stem::Deep,
            "deep-nomaxpool" => Stem::DeepNoMaxPool,
            _ => return Err(parse_err(format!("unknown stem `{s}` (classic, deep, deep-nomaxpool)"))),
        })
    }
}

impl fmt::Display for SpatialFilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpatialFilterKind::Conv3x3 => "conv3x3",
            SpatialFilterKind::MhDwConv => "mhdw",
            SpatialFilterKind::Cada => "cada",
            SpatialFilterKind::CadaSp => "cadasp",
            SpatialFilterKind::Da => "da",
            SpatialFilterKind::DaSp => "dasp",
        })
    }
}

impl FromStr for SpatialFilterKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "conv3x3" | "conv" => SpatialFilterKind::Conv3x3,
            "mhdw" | "dw" => SpatialFilterKind::MhDwConv,
            "cada" => SpatialFilterKind::Cada,
            "cadasp" => SpatialFilterKind::CadaSp,
            "da" => SpatialFilterKind::Da,
            "dasp" => SpatialFilterKind::DaSp,
            _ => return Err(parse_err(format!("unknown spatial filter `{s}` (conv3x3, mhdw, cada, cadasp, da, dasp)"))),
        })
    }
}

impl fmt::Display for NormAct {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormAct::None => "none",
            NormAct::Bn => "bn",
            NormAct::Relu => "relu",
            NormAct::BnRelu => "bn+relu",
        })
    }
}

impl FromStr for NormAct {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => NormAct::None,
            "bn" => NormAct::Bn,
            "relu" => NormAct::Relu,
            "bn+relu" => NormAct::BnRelu,
            _ => return Err(parse_err(format!("unknown norm_act `{s}` (none, bn, relu, bn+relu)"))),
        })
    }
}

impl fmt::Display for DownsamplingFilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DownsamplingFilterKind::None => f.write_str("none"),
            DownsamplingFilterKind::Ideal => f.write_str("ideal"),
            DownsamplingFilterKind::Box => f.write_str("box"),
            DownsamplingFilterKind::Binomial3 => f.write_str("binomial3"),
            DownsamplingFilterKind::AvgPool(k) => write!(f, "avgpool:{k}"),
            DownsamplingFilterKind::DwConv { k, c_h } => write!(f, "dwconv:{k}:{c_h}"),
            DownsamplingFilterKind::CadaSp { k, t, b, c_h } => match c_h {
                Some(c) => write!(f, "cadasp:{k}:{t}:{b}:{c}"),
                None => write!(f, "cadasp:{k}:{t}:{b}:all"),
            },
        }
    }
}

impl FromStr for DownsamplingFilterKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |i: usize| -> Result<usize> {
            parts
                .get(i)
                .ok_or_else(|| config_err!("downsampling filter `{s}` is missing argument {i}"))?
                .parse::<usize>()
                .map_err(|e| config_err!("downsampling filter `{s}`: {e}"))
        };
        let arity = |n: usize| -> Result<()> {
            ensure!(parts.len() == n, "downsampling filter `{}` takes {} arguments", s, n - 1);
            Ok(())
        };
        let kind = match parts[0] {
            "none" => DownsamplingFilterKind::None,
            "ideal" => DownsamplingFilterKind::Ideal,
            "box" => DownsamplingFilterKind::Box,
            "binomial3" => DownsamplingFilterKind::Binomial3,
            "avgpool" => {
                arity(2)?;
                DownsamplingFilterKind::AvgPool(num(1)?)
            }
            "dwconv" => {
                arity(3)?;
                DownsamplingFilterKind::DwConv { k: num(1)?, c_h: num(2)? }
            }
            "cadasp" => {
                arity(5)?;
                let c_h = if parts[4] == "all" { None } else { Some(num(4)?) };
                DownsamplingFilterKind::CadaSp { k: num(1)?, t: num(2)?, b: num(3)?, c_h }
            }
            _ => {
                return Err(parse_err(format!(
                    "unknown downsampling filter `{s}` (none, ideal, box, binomial3, avgpool:K, dwconv:K:CH, cadasp:K:T:B:CH)"
                )))
            }
        };
        if matches!(parts[0], "none" | "ideal" | "box" | "binomial3") {
            arity(1)?;
        }
        Ok(kind)
    }
}
