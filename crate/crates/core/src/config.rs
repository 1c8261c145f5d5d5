//! Flat `section.key = value` experiment files.
//!
//! `#` starts a comment. Stage keys take a comma-separated list with one value
//! per stage, or a single value applied to every stage; `stages.blocks`
//! decides the stage count. Unknown keys are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::{BackboneConfig, DownsamplingFilterKind, NormAct, SpatialFilterKind, StageConfig, Stem, Variant};
use crate::error::{Error, Result};
use crate::train::{DatasetSource, SyntheticParams, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    Synthetic,
    Cifar,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub kind: DataKind,
    pub train_path: PathBuf,
    pub val_path: PathBuf,
    pub train_samples: usize,
    pub val_samples: usize,
    pub block: usize,
    pub noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SyntheticParams::default();
        DataConfig {
            kind: DataKind::Synthetic,
            train_path: PathBuf::from("data/train.bin"),
            val_path: PathBuf::from("data/val.bin"),
            train_samples: s.train_samples,
            val_samples: s.val_samples,
            block: s.block,
            noise: s.noise,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisConfig {
    /// Allowed top-1 accuracy drop when pruning, as a fraction.
    pub tolerance: f64,
    /// Spectrum grid side.
    pub grid: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig { tolerance: 0.001, grid: 32 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: BackboneConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub analysis: AnalysisConfig,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: BackboneConfig::resnet50(Variant::D, Stem::Deep, SpatialFilterKind::Conv3x3),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            analysis: AnalysisConfig::default(),
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn dataset_source(&self) -> DatasetSource {
        match self.data.kind {
            DataKind::Cifar => DatasetSource::CifarBinary {
                train: self.data.train_path.clone(),
                val: self.data.val_path.clone(),
            },
            DataKind::Synthetic => DatasetSource::Synthetic(SyntheticParams {
                classes: self.model.num_classes,
                train_samples: self.data.train_samples,
                val_samples: self.data.val_samples,
                channels: self.model.in_channels,
                hw: self.model.input_hw,
                block: self.data.block,
                noise: self.data.noise,
            }),
        }
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut p = Parser::new();
        p.feed(text, origin)?;
        p.finish()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses `text` and then applies `key=value` overrides.
    pub fn parse_with_overrides(text: &str, origin: &str, overrides: &[String]) -> Result<Self> {
        let mut p = Parser::new();
        p.feed(text, origin)?;
        for (i, o) in overrides.iter().enumerate() {
            p.line("override", i + 1, o)?;
        }
        p.finish()
    }

    /// Fully resolved configuration; parses back to an equal value.
    pub fn to_text(&self) -> String {
        let mut s = model_to_text(&self.model);
        let t = &self.train;
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let _ = writeln!(s, "train.lr = {}", t.base_lr);
        let _ = writeln!(s, "train.momentum = {}", t.momentum);
        let _ = writeln!(s, "train.weight_decay = {}", t.weight_decay);
        let _ = writeln!(s, "train.decay_norm_bias = {}", t.decay_norm_bias);
        let _ = writeln!(s, "train.epochs = {}", t.epochs);
        let _ = writeln!(s, "train.batch_size = {}", t.batch_size);
        let _ = writeln!(s, "train.crop_pad = {}", t.augment.crop_pad);
        let _ = writeln!(s, "train.hflip = {}", t.augment.hflip);
        let _ = writeln!(s, "train.mean = {}", list(&t.augment.mean));
        let _ = writeln!(s, "train.std = {}", list(&t.augment.std));
        let d = &self.data;
        let kind = match d.kind {
            DataKind::Synthetic => "synthetic",
            DataKind::Cifar => "cifar",
        };
        let _ = writeln!(s, "data.kind = {kind}");
        let _ = writeln!(s, "data.train_path = {}", d.train_path.display());
        let _ = writeln!(s, "data.val_path = {}", d.val_path.display());
        let _ = writeln!(s, "data.train_samples = {}", d.train_samples);
        let _ = writeln!(s, "data.val_samples = {}", d.val_samples);
        let _ = writeln!(s, "data.block = {}", d.block);
        let _ = writeln!(s, "data.noise = {}", d.noise);
        let _ = writeln!(s, "analysis.tolerance = {}", self.analysis.tolerance);
        let _ = writeln!(s, "analysis.grid = {}", self.analysis.grid);
        let _ = writeln!(s, "run.seed = {}", t.seed);
        let _ = writeln!(s, "run.out_dir = {}", self.out_dir.display());
        s
    }
}

/// The `model.*` and `stages.*` lines describing `cfg`.
pub fn model_to_text(cfg: &BackboneConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "model.variant = {}", cfg.variant);
    let _ = writeln!(s, "model.stem = {}", cfg.stem);
    let _ = writeln!(s, "model.stem_width = {}", cfg.stem_width);
    let _ = writeln!(s, "model.expansion = {}", cfg.expansion);
    let _ = writeln!(s, "model.in_channels = {}", cfg.in_channels);
    let _ = writeln!(s, "model.num_classes = {}", cfg.num_classes);
    let _ = writeln!(s, "model.input_hw = {},{}", cfg.input_hw.0, cfg.input_hw.1);
    let col = |f: &dyn Fn(&StageConfig) -> String| cfg.stages.iter().map(f).collect::<Vec<_>>().join(",");
    let _ = writeln!(s, "stages.blocks = {}", col(&|st| st.blocks.to_string()));
    let _ = writeln!(s, "stages.width = {}", col(&|st| st.width.to_string()));
    let _ = writeln!(s, "stages.stride = {}", col(&|st| st.stride.to_string()));
    let _ = writeln!(s, "stages.filter = {}", col(&|st| st.filter.to_string()));
    let _ = writeln!(s, "stages.b = {}", col(&|st| st.b.to_string()));
    let _ = writeln!(s, "stages.ch = {}", col(&|st| st.c_h.to_string()));
    let _ = writeln!(s, "stages.t = {}", col(&|st| st.t.to_string()));
    let _ = writeln!(s, "stages.g = {}", col(&|st| st.g.to_string()));
    let _ = writeln!(s, "stages.norm_act = {}", col(&|st| st.norm_act.to_string()));
    let _ = writeln!(s, "stages.pos = {}", col(&|st| st.pos.to_string()));
    let _ = writeln!(s, "stages.downsample = {}", col(&|st| st.downsample.to_string()));
    s
}

/// Parses text containing only model and stage keys.
pub fn parse_model_text(text: &str) -> Result<BackboneConfig> {
    Ok(ExperimentConfig::parse(text, "checkpoint")?.model)
}

const STAGE_KEYS: [&str; 11] = ["blocks", "width", "stride", "filter", "b", "ch", "t", "g", "norm_act", "pos", "downsample"];

struct Located {
    values: Vec<String>,
    origin: String,
    line: usize,
}

struct Parser {
    cfg: ExperimentConfig,
    stages: Vec<(&'static str, Located)>,
}

fn err(origin: &str, line: usize, key: &str, msg: impl Into<String>) -> Error {
    Error::Parse {
        origin: origin.to_string(),
        line,
        key: key.to_string(),
        msg: msg.into(),
    }
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn parse_num<X: FromStr>(v: &str) -> std::result::Result<X, String>
where
    X::Err: std::fmt::Display,
{
    v.parse::<X>().map_err(|e| format!("`{v}`: {e}"))
}

fn parse_list(v: &str) -> Vec<String> {
    v.split(',').map(|s| s.trim().to_string()).collect()
}

impl Parser {
    fn new() -> Self {
        Parser { cfg: ExperimentConfig::default(), stages: Vec::new() }
    }

    fn feed(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if !line.is_empty() {
                self.line(origin, i + 1, line)?;
            }
        }
        Ok(())
    }

    fn line(&mut self, origin: &str, line: usize, text: &str) -> Result<()> {
        let Some((key, value)) = text.split_once('=') else {
            return Err(err(origin, line, text.trim(), "expected `key = value`"));
        };
        let (key, value) = (key.trim(), value.trim());
        self.set(key, value).map_err(|msg| err(origin, line, key, msg))?;
        if let Some(stage_key) = key.strip_prefix("stages.") {
            let name = STAGE_KEYS.iter().find(|k| **k == stage_key).copied().expect("validated by set");
            self.stages.retain(|(k, _)| *k != name);
            self.stages.push((name, Located { values: parse_list(value), origin: origin.to_string(), line }));
        }
        Ok(())
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let m = &mut self.cfg.model;
        let t = &mut self.cfg.train;
        let d = &mut self.cfg.data;
        match key {
            "model.variant" => m.variant = v.parse().map_err(|e: Error| e.to_string())?,
            "model.stem" => m.stem = v.parse().map_err(|e: Error| e.to_string())?,
            "model.stem_width" => m.stem_width = parse_num(v)?,
            "model.expansion" => m.expansion = parse_num(v)?,
            "model.in_channels" => m.in_channels = parse_num(v)?,
            "model.num_classes" => m.num_classes = parse_num(v)?,
            "model.input_hw" => {
                let parts = parse_list(v);
                m.input_hw = match parts.as_slice() {
                    [s] => (parse_num(s)?, parse_num(s)?),
                    [h, w] => (parse_num(h)?, parse_num(w)?),
                    _ => return Err(format!("expected `H` or `H,W`, got `{v}`")),
                };
            }
            "train.lr" => t.base_lr = parse_num(v)?,
            "train.momentum" => t.momentum = parse_num(v)?,
            "train.weight_decay" => t.weight_decay = parse_num(v)?,
            "train.decay_norm_bias" => t.decay_norm_bias = parse_bool(v)?,
            "train.epochs" => t.epochs = parse_num(v)?,
            "train.batch_size" => t.batch_size = parse_num(v)?,
            "train.crop_pad" => t.augment.crop_pad = parse_num(v)?,
            "train.hflip" => t.augment.hflip = parse_bool(v)?,
            "train.mean" => t.augment.mean = parse_list(v).iter().map(|x| parse_num(x)).collect::<std::result::Result<_, _>>()?,
            "train.std" => t.augment.std = parse_list(v).iter().map(|x| parse_num(x)).collect::<std::result::Result<_, _>>()?,
            "data.kind" => {
                d.kind = match v {
                    "synthetic" => DataKind::Synthetic,
                    "cifar" => DataKind::Cifar,
                    _ => return Err(format!("unknown data kind `{v}` (synthetic, cifar)")),
                }
            }
            "data.train_path" => d.train_path = PathBuf::from(v),
            "data.val_path" => d.val_path = PathBuf::from(v),
            "data.train_samples" => d.train_samples = parse_num(v)?,
            "data.val_samples" => d.val_samples = parse_num(v)?,
            "data.block" => d.block = parse_num(v)?,
            "data.noise" => d.noise = parse_num(v)?,
            "analysis.tolerance" => self.cfg.analysis.tolerance = parse_num(v)?,
            "analysis.grid" => self.cfg.analysis.grid = parse_num(v)?,
            "run.seed" => t.seed = parse_num(v)?,
            "run.out_dir" => self.cfg.out_dir = PathBuf::from(v),
            _ => match key.strip_prefix("stages.") {
                Some(k) if STAGE_KEYS.contains(&k) => {}
                _ => return Err("unknown key".to_string()),
            },
        }
        Ok(())
    }

    fn finish(mut self) -> Result<ExperimentConfig> {
        let find = |name: &str| self.stages.iter().find(|(k, _)| *k == name).map(|(_, l)| l);
        let count = find("blocks").map_or(self.cfg.model.stages.len(), |l| l.values.len());
        let base = self.cfg.model.stages.clone();
        let mut stages: Vec<StageConfig> = (0..count)
            .map(|i| base.get(i).or(base.last()).cloned().expect("default config has stages"))
            .collect();
        for name in STAGE_KEYS {
            let Some(loc) = find(name) else { continue };
            if loc.values.len() != 1 && loc.values.len() != count {
                return Err(err(
                    &loc.origin,
                    loc.line,
                    &format!("stages.{name}"),
                    format!("has {} values for {} stages", loc.values.len(), count),
                ));
            }
            for (i, st) in stages.iter_mut().enumerate() {
                let v = if loc.values.len() == 1 { &loc.values[0] } else { &loc.values[i] };
                let fail = |msg: String| err(&loc.origin, loc.line, &format!("stages.{name}"), format!("stage {}: {msg}", i + 1));
                let e2s = |e: Error| e.to_string();
                match name {
                    "blocks" => st.blocks = parse_num(v).map_err(fail)?,
                    "width" => st.width = parse_num(v).map_err(fail)?,
                    "stride" => st.stride = parse_num(v).map_err(fail)?,
                    "filter" => {
                        st.filter = v.parse::<SpatialFilterKind>().map_err(e2s).map_err(fail)?;
                        st.norm_act = st.filter.default_norm_act();
                    }
                    "b" => st.b = parse_num(v).map_err(fail)?,
                    "ch" => st.c_h = parse_num(v).map_err(fail)?,
                    "t" => st.t = parse_num(v).map_err(fail)?,
                    "g" => st.g = parse_num(v).map_err(fail)?,
                    "norm_act" => {
                        st.norm_act = if v == "auto" {
                            st.filter.default_norm_act()
                        } else {
                            v.parse::<NormAct>().map_err(e2s).map_err(fail)?
                        };
                    }
                    "pos" => st.pos = parse_bool(v).map_err(fail)?,
                    "downsample" => st.downsample = v.parse::<DownsamplingFilterKind>().map_err(e2s).map_err(fail)?,
                    _ => unreachable!("stage keys are fixed"),
                }
            }
        }
        self.cfg.model.stages = stages;
        self.cfg.model.validate()?;
        self.cfg.train.validate()?;
        Ok(self.cfg)
    }
}
