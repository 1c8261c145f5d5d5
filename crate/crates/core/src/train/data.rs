//! Image datasets, batching and augmentation.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{ensure, Error, Result};
use crate::nn::Rng;
use crate::tensor::{Scalar, Shape, Tensor};

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    /// Records of one label byte followed by 3×32×32 channel-major pixel bytes.
    CifarBinary { train: PathBuf, val: PathBuf },
    Synthetic(SyntheticParams),
}

/// Class prototypes are random blocky patterns; samples add Gaussian noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticParams {
    pub classes: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub channels: usize,
    pub hw: (usize, usize),
    /// Side of the square blocks prototypes are built from.
    pub block: usize,
    pub noise: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            classes: 4,
            train_samples: 512,
            val_samples: 128,
            channels: 3,
            hw: (32, 32),
            block: 8,
            noise: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub hw: (usize, usize),
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<f32>, labels: Vec<usize>, channels: usize, hw: (usize, usize), classes: usize) -> Result<Self> {
        let per = channels * hw.0 * hw.1;
        ensure!(images.len() == labels.len() * per, "{} pixels do not form {} images of {}", images.len(), labels.len(), per);
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(crate::error::config_err!("label {} outside [0, {})", bad, classes));
        }
        Ok(Dataset { images, labels, channels, hw, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.hw.0 * self.hw.1
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.image_len();
        &self.images[i * per..(i + 1) * per]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().flat_map(|&i| self.image(i).iter().copied()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            channels: self.channels,
            hw: self.hw,
            classes: self.classes,
        }
    }

    /// Train and validation sets drawn from the same prototypes.
    pub fn synthetic(p: &SyntheticParams, seed: u64) -> Result<(Dataset, Dataset)> {
        ensure!(p.classes >= 1 && p.channels >= 1 && p.block >= 1, "synthetic data needs classes, channels and block size");
        let mut rng = Rng::seed_from_u64(seed);
        let (h, w) = p.hw;
        let (bh, bw) = (h.div_ceil(p.block), w.div_ceil(p.block));
        let protos: Vec<Vec<f32>> = (0..p.classes)
            .map(|_| {
                let cells: Vec<f32> = (0..p.channels * bh * bw).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
                let mut img = Vec::with_capacity(p.channels * h * w);
                for c in 0..p.channels {
                    for y in 0..h {
                        for x in 0..w {
                            img.push(cells[(c * bh + y / p.block) * bw + x / p.block]);
                        }
                    }
                }
                img
            })
            .collect();
        let mut draw = |count: usize| -> Result<Dataset> {
            let mut labels: Vec<usize> = (0..count).map(|i| i % p.classes).collect();
            labels.shuffle(&mut rng);
            let mut images = Vec::with_capacity(count * p.channels * h * w);
            for &l in &labels {
                for &v in &protos[l] {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    images.push(v + (p.noise * n) as f32);
                }
            }
            Dataset::new(images, labels, p.channels, p.hw, p.classes)
        };
        let train = draw(p.train_samples)?;
        let val = draw(p.val_samples)?;
        Ok((train, val))
    }

    /// Reads CIFAR-style binary records; pixels are scaled to `[0, 1]`.
    pub fn load_cifar(path: &Path, classes: usize) -> Result<Dataset> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        ensure!(
            !bytes.is_empty() && bytes.len() % CIFAR_RECORD == 0,
            "{}: size {} is not a multiple of the {}-byte record",
            path.display(),
            bytes.len(),
            CIFAR_RECORD
        );
        let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
        let mut images = Vec::with_capacity(bytes.len());
        for rec in bytes.chunks(CIFAR_RECORD) {
            labels.push(rec[0] as usize);
            images.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
        }
        Dataset::new(images, labels, 3, (32, 32), classes)
    }

    pub fn load(source: &DatasetSource, classes: usize, seed: u64) -> Result<(Dataset, Dataset)> {
        match source {
            DatasetSource::Synthetic(p) => Dataset::synthetic(p, seed),
            DatasetSource::CifarBinary { train, val } => Ok((Self::load_cifar(train, classes)?, Self::load_cifar(val, classes)?)),
        }
    }
}

/// Training-time augmentation plus the per-channel normalization applied to every batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Augment {
    pub crop_pad: usize,
    pub hflip: bool,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Default for Augment {
    fn default() -> Self {
        Augment { crop_pad: 4, hflip: true, mean: vec![0.0], std: vec![1.0] }
    }
}

impl Augment {
    fn channel_stat(v: &[f64], c: usize, default: f64) -> f64 {
        match v.len() {
            0 => default,
            1 => v[0],
            _ => v[c],
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        for (name, v) in [("mean", &self.mean), ("std", &self.std)] {
            ensure!(v.len() <= 1 || v.len() == channels, "normalization {} has {} values for {} channels", name, v.len(), channels);
        }
        ensure!(self.std.iter().all(|&s| s > 0.0), "normalization std must be positive");
        Ok(())
    }
}

/// Zero-pads by `pad`, crops back at offset `(dy, dx)` and optionally mirrors one `c×h×w` image.
pub fn crop_flip(img: &[f32], c: usize, hw: (usize, usize), pad: usize, dy: usize, dx: usize, flip: bool) -> Vec<f32> {
    let (h, w) = hw;
    let mut out = vec![0.0; img.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let xx = if flip { w - 1 - x } else { x };
                let sx = (xx + dx) as isize - pad as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(ch * h + y) * w + x] = img[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

/// Gathers `indices` into a normalized batch, augmenting when `rng` is given.
pub fn make_batch<T: Scalar>(ds: &Dataset, indices: &[usize], aug: &Augment, mut rng: Option<&mut Rng>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (h, w) = ds.hw;
    let c = ds.channels;
    let mut data = Vec::with_capacity(indices.len() * ds.image_len());
    for &i in indices {
        let img = match rng.as_deref_mut() {
            Some(r) => {
                let dy = r.random_range(0..=2 * aug.crop_pad);
                let dx = r.random_range(0..=2 * aug.crop_pad);
                let flip = aug.hflip && r.random_bool(0.5);
                crop_flip(ds.image(i), c, ds.hw, aug.crop_pad, dy, dx, flip)
            }
            None => ds.image(i).to_vec(),
        };
        for ch in 0..c {
            let m = Augment::channel_stat(&aug.mean, ch, 0.0);
            let s = Augment::channel_stat(&aug.std, ch, 1.0);
            data.extend(img[ch * h * w..(ch + 1) * h * w].iter().map(|&v| T::of((v as f64 - m) / s)));
        }
    }
    let x = Tensor::from_vec(Shape::new(indices.len(), c, h, w), data)?;
    Ok((x, indices.iter().map(|&i| ds.labels[i]).collect()))
}
