//! Region-wise style-modulated texturing: a mapping network, modulated and
//! demodulated convolutions applied per semantic class, SPADE fusion, a
//! two-style spatial blend and a small generator assembled from them.

pub mod checks;
mod generator;
pub mod layers;

pub use generator::{
    generate_image, load_generator, overfit_single, psnr, save_generator, GenBlock, Generator, OverfitConfig,
    OverfitResult, SegEncoder, NUM_BLOCKS,
};
pub use layers::{
    mixed_style_conv, mod_demod, modulated_conv, siw_conv, spade_fuse, MappingNet, Spade, StyleConv,
};

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::segmap::{class_color, write_png, Segmap};

pub const STYLE_DIM: usize = 512;
pub const MAPPING_LAYERS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SiwConfig {
    pub classes: usize,
    /// Side of the square segmap and output image.
    pub resolution: usize,
    pub style_dim: usize,
    pub mapping_layers: usize,
    pub encoder_channels: [usize; 4],
    pub block_channels: [usize; NUM_BLOCKS],
    pub spade_hidden: usize,
}

impl Default for SiwConfig {
    fn default() -> Self {
        Self {
            classes: 6,
            resolution: 64,
            style_dim: STYLE_DIM,
            mapping_layers: MAPPING_LAYERS,
            encoder_channels: [16, 32, 64, 128],
            block_channels: [128, 64, 32, 16, 16],
            spade_hidden: 32,
        }
    }
}

impl SiwConfig {
    pub fn validate(&self) -> Result<()> {
        let stride = 1 << self.encoder_channels.len();
        if self.resolution == 0 || self.resolution % stride != 0 {
            return Err(Error::invalid(format!(
                "resolution {} must be a positive multiple of {stride}",
                self.resolution
            )));
        }
        if self.classes == 0 || self.style_dim == 0 || self.spade_hidden == 0 {
            return Err(Error::invalid("class count, style size and SPADE width must be positive"));
        }
        if self.encoder_channels.contains(&0) || self.block_channels.contains(&0) {
            return Err(Error::invalid("channel counts must be positive"));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        format!(
            "classes={}\nresolution={}\nstyle_dim={}\nmapping_layers={}\nencoder_channels={}\nblock_channels={}\nspade_hidden={}\n",
            self.classes,
            self.resolution,
            self.style_dim,
            self.mapping_layers,
            join(&self.encoder_channels),
            join(&self.block_channels),
            self.spade_hidden
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv: BTreeMap<&str, &str> = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim(), v.trim()))
            .collect();
        let field = |key: &str| kv.get(key).copied().ok_or_else(|| Error::Format(format!("generator config lacks {key}")));
        let num = |key: &str| -> Result<usize> {
            field(key)?
                .parse()
                .map_err(|_| Error::Format(format!("generator config {key} is malformed")))
        };
        let list = |key: &str| -> Result<Vec<usize>> {
            field(key)?
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| Error::Format(format!("generator config {key} is malformed"))))
                .collect()
        };
        let arr = |key: &str, v: Vec<usize>| Error::Format(format!("generator config {key} has {} entries", v.len()));
        let enc = list("encoder_channels")?;
        let blk = list("block_channels")?;
        let cfg = Self {
            classes: num("classes")?,
            resolution: num("resolution")?,
            style_dim: num("style_dim")?,
            mapping_layers: num("mapping_layers")?,
            encoder_channels: enc.clone().try_into().map_err(|v| arr("encoder_channels", v))?,
            block_channels: blk.clone().try_into().map_err(|v| arr("block_channels", v))?,
            spade_hidden: num("spade_hidden")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Class-per-pixel map viewed as a `K×H×W` one-hot stack.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OneHotSegmap {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    labels: Vec<u8>,
}

impl OneHotSegmap {
    pub fn from_segmap(s: &Segmap) -> Self {
        Self {
            classes: s.classes,
            height: s.height,
            width: s.width,
            labels: s.data.clone(),
        }
    }

    /// Builds from dense `K×H×W` values, which must be exactly one-hot.
    pub fn from_dense(classes: usize, height: usize, width: usize, values: &[f64]) -> Result<Self> {
        let hw = height * width;
        if values.len() != classes * hw {
            return Err(Error::shape("one-hot segmap", &[values.len()], &[classes, height, width]));
        }
        let mut labels = Vec::with_capacity(hw);
        for p in 0..hw {
            let mut hot = None;
            for k in 0..classes {
                match values[k * hw + p] {
                    v if v == 0.0 => {}
                    v if v == 1.0 && hot.is_none() => hot = Some(k),
                    v => {
                        return Err(Error::invalid(format!(
                            "pixel {p} is not one-hot (class {k} holds {v})"
                        )))
                    }
                }
            }
            let k = hot.ok_or_else(|| Error::invalid(format!("pixel {p} has no active class")))?;
            labels.push(k as u8);
        }
        Ok(Self {
            classes,
            height,
            width,
            labels,
        })
    }

    pub fn label(&self, row: usize, col: usize) -> usize {
        self.labels[row * self.width + col] as usize
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let hw = self.height * self.width;
        let mut data = vec![T::zero(); self.classes * hw];
        for (p, &l) in self.labels.iter().enumerate() {
            data[l as usize * hw + p] = T::one();
        }
        Tensor::new(&[1, self.classes, self.height, self.width], data).expect("one-hot shape")
    }

    /// Nearest-neighbour reduction by an integer factor.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::invalid(format!(
                "cannot reduce {}×{} by {factor}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let labels = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .map(|(y, x)| self.labels[y * factor * self.width + x * factor])
            .collect();
        Ok(Self {
            classes: self.classes,
            height: h,
            width: w,
            labels,
        })
    }

    /// Spatial `[1, 1, H, W]` map holding each pixel's class distance.
    pub fn distance_map<T: Real>(&self, per_class: &[f64]) -> Result<Tensor<T>> {
        if per_class.len() != self.classes {
            return Err(Error::shape("distance map", &[per_class.len()], &[self.classes]));
        }
        let data = self.labels.iter().map(|&l| T::lit(per_class[l as usize])).collect();
        Tensor::new(&[1, 1, self.height, self.width], data)
    }
}

/// Two style latents and the per-class distance used to blend them.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleState {
    pub z0: Vec<f64>,
    pub z1: Vec<f64>,
    /// Weight of `z0` in each class region, in [0, 1].
    pub distance: Vec<f64>,
}

impl StyleState {
    /// Both styles set to the same seeded standard-normal latent.
    pub fn tied(style_dim: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<f64> = (0..style_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self {
            z1: z.clone(),
            z0: z,
            distance: vec![1.0; classes],
        }
    }

    /// Independent seeded latents with the given per-class distances.
    pub fn mixed(style_dim: usize, seeds: (u64, u64), distance: Vec<f64>) -> Self {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..style_dim).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f64>>()
        };
        Self {
            z0: draw(seeds.0),
            z1: draw(seeds.1),
            distance,
        }
    }

    pub fn validate(&self, style_dim: usize, classes: usize) -> Result<()> {
        if self.z0.len() != style_dim || self.z1.len() != style_dim {
            return Err(Error::shape("style latent", &[self.z0.len(), self.z1.len()], &[style_dim]));
        }
        if self.z0.iter().chain(&self.z1).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("style latent".into()));
        }
        if self.distance.len() != classes {
            return Err(Error::shape("style distances", &[self.distance.len()], &[classes]));
        }
        if let Some(d) = self.distance.iter().find(|d| !(0.0..=1.0).contains(*d)) {
            return Err(Error::invalid(format!("style distance {d} outside [0, 1]")));
        }
        Ok(())
    }
}

/// Planar RGB image, `3×H×W`, nominal range [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::shape("RgbImage", &[data.len()], &[3, height, width]));
        }
        Ok(Self { height, width, data })
    }

    pub fn mse(&self, other: &RgbImage) -> Result<f64> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::shape("mse", &[self.height, self.width], &[other.height, other.width]));
        }
        let n = self.data.len() as f64;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| f64::from(a - b).powi(2))
            .sum::<f64>()
            / n)
    }

    /// Interleaved 8-bit pixels, clamped to [0, 1].
    pub fn to_rgb8(&self) -> Vec<u8> {
        let hw = self.height * self.width;
        (0..hw)
            .flat_map(|p| (0..3).map(move |c| (c, p)))
            .map(|(c, p)| (self.data[c * hw + p].clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_png(path, self.width, self.height, &self.to_rgb8())
    }
}

/// Per-class flat palette colors with a left-to-right brightness ramp.
pub fn flat_color_target(s: &Segmap) -> RgbImage {
    let hw = s.height * s.width;
    let mut data = vec![0.0f32; 3 * hw];
    for row in 0..s.height {
        for col in 0..s.width {
            let p = row * s.width + col;
            let ramp = 0.2 * col as f32 / (s.width.max(2) - 1) as f32;
            let rgb = class_color(s.get(row, col));
            for c in 0..3 {
                data[c * hw + p] = 0.8 * f32::from(rgb[c]) / 255.0 + ramp;
            }
        }
    }
    RgbImage::new(s.height, s.width, data).expect("image shape")
}

#[cfg(test)]
mod tests;
