//! Segmap encoder, style-mixing generator ladder and the single-image
//! overfitting harness.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{mixed_style_conv, Conv, MappingNet, StyleConv, LEAKY_SLOPE};
use super::{OneHotSegmap, RgbImage, SiwConfig, StyleState};
use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, Ctx, ParamStore, Real, Tensor, Trainable, Var};
use crate::trainer::checkpoint::{TensorTable, CHECKPOINT_MAGIC};

/// Stride-2 convolution stack turning a one-hot map into the generator's
/// conditional input.
#[derive(Clone, Debug)]
pub struct SegEncoder {
    pub convs: Vec<Conv>,
}

impl SegEncoder {
    pub fn new<T: Real, R: rand::Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &SiwConfig, rng: &mut R) -> Self {
        let mut cin = cfg.classes;
        let convs = cfg
            .encoder_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv::new(store, &format!("siw/enc{i}"), (cin, c, 3), 2, rng);
                // Kaiming scale for the leaky activation so features reach the
                // first normalization at unit variance.
                let gain = (3.0 * 2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
                for v in store.get_mut(conv.w).data_mut() {
                    *v = *v * T::lit(gain);
                }
                cin = c;
                conv
            })
            .collect();
        Self { convs }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, m: Var) -> Result<Var> {
        let mut h = m;
        for c in &self.convs {
            h = c.forward(ctx, h)?;
            h = ctx.tape.leaky_relu(h, T::lit(LEAKY_SLOPE));
        }
        Ok(h)
    }
}

/// One resolution of the ladder: optional ×2 upsampling, then two
/// style-mixing convolutions.
#[derive(Clone, Debug)]
pub struct GenBlock {
    pub upsample: bool,
    pub convs: [StyleConv; 2],
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub config: SiwConfig,
    pub mapping: MappingNet,
    pub encoder: SegEncoder,
    pub blocks: Vec<GenBlock>,
    pub to_rgb: Conv,
}

/// Number of style-mixing blocks; the middle three carry SPADE stages.
pub const NUM_BLOCKS: usize = 5;

impl Generator {
    pub fn new<T: Real, R: rand::Rng + ?Sized>(store: &mut ParamStore<T>, config: SiwConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mapping = MappingNet::new(store, config.style_dim, config.mapping_layers, rng);
        let encoder = SegEncoder::new(store, &config, rng);
        let mut cin = *config.encoder_channels.last().unwrap();
        let blocks = config
            .block_channels
            .iter()
            .enumerate()
            .map(|(b, &cout)| {
                let spade = (1..=3).contains(&b).then_some((config.classes, config.spade_hidden));
                let name = format!("siw/block{b}");
                let a = StyleConv::new(store, &format!("{name}/conv0"), (cin, cout), config.style_dim, spade, rng);
                let c = StyleConv::new(store, &format!("{name}/conv1"), (cout, cout), config.style_dim, spade, rng);
                cin = cout;
                GenBlock {
                    upsample: b > 0,
                    convs: [a, c],
                }
            })
            .collect();
        let to_rgb = Conv::new(store, "siw/to_rgb", (cin, 3, 1), 1, rng);
        Ok(Self {
            config,
            mapping,
            encoder,
            blocks,
            to_rgb,
        })
    }

    /// Image `[1, 3, R, R]` for one-hot map `m` under the two styles and the
    /// per-class distance map of `styles`.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, m: &OneHotSegmap, styles: &StyleState) -> Result<Var> {
        let cfg = &self.config;
        if m.classes != cfg.classes || m.height != cfg.resolution || m.width != cfg.resolution {
            return Err(Error::shape(
                "generator input",
                &[m.classes, m.height, m.width],
                &[cfg.classes, cfg.resolution, cfg.resolution],
            ));
        }
        styles.validate(cfg.style_dim, cfg.classes)?;
        let z0 = ctx.constant(Tensor::from_f64(&[1, cfg.style_dim], &styles.z0)?);
        let w0 = self.mapping.forward(ctx, z0)?;
        let w1 = if styles.z1 == styles.z0 {
            w0
        } else {
            let z1 = ctx.constant(Tensor::from_f64(&[1, cfg.style_dim], &styles.z1)?);
            self.mapping.forward(ctx, z1)?
        };
        let full = ctx.constant(m.to_tensor());
        let mut h = self.encoder.forward(ctx, full)?;
        let mut size = cfg.resolution >> self.encoder.convs.len();
        for block in &self.blocks {
            if block.upsample {
                h = ctx.tape.upsample2x(h)?;
                size *= 2;
            }
            let local = m.downsample(cfg.resolution / size)?;
            let p = local.distance_map::<T>(&styles.distance)?;
            let mv = if block.convs[0].spade.is_some() {
                Some(ctx.constant(local.to_tensor()))
            } else {
                None
            };
            for conv in &block.convs {
                h = mixed_style_conv(ctx, h, &p, w0, w1, mv, conv)?;
                h = ctx.tape.leaky_relu(h, T::lit(LEAKY_SLOPE));
            }
        }
        self.to_rgb.forward(ctx, h)
    }
}

pub fn generate_image<T: Real>(
    gen: &Generator,
    store: &ParamStore<T>,
    m: &OneHotSegmap,
    styles: &StyleState,
) -> Result<RgbImage> {
    let mut ctx = Ctx::frozen(store);
    let y = gen.forward(&mut ctx, m, styles)?;
    let r = gen.config.resolution;
    let data: Vec<f32> = ctx.value(y).data().iter().map(|v| v.as_f64() as f32).collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("generated pixel value {i}")));
    }
    RgbImage::new(r, r, data)
}

/// Peak signal-to-noise ratio for images with values in [0, 1].
pub fn psnr(mse: f64) -> f64 {
    10.0 * (1.0 / mse.max(1e-20)).log10()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OverfitConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for OverfitConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            lr: 2e-3,
            seed: 0,
        }
    }
}

pub struct OverfitResult {
    pub generator: Generator,
    pub store: ParamStore<f32>,
    /// PSNR after 0, 1, …, `steps` updates.
    pub psnr: Vec<f64>,
}

/// Trains a fresh generator to reproduce `target` from `m` with an L2 loss,
/// with both styles tied to one seeded latent.
pub fn overfit_single(config: SiwConfig, target: &RgbImage, m: &OneHotSegmap, opts: &OverfitConfig) -> Result<OverfitResult> {
    if (target.height, target.width) != (config.resolution, config.resolution) {
        return Err(Error::shape("overfit target", &[target.height, target.width], &[config.resolution; 2]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut store = ParamStore::<f32>::new();
    let generator = Generator::new(&mut store, config, &mut rng)?;
    let styles = StyleState::tied(config.style_dim, config.classes, opts.seed);
    let goal = Tensor::new(&[1, 3, target.height, target.width], target.data.clone())?;
    let mut adam = Adam::new(AdamConfig::generator(), store.len());
    let mut trace = Vec::with_capacity(opts.steps + 1);
    let loss_of = |ctx: &mut Ctx<'_, f32>| -> Result<Var> {
        let y = generator.forward(ctx, m, &styles)?;
        let g = ctx.constant(goal.clone());
        let d = ctx.tape.sub(y, g)?;
        let sq = ctx.tape.mul(d, d)?;
        Ok(ctx.tape.mean(sq))
    };
    for step in 0..opts.steps {
        let mut ctx = Ctx::new(&store, Trainable::All);
        let loss = loss_of(&mut ctx)?;
        let mse = f64::from(ctx.value(loss).item());
        if !mse.is_finite() {
            return Err(Error::NonFinite(format!("overfit loss at step {step}")));
        }
        trace.push(psnr(mse));
        let grads = ctx.param_grads(loss)?;
        adam.step(&mut store, &grads, opts.lr)?;
    }
    let mut ctx = Ctx::frozen(&store);
    let loss = loss_of(&mut ctx)?;
    trace.push(psnr(f64::from(ctx.value(loss).item())));
    Ok(OverfitResult {
        generator,
        store,
        psnr: trace,
    })
}

/// Writes generator weights (all under `siw/`) into a checkpoint container.
pub fn save_generator<T: Real>(gen: &Generator, store: &ParamStore<T>, path: &Path) -> Result<()> {
    let mut t = TensorTable::default();
    t.push_store(store, "");
    t.push_text("siw/config", &gen.config.to_text());
    t.save(path, CHECKPOINT_MAGIC)
}

pub fn load_generator(path: &Path) -> Result<(Generator, ParamStore<f32>)> {
    let t = TensorTable::load(path, CHECKPOINT_MAGIC)?;
    let config = SiwConfig::parse(&t.text("siw/config")?)?;
    let mut store = ParamStore::new();
    let gen = Generator::new(&mut store, config, &mut ChaCha8Rng::seed_from_u64(0))?;
    t.fill_store(&mut store, "")?;
    Ok((gen, store))
}
