//! Auto-decoder training of the field, classifier, marcher and latent table
//! from multi-view segmaps.

pub mod checkpoint;

pub use checkpoint::{TensorTable, CHECKPOINT_MAGIC, FORMAT_VERSION};
pub use crate::segmap::{miou, Confusion};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, Ctx, LrSchedule, Real, Tensor, Trainable};
use crate::render::{marcher::ray_batch, render_segmap_params, Camera, Ray, RenderOptions, NEAR_PLANE};
use crate::scene::Dataset;
use crate::segmap::Segmap;
use crate::sof::{SofConfig, SofModel};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub rays_per_batch: usize,
    pub march_steps: usize,
    pub near: f64,
    pub classes: usize,
    pub width: usize,
    pub latent_dim: usize,
    pub hyper_hidden: usize,
    pub seed: u64,
    /// Step after which part of each batch is drawn near class boundaries.
    pub boundary_after: u64,
    pub boundary_fraction: f64,
    /// Pixels within this Chebyshev distance of another class count as boundary.
    pub boundary_radius: usize,
    /// Training-view mIoU is logged every this many steps (0 disables).
    pub eval_every: u64,
    pub eval_views: usize,
    /// Weight of a squared depth error on foreground rays; 0 trains on
    /// segmaps alone.
    pub depth_weight: f64,
    /// Stop once a periodic evaluation reaches this training-view mIoU.
    pub stop_at_miou: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            min_lr: 0.0,
            warmup_steps: 2_000,
            total_steps: 60_000,
            rays_per_batch: 256,
            march_steps: crate::render::DEFAULT_STEPS,
            near: NEAR_PLANE,
            classes: crate::scene::NUM_CLASSES,
            width: 64,
            latent_dim: crate::sof::LATENT_DIM,
            hyper_hidden: 256,
            seed: 0,
            boundary_after: 5_000,
            boundary_fraction: 0.5,
            boundary_radius: 3,
            eval_every: 1_000,
            eval_views: 16,
            depth_weight: 20.0,
            stop_at_miou: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.rays_per_batch == 0 || self.width == 0 || self.latent_dim == 0 || self.hyper_hidden == 0 {
            return Err(Error::invalid("batch size and widths must be positive"));
        }
        if !(0.0..=1.0).contains(&self.boundary_fraction) {
            return Err(Error::invalid("boundary fraction must lie in [0, 1]"));
        }
        if !(self.near >= 0.0) || !(self.depth_weight >= 0.0) {
            return Err(Error::invalid("near plane and depth weight must be nonnegative"));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> SofConfig {
        SofConfig {
            width: self.width,
            classes: self.classes,
            latent_dim: self.latent_dim,
            hyper_hidden: self.hyper_hidden,
        }
    }

    pub fn render_options(&self) -> RenderOptions {
        RenderOptions {
            steps: self.march_steps,
            near: self.near,
            ..RenderOptions::default()
        }
    }

    /// `key=value` lines, one per field.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "lr={}", self.lr);
        let _ = writeln!(s, "min_lr={}", self.min_lr);
        let _ = writeln!(s, "warmup_steps={}", self.warmup_steps);
        let _ = writeln!(s, "total_steps={}", self.total_steps);
        let _ = writeln!(s, "rays_per_batch={}", self.rays_per_batch);
        let _ = writeln!(s, "march_steps={}", self.march_steps);
        let _ = writeln!(s, "near={}", self.near);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "boundary_after={}", self.boundary_after);
        let _ = writeln!(s, "boundary_fraction={}", self.boundary_fraction);
        let _ = writeln!(s, "boundary_radius={}", self.boundary_radius);
        let _ = writeln!(s, "depth_weight={}", self.depth_weight);
        s
    }
}

/// Model layout stored beside the weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelMeta {
    pub config: SofConfig,
    pub instances: usize,
    pub march_steps: usize,
    pub near: f64,
}

impl ModelMeta {
    pub fn to_text(&self) -> String {
        format!(
            "width={}\nclasses={}\nlatent_dim={}\nhyper_hidden={}\ninstances={}\nmarch_steps={}\nnear={}\n",
            self.config.width,
            self.config.classes,
            self.config.latent_dim,
            self.config.hyper_hidden,
            self.instances,
            self.march_steps,
            self.near
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv: BTreeMap<&str, &str> = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim(), v.trim()))
            .collect();
        fn get<V: std::str::FromStr>(kv: &BTreeMap<&str, &str>, key: &str) -> Result<V> {
            kv.get(key)
                .ok_or_else(|| Error::Format(format!("model metadata lacks {key}")))?
                .parse()
                .map_err(|_| Error::Format(format!("model metadata {key} is malformed")))
        }
        Ok(Self {
            config: SofConfig {
                width: get(&kv, "width")?,
                classes: get(&kv, "classes")?,
                latent_dim: get(&kv, "latent_dim")?,
                hyper_hidden: get(&kv, "hyper_hidden")?,
            },
            instances: get(&kv, "instances")?,
            march_steps: get(&kv, "march_steps")?,
            near: get(&kv, "near")?,
        })
    }
}

/// Trained weights plus the metadata needed to rebuild and render them.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: SofModel<f32>,
    pub meta: ModelMeta,
    pub step: u64,
    /// Training configuration echo; free-form.
    pub notes: String,
}

impl Checkpoint {
    pub fn to_table(&self) -> TensorTable {
        let mut t = TensorTable::default();
        t.push_store(&self.model.store, "");
        t.push("meta/step", Tensor::new(&[2], split_u64(self.step)).unwrap());
        t.push_text("meta/config", &self.meta.to_text());
        t.push_text("meta/notes", &self.notes);
        t
    }

    pub fn from_table(table: &TensorTable) -> Result<Self> {
        let meta = ModelMeta::parse(&table.text("meta/config")?)?;
        let step_t = table.require("meta/step")?;
        let step = join_u64(step_t.data())?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = SofModel::<f32>::new(meta.config, meta.instances, &mut rng)?;
        table.fill_store(&mut model.store, "")?;
        Ok(Self {
            model,
            meta,
            step,
            notes: table.text("meta/notes").unwrap_or_default(),
        })
    }

    pub fn render_options(&self) -> RenderOptions {
        RenderOptions {
            steps: self.meta.march_steps,
            near: self.meta.near,
            ..RenderOptions::default()
        }
    }
}

fn split_u64(v: u64) -> Vec<f32> {
    vec![(v >> 16) as f32, (v & 0xFFFF) as f32]
}

fn join_u64(d: &[f32]) -> Result<u64> {
    match d {
        [hi, lo] if hi.fract() == 0.0 && lo.fract() == 0.0 && *hi >= 0.0 && *lo >= 0.0 => {
            Ok(((*hi as u64) << 16) | *lo as u64)
        }
        _ => Err(Error::Corruption("meta/step is malformed".into())),
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.to_table().save(path, CHECKPOINT_MAGIC)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_table(&TensorTable::load(path, CHECKPOINT_MAGIC)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub miou: Option<f64>,
}

pub fn write_log_csv<W: Write>(rows: &[LogRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "step,loss,lr,miou")?;
    for r in rows {
        match r.miou {
            Some(m) => writeln!(out, "{},{:.6},{:.6e},{:.6}", r.step, r.loss, r.lr, m)?,
            None => writeln!(out, "{},{:.6},{:.6e},", r.step, r.loss, r.lr)?,
        }
    }
    Ok(())
}

/// One view prepared for sampling.
struct TrainView {
    instance: usize,
    camera: Camera,
    segmap: Segmap,
    depth: Vec<f32>,
    boundary: Vec<u32>,
}

/// Pixels within `radius` (Chebyshev) of a pixel of another class.
pub fn boundary_pixels(seg: &Segmap, radius: usize) -> Vec<u32> {
    let (h, w) = (seg.height, seg.width);
    let mut out = Vec::new();
    for v in 0..h {
        for u in 0..w {
            let c = seg.get(v, u);
            let (v0, v1) = (v.saturating_sub(radius), (v + radius).min(h - 1));
            let (u0, u1) = (u.saturating_sub(radius), (u + radius).min(w - 1));
            let differs = (v0..=v1).any(|vv| (u0..=u1).any(|uu| seg.get(vv, uu) != c));
            if differs {
                out.push((v * w + u) as u32);
            }
        }
    }
    out
}

/// Training state: model, optimizer, sampler and metric log.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: SofModel<f32>,
    pub adam: Adam<f32>,
    pub schedule: LrSchedule,
    pub step: u64,
    pub log: Vec<LogRow>,
    views: Vec<TrainView>,
    eval_set: Vec<usize>,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(dataset: &Dataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if dataset.classes != config.classes {
            return Err(Error::invalid(format!(
                "dataset has {} classes, configuration expects {}",
                dataset.classes, config.classes
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = SofModel::new(config.model_config(), dataset.views.len(), &mut rng)?;
        let mut views = Vec::new();
        for (instance, vs) in dataset.views.iter().enumerate() {
            for ((camera, segmap), depth) in vs.cameras.iter().zip(&vs.segmaps).zip(&vs.depths) {
                views.push(TrainView {
                    instance,
                    camera: camera.clone(),
                    boundary: boundary_pixels(segmap, config.boundary_radius),
                    segmap: segmap.clone(),
                    depth: depth.clone(),
                });
            }
        }
        if views.is_empty() {
            return Err(Error::invalid("dataset has no views"));
        }
        let n_eval = config.eval_views.clamp(1, views.len());
        let eval_set = (0..n_eval).map(|i| i * views.len() / n_eval).collect();
        let schedule = LrSchedule::new(
            config.lr,
            config.warmup_steps.min(config.total_steps),
            config.total_steps,
            config.min_lr,
        )?;
        let adam = Adam::new(AdamConfig::default(), model.store.len());
        Ok(Self {
            config,
            model,
            adam,
            schedule,
            step: 0,
            log: Vec::new(),
            views,
            eval_set,
            rng,
        })
    }

    fn sample_batch(&mut self, view: usize) -> (Vec<Ray>, Vec<usize>, Vec<f32>) {
        let v = &self.views[view];
        let n = self.config.rays_per_batch;
        let use_boundary = self.step >= self.config.boundary_after && !v.boundary.is_empty();
        let n_boundary = if use_boundary {
            (n as f64 * self.config.boundary_fraction).round() as usize
        } else {
            0
        };
        let total = v.segmap.data.len();
        let mut rays = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        let mut depth = Vec::with_capacity(n);
        for i in 0..n {
            let p = if i < n_boundary {
                v.boundary[self.rng.random_range(0..v.boundary.len())] as usize
            } else {
                self.rng.random_range(0..total)
            };
            let (row, col) = (p / v.camera.width, p % v.camera.width);
            rays.push(v.camera.ray(col as f64, row as f64));
            targets.push(v.segmap.data[p] as usize);
            depth.push(v.depth[p]);
        }
        (rays, targets, depth)
    }

    /// One optimization step; returns the batch loss.
    pub fn train_step(&mut self) -> Result<f64> {
        let view = self.rng.random_range(0..self.views.len());
        let instance = self.views[view].instance;
        let (rays, targets, gt_depth) = self.sample_batch(view);
        let cfg = &self.config;
        let mut ctx = Ctx::new(&self.model.store, Trainable::All);
        let z = ctx.p(self.model.latents[instance]);
        let theta = self.model.hyper.forward(&mut ctx, z, &self.model.config)?;
        let (o, d, t) = ray_batch(&mut ctx.tape, &rays, &vec![cfg.near; rays.len()])?;
        let out = self.model.marcher.march(&mut ctx, &theta, o, d, t, cfg.march_steps)?;
        let logits = self.model.classifier.logits(&mut ctx, out.features)?;
        let mut loss = ctx.tape.cross_entropy(logits, &targets)?;
        if cfg.depth_weight > 0.0 {
            let fg: Vec<f32> = gt_depth.iter().map(|d| if d.is_finite() { 1.0 } else { 0.0 }).collect();
            let count = fg.iter().sum::<f32>();
            if count > 0.0 {
                let gt: Vec<f32> = gt_depth.iter().map(|d| if d.is_finite() { *d } else { 0.0 }).collect();
                let gt = ctx.constant(Tensor::new(&[gt.len(), 1], gt)?);
                let mask = ctx.constant(Tensor::new(&[fg.len(), 1], fg)?);
                let diff = ctx.tape.sub(out.depth, gt)?;
                let diff = ctx.tape.mul(diff, mask)?;
                let sq = ctx.tape.mul(diff, diff)?;
                let sum = ctx.tape.sum(sq);
                let term = ctx.tape.scale(sum, (cfg.depth_weight / count as f64) as f32);
                loss = ctx.tape.add(loss, term)?;
            }
        }
        let value = ctx.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {}", self.step)));
        }
        let grads = ctx.param_grads(loss)?;
        let lr = self.schedule.lr_at(self.step);
        self.adam.step(&mut self.model.store, &grads, lr)?;
        self.step += 1;
        let mut row = LogRow {
            step: self.step,
            loss: value,
            lr,
            miou: None,
        };
        if cfg.eval_every > 0 && self.step % cfg.eval_every == 0 {
            row.miou = Some(self.eval_training_views()?);
        }
        self.log.push(row);
        Ok(value)
    }

    /// Runs until `total_steps` or the mIoU target, whichever comes first.
    pub fn run(&mut self) -> Result<()> {
        while self.step < self.config.total_steps {
            self.train_step()?;
            let last = self.log.last().expect("a step was logged");
            if let Some(m) = last.miou {
                log::info!("step {} loss {:.4} miou {:.4}", last.step, last.loss, m);
                if self.config.stop_at_miou.is_some_and(|target| m >= target) {
                    break;
                }
            }
        }
        Ok(())
    }

    /// Dataset-level mIoU over the fixed evaluation subset of training views.
    pub fn eval_training_views(&self) -> Result<f64> {
        let items: Vec<(usize, &Camera, &Segmap)> = self
            .eval_set
            .iter()
            .map(|&i| (self.views[i].instance, &self.views[i].camera, &self.views[i].segmap))
            .collect();
        evaluate_views(&self.model, &items, &self.config.render_options())
    }

    /// Dataset-level mIoU over every training view.
    pub fn eval_all_training_views(&self) -> Result<f64> {
        let items: Vec<(usize, &Camera, &Segmap)> = self
            .views
            .iter()
            .map(|v| (v.instance, &v.camera, &v.segmap))
            .collect();
        evaluate_views(&self.model, &items, &self.config.render_options())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            meta: ModelMeta {
                config: self.model.config,
                instances: self.model.num_instances(),
                march_steps: self.config.march_steps,
                near: self.config.near,
            },
            step: self.step,
            notes: self.config.to_text(),
        }
    }
}

/// Renders each `(instance, camera, target)` and pools a confusion matrix.
pub fn evaluate_views<T: Real>(
    model: &SofModel<T>,
    items: &[(usize, &Camera, &Segmap)],
    opts: &RenderOptions,
) -> Result<f64> {
    let mut conf = Confusion::new(model.config.classes);
    let mut cached: Option<(usize, crate::sof::SofParams<T>)> = None;
    for &(instance, cam, target) in items {
        if cached.as_ref().is_none_or(|(i, _)| *i != instance) {
            cached = Some((instance, model.hyper_forward(&model.latent(instance))?));
        }
        let params = &cached.as_ref().unwrap().1;
        let out = render_segmap_params(model, params, cam, opts)?;
        conf.add(&out.segmap, target)?;
    }
    Ok(conf.miou())
}

/// Trains from scratch and returns the final checkpoint with its metric log.
pub fn train_sof(dataset: &Dataset, config: TrainConfig) -> Result<(Checkpoint, Vec<LogRow>)> {
    let mut trainer = Trainer::new(dataset, config)?;
    trainer.run()?;
    Ok((trainer.checkpoint(), trainer.log))
}

#[cfg(test)]
mod tests;
