use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, Ctx, ParamStore, Trainable};
use crate::render::marcher::ray_batch;
use crate::render::{render_segmap, Camera};
use crate::segmap::{miou, Segmap};
use crate::sof::GeomLatent;
use crate::trainer::Checkpoint;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectConfig {
    pub steps: usize,
    pub lr: f64,
    pub rays_per_step: usize,
    /// Steps between full-view evaluations; each one adds a trace entry.
    pub eval_every: usize,
    /// Stop once the full-view mIoU reaches this value.
    pub stop_at_miou: Option<f64>,
    pub seed: u64,
}

impl Default for ProjectConfig {
    fn default() -> Self {
        Self {
            steps: 6000,
            lr: 1e-2,
            rays_per_step: 256,
            eval_every: 100,
            stop_at_miou: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TracePoint {
    pub step: usize,
    pub miou: f64,
    /// Batch loss of the step just taken; absent for the initial point.
    pub loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// Latent with the highest full-view mIoU seen.
    pub latent: GeomLatent,
    pub best_miou: f64,
    pub best_step: usize,
    pub trace: Vec<TracePoint>,
}

/// Fits a geometry latent so that the frozen model renders `target` from
/// `cam`, minimizing per-ray cross-entropy with Adam on the latent alone.
pub fn project_segmap(
    target: &Segmap,
    cam: &Camera,
    ckpt: &Checkpoint,
    init: &GeomLatent,
    config: &ProjectConfig,
) -> Result<Projection> {
    let model = &ckpt.model;
    if target.classes != model.config.classes {
        return Err(Error::invalid(format!(
            "target has {} classes, model has {}",
            target.classes, model.config.classes
        )));
    }
    if (target.height, target.width) != (cam.height, cam.width) {
        return Err(Error::shape("project_segmap", &[target.height, target.width], &[cam.height, cam.width]));
    }
    if config.eval_every == 0 || config.rays_per_step == 0 {
        return Err(Error::invalid("eval interval and ray count must be positive"));
    }
    init.validate(model.config.latent_dim)?;
    let opts = ckpt.render_options();
    let mut store = model.store.clone();
    let zid = store.add("projection/z", init.to_tensor());
    let mut adam = Adam::new(AdamConfig::default(), store.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let near = vec![opts.near; config.rays_per_step];

    let current = |store: &ParamStore<f32>| GeomLatent::new(store.get(zid).data().to_vec());
    let evaluate = |z: &GeomLatent| -> Result<f64> { miou(&render_segmap(model, z, cam, &opts)?.segmap, target) };

    let first = current(&store);
    let mut trace = vec![TracePoint {
        step: 0,
        miou: evaluate(&first)?,
        loss: None,
    }];
    let mut best = (first, trace[0].miou, 0);
    let done = |m: f64| config.stop_at_miou.is_some_and(|t| m >= t);
    let mut step = 0;
    while step < config.steps && !done(best.1) {
        let mut rays = Vec::with_capacity(config.rays_per_step);
        let mut labels = Vec::with_capacity(config.rays_per_step);
        for _ in 0..config.rays_per_step {
            let p = rng.random_range(0..target.data.len());
            rays.push(cam.ray((p % cam.width) as f64, (p / cam.width) as f64));
            labels.push(target.data[p] as usize);
        }
        let mut ctx = Ctx::new(&store, Trainable::Only(vec![zid]));
        let z = ctx.p(zid);
        let theta = model.hyper.forward(&mut ctx, z, &model.config)?;
        let (o, d, t) = ray_batch(&mut ctx.tape, &rays, &near)?;
        let out = model.marcher.march(&mut ctx, &theta, o, d, t, opts.steps)?;
        let logits = model.classifier.logits(&mut ctx, out.features)?;
        let loss = ctx.tape.cross_entropy(logits, &labels)?;
        let value = f64::from(ctx.value(loss).item());
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("projection loss at step {step}")));
        }
        let grads = ctx.param_grads(loss)?;
        adam.step(&mut store, &grads, config.lr)?;
        step += 1;
        if step % config.eval_every == 0 || step == config.steps {
            let z = current(&store);
            let m = evaluate(&z)?;
            trace.push(TracePoint { step, miou: m, loss: Some(value) });
            if m > best.1 {
                best = (z, m, step);
            }
        }
    }
    Ok(Projection {
        latent: best.0,
        best_miou: best.1,
        best_step: best.2,
        trace,
    })
}
