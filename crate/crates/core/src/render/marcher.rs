//! Learned ray marcher: an MLP reads the field feature at the current point
//! and predicts the next step size, with every layer's bias produced from
//! the ray direction.

use nalgebra::Vector3;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::params::fan_in_bound;
use crate::numerics::{Ctx, Dense, ParamStore, Real, Tape, Tensor, Trainable, Var};
use crate::sof::{SofParams, ThetaVars};

use super::camera::Ray;

pub const MARCHER_LAYERS: usize = 7;

/// Bias of the final step layer at initialization, so untrained rays advance
/// steadily from the near plane into the scene box.
const INITIAL_STEP: f64 = 0.15;

#[derive(Clone, Debug)]
pub struct Marcher {
    /// Feature path, bias-free: `W→W` six times, then `W→1`.
    pub feature_layers: Vec<Dense>,
    /// Direction-to-bias maps: `3→W` six times, then `3→1`.
    pub dir_layers: Vec<Dense>,
}

/// Outcome of marching one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct MarchResult<T> {
    pub depth: f64,
    pub surface_x: Vector3<f64>,
    pub feature: Vec<T>,
    pub steps: Vec<f64>,
}

/// Tape handles of a batched march.
#[derive(Clone, Debug)]
pub struct MarchVars {
    /// `[B, 1]` distance along each ray.
    pub depth: Var,
    /// `[B, 3]` final points.
    pub points: Var,
    /// `[B, W]` field features at the final points.
    pub features: Var,
    /// `N` tensors of shape `[B, 1]`.
    pub steps: Vec<Var>,
}

impl Marcher {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, width: usize, rng: &mut R) -> Self {
        let mut feature_layers = Vec::with_capacity(MARCHER_LAYERS);
        let mut dir_layers = Vec::with_capacity(MARCHER_LAYERS);
        for i in 0..MARCHER_LAYERS {
            let out = if i + 1 == MARCHER_LAYERS { 1 } else { width };
            feature_layers.push(Dense::new(store, &format!("marcher/fc{i}"), width, out, false, rng));
            dir_layers.push(Dense::new(store, &format!("marcher/dir{i}"), 3, out, true, rng));
        }
        let last = MARCHER_LAYERS - 1;
        let w = feature_layers[last].w;
        let bound = 0.1 * fan_in_bound(width);
        store.set(w, Tensor::uniform(&[1, width], bound, rng)).expect("marcher head shape");
        let dir = dir_layers[last];
        store.set(dir.w, Tensor::uniform(&[1, 3], 0.01, rng)).expect("marcher head shape");
        store
            .set(dir.b.expect("direction layers carry a bias"), Tensor::full(&[1], T::lit(INITIAL_STEP)))
            .expect("marcher head shape");
        Self {
            feature_layers,
            dir_layers,
        }
    }

    /// Direction-derived biases for each layer; computed once per batch.
    fn dir_biases<T: Real>(&self, ctx: &mut Ctx<'_, T>, dirs: Var) -> Result<Vec<Var>> {
        self.dir_layers.iter().map(|l| l.forward(ctx, dirs)).collect()
    }

    /// Step sizes `[B, 1]` from features `[B, W]`.
    fn step<T: Real>(&self, ctx: &mut Ctx<'_, T>, features: Var, biases: &[Var]) -> Result<Var> {
        let mut h = features;
        for (layer, &b) in self.feature_layers.iter().zip(biases) {
            let a = layer.forward(ctx, h)?;
            let a = ctx.tape.add(a, b)?;
            h = ctx.tape.relu(a);
        }
        Ok(h)
    }

    /// Marches a batch of rays `origins, dirs: [B, 3]` from per-ray start
    /// distances `t0: [B, 1]` for `n_steps` iterations.
    pub fn march<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        theta: &ThetaVars,
        origins: Var,
        dirs: Var,
        t0: Var,
        n_steps: usize,
    ) -> Result<MarchVars> {
        let biases = self.dir_biases(ctx, dirs)?;
        let offset = ctx.tape.mul(dirs, t0)?;
        let mut x = ctx.tape.add(origins, offset)?;
        let mut depth = t0;
        let mut steps = Vec::with_capacity(n_steps);
        for _ in 0..n_steps {
            let f = theta.features(&mut ctx.tape, x)?;
            let s = self.step(ctx, f, &biases)?;
            let dx = ctx.tape.mul(dirs, s)?;
            x = ctx.tape.add(x, dx)?;
            depth = ctx.tape.add(depth, s)?;
            steps.push(s);
        }
        for (i, &s) in steps.iter().enumerate() {
            if let Some(ray) = ctx.tape.value(s).data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("march step {i} on ray {ray}")));
            }
        }
        let features = theta.features(&mut ctx.tape, x)?;
        Ok(MarchVars {
            depth,
            points: x,
            features,
            steps,
        })
    }

    /// Marches a single ray with frozen parameters.
    pub fn march_ray<T: Real>(
        &self,
        store: &ParamStore<T>,
        params: &SofParams<T>,
        ray: &Ray,
        t0: f64,
        n_steps: usize,
    ) -> Result<MarchResult<T>> {
        if !(t0 >= 0.0) || !t0.is_finite() {
            return Err(Error::invalid(format!("start distance must be finite and nonnegative, got {t0}")));
        }
        let mut ctx = Ctx::new(store, Trainable::None);
        let theta = params.to_vars(&mut ctx.tape);
        let (o, d, t) = ray_batch(&mut ctx.tape, std::slice::from_ref(ray), &[t0])?;
        let out = self.march(&mut ctx, &theta, o, d, t, n_steps)?;
        let p = ctx.value(out.points).data();
        Ok(MarchResult {
            depth: ctx.value(out.depth).item().as_f64(),
            surface_x: Vector3::new(p[0].as_f64(), p[1].as_f64(), p[2].as_f64()),
            feature: ctx.value(out.features).data().to_vec(),
            steps: out.steps.iter().map(|&s| ctx.value(s).item().as_f64()).collect(),
        })
    }
}

/// Places ray origins, directions and start distances on a tape as constants.
pub fn ray_batch<T: Real>(tape: &mut Tape<T>, rays: &[Ray], t0: &[f64]) -> Result<(Var, Var, Var)> {
    if t0.len() != rays.len() {
        return Err(Error::shape("ray_batch", &[rays.len()], &[t0.len()]));
    }
    let n = rays.len();
    let mut o = Vec::with_capacity(3 * n);
    let mut d = Vec::with_capacity(3 * n);
    for r in rays {
        o.extend(r.origin.iter().map(|&v| T::lit(v)));
        d.extend(r.dir.iter().map(|&v| T::lit(v)));
    }
    let t = t0.iter().map(|&v| T::lit(v)).collect();
    Ok((
        tape.constant(Tensor::new(&[n, 3], o)?),
        tape.constant(Tensor::new(&[n, 3], d)?),
        tape.constant(Tensor::new(&[n, 1], t)?),
    ))
}
