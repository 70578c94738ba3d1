//! Semantic occupancy field: a hypernetwork maps a geometry latent to the
//! weights of a small per-instance MLP (the field net), whose features are
//! decoded into a class distribution by a shared classifier.

mod classifier;
mod hyper;

pub use classifier::Classifier;
pub use hyper::{HyperNet, SofParams, ThetaLayer, ThetaVars};

use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::numerics::{Ctx, ParamId, ParamStore, Real, Tensor, Trainable};
use crate::render::marcher::Marcher;

/// Dimension of a geometry latent.
pub const LATENT_DIM: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SofConfig {
    /// Hidden width of the field net, classifier and marcher.
    pub width: usize,
    /// Number of semantic classes, background included.
    pub classes: usize,
    pub latent_dim: usize,
    /// Channel count of the hypernetwork trunk.
    pub hyper_hidden: usize,
}

impl Default for SofConfig {
    fn default() -> Self {
        Self {
            width: 256,
            classes: 6,
            latent_dim: LATENT_DIM,
            hyper_hidden: 256,
        }
    }
}

impl SofConfig {
    pub fn with_width(width: usize) -> Self {
        Self {
            width,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.latent_dim == 0 || self.hyper_hidden == 0 {
            return Err(Error::invalid("widths must be positive"));
        }
        if self.classes < 2 || self.classes > 255 {
            return Err(Error::invalid(format!(
                "class count {} outside 2..=255",
                self.classes
            )));
        }
        Ok(())
    }

    /// Input/output sizes of the three field-net layers.
    pub fn theta_dims(&self) -> [(usize, usize); 3] {
        let w = self.width;
        [(3, w), (w, w), (w, w)]
    }

    /// Scalar count of one emitted field net: weights, biases and layer-norm
    /// gain/shift of each layer.
    pub fn theta_param_count(&self) -> usize {
        self.theta_dims()
            .iter()
            .map(|&(i, o)| i * o + o + 2 * o)
            .sum()
    }
}

/// A geometry code indexing one field instance.
#[derive(Clone, Debug, PartialEq)]
pub struct GeomLatent {
    pub z: Vec<f32>,
    pub instance_id: Option<usize>,
}

impl GeomLatent {
    pub fn new(z: Vec<f32>) -> Self {
        Self {
            z,
            instance_id: None,
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self::new(vec![0.0; dim])
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.z.len() != dim {
            return Err(Error::shape("GeomLatent", &[self.z.len()], &[dim]));
        }
        if let Some(i) = self.z.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("latent coordinate {i}")));
        }
        Ok(())
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(&[1, self.z.len()], self.z.iter().map(|&v| T::lit(v as f64)).collect())
            .expect("latent shape")
    }
}

/// Result of querying the field at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticProbe<T> {
    pub point: [f64; 3],
    pub probs: Vec<T>,
    pub feature: Vec<T>,
}

impl<T: Real> SemanticProbe<T> {
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

pub(crate) fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// All shared networks plus the per-instance latent table, in one store.
#[derive(Clone, Debug)]
pub struct SofModel<T> {
    pub config: SofConfig,
    pub store: ParamStore<T>,
    pub hyper: HyperNet,
    pub classifier: Classifier,
    pub marcher: Marcher,
    pub latents: Vec<ParamId>,
}

impl<T: Real> SofModel<T> {
    /// Fresh model with `num_instances` latents drawn from N(0, 0.01²).
    pub fn new<R: Rng + ?Sized>(config: SofConfig, num_instances: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let hyper = HyperNet::new(&mut store, &config, rng);
        let classifier = Classifier::new(&mut store, &config, rng);
        let marcher = Marcher::new(&mut store, config.width, rng);
        let latents = (0..num_instances)
            .map(|i| {
                store.add(
                    format!("latent/{i:05}"),
                    Tensor::normal(&[1, config.latent_dim], 0.01, rng),
                )
            })
            .collect();
        Ok(Self {
            config,
            store,
            hyper,
            classifier,
            marcher,
            latents,
        })
    }

    /// Rebuilds the layout for `config` and adopts `store`, checking that
    /// every expected tensor is present with the right shape.
    pub fn from_store(config: SofConfig, num_instances: usize, store: ParamStore<T>) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::new(config, num_instances, &mut rng)?;
        for id in model.store.ids().collect::<Vec<_>>() {
            let name = model.store.name(id).to_string();
            let src = store
                .id(&name)
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            model.store.set(id, store.get(src).clone())?;
        }
        Ok(model)
    }

    pub fn num_instances(&self) -> usize {
        self.latents.len()
    }

    pub fn latent(&self, instance: usize) -> GeomLatent {
        let t = self.store.get(self.latents[instance]);
        GeomLatent {
            z: t.data().iter().map(|v| v.as_f64() as f32).collect(),
            instance_id: Some(instance),
        }
    }

    pub fn set_latent(&mut self, instance: usize, z: &GeomLatent) -> Result<()> {
        z.validate(self.config.latent_dim)?;
        let id = self.latents[instance];
        self.store.set(id, z.to_tensor())
    }

    /// Every shared (non-latent) parameter.
    pub fn shared_params(&self) -> Vec<ParamId> {
        self.store
            .ids()
            .filter(|id| !self.latents.contains(id))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> SofModel<U> {
        SofModel {
            config: self.config,
            store: self.store.cast(),
            hyper: self.hyper.clone(),
            classifier: self.classifier.clone(),
            marcher: self.marcher.clone(),
            latents: self.latents.clone(),
        }
    }

    /// Emits the field-net weights for `z`.
    pub fn hyper_forward(&self, z: &GeomLatent) -> Result<SofParams<T>> {
        z.validate(self.config.latent_dim)?;
        let mut ctx = Ctx::frozen(&self.store);
        let zv = ctx.constant(z.to_tensor());
        let vars = self.hyper.forward(&mut ctx, zv, &self.config)?;
        Ok(vars.values(&ctx.tape))
    }

    /// Field-net features at a single point.
    pub fn sof_features(&self, params: &SofParams<T>, x: [f64; 3]) -> Result<Vec<T>> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("probe point {x:?}")));
        }
        if x.iter().any(|v| v.abs() > 1.0) {
            log::warn!("probe point {x:?} outside the scene box [-1, 1]^3");
        }
        let mut ctx = Ctx::frozen(&self.store);
        let theta = params.to_vars(&mut ctx.tape);
        let xv = ctx.constant(Tensor::from_f64(&[1, 3], &x)?);
        let f = theta.features(&mut ctx.tape, xv)?;
        Ok(ctx.value(f).data().to_vec())
    }

    /// Class distribution for one feature vector.
    pub fn classify(&self, f: &[T]) -> Result<Vec<T>> {
        if f.len() != self.config.width {
            return Err(Error::shape("classify", &[f.len()], &[self.config.width]));
        }
        let mut ctx = Ctx::frozen(&self.store);
        let fv = ctx.constant(Tensor::new(&[1, f.len()], f.to_vec())?);
        let logits = self.classifier.logits(&mut ctx, fv)?;
        let p = ctx.tape.softmax(logits, 1)?;
        Ok(ctx.value(p).data().to_vec())
    }

    pub fn field_probe(&self, z: &GeomLatent, x: [f64; 3]) -> Result<SemanticProbe<T>> {
        let params = self.hyper_forward(z)?;
        let feature = self.sof_features(&params, x)?;
        let probs = self.classify(&feature)?;
        Ok(SemanticProbe {
            point: x,
            probs,
            feature,
        })
    }

    /// Class probabilities at many points, `[n, K]` row-major.
    pub fn field_probs(&self, params: &SofParams<T>, points: &[[f64; 3]]) -> Result<Vec<T>> {
        const CHUNK: usize = 4096;
        let k = self.config.classes;
        let mut out = Vec::with_capacity(points.len() * k);
        for chunk in points.chunks(CHUNK) {
            let mut ctx = Ctx::frozen(&self.store);
            let theta = params.to_vars(&mut ctx.tape);
            let flat: Vec<f64> = chunk.iter().flatten().copied().collect();
            let xv = ctx.constant(Tensor::from_f64(&[chunk.len(), 3], &flat)?);
            let f = theta.features(&mut ctx.tape, xv)?;
            let logits = self.classifier.logits(&mut ctx, f)?;
            let p = ctx.tape.softmax(logits, 1)?;
            out.extend_from_slice(ctx.value(p).data());
        }
        Ok(out)
    }

    /// Context in which the given parameters are trainable.
    pub fn ctx(&self, trainable: Trainable) -> Ctx<'_, T> {
        Ctx::new(&self.store, trainable)
    }
}

#[cfg(test)]
mod tests;
