use rand::Rng;

use crate::error::Result;
use crate::numerics::{Ctx, Dense, NormDense, ParamStore, Real, Var};

use super::SofConfig;

/// Shared decoder from field features to class logits.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub hidden: [NormDense; 3],
    pub head: Dense,
}

impl Classifier {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &SofConfig, rng: &mut R) -> Self {
        let w = cfg.width;
        let hidden = [
            NormDense::new(store, "classifier/fc0", w, w, rng),
            NormDense::new(store, "classifier/fc1", w, w, rng),
            NormDense::new(store, "classifier/fc2", w, w, rng),
        ];
        let head = Dense::new(store, "classifier/head", w, cfg.classes, true, rng);
        Self { hidden, head }
    }

    /// Unnormalized class scores `[B, K]` for features `[B, W]`.
    pub fn logits<T: Real>(&self, ctx: &mut Ctx<'_, T>, f: Var) -> Result<Var> {
        let mut h = f;
        for layer in &self.hidden {
            h = layer.forward(ctx, h)?;
        }
        self.head.forward(ctx, h)
    }
}
