//! Named parameter storage and the glue that puts parameters on a tape.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};

use super::tape::{Gradients, Tape, Var};
use super::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat, ordered table of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    lookup: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    /// Panics on a duplicate name; parameter layouts are fixed at construction.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.lookup.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.lookup.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces a tensor, keeping the shape contract.
    pub fn set(&mut self, id: ParamId, t: Tensor<T>) -> Result<()> {
        if t.shape() != self.tensors[id.0].shape() {
            return Err(Error::shape("ParamStore::set", self.tensors[id.0].shape(), t.shape()));
        }
        self.tensors[id.0] = t;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            lookup: self.lookup.clone(),
        }
    }
}

/// Which stored parameters become trainable leaves on a tape.
#[derive(Clone, Debug)]
pub enum Trainable {
    All,
    None,
    Only(Vec<ParamId>),
}

impl Trainable {
    fn includes(&self, id: ParamId) -> bool {
        match self {
            Trainable::All => true,
            Trainable::None => false,
            Trainable::Only(ids) => ids.contains(&id),
        }
    }
}

/// One forward pass: a tape plus lazily registered parameter leaves.
pub struct Ctx<'a, T> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    trainable: Trainable,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore<T>, trainable: Trainable) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            trainable,
        }
    }

    /// Inference-only context: every parameter is a constant.
    pub fn frozen(store: &'a ParamStore<T>) -> Self {
        Self::new(store, Trainable::None)
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    /// Tape variable for a stored parameter, registering it on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.trainable.includes(id) {
            self.tape.param(t)
        } else {
            self.tape.constant(t)
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    /// Backpropagates `loss` and returns gradients aligned with the store.
    pub fn param_grads(&mut self, loss: Var) -> Result<ParamGrads<T>> {
        let grads = self.tape.backward(loss)?;
        Ok(self.collect(grads))
    }

    pub fn param_grads_from(&mut self, seeds: &[(Var, Tensor<T>)]) -> Result<(ParamGrads<T>, Gradients<T>)> {
        let mut grads = self.tape.backward_from(seeds)?;
        let pg = self.collect_ref(&mut grads);
        Ok((pg, grads))
    }

    fn collect(&mut self, mut grads: Gradients<T>) -> ParamGrads<T> {
        self.collect_ref(&mut grads)
    }

    fn collect_ref(&mut self, grads: &mut Gradients<T>) -> ParamGrads<T> {
        let g = self
            .bound
            .iter_mut()
            .map(|slot| slot.take().and_then(|v| grads.take(v)))
            .collect();
        ParamGrads { grads: g }
    }
}

/// Gradients aligned with a [`ParamStore`]; `None` where a parameter was not
/// touched by the pass.
#[derive(Clone, Debug)]
pub struct ParamGrads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> ParamGrads<T> {
    pub fn empty(n: usize) -> Self {
        Self {
            grads: vec![None; n],
        }
    }

    pub fn from_vec(grads: Vec<Option<Tensor<T>>>) -> Self {
        Self { grads }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `other` into `self` in parameter order.
    pub fn merge(&mut self, other: ParamGrads<T>) {
        for (mine, theirs) in self.grads.iter_mut().zip(other.grads) {
            match (mine.as_mut(), theirs) {
                (Some(a), Some(b)) => a
                    .data_mut()
                    .iter_mut()
                    .zip(b.data())
                    .for_each(|(x, &y)| *x += y),
                (None, Some(b)) => *mine = Some(b),
                _ => {}
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

/// Fan-in uniform initialization bound.
pub fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

/// Fully connected layer `y = x·Wᵀ + b` with `W: [out, in]`.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = fan_in_bound(fan_in);
        let w = store.add(format!("{name}.w"), Tensor::uniform(&[fan_out, fan_in], bound, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::uniform(&[fan_out], bound, rng)));
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.p(self.w);
        let b = self.b.map(|b| ctx.p(b));
        ctx.tape.linear(x, w, b)
    }
}

/// Dense layer followed by layer normalization and ReLU.
#[derive(Clone, Copy, Debug)]
pub struct NormDense {
    pub dense: Dense,
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl NormDense {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let dense = Dense::new(store, name, fan_in, fan_out, true, rng);
        let gamma = store.add(format!("{name}.ln_gain"), Tensor::full(&[fan_out], T::one()));
        let beta = store.add(format!("{name}.ln_shift"), Tensor::zeros(&[fan_out]));
        Self { dense, gamma, beta }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.dense.forward(ctx, x)?;
        let g = ctx.p(self.gamma);
        let b = ctx.p(self.beta);
        let n = ctx.tape.layer_norm(h, Some(g), Some(b), T::lit(LAYER_NORM_EPS))?;
        Ok(ctx.tape.relu(n))
    }
}
