use rand::Rng;

use crate::error::Result;
use crate::numerics::params::{fan_in_bound, LAYER_NORM_EPS};
use crate::numerics::{Ctx, Dense, ParamStore, Real, Tape, Tensor, Var};

use super::SofConfig;

/// Scale applied to head weights at initialization so the emitted field net
/// starts close to the head biases.
const HEAD_WEIGHT_SCALE: f64 = 1e-2;

/// Output heads producing one field-net layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerHeads {
    /// Emits `out·in` weights followed by `out` biases.
    pub affine: Dense,
    /// Emits `out` layer-norm gains followed by `out` shifts.
    pub norm: Dense,
    pub fan_in: usize,
    pub fan_out: usize,
}

/// Shared trunk of three ReLU layers and one pair of linear heads per
/// field-net layer.
#[derive(Clone, Debug)]
pub struct HyperNet {
    pub trunk: [Dense; 3],
    pub heads: Vec<LayerHeads>,
}

impl HyperNet {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &SofConfig, rng: &mut R) -> Self {
        let h = cfg.hyper_hidden;
        let trunk = [
            Dense::new(store, "hyper/trunk0", cfg.latent_dim, h, true, rng),
            Dense::new(store, "hyper/trunk1", h, h, true, rng),
            Dense::new(store, "hyper/trunk2", h, h, true, rng),
        ];
        let heads = cfg
            .theta_dims()
            .iter()
            .enumerate()
            .map(|(l, &(fan_in, fan_out))| {
                let affine = head(store, &format!("hyper/head{l}.affine"), h, fan_out * (fan_in + 1), rng, |rng| {
                    Tensor::uniform(&[fan_out * (fan_in + 1)], fan_in_bound(fan_in), rng)
                });
                let norm = head(store, &format!("hyper/head{l}.norm"), h, 2 * fan_out, rng, |_| {
                    let mut b = vec![T::zero(); 2 * fan_out];
                    b[..fan_out].iter_mut().for_each(|v| *v = T::one());
                    Tensor::new(&[2 * fan_out], b).unwrap()
                });
                LayerHeads {
                    affine,
                    norm,
                    fan_in,
                    fan_out,
                }
            })
            .collect();
        Self { trunk, heads }
    }

    /// Emits the field net for a latent `z: [1, latent_dim]`.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, z: Var, _cfg: &SofConfig) -> Result<ThetaVars> {
        let mut h = z;
        for layer in &self.trunk {
            h = layer.forward(ctx, h)?;
            h = ctx.tape.relu(h);
        }
        let mut layers = Vec::with_capacity(self.heads.len());
        for hd in &self.heads {
            let (i, o) = (hd.fan_in, hd.fan_out);
            let a = hd.affine.forward(ctx, h)?;
            let w = ctx.tape.slice(a, 1, 0, o * i)?;
            let w = ctx.tape.reshape(w, &[o, i])?;
            let b = ctx.tape.slice(a, 1, o * i, o)?;
            let b = ctx.tape.reshape(b, &[o])?;
            let n = hd.norm.forward(ctx, h)?;
            let g = ctx.tape.slice(n, 1, 0, o)?;
            let g = ctx.tape.reshape(g, &[o])?;
            let s = ctx.tape.slice(n, 1, o, o)?;
            let s = ctx.tape.reshape(s, &[o])?;
            layers.push([w, b, g, s]);
        }
        Ok(ThetaVars { layers })
    }
}

fn head<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
    bias: impl FnOnce(&mut R) -> Tensor<T>,
) -> Dense {
    let scale = fan_in_bound(fan_in) * HEAD_WEIGHT_SCALE;
    let w = store.add(format!("{name}.w"), Tensor::uniform(&[fan_out, fan_in], scale, rng));
    let b = store.add(format!("{name}.b"), bias(rng));
    Dense {
        w,
        b: Some(b),
        fan_in,
        fan_out,
    }
}

/// Field-net weights living on a tape: `[weight, bias, ln_gain, ln_shift]`
/// per layer.
#[derive(Clone, Debug)]
pub struct ThetaVars {
    pub layers: Vec<[Var; 4]>,
}

impl ThetaVars {
    /// Features of the points `x: [B, 3]`, shape `[B, width]`.
    pub fn features<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for &[w, b, g, s] in &self.layers {
            let a = tape.linear(h, w, Some(b))?;
            let n = tape.layer_norm(a, Some(g), Some(s), T::lit(LAYER_NORM_EPS))?;
            h = tape.relu(n);
        }
        Ok(h)
    }

    pub fn values<T: Real>(&self, tape: &Tape<T>) -> SofParams<T> {
        SofParams {
            layers: self
                .layers
                .iter()
                .map(|&[w, b, g, s]| ThetaLayer {
                    weight: tape.value(w).clone(),
                    bias: tape.value(b).clone(),
                    gain: tape.value(g).clone(),
                    shift: tape.value(s).clone(),
                })
                .collect(),
        }
    }

    pub fn all(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flatten().copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThetaLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub gain: Tensor<T>,
    pub shift: Tensor<T>,
}

/// Concrete weights of one emitted field net.
#[derive(Clone, Debug, PartialEq)]
pub struct SofParams<T> {
    pub layers: Vec<ThetaLayer<T>>,
}

impl<T: Real> SofParams<T> {
    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.numel() + l.bias.numel() + l.gain.numel() + l.shift.numel())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.is_finite() && l.gain.is_finite() && l.shift.is_finite())
    }

    /// Places the weights on `tape` as constants.
    pub fn to_vars(&self, tape: &mut Tape<T>) -> ThetaVars {
        ThetaVars {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    [
                        tape.constant(l.weight.clone()),
                        tape.constant(l.bias.clone()),
                        tape.constant(l.gain.clone()),
                        tape.constant(l.shift.clone()),
                    ]
                })
                .collect(),
        }
    }

    /// Places the weights on `tape` as trainable leaves.
    pub fn to_param_vars(&self, tape: &mut Tape<T>) -> ThetaVars {
        ThetaVars {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    [
                        tape.param(l.weight.clone()),
                        tape.param(l.bias.clone()),
                        tape.param(l.gain.clone()),
                        tape.param(l.shift.clone()),
                    ]
                })
                .collect(),
        }
    }
}
