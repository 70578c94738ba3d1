//! Style-modulated convolution building blocks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::params::fan_in_bound;
use crate::numerics::{Ctx, Dense, ParamId, ParamStore, Real, Tape, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const DEMOD_EPS: f64 = 1e-8;
pub const SPADE_EPS: f64 = 1e-5;

/// Plain convolution with a bias, `[O, I, k, k]`.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        (cin, cout, k): (usize, usize, usize),
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let bound = fan_in_bound(cin * k * k);
        Self {
            w: store.add(format!("{name}.w"), Tensor::uniform(&[cout, cin, k, k], bound, rng)),
            b: store.add(format!("{name}.b"), Tensor::uniform(&[cout], bound, rng)),
            stride,
            pad: k / 2,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.p(self.w), ctx.p(self.b));
        let y = ctx.tape.conv2d(x, w, self.stride, self.pad)?;
        add_channel_bias(&mut ctx.tape, y, b)
    }
}

/// Adds a per-channel `[C]` bias to a `[N, C, H, W]` map.
pub fn add_channel_bias<T: Real>(tape: &mut Tape<T>, y: Var, b: Var) -> Result<Var> {
    let c = tape.shape(b)[0];
    let b = tape.reshape(b, &[1, c, 1, 1])?;
    tape.add(y, b)
}

/// The style mapping network: a stack of leaky-ReLU fully connected layers.
#[derive(Clone, Debug)]
pub struct MappingNet {
    pub layers: Vec<Dense>,
}

impl MappingNet {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, dim: usize, depth: usize, rng: &mut R) -> Self {
        let layers = (0..depth)
            .map(|i| Dense::new(store, &format!("siw/map{i}"), dim, dim, true, rng))
            .collect();
        Self { layers }
    }

    /// Maps `[n, dim]` latents to styles of the same shape.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, z: Var) -> Result<Var> {
        let mut h = z;
        for l in &self.layers {
            h = l.forward(ctx, h)?;
            h = ctx.tape.leaky_relu(h, T::lit(LEAKY_SLOPE));
        }
        Ok(h)
    }
}

/// Two-convolution network turning a one-hot map into per-pixel scale and
/// shift maps.
#[derive(Clone, Copy, Debug)]
pub struct Spade {
    pub shared: Conv,
    pub head: Conv,
    pub channels: usize,
}

impl Spade {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        classes: usize,
        hidden: usize,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        let shared = Conv::new(store, &format!("{name}.shared"), (classes, hidden, 3), 1, rng);
        let head = Conv::new(store, &format!("{name}.head"), (hidden, 2 * channels, 3), 1, rng);
        let bound = 0.1 * fan_in_bound(hidden * 9);
        store.set(head.w, Tensor::uniform(&[2 * channels, hidden, 3, 3], bound, rng)).unwrap();
        let bias: Vec<T> = (0..2 * channels).map(|i| if i < channels { T::one() } else { T::zero() }).collect();
        store.set(head.b, Tensor::new(&[2 * channels], bias).unwrap()).unwrap();
        Self { shared, head, channels }
    }

    /// Scale and shift maps `[1, C, H, W]` for the one-hot map `m`.
    pub fn modulation<T: Real>(&self, ctx: &mut Ctx<'_, T>, m: Var) -> Result<(Var, Var)> {
        let h = self.shared.forward(ctx, m)?;
        let h = ctx.tape.relu(h);
        let gb = self.head.forward(ctx, h)?;
        let gamma = ctx.tape.slice(gb, 1, 0, self.channels)?;
        let beta = ctx.tape.slice(gb, 1, self.channels, self.channels)?;
        Ok((gamma, beta))
    }
}

/// Instance-normalizes `f` per channel and applies the spatial scale and
/// shift predicted from `m`.
pub fn spade_fuse<T: Real>(ctx: &mut Ctx<'_, T>, f: Var, m: Var, spade: &Spade) -> Result<Var> {
    let fs = ctx.tape.shape(f).to_vec();
    let ms = ctx.tape.shape(m).to_vec();
    if fs.len() != 4 || ms.len() != 4 || fs[2..] != ms[2..] || fs[1] != spade.channels {
        return Err(Error::shape("spade_fuse", &fs, &ms));
    }
    let normed = ctx.tape.instance_norm(f, T::lit(SPADE_EPS))?;
    let (gamma, beta) = spade.modulation(ctx, m)?;
    let scaled = ctx.tape.mul(gamma, normed)?;
    ctx.tape.add(scaled, beta)
}

/// Scales the input channels of `w: [O, I, k, k]` by each row of
/// `alphas: [R, I]` and normalizes every output filter to unit L2 norm.
/// Returns `[R·O, I, k, k]`, region-major.
pub fn mod_demod<T: Real>(tape: &mut Tape<T>, w: Var, alphas: Var) -> Result<Var> {
    let ws = tape.shape(w).to_vec();
    let a_s = tape.shape(alphas).to_vec();
    if ws.len() != 4 || a_s.len() != 2 || a_s[1] != ws[1] {
        return Err(Error::shape("mod_demod", &ws, &a_s));
    }
    let (o, i, k, r) = (ws[0], ws[1], ws[2], a_s[0]);
    let w5 = tape.reshape(w, &[1, o, i, k, k])?;
    let a5 = tape.reshape(alphas, &[r, 1, i, 1, 1])?;
    let scaled = tape.mul(w5, a5)?;
    let sq = tape.mul(scaled, scaled)?;
    let energy = tape.sum_axes(sq, &[2, 3, 4])?;
    let energy = tape.add_scalar(energy, T::lit(DEMOD_EPS));
    let inv = tape.powf(energy, T::lit(-0.5));
    let out = tape.mul(scaled, inv)?;
    tape.reshape(out, &[r * o, i, k, k])
}

/// A 3×3 style-modulated convolution with an optional SPADE stage.
#[derive(Clone, Debug)]
pub struct StyleConv {
    pub weight: ParamId,
    /// Maps a style to per-input-channel scales.
    pub affine: Dense,
    pub bias: ParamId,
    pub spade: Option<Spade>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl StyleConv {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        (cin, cout): (usize, usize),
        style_dim: usize,
        spade: Option<(usize, usize)>,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::normal(&[cout, cin, 3, 3], 1.0, rng));
        let affine = Dense::new(store, &format!("{name}.affine"), style_dim, cin, true, rng);
        store.set(affine.b.unwrap(), Tensor::full(&[cin], T::one())).unwrap();
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        let spade = spade.map(|(classes, hidden)| Spade::new(store, &format!("{name}.spade"), classes, hidden, cout, rng));
        Self {
            weight,
            affine,
            bias,
            spade,
            in_channels: cin,
            out_channels: cout,
        }
    }

    /// Per-input-channel scales for each style row of `styles: [R, S]`.
    pub fn scales<T: Real>(&self, ctx: &mut Ctx<'_, T>, styles: Var) -> Result<Var> {
        self.affine.forward(ctx, styles)
    }

    pub fn demodulated<T: Real>(&self, ctx: &mut Ctx<'_, T>, styles: Var) -> Result<Var> {
        let alphas = self.scales(ctx, styles)?;
        let w = ctx.p(self.weight);
        mod_demod(&mut ctx.tape, w, alphas)
    }
}

/// Single-style modulated convolution plus bias.
pub fn modulated_conv<T: Real>(ctx: &mut Ctx<'_, T>, x: Var, style: Var, layer: &StyleConv) -> Result<Var> {
    let w = layer.demodulated(ctx, style)?;
    let y = ctx.tape.conv2d(x, w, 1, 1)?;
    let b = ctx.p(layer.bias);
    add_channel_bias(&mut ctx.tape, y, b)
}

/// Convolves `x` once per region with that region's style and sums the
/// results weighted by `masks: [1, R, H, W]`, then adds the bias.
pub fn regional_conv<T: Real>(
    ctx: &mut Ctx<'_, T>,
    x: Var,
    masks: Var,
    styles: Var,
    layer: &StyleConv,
) -> Result<Var> {
    let xs = ctx.tape.shape(x).to_vec();
    let ms = ctx.tape.shape(masks).to_vec();
    let regions = ctx.tape.shape(styles)[0];
    if xs.len() != 4 || ms.len() != 4 || xs[0] != 1 || ms[0] != 1 || xs[2..] != ms[2..] {
        return Err(Error::shape("regional_conv", &xs, &ms));
    }
    if ms[1] != regions {
        return Err(Error::invalid(format!("{} styles for {} regions", regions, ms[1])));
    }
    let (h, w, o) = (xs[2], xs[3], layer.out_channels);
    let kernels = layer.demodulated(ctx, styles)?;
    let y = ctx.tape.conv2d(x, kernels, 1, 1)?;
    let y = ctx.tape.reshape(y, &[1, regions, o, h, w])?;
    let m = ctx.tape.reshape(masks, &[1, regions, 1, h, w])?;
    let weighted = ctx.tape.mul(y, m)?;
    let summed = ctx.tape.sum_axes(weighted, &[1])?;
    let summed = ctx.tape.reshape(summed, &[1, o, h, w])?;
    let b = ctx.p(layer.bias);
    add_channel_bias(&mut ctx.tape, summed, b)
}

/// Semantic instance-wise convolution: class `i` of the one-hot map `m`
/// is rendered with row `i` of `styles: [K, S]`.
pub fn siw_conv<T: Real>(ctx: &mut Ctx<'_, T>, x: Var, m: Var, styles: Var, layer: &StyleConv) -> Result<Var> {
    regional_conv(ctx, x, m, styles, layer)
}

/// Blends the convolutions under two styles by the distance map
/// `p: [1, 1, H, W]` (weight `p` on `w0`, `1 − p` on `w1`), then applies the
/// layer's SPADE stage with the one-hot map `m` when it has one.
pub fn mixed_style_conv<T: Real>(
    ctx: &mut Ctx<'_, T>,
    x: Var,
    p: &Tensor<T>,
    w0: Var,
    w1: Var,
    m: Option<Var>,
    layer: &StyleConv,
) -> Result<Var> {
    if p.ndim() != 4 || p.shape()[..2] != [1, 1] {
        return Err(Error::shape("mixed_style_conv", p.shape(), &[1, 1, 0, 0]));
    }
    if let Some(v) = p.data().iter().find(|v| !(v.as_f64() >= 0.0 && v.as_f64() <= 1.0)) {
        return Err(Error::invalid(format!("distance map value {} outside [0, 1]", v.as_f64())));
    }
    let (h, w) = (p.shape()[2], p.shape()[3]);
    let mut masks = p.data().to_vec();
    masks.extend(p.data().iter().map(|&v| T::one() - v));
    let masks = ctx.constant(Tensor::new(&[1, 2, h, w], masks)?);
    let styles = ctx.tape.concat(&[w0, w1], 0)?;
    let blended = regional_conv(ctx, x, masks, styles, layer)?;
    match (&layer.spade, m) {
        (Some(spade), Some(m)) => spade_fuse(ctx, blended, m, spade),
        (Some(_), None) => Err(Error::invalid("layer has a SPADE stage but no segmap was given")),
        (None, _) => Ok(blended),
    }
}
