//! Self-checks of the texturing stack that can run outside the test harness:
//! algebraic identities of the style layers and finite-difference gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{mixed_style_conv, mod_demod, modulated_conv, siw_conv, MappingNet, StyleConv};
use super::{Generator, OneHotSegmap, SiwConfig, StyleState};
use crate::error::Result;
use crate::numerics::{gradcheck, Ctx, GradcheckConfig, ParamStore, Tape, Tensor, Var};

/// Measured error of one check against its tolerance.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    fn new(name: impl Into<String>, error: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            error,
            tolerance,
        }
    }

    pub fn passed(&self) -> bool {
        self.error.is_finite() && self.error < self.tolerance
    }
}

pub const IDENTITY_TOLERANCE: f64 = 1e-6;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_onehot(classes: usize, h: usize, w: usize, seed: u64) -> OneHotSegmap {
    use rand::Rng;
    let mut r = rng(seed);
    let labels: Vec<u8> = (0..h * w).map(|_| r.random_range(0..classes) as u8).collect();
    let seg = crate::segmap::Segmap::new(h, w, classes, labels).expect("valid labels");
    OneHotSegmap::from_segmap(&seg)
}

fn test_layer(cin: usize, cout: usize, style_dim: usize, spade: Option<(usize, usize)>, seed: u64) -> Result<(ParamStore<f64>, StyleConv)> {
    let mut store = ParamStore::<f64>::new();
    let layer = StyleConv::new(&mut store, "check", (cin, cout), style_dim, spade, &mut rng(seed));
    store.set(layer.bias, Tensor::uniform(&[cout], 0.5, &mut rng(seed + 100)))?;
    Ok((store, layer))
}

fn demod_unit_norm(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let w = Tensor::<f64>::normal(&[5, 4, 3, 3], 2.0, &mut r);
        let alpha = Tensor::<f64>::uniform(&[1, 4], 3.0, &mut r);
        let mut tape = Tape::new();
        let (wv, av) = (tape.constant(w), tape.constant(alpha));
        let out = mod_demod(&mut tape, wv, av)?;
        for filt in tape.value(out).data().chunks(36) {
            let n = filt.iter().map(|v| v * v).sum::<f64>().sqrt();
            worst = worst.max((n - 1.0).abs());
        }
    }
    Ok(worst)
}

fn single_region_reduction(seed: u64) -> Result<f64> {
    let (store, layer) = test_layer(3, 4, 5, None, seed)?;
    let mut ctx = Ctx::frozen(&store);
    let x = ctx.constant(Tensor::normal(&[1, 3, 6, 5], 1.0, &mut rng(seed + 1)));
    let s = ctx.constant(Tensor::normal(&[1, 5], 1.0, &mut rng(seed + 2)));
    let m = ctx.constant(Tensor::full(&[1, 1, 6, 5], 1.0));
    let a = siw_conv(&mut ctx, x, m, s, &layer)?;
    let b = modulated_conv(&mut ctx, x, s, &layer)?;
    Ok(ctx.value(a).max_abs_diff(ctx.value(b)))
}

fn partition_of_unity(seed: u64) -> Result<f64> {
    let (store, layer) = test_layer(2, 3, 4, None, seed)?;
    let s = Tensor::<f64>::normal(&[1, 4], 1.0, &mut rng(seed + 1));
    let styles = Tensor::new(&[3, 4], [s.data(), s.data(), s.data()].concat())?;
    let mut ctx = Ctx::frozen(&store);
    let x = ctx.constant(Tensor::normal(&[1, 2, 5, 5], 1.0, &mut rng(seed + 2)));
    let (sv, one) = (ctx.constant(styles), ctx.constant(s));
    let plain = modulated_conv(&mut ctx, x, one, &layer)?;
    let mut worst = 0.0f64;
    for k in 0..3 {
        let m = ctx.constant(random_onehot(3, 5, 5, seed + 10 + k).to_tensor());
        let y = siw_conv(&mut ctx, x, m, sv, &layer)?;
        worst = worst.max(ctx.value(y).max_abs_diff(ctx.value(plain)));
    }
    Ok(worst)
}

/// Evaluates the regional convolution pixel by pixel on a 4×4 input.
fn brute_force_regional(seed: u64) -> Result<f64> {
    let (store, layer) = test_layer(1, 2, 3, None, seed)?;
    let x = Tensor::<f64>::normal(&[1, 1, 4, 4], 1.0, &mut rng(seed + 1));
    let styles = Tensor::<f64>::normal(&[2, 3], 1.0, &mut rng(seed + 2));
    let onehot = random_onehot(2, 4, 4, seed + 3);
    let mut ctx = Ctx::frozen(&store);
    let (xv, sv) = (ctx.constant(x.clone()), ctx.constant(styles.clone()));
    let m = ctx.constant(onehot.to_tensor());
    let y = siw_conv(&mut ctx, xv, m, sv, &layer)?;
    let got = ctx.value(y).data();

    let w = store.get(layer.weight).data();
    let aw = store.get(layer.affine.w).data();
    let ab = layer.affine.b.map(|b| store.get(b).data()[0]).unwrap_or(0.0);
    let bias = store.get(layer.bias).data();
    let mut worst = 0.0f64;
    for o in 0..2 {
        for py in 0..4i64 {
            for px in 0..4i64 {
                let region = onehot.label(py as usize, px as usize);
                let s = &styles.data()[region * 3..region * 3 + 3];
                let alpha = ab + (0..3).map(|j| aw[j] * s[j]).sum::<f64>();
                let filt: Vec<f64> = (0..9).map(|t| w[o * 9 + t] * alpha).collect();
                let norm = (filt.iter().map(|v| v * v).sum::<f64>() + 1e-8).sqrt();
                let mut acc = bias[o];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (iy, ix) = (py + ky - 1, px + kx - 1);
                        if (0..4).contains(&iy) && (0..4).contains(&ix) {
                            acc += filt[(ky * 3 + kx) as usize] / norm * x.data()[(iy * 4 + ix) as usize];
                        }
                    }
                }
                let v = got[(o * 4 + py as usize) * 4 + px as usize];
                worst = worst.max((v - acc).abs());
            }
        }
    }
    Ok(worst)
}

/// Largest deviation among the blend identities of one layer: `P ≡ 1` and
/// `P ≡ 0` reproduce the single-style branches, `P ≡ 0.5` averages them.
fn blend_identities(store: &ParamStore<f64>, layer: &StyleConv, m: &OneHotSegmap, seed: u64) -> Result<f64> {
    let (h, w) = (m.height, m.width);
    let sd = store.get(layer.affine.w).shape()[1];
    let mut ctx = Ctx::frozen(store);
    let x = ctx.constant(Tensor::normal(&[1, layer.in_channels, h, w], 1.0, &mut rng(seed)));
    let w0 = ctx.constant(Tensor::normal(&[1, sd], 1.0, &mut rng(seed + 1)));
    let w1 = ctx.constant(Tensor::normal(&[1, sd], 1.0, &mut rng(seed + 2)));
    let mv = ctx.constant(m.to_tensor());
    let full = |v: f64| Tensor::<f64>::full(&[1, 1, h, w], v);
    let single = |ctx: &mut Ctx<'_, f64>, style: Var| -> Result<Tensor<f64>> {
        let y = modulated_conv(ctx, x, style, layer)?;
        let y = match &layer.spade {
            Some(s) => super::layers::spade_fuse(ctx, y, mv, s)?,
            None => y,
        };
        Ok(ctx.value(y).clone())
    };
    let mut worst = 0.0f64;
    for (p, style) in [(1.0, w0), (0.0, w1)] {
        let y = mixed_style_conv(&mut ctx, x, &full(p), w0, w1, Some(mv), layer)?;
        let y = ctx.value(y).clone();
        worst = worst.max(y.max_abs_diff(&single(&mut ctx, style)?));
    }
    let bare = StyleConv {
        spade: None,
        ..layer.clone()
    };
    let mut pre = |p: f64| -> Result<Tensor<f64>> {
        let y = mixed_style_conv(&mut ctx, x, &full(p), w0, w1, None, &bare)?;
        Ok(ctx.value(y).clone())
    };
    let (a, b, mid) = (pre(1.0)?, pre(0.0)?, pre(0.5)?);
    let avg = Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| 0.5 * (x + y)).collect())?;
    Ok(worst.max(mid.max_abs_diff(&avg)))
}

fn generator_blend_identities(config: SiwConfig, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut store = ParamStore::<f64>::new();
    let gen = Generator::new(&mut store, config, &mut rng(seed))?;
    let m = random_onehot(config.classes, config.resolution, config.resolution, seed + 1);
    let mut size = config.resolution >> gen.encoder.convs.len();
    let mut out = Vec::new();
    for (b, block) in gen.blocks.iter().enumerate() {
        if block.upsample {
            size *= 2;
        }
        let local = m.downsample(config.resolution / size)?;
        for (c, conv) in block.convs.iter().enumerate() {
            let err = blend_identities(&store, conv, &local, seed + 10 * b as u64 + c as u64)?;
            out.push(CheckOutcome::new(format!("blend identities, block {b} conv {c}"), err, IDENTITY_TOLERANCE));
        }
    }
    Ok(out)
}

/// Layer identities, with the blend identities evaluated at every layer of a
/// generator built from `config`.
pub fn identity_suite(config: SiwConfig, seed: u64) -> Result<Vec<CheckOutcome>> {
    let tol = IDENTITY_TOLERANCE;
    let mut out = vec![
        CheckOutcome::new("single region reduces to modulated conv", single_region_reduction(seed)?, tol),
        CheckOutcome::new("identical styles ignore the segmap", partition_of_unity(seed + 1)?, tol),
        CheckOutcome::new("demodulated filters have unit norm", demod_unit_norm(seed + 2)?, tol),
        CheckOutcome::new("regional conv matches brute force on 4x4", brute_force_regional(seed + 3)?, tol),
    ];
    let (store, layer) = test_layer(3, 2, 4, Some((3, 2)), seed + 4)?;
    let err = blend_identities(&store, &layer, &random_onehot(3, 5, 5, seed + 5), seed + 6)?;
    out.push(CheckOutcome::new("blend identities, standalone layer", err, tol));
    out.extend(generator_blend_identities(config, seed + 7)?);
    Ok(out)
}

fn probe_loss(ctx: &mut Ctx<'_, f64>, y: Var, probe: &Tensor<f64>) -> Result<Var> {
    let p = ctx.constant(probe.clone());
    let prod = ctx.tape.mul(y, p)?;
    Ok(ctx.tape.sum(prod))
}

/// Central-difference gradient checks at 64-bit for the mapping network, the
/// segmap encoder and a narrow full generator.
pub fn gradient_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();

    let mut store = ParamStore::<f64>::new();
    let net = MappingNet::new(&mut store, 6, super::MAPPING_LAYERS, &mut rng(seed));
    let z = Tensor::<f64>::normal(&[2, 6], 1.0, &mut rng(seed + 1));
    let probe = Tensor::<f64>::normal(&[2, 6], 1.0, &mut rng(seed + 2));
    let ids: Vec<_> = store.ids().collect();
    let report = gradcheck(
        &mut store,
        &ids,
        |ctx| {
            let zv = ctx.constant(z.clone());
            let w = net.forward(ctx, zv)?;
            probe_loss(ctx, w, &probe)
        },
        &GradcheckConfig {
            abs_floor: 1e-6,
            ..GradcheckConfig::default()
        },
        &mut rng(seed + 3),
    )?;
    out.push(CheckOutcome::new("mapping network gradients", report.max_rel_error, GRADIENT_TOLERANCE));

    let config = SiwConfig {
        classes: 2,
        resolution: 32,
        style_dim: 4,
        mapping_layers: 2,
        encoder_channels: [4; 4],
        block_channels: [4; 5],
        spade_hidden: 4,
    };
    let mut store = ParamStore::<f64>::new();
    let gen = Generator::new(&mut store, config, &mut rng(seed + 4))?;
    let m = random_onehot(config.classes, config.resolution, config.resolution, seed + 11);
    let styles = StyleState::mixed(config.style_dim, (seed + 5, seed + 6), vec![0.3, 0.8]);

    let enc_ids: Vec<_> = gen.encoder.convs.iter().flat_map(|c| [c.w, c.b]).collect();
    let side = config.resolution >> 4;
    let probe = Tensor::<f64>::normal(&[1, 4, side, side], 1.0, &mut rng(seed + 7));
    let report = gradcheck(
        &mut store,
        &enc_ids,
        |ctx| {
            let mv = ctx.constant(m.to_tensor());
            let h = gen.encoder.forward(ctx, mv)?;
            probe_loss(ctx, h, &probe)
        },
        &GradcheckConfig::default(),
        &mut rng(seed + 8),
    )?;
    out.push(CheckOutcome::new("segmap encoder gradients", report.max_rel_error, GRADIENT_TOLERANCE));

    let r = config.resolution;
    let probe = Tensor::<f64>::normal(&[1, 3, r, r], 1.0, &mut rng(seed + 9));
    let ids: Vec<_> = store.ids().collect();
    let gc = GradcheckConfig {
        step: 1e-6,
        max_per_param: Some(6),
        abs_floor: 1e-3,
    };
    let report = gradcheck(
        &mut store,
        &ids,
        |ctx| {
            let y = gen.forward(ctx, &m, &styles)?;
            probe_loss(ctx, y, &probe)
        },
        &gc,
        &mut rng(seed + 10),
    )?;
    out.push(CheckOutcome::new("full generator gradients", report.max_rel_error, GRADIENT_TOLERANCE));
    Ok(out)
}

/// Concentric class rings centred in a square map.
pub fn ring_segmap(res: usize, classes: usize) -> OneHotSegmap {
    let c = res as f64 / 2.0;
    let labels = (0..res * res)
        .map(|p| {
            let (y, x) = ((p / res) as f64 - c, (p % res) as f64 - c);
            let r = (x * x + y * y).sqrt() / c;
            ((r * classes as f64) as usize).min(classes - 1) as u8
        })
        .collect();
    let seg = crate::segmap::Segmap::new(res, res, classes, labels).expect("valid labels");
    OneHotSegmap::from_segmap(&seg)
}
