use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::{gradcheck, Ctx, GradcheckConfig, ParamStore, Tensor, Var};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tiny_config() -> SiwConfig {
    SiwConfig {
        classes: 2,
        resolution: 16,
        style_dim: 4,
        mapping_layers: 2,
        encoder_channels: [2, 2, 2, 3],
        block_channels: [3, 2, 2, 2, 2],
        spade_hidden: 2,
    }
}

fn random_onehot(classes: usize, h: usize, w: usize, seed: u64) -> OneHotSegmap {
    use rand::Rng;
    let mut r = rng(seed);
    let data = (0..h * w).map(|_| r.random_range(0..classes) as u8).collect();
    OneHotSegmap::from_segmap(&Segmap::new(h, w, classes, data).unwrap())
}

fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.max_abs_diff(b)
}

#[test]
fn mapping_network_shape_and_determinism() {
    let mut store = ParamStore::<f32>::new();
    let net = MappingNet::new(&mut store, STYLE_DIM, MAPPING_LAYERS, &mut rng(0));
    assert_eq!(net.layers.len(), 8);
    let z = Tensor::<f32>::normal(&[1, STYLE_DIM], 1.0, &mut rng(1));
    let run = || {
        let mut ctx = Ctx::frozen(&store);
        let zv = ctx.constant(z.clone());
        let w = net.forward(&mut ctx, zv).unwrap();
        ctx.value(w).clone()
    };
    let a = run();
    assert_eq!(a.shape(), &[1, STYLE_DIM]);
    assert!(a.is_finite());
    assert_eq!(a, run());
}

#[test]
fn mapping_network_gradients() {
    let mut store = ParamStore::<f64>::new();
    let net = MappingNet::new(&mut store, 6, 8, &mut rng(2));
    let z = Tensor::<f64>::normal(&[2, 6], 1.0, &mut rng(3));
    let probe = Tensor::<f64>::normal(&[2, 6], 1.0, &mut rng(4));
    let ids: Vec<_> = store.ids().collect();
    let report = gradcheck(
        &mut store,
        &ids,
        |ctx| {
            let zv = ctx.constant(z.clone());
            let w = net.forward(ctx, zv)?;
            let p = ctx.constant(probe.clone());
            let y = ctx.tape.mul(w, p)?;
            Ok(ctx.tape.sum(y))
        },
        &GradcheckConfig::default(),
        &mut rng(5),
    )
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

fn demod(w: &Tensor<f64>, alpha: &[f64]) -> Tensor<f64> {
    let mut tape = crate::numerics::Tape::new();
    let wv = tape.constant(w.clone());
    let av = tape.constant(Tensor::new(&[1, alpha.len()], alpha.to_vec()).unwrap());
    let out = mod_demod(&mut tape, wv, av).unwrap();
    tape.value(out).clone()
}

fn filter_norms(w: &Tensor<f64>) -> Vec<f64> {
    let per = w.numel() / w.shape()[0];
    w.data().chunks(per).map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
}

#[test]
fn demodulated_filters_have_unit_norm() {
    let mut r = rng(6);
    for _ in 0..20 {
        let w = Tensor::<f64>::normal(&[5, 4, 3, 3], 2.0, &mut r);
        let alpha = Tensor::<f64>::uniform(&[4], 3.0, &mut r).into_data();
        for n in filter_norms(&demod(&w, &alpha)) {
            assert!((n - 1.0).abs() < 1e-6, "norm {n}");
        }
    }
}

#[test]
fn demodulation_cancels_uniform_scale() {
    let mut r = rng(7);
    let w = Tensor::<f64>::normal(&[3, 4, 3, 3], 1.0, &mut r);
    let alpha = Tensor::<f64>::uniform(&[4], 1.0, &mut r).map(|v| v + 1.5).into_data();
    let base = demod(&w, &alpha);
    for c in [0.1, 3.0, 17.0] {
        let scaled: Vec<f64> = alpha.iter().map(|a| a * c).collect();
        assert!(max_diff(&base, &demod(&w, &scaled)) < 1e-6);
    }
}

#[test]
fn demodulation_keeps_unit_filters_with_unit_scales() {
    let w = Tensor::<f64>::normal(&[3, 2, 3, 3], 1.0, &mut rng(8));
    let unit = demod(&w, &[1.0, 1.0]);
    let again = demod(&unit, &[1.0, 1.0]);
    assert!(max_diff(&unit, &again) < 1e-7);
}

fn layer_f64(cin: usize, cout: usize, style_dim: usize, spade: Option<(usize, usize)>, seed: u64) -> (ParamStore<f64>, StyleConv) {
    let mut store = ParamStore::<f64>::new();
    let layer = StyleConv::new(&mut store, "t", (cin, cout), style_dim, spade, &mut rng(seed));
    let b = Tensor::uniform(&[cout], 0.5, &mut rng(seed + 100));
    store.set(layer.bias, b).unwrap();
    (store, layer)
}

#[test]
fn single_region_equals_plain_modulated_conv() {
    let (store, layer) = layer_f64(3, 4, 5, None, 9);
    let x = Tensor::<f64>::normal(&[1, 3, 6, 5], 1.0, &mut rng(10));
    let s = Tensor::<f64>::normal(&[1, 5], 1.0, &mut rng(11));
    let mut ctx = Ctx::frozen(&store);
    let (xv, sv) = (ctx.constant(x), ctx.constant(s));
    let m = ctx.constant(Tensor::full(&[1, 1, 6, 5], 1.0));
    let a = siw_conv(&mut ctx, xv, m, sv, &layer).unwrap();
    let b = modulated_conv(&mut ctx, xv, sv, &layer).unwrap();
    assert_eq!(ctx.value(a), ctx.value(b));
}

#[test]
fn identical_styles_make_the_segmap_irrelevant() {
    let (store, layer) = layer_f64(2, 3, 4, None, 12);
    let x = Tensor::<f64>::normal(&[1, 2, 5, 5], 1.0, &mut rng(13));
    let s = Tensor::<f64>::normal(&[1, 4], 1.0, &mut rng(14));
    let styles = Tensor::new(&[3, 4], [s.data(), s.data(), s.data()].concat()).unwrap();
    let mut ctx = Ctx::frozen(&store);
    let (xv, sv, one) = (ctx.constant(x), ctx.constant(styles), ctx.constant(s));
    let plain = modulated_conv(&mut ctx, xv, one, &layer).unwrap();
    for seed in 0..3 {
        let m = ctx.constant(random_onehot(3, 5, 5, seed).to_tensor());
        let y = siw_conv(&mut ctx, xv, m, sv, &layer).unwrap();
        assert!(max_diff(ctx.value(y), ctx.value(plain)) < 1e-6);
    }
}

#[test]
fn regional_conv_matches_brute_force() {
    let (store, layer) = layer_f64(1, 2, 3, None, 15);
    let x = Tensor::<f64>::normal(&[1, 1, 4, 4], 1.0, &mut rng(16));
    let styles = Tensor::<f64>::normal(&[2, 3], 1.0, &mut rng(17));
    let onehot = random_onehot(2, 4, 4, 18);
    let mut ctx = Ctx::frozen(&store);
    let (xv, sv) = (ctx.constant(x.clone()), ctx.constant(styles.clone()));
    let m = ctx.constant(onehot.to_tensor());
    let y = siw_conv(&mut ctx, xv, m, sv, &layer).unwrap();
    let got = ctx.value(y).clone();

    let w = store.get(layer.weight).data();
    let aw = store.get(layer.affine.w).data();
    let ab = store.get(layer.affine.b.unwrap()).data();
    let bias = store.get(layer.bias).data();
    for o in 0..2 {
        for py in 0..4usize {
            for px in 0..4usize {
                let region = onehot.label(py, px);
                let s = &styles.data()[region * 3..region * 3 + 3];
                let alpha = ab[0] + (0..3).map(|j| aw[j] * s[j]).sum::<f64>();
                let filt: Vec<f64> = (0..9).map(|t| w[o * 9 + t] * alpha).collect();
                let norm = (filt.iter().map(|v| v * v).sum::<f64>() + 1e-8).sqrt();
                let mut acc = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (iy, ix) = (py as i64 + ky as i64 - 1, px as i64 + kx as i64 - 1);
                        if (0..4).contains(&iy) && (0..4).contains(&ix) {
                            acc += filt[ky * 3 + kx] / norm * x.data()[(iy * 4 + ix) as usize];
                        }
                    }
                }
                let expect = acc + bias[o];
                let v = got.data()[(o * 4 + py) * 4 + px];
                assert!((v - expect).abs() < 1e-6, "({o},{py},{px}): {v} vs {expect}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn permuting_classes_with_styles_is_invariant(seed in 0u64..1000, shift in 1usize..3) {
        let k = 3;
        let (store, layer) = layer_f64(2, 2, 3, None, seed);
        let x = Tensor::<f64>::normal(&[1, 2, 4, 5], 1.0, &mut rng(seed + 1));
        let styles = Tensor::<f64>::normal(&[k, 3], 1.0, &mut rng(seed + 2));
        let onehot = random_onehot(k, 4, 5, seed + 3);
        let perm = |i: usize| (i + shift) % k;
        let mut pm = vec![0.0; k * 20];
        let mut ps = vec![0.0; k * 3];
        let dense = onehot.to_tensor::<f64>();
        for i in 0..k {
            pm[perm(i) * 20..perm(i) * 20 + 20].copy_from_slice(&dense.data()[i * 20..i * 20 + 20]);
            ps[perm(i) * 3..perm(i) * 3 + 3].copy_from_slice(&styles.data()[i * 3..i * 3 + 3]);
        }
        let mut ctx = Ctx::frozen(&store);
        let xv = ctx.constant(x);
        let (m1, s1) = (ctx.constant(dense), ctx.constant(styles));
        let (m2, s2) = (ctx.constant(Tensor::new(&[1, k, 4, 5], pm).unwrap()), ctx.constant(Tensor::new(&[k, 3], ps).unwrap()));
        let a = siw_conv(&mut ctx, xv, m1, s1, &layer).unwrap();
        let b = siw_conv(&mut ctx, xv, m2, s2, &layer).unwrap();
        prop_assert!(max_diff(ctx.value(a), ctx.value(b)) < 1e-6);
    }
}

#[test]
fn siw_conv_rejects_style_count_mismatch() {
    let (store, layer) = layer_f64(2, 2, 3, None, 19);
    let mut ctx = Ctx::frozen(&store);
    let x = ctx.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let m = ctx.constant(random_onehot(3, 4, 4, 0).to_tensor());
    let s = ctx.constant(Tensor::zeros(&[2, 3]));
    assert!(siw_conv(&mut ctx, x, m, s, &layer).is_err());
}

fn identity_spade(store: &mut ParamStore<f64>, spade: &Spade) {
    let c = spade.channels;
    let hw = store.get(spade.head.w).shape().to_vec();
    store.set(spade.head.w, Tensor::zeros(&hw)).unwrap();
    let b: Vec<f64> = (0..2 * c).map(|i| if i < c { 1.0 } else { 0.0 }).collect();
    store.set(spade.head.b, Tensor::new(&[2 * c], b).unwrap()).unwrap();
}

#[test]
fn identity_spade_is_pure_instance_norm() {
    let mut store = ParamStore::<f64>::new();
    let spade = Spade::new(&mut store, "s", 3, 4, 2, &mut rng(20));
    identity_spade(&mut store, &spade);
    let f = Tensor::<f64>::normal(&[1, 2, 6, 6], 3.0, &mut rng(21)).map(|v| v + 5.0);
    let m = random_onehot(3, 6, 6, 22);
    let mut ctx = Ctx::frozen(&store);
    let (fv, mv) = (ctx.constant(f), ctx.constant(m.to_tensor()));
    let y = spade_fuse(&mut ctx, fv, mv, &spade).unwrap();
    for ch in ctx.value(y).data().chunks(36) {
        let mean = ch.iter().sum::<f64>() / 36.0;
        let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 36.0;
        assert!(mean.abs() <= 1e-5);
        assert!((var - 1.0).abs() < 1e-3, "variance {var}");
    }
    let again = spade.modulation(&mut ctx, mv).unwrap();
    let first = spade.modulation(&mut ctx, mv).unwrap();
    assert_eq!(ctx.value(again.0), ctx.value(first.0));
    assert_eq!(ctx.value(again.1), ctx.value(first.1));
}

#[test]
fn spade_closed_form_two_by_two() {
    let mut store = ParamStore::<f64>::new();
    let spade = Spade::new(&mut store, "s", 1, 1, 1, &mut rng(23));
    store.set(spade.head.w, Tensor::zeros(&[2, 1, 3, 3])).unwrap();
    store.set(spade.head.b, Tensor::new(&[2], vec![2.0, -0.5]).unwrap()).unwrap();
    let f = [1.0, 2.0, 3.0, 6.0];
    let mut ctx = Ctx::frozen(&store);
    let fv = ctx.constant(Tensor::new(&[1, 1, 2, 2], f.to_vec()).unwrap());
    let mv = ctx.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
    let y = spade_fuse(&mut ctx, fv, mv, &spade).unwrap();
    let mean = 3.0;
    let var = (4.0 + 1.0 + 0.0 + 9.0) / 4.0;
    for (v, x) in ctx.value(y).data().iter().zip(f) {
        let expect = 2.0 * (x - mean) / (var + 1e-5f64).sqrt() - 0.5;
        assert!((v - expect).abs() < 1e-12);
    }
}

fn endpoint_checks(store: &ParamStore<f64>, layer: &StyleConv, m: &OneHotSegmap, seed: u64) {
    let (h, w) = (m.height, m.width);
    let x = Tensor::<f64>::normal(&[1, layer.in_channels, h, w], 1.0, &mut rng(seed));
    let sd = store.get(layer.affine.w).shape()[1];
    let mut ctx = Ctx::frozen(store);
    let xv = ctx.constant(x);
    let w0 = ctx.constant(Tensor::normal(&[1, sd], 1.0, &mut rng(seed + 1)));
    let w1 = ctx.constant(Tensor::normal(&[1, sd], 1.0, &mut rng(seed + 2)));
    let mv = ctx.constant(m.to_tensor());
    let full = |v: f64| Tensor::<f64>::full(&[1, 1, h, w], v);
    let single = |ctx: &mut Ctx<'_, f64>, style: Var| -> Tensor<f64> {
        let y = modulated_conv(ctx, xv, style, layer).unwrap();
        let y = match &layer.spade {
            Some(s) => spade_fuse(ctx, y, mv, s).unwrap(),
            None => y,
        };
        ctx.value(y).clone()
    };
    let p1 = mixed_style_conv(&mut ctx, xv, &full(1.0), w0, w1, Some(mv), layer).unwrap();
    let p1 = ctx.value(p1).clone();
    assert!(max_diff(&p1, &single(&mut ctx, w0)) < 1e-6);
    let p0 = mixed_style_conv(&mut ctx, xv, &full(0.0), w0, w1, Some(mv), layer).unwrap();
    let p0 = ctx.value(p0).clone();
    assert!(max_diff(&p0, &single(&mut ctx, w1)) < 1e-6);

    let bare = StyleConv {
        spade: None,
        ..layer.clone()
    };
    let pre = |ctx: &mut Ctx<'_, f64>, p: f64| {
        let y = mixed_style_conv(ctx, xv, &full(p), w0, w1, None, &bare).unwrap();
        ctx.value(y).clone()
    };
    let (a, b, mid) = (pre(&mut ctx, 1.0), pre(&mut ctx, 0.0), pre(&mut ctx, 0.5));
    let avg = Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| 0.5 * (x + y)).collect()).unwrap();
    assert!(max_diff(&mid, &avg) < 1e-6);
}

#[test]
fn blend_endpoints_and_midpoint() {
    let (store, layer) = layer_f64(3, 2, 4, Some((3, 2)), 24);
    endpoint_checks(&store, &layer, &random_onehot(3, 5, 5, 25), 26);
    let (store, layer) = layer_f64(2, 3, 4, None, 27);
    endpoint_checks(&store, &layer, &random_onehot(3, 4, 6, 28), 29);
}

#[test]
fn blend_identities_hold_at_every_generator_layer() {
    let cfg = tiny_config();
    let mut store = ParamStore::<f64>::new();
    let gen = Generator::new(&mut store, cfg, &mut rng(30)).unwrap();
    let m = random_onehot(cfg.classes, cfg.resolution, cfg.resolution, 31);
    let mut size = cfg.resolution >> 4;
    for (b, block) in gen.blocks.iter().enumerate() {
        if block.upsample {
            size *= 2;
        }
        assert_eq!(block.convs[0].spade.is_some(), (1..=3).contains(&b));
        let local = m.downsample(cfg.resolution / size).unwrap();
        for conv in &block.convs {
            endpoint_checks(&store, conv, &local, 40 + b as u64);
        }
    }
}

#[test]
fn distance_map_must_lie_in_unit_interval() {
    let (store, layer) = layer_f64(1, 1, 2, None, 32);
    let mut ctx = Ctx::frozen(&store);
    let x = ctx.constant(Tensor::zeros(&[1, 1, 3, 3]));
    let w = ctx.constant(Tensor::zeros(&[1, 2]));
    let bad = Tensor::<f64>::full(&[1, 1, 3, 3], 1.5);
    assert!(mixed_style_conv(&mut ctx, x, &bad, w, w, None, &layer).is_err());
    let m = random_onehot(2, 3, 3, 0);
    assert!(m.distance_map::<f64>(&[0.5, 1.2]).is_ok());
    assert!(StyleState::mixed(2, (0, 1), vec![0.5, 1.2]).validate(2, 2).is_err());
}

#[test]
fn encoder_halves_four_times() {
    let cfg = SiwConfig::default();
    let mut store = ParamStore::<f32>::new();
    let enc = SegEncoder::new(&mut store, &cfg, &mut rng(33));
    let m = random_onehot(cfg.classes, 64, 64, 34);
    let run = || {
        let mut ctx = Ctx::frozen(&store);
        let mv = ctx.constant(m.to_tensor());
        let y = enc.forward(&mut ctx, mv).unwrap();
        ctx.value(y).clone()
    };
    let y = run();
    assert_eq!(y.shape(), &[1, 128, 4, 4]);
    assert_eq!(y, run());
}

#[test]
fn non_one_hot_input_is_rejected() {
    assert!(OneHotSegmap::from_dense(2, 1, 2, &[1.0, 0.0, 0.0, 1.0]).is_ok());
    assert!(OneHotSegmap::from_dense(2, 1, 2, &[1.0, 0.0, 1.0, 1.0]).is_err());
    assert!(OneHotSegmap::from_dense(2, 1, 2, &[0.5, 0.0, 0.5, 1.0]).is_err());
    assert!(OneHotSegmap::from_dense(2, 1, 2, &[0.0, 0.0, 0.0, 1.0]).is_err());
}

fn generator_loss(gen: &Generator, m: &OneHotSegmap, styles: &StyleState, probe: &Tensor<f64>, ctx: &mut Ctx<'_, f64>) -> crate::Result<Var> {
    let y = gen.forward(ctx, m, styles)?;
    let p = ctx.constant(probe.clone());
    let prod = ctx.tape.mul(y, p)?;
    Ok(ctx.tape.sum(prod))
}

#[test]
fn encoder_and_generator_gradients() {
    let cfg = SiwConfig {
        resolution: 32,
        encoder_channels: [4, 4, 4, 4],
        block_channels: [4, 4, 4, 4, 4],
        spade_hidden: 4,
        ..tiny_config()
    };
    let mut store = ParamStore::<f64>::new();
    let gen = Generator::new(&mut store, cfg, &mut rng(35)).unwrap();
    let m = OneHotSegmap::from_segmap(&blob_segmap(32, 2));
    let styles = StyleState::mixed(cfg.style_dim, (1, 2), vec![0.3, 0.8]);
    let probe = Tensor::<f64>::normal(&[1, 3, 32, 32], 1.0, &mut rng(37));
    let ids: Vec<_> = store.ids().collect();
    let gc = GradcheckConfig {
        step: 1e-6,
        max_per_param: Some(6),
        abs_floor: 1e-3,
        ..GradcheckConfig::default()
    };
    let report = gradcheck(&mut store, &ids, |ctx| generator_loss(&gen, &m, &styles, &probe, ctx), &gc, &mut rng(38)).unwrap();
    assert!(report.passes(1e-4), "{report:?}");

    let enc_ids: Vec<_> = gen.encoder.convs.iter().flat_map(|c| [c.w, c.b]).collect();
    let probe = Tensor::<f64>::normal(&[1, 4, 2, 2], 1.0, &mut rng(39));
    let report = gradcheck(
        &mut store,
        &enc_ids,
        |ctx| {
            let mv = ctx.constant(m.to_tensor());
            let h = gen.encoder.forward(ctx, mv)?;
            let p = ctx.constant(probe.clone());
            let y = ctx.tape.mul(h, p)?;
            Ok(ctx.tape.sum(y))
        },
        &GradcheckConfig::default(),
        &mut rng(40),
    )
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn generated_images_are_finite_and_deterministic() {
    let cfg = SiwConfig {
        resolution: 32,
        ..SiwConfig::default()
    };
    let mut store = ParamStore::<f32>::new();
    let gen = Generator::new(&mut store, cfg, &mut rng(41)).unwrap();
    let m = random_onehot(cfg.classes, 32, 32, 42);
    let styles = StyleState::mixed(cfg.style_dim, (3, 4), vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
    let a = generate_image(&gen, &store, &m, &styles).unwrap();
    assert_eq!((a.height, a.width, a.data.len()), (32, 32, 3 * 32 * 32));
    assert!(a.data.iter().all(|v| v.is_finite()));
    assert_eq!(a, generate_image(&gen, &store, &m, &styles).unwrap());
    let wrong = random_onehot(cfg.classes, 16, 16, 0);
    assert!(generate_image(&gen, &store, &wrong, &styles).is_err());
}

#[test]
fn config_and_weights_round_trip() {
    let cfg = tiny_config();
    assert_eq!(SiwConfig::parse(&cfg.to_text()).unwrap(), cfg);
    assert!(SiwConfig::parse("classes=2\n").is_err());
    let mut store = ParamStore::<f32>::new();
    let gen = Generator::new(&mut store, cfg, &mut rng(43)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.sofc");
    save_generator(&gen, &store, &path).unwrap();
    let (g2, s2) = load_generator(&path).unwrap();
    assert_eq!(g2.config, cfg);
    assert!(store.iter().all(|(n, _)| n.starts_with("siw/")));
    let m = random_onehot(2, 16, 16, 44);
    let styles = StyleState::tied(cfg.style_dim, 2, 5);
    assert_eq!(
        generate_image(&gen, &store, &m, &styles).unwrap(),
        generate_image(&g2, &s2, &m, &styles).unwrap()
    );
}

fn blob_segmap(res: usize, classes: usize) -> Segmap {
    let c = res as f64 / 2.0;
    let data = (0..res * res)
        .map(|p| {
            let (y, x) = ((p / res) as f64 - c, (p % res) as f64 - c);
            let r = (x * x + y * y).sqrt() / c;
            ((r * classes as f64) as usize).min(classes - 1) as u8
        })
        .collect();
    Segmap::new(res, res, classes, data).unwrap()
}

#[test]
fn overfit_with_zero_steps_reports_the_initial_psnr() {
    let cfg = tiny_config();
    let seg = blob_segmap(16, 2);
    let target = flat_color_target(&seg);
    let m = OneHotSegmap::from_segmap(&seg);
    let r = overfit_single(cfg, &target, &m, &OverfitConfig { steps: 0, ..OverfitConfig::default() }).unwrap();
    assert_eq!(r.psnr.len(), 1);
    let styles = StyleState::tied(cfg.style_dim, 2, 0);
    let img = generate_image(&r.generator, &r.store, &m, &styles).unwrap();
    assert!((psnr(img.mse(&target).unwrap()) - r.psnr[0]).abs() < 1e-4);
}

#[test]
fn overfit_psnr_rises_in_windowed_medians() {
    let cfg = SiwConfig {
        resolution: 32,
        style_dim: 32,
        ..SiwConfig::default()
    };
    let seg = blob_segmap(32, 6);
    let target = flat_color_target(&seg);
    let m = OneHotSegmap::from_segmap(&seg);
    let r = overfit_single(cfg, &target, &m, &OverfitConfig { steps: 300, ..OverfitConfig::default() }).unwrap();
    let medians: Vec<f64> = r
        .psnr
        .chunks(100)
        .map(|c| {
            let mut v = c.to_vec();
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        })
        .collect();
    assert!(medians.windows(2).all(|w| w[1] >= w[0]), "{medians:?}");
    assert!(medians.last().unwrap() > &(r.psnr[0] + 3.0));
}

#[test]
fn mixed_style_conv_gradients() {
    let (mut store, layer) = layer_f64(3, 2, 4, Some((3, 2)), 41);
    let m = random_onehot(3, 5, 5, 42);
    let p = m.distance_map::<f64>(&[0.2, 0.7, 1.0]).unwrap();
    let x = Tensor::<f64>::normal(&[1, 3, 5, 5], 1.0, &mut rng(43));
    let z0 = Tensor::<f64>::normal(&[1, 4], 1.0, &mut rng(44));
    let z1 = Tensor::<f64>::normal(&[1, 4], 1.0, &mut rng(47));
    let probe = Tensor::<f64>::normal(&[1, 2, 5, 5], 1.0, &mut rng(45));
    let ids: Vec<_> = store.ids().collect();
    let report = gradcheck(
        &mut store,
        &ids,
        |ctx| {
            let xv = ctx.constant(x.clone());
            let w0 = ctx.constant(z0.clone());
            let w1 = ctx.constant(z1.clone());
            let mv = ctx.constant(m.to_tensor());
            let y = mixed_style_conv(ctx, xv, &p, w0, w1, Some(mv), &layer)?;
            let pr = ctx.constant(probe.clone());
            let y = ctx.tape.mul(y, pr)?;
            Ok(ctx.tape.sum(y))
        },
        &GradcheckConfig::default(),
        &mut rng(46),
    )
    .unwrap();
    assert!(report.passes(1e-5), "{report:?}");
}


#[test]
fn packaged_checks_pass() {
    let cfg = SiwConfig {
        resolution: 16,
        ..tiny_config()
    };
    for c in checks::identity_suite(cfg, 3).unwrap().into_iter().chain(checks::gradient_suite(4).unwrap()) {
        assert!(c.passed(), "{c:?}");
    }
}
