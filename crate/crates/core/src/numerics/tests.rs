use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

#[test]
fn linear_identity_and_row_sum() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[1, 2], &[1.0, 2.0]));
    let w = tape.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = tape.constant(t64(&[2], &[0.0, 0.0]));
    let y = tape.linear(x, w, Some(b)).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

    let x = tape.constant(t64(&[1, 2], &[1.0, -1.0]));
    let w = tape.constant(t64(&[1, 2], &[1.0, 1.0]));
    let y = tape.linear(x, w, None).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0]);
}

#[test]
fn linear_matches_brute_force_matmul() {
    let mut r = rng(1);
    let x = Tensor::<f32>::uniform(&[3, 4], 1.0, &mut r);
    let w = Tensor::<f32>::uniform(&[2, 4], 1.0, &mut r);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let y = tape.linear(xv, wv, None).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let mut acc = 0.0f64;
            for k in 0..4 {
                acc += x.data()[i * 4 + k] as f64 * w.data()[j * 4 + k] as f64;
            }
            let got = tape.value(y).data()[i * 2 + j] as f64;
            assert!((got - acc).abs() <= 1e-6, "{got} vs {acc}");
        }
    }
}

#[test]
fn linear_shape_error_names_both_shapes() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[2, 3]));
    let w = tape.constant(Tensor::zeros(&[4, 5]));
    match tape.linear(x, w, None) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 5]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn activation_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[1], &[-1.0]));
    let r = activation(&mut tape, x, Activation::Relu).unwrap();
    assert_eq!(tape.value(r).item(), 0.0);
    let l = activation(&mut tape, x, Activation::LeakyRelu(0.2)).unwrap();
    assert!((tape.value(l).item() + 0.2).abs() < 1e-15);
    let z = tape.constant(t64(&[3], &[0.0, 0.0, 0.0]));
    let s = activation(&mut tape, z, Activation::Softmax { axis: 0 }).unwrap();
    for &p in tape.value(s).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    assert!(matches!(
        activation(&mut tape, z, Activation::Softmax { axis: 1 }),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::<f64>::new();
    let g = tape.constant(t64(&[4], &[1.0; 4]));
    let b = tape.constant(t64(&[4], &[0.0; 4]));
    let c = tape.constant(t64(&[1, 4], &[3.0; 4]));
    let y = tape.layer_norm(c, Some(g), Some(b), 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let mut r = rng(2);
    let x = tape.constant(Tensor::uniform(&[1, 4], 3.0, &mut r));
    let y = tape.layer_norm(x, Some(g), Some(b), 1e-5).unwrap();
    let d = tape.value(y).data();
    let mean = d.iter().sum::<f64>() / 4.0;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
    assert!(mean.abs() <= 1e-6);
    assert!((var - 1.0).abs() <= 1e-3);

    // [0, 2]: mean 1, variance 1 -> (x - 1) / sqrt(1 + eps)
    let g2 = tape.constant(t64(&[2], &[1.0, 1.0]));
    let b2 = tape.constant(t64(&[2], &[0.0, 0.0]));
    let x = tape.constant(t64(&[1, 2], &[0.0, 2.0]));
    let y = tape.layer_norm(x, Some(g2), Some(b2), 1e-5).unwrap();
    let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((tape.value(y).data()[0] + expect).abs() < 1e-12);
    assert!((tape.value(y).data()[1] - expect).abs() < 1e-12);

    assert!(tape.layer_norm(x, Some(g), None, 1e-5).is_err());
}

#[test]
fn backward_simple_rules() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t64(&[3], &[1.0, -2.0, 5.0]));
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    assert!(tape.is_empty(), "graph cleared after backward");

    let x = tape.param(t64(&[1], &[3.0]));
    let sq = tape.mul(x, x).unwrap();
    let l = tape.sum(sq);
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[6.0]);

    let x = tape.param(t64(&[2], &[1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(Error::InvalidArgument(_))));
}

fn check(
    store: &mut ParamStore<f64>,
    loss: impl Fn(&mut Ctx<'_, f64>) -> crate::Result<Var>,
) -> GradcheckReport {
    let ids: Vec<_> = store.ids().collect();
    let report = gradcheck(store, &ids, loss, &GradcheckConfig::default(), &mut rng(99)).unwrap();
    assert!(report.passes(1e-4), "{report:?}");
    report
}

#[test]
fn gradcheck_two_layer_mlp_every_parameter() {
    let mut r = rng(3);
    let mut store = ParamStore::<f64>::new();
    let l1 = Dense::new(&mut store, "l1", 4, 6, true, &mut r);
    let l2 = Dense::new(&mut store, "l2", 6, 3, true, &mut r);
    let x = Tensor::<f64>::uniform(&[5, 4], 1.0, &mut r);
    let report = check(&mut store, |ctx| {
        let xv = ctx.constant(x.clone());
        let h = l1.forward(ctx, xv)?;
        let h = ctx.tape.tanh(h);
        let y = l2.forward(ctx, h)?;
        let sq = ctx.tape.mul(y, y)?;
        Ok(ctx.tape.mean(sq))
    });
    assert_eq!(report.checked, store.num_scalars());
}

#[test]
fn gradcheck_norm_softmax_and_cross_entropy() {
    let mut r = rng(4);
    let mut store = ParamStore::<f64>::new();
    let nd = NormDense::new(&mut store, "nd", 3, 5, &mut r);
    let head = Dense::new(&mut store, "head", 5, 4, true, &mut r);
    // perturb LN affine away from the identity so its gradients are exercised
    for id in [nd.gamma, nd.beta] {
        let t = Tensor::uniform(&[5], 0.5, &mut r).map(|v| v + 1.0);
        store.set(id, t).unwrap();
    }
    let x = Tensor::<f64>::uniform(&[6, 3], 1.0, &mut r);
    let targets = [0, 1, 2, 3, 1, 0];
    check(&mut store, |ctx| {
        let xv = ctx.constant(x.clone());
        let h = nd.forward(ctx, xv)?;
        let logits = head.forward(ctx, h)?;
        let ce = ctx.tape.cross_entropy(logits, &targets)?;
        let sm = ctx.tape.softmax(logits, 0)?;
        let w = ctx.constant(Tensor::uniform(&[6, 4], 1.0, &mut rng(5)));
        let weighted = ctx.tape.mul(sm, w)?;
        let s = ctx.tape.sum(weighted);
        ctx.tape.add(ce, s)
    });
}

#[test]
fn gradcheck_broadcast_binary_and_reductions() {
    let mut r = rng(6);
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", Tensor::uniform(&[2, 3, 4], 1.0, &mut r));
    let col = store.add("col", Tensor::uniform(&[2, 1, 4], 1.0, &mut r).map(|v| v + 2.0));
    let row = store.add("row", Tensor::uniform(&[4], 1.0, &mut r));
    check(&mut store, |ctx| {
        let (a, col, row) = (ctx.p(a), ctx.p(col), ctx.p(row));
        let q = ctx.tape.div(a, col)?;
        let m = ctx.tape.mul(q, row)?;
        let s = ctx.tape.sub(m, row)?;
        let e = ctx.tape.exp(s);
        let sa = ctx.tape.sum_axes(e, &[1, 2])?;
        let p = ctx.tape.powf(sa, 0.5);
        let lg = ctx.tape.ln(p);
        let sl = ctx.tape.slice(a, 1, 1, 2)?;
        let sg = ctx.tape.sigmoid(sl);
        let rs = ctx.tape.reshape(sg, &[16])?;
        let lr = ctx.tape.leaky_relu(rs, 0.2);
        let t1 = ctx.tape.sum(lg);
        let t2 = ctx.tape.sum(lr);
        let t = ctx.tape.add(t1, t2)?;
        Ok(ctx.tape.add_scalar(t, 1.0))
    });
}

#[test]
fn gradcheck_conv_upsample_instance_norm() {
    let mut r = rng(7);
    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", Tensor::uniform(&[2, 3, 5, 6], 1.0, &mut r));
    let w1 = store.add("w1", Tensor::uniform(&[4, 3, 3, 3], 0.5, &mut r));
    let w2 = store.add("w2", Tensor::uniform(&[2, 4, 3, 3], 0.5, &mut r));
    let probe = Tensor::<f64>::uniform(&[2, 2, 6, 6], 1.0, &mut r);
    check(&mut store, |ctx| {
        let (x, w1, w2) = (ctx.p(x), ctx.p(w1), ctx.p(w2));
        let h = ctx.tape.conv2d(x, w1, 2, 1)?;
        let h = ctx.tape.instance_norm(h, 1e-5)?;
        let h = ctx.tape.upsample2x(h)?;
        let h = ctx.tape.conv2d(h, w2, 1, 1)?;
        let pv = ctx.constant(probe.clone());
        let y = ctx.tape.mul(h, pv)?;
        Ok(ctx.tape.sum(y))
    });
}

#[test]
fn gradcheck_concat_middle_axis() {
    let mut r = rng(9);
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", Tensor::uniform(&[2, 1, 3], 1.0, &mut r));
    let b = store.add("b", Tensor::uniform(&[2, 2, 3], 1.0, &mut r));
    let probe = Tensor::<f64>::uniform(&[2, 4, 3], 1.0, &mut r);
    check(&mut store, |ctx| {
        let (a, b) = (ctx.p(a), ctx.p(b));
        let c = ctx.tape.concat(&[a, b, a], 1)?;
        let pv = ctx.constant(probe.clone());
        let y = ctx.tape.mul(c, pv)?;
        let y = ctx.tape.mul(y, c)?;
        Ok(ctx.tape.sum(y))
    });
    let mut tape = Tape::new();
    let x = tape.constant(t64(&[2, 1], &[1.0, 2.0]));
    let y = tape.constant(t64(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
    let c = tape.concat(&[x, y], 1).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    assert!(tape.concat(&[x, y], 0).is_err());
}

#[test]
fn conv_matches_direct_loop() {
    let mut r = rng(8);
    let x = Tensor::<f64>::uniform(&[1, 2, 5, 5], 1.0, &mut r);
    let w = Tensor::<f64>::uniform(&[3, 2, 3, 3], 1.0, &mut r);
    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let y = tape.conv2d(xv, wv, stride, pad).unwrap();
        let s = tape.shape(y).to_vec();
        for o in 0..3 {
            for oy in 0..s[2] {
                for ox in 0..s[3] {
                    let mut acc = 0.0;
                    for c in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    acc += x.data()[(c * 5 + iy as usize) * 5 + ix as usize]
                                        * w.data()[((o * 2 + c) * 3 + ki) * 3 + kj];
                                }
                            }
                        }
                    }
                    let got = tape.value(y).data()[(o * s[2] + oy) * s[3] + ox];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn adam_single_step_analytic() {
    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", t64(&[1], &[1.0]));
    let mut adam = Adam::new(
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 0.0,
        },
        store.len(),
    );
    let grads = {
        let mut ctx = Ctx::new(&store, Trainable::All);
        let xv = ctx.p(x);
        let sq = ctx.tape.mul(xv, xv).unwrap();
        let l = ctx.tape.sum(sq);
        ctx.param_grads(l).unwrap()
    };
    adam.step(&mut store, &grads, 0.1).unwrap();
    assert!((store.get(x).item() - 0.9).abs() < 1e-12);
    assert_eq!(adam.state(x).unwrap().step, 1);
}

#[test]
fn adam_rejects_nan_gradient_by_name() {
    let mut store = ParamStore::<f64>::new();
    let x = store.add("layer.w", t64(&[2], &[1.0, 1.0]));
    let grads = ParamGrads::from_vec(vec![Some(t64(&[2], &[f64::NAN, 0.0]))]);
    let mut adam = Adam::new(AdamConfig::default(), 1);
    match adam.step(&mut store, &grads, 0.1) {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("layer.w")),
        other => panic!("expected NonFinite, got {other:?}"),
    }
    assert_eq!(store.get(x).data(), &[1.0, 1.0]);
}

#[test]
fn adam_runs_are_bit_identical() {
    let run = || {
        let mut r = rng(11);
        let mut store = ParamStore::<f32>::new();
        let l = Dense::new(&mut store, "l", 3, 2, true, &mut r);
        let x = Tensor::<f32>::uniform(&[4, 3], 1.0, &mut r);
        let mut adam = Adam::new(AdamConfig::default(), store.len());
        for _ in 0..5 {
            let grads = {
                let mut ctx = Ctx::new(&store, Trainable::All);
                let xv = ctx.constant(x.clone());
                let y = l.forward(&mut ctx, xv).unwrap();
                let sq = ctx.tape.mul(y, y).unwrap();
                let loss = ctx.tape.mean(sq);
                ctx.param_grads(loss).unwrap()
            };
            adam.step(&mut store, &grads, 1e-2).unwrap();
        }
        store
    };
    let (a, b) = (run(), run());
    for ((_, ta), (_, tb)) in a.iter().zip(b.iter()) {
        let ba: Vec<u32> = ta.data().iter().map(|v| v.to_bits()).collect();
        let bb: Vec<u32> = tb.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(ba, bb);
    }
}

#[test]
fn lr_schedule_examples() {
    let s = LrSchedule::new(1e-4, 100, 1100, 0.0).unwrap();
    assert_eq!(s.lr_at(0), 0.0);
    assert_eq!(s.lr_at(100), 1e-4);
    assert!((s.lr_at(600) - 0.5e-4).abs() < 1e-18);
    assert!(s.lr_at(1100).abs() < 1e-18);
    // continuity at the warm-up junction
    assert!((s.lr_at(99) - 1e-4).abs() < 2e-6);
    assert!((s.lr_at(101) - 1e-4).abs() < 1e-9);
    // clamped
    assert_eq!(s.lr_at(5000), s.lr_at(1100));
    assert!(LrSchedule::new(1e-4, 10, 5, 0.0).is_err());
}

proptest! {
    #[test]
    fn softmax_rows_are_simplex(vals in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(&[3, 4], vals).unwrap());
        let s = tape.softmax(x, 1).unwrap();
        for row in tape.value(s).data().chunks(4) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn adam_zero_gradient_is_identity(vals in prop::collection::vec(-5.0f32..5.0, 1..16), steps in 1usize..5) {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("p", Tensor::new(&[vals.len()], vals.clone()).unwrap());
        let mut adam = Adam::new(AdamConfig::default(), 1);
        for _ in 0..steps {
            let grads = ParamGrads::from_vec(vec![Some(Tensor::zeros(&[vals.len()]))]);
            adam.step(&mut store, &grads, 0.1).unwrap();
        }
        prop_assert_eq!(store.get(id).data(), &vals[..]);
    }

    #[test]
    fn lr_within_bounds_after_warmup(warm in 0u64..50, extra in 1u64..500, frac in 0.0f64..1.0) {
        let total = warm + extra;
        let s = LrSchedule::new(1e-3, warm, total, 1e-5).unwrap();
        let step = warm + ((extra as f64) * frac) as u64;
        let lr = s.lr_at(step);
        prop_assert!(lr >= 1e-5 - 1e-15 && lr <= 1e-3 + 1e-15);
    }
}
