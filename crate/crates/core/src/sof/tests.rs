use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::{gradcheck, GradcheckConfig, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tiny_config() -> SofConfig {
    SofConfig {
        width: 8,
        classes: 4,
        latent_dim: 6,
        hyper_hidden: 10,
    }
}

fn random_latent(dim: usize, r: &mut ChaCha8Rng) -> GeomLatent {
    GeomLatent::new((0..dim).map(|_| r.random_range(-1.0..1.0)).collect())
}

fn random_point(r: &mut ChaCha8Rng) -> [f64; 3] {
    [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]
}

#[test]
fn theta_param_count_at_full_width() {
    let cfg = SofConfig::default();
    assert_eq!(cfg.theta_param_count(), 134_144);
    let model = SofModel::<f32>::new(cfg, 1, &mut rng(0)).unwrap();
    let params = model.hyper_forward(&model.latent(0)).unwrap();
    assert_eq!(params.num_params(), 134_144);
    assert!(params.is_finite());
}

#[test]
fn hyper_forward_is_deterministic_and_rejects_nan() {
    let model = SofModel::<f32>::new(SofConfig::with_width(16), 2, &mut rng(1)).unwrap();
    let z = model.latent(1);
    assert_eq!(model.hyper_forward(&z).unwrap(), model.hyper_forward(&z).unwrap());
    let mut bad = z.clone();
    bad.z[3] = f32::NAN;
    assert!(matches!(model.hyper_forward(&bad), Err(Error::NonFinite(_))));
    let short = GeomLatent::zeros(5);
    assert!(matches!(model.hyper_forward(&short), Err(Error::Shape { .. })));
}

#[test]
fn zero_field_net_gives_zero_features() {
    let model = SofModel::<f64>::new(tiny_config(), 1, &mut rng(2)).unwrap();
    let mut params = model.hyper_forward(&model.latent(0)).unwrap();
    for l in &mut params.layers {
        for t in [&mut l.weight, &mut l.bias, &mut l.gain, &mut l.shift] {
            *t = Tensor::zeros(t.shape());
        }
    }
    let f = model.sof_features(&params, [0.3, -0.2, 0.9]).unwrap();
    assert!(f.iter().all(|&v| v == 0.0));
}

fn set_head(model: &mut SofModel<f64>, bias: &[f64]) {
    let head = model.classifier.head;
    let w = model.store.get(head.w).shape().to_vec();
    model.store.set(head.w, Tensor::zeros(&w)).unwrap();
    model
        .store
        .set(head.b.unwrap(), Tensor::from_f64(&[bias.len()], bias).unwrap())
        .unwrap();
}

#[test]
fn zero_classifier_is_uniform() {
    let cfg = tiny_config();
    let mut model = SofModel::<f64>::new(cfg, 1, &mut rng(3)).unwrap();
    set_head(&mut model, &vec![0.0; cfg.classes]);
    let mut r = rng(4);
    for _ in 0..10 {
        let f: Vec<f64> = (0..cfg.width).map(|_| r.random_range(-3.0..3.0)).collect();
        let p = model.classify(&f).unwrap();
        for v in p {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }
}

#[test]
fn one_hot_logit_softmax_closed_form() {
    let cfg = SofConfig {
        classes: 6,
        ..tiny_config()
    };
    let mut model = SofModel::<f64>::new(cfg, 1, &mut rng(5)).unwrap();
    let mut bias = vec![0.0; 6];
    bias[0] = 1.0;
    set_head(&mut model, &bias);
    let p = model.classify(&vec![0.7; cfg.width]).unwrap();
    let e = std::f64::consts::E;
    let denom = e + 5.0;
    assert!((p[0] - e / denom).abs() < 1e-12);
    for v in &p[1..] {
        assert!((v - 1.0 / denom).abs() < 1e-12);
    }
    assert!(matches!(model.classify(&[0.0; 3]), Err(Error::Shape { .. })));
}

#[test]
fn probe_matches_manual_composition_and_stays_on_simplex() {
    let model = SofModel::<f32>::new(SofConfig::with_width(16), 1, &mut rng(6)).unwrap();
    let mut r = rng(7);
    let z = random_latent(LATENT_DIM, &mut r);
    let params = model.hyper_forward(&z).unwrap();
    let x = random_point(&mut r);
    let probe = model.field_probe(&z, x).unwrap();
    let f = model.sof_features(&params, x).unwrap();
    assert_eq!(probe.feature, f);
    assert_eq!(probe.probs, model.classify(&f).unwrap());

    let points: Vec<[f64; 3]> = (0..1000).map(|_| random_point(&mut r)).collect();
    let probs = model.field_probs(&params, &points).unwrap();
    for row in probs.chunks(model.config.classes) {
        assert!(row.iter().all(|&p| p >= 0.0));
        let s: f64 = row.iter().map(|&p| p as f64).sum();
        assert!((s - 1.0).abs() < 1e-6, "row sums to {s}");
    }
}

#[test]
fn features_are_continuous() {
    let model = SofModel::<f64>::new(SofConfig::with_width(16), 1, &mut rng(8)).unwrap();
    let mut r = rng(9);
    let params = model.hyper_forward(&random_latent(LATENT_DIM, &mut r)).unwrap();
    for _ in 0..20 {
        let x = random_point(&mut r);
        let f0 = model.sof_features(&params, x).unwrap();
        let mut prev = f64::INFINITY;
        for delta in [1e-2, 1e-4, 1e-6, 1e-8] {
            let f1 = model.sof_features(&params, [x[0] + delta, x[1] - delta, x[2] + delta]).unwrap();
            let diff = f0.iter().zip(&f1).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff <= prev + 1e-12);
            prev = diff;
        }
        assert!(prev < 1e-5);
    }
}

fn composition_loss<'m>(
    model: &'m SofModel<f64>,
    x_id: crate::numerics::ParamId,
    targets: &[usize],
) -> impl Fn(&mut Ctx<'_, f64>) -> Result<crate::numerics::Var> + 'm {
    let targets = targets.to_vec();
    let latent = model.latents[0];
    move |ctx| {
        let z = ctx.p(latent);
        let theta = model.hyper.forward(ctx, z, &model.config)?;
        let x = ctx.p(x_id);
        let f = theta.features(&mut ctx.tape, x)?;
        let logits = model.classifier.logits(ctx, f)?;
        ctx.tape.cross_entropy(logits, &targets)
    }
}

#[test]
fn gradients_through_hyper_field_and_classifier() {
    let cfg = tiny_config();
    let mut model = SofModel::<f64>::new(cfg, 1, &mut rng(10)).unwrap();
    let mut r = rng(11);
    let z = random_latent(cfg.latent_dim, &mut r);
    model.set_latent(0, &z).unwrap();
    let xs: Vec<f64> = (0..15).map(|_| r.random_range(-1.0..1.0)).collect();
    let x_id = model.store.add("probe/x", Tensor::from_f64(&[5, 3], &xs).unwrap());
    let targets = [0, 1, 2, 3, 1];
    let ids: Vec<_> = model.store.ids().collect();
    let check = model.clone();
    let loss = composition_loss(&check, x_id, &targets);
    let config = GradcheckConfig {
        max_per_param: Some(6),
        ..GradcheckConfig::default()
    };
    let report = gradcheck(&mut model.store, &ids, loss, &config, &mut r).unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn latent_and_point_gradients_are_exact() {
    let cfg = tiny_config();
    let mut model = SofModel::<f64>::new(cfg, 1, &mut rng(12)).unwrap();
    let mut r = rng(13);
    model.set_latent(0, &random_latent(cfg.latent_dim, &mut r)).unwrap();
    let xs: Vec<f64> = (0..9).map(|_| r.random_range(-1.0..1.0)).collect();
    let x_id = model.store.add("probe/x", Tensor::from_f64(&[3, 3], &xs).unwrap());
    let ids = vec![model.latents[0], x_id];
    let check = model.clone();
    let loss = composition_loss(&check, x_id, &[2, 0, 3]);
    let report = gradcheck(&mut model.store, &ids, loss, &GradcheckConfig::default(), &mut r).unwrap();
    assert_eq!(report.checked, cfg.latent_dim + 9);
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn from_store_adopts_every_tensor() {
    let cfg = tiny_config();
    let model = SofModel::<f32>::new(cfg, 3, &mut rng(14)).unwrap();
    let rebuilt = SofModel::from_store(cfg, 3, model.store.clone()).unwrap();
    assert_eq!(rebuilt.store, model.store);
    let missing = SofModel::<f32>::from_store(cfg, 4, model.store.clone());
    assert!(matches!(missing, Err(Error::Format(_))));
}
