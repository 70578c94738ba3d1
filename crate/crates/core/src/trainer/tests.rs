use super::*;
use crate::scene::{build_dataset, DatasetSpec, NUM_CLASSES};

fn toy_dataset(dir: &Path, scenes: usize, views: usize, res: usize) -> Dataset {
    let spec = DatasetSpec {
        num_scenes: scenes,
        views_per_scene: views,
        resolution: res,
        seed: 3,
    };
    build_dataset(dir, &spec).unwrap();
    Dataset::load(dir).unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        width: 16,
        latent_dim: 16,
        hyper_hidden: 32,
        rays_per_batch: 32,
        march_steps: 4,
        warmup_steps: 5,
        total_steps: 12,
        eval_every: 6,
        eval_views: 2,
        lr: 1e-3,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_steps_keep_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let ds = toy_dataset(dir.path(), 1, 2, 8);
    let cfg = TrainConfig {
        total_steps: 0,
        ..small_config()
    };
    let (ckpt, log) = train_sof(&ds, cfg.clone()).unwrap();
    assert!(log.is_empty());
    let fresh = Trainer::new(&ds, cfg).unwrap();
    assert_eq!(ckpt.model.store, fresh.model.store);
    assert_eq!(ckpt.step, 0);
}

#[test]
fn fixed_seed_reproduces_log_and_weights() {
    let dir = tempfile::tempdir().unwrap();
    let ds = toy_dataset(dir.path(), 2, 2, 8);
    let (a, la) = train_sof(&ds, small_config()).unwrap();
    let (b, lb) = train_sof(&ds, small_config()).unwrap();
    assert_eq!(la, lb);
    assert_eq!(la.len(), 12);
    assert!(la[5].miou.is_some() && la[4].miou.is_none());
    assert_eq!(
        a.to_table().to_bytes(CHECKPOINT_MAGIC).unwrap(),
        b.to_table().to_bytes(CHECKPOINT_MAGIC).unwrap()
    );
    let mut csv = Vec::new();
    write_log_csv(&la, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("step,loss,lr,miou\n"));
    assert_eq!(text.lines().count(), 13);
}

#[test]
fn class_count_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ds = toy_dataset(dir.path(), 1, 1, 8);
    let cfg = TrainConfig {
        classes: 5,
        ..small_config()
    };
    assert!(matches!(Trainer::new(&ds, cfg), Err(Error::InvalidArgument(_))));
}

#[test]
fn initial_loss_is_near_uniform_entropy() {
    let dir = tempfile::tempdir().unwrap();
    let ds = toy_dataset(dir.path(), 2, 4, 16);
    let cfg = TrainConfig {
        rays_per_batch: 1000,
        width: 32,
        ..small_config()
    };
    let mut trainer = Trainer::new(&ds, cfg).unwrap();
    // The first step runs at zero learning rate, so its loss is the
    // initialization loss.
    let loss = trainer.train_step().unwrap();
    let ln_k = (NUM_CLASSES as f64).ln();
    assert!((loss - ln_k).abs() < 0.2 * ln_k, "initial loss {loss}");
}

#[test]
fn checkpoint_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let ds = toy_dataset(&dir.path().join("data"), 2, 1, 8);
    let (ckpt, _) = train_sof(&ds, small_config()).unwrap();
    let path = dir.path().join("model.sofc");
    save_checkpoint(&ckpt, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.model.store, ckpt.model.store);
    assert_eq!(back.meta, ckpt.meta);
    assert_eq!(back.step, 12);
    assert_eq!(back.notes, ckpt.notes);

    let bytes = std::fs::read(&path).unwrap();
    let bad = dir.path().join("bad.sofc");
    let mut b = bytes.clone();
    b[..4].copy_from_slice(b"XXXX");
    std::fs::write(&bad, &b).unwrap();
    assert!(matches!(load_checkpoint(&bad), Err(Error::Format(_))));
    std::fs::write(&bad, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&bad), Err(Error::Corruption(_))));
}

#[test]
fn boundary_pixels_hug_class_edges() {
    let mut data = vec![0u8; 64];
    for v in 0..8 {
        for u in 4..8 {
            data[v * 8 + u] = 1;
        }
    }
    let seg = Segmap::new(8, 8, 2, data).unwrap();
    let b = boundary_pixels(&seg, 1);
    assert_eq!(b.len(), 16);
    assert!(b.iter().all(|&p| matches!(p % 8, 3 | 4)));
}
