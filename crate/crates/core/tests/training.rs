use jetfit::data::{generate_shape, ShapeKind, ShapeSpec};
use jetfit::train::{train, TrainConfig};
use jetfit::weightnet::{checkpoint, NetArch};

fn small_run(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        epochs,
        samples_per_epoch: 160,
        k_neighbors: 32,
        val_samples: 64,
        seed: 5,
        arch: NetArch::tiny(),
        ..TrainConfig::default()
    }
}

#[test]
fn plane_training_reaches_sub_degree_error() {
    let cloud = generate_shape(&ShapeSpec::new(ShapeKind::Plane { size: 1.0 }, 2000, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        samples_per_epoch: 320,
        ..small_run(10)
    };
    let s = train(&cfg, &[cloud], dir.path(), None, &mut |_| {}).unwrap();
    assert_eq!(s.history.last().unwrap().steps, 200);
    assert!(s.best_val_rmse_deg < 1.0, "{}", s.best_val_rmse_deg);
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
}

#[test]
fn resumed_run_matches_uninterrupted_one() {
    let clouds = vec![
        generate_shape(&ShapeSpec::new(ShapeKind::Sphere { radius: 1.0 }, 1500, 2)).unwrap(),
        generate_shape(&ShapeSpec::new(ShapeKind::Corner { angle_deg: 90.0 }, 1500, 3)).unwrap(),
    ];
    let full = tempfile::tempdir().unwrap();
    train(&small_run(3), &clouds, full.path(), None, &mut |_| {}).unwrap();

    let split = tempfile::tempdir().unwrap();
    train(&small_run(2), &clouds, split.path(), None, &mut |_| {}).unwrap();
    let last = split.path().join("last.ckpt");
    let mut epochs = Vec::new();
    train(&small_run(3), &clouds, split.path(), Some(&last), &mut |m| epochs.push(m.epoch)).unwrap();
    assert_eq!(epochs, vec![3]);

    let a = std::fs::read(full.path().join("last.ckpt")).unwrap();
    let b = std::fs::read(&last).unwrap();
    assert!(a == b, "resumed checkpoint differs");
    let fa = std::fs::read_to_string(full.path().join("metrics.csv")).unwrap();
    let fb = std::fs::read_to_string(split.path().join("metrics.csv")).unwrap();
    assert_eq!(fa, fb);
    assert!(checkpoint::load(&last).unwrap().optim.is_some());
}

#[test]
fn resume_rejects_other_architecture() {
    let clouds = vec![generate_shape(&ShapeSpec::new(ShapeKind::Plane { size: 1.0 }, 800, 4)).unwrap()];
    let dir = tempfile::tempdir().unwrap();
    train(&small_run(1), &clouds, dir.path(), None, &mut |_| {}).unwrap();
    let other = TrainConfig {
        arch: NetArch::small(),
        ..small_run(2)
    };
    let last = dir.path().join("last.ckpt");
    assert!(train(&other, &clouds, dir.path(), Some(&last), &mut |_| {}).is_err());
}
