use dnilm_core::pipeline::windows::FEATURES;
use dnilm_core::toy::{generate, ToyConfig};
use dnilm_model::baselines::{BaselineConfig, BaselineKind, EmOptions, FhmmModel, NeuralBaseline};
use dnilm_model::checkpoint::{load, save};
use dnilm_model::{AnyModel, DualNilm, Error, ModelConfig};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn windows(n: usize, t: usize, seed: u64) -> Vec<f64> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..n * t * FEATURES).map(|_| rng.gen_range(-300.0..2500.0)).collect()
}

fn round_trip(model: &AnyModel, t: usize) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save(model, &path).unwrap();
    let back = load(&path).unwrap();
    assert_eq!(back.kind_name(), model.kind_name());
    assert_eq!(back.appliances(), model.appliances());
    assert_eq!(back.window_length(), t);
    let x = windows(3, t, 9);
    assert_eq!(back.predict(&x, 2).unwrap(), model.predict(&x, 2).unwrap(), "{}", model.kind_name());
    // Saving what was loaded reproduces the file byte for byte.
    let again = dir.path().join("again.ckpt");
    save(&back, &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn every_model_kind_round_trips_exactly() {
    let apps = vec!["pump".to_string(), "heater".to_string()];
    let small = ModelConfig {
        window_length: 12,
        conv_filters: 4,
        d_model: 8,
        heads: 2,
        ff_dim: 8,
        head_hidden: 8,
        ..ModelConfig::default()
    };
    round_trip(&AnyModel::DualNilm(DualNilm::new(small, &apps, 4).unwrap()), 12);
    round_trip(&AnyModel::DualNilm(DualNilm::new(ModelConfig::tiny(), &apps, 5).unwrap()), 8);
    for kind in BaselineKind::ALL {
        let net = NeuralBaseline::new(BaselineConfig::tiny(kind.name()).unwrap(), &apps, 6).unwrap();
        round_trip(&AnyModel::Neural(net), 16);
    }
    let toy = generate(&ToyConfig {
        days: 1,
        ..ToyConfig::default()
    })
    .unwrap();
    let fhmm = FhmmModel::fit(&[toy.household().unwrap()], 10, &EmOptions::default()).unwrap();
    round_trip(&AnyModel::Fhmm(fhmm), 10);
}

#[test]
fn damaged_files_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let net = DualNilm::new(ModelConfig::tiny(), &["a".into()], 1).unwrap();
    save(&AnyModel::DualNilm(net), &path).unwrap();
    let good = std::fs::read(&path).unwrap();
    let bad = dir.path().join("bad.ckpt");

    let check = |bytes: &[u8], what: &str| {
        std::fs::write(&bad, bytes).unwrap();
        match load(&bad) {
            Err(Error::Checkpoint { reason, .. }) => eprintln!("{what}: {reason}"),
            other => panic!("{what}: expected a checkpoint error, got {other:?}"),
        }
    };
    check(&good[..good.len() - 3], "truncated parameters");
    check(&good[..20], "truncated header");
    check(b"hello", "wrong magic");
    let mut flipped = good.clone();
    flipped[0] = b'X';
    check(&flipped, "corrupt magic");
    let text = String::from_utf8_lossy(&good).replace("\"f64\"", "\"f32\"");
    // Same length keeps the header-length prefix valid.
    check(text.as_bytes(), "dtype mismatch");
    assert!(matches!(load(dir.path().join("missing.ckpt")), Err(Error::Io { .. })));
}
