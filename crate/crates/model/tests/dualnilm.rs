use candle_core::{DType, Device, Tensor};
use dnilm_core::ApplianceSpec;
use dnilm_model::nn::Ctx;
use dnilm_model::{predict, DualNilm, Error, ModelConfig, Network, Precision};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("app{i}")).collect()
}

fn windows(b: usize, t: usize, seed: u64) -> Vec<f64> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..b * t * 2).map(|_| rng.gen_range(-500.0..3000.0)).collect()
}

fn zero_params(net: &DualNilm, prefix: &str) {
    let ps = net.params();
    let selected: Vec<String> = ps.iter().map(|(n, _)| n.to_string()).filter(|n| n.starts_with(prefix)).collect();
    assert!(!selected.is_empty(), "no parameters under {prefix}");
    for n in selected {
        let count = ps.get(&n).unwrap().elem_count();
        ps.set_values(&n, &vec![0.0; count]).unwrap();
    }
}

#[test]
fn default_config_forward_shapes() {
    let net = DualNilm::new(ModelConfig::default(), &names(3), 0).unwrap();
    assert_eq!(net.params().dtype(), DType::F32);
    let out = predict(&net, &windows(4, 300, 1), 4).unwrap();
    let states = out.states.unwrap();
    let inj = out.injection.unwrap();
    assert_eq!((states.len(), states[0].len()), (4, 3));
    assert_eq!((inj.len(), inj[0].len()), (4, 300));
    for v in states.iter().chain(&inj).flatten() {
        assert!(*v > 0.0 && *v < 1.0, "{v} outside (0,1)");
    }
}

#[test]
fn cnn_encoder_keeps_length_and_rejects_wrong_lengths() {
    let net = DualNilm::new(ModelConfig::default(), &names(1), 0).unwrap();
    let x = Tensor::from_vec(windows(1, 150, 2), (1, 300, 1), &Device::Cpu).unwrap().to_dtype(DType::F32).unwrap();
    assert_eq!(net.cnn_encode(&x, 0).unwrap().dims(), &[1, 300, 64]);
    let short = Tensor::zeros((1, 299, 1), DType::F32, &Device::Cpu).unwrap();
    assert!(matches!(net.cnn_encode(&short, 0), Err(Error::Shape(_))));
    assert!(matches!(net.cnn_encode(&x, 2), Err(Error::Shape(_))));
    assert!(matches!(predict(&net, &windows(1, 299, 3), 1), Err(Error::Shape(_))));
}

#[test]
fn zero_input_encodes_to_the_norm_shift() {
    let net = DualNilm::new(ModelConfig::default(), &names(1), 0).unwrap();
    for l in 0..3 {
        zero_params(&net, &format!("cnn1.{l}.conv.b"));
    }
    let x = Tensor::zeros((2, 300, 1), DType::F32, &Device::Cpu).unwrap();
    let h: Vec<f32> = net.cnn_encode(&x, 1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    assert!(h.iter().all(|&v| v == 0.0));
    let beta = "cnn1.2.norm.beta";
    let c = net.params().get(beta).unwrap().elem_count();
    let shift: Vec<f64> = (0..c).map(|i| i as f64 * 0.25 - 3.0).collect();
    net.params().set_values(beta, &shift).unwrap();
    let h: Vec<Vec<Vec<f32>>> = net.cnn_encode(&x, 1).unwrap().to_vec3().unwrap();
    for row in &h[1] {
        for (v, s) in row.iter().zip(&shift) {
            assert_eq!(f64::from(*v), *s);
        }
    }
}

#[test]
fn encoder_is_permutation_equivariant_without_positions() {
    let cfg = ModelConfig {
        window_length: 4,
        ..ModelConfig::tiny()
    };
    assert!(!cfg.positional_encoding);
    let net = DualNilm::new(cfg, &names(1), 7).unwrap();
    let d = 8;
    let mut rng = StdRng::seed_from_u64(9);
    let h: Vec<f64> = (0..4 * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let perm = [2usize, 0, 3, 1];
    let permuted: Vec<f64> = perm.iter().flat_map(|&r| h[r * d..(r + 1) * d].to_vec()).collect();
    let z = net.encode(&Tensor::from_vec(h, (1, 4, d), &Device::Cpu).unwrap()).unwrap().to_vec3::<f64>().unwrap();
    let zp = net.encode(&Tensor::from_vec(permuted, (1, 4, d), &Device::Cpu).unwrap()).unwrap().to_vec3::<f64>().unwrap();
    for (i, &r) in perm.iter().enumerate() {
        for (a, b) in zp[0][i].iter().zip(&z[0][r]) {
            assert!((a - b).abs() < 1e-12, "row {i}: {a} vs {b}");
        }
    }
}

#[test]
fn positional_encoding_breaks_equivariance() {
    let cfg = ModelConfig {
        window_length: 4,
        positional_encoding: true,
        ..ModelConfig::tiny()
    };
    let net = DualNilm::new(cfg, &names(1), 7).unwrap();
    let h: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
    let swapped: Vec<f64> = [1usize, 0, 2, 3].iter().flat_map(|&r| h[r * 8..(r + 1) * 8].to_vec()).collect();
    let z = net.encode(&Tensor::from_vec(h, (1, 4, 8), &Device::Cpu).unwrap()).unwrap().to_vec3::<f64>().unwrap();
    let zs = net.encode(&Tensor::from_vec(swapped, (1, 4, 8), &Device::Cpu).unwrap()).unwrap().to_vec3::<f64>().unwrap();
    assert_ne!(zs[0][0], z[0][1]);
}

#[test]
fn single_step_window_is_finite() {
    let cfg = ModelConfig {
        window_length: 1,
        ..ModelConfig::tiny()
    };
    let net = DualNilm::new(cfg, &names(2), 3).unwrap();
    let out = predict(&net, &[120.0, 30.0, -50.0, 4.0], 2).unwrap();
    assert_eq!(out.states.as_ref().unwrap().len(), 2);
    assert!(out.states.unwrap().iter().chain(&out.injection.unwrap()).flatten().all(|v| v.is_finite()));
}

#[test]
fn state_heads_follow_the_sigmoid() {
    let net = DualNilm::new(ModelConfig::tiny(), &names(2), 5).unwrap();
    zero_params(&net, "state.");
    let x = windows(3, 8, 4);
    let s = predict(&net, &x, 3).unwrap().states.unwrap();
    assert!(s.iter().flatten().all(|&v| v == 0.5));
    net.params().set_values("state.app1.b", &[10.0]).unwrap();
    let s = predict(&net, &x, 3).unwrap().states.unwrap();
    for row in s {
        assert_eq!(row[0], 0.5);
        assert!(row[1] > 0.9999);
        assert!((row[1] - 0.999_954_602_131_297_5).abs() < 1e-12);
    }
}

#[test]
fn zeroed_injection_head_is_one_half() {
    let net = DualNilm::new(ModelConfig::tiny(), &names(1), 5).unwrap();
    zero_params(&net, "injection.out");
    let inj = predict(&net, &windows(2, 8, 6), 2).unwrap().injection.unwrap();
    assert_eq!(inj.len(), 2);
    assert!(inj.iter().all(|r| r.len() == 8 && r.iter().all(|&v| v == 0.5)));
}

#[test]
fn seven_heads_on_the_lab_setup() {
    let net = DualNilm::new(ModelConfig::tiny(), &names(7), 0).unwrap();
    let s = predict(&net, &windows(2, 8, 1), 2).unwrap().states.unwrap();
    assert!(s.iter().all(|r| r.len() == 7));
}

#[test]
fn empty_batch_and_non_finite_inputs() {
    let net = DualNilm::new(ModelConfig::tiny(), &names(2), 0).unwrap();
    let out = predict(&net, &[], 4).unwrap();
    assert_eq!(out.states, Some(vec![]));
    assert_eq!(out.injection, Some(vec![]));
    let heads = net.forward_t(&Tensor::zeros((0, 8, 2), DType::F64, &Device::Cpu).unwrap(), &mut Ctx::eval()).unwrap();
    assert_eq!(heads.states.unwrap().dims(), &[0, 2]);
    assert_eq!(heads.injection.unwrap().dims(), &[0, 8]);

    let mut x = windows(2, 8, 2);
    x[2 * 8 + 5 * 2 + 1] = f64::NAN;
    match predict(&net, &x, 2) {
        Err(Error::NonFinite { window, step, feature }) => assert_eq!((window, step, feature), (1, 5, 1)),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
    x[2 * 8 + 5 * 2 + 1] = f64::INFINITY;
    assert!(matches!(predict(&net, &x, 2), Err(Error::NonFinite { .. })));
}

#[test]
fn eval_mode_is_deterministic_and_training_mode_drops_out() {
    let net = DualNilm::new(ModelConfig::tiny(), &names(2), 8).unwrap();
    let x = windows(4, 8, 3);
    assert_eq!(predict(&net, &x, 4).unwrap(), predict(&net, &x, 4).unwrap());
    // Chunking is invisible.
    assert_eq!(predict(&net, &x, 1).unwrap(), predict(&net, &x, 4).unwrap());
    let t = Tensor::from_vec(x, (4, 8, 2), &Device::Cpu).unwrap();
    let eval = net.forward_t(&t, &mut Ctx::eval()).unwrap();
    let train = net.forward_t(&t, &mut Ctx::train(1)).unwrap();
    let a: Vec<Vec<f64>> = eval.injection.unwrap().to_vec2().unwrap();
    let b: Vec<Vec<f64>> = train.injection.unwrap().to_vec2().unwrap();
    assert_ne!(a, b);
    // States do not pass through dropout.
    assert_eq!(eval.states.unwrap().to_vec2::<f64>().unwrap(), train.states.unwrap().to_vec2::<f64>().unwrap());
}

#[test]
fn same_seed_same_weights() {
    let a = DualNilm::new(ModelConfig::tiny(), &names(2), 42).unwrap();
    let b = DualNilm::new(ModelConfig::tiny(), &names(2), 42).unwrap();
    let c = DualNilm::new(ModelConfig::tiny(), &names(2), 43).unwrap();
    let x = windows(2, 8, 0);
    assert_eq!(predict(&a, &x, 2).unwrap(), predict(&b, &x, 2).unwrap());
    assert_ne!(predict(&a, &x, 2).unwrap(), predict(&c, &x, 2).unwrap());
}

#[test]
fn adding_a_head_leaves_existing_outputs_bit_identical() {
    for precision in [Precision::F32, Precision::F64] {
        let cfg = ModelConfig {
            precision,
            ..ModelConfig::tiny()
        };
        let mut net = DualNilm::new(cfg, &names(3), 12).unwrap();
        let x = windows(5, 8, 13);
        let before = predict(&net, &x, 5).unwrap();
        let count = net.params().len();
        net.add_appliance_head(&ApplianceSpec::appliance("kettle", 100.0, 1.0).unwrap()).unwrap();
        assert_eq!(net.params().len(), count + 2);
        assert_eq!(net.appliances().last().unwrap(), "kettle");
        let after = predict(&net, &x, 5).unwrap();
        assert_eq!(after.injection, before.injection);
        for (old, new) in before.states.unwrap().iter().zip(after.states.unwrap()) {
            assert_eq!(new.len(), 4);
            assert_eq!(old.as_slice(), &new[..3]);
            assert_eq!(
                old.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                new[..3].iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}

#[test]
fn duplicate_heads_are_refused_and_zero_heads_are_neutral() {
    let mut net = DualNilm::new(ModelConfig::tiny(), &names(2), 1).unwrap();
    let dup = ApplianceSpec::appliance("app0", 10.0, 1.0).unwrap();
    assert!(matches!(net.add_appliance_head(&dup), Err(Error::DuplicateAppliance(n)) if n == "app0"));
    assert_eq!(net.appliances().len(), 2);
    net.add_zero_appliance_head(&ApplianceSpec::appliance("fridge", 10.0, 0.9).unwrap()).unwrap();
    let s = predict(&net, &windows(6, 8, 2), 3).unwrap().states.unwrap();
    assert!(s.iter().all(|r| r[2] == 0.5));
    assert!(matches!(
        DualNilm::new(ModelConfig::tiny(), &["a".into(), "a".into()], 0),
        Err(Error::DuplicateAppliance(_))
    ));
    assert!(matches!(DualNilm::new(ModelConfig::tiny(), &[], 0), Err(Error::Config(_))));
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        ModelConfig {
            heads: 3,
            ..ModelConfig::tiny()
        },
        ModelConfig {
            d_model: 12,
            ..ModelConfig::tiny()
        },
        ModelConfig {
            dropout: 1.0,
            ..ModelConfig::tiny()
        },
        ModelConfig {
            lambda1: -1.0,
            ..ModelConfig::tiny()
        },
        ModelConfig {
            padding: 1,
            ..ModelConfig::tiny()
        },
    ];
    for cfg in bad {
        assert!(matches!(DualNilm::new(cfg.clone(), &names(1), 0), Err(Error::Config(_))), "{cfg:?}");
    }
}
