use candle_core::{DType, Device, Tensor};
use dnilm_model::baselines::{BaselineConfig, BaselineKind, NeuralBaseline};
use dnilm_model::nn::Ctx;
use dnilm_model::{predict, Error, Network};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn names(k: usize) -> Vec<String> {
    (0..k).map(|j| format!("a{j}")).collect()
}

fn input(b: usize, t: usize, dtype: DType, seed: u64) -> Tensor {
    let mut rng = StdRng::seed_from_u64(seed);
    let v: Vec<f64> = (0..b * t * 2).map(|_| rng.gen_range(-300.0..2500.0)).collect();
    Tensor::from_vec(v, (b, t, 2), &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

#[test]
fn every_tiny_baseline_has_the_heads_it_declares() {
    for kind in BaselineKind::ALL {
        let cfg = BaselineConfig::tiny(kind.name()).unwrap();
        let net = NeuralBaseline::new(cfg, &names(3), 1).unwrap();
        let heads = net.forward_t(&input(5, 16, DType::F64, 2), &mut Ctx::eval()).unwrap();
        match heads.states {
            Some(s) => {
                assert!(kind.predicts_states(), "{}", kind.name());
                assert_eq!(s.dims(), &[5, 3], "{}", kind.name());
                assert!(values(&s).iter().all(|&p| p > 0.0 && p < 1.0), "{}", kind.name());
            }
            None => assert!(!kind.predicts_states(), "{}", kind.name()),
        }
        match heads.injection {
            Some(i) => {
                assert!(kind.predicts_injection(), "{}", kind.name());
                assert_eq!(i.dims(), &[5, 16], "{}", kind.name());
                // Regression heads are unbounded; only classification is squashed.
                assert!(values(&i).iter().all(|p| p.is_finite()), "{}", kind.name());
            }
            None => assert!(!kind.predicts_injection(), "{}", kind.name()),
        }
    }
}

#[test]
fn published_presets_on_full_windows() {
    let s2p = NeuralBaseline::new(BaselineConfig::preset("seq2point").unwrap(), &names(2), 0).unwrap();
    let h = s2p.forward_t(&input(2, 300, DType::F32, 3), &mut Ctx::eval()).unwrap();
    assert_eq!(h.states.unwrap().dims(), &[2, 2]);
    assert!(h.injection.is_none());

    let dae = NeuralBaseline::new(BaselineConfig::preset("dae").unwrap(), &[], 0).unwrap();
    let h = dae.forward_t(&input(2, 300, DType::F32, 4), &mut Ctx::eval()).unwrap();
    assert_eq!(h.injection.unwrap().dims(), &[2, 300]);
    assert!(h.states.is_none());

    for kind in BaselineKind::ALL {
        let p = BaselineConfig::preset(kind.name()).unwrap();
        assert_eq!(p.kind(), kind);
        assert_eq!(p.window_length, 300);
    }
}

#[test]
fn unknown_presets_and_bad_inputs_are_errors() {
    assert!(matches!(BaselineConfig::preset("resnet"), Err(Error::UnknownPreset(n)) if n == "resnet"));
    assert!(matches!(BaselineConfig::tiny(""), Err(Error::UnknownPreset(_))));
    let net = NeuralBaseline::new(BaselineConfig::tiny("cnn_lstm").unwrap(), &names(1), 0).unwrap();
    assert!(net.forward_t(&input(2, 15, DType::F64, 1), &mut Ctx::eval()).is_err());
    let mut bad = values(&input(1, 16, DType::F64, 1));
    bad[7] = f64::INFINITY;
    assert!(matches!(predict(&net, &bad, 4), Err(Error::NonFinite { window: 0, step: 3, feature: 1 })));
    assert!(matches!(
        NeuralBaseline::new(BaselineConfig::tiny("unet").unwrap(), &["x".into(), "x".into()], 0),
        Err(Error::DuplicateAppliance(_))
    ));
}
