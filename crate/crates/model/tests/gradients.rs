mod support;

use dnilm_model::baselines::{BaselineConfig, BaselineKind, NeuralBaseline};
use dnilm_model::dualnilm::DecoderQuery;
use dnilm_model::loss::InjectionLossKind;
use dnilm_model::{DualNilm, ModelConfig};
use support::gradcheck::{check, random_batch, Report};

fn appliances(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("a{i}")).collect()
}

fn assert_report(what: &str, r: &Report) {
    if let Some(w) = &r.worst {
        eprintln!(
            "{what}: {} entries checked, worst rel {:.2e} at {}[{}] (analytic {:.6e}, numeric {:.6e})",
            r.checked, w.rel, w.param, w.index, w.analytic, w.numeric
        );
    }
    assert!(
        r.passed(),
        "{what}: {} of {} entries exceed tolerance, first {:?}",
        r.failures.len(),
        r.checked,
        r.failures.first()
    );
}

fn check_dualnilm(cfg: ModelConfig, what: &str) {
    let k = 2;
    let net = DualNilm::new(cfg.clone(), &appliances(k), 11).unwrap();
    let batch = random_batch(3, cfg.window_length, k, 5);
    assert_report(what, &check(&net, &batch));
}

#[test]
fn dualnilm_tiny_matches_finite_differences() {
    let cfg = ModelConfig::tiny();
    assert_eq!((cfg.window_length, cfg.conv_filters, cfg.d_model, cfg.heads), (8, 4, 8, 2));
    check_dualnilm(cfg, "dualnilm tiny");
}

#[test]
fn dualnilm_variants_match_finite_differences() {
    check_dualnilm(
        ModelConfig {
            positional_encoding: true,
            decoder_query: DecoderQuery::Learned,
            injection_loss: InjectionLossKind::L1,
            lambda1: 0.7,
            lambda2: 1.3,
            ..ModelConfig::tiny()
        },
        "dualnilm learned query",
    );
}

#[test]
fn every_neural_baseline_matches_finite_differences() {
    for kind in BaselineKind::ALL {
        let cfg = BaselineConfig::tiny(kind.name()).unwrap();
        let net = NeuralBaseline::new(cfg.clone(), &appliances(2), 3).unwrap();
        let batch = random_batch(3, cfg.window_length, 2, 9);
        assert_report(kind.name(), &check(&net, &batch));
    }
}
