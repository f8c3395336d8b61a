use dnilm_model::baselines::{fhmm_decode, fhmm_fit, fit_chain, EmInit, EmOptions, HmmChain};
use dnilm_model::Error;
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};

fn noisy_square(n: usize, period: usize, on: f64, sigma: f64, seed: u64) -> Vec<f64> {
    let mut rng = StdRng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).unwrap();
    (0..n)
        .map(|i| if (i / period) % 2 == 1 { on } else { 0.0 } + noise.sample(&mut rng))
        .collect()
}

#[test]
fn em_log_likelihood_never_decreases_over_random_starts() {
    let obs = noisy_square(1500, 31, 800.0, 20.0, 4);
    let mut worst = f64::INFINITY;
    for seed in 0..100 {
        let opts = EmOptions {
            init: EmInit::Random(seed),
            ..EmOptions::default()
        };
        let r = fit_chain("x", &obs, &opts).unwrap();
        assert!(r.log_likelihood.len() >= 2, "seed {seed}: no iterations recorded");
        for w in r.log_likelihood.windows(2) {
            worst = worst.min(w[1] - w[0]);
            assert!(w[1] >= w[0] - 1e-8, "seed {seed}: {} -> {}", w[0], w[1]);
        }
    }
    eprintln!("smallest per-iteration change {worst:e}");
}

fn assert_valid(c: &HmmChain) {
    for row in c.transition {
        assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert!((row[0] + row[1] - 1.0).abs() <= 1e-12, "{row:?}");
    }
    assert!((c.initial[0] + c.initial[1] - 1.0).abs() <= 1e-12);
    assert!(c.variances.iter().all(|&v| v > 0.0));
    assert!(c.means[0] <= c.means[1]);
}

#[test]
fn fitted_chains_keep_their_invariants() {
    for seed in 0..20 {
        let obs = noisy_square(400, 7 + seed as usize, 50.0 + 100.0 * seed as f64, 3.0, seed);
        let opts = EmOptions {
            init: EmInit::Random(seed),
            ..EmOptions::default()
        };
        assert_valid(&fit_chain("x", &obs, &opts).unwrap().chain);
    }
    // A noiseless channel collapses each state onto one value; the floor holds.
    let clean: Vec<f64> = (0..300).map(|i| if i % 20 < 10 { 0.0 } else { 300.0 }).collect();
    let c = fit_chain("clean", &clean, &EmOptions::default()).unwrap().chain;
    assert_valid(&c);
    assert!(c.variances.iter().all(|&v| v >= 1e-2));
}

#[test]
fn constant_and_non_finite_channels_are_degenerate() {
    assert!(matches!(fit_chain("c", &[7.0; 50], &EmOptions::default()), Err(Error::Degenerate(_))));
    assert!(matches!(fit_chain("e", &[], &EmOptions::default()), Err(Error::Degenerate(_))));
    assert!(matches!(
        fit_chain("n", &[0.0, 1.0, f64::NAN], &EmOptions::default()),
        Err(Error::Degenerate(_))
    ));
    let good = vec![0.0, 5.0, 0.0, 5.0];
    assert!(matches!(
        fhmm_fit(&[("good", &good), ("flat", &[1.0; 4])], None, &EmOptions::default()),
        Err(Error::Degenerate(name)) if name == "flat"
    ));
}

// Independent brute-force decoder: enumerate every joint path and score it
// with a Gaussian density written out here.
fn gaussian_ln(y: f64, mean: f64, var: f64) -> f64 {
    let z = (y - mean) * (y - mean) / var;
    -0.5 * z - 0.5 * (2.0 * std::f64::consts::PI * var).ln()
}

fn safe_ln(p: f64) -> f64 {
    if p == 0.0 {
        f64::NEG_INFINITY
    } else {
        p.ln()
    }
}

fn score(y: &[f64], chains: &[HmmChain], states: &[Vec<usize>]) -> f64 {
    let mut total = 0.0;
    for t in 0..y.len() {
        let mut mean = 0.0;
        let mut var = 0.0;
        for (c, s) in chains.iter().zip(states) {
            total += if t == 0 {
                safe_ln(c.initial[s[0]])
            } else {
                safe_ln(c.transition[s[t - 1]][s[t]])
            };
            let sign = if c.is_injection { -1.0 } else { 1.0 };
            mean += sign * c.means[s[t]];
            var += c.variances[s[t]];
        }
        total += gaussian_ln(y[t], mean, var);
    }
    total
}

fn brute_force(y: &[f64], chains: &[HmmChain]) -> f64 {
    let k = chains.len();
    let t = y.len();
    let mut best = f64::NEG_INFINITY;
    for code in 0u64..(1u64 << (k * t)) {
        let states: Vec<Vec<usize>> = (0..k)
            .map(|j| (0..t).map(|i| ((code >> (j * t + i)) & 1) as usize).collect())
            .collect();
        best = best.max(score(y, chains, &states));
    }
    best
}

fn random_chain(rng: &mut StdRng, name: &str, injection: bool) -> HmmChain {
    let p0: f64 = rng.gen_range(0.05..0.95);
    let a: f64 = rng.gen_range(0.05..0.95);
    let b: f64 = rng.gen_range(0.05..0.95);
    let lo: f64 = rng.gen_range(0.0..100.0);
    HmmChain {
        name: name.into(),
        initial: [p0, 1.0 - p0],
        transition: [[a, 1.0 - a], [1.0 - b, b]],
        means: [lo, lo + rng.gen_range(10.0..500.0)],
        variances: [rng.gen_range(1.0..2000.0), rng.gen_range(1.0..2000.0)],
        is_injection: injection,
    }
}

#[test]
fn viterbi_matches_exhaustive_search() {
    let mut rng = StdRng::seed_from_u64(2024);
    let mut instances = 0;
    for k in 1..=2 {
        for t in 1..=6 {
            for rep in 0..25 {
                let chains: Vec<HmmChain> = (0..k)
                    .map(|j| random_chain(&mut rng, &format!("c{j}"), k == 2 && j == 1 && rep % 2 == 0))
                    .collect();
                let y: Vec<f64> = (0..t).map(|_| rng.gen_range(-400.0..900.0)).collect();
                let d = fhmm_decode(&y, &chains).unwrap();
                let oracle = brute_force(&y, &chains);
                let decoded: Vec<Vec<usize>> = d.states.iter().map(|s| s.iter().map(|&b| b as usize).collect()).collect();
                let decoded_score = score(&y, &chains, &decoded);
                let tol = 1e-9 * oracle.abs().max(1.0);
                assert!((decoded_score - oracle).abs() <= tol, "K={k} T={t}: path {decoded_score} vs best {oracle}");
                assert!((d.log_prob - oracle).abs() <= tol, "K={k} T={t}: reported {} vs best {oracle}", d.log_prob);
                instances += 1;
            }
        }
    }
    assert_eq!(instances, 300);
}

#[test]
fn decode_handles_empty_and_refuses_oversized_products() {
    let mut rng = StdRng::seed_from_u64(1);
    let c = random_chain(&mut rng, "a", false);
    let d = fhmm_decode(&[], std::slice::from_ref(&c)).unwrap();
    assert_eq!(d.states, vec![Vec::<u8>::new()]);
    assert!(fhmm_decode(&[1.0], &vec![c.clone(); 12]).is_ok());
    assert!(matches!(fhmm_decode(&[1.0], &vec![c; 13]), Err(Error::ProductSpaceTooLarge { k: 13 })));
    assert!(fhmm_decode(&[1.0], &[]).is_err());
}

#[test]
fn injection_estimate_is_the_injection_chain_mean() {
    let load = noisy_square(500, 19, 600.0, 2.0, 3);
    let pv = noisy_square(500, 53, 250.0, 2.0, 8);
    let agg: Vec<f64> = load.iter().zip(&pv).map(|(l, p)| l - p).collect();
    let chains = fhmm_fit(&[("load", &load)], Some(("pv", &pv)), &EmOptions::default()).unwrap();
    assert!(chains[1].is_injection);
    let d = fhmm_decode(&agg, &chains).unwrap();
    let est = d.injection.unwrap();
    let on = &d.states[1];
    for t in 0..agg.len() {
        assert_eq!(est[t], chains[1].means[usize::from(on[t])]);
        let truth_on = pv[t] > 125.0;
        assert_eq!(on[t] == 1, truth_on, "step {t}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decoded_path_scores_at_least_as_well_as_the_truth(seed in any::<u64>(), t in 1usize..40) {
        let mut rng = StdRng::seed_from_u64(seed);
        let chains = vec![random_chain(&mut rng, "a", false), random_chain(&mut rng, "b", false)];
        let truth: Vec<Vec<usize>> = (0..2).map(|_| (0..t).map(|_| rng.gen_range(0..2)).collect()).collect();
        let y: Vec<f64> = (0..t)
            .map(|i| chains[0].means[truth[0][i]] + chains[1].means[truth[1][i]] + rng.gen_range(-20.0..20.0))
            .collect();
        let d = fhmm_decode(&y, &chains).unwrap();
        let decoded: Vec<Vec<usize>> = d.states.iter().map(|s| s.iter().map(|&b| b as usize).collect()).collect();
        let truth_score = score(&y, &chains, &truth);
        prop_assert!(score(&y, &chains, &decoded) >= truth_score - 1e-9 * truth_score.abs().max(1.0));
    }
}
