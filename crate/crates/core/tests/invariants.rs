use dnilm_core::pipeline::format::{read_household, write_household, WindowSet};
use dnilm_core::pipeline::{extract_windows, split_dataset, synthesize_household, SplitMode, WindowPlan};
use dnilm_core::toy::{generate, ToyConfig};
use dnilm_core::{
    validate_household, ApplianceSpec, AugmentedHousehold, Grid, InjectionProfile, PowerSeries,
};
use proptest::prelude::*;

fn household(a: Vec<f64>, b: Vec<f64>, pv: Vec<f64>) -> AugmentedHousehold {
    let grid = Grid::new(1_000.0, 6.0, a.len()).unwrap();
    let rated = pv.iter().cloned().fold(1.0, f64::max);
    let inj = InjectionProfile::new(PowerSeries::on_grid("pv", grid, pv, None).unwrap(), rated, 0.96).unwrap();
    synthesize_household(
        &[
            PowerSeries::on_grid("a", grid, a, None).unwrap(),
            PowerSeries::on_grid("b", grid, b, None).unwrap(),
        ],
        &[
            ApplianceSpec::appliance("a", 10.0, 0.9).unwrap(),
            ApplianceSpec::appliance("b", 50.0, 1.0).unwrap(),
        ],
        None,
        &inj,
    )
    .unwrap()
}

fn series(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (
        proptest::collection::vec(0.0f64..3000.0, n),
        proptest::collection::vec(0.0f64..3000.0, n),
        proptest::collection::vec(0.0f64..2000.0, n),
    )
}

proptest! {
    #[test]
    fn synthesized_households_are_valid_and_conserve((a, b, pv) in (2usize..80).prop_flat_map(series)) {
        let h = household(a.clone(), b.clone(), pv);
        prop_assert!(validate_household(&h).is_empty());
        let inj = h.injection.series().active();
        for t in 0..h.len() {
            prop_assert_eq!(h.aggregate.active()[t] + inj[t], a[t] + b[t]);
        }
    }

    #[test]
    fn injected_violations_are_flagged((a, b, pv) in (3usize..40).prop_flat_map(series), at in 0usize..40, kind in 0u8..3) {
        let h = household(a, b, pv);
        let at = at % h.len();
        let mut broken = h.clone();
        let grid = h.grid();
        let mut p = h.aggregate.active().to_vec();
        let q = h.aggregate.reactive().unwrap().to_vec();
        match kind {
            0 => p[at] = -1.0,
            1 => p[at] = f64::NAN,
            _ => {
                broken.appliances[0].series = h.appliances[0].series.slice(0..h.len() - 1).unwrap();
            }
        }
        if kind < 2 {
            broken.aggregate = PowerSeries::on_grid("aggregate", grid, p, Some(q)).unwrap();
        }
        let v = validate_household(&broken);
        prop_assert!(!v.is_empty());
        if kind < 2 {
            prop_assert_eq!(v[0].index, Some(at));
        }
    }

    #[test]
    fn grid_alignment_is_transitive(start in 0.0f64..1e9, period in 0.1f64..100.0, len in 1usize..1000, jitter in -1e-12f64..1e-12) {
        let a = Grid::new(start, period, len).unwrap();
        let b = Grid::new(start * (1.0 + jitter), period, len).unwrap();
        let c = Grid::new(start, period * (1.0 - jitter), len).unwrap();
        if a.aligned_with(&b) && b.aligned_with(&c) {
            prop_assert!(a.aligned_with(&c));
        }
    }

    #[test]
    fn household_files_round_trip((a, b, pv) in (1usize..50).prop_flat_map(series)) {
        let h = household(a, b, pv);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.dnilm");
        write_household(&h, &path).unwrap();
        prop_assert_eq!(read_household(&path).unwrap(), h);
    }
}

#[test]
fn windows_never_cross_split_boundaries() {
    let data = generate(&ToyConfig { days: 3, ..ToyConfig::default() }).unwrap();
    let h = data.household().unwrap();
    let plan = WindowPlan::new(300, 77).unwrap();
    for mode in [
        SplitMode::TestMiddle { test_span_s: 86_400.0 },
        SplitMode::LeaveOneDayOut,
    ] {
        for fold in split_dataset(&h, mode).unwrap() {
            let test_start = h.grid().time_at(fold.test_range.start);
            let test_end = h.grid().time_at(fold.test_range.end - 1);
            let set = WindowSet::from_segments(&fold.train, plan).unwrap();
            for w in &set.samples {
                assert!(w.end_time < test_start || w.start_time > test_end);
            }
            let direct: usize = fold.train.iter().map(|s| plan.count(s.len())).sum();
            assert_eq!(set.len(), direct);
        }
    }
}

#[test]
fn labels_only_see_the_final_step() {
    let data = generate(&ToyConfig { days: 1, ..ToyConfig::default() }).unwrap();
    let h = data.household().unwrap();
    let plan = WindowPlan::new(300, 300).unwrap();
    let windows = extract_windows(&h, plan).unwrap();
    for (i, w) in windows.iter().enumerate() {
        let last = i * 300 + 299;
        for (k, track) in h.appliances.iter().enumerate() {
            assert_eq!(w.state_labels[k], track.states.states()[last]);
        }
    }
}
