//! Ingestion, alignment, labeling, injection synthesis, splitting and
//! windowing of household meter data.

pub mod format;
pub mod io;
pub mod manifest;
pub mod resample;
pub mod split;
pub mod windows;

pub use io::{load_channel, load_irradiance, write_channel_csv, write_irradiance_csv, SourceTz};
pub use manifest::{HouseholdInputs, Manifest};
pub use resample::resample_align;
pub use split::{split_dataset, Fold, SplitMode};
pub use windows::{extract_windows, WindowPlan, WindowedSample};

use crate::error::{Error, Result};
use crate::pv::{cap_and_inject, reactive_power};
use crate::types::{
    check_power_factor, ApplianceSpec, ApplianceTrack, AugmentedHousehold, InjectionProfile,
    PowerSeries, StateSequence,
};

/// ON iff active power is strictly above the appliance threshold.
pub fn label_states(series: &PowerSeries, spec: &ApplianceSpec) -> StateSequence {
    let states = series
        .active()
        .iter()
        .map(|&p| u8::from(p > spec.on_threshold()))
        .collect();
    StateSequence::new(spec.name(), series.grid(), states).expect("one label per sample")
}

/// Fills the reactive channel from a fixed power factor.
pub fn synthesize_reactive(series: &PowerSeries, pf: f64) -> Result<PowerSeries> {
    check_power_factor(pf)?;
    let q = series
        .active()
        .iter()
        .map(|&p| reactive_power(p, pf))
        .collect::<Result<Vec<_>>>()?;
    series.clone().with_reactive(q)
}

/// Builds the post-injection household.
///
/// The pre-injection aggregate is the sum of every appliance channel plus the
/// optional unlabeled `residual`. Generation is capped at that aggregate each
/// step; the stored injection holds the capped values, and its reactive part
/// is rescaled from the capped active power. Appliance channels without a
/// reactive part get one from their spec's power factor; a residual without
/// one contributes no reactive power.
pub fn synthesize_household(
    appliance_series: &[PowerSeries],
    specs: &[ApplianceSpec],
    residual: Option<&PowerSeries>,
    injection: &InjectionProfile,
) -> Result<AugmentedHousehold> {
    if appliance_series.len() != specs.len() {
        return Err(Error::LengthMismatch {
            left: appliance_series.len(),
            right: specs.len(),
        });
    }
    if let Some(spec) = specs.iter().find(|s| s.is_injection()) {
        return Err(Error::invalid(
            "specs",
            format!("'{}' is an injection source; pass it as the injection profile", spec.name()),
        ));
    }
    let grid = injection.series().grid();
    let mismatch = |what: &str, s: &PowerSeries| {
        Error::GridMismatch(format!(
            "{what} '{}' has {} samples from {} every {}s, injection has {} from {} every {}s",
            s.channel_id(),
            s.len(),
            s.start_time(),
            s.period(),
            grid.len,
            grid.start,
            grid.period
        ))
    };
    for s in appliance_series {
        if !s.grid().aligned_with(&grid) {
            return Err(mismatch("appliance", s));
        }
    }
    if let Some(r) = residual {
        if !r.grid().aligned_with(&grid) {
            return Err(mismatch("residual", r));
        }
    }

    let n = grid.len;
    let mut tracks = Vec::with_capacity(specs.len());
    let mut pre_p = vec![0.0; n];
    let mut pre_q = vec![0.0; n];
    for (series, spec) in appliance_series.iter().zip(specs) {
        let series = match series.reactive() {
            Some(_) => series.clone(),
            None => synthesize_reactive(series, spec.power_factor())?,
        };
        accumulate(&mut pre_p, series.active());
        accumulate(&mut pre_q, series.reactive().expect("reactive filled above"));
        tracks.push(ApplianceTrack {
            spec: spec.clone(),
            states: label_states(&series, spec),
            series,
        });
    }
    if let Some(r) = residual {
        accumulate(&mut pre_p, r.active());
        if let Some(q) = r.reactive() {
            accumulate(&mut pre_q, q);
        }
    }

    let pv_p = injection.series().active();
    let pv_q = injection.series().reactive();
    let mut adj_p = Vec::with_capacity(n);
    let mut adj_q = Vec::with_capacity(n);
    let mut agg_p = Vec::with_capacity(n);
    let mut agg_q = Vec::with_capacity(n);
    for t in 0..n {
        let (adjusted, net) = cap_and_inject(pv_p[t], pre_p[t]);
        let q_ratio = match pv_q {
            Some(q) if pv_p[t] > 0.0 => q[t] / pv_p[t],
            _ => 0.0,
        };
        let q_adj = adjusted * q_ratio;
        adj_p.push(adjusted);
        adj_q.push(q_adj);
        agg_p.push(net);
        agg_q.push((pre_q[t] - q_adj).max(0.0));
    }

    let inj_series = PowerSeries::on_grid(injection.series().channel_id(), grid, adj_p, Some(adj_q))?;
    Ok(AugmentedHousehold {
        aggregate: PowerSeries::on_grid("aggregate", grid, agg_p, Some(agg_q))?,
        appliances: tracks,
        injection: InjectionProfile::new(
            inj_series,
            injection.rated_capacity(),
            injection.inverter_efficiency(),
        )?,
    })
}

fn accumulate(acc: &mut [f64], values: &[f64]) {
    for (a, v) in acc.iter_mut().zip(values) {
        *a += v;
    }
}
