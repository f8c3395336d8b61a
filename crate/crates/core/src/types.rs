//! Shared data model: uniformly sampled power series, appliance specs,
//! state labels, injection profiles and the augmented household that ties
//! them together.
//!
//! Timestamps are UTC epoch seconds. Every value type is immutable once
//! built; constructors reject structurally invalid input, and
//! [`validate_household`] reports the cross-field invariants that only make
//! sense on a whole household (sign of the net load, grid alignment, NaN).

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance used when comparing grid start times and periods.
const GRID_EPS: f64 = 1e-9;

/// A uniform sampling grid: `start + k * period` for `k in 0..len`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub start: f64,
    pub period: f64,
    pub len: usize,
}

impl Grid {
    pub fn new(start: f64, period: f64, len: usize) -> Result<Self> {
        if !start.is_finite() {
            return Err(Error::invalid("grid.start", "must be finite"));
        }
        if !(period.is_finite() && period > 0.0) {
            return Err(Error::invalid("grid.period", format!("{period} is not > 0")));
        }
        Ok(Grid { start, period, len })
    }

    pub fn time_at(&self, index: usize) -> f64 {
        self.start + index as f64 * self.period
    }

    /// Timestamp of the last sample.
    pub fn last_time(&self) -> f64 {
        self.time_at(self.len.saturating_sub(1))
    }

    /// End of the span covered by the grid, one period past the last sample.
    pub fn end(&self) -> f64 {
        self.time_at(self.len)
    }

    /// Same start, period and length (start/period compared to 1e-9 relative).
    pub fn aligned_with(&self, other: &Grid) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= GRID_EPS * a.abs().max(b.abs()).max(1.0);
        self.len == other.len && close(self.start, other.start) && close(self.period, other.period)
    }

    pub fn slice(&self, range: Range<usize>) -> Grid {
        Grid {
            start: self.time_at(range.start),
            period: self.period,
            len: range.end - range.start,
        }
    }
}

/// Uniformly sampled electrical channel with active power and an optional
/// reactive channel of the same length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSeries {
    channel_id: String,
    start_time: f64,
    period: f64,
    active: Vec<f64>,
    reactive: Option<Vec<f64>>,
}

impl PowerSeries {
    pub fn new(
        channel_id: impl Into<String>,
        start_time: f64,
        period: f64,
        active: Vec<f64>,
        reactive: Option<Vec<f64>>,
    ) -> Result<Self> {
        Grid::new(start_time, period, active.len())?;
        if active.is_empty() {
            return Err(Error::EmptySeries);
        }
        if let Some(q) = &reactive {
            if q.len() != active.len() {
                return Err(Error::LengthMismatch {
                    left: active.len(),
                    right: q.len(),
                });
            }
        }
        Ok(PowerSeries {
            channel_id: channel_id.into(),
            start_time,
            period,
            active,
            reactive,
        })
    }

    pub fn on_grid(
        channel_id: impl Into<String>,
        grid: Grid,
        active: Vec<f64>,
        reactive: Option<Vec<f64>>,
    ) -> Result<Self> {
        if active.len() != grid.len {
            return Err(Error::LengthMismatch {
                left: grid.len,
                right: active.len(),
            });
        }
        Self::new(channel_id, grid.start, grid.period, active, reactive)
    }

    pub fn channel_id(&self) -> &str {
        &self.channel_id
    }

    pub fn start_time(&self) -> f64 {
        self.start_time
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn active(&self) -> &[f64] {
        &self.active
    }

    pub fn reactive(&self) -> Option<&[f64]> {
        self.reactive.as_deref()
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn grid(&self) -> Grid {
        Grid {
            start: self.start_time,
            period: self.period,
            len: self.active.len(),
        }
    }

    pub fn with_reactive(self, reactive: Vec<f64>) -> Result<Self> {
        Self::new(
            self.channel_id,
            self.start_time,
            self.period,
            self.active,
            Some(reactive),
        )
    }

    pub fn with_channel_id(mut self, channel_id: impl Into<String>) -> Self {
        self.channel_id = channel_id.into();
        self
    }

    pub fn slice(&self, range: Range<usize>) -> Result<Self> {
        let grid = self.grid().slice(range.clone());
        Self::new(
            self.channel_id.clone(),
            grid.start,
            grid.period,
            self.active[range.clone()].to_vec(),
            self.reactive.as_ref().map(|q| q[range].to_vec()),
        )
    }
}

/// Labeling and electrical parameters for one metered appliance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawApplianceSpec", into = "RawApplianceSpec")]
pub struct ApplianceSpec {
    name: String,
    on_threshold: f64,
    power_factor: f64,
    is_injection: bool,
}

#[derive(Serialize, Deserialize)]
struct RawApplianceSpec {
    name: String,
    on_threshold: f64,
    power_factor: f64,
    #[serde(default)]
    is_injection: bool,
}

impl TryFrom<RawApplianceSpec> for ApplianceSpec {
    type Error = Error;

    fn try_from(raw: RawApplianceSpec) -> Result<Self> {
        ApplianceSpec::new(raw.name, raw.on_threshold, raw.power_factor, raw.is_injection)
    }
}

impl From<ApplianceSpec> for RawApplianceSpec {
    fn from(spec: ApplianceSpec) -> Self {
        RawApplianceSpec {
            name: spec.name,
            on_threshold: spec.on_threshold,
            power_factor: spec.power_factor,
            is_injection: spec.is_injection,
        }
    }
}

impl ApplianceSpec {
    pub fn new(
        name: impl Into<String>,
        on_threshold: f64,
        power_factor: f64,
        is_injection: bool,
    ) -> Result<Self> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::invalid("appliance.name", "must not be empty"));
        }
        if !(on_threshold.is_finite() && on_threshold >= 0.0) {
            return Err(Error::invalid(
                "appliance.on_threshold",
                format!("{on_threshold} is not >= 0"),
            ));
        }
        check_power_factor(power_factor)?;
        Ok(ApplianceSpec {
            name,
            on_threshold,
            power_factor,
            is_injection,
        })
    }

    /// Convenience for an ordinary (consuming) appliance.
    pub fn appliance(name: impl Into<String>, on_threshold: f64, power_factor: f64) -> Result<Self> {
        Self::new(name, on_threshold, power_factor, false)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn on_threshold(&self) -> f64 {
        self.on_threshold
    }

    pub fn power_factor(&self) -> f64 {
        self.power_factor
    }

    pub fn is_injection(&self) -> bool {
        self.is_injection
    }
}

pub(crate) fn check_power_factor(pf: f64) -> Result<()> {
    if pf > 0.0 && pf <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid("power_factor", format!("{pf} is outside (0, 1]")))
    }
}

/// Binary ON/OFF labels for one appliance on a given grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSequence {
    appliance: String,
    grid: Grid,
    states: Vec<u8>,
}

impl StateSequence {
    pub fn new(appliance: impl Into<String>, grid: Grid, states: Vec<u8>) -> Result<Self> {
        if states.len() != grid.len {
            return Err(Error::LengthMismatch {
                left: grid.len,
                right: states.len(),
            });
        }
        if let Some(i) = states.iter().position(|&s| s > 1) {
            return Err(Error::invalid(
                "states",
                format!("value {} at index {i} is not 0 or 1", states[i]),
            ));
        }
        Ok(StateSequence {
            appliance: appliance.into(),
            grid,
            states,
        })
    }

    pub fn appliance(&self) -> &str {
        &self.appliance
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn states(&self) -> &[u8] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn slice(&self, range: Range<usize>) -> Self {
        StateSequence {
            appliance: self.appliance.clone(),
            grid: self.grid.slice(range.clone()),
            states: self.states[range].to_vec(),
        }
    }
}

/// Behind-the-meter generation series plus the capacity used to normalise
/// regression targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionProfile {
    series: PowerSeries,
    rated_capacity: f64,
    inverter_efficiency: f64,
}

impl InjectionProfile {
    pub fn new(series: PowerSeries, rated_capacity: f64, inverter_efficiency: f64) -> Result<Self> {
        if !(rated_capacity.is_finite() && rated_capacity > 0.0) {
            return Err(Error::invalid(
                "rated_capacity",
                format!("{rated_capacity} is not > 0"),
            ));
        }
        if !(inverter_efficiency > 0.0 && inverter_efficiency <= 1.0) {
            return Err(Error::invalid(
                "inverter_efficiency",
                format!("{inverter_efficiency} is outside (0, 1]"),
            ));
        }
        if let Some((i, v)) = series
            .active()
            .iter()
            .enumerate()
            .find(|(_, &v)| !(0.0..=rated_capacity).contains(&v))
        {
            return Err(Error::invalid(
                "injection.active",
                format!("{v} at index {i} is outside [0, {rated_capacity}]"),
            ));
        }
        Ok(InjectionProfile {
            series,
            rated_capacity,
            inverter_efficiency,
        })
    }

    pub fn series(&self) -> &PowerSeries {
        &self.series
    }

    pub fn rated_capacity(&self) -> f64 {
        self.rated_capacity
    }

    pub fn inverter_efficiency(&self) -> f64 {
        self.inverter_efficiency
    }

    pub fn slice(&self, range: Range<usize>) -> Result<Self> {
        Ok(InjectionProfile {
            series: self.series.slice(range)?,
            rated_capacity: self.rated_capacity,
            inverter_efficiency: self.inverter_efficiency,
        })
    }
}

/// One labeled appliance inside a household.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApplianceTrack {
    pub spec: ApplianceSpec,
    pub states: StateSequence,
    pub series: PowerSeries,
}

/// Net-metered household after injection, together with the per-appliance
/// ground truth and the (capped) injection that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedHousehold {
    pub aggregate: PowerSeries,
    pub appliances: Vec<ApplianceTrack>,
    pub injection: InjectionProfile,
}

impl AugmentedHousehold {
    pub fn grid(&self) -> Grid {
        self.aggregate.grid()
    }

    pub fn len(&self) -> usize {
        self.aggregate.len()
    }

    pub fn is_empty(&self) -> bool {
        self.aggregate.is_empty()
    }

    pub fn appliance_names(&self) -> Vec<String> {
        self.appliances
            .iter()
            .map(|a| a.spec.name().to_string())
            .collect()
    }

    /// Contiguous sub-range of every member series.
    pub fn slice(&self, range: Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.len() {
            return Err(Error::invalid(
                "range",
                format!("{range:?} is not inside 0..{}", self.len()),
            ));
        }
        let appliances = self
            .appliances
            .iter()
            .map(|a| {
                Ok(ApplianceTrack {
                    spec: a.spec.clone(),
                    states: a.states.slice(range.clone()),
                    series: a.series.slice(range.clone())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AugmentedHousehold {
            aggregate: self.aggregate.slice(range.clone())?,
            appliances,
            injection: self.injection.slice(range)?,
        })
    }
}

/// One broken invariant found by [`validate_household`].
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub field: String,
    pub index: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.index {
            Some(i) => write!(f, "{} [index {i}]: {}", self.field, self.message),
            None => write!(f, "{}: {}", self.field, self.message),
        }
    }
}

fn violation(field: impl Into<String>, index: Option<usize>, message: impl Into<String>) -> Violation {
    Violation {
        field: field.into(),
        index,
        message: message.into(),
    }
}

fn first_non_finite(values: &[f64]) -> Option<usize> {
    values.iter().position(|v| !v.is_finite())
}

fn check_finite(out: &mut Vec<Violation>, field: String, values: &[f64]) {
    if let Some(i) = first_non_finite(values) {
        out.push(violation(field, Some(i), "non-finite value"));
    }
}

/// Lists every violated household invariant; empty means the household is
/// well formed.
pub fn validate_household(h: &AugmentedHousehold) -> Vec<Violation> {
    let mut out = Vec::new();
    let grid = h.aggregate.grid();

    let agg = h.aggregate.active();
    check_finite(&mut out, "aggregate.active".into(), agg);
    if let Some(i) = agg.iter().position(|&v| v < 0.0) {
        out.push(violation(
            "aggregate.active",
            Some(i),
            format!("negative net load {}", agg[i]),
        ));
    }
    match h.aggregate.reactive() {
        Some(q) => check_finite(&mut out, "aggregate.reactive".into(), q),
        None => out.push(violation("aggregate.reactive", None, "reactive channel missing")),
    }

    let injection_specs = h.appliances.iter().filter(|a| a.spec.is_injection()).count();
    if injection_specs > 1 {
        out.push(violation(
            "appliances",
            None,
            format!("{injection_specs} specs are marked as injection, at most one allowed"),
        ));
    }

    for (k, track) in h.appliances.iter().enumerate() {
        let name = track.spec.name();
        let sgrid = track.series.grid();
        if !sgrid.aligned_with(&grid) {
            out.push(violation(
                format!("appliances[{k}]({name}).series"),
                first_mismatch_index(&grid, &sgrid),
                format!(
                    "grid mismatch: {} samples from {} every {}s vs aggregate {} samples from {} every {}s",
                    sgrid.len, sgrid.start, sgrid.period, grid.len, grid.start, grid.period
                ),
            ));
        }
        if !track.states.grid().aligned_with(&sgrid) {
            out.push(violation(
                format!("appliances[{k}]({name}).states"),
                first_mismatch_index(&sgrid, &track.states.grid()),
                "grid mismatch between labels and series",
            ));
        }
        check_finite(
            &mut out,
            format!("appliances[{k}]({name}).series.active"),
            track.series.active(),
        );
        match track.series.reactive() {
            Some(q) => check_finite(&mut out, format!("appliances[{k}]({name}).series.reactive"), q),
            None => out.push(violation(
                format!("appliances[{k}]({name}).series.reactive"),
                None,
                "reactive channel missing",
            )),
        }
    }

    let inj = h.injection.series();
    if !inj.grid().aligned_with(&grid) {
        out.push(violation(
            "injection.series",
            first_mismatch_index(&grid, &inj.grid()),
            "grid mismatch with aggregate",
        ));
    }
    check_finite(&mut out, "injection.active".into(), inj.active());
    let cap = h.injection.rated_capacity();
    if let Some(i) = inj.active().iter().position(|v| !(0.0..=cap).contains(v)) {
        out.push(violation(
            "injection.active",
            Some(i),
            format!("{} outside [0, {cap}]", inj.active()[i]),
        ));
    }
    out
}

/// Index of the first sample whose timestamp differs between two grids
/// (or the first index past the shorter one).
fn first_mismatch_index(a: &Grid, b: &Grid) -> Option<usize> {
    let n = a.len.min(b.len);
    (0..n)
        .find(|&i| (a.time_at(i) - b.time_at(i)).abs() > GRID_EPS * a.time_at(i).abs().max(1.0))
        .or(Some(n))
}
