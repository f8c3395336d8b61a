//! Photovoltaic injection simulation: irradiance and ambient temperature to
//! cell temperature, temperature-derated efficiency, clipped PV output,
//! reactive power, and the consumption cap applied when the output is
//! integrated into a household meter.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::resample::hold_indices;
use crate::types::{check_power_factor, Grid, InjectionProfile, PowerSeries};

/// Irradiance at which cell temperature rise is specified (W/m²).
const NOCT_IRRADIANCE: f64 = 800.0;
/// Ambient temperature at NOCT test conditions (°C).
const NOCT_AMBIENT: f64 = 20.0;
/// Standard test condition irradiance (W/m²).
const STC_IRRADIANCE: f64 = 1000.0;
/// Standard test condition cell temperature (°C).
const STC_CELL_TEMP: f64 = 25.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PvConfig {
    /// Rated capacity in watts. There is no sensible universal default, so
    /// callers are expected to set it.
    pub p_rated: f64,
    pub t_noct: f64,
    pub gamma: f64,
    pub eta_inv: f64,
    pub power_factor: f64,
}

impl Default for PvConfig {
    fn default() -> Self {
        PvConfig {
            p_rated: 120.0,
            t_noct: 45.0,
            gamma: -0.005,
            eta_inv: 0.96,
            power_factor: 0.98,
        }
    }
}

impl PvConfig {
    pub fn with_rated(p_rated: f64) -> Self {
        PvConfig {
            p_rated,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_rated.is_finite() && self.p_rated > 0.0) {
            return Err(Error::invalid("p_rated", format!("{} is not > 0", self.p_rated)));
        }
        if !(self.eta_inv > 0.0 && self.eta_inv <= 1.0) {
            return Err(Error::invalid("eta_inv", format!("{} is outside (0, 1]", self.eta_inv)));
        }
        if !(self.gamma < 0.0) {
            return Err(Error::invalid("gamma", format!("{} is not < 0", self.gamma)));
        }
        if !self.t_noct.is_finite() {
            return Err(Error::invalid("t_noct", "must be finite"));
        }
        check_power_factor(self.power_factor)
    }
}

/// Global horizontal irradiance and ambient temperature on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct IrradianceSeries {
    grid: Grid,
    ghi: Vec<f64>,
    t_ambient: Vec<f64>,
}

impl IrradianceSeries {
    pub fn new(start_time: f64, period: f64, ghi: Vec<f64>, t_ambient: Vec<f64>) -> Result<Self> {
        if ghi.is_empty() {
            return Err(Error::EmptySeries);
        }
        if ghi.len() != t_ambient.len() {
            return Err(Error::LengthMismatch {
                left: ghi.len(),
                right: t_ambient.len(),
            });
        }
        if let Some(i) = ghi.iter().position(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(Error::invalid("ghi", format!("{} at index {i} is not >= 0", ghi[i])));
        }
        if let Some(i) = t_ambient.iter().position(|t| !t.is_finite()) {
            return Err(Error::invalid("t_ambient", format!("non-finite at index {i}")));
        }
        let grid = Grid::new(start_time, period, ghi.len())?;
        Ok(IrradianceSeries { grid, ghi, t_ambient })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn ghi(&self) -> &[f64] {
        &self.ghi
    }

    pub fn t_ambient(&self) -> &[f64] {
        &self.t_ambient
    }
}

fn check_ghi(ghi: f64) -> Result<()> {
    if ghi.is_finite() && ghi >= 0.0 {
        Ok(())
    } else {
        Err(Error::invalid("ghi", format!("{ghi} is not >= 0")))
    }
}

/// Cell temperature (°C) from the NOCT model.
pub fn cell_temperature(t_ambient: f64, ghi: f64, t_noct: f64) -> Result<f64> {
    check_ghi(ghi)?;
    Ok(t_ambient + (ghi / STC_IRRADIANCE) * ((t_noct - NOCT_AMBIENT) / (NOCT_IRRADIANCE / STC_IRRADIANCE)))
}

/// Linear temperature derating relative to 25 °C.
pub fn efficiency_adjustment(t_cell: f64, gamma: f64) -> f64 {
    1.0 + gamma * (t_cell - STC_CELL_TEMP)
}

/// AC output in watts, clipped to the rated capacity. A negative derating
/// factor (only reachable above ~225 °C) is treated as zero output.
pub fn pv_power(ghi: f64, cfg: &PvConfig, eta_adj: f64) -> Result<f64> {
    check_ghi(ghi)?;
    let eta_adj = eta_adj.max(0.0);
    let raw = ghi * cfg.p_rated / STC_IRRADIANCE * eta_adj * cfg.eta_inv;
    Ok(raw.min(cfg.p_rated))
}

/// Reactive power `P * tan(acos(pf))`; exactly zero at unity power factor.
pub fn reactive_power(p: f64, pf: f64) -> Result<f64> {
    check_power_factor(pf)?;
    if pf == 1.0 {
        return Ok(0.0);
    }
    Ok(p * pf.acos().tan())
}

/// Caps generation at the instantaneous consumption and returns
/// `(adjusted_generation, net_load)` with the net load clamped at zero.
///
/// `net + adjusted == p_agg` holds exactly in floating point. When
/// `p_agg - p_pv` rounds, the adjusted generation is taken as
/// `p_agg - net` instead (exact, since `net >= p_agg / 2` there), so it may
/// sit a rounding step of `p_agg` below `p_pv`; it never exceeds `p_pv`.
pub fn cap_and_inject(p_pv: f64, p_agg: f64) -> (f64, f64) {
    if p_pv >= p_agg {
        return (p_agg, 0.0);
    }
    let mut net = p_agg - p_pv;
    if net + p_pv == p_agg {
        return (p_pv, net);
    }
    let mut adjusted = p_agg - net;
    if adjusted > p_pv {
        net = net.next_up();
        adjusted = p_agg - net;
    }
    (adjusted, net)
}

/// Full chain from irradiance to an (uncapped) injection profile on
/// `target`. Irradiance is held (forward-filled, leading gap back-filled)
/// onto the target grid.
pub fn simulate_profile(
    irr: &IrradianceSeries,
    cfg: &PvConfig,
    target: Grid,
) -> Result<InjectionProfile> {
    cfg.validate()?;
    if target.len == 0 {
        return Err(Error::EmptySeries);
    }
    let src = irr.grid();
    if src.end() <= target.last_time() {
        return Err(Error::CoverageGap {
            irradiance_end: src.end(),
            grid_end: target.last_time(),
        });
    }
    let idx = hold_indices(&src, &target);
    let mut active = Vec::with_capacity(target.len);
    let mut reactive = Vec::with_capacity(target.len);
    for &i in &idx {
        let t_cell = cell_temperature(irr.t_ambient[i], irr.ghi[i], cfg.t_noct)?;
        let eta = efficiency_adjustment(t_cell, cfg.gamma);
        let p = pv_power(irr.ghi[i], cfg, eta)?;
        reactive.push(reactive_power(p, cfg.power_factor)?);
        active.push(p);
    }
    let series = PowerSeries::on_grid("pv", target, active, Some(reactive))?;
    InjectionProfile::new(series, cfg.p_rated, cfg.eta_inv)
}
