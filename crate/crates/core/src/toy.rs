//! Small synthetic household: square-wave appliances, a noisy residual load
//! and clear-sky-like irradiance. Used by tests, the acceptance suite and
//! as a quick-start dataset.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::rngs::StdRng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::pipeline::io::{write_channel_csv, write_irradiance_csv};
use crate::pipeline::manifest::{ApplianceEntry, Manifest, PvEntry, ResidualEntry, WindowsEntry};
use crate::pipeline::split::SplitMode;
use crate::pipeline::synthesize_household;
use crate::pv::{simulate_profile, IrradianceSeries, PvConfig};
use crate::types::{ApplianceSpec, AugmentedHousehold, Grid, PowerSeries};

/// 2024-06-01T00:00:00Z.
pub const TOY_START: f64 = 1_717_200_000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SquareWave {
    pub name: String,
    pub power: f64,
    pub period_s: f64,
    /// Fraction of each period spent ON.
    pub duty: f64,
    pub phase_s: f64,
    pub on_threshold: f64,
    pub power_factor: f64,
}

impl SquareWave {
    pub fn value_at(&self, t: f64) -> f64 {
        let pos = (t + self.phase_s).rem_euclid(self.period_s);
        if pos < self.duty * self.period_s {
            self.power
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub days: usize,
    pub period_s: f64,
    pub start: f64,
    pub seed: u64,
    pub appliances: Vec<SquareWave>,
    pub residual_mean: f64,
    pub residual_sigma: f64,
    pub residual_power_factor: f64,
    pub irradiance_period_s: f64,
    pub peak_ghi: f64,
    pub pv: PvConfig,
}

impl Default for ToyConfig {
    /// Three days at 6 s: a 200 W and a 1000 W appliance with different
    /// duty cycles, 40 W of σ = 5 W residual noise and a 300 W array.
    fn default() -> Self {
        ToyConfig {
            days: 3,
            period_s: 6.0,
            start: TOY_START,
            seed: 7,
            appliances: vec![
                SquareWave {
                    name: "pump".into(),
                    power: 200.0,
                    period_s: 36.0 * 60.0,
                    duty: 0.5,
                    phase_s: 0.0,
                    on_threshold: 100.0,
                    power_factor: 0.8,
                },
                SquareWave {
                    name: "heater".into(),
                    power: 1000.0,
                    period_s: 97.0 * 60.0,
                    duty: 0.25,
                    phase_s: 600.0,
                    on_threshold: 500.0,
                    power_factor: 0.95,
                },
            ],
            residual_mean: 40.0,
            residual_sigma: 5.0,
            residual_power_factor: 0.9,
            irradiance_period_s: 1800.0,
            peak_ghi: 1000.0,
            pv: PvConfig::with_rated(300.0),
        }
    }
}

/// Generated raw channels, before injection synthesis.
#[derive(Debug, Clone)]
pub struct ToyData {
    pub config: ToyConfig,
    pub grid: Grid,
    pub appliances: Vec<PowerSeries>,
    pub specs: Vec<ApplianceSpec>,
    pub residual: PowerSeries,
    pub irradiance: IrradianceSeries,
}

/// GHI following a half-sine between 06:00 and 18:00 UTC.
fn ghi_at(t: f64, peak: f64) -> f64 {
    let hour = (t / 3600.0).rem_euclid(24.0);
    if (6.0..18.0).contains(&hour) {
        (peak * (PI * (hour - 6.0) / 12.0).sin()).max(0.0)
    } else {
        0.0
    }
}

pub fn generate(config: &ToyConfig) -> Result<ToyData> {
    let len = (config.days as f64 * 86_400.0 / config.period_s).round() as usize;
    let grid = Grid::new(config.start, config.period_s, len)?;
    let mut rng = StdRng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.residual_sigma.max(0.0)).expect("finite sigma");

    let mut appliances = Vec::new();
    let mut specs = Vec::new();
    for a in &config.appliances {
        let active = (0..len).map(|i| a.value_at(grid.time_at(i))).collect();
        appliances.push(PowerSeries::on_grid(a.name.clone(), grid, active, None)?);
        specs.push(ApplianceSpec::appliance(&a.name, a.on_threshold, a.power_factor)?);
    }
    let residual = (0..len)
        .map(|_| (config.residual_mean + noise.sample(&mut rng)).max(0.0))
        .collect();
    let residual = PowerSeries::on_grid("residual", grid, residual, None)?;

    // One sample past the grid end so the irradiance covers the last step.
    let irr_len = (grid.end() - config.start) / config.irradiance_period_s;
    let irr_len = irr_len.ceil() as usize + 1;
    let times = (0..irr_len).map(|i| config.start + i as f64 * config.irradiance_period_s);
    let ghi = times.clone().map(|t| ghi_at(t, config.peak_ghi)).collect();
    let t_amb = times
        .map(|t| 18.0 + 7.0 * (2.0 * PI * ((t / 3600.0).rem_euclid(24.0) - 9.0) / 24.0).sin())
        .collect();
    let irradiance = IrradianceSeries::new(config.start, config.irradiance_period_s, ghi, t_amb)?;

    Ok(ToyData {
        config: config.clone(),
        grid,
        appliances,
        specs,
        residual,
        irradiance,
    })
}

impl ToyData {
    pub fn household(&self) -> Result<AugmentedHousehold> {
        let residual = crate::pipeline::synthesize_reactive(&self.residual, self.config.residual_power_factor)?;
        let profile = simulate_profile(&self.irradiance, &self.config.pv, self.grid)?;
        synthesize_household(&self.appliances, &self.specs, Some(&residual), &profile)
    }

    /// Writes channel CSVs, the irradiance CSV and a manifest into `dir`,
    /// returning the manifest path.
    pub fn write_inputs(&self, dir: &Path, split: SplitMode, windows: WindowsEntry) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
        let mut entries = Vec::new();
        for (s, spec) in self.appliances.iter().zip(&self.specs) {
            let file = format!("{}.csv", spec.name());
            write_channel_csv(s, dir.join(&file))?;
            entries.push(ApplianceEntry {
                name: spec.name().into(),
                path: file.into(),
                on_threshold: spec.on_threshold(),
                power_factor: spec.power_factor(),
            });
        }
        write_channel_csv(&self.residual, dir.join("residual.csv"))?;
        write_irradiance_csv(&self.irradiance, dir.join("irradiance.csv"))?;
        let manifest = Manifest {
            timezone: "UTC".into(),
            period_s: Some(self.grid.period),
            start: None,
            length: None,
            appliances: entries,
            residual: Some(ResidualEntry {
                path: "residual.csv".into(),
                power_factor: Some(self.config.residual_power_factor),
            }),
            pv: PvEntry {
                irradiance: Some("irradiance.csv".into()),
                config: self.config.pv.clone(),
            },
            split,
            windows,
        };
        let path = dir.join("manifest.toml");
        std::fs::write(&path, manifest.to_toml()).map_err(|e| crate::Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::validate_household;

    fn small() -> ToyConfig {
        ToyConfig {
            days: 1,
            ..ToyConfig::default()
        }
    }

    #[test]
    fn toy_household_is_valid() {
        let data = generate(&small()).unwrap();
        assert_eq!(data.grid.len, 14_400);
        let h = data.household().unwrap();
        assert!(validate_household(&h).is_empty());
        let on: usize = h.appliances[0].states.states().iter().map(|&s| s as usize).sum();
        assert!((on as f64 / 14_400.0 - 0.5).abs() < 0.02);
        let inj = h.injection.series().active();
        assert!(inj.iter().any(|&v| v > 200.0));
        assert!(inj[..100].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generation_is_seeded() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.residual, b.residual);
        let c = generate(&ToyConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.residual, c.residual);
    }

    #[test]
    fn written_manifest_rebuilds_the_same_household() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate(&small()).unwrap();
        let path = data
            .write_inputs(dir.path(), SplitMode::default(), WindowsEntry::default())
            .unwrap();
        let m = Manifest::load(&path).unwrap();
        let built = m.build(dir.path(), None).unwrap().household;
        let direct = data.household().unwrap();
        assert_eq!(built.len(), direct.len());
        assert_eq!(built.aggregate.active(), direct.aggregate.active());
        assert_eq!(built.injection.series().active(), direct.injection.series().active());
    }
}
