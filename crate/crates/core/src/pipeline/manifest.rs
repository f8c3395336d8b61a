//! Household manifest: a TOML file naming the channel files, appliance
//! specs, PV simulation inputs, split mode and window plan.
//!
//! ```toml
//! timezone = "Europe/London"   # for naive timestamps in channel files
//! period_s = 6.0               # target grid; defaults to the first channel's
//!
//! [[appliance]]
//! name = "kettle"
//! path = "kettle.csv"
//! on_threshold = 1500.0
//! power_factor = 0.99
//!
//! [residual]                   # optional unlabeled load
//! path = "other.csv"
//! power_factor = 0.9
//!
//! [pv]
//! irradiance = "nsrdb.csv"
//! p_rated = 120.0
//!
//! [split]
//! mode = "chronological"
//! test_span_s = 86400.0
//!
//! [windows]
//! length = 300
//! train_stride = 10
//! test_stride = 300
//! ```
//!
//! Relative paths are resolved against the manifest's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::io::{load_channel, load_irradiance, parse_timestamp, SourceTz};
use crate::pipeline::resample::resample_align;
use crate::pipeline::split::SplitMode;
use crate::pipeline::windows::{WindowPlan, DEFAULT_TRAIN_STRIDE, DEFAULT_WINDOW};
use crate::pipeline::{synthesize_household, synthesize_reactive};
use crate::pv::{simulate_profile, PvConfig};
use crate::types::{ApplianceSpec, AugmentedHousehold, Grid, PowerSeries};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default = "default_tz")]
    pub timezone: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period_s: Option<f64>,
    /// Grid start (any accepted timestamp form); defaults to the latest
    /// channel start.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length: Option<usize>,
    #[serde(rename = "appliance")]
    pub appliances: Vec<ApplianceEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual: Option<ResidualEntry>,
    pub pv: PvEntry,
    #[serde(default)]
    pub split: SplitMode,
    #[serde(default)]
    pub windows: WindowsEntry,
}

fn default_tz() -> String {
    "UTC".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApplianceEntry {
    pub name: String,
    pub path: PathBuf,
    pub on_threshold: f64,
    pub power_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResidualEntry {
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_factor: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PvEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub irradiance: Option<PathBuf>,
    #[serde(flatten)]
    pub config: PvConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowsEntry {
    pub length: usize,
    pub train_stride: usize,
    pub test_stride: usize,
}

impl Default for WindowsEntry {
    fn default() -> Self {
        WindowsEntry {
            length: DEFAULT_WINDOW,
            train_stride: DEFAULT_TRAIN_STRIDE,
            test_stride: DEFAULT_WINDOW,
        }
    }
}

impl WindowsEntry {
    pub fn train_plan(&self) -> Result<WindowPlan> {
        WindowPlan::new(self.length, self.train_stride)
    }

    pub fn test_plan(&self) -> Result<WindowPlan> {
        WindowPlan::new(self.length, self.test_stride)
    }
}

/// A built household plus every file that went into it.
#[derive(Debug, Clone)]
pub struct HouseholdInputs {
    pub household: AugmentedHousehold,
    pub input_files: Vec<PathBuf>,
}

impl Manifest {
    pub fn from_toml(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.span().map_or(0, |s| line_of(&text, s.start)),
            reason: e.message().to_string(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serialises")
    }

    pub fn source_tz(&self) -> Result<SourceTz> {
        self.timezone.parse()
    }

    /// Loads, aligns and synthesises the household. `irradiance` overrides
    /// the manifest's irradiance path.
    pub fn build(&self, base_dir: &Path, irradiance: Option<&Path>) -> Result<HouseholdInputs> {
        if self.appliances.is_empty() {
            return Err(Error::invalid("appliance", "manifest lists no appliances"));
        }
        let tz = self.source_tz()?;
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base_dir.join(p) };
        let mut files = Vec::new();

        let mut raw = Vec::with_capacity(self.appliances.len());
        let mut specs = Vec::with_capacity(self.appliances.len());
        for entry in &self.appliances {
            let path = resolve(&entry.path);
            raw.push(load_channel(&path, tz)?.with_channel_id(entry.name.clone()));
            specs.push(ApplianceSpec::appliance(&entry.name, entry.on_threshold, entry.power_factor)?);
            files.push(path);
        }
        let residual = match &self.residual {
            Some(r) => {
                let path = resolve(&r.path);
                let s = load_channel(&path, tz)?.with_channel_id("residual");
                files.push(path);
                Some((s, r.power_factor))
            }
            None => None,
        };

        let grid = self.grid(raw.iter().chain(residual.iter().map(|(s, _)| s)))?;
        let aligned = raw
            .iter()
            .map(|s| resample_align(s, grid))
            .collect::<Result<Vec<_>>>()?;
        let residual = match residual {
            Some((s, pf)) => {
                let s = resample_align(&s, grid)?;
                Some(match (s.reactive(), pf) {
                    (None, Some(pf)) => synthesize_reactive(&s, pf)?,
                    _ => s,
                })
            }
            None => None,
        };

        let irr_path = irradiance
            .map(Path::to_path_buf)
            .or_else(|| self.pv.irradiance.as_deref().map(resolve))
            .ok_or_else(|| Error::invalid("pv.irradiance", "no irradiance file given"))?;
        let irr = load_irradiance(&irr_path)?;
        files.push(irr_path);
        let profile = simulate_profile(&irr, &self.pv.config, grid)?;

        let household = synthesize_household(&aligned, &specs, residual.as_ref(), &profile)?;
        Ok(HouseholdInputs {
            household,
            input_files: files,
        })
    }

    fn grid<'a>(&self, channels: impl Iterator<Item = &'a PowerSeries>) -> Result<Grid> {
        let channels: Vec<&PowerSeries> = channels.collect();
        let period = self.period_s.unwrap_or_else(|| channels[0].period());
        let start = match &self.start {
            Some(s) => parse_timestamp(s, self.source_tz()?).map_err(|r| Error::invalid("start", r))?,
            None => channels.iter().map(|c| c.start_time()).fold(f64::MIN, f64::max),
        };
        let len = match self.length {
            Some(n) => n,
            None => {
                let end = channels.iter().map(|c| c.grid().last_time()).fold(f64::MAX, f64::min);
                if end < start {
                    return Err(Error::GridMismatch("channels do not overlap in time".into()));
                }
                ((end - start) / period + 1e-9).floor() as usize + 1
            }
        };
        Grid::new(start, period, len)
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::io::{write_channel_csv, write_irradiance_csv};
    use crate::pv::IrradianceSeries;

    const MANIFEST: &str = r#"
period_s = 6.0

[[appliance]]
name = "fridge"
path = "fridge.csv"
on_threshold = 50.0
power_factor = 0.85

[[appliance]]
name = "kettle"
path = "kettle.csv"
on_threshold = 1500.0
power_factor = 0.99

[residual]
path = "other.csv"
power_factor = 0.9

[pv]
irradiance = "irr.csv"
p_rated = 300.0

[split]
mode = "leave_one_day_out"
"#;

    fn write_inputs(dir: &Path, ghi: f64) {
        let n = 600;
        let fridge = PowerSeries::new("f", 0.0, 6.0, (0..n).map(|i| if i % 20 < 10 { 90.0 } else { 2.0 }).collect(), None).unwrap();
        // 2 s source, resampled to 6 s
        let kettle = PowerSeries::new("k", 0.0, 2.0, (0..3 * n).map(|i| if i % 300 < 30 { 2000.0 } else { 0.0 }).collect(), None).unwrap();
        let other = PowerSeries::new("o", 0.0, 6.0, vec![40.0; n], None).unwrap();
        write_channel_csv(&fridge, dir.join("fridge.csv")).unwrap();
        write_channel_csv(&kettle, dir.join("kettle.csv")).unwrap();
        write_channel_csv(&other, dir.join("other.csv")).unwrap();
        let irr = IrradianceSeries::new(0.0, 1800.0, vec![ghi; 3], vec![20.0; 3]).unwrap();
        write_irradiance_csv(&irr, dir.join("irr.csv")).unwrap();
    }

    #[test]
    fn parses_and_builds() {
        let dir = tempfile::tempdir().unwrap();
        write_inputs(dir.path(), 600.0);
        let m = Manifest::from_toml(MANIFEST).unwrap();
        assert_eq!(m.split, SplitMode::LeaveOneDayOut);
        assert_eq!(m.pv.config.p_rated, 300.0);
        assert_eq!(m.pv.config.t_noct, 45.0);
        let built = m.build(dir.path(), None).unwrap();
        let h = &built.household;
        assert_eq!(h.len(), 600);
        assert_eq!(h.grid().period, 6.0);
        assert_eq!(h.appliance_names(), vec!["fridge", "kettle"]);
        assert_eq!(built.input_files.len(), 4);
        assert!(crate::types::validate_household(h).is_empty());
    }

    #[test]
    fn zero_irradiance_leaves_aggregate_untouched() {
        let dir = tempfile::tempdir().unwrap();
        write_inputs(dir.path(), 0.0);
        let h = Manifest::from_toml(MANIFEST).unwrap().build(dir.path(), None).unwrap().household;
        for t in 0..h.len() {
            let pre: f64 = h.appliances.iter().map(|a| a.series.active()[t]).sum::<f64>() + 40.0;
            assert_eq!(h.aggregate.active()[t], pre);
        }
    }

    #[test]
    fn missing_channel_names_path() {
        let dir = tempfile::tempdir().unwrap();
        write_inputs(dir.path(), 0.0);
        std::fs::remove_file(dir.path().join("kettle.csv")).unwrap();
        let err = Manifest::from_toml(MANIFEST).unwrap().build(dir.path(), None).unwrap_err();
        assert!(err.to_string().contains("kettle.csv"), "{err}");
    }

    #[test]
    fn toml_round_trip() {
        let m = Manifest::from_toml(MANIFEST).unwrap();
        assert_eq!(Manifest::from_toml(&m.to_toml()).unwrap(), m);
    }

    #[test]
    fn unknown_keys_are_rejected_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.toml");
        let text = format!("{MANIFEST}\n[windows]\nlenght = 3\n");
        std::fs::write(&p, &text).unwrap();
        let expected = text.lines().position(|l| l.starts_with("lenght")).unwrap() + 1;
        match Manifest::load(&p).unwrap_err() {
            Error::Parse { line, ref reason, .. } => assert_eq!(line, expected, "{reason}"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
