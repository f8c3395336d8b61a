//! Experiment configuration. One TOML file names the inputs, the model and
//! its settings; relative paths resolve against the file's directory. Every
//! section is merged over the built-in defaults, so the fully resolved
//! values can be echoed into provenance sidecars.

use std::path::{Path, PathBuf};

use dnilm_core::pipeline::manifest::WindowsEntry;
use dnilm_core::pipeline::split::SECONDS_PER_DAY;
use dnilm_core::pipeline::SplitMode;
use dnilm_model::baselines::{BaselineConfig, EmInit, EmOptions};
use dnilm_model::{ModelConfig, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dataset label written into metric tables.
    pub name: String,
    pub manifest: Option<PathBuf>,
    /// Overrides the irradiance file named in the manifest.
    pub irradiance: Option<PathBuf>,
    /// Packed household; defaults to `<out>/household.dnilm`.
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
    /// `dualnilm`, `fhmm` or a baseline preset name.
    pub model: String,
    pub seed: u64,
    /// Override the manifest's split and window settings.
    pub split: Option<SplitMode>,
    pub windows: Option<WindowsEntry>,
    pub train: toml::Table,
    pub dualnilm: toml::Table,
    pub baseline: toml::Table,
    pub fhmm: FhmmSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "household".into(),
            manifest: None,
            irradiance: None,
            dataset: None,
            out: "out".into(),
            model: "dualnilm".into(),
            seed: 0,
            split: None,
            windows: None,
            train: toml::Table::new(),
            dualnilm: toml::Table::new(),
            baseline: toml::Table::new(),
            fhmm: FhmmSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FhmmSection {
    pub max_iter: usize,
    pub tol: f64,
    pub variance_floor: f64,
}

impl Default for FhmmSection {
    fn default() -> Self {
        let d = EmOptions::default();
        FhmmSection {
            max_iter: d.max_iter,
            tol: d.tol,
            variance_floor: d.variance_floor,
        }
    }
}

impl FhmmSection {
    pub fn options(&self) -> EmOptions {
        EmOptions {
            max_iter: self.max_iter,
            tol: self.tol,
            variance_floor: self.variance_floor,
            init: EmInit::Midpoint,
        }
    }
}

/// Which family a model name belongs to.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelChoice {
    DualNilm(ModelConfig),
    Baseline(BaselineConfig),
    Fhmm(EmOptions),
}

impl ModelChoice {
    pub fn echo(&self) -> serde_json::Value {
        match self {
            ModelChoice::DualNilm(c) => serde_json::json!({ "dualnilm": c }),
            ModelChoice::Baseline(c) => serde_json::json!({ "baseline": c }),
            ModelChoice::Fhmm(o) => serde_json::json!({ "fhmm": o }),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub model: Option<String>,
    pub split: Option<SplitMode>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch: Option<usize>,
}

/// Parses `chronological`, `test_initial`, `test_middle` (optionally
/// `:<seconds>` for the test span, default one day) or `leave_one_day_out`.
pub fn parse_split(s: &str) -> Result<SplitMode> {
    let (mode, span) = match s.split_once(':') {
        Some((m, v)) => {
            let span: f64 = v
                .parse()
                .map_err(|_| CliError::Usage(format!("split span '{v}' is not a number")))?;
            (m, Some(span))
        }
        None => (s, None),
    };
    let test_span_s = span.unwrap_or(SECONDS_PER_DAY);
    match mode {
        "chronological" => Ok(SplitMode::Chronological { test_span_s }),
        "test_initial" => Ok(SplitMode::TestInitial { test_span_s }),
        "test_middle" => Ok(SplitMode::TestMiddle { test_span_s }),
        "leave_one_day_out" if span.is_none() => Ok(SplitMode::LeaveOneDayOut),
        _ => Err(CliError::Usage(format!(
            "unknown split '{s}' (chronological, test_initial, test_middle, leave_one_day_out)"
        ))),
    }
}

/// Recursively overlays `over` onto `base`: tables merge, anything else
/// replaces.
fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn merged<T: Serialize + DeserializeOwned>(defaults: &T, over: &toml::Table, section: &str) -> Result<T> {
    let mut table = toml::Table::try_from(defaults).map_err(|e| CliError::Usage(format!("[{section}]: {e}")))?;
    merge(&mut table, over);
    toml::Value::Table(table)
        .try_into()
        .map_err(|e| CliError::Usage(format!("[{section}]: {e}")))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }

    /// Makes every path absolute against `base` and applies `ov`.
    pub fn resolve(mut self, base: &Path, ov: &Overrides) -> Result<Self> {
        let abs = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
        self.manifest = self.manifest.map(abs);
        self.irradiance = self.irradiance.map(abs);
        self.dataset = self.dataset.map(abs);
        self.out = abs(self.out);
        if let Some(out) = &ov.out {
            self.out = out.clone();
        }
        if let Some(seed) = ov.seed {
            self.seed = seed;
        }
        if let Some(m) = &ov.model {
            self.model = m.clone();
        }
        if let Some(s) = ov.split {
            self.split = Some(s);
        }
        let mut put = |key: &str, v: toml::Value| {
            self.train.insert(key.into(), v);
        };
        if let Some(e) = ov.epochs {
            put("epochs", toml::Value::Integer(e as i64));
        }
        if let Some(lr) = ov.lr {
            put("lr", toml::Value::Float(lr));
        }
        if let Some(b) = ov.batch {
            put("batch_size", toml::Value::Integer(b as i64));
        }
        if self.train.contains_key("seed") {
            return Err(CliError::Usage("[train]: set the seed at the top level".into()));
        }
        Ok(self)
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| self.out.join("household.dnilm"))
    }

    /// Output directory for this model's runs.
    pub fn model_dir(&self) -> PathBuf {
        self.out.join(&self.model)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg: TrainConfig = merged(&TrainConfig::default(), &self.train, "train")?;
        cfg.seed = self.seed;
        Ok(cfg)
    }

    /// The model's settings; its window length follows the data's unless
    /// the section sets one.
    pub fn model_choice(&self, window_length: usize) -> Result<ModelChoice> {
        let with_length = |t: &toml::Table| {
            let mut t = t.clone();
            t.entry("window_length")
                .or_insert(toml::Value::Integer(window_length as i64));
            t
        };
        match self.model.as_str() {
            "dualnilm" => Ok(ModelChoice::DualNilm(merged(
                &ModelConfig::default(),
                &with_length(&self.dualnilm),
                "dualnilm",
            )?)),
            "fhmm" => Ok(ModelChoice::Fhmm(self.fhmm.options())),
            name => {
                let preset = BaselineConfig::preset(name).map_err(|_| {
                    CliError::Usage(format!(
                        "unknown model '{name}' (dualnilm, fhmm, seq2point, cnn_lstm, transformer, seq2seq, dae, unet)"
                    ))
                })?;
                let known = toml::Table::try_from(&preset).map_err(|e| CliError::Usage(e.to_string()))?;
                if let Some(k) = self.baseline.keys().find(|k| !known.contains_key(*k)) {
                    return Err(CliError::Usage(format!("[baseline]: unknown field '{k}'")));
                }
                let cfg: BaselineConfig = merged(&preset, &with_length(&self.baseline), "baseline")?;
                if cfg.kind() != preset.kind() {
                    return Err(CliError::Usage("[baseline]: the architecture of a preset cannot change".into()));
                }
                Ok(ModelChoice::Baseline(cfg))
            }
        }
    }

    /// Values echoed into provenance sidecars.
    pub fn echo(&self, window_length: usize) -> Result<serde_json::Value> {
        Ok(serde_json::json!({
            "name": self.name,
            "model": self.model,
            "seed": self.seed,
            "train": self.train_config()?,
            "model_config": self.model_choice(window_length)?.echo(),
        }))
    }
}
