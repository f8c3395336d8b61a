//! Reference competitors: a factorial HMM and six neural presets.

pub mod fhmm;
pub mod neural;

use dnilm_core::pipeline::windows::FEATURES;
use dnilm_core::AugmentedHousehold;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::network::Predictions;
pub use fhmm::{fhmm_decode, fhmm_fit, fit_chain, Decoded, EmInit, EmOptions, EmReport, HmmChain};
pub use neural::{Architecture, BaselineConfig, BaselineKind, NeuralBaseline};

pub const RESIDUAL_CHAIN: &str = "residual";

/// A fitted FHMM evaluated the same way as the neural models: one decode per
/// window, state read at the final step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FhmmModel {
    pub appliances: Vec<String>,
    pub chains: Vec<HmmChain>,
    pub window_length: usize,
    pub rated_capacity: f64,
}

impl FhmmModel {
    /// One chain per appliance, one for the unmetered residual (when it is
    /// not constant) and one for the injection, each fitted on the
    /// concatenated training segments of its own channel.
    pub fn fit(segments: &[AugmentedHousehold], window_length: usize, opts: &EmOptions) -> Result<Self> {
        let first = segments.first().ok_or(Error::EmptyTrainingSet)?;
        let appliances = first.appliance_names();
        if segments.iter().any(|s| s.appliance_names() != appliances) {
            return Err(Error::Config("segments disagree on the appliance registry".into()));
        }
        let mut channels: Vec<Vec<f64>> = vec![Vec::new(); appliances.len()];
        let mut residual = Vec::new();
        let mut injection = Vec::new();
        for s in segments {
            let inj = s.injection.series().active();
            for (i, p) in s.aggregate.active().iter().enumerate() {
                let loads: f64 = s.appliances.iter().map(|a| a.series.active()[i]).sum();
                residual.push(p + inj[i] - loads);
            }
            for (c, a) in channels.iter_mut().zip(&s.appliances) {
                c.extend_from_slice(a.series.active());
            }
            injection.extend_from_slice(inj);
        }
        let mut named: Vec<(&str, &[f64])> = appliances.iter().map(|a| a.as_str()).zip(channels.iter().map(|c| c.as_slice())).collect();
        let residual_varies = residual.iter().any(|&r| r != residual[0]);
        if residual_varies {
            named.push((RESIDUAL_CHAIN, &residual));
        }
        let mut chains = fhmm_fit(&named, Some(("injection", &injection)), opts)?;
        if !residual_varies {
            let r = residual[0];
            chains.push(HmmChain {
                name: RESIDUAL_CHAIN.into(),
                initial: [0.0, 1.0],
                transition: [[0.0, 1.0], [0.0, 1.0]],
                means: [r, r],
                variances: [fhmm::VARIANCE_FLOOR; 2],
                is_injection: false,
            });
        }
        Ok(FhmmModel {
            appliances,
            chains,
            window_length,
            rated_capacity: first.injection.rated_capacity(),
        })
    }

    /// Decodes each window's active power; states are 0/1 at the last step
    /// and the injection estimate is normalised by the rated capacity.
    pub fn predict(&self, windows: &[f64]) -> Result<Predictions> {
        let row = self.window_length * FEATURES;
        if row == 0 || windows.len() % row != 0 {
            return Err(shape_err(format!("{} values do not form {}-step windows", windows.len(), self.window_length)));
        }
        if let Some(i) = windows.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                window: i / row,
                step: (i % row) / FEATURES,
                feature: i % FEATURES,
            });
        }
        let k = self.appliances.len();
        let mut states = Vec::with_capacity(windows.len() / row);
        let mut injection = Vec::with_capacity(windows.len() / row);
        for w in windows.chunks(row) {
            let active: Vec<f64> = w.iter().step_by(FEATURES).copied().collect();
            let d = fhmm_decode(&active, &self.chains)?;
            states.push(d.states[..k].iter().map(|s| f64::from(s[s.len() - 1])).collect());
            let inj = d.injection.unwrap_or_else(|| vec![0.0; active.len()]);
            injection.push(inj.iter().map(|v| v / self.rated_capacity).collect());
        }
        Ok(Predictions {
            states: Some(states),
            injection: Some(injection),
        })
    }
}
