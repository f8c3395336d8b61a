use dnilm_core::metrics::{
    binarize, classification_metrics, confusion, macro_average, regression_metrics, ClassificationMetrics, MetricRow,
    RegressionMetrics,
};
use dnilm_core::pipeline::format::WindowSet;
use dnilm_model::{AnyModel, Predictions};

use crate::error::{CliError, Result};

const CHUNK: usize = 64;

/// Anything that maps test windows to state probabilities and normalized
/// injection.
pub trait Predictor {
    fn appliances(&self) -> &[String];
    fn window_length(&self) -> usize;
    fn predict(&self, set: &WindowSet) -> Result<Predictions>;
}

fn flat_inputs(set: &WindowSet) -> Vec<f64> {
    set.samples.iter().flat_map(|s| s.inputs.iter().copied()).collect()
}

impl Predictor for AnyModel {
    fn appliances(&self) -> &[String] {
        AnyModel::appliances(self)
    }

    fn window_length(&self) -> usize {
        AnyModel::window_length(self)
    }

    fn predict(&self, set: &WindowSet) -> Result<Predictions> {
        Ok(AnyModel::predict(self, &flat_inputs(set), CHUNK)?)
    }
}

/// Returns the ground truth of whatever it is asked about.
pub struct Oracle {
    pub appliances: Vec<String>,
    pub window_length: usize,
}

impl Predictor for Oracle {
    fn appliances(&self) -> &[String] {
        &self.appliances
    }

    fn window_length(&self) -> usize {
        self.window_length
    }

    fn predict(&self, set: &WindowSet) -> Result<Predictions> {
        Ok(Predictions {
            states: Some(
                set.samples
                    .iter()
                    .map(|s| s.state_labels.iter().map(|&b| f64::from(b)).collect())
                    .collect(),
            ),
            injection: Some(set.samples.iter().map(|s| s.injection_target.clone()).collect()),
        })
    }
}

/// Scores plus the series the plots are drawn from.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub rows: Vec<MetricRow>,
    /// Per window: binarized predictions and labels, one entry per appliance.
    pub predicted_states: Option<Vec<Vec<u8>>>,
    pub true_states: Vec<Vec<u8>>,
    /// Per step across all windows: UTC time and injection in watts.
    pub times: Vec<f64>,
    pub predicted_injection_w: Option<Vec<f64>>,
    pub true_injection_w: Vec<f64>,
}

const NAN_CLS: ClassificationMetrics = ClassificationMetrics {
    accuracy: f64::NAN,
    recall: f64::NAN,
    precision: f64::NAN,
    f1: f64::NAN,
};

/// One row per appliance and a `macro` row. Every row carries the injection
/// error of the whole test set; a missing head leaves its columns NaN.
pub fn evaluate(model: &dyn Predictor, set: &WindowSet, dataset: &str, fold: &str) -> Result<Evaluation> {
    if model.appliances() != set.appliances.as_slice() {
        return Err(CliError::RegistryMismatch {
            checkpoint: model.appliances().to_vec(),
            dataset: set.appliances.clone(),
        });
    }
    if model.window_length() != set.window_length {
        return Err(CliError::Data(format!(
            "model expects {}-step windows, the test set has {}",
            model.window_length(),
            set.window_length
        )));
    }
    let pred = model.predict(set)?;
    let k = set.appliances.len();
    let true_states: Vec<Vec<u8>> = set.samples.iter().map(|s| s.state_labels.clone()).collect();

    let predicted_states = pred.states.as_ref().map(|p| p.iter().map(|r| binarize(r)).collect::<Vec<_>>());
    let per_appliance: Vec<ClassificationMetrics> = match &predicted_states {
        Some(p) => (0..k)
            .map(|j| {
                let pj: Vec<u8> = p.iter().map(|r| r[j]).collect();
                let tj: Vec<u8> = true_states.iter().map(|r| r[j]).collect();
                Ok(classification_metrics(&confusion(&pj, &tj)?))
            })
            .collect::<Result<_>>()?,
        None => vec![NAN_CLS; k],
    };

    let truth: Vec<f64> = set.samples.iter().flat_map(|s| s.injection_target.iter().copied()).collect();
    let flat_pred = pred.injection.as_ref().map(|p| p.concat());
    let reg = match &flat_pred {
        Some(p) => regression_metrics(p, &truth)?,
        None => RegressionMetrics {
            rmse: f64::NAN,
            mae: f64::NAN,
        },
    };

    let rated = set.rated_capacity;
    let mut rows: Vec<MetricRow> = per_appliance
        .iter()
        .zip(&set.appliances)
        .map(|(c, name)| MetricRow::new(dataset, fold, name.as_str(), *c, reg, rated))
        .collect();
    let macro_cls = if predicted_states.is_some() {
        macro_average(&per_appliance)?
    } else {
        NAN_CLS
    };
    rows.push(MetricRow::new(dataset, fold, "macro", macro_cls, reg, rated));

    let period = set.segments.first().map_or(1.0, |g| g.period);
    let times = set
        .samples
        .iter()
        .flat_map(|s| (0..s.window_length()).map(move |i| s.start_time + i as f64 * period))
        .collect();
    Ok(Evaluation {
        rows,
        predicted_states,
        true_states,
        times,
        predicted_injection_w: flat_pred.map(|p| p.iter().map(|v| v * rated).collect()),
        true_injection_w: truth.iter().map(|v| v * rated).collect(),
    })
}
