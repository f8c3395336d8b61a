//! What every trainable model exposes, plus host-side batching.

use candle_core::{DType, Device, Tensor};
use dnilm_core::pipeline::format::WindowSet;
use dnilm_core::pipeline::windows::FEATURES;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::loss::LossConfig;
use crate::nn::Ctx;
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

/// Model outputs for a batch: state probabilities `[B, K]` and/or the
/// normalised injection sequence `[B, T]`.
#[derive(Debug, Clone)]
pub struct Heads {
    pub states: Option<Tensor>,
    pub injection: Option<Tensor>,
}

pub trait Network {
    fn params(&self) -> &ParamStore;
    fn appliances(&self) -> &[String];
    fn window_length(&self) -> usize;
    fn loss_config(&self) -> LossConfig;
    /// `x` is `[B, T, F]` in raw watts/vars.
    fn forward_t(&self, x: &Tensor, ctx: &mut Ctx) -> Result<Heads>;
}

/// Host-side predictions, one row per window.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Predictions {
    pub states: Option<Vec<Vec<f64>>>,
    pub injection: Option<Vec<Vec<f64>>>,
}

/// Builds a `[B, T, F]` tensor after checking every value is finite.
pub fn input_tensor(windows: &[f64], t: usize, dtype: DType) -> Result<Tensor> {
    let row = t * FEATURES;
    if row == 0 || windows.len() % row != 0 {
        return Err(shape_err(format!(
            "{} input values do not form windows of {t} steps x {FEATURES} features",
            windows.len()
        )));
    }
    if let Some(i) = windows.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            window: i / row,
            step: (i % row) / FEATURES,
            feature: i % FEATURES,
        });
    }
    let b = windows.len() / row;
    Ok(Tensor::from_slice(windows, (b, t, FEATURES), &Device::Cpu)?.to_dtype(dtype)?)
}

fn rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2()?)
}

/// Eval-mode forward over flattened windows (`B * T * F` values), in
/// chunks of `chunk` windows.
pub fn predict(net: &dyn Network, windows: &[f64], chunk: usize) -> Result<Predictions> {
    let t = net.window_length();
    let x = input_tensor(windows, t, net.params().dtype())?;
    let b = x.dim(0)?;
    let mut out = Predictions::default();
    if b == 0 {
        let probe = net.forward_t(&Tensor::zeros((1, t, FEATURES), net.params().dtype(), &Device::Cpu)?, &mut Ctx::eval())?;
        out.states = probe.states.map(|_| Vec::new());
        out.injection = probe.injection.map(|_| Vec::new());
        return Ok(out);
    }
    let chunk = chunk.max(1);
    let mut start = 0;
    while start < b {
        let n = chunk.min(b - start);
        let heads = net.forward_t(&x.narrow(0, start, n)?, &mut Ctx::eval())?;
        if let Some(s) = heads.states {
            out.states.get_or_insert_with(Vec::new).extend(rows(&s)?);
        }
        if let Some(i) = heads.injection {
            out.injection.get_or_insert_with(Vec::new).extend(rows(&i)?);
        }
        start += n;
    }
    Ok(out)
}

/// Windows flattened for training: inputs `N * T * F`, labels `N * K`,
/// normalised injection targets `N * T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub inputs: Vec<f64>,
    pub labels: Vec<f64>,
    pub targets: Vec<f64>,
    pub len: usize,
    pub window_length: usize,
    pub appliances: Vec<String>,
}

impl TrainingData {
    pub fn from_window_set(set: &WindowSet) -> Self {
        let mut inputs = Vec::with_capacity(set.len() * set.window_length * FEATURES);
        let mut labels = Vec::with_capacity(set.len() * set.appliances.len());
        let mut targets = Vec::with_capacity(set.len() * set.window_length);
        for s in &set.samples {
            inputs.extend_from_slice(&s.inputs);
            labels.extend(s.state_labels.iter().map(|&v| f64::from(v)));
            targets.extend_from_slice(&s.injection_target);
        }
        TrainingData {
            inputs,
            labels,
            targets,
            len: set.len(),
            window_length: set.window_length,
            appliances: set.appliances.clone(),
        }
    }

    pub fn k(&self) -> usize {
        self.appliances.len()
    }

    /// Tensors for the windows at `idx`: inputs `[B, T, F]`, labels
    /// `[B, K]`, targets `[B, T]`.
    pub fn batch(&self, idx: &[usize], dtype: DType) -> Result<(Tensor, Tensor, Tensor)> {
        let t = self.window_length;
        let k = self.k();
        let row = t * FEATURES;
        let mut x = Vec::with_capacity(idx.len() * row);
        let mut y = Vec::with_capacity(idx.len() * k);
        let mut z = Vec::with_capacity(idx.len() * t);
        for &i in idx {
            x.extend_from_slice(&self.inputs[i * row..(i + 1) * row]);
            y.extend_from_slice(&self.labels[i * k..(i + 1) * k]);
            z.extend_from_slice(&self.targets[i * t..(i + 1) * t]);
        }
        let b = idx.len();
        Ok((
            input_tensor(&x, t, dtype)?,
            Tensor::from_vec(y, (b, k), &Device::Cpu)?.to_dtype(dtype)?,
            Tensor::from_vec(z, (b, t), &Device::Cpu)?.to_dtype(dtype)?,
        ))
    }
}
