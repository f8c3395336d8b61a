//! Mini-batch training with Adam.

use candle_core::{DType, Tensor, Var};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::total_loss;
use crate::network::{Network, TrainingData};
use crate::nn::Ctx;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub shuffle: bool,
    /// Training stops with a divergence error once any parameter's
    /// magnitude exceeds this.
    pub max_param_abs: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 64,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            shuffle: true,
            max_param_abs: 1e4,
        }
    }
}

/// Mean losses over one epoch's batches, weighted by batch size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub dice: f64,
    pub injection: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub epochs: Vec<EpochRecord>,
}

pub struct Adam {
    cfg: TrainConfig,
    step: i32,
    moments: Vec<(Var, Tensor, Tensor)>,
}

impl Adam {
    pub fn new(vars: impl IntoIterator<Item = Var>, cfg: &TrainConfig) -> Result<Self> {
        let moments = vars
            .into_iter()
            .map(|v| {
                let z = v.zeros_like()?;
                Ok((v, z.clone(), z))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Adam {
            cfg: cfg.clone(),
            step: 0,
            moments,
        })
    }

    pub fn step(&mut self, grads: &candle_core::backprop::GradStore) -> Result<()> {
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        for (var, m, v) in &mut self.moments {
            let Some(g) = grads.get(var) else { continue };
            *m = (m.affine(b1, 0.0)? + g.affine(1.0 - b1, 0.0)?)?;
            *v = (v.affine(b2, 0.0)? + g.sqr()?.affine(1.0 - b2, 0.0)?)?;
            let denom = v.affine(1.0 / c2, 0.0)?.sqrt()?.affine(1.0, self.cfg.eps)?;
            let update = (m.affine(self.cfg.lr / c1, 0.0)? / denom)?;
            var.set(&(var.as_tensor() - update)?)?;
        }
        Ok(())
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn max_abs(vars: &[Var]) -> Result<f64> {
    let mut m = 0.0f64;
    for v in vars {
        let a = scalar(&v.as_tensor().abs()?.max_all()?)?;
        if a.is_nan() {
            return Ok(f64::NAN);
        }
        m = m.max(a);
    }
    Ok(m)
}

/// Trains `net` in place. Deterministic for a given seed.
pub fn fit(net: &dyn Network, data: &TrainingData, cfg: &TrainConfig) -> Result<Trace> {
    fit_with(net, data, cfg, |_| {})
}

/// [`fit`] with a callback after every epoch.
pub fn fit_with(
    net: &dyn Network,
    data: &TrainingData,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Trace> {
    if data.len == 0 {
        return Err(Error::EmptyTrainingSet);
    }
    if data.window_length != net.window_length() {
        return Err(Error::Shape(format!(
            "windows have {} steps, model expects {}",
            data.window_length,
            net.window_length()
        )));
    }
    if data.appliances != net.appliances() {
        return Err(Error::Config(format!(
            "training appliances {:?} do not match model heads {:?}",
            data.appliances,
            net.appliances()
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let vars: Vec<Var> = net.params().iter().map(|(_, v)| v.clone()).collect();
    let mut opt = Adam::new(vars.iter().cloned(), cfg)?;
    let loss_cfg = net.loss_config();
    let dtype = net.params().dtype();
    let mut order: Vec<usize> = (0..data.len).collect();
    let mut shuffle_rng = StdRng::seed_from_u64(cfg.seed);
    let mut ctx = Ctx::train(cfg.seed.wrapping_add(1));
    let mut trace = Trace::default();

    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut shuffle_rng);
        }
        let (mut total, mut dice, mut inj) = (0.0, 0.0, 0.0);
        for idx in order.chunks(cfg.batch_size) {
            let (x, y, z) = data.batch(idx, dtype)?;
            let heads = net.forward_t(&x, &mut ctx)?;
            let parts = total_loss(heads.states.as_ref(), heads.injection.as_ref(), &y, &z, &loss_cfg)?;
            let loss = scalar(&parts.total)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    reason: format!("non-finite loss {loss}"),
                });
            }
            let w = idx.len() as f64;
            total += w * loss;
            if let Some(d) = &parts.dice {
                dice += w * scalar(d)?;
            }
            if let Some(i) = &parts.injection {
                inj += w * scalar(i)?;
            }
            let grads = parts.total.backward()?;
            opt.step(&grads)?;
        }
        let size = max_abs(&vars)?;
        if !(size <= cfg.max_param_abs) {
            return Err(Error::Divergence {
                epoch,
                reason: format!("parameter magnitude {size} exceeds {}", cfg.max_param_abs),
            });
        }
        let n = data.len as f64;
        let rec = EpochRecord {
            epoch,
            total: total / n,
            dice: dice / n,
            injection: inj / n,
        };
        on_epoch(&rec);
        trace.epochs.push(rec);
    }
    Ok(trace)
}
