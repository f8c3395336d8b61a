//! Named, ordered trainable parameters with seeded initialisation.

use candle_core::{DType, Device, Tensor, Var};
use rand::rngs::StdRng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanIn(usize),
    Uniform(f64),
}

#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    entries: Vec<(String, Var)>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        ParamStore {
            dtype,
            device: Device::Cpu,
            entries: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut StdRng) -> Result<Var> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::Config(format!("parameter '{name}' defined twice")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::FanIn(fan_in) => uniform(1.0 / (fan_in.max(1) as f64).sqrt(), n, rng),
            Init::Uniform(bound) => uniform(bound, n, rng),
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.entries.push((name, var.clone()));
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Values of one parameter, flattened, as f64.
    pub fn values(&self, name: &str) -> Result<Vec<f64>> {
        let v = self
            .get(name)
            .ok_or_else(|| Error::Config(format!("no parameter '{name}'")))?;
        Ok(v.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?)
    }

    /// Overwrites one parameter from flattened f64 values.
    pub fn set_values(&self, name: &str, values: &[f64]) -> Result<()> {
        let v = self
            .get(name)
            .ok_or_else(|| Error::Config(format!("no parameter '{name}'")))?;
        if values.len() != v.elem_count() {
            return Err(Error::Shape(format!(
                "parameter '{name}' has {} elements, got {}",
                v.elem_count(),
                values.len()
            )));
        }
        let t = Tensor::from_slice(values, v.shape(), &self.device)?.to_dtype(self.dtype)?;
        v.set(&t)?;
        Ok(())
    }
}

fn uniform(bound: f64, n: usize, rng: &mut StdRng) -> Vec<f64> {
    if bound == 0.0 {
        return vec![0.0; n];
    }
    let d = Uniform::new_inclusive(-bound, bound);
    (0..n).map(|_| d.sample(rng)).collect()
}
