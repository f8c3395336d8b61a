//! Self-describing checkpoints: magic line, little-endian `u64` header
//! length, JSON header, then every parameter as little-endian floats.

use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::baselines::{BaselineConfig, FhmmModel, NeuralBaseline};
use crate::dualnilm::{DualNilm, ModelConfig};
use crate::error::{Error, Result};
use crate::network::{predict, Network, Predictions};

pub const MAGIC: &[u8] = b"DNILM-CKPT-1\n";
pub const FORMAT: &str = "DNILM-CKPT-1";

#[derive(Debug, Clone)]
pub enum AnyModel {
    DualNilm(DualNilm),
    Neural(NeuralBaseline),
    Fhmm(FhmmModel),
}

impl AnyModel {
    pub fn kind_name(&self) -> String {
        match self {
            AnyModel::DualNilm(_) => "dualnilm".into(),
            AnyModel::Neural(n) => n.config().kind().name().into(),
            AnyModel::Fhmm(_) => "fhmm".into(),
        }
    }

    pub fn appliances(&self) -> &[String] {
        match self {
            AnyModel::DualNilm(m) => m.appliances(),
            AnyModel::Neural(m) => m.appliances(),
            AnyModel::Fhmm(m) => &m.appliances,
        }
    }

    pub fn window_length(&self) -> usize {
        match self {
            AnyModel::DualNilm(m) => m.window_length(),
            AnyModel::Neural(m) => m.window_length(),
            AnyModel::Fhmm(m) => m.window_length,
        }
    }

    pub fn network(&self) -> Option<&dyn Network> {
        match self {
            AnyModel::DualNilm(m) => Some(m),
            AnyModel::Neural(m) => Some(m),
            AnyModel::Fhmm(_) => None,
        }
    }

    /// Eval-mode predictions over flattened windows.
    pub fn predict(&self, windows: &[f64], chunk: usize) -> Result<Predictions> {
        match self {
            AnyModel::Fhmm(m) => m.predict(windows),
            other => predict(other.network().expect("neural model"), windows, chunk),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ModelSpec {
    Dualnilm { config: ModelConfig },
    Baseline { config: BaselineConfig },
    Fhmm { model: FhmmModel },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    model: ModelSpec,
    dtype: String,
    appliances: Vec<String>,
    params: Vec<ParamEntry>,
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn dtype_name(d: DType) -> &'static str {
    if d == DType::F64 {
        "f64"
    } else {
        "f32"
    }
}

pub fn save(model: &AnyModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (spec, net) = match model {
        AnyModel::DualNilm(m) => (
            ModelSpec::Dualnilm {
                config: m.config().clone(),
            },
            Some(m as &dyn Network),
        ),
        AnyModel::Neural(m) => (
            ModelSpec::Baseline {
                config: m.config().clone(),
            },
            Some(m as &dyn Network),
        ),
        AnyModel::Fhmm(m) => (ModelSpec::Fhmm { model: m.clone() }, None),
    };
    let mut params = Vec::new();
    let mut blob = Vec::new();
    let dtype = net.map_or(DType::F64, |n| n.params().dtype());
    if let Some(net) = net {
        for (name, var) in net.params().iter() {
            params.push(ParamEntry {
                name: name.to_string(),
                shape: var.dims().to_vec(),
                offset: blob.len(),
            });
            for v in net.params().values(name)? {
                if dtype == DType::F64 {
                    blob.extend_from_slice(&v.to_le_bytes());
                } else {
                    blob.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
    }
    let header = Header {
        format: FORMAT.into(),
        model: spec,
        dtype: dtype_name(dtype).into(),
        appliances: model.appliances().to_vec(),
        params,
    };
    let json = serde_json::to_vec(&header).map_err(|e| ckpt_err(path, e.to_string()))?;
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(MAGIC).map_err(io)?;
    f.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    f.write_all(&json).map_err(io)?;
    f.write_all(&blob).map_err(io)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<AnyModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| ckpt_err(path, "not a DNILM-CKPT-1 file"))?;
    if rest.len() < 8 {
        return Err(ckpt_err(path, "truncated header length"));
    }
    let n = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
    let rest = &rest[8..];
    if rest.len() < n {
        return Err(ckpt_err(path, "truncated header"));
    }
    let header: Header = serde_json::from_slice(&rest[..n]).map_err(|e| ckpt_err(path, format!("bad header: {e}")))?;
    if header.format != FORMAT {
        return Err(ckpt_err(path, format!("unsupported format '{}'", header.format)));
    }
    let blob = &rest[n..];
    let model = match header.model {
        ModelSpec::Fhmm { model } => return Ok(AnyModel::Fhmm(model)),
        ModelSpec::Dualnilm { config } => AnyModel::DualNilm(DualNilm::new(config, &header.appliances, 0)?),
        ModelSpec::Baseline { config } => AnyModel::Neural(NeuralBaseline::new(config, &header.appliances, 0)?),
    };
    let net = model.network().expect("neural model");
    let ps = net.params();
    if dtype_name(ps.dtype()) != header.dtype {
        return Err(ckpt_err(path, format!("dtype {} does not match configuration", header.dtype)));
    }
    if header.params.len() != ps.len() {
        return Err(ckpt_err(
            path,
            format!("{} stored parameters, model has {}", header.params.len(), ps.len()),
        ));
    }
    let width = if ps.dtype() == DType::F64 { 8 } else { 4 };
    for entry in &header.params {
        let var = ps
            .get(&entry.name)
            .ok_or_else(|| ckpt_err(path, format!("unknown parameter '{}'", entry.name)))?;
        if var.dims() != entry.shape.as_slice() {
            return Err(ckpt_err(
                path,
                format!("parameter '{}' has shape {:?}, expected {:?}", entry.name, entry.shape, var.dims()),
            ));
        }
        let count: usize = entry.shape.iter().product();
        let end = entry.offset + count * width;
        let raw = blob
            .get(entry.offset..end)
            .ok_or_else(|| ckpt_err(path, format!("parameter '{}' runs past the end", entry.name)))?;
        let values: Vec<f64> = raw
            .chunks_exact(width)
            .map(|c| {
                if width == 8 {
                    f64::from_le_bytes(c.try_into().expect("8 bytes"))
                } else {
                    f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))
                }
            })
            .collect();
        ps.set_values(&entry.name, &values)?;
    }
    Ok(model)
}
