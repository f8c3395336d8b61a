//! Neural competitors, all behind the same [`Network`] contract as DualNILM.

use candle_core::{Tensor, D};
use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::loss::LossConfig;
use crate::network::{Heads, Network, Precision};
use crate::nn::{
    dropout, max_pool_time, sigmoid, sinusoidal_encoding, Conv1d, Ctx, EncoderLayer, Linear, Lstm,
};
use crate::params::{Init, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Seq2point,
    CnnLstm,
    Transformer,
    Seq2seq,
    Dae,
    Unet,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 6] = [
        BaselineKind::Seq2point,
        BaselineKind::CnnLstm,
        BaselineKind::Transformer,
        BaselineKind::Seq2seq,
        BaselineKind::Dae,
        BaselineKind::Unet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Seq2point => "seq2point",
            BaselineKind::CnnLstm => "cnn_lstm",
            BaselineKind::Transformer => "transformer",
            BaselineKind::Seq2seq => "seq2seq",
            BaselineKind::Dae => "dae",
            BaselineKind::Unet => "unet",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::UnknownPreset(name.into()))
    }

    pub fn predicts_states(self) -> bool {
        !matches!(self, BaselineKind::Seq2seq | BaselineKind::Dae)
    }

    pub fn predicts_injection(self) -> bool {
        matches!(self, BaselineKind::Seq2seq | BaselineKind::Dae | BaselineKind::Unet)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// Valid convolutions, then a dense layer over the flattened features.
    Seq2point {
        filters: Vec<usize>,
        kernels: Vec<usize>,
        dense: usize,
        dropout: f64,
    },
    /// `convs` x (conv + ReLU + max-pool), then an LSTM; last hidden state.
    CnnLstm {
        convs: usize,
        filters: usize,
        kernel: usize,
        pool: usize,
        hidden: usize,
    },
    /// Linear embedding + sinusoidal positions + encoder stack; last step.
    Transformer {
        d_model: usize,
        layers: usize,
        heads: usize,
        ff_dim: usize,
        dropout: f64,
    },
    /// Stacked LSTM encoder and decoder, linear read-out per step.
    Seq2seq { hidden: usize, layers: usize },
    /// Dense autoencoder over the active-power channel.
    Dae { layers: Vec<usize> },
    /// Encoder filters per level; one pooling fewer than levels.
    Unet { filters: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub architecture: Architecture,
    pub window_length: usize,
    pub input_scale: f64,
    pub precision: Precision,
    pub loss: LossConfig,
}

impl BaselineConfig {
    pub fn kind(&self) -> BaselineKind {
        match self.architecture {
            Architecture::Seq2point { .. } => BaselineKind::Seq2point,
            Architecture::CnnLstm { .. } => BaselineKind::CnnLstm,
            Architecture::Transformer { .. } => BaselineKind::Transformer,
            Architecture::Seq2seq { .. } => BaselineKind::Seq2seq,
            Architecture::Dae { .. } => BaselineKind::Dae,
            Architecture::Unet { .. } => BaselineKind::Unet,
        }
    }

    /// The published configuration for `name`, on 300-step windows.
    pub fn preset(name: &str) -> Result<Self> {
        let architecture = match BaselineKind::from_name(name)? {
            BaselineKind::Seq2point => Architecture::Seq2point {
                filters: vec![30, 30, 40, 50, 50],
                kernels: vec![10, 8, 6, 5, 5],
                dense: 1024,
                dropout: 0.2,
            },
            BaselineKind::CnnLstm => Architecture::CnnLstm {
                convs: 2,
                filters: 64,
                kernel: 3,
                pool: 2,
                hidden: 128,
            },
            BaselineKind::Transformer => Architecture::Transformer {
                d_model: 128,
                layers: 2,
                heads: 4,
                ff_dim: 256,
                dropout: 0.1,
            },
            BaselineKind::Seq2seq => Architecture::Seq2seq { hidden: 64, layers: 2 },
            BaselineKind::Dae => Architecture::Dae {
                layers: vec![128, 64, 128],
            },
            BaselineKind::Unet => Architecture::Unet {
                filters: vec![16, 32, 64, 128],
            },
        };
        Ok(BaselineConfig {
            architecture,
            window_length: 300,
            input_scale: 1000.0,
            precision: Precision::F32,
            loss: LossConfig::default(),
        })
    }

    /// Same topology at toy width on 16-step windows, in double precision.
    pub fn tiny(name: &str) -> Result<Self> {
        let architecture = match BaselineKind::from_name(name)? {
            BaselineKind::Seq2point => Architecture::Seq2point {
                filters: vec![3, 3, 2, 2, 2],
                kernels: vec![3, 3, 2, 2, 2],
                dense: 4,
                dropout: 0.2,
            },
            BaselineKind::CnnLstm => Architecture::CnnLstm {
                convs: 2,
                filters: 3,
                kernel: 3,
                pool: 2,
                hidden: 3,
            },
            BaselineKind::Transformer => Architecture::Transformer {
                d_model: 4,
                layers: 2,
                heads: 2,
                ff_dim: 6,
                dropout: 0.1,
            },
            BaselineKind::Seq2seq => Architecture::Seq2seq { hidden: 3, layers: 2 },
            BaselineKind::Dae => Architecture::Dae { layers: vec![6, 4, 6] },
            BaselineKind::Unet => Architecture::Unet {
                filters: vec![2, 3, 3, 4],
            },
        };
        Ok(BaselineConfig {
            architecture,
            window_length: 16,
            input_scale: 1000.0,
            precision: Precision::F64,
            loss: LossConfig::default(),
        })
    }
}

#[derive(Debug, Clone)]
enum Body {
    Seq2point {
        convs: Vec<Conv1d>,
        dense: Linear,
        out: Linear,
        dropout: f64,
    },
    CnnLstm {
        convs: Vec<Conv1d>,
        pool: usize,
        lstm: Lstm,
        out: Linear,
    },
    Transformer {
        embed: Linear,
        positions: Tensor,
        layers: Vec<EncoderLayer>,
        out: Linear,
    },
    Seq2seq {
        encoder: Vec<Lstm>,
        decoder: Vec<Lstm>,
        out: Linear,
    },
    Dae {
        layers: Vec<Linear>,
    },
    Unet {
        down: Vec<Conv1d>,
        up: Vec<UpConv>,
        dec: Vec<Conv1d>,
        states: Linear,
        regression: Linear,
        padded: usize,
    },
}

/// Transposed convolution with kernel 2 and stride 2: each step becomes two.
#[derive(Debug, Clone)]
struct UpConv {
    lin: Linear,
    c_out: usize,
}

impl UpConv {
    fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut StdRng) -> Result<Self> {
        let lin = Linear::with_init(ps, name, c_in, 2 * c_out, Init::FanIn(c_in), rng)?;
        Ok(UpConv { lin, c_out })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, _) = x.dims3()?;
        Ok(self.lin.forward(x)?.reshape((b, 2 * t, self.c_out))?)
    }
}

#[derive(Debug, Clone)]
pub struct NeuralBaseline {
    cfg: BaselineConfig,
    appliances: Vec<String>,
    params: ParamStore,
    body: Body,
}

fn check_positive(values: &[usize], what: &str) -> Result<()> {
    if values.is_empty() || values.contains(&0) {
        return Err(Error::Config(format!("{what} must be non-empty and >= 1")));
    }
    Ok(())
}

impl NeuralBaseline {
    pub fn new(cfg: BaselineConfig, appliances: &[String], seed: u64) -> Result<Self> {
        use dnilm_core::pipeline::windows::FEATURES;
        let t = cfg.window_length;
        if t == 0 || !(cfg.input_scale > 0.0) {
            return Err(Error::Config("window_length and input_scale must be > 0".into()));
        }
        for (i, a) in appliances.iter().enumerate() {
            if appliances[..i].contains(a) {
                return Err(Error::DuplicateAppliance(a.clone()));
            }
        }
        let k = appliances.len();
        if cfg.kind().predicts_states() && k == 0 {
            return Err(Error::Config("at least one appliance is required".into()));
        }
        let mut rng = StdRng::seed_from_u64(seed);
        let mut ps = ParamStore::new(cfg.precision.dtype());
        let body = match &cfg.architecture {
            Architecture::Seq2point {
                filters,
                kernels,
                dense,
                dropout,
            } => {
                check_positive(filters, "filters")?;
                if filters.len() != kernels.len() {
                    return Err(Error::Config("filters and kernels differ in length".into()));
                }
                let mut convs = Vec::new();
                let (mut c_in, mut len) = (FEATURES, t);
                for (l, (&f, &kern)) in filters.iter().zip(kernels).enumerate() {
                    let conv = Conv1d::new(&mut ps, &format!("conv{l}"), c_in, f, kern, 0, &mut rng)?;
                    len = conv.out_len(len);
                    if len == 0 {
                        return Err(Error::Config(format!("window of {t} steps too short for the kernels")));
                    }
                    convs.push(conv);
                    c_in = f;
                }
                Body::Seq2point {
                    convs,
                    dense: Linear::new(&mut ps, "dense", len * c_in, *dense, &mut rng)?,
                    out: Linear::new(&mut ps, "out", *dense, k, &mut rng)?,
                    dropout: *dropout,
                }
            }
            Architecture::CnnLstm {
                convs,
                filters,
                kernel,
                pool,
                hidden,
            } => {
                if kernel % 2 == 0 || *pool == 0 || t / pool.pow(*convs as u32) == 0 {
                    return Err(Error::Config("cnn_lstm needs an odd kernel and enough steps to pool".into()));
                }
                let layers = (0..*convs)
                    .map(|l| {
                        let c_in = if l == 0 { FEATURES } else { *filters };
                        Conv1d::new(&mut ps, &format!("conv{l}"), c_in, *filters, *kernel, kernel / 2, &mut rng)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Body::CnnLstm {
                    convs: layers,
                    pool: *pool,
                    lstm: Lstm::new(&mut ps, "lstm", *filters, *hidden, &mut rng)?,
                    out: Linear::new(&mut ps, "out", *hidden, k, &mut rng)?,
                }
            }
            Architecture::Transformer {
                d_model,
                layers,
                heads,
                ff_dim,
                dropout,
            } => {
                if *heads == 0 || d_model % heads != 0 {
                    return Err(Error::Config("heads must divide d_model".into()));
                }
                let embed = Linear::new(&mut ps, "embed", FEATURES, *d_model, &mut rng)?;
                let layers = (0..*layers)
                    .map(|l| {
                        EncoderLayer::new(&mut ps, &format!("encoder.{l}"), *d_model, *heads, *ff_dim, *dropout, &mut rng)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Body::Transformer {
                    embed,
                    positions: sinusoidal_encoding(t, *d_model, cfg.precision.dtype())?,
                    layers,
                    out: Linear::new(&mut ps, "out", *d_model, k, &mut rng)?,
                }
            }
            Architecture::Seq2seq { hidden, layers } => {
                if *layers == 0 || *hidden == 0 {
                    return Err(Error::Config("seq2seq needs >= 1 layer and hidden unit".into()));
                }
                let stack = |ps: &mut ParamStore, rng: &mut StdRng, name: &str, first: usize| {
                    (0..*layers)
                        .map(|l| {
                            let input = if l == 0 { first } else { *hidden };
                            Lstm::new(ps, &format!("{name}.{l}"), input, *hidden, rng)
                        })
                        .collect::<Result<Vec<_>>>()
                };
                let encoder = stack(&mut ps, &mut rng, "encoder", FEATURES)?;
                let decoder = stack(&mut ps, &mut rng, "decoder", *hidden)?;
                Body::Seq2seq {
                    encoder,
                    decoder,
                    out: Linear::new(&mut ps, "out", *hidden, 1, &mut rng)?,
                }
            }
            Architecture::Dae { layers } => {
                check_positive(layers, "layers")?;
                let mut widths = vec![t];
                widths.extend(layers);
                widths.push(t);
                let layers = widths
                    .windows(2)
                    .enumerate()
                    .map(|(l, w)| Linear::new(&mut ps, &format!("dense{l}"), w[0], w[1], &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                Body::Dae { layers }
            }
            Architecture::Unet { filters } => {
                check_positive(filters, "filters")?;
                let levels = filters.len();
                let stride = 1usize << (levels - 1);
                let padded = t.div_ceil(stride) * stride;
                let mut down = Vec::new();
                let mut c_in = FEATURES;
                for (l, &f) in filters.iter().enumerate() {
                    down.push(Conv1d::new(&mut ps, &format!("down{l}"), c_in, f, 3, 1, &mut rng)?);
                    c_in = f;
                }
                let mut up = Vec::new();
                let mut dec = Vec::new();
                for l in (0..levels - 1).rev() {
                    let (hi, lo) = (filters[l + 1], filters[l]);
                    let level = levels - 2 - l;
                    up.push(UpConv::new(&mut ps, &format!("up{level}"), hi, lo, &mut rng)?);
                    dec.push(Conv1d::new(&mut ps, &format!("dec{level}"), 2 * lo, lo, 3, 1, &mut rng)?);
                }
                Body::Unet {
                    down,
                    up,
                    dec,
                    states: Linear::new(&mut ps, "states", filters[0], k, &mut rng)?,
                    regression: Linear::new(&mut ps, "regression", filters[0], 1, &mut rng)?,
                    padded,
                }
            }
        };
        Ok(NeuralBaseline {
            cfg,
            appliances: appliances.to_vec(),
            params: ps,
            body,
        })
    }

    pub fn config(&self) -> &BaselineConfig {
        &self.cfg
    }

    fn forward_inner(&self, x: &Tensor, ctx: &mut Ctx) -> Result<Heads> {
        let x = x.affine(1.0 / self.cfg.input_scale, 0.0)?;
        let (b, t, _) = x.dims3()?;
        let last = |h: &Tensor| -> Result<Tensor> {
            let n = h.dim(1)?;
            Ok(h.narrow(1, n - 1, 1)?.squeeze(1)?)
        };
        let (states, injection) = match &self.body {
            Body::Seq2point {
                convs,
                dense,
                out,
                dropout: p,
            } => {
                let mut h = x;
                for c in convs {
                    h = c.forward(&h)?.relu()?;
                }
                let flat = h.flatten_from(1)?;
                let h = dropout(&dense.forward(&flat)?.relu()?, *p, ctx)?;
                (Some(sigmoid(&out.forward(&h)?)?), None)
            }
            Body::CnnLstm { convs, pool, lstm, out } => {
                let mut h = x;
                for c in convs {
                    h = max_pool_time(&c.forward(&h)?.relu()?, *pool)?;
                }
                let h = lstm.forward(&h)?;
                (Some(sigmoid(&out.forward(&last(&h)?)?)?), None)
            }
            Body::Transformer {
                embed,
                positions,
                layers,
                out,
            } => {
                let mut h = embed.forward(&x)?.broadcast_add(positions)?;
                for l in layers {
                    h = l.forward(&h, ctx)?;
                }
                (Some(sigmoid(&out.forward(&last(&h)?)?)?), None)
            }
            Body::Seq2seq { encoder, decoder, out } => {
                let mut h = x;
                for l in encoder.iter().chain(decoder) {
                    h = l.forward(&h)?;
                }
                (None, Some(out.forward(&h)?.squeeze(D::Minus1)?))
            }
            Body::Dae { layers } => {
                let mut h = x.narrow(2, 0, 1)?.squeeze(2)?;
                let n = layers.len();
                for (i, l) in layers.iter().enumerate() {
                    h = l.forward(&h)?;
                    if i + 1 < n {
                        h = h.relu()?;
                    }
                }
                (None, Some(h))
            }
            Body::Unet {
                down,
                up,
                dec,
                states,
                regression,
                padded,
            } => {
                let mut h = x.pad_with_zeros(1, 0, padded - t)?;
                let mut skips = Vec::with_capacity(down.len());
                for (l, c) in down.iter().enumerate() {
                    if l > 0 {
                        h = max_pool_time(&h, 2)?;
                    }
                    h = c.forward(&h)?.relu()?;
                    skips.push(h.clone());
                }
                skips.pop();
                for (u, d) in up.iter().zip(dec) {
                    let skip = skips.pop().ok_or_else(|| shape_err("unet skip stack exhausted"))?;
                    let merged = Tensor::cat(&[&u.forward(&h)?, &skip], 2)?;
                    h = d.forward(&merged)?.relu()?;
                }
                let h = h.narrow(1, 0, t)?;
                let s = sigmoid(&states.forward(&last(&h)?)?)?;
                let r = regression.forward(&h)?.squeeze(D::Minus1)?;
                (Some(s), Some(r))
            }
        };
        debug_assert!(states.as_ref().map_or(true, |s| s.dims() == [b, self.appliances.len()]));
        Ok(Heads { states, injection })
    }
}

impl Network for NeuralBaseline {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn appliances(&self) -> &[String] {
        &self.appliances
    }

    fn window_length(&self) -> usize {
        self.cfg.window_length
    }

    fn loss_config(&self) -> LossConfig {
        self.cfg.loss
    }

    fn forward_t(&self, x: &Tensor, ctx: &mut Ctx) -> Result<Heads> {
        use dnilm_core::pipeline::windows::FEATURES;
        let dims = x.dims();
        if dims.len() != 3 || dims[1] != self.cfg.window_length || dims[2] != FEATURES {
            return Err(shape_err(format!(
                "expected [B, {}, {FEATURES}], got {dims:?}",
                self.cfg.window_length
            )));
        }
        if dims[0] == 0 {
            let kind = self.cfg.kind();
            let (dtype, dev) = (self.params.dtype(), x.device());
            return Ok(Heads {
                states: if kind.predicts_states() {
                    Some(Tensor::zeros((0, self.appliances.len()), dtype, dev)?)
                } else {
                    None
                },
                injection: if kind.predicts_injection() {
                    Some(Tensor::zeros((0, self.cfg.window_length), dtype, dev)?)
                } else {
                    None
                },
            });
        }
        self.forward_inner(x, ctx)
    }
}
