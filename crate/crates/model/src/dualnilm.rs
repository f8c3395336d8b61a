//! The dual-task network: per-feature convolutional encoders, a transformer
//! encoder, one seq2point state head per appliance and a seq2seq
//! transformer-decoder injection head.

use candle_core::{Tensor, Var, D};
use dnilm_core::ApplianceSpec;
use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::loss::{InjectionLossKind, LossConfig};
use crate::network::{Heads, Network, Precision};
use crate::nn::{
    dropout, sigmoid, sinusoidal_encoding, Conv1d, Ctx, DecoderLayer, EncoderLayer, LayerNorm, Linear,
};
use crate::params::{Init, ParamStore};

/// What the injection decoder uses as its target sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecoderQuery {
    /// The encoder output itself (self-attention over it, then
    /// cross-attention back to it).
    #[default]
    EncoderOutput,
    /// A learned `T x D` query table.
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub window_length: usize,
    pub features: usize,
    pub conv_layers: usize,
    pub conv_filters: usize,
    pub kernel: usize,
    pub padding: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub head_hidden: usize,
    pub dropout: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub injection_loss: InjectionLossKind,
    pub dice_smooth: f64,
    pub positional_encoding: bool,
    pub decoder_query: DecoderQuery,
    /// Raw inputs are divided by this many watts/vars on entry.
    pub input_scale: f64,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            window_length: 300,
            features: 2,
            conv_layers: 3,
            conv_filters: 64,
            kernel: 5,
            padding: 2,
            d_model: 128,
            heads: 8,
            ff_dim: 128,
            encoder_layers: 1,
            decoder_layers: 1,
            head_hidden: 256,
            dropout: 0.2,
            lambda1: 1.0,
            lambda2: 1.0,
            injection_loss: InjectionLossKind::L2,
            dice_smooth: 1.0,
            positional_encoding: false,
            decoder_query: DecoderQuery::EncoderOutput,
            input_scale: 1000.0,
            precision: Precision::F32,
        }
    }
}

impl ModelConfig {
    /// The small double-precision configuration used for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            window_length: 8,
            conv_filters: 4,
            d_model: 8,
            heads: 2,
            ff_dim: 8,
            head_hidden: 8,
            precision: Precision::F64,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.features != dnilm_core::pipeline::windows::FEATURES {
            return bad(format!("features must be {}", dnilm_core::pipeline::windows::FEATURES));
        }
        if self.window_length == 0 || self.conv_layers == 0 || self.conv_filters == 0 || self.kernel == 0 {
            return bad("window_length, conv_layers, conv_filters and kernel must be >= 1".into());
        }
        if self.window_length + 2 * self.padding + 1 != self.window_length + self.kernel {
            return bad(format!(
                "kernel {} with padding {} does not preserve sequence length",
                self.kernel, self.padding
            ));
        }
        if self.d_model != self.features * self.conv_filters {
            return bad(format!(
                "d_model {} must equal features x conv_filters = {}",
                self.d_model,
                self.features * self.conv_filters
            ));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("heads {} must divide d_model {}", self.heads, self.d_model));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("loss weights must be >= 0".into());
        }
        if !(self.dice_smooth >= 0.0) {
            return bad("dice_smooth must be >= 0".into());
        }
        if !(self.input_scale > 0.0 && self.input_scale.is_finite()) {
            return bad("input_scale must be > 0".into());
        }
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            injection: self.injection_loss,
            dice_smooth: self.dice_smooth,
        }
    }
}

#[derive(Debug, Clone)]
struct ConvBlock {
    conv: Conv1d,
    norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct DualNilm {
    cfg: ModelConfig,
    appliances: Vec<String>,
    params: ParamStore,
    cnn: Vec<Vec<ConvBlock>>,
    positions: Option<Tensor>,
    encoder: Vec<EncoderLayer>,
    encoder_norm: LayerNorm,
    query: Option<Var>,
    decoder: Vec<DecoderLayer>,
    decoder_norm: LayerNorm,
    state_heads: Vec<Linear>,
    inj_hidden: Linear,
    inj_out: Linear,
    rng: StdRng,
}

impl DualNilm {
    pub fn new(cfg: ModelConfig, appliances: &[String], seed: u64) -> Result<Self> {
        cfg.validate()?;
        if appliances.is_empty() {
            return Err(Error::Config("at least one appliance is required".into()));
        }
        for (i, a) in appliances.iter().enumerate() {
            if appliances[..i].contains(a) {
                return Err(Error::DuplicateAppliance(a.clone()));
            }
        }
        let mut rng = StdRng::seed_from_u64(seed);
        let mut ps = ParamStore::new(cfg.precision.dtype());
        let (c, d) = (cfg.conv_filters, cfg.d_model);

        let mut cnn = Vec::with_capacity(cfg.features);
        for f in 0..cfg.features {
            let mut blocks = Vec::with_capacity(cfg.conv_layers);
            for l in 0..cfg.conv_layers {
                let c_in = if l == 0 { 1 } else { c };
                let name = format!("cnn{f}.{l}");
                blocks.push(ConvBlock {
                    conv: Conv1d::new(&mut ps, &format!("{name}.conv"), c_in, c, cfg.kernel, cfg.padding, &mut rng)?,
                    norm: LayerNorm::new(&mut ps, &format!("{name}.norm"), c, &mut rng)?,
                });
            }
            cnn.push(blocks);
        }
        let positions = if cfg.positional_encoding {
            Some(sinusoidal_encoding(cfg.window_length, d, cfg.precision.dtype())?)
        } else {
            None
        };
        let encoder = (0..cfg.encoder_layers)
            .map(|l| EncoderLayer::new(&mut ps, &format!("encoder.{l}"), d, cfg.heads, cfg.ff_dim, 0.0, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let encoder_norm = LayerNorm::new(&mut ps, "encoder.norm", d, &mut rng)?;
        let query = match cfg.decoder_query {
            DecoderQuery::Learned => Some(ps.add("decoder.query", &[cfg.window_length, d], Init::Uniform(1.0), &mut rng)?),
            DecoderQuery::EncoderOutput => None,
        };
        let decoder = (0..cfg.decoder_layers)
            .map(|l| DecoderLayer::new(&mut ps, &format!("decoder.{l}"), d, cfg.heads, cfg.ff_dim, 0.0, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let decoder_norm = LayerNorm::new(&mut ps, "decoder.norm", d, &mut rng)?;
        let inj_hidden = Linear::new(&mut ps, "injection.hidden", d, cfg.head_hidden, &mut rng)?;
        let inj_out = Linear::new(&mut ps, "injection.out", cfg.head_hidden, 1, &mut rng)?;

        let mut model = DualNilm {
            cfg,
            appliances: Vec::new(),
            params: ps,
            cnn,
            positions,
            encoder,
            encoder_norm,
            query,
            decoder,
            decoder_norm,
            state_heads: Vec::new(),
            inj_hidden,
            inj_out,
            rng,
        };
        for a in appliances {
            model.push_head(a, Init::FanIn(model.cfg.d_model))?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn push_head(&mut self, name: &str, init: Init) -> Result<()> {
        if self.appliances.iter().any(|a| a == name) {
            return Err(Error::DuplicateAppliance(name.into()));
        }
        let head = Linear::with_init(&mut self.params, &format!("state.{name}"), self.cfg.d_model, 1, init, &mut self.rng)?;
        self.state_heads.push(head);
        self.appliances.push(name.into());
        Ok(())
    }

    /// Appends a state head for a new appliance; nothing else changes.
    pub fn add_appliance_head(&mut self, spec: &ApplianceSpec) -> Result<()> {
        let init = Init::FanIn(self.cfg.d_model);
        self.push_head(spec.name(), init)
    }

    /// As [`add_appliance_head`](Self::add_appliance_head) with an all-zero
    /// head, whose output is 0.5 for every window.
    pub fn add_zero_appliance_head(&mut self, spec: &ApplianceSpec) -> Result<()> {
        self.push_head(spec.name(), Init::Zeros)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let dims = x.dims();
        if dims.len() != 3 || dims[1] != self.cfg.window_length || dims[2] != self.cfg.features {
            return Err(shape_err(format!(
                "expected [B, {}, {}], got {dims:?}",
                self.cfg.window_length, self.cfg.features
            )));
        }
        Ok(())
    }

    /// Feature `f` as `[B, T, 1]` → `[B, T, C]`.
    pub fn cnn_encode(&self, x_f: &Tensor, f: usize) -> Result<Tensor> {
        let dims = x_f.dims();
        if dims.len() != 3 || dims[1] != self.cfg.window_length || dims[2] != 1 {
            return Err(shape_err(format!(
                "feature input must be [B, {}, 1], got {dims:?}",
                self.cfg.window_length
            )));
        }
        let blocks = self
            .cnn
            .get(f)
            .ok_or_else(|| shape_err(format!("feature index {f} out of range")))?;
        let mut h = x_f.clone();
        for b in blocks {
            h = b.norm.forward(&b.conv.forward(&h)?.relu()?)?;
        }
        Ok(h)
    }

    /// `[B, T, F*C]` → `[B, T, D]`.
    pub fn encode(&self, h: &Tensor) -> Result<Tensor> {
        let mut z = match &self.positions {
            Some(pe) => h.broadcast_add(pe)?,
            None => h.clone(),
        };
        let mut ctx = Ctx::eval();
        for layer in &self.encoder {
            z = layer.forward(&z, &mut ctx)?;
        }
        self.encoder_norm.forward(&z)
    }

    /// State probabilities `[B, K]` from the last encoder step.
    pub fn predict_states(&self, z: &Tensor) -> Result<Tensor> {
        let t = z.dim(1)?;
        let last = z.narrow(1, t - 1, 1)?.squeeze(1)?;
        let logits = self
            .state_heads
            .iter()
            .map(|h| h.forward(&last))
            .collect::<Result<Vec<_>>>()?;
        sigmoid(&Tensor::cat(&logits, 1)?)
    }

    /// Normalised injection sequence `[B, T]`.
    pub fn predict_injection(&self, z: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let mut y = match &self.query {
            Some(q) => q.as_tensor().unsqueeze(0)?.broadcast_as(z.shape())?.contiguous()?,
            None => z.clone(),
        };
        for layer in &self.decoder {
            y = layer.forward(&y, z, ctx)?;
        }
        let y = self.decoder_norm.forward(&y)?;
        let h = dropout(&self.inj_hidden.forward(&y)?.relu()?, self.cfg.dropout, ctx)?;
        sigmoid(&self.inj_out.forward(&h)?.squeeze(D::Minus1)?)
    }

    fn forward_inner(&self, x: &Tensor, ctx: &mut Ctx) -> Result<Heads> {
        self.check_input(x)?;
        let x = x.affine(1.0 / self.cfg.input_scale, 0.0)?;
        let per_feature = (0..self.cfg.features)
            .map(|f| self.cnn_encode(&x.narrow(2, f, 1)?, f))
            .collect::<Result<Vec<_>>>()?;
        let z = self.encode(&Tensor::cat(&per_feature, 2)?)?;
        Ok(Heads {
            states: Some(self.predict_states(&z)?),
            injection: Some(self.predict_injection(&z, ctx)?),
        })
    }
}

impl Network for DualNilm {
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
        self.cfg.loss()
    }

    fn forward_t(&self, x: &Tensor, ctx: &mut Ctx) -> Result<Heads> {
        if x.dims().first() == Some(&0) {
            self.check_input(x)?;
            let dtype = self.params.dtype();
            let dev = x.device();
            return Ok(Heads {
                states: Some(Tensor::zeros((0, self.appliances.len()), dtype, dev)?),
                injection: Some(Tensor::zeros((0, self.cfg.window_length), dtype, dev)?),
            });
        }
        self.forward_inner(x, ctx)
    }
}
