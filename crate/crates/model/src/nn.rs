//! Differentiable building blocks on top of `candle_core` tensors.
//!
//! Sequence tensors are channels-last: `[batch, time, channels]`.

use candle_core::{DType, Tensor, Var};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::Result;
use crate::kernels;
use crate::params::{Init, ParamStore};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Train/eval switch plus the RNG that draws dropout masks.
pub struct Ctx {
    pub train: bool,
    pub rng: StdRng,
}

impl Ctx {
    pub fn eval() -> Self {
        Ctx {
            train: false,
            rng: StdRng::seed_from_u64(0),
        }
    }

    pub fn train(seed: u64) -> Self {
        Ctx {
            train: true,
            rng: StdRng::seed_from_u64(seed),
        }
    }
}

/// Inverted dropout; identity outside training or at `p == 0`.
pub fn dropout(x: &Tensor, p: f64, ctx: &mut Ctx) -> Result<Tensor> {
    if !ctx.train || p <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..x.elem_count())
        .map(|_| if ctx.rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok(x.mul(&mask)?)
}

/// Logistic function via `tanh`, which stays finite for any input.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(0.5, 0.0)?.tanh()?.affine(0.5, 0.5)?)
}

/// Normalises over the last axis.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    kernels::layer_norm(x, gamma, beta, LAYER_NORM_EPS)
}

/// Softmax over the last axis, fused forward and backward.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    kernels::softmax_last(x)
}

/// Applies `f` to `x` viewed as a matrix over its last axis.
fn on_rows(x: &Tensor, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let last = *dims.last().unwrap_or(&1);
    let rows = x.elem_count() / last.max(1);
    let y = f(&x.contiguous()?.reshape((rows, last))?)?;
    let mut out_dims = dims;
    *out_dims.last_mut().expect("rank >= 1") = y.dim(1)?;
    Ok(y.reshape(out_dims)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Var,
    pub b: Option<Var>,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut StdRng) -> Result<Self> {
        Self::with_init(ps, name, fan_in, fan_out, Init::FanIn(fan_in), rng)
    }

    pub fn with_init(
        ps: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut StdRng,
    ) -> Result<Self> {
        let w = ps.add(format!("{name}.w"), &[fan_in, fan_out], init, rng)?;
        let b = ps.add(format!("{name}.b"), &[fan_out], Init::Zeros, rng)?;
        Ok(Linear { w, b: Some(b) })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match &self.b {
            Some(b) => on_rows(x, |m| kernels::affine(m, self.w.as_tensor(), b.as_tensor())),
            None => on_rows(x, |m| Ok(m.matmul(self.w.as_tensor())?)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, rng: &mut StdRng) -> Result<Self> {
        Ok(LayerNorm {
            gamma: ps.add(format!("{name}.gamma"), &[dim], Init::Ones, rng)?,
            beta: ps.add(format!("{name}.beta"), &[dim], Init::Zeros, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, &self.gamma, &self.beta)
    }
}

/// 1-D convolution over the time axis of a `[B, T, C_in]` tensor, lowered
/// to one matrix product over `kernel` shifted copies of the input.
#[derive(Debug, Clone)]
pub struct Conv1d {
    /// `[kernel * C_in, C_out]`, row `j * C_in + c` is tap `j` of channel `c`.
    pub w: Var,
    pub b: Var,
    pub kernel: usize,
    pub padding: usize,
}

impl Conv1d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        padding: usize,
        rng: &mut StdRng,
    ) -> Result<Self> {
        let fan_in = c_in * kernel;
        // Non-zero biases: a flat input makes every channel proportional to
        // its level, which a following per-step layer norm would erase.
        Ok(Conv1d {
            w: ps.add(format!("{name}.w"), &[fan_in, c_out], Init::FanIn(fan_in), rng)?,
            b: ps.add(format!("{name}.b"), &[c_out], Init::FanIn(fan_in), rng)?,
            kernel,
            padding,
        })
    }

    pub fn out_len(&self, t: usize) -> usize {
        (t + 2 * self.padding + 1).saturating_sub(self.kernel)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let t = x.dim(1)?;
        let t_out = self.out_len(t);
        if t_out == 0 {
            return Err(crate::error::shape_err(format!(
                "sequence of {t} steps is shorter than kernel {}",
                self.kernel
            )));
        }
        kernels::conv1d(x, self.w.as_tensor(), self.b.as_tensor(), self.kernel, self.padding)
    }
}

/// Non-overlapping max pooling by `size` over time; a ragged tail is dropped.
pub fn max_pool_time(x: &Tensor, size: usize) -> Result<Tensor> {
    let (b, t, c) = x.dims3()?;
    let keep = t / size * size;
    let x = x.narrow(1, 0, keep)?.contiguous()?.reshape((b, keep / size, size, c))?;
    Ok(x.max(2)?)
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut StdRng) -> Result<Self> {
        Ok(MultiHeadAttention {
            q: Linear::new(ps, &format!("{name}.q"), d, d, rng)?,
            k: Linear::new(ps, &format!("{name}.k"), d, d, rng)?,
            v: Linear::new(ps, &format!("{name}.v"), d, d, rng)?,
            o: Linear::new(ps, &format!("{name}.o"), d, d, rng)?,
            heads,
        })
    }

    /// `query: [B, Tq, D]`, `memory: [B, Tk, D]` → `[B, Tq, D]`.
    pub fn forward(&self, query: &Tensor, memory: &Tensor) -> Result<Tensor> {
        let q = self.q.forward(query)?;
        let k = self.k.forward(memory)?;
        let v = self.v.forward(memory)?;
        self.o.forward(&kernels::attention(&q, &k, &v, self.heads)?)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut StdRng) -> Result<Self> {
        Ok(FeedForward {
            l1: Linear::new(ps, &format!("{name}.l1"), d, hidden, rng)?,
            l2: Linear::new(ps, &format!("{name}.l2"), hidden, d, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor, dropout_p: f64, ctx: &mut Ctx) -> Result<Tensor> {
        let h = dropout(&self.l1.forward(x)?.relu()?, dropout_p, ctx)?;
        self.l2.forward(&h)
    }
}

/// Post-norm transformer encoder layer.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub ff: FeedForward,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub dropout: f64,
}

impl EncoderLayer {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        ff: usize,
        dropout: f64,
        rng: &mut StdRng,
    ) -> Result<Self> {
        Ok(EncoderLayer {
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), d, heads, rng)?,
            ff: FeedForward::new(ps, &format!("{name}.ff"), d, ff, rng)?,
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), d, rng)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d, rng)?,
            dropout,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let a = dropout(&self.attn.forward(x, x)?, self.dropout, ctx)?;
        let x = self.ln1.forward(&(x + a)?)?;
        let f = dropout(&self.ff.forward(&x, self.dropout, ctx)?, self.dropout, ctx)?;
        self.ln2.forward(&(x + f)?)
    }
}

/// Post-norm transformer decoder layer: self-attention over the target,
/// cross-attention to the memory, feed-forward. No causal mask.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub cross_attn: MultiHeadAttention,
    pub ff: FeedForward,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub ln3: LayerNorm,
    pub dropout: f64,
}

impl DecoderLayer {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        ff: usize,
        dropout: f64,
        rng: &mut StdRng,
    ) -> Result<Self> {
        Ok(DecoderLayer {
            self_attn: MultiHeadAttention::new(ps, &format!("{name}.self_attn"), d, heads, rng)?,
            cross_attn: MultiHeadAttention::new(ps, &format!("{name}.cross_attn"), d, heads, rng)?,
            ff: FeedForward::new(ps, &format!("{name}.ff"), d, ff, rng)?,
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), d, rng)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d, rng)?,
            ln3: LayerNorm::new(ps, &format!("{name}.ln3"), d, rng)?,
            dropout,
        })
    }

    pub fn forward(&self, target: &Tensor, memory: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let a = dropout(&self.self_attn.forward(target, target)?, self.dropout, ctx)?;
        let x = self.ln1.forward(&(target + a)?)?;
        let c = dropout(&self.cross_attn.forward(&x, memory)?, self.dropout, ctx)?;
        let x = self.ln2.forward(&(x + c)?)?;
        let f = dropout(&self.ff.forward(&x, self.dropout, ctx)?, self.dropout, ctx)?;
        self.ln3.forward(&(x + f)?)
    }
}

/// Single-layer LSTM (gate order input, forget, cell, output).
#[derive(Debug, Clone)]
pub struct Lstm {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b: Var,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(ps: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut StdRng) -> Result<Self> {
        Ok(Lstm {
            w_ih: ps.add(format!("{name}.w_ih"), &[input, 4 * hidden], Init::FanIn(hidden), rng)?,
            w_hh: ps.add(format!("{name}.w_hh"), &[hidden, 4 * hidden], Init::FanIn(hidden), rng)?,
            b: ps.add(format!("{name}.b"), &[4 * hidden], Init::Zeros, rng)?,
            hidden,
        })
    }

    /// `[B, T, input]` → all hidden states `[B, T, hidden]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, _) = x.dims3()?;
        let hd = self.hidden;
        let xw = on_rows(x, |m| kernels::affine(m, self.w_ih.as_tensor(), self.b.as_tensor()))?;
        let mut h = Tensor::zeros((b, hd), x.dtype(), x.device())?;
        let mut c = h.clone();
        let mut outs = Vec::with_capacity(t);
        for step in 0..t {
            let gates = (xw.narrow(1, step, 1)?.squeeze(1)? + h.matmul(self.w_hh.as_tensor())?)?;
            let i = sigmoid(&gates.narrow(1, 0, hd)?)?;
            let f = sigmoid(&gates.narrow(1, hd, hd)?)?;
            let g = gates.narrow(1, 2 * hd, hd)?.tanh()?;
            let o = sigmoid(&gates.narrow(1, 3 * hd, hd)?)?;
            c = ((f * &c)? + (i * g)?)?;
            h = (o * c.tanh()?)?;
            outs.push(h.clone());
        }
        Ok(Tensor::stack(&outs, 1)?)
    }
}

/// Fixed sinusoidal position table `[T, D]`.
pub fn sinusoidal_encoding(t: usize, d: usize, dtype: DType) -> Result<Tensor> {
    let mut table = vec![0.0f64; t * d];
    for pos in 0..t {
        for i in 0..d {
            let rate = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            table[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Ok(Tensor::from_vec(table, (t, d), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t(values: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_slice(values, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn softmax_matches_definition() {
        let x = t(&[1.0, 2.0, 3.0, -1.0, 0.0, 1000.0], &[2, 3]);
        let y: Vec<Vec<f64>> = softmax_last(&x).unwrap().to_vec2().unwrap();
        let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
        assert!((y[0][0] - 1f64.exp() / z).abs() < 1e-15);
        assert_eq!(y[1][2], 1.0);
        assert!(y.iter().all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn layer_norm_of_constant_is_beta() {
        let x = t(&[3.0; 4], &[1, 4]);
        let g = t(&[2.0; 4], &[4]);
        let b = t(&[0.5, -0.5, 0.0, 1.0], &[4]);
        let y: Vec<Vec<f64>> = layer_norm(&x, &g, &b).unwrap().to_vec2().unwrap();
        assert_eq!(y[0], vec![0.5, -0.5, 0.0, 1.0]);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut ps = ParamStore::new(DType::F64);
        let mut rng = StdRng::seed_from_u64(1);
        let conv = Conv1d::new(&mut ps, "c", 2, 3, 3, 1, &mut rng).unwrap();
        ps.set_values("c.b", &[0.1, 0.2, 0.3]).unwrap();
        let x: Vec<f64> = (0..10).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<Vec<f64>> = conv.forward(&t(&x, &[1, 5, 2])).unwrap().squeeze(0).unwrap().to_vec2().unwrap();
        let w = ps.values("c.w").unwrap();
        let b = ps.values("c.b").unwrap();
        for step in 0..5 {
            for o in 0..3 {
                let mut acc = b[o];
                for j in 0..3 {
                    let src = step as isize + j as isize - 1;
                    if (0..5).contains(&src) {
                        for c in 0..2 {
                            acc += w[(j * 2 + c) * 3 + o] * x[src as usize * 2 + c];
                        }
                    }
                }
                assert!((y[step][o] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sigmoid_is_finite_at_extremes() {
        let y: Vec<f64> = sigmoid(&t(&[-1e4, 0.0, 10.0, 1e4], &[4])).unwrap().to_vec1().unwrap();
        assert_eq!(y[0], 0.0);
        assert_eq!(y[1], 0.5);
        assert!((y[2] - 0.9999546021312976).abs() < 1e-12);
        assert_eq!(y[3], 1.0);
    }

    #[test]
    fn max_pool_halves_time() {
        let x = t(&[1.0, 5.0, 2.0, 3.0, 9.0, 0.0, 7.0], &[1, 7, 1]);
        let y: Vec<f64> = max_pool_time(&x, 2).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(y, vec![5.0, 3.0, 9.0]);
    }

    #[test]
    fn dropout_only_in_training() {
        let x = t(&[1.0; 1000], &[1000]);
        let y: Vec<f64> = dropout(&x, 0.2, &mut Ctx::eval()).unwrap().to_vec1().unwrap();
        assert!(y.iter().all(|&v| v == 1.0));
        let y: Vec<f64> = dropout(&x, 0.2, &mut Ctx::train(3)).unwrap().to_vec1().unwrap();
        let zeros = y.iter().filter(|&&v| v == 0.0).count();
        assert!((150..250).contains(&zeros));
        assert!(y.iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-12));
    }
}
