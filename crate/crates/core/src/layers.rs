//! Weight layers (quantized conv / linear with an optional rectifier or bias)
//! and the element-wise spiking activation, each with an explicit backward.

use crate::attention::mprf::{fuse_affine, mprf_backward, mprf_forward, ChannelLayout, MprfCache, MprfParams};
use crate::error::{Error, Result};
use crate::neuron::IeLifParams;
use crate::param::{Mode, Param, ParamKind};
use crate::quant::{fake_quantize, init_scale, lsq_grad_scale, quant_backward, quantize, QuantSpec, QuantizedWeight};
use crate::real::Real;
use crate::rng::Rng;
use crate::ste::{inside, ClipRound};
use crate::tensor::{conv2d_batch, conv2d_batch_backward, gemm_nn, gemm_nt, gemm_tn, ConvGeom, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Synapse {
    /// Square kernel `k`, input `[R, C, H, W]`.
    Conv { k: usize, stride: usize, pad: usize },
    /// Input `[M, D_in]`.
    Linear,
}

/// Deployment form of a layer: `y = op(x, weight) + bias`.
#[derive(Clone, Debug)]
pub struct FusedAffine<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct WeightLayer<T = f32> {
    pub name: String,
    pub synapse: Synapse,
    /// Latent full-precision weight, `[C_out, C_in, k, k]` or `[D_out, D_in]`.
    pub weight: Param<T>,
    /// Learned step size, present iff the weight is quantized.
    pub step: Option<Param<T>>,
    pub bits: Option<u8>,
    pub bias: Option<Param<T>>,
    pub norm: Option<MprfParams<T>>,
    pub fused: Option<FusedAffine<T>>,
}

#[derive(Clone, Debug)]
pub struct WeightCache<T> {
    in_shape: Vec<usize>,
    /// Linear: the input; conv: the im2col buffers.
    input: Vec<T>,
    geom: Option<ConvGeom>,
    w_hat: Tensor<T>,
    norm: Option<MprfCache<T>>,
    mode: Mode,
}

impl<T: Real> WeightLayer<T> {
    /// Kaiming-uniform weights; the step size is initialized from them.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        synapse: Synapse,
        c_in: usize,
        c_out: usize,
        bits: Option<u8>,
        with_bias: bool,
        with_norm: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let shape = match synapse {
            Synapse::Conv { k, .. } => {
                if k % 2 == 0 {
                    return Err(Error::config(format!("{name}: kernel size {k} must be odd")));
                }
                vec![c_out, c_in, k, k]
            }
            Synapse::Linear => vec![c_out, c_in],
        };
        let fan_in: usize = shape[1..].iter().product();
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = Tensor::from_fn(&shape, |_| T::c(rng.uniform_range(-bound, bound)));
        let step = match bits {
            Some(b) => {
                QuantSpec::new(b, T::one())?;
                let mut p = Param::new(Tensor::scalar(init_scale(&w, b)), ParamKind::StepSize);
                p.grad_scale = lsq_grad_scale(w.len(), b);
                Some(p)
            }
            None => None,
        };
        Ok(Self {
            name: name.to_string(),
            synapse,
            weight: Param::new(w, ParamKind::Weight),
            step,
            bits,
            bias: with_bias.then(|| Param::new(Tensor::zeros(&[c_out]), ParamKind::Bias)),
            norm: with_norm.then(|| MprfParams::new(c_out)),
            fused: None,
        })
    }

    pub fn c_out(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn spec(&self) -> Option<QuantSpec<T>> {
        match (self.bits, &self.step) {
            (Some(b), Some(s)) => Some(QuantSpec::new(b, s.value.data()[0]).expect("validated at build")),
            _ => None,
        }
    }

    /// Integer-coded weight, if this layer is quantized.
    pub fn quantized(&self) -> Result<Option<QuantizedWeight<T>>> {
        self.spec().map(|s| quantize(&self.weight.value, s)).transpose()
    }

    /// Weights actually used by the forward pass (dequantized if quantized).
    pub fn effective_weight(&self, ctx: &mut ClipRound<T>) -> Tensor<T> {
        match self.spec() {
            Some(s) => fake_quantize(&self.weight.value, s, ctx),
            None => self.weight.value.clone(),
        }
    }

    pub fn is_fused(&self) -> bool {
        self.fused.is_some()
    }

    /// Fold the frozen rectifier (or the plain bias) into the weights.
    pub fn fuse(&mut self) -> Result<()> {
        if self.fused.is_some() {
            return Err(Error::State(format!("{} is already fused", self.name)));
        }
        let w_hat = self.effective_weight(&mut ClipRound::exact());
        let bias = self.bias.as_ref().map(|b| &b.value);
        let (weight, bias) = match &self.norm {
            Some(n) => fuse_affine(&w_hat, bias, n)?,
            None => (
                w_hat,
                bias.cloned().unwrap_or_else(|| Tensor::zeros(&[self.c_out()])),
            ),
        };
        self.fused = Some(FusedAffine { weight, bias });
        Ok(())
    }

    fn geom(&self, in_shape: &[usize]) -> Result<ConvGeom> {
        let Synapse::Conv { stride, pad, .. } = self.synapse else {
            unreachable!("geometry requested for a linear layer")
        };
        if in_shape.len() != 4 || in_shape[1] != self.c_in() {
            return Err(Error::shape(format!(
                "{}: conv input {in_shape:?} does not match {} input channels",
                self.name,
                self.c_in()
            )));
        }
        ConvGeom::new(in_shape[1], in_shape[2], in_shape[3], self.weight.value.shape(), stride, pad)
    }

    /// `op(x, w)` without bias or rectifier. Returns the output and the
    /// saved input (im2col buffers for conv).
    fn synapse_forward(&self, x: &Tensor<T>, w: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>, Option<ConvGeom>)> {
        match self.synapse {
            Synapse::Conv { .. } => {
                let g = self.geom(x.shape())?;
                let (y, cols) = conv2d_batch(x, w, &g);
                Ok((y, cols, Some(g)))
            }
            Synapse::Linear => {
                let (m, d) = x.dims2()?;
                if d != self.c_in() {
                    return Err(Error::shape(format!(
                        "{}: linear input width {d}, expected {}",
                        self.name,
                        self.c_in()
                    )));
                }
                let n = self.c_out();
                let mut y = vec![T::zero(); m * n];
                gemm_nt(m, d, n, x.data(), w.data(), &mut y);
                Ok((Tensor::new(vec![m, n], y)?, x.data().to_vec(), None))
            }
        }
    }

    fn add_channel_bias(y: &mut Tensor<T>, bias: &[T]) {
        let layout = ChannelLayout::of(y.shape(), 1).expect("rank ≥ 2");
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v = *v + bias[(i / layout.inner) % layout.channels];
        }
    }

    /// Training-path forward. On a fused layer this is the deployed affine map.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode, ctx: &mut ClipRound<T>) -> Result<(Tensor<T>, WeightCache<T>)> {
        if let Some(f) = &self.fused {
            let (mut y, _, _) = self.synapse_forward(x, &f.weight)?;
            Self::add_channel_bias(&mut y, f.bias.data());
            let cache = WeightCache {
                in_shape: x.shape().to_vec(),
                input: Vec::new(),
                geom: None,
                w_hat: Tensor::scalar(T::zero()),
                norm: None,
                mode,
            };
            return Ok((y, cache));
        }
        let w_hat = self.effective_weight(ctx);
        let (mut y, input, geom) = self.synapse_forward(x, &w_hat)?;
        if let Some(b) = &self.bias {
            Self::add_channel_bias(&mut y, b.value.data());
        }
        let mut norm_cache = None;
        if let Some(n) = &mut self.norm {
            let layout = ChannelLayout::of(y.shape(), 1)?;
            let (out, c) = mprf_forward(&y, layout, n, mode)?;
            y = out;
            norm_cache = Some(c);
        }
        Ok((
            y,
            WeightCache {
                in_shape: x.shape().to_vec(),
                input,
                geom,
                w_hat,
                norm: norm_cache,
                mode,
            },
        ))
    }

    /// Inference on integer spike counts: `op(n, w_f / b) + b_f`.
    ///
    /// Because `b` is a power of two, `(w/b)·n` rounds exactly like `w·(n/b)`,
    /// so this reproduces [`forward`](Self::forward) on the fused layer bit for bit.
    pub fn forward_counts(&self, counts: &Tensor<T>, levels: u8) -> Result<Tensor<T>> {
        let f = self
            .fused
            .as_ref()
            .ok_or_else(|| Error::State(format!("{}: inference requires a fused layer", self.name)))?;
        let inv = T::one() / T::c(levels as f64);
        let w = f.weight.scale(inv);
        let (mut y, _, _) = self.synapse_forward(counts, &w)?;
        Self::add_channel_bias(&mut y, f.bias.data());
        Ok(y)
    }

    /// Accumulate parameter gradients and return the input gradient.
    pub fn backward(&mut self, cache: &WeightCache<T>, dy: &Tensor<T>, need_dx: bool) -> Result<Option<Tensor<T>>> {
        if self.fused.is_some() {
            return Err(Error::State(format!("{}: cannot backpropagate through a fused layer", self.name)));
        }
        let mut dy = dy.clone();
        if let (Some(n), Some(c)) = (&mut self.norm, &cache.norm) {
            dy = mprf_backward(c, &dy, n, cache.mode);
        }
        if let Some(b) = &mut self.bias {
            let layout = ChannelLayout::of(dy.shape(), 1)?;
            let g = b.grad.data_mut();
            for (i, &v) in dy.data().iter().enumerate() {
                let ch = (i / layout.inner) % layout.channels;
                g[ch] = g[ch] + v;
            }
        }
        let mut dw = vec![T::zero(); self.weight.len()];
        let dx = match self.synapse {
            Synapse::Conv { .. } => {
                let g = cache.geom.as_ref().expect("conv cache carries geometry");
                conv2d_batch_backward(&dy, &cache.w_hat, &cache.input, g, &mut dw, need_dx)
            }
            Synapse::Linear => {
                let (m, n) = dy.dims2()?;
                let d = self.c_in();
                gemm_tn(n, m, d, dy.data(), &cache.input, &mut dw);
                if need_dx {
                    let mut dx = vec![T::zero(); m * d];
                    gemm_nn(m, n, d, dy.data(), cache.w_hat.data(), &mut dx);
                    Some(Tensor::new(cache.in_shape.clone(), dx)?)
                } else {
                    None
                }
            }
        };
        let dw = Tensor::new(self.weight.value.shape().to_vec(), dw)?;
        match self.spec() {
            Some(spec) => {
                let (gw, ga) = quant_backward(&dw, &self.weight.value, spec)?;
                self.weight.grad.add_assign(&gw)?;
                let s = self.step.as_mut().expect("quantized layer has a step");
                s.grad.data_mut()[0] = s.grad.data()[0] + ga;
            }
            None => self.weight.grad.add_assign(&dw)?,
        }
        Ok(dx)
    }

    /// Visit trainable parameters with stable names.
    pub fn visit_params(&mut self, f: &mut dyn FnMut(String, &mut Param<T>)) {
        f(format!("{}.weight", self.name), &mut self.weight);
        if let Some(s) = &mut self.step {
            f(format!("{}.step", self.name), s);
        }
        if let Some(b) = &mut self.bias {
            f(format!("{}.bias", self.name), b);
        }
        if let Some(n) = &mut self.norm {
            f(format!("{}.gamma", self.name), &mut n.gamma);
            f(format!("{}.shift", self.name), &mut n.shift);
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len()
            + self.step.as_ref().map_or(0, |s| s.len())
            + self.bias.as_ref().map_or(0, |b| b.len())
            + self.norm.as_ref().map_or(0, |n| 2 * n.channels())
    }
}

/// Element-wise neuron between weight layers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    /// IE-LIF over `steps` time-major slices; with one step it is the plain
    /// level quantizer, with more it carries `h = τ·v − n` between steps.
    IeLif { p: IeLifParams, tau: f64 },
    Relu,
}

#[derive(Clone, Debug)]
pub struct ActCache<T> {
    v: Vec<T>,
    steps: usize,
}

impl Activation {
    /// `x` is time-major: the first axis holds `steps` equal blocks.
    pub fn forward<T: Real>(&self, x: &Tensor<T>, steps: usize, ctx: &mut ClipRound<T>) -> (Tensor<T>, ActCache<T>) {
        match *self {
            Activation::Relu => {
                let y = x.map(|v| v.max(T::zero()));
                (y, ActCache { v: x.data().to_vec(), steps })
            }
            Activation::IeLif { p, tau } => {
                let chunk = x.len() / steps;
                let b = T::c(p.bits as f64);
                let inv = T::one() / b;
                let tau = T::c(tau);
                let mut v = x.data().to_vec();
                let mut out = vec![T::zero(); x.len()];
                let mut h = vec![T::zero(); chunk];
                for t in 0..steps {
                    let vs = &mut v[t * chunk..(t + 1) * chunk];
                    if t > 0 {
                        for (vi, &hi) in vs.iter_mut().zip(&h) {
                            *vi = *vi + hi;
                        }
                    }
                    let n = &mut out[t * chunk..(t + 1) * chunk];
                    n.copy_from_slice(vs);
                    ctx.apply(n, T::zero(), b);
                    if steps > 1 {
                        for ((hi, &vi), &ni) in h.iter_mut().zip(vs.iter()).zip(n.iter()) {
                            *hi = tau * vi - ni;
                        }
                    }
                    n.iter_mut().for_each(|a| *a = *a * inv);
                }
                (
                    Tensor::new(x.shape().to_vec(), out).expect("same shape"),
                    ActCache { v, steps },
                )
            }
        }
    }

    /// Straight-through backward, including the soft-reset path.
    pub fn backward<T: Real>(&self, cache: &ActCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        match *self {
            Activation::Relu => {
                let data = dy
                    .data()
                    .iter()
                    .zip(&cache.v)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                Tensor::new(dy.shape().to_vec(), data).expect("same shape")
            }
            Activation::IeLif { p, tau } => {
                let steps = cache.steps;
                let chunk = dy.len() / steps;
                let b = T::c(p.bits as f64);
                let inv = T::one() / b;
                let tau = T::c(tau);
                let mut dx = vec![T::zero(); dy.len()];
                let mut dh = vec![T::zero(); chunk];
                for t in (0..steps).rev() {
                    for i in 0..chunk {
                        let j = t * chunk + i;
                        let mask = if inside(cache.v[j], T::zero(), b) { inv } else { T::zero() };
                        // straight-through through the reset as well: ∂n/∂v = b·mask
                        let dv = dy.data()[j] * mask + dh[i] * (tau - mask * b);
                        dx[j] = dv;
                        dh[i] = dv;
                    }
                }
                Tensor::new(dy.shape().to_vec(), dx).expect("same shape")
            }
        }
    }

    /// Spike counts `round(clip(v, 0, b))` for the inference path, with the
    /// same reset carry as [`forward`](Self::forward) when `steps > 1`.
    pub fn fire_counts<T: Real>(&self, v: &Tensor<T>, steps: usize) -> Result<Tensor<T>> {
        match *self {
            Activation::IeLif { p, tau } => {
                let b = T::c(p.bits as f64);
                let tau = T::c(tau);
                let chunk = v.len() / steps;
                let mut out = v.data().to_vec();
                let mut h = vec![T::zero(); chunk];
                for t in 0..steps {
                    let vs = &mut out[t * chunk..(t + 1) * chunk];
                    for (i, x) in vs.iter_mut().enumerate() {
                        let vi = if t > 0 { *x + h[i] } else { *x };
                        let n = vi.max(T::zero()).min(b).round_even();
                        if steps > 1 {
                            h[i] = tau * vi - n;
                        }
                        *x = n;
                    }
                }
                Tensor::new(v.shape().to_vec(), out)
            }
            Activation::Relu => Err(Error::State("rectified-linear units do not emit spikes".into())),
        }
    }

    pub fn levels(&self) -> Option<u8> {
        match self {
            Activation::IeLif { p, .. } => Some(p.bits),
            Activation::Relu => None,
        }
    }
}
