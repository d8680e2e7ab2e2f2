//! Learned-step weight quantization with straight-through gradients.
//!
//! Weights map to signed `b`-bit codes `round(clip(w/α, -2^(b-1), 2^(b-1)-1))`
//! and dequantize to `α·code`. One scale per tensor. Rounding is half to even.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::ste::{inside, ClipRound};
use crate::tensor::Tensor;

pub const SUPPORTED_BITS: [u8; 4] = [2, 3, 4, 8];

/// Bit width plus learnable step size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantSpec<T = f32> {
    bits: u8,
    scale: T,
}

impl<T: Real> QuantSpec<T> {
    pub fn new(bits: u8, scale: T) -> Result<Self> {
        if !SUPPORTED_BITS.contains(&bits) {
            return Err(Error::config(format!(
                "weight bits must be one of {SUPPORTED_BITS:?}, got {bits}"
            )));
        }
        if !(scale.is_finite() && scale > T::zero()) {
            return Err(Error::input(format!("quantizer scale must be positive, got {scale}")));
        }
        Ok(Self { bits, scale })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn scale(&self) -> T {
        self.scale
    }

    pub fn qmin(&self) -> i32 {
        -(1 << (self.bits - 1))
    }

    pub fn qmax(&self) -> i32 {
        (1 << (self.bits - 1)) - 1
    }

    fn bounds(&self) -> (T, T) {
        (T::c(self.qmin() as f64), T::c(self.qmax() as f64))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedWeight<T = f32> {
    shape: Vec<usize>,
    codes: Vec<i8>,
    spec: QuantSpec<T>,
}

impl<T: Real> QuantizedWeight<T> {
    pub fn from_codes(shape: Vec<usize>, codes: Vec<i8>, spec: QuantSpec<T>) -> Result<Self> {
        if shape.iter().product::<usize>() != codes.len() {
            return Err(Error::shape(format!(
                "{} codes do not fill shape {shape:?}",
                codes.len()
            )));
        }
        if let Some(c) = codes
            .iter()
            .find(|&&c| (c as i32) < spec.qmin() || (c as i32) > spec.qmax())
        {
            return Err(Error::input(format!(
                "code {c} outside the {}-bit range",
                spec.bits
            )));
        }
        Ok(Self { shape, codes, spec })
    }

    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn spec(&self) -> QuantSpec<T> {
        self.spec
    }
}

pub fn quantize<T: Real>(w: &Tensor<T>, spec: QuantSpec<T>) -> Result<QuantizedWeight<T>> {
    if let Some(bad) = w.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::input(format!("non-finite weight {bad}")));
    }
    let mut levels: Vec<T> = w.data().iter().map(|&v| v / spec.scale).collect();
    let (lo, hi) = spec.bounds();
    ClipRound::exact().apply(&mut levels, lo, hi);
    let codes = levels
        .iter()
        .map(|v| v.to_i8().expect("clipped code fits in i8"))
        .collect();
    Ok(QuantizedWeight {
        shape: w.shape().to_vec(),
        codes,
        spec,
    })
}

pub fn dequantize<T: Real>(q: &QuantizedWeight<T>) -> Tensor<T> {
    let data = q
        .codes
        .iter()
        .map(|&c| q.spec.scale * T::c(c as f64))
        .collect();
    Tensor::new(q.shape.clone(), data).expect("code count matches shape")
}

/// Training-time forward: `ŵ = α·round(clip(w/α))` through a clip-round context.
pub fn fake_quantize<T: Real>(w: &Tensor<T>, spec: QuantSpec<T>, ctx: &mut ClipRound<T>) -> Tensor<T> {
    let mut levels: Vec<T> = w.data().iter().map(|&v| v / spec.scale).collect();
    let (lo, hi) = spec.bounds();
    ctx.apply(&mut levels, lo, hi);
    let data = levels.into_iter().map(|l| l * spec.scale).collect();
    Tensor::new(w.shape().to_vec(), data).expect("same shape")
}

/// Straight-through gradients of `ŵ` with respect to `w` and `α`.
///
/// The returned scale gradient is the raw derivative; learned-step gradient
/// normalization ([`lsq_grad_scale`]) is applied by the optimizer.
pub fn quant_backward<T: Real>(
    grad_out: &Tensor<T>,
    w: &Tensor<T>,
    spec: QuantSpec<T>,
) -> Result<(Tensor<T>, T)> {
    if grad_out.shape() != w.shape() {
        return Err(Error::shape(format!(
            "gradient {:?} vs weight {:?}",
            grad_out.shape(),
            w.shape()
        )));
    }
    let (lo, hi) = spec.bounds();
    let mut grad_w = Vec::with_capacity(w.len());
    let mut grad_scale = T::zero();
    for (&g, &wv) in grad_out.data().iter().zip(w.data()) {
        let x = wv / spec.scale;
        if inside(x, lo, hi) {
            grad_w.push(g);
            grad_scale = grad_scale + (x.round_even() - x) * g;
        } else {
            grad_w.push(T::zero());
            let bound = if x <= lo { lo } else { hi };
            grad_scale = grad_scale + bound * g;
        }
    }
    Ok((Tensor::new(w.shape().to_vec(), grad_w)?, grad_scale))
}

/// Step-size initialization `2·mean|w| / sqrt(2^(b-1) - 1)`, floored at 1e-8.
pub fn init_scale<T: Real>(w: &Tensor<T>, bits: u8) -> T {
    let qmax = ((1u32 << (bits - 1)) - 1) as f64;
    let mean_abs = w.data().iter().map(|v| v.abs().as_f64()).sum::<f64>() / w.len() as f64;
    T::c((2.0 * mean_abs / qmax.sqrt()).max(1e-8))
}

/// Gradient normalization `1/sqrt(n_w · (2^(b-1) - 1))` for the step size.
pub fn lsq_grad_scale<T: Real>(n_weights: usize, bits: u8) -> T {
    let qmax = ((1u32 << (bits - 1)) - 1) as f64;
    T::c(1.0 / (n_weights as f64 * qmax).sqrt())
}
