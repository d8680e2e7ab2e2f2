//! Spiking neurons: the soft-reset LIF, its rectangle surrogate gradient, and
//! the IE-LIF that emits multi-bit levels `{0, 1/b, …, 1}` in training and `b`
//! binary virtual timesteps at inference.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::ste::{inside, ClipRound};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LifParams {
    /// Membrane decay, in (0, 1].
    pub tau: f64,
    pub threshold: f64,
    /// Width of the rectangular surrogate window.
    pub surrogate_width: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        Self {
            tau: 0.5,
            threshold: 1.0,
            surrogate_width: 1.0,
        }
    }
}

impl LifParams {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(self.tau) && self.tau <= 1.0) {
            return Err(Error::config(format!("tau must be in (0, 1], got {}", self.tau)));
        }
        if !ok(self.threshold) || !ok(self.surrogate_width) {
            return Err(Error::config("threshold and surrogate width must be positive"));
        }
        Ok(())
    }
}

/// Per-neuron potentials: `h` after reset, `v` before the spike decision.
#[derive(Clone, Debug, PartialEq)]
pub struct MembraneState<T = f32> {
    pub h: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Real> MembraneState<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            h: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
        }
    }
}

/// One LIF step: `v = h + input`, spike where `v ≥ ϑ`, then `h' = τ·v − s`.
pub fn lif_step<T: Real>(
    state: &MembraneState<T>,
    input: &Tensor<T>,
    p: &LifParams,
) -> Result<(Tensor<T>, MembraneState<T>)> {
    let v = state.h.zip_map(input, |h, x| h + x)?;
    let theta = T::c(p.threshold);
    let spike = v.map(|x| if x >= theta { T::one() } else { T::zero() });
    let tau = T::c(p.tau);
    let h = v.zip_map(&spike, |x, s| tau * x - s)?;
    Ok((spike, MembraneState { h, v }))
}

/// Rectangle surrogate `(1/a)·1(|v − ϑ| < a/2)`.
pub fn surrogate_grad<T: Real>(v: &Tensor<T>, p: &LifParams) -> Tensor<T> {
    let (theta, a) = (T::c(p.threshold), T::c(p.surrogate_width));
    let half = a / T::c(2.0);
    v.map(|x| if (x - theta).abs() < half { T::one() / a } else { T::zero() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IeLifParams {
    /// Maximum integer level emitted per step.
    pub bits: u8,
}

impl Default for IeLifParams {
    fn default() -> Self {
        Self { bits: 4 }
    }
}

impl IeLifParams {
    pub fn new(bits: u8) -> Result<Self> {
        if ![1, 2, 4, 8].contains(&bits) {
            return Err(Error::config(format!("IE-LIF level count must be 1, 2, 4 or 8, got {bits}")));
        }
        Ok(Self { bits })
    }

    fn levels<T: Real>(&self) -> T {
        T::c(self.bits as f64)
    }
}

/// `a = round(clip(v, 0, b)) / b`.
pub fn ielif_forward<T: Real>(v: &Tensor<T>, p: IeLifParams) -> Tensor<T> {
    ielif_forward_with(v, p, &mut ClipRound::exact())
}

pub fn ielif_forward_with<T: Real>(v: &Tensor<T>, p: IeLifParams, ctx: &mut ClipRound<T>) -> Tensor<T> {
    let mut out = v.clone();
    ielif_in_place(out.data_mut(), p, ctx);
    out
}

pub(crate) fn ielif_in_place<T: Real>(xs: &mut [T], p: IeLifParams, ctx: &mut ClipRound<T>) {
    let b = p.levels::<T>();
    ctx.apply(xs, T::zero(), b);
    let inv = T::one() / b;
    xs.iter_mut().for_each(|x| *x = *x * inv);
}

/// Straight-through gradient of the IE-LIF: `grad_a · 1(0 < v < b) / b`.
///
/// The `1/b` is the derivative of the output scaling; rounding and clipping
/// pass straight through inside the range and block outside it.
pub fn ielif_backward<T: Real>(grad_a: &Tensor<T>, v: &Tensor<T>, p: IeLifParams) -> Result<Tensor<T>> {
    let b = p.levels::<T>();
    let inv = T::one() / b;
    grad_a.zip_map(v, |g, x| if inside(x, T::zero(), b) { g * inv } else { T::zero() })
}

/// Spread levels over `b` binary virtual steps, earliest steps first.
pub fn expand_to_spikes<T: Real>(a: &Tensor<T>, p: IeLifParams) -> Result<Vec<Tensor<T>>> {
    let counts = level_counts(a, p)?;
    Ok((0..p.bits as u32)
        .map(|t| {
            let data = counts
                .iter()
                .map(|&n| if t < n { T::one() } else { T::zero() })
                .collect();
            Tensor::new(a.shape().to_vec(), data).expect("same shape")
        })
        .collect())
}

/// Integer spike counts `b·a`, validating that `a` lies on the level grid.
pub fn level_counts<T: Real>(a: &Tensor<T>, p: IeLifParams) -> Result<Vec<u32>> {
    let b = p.levels::<T>();
    a.data()
        .iter()
        .map(|&x| {
            let n = x * b;
            let r = n.round();
            if (n - r).abs() > T::c(1e-6) || r < T::zero() || r > b {
                Err(Error::input(format!("activation {x} is not on the 1/{} grid", p.bits)))
            } else {
                Ok(r.to_u32().expect("small non-negative count"))
            }
        })
        .collect()
}

/// Training-time levels or inference-time binary trains.
#[derive(Clone, Debug, PartialEq)]
pub enum SpikeRecord<T = f32> {
    Levels { a: Tensor<T>, bits: u8 },
    Train(Vec<Tensor<T>>),
}

impl<T: Real> SpikeRecord<T> {
    pub fn levels(a: Tensor<T>, p: IeLifParams) -> Result<Self> {
        level_counts(&a, p)?;
        Ok(Self::Levels { a, bits: p.bits })
    }

    pub fn train(steps: Vec<Tensor<T>>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::input("a spike train needs at least one step"));
        }
        for s in &steps {
            if s.shape() != steps[0].shape() {
                return Err(Error::shape("spike train steps differ in shape"));
            }
            if s.data().iter().any(|&v| v != T::zero() && v != T::one()) {
                return Err(Error::input("spike train contains non-binary values"));
            }
        }
        Ok(Self::Train(steps))
    }

    /// Total spikes per neuron (`b·a` for levels, `Σ_t s[t]` for trains).
    pub fn counts(&self) -> Tensor<T> {
        match self {
            Self::Levels { a, bits } => a.scale(T::c(*bits as f64)),
            Self::Train(steps) => {
                let mut acc = Tensor::zeros(steps[0].shape());
                for s in steps {
                    acc.add_assign(s).expect("validated shapes");
                }
                acc
            }
        }
    }
}
