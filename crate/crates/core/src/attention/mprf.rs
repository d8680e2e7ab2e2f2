//! Membrane potential rectify function: per-channel standardization followed
//! by a learnable gain and shift, `p̂ = (p − μ)/σ · γ + α`.
//!
//! In training μ and σ are the batch moments over every non-channel axis and
//! feed exponential running averages; at inference the running values are
//! used, which is what makes the map affine and foldable into the preceding
//! weights. The conv stages use the same layer as their batch normalization.

use crate::error::{Error, Result};
use crate::param::{Mode, Param, ParamKind};
use crate::quant::{dequantize, QuantizedWeight};
use crate::real::Real;
use crate::tensor::Tensor;

pub const MPRF_EPS: f64 = 1e-5;
pub const MPRF_MOMENTUM: f64 = 0.9;

/// `(outer, channels, inner)` view of a tensor around its channel axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelLayout {
    pub outer: usize,
    pub channels: usize,
    pub inner: usize,
}

impl ChannelLayout {
    pub fn of(shape: &[usize], axis: usize) -> Result<Self> {
        if axis >= shape.len() {
            return Err(Error::shape(format!("channel axis {axis} out of range for {shape:?}")));
        }
        Ok(Self {
            outer: shape[..axis].iter().product(),
            channels: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        })
    }

    pub fn per_channel(&self) -> usize {
        self.outer * self.inner
    }

    #[inline]
    fn channel_of(&self, flat: usize) -> usize {
        (flat / self.inner) % self.channels
    }
}

#[derive(Clone, Debug)]
pub struct MprfParams<T = f32> {
    pub gamma: Param<T>,
    pub shift: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_std: Tensor<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Real> MprfParams<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::full(&[channels], T::one()), ParamKind::Gain),
            shift: Param::new(Tensor::zeros(&[channels]), ParamKind::Shift),
            running_mean: Tensor::zeros(&[channels]),
            running_std: Tensor::full(&[channels], T::one()),
            momentum: T::c(MPRF_MOMENTUM),
            eps: T::c(MPRF_EPS),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }
}

#[derive(Clone, Debug)]
pub struct MprfCache<T> {
    layout: ChannelLayout,
    xhat: Vec<T>,
    std: Vec<T>,
}

/// Apply the rectifier with the channel on `channel_axis`.
pub fn mprf_apply<T: Real>(
    p_mem: &Tensor<T>,
    channel_axis: usize,
    params: &mut MprfParams<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    let layout = ChannelLayout::of(p_mem.shape(), channel_axis)?;
    Ok(mprf_forward(p_mem, layout, params, mode)?.0)
}

pub(crate) fn mprf_forward<T: Real>(
    x: &Tensor<T>,
    layout: ChannelLayout,
    params: &mut MprfParams<T>,
    mode: Mode,
) -> Result<(Tensor<T>, MprfCache<T>)> {
    let c = layout.channels;
    if c != params.channels() || layout.outer * c * layout.inner != x.len() {
        return Err(Error::shape(format!(
            "rectifier has {} channels, input {:?} has {c}",
            params.channels(),
            x.shape()
        )));
    }
    let (mean, std) = match mode {
        Mode::Train => {
            let (mean, var) = channel_moments(x.data(), layout);
            let std: Vec<T> = var.iter().map(|&v| (v + params.eps).sqrt()).collect();
            let m = params.momentum;
            let one_m = T::one() - m;
            for ch in 0..c {
                let rm = &mut params.running_mean.data_mut()[ch];
                *rm = m * *rm + one_m * mean[ch];
                let rs = &mut params.running_std.data_mut()[ch];
                *rs = m * *rs + one_m * std[ch];
            }
            (mean, std)
        }
        Mode::Eval => (
            params.running_mean.data().to_vec(),
            params.running_std.data().to_vec(),
        ),
    };
    let gamma = params.gamma.value.data();
    let shift = params.shift.value.data();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for (i, &v) in x.data().iter().enumerate() {
        let ch = layout.channel_of(i);
        let h = (v - mean[ch]) / std[ch];
        xhat[i] = h;
        out[i] = h * gamma[ch] + shift[ch];
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        MprfCache { layout, xhat, std },
    ))
}

/// Backward through a train-mode rectifier (batch statistics included).
/// Accumulates γ/α gradients and returns the input gradient.
pub(crate) fn mprf_backward<T: Real>(
    cache: &MprfCache<T>,
    dy: &Tensor<T>,
    params: &mut MprfParams<T>,
    mode: Mode,
) -> Tensor<T> {
    let layout = cache.layout;
    let c = layout.channels;
    let n = T::c(layout.per_channel() as f64);
    let mut sum_dy = vec![T::zero(); c];
    let mut sum_dy_xhat = vec![T::zero(); c];
    for (i, &g) in dy.data().iter().enumerate() {
        let ch = layout.channel_of(i);
        sum_dy[ch] = sum_dy[ch] + g;
        sum_dy_xhat[ch] = sum_dy_xhat[ch] + g * cache.xhat[i];
    }
    for ch in 0..c {
        let gg = &mut params.gamma.grad.data_mut()[ch];
        *gg = *gg + sum_dy_xhat[ch];
        let gs = &mut params.shift.grad.data_mut()[ch];
        *gs = *gs + sum_dy[ch];
    }
    let gamma = params.gamma.value.data();
    let mut dx = vec![T::zero(); dy.len()];
    for (i, &g) in dy.data().iter().enumerate() {
        let ch = layout.channel_of(i);
        let k = gamma[ch] / cache.std[ch];
        dx[i] = match mode {
            Mode::Train => k * (g - sum_dy[ch] / n - cache.xhat[i] * sum_dy_xhat[ch] / n),
            Mode::Eval => k * g,
        };
    }
    Tensor::new(dy.shape().to_vec(), dx).expect("same shape")
}

fn channel_moments<T: Real>(x: &[T], layout: ChannelLayout) -> (Vec<T>, Vec<T>) {
    let c = layout.channels;
    let n = T::c(layout.per_channel() as f64);
    let mut mean = vec![T::zero(); c];
    for (i, &v) in x.iter().enumerate() {
        let ch = layout.channel_of(i);
        mean[ch] = mean[ch] + v;
    }
    mean.iter_mut().for_each(|m| *m = *m / n);
    let mut var = vec![T::zero(); c];
    for (i, &v) in x.iter().enumerate() {
        let ch = layout.channel_of(i);
        let d = v - mean[ch];
        var[ch] = var[ch] + d * d;
    }
    var.iter_mut().for_each(|v| *v = *v / n);
    (mean, var)
}

/// Fold a frozen rectifier into the quantized weights that feed it.
///
/// Output channel `c` gets `w_f = γ·ŵ/σ` and `b_f = γ·(bias − μ)/σ + α`.
pub fn fuse_mprf<T: Real>(
    w_q: &QuantizedWeight<T>,
    bias: Option<&Tensor<T>>,
    params: &MprfParams<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    fuse_affine(&dequantize(w_q), bias, params)
}

/// [`fuse_mprf`] on an already dequantized (or full-precision) weight.
pub fn fuse_affine<T: Real>(
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    params: &MprfParams<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let c = params.channels();
    if w.shape()[0] != c {
        return Err(Error::shape(format!(
            "weight {:?} has {} output channels, rectifier has {c}",
            w.shape(),
            w.shape()[0]
        )));
    }
    if let Some(b) = bias {
        if b.len() != c {
            return Err(Error::shape("bias length differs from channel count"));
        }
    }
    let per = w.len() / c;
    let mut wf = w.clone();
    let mut bf = vec![T::zero(); c];
    for ch in 0..c {
        let sigma = params.running_std.data()[ch];
        if !(sigma >= params.eps) {
            return Err(Error::Numeric(format!(
                "running std {sigma} of channel {ch} is below {}",
                params.eps
            )));
        }
        let g = params.gamma.value.data()[ch];
        let k = g / sigma;
        for v in &mut wf.data_mut()[ch * per..(ch + 1) * per] {
            *v = *v * k;
        }
        let b = bias.map_or(T::zero(), |b| b.data()[ch]);
        bf[ch] = g * (b - params.running_mean.data()[ch]) / sigma + params.shift.value.data()[ch];
    }
    Ok((wf, Tensor::new(vec![c], bf)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{quantize, QuantSpec};
    use crate::rng::Rng;

    fn params(gamma: &[f64], shift: &[f64], mean: &[f64], std: &[f64]) -> MprfParams<f64> {
        let mut p = MprfParams::new(gamma.len());
        p.gamma.value = Tensor::new(vec![gamma.len()], gamma.to_vec()).unwrap();
        p.shift.value = Tensor::new(vec![shift.len()], shift.to_vec()).unwrap();
        p.running_mean = Tensor::new(vec![mean.len()], mean.to_vec()).unwrap();
        p.running_std = Tensor::new(vec![std.len()], std.to_vec()).unwrap();
        p
    }

    #[test]
    fn zero_gain_outputs_shift() {
        let mut p = params(&[0.0], &[0.7], &[0.0], &[1.0]);
        let x = Tensor::new(vec![4, 1], vec![-3.0, 0.5, 2.0, 9.0]).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let y = mprf_apply(&x, 1, &mut p, mode).unwrap();
            assert!(y.data().iter().all(|&v| v == 0.7));
        }
    }

    #[test]
    fn hand_example() {
        let mut p = params(&[1.0], &[0.0], &[0.0], &[0.8165]);
        let x = Tensor::new(vec![3, 1], vec![-1.0, 0.0, 1.0]).unwrap();
        let y = mprf_apply(&x, 1, &mut p, Mode::Eval).unwrap();
        let want = [-1.2247, 0.0, 1.2247];
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-4);
        }
        // batch statistics give the same map up to the variance floor
        let y = mprf_apply(&x, 1, &mut p, Mode::Train).unwrap();
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn inverse_parameters_give_identity() {
        let mut p = params(&[2.5, 0.3], &[-1.0, 4.0], &[-1.0, 4.0], &[2.5, 0.3]);
        let mut rng = Rng::new(2);
        let x = Tensor::from_fn(&[5, 2], |_| rng.normal());
        let y = mprf_apply(&x, 1, &mut p, Mode::Eval).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn train_mode_output_has_target_moments() {
        let mut rng = Rng::new(6);
        let mut p = params(&[0.8, 1.7, 0.2], &[0.1, -0.4, 2.0], &[0.0; 3], &[1.0; 3]);
        let x = Tensor::from_fn(&[20_000, 3], |i| rng.normal() * (1.0 + i as f64 % 3.0) + 5.0);
        let y = mprf_apply(&x, 1, &mut p, Mode::Train).unwrap();
        let (m, s) = crate::tensor::moments(&y, &[0]).unwrap();
        for ch in 0..3 {
            assert!((m.data()[ch] - p.shift.value.data()[ch]).abs() < 1e-3);
            assert!((s.data()[ch] - p.gamma.value.data()[ch]).abs() < 1e-3);
        }
        // one step of momentum 0.9 from (0, 1)
        assert!((p.running_mean.data()[0] - 0.5).abs() < 0.05);
    }

    #[test]
    fn fusion_hand_examples() {
        let spec = QuantSpec::new(4, 1.0).unwrap();
        let w = quantize(&Tensor::scalar(2.0), spec).unwrap();
        let (wf, bf) = fuse_mprf(&w, Some(&Tensor::scalar(0.0)), &params(&[2.0], &[1.0], &[1.0], &[4.0])).unwrap();
        assert_eq!((wf.data()[0], bf.data()[0]), (1.0, 0.5));

        let (wf, bf) = fuse_mprf(&w, None, &params(&[4.0], &[0.0], &[0.0], &[4.0])).unwrap();
        assert_eq!((wf.data()[0], bf.data()[0]), (2.0, 0.0));
    }

    #[test]
    fn fusion_rejects_collapsed_std() {
        let w = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        assert!(matches!(
            fuse_affine(&w, None, &params(&[1.0], &[0.0], &[0.0], &[1e-7])),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn backward_matches_central_differences() {
        // oracle: central differences of L = Σ y·r through batch statistics
        let mut rng = Rng::new(12);
        let x = Tensor::from_fn(&[4, 8], |_| rng.normal());
        let r = Tensor::from_fn(&[4, 8], |_| rng.normal());
        let mut p = MprfParams::<f64>::new(8);
        p.gamma.value = Tensor::from_fn(&[8], |_| 0.5 + rng.uniform());
        p.shift.value = Tensor::from_fn(&[8], |_| rng.normal());
        let layout = ChannelLayout::of(x.shape(), 1).unwrap();
        let loss = |x: &Tensor<f64>, p: &mut MprfParams<f64>| -> f64 {
            let (y, _) = mprf_forward(x, layout, p, Mode::Train).unwrap();
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = mprf_forward(&x, layout, &mut p, Mode::Train).unwrap();
        let dx = mprf_backward(&cache, &r, &mut p, Mode::Train);
        let h = 1e-6;
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-3);
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += h;
            xm.data_mut()[i] -= h;
            let fd = (loss(&xp, &mut p) - loss(&xm, &mut p)) / (2.0 * h);
            assert!(rel(fd, dx.data()[i]) < 1e-4, "dx[{i}] {fd} vs {}", dx.data()[i]);
        }
        for ch in 0..8 {
            let mut q = p.clone();
            q.gamma.value.data_mut()[ch] += h;
            let up = loss(&x, &mut q);
            q.gamma.value.data_mut()[ch] -= 2.0 * h;
            let down = loss(&x, &mut q);
            let fd = (up - down) / (2.0 * h);
            assert!(rel(fd, p.gamma.grad.data()[ch]) < 1e-4);
        }
    }
}
