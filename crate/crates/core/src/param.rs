use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    /// Per-channel gain γ of a rectify/normalize layer.
    Gain,
    /// Per-channel shift α of a rectify/normalize layer.
    Shift,
    /// Learned quantizer step size α_w.
    StepSize,
}

/// A trainable tensor with its gradient and optimizer state.
#[derive(Clone, Debug)]
pub struct Param<T = f32> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub kind: ParamKind,
    /// Multiplies the gradient before the optimizer consumes it.
    pub grad_scale: T,
    pub(crate) moment1: Option<Tensor<T>>,
    pub(crate) moment2: Option<Tensor<T>>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor<T>, kind: ParamKind) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            value,
            grad,
            kind,
            grad_scale: T::one(),
            moment1: None,
            moment2: None,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Train: batch statistics, running-stat updates. Eval: frozen statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
