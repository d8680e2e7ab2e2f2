//! Dense row-major tensors and the handful of kernels the network is built on.
//!
//! Every reduction runs in a single fixed order (row-major, left to right), so
//! results are reproducible bit for bit across runs.

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(format!("dimensions must be >= 1, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "dimensions must be >= 1, got {shape:?}"
        );
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "elementwise op on {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "add {:?} into {:?}",
                other.shape, self.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn frobenius(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt()
    }

    /// Transpose of a 2-D tensor.
    pub fn t(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![T::zero(); r * c];
        transpose_into(&self.data, r, c, &mut out);
        Self::new(vec![c, r], out)
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(format!("expected 2-D tensor, got {:?}", self.shape))),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::c(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Matrix product `a[M×K] · b[K×N]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![T::zero(); m * n];
    gemm_nn(m, k, n, &a.data, &b.data, &mut out);
    Tensor::new(vec![m, n], out)
}

/// Single-image 2-D cross-correlation: `x[C_in×H×W]`, `w[C_out×C_in×k×k]`.
pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let [ci, h, wd] = x.shape[..] else {
        return Err(Error::shape(format!("conv input must be C×H×W, got {:?}", x.shape)));
    };
    let geom = ConvGeom::new(ci, h, wd, w.shape(), stride, pad)?;
    let x4 = Tensor::new(vec![1, ci, h, wd], x.data.clone())?;
    let (y, _) = conv2d_batch(&x4, w, &geom);
    y.reshape(&[geom.c_out, geom.h_out, geom.w_out])
}

/// Spatial bookkeeping for a convolution layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(
        c_in: usize,
        h_in: usize,
        w_in: usize,
        w_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let [c_out, wc, k, k2] = w_shape[..] else {
            return Err(Error::shape(format!("conv kernel must be 4-D, got {w_shape:?}")));
        };
        if wc != c_in || k != k2 {
            return Err(Error::shape(format!(
                "kernel {w_shape:?} does not match {c_in} input channels"
            )));
        }
        if k % 2 == 0 {
            return Err(Error::shape(format!("kernel size must be odd, got {k}")));
        }
        if stride == 0 {
            return Err(Error::shape("stride must be >= 1"));
        }
        let span_h = (h_in + 2 * pad) as isize - k as isize;
        let span_w = (w_in + 2 * pad) as isize - k as isize;
        if span_h < 0 || span_w < 0 {
            return Err(Error::shape(format!(
                "output size < 1 for {h_in}x{w_in} input, kernel {k}, pad {pad}"
            )));
        }
        Ok(Self {
            c_in,
            h_in,
            w_in,
            c_out,
            k,
            stride,
            pad,
            h_out: span_h as usize / stride + 1,
            w_out: span_w as usize / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Multiply-accumulates per image.
    pub fn macs(&self) -> u64 {
        (self.c_out * self.out_pixels() * self.patch_len()) as u64
    }
}

/// Batched convolution over `x[R×C_in×H×W]`. Also returns the im2col buffers
/// (one `patch_len × out_pixels` block per image), which the backward pass needs.
pub fn conv2d_batch<T: Real>(x: &Tensor<T>, w: &Tensor<T>, g: &ConvGeom) -> (Tensor<T>, Vec<T>) {
    let r = x.shape[0];
    let in_sz = g.c_in * g.h_in * g.w_in;
    let (pl, op) = (g.patch_len(), g.out_pixels());
    let mut cols = vec![T::zero(); r * pl * op];
    let mut out = vec![T::zero(); r * g.c_out * op];
    for n in 0..r {
        let col = &mut cols[n * pl * op..(n + 1) * pl * op];
        im2col(&x.data[n * in_sz..(n + 1) * in_sz], g, col);
        gemm_nn(g.c_out, pl, op, &w.data, col, &mut out[n * g.c_out * op..(n + 1) * g.c_out * op]);
    }
    let y = Tensor {
        shape: vec![r, g.c_out, g.h_out, g.w_out],
        data: out,
    };
    (y, cols)
}

/// Gradients of a batched convolution. Accumulates into `dw` and returns dx.
pub fn conv2d_batch_backward<T: Real>(
    dy: &Tensor<T>,
    w: &Tensor<T>,
    cols: &[T],
    g: &ConvGeom,
    dw: &mut [T],
    need_dx: bool,
) -> Option<Tensor<T>> {
    let r = dy.shape[0];
    let (pl, op) = (g.patch_len(), g.out_pixels());
    let mut col_t = vec![T::zero(); op * pl];
    for n in 0..r {
        let dyn_ = &dy.data[n * g.c_out * op..(n + 1) * g.c_out * op];
        transpose_into(&cols[n * pl * op..(n + 1) * pl * op], pl, op, &mut col_t);
        gemm_nn(g.c_out, op, pl, dyn_, &col_t, dw);
    }
    if !need_dx {
        return None;
    }
    let in_sz = g.c_in * g.h_in * g.w_in;
    let mut dx = vec![T::zero(); r * in_sz];
    let mut dcol = vec![T::zero(); pl * op];
    for n in 0..r {
        dcol.iter_mut().for_each(|v| *v = T::zero());
        let dyn_ = &dy.data[n * g.c_out * op..(n + 1) * g.c_out * op];
        gemm_tn(pl, g.c_out, op, &w.data, dyn_, &mut dcol);
        col2im(&dcol, g, &mut dx[n * in_sz..(n + 1) * in_sz]);
    }
    Some(Tensor {
        shape: vec![r, g.c_in, g.h_in, g.w_in],
        data: dx,
    })
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let op = g.out_pixels();
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * op..(row + 1) * op];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * g.w_out + ox] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < g.h_in
                            && (ix as usize) < g.w_in
                        {
                            x[(c * g.h_in + iy as usize) * g.w_in + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let op = g.out_pixels();
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * op..(row + 1) * op];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h_in {
                        continue;
                    }
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.w_in {
                            continue;
                        }
                        let d = &mut dx[(c * g.h_in + iy as usize) * g.w_in + ix as usize];
                        *d = *d + src[oy * g.w_out + ox];
                    }
                }
            }
        }
    }
}

/// Mean and population standard deviation over `axes`; the result keeps the
/// remaining axes in order (shape `[1]` when every axis is reduced).
pub fn moments<T: Real>(x: &Tensor<T>, axes: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
    let nd = x.shape.len();
    if axes.iter().any(|&a| a >= nd) {
        return Err(Error::shape(format!("axes {axes:?} out of range for {:?}", x.shape)));
    }
    let kept: Vec<usize> = (0..nd).filter(|a| !axes.contains(a)).collect();
    let out_shape: Vec<usize> = if kept.is_empty() {
        vec![1]
    } else {
        kept.iter().map(|&a| x.shape[a]).collect()
    };
    let n_out: usize = out_shape.iter().product();
    let count = x.len() / n_out;
    let mut strides = vec![1usize; nd];
    for a in (0..nd.saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * x.shape[a + 1];
    }
    let out_index = |flat: usize| -> usize {
        let mut o = 0;
        for &a in &kept {
            o = o * x.shape[a] + (flat / strides[a]) % x.shape[a];
        }
        o
    };
    let mut mean = vec![T::zero(); n_out];
    for (i, &v) in x.data.iter().enumerate() {
        let o = out_index(i);
        mean[o] = mean[o] + v;
    }
    let cnt = T::c(count as f64);
    mean.iter_mut().for_each(|m| *m = *m / cnt);
    let mut var = vec![T::zero(); n_out];
    for (i, &v) in x.data.iter().enumerate() {
        let o = out_index(i);
        let d = v - mean[o];
        var[o] = var[o] + d * d;
    }
    let std: Vec<T> = var.into_iter().map(|s| (s / cnt).sqrt()).collect();
    Ok((
        Tensor::new(out_shape.clone(), mean)?,
        Tensor::new(out_shape, std)?,
    ))
}

pub(crate) fn transpose_into<T: Copy>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`.
pub(crate) fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`.
pub(crate) fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let mut bt = vec![T::zero(); k * n];
    transpose_into(b, n, k, &mut bt);
    gemm_nn(m, k, n, a, &bt, c);
}
