//! Quantized spike-driven self-attention in linear order.
//!
//! For each sample and head the spike triple is contracted as
//! `q_s · (k_sᵀ · v_s)`, so the intermediate is `d × d` and the cost grows
//! linearly with the token count. The softmax variant serves the
//! full-precision teacher and follows the usual scaled dot-product form.

use crate::error::{Error, Result};
use crate::layers::{ActCache, Activation, WeightCache, WeightLayer};
use crate::param::Mode;
use crate::real::Real;
use crate::ste::ClipRound;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AttentionKind {
    /// Spiking q/k/v, `SN(scale · q_s (k_sᵀ v_s))`.
    Spike { scale: f64 },
    /// Continuous q/k/v, `softmax(q kᵀ / sqrt(d)) v`.
    Softmax,
}

/// Per-layer q/k/v membranes (`[R·N, D]`, heads are column groups) and, for
/// the spiking kind, their grid activations.
#[derive(Clone, Debug)]
pub struct AttentionTriple<T = f32> {
    pub q_mem: Tensor<T>,
    pub k_mem: Tensor<T>,
    pub v_mem: Tensor<T>,
    pub q_s: Option<Tensor<T>>,
    pub k_s: Option<Tensor<T>>,
    pub v_s: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct Qsdsa<T = f32> {
    pub q: WeightLayer<T>,
    pub k: WeightLayer<T>,
    pub v: WeightLayer<T>,
    pub heads: usize,
    pub kind: AttentionKind,
    /// Neuron on q/k/v and on the attention output (spiking kind only).
    pub neuron: Activation,
}

#[derive(Clone, Debug)]
pub struct QsdsaCache<T> {
    layers: [WeightCache<T>; 3],
    acts: Option<[ActCache<T>; 3]>,
    out_act: Option<ActCache<T>>,
    /// Activations entering the product (`q_s,k_s,v_s` or raw `q,k,v`).
    qkv: [Tensor<T>; 3],
    /// Per (row group, head): `k_sᵀ v_s` for spikes, the softmax matrix otherwise.
    inner: Vec<Vec<T>>,
    tokens: usize,
}

/// Output of a forward pass.
#[derive(Clone, Debug)]
pub struct QsdsaOutput<T> {
    pub y: Tensor<T>,
    pub records: AttentionTriple<T>,
    pub cache: QsdsaCache<T>,
    /// Multiply-accumulates spent in the attention product alone.
    pub attention_macs: u64,
}

impl<T: Real> Qsdsa<T> {
    pub fn dim(&self) -> usize {
        self.q.c_out()
    }

    fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    fn check(&self, x: &Tensor<T>, tokens: usize) -> Result<(usize, usize)> {
        let (rows, d) = x.dims2()?;
        if d != self.q.c_in() || tokens == 0 || rows % tokens != 0 {
            return Err(Error::shape(format!(
                "attention input {:?} with {tokens} tokens does not fit width {}",
                x.shape(),
                self.q.c_in()
            )));
        }
        if !self.dim().is_multiple_of(self.heads) {
            return Err(Error::config(format!("{} heads do not divide {}", self.heads, self.dim())));
        }
        Ok((rows / tokens, d))
    }

    /// `x` is `[R·N, D]`, time-major over `steps` when `steps > 1`.
    pub fn forward(
        &mut self,
        x: &Tensor<T>,
        tokens: usize,
        steps: usize,
        mode: Mode,
        ctx: &mut ClipRound<T>,
    ) -> Result<QsdsaOutput<T>> {
        let (groups, _) = self.check(x, tokens)?;
        let (q_mem, cq) = self.q.forward(x, mode, ctx)?;
        let (k_mem, ck) = self.k.forward(x, mode, ctx)?;
        let (v_mem, cv) = self.v.forward(x, mode, ctx)?;
        let (hd, heads, dim) = (self.head_dim(), self.heads, self.dim());
        match self.kind {
            AttentionKind::Spike { scale } => {
                let (q_s, aq) = self.neuron.forward(&q_mem, steps, ctx);
                let (k_s, ak) = self.neuron.forward(&k_mem, steps, ctx);
                let (v_s, av) = self.neuron.forward(&v_mem, steps, ctx);
                let (attn, inner, macs) = spike_product(&q_s, &k_s, &v_s, groups, tokens, heads, T::c(scale));
                let (y, ao) = self.neuron.forward(&attn, steps, ctx);
                debug_assert_eq!(attn.len(), groups * tokens * dim);
                Ok(QsdsaOutput {
                    y,
                    records: AttentionTriple {
                        q_mem,
                        k_mem,
                        v_mem,
                        q_s: Some(q_s.clone()),
                        k_s: Some(k_s.clone()),
                        v_s: Some(v_s.clone()),
                    },
                    cache: QsdsaCache {
                        layers: [cq, ck, cv],
                        acts: Some([aq, ak, av]),
                        out_act: Some(ao),
                        qkv: [q_s, k_s, v_s],
                        inner,
                        tokens,
                    },
                    attention_macs: macs,
                })
            }
            AttentionKind::Softmax => {
                let mut y = vec![T::zero(); x.shape()[0] * dim];
                let mut inner = Vec::with_capacity(groups * heads);
                let inv = T::one() / T::c(hd as f64).sqrt();
                for g in 0..groups {
                    for h in 0..heads {
                        let q = block(&q_mem, g, h, tokens, hd, dim);
                        let k = block(&k_mem, g, h, tokens, hd, dim);
                        let v = block(&v_mem, g, h, tokens, hd, dim);
                        let mut s = vec![T::zero(); tokens * tokens];
                        gemm_nt(tokens, hd, tokens, &q, &k, &mut s);
                        s.iter_mut().for_each(|z| *z = *z * inv);
                        softmax_rows(&mut s, tokens);
                        let mut o = vec![T::zero(); tokens * hd];
                        gemm_nn(tokens, tokens, hd, &s, &v, &mut o);
                        put_block(&mut y, &o, g, h, tokens, hd, dim);
                        inner.push(s);
                    }
                }
                let macs = 2 * (groups * heads * tokens * tokens * hd) as u64;
                Ok(QsdsaOutput {
                    y: Tensor::new(vec![x.shape()[0], dim], y)?,
                    records: AttentionTriple {
                        q_mem: q_mem.clone(),
                        k_mem: k_mem.clone(),
                        v_mem: v_mem.clone(),
                        q_s: None,
                        k_s: None,
                        v_s: None,
                    },
                    cache: QsdsaCache {
                        layers: [cq, ck, cv],
                        acts: None,
                        out_act: None,
                        qkv: [q_mem, k_mem, v_mem],
                        inner,
                        tokens,
                    },
                    attention_macs: macs,
                })
            }
        }
    }

    /// Backward from the output gradient, plus optional extra gradients on
    /// the q/k/v membranes (the distillation term). Returns the input gradient.
    pub fn backward(
        &mut self,
        cache: &QsdsaCache<T>,
        dy: &Tensor<T>,
        d_mem: Option<[&Tensor<T>; 3]>,
    ) -> Result<Tensor<T>> {
        let tokens = cache.tokens;
        let (hd, heads, dim) = (self.head_dim(), self.heads, self.dim());
        let rows = dy.shape()[0];
        let groups = rows / tokens;
        let [q, k, v] = &cache.qkv;
        let mut dq = vec![T::zero(); rows * dim];
        let mut dk = vec![T::zero(); rows * dim];
        let mut dv = vec![T::zero(); rows * dim];
        match self.kind {
            AttentionKind::Spike { scale } => {
                let d_attn = self.neuron.backward(cache.out_act.as_ref().expect("spike cache"), dy);
                let c = T::c(scale);
                for g in 0..groups {
                    for h in 0..heads {
                        let kv = &cache.inner[g * heads + h];
                        let da: Vec<T> = block(&d_attn, g, h, tokens, hd, dim).iter().map(|&z| z * c).collect();
                        let qb = block(q, g, h, tokens, hd, dim);
                        let kb = block(k, g, h, tokens, hd, dim);
                        let vb = block(v, g, h, tokens, hd, dim);
                        let mut dqb = vec![T::zero(); tokens * hd];
                        gemm_nt(tokens, hd, hd, &da, kv, &mut dqb);
                        let mut dkv = vec![T::zero(); hd * hd];
                        gemm_tn(hd, tokens, hd, &qb, &da, &mut dkv);
                        let mut dkb = vec![T::zero(); tokens * hd];
                        gemm_nt(tokens, hd, hd, &vb, &dkv, &mut dkb);
                        let mut dvb = vec![T::zero(); tokens * hd];
                        gemm_nn(tokens, hd, hd, &kb, &dkv, &mut dvb);
                        put_block(&mut dq, &dqb, g, h, tokens, hd, dim);
                        put_block(&mut dk, &dkb, g, h, tokens, hd, dim);
                        put_block(&mut dv, &dvb, g, h, tokens, hd, dim);
                    }
                }
                let acts = cache.acts.as_ref().expect("spike cache");
                let shape = vec![rows, dim];
                let dq = self.neuron.backward(&acts[0], &Tensor::new(shape.clone(), dq)?);
                let dk = self.neuron.backward(&acts[1], &Tensor::new(shape.clone(), dk)?);
                let dv = self.neuron.backward(&acts[2], &Tensor::new(shape, dv)?);
                self.backward_layers(cache, [dq, dk, dv], d_mem)
            }
            AttentionKind::Softmax => {
                let inv = T::one() / T::c(hd as f64).sqrt();
                for g in 0..groups {
                    for h in 0..heads {
                        let p = &cache.inner[g * heads + h];
                        let dob = block(dy, g, h, tokens, hd, dim);
                        let qb = block(q, g, h, tokens, hd, dim);
                        let kb = block(k, g, h, tokens, hd, dim);
                        let vb = block(v, g, h, tokens, hd, dim);
                        let mut dp = vec![T::zero(); tokens * tokens];
                        gemm_nt(tokens, hd, tokens, &dob, &vb, &mut dp);
                        let mut dvb = vec![T::zero(); tokens * hd];
                        gemm_tn(tokens, tokens, hd, p, &dob, &mut dvb);
                        let mut ds = vec![T::zero(); tokens * tokens];
                        for i in 0..tokens {
                            let row = i * tokens..(i + 1) * tokens;
                            let dot: T = p[row.clone()].iter().zip(&dp[row.clone()]).map(|(&a, &b)| a * b).sum();
                            for j in row {
                                ds[j] = p[j] * (dp[j] - dot) * inv;
                            }
                        }
                        let mut dqb = vec![T::zero(); tokens * hd];
                        gemm_nn(tokens, tokens, hd, &ds, &kb, &mut dqb);
                        let mut dkb = vec![T::zero(); tokens * hd];
                        gemm_tn(tokens, tokens, hd, &ds, &qb, &mut dkb);
                        put_block(&mut dq, &dqb, g, h, tokens, hd, dim);
                        put_block(&mut dk, &dkb, g, h, tokens, hd, dim);
                        put_block(&mut dv, &dvb, g, h, tokens, hd, dim);
                    }
                }
                let shape = vec![rows, dim];
                self.backward_layers(
                    cache,
                    [
                        Tensor::new(shape.clone(), dq)?,
                        Tensor::new(shape.clone(), dk)?,
                        Tensor::new(shape, dv)?,
                    ],
                    d_mem,
                )
            }
        }
    }

    fn backward_layers(
        &mut self,
        cache: &QsdsaCache<T>,
        mut d: [Tensor<T>; 3],
        d_mem: Option<[&Tensor<T>; 3]>,
    ) -> Result<Tensor<T>> {
        if let Some(extra) = d_mem {
            for (di, e) in d.iter_mut().zip(extra) {
                di.add_assign(e)?;
            }
        }
        let [dq, dk, dv] = d;
        let mut dx = self.q.backward(&cache.layers[0], &dq, true)?.expect("dx requested");
        dx.add_assign(&self.k.backward(&cache.layers[1], &dk, true)?.expect("dx requested"))?;
        dx.add_assign(&self.v.backward(&cache.layers[2], &dv, true)?.expect("dx requested"))?;
        Ok(dx)
    }

    /// Inference on spike counts of a fused layer. Returns the output counts
    /// and the q/k/v counts.
    pub fn forward_counts(&self, counts: &Tensor<T>, tokens: usize, steps: usize) -> Result<(Tensor<T>, [Tensor<T>; 3])> {
        let AttentionKind::Spike { scale } = self.kind else {
            return Err(Error::State("softmax attention has no spike inference path".into()));
        };
        let levels = self
            .neuron
            .levels()
            .ok_or_else(|| Error::State("attention neuron does not spike".into()))?;
        let (groups, _) = self.check(counts, tokens)?;
        let qc = self.neuron.fire_counts(&self.q.forward_counts(counts, levels)?, steps)?;
        let kc = self.neuron.fire_counts(&self.k.forward_counts(counts, levels)?, steps)?;
        let vc = self.neuron.fire_counts(&self.v.forward_counts(counts, levels)?, steps)?;
        // counts carry a factor b per operand; divide by b³ to match the levels
        let b = T::c(levels as f64);
        let c = T::c(scale) / (b * b * b);
        let (attn, _, _) = spike_product(&qc, &kc, &vc, groups, tokens, self.heads, c);
        let out = self.neuron.fire_counts(&attn, steps)?;
        Ok((out, [qc, kc, vc]))
    }

    pub fn param_count(&self) -> usize {
        self.q.param_count() + self.k.param_count() + self.v.param_count()
    }
}

/// `scale · q (kᵀ v)` per row group and head. Returns the product, the
/// `d × d` intermediates and the multiply-accumulate count.
pub fn spike_product<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    groups: usize,
    tokens: usize,
    heads: usize,
    scale: T,
) -> (Tensor<T>, Vec<Vec<T>>, u64) {
    let dim = q.shape()[1];
    let hd = dim / heads;
    let mut out = vec![T::zero(); groups * tokens * dim];
    let mut inner = Vec::with_capacity(groups * heads);
    let mut macs = 0u64;
    for g in 0..groups {
        for h in 0..heads {
            let qb = block(q, g, h, tokens, hd, dim);
            let kb = block(k, g, h, tokens, hd, dim);
            let vb = block(v, g, h, tokens, hd, dim);
            let mut kv = vec![T::zero(); hd * hd];
            gemm_tn(hd, tokens, hd, &kb, &vb, &mut kv);
            let mut o = vec![T::zero(); tokens * hd];
            gemm_nn(tokens, hd, hd, &qb, &kv, &mut o);
            o.iter_mut().for_each(|z| *z = *z * scale);
            put_block(&mut out, &o, g, h, tokens, hd, dim);
            inner.push(kv);
            macs += 2 * (tokens * hd * hd) as u64;
        }
    }
    (
        Tensor::new(vec![groups * tokens, dim], out).expect("consistent sizes"),
        inner,
        macs,
    )
}

/// Rows `g·N..(g+1)·N`, columns of head `h`.
fn block<T: Real>(x: &Tensor<T>, g: usize, h: usize, tokens: usize, hd: usize, dim: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(tokens * hd);
    for n in 0..tokens {
        let row = (g * tokens + n) * dim + h * hd;
        out.extend_from_slice(&x.data()[row..row + hd]);
    }
    out
}

fn put_block<T: Real>(dst: &mut [T], src: &[T], g: usize, h: usize, tokens: usize, hd: usize, dim: usize) {
    for n in 0..tokens {
        let row = (g * tokens + n) * dim + h * hd;
        dst[row..row + hd].copy_from_slice(&src[n * hd..(n + 1) * hd]);
    }
}

fn softmax_rows<T: Real>(s: &mut [T], n: usize) {
    for row in s.chunks_mut(n) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z = z + *v;
        }
        row.iter_mut().for_each(|v| *v = *v / z);
    }
}
