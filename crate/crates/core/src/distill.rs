//! Fine-grained distillation between the spiking student and its
//! full-precision twin, plus the classification loss it is added to.
//!
//! For every matched layer, head, sample and `p ∈ {q, k, v}` the distance is
//! `‖F(p_teacher) − F(p_student)‖_F` with `F(p) = p pᵀ / ‖p pᵀ‖_F`. Distances are
//! summed over `p`, layers and heads and averaged over the samples of a batch.

use crate::attention::AttentionTriple;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{gemm_nn, gemm_nt, Tensor};

pub const DEFAULT_LAMBDA: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FgdConfig {
    pub lambda: f64,
}

impl Default for FgdConfig {
    fn default() -> Self {
        Self { lambda: DEFAULT_LAMBDA }
    }
}

impl FgdConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::config(format!("distillation weight must be finite and ≥ 0, got {lambda}")));
        }
        Ok(Self { lambda })
    }
}

/// `F = p pᵀ / ‖p pᵀ‖_F` for `p: [N×D]`.
pub fn gram_normalize<T: Real>(p: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = p.dims2()?;
    Ok(gram_parts(p.data(), n, d)?.0)
}

/// The normalized Gram matrix and the Frobenius norm it was divided by.
fn gram_parts<T: Real>(p: &[T], n: usize, d: usize) -> Result<(Tensor<T>, T)> {
    let mut g = vec![T::zero(); n * n];
    gemm_nt(n, d, n, p, p, &mut g);
    let norm = g.iter().map(|&v| v * v).sum::<T>().sqrt();
    if !(norm > T::zero()) {
        return Err(Error::Degenerate("Gram matrix of an all-zero record".into()));
    }
    g.iter_mut().for_each(|v| *v = *v / norm);
    Ok((Tensor::new(vec![n, n], g)?, norm))
}

/// Gradient with respect to `p` of `<dF, F(p)>`.
fn gram_backward<T: Real>(p: &[T], n: usize, d: usize, f: &Tensor<T>, norm: T, df: &[T]) -> Vec<T> {
    let dot: T = df.iter().zip(f.data()).map(|(&a, &b)| a * b).sum();
    // dG = (dF − F·<dF, F>) / ‖G‖, then dp = (dG + dGᵀ) p
    let mut dg = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            let a = (df[i * n + j] - f.data()[i * n + j] * dot) / norm;
            let b = (df[j * n + i] - f.data()[j * n + i] * dot) / norm;
            dg[i * n + j] = a + b;
        }
    }
    let mut dp = vec![T::zero(); n * d];
    gemm_nn(n, n, d, &dg, p, &mut dp);
    dp
}

/// Frobenius distance between two already normalized Gram matrices.
pub fn gram_pair_distance<T: Real>(f_teacher: &Tensor<T>, f_student: &Tensor<T>) -> Result<T> {
    Ok(f_teacher.zip_map(f_student, |a, s| a - s)?.frobenius())
}

/// `‖F(a) − F(s)‖_F` for one pair of `[N×D]` records.
pub fn gram_distance<T: Real>(teacher: &Tensor<T>, student: &Tensor<T>) -> Result<T> {
    let fa = gram_normalize(teacher)?;
    let fs = gram_normalize(student)?;
    gram_pair_distance(&fa, &fs)
}

/// Distance and its gradient with respect to the student record. At zero
/// distance the (sub)gradient is taken as zero.
pub fn gram_distance_grad<T: Real>(teacher: &[T], student: &[T], n: usize, d: usize) -> Result<(T, Vec<T>)> {
    let (fa, _) = gram_parts(teacher, n, d)?;
    let (fs, norm) = gram_parts(student, n, d)?;
    let diff: Vec<T> = fs.data().iter().zip(fa.data()).map(|(&s, &a)| s - a).collect();
    let dist = diff.iter().map(|&v| v * v).sum::<T>().sqrt();
    if dist == T::zero() {
        return Ok((dist, vec![T::zero(); n * d]));
    }
    let df: Vec<T> = diff.iter().map(|&v| v / dist).collect();
    Ok((dist, gram_backward(student, n, d, &fs, norm, &df)))
}

fn check_pair<T: Real>(s: &AttentionTriple<T>, t: &AttentionTriple<T>, heads: usize, tokens: usize) -> Result<(usize, usize)> {
    for (a, b) in [(&s.q_mem, &t.q_mem), (&s.k_mem, &t.k_mem), (&s.v_mem, &t.v_mem)] {
        if a.shape() != b.shape() {
            return Err(Error::shape(format!("student record {:?} vs teacher {:?}", a.shape(), b.shape())));
        }
    }
    let (rows, dim) = s.q_mem.dims2()?;
    if heads == 0 || dim % heads != 0 || tokens == 0 || rows % tokens != 0 {
        return Err(Error::shape(format!("records {rows}×{dim} do not split into {heads} heads of {tokens} tokens")));
    }
    Ok((rows / tokens, dim / heads))
}

fn head_block<T: Real>(x: &Tensor<T>, g: usize, h: usize, tokens: usize, hd: usize) -> Vec<T> {
    let dim = x.shape()[1];
    let mut out = Vec::with_capacity(tokens * hd);
    for n in 0..tokens {
        let row = (g * tokens + n) * dim + h * hd;
        out.extend_from_slice(&x.data()[row..row + hd]);
    }
    out
}

/// Distillation loss over matched per-layer records.
pub fn fgd_loss<T: Real>(
    student: &[AttentionTriple<T>],
    teacher: &[AttentionTriple<T>],
    heads: usize,
    tokens: usize,
) -> Result<T> {
    Ok(fgd_backward(student, teacher, heads, tokens)?.0)
}

/// Loss and its gradient with respect to the student q/k/v membranes, one
/// `[q, k, v]` triple per layer. Teacher records receive nothing.
pub fn fgd_backward<T: Real>(
    student: &[AttentionTriple<T>],
    teacher: &[AttentionTriple<T>],
    heads: usize,
    tokens: usize,
) -> Result<(T, Vec<[Tensor<T>; 3]>)> {
    if student.len() != teacher.len() {
        return Err(Error::shape(format!(
            "{} student layers vs {} teacher layers",
            student.len(),
            teacher.len()
        )));
    }
    let mut total = T::zero();
    let mut grads = Vec::with_capacity(student.len());
    for (s, t) in student.iter().zip(teacher) {
        let (groups, hd) = check_pair(s, t, heads, tokens)?;
        let inv_groups = T::one() / T::c(groups as f64);
        let mut layer_grads = Vec::with_capacity(3);
        for (sp, tp) in [(&s.q_mem, &t.q_mem), (&s.k_mem, &t.k_mem), (&s.v_mem, &t.v_mem)] {
            let dim = sp.shape()[1];
            let mut g_full = vec![T::zero(); sp.len()];
            for g in 0..groups {
                for h in 0..heads {
                    let sb = head_block(sp, g, h, tokens, hd);
                    let tb = head_block(tp, g, h, tokens, hd);
                    let (dist, dp) = gram_distance_grad(&tb, &sb, tokens, hd)?;
                    total = total + dist * inv_groups;
                    for n in 0..tokens {
                        let row = (g * tokens + n) * dim + h * hd;
                        for c in 0..hd {
                            g_full[row + c] = dp[n * hd + c] * inv_groups;
                        }
                    }
                }
            }
            layer_grads.push(Tensor::new(sp.shape().to_vec(), g_full)?);
        }
        let [q, k, v]: [Tensor<T>; 3] = layer_grads.try_into().expect("three record kinds");
        grads.push([q, k, v]);
    }
    Ok((total, grads))
}

/// Mean cross-entropy against label-smoothed targets, and its logit gradient.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize], smoothing: f64) -> Result<(T, Tensor<T>)> {
    let (b, k) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::shape(format!("{} labels for {b} logit rows", labels.len())));
    }
    if !logits.all_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let eps = T::c(smoothing);
    let off = eps / T::c(k as f64);
    let on = T::one() - eps + off;
    let inv_b = T::one() / T::c(b as f64);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); b * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::input(format!("label {y} out of range for {k} classes")));
        }
        let row = &logits.data()[i * k..(i + 1) * k];
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&v| (v - m).exp()).sum();
        let lse = m + z.ln();
        for (j, &v) in row.iter().enumerate() {
            let target = if j == y { on } else { off };
            loss = loss - target * (v - lse);
            grad[i * k + j] = ((v - lse).exp() - target) * inv_b;
        }
    }
    Ok((loss * inv_b, Tensor::new(vec![b, k], grad)?))
}

/// `CE(logits, labels) + λ·fgd`, with logits already summed over time.
pub fn total_loss<T: Real>(logits: &Tensor<T>, labels: &[usize], fgd_value: T, smoothing: f64, cfg: FgdConfig) -> Result<T> {
    let (ce, _) = cross_entropy(logits, labels, smoothing)?;
    Ok(ce + T::c(cfg.lambda) * fgd_value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn triple(q: Tensor<f64>, k: Tensor<f64>, v: Tensor<f64>) -> AttentionTriple<f64> {
        AttentionTriple { q_mem: q, k_mem: k, v_mem: v, q_s: None, k_s: None, v_s: None }
    }

    fn randn(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.normal())
    }

    #[test]
    fn orthonormal_rows() {
        let f = gram_normalize(&Tensor::<f64>::eye(2)).unwrap();
        let s = 0.5f64.sqrt();
        assert!(f.data().iter().zip([s, 0.0, 0.0, s]).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn single_row_is_one() {
        let p = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        assert_eq!(gram_normalize(&p).unwrap().data(), &[1.0]);
    }

    #[test]
    fn zero_record_is_degenerate() {
        assert!(matches!(gram_normalize(&Tensor::<f64>::zeros(&[2, 3])), Err(Error::Degenerate(_))));
    }

    #[test]
    fn disjoint_supports_give_one() {
        let fa = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let fs = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        assert_eq!(gram_pair_distance(&fa, &fs).unwrap(), 1.0);
    }

    #[test]
    fn loss_vanishes_at_equality_and_scale() {
        let mut rng = Rng::new(1);
        let t = triple(randn(&[8, 6], &mut rng), randn(&[8, 6], &mut rng), randn(&[8, 6], &mut rng));
        assert_eq!(fgd_loss(std::slice::from_ref(&t), std::slice::from_ref(&t), 2, 4).unwrap(), 0.0);
        let s = triple(t.q_mem.scale(3.0), t.k_mem.scale(0.2), t.v_mem.scale(7.0));
        assert!(fgd_loss(&[s], &[t], 2, 4).unwrap() < 1e-12);
    }

    #[test]
    fn zero_gradient_at_minimum() {
        let mut rng = Rng::new(2);
        let t = triple(randn(&[4, 4], &mut rng), randn(&[4, 4], &mut rng), randn(&[4, 4], &mut rng));
        let (_, g) = fgd_backward(std::slice::from_ref(&t), std::slice::from_ref(&t), 1, 4).unwrap();
        assert!(g[0].iter().all(|x| x.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = Rng::new(3);
        for _ in 0..20 {
            let (n, d) = (3, 4);
            let a = randn(&[n, d], &mut rng);
            let s = randn(&[n, d], &mut rng);
            let (_, g) = gram_distance_grad(a.data(), s.data(), n, d).unwrap();
            let h = 1e-6;
            for i in 0..n * d {
                let (mut sp, mut sm) = (s.clone(), s.clone());
                sp.data_mut()[i] += h;
                sm.data_mut()[i] -= h;
                let fd = (gram_distance(&a, &sp).unwrap() - gram_distance(&a, &sm).unwrap()) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-4 * g[i].abs().max(1e-3), "{fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn layer_gradient_matches_central_differences() {
        let mut rng = Rng::new(4);
        let t = triple(randn(&[8, 6], &mut rng), randn(&[8, 6], &mut rng), randn(&[8, 6], &mut rng));
        let s = triple(randn(&[8, 6], &mut rng), randn(&[8, 6], &mut rng), randn(&[8, 6], &mut rng));
        let (_, g) = fgd_backward(std::slice::from_ref(&s), std::slice::from_ref(&t), 2, 4).unwrap();
        let h = 1e-6;
        for i in 0..48 {
            let (mut sp, mut sm) = (s.clone(), s.clone());
            sp.k_mem.data_mut()[i] += h;
            sm.k_mem.data_mut()[i] -= h;
            let fd = (fgd_loss(&[sp], std::slice::from_ref(&t), 2, 4).unwrap() - fgd_loss(&[sm], std::slice::from_ref(&t), 2, 4).unwrap()) / (2.0 * h);
            let an = g[0][1].data()[i];
            assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-3));
        }
    }

    #[test]
    fn mismatched_records_are_rejected() {
        let a = triple(Tensor::zeros(&[4, 4]), Tensor::zeros(&[4, 4]), Tensor::zeros(&[4, 4]));
        let b = triple(Tensor::zeros(&[4, 2]), Tensor::zeros(&[4, 4]), Tensor::zeros(&[4, 4]));
        assert!(matches!(fgd_loss(&[a], &[b], 1, 4), Err(Error::Shape(_))));
    }

    #[test]
    fn cross_entropy_cases() {
        let logits = Tensor::<f64>::zeros(&[3, 10]);
        let (ce, _) = cross_entropy(&logits, &[0, 5, 9], 0.1).unwrap();
        assert!((ce - 10f64.ln()).abs() < 1e-12);
        assert!((total_loss(&logits, &[1, 2, 3], 0.7, 0.1, FgdConfig::new(0.0).unwrap()).unwrap() - 10f64.ln()).abs() < 1e-12);
        // λ = 2, CE = 0.5, FGD = 0.25 → 1.0
        assert_eq!(0.5 + DEFAULT_LAMBDA * 0.25, 1.0);
    }

    #[test]
    fn cross_entropy_gradient() {
        let mut rng = Rng::new(5);
        let logits = randn(&[4, 5], &mut rng);
        let labels = [0, 3, 4, 1];
        let (_, g) = cross_entropy(&logits, &labels, 0.1).unwrap();
        let h = 1e-6;
        for i in 0..20 {
            let (mut lp, mut lm) = (logits.clone(), logits.clone());
            lp.data_mut()[i] += h;
            lm.data_mut()[i] -= h;
            let fd = (cross_entropy(&lp, &labels, 0.1).unwrap().0 - cross_entropy(&lm, &labels, 0.1).unwrap().0) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn negative_lambda_rejected() {
        assert!(FgdConfig::new(-1.0).is_err());
        assert!(FgdConfig::new(f64::NAN).is_err());
    }
}
