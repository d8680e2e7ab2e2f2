//! Surrogate-gradient training of the student, teacher pre-training with
//! validation early stopping, and evaluation.

use std::io::Write;

use serde::Serialize;

use crate::data::Dataset;
use crate::distill::{cross_entropy, fgd_backward};
use crate::error::{Error, Result};
use crate::model::config::TrainConfig;
use crate::model::optim::Optimizer;
use crate::model::{FiringStats, Model};
use crate::param::Mode;
use crate::rng::Rng;
use crate::ste::ClipRound;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub ce: f64,
    pub fgd: f64,
    pub total: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

pub fn write_metrics_header(out: &mut dyn Write) -> Result<()> {
    writeln!(out, "epoch,ce,fgd,total,train_acc,test_acc")?;
    Ok(())
}

pub fn write_metrics_row(out: &mut dyn Write, m: &EpochMetrics) -> Result<()> {
    writeln!(
        out,
        "{},{:.6},{:.6},{:.6},{:.4},{:.4}",
        m.epoch, m.ce, m.fgd, m.total, m.train_acc, m.test_acc
    )?;
    Ok(())
}

/// Outcome of teacher pre-training.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TeacherReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub val_acc: f64,
}

pub fn correct(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = &logits.data()[i * k..(i + 1) * k];
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
            best == y
        })
        .count()
}

fn batches(n: usize, size: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..n.div_ceil(size)).map(move |i| i * size..((i + 1) * size).min(n))
}

/// Accuracy and mean loss on the training path with frozen statistics.
pub fn evaluate(model: &mut Model<f32>, data: &Dataset, batch: usize, smoothing: f64) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::input("empty evaluation set"));
    }
    let (mut hits, mut loss) = (0, 0.0);
    let idx: Vec<usize> = (0..data.len()).collect();
    for r in batches(data.len(), batch) {
        let (x, y) = data.batch(&idx[r.clone()]);
        let out = model.forward(&x, Mode::Eval, &mut ClipRound::exact())?;
        hits += correct(&out.logits, &y);
        loss += cross_entropy(&out.logits, &y, smoothing)?.0 as f64 * r.len() as f64;
    }
    Ok((hits as f64 / data.len() as f64, loss / data.len() as f64))
}

/// Accuracy of the deployed spike-count path, with firing statistics.
pub fn evaluate_infer(model: &Model<f32>, data: &Dataset, batch: usize) -> Result<(f64, FiringStats)> {
    if data.is_empty() {
        return Err(Error::input("empty evaluation set"));
    }
    let mut hits = 0;
    let mut firing = FiringStats::default();
    let idx: Vec<usize> = (0..data.len()).collect();
    for r in batches(data.len(), batch) {
        let (x, y) = data.batch(&idx[r]);
        let out = model.forward_infer(&x)?;
        hits += correct(&out.logits, &y);
        firing.merge(&out.firing)?;
    }
    Ok((hits as f64 / data.len() as f64, firing))
}

fn diagnostics(model: &mut Model<f32>) -> String {
    let mut lines = Vec::new();
    model.visit_params(&mut |name, p| {
        lines.push(format!(
            "{name}: |w|max={:.4e} |g|max={:.4e} finite={}",
            p.value.max_abs(),
            p.grad.max_abs(),
            p.value.all_finite() && p.grad.all_finite()
        ));
    });
    lines.join("\n")
}

/// Train the student for `cfg.epochs` epochs. With a teacher and `λ > 0`
/// the objective is `CE + λ·FGD`; otherwise it is cross-entropy alone.
pub fn train(
    student: &mut Model<f32>,
    mut teacher: Option<&mut Model<f32>>,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochMetrics) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    if train_set.is_empty() {
        return Err(Error::input("empty training set"));
    }
    let lambda = cfg.fgd.lambda;
    let distill = lambda > 0.0 && teacher.is_some();
    if distill && student.config.t_train > 1 {
        return Err(Error::config("distillation needs single-step training (time.train = 1)"));
    }
    let heads = student.config.heads;
    let tokens = student.tokens();
    let per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let mut opt = Optimizer::new(cfg, per_epoch * cfg.epochs);
    let mut rng = Rng::new(cfg.seed.wrapping_add(0x5eed));
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut idx: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut idx);
        let (mut ce_sum, mut fgd_sum, mut hits) = (0.0, 0.0, 0);
        for r in batches(idx.len(), cfg.batch_size) {
            let (x, y) = train_set.batch(&idx[r.clone()]);
            student.zero_grad();
            let out = student.forward(&x, Mode::Train, &mut ClipRound::exact())?;
            let (ce, dlogits) = match cross_entropy(&out.logits, &y, cfg.smoothing) {
                Ok(v) => v,
                Err(Error::Numeric(m)) => {
                    return Err(Error::Training {
                        message: format!("epoch {epoch}: {m}"),
                        diagnostics: diagnostics(student),
                    })
                }
                Err(e) => return Err(e),
            };
            let mut fgd = 0.0f32;
            let mut d_mem = None;
            if distill {
                let t = teacher.as_deref_mut().expect("checked above");
                let t_out = t.forward(&x, Mode::Eval, &mut ClipRound::exact())?;
                let (f, mut grads) = fgd_backward(&out.records, &t_out.records, heads, tokens)?;
                for g in grads.iter_mut().flatten() {
                    *g = g.scale(lambda as f32);
                }
                fgd = f;
                d_mem = Some(grads);
            }
            let total = ce as f64 + lambda * fgd as f64;
            if !total.is_finite() {
                return Err(Error::Training {
                    message: format!("epoch {epoch}: loss became {total}"),
                    diagnostics: diagnostics(student),
                });
            }
            student.backward(&out.trace, &dlogits, d_mem.as_deref())?;
            student.visit_params(&mut |_, p| opt.update(p));
            opt.advance();
            ce_sum += ce as f64 * r.len() as f64;
            fgd_sum += fgd as f64 * r.len() as f64;
            hits += correct(&out.logits, &y);
        }
        let n = train_set.len() as f64;
        let (test_acc, _) = evaluate(student, test_set, cfg.eval_batch, cfg.smoothing)?;
        let m = EpochMetrics {
            epoch,
            ce: ce_sum / n,
            fgd: fgd_sum / n,
            total: (ce_sum + lambda * fgd_sum) / n,
            train_acc: hits as f64 / n,
            test_acc,
        };
        on_epoch(&m)?;
        metrics.push(m);
    }
    Ok(metrics)
}

/// Train the full-precision teacher on cross-entropy, holding out
/// `val_fraction` of the data and keeping the weights of the epoch with the
/// lowest validation loss. Stops after `teacher_patience` epochs without
/// improvement.
pub fn train_teacher(teacher: &mut Model<f32>, data: &Dataset, cfg: &TrainConfig) -> Result<TeacherReport> {
    let mut rng = Rng::new(cfg.seed.wrapping_add(0x7eac));
    let (fit, val) = data.split(cfg.val_fraction, &mut rng);
    if val.is_empty() {
        return Err(Error::config("teacher.val_fraction leaves no validation samples"));
    }
    let per_epoch = fit.len().div_ceil(cfg.batch_size);
    let mut best: Option<(f64, usize, Model<f32>, f64)> = None;
    let mut epochs_run = 0;
    // one cosine cycle over the maximum budget
    let mut opt = Optimizer::new(cfg, per_epoch * cfg.teacher_epochs);
    let mut idx: Vec<usize> = (0..fit.len()).collect();
    for epoch in 1..=cfg.teacher_epochs {
        epochs_run = epoch;
        rng.shuffle(&mut idx);
        for r in batches(idx.len(), cfg.batch_size) {
            let (x, y) = fit.batch(&idx[r]);
            teacher.zero_grad();
            let out = teacher.forward(&x, Mode::Train, &mut ClipRound::exact())?;
            let (ce, dlogits) = cross_entropy(&out.logits, &y, cfg.smoothing)?;
            if !ce.is_finite() {
                return Err(Error::Training {
                    message: format!("teacher epoch {epoch}: loss became {ce}"),
                    diagnostics: diagnostics(teacher),
                });
            }
            teacher.backward(&out.trace, &dlogits, None)?;
            teacher.visit_params(&mut |_, p| opt.update(p));
            opt.advance();
        }
        let (acc, loss) = evaluate(teacher, &val, cfg.eval_batch, cfg.smoothing)?;
        match &best {
            Some((b, best_epoch, _, _)) if loss >= *b => {
                if epoch - best_epoch >= cfg.teacher_patience {
                    break;
                }
            }
            _ => best = Some((loss, epoch, teacher.clone(), acc)),
        }
    }
    let (best_val_loss, best_epoch, model, val_acc) = best.expect("at least one epoch");
    *teacher = model;
    Ok(TeacherReport {
        epochs_run,
        best_epoch,
        best_val_loss,
        val_acc,
    })
}
