//! Pre-training objectives. Each returns the scalar loss together with the
//! gradient with respect to the non-detached argument.

use super::queue::NegativeQueue;
use super::tensor::Tensor;
use crate::error::{invalid, shape_err, Result};

/// Allowed deviation of `‖v‖₂` from 1 for inputs that must be unit vectors.
pub const UNIT_NORM_TOL: f64 = 1e-4;
/// Added to channel variances before the square root in [`style_loss`].
pub const STYLE_EPS: f64 = 1e-5;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|x| (x - lse).exp()).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|x| x - lse).collect()
}

fn check_unit(name: &str, v: &[f64]) -> Result<()> {
    let n = l2_norm(v);
    if (n - 1.0).abs() > UNIT_NORM_TOL {
        return Err(invalid!("{name} must be unit-norm, got ‖·‖ = {n}"));
    }
    Ok(())
}

/// Contrastive loss of query `q` against its positive key and every queued
/// negative. Keys are treated as constants; the gradient is `∂L/∂q`.
pub fn info_nce(q: &[f64], k_pos: &[f64], queue: &NegativeQueue, tau: f64) -> Result<(f64, Vec<f64>)> {
    if queue.is_empty() {
        return Err(invalid!("info_nce: negative queue is empty"));
    }
    if q.len() != k_pos.len() || q.len() != queue.dim() {
        return Err(shape_err!(
            "info_nce: q has {} dims, k_pos {}, queue {}",
            q.len(),
            k_pos.len(),
            queue.dim()
        ));
    }
    if !(tau > 0.0) {
        return Err(invalid!("info_nce: temperature must be positive, got {tau}"));
    }
    check_unit("q", q)?;
    check_unit("k_pos", k_pos)?;

    let mut logits = Vec::with_capacity(queue.len() + 1);
    logits.push(dot(q, k_pos) / tau);
    logits.extend(queue.iter().map(|k| dot(q, k) / tau));
    let loss = log_sum_exp(&logits) - logits[0];
    let p = softmax(&logits);

    let mut grad: Vec<f64> = k_pos.iter().map(|k| (p[0] - 1.0) * k).collect();
    for (pj, k) in p[1..].iter().zip(queue.iter()) {
        for (g, kv) in grad.iter_mut().zip(k) {
            *g += pj * kv;
        }
    }
    grad.iter_mut().for_each(|g| *g /= tau);
    Ok((loss, grad))
}

fn check_pairs(name: &str, a: &[Tensor], b: &[Tensor]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(shape_err!("{name}: {} maps vs {}", a.len(), b.len()));
    }
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if x.shape() != y.shape() {
            return Err(shape_err!("{name}: map {i} shapes {:?} vs {:?}", x.shape(), y.shape()));
        }
    }
    Ok(())
}

/// Mean absolute difference per map, averaged over maps. The gradient is
/// with respect to `student`; at exact ties the subgradient 0 is used.
pub fn content_loss(student: &[Tensor], teacher: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
    check_pairs("content_loss", student, teacher)?;
    let maps = student.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(student.len());
    for (s, t) in student.iter().zip(teacher) {
        let n = s.len().max(1) as f64;
        let mut g = Vec::with_capacity(s.len());
        let mut sum = 0.0;
        for (a, b) in s.data().iter().zip(t.data()) {
            let d = a - b;
            sum += d.abs();
            let sign = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            g.push(sign / (n * maps));
        }
        loss += sum / n;
        grads.push(Tensor::new(s.shape().to_vec(), g)?);
    }
    Ok((loss / maps, grads))
}

/// Per-channel mean and standard deviation of one `[C, ...]` item.
fn channel_stats(item: &[f64], channels: usize) -> Vec<(f64, f64)> {
    let inner = item.len() / channels;
    item.chunks_exact(inner)
        .map(|ch| {
            let mu = ch.iter().sum::<f64>() / inner as f64;
            let var = ch.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / inner as f64;
            (mu, (var + STYLE_EPS).sqrt())
        })
        .collect()
}

/// Channel-statistics style distance between batched maps `[N, C, ...]`:
/// the sum over maps of the batch mean of `Σ_c (Δμ_c)² + (Δσ_c)²`.
/// The gradient is with respect to `a`.
pub fn style_loss(a: &[Tensor], b: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
    check_pairs("style_loss", a, b)?;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(a.len());
    for (x, y) in a.iter().zip(b) {
        if x.shape().len() < 3 {
            return Err(shape_err!("style_loss: map shape {:?} has no spatial axes", x.shape()));
        }
        let (n, c) = (x.dim(0), x.dim(1));
        let inner: usize = x.shape()[2..].iter().product();
        let mut g = vec![0.0; x.len()];
        for i in 0..n {
            let sa = channel_stats(x.row(i), c);
            let sb = channel_stats(y.row(i), c);
            for ci in 0..c {
                let ((mu_a, sd_a), (mu_b, sd_b)) = (sa[ci], sb[ci]);
                loss += ((mu_a - mu_b).powi(2) + (sd_a - sd_b).powi(2)) / n as f64;
                let dmu = 2.0 * (mu_a - mu_b) / n as f64;
                let dsd = 2.0 * (sd_a - sd_b) / n as f64;
                let base = (i * c + ci) * inner;
                for j in base..base + inner {
                    let xv = x.data()[j];
                    g[j] = (dmu + dsd * (xv - mu_a) / sd_a) / inner as f64;
                }
            }
        }
        grads.push(Tensor::new(x.shape().to_vec(), g)?);
    }
    Ok((loss, grads))
}

/// `−log softmax(logits)[label]` and its gradient `softmax − onehot`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(invalid!("cross_entropy: label {label} out of range for {} classes", logits.len()));
    }
    let ls = log_softmax(logits);
    let mut grad: Vec<f64> = ls.iter().map(|v| v.exp()).collect();
    grad[label] -= 1.0;
    Ok((-ls[label], grad))
}

/// `KL(softmax(t/T) ‖ softmax(s/T))`, with the gradient taken with respect
/// to the student logits `s`.
pub fn kl_distill(teacher: &[f64], student: &[f64], temperature: f64) -> Result<(f64, Vec<f64>)> {
    if teacher.len() != student.len() || teacher.is_empty() {
        return Err(shape_err!("kl_distill: {} teacher vs {} student logits", teacher.len(), student.len()));
    }
    if !(temperature > 0.0) {
        return Err(invalid!("kl_distill: temperature must be positive, got {temperature}"));
    }
    let t: Vec<f64> = teacher.iter().map(|v| v / temperature).collect();
    let s: Vec<f64> = student.iter().map(|v| v / temperature).collect();
    let (lp, lq) = (log_softmax(&t), log_softmax(&s));
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(s.len());
    for (a, b) in lp.iter().zip(&lq) {
        let p = a.exp();
        if p > 0.0 {
            loss += p * (a - b);
        }
        grad.push((b.exp() - p) / temperature);
    }
    Ok((loss.max(0.0), grad))
}
