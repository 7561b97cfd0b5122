//! Minimal reverse-mode differentiation over dense tensors.
//!
//! Each layer records its output plus whatever it needs for the backward
//! pass. [`Tape::backward`] walks the nodes in reverse creation order and
//! applies the hand-written rule of each op. Loss functions live outside the
//! tape and hand their gradients in as seeds.

use super::tensor::{gemm, Tensor};
use crate::error::{shape_err, Result};

pub const BN_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        // im2col buffers, one per batch item.
        cols: Vec<Vec<f64>>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        // Batch statistics feed back into the input gradient only in training
        // mode.
        train: bool,
    },
    Relu {
        x: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Per-channel statistics of one training-mode batch norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; `None` where nothing flowed.
pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0[v.0].take()
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `[N, C, H, W] ⊛ [O, C, k, k] → [N, O, Ho, Wo]` with zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || stride == 0 {
            return Err(shape_err!("conv2d: input {xs:?}, weight {ws:?}"));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err!("conv2d: kernel {k} larger than padded input {h}x{wd}"));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [o] {
                return Err(shape_err!("conv2d: bias {:?} for {o} outputs", self.value(b).shape()));
            }
        }
        let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad));
        let (ckk, hw) = (c * k * k, ho * wo);
        let mut out = vec![0.0; n * o * hw];
        let mut cols = Vec::with_capacity(n);
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for ni in 0..n {
                let img = &xv[ni * c * h * wd..(ni + 1) * c * h * wd];
                let mut col = vec![0.0; ckk * hw];
                for ci in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let r = (ci * k + ky) * k + kx;
                            let dst = &mut col[r * hw..(r + 1) * hw];
                            for oy in 0..ho {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let src = &img[(ci * h + iy as usize) * wd..][..wd];
                                for ox in 0..wo {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix >= 0 && ix < wd as isize {
                                        dst[oy * wo + ox] = src[ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
                let dst = &mut out[ni * o * hw..(ni + 1) * o * hw];
                gemm(o, ckk, hw, wv, false, &col, false, dst, false);
                if let Some(b) = b {
                    for (oi, &bv) in self.value(b).data().iter().enumerate() {
                        dst[oi * hw..(oi + 1) * hw].iter_mut().for_each(|v| *v += bv);
                    }
                }
                cols.push(col);
            }
        }
        let value = Tensor::new(vec![n, o, ho, wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
        ))
    }

    /// Batch norm over all axes except axis 1. In training mode the batch's
    /// own statistics are used and returned; otherwise `running` supplies
    /// them.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 {
            return Err(shape_err!("batch_norm: input {shape:?}"));
        }
        let c = shape[1];
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(shape_err!("batch_norm: affine params for {c} channels"));
        }
        let n = shape[0];
        let inner: usize = shape[2..].iter().product();
        let count = (n * inner) as f64;
        let xv = self.value(x).data();
        let (mean, var_b, stats) = match running {
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(shape_err!("batch_norm: running stats for {c} channels"));
                }
                (rm.to_vec(), rv.to_vec(), None)
            }
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let s = &xv[(ni * c + ci) * inner..][..inner];
                        mean[ci] += s.iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for ni in 0..n {
                    for ci in 0..c {
                        let s = &xv[(ni * c + ci) * inner..][..inner];
                        var[ci] += s.iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>();
                    }
                }
                let biased: Vec<f64> = var.iter().map(|v| v / count).collect();
                let unbiased = var
                    .iter()
                    .map(|v| if count > 1.0 { v / (count - 1.0) } else { *v })
                    .collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, biased, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var_b.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * inner;
                for i in base..base + inner {
                    let h = (xv[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = h;
                    out[i] = g[ci] * h + bt[ci];
                }
            }
        }
        let train = stats.is_some();
        let value = Tensor::new(shape, out)?;
        let var = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        );
        Ok((var, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a.max(0.0)).collect())
            .expect("same shape");
        self.push(out, Op::Relu { x })
    }

    /// `[N, C, ...] → [N, C]` mean over the trailing axes.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.shape();
        if s.len() < 3 {
            return Err(shape_err!("global_avg_pool: input {s:?}"));
        }
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let data = v
            .data()
            .chunks_exact(inner)
            .map(|ch| ch.iter().sum::<f64>() / inner as f64)
            .collect();
        let out = Tensor::new(vec![n, c], data)?;
        Ok(self.push(out, Op::GlobalAvgPool { x }))
    }

    /// `[N, I] · [O, I]ᵀ + [O] → [N, O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(b).shape(),
        );
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || bs != [ws[0]] {
            return Err(shape_err!("linear: input {xs:?}, weight {ws:?}, bias {bs:?}"));
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; n * o];
        gemm(n, i, o, self.value(x).data(), false, self.value(w).data(), true, &mut out, false);
        let bv = self.value(b).data();
        for row in out.chunks_exact_mut(o) {
            for (v, bb) in row.iter_mut().zip(bv) {
                *v += bb;
            }
        }
        let out = Tensor::new(vec![n, o], out)?;
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    /// Row-wise `x / ‖x‖₂` of an `[N, D]` tensor.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.shape().len() != 2 {
            return Err(shape_err!("l2_normalize: input {:?}", v.shape()));
        }
        let d = v.shape()[1];
        let mut norms = Vec::with_capacity(v.shape()[0]);
        let mut out = Vec::with_capacity(v.len());
        for row in v.data().chunks_exact(d) {
            let nrm = row.iter().map(|a| a * a).sum::<f64>().sqrt().max(NORM_FLOOR);
            norms.push(nrm);
            out.extend(row.iter().map(|a| a / nrm));
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(out, Op::L2Normalize { x, norms }))
    }

    /// Propagates the seed gradients back to every node that influences them.
    pub fn backward(&self, seeds: Vec<(Var, Tensor)>) -> Result<Grads> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            if g.shape() != self.value(v).shape() {
                return Err(shape_err!(
                    "seed gradient {:?} for value {:?}",
                    g.shape(),
                    self.value(v).shape()
                ));
            }
            accumulate(&mut grads, v, g);
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Ok(Grads(grads))
    }

    fn backward_node(&self, idx: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let data = dy
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(&g, &a)| if a > 0.0 { g } else { 0.0 })
                    .collect();
                accumulate(grads, *x, Tensor::new(dy.shape().to_vec(), data).expect("shape"));
            }
            Op::GlobalAvgPool { x } => {
                let xs = self.value(*x).shape();
                let inner: usize = xs[2..].iter().product();
                let mut data = Vec::with_capacity(inner * dy.len());
                for &g in dy.data() {
                    data.extend(std::iter::repeat_n(g / inner as f64, inner));
                }
                accumulate(grads, *x, Tensor::new(xs.to_vec(), data).expect("shape"));
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, i, o) = (xv.dim(0), xv.dim(1), wv.dim(0));
                let mut dx = vec![0.0; n * i];
                gemm(n, o, i, dy.data(), false, wv.data(), false, &mut dx, false);
                let mut dw = vec![0.0; o * i];
                gemm(o, n, i, dy.data(), true, xv.data(), false, &mut dw, false);
                let mut db = vec![0.0; o];
                for row in dy.data().chunks_exact(o) {
                    for (a, g) in db.iter_mut().zip(row) {
                        *a += g;
                    }
                }
                accumulate(grads, *x, Tensor::new(vec![n, i], dx).expect("shape"));
                accumulate(grads, *w, Tensor::new(vec![o, i], dw).expect("shape"));
                accumulate(grads, *b, Tensor::new(vec![o], db).expect("shape"));
            }
            Op::L2Normalize { x, norms } => {
                let y = node.value.data();
                let d = node.value.dim(1);
                let mut dx = Vec::with_capacity(y.len());
                for ((yr, gr), nrm) in y.chunks_exact(d).zip(dy.data().chunks_exact(d)).zip(norms) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(a, g)| (g - a * dot) / nrm));
                }
                accumulate(grads, *x, Tensor::new(node.value.shape().to_vec(), dx).expect("shape"));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let shape = node.value.shape();
                let (n, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let count = (n * inner) as f64;
                let g = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * inner;
                        for i in base..base + inner {
                            dgamma[ci] += dy.data()[i] * xhat[i];
                            dbeta[ci] += dy.data()[i];
                        }
                    }
                }
                let mut dx = vec![0.0; xhat.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * inner;
                        for i in base..base + inner {
                            let dxhat = dy.data()[i] * g[ci];
                            dx[i] = if *train {
                                // d/dx of (x − μ_B)/σ_B with μ_B, σ_B functions of x.
                                inv_std[ci] / count
                                    * (count * dxhat - g[ci] * dbeta[ci] - xhat[i] * g[ci] * dgamma[ci])
                            } else {
                                dxhat * inv_std[ci]
                            };
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(shape.to_vec(), dx).expect("shape"));
                accumulate(grads, *gamma, Tensor::new(vec![c], dgamma).expect("shape"));
                accumulate(grads, *beta, Tensor::new(vec![c], dbeta).expect("shape"));
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let xs = self.value(*x).shape();
                let ws = self.value(*w).shape();
                let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (o, k) = (ws[0], ws[2]);
                let (ho, wo) = (node.value.dim(2), node.value.dim(3));
                let (ckk, hw) = (c * k * k, ho * wo);
                let wv = self.value(*w).data();
                let mut dw = vec![0.0; o * ckk];
                let mut db = vec![0.0; o];
                let mut dx = vec![0.0; n * c * h * wd];
                let mut dcol = vec![0.0; ckk * hw];
                for ni in 0..n {
                    let g = &dy.data()[ni * o * hw..(ni + 1) * o * hw];
                    gemm(o, hw, ckk, g, false, &cols[ni], true, &mut dw, true);
                    for (oi, acc) in db.iter_mut().enumerate() {
                        *acc += g[oi * hw..(oi + 1) * hw].iter().sum::<f64>();
                    }
                    gemm(ckk, o, hw, wv, true, g, false, &mut dcol, false);
                    let img = &mut dx[ni * c * h * wd..(ni + 1) * c * h * wd];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let r = (ci * k + ky) * k + kx;
                                let src = &dcol[r * hw..(r + 1) * hw];
                                for oy in 0..ho {
                                    let iy = (oy * stride + ky) as isize - *pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let row = &mut img[(ci * h + iy as usize) * wd..][..wd];
                                    for ox in 0..wo {
                                        let ix = (ox * stride + kx) as isize - *pad as isize;
                                        if ix >= 0 && ix < wd as isize {
                                            row[ix as usize] += src[oy * wo + ox];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(xs.to_vec(), dx).expect("shape"));
                accumulate(grads, *w, Tensor::new(ws.to_vec(), dw).expect("shape"));
                if let Some(b) = b {
                    accumulate(grads, *b, Tensor::new(vec![o], db).expect("shape"));
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
