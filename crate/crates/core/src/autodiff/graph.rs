//! Tape-based reverse-mode differentiation.
//!
//! Every op appends one node holding its output value and whatever context
//! its backward rule needs. Nodes are only ever appended, so the tape is
//! topologically ordered by construction and `backward` walks it in reverse.

use crate::autodiff::kernels::{self, ConvGeometry};
use crate::error::{ensure, Result, SfeError};
use crate::tensor::{Scalar, Tensor};

use super::param::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        /// Train mode: statistics depend on x, so the full BN gradient applies.
        batch_stats: bool,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    ChannelMask {
        x: Var,
        keep: Vec<bool>,
    },
    ExpandBatch {
        x: Var,
        keeps: Vec<Vec<bool>>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    KlDiv {
        logq: Var,
        p: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics produced by a train-mode normalization.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    /// Persistent gradient buffers of leaves; accumulated across `backward` calls.
    leaf_grads: Vec<Option<Vec<T>>>,
    bindings: Vec<(ParamId, Var)>,
    conv_macs: u64,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn finite<T: Scalar>(t: Tensor<T>, op: &str) -> Result<Tensor<T>> {
    if t.all_finite() {
        Ok(t)
    } else {
        Err(SfeError::numeric(format!("{op} produced a non-finite value")))
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            bindings: Vec::new(),
            conv_macs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates executed by forward convolutions on this tape.
    pub fn conv_macs(&self) -> u64 {
        self.conv_macs
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.leaf_grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).unwrap())
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Bind a stored parameter as a trainable leaf (once per tape).
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.bindings.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), p.trainable);
        self.bindings.push((id, v));
        v
    }

    /// Add the gradients of bound parameters into the store's buffers.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        for &(id, v) in &self.bindings {
            if let Some(g) = &self.leaf_grads[v.0] {
                add_into(store.get_mut(id).grad.data_mut(), g);
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        ensure!(
            va.shape() == vb.shape(),
            SfeError::shape(format!("add {:?} + {:?}", va.shape(), vb.shape()))
        );
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = finite(Tensor::new(va.shape().to_vec(), data)?, "add")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        ensure!(
            va.shape() == vb.shape(),
            SfeError::shape(format!("mul {:?} * {:?}", va.shape(), vb.shape()))
        );
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = finite(Tensor::new(va.shape().to_vec(), data)?, "mul")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = finite(self.value(a).map(|v| v * s), "scale")?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Scale(a, s), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = finite(Tensor::scalar(self.value(a).sum()), "sum")?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        ensure!(!v.is_empty(), SfeError::shape("mean of an empty tensor"));
        let out = Tensor::scalar(v.sum() / T::from_f64(v.len() as f64));
        let out = finite(out, "mean")?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Mean(a), rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(a);
        Ok(self.push(out, Op::Relu(a), rg))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let geom = ConvGeometry::new(self.value(x).shape(), self.value(w).shape(), stride, pad)?;
        if let Some(b) = b {
            ensure!(
                self.value(b).shape() == [geom.out_channels],
                SfeError::shape(format!(
                    "conv2d bias {:?} for {} output channels",
                    self.value(b).shape(),
                    geom.out_channels
                ))
            );
        }
        let data = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        self.conv_macs += (geom.batch
            * geom.out_channels
            * geom.out_h()
            * geom.out_w()
            * geom.in_channels
            * geom.kernel_h
            * geom.kernel_w) as u64;
        let out = Tensor::new(
            vec![geom.batch, geom.out_channels, geom.out_h(), geom.out_w()],
            data,
        )?;
        let out = finite(out, "conv2d")?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Train-mode normalization with batch statistics. Returns the output and
    /// the statistics so the caller can update its running averages.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats<T>)> {
        let (b, c, h, w) = self.value(x).dims4()?;
        ensure!(b > 0, SfeError::shape("batch norm over an empty batch"));
        let (mean, var) = kernels::channel_stats(self.value(x).data(), b, c, h * w);
        let out = self.normalize(x, gamma, beta, &mean, &var, eps, true)?;
        Ok((
            out,
            BatchStats {
                mean,
                var,
                count: b * h * w,
            },
        ))
    }

    /// Eval-mode normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (b, _, _, _) = self.value(x).dims4()?;
        ensure!(b > 0, SfeError::shape("batch norm over an empty batch"));
        self.normalize(x, gamma, beta, mean, var, eps, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: f64,
        batch_stats: bool,
    ) -> Result<Var> {
        ensure!(eps > 0.0, SfeError::config("batch norm eps must be positive"));
        let (b, c, h, w) = self.value(x).dims4()?;
        let (g, bt) = (self.value(gamma), self.value(beta));
        ensure!(
            g.shape() == [c] && bt.shape() == [c] && mean.len() == c && var.len() == c,
            SfeError::shape(format!("batch norm parameters do not match {c} channels"))
        );
        let hw = h * w;
        let eps = T::from_f64(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xv = self.value(x).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for n in 0..b {
            for ch in 0..c {
                let off = (n * c + ch) * hw;
                let (mu, is, gm, bb) = (mean[ch], inv_std[ch], g.data()[ch], bt.data()[ch]);
                for i in off..off + hw {
                    let xh = (xv[i] - mu) * is;
                    xhat[i] = xh;
                    out[i] = gm * xh + bb;
                }
            }
        }
        let out = finite(Tensor::new(vec![b, c, h, w], out)?, "batch_norm")?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        ensure!(h * w > 0, SfeError::shape("global pooling over an empty plane"));
        let data = kernels::global_avg_pool(self.value(x).data(), b * c, h * w);
        let out = Tensor::new(vec![b, c], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::GlobalAvgPool(x), rg))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (rows, d_in) = self.value(x).dims2()?;
        let (d_out, wd) = self.value(w).dims2()?;
        ensure!(
            wd == d_in,
            SfeError::shape(format!("linear weight [{d_out}, {wd}] applied to [{rows}, {d_in}]"))
        );
        if let Some(b) = b {
            ensure!(
                self.value(b).shape() == [d_out],
                SfeError::shape(format!("linear bias {:?} for {d_out} outputs", self.value(b).shape()))
            );
        }
        let data = kernels::linear_forward(
            self.value(x).data(),
            rows,
            d_in,
            self.value(w).data(),
            d_out,
            b.map(|b| self.value(b).data()),
        );
        let out = finite(Tensor::new(vec![rows, d_out], data)?, "linear")?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    /// Zero every channel whose `keep` flag is false.
    pub fn channel_mask(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        ensure!(
            keep.len() == c,
            SfeError::shape(format!("mask over {} channels applied to {c}", keep.len()))
        );
        let mut out = self.value(x).clone();
        mask_planes(out.data_mut(), b, keep, h * w);
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::ChannelMask {
                x,
                keep: keep.to_vec(),
            },
            rg,
        ))
    }

    /// Stack `[x; x⊙M₁; …; x⊙M_k]` along the batch axis.
    pub fn expand_batch(&mut self, x: Var, keeps: &[Vec<bool>]) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        ensure!(
            keeps.iter().all(|k| k.len() == c),
            SfeError::shape(format!("expansion masks do not match {c} channels"))
        );
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(src.len() * (keeps.len() + 1));
        data.extend_from_slice(src);
        for keep in keeps {
            let start = data.len();
            data.extend_from_slice(src);
            mask_planes(&mut data[start..], b, keep, h * w);
        }
        let out = Tensor::new(vec![b * (keeps.len() + 1), c, h, w], data)?;
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::ExpandBatch {
                x,
                keeps: keeps.to_vec(),
            },
            rg,
        ))
    }

    /// Rows `[start, end)` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(x).slice_rows(start, end)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceRows { x, start }, rg))
    }

    pub fn softmax(&mut self, z: Var) -> Result<Var> {
        let out = kernels::softmax(self.value(z))?;
        let rg = self.rg(z);
        Ok(self.push(out, Op::Softmax(z), rg))
    }

    pub fn log_softmax(&mut self, z: Var) -> Result<Var> {
        let (_, d) = self.value(z).dims2()?;
        ensure!(d >= 1, SfeError::shape("log_softmax over an empty axis"));
        let zv = self.value(z);
        let lse = kernels::logsumexp_rows(zv.data(), d);
        let data = zv
            .data()
            .chunks_exact(d)
            .zip(&lse)
            .flat_map(|(row, &l)| row.iter().map(move |&v| v - l))
            .collect();
        let out = finite(Tensor::new(zv.shape().to_vec(), data)?, "log_softmax")?;
        let rg = self.rg(z);
        Ok(self.push(out, Op::LogSoftmax(z), rg))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, d) = self.value(logits).dims2()?;
        ensure!(d >= 1, SfeError::shape("cross entropy over an empty axis"));
        ensure!(
            targets.len() == rows,
            SfeError::shape(format!("{} targets for {rows} rows", targets.len()))
        );
        ensure!(rows > 0, SfeError::shape("cross entropy over zero rows"));
        if let Some(&t) = targets.iter().find(|&&t| t >= d) {
            return Err(SfeError::config(format!("target {t} out of range for {d} classes")));
        }
        let zv = self.value(logits).data();
        let lse = kernels::logsumexp_rows(zv, d);
        let total: T = (0..rows).map(|r| lse[r] - zv[r * d + targets[r]]).sum();
        let loss = total / T::from_f64(rows as f64);
        let probs = kernels::softmax_rows(zv, d);
        let out = finite(Tensor::scalar(loss), "cross_entropy")?;
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean over rows of `Σ p (log p − log q)`; `p` is a constant teacher.
    pub fn kl_div(&mut self, p: &Tensor<T>, logq: Var) -> Result<Var> {
        let (rows, d) = self.value(logq).dims2()?;
        ensure!(
            p.shape() == self.value(logq).shape(),
            SfeError::shape(format!(
                "kl_div teacher {:?} vs student {:?}",
                p.shape(),
                self.value(logq).shape()
            ))
        );
        ensure!(rows > 0, SfeError::shape("kl_div over zero rows"));
        kernels::check_distribution(p.data(), d, 1e-6)?;
        let lq = self.value(logq).data();
        let total: T = p
            .data()
            .iter()
            .zip(lq)
            .map(|(&pi, &l)| if pi > T::zero() { pi * (pi.ln() - l) } else { T::zero() })
            .sum();
        let out = finite(Tensor::scalar(total / T::from_f64(rows as f64)), "kl_div")?;
        let rg = self.rg(logq);
        Ok(self.push(
            out,
            Op::KlDiv {
                logq,
                p: p.data().to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls; intermediate gradients are rebuilt each time.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        ensure!(
            self.value(loss).len() == 1 && self.value(loss).rank() <= 1,
            SfeError::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ))
        );
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(SfeError::numeric(format!("non-finite gradient at node {i}")));
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => add_into(acc, &g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let want = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
            f(slot);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] = d[k] + g[k] * vb[k];
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] = d[k] + g[k] * va[k];
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |d| {
                d.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d + gv * *s)
            }),
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|d| *d = *d + g[0])),
            Op::Mean(a) => {
                let s = g[0] / T::from_f64(val(*a).len() as f64);
                acc(*a, &mut |d| d.iter_mut().for_each(|d| *d = *d + s));
            }
            Op::Relu(a) => {
                let xv = val(*a).data();
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        if xv[k] > T::zero() {
                            d[k] = d[k] + g[k];
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    geom,
                    val(*x).data(),
                    val(*w).data(),
                    g,
                    want(*x),
                    want(*w),
                    b.is_some_and(want),
                );
                if let Some(dx) = dx {
                    acc(*x, &mut |d| add_into(d, &dx));
                }
                if let Some(dw) = dw {
                    acc(*w, &mut |d| add_into(d, &dw));
                }
                if let (Some(b), Some(db)) = (b, db) {
                    acc(*b, &mut |d| add_into(d, &db));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (nb, c, h, w) = val(*x).dims4()?;
                let hw = h * w;
                let gm = val(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for n in 0..nb {
                    for ch in 0..c {
                        let off = (n * c + ch) * hw;
                        for k in off..off + hw {
                            dgamma[ch] = dgamma[ch] + g[k] * xhat[k];
                            dbeta[ch] = dbeta[ch] + g[k];
                        }
                    }
                }
                acc(*gamma, &mut |d| add_into(d, &dgamma));
                acc(*beta, &mut |d| add_into(d, &dbeta));
                acc(*x, &mut |d| {
                    let m = T::from_f64((nb * hw) as f64);
                    for n in 0..nb {
                        for ch in 0..c {
                            let off = (n * c + ch) * hw;
                            let scale = gm[ch] * inv_std[ch];
                            for k in off..off + hw {
                                let dx = if *batch_stats {
                                    // (1/m)·γ·σ⁻¹·(m·dy − Σdy − x̂·Σ(dy·x̂))
                                    scale * (m * g[k] - dbeta[ch] - xhat[k] * dgamma[ch]) / m
                                } else {
                                    scale * g[k]
                                };
                                d[k] = d[k] + dx;
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = val(*x).dims4()?;
                let hw = h * w;
                let inv = T::from_f64(1.0 / hw as f64);
                acc(*x, &mut |d| {
                    for (plane, &gv) in d.chunks_exact_mut(hw).zip(g) {
                        plane.iter_mut().for_each(|v| *v = *v + gv * inv);
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (rows, d_in) = val(*x).dims2()?;
                let (d_out, _) = val(*w).dims2()?;
                let (xv, wv) = (val(*x).data(), val(*w).data());
                // dx += dy (rows×d_out) · W (d_out×d_in)
                acc(*x, &mut |d| {
                    T::gemm(
                        rows, d_out, d_in, T::one(), g, d_out as isize, 1, wv, d_in as isize, 1,
                        T::one(), d, d_in as isize, 1,
                    )
                });
                // dW += dyᵀ (d_out×rows) · x (rows×d_in)
                acc(*w, &mut |d| {
                    T::gemm(
                        d_out, rows, d_in, T::one(), g, 1, d_out as isize, xv, d_in as isize, 1,
                        T::one(), d, d_in as isize, 1,
                    )
                });
                if let Some(b) = b {
                    acc(*b, &mut |d| {
                        for row in g.chunks_exact(d_out) {
                            add_into(d, row);
                        }
                    });
                }
            }
            Op::ChannelMask { x, keep } => {
                let (nb, _, h, w) = val(*x).dims4()?;
                acc(*x, &mut |d| {
                    let mut gm = g.to_vec();
                    mask_planes(&mut gm, nb, keep, h * w);
                    add_into(d, &gm);
                });
            }
            Op::ExpandBatch { x, keeps } => {
                let (nb, _, h, w) = val(*x).dims4()?;
                let block = val(*x).len();
                acc(*x, &mut |d| {
                    add_into(d, &g[..block]);
                    for (j, keep) in keeps.iter().enumerate() {
                        let mut gm = g[(j + 1) * block..(j + 2) * block].to_vec();
                        mask_planes(&mut gm, nb, keep, h * w);
                        add_into(d, &gm);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let row: usize = val(*x).shape()[1..].iter().product();
                let off = start * row;
                acc(*x, &mut |d| add_into(&mut d[off..off + g.len()], g));
            }
            Op::Softmax(z) => {
                let y = nodes[i].value.data();
                let d = nodes[i].value.dim(1);
                acc(*z, &mut |dz| {
                    for r in 0..y.len() / d {
                        let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for k in 0..d {
                            dz[r * d + k] = dz[r * d + k] + yr[k] * (gr[k] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(z) => {
                let y = nodes[i].value.data();
                let d = nodes[i].value.dim(1);
                acc(*z, &mut |dz| {
                    for r in 0..y.len() / d {
                        let gr = &g[r * d..(r + 1) * d];
                        let gs: T = gr.iter().copied().sum();
                        for k in 0..d {
                            let p = y[r * d + k].exp();
                            dz[r * d + k] = dz[r * d + k] + gr[k] - p * gs;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let rows = targets.len();
                let d = probs.len() / rows;
                let s = g[0] / T::from_f64(rows as f64);
                acc(*logits, &mut |dz| {
                    for (r, &t) in targets.iter().enumerate() {
                        for k in 0..d {
                            let onehot = if k == t { T::one() } else { T::zero() };
                            dz[r * d + k] = dz[r * d + k] + s * (probs[r * d + k] - onehot);
                        }
                    }
                });
            }
            Op::KlDiv { logq, p } => {
                let rows = val(*logq).dim(0);
                let s = g[0] / T::from_f64(rows as f64);
                acc(*logq, &mut |d| {
                    d.iter_mut().zip(p).for_each(|(d, &pv)| *d = *d - s * pv)
                });
            }
        }
        Ok(())
    }
}

fn mask_planes<T: Scalar>(data: &mut [T], batch: usize, keep: &[bool], hw: usize) {
    let c = keep.len();
    for n in 0..batch {
        for (ch, &k) in keep.iter().enumerate() {
            if !k {
                data[(n * c + ch) * hw..(n * c + ch + 1) * hw].fill(T::zero());
            }
        }
    }
}
