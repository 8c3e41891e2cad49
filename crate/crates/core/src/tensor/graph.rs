//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op appends one node holding its forward value and the
//! information its backward rule needs. Nodes are only ever appended, so
//! the tape is topologically ordered by construction and `backward` is a
//! single reverse sweep.

use super::array::{permute_index, split_axis, Tensor};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const KL_CLAMP: f64 = 1e-12;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias {
        x: Var,
        bias: Var,
        axis: usize,
    },
    MatMul(Var, Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        src_index: Vec<usize>,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    Outer(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        pad_top: usize,
        pad_left: usize,
    },
    MaskMul {
        x: Var,
        mask: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    KlDiv {
        probs: Var,
        target: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The tape: an append-only list of recorded operations.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Per-channel batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(shape_err(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    /// Constant leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Hash of every branch taken by non-smooth ops (ReLU sign pattern,
    /// max-pool winners). Two evaluations with equal patterns lie on the
    /// same smooth piece.
    pub fn branch_pattern(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(x) => {
                    i.hash(&mut h);
                    for &v in self.data(*x) {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn zip_map(&self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        check_same(op, self.shape(a), self.shape(b))?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        Tensor::new(self.shape(x).to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.map(x, |a| a * s);
        self.push(v, Op::Scale(x, s), &[x])
    }

    /// Adds a vector along `axis` of `x`, broadcasting over all other axes.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || self.shape(bias) != [shape[axis]] {
            return Err(shape_err(
                "add_bias",
                format!("x {:?}, bias {:?}, axis {axis}", shape, self.shape(bias)),
            ));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let b = self.data(bias);
        let mut out = self.data(x).to_vec();
        for o in 0..outer {
            for (d, &bv) in b.iter().enumerate().take(dim) {
                let base = (o * dim + d) * inner;
                for v in &mut out[base..base + inner] {
                    *v += bv;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::AddBias { x, bias, axis }, &[x, bias]))
    }

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), self.data(a), false, self.data(b), false, T::zero(), &mut out);
        let t = Tensor::new([m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", format!("{base:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let d = self.shape(v)[axis];
                let chunk = d * inner;
                out.extend_from_slice(&self.data(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err("permute", format!("axes {axes:?} for {shape:?}")));
        }
        let src_index = permute_index(&shape, axes);
        let src = self.data(x);
        let out = src_index.iter().map(|&i| src[i]).collect();
        let new_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let t = Tensor::new(new_shape, out)?;
        Ok(self.push(t, Op::Permute { x, src_index }, &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(shape_err("transpose", format!("{:?} is not 2-D", self.shape(x))));
        }
        self.permute(x, &[1, 0])
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let t = Tensor::new(new_shape, out)?;
        Ok(self.push(t, Op::Slice { x, axis, start }, &[x]))
    }

    /// Sums over `axis`, removing it.
    pub fn sum_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("sum_over_axis", format!("axis {axis} for {shape:?}")));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let base = (o * dim + d) * inner;
                add_into(&mut out[o * inner..(o + 1) * inner], &src[base..base + inner]);
            }
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        let t = Tensor::new(new_shape, out)?;
        Ok(self.push(t, Op::SumAxis { x, axis }, &[x]))
    }

    /// Sums every element into a rank-0 scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let flat = self.reshape(x, &[n])?;
        self.sum_over_axis(flat, 0)
    }

    /// Outer product over the last axis, batched over shared leading axes:
    /// `(.., S) x (.., T) -> (.., S, T)`.
    pub fn outer_product(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(shape_err("outer_product", format!("{sa:?} x {sb:?}")));
        }
        let s = sa[sa.len() - 1];
        let t = sb[sb.len() - 1];
        let batch: usize = sa[..sa.len() - 1].iter().product();
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(batch * s * t);
        for n in 0..batch {
            for i in 0..s {
                let ai = da[n * s + i];
                out.extend(db[n * t..(n + 1) * t].iter().map(|&bj| ai * bj));
            }
        }
        let mut shape = sa.clone();
        shape.push(t);
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::Outer(a, b), &[a, b]))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.map(x, T::tanh);
        self.push(v, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.map(x, sigmoid);
        self.push(v, Op::Sigmoid(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.map(x, |a| a.max(T::zero()));
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.map(x, T::exp);
        self.push(v, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let v = self.map(x, T::ln);
        self.push(v, Op::Log(x), &[x])
    }

    pub fn softmax_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("softmax_over_axis", format!("axis {axis} for {shape:?}")));
        }
        let out = softmax_along(self.data(x), &shape, axis);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Softmax { x, axis }, &[x]))
    }

    /// Max pooling over the last two axes of an `N x C x H x W` tensor,
    /// no padding.
    pub fn max_pool_2d(&mut self, x: Var, kernel: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 || shape[2] < kernel.0 || shape[3] < kernel.1 {
            return Err(shape_err(
                "max_pool_2d",
                format!("input {shape:?}, kernel {kernel:?}, stride {stride:?}"),
            ));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let oh = (h - kernel.0) / stride.0 + 1;
        let ow = (w - kernel.1) / stride.1 + 1;
        let src = self.data(x);
        let mut out = vec![T::zero(); n * c * oh * ow];
        let mut argmax = vec![0usize; n * c * oh * ow];
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                let o = (plane * oh + oy) * ow;
                let (best_v, best_i) = (&mut out[o..o + ow], &mut argmax[o..o + ow]);
                let first = base + oy * stride.0 * w;
                for (ox, (bv, bi)) in best_v.iter_mut().zip(best_i.iter_mut()).enumerate() {
                    *bi = first + ox * stride.1;
                    *bv = src[*bi];
                }
                for ky in 0..kernel.0 {
                    for kx in 0..kernel.1 {
                        if (ky, kx) == (0, 0) {
                            continue;
                        }
                        let row = base + (oy * stride.0 + ky) * w + kx;
                        for (ox, (bv, bi)) in best_v.iter_mut().zip(best_i.iter_mut()).enumerate() {
                            let i = row + ox * stride.1;
                            let v = src[i];
                            let take = v > *bv;
                            *bv = if take { v } else { *bv };
                            *bi = if take { i } else { *bi };
                        }
                    }
                }
            }
        }
        let t = Tensor::new([n, c, oh, ow], out)?;
        Ok(self.push(t, Op::MaxPool { x, argmax }, &[x]))
    }

    /// Stride-1 convolution with SAME zero padding over `N x C x H x W`
    /// input. `w` is `O x C x kh x kw`, `b` has length `O`. For even kernel
    /// sizes the extra padding goes after (bottom/right).
    pub fn conv_2d_same(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || self.shape(b) != [ws[0]] {
            return Err(shape_err(
                "conv_2d_same",
                format!("input {xs:?}, weight {ws:?}, bias {:?}", self.shape(b)),
            ));
        }
        let geo = ConvGeometry::new(&xs, &ws);
        let xd = self.data(x);
        let wd = self.data(w);
        let bd = self.data(b);
        let (hw, chw, ohw) = (geo.hw(), geo.c * geo.hw(), geo.o * geo.hw());
        let (wp, span) = (geo.padded_w(), geo.span());
        let mut out = vec![T::zero(); geo.n * ohw];
        let mut xpad = vec![T::zero(); geo.c * geo.padded_len()];
        let mut wide = vec![T::zero(); span];
        for s in 0..geo.n {
            geo.pad_into(&xd[s * chw..(s + 1) * chw], &mut xpad);
            for oc in 0..geo.o {
                wide.fill(bd[oc]);
                for c in 0..geo.c {
                    let plane = &xpad[c * geo.padded_len()..(c + 1) * geo.padded_len()];
                    for ky in 0..geo.kh {
                        for kx in 0..geo.kw {
                            let wv = wd[((oc * geo.c + c) * geo.kh + ky) * geo.kw + kx];
                            axpy(wv, &plane[ky * wp + kx..][..span], &mut wide);
                        }
                    }
                }
                let dst = &mut out[s * ohw + oc * hw..s * ohw + (oc + 1) * hw];
                for (y, row) in dst.chunks_mut(geo.w).enumerate() {
                    row.copy_from_slice(&wide[y * wp..y * wp + geo.w]);
                }
            }
        }
        let t = Tensor::new([geo.n, geo.o, geo.h, geo.w], out)?;
        Ok(self.push(
            t,
            Op::Conv2d {
                x,
                w,
                b,
                pad_top: geo.pad_top,
                pad_left: geo.pad_left,
            },
            &[x, w, b],
        ))
    }

    /// Elementwise product with a constant mask (dropout with a precomputed,
    /// already rescaled keep mask).
    pub fn dropout_mask_apply(&mut self, x: Var, mask: Tensor<T>) -> Result<Var> {
        check_same("dropout_mask_apply", self.shape(x), mask.shape())?;
        let out = self
            .data(x)
            .iter()
            .zip(mask.data())
            .map(|(&a, &m)| a * m)
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            t,
            Op::MaskMul {
                x,
                mask: mask.into_data(),
            },
            &[x],
        ))
    }

    /// Batch normalization over every axis except axis 1 (channels).
    ///
    /// With `running = None` the batch statistics are used and returned;
    /// otherwise the given (mean, var) are used as fixed constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        running: Option<(&[T], &[T])>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(gamma) != [shape[1]] || self.shape(beta) != [shape[1]] {
            return Err(shape_err(
                "batch_norm",
                format!("x {shape:?}, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let (outer, ch, inner) = split_axis(&shape, 1);
        let count = outer * inner;
        let xd = self.data(x);
        let (mean, var, batch_stats) = match running {
            None => {
                let mut mean = vec![0.0f64; ch];
                let mut var = vec![0.0f64; ch];
                for o in 0..outer {
                    for c in 0..ch {
                        let base = (o * ch + c) * inner;
                        mean[c] += sum_f64(xd[base..base + inner].iter().map(|v| v.as_f64()));
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                for o in 0..outer {
                    for c in 0..ch {
                        let base = (o * ch + c) * inner;
                        let m = mean[c];
                        var[c] += sum_f64(xd[base..base + inner].iter().map(|v| (v.as_f64() - m).powi(2)));
                    }
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
                let mean: Vec<T> = mean.into_iter().map(T::lit).collect();
                let var: Vec<T> = var.into_iter().map(T::lit).collect();
                (mean.clone(), var.clone(), true)
            }
            Some((m, v)) => {
                if m.len() != ch || v.len() != ch {
                    return Err(shape_err("batch_norm", format!("running stats for {} channels, input has {ch}", m.len())));
                }
                (m.to_vec(), v.to_vec(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.data(gamma);
        let bt = self.data(beta);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for c in 0..ch {
                let base = (o * ch + c) * inner;
                for i in base..base + inner {
                    let h = (xd[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = g[c] * h + bt[c];
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        let v = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        );
        let stats = batch_stats.then_some(BatchStats { mean, var });
        Ok((v, stats))
    }

    /// Batch-mean KL divergence `KL(target || probs)` for `N x C`
    /// probabilities against a constant target of the same shape.
    pub fn kl_div(&mut self, probs: Var, target: &Tensor<T>) -> Result<Var> {
        let shape = self.shape(probs).to_vec();
        check_same("kl_div", &shape, target.shape())?;
        if shape.len() != 2 {
            return Err(shape_err("kl_div", format!("expected N x C, got {shape:?}")));
        }
        let n = shape[0];
        let clamp = T::lit(KL_CLAMP);
        let mut total = 0.0f64;
        for (&y, &p) in target.data().iter().zip(self.data(probs)) {
            if y > T::zero() {
                total += (y * (y / clamp_prob(p, clamp)).ln()).as_f64();
            }
        }
        let t = Tensor::scalar(T::lit(total / n as f64));
        Ok(self.push(
            t,
            Op::KlDiv {
                probs,
                target: target.data().to_vec(),
            },
            &[probs],
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop_node(&self, node: &Node<T>, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(g) = self.acc(grads, *a) {
                    add_into(g, gout);
                }
                if let Some(g) = self.acc(grads, *b) {
                    add_into(g, gout);
                }
            }
            Op::Sub(a, b) => {
                if let Some(g) = self.acc(grads, *a) {
                    add_into(g, gout);
                }
                if let Some(g) = self.acc(grads, *b) {
                    g.iter_mut().zip(gout).for_each(|(d, &s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                if let Some(g) = self.acc(grads, *a) {
                    for ((d, &go), &bv) in g.iter_mut().zip(gout).zip(db) {
                        *d += go * bv;
                    }
                }
                if let Some(g) = self.acc(grads, *b) {
                    for ((d, &go), &av) in g.iter_mut().zip(gout).zip(da) {
                        *d += go * av;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(g) = self.acc(grads, *x) {
                    g.iter_mut().zip(gout).for_each(|(d, &go)| *d += go * *s);
                }
            }
            Op::AddBias { x, bias, axis } => {
                if let Some(g) = self.acc(grads, *x) {
                    add_into(g, gout);
                }
                let (outer, dim, inner) = split_axis(node.value.shape(), *axis);
                if let Some(g) = self.acc(grads, *bias) {
                    for o in 0..outer {
                        for (d, gb) in g.iter_mut().enumerate().take(dim) {
                            let base = (o * dim + d) * inner;
                            *gb += gout[base..base + inner].iter().copied().sum::<T>();
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (self.data(*a), self.data(*b));
                if let Some(g) = self.acc(grads, *a) {
                    // dA = dY * B^T
                    T::gemm(m, n, k, T::one(), gout, false, db, true, T::one(), g);
                }
                if let Some(g) = self.acc(grads, *b) {
                    // dB = A^T * dY
                    T::gemm(k, m, n, T::one(), da, true, gout, false, T::one(), g);
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let total = node.value.shape()[*axis];
                let mut offset = 0;
                for &v in inputs {
                    let d = self.shape(v)[*axis];
                    if let Some(g) = self.acc(grads, v) {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            add_into(&mut g[o * d * inner..(o + 1) * d * inner], &gout[src..src + d * inner]);
                        }
                    }
                    offset += d;
                }
            }
            Op::Reshape(x) => {
                if let Some(g) = self.acc(grads, *x) {
                    add_into(g, gout);
                }
            }
            Op::Permute { x, src_index } => {
                if let Some(g) = self.acc(grads, *x) {
                    for (&si, &go) in src_index.iter().zip(gout) {
                        g[si] += go;
                    }
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, dim, inner) = split_axis(xs, *axis);
                let len = node.value.shape()[*axis];
                if let Some(g) = self.acc(grads, *x) {
                    for o in 0..outer {
                        let base = (o * dim + start) * inner;
                        add_into(&mut g[base..base + len * inner], &gout[o * len * inner..(o + 1) * len * inner]);
                    }
                }
            }
            Op::SumAxis { x, axis } => {
                let (outer, dim, inner) = split_axis(self.shape(*x), *axis);
                if let Some(g) = self.acc(grads, *x) {
                    for o in 0..outer {
                        for d in 0..dim {
                            let base = (o * dim + d) * inner;
                            add_into(&mut g[base..base + inner], &gout[o * inner..(o + 1) * inner]);
                        }
                    }
                }
            }
            Op::Outer(a, b) => {
                let sa = self.shape(*a);
                let s = sa[sa.len() - 1];
                let sb = self.shape(*b);
                let t = sb[sb.len() - 1];
                let batch = self.value(*a).len() / s.max(1);
                let (da, db) = (self.data(*a), self.data(*b));
                if let Some(g) = self.acc(grads, *a) {
                    for n in 0..batch {
                        for i in 0..s {
                            let row = &gout[(n * s + i) * t..(n * s + i + 1) * t];
                            g[n * s + i] += row.iter().zip(&db[n * t..(n + 1) * t]).map(|(&x, &y)| x * y).sum::<T>();
                        }
                    }
                }
                if let Some(g) = self.acc(grads, *b) {
                    for n in 0..batch {
                        for i in 0..s {
                            let ai = da[n * s + i];
                            let row = &gout[(n * s + i) * t..(n * s + i + 1) * t];
                            for (d, &go) in g[n * t..(n + 1) * t].iter_mut().zip(row) {
                                *d += go * ai;
                            }
                        }
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(g) = self.acc(grads, *x) {
                    for ((d, &go), &yv) in g.iter_mut().zip(gout).zip(y) {
                        *d += go * (T::one() - yv * yv);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(g) = self.acc(grads, *x) {
                    for ((d, &go), &yv) in g.iter_mut().zip(gout).zip(y) {
                        *d += go * yv * (T::one() - yv);
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(g) = self.acc(grads, *x) {
                    for ((d, &go), &yv) in g.iter_mut().zip(gout).zip(y) {
                        if yv > T::zero() {
                            *d += go;
                        }
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(g) = self.acc(grads, *x) {
                    for ((d, &go), &yv) in g.iter_mut().zip(gout).zip(y) {
                        *d += go * yv;
                    }
                }
            }
            Op::Log(x) => {
                let xd = self.data(*x);
                if let Some(g) = self.acc(grads, *x) {
                    for ((d, &go), &xv) in g.iter_mut().zip(gout).zip(xd) {
                        *d += go / xv;
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, dim, inner) = split_axis(node.value.shape(), *axis);
                if let Some(g) = self.acc(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |d: usize| (o * dim + d) * inner + i;
                            let dot: T = (0..dim).map(|d| gout[idx(d)] * y[idx(d)]).sum();
                            for d in 0..dim {
                                g[idx(d)] += y[idx(d)] * (gout[idx(d)] - dot);
                            }
                        }
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(g) = self.acc(grads, *x) {
                    for (&src, &go) in argmax.iter().zip(gout) {
                        g[src] += go;
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                pad_top,
                pad_left,
            } => {
                let geo = ConvGeometry::new(self.shape(*x), self.shape(*w));
                debug_assert_eq!((geo.pad_top, geo.pad_left), (*pad_top, *pad_left));
                let hw = geo.hw();
                if let Some(g) = self.acc(grads, *b) {
                    for s in 0..geo.n {
                        for (oc, gb) in g.iter_mut().enumerate() {
                            let base = (s * geo.o + oc) * hw;
                            *gb += gout[base..base + hw].iter().copied().sum::<T>();
                        }
                    }
                }
                let need_w = self.nodes[w.0].requires_grad;
                let need_x = self.nodes[x.0].requires_grad;
                let xd = self.data(*x);
                let wd = self.data(*w);
                let (chw, ohw) = (geo.c * hw, geo.o * hw);
                let (wp, span, plen) = (geo.padded_w(), geo.span(), geo.padded_len());
                let widx = |oc: usize, c: usize, ky: usize, kx: usize| ((oc * geo.c + c) * geo.kh + ky) * geo.kw + kx;
                // output gradient at the padded row stride, zero in the gaps
                let mut wide = vec![T::zero(); geo.o * span];
                let mut xpad = vec![T::zero(); geo.c * plen];
                let mut gw = vec![T::zero(); if need_w { wd.len() } else { 0 }];
                let mut gx = vec![T::zero(); if need_x { xd.len() } else { 0 }];
                for s in 0..geo.n {
                    for oc in 0..geo.o {
                        let go = &gout[s * ohw + oc * hw..s * ohw + (oc + 1) * hw];
                        let dst = &mut wide[oc * span..(oc + 1) * span];
                        for (y, row) in go.chunks(geo.w).enumerate() {
                            dst[y * wp..y * wp + geo.w].copy_from_slice(row);
                        }
                    }
                    if need_w {
                        geo.pad_into(&xd[s * chw..(s + 1) * chw], &mut xpad);
                        for oc in 0..geo.o {
                            let go = &wide[oc * span..(oc + 1) * span];
                            for c in 0..geo.c {
                                let plane = &xpad[c * plen..(c + 1) * plen];
                                for ky in 0..geo.kh {
                                    for kx in 0..geo.kw {
                                        gw[widx(oc, c, ky, kx)] += dot(go, &plane[ky * wp + kx..][..span]);
                                    }
                                }
                            }
                        }
                    }
                    if need_x {
                        xpad.fill(T::zero());
                        for oc in 0..geo.o {
                            let go = &wide[oc * span..(oc + 1) * span];
                            for c in 0..geo.c {
                                let plane = &mut xpad[c * plen..(c + 1) * plen];
                                for ky in 0..geo.kh {
                                    for kx in 0..geo.kw {
                                        axpy(wd[widx(oc, c, ky, kx)], go, &mut plane[ky * wp + kx..][..span]);
                                    }
                                }
                            }
                        }
                        geo.crop_into(&xpad, &mut gx[s * chw..(s + 1) * chw]);
                    }
                }
                if need_w {
                    add_into(self.acc(grads, *w).expect("requires grad"), &gw);
                }
                if need_x {
                    add_into(self.acc(grads, *x).expect("requires grad"), &gx);
                }
            }
            Op::MaskMul { x, mask } => {
                if let Some(g) = self.acc(grads, *x) {
                    for ((d, &go), &m) in g.iter_mut().zip(gout).zip(mask) {
                        *d += go * m;
                    }
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
                let (outer, ch, inner) = split_axis(node.value.shape(), 1);
                let count = T::lit((outer * inner) as f64);
                let mut sum_dy = vec![T::zero(); ch];
                let mut sum_dy_xhat = vec![T::zero(); ch];
                for o in 0..outer {
                    for c in 0..ch {
                        let base = (o * ch + c) * inner;
                        for i in base..base + inner {
                            sum_dy[c] += gout[i];
                            sum_dy_xhat[c] += gout[i] * xhat[i];
                        }
                    }
                }
                if let Some(g) = self.acc(grads, *beta) {
                    add_into(g, &sum_dy);
                }
                if let Some(g) = self.acc(grads, *gamma) {
                    add_into(g, &sum_dy_xhat);
                }
                let gd = self.data(*gamma).to_vec();
                if let Some(g) = self.acc(grads, *x) {
                    for o in 0..outer {
                        for c in 0..ch {
                            let base = (o * ch + c) * inner;
                            let k = gd[c] * inv_std[c];
                            for i in base..base + inner {
                                g[i] += if *batch_stats {
                                    k * (gout[i] - (sum_dy[c] + xhat[i] * sum_dy_xhat[c]) / count)
                                } else {
                                    k * gout[i]
                                };
                            }
                        }
                    }
                }
            }
            Op::KlDiv { probs, target } => {
                let n = T::lit(self.shape(*probs)[0] as f64);
                let clamp = T::lit(KL_CLAMP);
                let pd = self.data(*probs);
                if let Some(g) = self.acc(grads, *probs) {
                    for ((d, &t), &p) in g.iter_mut().zip(target).zip(pd) {
                        if t > T::zero() && p > clamp {
                            *d -= gout[0] * t / (p * n);
                        }
                    }
                }
            }
        }
    }
}

/// `max(p, clamp)` that keeps NaN visible.
pub(crate) fn clamp_prob<T: Scalar>(p: T, clamp: T) -> T {
    if p.is_nan() {
        p
    } else {
        p.max(clamp)
    }
}

/// Sum with four independent partial sums.
fn sum_f64(it: impl Iterator<Item = f64>) -> f64 {
    let mut acc = [0.0f64; 4];
    for (i, v) in it.enumerate() {
        acc[i & 3] += v;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

/// `y += a x`.
fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

/// Dot product with eight independent partial sums.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

pub(crate) fn sigmoid<T: Scalar>(a: T) -> T {
    if a >= T::zero() {
        T::one() / (T::one() + (-a).exp())
    } else {
        let e = a.exp();
        e / (T::one() + e)
    }
}

/// Max-shifted softmax along `axis` of a row-major buffer.
pub(crate) fn softmax_along<T: Scalar>(src: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, dim, inner) = split_axis(shape, axis);
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |d: usize| (o * dim + d) * inner + i;
            let max = (0..dim).map(|d| src[idx(d)]).fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for d in 0..dim {
                let e = (src[idx(d)] - max).exp();
                out[idx(d)] = e;
                sum += e;
            }
            for d in 0..dim {
                out[idx(d)] /= sum;
            }
        }
    }
    out
}

struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeometry {
    fn new(xs: &[usize], ws: &[usize]) -> Self {
        Self {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: ws[0],
            kh: ws[2],
            kw: ws[3],
            pad_top: (ws[2] - 1) / 2,
            pad_left: (ws[3] - 1) / 2,
        }
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }

    fn padded_w(&self) -> usize {
        self.w + self.kw - 1
    }

    fn padded_len(&self) -> usize {
        (self.h + self.kh - 1) * self.padded_w()
    }

    /// Outputs computed at the padded row stride: `h - 1` full padded rows
    /// plus one image row. Tap `(ky, kx)` reads the padded plane from
    /// offset `ky * padded_w + kx` over this span.
    fn span(&self) -> usize {
        (self.h - 1) * self.padded_w() + self.w
    }

    /// Copies `C x H x W` input into zero-padded `C x (H + kh - 1) x (W + kw - 1)`.
    fn pad_into<T: Scalar>(&self, x: &[T], xpad: &mut [T]) {
        let (wp, plen, hw) = (self.padded_w(), self.padded_len(), self.hw());
        xpad.fill(T::zero());
        for c in 0..self.c {
            for (y, row) in x[c * hw..(c + 1) * hw].chunks(self.w).enumerate() {
                let at = c * plen + (y + self.pad_top) * wp + self.pad_left;
                xpad[at..at + self.w].copy_from_slice(row);
            }
        }
    }

    /// Adds the interior of a padded gradient back onto `C x H x W`.
    fn crop_into<T: Scalar>(&self, xpad: &[T], gx: &mut [T]) {
        let (wp, plen, hw) = (self.padded_w(), self.padded_len(), self.hw());
        for c in 0..self.c {
            for (y, row) in gx[c * hw..(c + 1) * hw].chunks_mut(self.w).enumerate() {
                let at = c * plen + (y + self.pad_top) * wp + self.pad_left;
                for (d, &v) in row.iter_mut().zip(&xpad[at..at + self.w]) {
                    *d += v;
                }
            }
        }
    }
}
