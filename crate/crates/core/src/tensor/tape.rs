use rand::Rng;
use rayon::prelude::*;

use super::kernels::{col2im, gemm_nn, gemm_nt, gemm_tn, im2col, ConvGeometry};
use super::{Real, Tensor, TensorError};
use crate::rng;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: T },
    AddBias { x: Var, bias: Var, inner: usize },
    Conv2d { x: Var, w: Var, geom: ConvGeometry, cols: Vec<T> },
    MaxPool { x: Var, argmax: Vec<usize> },
    GlobalAvgPool { x: Var, spatial: usize },
    Relu { x: Var },
    Dropout { x: Var, mask: Vec<T> },
    Reshape { x: Var },
    SoftmaxCrossEntropy { logits: Var, probs: Vec<f64>, labels: Vec<usize> },
    Sum { x: Var },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records operations in execution order; [`Tape::backward`] walks them in
/// reverse. Records are appended only after their inputs, so the tape is
/// always in topological order and acyclic.
#[derive(Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

const NORM_EPS: f64 = 1e-12;

fn shape_err<R>(msg: String) -> Result<R, TensorError> {
    Err(TensorError::ShapeMismatch(msg))
}

fn slot<T: Real>(s: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    s.get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A leaf. Gradients are collected for it when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
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

    /// Gradient from the most recent backward pass. Leaf gradients
    /// accumulate across passes until [`Tape::zero_grad`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err(format!("matmul {sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul { a, b }))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("{what} {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::Add { a, b }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let factor = T::from_f64_lossy(factor);
        let v = self.value(a);
        let t = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|&x| x * factor).collect(),
        };
        let rg = self.rg(&[a]);
        self.push(t, rg, Op::Scale { a, factor })
    }

    /// Adds a per-channel bias to `[N, C]` or `[N, C, H, W]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(bias);
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return shape_err(format!("add_bias {sx:?} + {sb:?}"));
        }
        let c = sx[1];
        let inner: usize = sx[2..].iter().product();
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for (i, chunk) in data.chunks_mut(inner).enumerate() {
            let bv = b[i % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::new(sx, data)?, rg, Op::AddBias { x, bias, inner }))
    }

    /// 2-D convolution over NCHW input with an `[O, C, kh, kw]` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return shape_err(format!("conv2d input {sx:?} kernel {sw:?} stride {stride}"));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * padding < kh || wd + 2 * padding < kw {
            return shape_err(format!("conv2d kernel {kh}x{kw} larger than padded input {h}x{wd}"));
        }
        let geom = ConvGeometry {
            channels: c,
            height: h,
            width: wd,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (wd + 2 * padding - kw) / stride + 1,
        };
        let (kl, ol) = (geom.patch_len(), geom.out_len());
        let mut cols = vec![T::zero(); n * kl * ol];
        let mut out = vec![T::zero(); n * o * ol];
        let img_len = c * h * wd;
        let xd = self.value(x).data();
        let wdata = self.value(w).data();
        cols.par_chunks_mut(kl * ol)
            .zip(out.par_chunks_mut(o * ol))
            .enumerate()
            .for_each(|(i, (col, dst))| {
                im2col(&xd[i * img_len..(i + 1) * img_len], &geom, col);
                gemm_nn(wdata, col, dst, o, kl, ol);
            });
        let rg = self.rg(&[x, w]);
        let value = Tensor::new(vec![n, o, geom.out_h, geom.out_w], out)?;
        Ok(self.push(value, rg, Op::Conv2d { x, w, geom, cols }))
    }

    /// Max pooling without padding.
    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || kernel == 0 || stride == 0 || sx[2] < kernel || sx[3] < kernel {
            return shape_err(format!("maxpool2d {sx:?} kernel {kernel} stride {stride}"));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let oh = (h - kernel) / stride + 1;
        let ow = (w - kernel) / stride + 1;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![n, c, oh, ow], out)?, rg, Op::MaxPool { x, argmax }))
    }

    /// `[N, C, H, W]` to `[N, C]` by spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return shape_err(format!("global_avg_pool {sx:?}"));
        }
        let spatial = sx[2] * sx[3];
        let out = self
            .value(x)
            .data()
            .chunks(spatial)
            .map(|p| T::from_f64_lossy(p.iter().map(|v| v.as_f64()).sum::<f64>() / spatial as f64))
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![sx[0], sx[1]], out)?, rg, Op::GlobalAvgPool { x, spatial }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|&a| if a > T::zero() { a } else { T::zero() }).collect(),
        };
        let rg = self.rg(&[x]);
        self.push(t, rg, Op::Relu { x })
    }

    /// Inverted dropout: survivors are scaled by 1/(1−p). Identity when
    /// `train` is false or `p` is zero.
    pub fn dropout(&mut self, x: Var, p: f64, train: bool, seed: u64) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidProbability(p));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let mut r = rng::stream(seed, &[]);
        let v = self.value(x);
        let mask: Vec<T> = (0..v.numel()).map(|_| if r.gen::<f64>() >= p { keep } else { T::zero() }).collect();
        let t = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect(),
        };
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Dropout { x, mask }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Reshape { x }))
    }

    /// `[N, ...]` to `[N, rest]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x);
        let n = s[0];
        let rest = s[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return shape_err(format!("softmax_cross_entropy logits {s:?} with {} labels", labels.len()));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::LabelOutOfRange { label, classes: k });
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = 0.0;
        for (row, &label) in self.value(logits).data().chunks(k).zip(labels) {
            let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            loss += z.ln() + max - row[label].as_f64();
            probs.extend(exps.iter().map(|e| e / z));
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(T::from_f64_lossy(loss / n as f64)),
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(T::from_f64_lossy(s)), rg, Op::Sum { x })
    }

    /// Scales every row of `[N, D]` to unit L2 norm (norms clamped at 1e-12).
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return shape_err(format!("l2_normalize_rows {s:?}"));
        }
        let d = s[1];
        let mut norms = Vec::with_capacity(s[0]);
        let mut out = Vec::with_capacity(s[0] * d);
        for row in self.value(x).data().chunks(d) {
            let n = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt().max(NORM_EPS);
            norms.push(n);
            out.extend(row.iter().map(|v| T::from_f64_lossy(v.as_f64() / n)));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(s, out)?, rg, Op::L2NormalizeRows { x, norms }))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let ls = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        let mut tmp: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        tmp[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (lower, upper) = tmp.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else { continue };
            self.propagate(i, g, lower);
        }
        for (i, g) in tmp.into_iter().enumerate() {
            let Some(g) = g else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            match (&self.nodes[i].op, &mut self.grads[i]) {
                (Op::Leaf, Some(acc)) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                (_, dst) => *dst = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let numel = |v: Var| nodes[v.0].value.numel();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    let da = slot(&mut grads[a.0], m * k);
                    gemm_nt(g, nodes[b.0].value.data(), da, m, n, k);
                }
                if wants(*b) {
                    let db = slot(&mut grads[b.0], k * n);
                    gemm_tn(nodes[a.0].value.data(), g, db, m, k, n);
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if wants(v) {
                        let d = slot(&mut grads[v.0], g.len());
                        d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Mul { a, b } => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if wants(v) {
                        let o = nodes[other.0].value.data();
                        let d = slot(&mut grads[v.0], g.len());
                        for ((d, &g), &o) in d.iter_mut().zip(g).zip(o) {
                            *d += g * o;
                        }
                    }
                }
            }
            Op::Scale { a, factor } => {
                if wants(*a) {
                    let d = slot(&mut grads[a.0], g.len());
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *factor);
                }
            }
            Op::AddBias { x, bias, inner } => {
                if wants(*x) {
                    let d = slot(&mut grads[x.0], g.len());
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
                if wants(*bias) {
                    let c = numel(*bias);
                    let mut acc = vec![0f64; c];
                    for (j, chunk) in g.chunks(*inner).enumerate() {
                        acc[j % c] += chunk.iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let d = slot(&mut grads[bias.0], c);
                    d.iter_mut().zip(&acc).for_each(|(d, &a)| *d += T::from_f64_lossy(a));
                }
            }
            Op::Conv2d { x, w, geom, cols } => {
                let sw = nodes[w.0].value.shape();
                let o = sw[0];
                let (kl, ol) = (geom.patch_len(), geom.out_len());
                let n = nodes[x.0].value.shape()[0];
                if wants(*w) {
                    // Per-sample partials summed in a fixed order keep results
                    // independent of thread scheduling.
                    let mut partial = vec![T::zero(); n * o * kl];
                    partial.par_chunks_mut(o * kl).enumerate().for_each(|(s, dst)| {
                        gemm_nt(
                            &g[s * o * ol..(s + 1) * o * ol],
                            &cols[s * kl * ol..(s + 1) * kl * ol],
                            dst,
                            o,
                            ol,
                            kl,
                        );
                    });
                    let dw = slot(&mut grads[w.0], o * kl);
                    for chunk in partial.chunks(o * kl) {
                        dw.iter_mut().zip(chunk).for_each(|(d, &p)| *d += p);
                    }
                }
                if wants(*x) {
                    let img_len = geom.channels * geom.height * geom.width;
                    let wdata = nodes[w.0].value.data();
                    let dx = slot(&mut grads[x.0], n * img_len);
                    dx.par_chunks_mut(img_len).enumerate().for_each(|(s, dimg)| {
                        let mut dcols = vec![T::zero(); kl * ol];
                        gemm_tn(wdata, &g[s * o * ol..(s + 1) * o * ol], &mut dcols, o, kl, ol);
                        col2im(&dcols, geom, dimg);
                    });
                }
            }
            Op::MaxPool { x, argmax } => {
                if wants(*x) {
                    let d = slot(&mut grads[x.0], numel(*x));
                    for (&idx, &g) in argmax.iter().zip(g) {
                        d[idx] += g;
                    }
                }
            }
            Op::GlobalAvgPool { x, spatial } => {
                if wants(*x) {
                    let scale = T::from_f64_lossy(1.0 / *spatial as f64);
                    let d = slot(&mut grads[x.0], numel(*x));
                    for (chunk, &g) in d.chunks_mut(*spatial).zip(g) {
                        chunk.iter_mut().for_each(|v| *v += g * scale);
                    }
                }
            }
            Op::Relu { x } => {
                if wants(*x) {
                    let xv = nodes[x.0].value.data();
                    let d = slot(&mut grads[x.0], g.len());
                    for ((d, &g), &xv) in d.iter_mut().zip(g).zip(xv) {
                        if xv > T::zero() {
                            *d += g;
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if wants(*x) {
                    let d = slot(&mut grads[x.0], g.len());
                    for ((d, &g), &m) in d.iter_mut().zip(g).zip(mask) {
                        *d += g * m;
                    }
                }
            }
            Op::Reshape { x } => {
                if wants(*x) {
                    let d = slot(&mut grads[x.0], g.len());
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
            }
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                if wants(*logits) {
                    let n = labels.len();
                    let k = probs.len() / n;
                    let up = g[0].as_f64() / n as f64;
                    let d = slot(&mut grads[logits.0], n * k);
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..k {
                            let onehot = if c == label { 1.0 } else { 0.0 };
                            d[r * k + c] += T::from_f64_lossy(up * (probs[r * k + c] - onehot));
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if wants(*x) {
                    let d = slot(&mut grads[x.0], numel(*x));
                    d.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                if wants(*x) {
                    let y = nodes[i].value.data();
                    let dim = y.len() / norms.len();
                    let d = slot(&mut grads[x.0], y.len());
                    for (r, &norm) in norms.iter().enumerate() {
                        let ys = &y[r * dim..(r + 1) * dim];
                        let gs = &g[r * dim..(r + 1) * dim];
                        let proj: f64 = ys.iter().zip(gs).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                        let clamped = norm <= NORM_EPS;
                        for c in 0..dim {
                            let gv = gs[c].as_f64();
                            let v = if clamped { gv } else { gv - ys[c].as_f64() * proj };
                            d[r * dim + c] += T::from_f64_lossy(v / norm);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn dropout_zero_and_eval_are_identity() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::from_fn(&[4, 5], |i| i as f32));
        let y = tape.dropout(x, 0.0, true, 3).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let z = tape.dropout(x, 0.5, false, 3).unwrap();
        assert_eq!(tape.value(z), tape.value(x));
        assert_eq!(tape.dropout(x, 1.0, true, 0), Err(TensorError::InvalidProbability(1.0)));
        assert_eq!(tape.dropout(x, -0.1, true, 0), Err(TensorError::InvalidProbability(-0.1)));
    }

    #[test]
    fn dropout_reproducible_and_unbiased() {
        let x = Tensor::<f64>::full(&[1, 200], 1.5);
        let run = |seed| {
            let mut tape = Tape::<f64>::new();
            let v = tape.constant(x.clone());
            let y = tape.dropout(v, 0.3, true, seed).unwrap();
            tape.value(y).data().to_vec()
        };
        assert_eq!(run(9), run(9));
        // Mean over 1000 seeds within 3σ of the input mean.
        let means: Vec<f64> = (0..1000).map(|s| run(s).iter().sum::<f64>() / 200.0).collect();
        let mean = means.iter().sum::<f64>() / 1000.0;
        // Per-element variance of x·mask/(1−p) is x²·p/(1−p).
        let sigma = (1.5f64.powi(2) * 0.3 / 0.7 / (200.0 * 1000.0)).sqrt();
        assert!((mean - 1.5).abs() < 3.0 * sigma, "mean {mean} sigma {sigma}");
    }

    #[test]
    fn full_support_conv_sums_inputs() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (1..=9).map(f64::from).collect();
        let x = tape.constant(t(&[1, 1, 3, 3], &data));
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[45.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn inner_product_gradient_is_twice_input() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[4], &[1.0, -2.0, 0.5, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 1.0, 6.0]);
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert_eq!(tape.backward(x), Err(TensorError::NonScalarLoss(vec![2])));
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::zeros(&[2, 3]));
        let b = tape.param(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(TensorError::ShapeMismatch(_))));
        let c = tape.param(Tensor::zeros(&[3, 2]));
        assert!(matches!(tape.add(a, c), Err(TensorError::ShapeMismatch(_))));
        assert!(matches!(tape.conv2d(a, b, 1, 0), Err(TensorError::ShapeMismatch(_))));
        assert!(matches!(
            tape.softmax_cross_entropy(a, &[0, 5]),
            Err(TensorError::LabelOutOfRange { label: 5, classes: 3 })
        ));
    }

    #[test]
    fn softmax_ce_gradient_is_softmax_minus_onehot() {
        let mut tape = Tape::<f64>::new();
        let logits = [0.3, -1.2, 2.0, 0.0, 0.7, 0.1];
        let x = tape.param(t(&[2, 3], &logits));
        let l = tape.softmax_cross_entropy(x, &[2, 0]).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(x).unwrap();
        for (r, label) in [(0usize, 2usize), (1, 0)] {
            let row = &logits[r * 3..r * 3 + 3];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            for c in 0..3 {
                let want = (row[c].exp() / z - if c == label { 1.0 } else { 0.0 }) / 2.0;
                assert!((g[r * 3 + c] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let x = tape.param(t(&[1, 2], &[1.0, 1.0]));
        let y = tape.matmul(x, w).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(w).is_none());
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 7.0]);
    }
}
