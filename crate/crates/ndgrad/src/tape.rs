//! Recording tape and reverse-mode backward pass.
//!
//! Nodes are appended in evaluation order, so the tape is already a topological
//! order of the graph; backward walks it once in reverse and accumulates
//! adjoints additively into every input that requires a gradient.

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{conv_out_size, matmul_dims, require_2d, require_4d};
use crate::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRowBias(usize, usize),
    AddChannelBias(usize, usize),
    Conv2d { x: usize, w: usize, geom: ConvGeom },
    AvgPool2(usize),
    Relu(usize),
    Sigmoid(usize),
    ScaleChannels(usize, usize),
    ScaleSpatial(usize, usize),
    GlobalAvgPool(usize),
    ChannelMean(usize),
    Concat(Vec<usize>),
    SelectRows(usize, Vec<usize>),
    Softmax(usize),
    LogSoftmax(usize),
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<T> },
    Sum(usize),
    Mean(usize),
    Scale(usize, T),
    L2Normalize { x: usize, norms: Vec<T> },
    Triplet { x: usize, active: Vec<(usize, usize, usize)>, anchors: usize },
    Reshape(usize),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `var`, if it was reached.
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

/// A computation graph recorded by evaluating ops eagerly.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Records a parameter leaf whose gradient [`Tape::backward_into`] routes back to `store`.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Leaf,
            requires_grad: true,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// Same value, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn with_shape_of(&self, v: Var, data: Vec<T>) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), data).expect("same element count")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let out = self.with_shape_of(a, data);
        Ok(self.push(out, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x - y).collect();
        let out = self.with_shape_of(a, data);
        Ok(self.push(out, Op::Sub(a.0, b.0), &[a.0, b.0]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let out = self.with_shape_of(a, data);
        Ok(self.push(out, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    /// `x[N×D] + b[D]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, d) = require_2d("add_row_bias", self.shape(x))?;
        if self.value(b).len() != d {
            return Err(shape_err("add_row_bias", format!("bias {:?} for width {d}", self.shape(b))));
        }
        let bias = self.data(b);
        let data = self.data(x).chunks(d).flat_map(|row| row.iter().zip(bias).map(|(&v, &c)| v + c)).collect();
        let out = self.with_shape_of(x, data);
        Ok(self.push(out, Op::AddRowBias(x.0, b.0), &[x.0, b.0]))
    }

    /// `x[N×C×H×W] + b[C]` broadcast over samples and pixels.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, c, h, w) = require_4d("add_channel_bias", self.shape(x))?;
        if self.value(b).len() != c {
            return Err(shape_err("add_channel_bias", format!("bias {:?} for {c} channels", self.shape(b))));
        }
        let bias = self.data(b);
        let plane = h * w;
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[(i / plane) % c])
            .collect();
        let out = self.with_shape_of(x, data);
        Ok(self.push(out, Op::AddChannelBias(x.0, b.0), &[x.0, b.0]))
    }

    /// 3×3 cross-correlation of `x[N×C×H×W]` with `w[K×C×3×3]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        if !(1..=2).contains(&stride) || pad > 1 {
            return Err(Error::Argument {
                op: "conv2d",
                detail: format!("stride {stride} / pad {pad} outside {{1,2}} / {{0,1}}"),
            });
        }
        let (n, c, h, wd) = require_4d("conv2d", self.shape(x))?;
        let (k, kc, kh, kw) = require_4d("conv2d", self.shape(w))?;
        if kc != c || kh != 3 || kw != 3 {
            return Err(shape_err("conv2d", format!("kernel {:?} for input {:?}", self.shape(w), self.shape(x))));
        }
        let (Some(out_h), Some(out_w)) = (conv_out_size(h, stride, pad), conv_out_size(wd, stride, pad)) else {
            return Err(shape_err(
                "conv2d",
                format!("non-integer output size for {h}×{wd}, stride {stride}, pad {pad}"),
            ));
        };
        let geom = ConvGeom { channels: c, height: h, width: wd, out_h, out_w, stride, pad };
        let data = kernels::conv2d_forward(&geom, n, k, self.data(x), self.data(w));
        let out = Tensor::new(vec![n, k, out_h, out_w], data)?;
        Ok(self.push(out, Op::Conv2d { x: x.0, w: w.0, geom }, &[x.0, w.0]))
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = require_4d("avg_pool2", self.shape(x))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err("avg_pool2", format!("odd spatial size {h}×{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.data(x);
        let quarter = T::lit(0.25);
        let mut data = vec![T::zero(); n * c * oh * ow];
        for (plane, out) in src.chunks(h * w).zip(data.chunks_mut(oh * ow)) {
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y, x) = (2 * oy, 2 * ox);
                    out[oy * ow + ox] = quarter
                        * (plane[y * w + x] + plane[y * w + x + 1] + plane[(y + 1) * w + x] + plane[(y + 1) * w + x + 1]);
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], data)?;
        Ok(self.push(out, Op::AvgPool2(x.0), &[x.0]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(x.0), &[x.0])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x.0), &[x.0])
    }

    /// `x[N×C×H×W] · s[N×C]` per channel.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, c, h, w) = require_4d("scale_channels", self.shape(x))?;
        if self.shape(s) != [n, c] {
            return Err(shape_err("scale_channels", format!("scale {:?} for {:?}", self.shape(s), self.shape(x))));
        }
        let scale = self.data(s);
        let plane = h * w;
        let data = self.data(x).iter().enumerate().map(|(i, &v)| v * scale[i / plane]).collect();
        let out = self.with_shape_of(x, data);
        Ok(self.push(out, Op::ScaleChannels(x.0, s.0), &[x.0, s.0]))
    }

    /// `x[N×C×H×W] · m[N×1×H×W]` per pixel.
    pub fn scale_spatial(&mut self, x: Var, m: Var) -> Result<Var> {
        let (n, c, h, w) = require_4d("scale_spatial", self.shape(x))?;
        if self.shape(m) != [n, 1, h, w] {
            return Err(shape_err("scale_spatial", format!("mask {:?} for {:?}", self.shape(m), self.shape(x))));
        }
        let mask = self.data(m);
        let plane = h * w;
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * mask[(i / (c * plane)) * plane + i % plane])
            .collect();
        let out = self.with_shape_of(x, data);
        Ok(self.push(out, Op::ScaleSpatial(x.0, m.0), &[x.0, m.0]))
    }

    /// Mean over pixels: `N×C×H×W → N×C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = require_4d("global_avg_pool", self.shape(x))?;
        let inv = T::one() / T::lit((h * w) as f64);
        let data = self.data(x).chunks(h * w).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let out = Tensor::new(vec![n, c], data)?;
        Ok(self.push(out, Op::GlobalAvgPool(x.0), &[x.0]))
    }

    /// Mean over channels: `N×C×H×W → N×1×H×W`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = require_4d("channel_mean", self.shape(x))?;
        let plane = h * w;
        let inv = T::one() / T::lit(c as f64);
        let src = self.data(x);
        let mut data = vec![T::zero(); n * plane];
        for s in 0..n {
            let out = &mut data[s * plane..(s + 1) * plane];
            for ch in 0..c {
                let p = &src[(s * c + ch) * plane..(s * c + ch + 1) * plane];
                for (o, &v) in out.iter_mut().zip(p) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|o| *o *= inv);
        }
        let out = Tensor::new(vec![n, 1, h, w], data)?;
        Ok(self.push(out, Op::ChannelMean(x.0), &[x.0]))
    }

    /// Concatenates 2-D tensors along columns, in argument order.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(shape_err("concat", "no inputs"));
        };
        let rows = require_2d("concat", self.shape(*first))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = require_2d("concat", self.shape(p))?;
            if r != rows {
                return Err(shape_err("concat", format!("row counts {rows} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &c) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.data(p)[i * c..(i + 1) * c]);
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(out, Op::Concat(idx.clone()), &idx))
    }

    /// Gathers rows of a 2-D tensor (indices may repeat).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = require_2d("select_rows", self.shape(x))?;
        if rows.is_empty() {
            return Err(Error::EmptyBatch("select_rows"));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(shape_err("select_rows", format!("row {bad} of {r}")));
        }
        let src = self.data(x);
        let data = rows.iter().flat_map(|&i| src[i * c..(i + 1) * c].iter().copied()).collect();
        let out = Tensor::new(vec![rows.len(), c], data)?;
        Ok(self.push(out, Op::SelectRows(x.0, rows.to_vec()), &[x.0]))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).softmax_rows()?;
        Ok(self.push(out, Op::Softmax(x.0), &[x.0]))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (_, c) = require_2d("log_softmax", self.shape(x))?;
        let mut data = self.data(x).to_vec();
        data.chunks_mut(c).for_each(kernels::log_softmax_in_place);
        let out = self.with_shape_of(x, data);
        Ok(self.push(out, Op::LogSoftmax(x.0), &[x.0]))
    }

    /// Mean over rows of `-log softmax(logits)[target]`, fused for stability.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = require_2d("cross_entropy", self.shape(logits))?;
        if targets.len() != n {
            return Err(shape_err("cross_entropy", format!("{} targets for {n} rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Argument { op: "cross_entropy", detail: format!("class {bad} of {c}") });
        }
        let mut logp = self.data(logits).to_vec();
        logp.chunks_mut(c).for_each(kernels::log_softmax_in_place);
        let loss = -targets.iter().enumerate().map(|(i, &t)| logp[i * c + t]).sum::<T>() / T::lit(n as f64);
        let probs = logp.into_iter().map(T::exp).collect();
        let op = Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), probs };
        Ok(self.push(Tensor::scalar(loss), op, &[logits.0]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(x.0), &[x.0])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::lit(self.value(x).len() as f64);
        let total = self.data(x).iter().copied().sum::<T>() / n;
        self.push(Tensor::scalar(total), Op::Mean(x.0), &[x.0])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x.0, factor), &[x.0])
    }

    /// Sums same-shaped terms; a convenience over repeated [`Tape::add`].
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms.split_first().ok_or_else(|| shape_err("add_all", "no terms"))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Scales each row of a 2-D tensor to unit Euclidean norm (zero rows stay zero).
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let (_, c) = require_2d("l2_normalize", self.shape(x))?;
        let eps = T::lit(1e-12);
        let mut norms = Vec::new();
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(c) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let out = self.with_shape_of(x, data);
        Ok(self.push(out, Op::L2Normalize { x: x.0, norms }, &[x.0]))
    }

    /// Batch-hard triplet loss over the rows of `embeddings`.
    ///
    /// For each anchor that has at least one positive and one negative in the
    /// batch: `max(0, max_pos d(a,p) - min_neg d(a,n) + margin)` with Euclidean
    /// `d`; the result is the mean over those anchors. Ties pick the lowest index.
    pub fn batch_hard_triplet(&mut self, embeddings: Var, labels: &[usize], margin: T) -> Result<Var> {
        let (n, d) = require_2d("batch_hard_triplet", self.shape(embeddings))?;
        if labels.len() != n {
            return Err(shape_err("batch_hard_triplet", format!("{} labels for {n} rows", labels.len())));
        }
        let e = self.data(embeddings);
        let dist = |i: usize, j: usize| {
            e[i * d..(i + 1) * d]
                .iter()
                .zip(&e[j * d..(j + 1) * d])
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<T>()
                .sqrt()
        };
        let mut total = T::zero();
        let mut anchors = 0usize;
        let mut active = Vec::new();
        for a in 0..n {
            let mut hard_pos: Option<(usize, T)> = None;
            let mut hard_neg: Option<(usize, T)> = None;
            for j in (0..n).filter(|&j| j != a) {
                let dj = dist(a, j);
                if labels[j] == labels[a] {
                    if hard_pos.is_none_or(|(_, best)| dj > best) {
                        hard_pos = Some((j, dj));
                    }
                } else if hard_neg.is_none_or(|(_, best)| dj < best) {
                    hard_neg = Some((j, dj));
                }
            }
            if let (Some((p, dp)), Some((q, dq))) = (hard_pos, hard_neg) {
                anchors += 1;
                let term = dp - dq + margin;
                if term > T::zero() {
                    total += term;
                    active.push((a, p, q));
                }
            }
        }
        if anchors == 0 {
            return Err(Error::Argument {
                op: "batch_hard_triplet",
                detail: "degenerate batch: no anchor has both a positive and a negative".into(),
            });
        }
        let loss = total / T::lit(anchors as f64);
        let op = Op::Triplet { x: embeddings.0, active, anchors };
        Ok(self.push(Tensor::scalar(loss), op, &[embeddings.0]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x.0), &[x.0]))
    }

    /// Reverse-mode pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and adds parameter gradients into `store`.
    /// Repeated calls accumulate until [`ParamStore::zero_grad`].
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.backward(loss)?;
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Some(id), Some(g)) = (node.param, g) {
                store.accumulate(id, g);
            }
        }
        Ok(grads)
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn backprop(&self, node: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let acc = |grads: &mut [Option<Vec<T>>], i: usize, d: Vec<T>| match &mut grads[i] {
            Some(existing) => existing.iter_mut().zip(d).for_each(|(e, v)| *e += v),
            slot @ None => *slot = Some(d),
        };
        let out = &self.nodes[node].value;
        match &self.nodes[node].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k, n) = matmul_dims(self.nodes[*a].value.shape(), self.nodes[*b].value.shape())
                    .expect("validated on record");
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::gemm_nt(m, n, k, g, self.nodes[*b].value.data(), &mut da);
                    acc(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::gemm_tn(k, m, n, self.nodes[*a].value.data(), g, &mut db);
                    acc(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    acc(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    acc(grads, *b, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                if self.wants(*a) {
                    acc(grads, *a, g.iter().zip(bv).map(|(&d, &y)| d * y).collect());
                }
                if self.wants(*b) {
                    acc(grads, *b, g.iter().zip(av).map(|(&d, &x)| d * x).collect());
                }
            }
            Op::AddRowBias(x, b) => {
                if self.wants(*x) {
                    acc(grads, *x, g.to_vec());
                }
                if self.wants(*b) {
                    let d = self.nodes[*b].value.len();
                    let mut db = vec![T::zero(); d];
                    for row in g.chunks(d) {
                        db.iter_mut().zip(row).for_each(|(s, &v)| *s += v);
                    }
                    acc(grads, *b, db);
                }
            }
            Op::AddChannelBias(x, b) => {
                if self.wants(*x) {
                    acc(grads, *x, g.to_vec());
                }
                if self.wants(*b) {
                    let shape = out.shape();
                    let (c, plane) = (shape[1], shape[2] * shape[3]);
                    let mut db = vec![T::zero(); c];
                    for (i, p) in g.chunks(plane).enumerate() {
                        db[i % c] += p.iter().copied().sum::<T>();
                    }
                    acc(grads, *b, db);
                }
            }
            Op::Conv2d { x, w, geom } => {
                let batch = out.shape()[0];
                let k = out.shape()[1];
                let (dx, dw) = kernels::conv2d_backward(
                    geom,
                    batch,
                    k,
                    self.nodes[*x].value.data(),
                    self.nodes[*w].value.data(),
                    g,
                    self.wants(*x),
                    self.wants(*w),
                );
                if let Some(dx) = dx {
                    acc(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    acc(grads, *w, dw);
                }
            }
            Op::AvgPool2(x) => {
                let shape = self.nodes[*x].value.shape();
                let (h, w) = (shape[2], shape[3]);
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::lit(0.25);
                let mut dx = vec![T::zero(); self.nodes[*x].value.len()];
                for (plane, gp) in dx.chunks_mut(h * w).zip(g.chunks(oh * ow)) {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let v = gp[oy * ow + ox] * quarter;
                            let (y, xx) = (2 * oy, 2 * ox);
                            plane[y * w + xx] += v;
                            plane[y * w + xx + 1] += v;
                            plane[(y + 1) * w + xx] += v;
                            plane[(y + 1) * w + xx + 1] += v;
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Relu(x) => {
                let xv = self.nodes[*x].value.data();
                acc(grads, *x, g.iter().zip(xv).map(|(&d, &v)| if v > T::zero() { d } else { T::zero() }).collect());
            }
            Op::Sigmoid(x) => {
                let y = out.data();
                acc(grads, *x, g.iter().zip(y).map(|(&d, &s)| d * s * (T::one() - s)).collect());
            }
            Op::ScaleChannels(x, s) => {
                let plane = out.shape()[2] * out.shape()[3];
                let (xv, sv) = (self.nodes[*x].value.data(), self.nodes[*s].value.data());
                if self.wants(*x) {
                    acc(grads, *x, g.iter().enumerate().map(|(i, &d)| d * sv[i / plane]).collect());
                }
                if self.wants(*s) {
                    let ds = g
                        .chunks(plane)
                        .zip(xv.chunks(plane))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(&a, &b)| a * b).sum::<T>())
                        .collect();
                    acc(grads, *s, ds);
                }
            }
            Op::ScaleSpatial(x, m) => {
                let shape = out.shape();
                let (c, plane) = (shape[1], shape[2] * shape[3]);
                let (xv, mv) = (self.nodes[*x].value.data(), self.nodes[*m].value.data());
                let mask_at = |i: usize| (i / (c * plane)) * plane + i % plane;
                if self.wants(*x) {
                    acc(grads, *x, g.iter().enumerate().map(|(i, &d)| d * mv[mask_at(i)]).collect());
                }
                if self.wants(*m) {
                    let mut dm = vec![T::zero(); mv.len()];
                    for (i, (&d, &v)) in g.iter().zip(xv).enumerate() {
                        dm[mask_at(i)] += d * v;
                    }
                    acc(grads, *m, dm);
                }
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.nodes[*x].value.shape();
                let plane = shape[2] * shape[3];
                let inv = T::one() / T::lit(plane as f64);
                acc(grads, *x, g.iter().flat_map(|&d| std::iter::repeat_n(d * inv, plane)).collect());
            }
            Op::ChannelMean(x) => {
                let shape = self.nodes[*x].value.shape();
                let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
                let inv = T::one() / T::lit(c as f64);
                let mut dx = Vec::with_capacity(n * c * plane);
                for s in 0..n {
                    let gp = &g[s * plane..(s + 1) * plane];
                    for _ in 0..c {
                        dx.extend(gp.iter().map(|&d| d * inv));
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Concat(parts) => {
                let rows = out.shape()[0];
                let total = out.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let c = self.nodes[p].value.shape()[1];
                    if self.wants(p) {
                        let dp = (0..rows)
                            .flat_map(|i| g[i * total + offset..i * total + offset + c].iter().copied())
                            .collect();
                        acc(grads, p, dp);
                    }
                    offset += c;
                }
            }
            Op::SelectRows(x, rows) => {
                let c = out.shape()[1];
                let mut dx = vec![T::zero(); self.nodes[*x].value.len()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        dx[r * c + j] += g[k * c + j];
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Softmax(x) => {
                let c = out.shape()[1];
                let mut dx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(c).zip(out.data().chunks(c)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    dx.extend(gr.iter().zip(yr).map(|(&a, &y)| y * (a - dot)));
                }
                acc(grads, *x, dx);
            }
            Op::LogSoftmax(x) => {
                let c = out.shape()[1];
                let mut dx = Vec::with_capacity(g.len());
                for (gr, lr) in g.chunks(c).zip(out.data().chunks(c)) {
                    let total: T = gr.iter().copied().sum();
                    dx.extend(gr.iter().zip(lr).map(|(&a, &l)| a - l.exp() * total));
                }
                acc(grads, *x, dx);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = probs.len() / targets.len();
                let scale = g[0] / T::lit(targets.len() as f64);
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    dx[i * c + t] -= scale;
                }
                acc(grads, *logits, dx);
            }
            Op::Sum(x) => {
                acc(grads, *x, vec![g[0]; self.nodes[*x].value.len()]);
            }
            Op::Mean(x) => {
                let n = self.nodes[*x].value.len();
                acc(grads, *x, vec![g[0] / T::lit(n as f64); n]);
            }
            Op::Scale(x, f) => {
                acc(grads, *x, g.iter().map(|&d| d * *f).collect());
            }
            Op::L2Normalize { x, norms } => {
                let c = out.shape()[1];
                let mut dx = Vec::with_capacity(g.len());
                for ((gr, yr), &norm) in g.chunks(c).zip(out.data().chunks(c)).zip(norms) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    dx.extend(gr.iter().zip(yr).map(|(&a, &y)| (a - y * dot) / norm));
                }
                acc(grads, *x, dx);
            }
            Op::Triplet { x, active, anchors } => {
                let e = self.nodes[*x].value.data();
                let d = self.nodes[*x].value.shape()[1];
                let coef = g[0] / T::lit(*anchors as f64);
                let mut dx = vec![T::zero(); e.len()];
                let pull = |i: usize, j: usize, sign: T, dx: &mut Vec<T>| {
                    let diff: Vec<T> = (0..d).map(|t| e[i * d + t] - e[j * d + t]).collect();
                    let norm = diff.iter().map(|&v| v * v).sum::<T>().sqrt();
                    if norm > T::zero() {
                        for (t, &v) in diff.iter().enumerate() {
                            let q = sign * coef * v / norm;
                            dx[i * d + t] += q;
                            dx[j * d + t] -= q;
                        }
                    }
                };
                for &(a, p, n) in active {
                    pull(a, p, T::one(), &mut dx);
                    pull(a, n, -T::one(), &mut dx);
                }
                acc(grads, *x, dx);
            }
            Op::Reshape(x) => {
                acc(grads, *x, g.to_vec());
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
