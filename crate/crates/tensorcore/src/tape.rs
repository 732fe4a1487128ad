use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Param,
    Conv2d,
    Relu,
    Add,
    Mul,
    MaxPool2,
    GlobalAvgPool,
    Dense,
    ConcatChannels,
    Stack,
    Sum,
    SoftmaxCrossEntropy,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv2d {
        input: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu(usize),
    Add(usize, usize),
    Mul(usize, usize),
    MaxPool2 {
        input: usize,
        argmax: Vec<u32>,
    },
    GlobalAvgPool(usize),
    Dense {
        input: usize,
        weight: usize,
        bias: usize,
    },
    ConcatChannels(Vec<usize>),
    Stack(Vec<usize>),
    Sum(usize),
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Param(_) => OpKind::Param,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Relu(_) => OpKind::Relu,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::MaxPool2 { .. } => OpKind::MaxPool2,
            Op::GlobalAvgPool(_) => OpKind::GlobalAvgPool,
            Op::Dense { .. } => OpKind::Dense,
            Op::ConcatChannels(_) => OpKind::ConcatChannels,
            Op::Stack(_) => OpKind::Stack,
            Op::Sum(_) => OpKind::Sum,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::Relu(a) | Op::GlobalAvgPool(a) | Op::Sum(a) => vec![*a],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::MaxPool2 { input, .. } => vec![*input],
            Op::Dense {
                input,
                weight,
                bias,
            } => vec![*input, *weight, *bias],
            Op::ConcatChannels(xs) | Op::Stack(xs) => xs.clone(),
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run record of primitive applications.
///
/// Nodes are appended in evaluation order, so the record is topologically
/// sorted by construction and [`Tape::backward`] is a single reverse sweep.
#[derive(Debug)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// `(kind, input ids, output id)` for every recorded entry, in order.
    pub fn entries(&self) -> impl Iterator<Item = (OpKind, Vec<usize>, usize)> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.op.kind(), n.op.inputs(), i))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable parameter; the current value is copied onto the tape.
    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: params.value(id).clone(),
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let x = self.value(input);
        let k = self.value(kernel);
        let geom = ConvGeom::new(x.shape(), k.shape(), stride, pad)?;
        let p = geom.p();
        let mut out = vec![T::zero(); geom.n * geom.f * p];
        for (n0, m) in geom.chunks() {
            let mp = m * p;
            let cols = geom.chunk_im2col(x.data(), n0, m);
            // [F, m*P] = K[F, CKK] * cols[CKK, m*P], then reorder to [m, F, P]
            let mut tmp = vec![T::zero(); geom.f * mp];
            T::gemm(
                geom.f,
                geom.ckk(),
                mp,
                k.data(),
                (geom.ckk() as isize, 1),
                &cols,
                (mp as isize, 1),
                T::zero(),
                &mut tmp,
                (mp as isize, 1),
            );
            for f in 0..geom.f {
                for i in 0..m {
                    let dst = ((n0 + i) * geom.f + f) * p;
                    out[dst..dst + p].copy_from_slice(&tmp[f * mp + i * p..f * mp + (i + 1) * p]);
                }
            }
        }
        let value = Tensor::new([geom.n, geom.f, geom.oh, geom.ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                stride,
                pad,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu(x.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a.0, b.0)))
    }

    fn zip(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape(), data)
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let [n, c, h, w] = rank4("max_pool2", t.shape())?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(TensorError::Invalid(format!(
                "max_pool2: spatial extent {h}x{w} too small"
            )));
        }
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let src = t.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let value = Tensor::new([n, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool2 { input: x.0, argmax }))
    }

    /// Mean over the spatial axes: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let [n, c, h, w] = rank4("global_avg_pool", t.shape())?;
        let hw = h * w;
        let scale = T::of(1.0 / hw as f64);
        let data = t
            .data()
            .chunks_exact(hw)
            .map(|plane| plane.iter().copied().sum::<T>() * scale)
            .collect();
        let value = Tensor::new([n, c], data)?;
        Ok(self.push(value, Op::GlobalAvgPool(x.0)))
    }

    /// Affine map `x[N,D] * w[K,D]^T + b[K]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (n, d, k) = match (tx.shape(), tw.shape(), tb.shape()) {
            ([n, d], [k, d2], [k2]) if d == d2 && k == k2 => (*n, *d, *k),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "dense",
                    left: tx.shape().to_vec(),
                    right: tw.shape().to_vec(),
                })
            }
        };
        let mut out: Vec<T> = (0..n).flat_map(|_| tb.data().iter().copied()).collect();
        T::gemm(
            n,
            d,
            k,
            tx.data(),
            (d as isize, 1),
            tw.data(),
            (1, d as isize),
            T::one(),
            &mut out,
            (k as isize, 1),
        );
        let value = Tensor::new([n, k], out)?;
        Ok(self.push(
            value,
            Op::Dense {
                input: x.0,
                weight: w.0,
                bias: b.0,
            },
        ))
    }

    /// Concatenation along axis 1 of tensors that agree on every other axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_channels: no inputs".into()))?;
        let s0 = self.value(*first).shape().to_vec();
        if s0.len() < 2 {
            return Err(TensorError::Invalid(format!(
                "concat_channels needs rank >= 2, got {s0:?}"
            )));
        }
        let mut channels = 0;
        for v in xs {
            let s = self.value(*v).shape();
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    left: s0.clone(),
                    right: s.to_vec(),
                });
            }
            channels += s[1];
        }
        let inner: usize = s0[2..].iter().product();
        let mut data = Vec::with_capacity(s0[0] * channels * inner);
        for n in 0..s0[0] {
            for v in xs {
                let t = self.value(*v);
                let block = t.shape()[1] * inner;
                data.extend_from_slice(&t.data()[n * block..(n + 1) * block]);
            }
        }
        let mut shape = s0.clone();
        shape[1] = channels;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::ConcatChannels(xs.iter().map(|v| v.0).collect())))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::Invalid("stack: no inputs".into()))?;
        let s0 = self.value(*first).shape().to_vec();
        let mut data = Vec::with_capacity(xs.len() * self.value(*first).numel());
        for v in xs {
            let t = self.value(*v);
            if t.shape() != s0.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    left: s0.clone(),
                    right: t.shape().to_vec(),
                });
            }
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![xs.len()];
        shape.extend_from_slice(&s0);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Stack(xs.iter().map(|v| v.0).collect())))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(total), Op::Sum(x.0))
    }

    /// Batch mean of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (n, k) = match t.shape() {
            [n, k] if *n == labels.len() => (*n, *k),
            s => {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax_cross_entropy",
                    left: s.to_vec(),
                    right: vec![labels.len()],
                })
            }
        };
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::LabelOutOfRange { label, classes: k });
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut total = T::zero();
        for (row, &label) in t.data().chunks_exact(k).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|&z| (z - max).exp()).collect();
            let denom = exps.iter().copied().sum::<T>();
            // -log p[label] = log(sum exp(z - max)) - (z[label] - max)
            total = total + (denom.ln() - (row[label] - max));
            probs.extend(exps.into_iter().map(|e| e / denom));
        }
        let value = Tensor::scalar(total / T::of(n as f64));
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(TensorError::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .take(loss.0 + 1)
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Relu(x) => {
                let out = node.value.data();
                self.accumulate(grads, *x, |acc| {
                    for ((a, &gi), &o) in acc.iter_mut().zip(g).zip(out) {
                        if o > T::zero() {
                            *a = *a + gi;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for &input in [a, b] {
                    self.accumulate(grads, input, |acc| add_into(acc, g));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                self.accumulate(grads, *a, |acc| {
                    for ((x, &gi), &y) in acc.iter_mut().zip(g).zip(vb) {
                        *x = *x + gi * y;
                    }
                });
                self.accumulate(grads, *b, |acc| {
                    for ((x, &gi), &y) in acc.iter_mut().zip(g).zip(va) {
                        *x = *x + gi * y;
                    }
                });
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, |acc| {
                    for a in acc.iter_mut() {
                        *a = *a + g[0];
                    }
                });
            }
            Op::MaxPool2 { input, argmax } => {
                self.accumulate(grads, *input, |acc| {
                    for (&src, &gi) in argmax.iter().zip(g) {
                        acc[src as usize] = acc[src as usize] + gi;
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let s = self.nodes[*x].value.shape();
                let hw = s[2] * s[3];
                let scale = T::of(1.0 / hw as f64);
                self.accumulate(grads, *x, |acc| {
                    for (plane, &gi) in acc.chunks_exact_mut(hw).zip(g) {
                        let v = gi * scale;
                        for a in plane {
                            *a = *a + v;
                        }
                    }
                });
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let (tx, tw) = (&self.nodes[*input].value, &self.nodes[*weight].value);
                let (n, d) = (tx.shape()[0], tx.shape()[1]);
                let k = tw.shape()[0];
                self.accumulate(grads, *input, |acc| {
                    T::gemm(
                        n,
                        k,
                        d,
                        g,
                        (k as isize, 1),
                        tw.data(),
                        (d as isize, 1),
                        T::one(),
                        acc,
                        (d as isize, 1),
                    )
                });
                self.accumulate(grads, *weight, |acc| {
                    T::gemm(
                        k,
                        n,
                        d,
                        g,
                        (1, k as isize),
                        tx.data(),
                        (d as isize, 1),
                        T::one(),
                        acc,
                        (d as isize, 1),
                    )
                });
                self.accumulate(grads, *bias, |acc| {
                    for row in g.chunks_exact(k) {
                        add_into(acc, row);
                    }
                });
            }
            Op::ConcatChannels(xs) => {
                let s = node.value.shape();
                let inner: usize = s[2..].iter().product();
                let total = s[1] * inner;
                let mut offset = 0;
                for &x in xs {
                    let block = self.nodes[x].value.shape()[1] * inner;
                    self.accumulate(grads, x, |acc| {
                        for (dst, src) in acc.chunks_exact_mut(block).zip(g.chunks_exact(total)) {
                            add_into(dst, &src[offset..offset + block]);
                        }
                    });
                    offset += block;
                }
            }
            Op::Stack(xs) => {
                let len = self.nodes[xs[0]].value.numel();
                for (i, &x) in xs.iter().enumerate() {
                    self.accumulate(grads, x, |acc| add_into(acc, &g[i * len..(i + 1) * len]));
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.nodes[*logits].value.shape()[1];
                let scale = g[0] / T::of(labels.len() as f64);
                self.accumulate(grads, *logits, |acc| {
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..k {
                            let target = if c == label { T::one() } else { T::zero() };
                            let i = r * k + c;
                            acc[i] = acc[i] + (probs[i] - target) * scale;
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            } => self.conv2d_backward(*input, *kernel, *stride, *pad, g, grads),
        }
    }

    fn conv2d_backward(
        &self,
        input: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (x, k) = (&self.nodes[input].value, &self.nodes[kernel].value);
        let geom = ConvGeom::new(x.shape(), k.shape(), stride, pad)
            .expect("geometry was validated in the forward pass");
        let (p, ckk, f) = (geom.p(), geom.ckk(), geom.f);
        let need_dx = self.nodes[input].requires_grad;
        let need_dk = self.nodes[kernel].requires_grad;
        let mut dk = need_dk.then(|| vec![T::zero(); f * ckk]);
        let mut dx = need_dx.then(|| vec![T::zero(); x.numel()]);
        for (n0, m) in geom.chunks() {
            let mp = m * p;
            // dOut of the chunk as [F, m*P]
            let mut gt = vec![T::zero(); f * mp];
            for fi in 0..f {
                for i in 0..m {
                    let src = ((n0 + i) * f + fi) * p;
                    gt[fi * mp + i * p..fi * mp + (i + 1) * p].copy_from_slice(&g[src..src + p]);
                }
            }
            if let Some(dk) = dk.as_mut() {
                let cols = geom.chunk_im2col(x.data(), n0, m);
                // dK += dOut[F, m*P] * cols^T
                T::gemm(
                    f,
                    mp,
                    ckk,
                    &gt,
                    (mp as isize, 1),
                    &cols,
                    (1, mp as isize),
                    T::one(),
                    dk,
                    (ckk as isize, 1),
                );
            }
            if let Some(dx) = dx.as_mut() {
                let mut dcols = vec![T::zero(); ckk * mp];
                // dcols = K^T * dOut
                T::gemm(
                    ckk,
                    f,
                    mp,
                    k.data(),
                    (1, ckk as isize),
                    &gt,
                    (mp as isize, 1),
                    T::zero(),
                    &mut dcols,
                    (mp as isize, 1),
                );
                for i in 0..m {
                    let n = n0 + i;
                    let dxs = &mut dx[n * geom.sample_len()..(n + 1) * geom.sample_len()];
                    geom.col2im(&dcols, mp, i * p, dxs);
                }
            }
        }
        if let Some(dk) = dk {
            self.accumulate(grads, kernel, |acc| add_into(acc, &dk));
        }
        if let Some(dx) = dx {
            self.accumulate(grads, input, |acc| add_into(acc, &dx));
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], target: usize, f: impl FnOnce(&mut [T])) {
        if !self.nodes[target].requires_grad {
            return;
        }
        let len = self.nodes[target].value.numel();
        let acc = grads[target].get_or_insert_with(|| vec![T::zero(); len]);
        f(acc);
    }
}

fn add_into<T: Element>(acc: &mut [T], src: &[T]) {
    for (a, &s) in acc.iter_mut().zip(src) {
        *a = *a + s;
    }
}

fn rank4(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    shape.try_into().map_err(|_| {
        TensorError::Invalid(format!(
            "{op} expects a rank-4 [N,C,H,W] tensor, got {shape:?}"
        ))
    })
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T = f32> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the loss w.r.t. a recorded value, if it participated.
    pub fn wrt(&self, tape: &Tape<T>, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(tape.value(v).shape(), g.clone()).ok()
    }

    /// Writes a gradient for every parameter in `params`; parameters that did
    /// not take part in the loss receive an exact zero.
    pub fn store_into(&self, params: &mut ParamSet<T>) {
        let mut sums: Vec<Option<Vec<T>>> = vec![None; params.len()];
        for &(id, node) in &self.params {
            if let Some(g) = self.grads[node].as_ref() {
                match sums[id.0].as_mut() {
                    Some(acc) => add_into(acc, g),
                    None => sums[id.0] = Some(g.clone()),
                }
            }
        }
        for (p, sum) in params.iter_mut().zip(sums) {
            let shape = p.value.shape().to_vec();
            p.grad = Some(match sum {
                Some(g) => Tensor::new(shape, g).expect("gradient matches parameter shape"),
                None => Tensor::zeros(shape),
            });
        }
    }
}

const CONV_CHUNK_ELEMS: usize = 1 << 15;

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv2d",
            left: x.to_vec(),
            right: k.to_vec(),
        };
        let (&[n, c, h, w], &[f, kc, kh, kw]) = (x, k) else {
            return Err(mismatch());
        };
        if c != kc || stride == 0 || kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(mismatch());
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Source column for output column `o` and kernel offset `j`, if inside the image.
    #[inline]
    fn src(&self, o: usize, j: usize, extent: usize) -> Option<usize> {
        (o * self.stride + j)
            .checked_sub(self.pad)
            .filter(|&v| v < extent)
    }

    /// Sample ranges `(start, count)` sized so one chunk's columns stay cache-sized.
    fn chunks(&self) -> impl Iterator<Item = (usize, usize)> {
        let per_sample = (self.ckk() * self.p()).max(1);
        let m = (CONV_CHUNK_ELEMS / per_sample).clamp(1, self.n);
        let n = self.n;
        (0..n).step_by(m).map(move |n0| (n0, m.min(n - n0)))
    }

    /// Columns `[C*kh*kw, m*P]` of samples `n0..n0+m`.
    fn chunk_im2col<T: Element>(&self, x: &[T], n0: usize, m: usize) -> Vec<T> {
        let mp = m * self.p();
        let mut cols = vec![T::zero(); self.ckk() * mp];
        for i in 0..m {
            let n = n0 + i;
            let xs = &x[n * self.sample_len()..(n + 1) * self.sample_len()];
            self.im2col(xs, &mut cols, mp, i * self.p());
        }
        cols
    }

    fn im2col<T: Element>(&self, x: &[T], cols: &mut [T], ld: usize, offset: usize) {
        let p = self.p();
        let mut row = 0;
        for c in 0..self.c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let dst = &mut cols[row * ld + offset..row * ld + offset + p];
                    for oy in 0..self.oh {
                        let out_row = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        match self.src(oy, i, self.h) {
                            None => out_row.fill(T::zero()),
                            Some(sy) => {
                                let src_row = &plane[sy * self.w..(sy + 1) * self.w];
                                for (ox, d) in out_row.iter_mut().enumerate() {
                                    *d = match self.src(ox, j, self.w) {
                                        Some(sx) => src_row[sx],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im<T: Element>(&self, cols: &[T], ld: usize, offset: usize, dx: &mut [T]) {
        let p = self.p();
        let mut row = 0;
        for c in 0..self.c {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let src = &cols[row * ld + offset..row * ld + offset + p];
                    for oy in 0..self.oh {
                        let Some(sy) = self.src(oy, i, self.h) else {
                            continue;
                        };
                        for ox in 0..self.ow {
                            if let Some(sx) = self.src(ox, j, self.w) {
                                let d = &mut plane[sy * self.w + sx];
                                *d = *d + src[oy * self.ow + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}
