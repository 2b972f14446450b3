//! Reverse-mode autodiff over a flat tape.
//!
//! Values are computed eagerly as ops are pushed; `backward` walks the tape
//! in reverse and accumulates gradients for every node that (transitively)
//! depends on a differentiable leaf. Nodes built only from constants carry
//! `needs_grad = false` and are skipped, so frozen networks cost no gradient
//! state.

use super::kernels;
use super::Tensor;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Id(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    AddScalar(Id),
    MulScalar(Id, f64),
    Abs(Id),
    Log(Id),
    Exp(Id),
    Sqrt(Id),
    Recip(Id),
    Clamp(Id, f64, f64),
    LeakyRelu(Id, f64),
    Sigmoid(Id),
    Tanh(Id),
    Conv2d { x: Id, w: Id, b: Id, stride: usize, pad: usize },
    ConvT2d { x: Id, w: Id, b: Id, stride: usize, pad: usize },
    MatMul(Id, Id),
    Transpose(Id),
    Reshape(Id),
    ConcatC(Vec<Id>),
    Row(Id, usize),
    AddRow(Id, Id),
    MulChan(Id, Id),
    AddChan(Id, Id),
    MulPos(Id, Id),
    AddPos(Id, Id),
    MeanAll(Id),
    SumAll(Id),
    MeanSpatial(Id),
    MeanChans(Id),
    SumChans(Id),
    SoftmaxChans(Id),
    LogSoftmaxChans(Id),
    SoftmaxRows(Id),
    MaxPool2x2 { x: Id, idx: Vec<u32> },
    Upsample2x(Id),
    /// Subsample by integer factor, picking the center of each block.
    DownsampleNearest { x: Id, factor: usize },
    /// Masked per-region spatial mean with a global-mean fallback.
    /// mask: constant [N,h,w] one-hot region indicators. Output [N,C].
    RegionPool { feat: Id, mask: Tensor, mode: RegionPoolMode },
}

/// How absent regions (empty masks) are encoded in the pooled table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegionPoolMode {
    /// Present regions get their masked mean; absent regions the global mean.
    JointGlobalLocal,
    /// Every region gets the global mean.
    GlobalOnly,
    /// Present regions get their masked mean; absent regions zero.
    LocalZero,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by `Tape::backward`.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, id: Id) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: Id) -> Option<Tensor> {
        self.grads[id.0].take()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: Id) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn needs_grad(&self, id: Id) -> bool {
        self.nodes[id.0].needs_grad
    }

    // Non-finite values are allowed to flow; training checks its loss and
    // aborts with a snapshot rather than panicking mid-graph.
    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Id {
        self.nodes.push(Node { value, op, needs_grad });
        Id(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[Id]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].needs_grad)
    }

    /// Differentiable leaf (parameter or trainable input).
    pub fn leaf(&mut self, t: Tensor) -> Id {
        self.push(t, Op::Leaf, true)
    }

    /// Non-differentiable leaf (data, frozen weights).
    pub fn constant(&mut self, t: Tensor) -> Id {
        self.push(t, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Id, b: Id) -> Id {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Id, b: Id) -> Id {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Id, b: Id) -> Id {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::Mul(a, b), g)
    }

    pub fn add_scalar(&mut self, a: Id, c: f64) -> Id {
        let v = self.value(a).map(|x| x + c);
        let g = self.any_grad(&[a]);
        self.push(v, Op::AddScalar(a), g)
    }

    pub fn mul_scalar(&mut self, a: Id, c: f64) -> Id {
        let v = self.value(a).map(|x| x * c);
        let g = self.any_grad(&[a]);
        self.push(v, Op::MulScalar(a, c), g)
    }

    pub fn abs(&mut self, a: Id) -> Id {
        let v = self.value(a).map(f64::abs);
        let g = self.any_grad(&[a]);
        self.push(v, Op::Abs(a), g)
    }

    pub fn log(&mut self, a: Id) -> Id {
        let v = self.value(a).map(f64::ln);
        let g = self.any_grad(&[a]);
        self.push(v, Op::Log(a), g)
    }

    pub fn exp(&mut self, a: Id) -> Id {
        let v = self.value(a).map(f64::exp);
        let g = self.any_grad(&[a]);
        self.push(v, Op::Exp(a), g)
    }

    pub fn sqrt(&mut self, a: Id) -> Id {
        let v = self.value(a).map(f64::sqrt);
        let g = self.any_grad(&[a]);
        self.push(v, Op::Sqrt(a), g)
    }

    pub fn recip(&mut self, a: Id) -> Id {
        let v = self.value(a).map(|x| 1.0 / x);
        let g = self.any_grad(&[a]);
        self.push(v, Op::Recip(a), g)
    }

    pub fn clamp(&mut self, a: Id, lo: f64, hi: f64) -> Id {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        let g = self.any_grad(&[a]);
        self.push(v, Op::Clamp(a, lo, hi), g)
    }

    pub fn leaky_relu(&mut self, a: Id, slope: f64) -> Id {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let g = self.any_grad(&[a]);
        self.push(v, Op::LeakyRelu(a, slope), g)
    }

    pub fn relu(&mut self, a: Id) -> Id {
        self.leaky_relu(a, 0.0)
    }

    pub fn sigmoid(&mut self, a: Id) -> Id {
        let v = self.value(a).map(sigmoid);
        let g = self.any_grad(&[a]);
        self.push(v, Op::Sigmoid(a), g)
    }

    pub fn tanh(&mut self, a: Id) -> Id {
        let v = self.value(a).map(f64::tanh);
        let g = self.any_grad(&[a]);
        self.push(v, Op::Tanh(a), g)
    }

    pub fn conv2d(&mut self, x: Id, w: Id, b: Id, stride: usize, pad: usize) -> Id {
        let v = kernels::conv2d(self.value(x), self.value(w), self.value(b), stride, pad);
        let g = self.any_grad(&[x, w, b]);
        self.push(v, Op::Conv2d { x, w, b, stride, pad }, g)
    }

    pub fn conv_transpose2d(&mut self, x: Id, w: Id, b: Id, stride: usize, pad: usize) -> Id {
        let v = kernels::conv_transpose2d(self.value(x), self.value(w), self.value(b), stride, pad);
        let g = self.any_grad(&[x, w, b]);
        self.push(v, Op::ConvT2d { x, w, b, stride, pad }, g)
    }

    pub fn matmul(&mut self, a: Id, b: Id) -> Id {
        let v = kernels::matmul(self.value(a), self.value(b));
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::MatMul(a, b), g)
    }

    pub fn transpose(&mut self, a: Id) -> Id {
        let v = kernels::transpose2d(self.value(a));
        let g = self.any_grad(&[a]);
        self.push(v, Op::Transpose(a), g)
    }

    pub fn reshape(&mut self, a: Id, shape: &[usize]) -> Id {
        let v = self.value(a).reshaped(shape);
        let g = self.any_grad(&[a]);
        self.push(v, Op::Reshape(a), g)
    }

    /// Concatenate [Ci,H,W] tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Id]) -> Id {
        assert!(!parts.is_empty());
        let (h, w) = (self.value(parts[0]).shape()[1], self.value(parts[0]).shape()[2]);
        let mut c_total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            assert_eq!((s[1], s[2]), (h, w), "concat spatial mismatch");
            c_total += s[0];
        }
        let mut data = Vec::with_capacity(c_total * h * w);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::from_vec(&[c_total, h, w], data);
        let g = self.any_grad(parts);
        self.push(v, Op::ConcatC(parts.to_vec()), g)
    }

    /// Row i of a [R,C] matrix as a [C] vector.
    pub fn row(&mut self, a: Id, i: usize) -> Id {
        let s = self.value(a).shape();
        assert_eq!(s.len(), 2);
        let c = s[1];
        let v = Tensor::from_vec(&[c], self.value(a).data()[i * c..(i + 1) * c].to_vec());
        let g = self.any_grad(&[a]);
        self.push(v, Op::Row(a, i), g)
    }

    /// [R,C] + [C] broadcast over rows.
    pub fn add_row_broadcast(&mut self, x: Id, b: Id) -> Id {
        let (r, c) = (self.value(x).shape()[0], self.value(x).shape()[1]);
        assert_eq!(self.value(b).len(), c);
        let mut v = self.value(x).clone();
        {
            let bd = self.value(b).data().to_vec();
            let dst = v.data_mut();
            for i in 0..r {
                for j in 0..c {
                    dst[i * c + j] += bd[j];
                }
            }
        }
        let g = self.any_grad(&[x, b]);
        self.push(v, Op::AddRow(x, b), g)
    }

    /// [C,H,W] * [C] broadcast over positions.
    pub fn mul_chan(&mut self, x: Id, s: Id) -> Id {
        let v = chan_broadcast(self.value(x), self.value(s), |a, b| a * b);
        let g = self.any_grad(&[x, s]);
        self.push(v, Op::MulChan(x, s), g)
    }

    pub fn add_chan(&mut self, x: Id, s: Id) -> Id {
        let v = chan_broadcast(self.value(x), self.value(s), |a, b| a + b);
        let g = self.any_grad(&[x, s]);
        self.push(v, Op::AddChan(x, s), g)
    }

    /// [C,H,W] * [H,W] broadcast over channels.
    pub fn mul_pos(&mut self, x: Id, s: Id) -> Id {
        let v = pos_broadcast(self.value(x), self.value(s), |a, b| a * b);
        let g = self.any_grad(&[x, s]);
        self.push(v, Op::MulPos(x, s), g)
    }

    pub fn add_pos(&mut self, x: Id, s: Id) -> Id {
        let v = pos_broadcast(self.value(x), self.value(s), |a, b| a + b);
        let g = self.any_grad(&[x, s]);
        self.push(v, Op::AddPos(x, s), g)
    }

    pub fn mean_all(&mut self, a: Id) -> Id {
        let v = Tensor::scalar(self.value(a).mean());
        let g = self.any_grad(&[a]);
        self.push(v, Op::MeanAll(a), g)
    }

    pub fn sum_all(&mut self, a: Id) -> Id {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        let g = self.any_grad(&[a]);
        self.push(v, Op::SumAll(a), g)
    }

    /// [C,H,W] -> [C], mean over spatial positions.
    pub fn mean_spatial(&mut self, a: Id) -> Id {
        let t = self.value(a);
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let hw = (h * w) as f64;
        let mut v = Tensor::zeros(&[c]);
        {
            let dst = v.data_mut();
            for ci in 0..c {
                dst[ci] = t.data()[ci * h * w..(ci + 1) * h * w].iter().sum::<f64>() / hw;
            }
        }
        let g = self.any_grad(&[a]);
        self.push(v, Op::MeanSpatial(a), g)
    }

    /// [C,H,W] -> [H,W], mean over channels per position.
    pub fn mean_chans(&mut self, a: Id) -> Id {
        let v = reduce_chans(self.value(a), true);
        let g = self.any_grad(&[a]);
        self.push(v, Op::MeanChans(a), g)
    }

    /// [C,H,W] -> [H,W], sum over channels per position.
    pub fn sum_chans(&mut self, a: Id) -> Id {
        let v = reduce_chans(self.value(a), false);
        let g = self.any_grad(&[a]);
        self.push(v, Op::SumChans(a), g)
    }

    /// Softmax over the channel axis of [C,H,W], per position.
    pub fn softmax_chans(&mut self, a: Id) -> Id {
        let v = softmax_chans_fwd(self.value(a), false);
        let g = self.any_grad(&[a]);
        self.push(v, Op::SoftmaxChans(a), g)
    }

    pub fn log_softmax_chans(&mut self, a: Id) -> Id {
        let v = softmax_chans_fwd(self.value(a), true);
        let g = self.any_grad(&[a]);
        self.push(v, Op::LogSoftmaxChans(a), g)
    }

    /// Row-wise softmax of a [R,C] matrix.
    pub fn softmax_rows(&mut self, a: Id) -> Id {
        let t = self.value(a);
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut v = Tensor::zeros(&[r, c]);
        {
            let src = t.data();
            let dst = v.data_mut();
            for i in 0..r {
                softmax_slice(&src[i * c..(i + 1) * c], &mut dst[i * c..(i + 1) * c]);
            }
        }
        let g = self.any_grad(&[a]);
        self.push(v, Op::SoftmaxRows(a), g)
    }

    pub fn maxpool2x2(&mut self, x: Id) -> Id {
        let (v, idx) = kernels::maxpool2x2(self.value(x));
        let g = self.any_grad(&[x]);
        self.push(v, Op::MaxPool2x2 { x, idx }, g)
    }

    pub fn upsample2x(&mut self, x: Id) -> Id {
        let t = self.value(x);
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let mut v = Tensor::zeros(&[c, h * 2, w * 2]);
        {
            let src = t.data();
            let dst = v.data_mut();
            for ci in 0..c {
                for y in 0..h * 2 {
                    for x2 in 0..w * 2 {
                        dst[(ci * h * 2 + y) * w * 2 + x2] = src[(ci * h + y / 2) * w + x2 / 2];
                    }
                }
            }
        }
        let g = self.any_grad(&[x]);
        self.push(v, Op::Upsample2x(x), g)
    }

    /// Subsample [C,H,W] by `factor`, taking the center sample of each block.
    pub fn downsample_nearest(&mut self, x: Id, factor: usize) -> Id {
        let t = self.value(x);
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        assert!(h % factor == 0 && w % factor == 0, "downsample {h}x{w} by {factor}");
        let (ho, wo) = (h / factor, w / factor);
        let off = factor / 2;
        let mut v = Tensor::zeros(&[c, ho, wo]);
        {
            let src = t.data();
            let dst = v.data_mut();
            for ci in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        dst[(ci * ho + oy) * wo + ox] = src[(ci * h + oy * factor + off) * w + ox * factor + off];
                    }
                }
            }
        }
        let g = self.any_grad(&[x]);
        self.push(v, Op::DownsampleNearest { x, factor }, g)
    }

    /// Per-region spatial pooling of feat [C,h,w] under a constant one-hot
    /// mask [N,h,w]. Output is [N,C]; empty regions fall back per `mode`.
    pub fn region_pool(&mut self, feat: Id, mask: Tensor, mode: RegionPoolMode) -> Id {
        let v = region_pool_fwd(self.value(feat), &mask, mode);
        let g = self.any_grad(&[feat]);
        self.push(v, Op::RegionPool { feat, mask, mode }, g)
    }

    /// Accumulate gradients of `root` (a scalar) w.r.t. every differentiable node.
    pub fn backward(&self, root: Id) -> Grads {
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn accum(&self, grads: &mut [Option<Tensor>], id: Id, g: Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accum(grads, *a, g.zip_map(vb, |gi, bi| gi * bi));
                self.accum(grads, *b, g.zip_map(va, |gi, ai| gi * ai));
            }
            Op::AddScalar(a) => self.accum(grads, *a, g.clone()),
            Op::MulScalar(a, c) => self.accum(grads, *a, g.scale(*c)),
            Op::Abs(a) => {
                let va = self.value(*a);
                self.accum(grads, *a, g.zip_map(va, |gi, x| gi * sign(x)));
            }
            Op::Log(a) => {
                let va = self.value(*a);
                self.accum(grads, *a, g.zip_map(va, |gi, x| gi / x));
            }
            Op::Exp(a) => self.accum(grads, *a, g.zip_map(out, |gi, o| gi * o)),
            Op::Sqrt(a) => self.accum(grads, *a, g.zip_map(out, |gi, o| gi / (2.0 * o))),
            Op::Recip(a) => self.accum(grads, *a, g.zip_map(out, |gi, o| -gi * o * o)),
            Op::Clamp(a, lo, hi) => {
                let va = self.value(*a);
                self.accum(
                    grads,
                    *a,
                    g.zip_map(va, |gi, x| if x > *lo && x < *hi { gi } else { 0.0 }),
                );
            }
            Op::LeakyRelu(a, slope) => {
                let va = self.value(*a);
                self.accum(grads, *a, g.zip_map(va, |gi, x| if x > 0.0 { gi } else { gi * slope }));
            }
            Op::Sigmoid(a) => self.accum(grads, *a, g.zip_map(out, |gi, o| gi * o * (1.0 - o))),
            Op::Tanh(a) => self.accum(grads, *a, g.zip_map(out, |gi, o| gi * (1.0 - o * o))),
            Op::Conv2d { x, w, b, stride, pad } => {
                if self.needs_grad(*x) {
                    let gx = kernels::conv2d_grad_x(g, self.value(*w), self.value(*x).shape(), *stride, *pad);
                    self.accum(grads, *x, gx);
                }
                if self.needs_grad(*w) {
                    let gw = kernels::conv2d_grad_w(g, self.value(*x), self.value(*w).shape(), *stride, *pad);
                    self.accum(grads, *w, gw);
                }
                if self.needs_grad(*b) {
                    self.accum(grads, *b, kernels::grad_bias(g));
                }
            }
            Op::ConvT2d { x, w, b, stride, pad } => {
                if self.needs_grad(*x) {
                    let gx = kernels::conv_transpose2d_grad_x(g, self.value(*w), self.value(*x).shape(), *stride, *pad);
                    self.accum(grads, *x, gx);
                }
                if self.needs_grad(*w) {
                    let gw = kernels::conv_transpose2d_grad_w(g, self.value(*x), self.value(*w).shape(), *stride, *pad);
                    self.accum(grads, *w, gw);
                }
                if self.needs_grad(*b) {
                    self.accum(grads, *b, kernels::grad_bias(g));
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs_grad(*a) {
                    let bt = kernels::transpose2d(vb);
                    self.accum(grads, *a, kernels::matmul(g, &bt));
                }
                if self.needs_grad(*b) {
                    let at = kernels::transpose2d(va);
                    self.accum(grads, *b, kernels::matmul(&at, g));
                }
            }
            Op::Transpose(a) => self.accum(grads, *a, kernels::transpose2d(g)),
            Op::Reshape(a) => self.accum(grads, *a, g.reshaped(self.value(*a).shape())),
            Op::ConcatC(parts) => {
                let (h, w) = (out.shape()[1], out.shape()[2]);
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).shape()[0];
                    let slice = g.data()[offset * h * w..(offset + c) * h * w].to_vec();
                    self.accum(grads, p, Tensor::from_vec(&[c, h, w], slice));
                    offset += c;
                }
            }
            Op::Row(a, i_row) => {
                let s = self.value(*a).shape();
                let mut ga = Tensor::zeros(s);
                ga.data_mut()[i_row * s[1]..(i_row + 1) * s[1]].copy_from_slice(g.data());
                self.accum(grads, *a, ga);
            }
            Op::AddRow(x, b) => {
                if self.needs_grad(*x) {
                    self.accum(grads, *x, g.clone());
                }
                if self.needs_grad(*b) {
                    let (r, c) = (g.shape()[0], g.shape()[1]);
                    let mut gb = Tensor::zeros(&[c]);
                    {
                        let dst = gb.data_mut();
                        for i in 0..r {
                            for j in 0..c {
                                dst[j] += g.data()[i * c + j];
                            }
                        }
                    }
                    self.accum(grads, *b, gb);
                }
            }
            Op::MulChan(x, s) => {
                let (vx, vs) = (self.value(*x), self.value(*s));
                if self.needs_grad(*x) {
                    self.accum(grads, *x, chan_broadcast(g, vs, |a, b| a * b));
                }
                if self.needs_grad(*s) {
                    self.accum(grads, *s, reduce_to_chan(&g.zip_map(vx, |a, b| a * b)));
                }
            }
            Op::AddChan(x, s) => {
                if self.needs_grad(*x) {
                    self.accum(grads, *x, g.clone());
                }
                if self.needs_grad(*s) {
                    self.accum(grads, *s, reduce_to_chan(g));
                }
            }
            Op::MulPos(x, s) => {
                let (vx, vs) = (self.value(*x), self.value(*s));
                if self.needs_grad(*x) {
                    self.accum(grads, *x, pos_broadcast(g, vs, |a, b| a * b));
                }
                if self.needs_grad(*s) {
                    let prod = g.zip_map(vx, |a, b| a * b);
                    self.accum(grads, *s, reduce_chans(&prod, false));
                }
            }
            Op::AddPos(x, s) => {
                if self.needs_grad(*x) {
                    self.accum(grads, *x, g.clone());
                }
                if self.needs_grad(*s) {
                    self.accum(grads, *s, reduce_chans(g, false));
                }
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).len() as f64;
                let gi = g.item() / n;
                self.accum(grads, *a, Tensor::full(self.value(*a).shape(), gi));
            }
            Op::SumAll(a) => {
                self.accum(grads, *a, Tensor::full(self.value(*a).shape(), g.item()));
            }
            Op::MeanSpatial(a) => {
                let s = self.value(*a).shape().to_vec();
                let (c, h, w) = (s[0], s[1], s[2]);
                let mut ga = Tensor::zeros(&s);
                {
                    let dst = ga.data_mut();
                    for ci in 0..c {
                        let v = g.data()[ci] / (h * w) as f64;
                        for d in &mut dst[ci * h * w..(ci + 1) * h * w] {
                            *d = v;
                        }
                    }
                }
                self.accum(grads, *a, ga);
            }
            Op::MeanChans(a) => {
                let s = self.value(*a).shape().to_vec();
                let c = s[0] as f64;
                self.accum(grads, *a, pos_expand(g, &s, 1.0 / c));
            }
            Op::SumChans(a) => {
                let s = self.value(*a).shape().to_vec();
                self.accum(grads, *a, pos_expand(g, &s, 1.0));
            }
            Op::SoftmaxChans(a) => {
                // dx = y * (g - sum_c g*y) per position
                let s = out.shape().to_vec();
                let (c, hw) = (s[0], s[1] * s[2]);
                let mut ga = Tensor::zeros(&s);
                {
                    let y = out.data();
                    let gd = g.data();
                    let dst = ga.data_mut();
                    for p in 0..hw {
                        let mut dot = 0.0;
                        for ci in 0..c {
                            dot += gd[ci * hw + p] * y[ci * hw + p];
                        }
                        for ci in 0..c {
                            dst[ci * hw + p] = y[ci * hw + p] * (gd[ci * hw + p] - dot);
                        }
                    }
                }
                self.accum(grads, *a, ga);
            }
            Op::LogSoftmaxChans(a) => {
                // dx = g - softmax * sum_c g per position
                let s = out.shape().to_vec();
                let (c, hw) = (s[0], s[1] * s[2]);
                let mut ga = Tensor::zeros(&s);
                {
                    let y = out.data(); // log-probs
                    let gd = g.data();
                    let dst = ga.data_mut();
                    for p in 0..hw {
                        let mut gsum = 0.0;
                        for ci in 0..c {
                            gsum += gd[ci * hw + p];
                        }
                        for ci in 0..c {
                            dst[ci * hw + p] = gd[ci * hw + p] - y[ci * hw + p].exp() * gsum;
                        }
                    }
                }
                self.accum(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let mut ga = Tensor::zeros(&[r, c]);
                {
                    let y = out.data();
                    let gd = g.data();
                    let dst = ga.data_mut();
                    for i in 0..r {
                        let row = i * c;
                        let mut dot = 0.0;
                        for j in 0..c {
                            dot += gd[row + j] * y[row + j];
                        }
                        for j in 0..c {
                            dst[row + j] = y[row + j] * (gd[row + j] - dot);
                        }
                    }
                }
                self.accum(grads, *a, ga);
            }
            Op::MaxPool2x2 { x, idx } => {
                let s = self.value(*x).shape().to_vec();
                let mut ga = Tensor::zeros(&s);
                {
                    let dst = ga.data_mut();
                    for (o, &i_src) in idx.iter().enumerate() {
                        dst[i_src as usize] += g.data()[o];
                    }
                }
                self.accum(grads, *x, ga);
            }
            Op::Upsample2x(x) => {
                let s = self.value(*x).shape().to_vec();
                let (c, h, w) = (s[0], s[1], s[2]);
                let mut ga = Tensor::zeros(&s);
                {
                    let gd = g.data();
                    let dst = ga.data_mut();
                    for ci in 0..c {
                        for y in 0..h * 2 {
                            for x2 in 0..w * 2 {
                                dst[(ci * h + y / 2) * w + x2 / 2] += gd[(ci * h * 2 + y) * w * 2 + x2];
                            }
                        }
                    }
                }
                self.accum(grads, *x, ga);
            }
            Op::DownsampleNearest { x, factor } => {
                let s = self.value(*x).shape().to_vec();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (ho, wo) = (h / factor, w / factor);
                let off = factor / 2;
                let mut ga = Tensor::zeros(&s);
                {
                    let gd = g.data();
                    let dst = ga.data_mut();
                    for ci in 0..c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                dst[(ci * h + oy * factor + off) * w + ox * factor + off] +=
                                    gd[(ci * ho + oy) * wo + ox];
                            }
                        }
                    }
                }
                self.accum(grads, *x, ga);
            }
            Op::RegionPool { feat, mask, mode } => {
                let fs = self.value(*feat).shape().to_vec();
                let (c, h, w) = (fs[0], fs[1], fs[2]);
                let hw = h * w;
                let n = mask.shape()[0];
                let counts: Vec<f64> = (0..n)
                    .map(|j| mask.data()[j * hw..(j + 1) * hw].iter().sum())
                    .collect();
                let mut ga = Tensor::zeros(&fs);
                {
                    let gd = g.data(); // [N,C]
                    let md = mask.data();
                    let dst = ga.data_mut();
                    for j in 0..n {
                        let local = counts[j] >= 1.0 && *mode != RegionPoolMode::GlobalOnly;
                        if local {
                            let inv = 1.0 / counts[j];
                            for ci in 0..c {
                                let gv = gd[j * c + ci] * inv;
                                if gv == 0.0 {
                                    continue;
                                }
                                for p in 0..hw {
                                    if md[j * hw + p] != 0.0 {
                                        dst[ci * hw + p] += gv * md[j * hw + p];
                                    }
                                }
                            }
                        } else if *mode != RegionPoolMode::LocalZero || counts[j] >= 1.0 {
                            // global-mean row (fallback or GlobalOnly)
                            let inv = 1.0 / hw as f64;
                            for ci in 0..c {
                                let gv = gd[j * c + ci] * inv;
                                if gv == 0.0 {
                                    continue;
                                }
                                for p in 0..hw {
                                    dst[ci * hw + p] += gv;
                                }
                            }
                        }
                        // LocalZero with an absent region contributes nothing.
                    }
                }
                self.accum(grads, *feat, ga);
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn chan_broadcast(x: &Tensor, s: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    assert_eq!(s.len(), c, "channel broadcast: {:?} with {:?}", x.shape(), s.shape());
    let mut v = Tensor::zeros(x.shape());
    {
        let xs = x.data();
        let ss = s.data();
        let dst = v.data_mut();
        for ci in 0..c {
            let sv = ss[ci];
            for p in 0..h * w {
                dst[ci * h * w + p] = f(xs[ci * h * w + p], sv);
            }
        }
    }
    v
}

fn pos_broadcast(x: &Tensor, s: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    assert_eq!(s.len(), h * w, "position broadcast: {:?} with {:?}", x.shape(), s.shape());
    let mut v = Tensor::zeros(x.shape());
    {
        let xs = x.data();
        let ss = s.data();
        let dst = v.data_mut();
        for ci in 0..c {
            for p in 0..h * w {
                dst[ci * h * w + p] = f(xs[ci * h * w + p], ss[p]);
            }
        }
    }
    v
}

/// Expand a [H,W] gradient over channels of `shape`, scaled.
fn pos_expand(g: &Tensor, shape: &[usize], scale: f64) -> Tensor {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut v = Tensor::zeros(shape);
    {
        let gd = g.data();
        let dst = v.data_mut();
        for ci in 0..c {
            for p in 0..h * w {
                dst[ci * h * w + p] = gd[p] * scale;
            }
        }
    }
    v
}

fn reduce_chans(x: &Tensor, mean: bool) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut v = Tensor::zeros(&[h, w]);
    {
        let xs = x.data();
        let dst = v.data_mut();
        for ci in 0..c {
            for p in 0..h * w {
                dst[p] += xs[ci * h * w + p];
            }
        }
        if mean {
            for d in dst.iter_mut() {
                *d /= c as f64;
            }
        }
    }
    v
}

fn reduce_to_chan(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut v = Tensor::zeros(&[c]);
    {
        let xs = x.data();
        let dst = v.data_mut();
        for ci in 0..c {
            dst[ci] = xs[ci * h * w..(ci + 1) * h * w].iter().sum();
        }
    }
    v
}

fn softmax_slice(src: &[f64], dst: &mut [f64]) {
    let m = src.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut sum = 0.0;
    for (d, &s) in dst.iter_mut().zip(src.iter()) {
        *d = (s - m).exp();
        sum += *d;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
}

fn softmax_chans_fwd(x: &Tensor, log: bool) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let hw = h * w;
    let mut v = Tensor::zeros(x.shape());
    {
        let xs = x.data();
        let dst = v.data_mut();
        for p in 0..hw {
            let mut m = f64::NEG_INFINITY;
            for ci in 0..c {
                m = m.max(xs[ci * hw + p]);
            }
            let mut sum = 0.0;
            for ci in 0..c {
                sum += (xs[ci * hw + p] - m).exp();
            }
            if log {
                let lse = m + sum.ln();
                for ci in 0..c {
                    dst[ci * hw + p] = xs[ci * hw + p] - lse;
                }
            } else {
                for ci in 0..c {
                    dst[ci * hw + p] = (xs[ci * hw + p] - m).exp() / sum;
                }
            }
        }
    }
    v
}

/// Forward pass of [`Tape::region_pool`] on plain tensors.
pub fn region_pool_fwd(feat: &Tensor, mask: &Tensor, mode: RegionPoolMode) -> Tensor {
    let (c, h, w) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);
    let hw = h * w;
    let n = mask.shape()[0];
    assert_eq!(mask.shape()[1] * mask.shape()[2], hw, "mask/feature resolution mismatch");
    // Global mean per channel, shared by every fallback row.
    let mut global = vec![0.0; c];
    for (ci, gv) in global.iter_mut().enumerate() {
        *gv = feat.data()[ci * hw..(ci + 1) * hw].iter().sum::<f64>() / hw as f64;
    }
    let mut out = Tensor::zeros(&[n, c]);
    {
        let fd = feat.data();
        let md = mask.data();
        let dst = out.data_mut();
        for j in 0..n {
            let count: f64 = md[j * hw..(j + 1) * hw].iter().sum();
            let present = count >= 1.0;
            match mode {
                RegionPoolMode::GlobalOnly => {
                    dst[j * c..(j + 1) * c].copy_from_slice(&global);
                }
                RegionPoolMode::JointGlobalLocal | RegionPoolMode::LocalZero if present => {
                    let inv = 1.0 / count;
                    for ci in 0..c {
                        let mut acc = 0.0;
                        for p in 0..hw {
                            let m = md[j * hw + p];
                            if m != 0.0 {
                                acc += fd[ci * hw + p] * m;
                            }
                        }
                        dst[j * c + ci] = acc * inv;
                    }
                }
                RegionPoolMode::JointGlobalLocal => {
                    dst[j * c..(j + 1) * c].copy_from_slice(&global);
                }
                RegionPoolMode::LocalZero => {
                    // absent region stays zero
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Central finite difference of a scalar-valued builder at every input coordinate.
    fn fd_grad(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
        let mut g = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Tensor, b: &Tensor, rel: f64) {
        assert_eq!(a.shape(), b.shape());
        for (i, (&x, &y)) in a.data().iter().zip(b.data().iter()).enumerate() {
            let denom = x.abs().max(y.abs()).max(1e-6);
            assert!(
                (x - y).abs() / denom < rel,
                "mismatch at {i}: {x} vs {y} (rel {})",
                (x - y).abs() / denom
            );
        }
    }

    /// Every unary/binary op family gets a finite-difference check through a
    /// composite scalar readout.
    #[test]
    fn elementwise_ops_grad_check() {
        let mut rng = Rng::from_seed(1);
        let x0 = Tensor::uniform(&[2, 3, 3], 0.3, 1.7, &mut rng); // positive, away from |kinks|
        let cases: Vec<(&str, Box<dyn Fn(&mut Tape, Id) -> Id>)> = vec![
            ("add_self", Box::new(|t, x| t.add(x, x))),
            ("sub_mul", Box::new(|t, x| {
                let y = t.mul(x, x);
                t.sub(y, x)
            })),
            ("abs", Box::new(|t, x| t.abs(x))),
            ("log", Box::new(|t, x| t.log(x))),
            ("exp", Box::new(|t, x| t.exp(x))),
            ("sqrt", Box::new(|t, x| t.sqrt(x))),
            ("recip", Box::new(|t, x| t.recip(x))),
            ("leaky", Box::new(|t, x| {
                let y = t.add_scalar(x, -1.0);
                t.leaky_relu(y, 0.2)
            })),
            ("sigmoid", Box::new(|t, x| t.sigmoid(x))),
            ("tanh", Box::new(|t, x| t.tanh(x))),
            ("clamp", Box::new(|t, x| t.clamp(x, 0.5, 1.5))),
            ("softmax_chans", Box::new(|t, x| t.softmax_chans(x))),
            ("log_softmax", Box::new(|t, x| t.log_softmax_chans(x))),
            ("mean_spatial", Box::new(|t, x| t.mean_spatial(x))),
            ("mean_chans", Box::new(|t, x| t.mean_chans(x))),
            ("sum_chans", Box::new(|t, x| t.sum_chans(x))),
            ("upsample", Box::new(|t, x| t.upsample2x(x))),
            ("maxpool", Box::new(|t, x| {
                let u = t.upsample2x(x); // 6x6, even
                t.maxpool2x2(u)
            })),
        ];
        for (name, build) in cases {
            let f = |x: &Tensor| -> f64 {
                let mut t = Tape::new();
                let xi = t.leaf(x.clone());
                let y = build(&mut t, xi);
                // mix coordinates so the readout is not symmetric
                let y2 = t.mul(y, y);
                let s = t.mean_all(y2);
                t.value(s).item()
            };
            let mut t = Tape::new();
            let xi = t.leaf(x0.clone());
            let y = build(&mut t, xi);
            let y2 = t.mul(y, y);
            let s = t.mean_all(y2);
            let grads = t.backward(s);
            let analytic = grads.get(xi).unwrap();
            let numeric = fd_grad(&f, &x0, 1e-5);
            assert_close(analytic, &numeric, 1e-4);
            let _ = name;
        }
    }

    #[test]
    fn broadcast_ops_grad_check() {
        let mut rng = Rng::from_seed(2);
        let x0 = Tensor::uniform(&[3, 2, 2], -1.0, 1.0, &mut rng);
        let c0 = Tensor::uniform(&[3], 0.5, 1.5, &mut rng);
        let p0 = Tensor::uniform(&[2, 2], 0.5, 1.5, &mut rng);

        // gradient w.r.t. both the tensor and the broadcast operand
        let f = |x: &Tensor, c: &Tensor, p: &Tensor| -> (f64, Tape, Id, Id, Id) {
            let mut t = Tape::new();
            let xi = t.leaf(x.clone());
            let ci = t.leaf(c.clone());
            let pi = t.leaf(p.clone());
            let a = t.mul_chan(xi, ci);
            let b = t.add_chan(a, ci);
            let d = t.mul_pos(b, pi);
            let e = t.add_pos(d, pi);
            let e2 = t.mul(e, e);
            let s = t.mean_all(e2);
            (t.value(s).item(), t, xi, ci, pi)
        };
        let (_, t, xi, ci, pi) = f(&x0, &c0, &p0);
        let mut t2 = Tape::new();
        let xi2 = t2.leaf(x0.clone());
        let ci2 = t2.leaf(c0.clone());
        let pi2 = t2.leaf(p0.clone());
        let a = t2.mul_chan(xi2, ci2);
        let b = t2.add_chan(a, ci2);
        let d = t2.mul_pos(b, pi2);
        let e = t2.add_pos(d, pi2);
        let e2 = t2.mul(e, e);
        let s = t2.mean_all(e2);
        let grads = t2.backward(s);
        drop((t, xi, ci, pi));

        for (leaf, val, which) in [(xi2, &x0, 0), (ci2, &c0, 1), (pi2, &p0, 2)] {
            let fd = fd_grad(
                &|v: &Tensor| {
                    let (x, c, p) = match which {
                        0 => (v.clone(), c0.clone(), p0.clone()),
                        1 => (x0.clone(), v.clone(), p0.clone()),
                        _ => (x0.clone(), c0.clone(), v.clone()),
                    };
                    let mut t = Tape::new();
                    let xi = t.leaf(x);
                    let ci = t.leaf(c);
                    let pi = t.leaf(p);
                    let a = t.mul_chan(xi, ci);
                    let b = t.add_chan(a, ci);
                    let d = t.mul_pos(b, pi);
                    let e = t.add_pos(d, pi);
                    let e2 = t.mul(e, e);
                    let s = t.mean_all(e2);
                    t.value(s).item()
                },
                val,
                1e-5,
            );
            assert_close(grads.get(leaf).unwrap(), &fd, 1e-4);
        }
    }

    #[test]
    fn conv_ops_grad_check() {
        let mut rng = Rng::from_seed(3);
        let x0 = Tensor::uniform(&[2, 6, 6], -1.0, 1.0, &mut rng);
        let w0 = Tensor::uniform(&[3, 2, 3, 3], -0.5, 0.5, &mut rng);
        let b0 = Tensor::uniform(&[3], -0.1, 0.1, &mut rng);
        let run = |x: &Tensor, w: &Tensor, b: &Tensor| -> f64 {
            let mut t = Tape::new();
            let (xi, wi, bi) = (t.leaf(x.clone()), t.leaf(w.clone()), t.leaf(b.clone()));
            let y = t.conv2d(xi, wi, bi, 2, 1);
            let y2 = t.mul(y, y);
            let s = t.mean_all(y2);
            t.value(s).item()
        };
        let mut t = Tape::new();
        let (xi, wi, bi) = (t.leaf(x0.clone()), t.leaf(w0.clone()), t.leaf(b0.clone()));
        let y = t.conv2d(xi, wi, bi, 2, 1);
        let y2 = t.mul(y, y);
        let s = t.mean_all(y2);
        let grads = t.backward(s);
        assert_close(
            grads.get(xi).unwrap(),
            &fd_grad(&|v| run(v, &w0, &b0), &x0, 1e-5),
            1e-4,
        );
        assert_close(
            grads.get(wi).unwrap(),
            &fd_grad(&|v| run(&x0, v, &b0), &w0, 1e-5),
            1e-4,
        );
        assert_close(
            grads.get(bi).unwrap(),
            &fd_grad(&|v| run(&x0, &w0, v), &b0, 1e-5),
            1e-4,
        );
    }

    #[test]
    fn conv_transpose_grad_check() {
        let mut rng = Rng::from_seed(4);
        let x0 = Tensor::uniform(&[2, 4, 4], -1.0, 1.0, &mut rng);
        let w0 = Tensor::uniform(&[2, 3, 4, 4], -0.5, 0.5, &mut rng);
        let b0 = Tensor::uniform(&[3], -0.1, 0.1, &mut rng);
        let run = |x: &Tensor, w: &Tensor, b: &Tensor| -> f64 {
            let mut t = Tape::new();
            let (xi, wi, bi) = (t.leaf(x.clone()), t.leaf(w.clone()), t.leaf(b.clone()));
            let y = t.conv_transpose2d(xi, wi, bi, 2, 1);
            let y2 = t.mul(y, y);
            let s = t.mean_all(y2);
            t.value(s).item()
        };
        let mut t = Tape::new();
        let (xi, wi, bi) = (t.leaf(x0.clone()), t.leaf(w0.clone()), t.leaf(b0.clone()));
        let y = t.conv_transpose2d(xi, wi, bi, 2, 1);
        assert_eq!(t.value(y).shape(), &[3, 8, 8]);
        let y2 = t.mul(y, y);
        let s = t.mean_all(y2);
        let grads = t.backward(s);
        assert_close(grads.get(xi).unwrap(), &fd_grad(&|v| run(v, &w0, &b0), &x0, 1e-5), 1e-4);
        assert_close(grads.get(wi).unwrap(), &fd_grad(&|v| run(&x0, v, &b0), &w0, 1e-5), 1e-4);
        assert_close(grads.get(bi).unwrap(), &fd_grad(&|v| run(&x0, &w0, v), &b0, 1e-5), 1e-4);
    }

    #[test]
    fn matmul_and_rows_grad_check() {
        let mut rng = Rng::from_seed(5);
        let a0 = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let b0 = Tensor::uniform(&[4, 2], -1.0, 1.0, &mut rng);
        let v0 = Tensor::uniform(&[2], -1.0, 1.0, &mut rng);
        let run = |a: &Tensor, b: &Tensor, v: &Tensor| -> f64 {
            let mut t = Tape::new();
            let (ai, bi, vi) = (t.leaf(a.clone()), t.leaf(b.clone()), t.leaf(v.clone()));
            let m = t.matmul(ai, bi);
            let m2 = t.add_row_broadcast(m, vi);
            let mt = t.transpose(m2);
            let r = t.row(mt, 1);
            let r2 = t.mul(r, r);
            let s = t.sum_all(r2);
            t.value(s).item()
        };
        let mut t = Tape::new();
        let (ai, bi, vi) = (t.leaf(a0.clone()), t.leaf(b0.clone()), t.leaf(v0.clone()));
        let m = t.matmul(ai, bi);
        let m2 = t.add_row_broadcast(m, vi);
        let mt = t.transpose(m2);
        let r = t.row(mt, 1);
        let r2 = t.mul(r, r);
        let s = t.sum_all(r2);
        let grads = t.backward(s);
        assert_close(grads.get(ai).unwrap(), &fd_grad(&|v| run(v, &b0, &v0), &a0, 1e-5), 1e-4);
        assert_close(grads.get(bi).unwrap(), &fd_grad(&|v| run(&a0, v, &v0), &b0, 1e-5), 1e-4);
        assert_close(grads.get(vi).unwrap(), &fd_grad(&|v| run(&a0, &b0, v), &v0, 1e-5), 1e-4);
    }

    #[test]
    fn softmax_rows_grad_and_row_sums() {
        let mut rng = Rng::from_seed(6);
        let a0 = Tensor::uniform(&[4, 5], -2.0, 2.0, &mut rng);
        let mut t = Tape::new();
        let ai = t.leaf(a0.clone());
        let sm = t.softmax_rows(ai);
        for i in 0..4 {
            let row_sum: f64 = t.value(sm).data()[i * 5..(i + 1) * 5].iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-12);
        }
        let sm2 = t.mul(sm, sm);
        let s = t.mean_all(sm2);
        let grads = t.backward(s);
        let fd = fd_grad(
            &|v| {
                let mut t = Tape::new();
                let ai = t.leaf(v.clone());
                let sm = t.softmax_rows(ai);
                let sm2 = t.mul(sm, sm);
                let s = t.mean_all(sm2);
                t.value(s).item()
            },
            &a0,
            1e-5,
        );
        assert_close(grads.get(ai).unwrap(), &fd, 1e-4);
    }

    #[test]
    fn concat_and_downsample_grad_check() {
        let mut rng = Rng::from_seed(7);
        let a0 = Tensor::uniform(&[2, 4, 4], -1.0, 1.0, &mut rng);
        let b0 = Tensor::uniform(&[3, 4, 4], -1.0, 1.0, &mut rng);
        let run = |a: &Tensor, b: &Tensor| -> f64 {
            let mut t = Tape::new();
            let (ai, bi) = (t.leaf(a.clone()), t.leaf(b.clone()));
            let c = t.concat_channels(&[ai, bi]);
            let d = t.downsample_nearest(c, 2);
            let d2 = t.mul(d, d);
            let s = t.mean_all(d2);
            t.value(s).item()
        };
        let mut t = Tape::new();
        let (ai, bi) = (t.leaf(a0.clone()), t.leaf(b0.clone()));
        let c = t.concat_channels(&[ai, bi]);
        assert_eq!(t.value(c).shape(), &[5, 4, 4]);
        let d = t.downsample_nearest(c, 2);
        assert_eq!(t.value(d).shape(), &[5, 2, 2]);
        let d2 = t.mul(d, d);
        let s = t.mean_all(d2);
        let grads = t.backward(s);
        assert_close(grads.get(ai).unwrap(), &fd_grad(&|v| run(v, &b0), &a0, 1e-5), 1e-4);
        assert_close(grads.get(bi).unwrap(), &fd_grad(&|v| run(&a0, v), &b0, 1e-5), 1e-4);
    }

    #[test]
    fn region_pool_grad_check_all_modes() {
        let mut rng = Rng::from_seed(8);
        let f0 = Tensor::uniform(&[3, 4, 4], -1.0, 1.0, &mut rng);
        // region 0 top half, region 1 bottom half, region 2 absent
        let mut mask = Tensor::zeros(&[3, 4, 4]);
        for y in 0..4 {
            for x in 0..4 {
                let j = if y < 2 { 0 } else { 1 };
                mask.set3(j, y, x, 1.0);
            }
        }
        for mode in [
            RegionPoolMode::JointGlobalLocal,
            RegionPoolMode::GlobalOnly,
            RegionPoolMode::LocalZero,
        ] {
            let run = |f: &Tensor| -> f64 {
                let mut t = Tape::new();
                let fi = t.leaf(f.clone());
                let p = t.region_pool(fi, mask.clone(), mode);
                let p2 = t.mul(p, p);
                let s = t.mean_all(p2);
                t.value(s).item()
            };
            let mut t = Tape::new();
            let fi = t.leaf(f0.clone());
            let p = t.region_pool(fi, mask.clone(), mode);
            let p2 = t.mul(p, p);
            let s = t.mean_all(p2);
            let grads = t.backward(s);
            assert_close(grads.get(fi).unwrap(), &fd_grad(&run, &f0, 1e-5), 1e-4);
        }
    }

    #[test]
    fn constants_accumulate_no_grad() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::scalar(3.0));
        let x = t.leaf(Tensor::scalar(2.0));
        let y = t.mul(c, x);
        let s = t.sum_all(y);
        let grads = t.backward(s);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().item(), 3.0);
    }

    #[test]
    fn shared_leaf_accumulates_across_uses() {
        // two branches sharing one leaf must sum their gradients
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let a = t.mul(x, x); // 9, d/dx = 6
        let b = t.mul_scalar(x, 4.0); // d/dx = 4
        let y = t.add(a, b);
        let s = t.sum_all(y);
        let grads = t.backward(s);
        assert_eq!(grads.get(x).unwrap().item(), 10.0);
    }
}
