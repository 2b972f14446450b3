//! Parameter-carrying layers over the tape: convolutions, gated convolution,
//! down/up-sampling blocks, and fully connected layers.
//!
//! Layers own their tensors and are bound onto a [`Tape`] per forward pass
//! through a [`Bound`] registry, which deduplicates by parameter name so a
//! layer used twice in one step accumulates one gradient.

use std::collections::BTreeMap;

use crate::rng::Rng;
use crate::tensor::{Id, Tape, Tensor};

/// Default negative slope of the leaky ReLU activations.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Epsilon inside instance-norm denominators.
pub const NORM_EPS: f64 = 1e-5;

/// Named parameters visited in a stable (depth-first, declaration) order.
pub trait ParamSet {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    fn collect(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }
}

/// Per-step registry of parameter leaves pushed onto the tape.
#[derive(Default)]
pub struct Bound {
    ids: BTreeMap<String, Id>,
    /// When true, parameters are bound as constants (inference / frozen nets).
    pub frozen: bool,
}

impl Bound {
    pub fn new() -> Bound {
        Bound::default()
    }

    pub fn frozen() -> Bound {
        Bound { ids: BTreeMap::new(), frozen: true }
    }

    pub fn bind(&mut self, tape: &mut Tape, name: &str, t: &Tensor) -> Id {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let id = if self.frozen {
            tape.constant(t.clone())
        } else {
            tape.leaf(t.clone())
        };
        self.ids.insert(name.to_string(), id);
        id
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Id)> {
        self.ids.iter()
    }
}

fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    // gain for leaky ReLU with slope 0.2
    let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// 2D convolution layer with zero same-style padding.
#[derive(Clone)]
pub struct Conv2d {
    pub name: String,
    pub w: Tensor,
    pub b: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(name: &str, cin: usize, cout: usize, k: usize, stride: usize, rng: &mut Rng) -> Conv2d {
        Conv2d {
            name: name.to_string(),
            w: kaiming_uniform(&[cout, cin, k, k], cin * k * k, rng),
            b: Tensor::zeros(&[cout]),
            stride,
            pad: k / 2,
        }
    }

    /// Zero-initialized variant; forwards start as the zero map.
    pub fn zeroed(name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Conv2d {
        Conv2d {
            name: name.to_string(),
            w: Tensor::zeros(&[cout, cin, k, k]),
            b: Tensor::zeros(&[cout]),
            stride,
            pad: k / 2,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &mut Bound, x: Id) -> Id {
        let w = bound.bind(tape, &format!("{}.w", self.name), &self.w);
        let b = bound.bind(tape, &format!("{}.b", self.name), &self.b);
        tape.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn out_channels(&self) -> usize {
        self.w.shape()[0]
    }
}

impl ParamSet for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{}.w", self.name), &self.w);
        f(&format!("{}.b", self.name), &self.b);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{}.w", self.name), &mut self.w);
        f(&format!("{}.b", self.name), &mut self.b);
    }
}

/// Transposed 2D convolution (weight layout [Cin, Cout, k, k]).
#[derive(Clone)]
pub struct ConvT2d {
    pub name: String,
    pub w: Tensor,
    pub b: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl ConvT2d {
    pub fn new(name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut Rng) -> ConvT2d {
        ConvT2d {
            name: name.to_string(),
            w: kaiming_uniform(&[cin, cout, k, k], cin * k * k, rng),
            b: Tensor::zeros(&[cout]),
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &mut Bound, x: Id) -> Id {
        let w = bound.bind(tape, &format!("{}.w", self.name), &self.w);
        let b = bound.bind(tape, &format!("{}.b", self.name), &self.b);
        tape.conv_transpose2d(x, w, b, self.stride, self.pad)
    }
}

impl ParamSet for ConvT2d {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{}.w", self.name), &self.w);
        f(&format!("{}.b", self.name), &self.b);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{}.w", self.name), &mut self.w);
        f(&format!("{}.b", self.name), &mut self.b);
    }
}

/// Fully connected layer on row-major [R, in] inputs.
#[derive(Clone)]
pub struct Linear {
    pub name: String,
    pub w: Tensor, // [in, out]
    pub b: Tensor, // [out]
}

impl Linear {
    pub fn new(name: &str, cin: usize, cout: usize, rng: &mut Rng) -> Linear {
        Linear {
            name: name.to_string(),
            w: kaiming_uniform(&[cin, cout], cin, rng),
            b: Tensor::zeros(&[cout]),
        }
    }

    pub fn zeroed(name: &str, cin: usize, cout: usize) -> Linear {
        Linear {
            name: name.to_string(),
            w: Tensor::zeros(&[cin, cout]),
            b: Tensor::zeros(&[cout]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &mut Bound, x: Id) -> Id {
        let w = bound.bind(tape, &format!("{}.w", self.name), &self.w);
        let b = bound.bind(tape, &format!("{}.b", self.name), &self.b);
        let y = tape.matmul(x, w);
        tape.add_row_broadcast(y, b)
    }
}

impl ParamSet for Linear {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{}.w", self.name), &self.w);
        f(&format!("{}.b", self.name), &self.b);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{}.w", self.name), &mut self.w);
        f(&format!("{}.b", self.name), &mut self.b);
    }
}

/// Parameter-free instance normalization: per-channel zero mean and unit
/// variance over the spatial extent.
pub fn instance_norm(tape: &mut Tape, x: Id) -> Id {
    let mean = tape.mean_spatial(x);
    let neg_mean = tape.mul_scalar(mean, -1.0);
    let centered = tape.add_chan(x, neg_mean);
    let sq = tape.mul(centered, centered);
    let var = tape.mean_spatial(sq);
    let var_eps = tape.add_scalar(var, NORM_EPS);
    let std = tape.sqrt(var_eps);
    let inv = tape.recip(std);
    tape.mul_chan(centered, inv)
}

/// Convolution gated by a learned sigmoid mask, elementwise:
/// `phi(conv_u(x)) * sigmoid(conv_v(x))`.
#[derive(Clone)]
pub struct GatedConv {
    pub feature: Conv2d,
    pub gate: Conv2d,
    pub slope: f64,
}

impl GatedConv {
    pub fn new(name: &str, cin: usize, cout: usize, k: usize, stride: usize, rng: &mut Rng) -> GatedConv {
        assert!(k % 2 == 1, "gated convolution requires an odd kernel, got {k}");
        GatedConv {
            feature: Conv2d::new(&format!("{name}.u"), cin, cout, k, stride, rng),
            // gate bias starts at 0 so initial gates sit at 0.5
            gate: Conv2d::new(&format!("{name}.v"), cin, cout, k, stride, rng),
            slope: LEAKY_SLOPE,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &mut Bound, x: Id) -> Id {
        let feat = self.feature.forward(tape, bound, x);
        let feat = tape.leaky_relu(feat, self.slope);
        let gate = self.gate.forward(tape, bound, x);
        let gate = tape.sigmoid(gate);
        tape.mul(feat, gate)
    }

    /// The sigmoid gate field alone (used by tests probing gate statistics).
    pub fn gate_values(&self, tape: &mut Tape, bound: &mut Bound, x: Id) -> Id {
        let gate = self.gate.forward(tape, bound, x);
        tape.sigmoid(gate)
    }
}

impl ParamSet for GatedConv {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.feature.visit(f);
        self.gate.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.feature.visit_mut(f);
        self.gate.visit_mut(f);
    }
}

/// How up-sampling blocks grow the spatial extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpMode {
    Transposed,
    Nearest,
}

/// Stride-2 conv block: halves the spatial size.
#[derive(Clone)]
pub struct DownBlock {
    pub conv: Conv2d,
    pub norm: bool,
}

impl DownBlock {
    pub fn new(name: &str, cin: usize, cout: usize, rng: &mut Rng) -> DownBlock {
        DownBlock { conv: Conv2d::new(name, cin, cout, 3, 2, rng), norm: true }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &mut Bound, x: Id) -> Id {
        let y = self.conv.forward(tape, bound, x);
        let y = if self.norm { instance_norm(tape, y) } else { y };
        tape.leaky_relu(y, LEAKY_SLOPE)
    }
}

impl ParamSet for DownBlock {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.conv.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.conv.visit_mut(f);
    }
}

/// Doubling block: transposed conv (k4 s2) or nearest upsample + conv.
#[derive(Clone)]
pub enum UpBlock {
    Transposed { conv: ConvT2d, norm: bool },
    Nearest { conv: Conv2d, norm: bool },
}

impl UpBlock {
    pub fn new(name: &str, cin: usize, cout: usize, mode: UpMode, rng: &mut Rng) -> UpBlock {
        match mode {
            UpMode::Transposed => UpBlock::Transposed {
                conv: ConvT2d::new(name, cin, cout, 4, 2, 1, rng),
                norm: true,
            },
            UpMode::Nearest => UpBlock::Nearest {
                conv: Conv2d::new(name, cin, cout, 3, 1, rng),
                norm: true,
            },
        }
    }

    pub fn without_norm(mut self) -> UpBlock {
        match &mut self {
            UpBlock::Transposed { norm, .. } | UpBlock::Nearest { norm, .. } => *norm = false,
        }
        self
    }

    pub fn forward(&self, tape: &mut Tape, bound: &mut Bound, x: Id) -> Id {
        let (y, norm) = match self {
            UpBlock::Transposed { conv, norm } => (conv.forward(tape, bound, x), *norm),
            UpBlock::Nearest { conv, norm } => {
                let up = tape.upsample2x(x);
                (conv.forward(tape, bound, up), *norm)
            }
        };
        let y = if norm { instance_norm(tape, y) } else { y };
        tape.leaky_relu(y, LEAKY_SLOPE)
    }
}

impl ParamSet for UpBlock {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        match self {
            UpBlock::Transposed { conv, .. } => conv.visit(f),
            UpBlock::Nearest { conv, .. } => conv.visit(f),
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            UpBlock::Transposed { conv, .. } => conv.visit_mut(f),
            UpBlock::Nearest { conv, .. } => conv.visit_mut(f),
        }
    }
}
