//! Frozen convolutional feature extractor behind a named-tap contract.
//!
//! Both implementations expose the same tap names; `conv3_1` is guaranteed to
//! be 256-channel at stride 4, which the correlation layer and the
//! correspondence loss rely on.
//!
//! * [`FeatureExtractor::stub`]: deterministic random-weight network, used by
//!   tests and desk-scale training so nothing external is required.
//! * [`FeatureExtractor::vgg19_from_checkpoint`]: the standard 19-layer
//!   topology, loading pretrained weights from a named-tensor checkpoint
//!   (see README for the export recipe). Exercised by an opt-in test only.
//!
//! Inputs are renormalized from [-1,1] to the extractor's expected statistics
//! internally; callers never handle it.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::{kernels, Id, Tape, Tensor};

/// Taps that every implementation must provide.
pub const REQUIRED_TAPS: [&str; 10] = [
    "conv3_1", "relu1_1", "relu2_1", "relu2_2", "relu3_1", "relu3_4", "relu4_1", "relu4_4",
    "relu5_1", "relu5_2",
];

/// Taps summed by the perceptual loss.
pub const PERCEPTUAL_TAPS: [&str; 5] = ["relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1"];

/// Taps summed by the style (gram) loss.
pub const STYLE_TAPS: [&str; 4] = ["relu2_2", "relu3_4", "relu4_4", "relu5_2"];

/// The tap consumed by the correlation layer and correspondence loss.
pub const CORRESPONDENCE_TAP: &str = "conv3_1";

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Error)]
pub enum ExtractorError {
    #[error("unknown tap {0}")]
    UnknownTap(String),
    #[error("checkpoint missing tensor {0}")]
    MissingTensor(String),
    #[error("tensor {name} has shape {got:?}, expected {expected:?}")]
    BadShape { name: String, got: Vec<usize>, expected: Vec<usize> },
}

/// (channels, stride) of a tap.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TapSpec {
    pub channels: usize,
    pub stride: usize,
}

enum Step {
    Conv {
        w: Tensor,
        b: Tensor,
        stride: usize,
        /// Tap on the pre-activation output.
        tap_pre: Option<&'static str>,
        /// Tap after the ReLU.
        tap_post: Option<&'static str>,
    },
    MaxPool,
}

pub struct FeatureExtractor {
    id: String,
    steps: Vec<Step>,
    taps: BTreeMap<String, TapSpec>,
    /// Index of the last step each tap needs, for early exit.
    tap_depth: BTreeMap<String, usize>,
}

impl FeatureExtractor {
    /// Deterministic frozen random-weight extractor.
    pub fn stub(seed: u64) -> FeatureExtractor {
        let mut rng = Rng::from_seed(seed ^ 0xfeed_beef_cafe_0001);
        // (cin, cout, stride, tap_pre, tap_post)
        let plan: [(usize, usize, usize, Option<&'static str>, Option<&'static str>); 9] = [
            (3, 16, 1, None, Some("relu1_1")),
            (16, 24, 2, None, Some("relu2_1")),
            (24, 24, 1, None, Some("relu2_2")),
            (24, 256, 2, Some("conv3_1"), Some("relu3_1")),
            (256, 32, 1, None, Some("relu3_4")),
            (32, 48, 2, None, Some("relu4_1")),
            (48, 48, 1, None, Some("relu4_4")),
            (48, 64, 2, None, Some("relu5_1")),
            (64, 64, 1, None, Some("relu5_2")),
        ];
        let mut steps = Vec::new();
        for (cin, cout, stride, tap_pre, tap_post) in plan {
            // He-uniform keeps activation magnitude stable through ReLUs
            let bound = (6.0 / (cin * 9) as f64).sqrt();
            steps.push(Step::Conv {
                w: Tensor::uniform(&[cout, cin, 3, 3], -bound, bound, &mut rng),
                b: Tensor::zeros(&[cout]),
                stride,
                tap_pre,
                tap_post,
            });
        }
        Self::assemble(format!("stub-{seed}"), steps)
    }

    /// Standard 19-layer topology; weights come from a named-tensor
    /// checkpoint with entries `conv{i}_{j}.w` / `conv{i}_{j}.b`.
    pub fn vgg19_from_checkpoint(path: &Path) -> Result<FeatureExtractor, crate::checkpoint::CheckpointError> {
        let ckpt = crate::checkpoint::Checkpoint::load(path)?;
        let blocks: [(usize, usize, usize); 5] =
            [(2, 3, 64), (2, 64, 128), (4, 128, 256), (4, 256, 512), (4, 512, 512)];
        let mut steps = Vec::new();
        for (bi, (convs, cin_first, cout)) in blocks.into_iter().enumerate() {
            for ci in 0..convs {
                let cin = if ci == 0 { cin_first } else { cout };
                let name = format!("conv{}_{}", bi + 1, ci + 1);
                let w = ckpt.tensor(&format!("{name}.w")).ok_or_else(|| {
                    crate::checkpoint::CheckpointError::MissingTensor(format!("{name}.w"))
                })?;
                let b = ckpt.tensor(&format!("{name}.b")).ok_or_else(|| {
                    crate::checkpoint::CheckpointError::MissingTensor(format!("{name}.b"))
                })?;
                if w.shape() != [cout, cin, 3, 3] {
                    return Err(crate::checkpoint::CheckpointError::Corrupt(format!(
                        "{name}.w has shape {:?}, expected {:?}",
                        w.shape(),
                        [cout, cin, 3, 3]
                    )));
                }
                let tap_pre = match name.as_str() {
                    "conv3_1" => Some("conv3_1"),
                    _ => None,
                };
                let tap_post = match name.as_str() {
                    "conv1_1" => Some("relu1_1"),
                    "conv2_1" => Some("relu2_1"),
                    "conv2_2" => Some("relu2_2"),
                    "conv3_1" => Some("relu3_1"),
                    "conv3_4" => Some("relu3_4"),
                    "conv4_1" => Some("relu4_1"),
                    "conv4_4" => Some("relu4_4"),
                    "conv5_1" => Some("relu5_1"),
                    "conv5_2" => Some("relu5_2"),
                    _ => None,
                };
                steps.push(Step::Conv { w: w.clone(), b: b.clone(), stride: 1, tap_pre, tap_post });
            }
            if bi < 4 {
                steps.push(Step::MaxPool);
            }
        }
        Ok(Self::assemble("vgg19".to_string(), steps))
    }

    fn assemble(id: String, steps: Vec<Step>) -> FeatureExtractor {
        let mut taps = BTreeMap::new();
        let mut tap_depth = BTreeMap::new();
        let mut stride = 1usize;
        for (i, step) in steps.iter().enumerate() {
            match step {
                Step::Conv { w, stride: s, tap_pre, tap_post, .. } => {
                    stride *= s;
                    for tap in [tap_pre, tap_post].into_iter().flatten() {
                        taps.insert(tap.to_string(), TapSpec { channels: w.shape()[0], stride });
                        tap_depth.insert(tap.to_string(), i);
                    }
                }
                Step::MaxPool => stride *= 2,
            }
        }
        for required in REQUIRED_TAPS {
            assert!(taps.contains_key(required), "extractor missing required tap {required}");
        }
        let spec = taps["conv3_1"];
        assert_eq!((spec.channels, spec.stride), (256, 4), "conv3_1 must be 256ch at stride 4");
        FeatureExtractor { id, steps, taps, tap_depth }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn taps(&self) -> &BTreeMap<String, TapSpec> {
        &self.taps
    }

    fn depth_for(&self, names: &[&str]) -> Result<usize, ExtractorError> {
        let mut depth = 0;
        for &n in names {
            match self.tap_depth.get(n) {
                Some(&d) => depth = depth.max(d),
                None => return Err(ExtractorError::UnknownTap(n.to_string())),
            }
        }
        Ok(depth)
    }

    /// Run on the tape (weights bound as constants, so gradients flow to the
    /// image but never into the extractor).
    pub fn extract_on(
        &self,
        tape: &mut Tape,
        img: Id,
        names: &[&str],
    ) -> Result<BTreeMap<String, Id>, ExtractorError> {
        let depth = self.depth_for(names)?;
        let mut out = BTreeMap::new();
        // [-1,1] -> [0,1] -> standardized
        let half = tape.add_scalar(img, 1.0);
        let mut x = tape.mul_scalar(half, 0.5);
        let scale = Tensor::from_vec(&[3], IMAGENET_STD.iter().map(|s| 1.0 / s).collect());
        let shift = Tensor::from_vec(&[3], IMAGENET_MEAN.iter().map(|m| -m).collect());
        let shift = tape.constant(shift);
        let scale = tape.constant(scale);
        x = tape.add_chan(x, shift);
        x = tape.mul_chan(x, scale);
        for (i, step) in self.steps.iter().enumerate() {
            if i > depth {
                break;
            }
            match step {
                Step::Conv { w, b, stride, tap_pre, tap_post } => {
                    let wi = tape.constant(w.clone());
                    let bi = tape.constant(b.clone());
                    let pre = tape.conv2d(x, wi, bi, *stride, 1);
                    if let Some(t) = tap_pre {
                        if names.contains(t) {
                            out.insert(t.to_string(), pre);
                        }
                    }
                    let post = tape.relu(pre);
                    if let Some(t) = tap_post {
                        if names.contains(t) {
                            out.insert(t.to_string(), post);
                        }
                    }
                    x = post;
                }
                Step::MaxPool => {
                    x = tape.maxpool2x2(x);
                }
            }
        }
        Ok(out)
    }

    /// Plain-tensor extraction with no tape involved; used for per-sample
    /// caches and metrics.
    pub fn extract(
        &self,
        img: &Tensor,
        names: &[&str],
    ) -> Result<BTreeMap<String, Tensor>, ExtractorError> {
        let depth = self.depth_for(names)?;
        let mut out = BTreeMap::new();
        let mut x = img.clone();
        {
            let d = x.data_mut();
            let hw = img.shape()[1] * img.shape()[2];
            for c in 0..3 {
                for v in &mut d[c * hw..(c + 1) * hw] {
                    *v = ((*v + 1.0) * 0.5 - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
                }
            }
        }
        for (i, step) in self.steps.iter().enumerate() {
            if i > depth {
                break;
            }
            match step {
                Step::Conv { w, b, stride, tap_pre, tap_post } => {
                    let pre = kernels::conv2d(&x, w, b, *stride, 1);
                    if let Some(t) = tap_pre {
                        if names.contains(t) {
                            out.insert(t.to_string(), pre.clone());
                        }
                    }
                    let post = pre.map(|v| v.max(0.0));
                    if let Some(t) = tap_post {
                        if names.contains(t) {
                            out.insert(t.to_string(), post.clone());
                        }
                    }
                    x = post;
                }
                Step::MaxPool => {
                    let (p, _) = kernels::maxpool2x2(&x);
                    x = p;
                }
            }
        }
        Ok(out)
    }

    /// Pooled `conv3_1` embedding; the default image embedder for FID.
    pub fn embed(&self, img: &Tensor) -> Tensor {
        let taps = self.extract(img, &[CORRESPONDENCE_TAP]).expect("conv3_1 present");
        let f = &taps[CORRESPONDENCE_TAP];
        let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
        let mut out = Tensor::zeros(&[c]);
        {
            let dst = out.data_mut();
            for ci in 0..c {
                dst[ci] = f.data()[ci * h * w..(ci + 1) * h * w].iter().sum::<f64>() / (h * w) as f64;
            }
        }
        out
    }
}

/// Gram matrix `A A^T / (C*H*W)` of a [C,H,W] feature.
pub fn gram(f: &Tensor) -> Tensor {
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let a = f.reshaped(&[c, h * w]);
    let at = kernels::transpose2d(&a);
    kernels::matmul(&a, &at).scale(1.0 / (c * h * w) as f64)
}

/// Gram matrix on the tape (for the style loss).
pub fn gram_on(tape: &mut Tape, f: Id) -> Id {
    let s = tape.value(f).shape().to_vec();
    let (c, h, w) = (s[0], s[1], s[2]);
    let a = tape.reshape(f, &[c, h * w]);
    let at = tape.transpose(a);
    let g = tape.matmul(a, at);
    tape.mul_scalar(g, 1.0 / (c * h * w) as f64)
}
