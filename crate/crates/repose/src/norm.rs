//! The two conditional normalization mechanisms of the image stage.
//!
//! Per-region normalization broadcasts a scale/bias pair predicted from each
//! region's style code over that region's pixels. Spatial-aware
//! normalization recovers what pooling throws away: spatial scale/bias maps
//! are extracted from the source feature with 1x1 convs and warped onto the
//! target layout through a cosine-correlation matrix between the styled
//! context feature and a fixed-extractor tap of the source image.
//!
//! Conventions:
//! * region masks arrive at feature resolution and may be soft (they are
//!   tape nodes during joint training);
//! * correlation rows index target positions, columns source positions;
//! * both features are channel-centralized per position before the cosine;
//! * the warp uses a row-softmax of the correlation at temperature `tau`,
//!   so `tau -> 0` recovers hard selection.

use crate::data::NUM_REGIONS;
use crate::nn::{instance_norm, Bound, Conv2d, DownBlock, Linear, ParamSet};
use crate::rng::Rng;
use crate::style::STYLE_CHANNELS;
use crate::tensor::{kernels, Id, Tape, Tensor};

/// Epsilon guarding cosine denominators.
pub const COSINE_EPS: f64 = 1e-8;

/// Channels of the concatenated context input: image + source parsing +
/// generated parsing + target pose.
pub const CONTEXT_IN_CHANNELS: usize = 3 + NUM_REGIONS + NUM_REGIONS + crate::data::NUM_JOINTS;

/// Encodes the concatenated (image, source parsing, generated parsing,
/// target pose) stack to [`STYLE_CHANNELS`] at quarter resolution.
pub struct ContextEncoder {
    downs: Vec<DownBlock>,
}

impl ContextEncoder {
    pub fn new(name: &str, channels: &[usize], rng: &mut Rng) -> ContextEncoder {
        assert_eq!(channels.len(), 2, "context encoder uses 2 down blocks");
        assert_eq!(*channels.last().unwrap(), STYLE_CHANNELS);
        let mut downs = Vec::new();
        let mut cin = CONTEXT_IN_CHANNELS;
        for (i, &c) in channels.iter().enumerate() {
            downs.push(DownBlock::new(&format!("{name}.down{i}"), cin, c, rng));
            cin = c;
        }
        ContextEncoder { downs }
    }

    /// Inputs must share H x W; output is [256, H/4, W/4].
    pub fn forward(&self, tape: &mut Tape, bound: &mut Bound, image: Id, src_parsing: Id, gen_parsing: Id, target_pose: Id) -> Id {
        let (h, w) = {
            let s = tape.value(image).shape();
            (s[1], s[2])
        };
        for id in [src_parsing, gen_parsing, target_pose] {
            let s = tape.value(id).shape();
            assert_eq!((s[1], s[2]), (h, w), "context inputs must share H x W");
        }
        let mut x = tape.concat_channels(&[image, src_parsing, gen_parsing, target_pose]);
        debug_assert_eq!(tape.value(x).shape()[0], CONTEXT_IN_CHANNELS);
        for d in &self.downs {
            x = d.forward(tape, bound, x);
        }
        x
    }
}

impl ParamSet for ContextEncoder {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for d in &self.downs {
            d.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for d in &mut self.downs {
            d.visit_mut(f);
        }
    }
}

/// The two fully connected layers predicting per-region scale and bias from
/// style codes. Zero-initialized, so normalization starts as the identity.
pub struct RegionModulator {
    pub fc_scale: Linear,
    pub fc_bias: Linear,
}

impl RegionModulator {
    pub fn new(name: &str) -> RegionModulator {
        RegionModulator {
            fc_scale: Linear::zeroed(&format!("{name}.scale"), STYLE_CHANNELS, STYLE_CHANNELS),
            fc_bias: Linear::zeroed(&format!("{name}.bias"), STYLE_CHANNELS, STYLE_CHANNELS),
        }
    }
}

impl ParamSet for RegionModulator {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.fc_scale.visit(f);
        self.fc_bias.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.fc_scale.visit_mut(f);
        self.fc_bias.visit_mut(f);
    }
}

/// Instance-normalize `feat`, then apply `(1 + scale_r) * x + bias_r` where
/// r is each pixel's region under `masks` ([N, h, w], rows summing to 1 per
/// pixel). Soft masks blend the per-region affines, which reduces to hard
/// selection on one-hot masks and keeps joint training differentiable.
pub fn per_region_normalize(
    tape: &mut Tape,
    bound: &mut Bound,
    modulator: &RegionModulator,
    feat: Id,
    codes: Id,
    masks: Id,
) -> Id {
    let n = tape.value(masks).shape()[0];
    assert_eq!(n, NUM_REGIONS, "mask rows must cover every region");
    assert_eq!(tape.value(codes).shape(), &[NUM_REGIONS, STYLE_CHANNELS]);
    let normalized = instance_norm(tape, feat);
    let scales = modulator.fc_scale.forward(tape, bound, codes); // [N, C]
    let biases = modulator.fc_bias.forward(tape, bound, codes);
    let mask_rows = {
        let s = tape.value(masks).shape().to_vec();
        tape.reshape(masks, &[s[0], s[1] * s[2]])
    };
    let mut acc: Option<Id> = None;
    for j in 0..NUM_REGIONS {
        let scale_j = tape.row(scales, j);
        let scale_j = tape.add_scalar(scale_j, 1.0);
        let bias_j = tape.row(biases, j);
        let scaled = tape.mul_chan(normalized, scale_j);
        let affine = tape.add_chan(scaled, bias_j);
        let mask_j = tape.row(mask_rows, j);
        let term = tape.mul_pos(affine, mask_j);
        acc = Some(match acc {
            Some(a) => tape.add(a, term),
            None => term,
        });
    }
    acc.expect("at least one region")
}

/// Channel-wise centralization (subtract each position's channel mean) and
/// column normalization, producing the [C, L] matrix used by the cosine.
/// `norms2` returns the squared norms per position for exact-denominator
/// callers.
fn centralize(feat: &Tensor) -> (Tensor, Vec<f64>) {
    let (c, h, w) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);
    let hw = h * w;
    let mut centered = Tensor::zeros(&[c, hw]);
    let mut norms2 = vec![0.0; hw];
    {
        let src = feat.data();
        let dst = centered.data_mut();
        for p in 0..hw {
            let mut mean = 0.0;
            for ci in 0..c {
                mean += src[ci * hw + p];
            }
            mean /= c as f64;
            let mut n2 = 0.0;
            for ci in 0..c {
                let v = src[ci * hw + p] - mean;
                dst[ci * hw + p] = v;
                n2 += v * v;
            }
            norms2[p] = n2;
        }
    }
    (centered, norms2)
}

/// Cosine-correlation matrix between two [C, h, w] features (plain path).
/// Entry (p1, p2) is the cosine between the channel-centralized vectors of
/// `target_feat` at p1 and `source_feat` at p2; denominators are guarded by
/// [`COSINE_EPS`] and the output is clamped to [-1, 1].
pub fn compute_correlation(target_feat: &Tensor, source_feat: &Tensor) -> Tensor {
    assert_eq!(target_feat.shape(), source_feat.shape(), "correlation features must share shape");
    assert!(target_feat.all_finite() && source_feat.all_finite());
    let (ta, na2) = centralize(target_feat);
    let (sb, nb2) = centralize(source_feat);
    let tat = kernels::transpose2d(&ta); // [L, C]
    let mut m = kernels::matmul(&tat, &sb); // [L, L]
    let l = na2.len();
    {
        let d = m.data_mut();
        let eps2 = COSINE_EPS * COSINE_EPS;
        for p1 in 0..l {
            let a = na2[p1].max(eps2);
            for p2 in 0..l {
                let denom = (a * nb2[p2].max(eps2)).sqrt();
                d[p1 * l + p2] = (d[p1 * l + p2] / denom).clamp(-1.0, 1.0);
            }
        }
    }
    m
}

/// Centralize-and-normalize a constant source tap for the tape-side
/// correlation: output is [C, L] with unit (eps-guarded) columns.
pub fn normalized_columns(feat: &Tensor) -> Tensor {
    let (mut centered, norms2) = centralize(feat);
    let c = feat.shape()[0];
    let hw = norms2.len();
    {
        let d = centered.data_mut();
        for (p, &n2) in norms2.iter().enumerate() {
            let inv = 1.0 / n2.max(COSINE_EPS * COSINE_EPS).sqrt();
            for ci in 0..c {
                d[ci * hw + p] *= inv;
            }
        }
    }
    centered
}

/// Tape-side correlation between a differentiable feature and a constant
/// pre-normalized source matrix ([C, L] from [`normalized_columns`]).
pub fn correlation_on(tape: &mut Tape, feat: Id, source_norm: &Tensor) -> Id {
    let s = tape.value(feat).shape().to_vec();
    let (c, hw) = (s[0], s[1] * s[2]);
    assert_eq!(source_norm.shape(), &[c, hw]);
    // centralize across channels per position
    let mean = tape.mean_chans(feat);
    let neg_mean = tape.mul_scalar(mean, -1.0);
    let centered = tape.add_pos(feat, neg_mean);
    let sq = tape.mul(centered, centered);
    let n2 = tape.sum_chans(sq);
    let n2 = tape.clamp(n2, COSINE_EPS * COSINE_EPS, f64::INFINITY);
    let norm = tape.sqrt(n2);
    let inv = tape.recip(norm);
    let unit = tape.mul_pos(centered, inv);
    let unit2d = tape.reshape(unit, &[c, hw]);
    let unit_t = tape.transpose(unit2d); // [L, C]
    let src = tape.constant(source_norm.clone());
    tape.matmul(unit_t, src) // [L, L]
}

/// The 1x1 projections extracting spatial scale and bias maps from the
/// source feature. Zero-initialized so the warp starts as the identity.
pub struct SpatialModulator {
    pub gamma: Conv2d,
    pub beta: Conv2d,
}

impl SpatialModulator {
    pub fn new(name: &str) -> SpatialModulator {
        SpatialModulator {
            gamma: Conv2d::zeroed(&format!("{name}.gamma"), STYLE_CHANNELS, STYLE_CHANNELS, 1, 1),
            beta: Conv2d::zeroed(&format!("{name}.beta"), STYLE_CHANNELS, STYLE_CHANNELS, 1, 1),
        }
    }
}

impl ParamSet for SpatialModulator {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.gamma.visit(f);
        self.beta.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.gamma.visit_mut(f);
        self.beta.visit_mut(f);
    }
}

/// Warp spatial modulation maps from source to target positions through the
/// row-softmax of the correlation at temperature `tau`, then modulate the
/// instance-normalized feature: `(1 + gamma') * norm(feat) + beta'`.
pub fn spatial_aware_normalize(
    tape: &mut Tape,
    feat: Id,
    gamma: Id,
    beta: Id,
    correlation: Id,
    tau: f64,
) -> Id {
    assert!(tau > 0.0, "softmax temperature must be positive");
    let s = tape.value(feat).shape().to_vec();
    let (c, h, w) = (s[0], s[1], s[2]);
    let hw = h * w;
    assert_eq!(tape.value(correlation).shape(), &[hw, hw]);
    let scaled = tape.mul_scalar(correlation, 1.0 / tau);
    let weights = tape.softmax_rows(scaled); // [L_target, L_source]
    let mut warped = Vec::with_capacity(2);
    for maps in [gamma, beta] {
        let flat = tape.reshape(maps, &[c, hw]);
        let flat_t = tape.transpose(flat); // [L_source, C]
        let moved = tape.matmul(weights, flat_t); // [L_target, C]
        let moved_t = tape.transpose(moved);
        warped.push(tape.reshape(moved_t, &[c, h, w]));
    }
    let normalized = instance_norm(tape, feat);
    let gain = tape.add_scalar(warped[0], 1.0);
    let scaled_feat = tape.mul(normalized, gain);
    tape.add(scaled_feat, warped[1])
}
