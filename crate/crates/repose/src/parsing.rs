//! Stage 1: the parsing-map generator.
//!
//! Encodes (source pose, target pose, source parsing) with four stride-2
//! blocks, deforms the bottleneck feature with a stack of gated convolutions
//! (the gates let the network treat unaligned regions selectively), and
//! decodes to 8-channel logits over the region categories.

use crate::data::{
    argmax_parsing, ParsingMap, ParsingOneHot, PoseHeatmap, NUM_JOINTS, NUM_REGIONS,
};
use crate::nn::{Bound, Conv2d, DownBlock, GatedConv, ParamSet, UpBlock, UpMode};
use crate::rng::Rng;
use crate::tensor::{Id, Tape, Tensor};
use crate::ModelError;

/// Encoder depth; the bottleneck sits at 1/16 resolution.
pub const ENCODER_DEPTH: usize = 4;

const INPUT_CHANNELS: usize = NUM_JOINTS * 2 + NUM_REGIONS;

/// Architecture widths for the parsing generator.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParsingGenConfig {
    pub encoder_channels: Vec<usize>,
    pub gated_blocks: usize,
    pub decoder_channels: Vec<usize>,
    pub up_mode: UpMode,
}

impl Default for ParsingGenConfig {
    fn default() -> Self {
        ParsingGenConfig {
            encoder_channels: vec![32, 64, 96, 128],
            gated_blocks: 4,
            decoder_channels: vec![96, 64, 32, 16],
            up_mode: UpMode::Transposed,
        }
    }
}

impl ParsingGenConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.encoder_channels.len() != ENCODER_DEPTH {
            return Err(format!("parsing encoder needs {ENCODER_DEPTH} widths"));
        }
        if self.decoder_channels.len() != ENCODER_DEPTH {
            return Err(format!("parsing decoder needs {ENCODER_DEPTH} widths"));
        }
        if self.gated_blocks == 0 {
            return Err("at least one gated block required".into());
        }
        Ok(())
    }
}

pub struct ParsingGenerator {
    downs: Vec<DownBlock>,
    gated: Vec<GatedConv>,
    ups: Vec<UpBlock>,
    proj: Conv2d,
}

impl ParsingGenerator {
    pub fn new(cfg: &ParsingGenConfig, rng: &mut Rng) -> ParsingGenerator {
        cfg.validate().expect("valid parsing generator config");
        let mut downs = Vec::new();
        let mut cin = INPUT_CHANNELS;
        for (i, &c) in cfg.encoder_channels.iter().enumerate() {
            downs.push(DownBlock::new(&format!("parsing.enc{i}"), cin, c, rng));
            cin = c;
        }
        let mut gated = Vec::new();
        for i in 0..cfg.gated_blocks {
            gated.push(GatedConv::new(&format!("parsing.gate{i}"), cin, cin, 3, 1, rng));
        }
        let mut ups = Vec::new();
        for (i, &c) in cfg.decoder_channels.iter().enumerate() {
            ups.push(UpBlock::new(&format!("parsing.dec{i}"), cin, c, cfg.up_mode, rng));
            cin = c;
        }
        let proj = Conv2d::new("parsing.proj", cin, NUM_REGIONS, 1, 1, rng);
        ParsingGenerator { downs, gated, ups, proj }
    }

    /// Tape forward over already-bound inputs; returns the 8-channel logits.
    pub fn forward(&self, tape: &mut Tape, bound: &mut Bound, source_pose: Id, target_pose: Id, source_parsing: Id) -> Id {
        let (h, w) = {
            let s = tape.value(source_pose).shape();
            (s[1], s[2])
        };
        for id in [target_pose, source_parsing] {
            let s = tape.value(id).shape();
            assert_eq!((s[1], s[2]), (h, w), "stage-1 inputs must share H x W");
        }
        let mut x = tape.concat_channels(&[source_pose, target_pose, source_parsing]);
        for d in &self.downs {
            x = d.forward(tape, bound, x);
        }
        for g in &self.gated {
            x = g.forward(tape, bound, x);
        }
        for u in &self.ups {
            x = u.forward(tape, bound, x);
        }
        self.proj.forward(tape, bound, x)
    }

    /// Frozen-weight inference: logits over the 8 categories per pixel.
    pub fn generate(
        &self,
        source_pose: &PoseHeatmap,
        target_pose: &PoseHeatmap,
        source_parsing: &ParsingOneHot,
    ) -> Result<Tensor, ModelError> {
        let (h, w) = (source_pose.height(), source_pose.width());
        let tp = target_pose.tensor().shape();
        let sp = source_parsing.tensor().shape();
        if (tp[1], tp[2]) != (h, w) || (sp[1], sp[2]) != (h, w) {
            return Err(ModelError::Shape(format!(
                "stage-1 inputs disagree: source pose {h}x{w}, target pose {}x{}, parsing {}x{}",
                tp[1], tp[2], sp[1], sp[2]
            )));
        }
        let mut tape = Tape::new();
        let mut bound = Bound::frozen();
        let ps = tape.constant(source_pose.tensor().clone());
        let pt = tape.constant(target_pose.tensor().clone());
        let ss = tape.constant(source_parsing.tensor().clone());
        let logits = self.forward(&mut tape, &mut bound, ps, pt, ss);
        Ok(tape.value(logits).clone())
    }

    /// Inference to a hard parsing map (channel argmax of the logits).
    pub fn generate_map(
        &self,
        source_pose: &PoseHeatmap,
        target_pose: &PoseHeatmap,
        source_parsing: &ParsingOneHot,
    ) -> Result<ParsingMap, ModelError> {
        Ok(argmax_parsing(&self.generate(source_pose, target_pose, source_parsing)?))
    }
}

impl ParamSet for ParsingGenerator {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for d in &self.downs {
            d.visit(f);
        }
        for g in &self.gated {
            g.visit(f);
        }
        for u in &self.ups {
            u.visit(f);
        }
        self.proj.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for d in &mut self.downs {
            d.visit_mut(f);
        }
        for g in &mut self.gated {
            g.visit_mut(f);
        }
        for u in &mut self.ups {
            u.visit_mut(f);
        }
        self.proj.visit_mut(f);
    }
}

/// Stage-1 objective: per-pixel cross-entropy (with its 1/N category
/// prefactor) plus `lambda_l1` times the mean absolute difference between
/// the softmax probabilities and the one-hot target. Both terms are averaged
/// over pixels, so the weight is resolution-independent.
pub fn parsing_loss(tape: &mut Tape, logits: Id, target: Id, lambda_l1: f64) -> Id {
    assert!(lambda_l1 >= 0.0);
    assert_eq!(
        tape.value(logits).shape(),
        tape.value(target).shape(),
        "parsing loss shapes differ"
    );
    // cross term: -(1/N) sum_i target_i * log softmax(logits)_i, pixel mean
    let log_probs = tape.log_softmax_chans(logits);
    let weighted = tape.mul(target, log_probs);
    let per_pixel = tape.sum_chans(weighted);
    let mean = tape.mean_all(per_pixel);
    let cross = tape.mul_scalar(mean, -1.0 / NUM_REGIONS as f64);
    // l1 term on probabilities
    let probs = tape.softmax_chans(logits);
    let diff = tape.sub(probs, target);
    let abs = tape.abs(diff);
    let l1 = tape.mean_all(abs);
    let l1w = tape.mul_scalar(l1, lambda_l1);
    tape.add(cross, l1w)
}
