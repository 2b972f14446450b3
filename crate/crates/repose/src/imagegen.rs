//! Stage 2: the image generator.
//!
//! Pipeline: encode the source image into a 256-channel style feature, pool
//! it into the per-region style table, encode the (image, source parsing,
//! generated parsing, target pose) context, per-region-normalize the context
//! with the table, warp spatial scale/bias through the correlation with the
//! source tap, and decode to an RGB image with a tanh head.
//!
//! The style table is an explicit input surface: editing operations hand an
//! edited table in and the rest of the pipeline is untouched, which is what
//! decouples clothing shape (the parsing map) from style (the table).

use serde::{Deserialize, Serialize};

use crate::data::{ImageTensor, ParsingOneHot, PoseHeatmap, NUM_REGIONS};
use crate::extractor::{FeatureExtractor, CORRESPONDENCE_TAP};
use crate::nn::{Bound, Conv2d, ParamSet, UpBlock, UpMode};
use crate::norm::{
    correlation_on, normalized_columns, per_region_normalize, spatial_aware_normalize,
    ContextEncoder, RegionModulator, SpatialModulator,
};
use crate::rng::Rng;
use crate::style::{
    onehot_masks, pool_region_codes_on, presence_flags, SourceEncoder, StyleCodeTable, StyleMode,
    FEATURE_STRIDE, STYLE_CHANNELS,
};
use crate::tensor::{Id, Tape, Tensor};
use crate::ModelError;

/// Table 2-style configuration presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Joint global/local encoding plus spatial-aware normalization.
    Full,
    /// Every style row replaced by the global average.
    GlobalEnc,
    /// Absent regions styled with zeros instead of the global average.
    LocalEnc,
    /// Spatial-aware normalization skipped; the decoder consumes the
    /// per-region-normalized feature directly.
    NoSan,
}

impl Ablation {
    pub fn style_mode(self) -> StyleMode {
        match self {
            Ablation::GlobalEnc => StyleMode::GlobalOnly,
            Ablation::LocalEnc => StyleMode::LocalZero,
            Ablation::Full | Ablation::NoSan => StyleMode::JointGlobalLocal,
        }
    }

    pub fn uses_san(self) -> bool {
        !matches!(self, Ablation::NoSan)
    }
}

/// Architecture widths for the image generator.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageGenConfig {
    pub source_down_channels: Vec<usize>,
    pub source_up_channels: Vec<usize>,
    pub context_channels: Vec<usize>,
    /// Optional 1x1 channel reduction in front of the decoder.
    pub decoder_reduce: Option<usize>,
    /// Widths of the decoder up blocks; empty means the decoder works at
    /// feature resolution (used by locality tests).
    pub decoder_up_channels: Vec<usize>,
    pub up_mode: UpMode,
    /// Softmax temperature of the correlation warp.
    pub tau: f64,
}

impl Default for ImageGenConfig {
    fn default() -> Self {
        ImageGenConfig {
            source_down_channels: vec![32, 64, 128, 128],
            source_up_channels: vec![64, STYLE_CHANNELS],
            context_channels: vec![64, STYLE_CHANNELS],
            decoder_reduce: Some(64),
            decoder_up_channels: vec![32, 16],
            up_mode: UpMode::Transposed,
            tau: 0.01,
        }
    }
}

impl ImageGenConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.source_down_channels.len() != 4 || self.source_up_channels.len() != 2 {
            return Err("source encoder needs 4 down and 2 up widths".into());
        }
        if *self.source_up_channels.last().unwrap() != STYLE_CHANNELS {
            return Err(format!("source encoder must end at {STYLE_CHANNELS} channels"));
        }
        if self.context_channels.len() != 2 || *self.context_channels.last().unwrap() != STYLE_CHANNELS {
            return Err(format!("context encoder needs 2 widths ending at {STYLE_CHANNELS}"));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(format!("tau must be positive, got {}", self.tau));
        }
        Ok(())
    }
}

/// Where the style table comes from in a forward pass.
pub enum TableSource<'a> {
    /// Pool it from the source image (the training path).
    Pool,
    /// Use a caller-provided table (editing and tests). Bound as a
    /// differentiable leaf when `train` is set so gradients reach it.
    Override(&'a StyleCodeTable),
}

pub struct ImageGenerator {
    pub source_encoder: SourceEncoder,
    pub context_encoder: ContextEncoder,
    pub region_modulator: RegionModulator,
    pub spatial_modulator: SpatialModulator,
    reduce: Option<Conv2d>,
    ups: Vec<UpBlock>,
    proj: Conv2d,
    pub ablation: Ablation,
    tau: f64,
}

/// Tape handles produced by a forward pass.
pub struct ImageForward {
    /// Final image node (tanh output, 3 channels).
    pub image: Id,
    /// The styled context feature (after per-region normalization), which
    /// the correspondence loss reads.
    pub styled_context: Id,
    /// The style table node actually consumed ([N, 256]).
    pub table: Id,
    /// Presence flags of the pooled table (meaningless for overrides).
    pub present: [bool; NUM_REGIONS],
}

impl ImageGenerator {
    pub fn new(cfg: &ImageGenConfig, ablation: Ablation, rng: &mut Rng) -> ImageGenerator {
        cfg.validate().expect("valid image generator config");
        let source_encoder = SourceEncoder::new(
            "image.src",
            &cfg.source_down_channels,
            &cfg.source_up_channels,
            cfg.up_mode,
            rng,
        );
        let context_encoder = ContextEncoder::new("image.ctx", &cfg.context_channels, rng);
        let region_modulator = RegionModulator::new("image.prn");
        let spatial_modulator = SpatialModulator::new("image.san");
        let mut cin = STYLE_CHANNELS;
        let reduce = cfg.decoder_reduce.map(|c| {
            let conv = Conv2d::new("image.dec.reduce", cin, c, 1, 1, rng);
            cin = c;
            conv
        });
        let mut ups = Vec::new();
        for (i, &c) in cfg.decoder_up_channels.iter().enumerate() {
            ups.push(UpBlock::new(&format!("image.dec.up{i}"), cin, c, cfg.up_mode, rng));
            cin = c;
        }
        let proj = Conv2d::new("image.dec.proj", cin, 3, 3, 1, rng);
        ImageGenerator {
            source_encoder,
            context_encoder,
            region_modulator,
            spatial_modulator,
            reduce,
            ups,
            proj,
            ablation,
            tau: cfg.tau,
        }
    }

    /// Full tape forward.
    ///
    /// * `source_image`, `source_parsing`, `target_pose` are tape nodes
    ///   (constants in ordinary training).
    /// * `gen_parsing` is the stage-2 parsing condition: ground truth when
    ///   teacher-forced, stage-1 softmax during joint training.
    /// * `source_parsing_masks` are the hard region masks of the source
    ///   parsing at feature resolution (pooling always uses the source map).
    /// * `source_tap_norm` is the pre-normalized [`CORRESPONDENCE_TAP`]
    ///   matrix of the source image from [`normalized_columns`].
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &mut Bound,
        source_image: Id,
        source_parsing: Id,
        gen_parsing: Id,
        target_pose: Id,
        source_parsing_masks: &Tensor,
        source_tap_norm: &Tensor,
        table_source: TableSource,
    ) -> ImageForward {
        // one source-encoder pass feeds both the style pooling and the
        // spatial modulators
        let style_feat = if matches!(table_source, TableSource::Pool) || self.ablation.uses_san() {
            Some(self.source_encoder.forward(tape, bound, source_image))
        } else {
            None
        };
        let (table, present) = match table_source {
            TableSource::Pool => {
                let table = pool_region_codes_on(
                    tape,
                    style_feat.expect("pooled path computes the style feature"),
                    source_parsing_masks.clone(),
                    self.ablation.style_mode(),
                );
                (table, presence_flags(source_parsing_masks))
            }
            TableSource::Override(t) => {
                let id = if bound.frozen { tape.constant(t.codes.clone()) } else { tape.leaf(t.codes.clone()) };
                (id, t.present)
            }
        };
        let context = self.context_encoder.forward(
            tape,
            bound,
            source_image,
            source_parsing,
            gen_parsing,
            target_pose,
        );
        // region masks of the generated parsing at feature resolution;
        // differentiable whenever gen_parsing is
        let gen_masks = tape.downsample_nearest(gen_parsing, FEATURE_STRIDE);
        let styled = per_region_normalize(
            tape,
            bound,
            &self.region_modulator,
            context,
            table,
            gen_masks,
        );
        let decoded_input = if self.ablation.uses_san() {
            let feat = style_feat.expect("san path computes the style feature");
            let gamma = self.spatial_modulator.gamma.forward(tape, bound, feat);
            let beta = self.spatial_modulator.beta.forward(tape, bound, feat);
            let corr = correlation_on(tape, styled, source_tap_norm);
            spatial_aware_normalize(tape, styled, gamma, beta, corr, self.tau)
        } else {
            styled
        };
        let mut x = decoded_input;
        if let Some(reduce) = &self.reduce {
            x = reduce.forward(tape, bound, x);
            x = tape.leaky_relu(x, crate::nn::LEAKY_SLOPE);
        }
        for u in &self.ups {
            x = u.forward(tape, bound, x);
        }
        let logits = self.proj.forward(tape, bound, x);
        let image = tape.tanh(logits);
        ImageForward { image, styled_context: styled, table, present }
    }

    /// Frozen-weight inference from typed inputs. Returns the image and the
    /// styled context feature.
    pub fn generate(
        &self,
        fx: &FeatureExtractor,
        source_image: &ImageTensor,
        source_parsing: &ParsingOneHot,
        gen_parsing: &ParsingOneHot,
        target_pose: &PoseHeatmap,
        table: TableSource,
    ) -> Result<(ImageTensor, Tensor), ModelError> {
        let (h, w) = (source_image.height(), source_image.width());
        for (name, shape) in [
            ("source parsing", source_parsing.tensor().shape()),
            ("generated parsing", gen_parsing.tensor().shape()),
            ("target pose", target_pose.tensor().shape()),
        ] {
            if (shape[1], shape[2]) != (h, w) {
                return Err(ModelError::Shape(format!(
                    "{name} is {}x{}, image is {h}x{w}",
                    shape[1], shape[2]
                )));
            }
        }
        let src_masks = onehot_masks(source_parsing, FEATURE_STRIDE);
        let tap = fx.extract(source_image.tensor(), &[CORRESPONDENCE_TAP])?;
        let tap_norm = normalized_columns(&tap[CORRESPONDENCE_TAP]);
        let mut tape = Tape::new();
        let mut bound = Bound::frozen();
        let img = tape.constant(source_image.tensor().clone());
        let sp = tape.constant(source_parsing.tensor().clone());
        let gp = tape.constant(gen_parsing.tensor().clone());
        let pose = tape.constant(target_pose.tensor().clone());
        let out = self.forward(
            &mut tape,
            &mut bound,
            img,
            sp,
            gp,
            pose,
            &src_masks,
            &tap_norm,
            table,
        );
        let image = ImageTensor::new(tape.value(out.image).clone())
            .expect("tanh output is in range");
        Ok((image, tape.value(out.styled_context).clone()))
    }

    /// The style table this generator would pool from a source image,
    /// exposed for the editing applications.
    pub fn encode_style_table(
        &self,
        source_image: &ImageTensor,
        source_parsing: &ParsingOneHot,
    ) -> StyleCodeTable {
        let masks = onehot_masks(source_parsing, FEATURE_STRIDE);
        let mut tape = Tape::new();
        let mut bound = Bound::frozen();
        let img = tape.constant(source_image.tensor().clone());
        let feat = self.source_encoder.forward(&mut tape, &mut bound, img);
        let codes = pool_region_codes_on(&mut tape, feat, masks.clone(), self.ablation.style_mode());
        StyleCodeTable { codes: tape.value(codes).clone(), present: presence_flags(&masks) }
    }
}

impl ParamSet for ImageGenerator {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.source_encoder.visit(f);
        self.context_encoder.visit(f);
        self.region_modulator.visit(f);
        self.spatial_modulator.visit(f);
        if let Some(r) = &self.reduce {
            r.visit(f);
        }
        for u in &self.ups {
            u.visit(f);
        }
        self.proj.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.source_encoder.visit_mut(f);
        self.context_encoder.visit_mut(f);
        self.region_modulator.visit_mut(f);
        self.spatial_modulator.visit_mut(f);
        if let Some(r) = &mut self.reduce {
            r.visit_mut(f);
        }
        for u in &mut self.ups {
            u.visit_mut(f);
        }
        self.proj.visit_mut(f);
    }
}
