//! Training: Adam, the patch discriminator, and the three-phase schedule
//! (parsing stage alone, image stage alone, then joint end-to-end).
//!
//! Determinism contract: one RNG seeded from the config drives weight init
//! and sample order; its state is persisted in checkpoints together with the
//! optimizer moments, so a resumed run continues the exact stream and
//! reproduces an uninterrupted run's losses.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ParsingSource, RunConfig};
use crate::data::{
    encode_pose_heatmap, one_hot, ParsingOneHot, PairedSample, PoseHeatmap,
};
use crate::extractor::{
    gram, FeatureExtractor, CORRESPONDENCE_TAP, PERCEPTUAL_TAPS, STYLE_TAPS,
};
use crate::imagegen::{ImageForward, ImageGenerator, TableSource};
use crate::losses::{
    adversarial_d_loss, adversarial_g_loss, correspondence_loss, perceptual_loss,
    reconstruction_l1, style_loss, total_image_loss, ImageLossTerms, LossWeights,
};
use crate::nn::{Bound, Conv2d, DownBlock, ParamSet};
use crate::norm::normalized_columns;
use crate::parsing::{parsing_loss, ParsingGenerator};
use crate::rng::Rng;
use crate::style::{onehot_masks, FEATURE_STRIDE};
use crate::tensor::{Grads, Id, Tape, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}; diagnostic snapshot at {snapshot}")]
    NonFinite { step: usize, snapshot: PathBuf },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Model(#[from] crate::ModelError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |e| TrainError::Io { path: path.display().to_string(), source: e }
}

/// The sample-order stream is independent of weight-init draws so phases
/// with different parameter counts still walk the data identically.
fn order_rng(seed: u64) -> Rng {
    Rng::from_seed(seed ^ 0xda7a_c0de_5a3b_1e77)
}

/// Adam with bias correction; moments keyed by parameter name.
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Adam {
        Adam { lr, beta1, beta2, eps, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn from_optim(o: &crate::config::OptimSection, lr: f64) -> Adam {
        Adam::new(lr, o.beta1, o.beta2, o.eps)
    }

    /// Apply one step over every (name, grad) pair to the model's tensors.
    pub fn step(&mut self, model: &mut dyn ParamSet, grads: &BTreeMap<String, Tensor>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        model.visit_mut(&mut |name, value| {
            let Some(g) = grads.get(name) else { return };
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let (md, vd) = (m.data_mut(), v.data_mut());
            let out = value.data_mut();
            for i in 0..g.len() {
                let gi = g.data()[i];
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                out[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        });
    }

    /// Persist moments and step counter under `opt.<tag>.` names.
    pub fn save_into(&self, ckpt: &mut Checkpoint, tag: &str) {
        ckpt.meta.insert(format!("opt.{tag}.t"), self.t.to_string());
        for (name, m) in &self.m {
            ckpt.insert(&format!("opt.{tag}.m.{name}"), m.clone());
        }
        for (name, v) in &self.v {
            ckpt.insert(&format!("opt.{tag}.v.{name}"), v.clone());
        }
    }

    pub fn load_from(&mut self, ckpt: &Checkpoint, tag: &str) {
        if let Some(t) = ckpt.meta.get(&format!("opt.{tag}.t")) {
            self.t = t.parse().unwrap_or(0);
        }
        self.m.clear();
        self.v.clear();
        let (mp, vp) = (format!("opt.{tag}.m."), format!("opt.{tag}.v."));
        for (name, tensor) in ckpt.iter() {
            if let Some(rest) = name.strip_prefix(&mp) {
                self.m.insert(rest.to_string(), tensor.clone());
            } else if let Some(rest) = name.strip_prefix(&vp) {
                self.v.insert(rest.to_string(), tensor.clone());
            }
        }
    }
}

/// Patch discriminator: stride-2 conv blocks down to a logit map.
pub struct Discriminator {
    blocks: Vec<DownBlock>,
    proj: Conv2d,
}

impl Discriminator {
    pub fn new(channels: &[usize], rng: &mut Rng) -> Discriminator {
        assert!(!channels.is_empty());
        let mut blocks = Vec::new();
        let mut cin = 3;
        for (i, &c) in channels.iter().enumerate() {
            let mut b = DownBlock::new(&format!("disc.b{i}"), cin, c, rng);
            if i == 0 {
                b.norm = false;
            }
            blocks.push(b);
            cin = c;
        }
        Discriminator { blocks, proj: Conv2d::new("disc.proj", cin, 1, 1, 1, rng) }
    }

    /// Patch logits; spatial size input/2^blocks (must stay >= 1).
    pub fn forward(&self, tape: &mut Tape, bound: &mut Bound, img: Id) -> Id {
        let mut x = img;
        for b in &self.blocks {
            x = b.forward(tape, bound, x);
        }
        let out = self.proj.forward(tape, bound, x);
        debug_assert!(tape.value(out).shape()[1] >= 1);
        out
    }
}

impl ParamSet for Discriminator {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for b in &self.blocks {
            b.visit(f);
        }
        self.proj.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        self.proj.visit_mut(f);
    }
}

/// A training sample with every per-sample constant precomputed: heatmaps,
/// one-hots, feature-resolution masks, and the frozen extractor caches the
/// image losses need.
pub struct PreparedSample {
    pub pair: PairedSample,
    pub src_heat: PoseHeatmap,
    pub tgt_heat: PoseHeatmap,
    pub src_onehot: ParsingOneHot,
    pub tgt_onehot: ParsingOneHot,
    pub src_masks: Tensor,
    pub src_tap_norm: Tensor,
    pub tgt_corr_tap: Tensor,
    pub tgt_taps: BTreeMap<String, Tensor>,
    pub tgt_grams: BTreeMap<String, Tensor>,
}

/// Precompute constants. `with_image_caches` controls whether the extractor
/// runs (stage-1-only training skips it).
pub fn prepare_samples(
    pairs: Vec<PairedSample>,
    fx: &FeatureExtractor,
    sigma: f64,
    with_image_caches: bool,
) -> Vec<PreparedSample> {
    pairs
        .into_iter()
        .map(|pair| {
            let (h, w) = (pair.height(), pair.width());
            let src_heat = encode_pose_heatmap(&pair.source_keypoints, h, w, sigma);
            let tgt_heat = encode_pose_heatmap(&pair.target_keypoints, h, w, sigma);
            let src_onehot = one_hot(&pair.source_parsing);
            let tgt_onehot = one_hot(&pair.target_parsing);
            let src_masks = onehot_masks(&src_onehot, FEATURE_STRIDE);
            let (src_tap_norm, tgt_corr_tap, tgt_taps, tgt_grams) = if with_image_caches {
                let src = fx
                    .extract(pair.source_image.tensor(), &[CORRESPONDENCE_TAP])
                    .expect("correspondence tap");
                let mut all_taps: Vec<&str> = PERCEPTUAL_TAPS.to_vec();
                all_taps.extend(STYLE_TAPS);
                all_taps.push(CORRESPONDENCE_TAP);
                let tgt = fx
                    .extract(pair.target_image.tensor(), &all_taps)
                    .expect("target taps");
                let grams: BTreeMap<String, Tensor> = STYLE_TAPS
                    .iter()
                    .map(|&n| (n.to_string(), gram(&tgt[n])))
                    .collect();
                (
                    normalized_columns(&src[CORRESPONDENCE_TAP]),
                    tgt[CORRESPONDENCE_TAP].clone(),
                    tgt,
                    grams,
                )
            } else {
                (Tensor::zeros(&[1]), Tensor::zeros(&[1]), BTreeMap::new(), BTreeMap::new())
            };
            PreparedSample {
                pair,
                src_heat,
                tgt_heat,
                src_onehot,
                tgt_onehot,
                src_masks,
                src_tap_norm,
                tgt_corr_tap,
                tgt_taps,
                tgt_grams,
            }
        })
        .collect()
}

/// One structured log line per step.
#[derive(Clone, Debug, Serialize)]
pub struct LogRecord {
    pub step: usize,
    pub phase: String,
    #[serde(flatten)]
    pub terms: BTreeMap<String, f64>,
    pub wall_ms: f64,
}

pub struct TrainOutcome {
    pub final_loss: f64,
    pub checkpoint: PathBuf,
    pub log: Vec<LogRecord>,
}

fn grads_by_name(bound: &Bound, grads: &mut Grads) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    for (name, id) in bound.iter() {
        if let Some(g) = grads.take(*id) {
            out.insert(name.clone(), g);
        }
    }
    out
}

fn rng_state_to_meta(rng: &Rng, ckpt: &mut Checkpoint) {
    let s = rng.state();
    ckpt.meta.insert(
        "rng".to_string(),
        format!("{:016x}{:016x}{:016x}{:016x}", s[0], s[1], s[2], s[3]),
    );
}

fn rng_state_from_meta(ckpt: &Checkpoint) -> Option<Rng> {
    let hex = ckpt.meta.get("rng")?;
    if hex.len() != 64 {
        return None;
    }
    let mut s = [0u64; 4];
    for (i, part) in s.iter_mut().enumerate() {
        *part = u64::from_str_radix(&hex[i * 16..(i + 1) * 16], 16).ok()?;
    }
    Some(Rng::from_state(s))
}

pub fn save_params(model: &dyn ParamSet, ckpt: &mut Checkpoint, prefix: &str) {
    model.visit(&mut |name, t| ckpt.insert(&format!("{prefix}{name}"), t.clone()));
}

pub fn load_params(model: &mut dyn ParamSet, ckpt: &Checkpoint, prefix: &str) -> Result<(), CheckpointError> {
    let mut missing = None;
    model.visit_mut(&mut |name, t| {
        let full = format!("{prefix}{name}");
        match ckpt.tensor(&full) {
            Some(saved) if saved.shape() == t.shape() => *t = saved.clone(),
            Some(saved) => {
                missing.get_or_insert(CheckpointError::Corrupt(format!(
                    "{full}: shape {:?} in file, model wants {:?}",
                    saved.shape(),
                    t.shape()
                )));
            }
            None => {
                missing.get_or_insert(CheckpointError::MissingTensor(full));
            }
        }
    });
    match missing {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

struct LogSink {
    path: PathBuf,
    file: std::fs::File,
}

impl LogSink {
    fn create(dir: &Path, phase: &str) -> Result<LogSink, TrainError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(format!("log_{phase}.jsonl"));
        let file = std::fs::File::create(&path).map_err(io_err(&path))?;
        Ok(LogSink { path, file })
    }

    fn write(&mut self, rec: &LogRecord) -> Result<(), TrainError> {
        let line = serde_json::to_string(rec).expect("log record serializes");
        writeln!(self.file, "{line}").map_err(io_err(&self.path))?;
        Ok(())
    }
}

fn ckpt_path(dir: &Path, phase: &str, step: usize) -> PathBuf {
    dir.join(format!("ckpt_{phase}_{step}"))
}

/// Stage-1 trainer: owns the parsing generator and its optimizer.
pub struct ParsingTrainer {
    pub generator: ParsingGenerator,
    pub adam: Adam,
    pub lambda_l1: f64,
}

impl ParsingTrainer {
    pub fn new(cfg: &RunConfig, rng: &mut Rng) -> ParsingTrainer {
        ParsingTrainer {
            generator: ParsingGenerator::new(&cfg.model.parsing, rng),
            adam: Adam::from_optim(&cfg.optim, cfg.optim.lr_g),
            lambda_l1: cfg.loss.lambda_parsing_l1,
        }
    }

    /// One optimizer step over a batch; returns the batch loss.
    pub fn step(&mut self, batch: &[&PreparedSample]) -> f64 {
        let mut tape = Tape::new();
        let mut bound = Bound::new();
        let mut total: Option<Id> = None;
        for s in batch {
            let ps = tape.constant(s.src_heat.tensor().clone());
            let pt = tape.constant(s.tgt_heat.tensor().clone());
            let ss = tape.constant(s.src_onehot.tensor().clone());
            let st = tape.constant(s.tgt_onehot.tensor().clone());
            let logits = self.generator.forward(&mut tape, &mut bound, ps, pt, ss);
            let loss = parsing_loss(&mut tape, logits, st, self.lambda_l1);
            total = Some(match total {
                Some(acc) => tape.add(acc, loss),
                None => loss,
            });
        }
        let total = total.expect("non-empty batch");
        let mean = tape.mul_scalar(total, 1.0 / batch.len() as f64);
        let value = tape.value(mean).item();
        if !value.is_finite() {
            return value;
        }
        let mut grads = tape.backward(mean);
        let by_name = grads_by_name(&bound, &mut grads);
        self.adam.step(&mut self.generator, &by_name);
        value
    }
}

/// Stage-2 trainer: image generator, discriminator, and their optimizers.
pub struct ImageTrainer {
    pub generator: ImageGenerator,
    pub discriminator: Discriminator,
    pub adam_g: Adam,
    pub adam_d: Adam,
    pub weights: LossWeights,
}

impl ImageTrainer {
    pub fn new(cfg: &RunConfig, rng: &mut Rng) -> ImageTrainer {
        ImageTrainer {
            generator: ImageGenerator::new(&cfg.model.image, cfg.model.ablation, rng),
            discriminator: Discriminator::new(&cfg.model.disc_channels, rng),
            adam_g: Adam::from_optim(&cfg.optim, cfg.optim.lr_g),
            adam_d: Adam::from_optim(&cfg.optim, cfg.optim.lr_d),
            weights: cfg.loss.weights,
        }
    }

    fn forward_generator(
        &self,
        tape: &mut Tape,
        bound: &mut Bound,
        sample: &PreparedSample,
        condition: &ParsingOneHot,
    ) -> ImageForward {
        let img = tape.constant(sample.pair.source_image.tensor().clone());
        let sp = tape.constant(sample.src_onehot.tensor().clone());
        let gp = tape.constant(condition.tensor().clone());
        let pose = tape.constant(sample.tgt_heat.tensor().clone());
        self.generator.forward(
            tape,
            bound,
            img,
            sp,
            gp,
            pose,
            &sample.src_masks,
            &sample.src_tap_norm,
            TableSource::Pool,
        )
    }

    /// Generated image with frozen weights (for the discriminator step).
    pub fn generate_detached(&self, sample: &PreparedSample, condition: &ParsingOneHot) -> Tensor {
        let mut tape = Tape::new();
        let mut bound = Bound::frozen();
        let out = self.forward_generator(&mut tape, &mut bound, sample, condition);
        tape.value(out.image).clone()
    }

    /// Discriminator step on one sample; generator weights untouched.
    pub fn d_step(&mut self, sample: &PreparedSample, condition: &ParsingOneHot) -> f64 {
        let fake = self.generate_detached(sample, condition);
        let mut tape = Tape::new();
        let mut bound = Bound::new();
        let real_in = tape.constant(sample.pair.target_image.tensor().clone());
        let fake_in = tape.constant(fake);
        let real_logits = self.discriminator.forward(&mut tape, &mut bound, real_in);
        let fake_logits = self.discriminator.forward(&mut tape, &mut bound, fake_in);
        let loss = adversarial_d_loss(&mut tape, real_logits, fake_logits);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return value;
        }
        let mut grads = tape.backward(loss);
        let by_name = grads_by_name(&bound, &mut grads);
        self.adam_d.step(&mut self.discriminator, &by_name);
        value
    }

    /// Generator step on one sample; discriminator weights untouched.
    /// Returns every loss term by name.
    pub fn g_step(
        &mut self,
        fx: &FeatureExtractor,
        sample: &PreparedSample,
        condition: &ParsingOneHot,
    ) -> BTreeMap<String, f64> {
        let mut tape = Tape::new();
        let mut bound = Bound::new();
        let out = self.forward_generator(&mut tape, &mut bound, sample, condition);
        let target = tape.constant(sample.pair.target_image.tensor().clone());
        // discriminator participates with frozen weights
        let mut d_bound = Bound::frozen();
        let fake_logits = self.discriminator.forward(&mut tape, &mut d_bound, out.image);
        let mut all_taps: Vec<&str> = PERCEPTUAL_TAPS.to_vec();
        all_taps.extend(STYLE_TAPS);
        let gen_taps = fx
            .extract_on(&mut tape, out.image, &all_taps)
            .expect("extractor taps");
        let terms = ImageLossTerms {
            correspondence: correspondence_loss(&mut tape, out.styled_context, &sample.tgt_corr_tap),
            reconstruction: reconstruction_l1(&mut tape, out.image, target),
            perceptual: perceptual_loss(&mut tape, &gen_taps, &sample.tgt_taps),
            style: style_loss(&mut tape, &gen_taps, &sample.tgt_grams),
            adversarial: adversarial_g_loss(&mut tape, fake_logits),
        };
        let total = total_image_loss(&mut tape, &terms, &self.weights);
        let mut values = BTreeMap::new();
        values.insert("loss_corr".into(), tape.value(terms.correspondence).item());
        values.insert("loss_l1".into(), tape.value(terms.reconstruction).item());
        values.insert("loss_perc".into(), tape.value(terms.perceptual).item());
        values.insert("loss_style".into(), tape.value(terms.style).item());
        values.insert("loss_adv".into(), tape.value(terms.adversarial).item());
        values.insert("loss_total".into(), tape.value(total).item());
        if !tape.value(total).item().is_finite() {
            return values;
        }
        let mut grads = tape.backward(total);
        let by_name = grads_by_name(&bound, &mut grads);
        self.adam_g.step(&mut self.generator, &by_name);
        values
    }
}

/// Resolve the stage-2 parsing condition for each sample.
fn stage2_conditions(
    cfg: &RunConfig,
    workdir: &Path,
    data: &[PreparedSample],
) -> Result<Vec<ParsingOneHot>, TrainError> {
    match cfg.run.parsing_source {
        ParsingSource::GroundTruth => Ok(data.iter().map(|s| s.tgt_onehot.clone()).collect()),
        ParsingSource::FrozenStage1 => {
            let rel = cfg.run.parsing_ckpt.clone().ok_or_else(|| {
                TrainError::Checkpoint(CheckpointError::MissingTensor(
                    "run.parsing_ckpt is required for parsing_source = \"frozen_stage1\"".into(),
                ))
            })?;
            let path = if rel.is_absolute() { rel } else { workdir.join(rel) };
            let ckpt = Checkpoint::load(&path)?;
            let mut rng = Rng::from_seed(0);
            let mut gen = ParsingGenerator::new(&cfg.model.parsing, &mut rng);
            load_params(&mut gen, &ckpt, "")?;
            data.iter()
                .map(|s| {
                    let map = gen.generate_map(&s.src_heat, &s.tgt_heat, &s.src_onehot)?;
                    Ok(one_hot(&map))
                })
                .collect()
        }
    }
}

fn check_finite(
    value: f64,
    step: usize,
    dir: &Path,
    phase: &str,
    save: impl FnOnce(&mut Checkpoint),
) -> Result<(), TrainError> {
    if value.is_finite() {
        return Ok(());
    }
    let snapshot = dir.join(format!("ckpt_{phase}_abort"));
    let mut ckpt = Checkpoint::new();
    ckpt.meta.insert("phase".into(), phase.into());
    ckpt.meta.insert("step".into(), step.to_string());
    ckpt.meta.insert("abort".into(), "non-finite loss".into());
    save(&mut ckpt);
    let _ = ckpt.save(&snapshot);
    Err(TrainError::NonFinite { step, snapshot })
}

/// Train the parsing generator on its objective.
pub fn train_parsing(
    cfg: &RunConfig,
    workdir: &Path,
    data: &[PreparedSample],
) -> Result<TrainOutcome, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let out_dir = workdir.join(&cfg.run.out_dir);
    std::fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
    let mut init_rng = Rng::from_seed(cfg.run.seed);
    let mut rng = order_rng(cfg.run.seed);
    let mut trainer = ParsingTrainer::new(cfg, &mut init_rng);
    let mut start_step = 0usize;
    if let Some(resume) = &cfg.run.resume {
        let path = if resume.is_absolute() { resume.clone() } else { workdir.join(resume) };
        let ckpt = Checkpoint::load(&path)?;
        load_params(&mut trainer.generator, &ckpt, "")?;
        trainer.adam.load_from(&ckpt, "g");
        if let Some(r) = rng_state_from_meta(&ckpt) {
            rng = r;
        }
        start_step = ckpt.meta.get("step").and_then(|s| s.parse().ok()).unwrap_or(0);
    }
    let mut sink = LogSink::create(&out_dir, "parsing")?;
    let mut log = Vec::new();
    let mut final_loss = f64::NAN;
    let save = |trainer: &ParsingTrainer, rng: &Rng, step: usize, path: &Path| -> Result<(), TrainError> {
        let mut ckpt = Checkpoint::new();
        ckpt.meta.insert("phase".into(), "parsing".into());
        ckpt.meta.insert("step".into(), step.to_string());
        rng_state_to_meta(rng, &mut ckpt);
        save_params(&trainer.generator, &mut ckpt, "");
        trainer.adam.save_into(&mut ckpt, "g");
        ckpt.save(path)?;
        Ok(())
    };
    for step in start_step..cfg.run.steps {
        let t0 = std::time::Instant::now();
        let batch: Vec<&PreparedSample> =
            (0..cfg.run.batch).map(|_| &data[rng.below(data.len())]).collect();
        let loss = trainer.step(&batch);
        check_finite(loss, step, &out_dir, "parsing", |ckpt| {
            save_params(&trainer.generator, ckpt, "");
        })?;
        final_loss = loss;
        if step % cfg.run.log_every == 0 || step + 1 == cfg.run.steps {
            let mut terms = BTreeMap::new();
            terms.insert("loss_parsing".to_string(), loss);
            let rec = LogRecord {
                step,
                phase: "parsing".into(),
                terms,
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            };
            sink.write(&rec)?;
            log.push(rec);
        }
        if cfg.run.ckpt_every > 0 && (step + 1) % cfg.run.ckpt_every == 0 && step + 1 < cfg.run.steps {
            save(&trainer, &rng, step + 1, &ckpt_path(&out_dir, "parsing", step + 1))?;
        }
    }
    let final_path = ckpt_path(&out_dir, "parsing", cfg.run.steps);
    save(&trainer, &rng, cfg.run.steps, &final_path)?;
    Ok(TrainOutcome { final_loss, checkpoint: final_path, log })
}

/// Train the image generator and discriminator with alternating steps.
pub fn train_image(
    cfg: &RunConfig,
    workdir: &Path,
    fx: &FeatureExtractor,
    data: &[PreparedSample],
) -> Result<TrainOutcome, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let out_dir = workdir.join(&cfg.run.out_dir);
    std::fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
    let conditions = stage2_conditions(cfg, workdir, data)?;
    let mut init_rng = Rng::from_seed(cfg.run.seed);
    let mut rng = order_rng(cfg.run.seed);
    let mut trainer = ImageTrainer::new(cfg, &mut init_rng);
    let mut start_step = 0usize;
    if let Some(resume) = &cfg.run.resume {
        let path = if resume.is_absolute() { resume.clone() } else { workdir.join(resume) };
        let ckpt = Checkpoint::load(&path)?;
        load_params(&mut trainer.generator, &ckpt, "")?;
        load_params(&mut trainer.discriminator, &ckpt, "")?;
        trainer.adam_g.load_from(&ckpt, "g");
        trainer.adam_d.load_from(&ckpt, "d");
        if let Some(r) = rng_state_from_meta(&ckpt) {
            rng = r;
        }
        start_step = ckpt.meta.get("step").and_then(|s| s.parse().ok()).unwrap_or(0);
    }
    let mut sink = LogSink::create(&out_dir, "image")?;
    let mut log = Vec::new();
    let mut final_loss = f64::NAN;
    let save = |trainer: &ImageTrainer, rng: &Rng, step: usize, path: &Path| -> Result<(), TrainError> {
        let mut ckpt = Checkpoint::new();
        ckpt.meta.insert("phase".into(), "image".into());
        ckpt.meta.insert("step".into(), step.to_string());
        rng_state_to_meta(rng, &mut ckpt);
        save_params(&trainer.generator, &mut ckpt, "");
        save_params(&trainer.discriminator, &mut ckpt, "");
        trainer.adam_g.save_into(&mut ckpt, "g");
        trainer.adam_d.save_into(&mut ckpt, "d");
        ckpt.save(path)?;
        Ok(())
    };
    for step in start_step..cfg.run.steps {
        let t0 = std::time::Instant::now();
        let idx = rng.below(data.len());
        let sample = &data[idx];
        let condition = &conditions[idx];
        let d_loss = trainer.d_step(sample, condition);
        check_finite(d_loss, step, &out_dir, "image", |ckpt| {
            save_params(&trainer.generator, ckpt, "");
            save_params(&trainer.discriminator, ckpt, "");
        })?;
        let mut terms = trainer.g_step(fx, sample, condition);
        let total = terms["loss_total"];
        check_finite(total, step, &out_dir, "image", |ckpt| {
            save_params(&trainer.generator, ckpt, "");
            save_params(&trainer.discriminator, ckpt, "");
        })?;
        final_loss = terms["loss_l1"];
        terms.insert("loss_d".into(), d_loss);
        if step % cfg.run.log_every == 0 || step + 1 == cfg.run.steps {
            let rec = LogRecord {
                step,
                phase: "image".into(),
                terms,
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            };
            sink.write(&rec)?;
            log.push(rec);
        }
        if cfg.run.ckpt_every > 0 && (step + 1) % cfg.run.ckpt_every == 0 && step + 1 < cfg.run.steps {
            save(&trainer, &rng, step + 1, &ckpt_path(&out_dir, "image", step + 1))?;
        }
    }
    let final_path = ckpt_path(&out_dir, "image", cfg.run.steps);
    save(&trainer, &rng, cfg.run.steps, &final_path)?;
    Ok(TrainOutcome { final_loss, checkpoint: final_path, log })
}

/// End-to-end phase: stage-1 gradients flow through the soft parsing into
/// stage 2; the stage-1 objective stays on when configured.
pub fn train_joint(
    cfg: &RunConfig,
    workdir: &Path,
    fx: &FeatureExtractor,
    data: &[PreparedSample],
) -> Result<TrainOutcome, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let out_dir = workdir.join(&cfg.run.out_dir);
    std::fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
    let mut init_rng = Rng::from_seed(cfg.run.seed);
    let mut rng = order_rng(cfg.run.seed);
    let mut parsing = ParsingTrainer::new(cfg, &mut init_rng);
    let mut image = ImageTrainer::new(cfg, &mut init_rng);
    // both phase checkpoints load before joint training starts
    for (slot, model) in [
        (&cfg.run.parsing_ckpt, &mut parsing.generator as &mut dyn ParamSet),
        (&cfg.run.image_ckpt, &mut image.generator as &mut dyn ParamSet),
    ] {
        if let Some(rel) = slot {
            let path = if rel.is_absolute() { rel.clone() } else { workdir.join(rel) };
            let ckpt = Checkpoint::load(&path)?;
            load_params(model, &ckpt, "")?;
        }
    }
    if let Some(rel) = &cfg.run.image_ckpt {
        let path = if rel.is_absolute() { rel.clone() } else { workdir.join(rel) };
        let ckpt = Checkpoint::load(&path)?;
        // discriminator rides along in image checkpoints
        if load_params(&mut image.discriminator, &ckpt, "").is_err() {
            // absent in inference-only checkpoints; keep the fresh one
        }
    }
    let mut start_step = 0usize;
    if let Some(resume) = &cfg.run.resume {
        let path = if resume.is_absolute() { resume.clone() } else { workdir.join(resume) };
        let ckpt = Checkpoint::load(&path)?;
        load_params(&mut parsing.generator, &ckpt, "")?;
        load_params(&mut image.generator, &ckpt, "")?;
        load_params(&mut image.discriminator, &ckpt, "")?;
        parsing.adam.load_from(&ckpt, "p");
        image.adam_g.load_from(&ckpt, "g");
        image.adam_d.load_from(&ckpt, "d");
        if let Some(r) = rng_state_from_meta(&ckpt) {
            rng = r;
        }
        start_step = ckpt.meta.get("step").and_then(|s| s.parse().ok()).unwrap_or(0);
    }
    let mut sink = LogSink::create(&out_dir, "joint")?;
    let mut log = Vec::new();
    let mut final_loss = f64::NAN;
    let save = |parsing: &ParsingTrainer,
                image: &ImageTrainer,
                rng: &Rng,
                step: usize,
                path: &Path|
     -> Result<(), TrainError> {
        let mut ckpt = Checkpoint::new();
        ckpt.meta.insert("phase".into(), "joint".into());
        ckpt.meta.insert("step".into(), step.to_string());
        rng_state_to_meta(rng, &mut ckpt);
        save_params(&parsing.generator, &mut ckpt, "");
        save_params(&image.generator, &mut ckpt, "");
        save_params(&image.discriminator, &mut ckpt, "");
        parsing.adam.save_into(&mut ckpt, "p");
        image.adam_g.save_into(&mut ckpt, "g");
        image.adam_d.save_into(&mut ckpt, "d");
        ckpt.save(path)?;
        Ok(())
    };
    for step in start_step..cfg.run.steps {
        let t0 = std::time::Instant::now();
        let idx = rng.below(data.len());
        let sample = &data[idx];

        // discriminator step against the current joint pipeline
        let soft_cond = {
            let logits = parsing
                .generator
                .generate(&sample.src_heat, &sample.tgt_heat, &sample.src_onehot)?;
            let mut tape = Tape::new();
            let l = tape.constant(logits);
            let soft = tape.softmax_chans(l);
            ParsingOneHot::from_soft(tape.value(soft).clone())
        };
        let d_loss = image.d_step(sample, &soft_cond);
        check_finite(d_loss, step, &out_dir, "joint", |ckpt| {
            save_params(&parsing.generator, ckpt, "");
            save_params(&image.generator, ckpt, "");
        })?;

        // joint generator step: one tape through both stages
        let mut tape = Tape::new();
        let mut bound = Bound::new();
        let ps = tape.constant(sample.src_heat.tensor().clone());
        let pt = tape.constant(sample.tgt_heat.tensor().clone());
        let ss = tape.constant(sample.src_onehot.tensor().clone());
        let st = tape.constant(sample.tgt_onehot.tensor().clone());
        let logits = parsing.generator.forward(&mut tape, &mut bound, ps, pt, ss);
        let soft = tape.softmax_chans(logits);
        let img = tape.constant(sample.pair.source_image.tensor().clone());
        let out = image.generator.forward(
            &mut tape,
            &mut bound,
            img,
            ss,
            soft,
            pt,
            &sample.src_masks,
            &sample.src_tap_norm,
            TableSource::Pool,
        );
        let target = tape.constant(sample.pair.target_image.tensor().clone());
        let mut d_bound = Bound::frozen();
        let fake_logits = image.discriminator.forward(&mut tape, &mut d_bound, out.image);
        let mut all_taps: Vec<&str> = PERCEPTUAL_TAPS.to_vec();
        all_taps.extend(STYLE_TAPS);
        let gen_taps = fx.extract_on(&mut tape, out.image, &all_taps).expect("taps");
        let terms = ImageLossTerms {
            correspondence: correspondence_loss(&mut tape, out.styled_context, &sample.tgt_corr_tap),
            reconstruction: reconstruction_l1(&mut tape, out.image, target),
            perceptual: perceptual_loss(&mut tape, &gen_taps, &sample.tgt_taps),
            style: style_loss(&mut tape, &gen_taps, &sample.tgt_grams),
            adversarial: adversarial_g_loss(&mut tape, fake_logits),
        };
        let image_total = total_image_loss(&mut tape, &terms, &image.weights);
        let total = if cfg.loss.parsing_loss_in_joint {
            let pl = parsing_loss(&mut tape, logits, st, parsing.lambda_l1);
            tape.add(image_total, pl)
        } else {
            image_total
        };
        let total_v = tape.value(total).item();
        check_finite(total_v, step, &out_dir, "joint", |ckpt| {
            save_params(&parsing.generator, ckpt, "");
            save_params(&image.generator, ckpt, "");
        })?;
        let mut grads = tape.backward(total);
        let by_name = grads_by_name(&bound, &mut grads);
        parsing.adam.step(&mut parsing.generator, &by_name);
        image.adam_g.step(&mut image.generator, &by_name);
        final_loss = total_v;

        let mut terms_map = BTreeMap::new();
        terms_map.insert("loss_total".into(), total_v);
        terms_map.insert("loss_l1".into(), tape.value(terms.reconstruction).item());
        terms_map.insert("loss_d".into(), d_loss);
        if cfg.loss.parsing_loss_in_joint {
            let pl_only = {
                let mut t2 = Tape::new();
                let l = t2.constant(tape.value(logits).clone());
                let tt = t2.constant(sample.tgt_onehot.tensor().clone());
                let pl = parsing_loss(&mut t2, l, tt, parsing.lambda_l1);
                t2.value(pl).item()
            };
            terms_map.insert("loss_parsing".into(), pl_only);
        }
        if step % cfg.run.log_every == 0 || step + 1 == cfg.run.steps {
            let rec = LogRecord {
                step,
                phase: "joint".into(),
                terms: terms_map,
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            };
            sink.write(&rec)?;
            log.push(rec);
        }
        if cfg.run.ckpt_every > 0 && (step + 1) % cfg.run.ckpt_every == 0 && step + 1 < cfg.run.steps {
            save(&parsing, &image, &rng, step + 1, &ckpt_path(&out_dir, "joint", step + 1))?;
        }
    }
    let final_path = ckpt_path(&out_dir, "joint", cfg.run.steps);
    save(&parsing, &image, &rng, cfg.run.steps, &final_path)?;
    Ok(TrainOutcome { final_loss, checkpoint: final_path, log })
}
