//! Shared plumbing for the runnable examples: a tiny model configuration
//! that trains in seconds on one CPU core, plus a helper that overfits both
//! stages on a single synthetic pair so inference examples have weights to
//! work with.

// each example uses its own subset of these helpers
#![allow(dead_code)]

use std::path::PathBuf;

use repose::config::RunConfig;
use repose::data::{make_synthetic_pair, PairedSample};
use repose::extractor::FeatureExtractor;
use repose::rng::Rng;
use repose::train::{prepare_samples, ImageTrainer, ParsingTrainer, PreparedSample};

pub const RES: usize = 32;

/// Output directory for an example, under target/.
pub fn out_dir(name: &str) -> PathBuf {
    let dir = PathBuf::from(format!("target/example-out/{name}"));
    std::fs::create_dir_all(&dir).expect("create example output dir");
    dir
}

/// Small widths so every example runs in seconds.
pub fn tiny_config(seed: u64) -> RunConfig {
    RunConfig::load(
        None,
        &[
            format!("run.seed={seed}"),
            format!("model.resolution={RES}"),
            "optim.lr_g=1e-3".into(),
            "model.parsing.encoder_channels=[16, 16, 16, 16]".into(),
            "model.parsing.decoder_channels=[16, 16, 16, 16]".into(),
            "model.parsing.gated_blocks=2".into(),
            "model.image.source_down_channels=[8, 12, 16, 16]".into(),
            "model.image.source_up_channels=[16, 256]".into(),
            "model.image.context_channels=[16, 256]".into(),
            "model.image.decoder_reduce=16".into(),
            "model.image.decoder_up_channels=[16, 8]".into(),
            "model.disc_channels=[8, 8, 8, 8]".into(),
        ],
    )
    .expect("tiny config is valid")
}

pub fn sample_pairs(n: usize, seed: u64) -> Vec<PairedSample> {
    (0..n).map(|i| make_synthetic_pair(seed + i as u64, RES, RES)).collect()
}

pub struct TrainedModels {
    pub cfg: RunConfig,
    pub fx: FeatureExtractor,
    pub parsing: ParsingTrainer,
    pub image: ImageTrainer,
    pub data: Vec<PreparedSample>,
}

/// Overfit both stages on one pair; enough for the editing examples to show
/// visible, deterministic effects.
pub fn quick_train(seed: u64, stage1_steps: usize, stage2_steps: usize) -> TrainedModels {
    let cfg = tiny_config(seed);
    let fx = cfg.extractor.build(std::path::Path::new(".")).expect("stub extractor");
    let data = prepare_samples(sample_pairs(1, 900 + seed), &fx, cfg.model.sigma(), true);
    let mut init_rng = Rng::from_seed(cfg.run.seed);
    let mut parsing = ParsingTrainer::new(&cfg, &mut init_rng);
    let mut image = ImageTrainer::new(&cfg, &mut init_rng);
    parsing.adam.lr = 2e-3;
    image.adam_g.lr = 1e-3;
    for step in 0..stage1_steps {
        let loss = parsing.step(&[&data[0]]);
        if step % 50 == 0 {
            println!("  stage-1 step {step}: loss {loss:.4}");
        }
    }
    let cond = data[0].tgt_onehot.clone();
    for step in 0..stage2_steps {
        image.d_step(&data[0], &cond);
        let terms = image.g_step(&fx, &data[0], &cond);
        if step % 50 == 0 {
            println!("  stage-2 step {step}: l1 {:.4}", terms["loss_l1"]);
        }
    }
    TrainedModels { cfg, fx, parsing, image, data }
}
