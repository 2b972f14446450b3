//! Train the parsing generator alone: overfit one synthetic pair until the
//! stage-1 loss (cross-entropy + weighted l1) collapses, then compare the
//! predicted parsing map against the target.
//!
//! ```bash
//! cargo run --release -p repose --example train_stage1
//! ```

#[path = "util/mod.rs"]
mod util;

use repose::data::argmax_parsing;
use repose::rng::Rng;
use repose::train::{prepare_samples, ParsingTrainer};

fn main() {
    let cfg = util::tiny_config(1);
    let fx = cfg.extractor.build(std::path::Path::new(".")).unwrap();
    let data = prepare_samples(util::sample_pairs(1, 7), &fx, cfg.model.sigma(), false);
    let mut rng = Rng::from_seed(cfg.run.seed);
    let mut trainer = ParsingTrainer::new(&cfg, &mut rng);
    trainer.adam.lr = 2e-3;

    let mut loss = f64::NAN;
    for step in 0..300 {
        loss = trainer.step(&[&data[0]]);
        if step % 25 == 0 {
            println!("step {step:3}: loss {loss:.4}");
        }
        if loss < 0.05 {
            println!("step {step:3}: loss {loss:.4}: stopping early");
            break;
        }
    }

    let logits = trainer
        .generator
        .generate(&data[0].src_heat, &data[0].tgt_heat, &data[0].src_onehot)
        .unwrap();
    let predicted = argmax_parsing(&logits);
    let target = &data[0].pair.target_parsing;
    let correct = predicted
        .labels()
        .iter()
        .zip(target.labels())
        .filter(|(a, b)| a == b)
        .count();
    println!(
        "final loss {loss:.4}; pixel accuracy vs target parsing: {:.1}%",
        100.0 * correct as f64 / target.labels().len() as f64
    );
}
