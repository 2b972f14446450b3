//! End-to-end training: the stage-2 losses backpropagate through the soft
//! stage-1 output into the parsing generator while the stage-1 objective
//! stays active. This example runs the full phase driver (with logging and
//! checkpoints) on a 4-pair dataset.
//!
//! ```bash
//! cargo run --release -p repose --example train_joint
//! ```

#[path = "util/mod.rs"]
mod util;

use repose::data::io::save_pair;
use repose::train::{prepare_samples, train_joint};

fn main() {
    let dir = util::out_dir("train_joint");
    // fixtures on disk, as the CLI would consume them
    let fixture_dir = dir.join("fixtures");
    std::fs::create_dir_all(&fixture_dir).unwrap();
    let pairs = util::sample_pairs(4, 31);
    for (i, pair) in pairs.iter().enumerate() {
        save_pair(&fixture_dir, &format!("s{i:03}"), pair).unwrap();
    }

    let mut cfg = util::tiny_config(3);
    cfg.run.steps = 30;
    cfg.run.out_dir = "run".into();
    let fx = cfg.extractor.build(&dir).unwrap();
    let data = prepare_samples(pairs, &fx, cfg.model.sigma(), true);
    let outcome = train_joint(&cfg, &dir, &fx, &data).expect("joint training");
    println!(
        "joint phase done: final total loss {:.4}, checkpoint {}",
        outcome.final_loss,
        outcome.checkpoint.display()
    );
    for rec in outcome.log.iter().step_by(10) {
        println!(
            "  step {:2}: total {:.4}  parsing {:.4}",
            rec.step, rec.terms["loss_total"], rec.terms["loss_parsing"]
        );
    }
    println!("log: {}", dir.join("run/log_joint.jsonl").display());
}
