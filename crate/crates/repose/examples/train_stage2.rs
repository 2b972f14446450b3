//! Train the image generator teacher-forced (ground-truth parsing as the
//! stage-2 condition) with alternating discriminator/generator steps, then
//! write the reconstruction next to the target.
//!
//! ```bash
//! cargo run --release -p repose --example train_stage2
//! ```

#[path = "util/mod.rs"]
mod util;

use repose::data::io::save_image_png;
use repose::rng::Rng;
use repose::train::{prepare_samples, ImageTrainer};

fn main() {
    let dir = util::out_dir("train_stage2");
    let cfg = util::tiny_config(2);
    let fx = cfg.extractor.build(std::path::Path::new(".")).unwrap();
    let data = prepare_samples(util::sample_pairs(1, 11), &fx, cfg.model.sigma(), true);
    let mut rng = Rng::from_seed(cfg.run.seed);
    let mut trainer = ImageTrainer::new(&cfg, &mut rng);
    trainer.adam_g.lr = 1e-3;

    let condition = data[0].tgt_onehot.clone();
    for step in 0..200 {
        let d_loss = trainer.d_step(&data[0], &condition);
        let terms = trainer.g_step(&fx, &data[0], &condition);
        if step % 20 == 0 {
            println!(
                "step {step:3}: l1 {:.4}  perc {:.4}  style {:.5}  adv {:.3}  d {:.3}",
                terms["loss_l1"], terms["loss_perc"], terms["loss_style"], terms["loss_adv"], d_loss
            );
        }
        if terms["loss_l1"] < 0.05 {
            println!("step {step:3}: l1 {:.4}: stopping early", terms["loss_l1"]);
            break;
        }
    }

    let generated = trainer.generate_detached(&data[0], &condition);
    let img = repose::data::ImageTensor::new(generated).unwrap();
    save_image_png(&dir.join("reconstruction.png"), &img).unwrap();
    save_image_png(&dir.join("target.png"), &data[0].pair.target_image).unwrap();
    println!("wrote reconstruction.png and target.png to {}", dir.display());
}
