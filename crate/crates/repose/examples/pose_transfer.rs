//! The core application: synthesize the same person in a new pose. Overfits
//! both stages on one pair, then drives stage 1 -> stage 2 at a pose the
//! model was trained toward, writing source, generated, and target images.
//!
//! ```bash
//! cargo run --release -p repose --example pose_transfer
//! ```

#[path = "util/mod.rs"]
mod util;

use repose::data::io::{save_image_png, save_parsing_png};
use repose::data::one_hot;
use repose::imagegen::TableSource;
use repose::metrics::psnr;

fn main() {
    let dir = util::out_dir("pose_transfer");
    println!("training tiny two-stage model (one pair)...");
    let models = util::quick_train(4, 250, 150);
    let sample = &models.data[0];

    // stage 1: parsing map aligned with the target pose
    let gen_map = models
        .parsing
        .generator
        .generate_map(&sample.src_heat, &sample.tgt_heat, &sample.src_onehot)
        .unwrap();
    save_parsing_png(&dir.join("generated_parsing.png"), &gen_map).unwrap();

    // stage 2: image conditioned on the generated parsing
    let (generated, _) = models
        .image
        .generator
        .generate(
            &models.fx,
            &sample.pair.source_image,
            &sample.src_onehot,
            &one_hot(&gen_map),
            &sample.tgt_heat,
            TableSource::Pool,
        )
        .unwrap();

    save_image_png(&dir.join("source.png"), &sample.pair.source_image).unwrap();
    save_image_png(&dir.join("generated.png"), &generated).unwrap();
    save_image_png(&dir.join("target.png"), &sample.pair.target_image).unwrap();
    let db = psnr(&generated, &sample.pair.target_image).unwrap();
    println!("pose transfer PSNR vs target: {db:.2} dB");
    println!("outputs in {}", dir.display());
}
