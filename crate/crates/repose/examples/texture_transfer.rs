//! Texture transfer: restyle one region of the generated image by replacing
//! that region's row in the style code table with a reference image's row.
//! The parsing map (shape) is untouched; only the style input changes.
//!
//! ```bash
//! cargo run --release -p repose --example texture_transfer
//! ```

#[path = "util/mod.rs"]
mod util;

use std::collections::BTreeSet;

use repose::data::io::save_image_png;
use repose::data::{make_synthetic_pair, one_hot, region_index};
use repose::edit::transfer_texture;
use repose::imagegen::TableSource;

fn main() {
    let dir = util::out_dir("texture_transfer");
    println!("training tiny two-stage model (one pair)...");
    let models = util::quick_train(5, 250, 150);
    let sample = &models.data[0];
    let gen_onehot = sample.tgt_onehot.clone();

    let base_table = models
        .image
        .generator
        .encode_style_table(&sample.pair.source_image, &sample.src_onehot);

    // a different synthetic person provides the reference wardrobe
    let reference = make_synthetic_pair(777, util::RES, util::RES);
    let ref_table = models
        .image
        .generator
        .encode_style_table(&reference.source_image, &one_hot(&reference.source_parsing));
    save_image_png(&dir.join("reference.png"), &reference.source_image).unwrap();
    std::fs::write(dir.join("reference_styles.json"), ref_table.to_json()).unwrap();

    let region = region_index("upper_clothes").unwrap() as usize;
    let edited = transfer_texture(&base_table, &ref_table, &BTreeSet::from([region])).unwrap();

    for (name, table) in [("plain.png", &base_table), ("restyled.png", &edited)] {
        let (img, _) = models
            .image
            .generator
            .generate(
                &models.fx,
                &sample.pair.source_image,
                &sample.src_onehot,
                &gen_onehot,
                &sample.tgt_heat,
                TableSource::Override(table),
            )
            .unwrap();
        save_image_png(&dir.join(name), &img).unwrap();
    }
    println!("wrote plain.png / restyled.png / reference.png to {}", dir.display());
    println!("(the style table also round-trips through reference_styles.json)");
}
