//! Region editing: rewrite the parsing map the image stage consumes. Here
//! the pants region is repainted into a dress silhouette before rendering,
//! turning trousers into a skirt while the person and pose stay fixed.
//!
//! ```bash
//! cargo run --release -p repose --example region_editing
//! ```

#[path = "util/mod.rs"]
mod util;

use repose::data::io::{save_image_png, save_parsing_png};
use repose::data::one_hot;
use repose::imagegen::TableSource;

fn main() {
    let dir = util::out_dir("region_editing");
    println!("training tiny two-stage model (one pair)...");
    let models = util::quick_train(8, 250, 150);
    let sample = &models.data[0];

    // same-pose editing: condition on the source parsing, then repaint it
    let base_map = sample.pair.source_parsing.clone();
    let mut edited_map = base_map.clone();
    for y in 0..edited_map.height() {
        for x in 0..edited_map.width() {
            // pants (4) and leg (7) pixels become dress (3)
            if matches!(edited_map.get(x, y), 4 | 7) {
                edited_map.set(x, y, 3);
            }
        }
    }
    save_parsing_png(&dir.join("parsing_before.png"), &base_map).unwrap();
    save_parsing_png(&dir.join("parsing_after.png"), &edited_map).unwrap();

    for (name, map) in [("before.png", &base_map), ("after.png", &edited_map)] {
        let (img, _) = models
            .image
            .generator
            .generate(
                &models.fx,
                &sample.pair.source_image,
                &sample.src_onehot,
                &one_hot(map),
                &sample.src_heat,
                TableSource::Pool,
            )
            .unwrap();
        save_image_png(&dir.join(name), &img).unwrap();
    }
    println!("wrote before.png / after.png (and both parsing maps) to {}", dir.display());
}
