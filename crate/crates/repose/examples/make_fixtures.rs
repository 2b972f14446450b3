//! Generate a deterministic synthetic paired dataset and show what ends up
//! on disk: RGB PNGs, label-indexed parsing PNGs, keypoint JSON files, and
//! the tab-separated pair list.
//!
//! ```bash
//! cargo run --release -p repose --example make_fixtures
//! ```

#[path = "util/mod.rs"]
mod util;

use repose::data::io::save_pair;
use repose::data::make_synthetic_pair;

fn main() {
    let dir = util::out_dir("make_fixtures");
    let n = 4;
    let mut pair_lines = String::new();
    for i in 0..n {
        let pair = make_synthetic_pair(42 + i, 64, 64);
        let (a, b) = save_pair(&dir, &format!("s{i:03}"), &pair).expect("write pair");
        let hist = pair.source_parsing.histogram();
        println!(
            "pair {i}: stems {a}/{b}, source regions present: {:?}",
            (0..8).filter(|&j| hist[j] > 0).collect::<Vec<_>>()
        );
        pair_lines.push_str(&format!("{a}\t{b}\n"));
    }
    std::fs::write(dir.join("pairs.txt"), pair_lines).expect("write pair list");
    println!("dataset written to {}", dir.display());
}
