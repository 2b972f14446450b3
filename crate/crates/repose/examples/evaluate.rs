//! Evaluation: per-pair PSNR and corpus FID between a generated set and its
//! ground truth, using the stub extractor's pooled feature as the embedder.
//! Absolute FID values depend on the embedder; comparisons are meaningful
//! only under the same one.
//!
//! ```bash
//! cargo run --release -p repose --example evaluate
//! ```

#[path = "util/mod.rs"]
mod util;

use repose::data::make_synthetic_pair;
use repose::extractor::FeatureExtractor;
use repose::metrics::{fid, psnr, EmbeddingSet};

fn main() {
    let fx = FeatureExtractor::stub(7);
    let truth: Vec<_> = (0..12).map(|i| make_synthetic_pair(i, 64, 64)).collect();

    // "generated" set A: the truth itself; set B: a different person per slot
    let identical: Vec<_> = truth.iter().map(|p| p.target_image.clone()).collect();
    let shuffled: Vec<_> = (0..12).map(|i| make_synthetic_pair(100 + i, 64, 64).target_image).collect();

    for (name, generated) in [("identical", &identical), ("mismatched", &shuffled)] {
        let mut psnr_sum = 0.0;
        for (gen, pair) in generated.iter().zip(&truth) {
            psnr_sum += psnr(gen, &pair.target_image).unwrap();
        }
        let truth_emb =
            EmbeddingSet::new(truth.iter().map(|p| fx.embed(p.target_image.tensor())).collect()).unwrap();
        let gen_emb = EmbeddingSet::new(generated.iter().map(|g| fx.embed(g.tensor())).collect()).unwrap();
        let fid_value = fid(&truth_emb, &gen_emb).unwrap();
        println!(
            "{name:10}: psnr_mean {:6.2} dB   fid {:10.4}   (embedder {})",
            psnr_sum / truth.len() as f64,
            fid_value,
            fx.id()
        );
    }
}
