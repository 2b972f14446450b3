//! Per-region style extraction from the source image.
//!
//! A bottleneck encoder (4 stride-2 convs, 2 transposed convs) produces a
//! 256-channel feature at quarter resolution; masked average pooling under
//! the source parsing map turns it into one 256-vector per region. Regions
//! absent from the source fall back to the global average, so every region
//! of the generated parsing map can be styled.

use serde::{Deserialize, Serialize};

use crate::data::{ParsingMap, ParsingOneHot, NUM_REGIONS};
use crate::nn::{Bound, DownBlock, ParamSet, UpBlock, UpMode};
use crate::rng::Rng;
use crate::tensor::{region_pool_fwd, Id, RegionPoolMode, Tape, Tensor};

/// Channel width of the style feature and of every style code.
pub const STYLE_CHANNELS: usize = 256;

/// Spatial reduction factor of both stage-2 encoders.
pub const FEATURE_STRIDE: usize = 4;

/// Table-building behavior, mirroring the ablation presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleMode {
    /// Masked means with a global-mean fallback for absent regions.
    JointGlobalLocal,
    /// Every region receives the global mean.
    GlobalOnly,
    /// Absent regions are zeroed instead of falling back.
    LocalZero,
}

impl From<StyleMode> for RegionPoolMode {
    fn from(m: StyleMode) -> RegionPoolMode {
        match m {
            StyleMode::JointGlobalLocal => RegionPoolMode::JointGlobalLocal,
            StyleMode::GlobalOnly => RegionPoolMode::GlobalOnly,
            StyleMode::LocalZero => RegionPoolMode::LocalZero,
        }
    }
}

/// N x 256 table of per-region style vectors plus presence flags.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleCodeTable {
    pub codes: Tensor, // [NUM_REGIONS, STYLE_CHANNELS]
    pub present: [bool; NUM_REGIONS],
}

#[derive(Serialize, Deserialize)]
struct StyleCodeTableFile {
    codes: Vec<Vec<f64>>,
    present: Vec<bool>,
}

impl StyleCodeTable {
    pub fn to_json(&self) -> String {
        let codes = (0..NUM_REGIONS)
            .map(|j| self.codes.data()[j * STYLE_CHANNELS..(j + 1) * STYLE_CHANNELS].to_vec())
            .collect();
        serde_json::to_string(&StyleCodeTableFile { codes, present: self.present.to_vec() })
            .expect("style table serializes")
    }

    pub fn from_json(text: &str) -> Result<StyleCodeTable, String> {
        let file: StyleCodeTableFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if file.codes.len() != NUM_REGIONS || file.present.len() != NUM_REGIONS {
            return Err(format!(
                "style table must have {NUM_REGIONS} rows, got {} codes / {} flags",
                file.codes.len(),
                file.present.len()
            ));
        }
        let mut flat = Vec::with_capacity(NUM_REGIONS * STYLE_CHANNELS);
        for (j, row) in file.codes.iter().enumerate() {
            if row.len() != STYLE_CHANNELS {
                return Err(format!("style row {j} has {} entries, expected {STYLE_CHANNELS}", row.len()));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(format!("style row {j} has non-finite entries"));
            }
            flat.extend_from_slice(row);
        }
        let mut present = [false; NUM_REGIONS];
        present.copy_from_slice(&file.present);
        Ok(StyleCodeTable { codes: Tensor::from_vec(&[NUM_REGIONS, STYLE_CHANNELS], flat), present })
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.codes.data()[j * STYLE_CHANNELS..(j + 1) * STYLE_CHANNELS]
    }
}

/// Bottleneck source-image encoder: 4 down blocks then 2 up blocks, so the
/// output sits at 1/4 resolution with [`STYLE_CHANNELS`] channels. The final
/// block keeps raw activations (no instance norm) so pooled style statistics
/// survive.
pub struct SourceEncoder {
    downs: Vec<DownBlock>,
    ups: Vec<UpBlock>,
}

impl SourceEncoder {
    pub fn new(name: &str, down_channels: &[usize], up_channels: &[usize], up_mode: UpMode, rng: &mut Rng) -> SourceEncoder {
        assert_eq!(down_channels.len(), 4, "source encoder uses 4 down blocks");
        assert_eq!(up_channels.len(), 2, "source encoder uses 2 up blocks");
        assert_eq!(*up_channels.last().unwrap(), STYLE_CHANNELS, "style feature must have {STYLE_CHANNELS} channels");
        let mut downs = Vec::new();
        let mut cin = 3;
        for (i, &c) in down_channels.iter().enumerate() {
            downs.push(DownBlock::new(&format!("{name}.down{i}"), cin, c, rng));
            cin = c;
        }
        let mut ups = Vec::new();
        for (i, &c) in up_channels.iter().enumerate() {
            let mut block = UpBlock::new(&format!("{name}.up{i}"), cin, c, up_mode, rng);
            if i + 1 == up_channels.len() {
                block = block.without_norm();
            }
            ups.push(block);
            cin = c;
        }
        SourceEncoder { downs, ups }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &mut Bound, img: Id) -> Id {
        let s = tape.value(img).shape();
        assert!(s[1] >= 16 && s[2] >= 16, "source image smaller than 16x16");
        let mut x = img;
        for d in &self.downs {
            x = d.forward(tape, bound, x);
        }
        for u in &self.ups {
            x = u.forward(tape, bound, x);
        }
        x
    }
}

impl ParamSet for SourceEncoder {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for d in &self.downs {
            d.visit(f);
        }
        for u in &self.ups {
            u.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for d in &mut self.downs {
            d.visit_mut(f);
        }
        for u in &mut self.ups {
            u.visit_mut(f);
        }
    }
}

/// Nearest-label downsampling of a parsing map to feature resolution,
/// returned as one-hot region masks [N, h, w].
pub fn region_masks_at_feature_res(parsing: &ParsingMap, factor: usize) -> Tensor {
    let (w, h) = (parsing.width(), parsing.height());
    assert!(w % factor == 0 && h % factor == 0, "resolution {w}x{h} not divisible by {factor}");
    let (wo, ho) = (w / factor, h / factor);
    let off = factor / 2;
    let mut masks = Tensor::zeros(&[NUM_REGIONS, ho, wo]);
    {
        let d = masks.data_mut();
        for y in 0..ho {
            for x in 0..wo {
                let label = parsing.get(x * factor + off, y * factor + off) as usize;
                d[(label * ho + y) * wo + x] = 1.0;
            }
        }
    }
    masks
}

/// Presence flags: a region counts as present when its downsampled mask has
/// at least one pixel.
pub fn presence_flags(masks: &Tensor) -> [bool; NUM_REGIONS] {
    let hw = masks.shape()[1] * masks.shape()[2];
    let mut present = [false; NUM_REGIONS];
    for (j, p) in present.iter_mut().enumerate() {
        *p = masks.data()[j * hw..(j + 1) * hw].iter().sum::<f64>() >= 1.0;
    }
    present
}

/// Plain (no-tape) joint global/local pooling. Works on any channel count,
/// so tests can drive it with toy features; the model path uses
/// [`STYLE_CHANNELS`].
pub fn pool_region_codes(feat: &Tensor, masks: &Tensor, mode: StyleMode) -> Tensor {
    region_pool_fwd(feat, masks, mode.into())
}

/// Full operation: downsample the source parsing, pool the style feature,
/// and assemble the table.
pub fn per_region_pool(feat: &Tensor, source_parsing: &ParsingMap, mode: StyleMode) -> StyleCodeTable {
    assert_eq!(feat.shape()[0], STYLE_CHANNELS);
    let factor = source_parsing.height() / feat.shape()[1];
    assert!(factor >= 1 && source_parsing.height() % feat.shape()[1] == 0);
    let masks = region_masks_at_feature_res(source_parsing, factor);
    let present = presence_flags(&masks);
    let codes = pool_region_codes(feat, &masks, mode);
    StyleCodeTable { codes, present }
}

/// Tape-side pooling for training (gradients flow into the feature).
pub fn pool_region_codes_on(tape: &mut Tape, feat: Id, masks: Tensor, mode: StyleMode) -> Id {
    tape.region_pool(feat, masks, mode.into())
}

/// One-hot masks from an already one-hot (possibly soft) parsing tensor,
/// downsampled on the tape so gradients pass through.
pub fn soft_masks_on(tape: &mut Tape, parsing_onehot: Id, factor: usize) -> Id {
    tape.downsample_nearest(parsing_onehot, factor)
}

/// Convenience for the common constant case.
pub fn onehot_masks(parsing: &ParsingOneHot, factor: usize) -> Tensor {
    let t = parsing.tensor();
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let (ho, wo) = (h / factor, w / factor);
    let off = factor / 2;
    let mut out = Tensor::zeros(&[c, ho, wo]);
    {
        let d = out.data_mut();
        for ci in 0..c {
            for y in 0..ho {
                for x in 0..wo {
                    d[(ci * ho + y) * wo + x] = t.at3(ci, y * factor + off, x * factor + off);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic_pair, one_hot};
    use crate::rng::Rng;

    fn toy_masks(labels: &[u8], w: usize, h: usize) -> Tensor {
        let p = ParsingMap::new(labels.to_vec(), w, h).unwrap();
        region_masks_at_feature_res(&p, 1)
    }

    /// Brute-force oracle: per-pixel masked mean, global fallback.
    fn pool_oracle(feat: &Tensor, masks: &Tensor, mode: StyleMode) -> Tensor {
        let (c, h, w) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);
        let n = masks.shape()[0];
        let hw = h * w;
        let mut global = vec![0.0; c];
        for ci in 0..c {
            let mut acc = 0.0;
            for p in 0..hw {
                acc += feat.data()[ci * hw + p];
            }
            global[ci] = acc / hw as f64;
        }
        let mut out = Tensor::zeros(&[n, c]);
        for j in 0..n {
            let count: f64 = (0..hw).map(|p| masks.data()[j * hw + p]).sum();
            for ci in 0..c {
                let v = if count >= 1.0 && mode != StyleMode::GlobalOnly {
                    let mut acc = 0.0;
                    for p in 0..hw {
                        acc += feat.data()[ci * hw + p] * masks.data()[j * hw + p];
                    }
                    acc / count
                } else if mode == StyleMode::LocalZero {
                    0.0
                } else {
                    global[ci]
                };
                out.data_mut()[j * c + ci] = v;
            }
        }
        out
    }

    #[test]
    fn constant_feature_pools_to_constant_everywhere() {
        let feat = Tensor::full(&[4, 4, 4], 2.5);
        let labels: Vec<u8> = (0..16).map(|i| (i % 3) as u8).collect();
        let masks = toy_masks(&labels, 4, 4);
        let codes = pool_region_codes(&feat, &masks, StyleMode::JointGlobalLocal);
        // present and absent rows all equal the constant
        for &v in codes.data() {
            assert_eq!(v, 2.5);
        }
    }

    #[test]
    fn hand_case_top_row_mean_and_global_fallback() {
        // 1-channel 2x2 feature [[1,2],[3,4]]; region 0 = top row; regions 1.. absent
        let feat = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let labels = vec![0u8, 0, 1, 1];
        let masks = toy_masks(&labels, 2, 2);
        let codes = pool_region_codes(&feat, &masks, StyleMode::JointGlobalLocal);
        assert_eq!(codes.at2(0, 0), 1.5); // top-row mean
        assert_eq!(codes.at2(1, 0), 3.5); // bottom-row mean
        for j in 2..NUM_REGIONS {
            assert_eq!(codes.at2(j, 0), 2.5, "absent region {j} gets the global mean");
        }
    }

    #[test]
    fn matches_bruteforce_oracle_on_random_instances() {
        let mut rng = Rng::from_seed(21);
        for case in 0..50 {
            let feat = Tensor::uniform(&[4, 4, 4], -2.0, 2.0, &mut rng);
            let labels: Vec<u8> = (0..16).map(|_| rng.below(NUM_REGIONS) as u8).collect();
            let masks = toy_masks(&labels, 4, 4);
            for mode in [StyleMode::JointGlobalLocal, StyleMode::GlobalOnly, StyleMode::LocalZero] {
                let got = pool_region_codes(&feat, &masks, mode);
                let want = pool_oracle(&feat, &masks, mode);
                for (a, b) in got.data().iter().zip(want.data()) {
                    assert!((a - b).abs() < 1e-6, "case {case} mode {mode:?}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn absent_rows_equal_global_row_exactly() {
        let mut rng = Rng::from_seed(3);
        let feat = Tensor::uniform(&[4, 4, 4], -1.0, 1.0, &mut rng);
        let labels = vec![2u8; 16]; // only region 2 present
        let masks = toy_masks(&labels, 4, 4);
        let codes = pool_region_codes(&feat, &masks, StyleMode::JointGlobalLocal);
        // single whole-image region: its code IS the global mean, bit-for-bit
        for j in 0..NUM_REGIONS {
            for c in 0..4 {
                assert_eq!(codes.at2(j, c), codes.at2(2, c));
            }
        }
    }

    #[test]
    fn pooling_is_linear_in_the_feature() {
        let mut rng = Rng::from_seed(5);
        let f1 = Tensor::uniform(&[3, 4, 4], -1.0, 1.0, &mut rng);
        let f2 = Tensor::uniform(&[3, 4, 4], -1.0, 1.0, &mut rng);
        let labels: Vec<u8> = (0..16).map(|_| rng.below(4) as u8).collect();
        let masks = toy_masks(&labels, 4, 4);
        let (a, b) = (0.7, -1.3);
        let combo = f1.zip_map(&f2, |x, y| a * x + b * y);
        let lhs = pool_region_codes(&combo, &masks, StyleMode::JointGlobalLocal);
        let p1 = pool_region_codes(&f1, &masks, StyleMode::JointGlobalLocal);
        let p2 = pool_region_codes(&f2, &masks, StyleMode::JointGlobalLocal);
        for i in 0..lhs.len() {
            let want = a * p1.data()[i] + b * p2.data()[i];
            assert!((lhs.data()[i] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn permuting_pixels_within_a_region_keeps_its_code() {
        let mut rng = Rng::from_seed(8);
        let mut feat = Tensor::uniform(&[3, 4, 4], -1.0, 1.0, &mut rng);
        let labels = vec![
            1u8, 1, 0, 0, //
            1, 1, 0, 0, //
            0, 0, 0, 0, //
            0, 0, 0, 0,
        ];
        let masks = toy_masks(&labels, 4, 4);
        let before = pool_region_codes(&feat, &masks, StyleMode::JointGlobalLocal);
        // swap two pixels inside region 1 (flat positions 0 and 5)
        for c in 0..3 {
            let d = feat.data_mut();
            d.swap(c * 16, c * 16 + 5);
        }
        let after = pool_region_codes(&feat, &masks, StyleMode::JointGlobalLocal);
        for c in 0..3 {
            assert!((before.at2(1, c) - after.at2(1, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn global_mode_rows_all_equal_and_local_mode_zeroes_absent() {
        let mut rng = Rng::from_seed(9);
        let feat = Tensor::uniform(&[4, 4, 4], -1.0, 1.0, &mut rng);
        let labels: Vec<u8> = (0..16).map(|_| rng.below(3) as u8).collect();
        let masks = toy_masks(&labels, 4, 4);
        let g = pool_region_codes(&feat, &masks, StyleMode::GlobalOnly);
        for j in 1..NUM_REGIONS {
            for c in 0..4 {
                assert_eq!(g.at2(j, c), g.at2(0, c));
            }
        }
        let l = pool_region_codes(&feat, &masks, StyleMode::LocalZero);
        for j in 3..NUM_REGIONS {
            for c in 0..4 {
                assert_eq!(l.at2(j, c), 0.0, "absent region {j} must be zero");
            }
        }
    }

    #[test]
    fn source_encoder_shapes_and_determinism() {
        let mut rng = Rng::from_seed(11);
        let enc = SourceEncoder::new("src", &[8, 12, 16, 24], &[24, STYLE_CHANNELS], UpMode::Transposed, &mut rng);
        let pair = make_synthetic_pair(1, 64, 64);
        let img = pair.source_image.tensor().clone();
        let mut tape = Tape::new();
        let mut bound = Bound::frozen();
        let x = tape.constant(img.clone());
        let y = enc.forward(&mut tape, &mut bound, x);
        assert_eq!(tape.value(y).shape(), &[STYLE_CHANNELS, 16, 16]);
        let mut tape2 = Tape::new();
        let mut bound2 = Bound::frozen();
        let x2 = tape2.constant(img);
        let y2 = enc.forward(&mut tape2, &mut bound2, x2);
        assert_eq!(tape.value(y), tape2.value(y2));
    }

    #[test]
    fn source_encoder_input_gradient_matches_finite_differences() {
        let mut r = Rng::from_seed(17);
        let enc = SourceEncoder::new("src", &[4, 4, 4, 4], &[4, STYLE_CHANNELS], UpMode::Transposed, &mut r);
        let img0 = Tensor::uniform(&[3, 16, 16], -0.8, 0.8, &mut r);
        let readout = |img: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let mut bound = Bound::new();
            let x = tape.leaf(img.clone());
            let f = enc.forward(&mut tape, &mut bound, x);
            let f2 = tape.mul(f, f);
            let s = tape.mean_all(f2);
            tape.value(s).item()
        };
        let mut tape = Tape::new();
        let mut bound = Bound::new();
        let x = tape.leaf(img0.clone());
        let f = enc.forward(&mut tape, &mut bound, x);
        let f2 = tape.mul(f, f);
        let s = tape.mean_all(f2);
        let grads = tape.backward(s);
        let analytic = grads.get(x).unwrap();
        let mut probe = Rng::from_seed(18);
        for _ in 0..30 {
            let i = probe.below(img0.len());
            let h = 1e-5;
            let mut xp = img0.clone();
            xp.data_mut()[i] += h;
            let mut xm = img0.clone();
            xm.data_mut()[i] -= h;
            let fd = (readout(&xp) - readout(&xm)) / (2.0 * h);
            let an = analytic.data()[i];
            let denom = an.abs().max(fd.abs()).max(1e-6);
            assert!((an - fd).abs() / denom < 1e-3, "coord {i}: {an} vs {fd}");
        }
    }

    #[test]
    fn table_json_roundtrip() {
        let pair = make_synthetic_pair(2, 64, 64);
        let masks = region_masks_at_feature_res(&pair.source_parsing, 4);
        let mut rng = Rng::from_seed(13);
        let feat = Tensor::uniform(&[STYLE_CHANNELS, 16, 16], -1.0, 1.0, &mut rng);
        let table = StyleCodeTable {
            codes: pool_region_codes(&feat, &masks, StyleMode::JointGlobalLocal),
            present: presence_flags(&masks),
        };
        let back = StyleCodeTable::from_json(&table.to_json()).unwrap();
        assert_eq!(back, table);
        assert!(StyleCodeTable::from_json("{}").is_err());
    }

    #[test]
    fn onehot_masks_match_label_downsampling() {
        let pair = make_synthetic_pair(4, 64, 64);
        let via_labels = region_masks_at_feature_res(&pair.source_parsing, 4);
        let via_onehot = onehot_masks(&one_hot(&pair.source_parsing), 4);
        assert_eq!(via_labels, via_onehot);
    }
}
