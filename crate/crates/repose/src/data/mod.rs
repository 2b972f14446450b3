//! Input/output data types: keypoints, pose heatmaps, parsing maps, images,
//! and paired samples; plus the synthetic fixture generator and file I/O.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub mod io;
pub mod synthetic;

pub use synthetic::{make_synthetic_pair, SyntheticParams};

/// Number of body joints in the pose representation.
pub const NUM_JOINTS: usize = 18;

/// Number of semantic region categories (background is 0).
pub const NUM_REGIONS: usize = 8;

/// Number of raw parsing categories accepted by [`relabel_parsing`].
pub const NUM_RAW_LABELS: usize = 21;

/// Region names, indexed by label. Also the spelling accepted on the CLI.
pub const REGION_NAMES: [&str; NUM_REGIONS] = [
    "background",
    "hair",
    "upper_clothes",
    "dress",
    "pants",
    "face",
    "upper_skin",
    "leg",
];

/// Joint ordering used throughout: nose, neck, right shoulder/elbow/wrist,
/// left shoulder/elbow/wrist, right hip/knee/ankle, left hip/knee/ankle,
/// right eye, left eye, right ear, left ear. This is the common 18-joint
/// convention; files using another ordering must be permuted on ingest.
pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "nose",
    "neck",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_hip",
    "r_knee",
    "r_ankle",
    "l_hip",
    "l_knee",
    "l_ankle",
    "r_eye",
    "l_eye",
    "r_ear",
    "l_ear",
];

pub fn region_index(name: &str) -> Option<u8> {
    REGION_NAMES.iter().position(|&n| n == name).map(|i| i as u8)
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("expected {expected} keypoints, got {got}")]
    KeypointCount { expected: usize, got: usize },
    #[error("keypoint {index} has non-finite coordinates")]
    KeypointNotFinite { index: usize },
    #[error("keypoint {index} at ({x}, {y}) outside {w}x{h}")]
    KeypointOutOfBounds { index: usize, x: f64, y: f64, w: usize, h: usize },
    #[error("parsing label {label} out of range (max {max})")]
    LabelOutOfRange { label: u8, max: u8 },
    #[error("relabel table must cover raw labels 0..{expected}, got {got} entries")]
    RelabelTableIncomplete { expected: usize, got: usize },
    #[error("shape mismatch: {context} ({a}x{b} vs {c}x{d})")]
    ShapeMismatch { context: String, a: usize, b: usize, c: usize, d: usize },
    #[error("malformed keypoints JSON: {0}")]
    KeypointsJson(String),
    #[error("image {0}: {1}")]
    Image(String, String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One joint: present at pixel coordinates, or missing.
pub type Joint = Option<(f64, f64)>;

/// Ordered list of 18 joints.
#[derive(Clone, Debug, PartialEq)]
pub struct Keypoints {
    joints: [Joint; NUM_JOINTS],
}

impl Keypoints {
    /// Validate count, finiteness, and bounds against a `w`x`h` grid.
    pub fn new(joints: Vec<Joint>, w: usize, h: usize) -> Result<Keypoints, DataError> {
        if joints.len() != NUM_JOINTS {
            return Err(DataError::KeypointCount { expected: NUM_JOINTS, got: joints.len() });
        }
        let mut arr = [None; NUM_JOINTS];
        for (i, j) in joints.into_iter().enumerate() {
            if let Some((x, y)) = j {
                if !x.is_finite() || !y.is_finite() {
                    return Err(DataError::KeypointNotFinite { index: i });
                }
                if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
                    return Err(DataError::KeypointOutOfBounds { index: i, x, y, w, h });
                }
            }
            arr[i] = j;
        }
        Ok(Keypoints { joints: arr })
    }

    pub fn all_missing() -> Keypoints {
        Keypoints { joints: [None; NUM_JOINTS] }
    }

    pub fn joints(&self) -> &[Joint; NUM_JOINTS] {
        &self.joints
    }

    pub fn get(&self, i: usize) -> Joint {
        self.joints[i]
    }
}

/// 18-channel Gaussian response stack, one channel per joint, values in [0,1].
/// A missing joint yields an all-zero channel. The peak value is exactly 1
/// when the joint sits on an integer pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseHeatmap(Tensor);

impl PoseHeatmap {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }
}

/// Render keypoints into a [`PoseHeatmap`]: channel k holds
/// `exp(-((x-x_k)^2 + (y-y_k)^2) / (2 sigma^2))` on the pixel grid.
pub fn encode_pose_heatmap(kps: &Keypoints, h: usize, w: usize, sigma: f64) -> PoseHeatmap {
    assert!(h >= 8 && w >= 8, "heatmap grid too small: {w}x{h}");
    assert!(sigma > 0.0, "sigma must be positive");
    let mut t = Tensor::zeros(&[NUM_JOINTS, h, w]);
    let inv = 1.0 / (2.0 * sigma * sigma);
    {
        let data = t.data_mut();
        for (k, joint) in kps.joints.iter().enumerate() {
            let Some((jx, jy)) = joint else { continue };
            let plane = &mut data[k * h * w..(k + 1) * h * w];
            for y in 0..h {
                let dy = y as f64 - jy;
                for x in 0..w {
                    let dx = x as f64 - jx;
                    plane[y * w + x] = (-(dx * dx + dy * dy) * inv).exp();
                }
            }
        }
    }
    PoseHeatmap(t)
}

/// Per-pixel semantic labels in 0..8.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsingMap {
    labels: Vec<u8>,
    w: usize,
    h: usize,
}

impl ParsingMap {
    pub fn new(labels: Vec<u8>, w: usize, h: usize) -> Result<ParsingMap, DataError> {
        if labels.len() != w * h {
            return Err(DataError::ShapeMismatch {
                context: "parsing buffer".into(),
                a: labels.len(),
                b: 1,
                c: w,
                d: h,
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= NUM_REGIONS as u8) {
            return Err(DataError::LabelOutOfRange { label: bad, max: NUM_REGIONS as u8 - 1 });
        }
        Ok(ParsingMap { labels, w, h })
    }

    pub fn background(w: usize, h: usize) -> ParsingMap {
        ParsingMap { labels: vec![0; w * h], w, h }
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.w + x]
    }

    pub fn set(&mut self, x: usize, y: usize, label: u8) {
        assert!(label < NUM_REGIONS as u8);
        self.labels[y * self.w + x] = label;
    }

    /// Pixel count per label.
    pub fn histogram(&self) -> [usize; NUM_REGIONS] {
        let mut h = [0usize; NUM_REGIONS];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

/// Total assignment of the 21 raw categories onto the 8 region labels.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RelabelTable {
    pub map: Vec<u8>,
}

impl RelabelTable {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.map.len() != NUM_RAW_LABELS {
            return Err(DataError::RelabelTableIncomplete {
                expected: NUM_RAW_LABELS,
                got: self.map.len(),
            });
        }
        if let Some(&bad) = self.map.iter().find(|&&l| l >= NUM_REGIONS as u8) {
            return Err(DataError::LabelOutOfRange { label: bad, max: NUM_REGIONS as u8 - 1 });
        }
        Ok(())
    }
}

impl Default for RelabelTable {
    /// The table shipped with the crate (assets/parsing_relabel_21to8.json).
    fn default() -> Self {
        let table: RelabelTable =
            serde_json::from_str(include_str!("../../assets/parsing_relabel_21to8.json"))
                .expect("bundled relabel table parses");
        table.validate().expect("bundled relabel table is total");
        table
    }
}

/// Collapse a raw 21-category field into the 8-label scheme.
pub fn relabel_parsing(
    raw: &[u8],
    w: usize,
    h: usize,
    table: &RelabelTable,
) -> Result<ParsingMap, DataError> {
    table.validate()?;
    if raw.len() != w * h {
        return Err(DataError::ShapeMismatch {
            context: "raw parsing buffer".into(),
            a: raw.len(),
            b: 1,
            c: w,
            d: h,
        });
    }
    let mut labels = Vec::with_capacity(raw.len());
    for &r in raw {
        if r as usize >= NUM_RAW_LABELS {
            return Err(DataError::LabelOutOfRange { label: r, max: NUM_RAW_LABELS as u8 - 1 });
        }
        labels.push(table.map[r as usize]);
    }
    ParsingMap::new(labels, w, h)
}

/// 8-channel one-hot encoding of a parsing map.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsingOneHot(Tensor);

impl ParsingOneHot {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// Wrap a soft assignment (channels sum to 1 per pixel) produced by a
    /// generator; used when gradients must flow through the map.
    pub fn from_soft(t: Tensor) -> ParsingOneHot {
        assert_eq!(t.shape()[0], NUM_REGIONS);
        ParsingOneHot(t)
    }
}

/// One-hot encode: channel c is 1 exactly where the label is c.
pub fn one_hot(p: &ParsingMap) -> ParsingOneHot {
    let (w, h) = (p.width(), p.height());
    let mut t = Tensor::zeros(&[NUM_REGIONS, h, w]);
    {
        let data = t.data_mut();
        for (i, &l) in p.labels().iter().enumerate() {
            data[l as usize * h * w + i] = 1.0;
        }
    }
    ParsingOneHot(t)
}

/// Channel-argmax of an 8-channel field back into labels (ties pick the
/// lowest channel).
pub fn argmax_parsing(t: &Tensor) -> ParsingMap {
    assert_eq!(t.shape()[0], NUM_REGIONS);
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let hw = h * w;
    let mut labels = vec![0u8; hw];
    for p in 0..hw {
        let mut best = f64::NEG_INFINITY;
        let mut arg = 0u8;
        for c in 0..NUM_REGIONS {
            let v = t.data()[c * hw + p];
            if v > best {
                best = v;
                arg = c as u8;
            }
        }
        labels[p] = arg;
    }
    ParsingMap { labels, w, h }
}

/// RGB image with values in [-1, 1], shape [3, H, W].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(Tensor);

impl ImageTensor {
    pub fn new(t: Tensor) -> Result<ImageTensor, DataError> {
        if t.shape().len() != 3 || t.shape()[0] != 3 {
            return Err(DataError::ShapeMismatch {
                context: "image tensor".into(),
                a: t.shape()[0],
                b: 0,
                c: 3,
                d: 0,
            });
        }
        assert!(t.all_finite(), "image tensor contains non-finite values");
        assert!(
            t.data().iter().all(|&v| (-1.0..=1.0).contains(&v)),
            "image tensor out of [-1,1]"
        );
        Ok(ImageTensor(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }
}

/// A source/target pair with aligned spatial shapes.
#[derive(Clone, Debug)]
pub struct PairedSample {
    pub source_image: ImageTensor,
    pub target_image: ImageTensor,
    pub source_keypoints: Keypoints,
    pub target_keypoints: Keypoints,
    pub source_parsing: ParsingMap,
    pub target_parsing: ParsingMap,
}

impl PairedSample {
    pub fn width(&self) -> usize {
        self.source_image.width()
    }

    pub fn height(&self) -> usize {
        self.source_image.height()
    }
}
