//! On-disk formats: 8-bit RGB PNG images, single-channel PNG parsing maps
//! (pixel value = label index), keypoints as a JSON array of 18 `[x, y]`
//! pairs with `[-1, -1]` marking a missing joint, and tab-separated pair
//! lists.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use super::{DataError, ImageTensor, Keypoints, PairedSample, ParsingMap, NUM_JOINTS, NUM_RAW_LABELS};
use crate::tensor::Tensor;

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), source }
}

fn png_err(path: &Path, err: impl std::fmt::Display) -> DataError {
    DataError::Image(path.display().to_string(), err.to_string())
}

/// Map [-1,1] to 0..255 with rounding.
pub fn to_byte(v: f64) -> u8 {
    (((v + 1.0) * 0.5 * 255.0).round()).clamp(0.0, 255.0) as u8
}

/// Map 0..255 back to [-1,1].
pub fn from_byte(b: u8) -> f64 {
    b as f64 / 255.0 * 2.0 - 1.0
}

pub fn save_image_png(path: &Path, img: &ImageTensor) -> Result<(), DataError> {
    let (w, h) = (img.width(), img.height());
    let t = img.tensor();
    let mut bytes = Vec::with_capacity(w * h * 3);
    for p in 0..w * h {
        for c in 0..3 {
            bytes.push(to_byte(t.data()[c * w * h + p]));
        }
    }
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(&bytes).map_err(|e| png_err(path, e))?;
    Ok(())
}

pub fn load_image_png(path: &Path) -> Result<ImageTensor, DataError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| png_err(path, "image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(png_err(path, "expected 8-bit RGB"));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    {
        let d = t.data_mut();
        for p in 0..w * h {
            for c in 0..3 {
                d[c * w * h + p] = from_byte(buf[p * 3 + c]);
            }
        }
    }
    ImageTensor::new(t)
}

pub fn save_parsing_png(path: &Path, parsing: &ParsingMap) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), parsing.width() as u32, parsing.height() as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(parsing.labels()).map_err(|e| png_err(path, e))?;
    Ok(())
}

fn load_gray_png(path: &Path) -> Result<(Vec<u8>, usize, usize), DataError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| png_err(path, "image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(png_err(path, "expected 8-bit grayscale"));
    }
    buf.truncate(info.buffer_size());
    Ok((buf, info.width as usize, info.height as usize))
}

/// Load an 8-label parsing map; values above 7 are rejected.
pub fn load_parsing_png(path: &Path) -> Result<ParsingMap, DataError> {
    let (buf, w, h) = load_gray_png(path)?;
    ParsingMap::new(buf, w, h)
}

/// Load a raw 21-category field (values 0..20) for relabeling.
pub fn load_raw_parsing_png(path: &Path) -> Result<(Vec<u8>, usize, usize), DataError> {
    let (buf, w, h) = load_gray_png(path)?;
    if let Some(&bad) = buf.iter().find(|&&v| v as usize >= NUM_RAW_LABELS) {
        return Err(DataError::LabelOutOfRange { label: bad, max: NUM_RAW_LABELS as u8 - 1 });
    }
    Ok((buf, w, h))
}

pub fn save_keypoints_json(path: &Path, kps: &Keypoints) -> Result<(), DataError> {
    let arr: Vec<[f64; 2]> = kps
        .joints()
        .iter()
        .map(|j| match j {
            Some((x, y)) => [*x, *y],
            None => [-1.0, -1.0],
        })
        .collect();
    let mut file = File::create(path).map_err(|e| io_err(path, e))?;
    let text = serde_json::to_string(&arr).expect("keypoints serialize");
    file.write_all(text.as_bytes()).map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Parse keypoints against a `w`x`h` grid; `[-1,-1]` entries become missing.
pub fn load_keypoints_json(path: &Path, w: usize, h: usize) -> Result<Keypoints, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let arr: Vec<[f64; 2]> = serde_json::from_str(&text)
        .map_err(|e| DataError::KeypointsJson(format!("{}: {e}", path.display())))?;
    if arr.len() != NUM_JOINTS {
        return Err(DataError::KeypointCount { expected: NUM_JOINTS, got: arr.len() });
    }
    let joints = arr
        .into_iter()
        .map(|[x, y]| if x == -1.0 && y == -1.0 { None } else { Some((x, y)) })
        .collect();
    Keypoints::new(joints, w, h)
}

/// Load one sample's worth of files, validating shape agreement.
pub fn load_sample(
    image_path: &Path,
    keypoints_path: &Path,
    parsing_path: &Path,
) -> Result<(ImageTensor, Keypoints, ParsingMap), DataError> {
    let image = load_image_png(image_path)?;
    let parsing = load_parsing_png(parsing_path)?;
    if parsing.width() != image.width() || parsing.height() != image.height() {
        return Err(DataError::ShapeMismatch {
            context: format!("{} vs {}", image_path.display(), parsing_path.display()),
            a: image.width(),
            b: image.height(),
            c: parsing.width(),
            d: parsing.height(),
        });
    }
    let kps = load_keypoints_json(keypoints_path, image.width(), image.height())?;
    Ok((image, kps, parsing))
}

/// Conventional file names for a sample stem inside a dataset directory.
pub fn stem_paths(dir: &Path, stem: &str) -> (std::path::PathBuf, std::path::PathBuf, std::path::PathBuf) {
    (
        dir.join(format!("{stem}.png")),
        dir.join(format!("{stem}_keypoints.json")),
        dir.join(format!("{stem}_parsing.png")),
    )
}

/// Write both halves of a pair under `dir` with stems `{base}a` / `{base}b`.
pub fn save_pair(dir: &Path, base: &str, pair: &PairedSample) -> Result<(String, String), DataError> {
    let stem_src = format!("{base}a");
    let stem_tgt = format!("{base}b");
    for (stem, img, kps, parsing) in [
        (&stem_src, &pair.source_image, &pair.source_keypoints, &pair.source_parsing),
        (&stem_tgt, &pair.target_image, &pair.target_keypoints, &pair.target_parsing),
    ] {
        let (img_p, kps_p, par_p) = stem_paths(dir, stem);
        save_image_png(&img_p, img)?;
        save_keypoints_json(&kps_p, kps)?;
        save_parsing_png(&par_p, parsing)?;
    }
    Ok((stem_src, stem_tgt))
}

/// Read a pair-list file: one `source_stem<TAB>target_stem` per line.
pub fn load_pair_list(path: &Path) -> Result<Vec<(String, String)>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split('\t');
        match (it.next(), it.next()) {
            (Some(a), Some(b)) if !a.is_empty() && !b.is_empty() => {
                pairs.push((a.to_string(), b.to_string()))
            }
            _ => {
                return Err(DataError::KeypointsJson(format!(
                    "{}:{}: pair lines must be `source<TAB>target`",
                    path.display(),
                    lineno + 1
                )))
            }
        }
    }
    Ok(pairs)
}

/// Load a full [`PairedSample`] given its two stems.
pub fn load_pair(dir: &Path, stem_src: &str, stem_tgt: &str) -> Result<PairedSample, DataError> {
    let (si, sk, sp) = stem_paths(dir, stem_src);
    let (ti, tk, tp) = stem_paths(dir, stem_tgt);
    let (source_image, source_keypoints, source_parsing) = load_sample(&si, &sk, &sp)?;
    let (target_image, target_keypoints, target_parsing) = load_sample(&ti, &tk, &tp)?;
    if source_image.width() != target_image.width() || source_image.height() != target_image.height() {
        return Err(DataError::ShapeMismatch {
            context: format!("{stem_src} vs {stem_tgt}"),
            a: source_image.width(),
            b: source_image.height(),
            c: target_image.width(),
            d: target_image.height(),
        });
    }
    Ok(PairedSample {
        source_image,
        target_image,
        source_keypoints,
        target_keypoints,
        source_parsing,
        target_parsing,
    })
}
