//! Editing applications: texture transfer, texture interpolation, and region
//! editing.
//!
//! Texture operations never touch pixels; they only rewrite rows of the
//! style code table, and the rendered change comes from the generator
//! consuming the edited table. Region edits rewrite the parsing map fed to
//! the image stage. Scripts are TOML files listing edits applied in order.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::data::{region_index, ParsingMap, NUM_REGIONS};
use crate::style::{StyleCodeTable, STYLE_CHANNELS};

#[derive(Debug, Error)]
pub enum EditError {
    #[error("unknown region {0:?} (expected one of {names})", names = crate::data::REGION_NAMES.join(", "))]
    UnknownRegion(String),
    #[error("region index {0} out of range")]
    RegionOutOfRange(usize),
    #[error("alpha {0} outside [0, 1]")]
    AlphaOutOfRange(f64),
    #[error("mask {path}: {reason}")]
    BadMask { path: String, reason: String },
    #[error("edit script {path}: {reason}")]
    BadScript { path: String, reason: String },
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

/// Copy the listed region rows from `reference` into `base`; all other rows
/// stay bit-identical to `base`.
pub fn transfer_texture(
    base: &StyleCodeTable,
    reference: &StyleCodeTable,
    regions: &BTreeSet<usize>,
) -> Result<StyleCodeTable, EditError> {
    if let Some(&bad) = regions.iter().find(|&&r| r >= NUM_REGIONS) {
        return Err(EditError::RegionOutOfRange(bad));
    }
    let mut out = base.clone();
    for &r in regions {
        let row = reference.row(r).to_vec();
        out.codes.data_mut()[r * STYLE_CHANNELS..(r + 1) * STYLE_CHANNELS].copy_from_slice(&row);
        out.present[r] = reference.present[r];
    }
    Ok(out)
}

/// Linear blend of one region's style row: row = (1-alpha) a + alpha b.
/// Every other row comes from `table_a`. The endpoints return the source
/// rows bit-exactly.
pub fn interpolate_texture(
    table_a: &StyleCodeTable,
    table_b: &StyleCodeTable,
    region: usize,
    alpha: f64,
) -> Result<StyleCodeTable, EditError> {
    if region >= NUM_REGIONS {
        return Err(EditError::RegionOutOfRange(region));
    }
    if !(0.0..=1.0).contains(&alpha) || !alpha.is_finite() {
        return Err(EditError::AlphaOutOfRange(alpha));
    }
    let mut out = table_a.clone();
    let row: Vec<f64> = if alpha == 0.0 {
        table_a.row(region).to_vec()
    } else if alpha == 1.0 {
        table_b.row(region).to_vec()
    } else {
        table_a
            .row(region)
            .iter()
            .zip(table_b.row(region))
            .map(|(a, b)| (1.0 - alpha) * a + alpha * b)
            .collect()
    };
    out.codes.data_mut()[region * STYLE_CHANNELS..(region + 1) * STYLE_CHANNELS]
        .copy_from_slice(&row);
    if alpha == 1.0 {
        out.present[region] = table_b.present[region];
    }
    Ok(out)
}

/// A binary repaint mask (nonzero pixels selected).
#[derive(Clone, Debug)]
pub struct RepaintMask {
    pub selected: Vec<bool>,
    pub w: usize,
    pub h: usize,
}

impl RepaintMask {
    pub fn from_png(path: &Path) -> Result<RepaintMask, EditError> {
        let file = std::fs::File::open(path).map_err(|e| EditError::BadMask {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let decoder = png::Decoder::new(std::io::BufReader::new(file));
        let mut reader = decoder.read_info().map_err(|e| EditError::BadMask {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let mut buf = vec![
            0u8;
            reader.output_buffer_size().ok_or_else(|| EditError::BadMask {
                path: path.display().to_string(),
                reason: "mask too large".into(),
            })?
        ];
        let info = reader.next_frame(&mut buf).map_err(|e| EditError::BadMask {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
            return Err(EditError::BadMask {
                path: path.display().to_string(),
                reason: "expected 8-bit grayscale".into(),
            });
        }
        buf.truncate(info.buffer_size());
        Ok(RepaintMask {
            selected: buf.iter().map(|&v| v != 0).collect(),
            w: info.width as usize,
            h: info.height as usize,
        })
    }

    pub fn full(w: usize, h: usize) -> RepaintMask {
        RepaintMask { selected: vec![true; w * h], w, h }
    }
}

/// One edit step.
#[derive(Clone, Debug)]
pub enum Edit {
    /// Replace `region`'s style row with the row from the table at
    /// `source_table` (a style-table JSON file).
    ReplaceRegionStyle { region: usize, source_table: PathBuf },
    /// Blend `region`'s row between two style-table files.
    BlendRegionStyle { region: usize, table_a: PathBuf, table_b: PathBuf, alpha: f64 },
    /// Repaint the masked pixels of the parsing map to `new_label`.
    RepaintParsing { mask: PathBuf, new_label: u8 },
}

/// Parsed edit script: an ordered list of edits.
#[derive(Clone, Debug, Default)]
pub struct EditScript {
    pub edits: Vec<Edit>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptFile {
    #[serde(default)]
    edit: Vec<ScriptEdit>,
}

#[derive(Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
enum ScriptEdit {
    ReplaceRegionStyle { region: String, source_table: String },
    BlendRegionStyle { region: String, table_a: String, table_b: String, alpha: f64 },
    RepaintParsing { mask: String, new_label: String },
}

fn parse_region(name: &str) -> Result<usize, EditError> {
    region_index(name)
        .map(|r| r as usize)
        .ok_or_else(|| EditError::UnknownRegion(name.to_string()))
}

impl EditScript {
    /// Parse a TOML script; relative paths resolve against the script's
    /// directory.
    pub fn load(path: &Path) -> Result<EditScript, EditError> {
        let text = std::fs::read_to_string(path).map_err(|e| EditError::BadScript {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let file: ScriptFile = toml::from_str(&text).map_err(|e| EditError::BadScript {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &str| -> PathBuf {
            let pb = PathBuf::from(p);
            if pb.is_absolute() {
                pb
            } else {
                base.join(pb)
            }
        };
        let mut edits = Vec::new();
        for e in file.edit {
            edits.push(match e {
                ScriptEdit::ReplaceRegionStyle { region, source_table } => Edit::ReplaceRegionStyle {
                    region: parse_region(&region)?,
                    source_table: resolve(&source_table),
                },
                ScriptEdit::BlendRegionStyle { region, table_a, table_b, alpha } => {
                    if !(0.0..=1.0).contains(&alpha) {
                        return Err(EditError::AlphaOutOfRange(alpha));
                    }
                    Edit::BlendRegionStyle {
                        region: parse_region(&region)?,
                        table_a: resolve(&table_a),
                        table_b: resolve(&table_b),
                        alpha,
                    }
                }
                ScriptEdit::RepaintParsing { mask, new_label } => Edit::RepaintParsing {
                    mask: resolve(&mask),
                    new_label: parse_region(&new_label)? as u8,
                },
            });
        }
        Ok(EditScript { edits })
    }

    pub fn has_style_edits(&self) -> bool {
        self.edits
            .iter()
            .any(|e| !matches!(e, Edit::RepaintParsing { .. }))
    }
}

/// Apply the script's repaint edits in order (later edits win at overlapping
/// pixels); style edits are ignored here. The output is revalidated.
pub fn edit_region(parsing: &ParsingMap, script: &EditScript) -> Result<ParsingMap, EditError> {
    let (w, h) = (parsing.width(), parsing.height());
    let mut labels = parsing.labels().to_vec();
    for e in &script.edits {
        let Edit::RepaintParsing { mask, new_label } = e else { continue };
        let m = RepaintMask::from_png(mask)?;
        if (m.w, m.h) != (w, h) {
            return Err(EditError::BadMask {
                path: mask.display().to_string(),
                reason: format!("mask is {}x{}, parsing is {w}x{h}", m.w, m.h),
            });
        }
        if *new_label >= NUM_REGIONS as u8 {
            return Err(EditError::RegionOutOfRange(*new_label as usize));
        }
        for (px, &sel) in m.selected.iter().enumerate() {
            if sel {
                labels[px] = *new_label;
            }
        }
    }
    Ok(ParsingMap::new(labels, w, h)?)
}

/// Apply the script's style edits (in order) to a base table.
pub fn apply_style_edits(
    base: &StyleCodeTable,
    script: &EditScript,
) -> Result<StyleCodeTable, EditError> {
    let mut table = base.clone();
    for e in &script.edits {
        match e {
            Edit::ReplaceRegionStyle { region, source_table } => {
                let text = std::fs::read_to_string(source_table).map_err(|err| EditError::BadScript {
                    path: source_table.display().to_string(),
                    reason: err.to_string(),
                })?;
                let source = StyleCodeTable::from_json(&text).map_err(|reason| EditError::BadScript {
                    path: source_table.display().to_string(),
                    reason,
                })?;
                let mut regions = BTreeSet::new();
                regions.insert(*region);
                table = transfer_texture(&table, &source, &regions)?;
            }
            Edit::BlendRegionStyle { region, table_a, table_b, alpha } => {
                let load = |p: &Path| -> Result<StyleCodeTable, EditError> {
                    let text = std::fs::read_to_string(p).map_err(|err| EditError::BadScript {
                        path: p.display().to_string(),
                        reason: err.to_string(),
                    })?;
                    StyleCodeTable::from_json(&text).map_err(|reason| EditError::BadScript {
                        path: p.display().to_string(),
                        reason,
                    })
                };
                let (ta, tb) = (load(table_a)?, load(table_b)?);
                let blended = interpolate_texture(&ta, &tb, *region, *alpha)?;
                let mut regions = BTreeSet::new();
                regions.insert(*region);
                table = transfer_texture(&table, &blended, &regions)?;
            }
            Edit::RepaintParsing { .. } => {}
        }
    }
    Ok(table)
}
