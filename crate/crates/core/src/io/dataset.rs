use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::image::{decode_image, encode_png, ImageFile};
use crate::error::{Result, VccError};
use crate::segment::MaskGrid;
use crate::toylab::{Color, PartAnnotation, Shape, SyntheticScene, SCENE_SIZE};

pub const LABELS_FILE: &str = "labels.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartRecord {
    pub shape: Shape,
    pub color: Color,
    pub texture: u8,
    /// Shape mask as alternating run lengths, zeros first.
    pub mask_rle: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub class: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parts: Option<PartRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub file: String,
    pub image: ImageFile,
    pub label: usize,
    pub parts: Option<PartAnnotation>,
}

fn file_name(i: usize) -> String {
    format!("img_{i:05}.png")
}

/// Writes each scene as a PNG plus a `labels.json` manifest keyed by file name.
pub fn save_dataset(dir: &Path, scenes: &[SyntheticScene]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut labels = BTreeMap::new();
    for (i, s) in scenes.iter().enumerate() {
        let name = file_name(i);
        fs::write(dir.join(&name), encode_png(&s.image)?)?;
        let grid = MaskGrid::new(SCENE_SIZE, SCENE_SIZE, s.parts.mask.clone())?;
        labels.insert(
            name,
            LabelEntry {
                class: s.label,
                parts: Some(PartRecord {
                    shape: s.parts.shape,
                    color: s.parts.color,
                    texture: s.parts.texture,
                    mask_rle: grid.to_rle(),
                }),
            },
        );
    }
    fs::write(dir.join(LABELS_FILE), serde_json::to_vec_pretty(&labels)?)?;
    Ok(())
}

/// Reads a dataset written by [`save_dataset`] or any directory of images
/// with a `labels.json` mapping file name to `{class}`. Entries are sorted
/// by file name.
pub fn load_dataset(dir: &Path) -> Result<Vec<LabeledImage>> {
    let labels: BTreeMap<String, LabelEntry> = serde_json::from_slice(&fs::read(dir.join(LABELS_FILE))?)?;
    labels
        .into_iter()
        .map(|(file, entry)| {
            let image = decode_image(&fs::read(dir.join(&file))?)?;
            let parts = entry
                .parts
                .map(|p| {
                    let grid = MaskGrid::from_rle(image.height(), image.width(), &p.mask_rle)?;
                    Ok::<_, VccError>(PartAnnotation {
                        shape: p.shape,
                        color: p.color,
                        texture: p.texture,
                        mask: grid.cells().to_vec(),
                    })
                })
                .transpose()?;
            Ok(LabeledImage {
                file,
                image,
                label: entry.class,
                parts,
            })
        })
        .collect()
}

/// Every `.png` or `.ppm` file in a directory, sorted by name.
pub fn load_images(dir: &Path) -> Result<Vec<ImageFile>> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| {
        p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png") || e.eq_ignore_ascii_case("ppm"))
    });
    paths.sort();
    paths.iter().map(|p| decode_image(&fs::read(p)?)).collect()
}

/// Writes plain images as numbered PNGs.
pub fn save_images(dir: &Path, images: &[ImageFile]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, image) in images.iter().enumerate() {
        fs::write(dir.join(file_name(i)), encode_png(image)?)?;
    }
    Ok(())
}
