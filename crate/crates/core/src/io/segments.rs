use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{load_images, save_images};
use super::image::ImageFile;
use crate::error::{Result, VccError};
use crate::segment::{rgb_mask, BinaryMask, ChildCount, MaskGrid, SegmentId, SegmentRecord, SegmentSet};

pub const LINEAGE_FILE: &str = "lineage.json";
const IMAGES_DIR: &str = "images";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub height: usize,
    pub width: usize,
    pub runs: Vec<usize>,
}

impl From<&MaskGrid> for RleMask {
    fn from(m: &MaskGrid) -> Self {
        Self {
            height: m.height,
            width: m.width,
            runs: m.to_rle(),
        }
    }
}

impl RleMask {
    pub fn to_grid(&self) -> Result<MaskGrid> {
        MaskGrid::from_rle(self.height, self.width, &self.runs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub id: SegmentId,
    pub image: usize,
    pub layer: usize,
    pub parent: Option<SegmentId>,
    pub mask: RleMask,
    pub image_mask: RleMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lineage {
    pub segments: Vec<LineageEntry>,
    pub child_counts: Vec<ChildCount>,
}

/// Writes the source images and a `lineage.json` of run-length masks. The
/// masked RGB segments are rebuilt from these on load.
pub fn save_segments(dir: &Path, set: &SegmentSet, images: &[ImageFile]) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_images(&dir.join(IMAGES_DIR), images)?;
    let lineage = Lineage {
        segments: set
            .layers
            .values()
            .flatten()
            .map(|r| LineageEntry {
                id: r.id,
                image: r.mask.image,
                layer: r.mask.layer,
                parent: r.mask.parent,
                mask: (&r.mask.grid).into(),
                image_mask: (&r.image_mask).into(),
            })
            .collect(),
        child_counts: set.child_counts.clone(),
    };
    fs::write(dir.join(LINEAGE_FILE), serde_json::to_vec(&lineage)?)?;
    Ok(())
}

pub fn load_segments(dir: &Path) -> Result<(SegmentSet, Vec<ImageFile>)> {
    let images = load_images(&dir.join(IMAGES_DIR))?;
    let lineage: Lineage = serde_json::from_slice(&fs::read(dir.join(LINEAGE_FILE))?)?;
    let mut set = SegmentSet {
        child_counts: lineage.child_counts,
        ..Default::default()
    };
    for e in lineage.segments {
        let image = images
            .get(e.image)
            .ok_or_else(|| VccError::Format(format!("segment {} refers to missing image {}", e.id, e.image)))?;
        let image_mask = e.image_mask.to_grid()?;
        let rgb = rgb_mask(image, &image_mask)?;
        set.layers.entry(e.layer).or_default().push(SegmentRecord {
            id: e.id,
            mask: BinaryMask {
                image: e.image,
                layer: e.layer,
                parent: e.parent,
                grid: e.mask.to_grid()?,
            },
            image_mask,
            rgb,
        });
    }
    Ok((set, images))
}
