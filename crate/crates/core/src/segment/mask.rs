use serde::{Deserialize, Serialize};

use crate::error::{Result, VccError};
use crate::io::ImageFile;

/// A `{0,1}` grid at some layer's spatial resolution.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskGrid {
    pub height: usize,
    pub width: usize,
    cells: Vec<bool>,
}

impl MaskGrid {
    pub fn new(height: usize, width: usize, cells: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || cells.len() != height * width {
            return Err(VccError::InvalidInput(format!(
                "{height}×{width} mask needs {} cells, got {}",
                height * width,
                cells.len()
            )));
        }
        Ok(Self { height, width, cells })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            cells: vec![true; height * width],
        }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            cells: vec![false; height * width],
        }
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.cells[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.cells[y * self.width + x] = v;
    }

    pub fn active_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn active_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.cells.iter().enumerate().filter(|(_, &c)| c).map(|(i, _)| i)
    }

    pub fn is_subset_of(&self, other: &MaskGrid) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.cells.iter().zip(&other.cells).all(|(&a, &b)| !a || b)
    }

    /// Run-length encoding as alternating run lengths, starting with a run of zeros.
    pub fn to_rle(&self) -> Vec<usize> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0;
        for &c in &self.cells {
            if c == current {
                len += 1;
            } else {
                runs.push(len);
                current = c;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    pub fn from_rle(height: usize, width: usize, runs: &[usize]) -> Result<Self> {
        let mut cells = Vec::with_capacity(height * width);
        for (i, &r) in runs.iter().enumerate() {
            cells.extend(std::iter::repeat_n(i % 2 == 1, r));
        }
        Self::new(height, width, cells)
    }
}

/// Bilinear interpolation of the `{0,1}` field (half-pixel centres, clamped
/// borders) followed by a `≥ 0.5` threshold. Falls back to nearest-neighbour
/// sampling in the rare case the threshold empties a nonempty mask.
pub fn upsample_mask(mask: &MaskGrid, target_h: usize, target_w: usize) -> Result<MaskGrid> {
    if target_h < mask.height || target_w < mask.width {
        return Err(VccError::InvalidTarget(format!(
            "cannot upsample {}×{} to smaller {}×{}",
            mask.height, mask.width, target_h, target_w
        )));
    }
    if target_h == mask.height && target_w == mask.width {
        return Ok(mask.clone());
    }
    let field: Vec<f32> = mask.cells.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
    let up = resize_plane(&field, mask.height, mask.width, target_h, target_w);
    let mut cells: Vec<bool> = up.iter().map(|&v| v >= 0.5).collect();
    if mask.active_count() > 0 && !cells.iter().any(|&c| c) {
        cells = (0..target_h * target_w)
            .map(|i| {
                let (y, x) = (i / target_w, i % target_w);
                mask.get(y * mask.height / target_h, x * mask.width / target_w)
            })
            .collect();
    }
    MaskGrid::new(target_h, target_w, cells)
}

/// Bilinear resize of one plane with half-pixel centres and clamped borders.
pub fn resize_plane(src: &[f32], h: usize, w: usize, th: usize, tw: usize) -> Vec<f32> {
    if h == th && w == tw {
        return src.to_vec();
    }
    let axis = |dst: usize, from: usize, to: usize| -> (usize, usize, f32) {
        let s = ((dst as f64 + 0.5) * from as f64 / to as f64 - 0.5).clamp(0.0, (from - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(from - 1);
        (i0, i1, (s - i0 as f64) as f32)
    };
    let cols: Vec<_> = (0..tw).map(|x| axis(x, w, tw)).collect();
    let mut out = Vec::with_capacity(th * tw);
    for y in 0..th {
        let (y0, y1, fy) = axis(y, h, th);
        for &(x0, x1, fx) in &cols {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Keeps the image inside the mask and zeroes everything else.
pub fn rgb_mask(image: &ImageFile, mask: &MaskGrid) -> Result<ImageFile> {
    if mask.height != image.height() || mask.width != image.width() {
        return Err(VccError::InvalidInput(format!(
            "mask {}×{} does not match image {}×{}",
            mask.height,
            mask.width,
            image.height(),
            image.width()
        )));
    }
    let pixels = image
        .pixels()
        .chunks_exact(3)
        .zip(&mask.cells)
        .flat_map(|(px, &m)| if m { [px[0], px[1], px[2]] } else { [0, 0, 0] })
        .collect();
    ImageFile::new(image.width(), image.height(), pixels)
}
