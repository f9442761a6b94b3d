//! Model-free operations from `vcc-core`, exported to JavaScript.
//!
//! Each export has a plain Rust twin returning `Result<_, String>` so the
//! logic is testable off the browser.

use vcc_core::concepts::{pruning_threshold, PruningConfig};
use vcc_core::netcore::vgg16_architecture;
use vcc_core::segment::{mask_slic, MaskGrid};
use vcc_core::toylab::{render_scene, toy_architecture, ClassSpec, Color, Shape, SCENE_SIZE};
use wasm_bindgen::prelude::*;

/// Distinct overlay colours, cycled when `k` exceeds the palette.
const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

/// `steps + 1` evenly spaced samples of the pruning threshold on `[0, max_t]`.
pub fn pruning_samples(max_t: f64, steps: usize) -> Result<Vec<f64>, String> {
    if !(max_t.is_finite() && max_t >= 0.0) || steps == 0 {
        return Err(format!("need max_t >= 0 and steps > 0, got {max_t} and {steps}"));
    }
    let cfg = PruningConfig::default();
    Ok((0..=steps)
        .map(|i| pruning_threshold(max_t * i as f64 / steps as f64, &cfg))
        .collect())
}

/// Receptive field of each layer index in the named architecture
/// (`"toy"` or `"vgg16"`).
pub fn layer_receptive_fields(arch: &str, layers: &[u32]) -> Result<Vec<u32>, String> {
    let arch = match arch {
        "toy" => toy_architecture(3),
        "vgg16" => vgg16_architecture(),
        other => return Err(format!("unknown architecture {other:?}")),
    };
    layers
        .iter()
        .map(|&l| arch.receptive_field(l as usize).map(|r| r as u32).map_err(|e| e.to_string()))
        .collect()
}

fn parse_shape(name: &str) -> Result<Shape, String> {
    match name {
        "circle" => Ok(Shape::Circle),
        "square" => Ok(Shape::Square),
        "triangle" => Ok(Shape::Triangle),
        _ => Err(format!("unknown shape {name:?}")),
    }
}

fn parse_color(name: &str) -> Result<Color, String> {
    match name {
        "red" => Ok(Color::Red),
        "green" => Ok(Color::Green),
        "blue" => Ok(Color::Blue),
        _ => Err(format!("unknown colour {name:?}")),
    }
}

/// A segmented toy scene: the RGBA overlay and the per-pixel segment labels.
pub struct SceneSegmentation {
    pub rgba: Vec<u8>,
    pub labels: Vec<u8>,
}

/// Renders scene `index` of a shape/colour class and splits it into `k`
/// segments with mask-SLIC on raw RGB.
pub fn segment_toy_scene(
    shape: &str,
    color: &str,
    index: u32,
    k: usize,
    compactness: f32,
) -> Result<SceneSegmentation, String> {
    let spec = ClassSpec::new(parse_shape(shape)?, parse_color(color)?);
    let (image, _) = render_scene(0, spec, index as u64);
    let region = MaskGrid::full(SCENE_SIZE, SCENE_SIZE);
    let masks = mask_slic(&image.to_tensor(), &region, k, compactness, index as u64).map_err(|e| e.to_string())?;
    let mut labels = vec![0u8; SCENE_SIZE * SCENE_SIZE];
    for (label, m) in masks.iter().enumerate() {
        for i in m.active_indices() {
            labels[i] = label as u8;
        }
    }
    let mut rgba = Vec::with_capacity(labels.len() * 4);
    for (px, &label) in image.pixels().chunks_exact(3).zip(&labels) {
        let tint = PALETTE[label as usize % PALETTE.len()];
        for c in 0..3 {
            rgba.push(((px[c] as u16 + tint[c] as u16) / 2) as u8);
        }
        rgba.push(255);
    }
    Ok(SceneSegmentation { rgba, labels })
}

#[wasm_bindgen]
pub fn pruning_curve(max_t: f64, steps: usize) -> Result<Vec<f64>, JsError> {
    pruning_samples(max_t, steps).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn receptive_fields(arch: &str, layers: &[u32]) -> Result<Vec<u32>, JsError> {
    layer_receptive_fields(arch, layers).map_err(|e| JsError::new(&e))
}

/// RGBA pixels of a `SCENE_SIZE`-square scene tinted by segment.
#[wasm_bindgen]
pub fn segment_scene(shape: &str, color: &str, index: u32, k: usize, compactness: f32) -> Result<Vec<u8>, JsError> {
    segment_toy_scene(shape, color, index, k, compactness)
        .map(|s| s.rgba)
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn scene_size() -> usize {
    SCENE_SIZE
}
