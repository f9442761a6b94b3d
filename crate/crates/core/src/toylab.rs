//! Synthetic scenes with known parts and a small CNN trained on them.
//!
//! Every scene is a 64×64 image of one filled shape (circle, square or
//! triangle) in one fill color (red, green or blue) over one of four
//! procedural background textures. A class is a `(shape, color)` pair, so
//! color, shape, texture and background concepts are known by construction.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VccError};
use crate::io::ImageFile;
use crate::netcore::{argmax, Architecture, LayerParams, LayerSpec, LayeredModel};
use crate::rng::{rng_for, tag};
use crate::tensor::TensorF32;

pub const SCENE_SIZE: usize = 64;
pub const TEXTURE_COUNT: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Green, Color::Blue];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClassSpec {
    pub shape: Shape,
    pub color: Color,
}

impl ClassSpec {
    pub fn new(shape: Shape, color: Color) -> Self {
        Self { shape, color }
    }

    pub fn name(&self) -> String {
        format!("{:?}-{:?}", self.color, self.shape).to_lowercase()
    }

    fn id(&self) -> u64 {
        self.shape as u64 * 3 + self.color as u64
    }
}

/// Ground-truth part annotations of a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartAnnotation {
    pub shape: Shape,
    pub color: Color,
    pub texture: u8,
    /// Row-major 64×64 shape mask.
    #[serde(skip)]
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub image: ImageFile,
    pub label: usize,
    pub parts: PartAnnotation,
}

impl SyntheticScene {
    pub fn mask_area_fraction(&self) -> f64 {
        self.parts.mask.iter().filter(|&&m| m).count() as f64 / (SCENE_SIZE * SCENE_SIZE) as f64
    }
}

/// Renders one scene. Pure function of `(seed, class, index)`.
pub fn render_scene(seed: u64, class: ClassSpec, index: u64) -> (ImageFile, PartAnnotation) {
    let mut rng = rng_for(seed, &[tag("scene"), class.id(), index]);
    let texture = rng.random_range(0..TEXTURE_COUNT);
    let n = SCENE_SIZE;

    let mask = shape_mask(class.shape, &mut rng);
    let base = fill_color(class.color, &mut rng);
    let (bg_a, bg_b) = (
        rng.random_range(70.0f32..120.0),
        rng.random_range(140.0f32..190.0),
    );
    let tint: [f32; 3] = [
        rng.random_range(-12.0..12.0),
        rng.random_range(-12.0..12.0),
        rng.random_range(-12.0..12.0),
    ];
    let phase = rng.random_range(0..8usize);
    let period = rng.random_range(6..11usize);

    let mut pixels = vec![0u8; n * n * 3];
    for y in 0..n {
        for x in 0..n {
            let i = y * n + x;
            let jitter: f32 = rng.random_range(-10.0..10.0);
            let rgb = if mask[i] {
                [base[0] + jitter, base[1] + jitter, base[2] + jitter]
            } else {
                let on = match texture {
                    0 => ((y + phase) / (period / 2).max(1)) % 2 == 0,
                    1 => ((x + y + phase) / (period / 2).max(1)) % 2 == 0,
                    2 => (((x + phase) / period) + ((y + phase) / period)) % 2 == 0,
                    _ => rng.random_bool(0.35),
                };
                let v = if on { bg_b } else { bg_a } + jitter;
                [v + tint[0], v + tint[1], v + tint[2]]
            };
            for c in 0..3 {
                pixels[i * 3 + c] = rgb[c].round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    let image = ImageFile::new(n, n, pixels).expect("fixed dimensions");
    let parts = PartAnnotation {
        shape: class.shape,
        color: class.color,
        texture,
        mask,
    };
    (image, parts)
}

fn fill_color(color: Color, rng: &mut impl Rng) -> [f32; 3] {
    let hi = rng.random_range(190.0f32..245.0);
    let lo1 = rng.random_range(0.0f32..50.0);
    let lo2 = rng.random_range(0.0f32..50.0);
    match color {
        Color::Red => [hi, lo1, lo2],
        Color::Green => [lo1, hi, lo2],
        Color::Blue => [lo1, lo2, hi],
    }
}

fn shape_mask(shape: Shape, rng: &mut impl Rng) -> Vec<bool> {
    let n = SCENE_SIZE as f32;
    let mut mask = vec![false; SCENE_SIZE * SCENE_SIZE];
    // Half-extent of the bounding box, chosen so the filled area stays well
    // inside [5%, 60%] of the image.
    let half = match shape {
        Shape::Circle => rng.random_range(11.0f32..23.0),
        Shape::Square => rng.random_range(9.5f32..20.0),
        Shape::Triangle => rng.random_range(13.0f32..26.0),
    };
    let cx = rng.random_range(half + 1.0..n - half - 1.0);
    let cy = rng.random_range(half + 1.0..n - half - 1.0);
    for y in 0..SCENE_SIZE {
        for x in 0..SCENE_SIZE {
            let px = x as f32 + 0.5 - cx;
            let py = y as f32 + 0.5 - cy;
            let inside = match shape {
                Shape::Circle => px * px + py * py <= half * half,
                Shape::Square => px.abs() <= half && py.abs() <= half,
                // Apex at the top, base at the bottom of the bounding box.
                Shape::Triangle => {
                    let t = (py + half) / (2.0 * half);
                    (0.0..=1.0).contains(&t) && px.abs() <= t * half
                }
            };
            mask[y * SCENE_SIZE + x] = inside;
        }
    }
    mask
}

/// Labeled scenes, `per_class_count` per class, ordered by class then index.
pub fn generate_dataset(seed: u64, classes: &[ClassSpec], per_class_count: usize) -> Vec<SyntheticScene> {
    let jobs: Vec<(usize, usize)> = (0..classes.len())
        .flat_map(|c| (0..per_class_count).map(move |i| (c, i)))
        .collect();
    jobs.into_par_iter()
        .map(|(label, i)| {
            let (image, parts) = render_scene(seed, classes[label], i as u64);
            SyntheticScene { image, label, parts }
        })
        .collect()
}

/// Concept-neutral negatives: half uniform noise, half scenes whose
/// `(shape, color)` pair is not one of the training classes.
pub fn random_pool(seed: u64, training_classes: &[ClassSpec], count: usize) -> Vec<ImageFile> {
    let excluded: Vec<ClassSpec> = Shape::ALL
        .iter()
        .flat_map(|&s| Color::ALL.iter().map(move |&c| ClassSpec::new(s, c)))
        .filter(|c| !training_classes.contains(c))
        .collect();
    (0..count)
        .into_par_iter()
        .map(|i| {
            if i % 2 == 0 || excluded.is_empty() {
                let mut rng = rng_for(seed, &[tag("noise"), i as u64]);
                let pixels = (0..SCENE_SIZE * SCENE_SIZE * 3).map(|_| rng.random::<u8>()).collect();
                ImageFile::new(SCENE_SIZE, SCENE_SIZE, pixels).expect("fixed dimensions")
            } else {
                let class = excluded[(i / 2) % excluded.len()];
                render_scene(seed ^ 0x5eed_0f_ba11, class, i as u64).0
            }
        })
        .collect()
}

/// The toy classifier: six conv blocks, four tap layers, GAP and a linear head.
pub fn toy_architecture(class_count: usize) -> Architecture {
    let conv = |cin, cout| LayerSpec::Conv2d {
        in_channels: cin,
        out_channels: cout,
        kernel: 3,
        stride: 1,
        padding: 1,
    };
    let pool = || LayerSpec::MaxPool2d { kernel: 2, stride: 2 };
    let layers = vec![
        conv(3, 8),
        LayerSpec::Relu,
        pool(),
        conv(8, 12),
        LayerSpec::Relu, // 4: 12×32×32
        pool(),
        conv(12, 16),
        LayerSpec::Relu, // 7: 16×16×16
        pool(),
        conv(16, 24),
        LayerSpec::Relu, // 10: 24×8×8
        conv(24, 32),
        LayerSpec::Relu,
        conv(32, 32),
        LayerSpec::Relu, // 14: 32×8×8
        LayerSpec::GlobalAvgPool,
        LayerSpec::Dense {
            in_features: 32,
            out_features: class_count,
        },
    ];
    Architecture {
        input_shape: [3, SCENE_SIZE, SCENE_SIZE],
        layers,
        class_count,
        tap_layers: vec![4, 7, 10, 14],
    }
}

/// He-normal weights, zero biases.
pub fn init_model(arch: Architecture, seed: u64) -> Result<LayeredModel> {
    let mut rng = rng_for(seed, &[tag("init")]);
    let params = arch
        .layers
        .iter()
        .map(|spec| {
            let (nw, nb) = spec.param_counts();
            let fan_in = match *spec {
                LayerSpec::Conv2d {
                    in_channels, kernel, ..
                } => in_channels * kernel * kernel,
                LayerSpec::Dense { in_features, .. } => in_features,
                _ => 1,
            };
            let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("positive std");
            LayerParams {
                weight: (0..nw).map(|_| normal.sample(&mut rng)).collect(),
                bias: vec![0.0; nb],
            }
        })
        .collect();
    LayeredModel::new(arch, params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecipe {
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    /// Minibatch gradients with a larger global L2 norm are rescaled to it.
    pub clip_norm: f64,
    /// Below this train accuracy training reports failure.
    pub min_accuracy: f64,
}

impl Default for TrainRecipe {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 30,
            batch_size: 32,
            clip_norm: 1.0,
            min_accuracy: 0.9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: LayeredModel,
    pub train_accuracy: f64,
    pub epoch_losses: Vec<f64>,
}

/// Classification accuracy of a model over labeled tensors.
pub fn accuracy(model: &LayeredModel, images: &[TensorF32], labels: &[usize]) -> Result<f64> {
    let correct = images
        .par_iter()
        .zip(labels.par_iter())
        .map(|(x, &y)| Ok(usize::from(argmax(&model.forward_full(x)?) == y)))
        .collect::<Result<Vec<_>>>()?;
    Ok(correct.iter().sum::<usize>() as f64 / images.len().max(1) as f64)
}

/// Trains the toy CNN with plain minibatch SGD on softmax cross-entropy.
pub fn train_toy_cnn(dataset: &[SyntheticScene], seed: u64, recipe: &TrainRecipe) -> Result<TrainOutcome> {
    let images: Vec<ImageFile> = dataset.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<usize> = dataset.iter().map(|s| s.label).collect();
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    train_labeled(&images, &labels, class_count, seed, recipe)
}

/// Same recipe over arbitrary labeled images of the toy input size.
pub fn train_labeled(
    images: &[ImageFile],
    labels: &[usize],
    class_count: usize,
    seed: u64,
    recipe: &TrainRecipe,
) -> Result<TrainOutcome> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(VccError::InvalidInput(format!(
            "{} training images for {} labels",
            images.len(),
            labels.len()
        )));
    }
    if labels.iter().any(|&l| l >= class_count) {
        return Err(VccError::InvalidInput(format!("label out of range for {class_count} classes")));
    }
    let mut model = init_model(toy_architecture(class_count), seed)?;
    let images: Vec<TensorF32> = images.iter().map(ImageFile::to_tensor).collect();
    let labels = labels.to_vec();
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut rng = rng_for(seed, &[tag("shuffle")]);
    let mut epoch_losses = Vec::with_capacity(recipe.epochs);
    let batch_size = recipe.batch_size.max(1);

    for _ in 0..recipe.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<TensorF32> = chunk.iter().map(|&i| images[i].clone()).collect();
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let grads = model.backprop_weights(&batch, &batch_labels)?;
            epoch_loss += grads.loss * chunk.len() as f64;
            if recipe.learning_rate != 0.0 {
                let norm = grads
                    .layers
                    .iter()
                    .flat_map(|g| g.weight.iter().chain(&g.bias))
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                let scale = if recipe.clip_norm > 0.0 && norm > recipe.clip_norm {
                    recipe.clip_norm / norm
                } else {
                    1.0
                };
                let step = recipe.learning_rate as f64 * scale;
                for (p, g) in model.params_mut().iter_mut().zip(&grads.layers) {
                    for (w, gw) in p.weight.iter_mut().zip(&g.weight) {
                        *w -= (step * gw) as f32;
                    }
                    for (b, gb) in p.bias.iter_mut().zip(&g.bias) {
                        *b -= (step * gb) as f32;
                    }
                }
            }
        }
        epoch_losses.push(epoch_loss / images.len() as f64);
    }

    let train_accuracy = accuracy(&model, &images, &labels)?;
    if train_accuracy < recipe.min_accuracy {
        return Err(VccError::TrainingFailure {
            message: format!(
                "train accuracy below {:.2}; epoch losses {:?}",
                recipe.min_accuracy, epoch_losses
            ),
            accuracy: train_accuracy,
            epochs: recipe.epochs,
        });
    }
    Ok(TrainOutcome {
        model,
        train_accuracy,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_classes() -> Vec<ClassSpec> {
        vec![
            ClassSpec::new(Shape::Circle, Color::Red),
            ClassSpec::new(Shape::Square, Color::Blue),
        ]
    }

    #[test]
    fn dataset_is_deterministic_and_balanced() {
        let a = generate_dataset(9, &two_classes(), 5);
        let b = generate_dataset(9, &two_classes(), 5);
        assert_eq!(a.len(), 10);
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|s| s.label == 1).count(), 5);
        let c = generate_dataset(10, &two_classes(), 5);
        assert_ne!(a[0].image, c[0].image);
    }

    #[test]
    fn per_class_count_fifty() {
        let all: Vec<ClassSpec> = Shape::ALL
            .iter()
            .flat_map(|&s| Color::ALL.iter().map(move |&c| ClassSpec::new(s, c)))
            .collect();
        assert_eq!(generate_dataset(1, &all, 50).len(), 450);
    }

    #[test]
    fn shape_area_audit() {
        // 1000 seeds across every shape.
        for seed in 0..1000u64 {
            let class = ClassSpec::new(Shape::ALL[(seed % 3) as usize], Color::ALL[(seed / 3 % 3) as usize]);
            let (_, parts) = render_scene(seed, class, seed);
            let frac = parts.mask.iter().filter(|&&m| m).count() as f64 / 4096.0;
            assert!((0.05..=0.60).contains(&frac), "seed {seed} {class:?}: {frac}");
        }
    }

    #[test]
    fn random_pool_excludes_training_pairs() {
        let pool = random_pool(3, &two_classes(), 8);
        assert_eq!(pool.len(), 8);
        let scenes = generate_dataset(3, &two_classes(), 20);
        for img in &pool {
            assert!(scenes.iter().all(|s| &s.image != img));
        }
    }

    #[test]
    fn zero_learning_rate_fails_near_chance() {
        let data = generate_dataset(4, &two_classes(), 8);
        let recipe = TrainRecipe {
            learning_rate: 0.0,
            epochs: 1,
            ..TrainRecipe::default()
        };
        match train_toy_cnn(&data, 1, &recipe) {
            Err(VccError::TrainingFailure { accuracy, .. }) => assert!(accuracy <= 0.75, "{accuracy}"),
            other => panic!("expected training failure, got {other:?}"),
        }
    }
}
