//! Finite-difference check of [`LayeredModel::distance_grad`].
//!
//! Central differences are taken on an independent `f64` forward pass.
//! Piecewise-linear layers make the difference meaningless when the probe
//! crosses a ReLU hinge or changes a max-pool winner, so such probes are
//! detected from the activation pattern and redrawn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Architecture, LayerParams, LayerSpec, LayeredModel};
use crate::error::{Result, VccError};
use crate::rng::derive_seed;
use crate::tensor::TensorF32;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-3;
/// Pre-activations closer than this to a hinge count as a kink.
const HINGE_MARGIN: f64 = 1e-6;
const MAX_REDRAWS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub instances: usize,
    pub max_relative_error: f64,
    /// Probes redrawn because they straddled a kink.
    pub redrawn: usize,
}

/// Relative error `|a − b| / max(|a|, |b|, 1e-12)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

#[derive(Default, PartialEq)]
struct Pattern(Vec<bool>, Vec<usize>);

fn ref_forward(spec: &LayerSpec, p: &LayerParams, x: &[f64], shape: &[usize], pat: &mut Pattern) -> Vec<f64> {
    match *spec {
        LayerSpec::Conv2d {
            out_channels,
            kernel,
            stride,
            padding,
            ..
        } => {
            let (cin, h, w) = (shape[0], shape[1], shape[2]);
            let oh = (h + 2 * padding - kernel) / stride + 1;
            let ow = (w + 2 * padding - kernel) / stride + 1;
            let mut out = vec![0.0; out_channels * oh * ow];
            for oc in 0..out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = p.bias[oc] as f64;
                        for ic in 0..cin {
                            for ky in 0..kernel {
                                for kx in 0..kernel {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let wv = p.weight[((oc * cin + ic) * kernel + ky) * kernel + kx] as f64;
                                    s += wv * x[(ic * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                        out[(oc * oh + oy) * ow + ox] = s;
                    }
                }
            }
            out
        }
        LayerSpec::Relu => {
            pat.0.extend(x.iter().map(|&v| v > 0.0));
            // Near-hinge values poison the pattern so any probe through them is redrawn.
            if x.iter().any(|v| v.abs() < HINGE_MARGIN) {
                pat.1.push(usize::MAX);
            }
            x.iter().map(|&v| v.max(0.0)).collect()
        }
        LayerSpec::MaxPool2d { kernel, stride } => {
            let (c, h, w) = (shape[0], shape[1], shape[2]);
            let oh = (h - kernel) / stride + 1;
            let ow = (w - kernel) / stride + 1;
            let mut out = Vec::with_capacity(c * oh * ow);
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = (ch * h + oy * stride) * w + ox * stride;
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                let i = (ch * h + oy * stride + ky) * w + ox * stride + kx;
                                if x[i] > x[best] {
                                    best = i;
                                }
                            }
                        }
                        pat.1.push(best);
                        out.push(x[best]);
                    }
                }
            }
            out
        }
        LayerSpec::Dense {
            in_features,
            out_features,
        } => (0..out_features)
            .map(|o| {
                p.bias[o] as f64
                    + (0..in_features)
                        .map(|i| p.weight[o * in_features + i] as f64 * x[i])
                        .sum::<f64>()
            })
            .collect(),
        LayerSpec::Flatten => x.to_vec(),
        LayerSpec::GlobalAvgPool => {
            let (c, plane) = (shape[0], shape[1] * shape[2]);
            (0..c)
                .map(|ch| x[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64)
                .collect()
        }
    }
}

/// `‖pool(f(x)) − q‖₂` in `f64`, with the activation pattern of the path.
fn ref_distance(model: &LayeredModel, x: &[f64], from: usize, to: usize, q: &[f32]) -> Result<(f64, Pattern)> {
    let mut pat = Pattern::default();
    let mut cur = x.to_vec();
    for i in from + 1..=to {
        let shape = model.output_shape(i - 1)?.to_vec();
        cur = ref_forward(&model.layers()[i], &model.params()[i], &cur, &shape, &mut pat);
    }
    let out_shape = model.output_shape(to)?;
    let pooled: Vec<f64> = if out_shape.len() == 3 {
        let plane = out_shape[1] * out_shape[2];
        cur.chunks(plane).map(|c| c.iter().sum::<f64>() / plane as f64).collect()
    } else {
        cur
    };
    let d = pooled
        .iter()
        .zip(q)
        .map(|(a, &b)| (a - b as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok((d, pat))
}

/// A random small conv net with a GAP/dense head.
pub fn random_instance_model(seed: u64) -> Result<LayeredModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c0 = rng.random_range(1..=3);
    let size = [6, 7, 8][rng.random_range(0..3)];
    let c1 = rng.random_range(2..=4);
    let c2 = rng.random_range(2..=5);
    let classes = rng.random_range(2..=4);
    let conv = |cin, cout, kernel, stride, padding| LayerSpec::Conv2d {
        in_channels: cin,
        out_channels: cout,
        kernel,
        stride,
        padding,
    };
    let mut layers = vec![conv(c0, c1, 3, 1, 1), LayerSpec::Relu];
    if rng.random_bool(0.5) {
        layers.push(LayerSpec::MaxPool2d { kernel: 2, stride: 2 });
    }
    let stride = rng.random_range(1..=2);
    layers.extend([conv(c1, c2, 3, stride, 1), LayerSpec::Relu, LayerSpec::GlobalAvgPool]);
    layers.push(LayerSpec::Dense {
        in_features: c2,
        out_features: classes,
    });
    let params = layers
        .iter()
        .map(|spec| {
            let (nw, nb) = spec.param_counts();
            LayerParams {
                weight: (0..nw).map(|_| rng.random_range(-0.6f32..0.6)).collect(),
                bias: (0..nb).map(|_| rng.random_range(-0.2f32..0.2)).collect(),
            }
        })
        .collect();
    let arch = Architecture {
        input_shape: [c0, size, size],
        layers,
        class_count: classes,
        tap_layers: vec![],
    };
    LayeredModel::new(arch, params)
}

/// Largest relative error between the directional derivative of
/// `distance_grad` and a central difference, for one model and
/// `probes` random `(input, from, to, centroid, direction)` draws.
pub fn check_model(model: &LayeredModel, probes: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_layers = model.layer_count();
    if n_layers < 2 {
        return Err(VccError::InvalidInput("gradient check needs at least two layers".into()));
    }
    let [c, h, w] = model.input_shape();
    let mut worst = 0.0f64;
    let mut redrawn = 0;
    let mut done = 0;
    while done < probes {
        if redrawn > MAX_REDRAWS * probes.max(1) {
            return Err(VccError::NumericValidation("too many probes straddle kinks".into()));
        }
        let image = TensorF32::new(
            vec![c, h, w],
            (0..c * h * w).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        )?;
        let from = rng.random_range(0..n_layers - 1);
        let to = rng.random_range(from + 1..n_layers);
        let act = model.forward_to(&image, from)?;
        let pooled_dim = model.output_shape(to)?[0];
        let q: Vec<f32> = (0..pooled_dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let mut u: Vec<f64> = (0..act.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        u.iter_mut().for_each(|v| *v /= norm);

        let x: Vec<f64> = act.data().iter().map(|&v| v as f64).collect();
        let shifted = |s: f64| x.iter().zip(&u).map(|(a, b)| a + s * b).collect::<Vec<f64>>();
        let (_, p0) = ref_distance(model, &x, from, to, &q)?;
        let (dp, pp) = ref_distance(model, &shifted(FD_STEP), from, to, &q)?;
        let (dm, pm) = ref_distance(model, &shifted(-FD_STEP), from, to, &q)?;
        if p0.1.contains(&usize::MAX) || p0 != pp || p0 != pm {
            redrawn += 1;
            continue;
        }
        let fd = (dp - dm) / (2.0 * FD_STEP);
        let g = model.distance_grad(&act, from, to, &q)?;
        let analytic: f64 = g.data().iter().zip(&u).map(|(&a, b)| a as f64 * b).sum();
        worst = worst.max(relative_error(analytic, fd));
        done += 1;
    }
    Ok(GradCheckReport {
        instances: probes,
        max_relative_error: worst,
        redrawn,
    })
}

/// One probe on each of `instances` random models derived from `seed`.
pub fn check_random_instances(instances: usize, seed: u64) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        instances,
        max_relative_error: 0.0,
        redrawn: 0,
    };
    for i in 0..instances as u64 {
        let model = random_instance_model(derive_seed(seed, &[i, 0]))?;
        let r = check_model(&model, 1, derive_seed(seed, &[i, 1]))?;
        report.max_relative_error = report.max_relative_error.max(r.max_relative_error);
        report.redrawn += r.redrawn;
    }
    Ok(report)
}
