//! Minimal layered network engine.
//!
//! Layer `i` of a [`LayeredModel`] maps the output of layer `i - 1` (or the
//! input image for `i = 0`) to its own output, so "activation at layer `i`"
//! always means the output of layer `i`. The final layer emits class logits.
//!
//! Besides plain evaluation the engine provides reverse-mode vector–Jacobian
//! products: the distance gradient used for interlayer sensitivities, class
//! logit gradients, and weight gradients for training.

pub mod gradcheck;
mod layer;
mod model;

pub use layer::{LayerParams, LayerSpec, ParamGrads};
pub use model::{argmax, Architecture, LayeredModel, WeightGrads};

pub(crate) use layer::gap_channels;

/// VGG16 layer layout (torchvision `features` indexing followed by the
/// classifier), architecture only.
pub const VGG16_MANIFEST: &str = include_str!("../../assets/vgg16_manifest.json");

pub fn vgg16_architecture() -> Architecture {
    serde_json::from_str(VGG16_MANIFEST).expect("bundled manifest parses")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::TensorF32;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn arch(input: [usize; 3], layers: Vec<LayerSpec>, classes: usize) -> Architecture {
        Architecture {
            input_shape: input,
            layers,
            class_count: classes,
            tap_layers: vec![],
        }
    }

    fn random_params(layers: &[LayerSpec], rng: &mut ChaCha8Rng) -> Vec<LayerParams> {
        layers
            .iter()
            .map(|spec| {
                let (nw, nb) = spec.param_counts();
                LayerParams {
                    weight: (0..nw).map(|_| rng.random_range(-0.5..0.5)).collect(),
                    bias: (0..nb).map(|_| rng.random_range(-0.1..0.1)).collect(),
                }
            })
            .collect()
    }

    fn conv(cin: usize, cout: usize, k: usize, s: usize, p: usize) -> LayerSpec {
        LayerSpec::Conv2d {
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            stride: s,
            padding: p,
        }
    }

    fn small_net(seed: u64) -> (LayeredModel, ChaCha8Rng) {
        let layers = vec![
            conv(3, 4, 3, 1, 1),
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { kernel: 2, stride: 2 },
            conv(4, 5, 3, 1, 1),
            LayerSpec::Relu,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Dense {
                in_features: 5,
                out_features: 3,
            },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = random_params(&layers, &mut rng);
        (LayeredModel::new(arch([3, 8, 8], layers, 3), params).unwrap(), rng)
    }

    fn random_image(shape: [usize; 3], rng: &mut ChaCha8Rng) -> TensorF32 {
        let n = shape.iter().product();
        TensorF32::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn relu_layer_forward() {
        let layers = vec![
            LayerSpec::Flatten,
            LayerSpec::Relu,
            LayerSpec::Dense {
                in_features: 2,
                out_features: 2,
            },
        ];
        let params = vec![
            LayerParams::default(),
            LayerParams::default(),
            LayerParams {
                weight: vec![1.0, 0.0, 0.0, 1.0],
                bias: vec![0.0, 0.0],
            },
        ];
        let m = LayeredModel::new(arch([2, 1, 1], layers, 2), params).unwrap();
        let x = TensorF32::new(vec![2, 1, 1], vec![-1.0, 2.0]).unwrap();
        assert_eq!(m.forward_to(&x, 1).unwrap().data(), &[0.0, 2.0]);

        let z = TensorF32::new(vec![1], vec![-3.0]).unwrap();
        let single = LayeredModel::new(
            arch(
                [1, 1, 1],
                vec![
                    LayerSpec::Flatten,
                    LayerSpec::Relu,
                    LayerSpec::Dense {
                        in_features: 1,
                        out_features: 1,
                    },
                ],
                1,
            ),
            vec![
                LayerParams::default(),
                LayerParams::default(),
                LayerParams {
                    weight: vec![1.0],
                    bias: vec![0.0],
                },
            ],
        )
        .unwrap();
        assert_eq!(single.forward_between(&z, 0, 1).unwrap().data(), &[0.0]);
    }

    #[test]
    fn one_by_one_conv_scales() {
        let layers = vec![conv(1, 1, 1, 1, 0), LayerSpec::GlobalAvgPool];
        let params = vec![
            LayerParams {
                weight: vec![2.0],
                bias: vec![0.0],
            },
            LayerParams::default(),
        ];
        let m = LayeredModel::new(arch([1, 2, 2], layers, 1), params).unwrap();
        let x = TensorF32::filled(vec![1, 2, 2], 1.0);
        assert_eq!(m.forward_to(&x, 0).unwrap().data(), &[2.0; 4]);
    }

    #[test]
    fn three_by_three_conv_matches_hand_computation() {
        let layers = vec![conv(1, 1, 3, 1, 1), LayerSpec::GlobalAvgPool];
        let params = vec![
            LayerParams {
                weight: vec![1.0, 0.0, -1.0, 2.0, 0.0, -2.0, 1.0, 0.0, -1.0],
                bias: vec![0.5],
            },
            LayerParams::default(),
        ];
        let m = LayeredModel::new(arch([1, 5, 5], layers, 1), params).unwrap();
        let mut data: Vec<f32> = (0..25).map(|i| i as f32 / 10.0).collect();
        data[2 * 5 + 3] = -1.5;
        let x = TensorF32::new(vec![1, 5, 5], data).unwrap();
        // Direct correlation with zero padding, evaluated elementwise offline.
        let expected = [
            [-0.3, -0.1, -0.1, -0.1, 1.9],
            [-1.9, -0.3, 2.5, -0.3, 0.9],
            [-3.9, -0.3, 5.3, -0.3, 0.1],
            [-5.9, -0.3, 2.5, -0.3, 4.9],
            [-5.3, -0.1, -0.1, -0.1, 6.9],
        ];
        let out = m.forward_to(&x, 0).unwrap();
        for (got, want) in out.data().iter().zip(expected.iter().flatten()) {
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }
    }

    #[test]
    fn identity_dense_logits_equal_input() {
        let layers = vec![
            LayerSpec::Flatten,
            LayerSpec::Dense {
                in_features: 4,
                out_features: 4,
            },
        ];
        let mut w = vec![0.0; 16];
        for i in 0..4 {
            w[i * 5] = 1.0;
        }
        let params = vec![
            LayerParams::default(),
            LayerParams {
                weight: w,
                bias: vec![0.0; 4],
            },
        ];
        let m = LayeredModel::new(arch([1, 2, 2], layers, 4), params).unwrap();
        let x = TensorF32::new(vec![1, 2, 2], vec![0.5, -1.0, 3.0, 2.0]).unwrap();
        assert_eq!(m.forward_full(&x).unwrap(), vec![0.5, -1.0, 3.0, 2.0]);
    }

    #[test]
    fn composition_and_errors() {
        let (m, mut rng) = small_net(3);
        for _ in 0..10 {
            let x = random_image([3, 8, 8], &mut rng);
            for j in 0..m.layer_count() - 1 {
                let zj = m.forward_to(&x, j).unwrap();
                for l in j + 1..m.layer_count() {
                    let direct = m.forward_to(&x, l).unwrap();
                    let composed = m.forward_between(&zj, j, l).unwrap();
                    assert_eq!(direct.data(), composed.data());
                }
            }
            assert_eq!(m.forward_full(&x).unwrap().len(), 3);
        }
        let x = random_image([3, 8, 8], &mut rng);
        assert!(matches!(
            m.forward_to(&x, 7),
            Err(crate::VccError::Index { .. })
        ));
        let z = m.forward_to(&x, 2).unwrap();
        assert!(matches!(
            m.forward_between(&z, 2, 2),
            Err(crate::VccError::Ordering { .. })
        ));
        let wrong = random_image([3, 4, 4], &mut rng);
        assert!(matches!(
            m.forward_to(&wrong, 1),
            Err(crate::VccError::InvalidInput(_))
        ));
    }

    #[test]
    fn distance_grad_identity_layers() {
        // Two relus over a strictly positive activation behave like identity.
        let layers = vec![
            LayerSpec::Relu,
            LayerSpec::Relu,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Dense {
                in_features: 2,
                out_features: 1,
            },
        ];
        let params = vec![
            LayerParams::default(),
            LayerParams::default(),
            LayerParams::default(),
            LayerParams {
                weight: vec![1.0, 1.0],
                bias: vec![0.0],
            },
        ];
        let m = LayeredModel::new(arch([2, 1, 2], layers, 1), params).unwrap();
        let act = TensorF32::new(vec![2, 1, 2], vec![3.0, 3.0, 1e-3, 1e-3]).unwrap();
        // pooled = [3, 0.001]; centroid [0, 0.001] -> direction [1, 0].
        let g = m.distance_grad(&act, 0, 1, &[0.0, 1e-3]).unwrap();
        assert!((g.data()[0] - 0.5).abs() < 1e-6);
        assert!((g.data()[1] - 0.5).abs() < 1e-6);
        assert!(g.data()[2].abs() < 1e-6 && g.data()[3].abs() < 1e-6);

        let zero = m.distance_grad(&act, 0, 1, &[3.0, 1e-3]).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn logit_grad_of_linear_head_is_weight_row() {
        let layers = vec![
            LayerSpec::Flatten,
            LayerSpec::Dense {
                in_features: 3,
                out_features: 2,
            },
        ];
        let params = vec![
            LayerParams::default(),
            LayerParams {
                weight: vec![1.0, -2.0, 0.5, 4.0, 0.0, -1.0],
                bias: vec![0.0, 0.0],
            },
        ];
        let m = LayeredModel::new(arch([3, 1, 1], layers, 2), params).unwrap();
        let z = TensorF32::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap();
        assert_eq!(m.logit_grad(&z, 0, 1).unwrap().data(), &[4.0, 0.0, -1.0]);
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        let (mut m, mut rng) = small_net(11);
        let batch: Vec<TensorF32> = (0..3).map(|_| random_image([3, 8, 8], &mut rng)).collect();
        let labels = vec![0, 2, 1];
        let grads = m.backprop_weights(&batch, &labels).unwrap();
        let loss_at = |m: &LayeredModel| m.backprop_weights(&batch, &labels).unwrap().loss;
        let h = 1e-2f32;
        for (layer, idx) in [(0usize, 5usize), (3, 17), (6, 4)] {
            let orig = m.params()[layer].weight[idx];
            m.params_mut()[layer].weight[idx] = orig + h;
            let up = loss_at(&m);
            m.params_mut()[layer].weight[idx] = orig - h;
            let down = loss_at(&m);
            m.params_mut()[layer].weight[idx] = orig;
            let fd = (up - down) / (2.0 * h as f64);
            let an = grads.layers[layer].weight[idx];
            assert!((fd - an).abs() < 1e-3 * (1.0 + an.abs()), "layer {layer}: {fd} vs {an}");
        }
        let orig = m.params()[6].bias[1];
        m.params_mut()[6].bias[1] = orig + h;
        let up = loss_at(&m);
        m.params_mut()[6].bias[1] = orig - h;
        let down = loss_at(&m);
        let fd = (up - down) / (2.0 * h as f64);
        assert!((fd - grads.layers[6].bias[1]).abs() < 1e-3);
    }

    #[test]
    fn receptive_fields() {
        let two = arch([1, 32, 32], vec![conv(1, 1, 3, 1, 1), conv(1, 1, 3, 1, 1)], 1);
        assert_eq!(two.receptive_field(1).unwrap(), 5);
        let one = arch([1, 32, 32], vec![conv(1, 1, 1, 1, 0)], 1);
        assert_eq!(one.receptive_field(0).unwrap(), 1);
        let with_dense = arch([1, 4, 4], vec![LayerSpec::Flatten, LayerSpec::Relu], 1);
        assert!(matches!(
            with_dense.receptive_field(1),
            Err(crate::VccError::UnsupportedLayer { index: 0, .. })
        ));
        let clamp = arch([1, 6, 6], vec![conv(1, 1, 5, 1, 2), conv(1, 1, 5, 1, 2)], 1);
        assert_eq!(clamp.receptive_field(1).unwrap(), 6);
    }

    #[test]
    fn receptive_field_nondecreasing_on_vgg_layout() {
        let manifest: serde_json::Value = serde_json::from_str(VGG16_MANIFEST).unwrap();
        let layers: Vec<LayerSpec> = serde_json::from_value(manifest["layers"].clone()).unwrap();
        let a = arch([3, 224, 224], layers, 1000);
        let rfs: Vec<usize> = (0..31).map(|i| a.receptive_field(i).unwrap()).collect();
        assert!(rfs.windows(2).all(|w| w[0] <= w[1]));
        // Standard recursion for torchvision-indexed VGG16 feature taps.
        assert_eq!([rfs[8], rfs[15], rfs[22], rfs[29]], [14, 40, 92, 196]);
    }

    #[test]
    fn determinism_bitwise() {
        let (m, mut rng) = small_net(5);
        let x = random_image([3, 8, 8], &mut rng);
        let a = m.forward_full(&x).unwrap();
        let b = m.forward_full(&x).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
