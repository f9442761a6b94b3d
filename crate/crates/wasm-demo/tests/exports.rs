use vcc_wasm::{layer_receptive_fields, pruning_samples, segment_toy_scene};

#[test]
fn pruning_samples_hit_known_endpoints() {
    let ys = pruning_samples(2500.0, 10).unwrap();
    assert_eq!(ys.len(), 11);
    assert!((ys[0] - 6.5).abs() < 1e-9);
    let want = -102.0 + 217.0 / (1.0 + (-1.0f64).exp());
    assert!((ys[10] - want).abs() < 1e-9);
    assert!(ys.windows(2).all(|w| w[1] > w[0]));
    assert!(pruning_samples(-1.0, 4).is_err());
    assert!(pruning_samples(10.0, 0).is_err());
}

#[test]
fn receptive_fields_of_both_architectures() {
    assert_eq!(layer_receptive_fields("toy", &[4, 7, 10, 14]).unwrap(), vec![8, 18, 38, 64]);
    assert_eq!(layer_receptive_fields("vgg16", &[8, 15, 22, 29]).unwrap(), vec![14, 40, 92, 196]);
    assert!(layer_receptive_fields("resnet", &[1]).is_err());
    assert!(layer_receptive_fields("toy", &[999]).is_err());
}

#[test]
fn segmentation_covers_the_scene_with_k_labels() {
    let s = segment_toy_scene("circle", "red", 3, 4, 0.5).unwrap();
    assert_eq!(s.rgba.len(), s.labels.len() * 4);
    let mut seen = [false; 4];
    for &l in &s.labels {
        seen[l as usize] = true;
    }
    assert!(seen.iter().all(|&x| x));
    assert!(s.rgba.chunks_exact(4).all(|px| px[3] == 255));
    assert_eq!(s.labels, segment_toy_scene("circle", "red", 3, 4, 0.5).unwrap().labels);
    assert!(segment_toy_scene("hexagon", "red", 0, 2, 0.5).is_err());
}
